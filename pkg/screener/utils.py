import hashlib
import json
import re
from pathlib import Path
from typing import Any, Iterable, Iterator, List
from urllib.parse import urlparse


def validate_and_complete_url(url: str) -> str:
    """
    Validates and completes a backend endpoint URL, adding protocol if missing.

    Args:
        url (str): The URL to validate and complete.

    Returns:
        str: A complete, valid URL with protocol.

    Raises:
        ValueError: If the URL is invalid or empty.
    """
    if not url or not url.strip():
        raise ValueError("URL cannot be empty")

    url = url.strip()

    # Bare hosts get https:// (localhost gets http://) so urlparse sees a netloc
    if "://" not in url:
        prefix = "http://" if url.startswith(("localhost", "127.0.0.1")) else "https://"
        url = prefix + url

    parsed = urlparse(url)
    if parsed.scheme not in ("http", "https") or not parsed.netloc:
        raise ValueError(f"Invalid URL format: {url}")

    try:
        host = parsed.hostname or ""
        parsed.port  # raises on a non-numeric port
    except ValueError as e:
        raise ValueError(f"Invalid URL format: {url}") from e

    domain_pattern = re.compile(
        r'^(localhost|\d{1,3}(\.\d{1,3}){3}|'
        r'[a-zA-Z0-9](?:[a-zA-Z0-9-]{0,61}[a-zA-Z0-9])?(\.[a-zA-Z0-9](?:[a-zA-Z0-9-]{0,61}[a-zA-Z0-9])?)*\.[a-zA-Z]{2,})$'
    )
    if not domain_pattern.match(host):
        raise ValueError(f"Invalid domain format: {parsed.netloc}")

    return url


def sha256_text(text: str) -> str:
    """Hex SHA-256 of a UTF-8 string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_jsonl(path: Path, rows: Iterable[dict]) -> Path:
    """
    Write rows as one compact JSON object per line.

    Keys are sorted so identical rows always produce identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False))
            fh.write("\n")
    return path


def append_jsonl(path: Path, row: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False))
        fh.write("\n")


def iter_jsonl(path: Path) -> Iterator[dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_jsonl(path: Path) -> List[dict]:
    return list(iter_jsonl(path))


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    return path


def read_json(path: Path) -> Any:
    with Path(path).open("r", encoding="utf-8") as fh:
        return json.load(fh)
