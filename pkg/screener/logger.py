import logging
import os
import time
from datetime import datetime
from typing import Dict, Iterable, Optional

PACKAGE_LOGGER = "screener"


class RunLogger:
    """
    Run log for one pipeline invocation.
    Writes a timestamped text file under <output_dir>/logs/ and collects
    every record emitted by the screener package while it is open.
    """

    def __init__(self, output_dir: str, run_name: str = "features", log_dir: Optional[str] = None):
        self.output_dir = str(output_dir)
        self.run_name = run_name
        self.log_dir = log_dir or os.path.join(self.output_dir, "logs")
        self.start_time = time.time()

        os.makedirs(self.log_dir, exist_ok=True)

        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
        self.log_filename = os.path.join(self.log_dir, f"run_{self._clean(run_name)}_{timestamp}.txt")

        self.logger = logging.getLogger(PACKAGE_LOGGER)
        self.logger.setLevel(logging.INFO)

        self.file_handler = logging.FileHandler(self.log_filename, encoding="utf-8")
        self.file_handler.setLevel(logging.INFO)
        self.file_handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(message)s"))
        self.logger.addHandler(self.file_handler)

        self.log_start()

    @staticmethod
    def _clean(name: str) -> str:
        """Keep run names filesystem-safe"""
        cleaned = "".join(c if c.isalnum() or c in "-_" else "_" for c in name)
        return cleaned[:20] or "run"

    def log_start(self):
        """Log the start of a run"""
        self.logger.info("=" * 80)
        self.logger.info("SPEECH SCREENING RUN - SESSION START")
        self.logger.info("=" * 80)
        self.logger.info(f"Run: {self.run_name}")
        self.logger.info(f"Output Directory: {self.output_dir}")
        self.logger.info(f"Start Time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        self.logger.info(f"Log File: {self.log_filename}")
        self.logger.info("=" * 80)

    def log_config(self, snapshot: Dict[str, object]):
        """Log every resolved config value"""
        self.logger.info("CONFIG:")
        for key in sorted(snapshot):
            self.logger.info(f"    • {key} = {snapshot[key]}")

    def log_validation(self, counts: Dict[str, int], findings: Iterable[str]):
        """Log the corpus validation result"""
        findings = list(findings)
        self.logger.info(f"VALIDATION: PD={counts.get('PD', 0)} HC={counts.get('HC', 0)}, {len(findings)} finding(s)")
        for finding in findings:
            self.logger.warning(f"    • {finding}")

    def log_stage_started(self, stage: str):
        self.logger.info(f"STAGE STARTED: {stage}")

    def log_stage_skipped(self, stage: str, reason: str):
        """Log a stage whose outputs were reused"""
        self.logger.info(f"STAGE SKIPPED: {stage} - {reason}")

    def log_stage_finished(self, stage: str, elapsed_time: float, artifact: Optional[str] = None):
        target = f" → {artifact}" if artifact else ""
        self.logger.info(f"STAGE FINISHED: {stage} ({elapsed_time:.2f}s){target}")

    def log_error(self, stage: str, error: Exception):
        """Log an error that stopped a stage"""
        self.logger.error(f"ERROR: {stage} - {str(error)}")

    def log_summary(self, counters: Dict[str, int], status: str):
        """Log final run statistics and detach the file handler"""
        elapsed_time = time.time() - self.start_time

        self.logger.info("=" * 80)
        self.logger.info("RUN SUMMARY")
        self.logger.info("=" * 80)
        self.logger.info(f"Run: {self.run_name}")
        self.logger.info(f"Final Status: {status.upper()}")
        for key in sorted(counters):
            self.logger.info(f"{key.replace('_', ' ').title()}: {counters[key]}")
        self.logger.info(f"Total Elapsed Time: {elapsed_time:.2f} seconds")
        self.logger.info(f"End Time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        self.logger.info("=" * 80)

        # Close the handler so the file is flushed and later runs don't write to it
        self.file_handler.close()
        self.logger.removeHandler(self.file_handler)

        return self.log_filename

    def get_log_filename(self) -> str:
        """Get the current log filename"""
        return self.log_filename
