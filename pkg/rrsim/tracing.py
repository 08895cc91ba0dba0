import json
import logging
import sys
import uuid
from datetime import datetime, timezone
from typing import Any

from .config import settings


def generate_run_id() -> str:
    """Generate a unique run ID for correlating the events of one simulation run."""
    return uuid.uuid4().hex[:16]


class SimLogger:
    """Structured JSON logger for simulation events."""

    def __init__(self, name: str = "rrsim"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(getattr(logging, settings.log_level.upper(), logging.INFO))

        # Avoid duplicate handlers
        if not self.logger.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter("%(message)s"))
            self.logger.addHandler(handler)

    def _log(self, level: str, event: str, run_id: str = None, **kwargs: Any):
        """Internal method to format and emit log."""
        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": level,
            "event": event,
        }

        if run_id:
            log_entry["run_id"] = run_id

        log_entry.update(kwargs)

        log_method = getattr(self.logger, level.lower(), self.logger.info)
        log_method(json.dumps(log_entry, default=str))

    def debug(self, event: str, run_id: str = None, **kwargs: Any):
        self._log("DEBUG", event, run_id, **kwargs)

    def info(self, event: str, run_id: str = None, **kwargs: Any):
        self._log("INFO", event, run_id, **kwargs)

    def error(self, event: str, run_id: str = None, **kwargs: Any):
        self._log("ERROR", event, run_id, **kwargs)

    def warning(self, event: str, run_id: str = None, **kwargs: Any):
        self._log("WARNING", event, run_id, **kwargs)

    # Convenience methods for common events
    def run_start(self, run_id: str, scheme: str, gpm_count: int, link_gbps: float, frames: int):
        self.info("run_start", run_id, scheme=scheme, gpm_count=gpm_count, link_gbps=link_gbps, frames=frames)

    def run_end(self, run_id: str, scheme: str, latency_cycles: float, total_link_bytes: int):
        self.info("run_end", run_id, scheme=scheme, latency_cycles=latency_cycles, total_link_bytes=total_link_bytes)

    def frame_done(self, run_id: str, frame_id: int, latency_cycles: int, balance_ratio: float):
        self.debug("frame_done", run_id, frame_id=frame_id, latency_cycles=latency_cycles, balance_ratio=balance_ratio)

    def calibrated(self, run_id: str, c0: float, c1: float, c2: float, fallback: bool):
        self.info("calibrated", run_id, c0=c0, c1=c1, c2=c2, fallback=fallback)

    def calibration_skipped(self, run_id: str, frame_id: int, batches: int):
        self.warning("calibration_skipped", run_id, frame_id=frame_id, batches=batches)

    def backpressure(self, run_id: str, frame_id: int, cycle: int):
        self.debug("backpressure", run_id, frame_id=frame_id, cycle=cycle)

    def straggler_split(self, run_id: str, frame_id: int, batch_id: int, participants: list, cycle: int):
        self.info("straggler_split", run_id, frame_id=frame_id, batch_id=batch_id, participants=participants, cycle=cycle)

    def trace_loaded(self, source: str, frames: int, objects: int):
        self.info("trace_loaded", source=source, frames=frames, objects=objects)

    def sweep_point(self, run_id: str, sweep: str, point: Any, scheme: str):
        self.info("sweep_point", run_id, sweep=sweep, point=point, scheme=scheme)

    def report_written(self, path: str):
        self.info("report_written", path=path)


# Global logger instance
sim_logger = SimLogger()
