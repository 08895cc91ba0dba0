import os
from dataclasses import dataclass


@dataclass
class Settings:
    # Sweep execution
    threads: int = max(1, int(os.getenv("RRSIM_THREADS", "4")))

    # Logging
    log_level: str = os.getenv("RRSIM_LOG_LEVEL", "INFO")

    # Bundled reference scene, used by run and sweep-bw when no trace is given
    reference_trace: str = os.getenv("RRSIM_REFERENCE_TRACE", "ref.rrtrace")

    # Reports
    output_dir: str = os.getenv("RRSIM_OUT", "out")
    report_indent: int = 2


settings = Settings()
