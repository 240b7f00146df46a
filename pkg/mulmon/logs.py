"""
Logging setup and the line-delimited metrics log
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from threading import Lock

from pydantic import BaseModel


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


class MetricsLog:
    """Append-only JSONL file of pydantic records; one writer per file."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = Lock()

    def append(self, record: BaseModel) -> None:
        line = record.model_dump_json()
        with self._lock, self.path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")

    def truncate_after(self, step: int) -> None:
        """Drop records past ``step`` so a resumed run does not duplicate lines."""
        if not self.path.exists():
            return
        kept = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            if json.loads(line).get("step", -1) <= step:
                kept.append(line)
        with self._lock:
            self.path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")
