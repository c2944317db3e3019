"""CSV logs for training runs, sweeps and evaluation reports."""
from __future__ import annotations

import csv
import math
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

TRAIN_LOG_FIELDS = ["iter", "loss", "psnr_val", "lr", "peak_bytes"]
PSNR_CAP = 99.99

_lock = threading.Lock()


def format_psnr(value: Optional[float]) -> str:
    """PSNR as written to CSV: infinite values are capped."""
    if value is None:
        return ""
    if math.isinf(value) or value > PSNR_CAP:
        return f"{PSNR_CAP:.2f}"
    return repr(float(value))


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvLog:
    """Append-only CSV file with a fixed header (시작 시 헤더 기록)."""

    def __init__(self, path: Union[str, Path], fields: Sequence[str]) -> None:
        self.path = Path(path)
        self.fields = list(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with _lock:
            with self.path.open("w", encoding="utf-8", newline="") as f:
                csv.DictWriter(f, fieldnames=self.fields).writeheader()

    def append(self, row: Mapping[str, Any]) -> None:
        with _lock:
            with self.path.open("a", encoding="utf-8", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=self.fields)
                writer.writerow({k: _cell(row.get(k)) for k in self.fields})


def write_rows(path: Union[str, Path], fields: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _lock:
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(fields))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(row.get(k)) for k in fields})
    return path


def read_rows(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
