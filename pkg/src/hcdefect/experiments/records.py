"""CSV output, checksums and the per-campaign run manifest."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
import zipfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__

MANIFEST = "manifest.json"


def fmt(v) -> str:
    """Stable text form: shortest round-tripping repr for floats."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if np.isnan(v) else repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0]) if rows else []
        for r in rows[1:]:
            columns += [k for k in r if k not in columns]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def code_hash() -> str:
    """Digest of the package sources, so cached campaign outputs expire when the code changes."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parents[1]
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    campaign: str
    config_hash: str
    version: str = __version__
    code_hash: str = ""
    seeds: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)

    @contextmanager
    def stage(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t

    def inventory(self, root) -> None:
        root = Path(root)
        self.files = {str(p.relative_to(root)): sha256(p) for p in sorted(root.rglob("*"))
                      if p.is_file() and p.name != MANIFEST}

    def write(self, root) -> Path:
        self.inventory(root)
        path = Path(root) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, root) -> "RunManifest | None":
        path = Path(root) / MANIFEST
        if not path.exists():
            return None
        try:
            return cls(**json.loads(path.read_text()))
        except (ValueError, TypeError):
            return None

    def verify(self, root) -> bool:
        """True if every listed file exists with its recorded checksum."""
        root = Path(root)
        return bool(self.files) and all((root / p).is_file() and sha256(root / p) == h
                                        for p, h in self.files.items())


@dataclass
class Assertion:
    name: str
    passed: bool
    value: object = None
    threshold: object = None
    detail: str = ""

    def row(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": self.value,
                "threshold": self.threshold, "detail": self.detail}


def save_fields(path, **arrays) -> Path:
    """npz archive with fixed member timestamps, so equal arrays give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def load_fields(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}
