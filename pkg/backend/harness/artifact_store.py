"""Run directory with CSV/JSON/text artifacts and a sha256 manifest."""

import hashlib
import json
import logging
import math
import os
from typing import Dict, List

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def to_plain(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else str(value)
    return obj


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactStore:
    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.files: List[str] = []

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def register(self, name: str) -> str:
        if name not in self.files:
            self.files.append(name)
        logger.debug(f"wrote artifact {name}")
        return self.path(name)

    def write_frame(self, name: str, frame: pd.DataFrame) -> str:
        frame.to_csv(self.path(name), index=False, float_format="%.17g", lineterminator="\n")
        return self.register(name)

    def write_records(self, name: str, frame: pd.DataFrame) -> str:
        """One JSON object per row; non-finite values become null."""
        frame.to_json(self.path(name), orient="records", lines=True, double_precision=15)
        return self.register(name)

    def write_json(self, name: str, payload) -> str:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(to_plain(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return self.register(name)

    def write_jsonl(self, name: str, records: List[Dict]) -> str:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(to_plain(record), sort_keys=True) + "\n")
        return self.register(name)

    def write_text(self, name: str, text: str) -> str:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(text)
        return self.register(name)

    def read_frame(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.path(name), float_precision="round_trip")

    def write_manifest(self, status: str = "ok") -> str:
        artifacts = [{"path": name, "sha256": sha256_file(self.path(name)), "bytes": os.path.getsize(self.path(name))}
                     for name in sorted(self.files)]
        with open(self.path(MANIFEST), "w", encoding="utf-8") as fh:
            json.dump({"artifacts": artifacts, "status": status}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        logger.info(f"manifest: {len(artifacts)} artifacts in {self.root} (status {status})")
        return self.path(MANIFEST)


def verify_manifest(root: str) -> List[str]:
    """Names whose current hash differs from the manifest (missing files included)."""
    with open(os.path.join(root, MANIFEST), "r", encoding="utf-8") as fh:
        artifacts = json.load(fh)["artifacts"]
    bad = []
    for entry in artifacts:
        name, digest = entry["path"], entry["sha256"]
        path = os.path.join(root, name)
        if not os.path.exists(path) or sha256_file(path) != digest:
            bad.append(name)
    return bad
