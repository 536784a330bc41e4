"""Checkpoint files: a JSON manifest next to one flat little-endian float32 blob.

``<stem>.json`` holds ``format_version``, ``config_hash``, ``step``, ``metric``,
the run config and a list of ``{name, shape, dtype}`` entries.  ``<stem>.bin``
holds the tensors concatenated in manifest order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointMismatchError, ManifestMismatchError

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "average_checkpoints", "config_hash",
           "FORMAT_VERSION"]

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 ndarray, in manifest order
    config: dict = field(default_factory=dict)
    step: int = 0
    metric: float | None = None
    config_hash: str = ""

    def __post_init__(self):
        self.tensors = {k: np.asarray(v, dtype=np.float32) for k, v in self.tensors.items()}
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config_hash": self.config_hash,
            "step": int(self.step),
            "metric": None if self.metric is None else float(self.metric),
            "config": self.config,
            "tensors": [{"name": k, "shape": list(v.shape), "dtype": "float32"}
                        for k, v in self.tensors.items()],
        }

    def save(self, path) -> Path:
        mpath, bpath = _paths(path)
        mpath.parent.mkdir(parents=True, exist_ok=True)
        manifest = self.manifest()
        manifest["blob"] = bpath.name
        mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        with open(bpath, "wb") as fh:
            for v in self.tensors.values():
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return mpath


def save_checkpoint(path, state: dict, config: dict, step: int = 0, metric: float | None = None) -> Path:
    return Checkpoint(state, config, step, metric).save(path)


def load_checkpoint(path) -> Checkpoint:
    mpath, _ = _paths(path)
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatchError(f"unsupported format_version {manifest.get('format_version')}")
    raw = (mpath.parent / manifest["blob"]).read_bytes()
    sizes = [int(np.prod(t["shape"], dtype=np.int64)) for t in manifest["tensors"]]
    if len(raw) != 4 * sum(sizes):
        raise CheckpointMismatchError(f"blob has {len(raw)} bytes, manifest expects {4 * sum(sizes)}")
    flat = np.frombuffer(raw, dtype="<f4")
    tensors, off = {}, 0
    for t, n in zip(manifest["tensors"], sizes):
        tensors[t["name"]] = flat[off:off + n].reshape(t["shape"]).astype(np.float32)
        off += n
    return Checkpoint(tensors, manifest.get("config", {}), manifest["step"], manifest["metric"],
                      manifest["config_hash"])


def average_checkpoints(paths) -> Checkpoint:
    """Elementwise mean of the tensors of several checkpoints with identical layouts."""
    ckpts = [p if isinstance(p, Checkpoint) else load_checkpoint(p) for p in paths]
    if not ckpts:
        raise ManifestMismatchError("no checkpoints to average")
    ref = ckpts[0]
    layout = [(k, v.shape) for k, v in ref.tensors.items()]
    for c in ckpts[1:]:
        if [(k, v.shape) for k, v in c.tensors.items()] != layout:
            raise ManifestMismatchError("checkpoint tensor names/shapes differ")
    k = len(ckpts)
    tensors = {}
    for name, _ in layout:
        acc = np.zeros(ref.tensors[name].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.tensors[name]
        tensors[name] = (acc / k).astype(np.float32)
    metrics = [c.metric for c in ckpts]
    if all(m is None for m in metrics):
        metric = None
    elif len(set(metrics)) == 1:
        metric = metrics[0]
    else:
        metric = float(np.mean([m for m in metrics if m is not None]))
    return Checkpoint(tensors, ref.config, max(c.step for c in ckpts), metric, ref.config_hash)
