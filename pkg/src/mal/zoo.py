"""Checkpoint container format, zoo manifest and the grid trainer.

Container layout::

    u64 little-endian N | N bytes UTF-8 JSON header | raw little-endian f32 tensors

The header maps ``w1, b1, ..., wL, bL`` to ``{dtype, shape, offset_begin,
offset_end}`` (offsets relative to the payload start) and also carries ``arch``
and ``meta`` objects.
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mal.errors import DivergenceError, FormatError, LengthError
from mal.nn import ArchSpec, Family, Hyperparams, Meta, ModelCheckpoint, loss_and_accuracy, train_sgd

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
LEARNING_RATES = (1e-4, 1e-3)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def checkpoint_bytes(model: ModelCheckpoint) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for l, (w, b) in enumerate(zip(model.weights, model.biases), start=1):
        for name, t in ((f"w{l}", w), (f"b{l}", b)):
            raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
            header[name] = {"dtype": "f32", "shape": list(t.shape),
                            "offset_begin": offset, "offset_end": offset + len(raw)}
            chunks.append(raw)
            offset += len(raw)
    header["arch"] = model.arch.to_dict()
    header["meta"] = _json_safe(model.meta.to_dict())
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def checkpoint_from_bytes(raw: bytes) -> ModelCheckpoint:
    if len(raw) < 8:
        raise LengthError(f"container is {len(raw)} bytes; the length prefix alone needs 8")
    n, = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise LengthError(f"header claims {n} bytes at byte 8 but the file ends at byte {len(raw)}")
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header in bytes 8..{8 + n}: {exc}") from None
    if not isinstance(header, dict) or "arch" not in header:
        raise FormatError("header lacks an 'arch' object")
    payload = raw[8 + n:]
    arch = ArchSpec.from_dict(header["arch"])
    meta = header.get("meta") or {}
    for key in ("final_loss", "final_accuracy"):
        if meta.get(key) is None:
            meta[key] = float("nan")
    tensors = {}
    expected_offset = 0
    for l in range(1, arch.num_layers + 1):
        for name, shape in ((f"w{l}", (arch.widths[l], arch.widths[l - 1])), (f"b{l}", (arch.widths[l],))):
            entry = header.get(name)
            if entry is None:
                raise FormatError(f"header lacks tensor {name!r}")
            if entry.get("dtype") != "f32":
                raise FormatError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
            if tuple(entry["shape"]) != shape:
                raise FormatError(f"{name}: shape {entry['shape']} does not match arch {list(shape)}")
            begin, end = entry["offset_begin"], entry["offset_end"]
            if begin != expected_offset:
                raise FormatError(f"{name}: payload offset {begin} (byte {8 + n + begin}) overlaps or leaves a gap; "
                                  f"expected {expected_offset}")
            if end - begin != 4 * int(np.prod(shape)):
                raise FormatError(f"{name}: span {begin}..{end} does not hold {list(shape)} f32 values")
            if end > len(payload):
                raise LengthError(f"{name}: ends at byte {8 + n + end} but the file ends at byte {len(raw)}")
            tensors[name] = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=begin).reshape(shape)
            expected_offset = end
    if expected_offset != len(payload):
        raise LengthError(f"payload is {len(payload)} bytes but tensors end at {expected_offset}")
    L = arch.num_layers
    return ModelCheckpoint(arch, tuple(tensors[f"w{l}"] for l in range(1, L + 1)),
                           tuple(tensors[f"b{l}"] for l in range(1, L + 1)), Meta.from_dict(meta))


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(model: ModelCheckpoint, path):
    _atomic_write(Path(path), checkpoint_bytes(model))


def load_checkpoint(path) -> ModelCheckpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


@dataclass
class ZooEntry:
    id: str
    path: str
    arch: ArchSpec
    dataset_id: str
    seed: int
    learning_rate: float
    final_loss: float
    final_accuracy: float
    heldout_loss: float = float("nan")
    heldout_accuracy: float = float("nan")
    status: str = "ok"
    error: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return _json_safe(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ZooEntry":
        d = dict(d)
        d["arch"] = ArchSpec.from_dict(d["arch"])
        for key in ("final_loss", "final_accuracy", "heldout_loss", "heldout_accuracy"):
            if d.get(key) is None:
                d[key] = float("nan")
        return cls(**d)


@dataclass
class ZooManifest:
    entries: list = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise FormatError("manifest ids must be unique")

    def get(self, entry_id: str) -> ZooEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def resolve(self, entry: ZooEntry) -> Path:
        return (self.root or Path(".")) / entry.path

    def load(self, entry: ZooEntry) -> ModelCheckpoint:
        return load_checkpoint(self.resolve(entry))

    def to_json(self) -> str:
        body = {"version": self.version, "entries": [e.to_dict() for e in sorted(self.entries, key=lambda e: e.id)]}
        return json.dumps(body, indent=2) + "\n"

    def save(self, zoo_dir):
        _atomic_write(Path(zoo_dir) / MANIFEST_NAME, self.to_json().encode("utf-8"))

    @classmethod
    def load_dir(cls, zoo_dir) -> "ZooManifest":
        path = Path(zoo_dir) / MANIFEST_NAME
        if not path.exists():
            return cls(root=Path(zoo_dir))
        body = json.loads(path.read_text())
        if body.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {body.get('version')!r}")
        return cls([ZooEntry.from_dict(e) for e in body["entries"]], body["version"], Path(zoo_dir))


def query(manifest: ZooManifest, dataset_id=None, family=None, max_params=None, min_accuracy=None,
          include_failed=False) -> list:
    """Entries passing every given filter, ordered by id."""
    out = []
    for e in manifest.entries:
        if e.status != "ok" and not include_failed:
            continue
        if dataset_id is not None and e.dataset_id != dataset_id:
            continue
        if family is not None and e.arch.family != Family(family):
            continue
        if max_params is not None and e.arch.num_params > max_params:
            continue
        if min_accuracy is not None and not e.final_accuracy >= min_accuracy:
            continue
        out.append(e)
    return sorted(out, key=lambda e: e.id)


@dataclass
class ZooConfig:
    archs: list            # hidden-width lists, e.g. [[64, 64], [128, 64, 32]]
    datasets: list         # dataset names
    seeds: list
    learning_rates: tuple = LEARNING_RATES
    epochs: int = 20
    batch_size: int = 1


def entry_id(dataset: str, hidden, seed: int) -> str:
    return f"{dataset}_h{'-'.join(str(h) for h in hidden)}_s{seed}"


def build_zoo(config: ZooConfig, out_dir, data: dict, workers: int = 1) -> ZooManifest:
    """Train every (arch, dataset, seed) cell and keep the best learning rate.

    ``data`` maps a dataset name to ``(train, heldout)``. The held-out loss picks
    the learning rate. Cells already present in ``out_dir`` are skipped, and a
    diverged cell becomes a failed entry without stopping the build.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = ZooManifest.load_dir(out_dir)
    done = {e.id for e in manifest.entries if e.status == "ok" and manifest.resolve(e).exists()}
    manifest.entries = [e for e in manifest.entries if e.id in done]
    lock = threading.Lock()

    jobs = [(ds, tuple(h), s) for ds in config.datasets for h in config.archs for s in config.seeds]
    jobs = [j for j in jobs if entry_id(*j) not in done]

    def run(job):
        ds, hidden, seed = job
        train, heldout = data[ds]
        arch = ArchSpec((train.d_in, *hidden, train.num_classes))
        eid = entry_id(ds, hidden, seed)
        best = None
        errors = []
        for lr in config.learning_rates:
            try:
                model = train_sgd(arch, train, Hyperparams(lr, config.epochs, config.batch_size, seed))
            except DivergenceError as exc:
                errors.append(f"lr={lr}: {exc}")
                continue
            h_loss, h_acc = loss_and_accuracy(model, heldout)
            if best is None or h_loss < best[1]:
                best = (model, h_loss, h_acc)
        if best is None:
            entry = ZooEntry(eid, "", arch, ds, seed, float("nan"), float("nan"), float("nan"),
                             status="failed", error="; ".join(errors))
        else:
            model, h_loss, h_acc = best
            rel = f"{eid}.ckpt"
            save_checkpoint(model, out_dir / rel)
            entry = ZooEntry(eid, rel, arch, ds, seed, model.meta.learning_rate, model.meta.final_loss,
                             model.meta.final_accuracy, h_loss, h_acc)
        with lock:
            manifest.entries = [e for e in manifest.entries if e.id != eid] + [entry]
            manifest.save(out_dir)
        log.info("zoo entry %s: %s", eid, entry.status)
        return entry

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    manifest.entries.sort(key=lambda e: e.id)
    manifest.save(out_dir)
    return manifest
