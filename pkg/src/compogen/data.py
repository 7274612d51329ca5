"""Transition dataset storage: typed batches, pooled normalization, binary I/O.

Datasets are immutable N x D float32 matrices tagged with their task and
provenance (real expert data or synthetic data admitted at some bootstrap
round). Pooled mean/std statistics normalize every continuous dimension; the
terminal column passes through untouched and is re-discretized at 0.5 on the
way back. Files use a little-endian binary layout so million-row datasets
stream without a parser in the loop.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .env import TRANSITION_DIM, T_TERMINAL, TaskId

MAGIC = b"CDIF"
FORMAT_VERSION = 1
_NO_INDEX = 0xFFFFFFFF
STD_FLOOR = 1e-6


class DatasetIOError(IOError):
    """Base for typed dataset file errors."""


class MagicError(DatasetIOError):
    pass


class VersionError(DatasetIOError):
    pass


class TruncationError(DatasetIOError):
    pass


@dataclass(frozen=True)
class Provenance:
    kind: str                # "real" or "synthetic"
    round: int | None = None  # bootstrap round for synthetic data

    def __post_init__(self):
        if self.kind not in ("real", "synthetic"):
            raise ValueError(f"unknown provenance kind {self.kind!r}")
        if self.kind == "synthetic" and (self.round is None or self.round < 0):
            raise ValueError("synthetic provenance needs a round >= 0")
        if self.kind == "real" and self.round is not None:
            raise ValueError("real provenance carries no round")

    @classmethod
    def real(cls) -> "Provenance":
        return cls("real")

    @classmethod
    def synthetic(cls, round: int) -> "Provenance":
        return cls("synthetic", round)

    def to_json(self) -> dict:
        if self.kind == "real":
            return {"kind": "real"}
        return {"kind": "synthetic", "round": self.round}

    @classmethod
    def from_json(cls, obj: dict) -> "Provenance":
        return cls(obj["kind"], obj.get("round"))


@dataclass
class TransitionBatch:
    rows: np.ndarray
    task: TaskId | None = None
    provenance: Provenance = field(default_factory=Provenance.real)

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ValueError(f"rows must be 2-D, got shape {self.rows.shape}")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def validate(self, reward_col: int | None = None,
                 terminal_col: int | None = None) -> None:
        """Check the value-range invariants for transition rows."""
        d = self.dim
        rc = reward_col if reward_col is not None else (21 if d == TRANSITION_DIM else None)
        tc = terminal_col if terminal_col is not None else d - 1
        if rc is not None:
            r = self.rows[:, rc]
            if r.size and (float(r.min()) < 0.0 or float(r.max()) > 1.0):
                raise ValueError("reward column outside [0, 1]")
        t = self.rows[:, tc]
        if t.size and not np.all((t == 0.0) | (t == 1.0)):
            raise ValueError("terminal column not binary")


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray      # length D, zero on pass-through dims
    std: np.ndarray       # length D, one on pass-through dims
    passthrough: int      # terminal column index

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "passthrough": self.passthrough}

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        return cls(np.asarray(obj["mean"], dtype=np.float64),
                   np.asarray(obj["std"], dtype=np.float64),
                   int(obj["passthrough"]))


def pool_stats(batches: list[TransitionBatch],
               terminal_col: int | None = None) -> NormStats:
    """Per-dimension mean/std over the concatenation of all batches.

    The terminal column is flagged as pass-through (identity transform).
    Constant dimensions get their std floored so normalization stays finite.
    """
    if not batches:
        raise ValueError("pool_stats needs at least one batch")
    dims = {b.dim for b in batches}
    if len(dims) != 1:
        raise ValueError(f"batches disagree on dimension: {sorted(dims)}")
    total = sum(b.n for b in batches)
    if total < 2:
        raise ValueError("pooled statistics need at least 2 rows")
    d = dims.pop()
    tc = terminal_col if terminal_col is not None else d - 1

    # streaming moments in float64; avoids materializing the concatenation
    s1 = np.zeros(d, dtype=np.float64)
    s2 = np.zeros(d, dtype=np.float64)
    for b in batches:
        x = b.rows.astype(np.float64)
        s1 += x.sum(axis=0)
        s2 += (x * x).sum(axis=0)
    mean = s1 / total
    var = np.maximum(s2 / total - mean * mean, 0.0)
    std = np.sqrt(var)
    std = np.where(std < STD_FLOOR, STD_FLOOR, std)
    mean[tc] = 0.0
    std[tc] = 1.0
    return NormStats(mean, std, tc)


def normalize(rows: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mean) / std on continuous dims; pass-through column untouched."""
    rows = np.asarray(rows)
    if rows.shape[-1] != stats.dim:
        raise ValueError(f"dimension mismatch: rows {rows.shape[-1]}, stats {stats.dim}")
    return (rows.astype(np.float64) - stats.mean) / stats.std


def denormalize(rows: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of normalize; the pass-through column is re-discretized at 0.5."""
    rows = np.asarray(rows)
    if rows.shape[-1] != stats.dim:
        raise ValueError(f"dimension mismatch: rows {rows.shape[-1]}, stats {stats.dim}")
    out = rows.astype(np.float64) * stats.std + stats.mean
    out[..., stats.passthrough] = np.where(out[..., stats.passthrough] >= 0.5, 1.0, 0.0)
    return out


_HEADER = struct.Struct("<4sIII4II")  # magic, version, D, N, task[4], provenance round


def save(batch: TransitionBatch, path: str) -> None:
    task = batch.task if batch.task is not None else (_NO_INDEX,) * 4
    prov = batch.provenance.round if batch.provenance.kind == "synthetic" else _NO_INDEX
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, batch.dim, batch.n, *task, prov)
    body = batch.rows.astype("<f4", copy=False).tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(body)
    os.replace(tmp, path)


def load(path: str) -> TransitionBatch:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncationError(f"{path}: file shorter than header")
    magic, version, d, n, t0, t1, t2, t3, prov = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    expect = _HEADER.size + 4 * n * d
    if len(raw) < expect:
        raise TruncationError(f"{path}: expected {expect} bytes, got {len(raw)}")
    rows = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size)
    rows = rows.reshape(n, d).copy()
    task = None if t0 == _NO_INDEX else (t0, t1, t2, t3)
    provenance = Provenance.real() if prov == _NO_INDEX else Provenance.synthetic(prov)
    return TransitionBatch(rows, task, provenance)


@dataclass
class ManifestEntry:
    task: TaskId
    path: str
    rows: int
    dim: int
    provenance: Provenance
    round_added: int

    def to_json(self) -> dict:
        return {"task": list(self.task), "path": self.path, "rows": self.rows,
                "dim": self.dim, "provenance": self.provenance.to_json(),
                "round_added": self.round_added}

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        return cls(tuple(obj["task"]), obj["path"], int(obj["rows"]),
                   int(obj["dim"]), Provenance.from_json(obj["provenance"]),
                   int(obj["round_added"]))


@dataclass
class DatasetManifest:
    """Recorded contents of a training corpus, rebuildable into batches.

    Real entries are the expert datasets; synthetic entries are the exact
    generated batches admitted when their task was solved.
    """
    split_seed: int
    entries: list[ManifestEntry] = field(default_factory=list)

    def add(self, entry: ManifestEntry) -> None:
        self.entries.append(entry)

    def real_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.provenance.kind == "real"]

    def synthetic_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.provenance.kind == "synthetic"]

    def training_entries(self, solved: set[TaskId] | None = None) -> list[ManifestEntry]:
        """Real data plus the synthetic sets of solved tasks."""
        out = self.real_entries()
        for e in self.synthetic_entries():
            if solved is None or e.task in solved:
                out.append(e)
        return out

    def load_batches(self, base_dir: str = "",
                     solved: set[TaskId] | None = None) -> list[TransitionBatch]:
        return [load(os.path.join(base_dir, e.path))
                for e in self.training_entries(solved)]

    def verify(self, base_dir: str = "") -> None:
        """Referenced files must exist and match recorded row counts and D."""
        for e in self.entries:
            full = os.path.join(base_dir, e.path)
            if not os.path.exists(full):
                raise DatasetIOError(f"manifest references missing file {full}")
            b = load(full)
            if b.n != e.rows or b.dim != e.dim:
                raise DatasetIOError(
                    f"{full}: manifest says {e.rows}x{e.dim}, file has {b.n}x{b.dim}")

    def to_json(self) -> dict:
        return {"split_seed": self.split_seed,
                "entries": [e.to_json() for e in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(int(obj["split_seed"]),
                   [ManifestEntry.from_json(e) for e in obj["entries"]])

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path) as f:
            return cls.from_json(json.load(f))
