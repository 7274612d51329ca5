"""Interaction structure probes for trained token denoisers.

Two views of how a model couples the transition factors. The influence matrix
is causal: mask one input token's encoding, re-run the model on noisy probes,
and record how far each output token moved, normalized per dimension so wide
and narrow tokens compare. The attention average is observational: softmax
weights collected over the same kind of probes and averaged over samples,
heads, layers and tasks.

Both probe at the schedule's midpoint noise level with x ~ N(0, sigma_mid^2),
matching the regime the sampler spends most of its refinement in. Results
serialize to CSV with a JSON sidecar naming the model hash, noise level and
sample counts so a matrix on disk stays attributable.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .denoisers import (MonolithicDenoiser, TokenDenoiser,
                        UnsupportedVariantError, prediction)
from .edm import EDMConfig, sigma_midpoint


@dataclass
class MatrixResult:
    kind: str                  # "influence" or "attention"
    matrix: np.ndarray         # (K, K) float64
    labels: list               # token names, row and column order
    sigma: float
    n_samples: int
    tasks: list
    model_hash: str

    def save(self, path: str) -> None:
        """CSV matrix plus a .meta.json sidecar next to it."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["token"] + list(self.labels))
            for label, row in zip(self.labels, self.matrix):
                w.writerow([label] + [repr(float(v)) for v in row])
        meta = {"kind": self.kind, "labels": list(self.labels),
                "sigma": self.sigma, "n_samples": self.n_samples,
                "tasks": [list(t) for t in self.tasks],
                "model_hash": self.model_hash}
        with open(path + ".meta.json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")


def load_matrix(path: str) -> MatrixResult:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    labels = rows[0][1:]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]],
                      dtype=np.float64)
    with open(path + ".meta.json") as f:
        meta = json.load(f)
    return MatrixResult(kind=meta["kind"], matrix=matrix, labels=labels,
                        sigma=float(meta["sigma"]),
                        n_samples=int(meta["n_samples"]),
                        tasks=[tuple(t) for t in meta["tasks"]],
                        model_hash=meta["model_hash"])


def model_hash(model) -> str:
    """Content hash over the model's parameters, order-independent."""
    h = hashlib.sha256()
    for name in sorted(model.store.values):
        h.update(name.encode())
        h.update(model.store.values[name].astype("<f8").tobytes())
    return h.hexdigest()


def _require_tokens(model, what: str):
    if isinstance(model, MonolithicDenoiser) or not isinstance(model, TokenDenoiser):
        raise UnsupportedVariantError(
            f"{what} needs a token-structured model, got "
            f"{type(model).__name__}")


def influence_matrix(model, tasks, n_samples: int, edm_cfg: EDMConfig,
                     seed: int) -> MatrixResult:
    """Masked-token influence: entry (i, j) is the mean per-dimension shift
    of output token j when input token i is silenced. Deterministic given
    seed."""
    _require_tokens(model, "influence analysis")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    tasks = [tuple(t) for t in tasks]
    if not tasks:
        raise ValueError("need at least one task")
    layout = model.layout
    labels = [t.name for t in layout]
    k = len(labels)
    sigma = sigma_midpoint(edm_cfg)
    rng = np.random.default_rng((0xA7A1, seed))
    out = np.zeros((k, k), dtype=np.float64)
    for task in tasks:
        x = sigma * rng.standard_normal((n_samples, model.dim))
        nominal = prediction(model, x, sigma, task,
                             sigma_data=edm_cfg.sigma_data)
        for i, tok in enumerate(layout):
            masked = prediction(model, x, sigma, task, masked=[tok.name],
                                sigma_data=edm_cfg.sigma_data)
            diff = masked - nominal
            for j, out_tok in enumerate(layout):
                span = diff[:, out_tok.start:out_tok.stop]
                norms = np.sqrt((span * span).sum(axis=1))
                out[i, j] += norms.mean() / np.sqrt(out_tok.width)
    out /= len(tasks)
    return MatrixResult(kind="influence", matrix=out, labels=labels,
                        sigma=float(sigma), n_samples=n_samples, tasks=tasks,
                        model_hash=model_hash(model))


def attention_average(model, tasks, n_samples: int, edm_cfg: EDMConfig,
                      seed: int) -> MatrixResult:
    """Softmax attention weights averaged over probes, heads, layers and
    tasks. Rows keep summing to one because averaging preserves it. Most
    faithful on depth-1 models, where the weights are the whole story."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    tasks = [tuple(t) for t in tasks]
    if not tasks:
        raise ValueError("need at least one task")
    sigma = sigma_midpoint(edm_cfg)
    rng = np.random.default_rng((0xA7A2, seed))
    acc = None
    for task in tasks:
        x = sigma * rng.standard_normal((n_samples, model.dim))
        maps = model.attention_maps(x, sigma, task,
                                    sigma_data=edm_cfg.sigma_data)
        # one (B, H, K, K) array per layer; collapse everything but (K, K)
        per_task = np.mean([m.mean(axis=(0, 1)) for m in maps], axis=0)
        acc = per_task if acc is None else acc + per_task
    matrix = acc / len(tasks)
    if hasattr(model, "layout"):
        labels = [t.name for t in model.layout]
    else:
        labels = [f"token{i}" for i in range(matrix.shape[0])]
    return MatrixResult(kind="attention", matrix=matrix.astype(np.float64),
                        labels=labels, sigma=float(sigma),
                        n_samples=n_samples, tasks=tasks,
                        model_hash=model_hash(model))
