"""Diffusion training loop and synthetic batch generation.

Training pools all provided task datasets, normalizes them with shared
statistics, and draws task-pure batches in round-robin task order so every
task receives an equal share of update steps. Each step reseeds its own
generator from (seed, step), which makes an interrupted run resumable with
bit-identical continuation. Steps whose loss or gradients go non-finite are
rejected and counted instead of applied.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import (NormStats, Provenance, TransitionBatch, denormalize,
                   normalize, pool_stats)
from .denoisers import DenoiserConfig, build
from .edm import EDMConfig, PreconditionedDenoiser, denoise_loss, sample
from .env import T_REWARD, TaskSpace
from .nn import AdamW, EMA, cosine_lr, load_checkpoint, save_checkpoint

# paper-scale optimizer settings differ by architecture family: the flat
# residual baseline trains faster and undecayed, the transformers slower with
# decoupled decay
_VARIANT_OPT = {
    "monolithic": (3e-4, 0.0),
    "standard": (1e-4, 0.01),
    "semantic": (1e-4, 0.01),
    "semantic_compositional": (1e-4, 0.01),
}


@dataclass(frozen=True)
class DiffusionTrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float | None = None            # None: per-variant default
    weight_decay: float | None = None  # None: per-variant default
    ema_decay: float = 0.999
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")

    def resolve_opt(self, variant: str) -> tuple[float, float]:
        lr, wd = _VARIANT_OPT[variant]
        return (self.lr if self.lr is not None else lr,
                self.weight_decay if self.weight_decay is not None else wd)


@dataclass
class TrainResult:
    model: object                  # raw weights as of the last step
    ema_model: object              # fresh instance carrying the EMA weights
    stats: NormStats
    losses: list[float] = field(default_factory=list)
    rejected_steps: int = 0
    checkpoint: str | None = None


def _training_pools(batches: list[TransitionBatch]):
    pools: dict[tuple, list[np.ndarray]] = {}
    for b in batches:
        if b.task is None:
            raise ValueError("diffusion training requires task-labeled batches")
        pools.setdefault(tuple(b.task), []).append(b.rows)
    return {t: np.concatenate(rows, axis=0) for t, rows in pools.items()}


def train_diffusion(batches: list[TransitionBatch], variant: str,
                    space: TaskSpace, cfg: DiffusionTrainConfig,
                    model_cfg: DenoiserConfig, edm_cfg: EDMConfig, seed: int,
                    out_path: str | None = None, resume: bool = False,
                    init_from: str | None = None, log=None) -> TrainResult:
    """Train one denoiser variant on the pooled task datasets.

    out_path names the checkpoint file; with resume=True an existing
    checkpoint restores parameters, optimizer moments, EMA shadow and the step
    counter, and training continues to cfg.steps. init_from warm-starts the
    parameters from another checkpoint (fresh optimizer, EMA and step count);
    a resumable checkpoint at out_path takes precedence over it.
    """
    stats = pool_stats(batches)
    pools = {t: normalize(rows, stats) for t, rows in _training_pools(batches).items()}
    tasks = sorted(pools)
    if out_path and not out_path.endswith(".npz"):
        out_path += ".npz"   # savez appends it anyway; keep resume paths exact
    resuming = resume and out_path and os.path.exists(out_path)
    model = build(variant, model_cfg, space, seed=seed)
    if init_from is not None and not resuming:
        load_checkpoint(init_from, model.store)
    den = PreconditionedDenoiser(model, sigma_data=edm_cfg.sigma_data)
    lr_max, wd = cfg.resolve_opt(variant)
    opt = AdamW(model.store, lr=lr_max, weight_decay=wd)
    ema = EMA(model.store, decay=cfg.ema_decay)
    start = 0
    if resuming:
        meta = load_checkpoint(out_path, model.store, optimizer=opt, ema=ema)
        start = int(meta["step"])
    result = TrainResult(model=model, ema_model=None, stats=stats)
    t0 = time.monotonic()
    for step in range(start, cfg.steps):
        task = tasks[step % len(tasks)]
        rows = pools[task]
        rng = np.random.default_rng((seed, step))
        batch = rows[rng.integers(0, rows.shape[0], size=cfg.batch_size)]
        model.store.zero_grad()
        try:
            loss = denoise_loss(den, batch, task, edm_cfg, rng)
            stepped = opt.step(lr=cosine_lr(step, cfg.steps, lr_max))
        except FloatingPointError:
            result.rejected_steps += 1
            continue
        ema.update(model.store, names=stepped)
        result.losses.append(loss)
        if log is not None and (step % 500 == 0 or step == cfg.steps - 1):
            log(f"{variant} step {step + 1}/{cfg.steps} "
                f"loss {loss:.4f} ({time.monotonic() - t0:.0f}s)")
        if out_path and ((step + 1) % cfg.checkpoint_every == 0
                         or step == cfg.steps - 1):
            save_checkpoint(out_path, model.store, step=step + 1,
                            optimizer=opt, ema=ema,
                            meta=dict(model.describe(), stats=stats.to_json()))
    result.ema_model = ema_snapshot(model, variant, model_cfg, space, seed, ema)
    result.checkpoint = out_path
    return result


def ema_snapshot(model, variant: str, model_cfg: DenoiserConfig,
                 space: TaskSpace, seed: int, ema: EMA):
    """A separate model instance carrying the averaged weights, leaving the
    live training weights untouched."""
    frozen = build(variant, model_cfg, space, seed=seed, dim=model.dim)
    ema.copy_to(frozen.store)
    return frozen


def load_denoiser(path: str, space: TaskSpace, model_cfg: DenoiserConfig,
                  use_ema: bool = True):
    """Rebuild a checkpointed denoiser; returns (model, stats, meta)."""
    probe = np.load(path, allow_pickle=True)
    meta = json.loads(str(probe["meta"]))
    probe.close()
    model = build(meta["variant"], model_cfg, space)
    meta = load_checkpoint(path, model.store, use_ema=use_ema)
    stats = NormStats.from_json(meta["stats"]) if "stats" in meta else None
    return model, stats, meta


def generate(denoiser: PreconditionedDenoiser, task, n_samples: int,
             edm_cfg: EDMConfig, seed: int, stats: NormStats,
             round_index: int = 0, churn_enabled: bool = True,
             chunk: int = 1024) -> TransitionBatch:
    """Sample transitions for one task and map them back to raw units.

    Rewards are clipped to [0, 1] and terminal flags thresholded at 0.5 so the
    batch is always a valid replay source. Deterministic given seed (chunk
    seeds derive from it).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    parts = []
    done = 0
    index = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        parts.append(sample(denoiser, task, n, edm_cfg, seed=(seed, index),
                            churn_enabled=churn_enabled))
        done += n
        index += 1
    raw = np.concatenate(parts, axis=0)
    rows = denormalize(raw, stats)
    rows[:, T_REWARD] = np.clip(rows[:, T_REWARD], 0.0, 1.0)
    batch = TransitionBatch(rows.astype(np.float32), task=tuple(task),
                            provenance=Provenance.synthetic(round_index))
    batch.validate()
    return batch
