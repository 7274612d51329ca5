"""Self-training loop over held-out tasks.

Each round trains the generative model on the current corpus, synthesizes a
dataset for every still-unsolved target task, trains policies on those
datasets, and admits exactly the datasets whose policies cleared the current
success threshold. Admitted data joins the corpus for the next round. When a
round admits nothing the threshold relaxes by a fixed step after the
configured patience, down to a floor where it holds.

Stage implementations are injected, so the loop logic is testable without
touching a real model, and the real pipeline plugs in the diffusion and
policy trainers unchanged. Everything the loop decides is persisted: state
(round, threshold, patience, solved set, corpus manifest) as one JSON file,
and one canonical report per round whose bytes are reproducible run to run.
Wall-clock timings go to a separate non-canonical file.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetManifest, ManifestEntry, Provenance, TransitionBatch
from .data import save as save_batch


@dataclass(frozen=True)
class BootstrapConfig:
    tau_start: float = 0.8
    tau_min: float = 0.5
    tau_step: float = 0.1
    patience: int = 1            # stalled rounds tolerated before relaxing
    max_rounds: int = 3
    rl_seeds: tuple[int, ...] = (0, 1)
    warm_start: bool = False     # off: every round retrains from scratch

    def __post_init__(self):
        if self.tau_min > self.tau_start:
            raise ValueError("tau_min must not exceed tau_start")
        if self.tau_step <= 0.0:
            raise ValueError("tau_step must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if not self.rl_seeds:
            raise ValueError("need at least one policy seed")


@dataclass
class BootstrapState:
    targets: tuple
    tau: float
    round_index: int = 0
    patience_used: int = 0
    solved: set = field(default_factory=set)
    manifest: DatasetManifest | None = None

    @classmethod
    def fresh(cls, targets, cfg: BootstrapConfig,
              manifest: DatasetManifest) -> "BootstrapState":
        state = cls(targets=tuple(tuple(t) for t in targets),
                    tau=cfg.tau_start, manifest=manifest)
        state.check(cfg)
        return state

    def check(self, cfg: BootstrapConfig) -> None:
        if not self.solved <= set(self.targets):
            raise ValueError("solved set strayed outside the targets")
        if not cfg.tau_min <= self.tau <= cfg.tau_start:
            raise ValueError(f"threshold {self.tau} outside "
                             f"[{cfg.tau_min}, {cfg.tau_start}]")
        if not 0 <= self.patience_used <= cfg.patience:
            raise ValueError(f"patience counter {self.patience_used} outside "
                             f"[0, {cfg.patience}]")
        if self.round_index < 0:
            raise ValueError("round index must be non-negative")

    def to_json(self) -> dict:
        return {"targets": [list(t) for t in self.targets],
                "tau": self.tau,
                "round_index": self.round_index,
                "patience_used": self.patience_used,
                "solved": sorted(list(t) for t in self.solved),
                "manifest": self.manifest.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "BootstrapState":
        return cls(targets=tuple(tuple(t) for t in obj["targets"]),
                   tau=float(obj["tau"]),
                   round_index=int(obj["round_index"]),
                   patience_used=int(obj["patience_used"]),
                   solved={tuple(t) for t in obj["solved"]},
                   manifest=DatasetManifest.from_json(obj["manifest"]))

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "BootstrapState":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class RoundReport:
    round_index: int
    tau_before: float
    tau_after: float
    success_rates: dict            # task -> float, or None when a stage failed
    newly_solved: list
    failed_tasks: list
    admitted: list                 # manifest entries added this round
    per_seed: dict = field(default_factory=dict)  # task -> {rl_seed: rate}
    wall_clock_s: float = 0.0      # kept out of the canonical serialization

    def to_json(self) -> dict:
        return {"round_index": self.round_index,
                "tau_before": self.tau_before,
                "tau_after": self.tau_after,
                "success_rates": {",".join(map(str, t)): v
                                  for t, v in sorted(self.success_rates.items())},
                "per_seed": {",".join(map(str, t)):
                             ({str(s): v for s, v in sorted(by.items())}
                              if by is not None else None)
                             for t, by in sorted(self.per_seed.items())},
                "newly_solved": sorted(list(t) for t in self.newly_solved),
                "failed_tasks": sorted(list(t) for t in self.failed_tasks),
                "admitted": [e.to_json() for e in self.admitted]}


@dataclass
class BootstrapOps:
    """The three stage callables the loop drives.

    train_model(batches, round_index) -> model handle; its failures abort the
    round. synthesize(model, task, round_index) -> TransitionBatch.
    policy_success(task, batch, round_index, rl_seed) -> success fraction.
    Failures in the per-task stages mark that task failed for the round and
    the loop moves on.
    """
    train_model: object
    synthesize: object
    policy_success: object


def run_round(state: BootstrapState, cfg: BootstrapConfig, ops: BootstrapOps,
              run_dir: str, log=None) -> RoundReport:
    """One admission round; mutates state and persists admitted batches."""
    state.check(cfg)
    k = state.round_index
    t0 = time.monotonic()
    batches = state.manifest.load_batches(base_dir=run_dir,
                                          solved=state.solved)
    model = ops.train_model(batches, k)

    data_dir = os.path.join(run_dir, "data")
    os.makedirs(data_dir, exist_ok=True)
    success_rates = {}
    seed_rates = {}
    newly = []
    failed = []
    admitted = []
    for task in sorted(t for t in state.targets if t not in state.solved):
        try:
            syn = ops.synthesize(model, task, k)
            per_seed = [float(ops.policy_success(task, syn, k, s))
                        for s in cfg.rl_seeds]
        except Exception as err:
            failed.append(task)
            success_rates[task] = None
            seed_rates[task] = None
            if log is not None:
                log(f"round {k} task {task} failed: {err}")
            continue
        sr = float(np.mean(per_seed))
        success_rates[task] = sr
        seed_rates[task] = dict(zip(cfg.rl_seeds, per_seed))
        if log is not None:
            log(f"round {k} task {task} success {sr:.3f} "
                f"(threshold {state.tau:.2f})")
        if sr > state.tau:
            newly.append(task)
            rel = os.path.join("data",
                               f"syn_r{k}_" + "-".join(map(str, task)) + ".cdif")
            save_batch(syn, os.path.join(run_dir, rel))
            entry = ManifestEntry(task=tuple(task), path=rel, rows=syn.n,
                                  dim=syn.dim,
                                  provenance=Provenance.synthetic(k),
                                  round_added=k)
            state.manifest.add(entry)
            admitted.append(entry)

    tau_before = state.tau
    if newly:
        state.solved |= set(newly)
        state.patience_used = 0
    else:
        state.patience_used += 1
        if state.patience_used >= cfg.patience:
            # rounding keeps decimal thresholds exact across repeated decays,
            # which keeps the persisted reports byte-stable
            state.tau = round(max(state.tau - cfg.tau_step, cfg.tau_min), 12)
            state.patience_used = 0
    state.round_index = k + 1
    state.check(cfg)
    return RoundReport(round_index=k, tau_before=tau_before,
                       tau_after=state.tau, success_rates=success_rates,
                       newly_solved=newly, failed_tasks=failed,
                       admitted=admitted, per_seed=seed_rates,
                       wall_clock_s=time.monotonic() - t0)


def _write_canonical(path: str, obj: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def run(cfg: BootstrapConfig, ops: BootstrapOps, targets,
        manifest: DatasetManifest, run_dir: str, resume: bool = True,
        log=None) -> tuple[BootstrapState, list[RoundReport]]:
    """Drive rounds until every target is solved or the round budget is
    spent. State persists after each round, so an interrupted run picks up
    at the next round and reproduces what the uninterrupted run would have
    written.
    """
    os.makedirs(run_dir, exist_ok=True)
    state_path = os.path.join(run_dir, "state.json")
    if resume and os.path.exists(state_path):
        state = BootstrapState.load(state_path)
        state.check(cfg)
    else:
        state = BootstrapState.fresh(targets, cfg, manifest)
        state.save(state_path)

    timings_path = os.path.join(run_dir, "timings.json")
    timings = {}
    if os.path.exists(timings_path):
        with open(timings_path) as f:
            timings = json.load(f)

    reports = []
    while (state.round_index < cfg.max_rounds
           and not set(state.targets) <= state.solved):
        report = run_round(state, cfg, ops, run_dir, log=log)
        reports.append(report)
        _write_canonical(os.path.join(run_dir,
                                      f"round_{report.round_index:02d}.json"),
                         report.to_json())
        timings[str(report.round_index)] = round(report.wall_clock_s, 3)
        with open(timings_path, "w") as f:
            json.dump(timings, f, indent=2, sort_keys=True)
        state.save(state_path)
        if log is not None:
            log(f"round {report.round_index} done: solved "
                f"{len(state.solved)}/{len(state.targets)}, "
                f"threshold {state.tau:.2f}")
    return state, reports
