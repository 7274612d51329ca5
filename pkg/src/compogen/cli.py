"""Command drivers for the whole pipeline.

Eight subcommands cover the experiment lifecycle: collect expert data,
train generator variants, sample synthetic transitions, validate them with
offline RL (single-task and shared multitask baselines), run the admission
loop end to end, probe a trained model's interaction structure, and flatten
a finished run into a CSV.

Every invocation reads one config file, claims one run directory, snapshots
the config bytes there, and leaves a run.json audit trail naming the
artifacts it produced. A run directory's inputs are immutable: resuming with
a different config is refused. Exit codes are scriptable: 0 success, 1 bad
command line, 2 bad config, 3 a stage failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .analysis import attention_average, influence_matrix
from .bootstrap import BootstrapOps
from .bootstrap import run as run_bootstrap
from .configio import ConfigError, ExperimentConfig, load_config
from .data import (DatasetIOError, DatasetManifest, ManifestEntry, Provenance,
                   TransitionBatch)
from .data import load as load_batch
from .data import save as save_batch
from .denoisers import VARIANTS
from .edm import PreconditionedDenoiser
from .expert import collect_expert_data
from .nn import save_checkpoint
from .rl import MULTITASK_ARCHS, save_policy, train_multitask_compositional, train_td3bc
from .training import generate, load_denoiser, train_diffusion


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class RuntimeFailure(Exception):
    """A stage could not run or produced nothing usable; exit code 3."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the config layer owns that code
    def error(self, message):
        raise UsageError(message)


def _log(msg: str) -> None:
    print(msg, flush=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _task_slug(task) -> str:
    return "-".join(str(t) for t in task)


def _task_seed(base: int, task) -> int:
    """Distinct sampling seed per task; radix 8 covers both grids."""
    code = 0
    for t in task:
        code = code * 8 + int(t)
    return base * 4096 + code


def _parse_run_seed(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"--seed: expected an integer, got {raw!r}")


def _parse_seed_list(raw: str) -> list[int]:
    try:
        seeds = [int(p) for p in raw.split(",") if p.strip() != ""]
    except ValueError:
        raise UsageError(f"--seed: expected integers like 0,1,2, got {raw!r}")
    if not seeds:
        raise UsageError("--seed: expected at least one integer")
    return seeds


def _parse_tasks(raw: str, cfg: ExperimentConfig) -> list:
    train, held = cfg.split()
    if raw == "held":
        return held
    if raw == "train":
        return train
    if raw == "all":
        return sorted(train + held)
    space = cfg.space()
    tasks = []
    for part in raw.split(";"):
        fields = [p for p in part.split(",") if p.strip() != ""]
        try:
            task = tuple(int(p) for p in fields)
            space.validate_task(task)
        except (ValueError, TypeError) as err:
            raise UsageError(f"--tasks: bad task {part!r}: {err}")
        tasks.append(task)
    if not tasks:
        raise UsageError("--tasks: expected held, train, all, or "
                         "semicolon-separated tuples like 0,0,1,0;1,0,1,1")
    return tasks


# ---------------------------------------------------------------------------
# run directories

def _claim_run_dir(command: str) -> str:
    os.makedirs("runs", exist_ok=True)
    n = 1
    while True:
        cand = os.path.join("runs", f"{command}-{n:03d}")
        try:
            os.makedirs(cand)
            return cand
        except FileExistsError:
            n += 1


class RunRecord:
    """run.json: what ran, from which inputs, producing which files."""

    def __init__(self, run_dir: str, doc: dict):
        self.run_dir = run_dir
        self.path = os.path.join(run_dir, "run.json")
        self.doc = doc
        self.write()

    @classmethod
    def fresh(cls, run_dir: str, command: str, argv: list, seed,
              config_sha: str) -> "RunRecord":
        return cls(run_dir, {
            "command": command, "argv": list(argv),
            "package": f"compogen {__version__}", "numpy": np.__version__,
            "seed": seed, "config_sha256": config_sha,
            "started": _now(), "finished": None, "status": "running",
            "artifacts": {}, "timings_s": {}})

    @classmethod
    def resume(cls, run_dir: str, argv: list, seed) -> "RunRecord":
        with open(os.path.join(run_dir, "run.json")) as f:
            doc = json.load(f)
        doc.update(argv=list(argv), seed=seed, started=_now(),
                   finished=None, status="running")
        return cls(run_dir, doc)

    def artifact(self, name: str, rel_path: str) -> None:
        self.doc["artifacts"][name] = rel_path

    def timing(self, stage: str, seconds: float) -> None:
        self.doc["timings_s"][stage] = round(seconds, 3)

    def write(self) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.doc, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, self.path)

    def finish(self, status: str = "done") -> None:
        for name, rel in self.doc["artifacts"].items():
            if not os.path.exists(os.path.join(self.run_dir, rel)):
                raise RuntimeFailure(
                    f"artifact {name} missing at {rel}; run is incomplete")
        self.doc["finished"] = _now()
        self.doc["status"] = status
        self.write()


def _open_run(args, command: str, seed) -> tuple[str, ExperimentConfig, RunRecord]:
    try:
        with open(args.config, "rb") as f:
            blob = f.read()
    except OSError as err:
        raise ConfigError(f"config file not found: {args.config} ({err})")
    cfg = load_config(args.config)   # validate before claiming a directory
    run_dir = args.out or _claim_run_dir(command)
    os.makedirs(run_dir, exist_ok=True)
    snapshot = os.path.join(run_dir, "config.cfg")
    resumable = os.path.exists(os.path.join(run_dir, "run.json"))
    if resumable:
        if not getattr(args, "resume", False):
            raise RuntimeFailure(
                f"{run_dir} already holds a run; pass --resume to continue "
                f"it or point --out somewhere fresh")
        with open(snapshot, "rb") as f:
            if f.read() != blob:
                raise ConfigError(
                    f"config file {args.config} does not match the snapshot "
                    f"in {run_dir}; a run's inputs are immutable")
        record = RunRecord.resume(run_dir, sys.argv[1:], seed)
    else:
        with open(snapshot, "wb") as f:
            f.write(blob)
        record = RunRecord.fresh(run_dir, command, sys.argv[1:], seed,
                                 hashlib.sha256(blob).hexdigest())
    return run_dir, cfg, record


def _run_jobs(fn, calls: list[tuple], jobs: int) -> list:
    """Run fn over argument tuples, optionally across processes.

    Workers share nothing; results come back in call order and the first
    failure propagates.
    """
    if jobs <= 1 or len(calls) <= 1:
        return [fn(*c) for c in calls]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *c) for c in calls]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# job workers (top level so process pools can pickle them)

def _collect_worker(snapshot: str, seed: int, task: tuple, dest: str) -> dict:
    cfg = load_config(snapshot)
    task = tuple(task)
    rows = collect_expert_data(task, cfg.collect_transitions,
                               cfg.collect_noise, seed, cfg.space(), cfg.env)
    batch = TransitionBatch(rows, task=task, provenance=Provenance.real())
    save_batch(batch, dest)
    return {"task": list(task), "rows": batch.n, "dim": batch.dim}


def _train_worker(snapshot: str, data_dir: str, variant: str, seed: int,
                  out_path: str, resume: bool) -> dict:
    cfg = load_config(snapshot)
    manifest = DatasetManifest.load(os.path.join(data_dir, "manifest.json"))
    batches = manifest.load_batches(base_dir=data_dir, solved=set())
    res = train_diffusion(batches, variant, cfg.space(), cfg.diffusion,
                          cfg.model, cfg.edm, seed, out_path=out_path,
                          resume=resume, log=_log)
    return {"variant": variant, "seed": seed, "checkpoint": res.checkpoint,
            "final_loss": res.losses[-1] if res.losses else None,
            "rejected_steps": res.rejected_steps}


def _generate_worker(snapshot: str, ckpt: str, task: tuple, n: int,
                     seed: int, dest: str) -> dict:
    cfg = load_config(snapshot)
    task = tuple(task)
    model, stats, _ = load_denoiser(ckpt, cfg.space(), cfg.model)
    if stats is None:
        raise RuntimeFailure(f"checkpoint {ckpt} lacks normalization "
                             f"statistics; retrain with a current build")
    den = PreconditionedDenoiser(model, sigma_data=cfg.edm.sigma_data)
    batch = generate(den, task, n, cfg.edm, seed=_task_seed(seed, task),
                     stats=stats, churn_enabled=cfg.generate_churn,
                     chunk=cfg.generate_chunk)
    save_batch(batch, dest)
    return {"task": list(task), "rows": batch.n, "dim": batch.dim}


# ---------------------------------------------------------------------------
# subcommands

def _cmd_collect(args) -> int:
    seed = _parse_run_seed(args.seed)
    run_dir, cfg, rec = _open_run(args, "collect", seed)
    train_tasks, _ = cfg.split()
    os.makedirs(os.path.join(run_dir, "data"), exist_ok=True)
    snapshot = os.path.join(run_dir, "config.cfg")

    t0 = time.monotonic()
    rels = {t: os.path.join("data", f"real_{_task_slug(t)}.cdif")
            for t in train_tasks}
    pending = [t for t in train_tasks
               if not (args.resume and os.path.exists(os.path.join(run_dir, rels[t])))]
    calls = [(snapshot, seed, t, os.path.join(run_dir, rels[t])) for t in pending]
    _log(f"collecting {cfg.collect_transitions} expert transitions for "
         f"{len(pending)} of {len(train_tasks)} training tasks")
    _run_jobs(_collect_worker, calls, args.jobs)

    entries = []
    for t in train_tasks:
        b = load_batch(os.path.join(run_dir, rels[t]))
        entries.append(ManifestEntry(task=t, path=rels[t], rows=b.n, dim=b.dim,
                                     provenance=Provenance.real(),
                                     round_added=0))
        rec.artifact(f"data:{_task_slug(t)}", rels[t])
    manifest = DatasetManifest(split_seed=cfg.split_seed, entries=entries)
    manifest.save(os.path.join(run_dir, "manifest.json"))
    rec.artifact("manifest", "manifest.json")
    rec.timing("collect", time.monotonic() - t0)
    rec.finish()
    _log(f"collected {sum(e.rows for e in entries)} transitions across "
         f"{len(entries)} tasks into {run_dir}")
    return 0


def _require_manifest(data_dir: str) -> DatasetManifest:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise RuntimeFailure(f"no dataset manifest at {path}; "
                             f"run the collect command first")
    manifest = DatasetManifest.load(path)
    try:
        manifest.verify(base_dir=data_dir)
    except DatasetIOError as err:
        raise RuntimeFailure(str(err))
    return manifest


def _cmd_train_diffusion(args) -> int:
    seeds = _parse_seed_list(args.seed)
    run_dir, cfg, rec = _open_run(args, "train-diffusion", seeds)
    _require_manifest(args.data)
    snapshot = os.path.join(run_dir, "config.cfg")
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)

    variants = list(VARIANTS) if args.variant == "all" else [args.variant]
    pairs = [(v, s) for v in variants for s in seeds]
    t0 = time.monotonic()
    calls = [(snapshot, args.data, v, s,
              os.path.join(run_dir, "checkpoints", f"{v}_s{s}.npz"),
              args.resume) for v, s in pairs]
    summaries = _run_jobs(_train_worker, calls, args.jobs)
    for summary in summaries:
        rel = os.path.relpath(summary["checkpoint"], run_dir)
        rec.artifact(f"checkpoint:{summary['variant']}_s{summary['seed']}", rel)
    with open(os.path.join(run_dir, "train_summary.json"), "w") as f:
        json.dump(summaries, f, indent=2, sort_keys=True)
        f.write("\n")
    rec.artifact("summary", "train_summary.json")
    rec.timing("train", time.monotonic() - t0)
    rec.finish()
    for summary in summaries:
        loss = summary["final_loss"]
        _log(f"{summary['variant']} seed {summary['seed']}: final loss "
             f"{loss:.4f}" if loss is not None else
             f"{summary['variant']} seed {summary['seed']}: no steps ran")
    return 0


def _cmd_generate(args) -> int:
    seed = _parse_run_seed(args.seed)
    run_dir, cfg, rec = _open_run(args, "generate", seed)
    if not os.path.exists(args.model):
        raise RuntimeFailure(f"missing checkpoint: {args.model}")
    tasks = _parse_tasks(args.tasks, cfg)
    n = args.transitions or cfg.generate_transitions
    if n < 1:
        raise UsageError("--transitions: must be positive")
    snapshot = os.path.join(run_dir, "config.cfg")
    os.makedirs(os.path.join(run_dir, "data"), exist_ok=True)

    t0 = time.monotonic()
    rels = {t: os.path.join("data", f"syn_{_task_slug(t)}.cdif") for t in tasks}
    pending = [t for t in tasks
               if not (args.resume and os.path.exists(os.path.join(run_dir, rels[t])))]
    _log(f"sampling {n} transitions for {len(pending)} of {len(tasks)} tasks "
         f"from {args.model}")
    calls = [(snapshot, args.model, t, n, seed, os.path.join(run_dir, rels[t]))
             for t in pending]
    _run_jobs(_generate_worker, calls, args.jobs)
    for t in tasks:
        rec.artifact(f"data:{_task_slug(t)}", rels[t])
    rec.timing("generate", time.monotonic() - t0)
    rec.finish()
    _log(f"wrote {len(tasks)} synthetic sets under {run_dir}")
    return 0


def _cmd_train_policy(args) -> int:
    seed = _parse_run_seed(args.seed)
    run_dir, cfg, rec = _open_run(args, "train-policy", seed)
    if not os.path.exists(args.data):
        raise RuntimeFailure(f"missing dataset: {args.data}")
    try:
        batch = load_batch(args.data)
    except (DatasetIOError, OSError) as err:
        raise RuntimeFailure(f"cannot read dataset {args.data}: {err}")
    if batch.task is None:
        raise RuntimeFailure(f"dataset {args.data} carries no task label")

    t0 = time.monotonic()
    result = train_td3bc(batch, batch.task, cfg.space(), cfg.policy, seed,
                         env_cfg=cfg.env, log=_log)
    slug = _task_slug(batch.task)
    policy_rel = f"policy_{slug}_s{seed}.npz"
    save_policy(os.path.join(run_dir, policy_rel), result.policy,
                cfg.policy.hidden, extra={"task": list(batch.task), "seed": seed})
    metrics_rel = f"metrics_{slug}_s{seed}.json"
    with open(os.path.join(run_dir, metrics_rel), "w") as f:
        json.dump(result.report(), f, indent=2, sort_keys=True)
        f.write("\n")
    rec.artifact("policy", policy_rel)
    rec.artifact("metrics", metrics_rel)
    rec.timing("train", time.monotonic() - t0)
    rec.finish()
    _log(f"task {batch.task} seed {seed}: best success "
         f"{result.best_success:.3f} at step {result.best_step}")
    return 0


def _cmd_train_multitask(args) -> int:
    seed = _parse_run_seed(args.seed)
    run_dir, cfg, rec = _open_run(args, "train-multitask", seed)
    manifest = _require_manifest(args.data)
    batches = manifest.load_batches(base_dir=args.data, solved=set())
    n_tasks = len({b.task for b in batches})
    policy_cfg = cfg.policy
    share = policy_cfg.batch_size // n_tasks
    if share < 1:
        raise RuntimeFailure(f"policy batch size {policy_cfg.batch_size} "
                             f"cannot cover {n_tasks} tasks")
    if share * n_tasks != policy_cfg.batch_size:
        policy_cfg = replace(policy_cfg, batch_size=share * n_tasks)
        _log(f"batch size rounded to {policy_cfg.batch_size} to split evenly "
             f"over {n_tasks} tasks")

    t0 = time.monotonic()
    result = train_multitask_compositional(batches, args.arch, cfg.space(),
                                           policy_cfg, seed,
                                           env_cfg=cfg.env, log=_log)
    policy_rel = f"multitask_{args.arch}_s{seed}.npz"
    save_checkpoint(os.path.join(run_dir, policy_rel),
                    result.policy.actor.store, step=policy_cfg.steps,
                    meta={"arch": args.arch, "seed": seed,
                          "mean": result.policy.mean.tolist(),
                          "std": result.policy.std.tolist()})
    metrics_rel = f"metrics_{args.arch}_s{seed}.json"
    with open(os.path.join(run_dir, metrics_rel), "w") as f:
        json.dump({"arch": args.arch, "seed": seed,
                   "per_task": {_task_slug(t): v
                                for t, v in sorted(result.per_task.items())},
                   "best_success": result.best_success,
                   "best_step": result.best_step,
                   "curve": [[int(s), float(v)] for s, v in result.curve]},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    rec.artifact("policy", policy_rel)
    rec.artifact("metrics", metrics_rel)
    rec.timing("train", time.monotonic() - t0)
    rec.finish()
    _log(f"{args.arch} seed {seed}: best mean success "
         f"{result.best_success:.3f} at step {result.best_step}")
    return 0


def _bootstrap_ops(run_dir: str, cfg: ExperimentConfig, base_seed: int) -> BootstrapOps:
    space = cfg.space()
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    def ckpt_path(k: int) -> str:
        return os.path.join(ckpt_dir, f"round_{k:02d}.npz")

    def train_model(batches, round_index):
        init_from = None
        if cfg.bootstrap.warm_start and round_index > 0 \
                and os.path.exists(ckpt_path(round_index - 1)):
            init_from = ckpt_path(round_index - 1)
        res = train_diffusion(batches, cfg.generator_variant, space,
                              cfg.diffusion, cfg.model, cfg.edm,
                              seed=base_seed * 1009 + round_index,
                              out_path=ckpt_path(round_index), resume=True,
                              init_from=init_from, log=_log)
        den = PreconditionedDenoiser(res.ema_model,
                                     sigma_data=cfg.edm.sigma_data)
        return den, res.stats

    def synthesize(handle, task, round_index):
        den, stats = handle
        return generate(den, task, cfg.generate_transitions, cfg.edm,
                        seed=_task_seed(base_seed * 97 + round_index, task),
                        stats=stats, round_index=round_index,
                        churn_enabled=cfg.generate_churn,
                        chunk=cfg.generate_chunk)

    def policy_success(task, batch, round_index, rl_seed):
        seed = (base_seed * 1_000_003 + round_index) * 128 + rl_seed
        res = train_td3bc(batch, task, space, cfg.policy, seed,
                          env_cfg=cfg.env)
        return res.best_success

    return BootstrapOps(train_model=train_model, synthesize=synthesize,
                        policy_success=policy_success)


def _cmd_bootstrap(args) -> int:
    seed = _parse_run_seed(args.seed)
    run_dir, cfg, rec = _open_run(args, "bootstrap", seed)
    train_tasks, held = cfg.split()
    snapshot = os.path.join(run_dir, "config.cfg")
    manifest_path = os.path.join(run_dir, "manifest.json")

    t0 = time.monotonic()
    if os.path.exists(manifest_path):
        manifest = DatasetManifest.load(manifest_path)
        manifest.verify(base_dir=run_dir)
    else:
        os.makedirs(os.path.join(run_dir, "data"), exist_ok=True)
        _log(f"collecting the expert corpus: {len(train_tasks)} tasks x "
             f"{cfg.collect_transitions} transitions")
        entries = []
        for task in train_tasks:
            rel = os.path.join("data", f"real_{_task_slug(task)}.cdif")
            dest = os.path.join(run_dir, rel)
            if not os.path.exists(dest):
                _collect_worker(snapshot, seed, task, dest)
            b = load_batch(dest)
            entries.append(ManifestEntry(task=task, path=rel, rows=b.n,
                                         dim=b.dim,
                                         provenance=Provenance.real(),
                                         round_added=0))
        manifest = DatasetManifest(split_seed=cfg.split_seed, entries=entries)
        manifest.save(manifest_path)
    rec.artifact("manifest", "manifest.json")
    rec.timing("corpus", time.monotonic() - t0)
    rec.write()

    ops = _bootstrap_ops(run_dir, cfg, seed)
    state, _ = run_bootstrap(cfg.bootstrap, ops, targets=held,
                             manifest=manifest, run_dir=run_dir,
                             resume=True, log=_log)
    rec.artifact("state", "state.json")
    for k in range(state.round_index):
        rel = f"round_{k:02d}.json"
        if os.path.exists(os.path.join(run_dir, rel)):
            rec.artifact(f"round:{k}", rel)
    rec.timing("total", time.monotonic() - t0)
    rec.finish()
    _log(f"bootstrap finished after round {state.round_index - 1}: "
         f"{len(state.solved)}/{len(state.targets)} tasks solved, "
         f"threshold {state.tau:.2f}")
    return 0


def _cmd_analyze(args) -> int:
    seed = _parse_run_seed(args.seed)
    run_dir, cfg, rec = _open_run(args, "analyze", seed)
    if not os.path.exists(args.model):
        raise RuntimeFailure(f"missing checkpoint: {args.model}")
    model, _, _ = load_denoiser(args.model, cfg.space(), cfg.model)
    tasks = _parse_tasks(args.tasks, cfg)

    t0 = time.monotonic()
    fn = influence_matrix if args.kind == "influence" else attention_average
    result = fn(model, tasks, cfg.analysis_probes, cfg.edm, seed)
    rel = f"{args.kind}.csv"
    result.save(os.path.join(run_dir, rel))
    rec.artifact("matrix", rel)
    rec.artifact("matrix_meta", rel + ".meta.json")
    rec.timing("analyze", time.monotonic() - t0)
    rec.finish()
    diag = float(np.mean(np.diag(result.matrix)))
    off = result.matrix[~np.eye(len(result.labels), dtype=bool)]
    _log(f"{args.kind} matrix over {len(tasks)} tasks written to "
         f"{os.path.join(run_dir, rel)} (mean diagonal {diag:.4f}, "
         f"mean off-diagonal {float(off.mean()):.4f})")
    return 0


def _cmd_report(args) -> int:
    run_dir = args.run
    if not os.path.isdir(run_dir):
        raise RuntimeFailure(f"no run directory at {run_dir}")
    round_files = sorted(f for f in os.listdir(run_dir)
                         if f.startswith("round_") and f.endswith(".json"))
    if not round_files:
        raise RuntimeFailure(f"{run_dir} holds no round reports")

    seeds_fallback = None
    snapshot = os.path.join(run_dir, "config.cfg")
    if os.path.exists(snapshot):
        seeds_fallback = load_config(snapshot).bootstrap.rl_seeds

    rows = []
    for fname in round_files:
        with open(os.path.join(run_dir, fname)) as f:
            payload = json.load(f)
        k = payload["round_index"]
        for task_key in sorted(payload["per_seed"]):
            task = tuple(int(x) for x in task_key.split(","))
            by_seed = payload["per_seed"][task_key]
            if by_seed is None:
                for s in (seeds_fallback or ()):
                    rows.append((_task_slug(task), k, s, ""))
                continue
            for s in sorted(by_seed, key=int):
                rows.append((_task_slug(task), k, int(s),
                             repr(float(by_seed[s]))))

    out_dir = args.out or run_dir
    os.makedirs(out_dir, exist_ok=True)
    dest = os.path.join(out_dir, "success_rates.csv")
    with open(dest, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "round", "rl_seed", "success_rate"])
        w.writerows(rows)
    _log(f"wrote {len(rows)} rows to {dest}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def _add_common(p: argparse.ArgumentParser, jobs: bool = False,
                seed_help: str = "run seed") -> None:
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", default="0", help=seed_help)
    p.add_argument("--out", default=None,
                   help="run directory (default: runs/<command>-NNN)")
    p.add_argument("--resume", action="store_true",
                   help="continue an interrupted run in the same directory")
    if jobs:
        p.add_argument("--jobs", type=int, default=1,
                       help="worker processes for independent stages")


def _build_parser() -> _Parser:
    parser = _Parser(prog="compogen",
                     description="Compositional transition synthesis: "
                                 "expert data, diffusion generators, "
                                 "offline-RL validation and bootstrapping.")
    parser.add_argument("--version", action="version",
                        version=f"compogen {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    p = sub.add_parser("collect", help="gather expert datasets for the "
                                       "training split")
    _add_common(p, jobs=True)
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("train-diffusion", help="train denoiser variants on "
                                               "a collected corpus")
    _add_common(p, jobs=True,
                seed_help="training seed or comma list like 0,1,2")
    p.add_argument("--data", required=True,
                   help="collect run directory holding manifest.json")
    p.add_argument("--variant", required=True,
                   choices=list(VARIANTS) + ["all"])
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("generate", help="sample synthetic transitions from "
                                        "a trained checkpoint")
    _add_common(p, jobs=True)
    p.add_argument("--model", required=True, help="denoiser checkpoint (.npz)")
    p.add_argument("--tasks", default="held",
                   help="held | train | all | explicit 0,0,1,0;1,0,1,1")
    p.add_argument("--transitions", type=int, default=None,
                   help="samples per task (default: config value)")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train-policy", help="offline RL on one task dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="transition dataset (.cdif)")
    p.set_defaults(func=_cmd_train_policy)

    p = sub.add_parser("train-multitask", help="shared compositional policy "
                                               "over the training tasks")
    _add_common(p)
    p.add_argument("--data", required=True,
                   help="collect run directory holding manifest.json")
    p.add_argument("--arch", required=True, choices=list(MULTITASK_ARCHS))
    p.set_defaults(func=_cmd_train_multitask)

    p = sub.add_parser("bootstrap", help="full admission loop: retrain, "
                                         "generate, validate, admit")
    _add_common(p)
    p.set_defaults(func=_cmd_bootstrap)

    p = sub.add_parser("analyze", help="interaction structure of a trained "
                                       "model")
    _add_common(p)
    p.add_argument("kind", choices=["influence", "attention"])
    p.add_argument("--model", required=True, help="denoiser checkpoint (.npz)")
    p.add_argument("--tasks", default="train",
                   help="held | train | all | explicit 0,0,1,0;1,0,1,1")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("report", help="flatten a bootstrap run into a CSV "
                                      "of success rates")
    p.add_argument("--run", required=True, help="bootstrap run directory")
    p.add_argument("--out", default=None,
                   help="directory for the CSV (default: the run directory)")
    p.set_defaults(func=_cmd_report)

    return parser


def cli_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except SystemExit as exc:     # --help / --version
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except RuntimeFailure as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 3
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 3


def main() -> int:
    return cli_dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
