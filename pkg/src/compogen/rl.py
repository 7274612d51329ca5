"""Offline policy learning on fixed transition datasets.

The single-task learner is twin-critic temporal-difference learning with a
behavior-cloning anchor on the actor: the actor maximizes one critic while a
squared-error term keeps it near the dataset actions, and the critic term is
rescaled by the batch mean absolute value so the two stay comparable across
reward scales. States are normalized with the dataset's own statistics and
augmented with the task indicator before entering any network.

Two multitask actors share one policy across tasks: a fixed wiring of small
factor modules (obstacle, object, objective, robot in a chain) and a single
attention block over factor tokens. Both read the same indicator-augmented
observation and are sized to matching parameter budgets.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import TransitionBatch
from .env import (ACTION_DIM, OBJECT_BLOCK, OBJECTIVE_BLOCK, OBSTACLE_BLOCK,
                  ROBOT_BLOCK, STATE_DIM, T_ACTION, T_NEXT_STATE, T_REWARD,
                  T_STATE, T_TERMINAL, EnvConfig, TaskSpace, task_indicator)
from .env import evaluate_success as _env_evaluate_success
from .nn import (AdamW, FeedForward, LayerNorm, Linear, MultiHeadSelfAttention,
                 ParamStore, ReLU, Tanh, load_checkpoint, save_checkpoint)

_STD_FLOOR = 1e-6

_AXIS_BLOCKS = {
    "robot": ROBOT_BLOCK,
    "object": OBJECT_BLOCK,
    "obstacle": OBSTACLE_BLOCK,
    "objective": OBJECTIVE_BLOCK,
}


@dataclass(frozen=True)
class TD3BCConfig:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 3e-4
    discount: float = 0.99
    target_blend: float = 0.005   # polyak rate onto the slow target copies
    q_scale: float = 2.5          # critic term scale before the |Q| normalizer
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_period: int = 2        # critic updates per actor/target update
    eval_period: int = 2000
    eval_episodes: int = 10
    hidden: int = 256

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if not 0.0 < self.target_blend <= 1.0:
            raise ValueError("target_blend must lie in (0, 1]")
        if self.policy_period < 1 or self.eval_period < 1:
            raise ValueError("policy_period and eval_period must be positive")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be positive")
        if self.policy_noise < 0.0 or self.noise_clip < 0.0:
            raise ValueError("noise magnitudes must be non-negative")


class MLP:
    """Plain fully connected stack with rectifier hiddens and an optional
    squashed output."""

    def __init__(self, store: ParamStore, name: str, d_in: int,
                 widths: tuple[int, ...], d_out: int, squash: bool = False):
        self.store = store
        self.name = name
        self.layers = []
        last = d_in
        for i, w in enumerate(widths):
            self.layers.append(Linear(store, f"{name}.h{i}", last, w))
            self.layers.append(ReLU())
            last = w
        self.layers.append(Linear(store, f"{name}.out", last, d_out))
        if squash:
            self.layers.append(Tanh())

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def param_names(self) -> list[str]:
        return [n for n in self.store.values if n.startswith(self.name + ".")]


@dataclass
class ObsCodec:
    """Maps raw environment states to normalized, indicator-augmented
    observations. Stored with every policy so deployment needs no dataset."""
    mean: np.ndarray
    std: np.ndarray
    indicator: np.ndarray

    @property
    def dim(self) -> int:
        return STATE_DIM + self.indicator.shape[0]

    def encode(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 1
        if single:
            states = states[None]
        z = (states - self.mean) / self.std
        ind = np.broadcast_to(self.indicator, (z.shape[0], self.indicator.shape[0]))
        out = np.concatenate([z, ind], axis=1).astype(np.float32)
        return out[0] if single else out

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "indicator": self.indicator.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ObsCodec":
        return cls(np.asarray(obj["mean"], dtype=np.float64),
                   np.asarray(obj["std"], dtype=np.float64),
                   np.asarray(obj["indicator"], dtype=np.float64))


def state_stats(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = states.astype(np.float64).mean(axis=0)
    std = states.astype(np.float64).std(axis=0)
    return mean, np.maximum(std, _STD_FLOOR)


class Policy:
    """Deployable greedy actor: callable state -> action in [-1, 1]^3."""

    def __init__(self, actor, codec: ObsCodec):
        self.actor = actor
        self.codec = codec

    def __call__(self, state: np.ndarray) -> np.ndarray:
        obs = self.codec.encode(state)
        return self.actor.forward(obs[None].astype(np.float32))[0]


def evaluate_policy(policy, task, n_episodes: int, seed: int, space: TaskSpace,
                    cfg: EnvConfig = EnvConfig()) -> float:
    """Success rate of the policy on one task; thin wrapper over the
    environment's evaluator so callers never bypass the episode protocol."""
    return _env_evaluate_success(policy, task, n_episodes, seed, space, cfg)


def _prepare_single(dataset: TransitionBatch, task, space: TaskSpace):
    rows = dataset.rows
    mean, std = state_stats(rows[:, T_STATE])
    codec = ObsCodec(mean, std, task_indicator(space, task).astype(np.float64))
    obs = codec.encode(rows[:, T_STATE])
    obs_next = codec.encode(rows[:, T_NEXT_STATE])
    act = np.clip(rows[:, T_ACTION].astype(np.float32), -1.0, 1.0)
    rew = rows[:, T_REWARD].astype(np.float32)
    term = rows[:, T_TERMINAL].astype(np.float32)
    return codec, obs, act, rew, obs_next, term


@dataclass
class TD3BCResult:
    policy: Policy                 # actor snapshot from the best evaluation
    curve: list = field(default_factory=list)   # (step, success) pairs
    best_success: float = 0.0
    best_step: int = 0
    task: tuple | None = None
    seed: int = 0
    wall_clock_s: float = 0.0

    def report(self) -> dict:
        return {"task": list(self.task), "seed": self.seed,
                "curve": [[int(s), float(v)] for s, v in self.curve],
                "best_success": self.best_success,
                "best_step": self.best_step,
                "wall_clock_s": round(self.wall_clock_s, 3)}


def td_target(reward: np.ndarray, terminal: np.ndarray,
              next_value: np.ndarray, discount: float) -> np.ndarray:
    """Bootstrapped one-step value target. Terminal rows keep only their
    reward, and a zero discount reduces the whole thing to the reward."""
    return reward + discount * (1.0 - terminal) * next_value


def _polyak(target: ParamStore, online: ParamStore, names: list[str],
            blend: float) -> None:
    for n in names:
        t = target.values[n]
        t *= 1.0 - blend
        t += blend * online.values[n]


def train_td3bc(dataset: TransitionBatch, task, space: TaskSpace,
                cfg: TD3BCConfig, seed: int, env_cfg: EnvConfig = EnvConfig(),
                out_dir: str | None = None, log=None) -> TD3BCResult:
    """Offline TD3-BC on one task's dataset; returns the best-evaluation
    policy.

    Non-finite losses or gradients abort with diagnostics rather than being
    skipped: on a fixed dataset they mean divergence, not a bad draw.
    """
    space.validate_task(task)
    if dataset.n < cfg.batch_size:
        raise ValueError(f"dataset has {dataset.n} rows, need at least "
                         f"batch_size={cfg.batch_size}")
    codec, obs, act, rew, obs_next, term = _prepare_single(dataset, task, space)
    d_obs = codec.dim

    online = ParamStore(seed=_mix_seed(0x7D3B, seed, task))
    actor = MLP(online, "actor", d_obs, (cfg.hidden, cfg.hidden), ACTION_DIM,
                squash=True)
    q1 = MLP(online, "q1", d_obs + ACTION_DIM, (cfg.hidden, cfg.hidden), 1)
    q2 = MLP(online, "q2", d_obs + ACTION_DIM, (cfg.hidden, cfg.hidden), 1)

    target = ParamStore(seed=0)
    t_actor = MLP(target, "actor", d_obs, (cfg.hidden, cfg.hidden), ACTION_DIM,
                  squash=True)
    t_q1 = MLP(target, "q1", d_obs + ACTION_DIM, (cfg.hidden, cfg.hidden), 1)
    t_q2 = MLP(target, "q2", d_obs + ACTION_DIM, (cfg.hidden, cfg.hidden), 1)
    for n, v in online.values.items():
        target.values[n][...] = v

    opt = AdamW(online, lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(_mix_seed(0x7D3, seed, task))

    result = TD3BCResult(policy=None, task=tuple(task), seed=seed)
    best_actor = online.snapshot()
    t0 = time.monotonic()
    b = cfg.batch_size
    for step in range(cfg.steps):
        idx = rng.integers(0, dataset.n, size=b)
        s, a, r = obs[idx], act[idx], rew[idx]
        s2, d = obs_next[idx], term[idx]

        # clipped double-Q target with smoothed target actions
        noise = np.clip(rng.normal(0.0, cfg.policy_noise, size=(b, ACTION_DIM)),
                        -cfg.noise_clip, cfg.noise_clip).astype(np.float32)
        a2 = np.clip(t_actor.forward(s2) + noise, -1.0, 1.0).astype(np.float32)
        sa2 = np.concatenate([s2, a2], axis=1)
        q_next = np.minimum(t_q1.forward(sa2), t_q2.forward(sa2))[:, 0]
        y = td_target(r, d, q_next, cfg.discount)

        sa = np.concatenate([s, a], axis=1)
        online.zero_grad()
        e1 = q1.forward(sa)[:, 0] - y
        e2 = q2.forward(sa)[:, 0] - y
        critic_loss = float(np.mean(e1 * e1) + np.mean(e2 * e2))
        if not np.isfinite(critic_loss):
            raise FloatingPointError(
                f"critic loss diverged at step {step}: {critic_loss}")
        q1.backward((2.0 / b) * e1[:, None])
        q2.backward((2.0 / b) * e2[:, None])
        try:
            opt.step()
        except FloatingPointError as err:
            raise FloatingPointError(f"critic update aborted at step {step}: "
                                     f"{err}") from err

        if (step + 1) % cfg.policy_period == 0:
            pi = actor.forward(s)
            spi = np.concatenate([s, pi], axis=1)
            q_pi = q1.forward(spi)[:, 0]
            lam = cfg.q_scale / max(float(np.mean(np.abs(q_pi))), 1e-8)
            # input gradient of the critic at (s, pi); critic weights get
            # grads too, so clear everything before the actor backward
            online.zero_grad()
            dsa = q1.backward(np.full((b, 1), -lam / b, dtype=np.float32))
            d_action = dsa[:, d_obs:]
            online.zero_grad()
            d_bc = (2.0 / b) * (pi - a)
            actor_loss = float(-lam * np.mean(q_pi)
                               + np.mean(np.sum((pi - a) ** 2, axis=1)))
            if not np.isfinite(actor_loss):
                raise FloatingPointError(
                    f"actor loss diverged at step {step}: {actor_loss}")
            actor.backward(d_action + d_bc)
            try:
                opt.step()
            except FloatingPointError as err:
                raise FloatingPointError(f"actor update aborted at step "
                                         f"{step}: {err}") from err
            _polyak(target, online, list(online.values), cfg.target_blend)

        if (step + 1) % cfg.eval_period == 0 or step == cfg.steps - 1:
            policy = Policy(actor, codec)
            success = evaluate_policy(policy, task, cfg.eval_episodes, seed,
                                      space, env_cfg)
            result.curve.append((step + 1, success))
            if success > result.best_success or not result.curve[:-1]:
                result.best_success = success
                result.best_step = step + 1
                best_actor = online.snapshot()
            if log is not None:
                log(f"task {task} seed {seed} step {step + 1}/{cfg.steps} "
                    f"success {success:.2f} critic {critic_loss:.4f}")

    frozen = ParamStore(seed=0)
    frozen_actor = MLP(frozen, "actor", d_obs, (cfg.hidden, cfg.hidden),
                       ACTION_DIM, squash=True)
    for n in frozen_actor.param_names():
        frozen.values[n][...] = best_actor[n]
    result.policy = Policy(frozen_actor, codec)
    result.wall_clock_s = time.monotonic() - t0

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_policy(os.path.join(out_dir, "policy.npz"), result.policy,
                    cfg.hidden, extra={"task": list(task), "seed": seed})
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(result.report(), fh, indent=1, sort_keys=True)
    return result


def _mix_seed(tag: int, seed: int, task=None) -> int:
    parts = (tag, seed) + (tuple(task) if task is not None else ())
    out = 0
    for p in parts:
        out = (out * 1000003 + int(p) + 1) % (2 ** 63)
    return out


def save_policy(path: str, policy: Policy, hidden: int,
                extra: dict | None = None) -> None:
    meta = {"kind": "greedy_actor", "hidden": hidden,
            "codec": policy.codec.to_json()}
    meta.update(extra or {})
    save_checkpoint(path, policy.actor.store, step=0, meta=meta)


def load_policy(path: str) -> Policy:
    with np.load(path, allow_pickle=True) as z:
        meta = json.loads(str(z["meta"]))
    codec = ObsCodec.from_json(meta["codec"])
    store = ParamStore(seed=0)
    actor = MLP(store, "actor", codec.dim, (meta["hidden"], meta["hidden"]),
                ACTION_DIM, squash=True)
    load_checkpoint(path, store)
    return Policy(actor, codec)


# ---------------------------------------------------------------------------
# multitask actors

class HardcodedGraph:
    """Fixed factor wiring: obstacle, object, objective and robot modules in a
    chain. Each module reads the running context plus its own factor block and
    indicator slice; the robot module emits the action."""

    CHAIN = (("obstacle", (32,)), ("object", (32, 32)),
             ("objective", (64, 64, 64)), ("robot", (64, 64, 64)))
    CONTEXT = 32

    def __init__(self, store: ParamStore, name: str, space: TaskSpace):
        self.store = store
        self.name = name
        self.space = space
        self._spans = _obs_spans(space)
        self.modules = []
        ctx = 0
        for axis, widths in self.CHAIN:
            blk, ind = self._spans[axis]
            d_in = ctx + (blk.stop - blk.start) + (ind.stop - ind.start)
            last = axis == self.CHAIN[-1][0]
            d_out = ACTION_DIM if last else self.CONTEXT
            self.modules.append(
                (axis, MLP(store, f"{name}.{axis}", d_in, widths, d_out,
                           squash=last)))
            ctx = d_out

    def forward(self, obs: np.ndarray) -> np.ndarray:
        self._cache = []
        ctx = np.zeros((obs.shape[0], 0), dtype=obs.dtype)
        for axis, mod in self.modules:
            blk, ind = self._spans[axis]
            x = np.concatenate([ctx, obs[:, blk], obs[:, ind]], axis=1)
            self._cache.append(ctx.shape[1])
            ctx = mod.forward(x)
        return ctx

    def backward(self, dout: np.ndarray) -> None:
        # context gradients chain backwards; observation slices are inputs,
        # their gradients stop here
        for (axis, mod), ctx_w in zip(reversed(self.modules),
                                      reversed(self._cache)):
            dx = mod.backward(dout)
            dout = dx[:, :ctx_w]

    def param_names(self) -> list[str]:
        return [n for n in self.store.values if n.startswith(self.name + ".")]


class SemanticTransformer:
    """Factor tokens through one attention block, mean-pooled into a small
    action head."""

    WIDTH = 56
    HEADS = 4
    FF_RATIO = 2
    HEAD_HIDDEN = 40

    def __init__(self, store: ParamStore, name: str, space: TaskSpace):
        self.store = store
        self.name = name
        self.space = space
        self._spans = _obs_spans(space)
        d = self.WIDTH
        self.encoders = []
        for axis in _AXIS_BLOCKS:
            blk, ind = self._spans[axis]
            d_in = (blk.stop - blk.start) + (ind.stop - ind.start)
            self.encoders.append((axis, Linear(store, f"{name}.enc.{axis}",
                                               d_in, d)))
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.attn = MultiHeadSelfAttention(store, f"{name}.attn", d, self.HEADS)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ff = FeedForward(store, f"{name}.ff", d, ratio=self.FF_RATIO)
        self.head = MLP(store, f"{name}.head", d, (self.HEAD_HIDDEN,),
                        ACTION_DIM, squash=True)

    def forward(self, obs: np.ndarray) -> np.ndarray:
        toks = []
        for axis, enc in self.encoders:
            blk, ind = self._spans[axis]
            toks.append(enc.forward(
                np.concatenate([obs[:, blk], obs[:, ind]], axis=1)))
        x = np.stack(toks, axis=1)              # (B, 4, d)
        x = x + self.attn.forward(self.ln1.forward(x))
        x = x + self.ff.forward(self.ln2.forward(x))
        pooled = x.mean(axis=1)
        return self.head.forward(pooled)

    def backward(self, dout: np.ndarray) -> None:
        dpooled = self.head.backward(dout)
        k = len(self.encoders)
        dx = np.repeat(dpooled[:, None, :], k, axis=1) / k
        dx = dx + self.ln2.backward(self.ff.backward(dx))
        dx = dx + self.ln1.backward(self.attn.backward(dx))
        for i, (axis, enc) in enumerate(self.encoders):
            enc.backward(dx[:, i, :])

    def param_names(self) -> list[str]:
        return [n for n in self.store.values if n.startswith(self.name + ".")]


def _obs_spans(space: TaskSpace) -> dict[str, tuple[slice, slice]]:
    """Per-axis (state block, indicator slice) column spans inside the
    indicator-augmented observation."""
    spans = {}
    offset = STATE_DIM
    for axis, card in zip(_AXIS_BLOCKS, space.cardinalities):
        spans[axis] = (_AXIS_BLOCKS[axis], slice(offset, offset + card))
        offset += card
    return spans


MULTITASK_ARCHS = ("hardcoded_graph", "semantic_transformer")


def build_multitask_actor(arch: str, store: ParamStore, space: TaskSpace):
    if arch == "hardcoded_graph":
        return HardcodedGraph(store, "actor", space)
    if arch == "semantic_transformer":
        return SemanticTransformer(store, "actor", space)
    raise ValueError(f"unknown multitask architecture {arch!r}; "
                     f"expected one of {MULTITASK_ARCHS}")


def multitask_capacity(space: TaskSpace) -> dict:
    """Actor parameter counts for both shared-policy architectures; they are
    meant to sit within 5% of each other."""
    counts = {}
    for arch in MULTITASK_ARCHS:
        store = ParamStore(seed=0)
        actor = build_multitask_actor(arch, store, space)
        counts[arch] = sum(store.values[n].size for n in actor.param_names())
    lo, hi = min(counts.values()), max(counts.values())
    return {"counts": counts, "spread": (hi - lo) / lo}


class MultitaskPolicy:
    """Shared actor over tasks; for_task binds one task's indicator codec."""

    def __init__(self, actor, mean: np.ndarray, std: np.ndarray,
                 space: TaskSpace):
        self.actor = actor
        self.mean = mean
        self.std = std
        self.space = space

    def for_task(self, task) -> Policy:
        codec = ObsCodec(self.mean, self.std,
                         task_indicator(self.space, task).astype(np.float64))
        return Policy(self.actor, codec)


@dataclass
class MultitaskResult:
    policy: MultitaskPolicy
    curve: list = field(default_factory=list)    # (step, mean success)
    per_task: dict = field(default_factory=dict)  # final per-task success
    best_success: float = 0.0
    best_step: int = 0


def train_multitask_compositional(datasets: list[TransitionBatch], arch: str,
                                  space: TaskSpace, cfg: TD3BCConfig,
                                  seed: int,
                                  tasks: list | None = None,
                                  env_cfg: EnvConfig = EnvConfig(),
                                  log=None) -> MultitaskResult:
    """One shared policy over several tasks, trained with the same critic
    rule. Every step draws an equal share of the batch from each task.
    """
    pools = {}
    for b in datasets:
        if b.task is None:
            raise ValueError("multitask training requires task-labeled batches")
        pools.setdefault(tuple(b.task), []).append(b.rows)
    pools = {t: np.concatenate(rs, axis=0) for t, rs in pools.items()}
    tasks = sorted(pools) if tasks is None else [tuple(t) for t in tasks]
    for t in tasks:
        if t not in pools:
            raise ValueError(f"no dataset for task {t}")
    if cfg.batch_size % len(tasks) != 0:
        raise ValueError(f"batch_size {cfg.batch_size} not divisible by "
                         f"{len(tasks)} tasks; shares must be equal")
    share = cfg.batch_size // len(tasks)

    mean, std = state_stats(np.concatenate(
        [pools[t][:, T_STATE] for t in tasks], axis=0))
    prepped = {}
    for t in tasks:
        rows = pools[t]
        if rows.shape[0] < share:
            raise ValueError(f"dataset for task {t} has {rows.shape[0]} rows, "
                             f"need at least the per-task share {share}")
        codec = ObsCodec(mean, std, task_indicator(space, t).astype(np.float64))
        prepped[t] = (codec.encode(rows[:, T_STATE]),
                      np.clip(rows[:, T_ACTION].astype(np.float32), -1, 1),
                      rows[:, T_REWARD].astype(np.float32),
                      codec.encode(rows[:, T_NEXT_STATE]),
                      rows[:, T_TERMINAL].astype(np.float32))

    d_obs = STATE_DIM + space.indicator_dim
    online = ParamStore(seed=_mix_seed(0x3417, seed))
    actor = build_multitask_actor(arch, online, space)
    q1 = MLP(online, "q1", d_obs + ACTION_DIM, (cfg.hidden, cfg.hidden), 1)
    q2 = MLP(online, "q2", d_obs + ACTION_DIM, (cfg.hidden, cfg.hidden), 1)
    target = ParamStore(seed=0)
    t_actor = build_multitask_actor(arch, target, space)
    t_q1 = MLP(target, "q1", d_obs + ACTION_DIM, (cfg.hidden, cfg.hidden), 1)
    t_q2 = MLP(target, "q2", d_obs + ACTION_DIM, (cfg.hidden, cfg.hidden), 1)
    for n, v in online.values.items():
        target.values[n][...] = v

    opt = AdamW(online, lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(_mix_seed(0x3418, seed))
    result = MultitaskResult(policy=None)
    best_actor = online.snapshot()
    b = cfg.batch_size

    for step in range(cfg.steps):
        parts = [[], [], [], [], []]
        for t in tasks:
            obs, act, rew, obs2, term = prepped[t]
            idx = rng.integers(0, obs.shape[0], size=share)
            for part, arr in zip(parts, (obs, act, rew, obs2, term)):
                part.append(arr[idx])
        s, a, r, s2, d = (np.concatenate(p, axis=0) for p in parts)

        noise = np.clip(rng.normal(0.0, cfg.policy_noise, size=(b, ACTION_DIM)),
                        -cfg.noise_clip, cfg.noise_clip).astype(np.float32)
        a2 = np.clip(t_actor.forward(s2) + noise, -1.0, 1.0).astype(np.float32)
        sa2 = np.concatenate([s2, a2], axis=1)
        q_next = np.minimum(t_q1.forward(sa2), t_q2.forward(sa2))[:, 0]
        y = td_target(r, d, q_next, cfg.discount)

        sa = np.concatenate([s, a], axis=1)
        online.zero_grad()
        e1 = q1.forward(sa)[:, 0] - y
        e2 = q2.forward(sa)[:, 0] - y
        critic_loss = float(np.mean(e1 * e1) + np.mean(e2 * e2))
        if not np.isfinite(critic_loss):
            raise FloatingPointError(
                f"critic loss diverged at step {step}: {critic_loss}")
        q1.backward((2.0 / b) * e1[:, None])
        q2.backward((2.0 / b) * e2[:, None])
        opt.step()

        if (step + 1) % cfg.policy_period == 0:
            pi = actor.forward(s)
            spi = np.concatenate([s, pi], axis=1)
            q_pi = q1.forward(spi)[:, 0]
            lam = cfg.q_scale / max(float(np.mean(np.abs(q_pi))), 1e-8)
            online.zero_grad()
            dsa = q1.backward(np.full((b, 1), -lam / b, dtype=np.float32))
            d_action = dsa[:, d_obs:]
            online.zero_grad()
            actor.backward(d_action + (2.0 / b) * (pi - a))
            opt.step()
            _polyak(target, online, list(online.values), cfg.target_blend)

        if (step + 1) % cfg.eval_period == 0 or step == cfg.steps - 1:
            shared = MultitaskPolicy(actor, mean, std, space)
            per_task = {t: evaluate_policy(shared.for_task(t), t,
                                           cfg.eval_episodes, seed, space,
                                           env_cfg)
                        for t in tasks}
            mean_sr = float(np.mean(list(per_task.values())))
            result.curve.append((step + 1, mean_sr))
            result.per_task = per_task
            if mean_sr > result.best_success or not result.curve[:-1]:
                result.best_success = mean_sr
                result.best_step = step + 1
                best_actor = online.snapshot()
            if log is not None:
                log(f"{arch} step {step + 1}/{cfg.steps} mean success "
                    f"{mean_sr:.2f}")

    frozen = ParamStore(seed=0)
    frozen_actor = build_multitask_actor(arch, frozen, space)
    for n in frozen_actor.param_names():
        frozen.values[n][...] = best_actor[n]
    result.policy = MultitaskPolicy(frozen_actor, mean, std, space)
    return result
