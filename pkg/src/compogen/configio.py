"""Experiment configuration files.

One INI file drives every command: task grid and split, simulator constants,
denoiser sizes, noise schedule, training budgets for the generator and the
offline RL validator, generation volume, and the admission loop. The schema
below is the single source of truth; loading rejects unknown sections or
fields and names the offending field in the error, so a typo cannot silently
fall back to a default.

Omitted fields do fall back to defaults. The shipped configs under configs/
spell out every field anyway, each with a comment saying what it controls,
so a run directory's snapshot is self-describing.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .bootstrap import BootstrapConfig
from .denoisers import VARIANTS, DenoiserConfig
from .edm import ChurnConfig, EDMConfig
from .env import EnvConfig, TaskSpace, desk_space, full_space, split_tasks
from .rl import TD3BCConfig
from .training import DiffusionTrainConfig


class ConfigError(Exception):
    """A config file violated the schema; the message names the field."""


def _int(raw: str) -> int:
    return int(raw)


def _float(raw: str) -> float:
    return float(raw)


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _bool(raw: str) -> bool:
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {raw!r}")


def _opt_int(raw: str):
    return None if raw.strip() == "" else int(raw)


def _opt_float(raw: str):
    return None if raw.strip() == "" else float(raw)


def _int_tuple(raw: str) -> tuple:
    parts = [p for p in (s.strip() for s in raw.split(",")) if p]
    if not parts:
        raise ValueError("expected at least one integer")
    return tuple(int(p) for p in parts)


def _choice(*options):
    def parse(raw: str) -> str:
        v = raw.strip()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return v
    return parse


@dataclass(frozen=True)
class _Field:
    parse: object   # str -> value
    default: object
    help: str       # one-line functional description for rendered configs


# section -> key -> field. Defaults mirror the owning dataclasses so a file
# that omits a key behaves exactly like constructing the dataclass bare.
SCHEMA = {
    "space": {
        "grid": _Field(_choice("desk", "full"), "desk",
                       "task grid: desk (2x2x2x2) or full (4x4x4x4)"),
        "fixed_robot": _Field(_opt_int, None,
                              "restrict the grid to one robot index; blank trains across robots"),
        "n_train": _Field(_int, 6,
                          "training split size; the rest of the grid is held out"),
        "split_seed": _Field(_int, 0,
                             "shuffle seed for the train/held-out split"),
    },
    "env": {
        "dt": _Field(_float, 0.1, "integration step in seconds"),
        "horizon": _Field(_int, 100, "steps per episode"),
        "v_max": _Field(_float, 1.0, "actuator velocity ceiling"),
        "grasp_tol": _Field(_float, 0.10, "distance at which the scripted expert closes the grip"),
        "goal_tol": _Field(_float, 0.05, "distance counted as at-goal"),
        "margin": _Field(_float, 0.02, "workspace overshoot treated as failure"),
    },
    "collect": {
        "transitions_per_task": _Field(_int, 50000,
                                       "expert transitions gathered per training task"),
        "noise_scale": _Field(_float, 0.1,
                              "stddev of exploration noise added to expert actions"),
    },
    "model": {
        "width": _Field(_int, 128, "token embedding width"),
        "depth": _Field(_int, 4, "transformer block count"),
        "heads": _Field(_int, 4, "attention heads per block"),
        "ff_ratio": _Field(_int, 4, "feed-forward width as a multiple of the embedding"),
        "patch_size": _Field(_int, 15, "flat patch length for the standard tokenizer"),
        "noise_feature_dim": _Field(_int, 128, "sinusoidal noise embedding size"),
        "mono_width": _Field(_int, 376, "hidden width of the flat residual baseline"),
        "mono_layers": _Field(_int, 8, "residual layer count of the flat baseline"),
    },
    "edm": {
        "p_mean": _Field(_float, -1.2, "mean of log sigma during training"),
        "p_std": _Field(_float, 1.2, "stddev of log sigma during training"),
        "sigma_data": _Field(_float, 1.0, "data scale entering the loss weight and preconditioner"),
        "sigma_min": _Field(_float, 0.002, "lowest nonzero noise level of the sampling schedule"),
        "sigma_max": _Field(_float, 80.0, "highest noise level of the sampling schedule"),
        "rho": _Field(_float, 7.0, "schedule curvature; larger spends more steps at low noise"),
        "sampling_steps": _Field(_int, 128, "denoising steps per generated sample"),
        "churn_strength": _Field(_float, 80.0, "stochastic noise re-injection strength; 0 disables"),
        "churn_t_min": _Field(_float, 0.05, "lower edge of the noise band receiving churn"),
        "churn_t_max": _Field(_float, 50.0, "upper edge of the noise band receiving churn"),
        "churn_noise_scale": _Field(_float, 1.003, "scale on the re-injected noise"),
    },
    "diffusion": {
        "steps": _Field(_int, 4000, "generator optimizer steps"),
        "batch_size": _Field(_int, 256, "transitions per generator step"),
        "lr": _Field(_opt_float, None,
                     "generator peak learning rate; blank uses the per-variant default"),
        "weight_decay": _Field(_opt_float, None,
                               "generator weight decay; blank uses the per-variant default"),
        "ema_decay": _Field(_float, 0.999, "decay of the sampling weight average"),
        "checkpoint_every": _Field(_int, 1000, "steps between checkpoint writes"),
    },
    "generation": {
        "transitions_per_task": _Field(_int, 20000,
                                       "synthetic transitions sampled per target task"),
        "churn": _Field(_bool, True, "enable sampler churn during generation"),
        "chunk": _Field(_int, 1024, "samples drawn per sampler call; controls memory"),
    },
    "policy": {
        "steps": _Field(_int, 20000, "offline RL optimizer steps"),
        "batch_size": _Field(_int, 256, "transitions per offline RL step"),
        "lr": _Field(_float, 3e-4, "actor and critic learning rate"),
        "discount": _Field(_float, 0.99, "return discount"),
        "target_blend": _Field(_float, 0.005, "polyak rate onto the slow target networks"),
        "q_scale": _Field(_float, 2.5, "critic term scale before the |Q| normalizer"),
        "policy_noise": _Field(_float, 0.2, "smoothing noise on target actions"),
        "noise_clip": _Field(_float, 0.5, "clip bound on the smoothing noise"),
        "policy_period": _Field(_int, 2, "critic updates per actor/target update"),
        "eval_period": _Field(_int, 2000, "steps between policy evaluations"),
        "eval_episodes": _Field(_int, 10, "episodes per evaluation"),
        "hidden": _Field(_int, 256, "actor/critic hidden width"),
    },
    "bootstrap": {
        "variant": _Field(_choice(*VARIANTS), "semantic_compositional",
                          "denoiser variant the admission loop retrains"),
        "tau_start": _Field(_float, 0.8, "initial admission threshold on success rate"),
        "tau_min": _Field(_float, 0.5, "threshold floor"),
        "tau_step": _Field(_float, 0.1, "threshold decrement after a stalled round"),
        "patience": _Field(_int, 1, "stalled rounds tolerated before relaxing the threshold"),
        "max_rounds": _Field(_int, 3, "round budget"),
        "rl_seeds": _Field(_int_tuple, (0, 1),
                           "offline RL seeds averaged when validating a synthetic set"),
        "warm_start": _Field(_bool, False,
                             "reuse the previous round's generator weights instead of retraining"),
    },
    "analysis": {
        "n_probes": _Field(_int, 100, "noisy probe samples per task for interaction matrices"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs, assembled from one file."""
    grid: str
    fixed_robot: int | None
    n_train: int
    split_seed: int
    env: EnvConfig
    model: DenoiserConfig
    edm: EDMConfig
    diffusion: DiffusionTrainConfig
    policy: TD3BCConfig
    bootstrap: BootstrapConfig
    generator_variant: str
    collect_transitions: int
    collect_noise: float
    generate_transitions: int
    generate_churn: bool
    generate_chunk: int
    analysis_probes: int

    def space(self) -> TaskSpace:
        return desk_space() if self.grid == "desk" else full_space()

    def fixed_axes(self) -> dict | None:
        if self.fixed_robot is None:
            return None
        return {"robot": self.fixed_robot}

    def split(self) -> tuple[list, list]:
        """(training tasks, held-out tasks) for this grid and seed."""
        return split_tasks(self.space(), self.n_train, self.split_seed,
                           fixed_axes=self.fixed_axes())


def _parse_sections(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=("#",))
    try:
        with open(path) as f:
            parser.read_file(f)
    except (configparser.Error, UnicodeDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}")

    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}] in {path}")
        fields = SCHEMA[section]
        for key, raw in parser[section].items():
            if key not in fields:
                raise ConfigError(
                    f"unknown config field [{section}] {key} in {path}")
            try:
                values[(section, key)] = fields[key].parse(raw)
            except (ValueError, TypeError) as err:
                raise ConfigError(f"config field [{section}] {key}: {err}")
    return values


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate one config file.

    Raises ConfigError on unknown sections/fields, unparsable values, and
    values the owning component rejects; the message names the field or
    section at fault.
    """
    values = _parse_sections(path)

    def get(section: str, key: str):
        return values.get((section, key), SCHEMA[section][key].default)

    def build(section: str, ctor, **extra):
        kwargs = {k: get(section, k) for k in SCHEMA[section]}
        kwargs.update(extra)
        try:
            return ctor(**kwargs)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"config section [{section}]: {err}")

    env = build("env", EnvConfig)
    model = build("model", DenoiserConfig)

    edm_keys = {k: get("edm", k) for k in SCHEMA["edm"]}
    try:
        churn = ChurnConfig(strength=edm_keys.pop("churn_strength"),
                            t_min=edm_keys.pop("churn_t_min"),
                            t_max=edm_keys.pop("churn_t_max"),
                            noise_scale=edm_keys.pop("churn_noise_scale"))
        edm = EDMConfig(churn=churn, **edm_keys)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"config section [edm]: {err}")

    diffusion = build("diffusion", DiffusionTrainConfig)
    policy = build("policy", TD3BCConfig)

    boot_keys = {k: get("bootstrap", k) for k in SCHEMA["bootstrap"]}
    variant = boot_keys.pop("variant")
    try:
        bootstrap = BootstrapConfig(**boot_keys)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"config section [bootstrap]: {err}")

    cfg = ExperimentConfig(
        grid=get("space", "grid"),
        fixed_robot=get("space", "fixed_robot"),
        n_train=get("space", "n_train"),
        split_seed=get("space", "split_seed"),
        env=env, model=model, edm=edm, diffusion=diffusion, policy=policy,
        bootstrap=bootstrap, generator_variant=variant,
        collect_transitions=get("collect", "transitions_per_task"),
        collect_noise=get("collect", "noise_scale"),
        generate_transitions=get("generation", "transitions_per_task"),
        generate_churn=get("generation", "churn"),
        generate_chunk=get("generation", "chunk"),
        analysis_probes=get("analysis", "n_probes"),
    )

    space = cfg.space()
    if cfg.fixed_robot is not None and not (
            0 <= cfg.fixed_robot < len(space.robots)):
        raise ConfigError(
            f"config field [space] fixed_robot: index {cfg.fixed_robot} "
            f"outside the {len(space.robots)}-robot grid")
    grid_size = len(space.tasks())
    if cfg.fixed_robot is not None:
        grid_size //= len(space.robots)
    if not (1 <= cfg.n_train < grid_size):
        raise ConfigError(
            f"config field [space] n_train: {cfg.n_train} must lie in "
            f"[1, {grid_size - 1}] for this grid")
    if cfg.collect_transitions < 1 or cfg.generate_transitions < 1:
        raise ConfigError(
            "config field [collect]/[generation] transitions_per_task: "
            "must be positive")
    if cfg.generate_chunk < 1:
        raise ConfigError("config field [generation] chunk: must be positive")
    if cfg.collect_noise < 0:
        raise ConfigError("config field [collect] noise_scale: must be >= 0")
    if cfg.analysis_probes < 1:
        raise ConfigError("config field [analysis] n_probes: must be positive")
    return cfg


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def render_config(overrides: dict | None = None, header: str = "") -> str:
    """INI text with every schema field present and commented.

    overrides maps (section, key) to a value; everything else renders its
    default. This is how the shipped configs are produced, which keeps them
    complete by construction.
    """
    overrides = overrides or {}
    for section, key in overrides:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise KeyError(f"override names unknown field [{section}] {key}")
    lines = []
    if header:
        lines.extend(f"# {line}".rstrip() for line in header.splitlines())
        lines.append("")
    for section, fields in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, field in fields.items():
            value = overrides.get((section, key), field.default)
            lines.append(f"# {field.help}")
            lines.append(f"{key} = {_format_value(value)}".rstrip())
        lines.append("")
    return "\n".join(lines)
