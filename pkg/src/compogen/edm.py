"""Continuous-noise diffusion core: schedules, loss, preconditioning, sampling.

Training draws per-sample noise levels from a log-normal, perturbs clean rows
as x_t = x_0 + sigma * eps, and minimizes the weighted reconstruction error
w(sigma) * ||D(x_t, sigma) - x_0||^2. Generation integrates the probability
flow dx = (x - D(x, sigma)) / sigma * dsigma with a second-order (Heun)
stepper over a power-law schedule, optionally re-injecting bounded stochastic
noise ("churn") in a middle band of noise levels.

The denoiser D wraps a raw residual model with the standard input/output
scalings so one network stays well-conditioned across sigma in [0.002, 80].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ChurnConfig:
    strength: float = 80.0     # S_churn; 0 disables
    t_min: float = 0.05        # band of noise levels that receive churn
    t_max: float = 50.0
    noise_scale: float = 1.003

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("churn strength must be >= 0")
        if not (0.0 <= self.t_min < self.t_max):
            raise ValueError("churn band needs 0 <= t_min < t_max")


@dataclass(frozen=True)
class EDMConfig:
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 1.0
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sampling_steps: int = 128
    churn: ChurnConfig = field(default_factory=ChurnConfig)

    def __post_init__(self):
        if self.p_std <= 0:
            raise ValueError("p_std must be positive")
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.sampling_steps < 2:
            raise ValueError("sampling_steps must be >= 2")


def sample_noise_level(cfg: EDMConfig, rng: np.random.Generator,
                       n: int | None = None):
    """sigma = exp(z), z ~ Normal(p_mean, p_std^2); scalar or length-n vector."""
    z = rng.normal(cfg.p_mean, cfg.p_std, size=n)
    return np.exp(z) if n is not None else float(math.exp(z))


def loss_weight(sigma, cfg: EDMConfig):
    """w(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("loss_weight needs sigma > 0")
    w = (s * s + cfg.sigma_data ** 2) / (s * cfg.sigma_data) ** 2
    return w if s.ndim else float(w)


def karras_schedule(cfg: EDMConfig) -> np.ndarray:
    """Power-law noise schedule, length N+1, strictly decreasing, final entry 0.

    The i=0 and i=N-1 entries collapse to sigma_max and sigma_min analytically;
    they are pinned exactly rather than left to round-trip through the power.
    """
    n = cfg.sampling_steps
    inv_max = cfg.sigma_max ** (1.0 / cfg.rho)
    inv_min = cfg.sigma_min ** (1.0 / cfg.rho)
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    sig = (inv_max + ramp * (inv_min - inv_max)) ** cfg.rho
    sig[0] = cfg.sigma_max
    sig[-1] = cfg.sigma_min
    out = np.concatenate([sig, [0.0]])
    if not np.all(np.diff(out) < 0):
        raise AssertionError("schedule not strictly decreasing")
    return out


def sigma_midpoint(cfg: EDMConfig) -> float:
    """The schedule entry at index floor((N-1)/2)."""
    return float(karras_schedule(cfg)[(cfg.sampling_steps - 1) // 2])


def precond_coeffs(sigma, sigma_data: float):
    """Scaling coefficients (c_skip, c_out, c_in, c_noise) for a noise level."""
    s = np.asarray(sigma, dtype=np.float64)
    sd2 = sigma_data ** 2
    denom = s * s + sd2
    c_skip = sd2 / denom
    c_out = s * sigma_data / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    c_noise = 0.25 * np.log(s)
    return c_skip, c_out, c_in, c_noise


class PreconditionedDenoiser:
    """D(x, sigma) = c_skip * x + c_out * raw(c_in * x, c_noise, task).

    The raw model maps (scaled input, log-noise features, task indicator) to a
    residual of the same width and exposes forward/backward plus its parameter
    store. sigma may be a scalar or one value per row.
    """

    def __init__(self, raw_model, sigma_data: float = 1.0):
        self.raw = raw_model
        self.sigma_data = sigma_data
        self._cache = None

    @property
    def dim(self) -> int:
        return self.raw.dim

    @property
    def store(self):
        return self.raw.store

    def forward(self, x: np.ndarray, sigma, task) -> np.ndarray:
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        c_skip, c_out, c_in, c_noise = precond_coeffs(s, self.sigma_data)
        raw_out = self.raw.forward(x * c_in[:, None], c_noise, task)
        self._cache = (c_skip, c_out)
        return c_skip[:, None] * x + c_out[:, None] * raw_out

    def backward(self, dout: np.ndarray) -> None:
        _, c_out = self._cache
        self.raw.backward(dout * c_out[:, None])


def denoise_loss(denoiser: PreconditionedDenoiser, x0: np.ndarray, task,
                 cfg: EDMConfig, rng: np.random.Generator,
                 backward: bool = True) -> float:
    """Mean over the batch of w(sigma) * ||D(x0 + sigma*eps, sigma) - x0||^2.

    One noise level per sample. Gradients accumulate into the raw model's
    parameter store when backward=True; a non-finite loss is rejected before
    any backward pass runs.
    """
    b = x0.shape[0]
    sigma = sample_noise_level(cfg, rng, n=b)
    eps = rng.standard_normal(x0.shape)
    x_t = x0 + sigma[:, None] * eps
    pred = denoiser.forward(x_t, sigma, task)
    diff = pred - x0
    w = loss_weight(sigma, cfg)
    loss = float(np.mean(w * np.sum(diff * diff, axis=1)))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite denoising loss; step rejected")
    if backward:
        denoiser.backward((2.0 / b) * w[:, None] * diff)
    return loss


def sample(denoiser, task, n_samples: int, cfg: EDMConfig, seed: int,
           churn_enabled: bool = True) -> np.ndarray:
    """Heun integration of the probability-flow update over the schedule.

    Returns samples in the model's (normalized) data space, float64, shape
    (n_samples, D). Deterministic given seed. Churn perturbs x with fresh
    noise before each step whose sigma lies inside the configured band.

    seed may be an int or a tuple of ints (callers that sample in chunks
    pass (seed, chunk_index) so every chunk gets an independent stream).
    """
    entropy = seed if isinstance(seed, tuple) else (seed,)
    rng = np.random.default_rng((0xED0, *entropy))
    sig = karras_schedule(cfg)
    n_steps = cfg.sampling_steps
    x = sig[0] * rng.standard_normal((n_samples, denoiser.dim))
    gamma_cap = min(cfg.churn.strength / n_steps, math.sqrt(2.0) - 1.0)
    for i in range(n_steps):
        s_cur, s_next = sig[i], sig[i + 1]
        gamma = 0.0
        if churn_enabled and cfg.churn.strength > 0 and \
                cfg.churn.t_min <= s_cur <= cfg.churn.t_max:
            gamma = gamma_cap
        s_hat = s_cur * (1.0 + gamma)
        if gamma > 0.0:
            bump = math.sqrt(s_hat * s_hat - s_cur * s_cur)
            x = x + cfg.churn.noise_scale * bump * rng.standard_normal(x.shape)
        d = (x - denoiser.forward(x, s_hat, task)) / s_hat
        x_next = x + (s_next - s_hat) * d
        if s_next > 0.0:
            d2 = (x_next - denoiser.forward(x_next, s_next, task)) / s_next
            x_next = x + (s_next - s_hat) * 0.5 * (d + d2)
        x = x_next
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(
                f"non-finite sample at step {i} (sigma {s_cur:.4g}); batch rejected")
    return x
