"""Noise schedules, the closed-form forward process, and guided sampling.

Timesteps are 1-based (t = 1..T).  Vector operations accept numpy arrays and
torch tensors interchangeably; schedule coefficients are plain floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import SOH_CEILING
from .errors import ConfigurationError, ParameterError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA_1 = 1e-4
DEFAULT_BETA_T = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule tables for T diffusion steps (index 0 holds t = 1)."""

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def _check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return t - 1

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t)])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t)])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t)])

    def sigma2_at(self, t: int) -> float:
        return float(self.sigma2[self._check_t(t)])

    def descriptor(self) -> dict:
        """Plain-text reconstruction recipe (stored in checkpoints)."""
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_1": float(self.beta[0]),
            "beta_T": float(self.beta[-1]),
        }


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance strength and training-time condition-drop probability."""

    w: float = 0.0
    p_uncond: float = 0.2

    def __post_init__(self):
        if not math.isfinite(self.w) or self.w < 0:
            raise ParameterError(f"guidance strength must be finite and >= 0, got {self.w}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ParameterError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")


def _derive_tables(kind: str, beta: np.ndarray) -> NoiseSchedule:
    # Accumulate the running product in extended precision, store at float64.
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha.astype(np.longdouble)).astype(np.float64)
    prev_bar = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - prev_bar) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(kind=kind, T=len(beta), beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar, sigma2=sigma2)


def make_schedule(
    kind: str = "linear",
    T: int = DEFAULT_T,
    beta_1: float = DEFAULT_BETA_1,
    beta_T: float = DEFAULT_BETA_T,
) -> NoiseSchedule:
    """Build a linear or cosine variance schedule.

    linear: betas evenly spaced from beta_1 to beta_T inclusive.
    cosine: squared-cosine cumulative-product construction with 0.008 offset;
    betas clipped to at most 0.999 (beta bounds are ignored).
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if kind == "linear":
        if not 0.0 < beta_1 <= beta_T < 1.0:
            raise ParameterError(
                f"need 0 < beta_1 <= beta_T < 1, got beta_1={beta_1}, beta_T={beta_T}"
            )
        beta = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        phase = ((np.arange(T + 1) / T) + s) / (1 + s) * (np.pi / 2)
        bar = np.cos(phase) ** 2
        bar /= bar[0]
        beta = np.clip(1.0 - bar[1:] / bar[:-1], 1e-8, 0.999)
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    return _derive_tables(kind, beta)


def _check_same_shape(a, b, names: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{names}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def forward_diffuse(x0, t: int, eps, s: NoiseSchedule):
    """Noised sample sqrt(abar_t)*x0 + sqrt(1 - abar_t)*eps."""
    _check_same_shape(x0, eps, "x0/eps")
    ab = s.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _posterior_mean(x_t, eps_hat, alpha_t: float, beta_t: float, alpha_bar_t: float):
    return (x_t - (beta_t / math.sqrt(1.0 - alpha_bar_t)) * eps_hat) / math.sqrt(alpha_t)


def posterior_mean(x_t, eps_hat, t: int, s: NoiseSchedule):
    """Reverse-step mean (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)."""
    _check_same_shape(x_t, eps_hat, "x_t/eps_hat")
    return _posterior_mean(x_t, eps_hat, s.alpha_at(t), s.beta_at(t), s.alpha_bar_at(t))


def guided_epsilon(eps_cond, eps_uncond, w: float):
    """Classifier-free combination (1+w)*eps_cond - w*eps_uncond."""
    _check_same_shape(eps_cond, eps_uncond, "eps_cond/eps_uncond")
    if w == 0.0:
        return eps_cond
    return (1.0 + w) * eps_cond - w * eps_uncond


def sample_step(x_t, eps_tilde, t: int, s: NoiseSchedule, rng: np.random.Generator):
    """One ancestral step: posterior mean plus sqrt(sigma2_t) noise (none at t=1)."""
    mu = posterior_mean(x_t, eps_tilde, t, s)
    if t == 1:
        return mu
    z = rng.standard_normal(np.shape(x_t))
    return mu + math.sqrt(s.sigma2_at(t)) * z


# ---------------------------------------------------------------------------
# Model-space normalization: soh fraction [0, SOH_CEILING] <-> [-1, 1]
# ---------------------------------------------------------------------------

_HALF_RANGE = SOH_CEILING / 2.0


def normalize_soh(values):
    """Affine map of soh fractions onto [-1, 1] for diffusion."""
    return values / _HALF_RANGE - 1.0


def denormalize_soh(x):
    """Inverse of `normalize_soh`, clamped to the valid soh range."""
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) * _HALF_RANGE, 0.0, SOH_CEILING)


# ---------------------------------------------------------------------------
# Ancestral sampling through a trained denoiser
# ---------------------------------------------------------------------------

def _check_model_schedule(model, s: NoiseSchedule):
    if model.schedule_T is not None and model.schedule_T != s.T:
        raise ConfigurationError(
            f"model trained with T={model.schedule_T}, sampler given T={s.T}"
        )


def sample_batch(
    model,
    conds,
    g: GuidanceConfig,
    s: NoiseSchedule,
    rng: np.random.Generator,
    n: int | None = None,
) -> np.ndarray:
    """Generate a batch of curves; returns (batch, L) soh fractions.

    ``conds`` is an (batch, n_early, n_feat) array, a sequence of capacity
    matrices, or None for unconditional draws of size ``n``.  Conditional
    batches evaluate the denoiser twice per step (conditional and
    unconditional passes, fused into one stacked forward).
    """
    from .denoiser import encode_condition_batch

    _check_model_schedule(model, s)
    net = model.eval_net()
    L = model.config.l

    if conds is None:
        if n is None or n < 1:
            raise ParameterError("unconditional sampling needs n >= 1")
        batch = n
        cond_embed = None
    else:
        cond_embed = encode_condition_batch(model, conds)
        batch = cond_embed.shape[0]

    null_rows = net.null_cond.detach().unsqueeze(0).expand(batch, -1)
    x = torch.from_numpy(rng.standard_normal((batch, L))).to(torch.float32)
    with torch.no_grad():
        for t in range(s.T, 0, -1):
            t_row = torch.full((batch,), t, dtype=torch.long)
            if cond_embed is not None:
                stacked = net(torch.cat([x, x]), torch.cat([t_row, t_row]),
                              torch.cat([cond_embed, null_rows]))
                eps_c, eps_u = stacked.chunk(2)
                eps = guided_epsilon(eps_c, eps_u, g.w)
            else:
                eps = net(x, t_row, null_rows)
            mu = _posterior_mean(x, eps, s.alpha_at(t), s.beta_at(t), s.alpha_bar_at(t))
            if t > 1:
                z = torch.from_numpy(rng.standard_normal((batch, L))).to(torch.float32)
                x = mu + math.sqrt(s.sigma2_at(t)) * z
            else:
                x = mu
    out = denormalize_soh(x.numpy())
    if not np.all(np.isfinite(out)):
        raise ConfigurationError("sampler produced non-finite values")
    return out


def sample(
    model,
    cond,
    g: GuidanceConfig,
    s: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Generate one curve (length L) from Gaussian noise, optionally conditioned."""
    if cond is None:
        return sample_batch(model, None, g, s, rng, n=1)[0]
    return sample_batch(model, [cond], g, s, rng)[0]
