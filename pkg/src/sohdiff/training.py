"""Denoising-objective training with condition dropout, Adam, and weight EMA."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset, DatasetItem, FeatureStats
from .denoiser import DenoiserConfig, DenoiserModel, init_model
from .diffusion import NoiseSchedule, normalize_soh
from .errors import ConfigurationError, NumericError, ParameterError
from .seeding import stream

DIVERGENCE_LOSS = 1e3
DIVERGENCE_PATIENCE = 100
GRAD_CLIP_NORM = 1.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 16
    step_size: float = 1e-4
    p_uncond: float = 0.2
    T: int = 1000
    ema_decay: float | None = 0.999
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.step_size <= 0:
            raise ParameterError(f"step_size must be positive, got {self.step_size}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ParameterError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")
        if self.eval_every < 1:
            raise ParameterError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass
class TrainReport:
    loss_history: list[tuple[int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    final_checkpoint: str | None = None


def dropout_mask(n: int, p_uncond: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of conditions to replace with the null embedding."""
    return rng.random(n) < p_uncond


def _as_pair(item) -> tuple:
    if isinstance(item, DatasetItem):
        return item.curve, item.capacity
    curve, capacity = item
    return curve, capacity


def loss_simple(
    model: DenoiserModel,
    batch,
    s: NoiseSchedule,
    p_uncond: float,
    rng: np.random.Generator,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean squared noise-prediction error and its parameter gradients.

    Per item the draw order is: all timesteps, all noise vectors, then the
    condition-dropout mask.  Returns gradients for every parameter (exact
    zeros for parameters the batch never touched).
    """
    if len(batch) == 0:
        raise ParameterError("empty batch")
    pairs = [_as_pair(it) for it in batch]
    net = model.net
    dtype = next(net.parameters()).dtype
    n = len(pairs)
    L = model.config.l

    t_draw = rng.integers(1, s.T + 1, size=n)
    eps = rng.standard_normal((n, L))
    drop = dropout_mask(n, p_uncond, rng)

    x0 = np.stack([normalize_soh(c.values) for c, _ in pairs])
    sqrt_ab = np.sqrt(s.alpha_bar[t_draw - 1])[:, None]
    sqrt_1m_ab = np.sqrt(1.0 - s.alpha_bar[t_draw - 1])[:, None]
    x_t = torch.from_numpy(sqrt_ab * x0 + sqrt_1m_ab * eps).to(dtype)
    eps_t = torch.from_numpy(eps).to(dtype)
    t_row = torch.from_numpy(t_draw).long()

    if drop.all():
        cond = net.null_cond.unsqueeze(0).expand(n, -1)
    else:
        q_rows = np.stack([
            model.norm.apply(q.rows) if model.norm is not None else q.rows
            for _, q in pairs
        ])
        keep = torch.from_numpy(~drop)
        encoded = net.cond_encoder(torch.from_numpy(q_rows[~drop]).to(dtype))
        if drop.any():
            cond = net.null_cond.unsqueeze(0).expand(n, -1).clone()
            cond[keep] = encoded
        else:
            cond = encoded

    eps_hat = net(x_t, t_row, cond)
    loss = torch.mean((eps_t - eps_hat) ** 2)
    if not torch.isfinite(loss):
        cells = [q.cell_id for _, q in pairs]
        raise NumericError(
            f"non-finite training loss; timesteps {t_draw.tolist()}, cells {cells}"
        )

    names, params = zip(*net.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grad_map = {
        name: (g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(names, params, grads)
    }
    return float(loss.detach()), grad_map


def _clip_gradients(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = torch.sqrt(sum(g.pow(2).sum() for g in grads.values()))
    total = float(total)
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


def extract_optimizer_state(optimizer: torch.optim.Adam, names: list[str]) -> dict:
    """Per-parameter Adam moments keyed by parameter name."""
    out = {"lr": optimizer.param_groups[0]["lr"],
           "betas": list(optimizer.param_groups[0]["betas"]),
           "eps": optimizer.param_groups[0]["eps"],
           "params": {}}
    for name, p in zip(names, optimizer.param_groups[0]["params"]):
        state = optimizer.state.get(p, {})
        if state:
            out["params"][name] = {
                "step": int(state["step"]),
                "exp_avg": state["exp_avg"].detach().clone(),
                "exp_avg_sq": state["exp_avg_sq"].detach().clone(),
            }
    return out


def train(
    model: DenoiserModel,
    ds_train: Dataset,
    cfg: TrainConfig,
    s: NoiseSchedule,
    *,
    out_path=None,
    log_path=None,
) -> tuple[DenoiserModel, TrainReport]:
    """Run the optimization loop; returns the trained model and a report.

    The returned model carries the exponential moving average of the weights
    (when enabled), which all evaluation uses.  Fully reproducible from
    ``cfg.seed``: batch order, noise, and dropout draw from independent
    derived streams.
    """
    if len(ds_train) == 0:
        raise ParameterError("training dataset is empty")
    if cfg.T != s.T:
        raise ConfigurationError(f"config T={cfg.T} but schedule has T={s.T}")
    l_data = len(ds_train.items[0].curve.values)
    if l_data != model.config.l:
        raise ConfigurationError(f"dataset grid length {l_data} != model length {model.config.l}")
    c_max = ds_train.items[0].curve.grid_max_cycle

    stats = FeatureStats.from_matrices([it.capacity.rows for it in ds_train.items])
    model = model.with_stats(norm=stats, grid_c_max=c_max,
                             schedule_T=s.T, schedule_desc=s.descriptor())
    net = model.net
    net.train()
    names = [n for n, _ in net.named_parameters()]
    params = [p for _, p in net.named_parameters()]
    optimizer = torch.optim.Adam(params, lr=cfg.step_size, betas=ADAM_BETAS, eps=ADAM_EPS)

    ema = None
    if cfg.ema_decay is not None:
        ema = {n: p.detach().clone() for n, p in net.named_parameters()}

    rng_batch = stream(cfg.seed, "batch")
    rng_loss = stream(cfg.seed, "loss")

    report = TrainReport()
    log_rows = []
    diverged_streak = 0
    t_start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        idx = rng_batch.integers(0, len(ds_train), size=cfg.batch_size)
        batch = [(ds_train.items[i].curve, ds_train.items[i].capacity) for i in idx]
        loss, grads = loss_simple(model, batch, s, cfg.p_uncond, rng_loss)

        _clip_gradients(grads, GRAD_CLIP_NORM)
        for name, p in zip(names, params):
            p.grad = grads[name]
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)

        if ema is not None:
            d = cfg.ema_decay
            with torch.no_grad():
                for n_, p in net.named_parameters():
                    ema[n_].mul_(d).add_(p.detach(), alpha=1.0 - d)

        report.loss_history.append((step, loss))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            log_rows.append(f"{step},{loss!r}")

        if loss > DIVERGENCE_LOSS:
            diverged_streak += 1
            if diverged_streak >= DIVERGENCE_PATIENCE:
                raise NumericError(
                    f"loss above {DIVERGENCE_LOSS} for {DIVERGENCE_PATIENCE} consecutive "
                    f"steps (step {step}, loss {loss:.3g})"
                )
        else:
            diverged_streak = 0

    report.wall_time = time.perf_counter() - t_start
    net.eval()
    trained = model.with_stats(ema=ema)

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            fh.write("\n".join(log_rows) + "\n")
    if out_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(trained, extract_optimizer_state(optimizer, names), out_path)
        report.final_checkpoint = str(out_path)
    return trained, report


def run_training(
    ds_train: Dataset,
    model_cfg: DenoiserConfig,
    cfg: TrainConfig,
    s: NoiseSchedule,
    *,
    out_path=None,
    log_path=None,
    dtype: torch.dtype = torch.float32,
) -> tuple[DenoiserModel, TrainReport]:
    """Initialize from the master seed's init stream, then train."""
    model = init_model(model_cfg, stream(cfg.seed, "init"), dtype=dtype)
    return train(model, ds_train, cfg, s, out_path=out_path, log_path=log_path)
