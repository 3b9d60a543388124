"""Life-prediction protocols: best-of-K sampling, threshold crossings, RMSE reports.

A prediction draws K curves conditioned on one capacity matrix, keeps the one
that best fits the observed first-100-cycle state of health, and reads the
remaining useful life off the kept curve as the first grid cycle strictly
below the end-of-life threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, early_soh, grid_cycles
from .denoiser import DenoiserModel
from .diffusion import GuidanceConfig, NoiseSchedule, sample_batch
from .errors import ConfigurationError, ParameterError, ValidationError
from .reports import EvalReport, MetricRow
from .seeding import stream

PRIMARY_EOL = 0.8


@dataclass(frozen=True)
class EolConfig:
    """End-of-life thresholds to sweep, strictly decreasing fractions."""

    thresholds: tuple[float, ...] = (0.9, 0.8, 0.7, 0.6)

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(self.thresholds))
        if not self.thresholds:
            raise ParameterError("need at least one end-of-life threshold")
        for tau in self.thresholds:
            if not 0.0 < tau < 1.0:
                raise ParameterError(f"threshold {tau} outside (0, 1)")
        if any(nxt >= prev for prev, nxt in zip(self.thresholds, self.thresholds[1:])):
            raise ParameterError("thresholds must be strictly decreasing")


@dataclass(frozen=True)
class PredictionResult:
    selected: np.ndarray
    samples: np.ndarray
    rul: int | None
    rul_std: float | None
    fit_rmse: float


def eol_crossing_index(values: np.ndarray, threshold: float) -> int | None:
    """First grid node where the curve is strictly below the threshold."""
    below = np.nonzero(np.asarray(values) < threshold)[0]
    if len(below) == 0:
        return None
    return int(below[0])


def rul_from_soh(values: np.ndarray, threshold: float, c_max: int) -> int | None:
    """Cycle life to the end-of-life crossing; None when the curve never crosses."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold {threshold} outside (0, 1)")
    idx = eol_crossing_index(values, threshold)
    if idx is None:
        return None
    nodes = grid_cycles(len(np.asarray(values)), c_max)
    return int(round(nodes[idx]))


def rul_uncertainty(samples: np.ndarray, threshold: float, c_max: int) -> float | None:
    """Population standard deviation of per-sample lives (censored excluded).

    A single sample yields 0 by convention; otherwise fewer than two usable
    samples yield None.
    """
    samples = np.asarray(samples)
    ruls = [rul_from_soh(v, threshold, c_max) for v in samples]
    usable = [r for r in ruls if r is not None]
    if not usable:
        return None
    if len(samples) == 1:
        return 0.0
    if len(usable) < 2:
        return None
    return float(np.std(usable))


def soh_rmse(pred: np.ndarray, ref, threshold: float, c_max: int) -> float:
    """RMSE (percentage points) up to the prediction's end-of-life crossing.

    The reference is interpolated onto the grid and zero-padded past its last
    observed cycle; a prediction that never crosses is scored over the whole
    grid (flag it via `eol_crossing_index`).
    """
    pred = np.asarray(pred, dtype=np.float64)
    nodes = grid_cycles(len(pred), c_max)
    idx = eol_crossing_index(pred, threshold)
    n_j = idx if idx is not None else len(pred) - 1
    ref_grid = np.interp(nodes, ref.cycles.astype(np.float64), ref.soh)
    ref_grid[nodes > ref.source_life] = 0.0
    diff_pct = 100.0 * (pred[: n_j + 1] - ref_grid[: n_j + 1])
    return float(np.sqrt(np.mean(diff_pct**2)))


def predict(
    model: DenoiserModel,
    q,
    observed_early: np.ndarray,
    k: int = 10,
    w: float = 0.0,
    *,
    s: NoiseSchedule,
    rng: np.random.Generator,
    eol_threshold: float = PRIMARY_EOL,
) -> PredictionResult:
    """Best-of-K conditioned prediction for one cell.

    Draws K guided samples, picks the one with the lowest RMSE against the
    observed early-life state of health (soh fraction; ties keep the lowest
    sample index), and derives the life estimate and its spread.
    """
    if k < 1:
        raise ParameterError(f"need k >= 1 samples, got {k}")
    if model.grid_c_max is None:
        raise ConfigurationError("model carries no grid info; train or load it first")
    observed_early = np.asarray(observed_early, dtype=np.float64)
    samples = sample_batch(model, [q] * k, GuidanceConfig(w=w), s, rng)
    nodes = grid_cycles(model.config.l, model.grid_c_max)
    early_cycles = np.arange(1, len(observed_early) + 1, dtype=np.float64)
    fits = np.array([
        np.sqrt(np.mean((np.interp(early_cycles, nodes, sample) - observed_early) ** 2))
        for sample in samples
    ])
    best = int(np.argmin(fits))
    return PredictionResult(
        selected=samples[best],
        samples=samples,
        rul=rul_from_soh(samples[best], eol_threshold, model.grid_c_max),
        rul_std=rul_uncertainty(samples, eol_threshold, model.grid_c_max),
        fit_rmse=float(fits[best]),
    )


def _models_for_seeds(models, seeds) -> list[DenoiserModel]:
    if isinstance(models, DenoiserModel):
        return [models] * len(seeds)
    models = list(models)
    if len(models) == 1:
        return models * len(seeds)
    if len(models) != len(seeds):
        raise ParameterError(f"{len(models)} models for {len(seeds)} seeds")
    return models


def item_early_soh(item) -> np.ndarray:
    """Observed early-life soh for a dataset item (raw curve when present)."""
    if item.raw is not None:
        return early_soh(item.raw)
    nodes = grid_cycles(len(item.curve.values), item.curve.grid_max_cycle)
    return np.interp(np.arange(1, 101, dtype=np.float64), nodes, item.curve.values)


def eval_rul(
    models,
    ds_test: Dataset,
    s: NoiseSchedule,
    k: int = 10,
    w: float = 0.0,
    eol: float = PRIMARY_EOL,
    seeds=(0,),
) -> EvalReport:
    """Per-seed RMSE (cycles) between predicted and true life over the test set.

    Censored predictions count as the grid horizon and are flagged in the
    per-cell records.
    """
    seeds = list(seeds)
    models = _models_for_seeds(models, seeds)
    report = EvalReport()
    for model, seed in zip(models, seeds):
        errors = []
        for ci, item in enumerate(ds_test.items):
            if item.true_rul is None:
                raise ValidationError(
                    f"cell {item.capacity.cell_id} has no true life label"
                )
            rng = stream(seed, "eval", ci)
            res = predict(model, item.capacity, item_early_soh(item), k, w,
                          s=s, rng=rng, eol_threshold=eol)
            censored = res.rul is None
            pred_rul = model.grid_c_max if censored else res.rul
            errors.append(pred_rul - item.true_rul)
            report.cells.append({
                "metric": "rul",
                "dataset": ds_test.split,
                "seed": seed,
                "cell_id": item.capacity.cell_id,
                "true_rul": item.true_rul,
                "pred_rul": pred_rul,
                "rul_std": res.rul_std,
                "fit_rmse": res.fit_rmse,
                "censored": censored,
            })
        rmse = float(np.sqrt(np.mean(np.square(errors, dtype=np.float64))))
        report.rows.append(MetricRow("rul_rmse", ds_test.split, seed, rmse))
    return report


def eval_soh(
    models,
    ds_test: Dataset,
    s: NoiseSchedule,
    eols: EolConfig = EolConfig(),
    seeds=(0,),
    k: int = 10,
    w: float = 0.0,
) -> EvalReport:
    """Mean per-cell soh RMSE at each end-of-life threshold, per seed.

    One best-of-K prediction per cell is scored at every threshold.
    """
    seeds = list(seeds)
    models = _models_for_seeds(models, seeds)
    report = EvalReport()
    for model, seed in zip(models, seeds):
        per_tau: dict[float, list[float]] = {tau: [] for tau in eols.thresholds}
        for ci, item in enumerate(ds_test.items):
            if item.raw is None:
                raise ValidationError(
                    f"cell {item.capacity.cell_id} has no reference curve"
                )
            rng = stream(seed, "eval", ci)
            res = predict(model, item.capacity, item_early_soh(item), k, w,
                          s=s, rng=rng, eol_threshold=eols.thresholds[0])
            for tau in eols.thresholds:
                rmse = soh_rmse(res.selected, item.raw, tau, model.grid_c_max)
                per_tau[tau].append(rmse)
                report.cells.append({
                    "metric": "soh",
                    "dataset": ds_test.split,
                    "seed": seed,
                    "cell_id": item.capacity.cell_id,
                    "eol": tau,
                    "rmse": rmse,
                    "censored": eol_crossing_index(res.selected, tau) is None,
                })
        for tau in eols.thresholds:
            report.rows.append(MetricRow(
                f"soh_rmse_eol{round(tau * 100)}", ds_test.split, seed,
                float(np.mean(per_tau[tau])),
            ))
    return report
