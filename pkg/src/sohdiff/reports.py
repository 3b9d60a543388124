"""Evaluation report containers with CSV and table rendering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MetricRow:
    metric: str
    dataset: str
    seed: int
    value: float


@dataclass
class EvalReport:
    """Metric rows (one per seed) plus the per-cell records behind them."""

    rows: list[MetricRow] = field(default_factory=list)
    cells: list[dict] = field(default_factory=list)

    def metrics(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.metric not in seen:
                seen.append(r.metric)
        return seen

    def values(self, metric: str) -> np.ndarray:
        return np.array([r.value for r in self.rows if r.metric == metric])

    def mean_std(self, metric: str) -> tuple[float, float]:
        """Mean and population standard deviation across seeds."""
        v = self.values(metric)
        return float(v.mean()), float(v.std())

    def to_csv(self) -> str:
        lines = ["metric,dataset,seed,value"]
        for r in self.rows:
            lines.append(f"{r.metric},{r.dataset},{r.seed},{r.value!r}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        """Human-readable per-metric summary, mean with std subscripted as +-."""
        width = max((len(m) for m in self.metrics()), default=6)
        lines = [f"{'metric'.ljust(width)}  mean+-std  (n seeds)"]
        for metric in self.metrics():
            mean, std = self.mean_std(metric)
            n = len(self.values(metric))
            lines.append(f"{metric.ljust(width)}  {mean:.4g}+-{std:.3g}  ({n})")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SynthRow:
    w: float
    fid: float
    precision: float
    recall: float
    rmse_mean: float
    rmse_std: float
    censored: int = 0


@dataclass
class SynthReport:
    """Guidance-sweep synthesis quality table (metrics as rows, w as columns)."""

    rows: list[SynthRow] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def row_for(self, w: float) -> SynthRow:
        for r in self.rows:
            if r.w == w:
                return r
        raise KeyError(f"no report row for w={w}")

    def to_csv(self) -> str:
        header = "metric," + ",".join(f"w={r.w!r}" for r in self.rows)
        fields = [
            ("fid", lambda r: r.fid),
            ("precision", lambda r: r.precision),
            ("recall", lambda r: r.recall),
            ("rmse_mean", lambda r: r.rmse_mean),
            ("rmse_std", lambda r: r.rmse_std),
            ("censored", lambda r: r.censored),
        ]
        lines = [header]
        for name, get in fields:
            lines.append(name + "," + ",".join(f"{get(r)!r}" for r in self.rows))
        for note in self.notes:
            lines.append(f"# {note}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        cols = ["metric"] + [f"w={r.w:g}" for r in self.rows]
        body = [
            ["fid"] + [f"{r.fid:.4g}" for r in self.rows],
            ["precision"] + [f"{r.precision:.3f}" for r in self.rows],
            ["recall"] + [f"{r.recall:.3f}" for r in self.rows],
            ["rmse"] + [f"{r.rmse_mean:.4g}+-{r.rmse_std:.3g}" for r in self.rows],
        ]
        widths = [max(len(row[i]) for row in [cols] + body) for i in range(len(cols))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths))
                 for row in [cols] + body]
        if self.notes:
            lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"
