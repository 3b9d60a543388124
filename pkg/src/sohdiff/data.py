"""Degradation-curve datasets: ingestion, gridding, and the synthetic oracle.

Curves are stored twice: as the raw per-cycle series (``DegradationCurve``)
and resampled onto a fixed-length cycle grid (``GriddedCurve``) so that every
cell presents the same shape to the generative model.  Early-life conditioning
features live in a ``CapacityMatrix`` covering the first ``N_EARLY`` cycles.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateCellError,
    InsufficientHistoryError,
    NumericError,
    ParameterError,
    ParseError,
    SchemaError,
    ValidationError,
)

# Number of early-life cycles summarized by a capacity matrix.
N_EARLY = 100

# Default length of the canonical cycle grid.
GRID_LENGTH = 256

# Synthetic curves are observed down to this state-of-health fraction.
SYNTHETIC_FLOOR = 0.6

DEFAULT_EOL = 0.8

# Real cells occasionally exceed nominal capacity early in life; 1.2 is a
# generous ceiling used for validation and output clamping alike.
SOH_CEILING = 1.2


@dataclass(frozen=True)
class DegradationCurve:
    """Per-cell state-of-health series indexed by cycle number."""

    cell_id: str
    cycles: np.ndarray
    soh: np.ndarray

    def __post_init__(self):
        cycles = np.asarray(self.cycles, dtype=np.int64)
        soh = np.asarray(self.soh, dtype=np.float64)
        object.__setattr__(self, "cycles", cycles)
        object.__setattr__(self, "soh", soh)
        if cycles.ndim != 1 or soh.ndim != 1 or len(cycles) != len(soh):
            raise ValidationError(f"cell {self.cell_id}: cycles and soh must be 1-d and equal length")
        if len(cycles) < 1:
            raise ValidationError(f"cell {self.cell_id}: empty curve")
        if cycles[0] < 1:
            raise ValidationError(f"cell {self.cell_id}: cycle numbers start at 1")
        if np.any(np.diff(cycles) <= 0):
            raise ValidationError(f"cell {self.cell_id}: cycles must be strictly increasing")
        if not np.all(np.isfinite(soh)) or np.any(soh <= 0):
            raise ValidationError(f"cell {self.cell_id}: soh values must be finite and positive")

    @property
    def source_life(self) -> int:
        """Last observed cycle."""
        return int(self.cycles[-1])


@dataclass(frozen=True)
class GriddedCurve:
    """A curve resampled onto the canonical fixed-length cycle grid.

    ``values[k]`` is the state of health at grid node ``k``; nodes past
    ``source_life`` are exactly zero.
    """

    values: np.ndarray
    grid_max_cycle: int
    source_life: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


@dataclass(frozen=True)
class CapacityMatrix:
    """Early-life per-cycle feature rows (cycle order preserved)."""

    rows: np.ndarray
    cell_id: str = ""

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2:
            raise ValidationError(f"cell {self.cell_id}: capacity matrix must be 2-d")
        if not np.all(np.isfinite(rows)):
            raise ValidationError(f"cell {self.cell_id}: capacity matrix has non-finite entries")


@dataclass(frozen=True)
class DatasetItem:
    curve: GriddedCurve
    capacity: CapacityMatrix
    true_rul: int | None = None
    raw: DegradationCurve | None = None


@dataclass
class Dataset:
    """An immutable-by-convention collection of paired curves and conditions."""

    items: tuple[DatasetItem, ...]
    split: str = "train"
    eol_threshold: float = DEFAULT_EOL
    counters: dict = field(default_factory=dict)

    def __post_init__(self):
        self.items = tuple(self.items)
        if self.split not in ("train", "test"):
            raise ValidationError(f"unknown split label {self.split!r}")

    def __len__(self) -> int:
        return len(self.items)

    def curve_values(self) -> np.ndarray:
        """All gridded curves stacked into an (n_cells, L) array."""
        return np.stack([it.curve.values for it in self.items])

    def capacity_arrays(self) -> np.ndarray:
        """All capacity matrices stacked into (n_cells, n_early, n_feat)."""
        return np.stack([it.capacity.rows for it in self.items])


@dataclass(frozen=True)
class FeatureStats:
    """Per-column standardization constants, fit on the training split only."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def from_matrices(cls, matrices: Iterable[np.ndarray]) -> "FeatureStats":
        stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in matrices], axis=0)
        mean = stacked.mean(axis=0)
        sd = stacked.std(axis=0)
        return cls(mean=mean, sd=np.maximum(sd, 1e-8))

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.sd


def grid_cycles(l: int, c_max: int) -> np.ndarray:
    """Cycle positions of the canonical grid nodes: 1 + k*(c_max-1)/(l-1)."""
    if l < 2:
        raise ParameterError(f"grid length must be >= 2, got {l}")
    if c_max < 2:
        raise ParameterError(f"grid max cycle must be >= 2, got {c_max}")
    return 1.0 + np.arange(l) * (c_max - 1) / (l - 1)


def scale_first_cycle(curve: DegradationCurve) -> DegradationCurve:
    """Rescale so the first observed cycle has state of health exactly 1."""
    first = float(curve.soh[0])
    if first <= 0:
        raise DegenerateCellError(f"cell {curve.cell_id}: first-cycle soh {first} <= 0")
    if first == 1.0:
        return curve
    return DegradationCurve(curve.cell_id, curve.cycles, curve.soh / first)


def to_grid(curve: DegradationCurve, l: int, c_max: int) -> GriddedCurve:
    """Linearly interpolate a curve onto the canonical grid, zero past its life.

    Nodes inside the observed cycle range are interpolated (the boundary
    values are held for nodes before the first observation; no extrapolation);
    nodes past the last observed cycle are exactly zero.
    """
    nodes = grid_cycles(l, c_max)
    if curve.cycles[0] > c_max:
        raise ConfigurationError(
            f"cell {curve.cell_id}: first cycle {curve.cycles[0]} beyond grid max {c_max}"
        )
    values = np.interp(nodes, curve.cycles.astype(np.float64), curve.soh)
    values[nodes > curve.source_life] = 0.0
    return GriddedCurve(values=values, grid_max_cycle=int(c_max), source_life=curve.source_life)


def build_capacity_matrix(
    raw: np.ndarray,
    n_early: int = N_EARLY,
    stats: FeatureStats | None = None,
    cell_id: str = "",
) -> CapacityMatrix:
    """First ``n_early`` rows of a per-cycle feature table.

    When ``stats`` is given the columns are standardized with it; the pipeline
    leaves matrices raw and standardizes at the model boundary instead, so the
    training-split statistics are applied exactly once.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    if raw.shape[0] < n_early:
        raise InsufficientHistoryError(
            f"cell {cell_id}: {raw.shape[0]} cycles of features, need {n_early}"
        )
    rows = raw[:n_early].copy()
    if stats is not None:
        rows = stats.apply(rows)
    return CapacityMatrix(rows=rows, cell_id=cell_id)


def early_soh(curve: DegradationCurve, n_early: int = N_EARLY) -> np.ndarray:
    """State of health at integer cycles 1..n_early (interpolated if sparse)."""
    if curve.source_life < n_early:
        raise InsufficientHistoryError(
            f"cell {curve.cell_id}: life {curve.source_life} < {n_early} early cycles"
        )
    return np.interp(np.arange(1, n_early + 1, dtype=np.float64),
                     curve.cycles.astype(np.float64), curve.soh)


def observed_rul(curve: DegradationCurve, threshold: float) -> int | None:
    """First observed cycle where soh drops strictly below ``threshold``."""
    below = np.nonzero(curve.soh < threshold)[0]
    if len(below) == 0:
        return None
    return int(curve.cycles[below[0]])


# ---------------------------------------------------------------------------
# Synthetic oracle: soh(n) = 1 - a * n**b
# ---------------------------------------------------------------------------

def _power_law(n, a: float, b: float):
    return 1.0 - a * np.power(np.asarray(n, dtype=np.float64), b)


def power_law_rul(a: float, b: float, threshold: float) -> int:
    """Smallest integer cycle where 1 - a*n**b drops strictly below threshold.

    Starts from the real-valued crossing and scans the neighborhood so exact
    integer crossings (value == threshold, not yet below) resolve correctly.
    """
    if a <= 0 or b <= 0:
        raise ParameterError(f"power-law parameters must be positive, got a={a}, b={b}")
    if threshold >= 1.0 or threshold <= 0.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    crossing = ((1.0 - threshold) / a) ** (1.0 / b)
    n = max(1, math.floor(crossing) - 2)
    while _power_law(n, a, b) >= threshold:
        n += 1
    return n


def power_law_curve(a: float, b: float, c_max: int, floor: float = SYNTHETIC_FLOOR,
                    cell_id: str = "syn-0000") -> DegradationCurve:
    """Observed portion of a synthetic power-law cell (cut at the soh floor)."""
    life = min(power_law_rul(a, b, floor) - 1, c_max)
    if life < 1:
        raise ParameterError(f"cell {cell_id}: parameters a={a}, b={b} decay below "
                             f"{floor} before cycle 1")
    cycles = np.arange(1, life + 1)
    return DegradationCurve(cell_id=cell_id, cycles=cycles, soh=_power_law(cycles, a, b))


def generate_synthetic_cell(
    a: float,
    b: float,
    noise_sd: float,
    l: int,
    c_max: int,
    rng: np.random.Generator,
    *,
    eol_threshold: float = DEFAULT_EOL,
    floor: float = SYNTHETIC_FLOOR,
    n_feat: int = 8,
    n_early: int = N_EARLY,
    cell_id: str = "syn-0000",
) -> tuple[GriddedCurve, CapacityMatrix, int]:
    """One synthetic cell: gridded curve, replica-feature condition, oracle label.

    The capacity matrix replicates soh over the first ``n_early`` cycles across
    ``n_feat`` columns plus N(0, noise_sd) perturbation.  The label is the
    analytic end-of-life crossing, cross-checked against a linear scan.
    """
    if noise_sd < 0:
        raise ParameterError(f"noise_sd must be >= 0, got {noise_sd}")
    raw = power_law_curve(a, b, c_max, floor=floor, cell_id=cell_id)
    if raw.source_life < n_early:
        raise ParameterError(
            f"cell {cell_id}: life {raw.source_life} shorter than the {n_early}-cycle "
            "conditioning window"
        )
    rul = power_law_rul(a, b, eol_threshold)
    if rul > c_max:
        raise ParameterError(
            f"cell {cell_id}: end-of-life crossing {rul} beyond grid max {c_max}"
        )
    scan = int(np.nonzero(_power_law(np.arange(1, rul + 2), a, b) < eol_threshold)[0][0]) + 1
    if scan != rul:
        raise NumericError(
            f"cell {cell_id}: analytic end-of-life crossing {rul} disagrees with "
            f"scan {scan} for a={a}, b={b}, threshold={eol_threshold}"
        )

    early = _power_law(np.arange(1, n_early + 1), a, b)
    features = np.tile(early[:, None], (1, n_feat))
    if noise_sd > 0:
        features = features + rng.normal(0.0, noise_sd, size=features.shape)
    capacity = CapacityMatrix(rows=features, cell_id=cell_id)
    return to_grid(raw, l, c_max), capacity, rul


def make_synthetic_dataset(
    n_cells: int,
    rng: np.random.Generator,
    l: int,
    c_max: int,
    *,
    rul_range: tuple[float, float] = (130.0, 420.0),
    b_range: tuple[float, float] = (0.85, 1.25),
    noise_sd: float = 0.002,
    n_feat: int = 8,
    eol_threshold: float = DEFAULT_EOL,
    floor: float = SYNTHETIC_FLOOR,
    split: str = "train",
    id_prefix: str = "syn",
) -> Dataset:
    """Draw a dataset of power-law cells with lifetimes inside the grid."""
    if n_cells < 1:
        raise ParameterError(f"n_cells must be >= 1, got {n_cells}")
    items = []
    for i in range(n_cells):
        b = rng.uniform(*b_range)
        target = rng.uniform(*rul_range)
        a = (1.0 - eol_threshold) / target**b
        cell_id = f"{id_prefix}-{i:04d}"
        raw = power_law_curve(a, b, c_max, floor=floor, cell_id=cell_id)
        curve, capacity, rul = generate_synthetic_cell(
            a, b, noise_sd, l, c_max, rng,
            eol_threshold=eol_threshold, floor=floor, n_feat=n_feat, cell_id=cell_id,
        )
        items.append(DatasetItem(curve=curve, capacity=capacity, true_rul=rul, raw=raw))
    return Dataset(items=tuple(items), split=split, eol_threshold=eol_threshold)


def split_dataset(
    ds: Dataset, test_fraction: float, rng: np.random.Generator
) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive, seed-reproducible train/test partition.

    Test size is max(1, round-half-up(test_fraction * n)); both sides must be
    non-empty.
    """
    n = len(ds)
    if n == 0:
        raise ParameterError("cannot split an empty dataset")
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = max(1, math.floor(test_fraction * n + 0.5))
    if n_test >= n:
        raise ParameterError(
            f"test_fraction {test_fraction} leaves no training cells out of {n}"
        )
    perm = rng.permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train_items = tuple(it for i, it in enumerate(ds.items) if i not in test_idx)
    test_items = tuple(it for i, it in enumerate(ds.items) if i in test_idx)
    train = Dataset(items=train_items, split="train", eol_threshold=ds.eol_threshold)
    test = Dataset(items=test_items, split="test", eol_threshold=ds.eol_threshold)
    return train, test


# ---------------------------------------------------------------------------
# Canonical file formats
# ---------------------------------------------------------------------------

def load_dataset(
    path: str | Path,
    format: str = "canonical-json",
    *,
    l: int = GRID_LENGTH,
    c_max: int | None = None,
    eol_threshold: float = DEFAULT_EOL,
    split: str = "train",
    n_early: int = N_EARLY,
) -> Dataset:
    """Load a canonical CSV or JSON file into a gridded, first-cycle-scaled Dataset.

    Cells are ordered by cell_id.  When ``c_max`` is None it defaults to
    1.1x the longest observed life, rounded up to the nearest 100.  Files
    without feature columns fall back to the soh series as a single feature.
    """
    path = Path(path)
    if format == "canonical-csv":
        cells = _read_canonical_csv(path)
    elif format == "canonical-json":
        cells = _read_canonical_json(path)
    else:
        raise ParameterError(f"unknown dataset format {format!r}")
    if not cells:
        raise SchemaError(f"{path}: no cells found")

    curves: dict[str, DegradationCurve] = {}
    features: dict[str, np.ndarray] = {}
    labels: dict[str, int | None] = {}
    for cell_id in sorted(cells):
        cycles, soh, feats, stored_rul = cells[cell_id]
        curve = scale_first_cycle(DegradationCurve(cell_id=cell_id, cycles=cycles, soh=soh))
        if np.any(curve.soh > SOH_CEILING):
            raise ValidationError(
                f"cell {cell_id}: scaled soh exceeds the {SOH_CEILING} ceiling"
            )
        curves[cell_id] = curve
        features[cell_id] = feats if feats is not None else curve.soh[:, None]
        labels[cell_id] = (
            int(stored_rul) if stored_rul is not None
            else observed_rul(curve, eol_threshold)
        )

    if c_max is None:
        longest = max(c.source_life for c in curves.values())
        c_max = int(math.ceil(longest * 1.1 / 100.0) * 100)

    items = []
    for cell_id in sorted(curves):
        curve = curves[cell_id]
        capacity = build_capacity_matrix(features[cell_id], n_early=n_early, cell_id=cell_id)
        items.append(DatasetItem(
            curve=to_grid(curve, l, c_max),
            capacity=capacity,
            true_rul=labels[cell_id],
            raw=curve,
        ))
    return Dataset(items=tuple(items), split=split, eol_threshold=eol_threshold)


def _read_canonical_csv(path: Path):
    """Parse `cell_id,cycle,soh[,f1..fK]` rows; returns cell -> arrays."""
    rows: dict[str, list[tuple[int, float, tuple[float, ...]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["cell_id", "cycle", "soh"]:
            raise SchemaError(f"{path}: header must start with cell_id,cycle,soh")
        n_feat = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, "
                                 f"got {len(row)}")
            try:
                cell_id = row[0].strip()
                cycle = int(row[1])
                soh = float(row[2])
                feats = tuple(float(v) for v in row[3:])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            rows.setdefault(cell_id, []).append((cycle, soh, feats))

    cells = {}
    for cell_id, entries in rows.items():
        # duplicate (cell, cycle) rows survive the sort and fail the curve's
        # strict-monotonicity validation downstream
        entries.sort(key=lambda e: e[0])
        cycles = np.array([e[0] for e in entries], dtype=np.int64)
        soh = np.array([e[1] for e in entries], dtype=np.float64)
        feats = None
        if n_feat > 0:
            feats = np.array([e[2] for e in entries], dtype=np.float64)
        cells[cell_id] = (cycles, soh, feats, None)
    return cells


def _read_canonical_json(path: Path):
    """Parse the one-object-per-cell JSON layout; returns cell -> arrays."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(payload, list):
        raise SchemaError(f"{path}: top level must be a list of cell objects")
    cells = {}
    for i, obj in enumerate(payload):
        if not isinstance(obj, dict) or "cell_id" not in obj:
            raise SchemaError(f"{path}: cell object {i} missing cell_id")
        cell_id = str(obj["cell_id"])
        if cell_id in cells:
            raise SchemaError(f"{path}: duplicate cell_id {cell_id!r}")
        try:
            cycles = np.asarray(obj["cycles"], dtype=np.int64)
            soh = np.asarray(obj["soh"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: cell {cell_id}: {exc}") from None
        feats = None
        if obj.get("features") is not None:
            feats = np.asarray(obj["features"], dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != len(cycles):
                raise SchemaError(
                    f"{path}: cell {cell_id}: features must have one row per cycle"
                )
        rul = obj.get("true_rul")
        cells[cell_id] = (cycles, soh, feats, rul)
    return cells


def save_dataset_json(ds: Dataset, path: str | Path) -> None:
    """Write a dataset in the canonical JSON layout (reproducible bytes).

    Feature rows past the conditioning window are back-filled from the soh
    series so each cell carries one feature row per cycle.  Oracle labels are
    stored under the optional ``true_rul`` key.
    """
    payload = []
    for it in ds.items:
        if it.raw is None:
            raise ValidationError("cannot serialize a dataset without raw curves")
        n_cycles = len(it.raw.cycles)
        n_feat = it.capacity.rows.shape[1]
        n_head = min(it.capacity.rows.shape[0], n_cycles)
        features = np.tile(it.raw.soh[:, None], (1, n_feat))
        features[:n_head] = it.capacity.rows[:n_head]
        payload.append({
            "cell_id": it.capacity.cell_id,
            "cycles": it.raw.cycles.tolist(),
            "soh": it.raw.soh.tolist(),
            "features": features.tolist(),
            "true_rul": it.true_rul,
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
