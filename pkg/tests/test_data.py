import json

import numpy as np
import pytest

import sohdiff as sd
from sohdiff.data import (
    DegradationCurve,
    early_soh,
    observed_rul,
    power_law_curve,
    power_law_rul,
)
from sohdiff.errors import (
    ConfigurationError,
    DegenerateCellError,
    InsufficientHistoryError,
    ParameterError,
    ParseError,
    SchemaError,
    ValidationError,
)
from sohdiff.seeding import stream

from conftest import TOY_C_MAX, TOY_L


def curve(soh, cycles=None, cell_id="c0"):
    soh = np.asarray(soh, dtype=float)
    if cycles is None:
        cycles = np.arange(1, len(soh) + 1)
    return DegradationCurve(cell_id=cell_id, cycles=cycles, soh=soh)


class TestDegradationCurve:
    def test_rejects_nonincreasing_cycles(self):
        with pytest.raises(ValidationError):
            curve([1.0, 0.9, 0.8], cycles=[1, 1, 2])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValidationError):
            curve([1.0, 0.9], cycles=[1, 2, 3])

    def test_rejects_nonpositive_soh(self):
        with pytest.raises(ValidationError):
            curve([1.0, 0.0])


class TestScaleFirstCycle:
    def test_halves(self):
        assert sd.scale_first_cycle(curve([2.0, 1.0])).soh.tolist() == [1.0, 0.5]

    def test_identity_when_scaled(self):
        c = curve([1.0, 0.9, 0.8])
        assert sd.scale_first_cycle(c) is c

    def test_hand_division(self):
        out = sd.scale_first_cycle(curve([1.1, 0.99])).soh
        np.testing.assert_allclose(out, [1.0, 0.9])
        assert out[0] == 1.0

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            soh = rng.uniform(0.2, 2.0, size=rng.integers(1, 30))
            once = sd.scale_first_cycle(curve(soh))
            twice = sd.scale_first_cycle(once)
            np.testing.assert_array_equal(once.soh, twice.soh)

    def test_degenerate(self):
        c = curve([1.0])
        object.__setattr__(c, "soh", np.array([-1.0]))
        with pytest.raises(DegenerateCellError):
            sd.scale_first_cycle(c)


class TestToGrid:
    def test_interpolation_and_padding(self):
        c = curve([1.0, 0.5], cycles=[1, 101])
        g = sd.to_grid(c, 3, 201)
        assert g.values.tolist() == [1.0, 0.5, 0.0]
        assert g.source_life == 101
        assert g.grid_max_cycle == 201

    def test_single_point(self):
        g = sd.to_grid(curve([1.0], cycles=[1]), 4, 100)
        assert g.values.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_full_span_has_no_padding(self):
        c = curve(np.linspace(1.0, 0.5, 11), cycles=np.arange(1, 12))
        g = sd.to_grid(c, 6, 11)
        assert np.all(g.values > 0)

    def test_roundtrip_at_grid_nodes_is_exact(self):
        # grid with integer nodes: L=5 over [1, 9] -> 1,3,5,7,9
        nodes = sd.grid_cycles(5, 9)
        soh = np.array([1.0, 0.83, 0.71, 0.645, 0.605])
        c = curve(soh, cycles=nodes.astype(int))
        g = sd.to_grid(c, 5, 9)
        assert g.values.tolist() == soh.tolist()

    def test_zero_pad_correctness(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            life = int(rng.integers(2, 400))
            c = curve(np.linspace(1.0, 0.7, life), cycles=np.arange(1, life + 1))
            g = sd.to_grid(c, 32, 500)
            nodes = sd.grid_cycles(32, 500)
            assert np.all(g.values[nodes > life] == 0.0)
            assert np.any(g.values > 0)

    def test_curve_beyond_grid(self):
        with pytest.raises(ConfigurationError):
            sd.to_grid(curve([1.0, 0.9], cycles=[300, 301]), 8, 200)


class TestCapacityMatrix:
    def test_first_rows_selected(self):
        raw = np.arange(150 * 3, dtype=float).reshape(150, 3)
        q = sd.build_capacity_matrix(raw, n_early=100)
        assert q.rows.shape == (100, 3)
        np.testing.assert_array_equal(q.rows, raw[:100])

    def test_exact_window_is_identity(self):
        raw = np.random.default_rng(0).normal(size=(100, 2))
        np.testing.assert_array_equal(sd.build_capacity_matrix(raw).rows, raw)

    def test_insufficient_history(self):
        with pytest.raises(InsufficientHistoryError):
            sd.build_capacity_matrix(np.zeros((99, 2)))

    def test_standardization(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(3.0, 2.0, size=(100, 4))
        stats = sd.FeatureStats.from_matrices([raw])
        q = sd.build_capacity_matrix(raw, stats=stats)
        np.testing.assert_allclose(q.rows.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(q.rows.std(axis=0), 1.0, atol=1e-9)


class TestSyntheticOracle:
    def test_slow_linear_cell(self):
        g, q, rul = sd.generate_synthetic_cell(
            0.001, 1.0, 0.0, l=8, c_max=450, rng=np.random.default_rng(0)
        )
        assert rul == 201  # exact crossing at n=200 is not yet strictly below

    def test_fast_cell(self):
        _, _, rul = sd.generate_synthetic_cell(
            0.2, 1.0, 0.0, l=4, c_max=10, rng=np.random.default_rng(0), n_early=2
        )
        assert rul == 2

    def test_zero_noise_replicates_columns(self):
        _, q, _ = sd.generate_synthetic_cell(
            0.001, 1.0, 0.0, l=8, c_max=450, rng=np.random.default_rng(0), n_feat=5
        )
        for j in range(1, 5):
            np.testing.assert_array_equal(q.rows[:, j], q.rows[:, 0])

    def test_no_crossing_within_grid(self):
        with pytest.raises(ParameterError):
            sd.generate_synthetic_cell(1e-6, 1.0, 0.0, l=8, c_max=300,
                                       rng=np.random.default_rng(0))

    def test_analytic_rul_matches_linear_scan(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            b = rng.uniform(0.5, 2.0)
            a = (1 - 0.8) / rng.uniform(5, 2000) ** b
            tau = rng.uniform(0.55, 0.95)
            analytic = power_law_rul(a, b, tau)
            n = 1
            while 1.0 - a * n**b >= tau:
                n += 1
            assert analytic == n

    def test_determinism(self):
        a = sd.make_synthetic_dataset(6, stream(5, "data"), l=TOY_L, c_max=TOY_C_MAX)
        b = sd.make_synthetic_dataset(6, stream(5, "data"), l=TOY_L, c_max=TOY_C_MAX)
        for x, y in zip(a.items, b.items):
            np.testing.assert_array_equal(x.curve.values, y.curve.values)
            np.testing.assert_array_equal(x.capacity.rows, y.capacity.rows)
            assert x.true_rul == y.true_rul

    def test_observed_early_window_long_enough(self, toy_dataset):
        for it in toy_dataset.items:
            assert it.raw.source_life > 100
            assert len(early_soh(it.raw)) == 100


class TestSplitDataset:
    def test_counts(self, toy_dataset):
        train, test = sd.split_dataset(toy_dataset, 0.25, stream(1, "data"))
        assert len(train) == 9 and len(test) == 3
        assert {it.capacity.cell_id for it in train.items}.isdisjoint(
            {it.capacity.cell_id for it in test.items}
        )
        assert len(train) + len(test) == len(toy_dataset)

    def test_small_fraction_rounds_up_to_one(self):
        ds = sd.make_synthetic_dataset(10, stream(2, "data"), l=TOY_L, c_max=TOY_C_MAX)
        train, test = sd.split_dataset(ds, 0.05, stream(2, "data", 1))
        assert len(test) == 1 and len(train) == 9

    def test_same_seed_same_split(self, toy_dataset):
        a = sd.split_dataset(toy_dataset, 0.3, stream(4, "data"))
        b = sd.split_dataset(toy_dataset, 0.3, stream(4, "data"))
        ids = lambda ds: [it.capacity.cell_id for it in ds.items]
        assert ids(a[0]) == ids(b[0]) and ids(a[1]) == ids(b[1])

    def test_empty_side_rejected(self):
        ds = sd.make_synthetic_dataset(2, stream(3, "data"), l=TOY_L, c_max=TOY_C_MAX)
        with pytest.raises(ParameterError):
            sd.split_dataset(ds, 0.9, stream(3, "data", 1))


class TestCanonicalFiles:
    def test_minimal_csv(self, tmp_path):
        p = tmp_path / "cells.csv"
        p.write_text("cell_id,cycle,soh\nc0,1,1.0\nc0,2,0.99\nc0,3,0.80\n")
        # the conditioning window must be shortened to cover a 3-cycle cell
        ds = sd.load_dataset(p, "canonical-csv", l=4, c_max=5, n_early=3)
        assert len(ds) == 1
        assert ds.items[0].curve.source_life == 3
        # no feature columns: soh series stands in as the single feature
        assert ds.items[0].capacity.rows.shape == (3, 1)

    def test_csv_with_feature_columns(self, tmp_path):
        p = tmp_path / "cells.csv"
        rows = ["cell_id,cycle,soh,f1,f2"]
        for n in range(1, 151):
            rows.append(f"c0,{n},{1.0 - 0.002 * n},{0.5 * n},{n * n}")
        p.write_text("\n".join(rows) + "\n")
        ds = sd.load_dataset(p, "canonical-csv", l=8, c_max=200)
        q = ds.items[0].capacity.rows
        assert q.shape == (100, 2)
        np.testing.assert_allclose(q[:, 0], 0.5 * np.arange(1, 101))

    def test_csv_needs_full_early_window(self, tmp_path):
        p = tmp_path / "cells.csv"
        p.write_text("cell_id,cycle,soh\nc0,1,1.0\nc0,2,0.99\n")
        with pytest.raises(InsufficientHistoryError):
            sd.load_dataset(p, "canonical-csv", l=4, c_max=5)

    def _write_cell_json(self, path, n=150, soh0=1.0, cell_id="c0", cycles=None):
        cycles = cycles if cycles is not None else list(range(1, n + 1))
        soh = np.linspace(soh0, 0.7 * soh0, len(cycles))
        payload = [{"cell_id": cell_id, "cycles": cycles, "soh": soh.tolist()}]
        path.write_text(json.dumps(payload))

    def test_json_rescales_first_cycle(self, tmp_path):
        p = tmp_path / "cells.json"
        self._write_cell_json(p, soh0=1.1)
        ds = sd.load_dataset(p, "canonical-json", l=8, c_max=200)
        assert ds.items[0].raw.soh[0] == 1.0

    def test_json_duplicate_cycles_rejected(self, tmp_path):
        p = tmp_path / "cells.json"
        self._write_cell_json(p, cycles=[1, 1] + list(range(2, 150)))
        with pytest.raises(ValidationError):
            sd.load_dataset(p, "canonical-json", l=8, c_max=200)

    def test_json_duplicate_cell_id_rejected(self, tmp_path):
        p = tmp_path / "cells.json"
        payload = json.loads('[{"cell_id": "c0"}, {"cell_id": "c0"}]')
        for obj in payload:
            obj["cycles"] = list(range(1, 151))
            obj["soh"] = np.linspace(1, 0.7, 150).tolist()
        p.write_text(json.dumps(payload))
        with pytest.raises(SchemaError):
            sd.load_dataset(p, "canonical-json", l=8, c_max=200)

    def test_csv_malformed_row_names_line(self, tmp_path):
        p = tmp_path / "cells.csv"
        p.write_text("cell_id,cycle,soh\nc0,1,1.0\nc0,two,0.9\n")
        with pytest.raises(ParseError, match="line 3"):
            sd.load_dataset(p, "canonical-csv", l=4, c_max=5)

    def test_scaled_ceiling_enforced(self, tmp_path):
        p = tmp_path / "cells.json"
        payload = [{"cell_id": "c0", "cycles": list(range(1, 151)),
                    "soh": [1.0] + [1.5] + np.linspace(1, 0.7, 148).tolist()}]
        p.write_text(json.dumps(payload))
        with pytest.raises(ValidationError):
            sd.load_dataset(p, "canonical-json", l=8, c_max=200)

    def test_roundtrip_preserves_values_and_labels(self, tmp_path, toy_dataset):
        p = tmp_path / "ds.json"
        sd.save_dataset_json(toy_dataset, p)
        loaded = sd.load_dataset(p, "canonical-json", l=TOY_L, c_max=TOY_C_MAX)
        assert len(loaded) == len(toy_dataset)
        by_id = {it.capacity.cell_id: it for it in toy_dataset.items}
        for it in loaded.items:
            src = by_id[it.capacity.cell_id]
            assert it.true_rul == src.true_rul
            np.testing.assert_array_equal(it.capacity.rows, src.capacity.rows)
            # loading first-cycle-scales the curve; synthetic soh[0] = 1 - a
            scale = src.raw.soh[0]
            np.testing.assert_allclose(it.raw.soh * scale, src.raw.soh, rtol=1e-12)

    def test_save_bytes_deterministic(self, tmp_path, toy_dataset):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        sd.save_dataset_json(toy_dataset, p1)
        sd.save_dataset_json(toy_dataset, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_observed_rul_from_loaded_curve(self, tmp_path):
        p = tmp_path / "cells.json"
        soh = np.linspace(1.0, 0.7, 150)
        payload = [{"cell_id": "c0", "cycles": list(range(1, 151)), "soh": soh.tolist()}]
        p.write_text(json.dumps(payload))
        ds = sd.load_dataset(p, "canonical-json", l=8, c_max=200, eol_threshold=0.8)
        expected = observed_rul(ds.items[0].raw, 0.8)
        assert ds.items[0].true_rul == expected
        assert soh[expected - 1] < 0.8 <= soh[expected - 2]


class TestGridCycles:
    def test_endpoints(self):
        nodes = sd.grid_cycles(256, 1000)
        assert nodes[0] == 1.0 and nodes[-1] == 1000.0
        assert len(nodes) == 256

    def test_power_law_curve_floor(self):
        c = power_law_curve(0.001, 1.0, 1000, floor=0.6)
        assert np.all(c.soh >= 0.6)
        assert 1.0 - 0.001 * (c.source_life + 1) < 0.6
