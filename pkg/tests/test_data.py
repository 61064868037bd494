import shutil

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from battpinn import synth
from battpinn.data import (EOL_THRESHOLD, FEATURE_NAMES, Q_NOM, SAMPLE_DIR, CellCycleRecord,
                           DataError, FeatureTable, FeatureUnavailable, StandardizationFactors,
                           assemble_features, compute_pcl, extract_dataset, ic_features,
                           ingest_mat_batches, load_feature_table, make_splits,
                           quadratic_trend_fit, read_cell, soh_from_pcl)

V_GRID = np.linspace(3.3, 2.7, 200)


def trend_curve(omega, b, n=200, q0=0.0, noise=0.0, rng=None):
    q = [q0]
    for _ in range(n - 1):
        eps = rng.normal(0, noise) if noise else 0.0
        q.append(q[-1] - omega * q[-1] ** 2 + b + eps)
    return np.linspace(3.3, 2.7, n), np.array(q)


def test_compute_pcl_examples():
    assert compute_pcl(Q_NOM) == 0.0
    assert compute_pcl(0.88, 1.1) == pytest.approx(0.20, abs=1e-15)
    assert compute_pcl(1.045, 1.1) == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(DataError):
        compute_pcl(-0.1)
    with pytest.raises(DataError):
        compute_pcl(1.0, 0.0)


@given(st.floats(0.0, 0.999))
def test_soh_inverse_identity(u):
    assert abs((1.0 - soh_from_pcl(u)) - u) <= 1e-15


def test_quadratic_trend_noiseless_recovery():
    v, q = trend_curve(0.4, 0.01)
    fit = quadratic_trend_fit(v, q)
    assert fit.omega == pytest.approx(0.4, abs=1e-9)
    assert fit.b == pytest.approx(0.01, abs=1e-9)


def test_quadratic_trend_constant_difference():
    q = 0.003 * np.arange(50.0)
    fit = quadratic_trend_fit(np.linspace(3.3, 2.7, 50), q)
    assert fit.omega == pytest.approx(0.0, abs=1e-9)
    assert fit.b == pytest.approx(0.003, rel=1e-9)


def test_quadratic_trend_monte_carlo():
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(1000):
        v, q = trend_curve(0.4, 0.01, noise=1e-4, rng=rng)
        hits += abs(quadratic_trend_fit(v, q).omega - 0.4) <= 0.02
    assert hits >= 950


def test_quadratic_trend_needs_three_window_samples():
    v = np.array([3.5, 3.0, 2.8, 2.0])
    with pytest.raises(FeatureUnavailable):
        quadratic_trend_fit(v, np.array([0.0, 0.1, 0.2, 0.3]))


def test_ic_features_linear_curve():
    mx, mn, var = ic_features(V_GRID, -0.7 * V_GRID + 3.0)
    assert mx == pytest.approx(-0.7, abs=1e-12)
    assert mn == pytest.approx(-0.7, abs=1e-12)
    assert var == pytest.approx(0.0, abs=1e-20)


def test_ic_features_quadratic_curve():
    v = np.linspace(3.3, 2.7, 61)
    mx, mn, var = ic_features(v, v ** 2)
    assert mx == pytest.approx(6.6, abs=1e-9)
    assert mn == pytest.approx(5.4, abs=1e-9)
    assert var == pytest.approx(np.var(2 * v), rel=1e-9)


def test_ic_features_rejections():
    with pytest.raises(FeatureUnavailable):
        ic_features(np.array([3.2, 3.0]), np.array([0.1, 0.2]))
    with pytest.raises(FeatureUnavailable):
        ic_features(np.array([3.2, 3.0, 3.1, 2.9]), np.array([0.1, 0.2, 0.3, 0.4]))


def test_record_invariants():
    with pytest.raises(DataError):
        CellCycleRecord("a", 0, [3.0, 2.9], [0.0, 0.1], 10, 0.02, 30, 1.0)
    with pytest.raises(DataError):
        CellCycleRecord("a", 1, [3.0, 2.9], [0.0], 10, 0.02, 30, 1.0)


def _step_records(eol=700, n=720):
    v = np.linspace(3.6, 2.0, 40)
    q = 1.0 - 0.3 * (v - 2.0) ** 2
    caps = np.where(np.arange(1, n + 1) < eol, 1.0, 0.85)
    return [CellCycleRecord("c1", k, v, q, 12.0, 0.02, 31.0, caps[k - 1]) for k in range(1, n + 1)]


def test_rul_labels_and_truncation():
    table = assemble_features(_step_records())
    assert table.cycle[-1] == 700
    assert table.rul[table.cycle == 100][0] == 600
    np.testing.assert_array_equal(np.diff(table.rul), -1.0)
    # constant features: trailing mean is the identity
    np.testing.assert_allclose(table.x, np.broadcast_to(table.x[0], table.x.shape), rtol=1e-12)


def test_cell_without_eol_has_unavailable_rul():
    table = assemble_features(_step_records(eol=10_000, n=50))
    assert len(table) == 50 and np.isnan(table.rul).all()


def test_unsorted_records_rejected():
    recs = _step_records(n=5)
    with pytest.raises(DataError):
        assemble_features(recs[::-1])


def test_sample_extract_shape():
    table = load_feature_table(SAMPLE_DIR)
    index = pd.read_csv(SAMPLE_DIR / "cells.csv", dtype={"cell_id": str})
    assert table.cells == index.cell_id.tolist()
    for cid in table.cells:
        summary = pd.read_csv(SAMPLE_DIR / cid / "summary.csv")
        u = 1 - summary.discharge_capacity_Ah.to_numpy() / Q_NOM
        eol = int(summary.cycle[np.argmax(u >= EOL_THRESHOLD)])
        assert table.only_cells([cid]).x.shape == (eol, 8)
    assert table.feature_names == FEATURE_NAMES


def test_extraction_independent_of_cell_order(tmp_path):
    ref = load_feature_table(SAMPLE_DIR)
    root = tmp_path / "raw"
    shutil.copytree(SAMPLE_DIR, root)
    index = pd.read_csv(root / "cells.csv", dtype={"cell_id": str})
    index.sample(frac=1.0, random_state=3).to_csv(root / "cells.csv", index=False)
    shuffled = extract_dataset(root, jobs=2)
    for cid in ref.cells:
        a, b = ref.only_cells([cid]), shuffled.only_cells([cid])
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.rul, b.rul)


def test_standardization_definition_and_round_trip():
    rng = np.random.default_rng(0)
    x = rng.normal(3, 2, (100, 8))
    t = np.arange(1.0, 101.0)
    u = rng.uniform(0, 0.2, 100)
    f = StandardizationFactors.fit(x, t, u)
    xs, ts, us = f.apply(x, t, u)
    for arr in (xs, ts, us):
        np.testing.assert_allclose(arr.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(arr.std(axis=0), 1.0, atol=1e-10)
    np.testing.assert_allclose(f.invert_x(xs), x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(f.invert_t(ts), t, rtol=0, atol=1e-12)
    np.testing.assert_allclose(f.invert_u(us), u, rtol=0, atol=1e-12)
    assert f.rate_scale == u.std() / t.std()
    assert StandardizationFactors.from_dict(f.to_dict()) == f


def test_zero_std_channel_named():
    x = np.ones((10, 8))
    x[:, 1:] = np.random.default_rng(0).normal(size=(10, 7))
    with pytest.raises(DataError, match="omega"):
        StandardizationFactors.fit(x, np.arange(10.0), np.linspace(0, 0.1, 10))


def test_factors_ignore_test_rows():
    table = load_feature_table(SAMPLE_DIR)
    split = make_splits("A", table, seed=4)
    before = StandardizationFactors.fit_table(split.train, "soh")
    mutated = table.take(np.arange(len(table)))
    test_rows = mutated.cell_id == "124"
    mutated.x[test_rows] *= 100.0
    mutated.pcl[test_rows] = 0.9
    after = StandardizationFactors.fit_table(make_splits("A", mutated, seed=4).train, "soh")
    assert after == before


def test_case_a_missing_cells_named():
    table = load_feature_table(SAMPLE_DIR).only_cells(["91"])
    with pytest.raises(DataError, match=r"#100.*#124"):
        make_splits("A", table, seed=0)


def test_case_ab_fractions():
    table = load_feature_table(SAMPLE_DIR)
    for case, test_cell, pool in [("A", "124", ("91", "100")), ("B", "116", ("101", "108", "120"))]:
        split = make_splits(case, table, seed=1)
        assert split.test_cells == [test_cell]
        n = len(table.only_cells(pool))
        assert abs(len(split.validation) - 0.2 * n) <= 1
        assert len(split.train) + len(split.validation) == n


def test_case_c_on_forty_cells():
    table, _ = synth.generate_dataset(cells=40, heterogeneity=0.2, seed=0, batch=2)
    split = make_splits("C", table, seed=7)
    assert len(split.test_cells) == 8
    rest = len(table) - len(split.test)
    assert abs(len(split.validation) - 0.25 * rest) <= 1
    again = make_splits("C", table, seed=7)
    assert again.test_cells == split.test_cells
    np.testing.assert_array_equal(again.validation.t, split.validation.t)
    assert make_splits("C", table, seed=8).test_cells != split.test_cells


def test_rul_case_excludes_cells_without_eol():
    table, _ = synth.generate_dataset(cells=10, heterogeneity=0.2, seed=0, batch=2)
    long = table.only_cells(["sim001"])
    long = FeatureTable(long.cell_id, long.batch, long.cycle, long.x, long.t, long.pcl,
                        np.full(len(long), np.nan), long.feature_names)
    table = FeatureTable.concat([long, table.take(table.cell_id != "sim001")])
    for seed in range(5):
        split = make_splits("C", table, seed=seed, task="rul")
        assert "sim001" not in split.test_cells
        assert not np.isnan(split.train.rul).any()


def _write_fake_batch(path, cells):
    import h5py

    with h5py.File(path, "w") as f:
        batch = f.create_group("batch")
        ref = h5py.ref_dtype
        pol = batch.create_dataset("policy_readable", (len(cells), 1), dtype=ref)
        summ = batch.create_dataset("summary", (len(cells), 1), dtype=ref)
        cyc = batch.create_dataset("cycles", (len(cells), 1), dtype=ref)
        for i, cell in enumerate(cells):
            p = f.create_dataset(f"refs/policy{i}",
                                 data=np.frombuffer(cell["policy"].encode(), np.uint8)
                                 .astype(np.uint16).reshape(-1, 1))
            pol[i, 0] = p.ref
            g = f.create_group(f"refs/summary{i}")
            for key, arr in cell["summary"].items():
                g.create_dataset(key, data=np.asarray(arr, dtype=np.float64).reshape(1, -1))
            summ[i, 0] = g.ref
            cg = f.create_group(f"refs/cycles{i}")
            qd = cg.create_dataset("Qdlin", (len(cell["curves"]), 1), dtype=ref)
            for j, curve in enumerate(cell["curves"]):
                qd[j, 0] = f.create_dataset(f"refs/q{i}_{j}", data=curve.reshape(-1, 1)).ref
            cyc[i, 0] = cg.ref


def test_ingest_fake_hdf5_batch(tmp_path):
    pytest.importorskip("h5py")
    v = np.linspace(3.6, 2.0, 1000)
    cells = []
    for i in range(2):
        n = 30
        caps = np.linspace(1.08, 0.85 + 0.01 * i, n)
        cells.append({
            "policy": f"5C(67%)-{4 + i}C",
            "summary": {"cycle": np.arange(1.0, n + 1), "QDischarge": caps,
                        "chargetime": np.full(n, 10.0), "IR": np.full(n, 0.017),
                        "Tavg": np.full(n, 32.0)},
            "curves": [c * (1 - (v - 2.0) / 1.6) for c in caps],
        })
    cells[1]["summary"]["QDischarge"][3] = 0.0  # bad summary row is skipped
    path = tmp_path / "batch1.mat"
    _write_fake_batch(path, cells)
    out = tmp_path / "ingested"
    ids = ingest_mat_batches([path], out)
    assert ids == ["1", "2"]
    index = pd.read_csv(out / "cells.csv", dtype={"cell_id": str})
    assert index.policy.tolist() == ["5C(67%)-4C", "5C(67%)-5C"]
    recs = read_cell(out, "1")
    assert len(recs) == 30 and recs[4].discharge_capacity == pytest.approx(cells[0]["summary"]["QDischarge"][4])
    np.testing.assert_allclose(recs[0].capacity, cells[0]["curves"][0], rtol=1e-7)
    assert len(read_cell(out, "2")) == 29
    table = extract_dataset(out)
    assert table.n_features == 8 and set(table.cells) == {"1", "2"}


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 300), st.integers(0, 10))
def test_rul_decrements_by_one(eol, extra):
    table = assemble_features(_step_records(eol=eol, n=eol + extra)[:eol + extra])
    assert table.rul[-1] == 0 and len(table) == eol
    np.testing.assert_array_equal(np.diff(table.rul), -1.0)
