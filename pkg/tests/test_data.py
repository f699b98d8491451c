import json
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ckt_surrogate.circuits import TOPOLOGIES, get_topology
from ckt_surrogate.data import (
    Dataset, NormStats, build_dataset, denormalize, fit_norm, normalize, sample_designs, split,
)

from conftest import GOLDEN


def test_sample_golden_design():
    with open(os.path.join(GOLDEN, "oracle.json")) as fh:
        gold = json.load(fh)
    for name in TOPOLOGIES:
        assert sample_designs(name, 1, seed=0)[0].tolist() == gold[name]["design"]


@pytest.mark.parametrize("name", sorted(TOPOLOGIES))
def test_samples_within_bounds(name):
    topo = get_topology(name)
    X = sample_designs(topo, 10_000, seed=11)
    assert np.all(X >= topo.lower) and np.all(X <= topo.upper)


def test_sample_mean_near_midpoint():
    topo = get_topology("ota2_nmos")
    X = sample_designs(topo, 50_000, seed=3)
    mid = 0.5 * (topo.lower + topo.upper)
    assert np.all(np.abs(X.mean(axis=0) - mid) <= 0.02 * mid)


def test_sample_reproducible_and_negative_n():
    assert np.array_equal(sample_designs("tia3", 20, 7), sample_designs("tia3", 20, 7))
    assert not np.array_equal(sample_designs("tia3", 20, 7), sample_designs("tia3", 20, 8))
    with pytest.raises(ValueError):
        sample_designs("tia3", -1)


def test_empty_dataset(tmp_path):
    ds = build_dataset("comparator", "synth45", 0)
    assert len(ds) == 0 and ds.X.shape == (0, 6) and ds.Y.shape == (0, 2)
    ds.save(tmp_path / "e.csv")
    assert Dataset.load(tmp_path / "e.csv") == ds


def test_save_load_roundtrip_2000(tmp_path):
    ds = build_dataset("ota2_nmos", "synth45", 2000, seed=1)
    p = tmp_path / "ota.csv"
    ds.save(p)
    back = Dataset.load(p)
    assert back == ds
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.Y, ds.Y)
    # same inputs give the same bytes
    p2 = tmp_path / "ota2.csv"
    build_dataset("ota2_nmos", "synth45", 2000, seed=1).save(p2)
    assert p.read_bytes() == p2.read_bytes()


def test_file_layout(tmp_path, ota_data):
    ota_data.subset(np.arange(3)).save(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert all(line.startswith("#") for line in lines[:7])
    assert lines[7] == "x_1,x_2,x_3,x_4,x_5,x_6,x_7,x_8,y_1,y_2,y_3,y_4"
    assert len(lines) == 11


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        Dataset.load(tmp_path / "x.csv")


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset("ota2_nmos", "synth45", np.zeros((2, 8)), np.zeros((3, 4)),
                get_topology("ota2_nmos").param_names, get_topology("ota2_nmos").metric_names)
    with pytest.raises(ValueError):
        Dataset("ota2_nmos", "synth45", np.full((1, 8), np.nan), np.zeros((1, 4)),
                get_topology("ota2_nmos").param_names, get_topology("ota2_nmos").metric_names)


# ---- normalisation

def test_norm_mean_row_maps_to_zero(ota_data):
    st_ = fit_norm(ota_data)
    np.testing.assert_allclose(normalize(st_, X=ota_data.X.mean(axis=0)), 0, atol=1e-12)


def test_norm_roundtrip(ota_data):
    st_ = fit_norm(ota_data)
    Z = normalize(st_, Y=ota_data.Y)
    np.testing.assert_allclose(denormalize(st_, Z), ota_data.Y, rtol=1e-10)
    np.testing.assert_allclose(st_.denormalize_x(st_.normalize_x(ota_data.X)), ota_data.X, rtol=1e-10)
    assert NormStats.from_dict(json.loads(json.dumps(st_.to_dict()))) == st_


def test_log_ugbw_unit_std():
    ds = build_dataset("ota2_nmos", "synth45", 3000, seed=2)
    j = ds.metric_names.index("ugbw")
    assert ds.log_flags[j]
    st_ = fit_norm(ds)
    z = normalize(st_, Y=ds.Y)[:, j]
    assert z.std() == pytest.approx(1.0, abs=1e-12)
    assert np.log10(ds.Y[:, j]).std() == pytest.approx(st_.y_std[j], rel=1e-12)


def test_norm_errors():
    X = np.array([[1.0, 2.0], [1.0, 3.0]])
    with pytest.raises(ValueError):
        NormStats.fit(X, np.array([[1.0], [2.0]]), [False])
    with pytest.raises(ValueError):
        NormStats.fit(np.array([[1.0], [2.0]]), np.array([[-1.0], [2.0]]), [True])
    with pytest.raises(ValueError):
        NormStats.fit(np.array([[1.0]]), np.array([[1.0]]), [False])


@given(st.integers(0, 2**32 - 1))
def test_norm_leakage_free(seed):
    ds = build_dataset("level_shifter", "synth45", 60, seed=4)
    tr, te = split(ds, 40, 20, seed=seed % 1000)
    base = fit_norm(tr)
    # replacing test rows never touches the statistics, which only see tr
    te2 = build_dataset("level_shifter", "synth45", 20, seed=seed)
    assert fit_norm(tr) == base
    assert te2.X.shape == te.X.shape


# ---- split

def test_split_counts_disjoint(ota_data):
    ds = build_dataset("ota2_nmos", "synth45", 2000, seed=1)
    tr, te = split(ds, 1500, 500, seed=0)
    assert len(tr) == 1500 and len(te) == 500
    rows_tr = {r.tobytes() for r in tr.X}
    rows_te = {r.tobytes() for r in te.X}
    assert not rows_tr & rows_te


def test_split_deterministic_and_union(ota_data):
    a = split(ota_data, 300, 100, seed=5)
    b = split(ota_data, 300, 100, seed=5)
    assert a[0] == b[0] and a[1] == b[1]
    tr, te = split(ota_data, train_fraction=0.75, seed=1)
    merged = Counter(map(bytes, np.vstack([tr.X, te.X]).view(np.uint8).reshape(len(ota_data), -1)))
    orig = Counter(map(bytes, ota_data.X.view(np.uint8).reshape(len(ota_data), -1)))
    assert merged == orig


def test_split_oversubscription(ota_data):
    with pytest.raises(ValueError):
        split(ota_data, 300, 101)
    with pytest.raises(ValueError):
        split(ota_data)
