import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccssl.data import GeneratorSpec, Dataset, class_means, generate, load_csv, load_run, persist_run, split, write_csv
from ccssl.prob import ValidationError
from ccssl.trainer import RunRecord


def test_generate_is_deterministic_multinomial():
    spec = GeneratorSpec(K=2, n=100, priors=[0.5, 0.5], seed=7)
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    expected = np.random.default_rng(7).multinomial(100, [0.5, 0.5])
    assert np.array_equal(np.bincount(a.labels, minlength=2), expected)


def test_noise_free_blobs_sit_on_means():
    ds = generate(GeneratorSpec(K=3, d=4, n=30, noise=0.0, seed=1))
    assert np.array_equal(ds.features, class_means(3, 4, 3.0)[ds.labels])


@pytest.mark.parametrize("K, d", [(3, 5), (6, 2)])
def test_class_means_are_equidistant_neighbours(K, d):
    m = class_means(K, d, 4.0)
    dist = np.linalg.norm(m[0] - m[1])
    assert dist == pytest.approx(4.0)


def test_interleaved_arcs():
    ds = generate(GeneratorSpec(kind="interleaved-arcs", K=2, d=2, n=200, noise=0.0, separation=1.0, seed=3))
    upper = ds.features[ds.labels == 0]
    assert np.allclose(np.linalg.norm(upper, axis=1), 1.0)
    with pytest.raises(ValueError):
        GeneratorSpec(kind="interleaved-arcs", K=3, d=2)


def test_generator_settings_collect_errors():
    with pytest.raises(ValueError) as exc:
        GeneratorSpec(K=3, n=2, priors=[0.5, 0.5])
    text = str(exc.value)
    assert "n=2" in text and "priors" in text


def test_split_example_cardinalities():
    ds = generate(GeneratorSpec(K=2, n=1100, seed=0))
    sp = split(ds, 20, 0.25, 100, seed=0)
    assert (len(sp.labeled_y), len(sp.calib_y), len(sp.unlabeled_x), len(sp.test_y)) == (15, 5, 980, 100)
    sp = split(generate(GeneratorSpec(K=2, n=10, seed=0)), 2, 0.5, 0, seed=0)
    assert len(sp.labeled_y) == 1 and len(sp.calib_y) == 1
    with pytest.raises(ValidationError):
        split(ds, 3, 0.25, 100, seed=0)
    with pytest.raises(ValidationError):
        split(ds, 1000, 0.25, 200, seed=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(30, 200), st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 30),
       st.integers(0, 1000))
def test_split_disjoint_exact_and_stratified(K, n, n_lab, frac, n_test, seed):
    ds = generate(GeneratorSpec(K=K, n=n, seed=seed))
    n_cal = int(np.floor(frac * n_lab + 1e-9))
    if n_lab + n_test > n or n_cal < 1 or n_lab - n_cal < 1:
        with pytest.raises(ValidationError):
            split(ds, n_lab, frac, n_test, seed)
        return
    sp = split(ds, n_lab, frac, n_test, seed)
    idx = sp.indices
    parts = [idx["train"], idx["calibration"], idx["unlabeled"], idx["test"]]
    allidx = np.concatenate(parts)
    assert len(allidx) == n and len(np.unique(allidx)) == n
    assert [len(p) for p in parts] == [n_lab - n_cal, n_cal, n - n_lab - n_test, n_test]
    assert np.array_equal(sp.shadow_labels, ds.labels[idx["unlabeled"]])
    pool = ds.labels[np.concatenate(parts[:2])]
    available = np.bincount(ds.labels[np.concatenate(parts[:3])], minlength=K)
    if n_lab >= K:
        assert all(c in pool for c in range(K) if available[c] > 0)


def test_split_is_pure():
    ds = generate(GeneratorSpec(K=3, n=300, seed=4))
    a, b = split(ds, 30, 0.25, 50, 9), split(ds, 30, 0.25, 50, 9)
    for k in a.indices:
        assert np.array_equal(a.indices[k], b.indices[k])


def test_load_csv_examples(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("x1,x2,y\n1,2,0\n3,4,1\n5,6,0\n")
    ds = load_csv(f, label_column="y")
    assert ds.features.shape == (3, 2) and list(ds.labels) == [0, 1, 0]
    g = tmp_path / "b.csv"
    g.write_text("x,label\n0.5,cat\n1.5,dog\n2.5,cat\n")
    ds = load_csv(g)
    assert list(ds.labels) == [0, 1, 0] and ds.label_names == ("cat", "dog")


@pytest.mark.parametrize("body, needle", [
    ("x1,x2,y\n1,2,0\n3,4\n", "line 3"),
    ("x1,x2,y\n1,abc,0\n", "line 2"),
    ("x1,x2,y\n1,nan,0\n", "non-finite"),
])
def test_load_csv_errors(tmp_path, body, needle):
    f = tmp_path / "bad.csv"
    f.write_text(body)
    with pytest.raises(ValidationError, match=needle):
        load_csv(f, label_column="y")
    with pytest.raises(ValidationError, match="missing column"):
        load_csv(f, label_column="z")


def test_load_csv_rejects_empty_files(tmp_path):
    for i, body in enumerate(["", "x1,x2,y\n", "# schema-version=1\n"]):
        f = tmp_path / f"empty{i}.csv"
        f.write_text(body)
        with pytest.raises(ValidationError, match="no data rows"):
            load_csv(f, label_column="y")


def test_load_csv_without_header(tmp_path):
    f = tmp_path / "c.csv"
    f.write_text("1,2,1\n3,4,0\n")
    ds = load_csv(f, label_column=2, header=False)
    assert ds.features.tolist() == [[1, 2], [3, 4]] and list(ds.labels) == [1, 0]


def test_csv_round_trip_preserves_doubles(tmp_path):
    x = np.random.default_rng(0).normal(size=(5, 2))
    f = tmp_path / "d.csv"
    write_csv(f, ["a", "b", "label"], [list(r) + [i % 2] for i, r in enumerate(x)])
    assert f.read_text().startswith("# schema-version=1\n")
    assert np.array_equal(load_csv(f).features, x)


def test_persist_run_round_trip(tmp_path):
    rec = RunRecord(labeled_loss=[0.5, 0.25], unlabeled_loss=[0.1, 0.0], possibility_trace=[[1, 0.5], [1, 0.25]],
                    eval_iterations=[1], test_accuracy=[0.75], final_accuracy=0.75, final_ece=0.1)
    cfg = GeneratorSpec(K=2)
    path = persist_run(rec, cfg, tmp_path / "r" / "run.json")
    doc = load_run(path)
    assert doc["run-schema"] == 1 and doc["config"]["K"] == 2
    assert RunRecord.from_dict(doc["record"]) == rec
    trace = (tmp_path / "r" / "run.trace.csv").read_text().splitlines()
    assert trace[0] == "# schema-version=1" and len(trace) == 4
    with pytest.raises(FileExistsError):
        persist_run(rec, cfg, path)
    persist_run(rec, cfg, path, overwrite=True)
    (tmp_path / "x.json").write_text(json.dumps({"run-schema": 9}))
    with pytest.raises(ValidationError):
        load_run(tmp_path / "x.json")


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), np.array([0, 1, 2]), K=2)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), K=2)
