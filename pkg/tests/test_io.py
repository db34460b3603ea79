import dataclasses
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from bicmix import io as bio
from bicmix.model import Hyperparameters
from bicmix.vem import Checkpoint, FitConfig, initialize_state, resume, start


def assert_states_equal(a, b):
    for side in ("loading", "factor", "noise"):
        sa, sb = getattr(a, side), getattr(b, side)
        for f in dataclasses.fields(sa):
            va, vb = getattr(sa, f.name), getattr(sb, f.name)
            assert np.array_equal(np.asarray(va), np.asarray(vb)), f"{side}.{f.name}"
    assert np.array_equal(a.component_ids, b.component_ids)


# ---------------------------------------------------------------------------
# normalization


def test_quantile_normalize_example():
    out = bio.quantile_normalize(np.array([[3.0, 1.0, 2.0]]))
    q = stats.norm.ppf(5 / 6)
    assert q == pytest.approx(0.9674215661017, abs=1e-12)
    assert np.allclose(out, [[q, -q, 0.0]], atol=1e-15)


def test_quantile_normalize_ties_and_idempotence():
    out = bio.quantile_normalize(np.array([[1.0, 2.0, 2.0, 5.0]]))
    assert out[0, 1] == out[0, 2]
    row = stats.norm.ppf((np.arange(1, 6) - 0.5) / 5)[None, ::-1]
    assert np.allclose(bio.quantile_normalize(row), row, atol=1e-15)


def test_quantile_normalize_constant_row_warns():
    with pytest.warns(RuntimeWarning, match="constant"):
        out = bio.quantile_normalize(np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]]))
    assert np.array_equal(out[0], np.zeros(3))
    with pytest.raises(ValueError):
        bio.quantile_normalize(np.ones((2, 1)))


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 4), st.integers(2, 30)), elements=st.floats(-1e6, 1e6)))
def test_quantile_normalize_monotone(Y):
    Y = Y[np.ptp(Y, axis=1) > 0]
    for y, o in zip(Y, bio.quantile_normalize(Y) if Y.size else []):
        order = np.argsort(y, kind="stable")
        assert np.all(np.diff(o[order]) >= 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40, unique=True))
def test_quantile_normalize_untied_rows_have_zero_mean(row):
    # the plotting positions are symmetric about 1/2, so untied rows sum to zero;
    # average ranks of ties break that symmetry
    n = len(row)
    assert abs(bio.quantile_normalize(np.array([row])).mean()) <= 1e-6 * n**-0.5


# ---------------------------------------------------------------------------
# matrices


def test_matrix_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    M = rng.normal(size=(4, 3)) * 10.0 ** rng.integers(-200, 200, (4, 3))
    bio.write_matrix(tmp_path / "m.tsv", M, ["a", "b", "c", "d"], ["x", "y", "z"])
    back, rows, cols = bio.read_matrix(tmp_path / "m.tsv")
    assert np.array_equal(back, M) and rows == ["a", "b", "c", "d"] and cols == ["x", "y", "z"]


@given(arrays(float, st.tuples(st.integers(1, 3), st.integers(1, 3)), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_float_format_is_lossless(M):
    assert all(float(bio.format_float(v)) == v for v in M.ravel())


@pytest.mark.parametrize(
    "body, match",
    [
        ("gene_id\ts1\ts2\ng1\t1\t2\ng2\t1\tabc\n", "row 3 \\(g2\\), column s2"),
        ("gene_id\ts1\ts2\ng1\t1\n", "row 2"),
        ("gene_id\ts1\ng1\tnan\n", "column s1: non-finite"),
        ("gene_id\ts1\n", "header"),
        ("gene_id\ts1\ng1\t1\ng1\t2\n", "duplicate row"),
    ],
)
def test_malformed_matrix(tmp_path, body, match):
    (tmp_path / "bad.tsv").write_text(body)
    with pytest.raises(bio.DataFormatError, match=match):
        bio.read_matrix(tmp_path / "bad.tsv")


def test_labels(tmp_path):
    p = tmp_path / "labels.tsv"
    p.write_text("sample_id\tlabel\ns2\tb\ns1\ta\n")
    assert bio.read_labels(p, ["s1", "s2"]) == ["a", "b"]
    with pytest.raises(bio.DataFormatError, match="s3"):
        bio.read_labels(p, ["s1", "s2", "s3"])
    p.write_text("s1\ta\ns2\tb\nsX\tc\n")
    with pytest.raises(bio.DataFormatError, match="sX"):
        bio.read_labels(p, ["s1", "s2"])


def test_atomic_write_leaves_old_file_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    bio.atomic_write_text(target, "old\n")

    def boom(*a, **k):
        raise OSError("disk gone")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        bio.atomic_write_text(target, "new\n")
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


# ---------------------------------------------------------------------------
# checkpoints


def _checkpoint(tmp_path):
    Y = np.random.default_rng(0).normal(size=(12, 9))
    cfg = FitConfig(K_init=4, max_iterations=6, warm_start_iterations=2, seed=3)
    res = resume(Y, start(Y, Hyperparameters(), cfg), 4)
    return Y, res.checkpoint()


def test_checkpoint_round_trip(tmp_path):
    _, ck = _checkpoint(tmp_path)
    bio.save_checkpoint(tmp_path / "ck.npz", ck)
    back = bio.load_checkpoint(tmp_path / "ck.npz")
    assert_states_equal(ck.state, back.state)
    assert back.iteration == ck.iteration and back.rng_state == ck.rng_state
    assert back.hyper == ck.hyper and back.config == ck.config
    assert [t.iteration for t in back.trace] == [t.iteration for t in ck.trace]
    assert all(np.array_equal(a.n_genes, b.n_genes) for a, b in zip(ck.trace, back.trace))
    # serialization is deterministic
    assert bio.checkpoint_to_bytes(back) == bio.checkpoint_to_bytes(ck)


def test_fresh_state_round_trip(tmp_path):
    st_ = initialize_state(5, 4, 3, Hyperparameters(), np.random.default_rng(1))
    ck = Checkpoint(st_, 0, [], np.random.default_rng(2).bit_generator.state, Hyperparameters(), FitConfig(K_init=3))
    bio.save_checkpoint(tmp_path / "ck.npz", ck)
    assert_states_equal(bio.load_checkpoint(tmp_path / "ck.npz").state, st_)


def test_resume_from_file_matches_straight(tmp_path):
    Y, ck = _checkpoint(tmp_path)
    bio.save_checkpoint(tmp_path / "ck.npz", ck)
    cont = resume(Y, bio.load_checkpoint(tmp_path / "ck.npz"), 6)
    straight = resume(Y, start(Y, Hyperparameters(), ck.config), 6)
    assert_states_equal(cont.state, straight.state)


def test_corrupted_checkpoint(tmp_path):
    _, ck = _checkpoint(tmp_path)
    raw = bio.checkpoint_to_bytes(ck)
    (tmp_path / "trunc.npz").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(bio.CheckpointError):
        bio.load_checkpoint(tmp_path / "trunc.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(bio.CheckpointError):
        bio.load_checkpoint(tmp_path / "junk.npz")


def test_checkpoint_version_mismatch(tmp_path, monkeypatch):
    _, ck = _checkpoint(tmp_path)
    monkeypatch.setattr(bio, "CHECKPOINT_VERSION", 99)
    bio.save_checkpoint(tmp_path / "ck.npz", ck)
    monkeypatch.setattr(bio, "CHECKPOINT_VERSION", 1)
    with pytest.raises(bio.CheckpointError, match="version 99"):
        bio.load_checkpoint(tmp_path / "ck.npz")


def test_edges_tsv_header():
    assert bio.edges_to_tsv([]) == "gene_a\tgene_b\tpcor\tprob\treplication\n"


def test_json_numpy_values(tmp_path):
    bio.write_json(tmp_path / "m.json", {"a": np.int64(3), "b": np.float64(0.5), "c": np.arange(2)})
    assert bio.read_json(tmp_path / "m.json") == {"a": 3, "b": 0.5, "c": [0, 1]}
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(bio.DataFormatError):
        bio.read_json(tmp_path / "bad.json")
