import numpy as np
import pytest

from splitshield import datasets as ds
from splitshield.errors import LengthMismatch, MagicMismatch, SpecError


def spec_with(coupling, rho=0.0, **kw):
    defaults = dict(n_examples=400, input_dim=20, target_classes=2, noise_std=0.0, seed=9)
    defaults.update(kw)
    return ds.SynthSpec(hidden={"a": ds.HiddenSpec(2, coupling, rho)}, **defaults)


def test_generator_reproducible():
    a = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL))
    b = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL))
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.y_tar, b.y_tar)
    assert np.array_equal(a.hidden["a"], b.hidden["a"])
    assert np.array_equal(a.splits["train"], b.splits["train"])


def test_orthogonal_coupling_subspaces():
    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL))
    cross = d.meta["b_tar"].T @ d.meta["b_hid"]["a"]
    np.testing.assert_allclose(cross, 0.0, atol=1e-10)


def test_noiseless_orthogonal_probe_recovers_both():
    from sklearn.linear_model import LogisticRegression

    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL))
    for labels in (d.y_tar, d.hidden["a"]):
        probe = LogisticRegression().fit(d.x, labels)
        assert probe.score(d.x, labels) == 1.0


def test_correlated_rho_one_copies_target():
    d = ds.gen_synthetic(spec_with(ds.COUPLING_CORRELATED, rho=1.0))
    np.testing.assert_array_equal(d.hidden["a"], d.y_tar)


def test_correlated_rho_fraction():
    d = ds.gen_synthetic(spec_with(ds.COUPLING_CORRELATED, rho=0.2, n_examples=4000))
    agree = float(np.mean(d.hidden["a"] == d.y_tar))
    # rho + (1 - rho)/2 = 0.6 for binary labels.
    assert abs(agree - 0.6) < 0.05


def test_nullspace_planted_matrix():
    d = ds.gen_synthetic(spec_with(ds.COUPLING_NULLSPACE, noise_std=0.05))
    w = d.meta["w_star"]
    bh = d.meta["b_hid"]["a"]
    assert np.abs(w @ bh).max() < 1e-10
    # Target directions live in the row space.
    bt = d.meta["b_tar"]
    proj = d.meta["signal_frame"] @ (d.meta["signal_frame"].T @ bt)
    np.testing.assert_allclose(proj, bt, atol=1e-10)


def test_nullspace_projection_kills_hidden_probe():
    from sklearn.linear_model import LogisticRegression

    from splitshield import linalg, obfuscator

    d = ds.gen_synthetic(spec_with(ds.COUPLING_NULLSPACE, n_examples=2000, noise_std=0.05))
    basis = linalg.svd(d.meta["w_star"])
    k = min(basis.m, basis.n)
    proj = (d.x @ basis.v[:, :k]) @ basis.v[:, :k].T
    tr, te = d.splits["train"], d.splits["test"]
    probe = LogisticRegression(max_iter=2000).fit(proj[tr], d.hidden["a"][tr])
    acc = probe.score(proj[te], d.hidden["a"][te])
    assert acc <= 0.5 + 0.05
    raw = LogisticRegression(max_iter=2000).fit(d.x[tr], d.hidden["a"][tr])
    assert raw.score(d.x[te], d.hidden["a"][te]) > 0.95


def test_label_balance_binomial():
    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL, n_examples=4000))
    for labels in (d.y_tar, d.hidden["a"]):
        frac = float(np.mean(labels))
        sigma = 0.5 / np.sqrt(labels.shape[0])
        assert abs(frac - 0.5) <= 3 * sigma + 1e-12


def test_infeasible_dims_rejected():
    with pytest.raises(SpecError):
        ds.gen_synthetic(
            ds.SynthSpec(
                n_examples=10,
                input_dim=3,
                target_classes=2,
                hidden={"a": ds.HiddenSpec(5)},
            )
        )


def test_splits_disjoint():
    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL))
    all_idx = np.concatenate([d.splits["train"], d.splits["val"], d.splits["test"]])
    assert len(set(all_idx.tolist())) == len(all_idx) == d.x.shape[0]


def test_image_subset_protocol_constant():
    assert ds.EMNIST_SUBSET["hidden_classes"] == 100
    assert ds.EMNIST_SUBSET["per_class"] == 130
    assert (
        ds.EMNIST_SUBSET["train"],
        ds.EMNIST_SUBSET["val"],
        ds.EMNIST_SUBSET["test"],
    ) == (10000, 1500, 1500)


def test_idx_roundtrip(tmp_path):
    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL, n_examples=50))
    ds.save_idx(d, tmp_path / "one")
    loaded = ds.load_idx(tmp_path / "one")
    assert np.array_equal(d.x, loaded.x)
    assert np.array_equal(d.y_tar, loaded.y_tar)
    assert np.array_equal(d.hidden["a"], loaded.hidden["a"])
    ds.save_idx(loaded, tmp_path / "two")
    for name in ("x.splt", "y_tar.splt", "hidden_a.splt", "meta.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_idx_uint8_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    d = ds.LabeledDataset(
        x=rng.integers(0, 256, size=(12, 2, 4, 4)).astype(np.uint8),
        y_tar=rng.integers(0, 3, 12),
        n_target_classes=3,
        hidden={"w": rng.integers(0, 5, 12)},
        hidden_classes={"w": 5},
        splits={"train": np.arange(8), "val": np.arange(8, 10), "test": np.arange(10, 12)},
    )
    ds.save_idx(d, tmp_path / "img")
    loaded = ds.load_idx(tmp_path / "img")
    assert loaded.x.dtype == np.uint8
    assert np.array_equal(d.x, loaded.x)


def test_idx_bad_magic(tmp_path):
    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL, n_examples=20))
    ds.save_idx(d, tmp_path)
    raw = bytearray((tmp_path / "x.splt").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "x.splt").write_bytes(bytes(raw))
    with pytest.raises(MagicMismatch):
        ds.load_idx(tmp_path)


def test_idx_truncated(tmp_path):
    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL, n_examples=20))
    ds.save_idx(d, tmp_path)
    raw = (tmp_path / "x.splt").read_bytes()
    (tmp_path / "x.splt").write_bytes(raw[:-8])
    with pytest.raises(LengthMismatch):
        ds.load_idx(tmp_path)


def test_idx_record_count_mismatch(tmp_path):
    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL, n_examples=20))
    ds.save_idx(d, tmp_path)
    short = d.y_tar[:-1]
    ds._write_splt(tmp_path / "y_tar.splt", short.astype("<u4"))
    with pytest.raises(LengthMismatch):
        ds.load_idx(tmp_path)


def test_idx_empty_rejected(tmp_path):
    d = ds.gen_synthetic(spec_with(ds.COUPLING_ORTHOGONAL, n_examples=20))
    d.x = d.x[:0]
    with pytest.raises(SpecError):
        ds.save_idx(d, tmp_path)
