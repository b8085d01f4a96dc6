import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitshield import linalg, nn, obfuscator
from splitshield.errors import DimensionError, InvalidBudget, InvalidM

W_EXAMPLE = np.array([[3.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
Z_EXAMPLE = np.array([1.0, 2.0, 4.0])


def direct_distortion(w, z, zprime):
    return float(np.linalg.norm(w @ (z - zprime)))


def test_decompose_identity_basis():
    basis = linalg.svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(
        obfuscator.decompose([1.0, 2.0, 4.0], basis), [1.0, 2.0, 4.0], atol=1e-12
    )


def test_decompose_right_vector_gives_unit(rng):
    basis = linalg.svd(rng.normal(size=(4, 5)))
    alpha = obfuscator.decompose(basis.v[:, 2], basis)
    expected = np.zeros(5)
    expected[2] = 1.0
    np.testing.assert_allclose(alpha, expected, atol=1e-9)


def test_decompose_parseval(rng):
    basis = linalg.svd(rng.normal(size=(6, 8)))
    z = rng.normal(size=8)
    alpha = obfuscator.decompose(z, basis)
    assert alpha @ alpha == pytest.approx(z @ z, rel=1e-9)
    with pytest.raises(DimensionError):
        obfuscator.decompose(np.zeros(7), basis)


def test_reconstruct_roundtrip(rng):
    basis = linalg.svd(rng.normal(size=(5, 5)))
    z = rng.normal(size=5)
    alpha = obfuscator.decompose(z, basis)
    np.testing.assert_allclose(obfuscator.reconstruct(alpha, basis), z, rtol=1e-9)
    np.testing.assert_allclose(obfuscator.reconstruct(np.zeros(5), basis), np.zeros(5))
    e1 = np.zeros(5)
    e1[0] = 1.0
    np.testing.assert_allclose(obfuscator.reconstruct(e1, basis), basis.v[:, 0])


def test_signal_null_axis_aligned():
    basis = linalg.svd(W_EXAMPLE)
    np.testing.assert_allclose(
        obfuscator.signal_content(Z_EXAMPLE, basis), [1.0, 2.0, 0.0], atol=1e-12
    )
    np.testing.assert_allclose(
        obfuscator.null_content(Z_EXAMPLE, basis), [0.0, 0.0, 4.0], atol=1e-12
    )


def test_signal_content_square_full_rank(rng):
    w = rng.normal(size=(5, 5))
    basis = linalg.svd(w)
    z = rng.normal(size=5)
    np.testing.assert_allclose(obfuscator.signal_content(z, basis), z, rtol=1e-9)
    np.testing.assert_allclose(obfuscator.null_content(z, basis), np.zeros(5), atol=1e-9)


def test_null_content_annihilated(rng):
    w = rng.normal(size=(4, 9))
    basis = linalg.svd(w)
    z = rng.normal(size=9)
    zn = obfuscator.null_content(z, basis)
    bound = 1e-8 * np.linalg.norm(w) * np.linalg.norm(z)
    assert np.linalg.norm(w @ zn) <= bound
    zs = obfuscator.signal_content(z, basis)
    np.testing.assert_allclose(zs + zn, z, atol=1e-12)
    assert zs @ zs + zn @ zn == pytest.approx(z @ z, rel=1e-9)
    assert abs(zs @ zn) <= 1e-9 * (z @ z)


def test_budget_worked_example_eps_1_5():
    basis = linalg.svd(W_EXAMPLE)
    res = obfuscator.obfuscate_budget(Z_EXAMPLE, basis, 1.5)
    assert res.m_prime == 2
    assert res.gamma == pytest.approx(1.5, abs=1e-12)
    np.testing.assert_allclose(res.alpha_prime, [1.0, 0.5, 0.0], atol=1e-12)
    zprime = obfuscator.reconstruct(res, basis)
    np.testing.assert_allclose(zprime, [1.0, 0.5, 0.0], atol=1e-12)
    assert direct_distortion(W_EXAMPLE, Z_EXAMPLE, zprime) == pytest.approx(1.5, abs=1e-12)
    assert res.achieved_distortion == pytest.approx(1.5, abs=1e-12)


def test_budget_worked_example_eps_2_5():
    basis = linalg.svd(W_EXAMPLE)
    res = obfuscator.obfuscate_budget(Z_EXAMPLE, basis, 2.5)
    assert res.m_prime == 1
    assert res.gamma == pytest.approx(0.5, abs=1e-12)
    zprime = obfuscator.reconstruct(res, basis)
    np.testing.assert_allclose(zprime, [0.5, 0.0, 0.0], atol=1e-12)
    assert direct_distortion(W_EXAMPLE, Z_EXAMPLE, zprime) == pytest.approx(2.5, abs=1e-12)


def test_budget_zero_equals_signal_content(rng):
    w = rng.normal(size=(3, 6))
    basis = linalg.svd(w)
    z = rng.normal(size=6)
    res = obfuscator.obfuscate_budget(z, basis, 0.0)
    assert res.gamma == 0.0
    np.testing.assert_allclose(
        obfuscator.reconstruct(res, basis), obfuscator.signal_content(z, basis), atol=1e-9
    )


def test_budget_above_total_zeroes_everything(rng):
    basis = linalg.svd(W_EXAMPLE)
    alpha = obfuscator.decompose(Z_EXAMPLE, basis)
    eps0 = math.sqrt(float(np.sum((alpha[:2] * basis.s) ** 2)))
    res = obfuscator.obfuscate_budget(Z_EXAMPLE, basis, eps0 + 1e-6)
    assert res.m_prime == 0
    np.testing.assert_array_equal(res.alpha_prime, np.zeros(3))
    np.testing.assert_allclose(obfuscator.reconstruct(res, basis), np.zeros(3))


def test_budget_rejects_negative():
    basis = linalg.svd(W_EXAMPLE)
    with pytest.raises(InvalidBudget):
        obfuscator.obfuscate_budget(Z_EXAMPLE, basis, -0.1)


def test_budget_spends_fully_and_never_exceeds(rng):
    for _ in range(50):
        m, n = int(rng.integers(2, 6)), int(rng.integers(2, 8))
        w = rng.normal(size=(m, n))
        z = rng.normal(size=n)
        basis = linalg.svd(w)
        alpha = obfuscator.decompose(z, basis)
        k = min(m, n)
        eps0 = math.sqrt(float(np.sum((alpha[:k] * basis.s[:k]) ** 2)))
        eps = float(rng.uniform(0.05, 0.95)) * eps0
        res = obfuscator.obfuscate_budget(z, basis, eps)
        direct = direct_distortion(w, z, obfuscator.reconstruct(res, basis))
        assert direct <= eps + 1e-9
        # Budget binding below eps0 with positive boundary singular value.
        assert res.achieved_distortion == pytest.approx(eps, rel=1e-9)
        # Lemma identity: coefficient form equals direct multiplication.
        assert res.achieved_distortion == pytest.approx(direct, rel=1e-9, abs=1e-12)


def test_budget_prefix_selection_matches_independent_svd(rng):
    """m' is the smallest prefix count whose tail cost fits the budget,
    recomputed against numpy's SVD."""
    for _ in range(25):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        w = rng.normal(size=(m, n))
        z = rng.normal(size=n)
        s_np = np.linalg.svd(w, compute_uv=False)
        basis = linalg.svd(w)
        alpha = obfuscator.decompose(z, basis)
        k = min(m, n)
        weighted = (alpha[:k] * s_np) ** 2
        eps0 = math.sqrt(float(weighted.sum()))
        eps = float(rng.uniform(0, 1.1)) * eps0
        tails = np.sqrt(np.concatenate([np.cumsum(weighted[::-1])[::-1], [0.0]]))
        expected = int(np.nonzero(tails <= eps)[0][0])
        res = obfuscator.obfuscate_budget(z, basis, eps)
        assert res.m_prime == expected
        if 0 < res.m_prime:
            assert abs(res.alpha_prime[res.m_prime - 1]) <= abs(alpha[res.m_prime - 1]) + 1e-12


def test_budget_invariant_prefix_untouched(rng):
    w = rng.normal(size=(4, 6))
    z = rng.normal(size=6)
    basis = linalg.svd(w)
    alpha = obfuscator.decompose(z, basis)
    res = obfuscator.obfuscate_budget(z, basis, 0.3 * float(np.linalg.norm(w @ z)))
    for k in range(res.m_prime - 1):
        assert res.alpha_prime[k] == alpha[k]
    for k in range(res.m_prime, 6):
        assert res.alpha_prime[k] == 0.0


def test_budget_degenerate_zero_singular_value():
    w = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])  # rank 1, s = (2, 0)
    basis = linalg.svd(w)
    z = np.array([1.0, 3.0, 2.0])
    res = obfuscator.obfuscate_budget(z, basis, 0.0)
    assert res.degenerate
    assert res.m_prime == 1
    # Zeroing the zero-singular-value coefficient costs nothing.
    assert direct_distortion(w, z, obfuscator.reconstruct(res, basis)) <= 1e-12


def test_topm_examples():
    basis = linalg.svd(W_EXAMPLE)
    full = obfuscator.obfuscate_topm(Z_EXAMPLE, basis, 2)
    np.testing.assert_allclose(
        obfuscator.reconstruct(full, basis),
        obfuscator.signal_content(Z_EXAMPLE, basis),
        atol=1e-12,
    )
    assert full.achieved_distortion == pytest.approx(0.0, abs=1e-12)

    none = obfuscator.obfuscate_topm(Z_EXAMPLE, basis, 0)
    np.testing.assert_allclose(obfuscator.reconstruct(none, basis), np.zeros(3))

    one = obfuscator.obfuscate_topm(Z_EXAMPLE, basis, 1)
    np.testing.assert_allclose(obfuscator.reconstruct(one, basis), [1.0, 0.0, 0.0], atol=1e-12)
    assert one.achieved_distortion == pytest.approx(2.0, abs=1e-12)
    assert direct_distortion(
        W_EXAMPLE, Z_EXAMPLE, obfuscator.reconstruct(one, basis)
    ) == pytest.approx(2.0, abs=1e-12)

    with pytest.raises(InvalidM):
        obfuscator.obfuscate_topm(Z_EXAMPLE, basis, 3)


def test_topm_distortion_monotone_in_m(rng):
    w = rng.normal(size=(5, 8))
    z = rng.normal(size=8)
    basis = linalg.svd(w)
    dists = [
        obfuscator.obfuscate_topm(z, basis, k).achieved_distortion for k in range(6)
    ]
    assert all(a >= b - 1e-12 for a, b in zip(dists, dists[1:]))


def test_distortion_free_guarantee(rng):
    w = rng.normal(size=(3, 7))
    z = rng.normal(size=7)
    basis = linalg.svd(w)
    res = obfuscator.obfuscate_free(z, basis)
    zprime = obfuscator.reconstruct(res, basis)
    assert np.linalg.norm(w @ zprime - w @ z) <= 1e-8 * np.linalg.norm(w) * np.linalg.norm(z)
    assert res.mode == obfuscator.MODE_FREE


def test_entropy_proxy_values():
    stats = obfuscator.CalibrationStats(sigma2=np.array([1.0, 1.0]), count=10)
    assert obfuscator.entropy_proxy(stats, 0) == 0.0
    expected = 2 * 0.5 * math.log(2 * math.pi * math.e)
    assert obfuscator.entropy_proxy(stats, 2) == pytest.approx(expected, rel=1e-12)
    assert obfuscator.entropy_proxy(stats, 2) == pytest.approx(2.8378770, abs=1e-6)

    root = obfuscator.CalibrationStats(sigma2=np.array([1.0 / (2 * math.pi * math.e)]), count=5)
    assert obfuscator.entropy_proxy(root, 1) == pytest.approx(0.0, abs=1e-12)

    with pytest.raises(InvalidM):
        obfuscator.entropy_proxy(stats, 3)


def test_entropy_proxy_floor():
    stats = obfuscator.CalibrationStats(sigma2=np.array([0.0]), count=4)
    val = obfuscator.entropy_proxy(stats, 1)
    assert val == pytest.approx(0.5 * math.log(2 * math.pi * math.e * 1e-12), rel=1e-9)


def test_calibrate(rng):
    basis = linalg.svd(rng.normal(size=(4, 6)))
    zs = rng.normal(size=(50, 6))
    stats = obfuscator.calibrate(zs, basis)
    assert stats.count == 50
    alphas = zs @ basis.v
    np.testing.assert_allclose(stats.sigma2, alphas.var(axis=0), rtol=1e-12)
    from splitshield.errors import InsufficientBatch

    with pytest.raises(InsufficientBatch):
        obfuscator.calibrate(zs[:1], basis)


def test_cumulative_signal_content_square_full_rank(rng):
    # Square full-rank weights at the first two boundaries: no null space
    # there, so those layers contribute exactly zero.
    model = nn.mlp_model(6, (6, 6), 2, rng)
    xs = rng.normal(size=(10, 6))
    prof = obfuscator.cumulative_signal_content(model, xs)
    np.testing.assert_allclose(prof.mean_cs[:2], 0.0, atol=1e-9)
    # The classifier head is 2x6 and does discard content.
    assert prof.mean_cs[2] < 0.0


def test_cumulative_signal_content_non_increasing(rng):
    model = nn.mlp_model(12, (8, 5), 2, rng)
    xs = rng.normal(size=(20, 12))
    prof = obfuscator.cumulative_signal_content(model, xs)
    assert np.all(prof.mean_cs <= 1e-12)
    assert np.all(np.diff(prof.cumulative) <= 1e-12)
    assert prof.split_indices == [1, 2, 3]


def test_cumulative_signal_content_floor():
    # Feature entirely in the null space: ratio 0 floored at -50.
    w = np.array([[1.0, 0.0]])
    basis = linalg.svd(w)
    z = np.array([0.0, 1.0])
    zs = obfuscator.signal_content(z, basis)
    ratio = float(zs @ zs) / float(z @ z)
    assert ratio == pytest.approx(0.0, abs=1e-18)
    # The floor applies inside cumulative_signal_content; check the constant.
    assert obfuscator.CS_FLOOR == -50.0


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 100_000),
    frac=st.floats(0.0, 1.2),
)
def test_budget_feasibility_property(seed, frac):
    prng = np.random.default_rng(seed)
    m, n = int(prng.integers(1, 6)), int(prng.integers(1, 8))
    w = prng.normal(size=(m, n))
    z = prng.normal(size=n)
    basis = linalg.svd(w)
    alpha = obfuscator.decompose(z, basis)
    k = min(m, n)
    eps0 = math.sqrt(float(np.sum((alpha[:k] * basis.s[:k]) ** 2)))
    eps = frac * eps0
    res = obfuscator.obfuscate_budget(z, basis, eps)
    direct = direct_distortion(w, z, obfuscator.reconstruct(res, basis))
    assert direct <= eps + 1e-9
    assert res.achieved_distortion == pytest.approx(direct, rel=1e-9, abs=1e-10)
