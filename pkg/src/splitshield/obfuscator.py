"""Coefficient-space feature obfuscation around the SVD of a layer's weights.

A feature vector z is expressed in the right-singular basis of the next
layer's weight matrix W. Components beyond the first min(m, n) are
annihilated by W (null content) and can be dropped for free; the remaining
signal components can be trimmed further under a distortion budget, and the
optimal trim zeroes the lowest-singular-value coefficients first, partially
shrinking the boundary one.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InsufficientBatch, InvalidBudget, InvalidM
from .linalg import SvdBasis, as_vector

MODE_FREE = "free"
MODE_BUDGET = "budget"
MODE_TOPM = "topm"

# Variance floor for the entropy diagnostic; keeps log() finite on dead units.
SIGMA2_FLOOR = 1e-12

# ln(z_S^2/z^2) floor for examples whose activation is all null content.
CS_FLOOR = -50.0


@dataclass(frozen=True)
class ObfuscationResult:
    """Outcome of one obfuscation call, in coefficient space.

    alpha_prime has length n: the first m_prime entries are the retained
    (possibly boundary-shrunk) coefficients, everything after is zero.
    """

    m_prime: int
    alpha_prime: np.ndarray
    gamma: float
    achieved_distortion: float
    mode: str
    epsilon: float | None = None
    degenerate: bool = False


@dataclass(frozen=True)
class CalibrationStats:
    """Per-coefficient empirical variance over a calibration set."""

    sigma2: np.ndarray
    count: int


def decompose(z, basis: SvdBasis) -> np.ndarray:
    """Coefficients of z in the right-singular basis: alpha_k = v_k . z."""
    z = as_vector(z)
    if z.shape[0] != basis.n:
        raise DimensionError(f"z has length {z.shape[0]}, basis expects {basis.n}")
    return basis.v.T @ z


def reconstruct(coeffs, basis: SvdBasis) -> np.ndarray:
    """Rebuild a vector from (a prefix of) basis coefficients."""
    if isinstance(coeffs, ObfuscationResult):
        coeffs = coeffs.alpha_prime
    coeffs = as_vector(coeffs)
    k = coeffs.shape[0]
    if k > basis.n:
        raise DimensionError(f"{k} coefficients for an n={basis.n} basis")
    return basis.v[:, :k] @ coeffs


def signal_content(z, basis: SvdBasis) -> np.ndarray:
    """Projection of z onto the row space of W (kept by the multiplication)."""
    alpha = decompose(z, basis)
    k = min(basis.m, basis.n)
    return basis.v[:, :k] @ alpha[:k]


def null_content(z, basis: SvdBasis) -> np.ndarray:
    """Component of z annihilated by W: z minus its signal content."""
    z = as_vector(z)
    return z - signal_content(z, basis)


def coefficient_distortion(alpha, alpha_prime, basis: SvdBasis) -> float:
    """||W(z - z')|| via the singular values: sqrt(sum (a_k - a'_k)^2 s_k^2)."""
    alpha = as_vector(alpha)
    alpha_prime = as_vector(alpha_prime)
    if alpha.shape != alpha_prime.shape:
        raise DimensionError("coefficient vectors differ in length")
    k = min(basis.m, basis.n, alpha.shape[0])
    d = (alpha[:k] - alpha_prime[:k]) * basis.s[:k]
    return math.sqrt(float(d @ d))


def _tail_distortions(weighted: np.ndarray) -> np.ndarray:
    """eps_k = sqrt(sum_{i>k} weighted_i) for keep-counts k = 0..r."""
    r = weighted.shape[0]
    tails = np.zeros(r + 1)
    tails[:r] = np.cumsum(weighted[::-1])[::-1]
    return np.sqrt(tails)


def budget_trim(alpha, s, epsilon: float):
    """Distortion-budget selection on raw coefficient arrays.

    alpha: all n coefficients; s: the min(m, n) singular values aligned with
    the leading coefficients. Returns (alpha_prime, m_prime, gamma,
    degenerate). Used both on full f64 bases and on the f32 basis a client
    receives over the wire.
    """
    if epsilon < 0:
        raise InvalidBudget(f"negative distortion budget {epsilon}")
    alpha = as_vector(alpha)
    s = as_vector(s)
    degenerate = bool(np.any(s == 0.0))
    r = int(np.count_nonzero(s > 0.0))  # zero singular values sit at the tail

    weighted = (alpha[:r] * s[:r]) ** 2
    eps_k = _tail_distortions(weighted)
    feasible = np.nonzero(eps_k <= epsilon)[0]
    m_prime = int(feasible[0])

    alpha_prime = np.zeros(alpha.shape[0])
    gamma = 0.0
    if m_prime > 0:
        alpha_prime[: m_prime - 1] = alpha[: m_prime - 1]
        b = m_prime - 1
        gamma = math.sqrt(max(epsilon**2 - float(eps_k[m_prime]) ** 2, 0.0)) / s[b]
        shrunk = max(abs(alpha[b]) - gamma, 0.0)
        alpha_prime[b] = math.copysign(shrunk, alpha[b]) if shrunk > 0.0 else 0.0
    return alpha_prime, m_prime, gamma, degenerate


def obfuscate_budget(z, basis: SvdBasis, epsilon: float) -> ObfuscationResult:
    """Optimal coefficient trim under a distortion budget.

    Keeps the fewest coefficients whose removal cost fits the budget:
    m' is the smallest k with eps_k <= epsilon (eps_k the distortion of
    zeroing everything past k), and the boundary coefficient is shrunk by
    gamma = sqrt(epsilon^2 - eps_{m'}^2) / s_{m'} to spend the remainder.
    Zero-singular-value coefficients cost nothing and are zeroed up front.
    """
    alpha = decompose(z, basis)
    m_eff = min(basis.m, basis.n)
    alpha_prime, m_prime, gamma, degenerate = budget_trim(alpha, basis.s[:m_eff], epsilon)
    achieved = coefficient_distortion(alpha, alpha_prime, basis)
    return ObfuscationResult(
        m_prime=m_prime,
        alpha_prime=alpha_prime,
        gamma=gamma,
        achieved_distortion=achieved,
        mode=MODE_BUDGET,
        epsilon=float(epsilon),
        degenerate=degenerate,
    )


def obfuscate_topm(z, basis: SvdBasis, m_prime: int) -> ObfuscationResult:
    """Keep the top m' signal coefficients unchanged, zero the rest."""
    if not 0 <= m_prime <= basis.m:
        raise InvalidM(f"m_prime={m_prime} outside [0, {basis.m}]")
    alpha = decompose(z, basis)
    kept = min(m_prime, basis.n)
    alpha_prime = np.zeros(basis.n)
    alpha_prime[:kept] = alpha[:kept]
    achieved = coefficient_distortion(alpha, alpha_prime, basis)
    return ObfuscationResult(
        m_prime=m_prime,
        alpha_prime=alpha_prime,
        gamma=0.0,
        achieved_distortion=achieved,
        mode=MODE_TOPM,
    )


def obfuscate_free(z, basis: SvdBasis) -> ObfuscationResult:
    """Distortion-free obfuscation: drop exactly the null content."""
    res = obfuscate_topm(z, basis, min(basis.m, basis.n))
    return ObfuscationResult(
        m_prime=res.m_prime,
        alpha_prime=res.alpha_prime,
        gamma=0.0,
        achieved_distortion=res.achieved_distortion,
        mode=MODE_FREE,
    )


def calibrate(zs, basis: SvdBasis) -> CalibrationStats:
    """Fit per-coefficient variances from a stack of calibration vectors."""
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim != 2 or zs.shape[1] != basis.n:
        raise DimensionError(f"calibration stack must be (count, {basis.n})")
    if zs.shape[0] < 2:
        raise InsufficientBatch("calibration needs at least 2 examples")
    alphas = zs @ basis.v
    return CalibrationStats(sigma2=alphas.var(axis=0), count=zs.shape[0])


def entropy_proxy(stats: CalibrationStats, keep: int) -> float:
    """Gaussian entropy of the first `keep` coefficients: sum of .5*ln(2*pi*e*var)."""
    if not 0 <= keep <= stats.sigma2.shape[0]:
        raise InvalidM(f"keep={keep} outside [0, {stats.sigma2.shape[0]}]")
    if keep == 0:
        return 0.0
    var = np.maximum(stats.sigma2[:keep], SIGMA2_FLOOR)
    return float(np.sum(0.5 * np.log(2.0 * math.pi * math.e * var)))


@dataclass(frozen=True)
class SignalContentProfile:
    """Mean per-layer signal-content ratio and its running sum."""

    split_indices: list[int]
    mean_cs: np.ndarray
    cumulative: np.ndarray
    skipped: list[int] = field(default_factory=list)


def cumulative_signal_content(model, xs) -> SignalContentProfile:
    """Mean ln(||z_S||^2 / ||z||^2) per split layer, plus the running sum.

    Zero-norm activations are skipped (counted); all-null activations are
    floored at CS_FLOOR instead of -inf.
    """
    from . import nn  # local import: nn depends only on linalg

    xs = np.asarray(xs, dtype=np.float64)
    split_indices = list(range(1, model.n_splits + 1))
    mean_cs = np.zeros(len(split_indices))
    skipped = []
    _, bounds = model.forward(xs, train=False, collect_boundaries=True)
    for pos, si in enumerate(split_indices):
        basis = nn.split_basis(model, si)
        acts = bounds[si].reshape(xs.shape[0], -1)
        total = 0.0
        used = 0
        skip = 0
        for row in acts:
            nz = float(row @ row)
            if nz == 0.0:
                skip += 1
                continue
            zs_vec = signal_content(row, basis)
            ratio = min(float(zs_vec @ zs_vec) / nz, 1.0)
            total += max(math.log(ratio), CS_FLOOR) if ratio > 0.0 else CS_FLOOR
            used += 1
        mean_cs[pos] = total / used if used else 0.0
        skipped.append(skip)
    return SignalContentProfile(
        split_indices=split_indices,
        mean_cs=mean_cs,
        cumulative=np.cumsum(mean_cs),
        skipped=skipped,
    )
