"""
Exact and estimated information measures (all in nats), covariance
utilities, and the supporting information lemmas as checkable computations.

Every quantity here follows the 0 * ln 0 = 0 convention via
scipy.special.rel_entr.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky
from scipy.special import logsumexp, rel_entr
from sklearn.metrics import mutual_info_score

from .errors import (
    AbsoluteContinuityViolation,
    DimensionMismatch,
    InsufficientSamples,
    InvalidDistribution,
    SingularCovariance,
)
from .seeding import SeedLike, as_rng

MASS_TOL = 1e-12
SYMMETRY_TOL = 1e-10
JITTER = 1e-9
DEFAULT_BINS = 16
LN2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if p.size < 1:
            raise InvalidDistribution("support size must be >= 1")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InvalidDistribution("probabilities must be finite and >= 0")
        total = float(p.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise InvalidDistribution(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_weights(cls, weights: Sequence[float]) -> "DiscreteDistribution":
        w = np.asarray(weights, dtype=float).reshape(-1)
        total = float(w.sum())
        if total <= 0 or np.any(w < 0):
            raise InvalidDistribution("weights must be >= 0 with a positive total")
        return cls(w / total)

    @classmethod
    def uniform(cls, k: int) -> "DiscreteDistribution":
        return cls(np.full(int(k), 1.0 / int(k)))

    @property
    def size(self) -> int:
        return int(self.probs.size)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 0)


@dataclass(frozen=True, eq=False)
class JointTable:
    """Joint mass over X (rows) and Y (columns)."""

    mass: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.mass, dtype=float)
        if m.ndim != 2 or m.size == 0:
            raise InvalidDistribution("joint table must be a non-empty matrix")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise InvalidDistribution("joint entries must be finite and >= 0")
        total = float(m.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise InvalidDistribution(f"joint mass sums to {total!r}, not 1")
        object.__setattr__(self, "mass", m)

    def row_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    def col_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=0)


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    matrix: np.ndarray
    sample_count: int = 0

    def __post_init__(self) -> None:
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"covariance must be square, got {a.shape}")
        if not np.allclose(a, a.T, atol=SYMMETRY_TOL, rtol=0.0):
            raise DimensionMismatch("covariance must be symmetric")
        object.__setattr__(self, "matrix", a)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])


def _as_dist(p) -> DiscreteDistribution:
    return p if isinstance(p, DiscreteDistribution) else DiscreteDistribution(p)


def kl_discrete(p, q) -> float:
    p, q = _as_dist(p), _as_dist(q)
    if p.size != q.size:
        raise DimensionMismatch(f"support sizes differ: {p.size} vs {q.size}")
    bad = (p.probs > 0) & (q.probs == 0)
    if np.any(bad):
        raise AbsoluteContinuityViolation(
            f"p puts mass on indices {np.flatnonzero(bad).tolist()} where q is zero"
        )
    return max(float(np.sum(rel_entr(p.probs, q.probs))), 0.0)


def entropy(p) -> float:
    probs = _as_dist(p).probs
    nz = probs[probs > 0]
    return float(-np.sum(nz * np.log(nz)))


def mutual_information(j: JointTable) -> float:
    product = np.outer(j.row_marginal(), j.col_marginal())
    return max(float(np.sum(rel_entr(j.mass, product))), 0.0)


def conditional_mutual_information(family: Sequence[Tuple[float, JointTable]]) -> float:
    weights = DiscreteDistribution([w for w, _ in family])
    return float(
        sum(w * mutual_information(t) for w, (_, t) in zip(weights.probs, family) if w > 0)
    )


def dv_gap(p, q, f: Sequence[float]) -> float:
    """Donsker-Varadhan witness value E_p[f] - ln E_q[exp f]; never exceeds KL(p||q)."""
    p, q = _as_dist(p), _as_dist(q)
    f = np.asarray(f, dtype=float).reshape(-1)
    if not (p.size == q.size == f.size):
        raise DimensionMismatch("p, q and f must share one support")
    if np.any((p.probs > 0) & (q.probs == 0)):
        raise AbsoluteContinuityViolation("p is not absolutely continuous w.r.t. q")
    on_p = p.probs > 0
    on_q = q.probs > 0
    expected = float(np.sum(p.probs[on_p] * f[on_p]))
    return expected - float(logsumexp(f[on_q], b=q.probs[on_q]))


def _cholesky_logdet(matrix: np.ndarray) -> float:
    try:
        factor = cholesky(matrix, lower=True)
    except LinAlgError:
        jittered = matrix + JITTER * np.eye(matrix.shape[0])
        try:
            factor = cholesky(jittered, lower=True)
        except LinAlgError as e:
            raise SingularCovariance(f"Cholesky failed even with jitter {JITTER}") from e
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def gaussian_entropy(cov: CovarianceEstimate) -> float:
    d = cov.dim
    return 0.5 * d * math.log(2.0 * math.pi * math.e) + 0.5 * _cholesky_logdet(cov.matrix)


def uniform_entropy(sigma: float) -> float:
    """Differential entropy of a zero-mean uniform scalar with standard deviation sigma."""
    return math.log(2.0 * math.sqrt(3.0) * sigma)


def log_det_ratio_term(scale: float, cov: CovarianceEstimate) -> float:
    if scale < 0:
        raise ValueError("scale must be >= 0")
    if scale == 0 or not np.any(cov.matrix):
        return 0.0
    m = scale * cov.matrix + np.eye(cov.dim)
    return max(_cholesky_logdet(0.5 * (m + m.T)), 0.0)


def sample_covariance(samples: np.ndarray) -> CovarianceEstimate:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    k = x.shape[0]
    if k < 2:
        raise InsufficientSamples(f"need at least 2 rows, got {k}")
    c = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return CovarianceEstimate(0.5 * (c + c.T), sample_count=k)


def binned_mi_binary(pairs: Sequence[Tuple[int, float]], bins: int = DEFAULT_BINS) -> float:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(pairs) <= 1:
        return 0.0
    arr = np.asarray(pairs, dtype=float)
    return binned_mi_arrays(arr[:, 0], arr[:, 1], bins)


def binned_mi_arrays(signs: np.ndarray, values: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Array form of binned_mi_binary: equal-width bins over the observed range."""
    signs = np.asarray(signs)
    values = np.asarray(values, dtype=float)
    if values.size <= 1 or np.ptp(values) == 0:
        return 0.0
    edges = np.histogram_bin_edges(values, bins=bins)
    labels = np.digitize(values, edges[1:-1])
    mi = float(mutual_info_score(signs.astype(int), labels))
    return min(max(mi, 0.0), LN2)


def plugin_mi_labels(xs: Sequence, ys: Sequence) -> float:
    """Plug-in MI between two columns of hashable labels."""
    x_codes = _encode_labels(xs)
    y_codes = _encode_labels(ys)
    if len(x_codes) <= 1:
        return 0.0
    return max(float(mutual_info_score(x_codes, y_codes)), 0.0)


def _encode_labels(values: Sequence) -> np.ndarray:
    codes: Dict[object, int] = {}
    return np.array([codes.setdefault(v, len(codes)) for v in values], dtype=int)


# ---------------------------------------------------------------------------
# Random instance helpers and the lemma suite
# ---------------------------------------------------------------------------

def random_distribution(rng: np.random.Generator, k: int, concentration: float = 1.0) -> np.ndarray:
    p = rng.dirichlet(np.full(k, concentration))
    # Dirichlet draws can underflow to exact zeros at small concentration.
    p = np.maximum(p, 1e-15)
    return p / p.sum()


def random_stochastic_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return np.stack([random_distribution(rng, cols) for _ in range(rows)])


def kl_decomposition_residual(joint: JointTable, qx: np.ndarray) -> float:
    """|D(P_XY || Q_X x P_Y) - I_P(X;Y) - D(P_X || Q_X)|."""
    px, py = joint.row_marginal(), joint.col_marginal()
    lhs = float(np.sum(rel_entr(joint.mass, np.outer(qx, py))))
    return abs(lhs - mutual_information(joint) - kl_discrete(DiscreteDistribution.from_weights(px), qx))


@dataclass
class LemmaCheck:
    name: str
    cases: int
    worst_margin: float
    tolerance: float
    failures: int = 0

    @property
    def holds(self) -> bool:
        return self.failures == 0


@dataclass
class LemmaSuite:
    checks: List[LemmaCheck] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return all(c.holds for c in self.checks)

    def worst_margin(self) -> float:
        return max(c.worst_margin - c.tolerance for c in self.checks)


def _record(check: LemmaCheck, margin: float) -> None:
    check.worst_margin = max(check.worst_margin, margin)
    if margin > check.tolerance:
        check.failures += 1


def lemma_suite(cases: int = 200, seed: SeedLike = 0, max_size: int = 5) -> LemmaSuite:
    """Run the KL identity, DV, data-processing and Gaussian-dominance checks.

    A margin is lhs - rhs of the inequality (or the absolute residual of an
    identity); a case fails when its margin exceeds the tolerance.
    """
    rng = as_rng(seed)
    kl_id = LemmaCheck("kl_decomposition", cases, -math.inf, 1e-10)
    dv_dom = LemmaCheck("dv_dominance", cases, -math.inf, 1e-12)
    dv_eq = LemmaCheck("dv_equality", cases, -math.inf, 1e-9)
    dpi = LemmaCheck("data_processing", cases, -math.inf, 1e-10)
    gauss = LemmaCheck("gaussian_dominance", min(cases, 50), -math.inf, 0.0)

    for _ in range(cases):
        kx, ky, kz = rng.integers(2, max_size + 1, size=3)

        joint = JointTable(random_distribution(rng, kx * ky).reshape(kx, ky))
        _record(kl_id, kl_decomposition_residual(joint, random_distribution(rng, kx)))

        p, q = random_distribution(rng, kx), random_distribution(rng, kx)
        kl = kl_discrete(p, q)
        _record(dv_dom, dv_gap(p, q, rng.normal(scale=2.0, size=kx)) - kl)
        _record(dv_eq, abs(dv_gap(p, q, np.log(p / q)) - kl))

        px = random_distribution(rng, kx)
        kxy = random_stochastic_matrix(rng, kx, ky)
        kyz = random_stochastic_matrix(rng, ky, kz)
        i_xy, i_xz, i_yz = chain_informations(px, kxy, kyz)
        _record(dpi, max(i_xz - i_xy, i_xz - i_yz))

    for _ in range(gauss.cases):
        sigma = float(rng.uniform(0.05, 10.0))
        cov = CovarianceEstimate(np.array([[sigma ** 2]]))
        _record(gauss, uniform_entropy(sigma) - gaussian_entropy(cov))

    return LemmaSuite([kl_id, dv_dom, dv_eq, dpi, gauss])


def chain_informations(px: np.ndarray, kxy: np.ndarray, kyz: np.ndarray) -> Tuple[float, float, float]:
    """I(X;Y), I(X;Z), I(Y;Z) for the Markov chain X -> Y -> Z."""
    xy = px[:, None] * kxy
    xz = xy @ kyz
    yz = xy.sum(axis=0)[:, None] * kyz
    return (
        mutual_information(JointTable(xy / xy.sum())),
        mutual_information(JointTable(xz / xz.sum())),
        mutual_information(JointTable(yz / yz.sum())),
    )


def standard_error(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    return float(np.std(v, ddof=1) / math.sqrt(v.size))


def mean_and_se(values: Sequence[float]) -> Tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), standard_error(v)
