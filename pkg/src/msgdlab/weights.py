"""Random weight vectors with minibatch-matching first and second moments.

All three schemes draw a length-``n`` vector ``W`` with

    E[w_i]        = 1/n,
    Var(w_i)      = (n - m) / (m n^2),
    Cov(w_i, w_j) = -(n - m) / (m n^2 (n - 1)),

which is exactly the moment structure of averaging a uniform size-``m``
minibatch.  The covariance is singular along the all-ones direction, so
``sum(w) = 1`` almost surely for every scheme.

Schemes
-------
minibatch
    ``w_i = 1/m`` on a uniform random m-subset, 0 elsewhere (the
    hypergeometric setup).
gaussian
    ``W = c * (X - mean(X) * 1) + 1/n`` with ``c = sqrt((n-m)/(m n (n-1)))``
    and iid mean-0 variance-1 base draws ``X`` (standard normal,
    Rademacher, or sqrt(3)*Unif(-1,1)).  Coordinates can go negative.
dirichlet
    ``W ~ Dir(alpha, ..., alpha)`` with ``alpha = (m-1)/(n-m)``;
    nonnegative coordinates summing to one exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .numerics import RngStream, parallel_map, sample_gamma

SCHEME_KINDS = ("minibatch", "gaussian", "dirichlet")
GAUSSIAN_BASES = ("normal", "rademacher", "uniform")


@dataclass(frozen=True)
class WeightScheme:
    """Parameters identifying one weight law: kind, (n, m), and, for the
    gaussian kind, the iid base distribution."""

    kind: str
    n: int
    m: int
    base: str = "normal"

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}, expected one of {SCHEME_KINDS}")
        if not 1 <= self.m <= self.n:
            raise ValueError(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if self.kind == "dirichlet" and not 2 <= self.m < self.n:
            raise ValueError(
                f"dirichlet weights need 2 <= m < n so (m-1)/(n-m) is positive and "
                f"finite, got m={self.m}, n={self.n}"
            )
        if self.kind == "gaussian" and self.n < 2:
            raise ValueError("gaussian-structured weights need n >= 2")
        if self.base not in GAUSSIAN_BASES:
            raise ValueError(f"unknown base {self.base!r}, expected one of {GAUSSIAN_BASES}")


@dataclass(frozen=True)
class WeightVector:
    """One realized weight draw together with the scheme that produced it."""

    values: np.ndarray
    scheme: WeightScheme


def sigma_entries(n: int, m: int) -> tuple[float, float]:
    """Diagonal and off-diagonal entries of the weight covariance matrix.

    Returns ``((n-m)/(m n^2), -(n-m)/(m n^2 (n-1)))``; the off-diagonal is
    defined as 0 for the degenerate case n = 1.
    """
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    diag = (n - m) / (m * n**2)
    offdiag = 0.0 if n == 1 else -(n - m) / (m * n**2 * (n - 1))
    return diag, offdiag


def dirichlet_alpha(n: int, m: int) -> float:
    """Per-coordinate Dirichlet concentration (m-1)/(n-m)."""
    if not 2 <= m < n:
        raise ValueError(f"need 2 <= m < n, got m={m}, n={n}")
    return (m - 1) / (n - m)


def _sample_subset(gen: np.random.Generator, n: int, m: int) -> np.ndarray:
    """Uniform random m-subset of range(n) by partial Fisher-Yates.

    Only the m swapped positions are materialized (a dict), so memory is
    O(m) even for n up to 10^6.
    """
    draws = gen.integers(low=np.arange(m), high=n)  # j_i uniform on [i, n)
    swapped: dict[int, int] = {}
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        j = int(draws[i])
        value_i = swapped.get(i, i)
        out[i] = swapped.get(j, j)
        swapped[j] = value_i
    return out


def sample_minibatch_weights(stream: RngStream, scheme: WeightScheme) -> WeightVector:
    """1/m on a uniform random m-subset of the n coordinates, 0 elsewhere."""
    if scheme.kind != "minibatch":
        raise ValueError(f"scheme kind must be 'minibatch', got {scheme.kind!r}")
    values = np.zeros(scheme.n)
    chosen = _sample_subset(stream.generator, scheme.n, scheme.m)
    values[chosen] = 1.0 / scheme.m
    return WeightVector(values, scheme)


def sample_gaussian_structured_weights(stream: RngStream, scheme: WeightScheme) -> WeightVector:
    """Centered-and-scaled iid base draws shifted to mean 1/n.

    Computes ``c * (X - mean(X)) + 1/n`` in O(n) without forming the
    rank-(n-1) projection matrix.  The centering removes the all-ones
    component, so the coordinates sum to 1 up to accumulation roundoff.
    """
    if scheme.kind != "gaussian":
        raise ValueError(f"scheme kind must be 'gaussian', got {scheme.kind!r}")
    n, m = scheme.n, scheme.m
    gen = stream.generator
    if scheme.base == "normal":
        x = gen.standard_normal(n)
    elif scheme.base == "rademacher":
        x = gen.integers(0, 2, size=n).astype(float) * 2.0 - 1.0
    else:  # uniform, scaled to unit variance
        x = np.sqrt(3.0) * gen.uniform(-1.0, 1.0, size=n)
    scale = np.sqrt((n - m) / (m * n * (n - 1)))
    values = scale * (x - x.mean()) + 1.0 / n
    return WeightVector(values, scheme)


def sample_dirichlet_weights(stream: RngStream, scheme: WeightScheme) -> WeightVector:
    """Symmetric Dirichlet draw via normalized Gamma((m-1)/(n-m)) variates.

    If every gamma variate underflows to zero (possible in principle at
    tiny concentrations), the draw is retried on fresh derived substreams,
    capped at 10 attempts.  Retries share the substream address across
    calls, which is acceptable because a single underflow already has
    probability far below 1e-60 at the shapes this package uses.
    """
    if scheme.kind != "dirichlet":
        raise ValueError(f"scheme kind must be 'dirichlet', got {scheme.kind!r}")
    alpha = dirichlet_alpha(scheme.n, scheme.m)
    raw = sample_gamma(stream, alpha, size=scheme.n)
    total = raw.sum()
    attempt = 0
    while not total > 0.0:
        attempt += 1
        if attempt > 10:
            raise ArithmeticError(
                f"all gamma draws underflowed to zero in {attempt - 1} retries "
                f"(n={scheme.n}, alpha={alpha})"
            )
        retry = stream.child("dirichlet_retry", attempt)
        raw = sample_gamma(retry, alpha, size=scheme.n)
        total = raw.sum()
    return WeightVector(raw / total, scheme)


_SAMPLERS = {
    "minibatch": sample_minibatch_weights,
    "gaussian": sample_gaussian_structured_weights,
    "dirichlet": sample_dirichlet_weights,
}


def sample_weights(stream: RngStream, scheme: WeightScheme) -> WeightVector:
    """Draw one weight vector from whichever scheme is configured."""
    return _SAMPLERS[scheme.kind](stream, scheme)


@dataclass
class MomentReport:
    """Monte Carlo moment estimates for a weight scheme.

    ``coord_mean`` has one entry per coordinate; the variance/covariance
    estimates track the first coordinate and the (0, 1) pair, which
    suffices because the coordinates are exchangeable (itself checked via
    ``coord_mean``).  ``m_sum_sq`` estimates E[m * sum(w^2)], which equals
    1 exactly for every scheme here; ``m32_sum_cube`` estimates
    E[m^(3/2) * sum(|w|^3)], which vanishes as n grows.
    """

    scheme: WeightScheme
    reps: int
    coord_mean: np.ndarray
    coord_mean_se: np.ndarray
    var_first: float
    var_first_se: float
    cov_pair: float
    cov_pair_se: float
    pooled_offdiag: float
    pooled_offdiag_se: float
    m_sum_sq_mean: float
    m_sum_sq_se: float
    m32_sum_cube_mean: float
    m32_sum_cube_se: float
    first_coords: np.ndarray = field(repr=False)
    second_coords: np.ndarray = field(repr=False)


def _variance_se(values: np.ndarray) -> float:
    """Large-sample standard error of the sample variance: ((mu4 - s^4)/N)^1/2."""
    centered = values - values.mean()
    n = values.size
    mu4 = np.mean(centered**4)
    s2 = np.mean(centered**2)
    return float(np.sqrt(max(mu4 - s2**2, 0.0) / n))


def _covariance_se(x: np.ndarray, y: np.ndarray) -> float:
    cx = x - x.mean()
    cy = y - y.mean()
    n = x.size
    cov = np.mean(cx * cy)
    return float(np.sqrt(max(np.mean((cx * cy) ** 2) - cov**2, 0.0) / n))


def empirical_weight_moments(
    scheme: WeightScheme, stream: RngStream, reps: int, threads: int = 1
) -> MomentReport:
    """Estimate the scheme's moment targets from `reps` independent draws.

    Draw r consumes the derived stream ``stream.child("rep", r)``, so the
    report does not depend on execution order or thread count.
    """
    if reps < 100:
        raise ValueError(f"reps must be >= 100, got {reps}")
    n, m = scheme.n, scheme.m

    def one_draw(r: int):
        w = sample_weights(stream.child("rep", r), scheme).values
        return (
            w,
            w[0],
            w[1] if n > 1 else w[0],
            m * np.sum(w * w),
            m**1.5 * np.sum(np.abs(w) ** 3),
        )

    sum_w = np.zeros(n)
    sum_w2 = np.zeros(n)
    first = np.empty(reps)
    second = np.empty(reps)
    m_sum_sq = np.empty(reps)
    m32_cube = np.empty(reps)
    chunk = 256  # bounds live weight vectors; accumulation order stays fixed
    for start in range(0, reps, chunk):
        stop = min(start + chunk, reps)
        draws = parallel_map(lambda i: one_draw(start + i), stop - start, threads)
        for offset, (w, w0, w1, msum, mcube) in enumerate(draws):
            r = start + offset
            sum_w += w
            sum_w2 += w * w
            first[r] = w0
            second[r] = w1
            m_sum_sq[r] = msum
            m32_cube[r] = mcube
    coord_mean = sum_w / reps
    coord_var = np.maximum(sum_w2 / reps - coord_mean**2, 0.0)
    coord_mean_se = np.sqrt(coord_var / reps)
    # Pooling every (i, j) pair: since sum(w) = 1 a.s., per draw
    # sum_{i != j} (w_i - 1/n)(w_j - 1/n) = -sum_i (w_i - 1/n)^2, and
    # sum_i (w_i - 1/n)^2 = sum w^2 - 1/n, so the pooled off-diagonal
    # estimate falls out of the m*sum(w^2) record with n^2 / 2 the noise
    # of the single-pair estimator.
    if n > 1:
        pooled_draws = -(m_sum_sq / m - 1.0 / n) / (n * (n - 1))
        pooled_offdiag = float(pooled_draws.mean())
        pooled_offdiag_se = float(pooled_draws.std(ddof=1) / np.sqrt(reps))
    else:
        pooled_offdiag, pooled_offdiag_se = 0.0, 0.0
    return MomentReport(
        scheme=scheme,
        reps=reps,
        coord_mean=coord_mean,
        coord_mean_se=coord_mean_se,
        var_first=float(np.var(first, ddof=1)),
        var_first_se=_variance_se(first),
        cov_pair=float(np.cov(first, second, ddof=1)[0, 1]),
        cov_pair_se=_covariance_se(first, second),
        pooled_offdiag=pooled_offdiag,
        pooled_offdiag_se=pooled_offdiag_se,
        m_sum_sq_mean=float(m_sum_sq.mean()),
        m_sum_sq_se=float(m_sum_sq.std(ddof=1) / np.sqrt(reps)),
        m32_sum_cube_mean=float(m32_cube.mean()),
        m32_sum_cube_se=float(m32_cube.std(ddof=1) / np.sqrt(reps)),
        first_coords=first,
        second_coords=second,
    )


def dirichlet_mixed_moment(alpha, beta) -> float:
    """Exact Dirichlet mixed moment E[prod_i X_i^beta_i].

    For ``X ~ Dir(alpha)`` the moment equals

        Gamma(sum alpha) / Gamma(sum(alpha + beta))
            * prod_i Gamma(alpha_i + beta_i) / Gamma(alpha_i),

    evaluated in log space so huge parameter vectors (n ~ 1e4) stay exact
    to double precision.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if alpha.shape != beta.shape:
        raise ValueError(f"alpha and beta lengths differ: {alpha.shape} vs {beta.shape}")
    if not np.all(alpha > 0):
        raise ValueError("all alpha entries must be positive")
    if not np.all(beta >= 0):
        raise ValueError("all beta entries must be nonnegative")
    active = beta > 0  # terms with beta_i = 0 cancel exactly
    log_value = (
        gammaln(alpha.sum())
        - gammaln(alpha.sum() + beta.sum())
        + np.sum(gammaln(alpha[active] + beta[active]) - gammaln(alpha[active]))
    )
    return float(np.exp(log_value))
