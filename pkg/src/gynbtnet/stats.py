"""Group comparisons: one-way ANOVA, Tukey HSD and a paired sign-flip permutation test."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, gammaln, ndtr

from .rng import Xoshiro256

EXHAUSTIVE_MAX_N = 20
DEFAULT_N_PERM = 10_000


class StatsError(ValueError):
    pass


@dataclass
class SampleGroup:
    name: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size < 1:
            raise StatsError(f"group {self.name!r} is empty")
        if not np.all(np.isfinite(self.values)):
            raise StatsError(f"group {self.name!r} has non-finite values")


@dataclass
class StatTestResult:
    kind: str
    statistic: float
    df: tuple
    p_value: float
    exact_separation: bool = False
    pairs: list = field(default_factory=list)
    n_perm: int | None = None
    seed: int | None = None
    alternative: str | None = None
    exhaustive: bool | None = None

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _groups(groups):
    gs = [g if isinstance(g, SampleGroup) else SampleGroup(str(i), g) for i, g in enumerate(groups)]
    if len(gs) < 2:
        raise StatsError("need at least two groups")
    n_total = sum(g.values.size for g in gs)
    if n_total - len(gs) < 1:
        raise StatsError("need N - k >= 1")
    return gs, n_total


def _anova_parts(gs, n_total):
    k = len(gs)
    grand = sum(g.values.sum() for g in gs) / n_total
    means = [g.values.mean() for g in gs]
    ssb = sum(g.values.size * (m - grand) ** 2 for g, m in zip(gs, means))
    ssw = sum(float(np.sum((g.values - m) ** 2)) for g, m in zip(gs, means))
    return ssb / (k - 1), ssw / (n_total - k), means


def f_sf(F, d1, d2):
    """Upper tail of the F distribution, via the regularized incomplete beta."""
    if F <= 0:
        return 1.0
    if math.isinf(F):
        return 0.0
    return float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * F)))


def one_way_anova(groups) -> StatTestResult:
    gs, n_total = _groups(groups)
    k = len(gs)
    msb, msw, _ = _anova_parts(gs, n_total)
    df = (k - 1, n_total - k)
    # sums of squares of identical values can leave rounding residue; compare to the data scale
    scale = max(1.0, max(float(np.max(np.abs(g.values))) for g in gs)) ** 2
    if msw <= 1e-28 * scale:
        if msb <= 1e-28 * scale:
            return StatTestResult("anova", 0.0, df, 1.0)
        return StatTestResult("anova", math.inf, df, 0.0, exact_separation=True)
    F = float(msb / msw)
    return StatTestResult("anova", F, df, f_sf(F, *df))


# -- studentized range -------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


def _gl(f, a, b):
    half = 0.5 * (b - a)
    x = a + half * (_GL_X + 1.0)
    return half * np.tensordot(f(x), _GL_W, axes=([-1], [0]))


def adaptive_gauss_legendre(f, a, b, tol=1e-9, max_depth=40):
    """Adaptive 10-point Gauss–Legendre; ``f`` maps nodes ``(m,)`` to ``(..., m)``."""
    stack = [(a, b, _gl(f, a, b), tol, 0)]
    total = 0.0
    while stack:
        lo, hi, whole, t, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = _gl(f, lo, mid), _gl(f, mid, hi)
        if depth >= max_depth or np.max(np.abs(left + right - whole)) <= t:
            total = total + left + right
        else:
            stack.append((lo, mid, left, t / 2, depth + 1))
            stack.append((mid, hi, right, t / 2, depth + 1))
    return total


_Z_LO, _Z_HI = -8.5, 8.5
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def range_cdf_normal(w, k, tol=1e-10):
    """P(range of k iid standard normals <= w), vectorized over ``w``."""
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))

    def inner(z):
        phi = np.exp(-0.5 * z * z - _LOG_SQRT_2PI)
        band = ndtr(z)[None, :] - ndtr(z[None, :] - w[:, None])
        return k * phi[None, :] * np.clip(band, 0.0, 1.0) ** (k - 1)

    out = adaptive_gauss_legendre(inner, _Z_LO, _Z_HI, tol)
    return np.clip(out, 0.0, 1.0)


def studentized_range_cdf(q, k, df, tol=1e-4):
    """P(Q <= q) for the studentized range with ``k`` groups and ``df`` error degrees of freedom."""
    if q <= 0:
        return 0.0
    if k < 2 or df < 1:
        raise StatsError("need k >= 2 and df >= 1")
    nu = float(df)
    # density of s = sqrt(chi2_nu / nu)
    log_c = 0.5 * nu * math.log(nu) - gammaln(0.5 * nu) - (0.5 * nu - 1.0) * math.log(2.0)

    def outer(s):
        s = np.asarray(s)
        with np.errstate(divide="ignore"):
            logd = log_c + (nu - 1.0) * np.log(s) - 0.5 * nu * s * s
        dens = np.where(s > 0, np.exp(logd), 0.0)
        return dens * range_cdf_normal(q * s, k, tol * 1e-3)

    sd = 1.0 / math.sqrt(2.0 * nu)
    upper = 1.0 + 40.0 * sd + 6.0
    knots = sorted({0.0, upper, *[min(upper, max(0.0, 1.0 + m * sd)) for m in (-8, -4, -2, -1, 0, 1, 2, 4, 8)]})
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b > a:
            total += float(adaptive_gauss_legendre(outer, a, b, tol * 1e-2))
    return min(1.0, max(0.0, total))


def tukey_hsd(groups, tol=1e-4) -> StatTestResult:
    gs, n_total = _groups(groups)
    k = len(gs)
    msb, msw, means = _anova_parts(gs, n_total)
    df = n_total - k
    scale = max(1.0, max(float(np.max(np.abs(g.values))) for g in gs)) ** 2
    separated = msw <= 1e-28 * scale
    pairs = []
    for i, j in itertools.combinations(range(k), 2):
        diff = means[i] - means[j]
        if separated:
            q = 0.0 if diff == 0 else math.inf
            p = 1.0 if diff == 0 else 0.0
        else:
            se = math.sqrt(0.5 * msw * (1.0 / gs[i].values.size + 1.0 / gs[j].values.size))
            q = abs(diff) / se
            p = 1.0 - studentized_range_cdf(q, k, df, tol)
        pairs.append({"a": gs[i].name, "b": gs[j].name, "mean_diff": float(diff), "q": q,
                      "p_value": min(1.0, max(0.0, p))})
    p_min = min(pr["p_value"] for pr in pairs)
    q_max = max(pr["q"] for pr in pairs)
    return StatTestResult("tukey_hsd", q_max, (k, df), p_min, exact_separation=separated, pairs=pairs)


# -- permutation -------------------------------------------------------------


def _extreme(t_perm, t_obs, alternative, scale):
    # ties must count as extreme; a tolerance proportional to the data keeps that scale-free
    tol = 1e-10 * scale
    if alternative == "two_sided":
        return np.abs(t_perm) >= abs(t_obs) - tol
    if alternative == "greater":
        return t_perm >= t_obs - tol
    return t_perm <= t_obs + tol


def paired_permutation_test(a, b, n_perm=DEFAULT_N_PERM, seed=0, alternative="two_sided",
                            method="auto") -> StatTestResult:
    """Sign-flip test on ``mean(a - b)``; exhaustive for ``n <= 20`` unless ``method='sampled'``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise StatsError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 1:
        raise StatsError("need at least one pair")
    if alternative not in ("two_sided", "greater", "less"):
        raise StatsError(f"unknown alternative {alternative!r}")
    if method not in ("auto", "exhaustive", "sampled"):
        raise StatsError(f"unknown method {method!r}")
    d = a - b
    n = d.size
    t_obs = float(d.mean())
    scale = float(np.mean(np.abs(d)))
    exhaustive = method == "exhaustive" or (method == "auto" and n <= EXHAUSTIVE_MAX_N)
    if exhaustive:
        if n > 26:
            raise StatsError("exhaustive enumeration is limited to n <= 26")
        total = 1 << n
        count = 0
        bits = np.arange(n, dtype=np.int64)
        block = 1 << 16
        for start in range(0, total, block):
            codes = np.arange(start, min(total, start + block), dtype=np.int64)
            signs = 1.0 - 2.0 * ((codes[:, None] >> bits[None, :]) & 1)
            count += int(_extreme(signs @ d / n, t_obs, alternative, scale).sum())
        return StatTestResult("permutation", t_obs, (n,), count / total, n_perm=total, seed=None,
                              alternative=alternative, exhaustive=True)
    rng = Xoshiro256(seed)
    count = 0
    block = max(1, 1_000_000 // n)
    for start in range(0, n_perm, block):
        m = min(block, n_perm - start)
        signs = np.where(rng.random(m * n).reshape(m, n) < 0.5, -1.0, 1.0)
        count += int(_extreme(signs @ d / n, t_obs, alternative, scale).sum())
    return StatTestResult("permutation", t_obs, (n,), (1 + count) / (1 + n_perm), n_perm=n_perm,
                          seed=seed, alternative=alternative, exhaustive=False)


def stars(p) -> str:
    if p is None:
        return ""
    if p < 0.01:
        return "†"
    if p < 0.05:
        return "*"
    return ""
