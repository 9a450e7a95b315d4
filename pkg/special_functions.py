"""
Special functions used by the distribution engine.

Log-gamma (Lanczos), regularized incomplete gamma (series / continued
fraction), regularized incomplete beta (continued fraction), error function
and the standard normal CDF / quantile. Every function accepts scalars or
numpy arrays and broadcasts its arguments; scalar input gives a float back.
"""

import math
from typing import Tuple

import numpy as np

EPS = 1.0e-15
FPMIN = 1.0e-300
MAX_ITER = 2000

LANCZOS_G = 7.0
LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SQRT2 = math.sqrt(2.0)


def _prepare(*args) -> Tuple[Tuple[int, ...], Tuple[np.ndarray, ...]]:
    arrays = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args])
    shape = arrays[0].shape
    return shape, tuple(np.array(a, dtype=float).reshape(-1) for a in arrays)


def _finish(out: np.ndarray, shape: Tuple[int, ...]):
    if shape == ():
        return float(out[0])
    return out.reshape(shape)


def _lanczos(x: np.ndarray) -> np.ndarray:
    x = x - 1.0
    acc = np.full_like(x, LANCZOS_COEF[0])
    for i, c in enumerate(LANCZOS_COEF[1:], start=1):
        acc = acc + c / (x + i)
    t = x + LANCZOS_G + 0.5
    return HALF_LOG_2PI + (x + 0.5) * np.log(t) - t + np.log(acc)


def log_gamma(x):
    """log|Gamma(x)| with the reflection formula below 0.5."""
    shape, (x,) = _prepare(x)
    out = np.empty_like(x)
    small = x < 0.5
    if np.any(small):
        xs = x[small]
        with np.errstate(divide='ignore'):
            out[small] = np.log(np.pi / np.abs(np.sin(np.pi * xs))) - _lanczos(1.0 - xs)
    if np.any(~small):
        out[~small] = _lanczos(x[~small])
    return _finish(out, shape)


def log_beta(a, b):
    shape, (a, b) = _prepare(a, b)
    out = np.asarray(log_gamma(a)) + np.asarray(log_gamma(b)) - np.asarray(log_gamma(a + b))
    return _finish(out, shape)


def _gamma_series(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Lower regularized gamma P(a, x) by its power series (x < a + 1)."""
    ap = a.copy()
    term = 1.0 / a
    total = term.copy()
    for _ in range(MAX_ITER):
        ap = ap + 1.0
        term = term * x / ap
        total = total + term
        if np.all(np.abs(term) < np.abs(total) * EPS):
            break
    return total * np.exp(-x + a * np.log(x) - log_gamma(a))


def _gamma_cont_frac(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Upper regularized gamma Q(a, x) by modified Lentz (x >= a + 1)."""
    b = x + 1.0 - a
    c = np.full_like(x, 1.0 / FPMIN)
    d = 1.0 / b
    h = d.copy()
    for i in range(1, MAX_ITER + 1):
        an = -i * (i - a)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < FPMIN, FPMIN, d)
        c = b + an / c
        c = np.where(np.abs(c) < FPMIN, FPMIN, c)
        d = 1.0 / d
        delta = d * c
        h = h * delta
        if np.all(np.abs(delta - 1.0) < EPS):
            break
    return np.exp(-x + a * np.log(x) - log_gamma(a)) * h


def _gammainc_pair(a, x):
    shape, (a, x) = _prepare(a, x)
    lower = np.zeros_like(x)
    upper = np.ones_like(x)
    pos = x > 0
    series = pos & (x < a + 1.0)
    frac = pos & ~series & np.isfinite(x)
    if np.any(series):
        p = _gamma_series(a[series], x[series])
        lower[series] = p
        upper[series] = 1.0 - p
    if np.any(frac):
        q = _gamma_cont_frac(a[frac], x[frac])
        upper[frac] = q
        lower[frac] = 1.0 - q
    inf = np.isposinf(x)
    lower[inf] = 1.0
    upper[inf] = 0.0
    return shape, lower, upper


def gammainc_lower(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    shape, lower, _ = _gammainc_pair(a, x)
    return _finish(lower, shape)


def gammainc_upper(a, x):
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x)."""
    shape, _, upper = _gammainc_pair(a, x)
    return _finish(upper, shape)


def _betacf(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < FPMIN, FPMIN, d)
    d = 1.0 / d
    h = d.copy()
    for m in range(1, MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < FPMIN, FPMIN, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < FPMIN, FPMIN, c)
        d = 1.0 / d
        h = h * d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < FPMIN, FPMIN, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < FPMIN, FPMIN, c)
        d = 1.0 / d
        delta = d * c
        h = h * delta
        if np.all(np.abs(delta - 1.0) < EPS):
            break
    return h


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    shape, (a, b, x) = _prepare(a, b, x)
    out = np.where(x >= 1.0, 1.0, 0.0)
    inside = (x > 0.0) & (x < 1.0)
    if np.any(inside):
        ai, bi, xi = a[inside], b[inside], x[inside]
        log_front = (log_gamma(ai + bi) - log_gamma(ai) - log_gamma(bi)
                     + ai * np.log(xi) + bi * np.log1p(-xi))
        front = np.exp(log_front)
        direct = xi < (ai + 1.0) / (ai + bi + 2.0)
        res = np.empty_like(xi)
        if np.any(direct):
            res[direct] = front[direct] * _betacf(ai[direct], bi[direct], xi[direct]) / ai[direct]
        swap = ~direct
        if np.any(swap):
            res[swap] = 1.0 - front[swap] * _betacf(bi[swap], ai[swap], 1.0 - xi[swap]) / bi[swap]
        out[inside] = res
    return _finish(out, shape)


def erf(x):
    shape, (x,) = _prepare(x)
    out = np.sign(x) * np.asarray(gammainc_lower(0.5, x * x))
    return _finish(out, shape)


def erfc(x):
    shape, (x,) = _prepare(x)
    sq = x * x
    out = np.where(x >= 0.0, np.asarray(gammainc_upper(0.5, sq)), 1.0 + np.asarray(gammainc_lower(0.5, sq)))
    return _finish(out, shape)


def norm_cdf(z):
    shape, (z,) = _prepare(z)
    out = 0.5 * np.asarray(erfc(-z / SQRT2))
    return _finish(out, shape)


# Acklam's rational approximation, refined by one Halley step
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
P_LOW = 0.02425


def _poly(coef, x):
    acc = np.zeros_like(x)
    for c in coef:
        acc = acc * x + c
    return acc


def norm_ppf(p):
    """Standard normal quantile for p in (0, 1)."""
    shape, (p,) = _prepare(p)
    x = np.empty_like(p)
    low = p < P_LOW
    high = p > 1.0 - P_LOW
    mid = ~(low | high)
    if np.any(low):
        q = np.sqrt(-2.0 * np.log(p[low]))
        x[low] = _poly(_C, q) / (_poly(_D, q) * q + 1.0)
    if np.any(high):
        q = np.sqrt(-2.0 * np.log1p(-p[high]))
        x[high] = -_poly(_C, q) / (_poly(_D, q) * q + 1.0)
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        x[mid] = _poly(_A, r) * q / (_poly(_B, r) * r + 1.0)
    err = np.asarray(norm_cdf(x)) - p
    u = err * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    x = np.where(p <= 0.0, -np.inf, np.where(p >= 1.0, np.inf, x))
    return _finish(x, shape)
