"""
Distribution Engine
Density / mass, CDF, quantile and inverse-transform sampling for the
30 benchmark families. Family and parameter names follow scipy.stats naming.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from special_functions import (
    betainc, gammainc_lower, gammainc_upper, log_beta, log_gamma, norm_cdf, norm_ppf,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

DISCRETE = 'discrete-integer'
CONTINUOUS = 'continuous'

PPF_TOLERANCE = 1.0e-12
PPF_MAX_ITER = 300
SCAN_LIMIT = 10_000_000
SKELLAM_TAIL = 1.0e-16


class ParameterDomainError(ValueError):
    """Raised when a family or parameter value lies outside its domain."""

    def __init__(self, message: str = "Invalid distribution parameters"):
        super().__init__(message)


@dataclass(frozen=True)
class SupportInfo:
    kind: str
    lower: float
    upper: float

    @property
    def is_discrete(self) -> bool:
        return self.kind == DISCRETE

    def contains(self, x: ArrayLike) -> ArrayLike:
        return (np.asarray(x) >= self.lower) & (np.asarray(x) <= self.upper)


@dataclass(frozen=True)
class DistributionSpec:
    """A target law: family name plus parameters in canonical order.

    ``params`` may be given as a mapping; it is stored as a tuple of
    (name, value) pairs so that specs are hashable.
    """
    family: str
    params: Tuple[Tuple[str, float], ...]

    def __init__(self, family: str, params: Union[Mapping[str, float], Iterable[Tuple[str, float]]] = ()):
        fam = FAMILIES.get(family)
        if fam is None:
            raise ParameterDomainError(f"Unknown family '{family}'")
        given = dict(params)
        unknown = set(given) - set(fam.param_names)
        missing = [n for n in fam.param_names if n not in given]
        if unknown or missing:
            raise ParameterDomainError(
                f"{family}: expected parameters {list(fam.param_names)}, "
                f"missing {missing}, unknown {sorted(unknown)}")
        values = []
        for name in fam.param_names:
            try:
                value = float(given[name])
            except (TypeError, ValueError):
                raise ParameterDomainError(f"{family}: parameter {name}={given[name]!r} is not numeric")
            if not math.isfinite(value):
                raise ParameterDomainError(f"{family}: parameter {name} must be finite")
            values.append((name, value))
        object.__setattr__(self, 'family', family)
        object.__setattr__(self, 'params', tuple(values))
        fam.validate(*self.values)

    @classmethod
    def create(cls, family: str, **params: float) -> 'DistributionSpec':
        return cls(family, params)

    @property
    def values(self) -> Tuple[float, ...]:
        return tuple(v for _, v in self.params)

    def param(self, name: str) -> float:
        for key, value in self.params:
            if key == name:
                return value
        raise KeyError(name)

    def as_dict(self) -> Dict[str, float]:
        return dict(self.params)

    def to_dict(self) -> Dict:
        return {'family': self.family, 'params': self.as_dict()}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'DistributionSpec':
        return cls(data['family'], data.get('params', {}))

    def __repr__(self) -> str:
        inner = ', '.join(f"{k}={v:g}" for k, v in self.params)
        return f"{self.family}({inner})"


def _require(condition: bool, message: str):
    if not condition:
        raise ParameterDomainError(message)


def _is_int(value: float) -> bool:
    return float(value).is_integer()


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.log(x)


# ---------------------------------------------------------------------------
# Family definitions
# ---------------------------------------------------------------------------

class Family:
    """Base family: subclasses provide pdf/cdf and optionally a closed-form ppf."""
    name = ''
    param_names: Tuple[str, ...] = ()
    discrete = False

    def validate(self, *p):
        pass

    def bounds(self, *p) -> Tuple[float, float]:
        return -math.inf, math.inf

    def pdf(self, x: np.ndarray, *p) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, x: np.ndarray, *p) -> np.ndarray:
        raise NotImplementedError

    def ppf(self, u: np.ndarray, *p) -> Optional[np.ndarray]:
        return None

    def hint(self, *p) -> Tuple[float, float]:
        """Rough (center, spread) used to bracket numerical inversion."""
        return 0.0, 1.0


class DiscreteFamily(Family):
    """Integer-supported family; pdf is the pmf on integers and zero elsewhere."""
    discrete = True

    def pmf(self, k: np.ndarray, *p) -> np.ndarray:
        raise NotImplementedError

    def pdf(self, x, *p):
        lo, hi = self.bounds(*p)
        on = (np.floor(x) == x) & (x >= lo) & (x <= hi)
        out = np.zeros_like(x, dtype=float)
        if np.any(on):
            out[on] = self.pmf(x[on], *p)
        return out

    def scan_start(self, *p) -> float:
        return self.bounds(*p)[0]


class TableFamily(DiscreteFamily):
    """Discrete family with a bounded support held as an exact pmf table."""

    def table(self, *p) -> Tuple[int, np.ndarray, np.ndarray]:
        lo, pmf = self._table(*p)
        cum = np.minimum(np.cumsum(pmf), 1.0)
        return lo, pmf, cum

    def _table(self, *p) -> Tuple[int, np.ndarray]:
        raise NotImplementedError

    def pmf(self, k, *p):
        lo, pmf, _ = self.table(*p)
        idx = k.astype(np.int64) - lo
        ok = (idx >= 0) & (idx < len(pmf))
        return np.where(ok, pmf[np.clip(idx, 0, len(pmf) - 1)], 0.0)

    def cdf(self, x, *p):
        lo, _, cum = self.table(*p)
        k = np.floor(x)
        idx = np.clip(k - lo, -1, len(cum)).astype(np.int64)
        out = np.where(idx < 0, 0.0, cum[np.clip(idx, 0, len(cum) - 1)])
        return np.where(idx >= len(cum) - 1, 1.0, out)

    def ppf(self, u, *p):
        lo, _, cum = self.table(*p)
        idx = np.searchsorted(cum, u, side='left')
        return (lo + np.minimum(idx, len(cum) - 1)).astype(float)


class Uniform(Family):
    """Uniform on [a, a + w]."""
    name, param_names = 'uniform', ('a', 'w')

    def validate(self, a, w):
        _require(w > 0, "uniform: w must be > 0")

    def bounds(self, a, w):
        return a, a + w

    def pdf(self, x, a, w):
        return np.where((x >= a) & (x <= a + w), 1.0 / w, 0.0)

    def cdf(self, x, a, w):
        return np.clip((x - a) / w, 0.0, 1.0)

    def ppf(self, u, a, w):
        return a + u * w


class Norm(Family):
    """Gaussian with mean mu and standard deviation sigma."""
    name, param_names = 'norm', ('mu', 'sigma')

    def validate(self, mu, sigma):
        _require(sigma > 0, "norm: sigma must be > 0")

    def pdf(self, x, mu, sigma):
        z = (x - mu) / sigma
        return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))

    def cdf(self, x, mu, sigma):
        return norm_cdf((x - mu) / sigma)

    def ppf(self, u, mu, sigma):
        return mu + sigma * norm_ppf(u)


class Bernoulli(TableFamily):
    """0 or 1 with P(1) = p."""
    name, param_names = 'bernoulli', ('p',)

    def validate(self, p):
        _require(0.0 < p < 1.0, "bernoulli: p must lie in (0, 1)")

    def bounds(self, p):
        return 0.0, 1.0

    def _table(self, p):
        return 0, np.array([1.0 - p, p])


class Beta(Family):
    """Beta(alpha, beta) on [0, 1]."""
    name, param_names = 'beta', ('alpha', 'beta')

    def validate(self, a, b):
        _require(a > 0 and b > 0, "beta: alpha and beta must be > 0")

    def bounds(self, a, b):
        return 0.0, 1.0

    def pdf(self, x, a, b):
        inside = (x >= 0) & (x <= 1)
        with np.errstate(divide='ignore', invalid='ignore'):
            logp = (a - 1) * _log(x) + (b - 1) * _log(1 - x) - log_beta(a, b)
            out = np.exp(logp)
        return np.where(inside, np.nan_to_num(out, nan=0.0, posinf=np.inf), 0.0)

    def cdf(self, x, a, b):
        return betainc(a, b, np.clip(x, 0.0, 1.0))

    def hint(self, a, b):
        return a / (a + b), 0.25


class Binom(TableFamily):
    """Successes in n trials of probability p."""
    name, param_names = 'binom', ('n', 'p')

    def validate(self, n, p):
        _require(n >= 1 and _is_int(n), "binom: n must be a positive integer")
        _require(0.0 < p < 1.0, "binom: p must lie in (0, 1)")

    def bounds(self, n, p):
        return 0.0, n

    def _table(self, n, p):
        n = int(n)
        return 0, np.array([math.comb(n, k) * p ** k * (1.0 - p) ** (n - k) for k in range(n + 1)])


class Expon(Family):
    """Exponential with rate lambda."""
    name, param_names = 'expon', ('lambda',)

    def validate(self, lam):
        _require(lam > 0, "expon: lambda must be > 0")

    def bounds(self, lam):
        return 0.0, math.inf

    def pdf(self, x, lam):
        return np.where(x >= 0, lam * np.exp(-lam * np.maximum(x, 0.0)), 0.0)

    def cdf(self, x, lam):
        return np.where(x > 0, -np.expm1(-lam * np.maximum(x, 0.0)), 0.0)

    def ppf(self, u, lam):
        return -np.log1p(-u) / lam


class Geom(DiscreteFamily):
    """Number of trials up to and including the first success (support 1, 2, ...)."""
    name, param_names = 'geom', ('p',)

    def validate(self, p):
        _require(0.0 < p < 1.0, "geom: p must lie in (0, 1)")

    def bounds(self, p):
        return 1.0, math.inf

    def pmf(self, k, p):
        return np.exp((k - 1) * math.log1p(-p)) * p

    def cdf(self, x, p):
        k = np.floor(x)
        return np.where(k >= 1, -np.expm1(np.maximum(k, 0.0) * math.log1p(-p)), 0.0)


class NBinom(DiscreteFamily):
    """Failures before the r-th success."""
    name, param_names = 'nbinom', ('r', 'p')

    def validate(self, r, p):
        _require(r > 0, "nbinom: r must be > 0")
        _require(0.0 < p < 1.0, "nbinom: p must lie in (0, 1)")

    def bounds(self, r, p):
        return 0.0, math.inf

    def pmf(self, k, r, p):
        return np.exp(log_gamma(k + r) - log_gamma(r) - log_gamma(k + 1)
                      + r * math.log(p) + k * math.log1p(-p))

    def cdf(self, x, r, p):
        k = np.floor(x)
        return np.where(k >= 0, betainc(r, np.maximum(k, 0.0) + 1.0, p), 0.0)


class LogNorm(Family):
    """exp(N(mu, sigma^2))."""
    name, param_names = 'lognorm', ('mu', 'sigma')

    def validate(self, mu, sigma):
        _require(sigma > 0, "lognorm: sigma must be > 0")

    def bounds(self, mu, sigma):
        return 0.0, math.inf

    def pdf(self, x, mu, sigma):
        with np.errstate(divide='ignore', invalid='ignore'):
            z = (_log(x) - mu) / sigma
            out = np.exp(-0.5 * z * z) / (x * sigma * math.sqrt(2.0 * math.pi))
        return np.where(x > 0, out, 0.0)

    def cdf(self, x, mu, sigma):
        with np.errstate(divide='ignore'):
            z = (_log(np.maximum(x, 0.0)) - mu) / sigma
        return np.where(x > 0, norm_cdf(np.where(x > 0, z, 0.0)), 0.0)

    def ppf(self, u, mu, sigma):
        return np.exp(mu + sigma * norm_ppf(u))


class Triang(Family):
    """Triangular law on [a, a + w] with mode at a + f_mode * w."""
    name, param_names = 'triang', ('a', 'w', 'f_mode')

    def validate(self, a, w, c):
        _require(w > 0, "triang: w must be > 0")
        _require(0.0 <= c <= 1.0, "triang: f_mode must lie in [0, 1]")

    def bounds(self, a, w, c):
        return a, a + w

    def pdf(self, x, a, w, c):
        t = (x - a) / w
        with np.errstate(divide='ignore', invalid='ignore'):
            rising = 2.0 * t / c if c > 0 else np.zeros_like(t)
            falling = 2.0 * (1.0 - t) / (1.0 - c) if c < 1 else np.zeros_like(t)
        dens = np.where(t < c, rising, falling) / w
        return np.where((t >= 0) & (t <= 1), dens, 0.0)

    def cdf(self, x, a, w, c):
        t = np.clip((x - a) / w, 0.0, 1.0)
        rising = t * t / c if c > 0 else np.zeros_like(t)
        falling = 1.0 - (1.0 - t) ** 2 / (1.0 - c) if c < 1 else np.ones_like(t)
        return np.where(t <= c, rising, falling)

    def ppf(self, u, a, w, c):
        low = a + w * np.sqrt(u * c)
        high = a + w * (1.0 - np.sqrt((1.0 - u) * (1.0 - c)))
        return np.where(u < c, low, high)


class Rayleigh(Family):
    """Rayleigh with scale sigma."""
    name, param_names = 'rayleigh', ('sigma',)

    def validate(self, sigma):
        _require(sigma > 0, "rayleigh: sigma must be > 0")

    def bounds(self, sigma):
        return 0.0, math.inf

    def pdf(self, x, sigma):
        return np.where(x >= 0, x / sigma ** 2 * np.exp(-x * x / (2 * sigma ** 2)), 0.0)

    def cdf(self, x, sigma):
        xp = np.maximum(x, 0.0)
        return -np.expm1(-xp * xp / (2 * sigma ** 2))

    def ppf(self, u, sigma):
        return sigma * np.sqrt(-2.0 * np.log1p(-u))


class Poisson(DiscreteFamily):
    """Poisson with mean lambda."""
    name, param_names = 'poisson', ('lambda',)

    def validate(self, lam):
        _require(lam > 0, "poisson: lambda must be > 0")

    def bounds(self, lam):
        return 0.0, math.inf

    def pmf(self, k, lam):
        return np.exp(k * math.log(lam) - lam - log_gamma(k + 1))

    def cdf(self, x, lam):
        k = np.floor(x)
        return np.where(k >= 0, gammainc_upper(np.maximum(k, 0.0) + 1.0, lam), 0.0)


class Maxwell(Family):
    """Maxwell-Boltzmann speed with scale sigma."""
    name, param_names = 'maxwell', ('sigma',)

    def validate(self, sigma):
        _require(sigma > 0, "maxwell: sigma must be > 0")

    def bounds(self, sigma):
        return 0.0, math.inf

    def pdf(self, x, sigma):
        z = np.maximum(x, 0.0) / sigma
        return np.where(x >= 0, math.sqrt(2.0 / math.pi) * z * z * np.exp(-0.5 * z * z) / sigma, 0.0)

    def cdf(self, x, sigma):
        z = np.maximum(x, 0.0) / sigma
        return gammainc_lower(1.5, 0.5 * z * z)

    def hint(self, sigma):
        return 1.6 * sigma, 0.7 * sigma


class Cauchy(Family):
    """Cauchy with location x0 and scale gamma."""
    name, param_names = 'cauchy', ('x0', 'gamma')

    def validate(self, x0, g):
        _require(g > 0, "cauchy: gamma must be > 0")

    def pdf(self, x, x0, g):
        z = (x - x0) / g
        return 1.0 / (math.pi * g * (1.0 + z * z))

    def cdf(self, x, x0, g):
        return 0.5 + np.arctan((x - x0) / g) / math.pi

    def ppf(self, u, x0, g):
        return x0 + g * np.tan(math.pi * (u - 0.5))


class StudentT(Family):
    """Standard Student t with nu degrees of freedom."""
    name, param_names = 't', ('nu',)

    def validate(self, nu):
        _require(nu > 0, "t: nu must be > 0")

    def pdf(self, x, nu):
        logc = log_gamma(0.5 * (nu + 1)) - log_gamma(0.5 * nu) - 0.5 * math.log(nu * math.pi)
        return np.exp(logc - 0.5 * (nu + 1) * np.log1p(x * x / nu))

    def cdf(self, x, nu):
        tail = 0.5 * betainc(0.5 * nu, 0.5, nu / (nu + x * x))
        return np.where(x > 0, 1.0 - tail, tail)

    def hint(self, nu):
        return 0.0, math.sqrt(nu / (nu - 2.0)) if nu > 2 else 1.0


class Chi(Family):
    """Chi with nu degrees of freedom."""
    name, param_names = 'chi', ('nu',)

    def validate(self, nu):
        _require(nu > 0, "chi: nu must be > 0")

    def bounds(self, nu):
        return 0.0, math.inf

    def pdf(self, x, nu):
        with np.errstate(divide='ignore', invalid='ignore'):
            logp = ((nu - 1) * _log(x) - 0.5 * x * x
                    - (0.5 * nu - 1) * math.log(2.0) - log_gamma(0.5 * nu))
            out = np.exp(logp)
        return np.where(x > 0, out, 0.0)

    def cdf(self, x, nu):
        xp = np.maximum(x, 0.0)
        return gammainc_lower(0.5 * nu, 0.5 * xp * xp)

    def hint(self, nu):
        return math.sqrt(max(nu - 0.5, 0.5)), 0.7


class Chi2(Family):
    """Chi-squared with nu degrees of freedom."""
    name, param_names = 'chi2', ('nu',)

    def validate(self, nu):
        _require(nu > 0, "chi2: nu must be > 0")

    def bounds(self, nu):
        return 0.0, math.inf

    def pdf(self, x, nu):
        with np.errstate(divide='ignore', invalid='ignore'):
            logp = (0.5 * nu - 1) * _log(x) - 0.5 * x - 0.5 * nu * math.log(2.0) - log_gamma(0.5 * nu)
            out = np.exp(logp)
        return np.where(x > 0, out, 0.0)

    def cdf(self, x, nu):
        return gammainc_lower(0.5 * nu, 0.5 * np.maximum(x, 0.0))

    def hint(self, nu):
        return nu, math.sqrt(2.0 * nu)


class FDist(Family):
    """Fisher-Snedecor F with (d1, d2) degrees of freedom."""
    name, param_names = 'f', ('d1', 'd2')

    def validate(self, d1, d2):
        _require(d1 > 0 and d2 > 0, "f: d1 and d2 must be > 0")

    def bounds(self, d1, d2):
        return 0.0, math.inf

    def pdf(self, x, d1, d2):
        with np.errstate(divide='ignore', invalid='ignore'):
            logp = (0.5 * d1 * math.log(d1) + 0.5 * d2 * math.log(d2) + (0.5 * d1 - 1) * _log(x)
                    - 0.5 * (d1 + d2) * _log(d2 + d1 * x) - log_beta(0.5 * d1, 0.5 * d2))
            out = np.exp(logp)
        return np.where(x > 0, out, 0.0)

    def cdf(self, x, d1, d2):
        xp = np.maximum(x, 0.0)
        return betainc(0.5 * d1, 0.5 * d2, d1 * xp / (d1 * xp + d2))

    def hint(self, d1, d2):
        return 1.0, 1.0


class GammaDist(Family):
    """Shape alpha, rate beta (scipy scale = 1 / beta)."""
    name, param_names = 'gamma', ('alpha', 'beta')

    def validate(self, a, b):
        _require(a > 0 and b > 0, "gamma: alpha and beta must be > 0")

    def bounds(self, a, b):
        return 0.0, math.inf

    def pdf(self, x, a, b):
        with np.errstate(divide='ignore', invalid='ignore'):
            out = np.exp(a * math.log(b) + (a - 1) * _log(x) - b * x - log_gamma(a))
        return np.where(x > 0, out, 0.0)

    def cdf(self, x, a, b):
        return gammainc_lower(a, b * np.maximum(x, 0.0))

    def hint(self, a, b):
        return a / b, math.sqrt(a) / b


class WeibullMin(Family):
    """Weibull with shape k and scale lambda."""
    name, param_names = 'weibull_min', ('k', 'lambda')

    def validate(self, k, lam):
        _require(k > 0 and lam > 0, "weibull_min: k and lambda must be > 0")

    def bounds(self, k, lam):
        return 0.0, math.inf

    def pdf(self, x, k, lam):
        z = np.maximum(x, 0.0) / lam
        with np.errstate(divide='ignore', invalid='ignore'):
            out = k / lam * z ** (k - 1) * np.exp(-z ** k)
        return np.where(x > 0, out, 0.0)

    def cdf(self, x, k, lam):
        z = np.maximum(x, 0.0) / lam
        return -np.expm1(-z ** k)

    def ppf(self, u, k, lam):
        return lam * (-np.log1p(-u)) ** (1.0 / k)


class TruncNorm(Family):
    """Normal(mu, sigma) truncated to the raw interval [a, b]."""
    name, param_names = 'truncnorm', ('mu', 'sigma', 'a', 'b')

    def validate(self, mu, sigma, a, b):
        _require(sigma > 0, "truncnorm: sigma must be > 0")
        _require(a < b, "truncnorm: a must be < b")

    def bounds(self, mu, sigma, a, b):
        return a, b

    def _edges(self, mu, sigma, a, b):
        lo = norm_cdf((a - mu) / sigma)
        hi = norm_cdf((b - mu) / sigma)
        return lo, hi - lo

    def pdf(self, x, mu, sigma, a, b):
        _, z = self._edges(mu, sigma, a, b)
        s = (x - mu) / sigma
        dens = np.exp(-0.5 * s * s) / (sigma * math.sqrt(2.0 * math.pi) * z)
        return np.where((x >= a) & (x <= b), dens, 0.0)

    def cdf(self, x, mu, sigma, a, b):
        lo, z = self._edges(mu, sigma, a, b)
        return np.clip((norm_cdf((np.clip(x, a, b) - mu) / sigma) - lo) / z, 0.0, 1.0)

    def ppf(self, u, mu, sigma, a, b):
        lo, z = self._edges(mu, sigma, a, b)
        return np.clip(mu + sigma * norm_ppf(lo + u * z), a, b)


class Laplace(Family):
    """Laplace with location mu and scale b."""
    name, param_names = 'laplace', ('mu', 'b')

    def validate(self, mu, b):
        _require(b > 0, "laplace: b must be > 0")

    def pdf(self, x, mu, b):
        return np.exp(-np.abs(x - mu) / b) / (2.0 * b)

    def cdf(self, x, mu, b):
        z = (x - mu) / b
        return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))

    def ppf(self, u, mu, b):
        with np.errstate(divide='ignore'):
            return np.where(u < 0.5, mu + b * np.log(2.0 * u), mu - b * np.log(2.0 * (1.0 - u)))


class Logistic(Family):
    """Logistic with location mu and scale s."""
    name, param_names = 'logistic', ('mu', 's')

    def validate(self, mu, s):
        _require(s > 0, "logistic: s must be > 0")

    def pdf(self, x, mu, s):
        z = -np.abs(x - mu) / s
        e = np.exp(z)
        return e / (s * (1.0 + e) ** 2)

    def cdf(self, x, mu, s):
        return 0.5 * (1.0 + np.tanh(0.5 * (x - mu) / s))

    def ppf(self, u, mu, s):
        return mu + s * (np.log(u) - np.log1p(-u))


class Pareto(Family):
    """Pareto with shape alpha and minimum x_m."""
    name, param_names = 'pareto', ('alpha', 'x_m')

    def validate(self, alpha, xm):
        _require(alpha > 0 and xm > 0, "pareto: alpha and x_m must be > 0")

    def bounds(self, alpha, xm):
        return xm, math.inf

    def pdf(self, x, alpha, xm):
        with np.errstate(divide='ignore'):
            out = alpha * xm ** alpha / np.maximum(x, xm) ** (alpha + 1)
        return np.where(x >= xm, out, 0.0)

    def cdf(self, x, alpha, xm):
        return np.where(x >= xm, 1.0 - (xm / np.maximum(x, xm)) ** alpha, 0.0)

    def ppf(self, u, alpha, xm):
        return xm * (1.0 - u) ** (-1.0 / alpha)


class Hypergeom(TableFamily):
    """Draws N from a population of M holding K successes."""
    name, param_names = 'hypergeom', ('M', 'N', 'K')

    def validate(self, M, N, K):
        _require(all(_is_int(v) for v in (M, N, K)), "hypergeom: M, N, K must be integers")
        _require(M >= 1 and 0 <= N <= M and 0 <= K <= M, "hypergeom: require 0 <= N, K <= M")

    def bounds(self, M, N, K):
        return float(max(0, N - (M - K))), float(min(N, K))

    def _table(self, M, N, K):
        M, N, K = int(M), int(N), int(K)
        lo, hi = max(0, N - (M - K)), min(N, K)
        total = math.comb(M, N)
        return lo, np.array([math.comb(K, k) * math.comb(M - K, N - k) / total for k in range(lo, hi + 1)])


class GumbelR(Family):
    """Right-skewed Gumbel with location mu and scale beta."""
    name, param_names = 'gumbel_r', ('mu', 'beta')

    def validate(self, mu, beta):
        _require(beta > 0, "gumbel_r: beta must be > 0")

    def pdf(self, x, mu, beta):
        z = (x - mu) / beta
        with np.errstate(over='ignore'):
            return np.exp(-z - np.exp(-z)) / beta

    def cdf(self, x, mu, beta):
        return np.exp(-np.exp(-(x - mu) / beta))

    def ppf(self, u, mu, beta):
        return mu - beta * np.log(-np.log(u))


def _poisson_table(lam: float) -> np.ndarray:
    kmax = int(lam + 40.0 * math.sqrt(lam) + 40)
    k = np.arange(kmax + 1, dtype=float)
    pmf = np.exp(k * math.log(lam) - lam - log_gamma(k + 1))
    keep = np.nonzero(np.cumsum(pmf[::-1]) > SKELLAM_TAIL)[0]
    return pmf[: len(pmf) - int(keep[0])] if len(keep) else pmf


@lru_cache(maxsize=256)
def _skellam_table(mu1: float, mu2: float) -> Tuple[int, np.ndarray]:
    p1 = _poisson_table(mu1)
    p2 = _poisson_table(mu2)
    # X = N1 - N2, index i holds value i - (len(p2) - 1)
    pmf = np.convolve(p1, p2[::-1])
    return -(len(p2) - 1), pmf


class Skellam(TableFamily):
    """Difference of independent Poisson(mu1) and Poisson(mu2) counts."""
    name, param_names = 'skellam', ('mu1', 'mu2')

    def validate(self, mu1, mu2):
        _require(mu1 > 0 and mu2 > 0, "skellam: mu1 and mu2 must be > 0")

    def table(self, mu1, mu2):
        lo, pmf = _skellam_table(mu1, mu2)
        return lo, pmf, np.minimum(np.cumsum(pmf), 1.0)


class BetaBinom(TableFamily):
    """Binomial(n, p) with p drawn from Beta(alpha, beta)."""
    name, param_names = 'betabinom', ('n', 'alpha', 'beta')

    def validate(self, n, a, b):
        _require(n >= 1 and _is_int(n), "betabinom: n must be a positive integer")
        _require(a > 0 and b > 0, "betabinom: alpha and beta must be > 0")

    def bounds(self, n, a, b):
        return 0.0, n

    def _table(self, n, a, b):
        k = np.arange(int(n) + 1, dtype=float)
        logp = (log_gamma(n + 1) - log_gamma(k + 1) - log_gamma(n - k + 1)
                + log_beta(k + a, n - k + b) - log_beta(a, b))
        return 0, np.exp(logp)


class Lomax(Family):
    """Lomax (Pareto type II) with shape alpha and scale lambda."""
    name, param_names = 'lomax', ('alpha', 'lambda')

    def validate(self, alpha, lam):
        _require(alpha > 0 and lam > 0, "lomax: alpha and lambda must be > 0")

    def bounds(self, alpha, lam):
        return 0.0, math.inf

    def pdf(self, x, alpha, lam):
        xp = np.maximum(x, 0.0)
        return np.where(x >= 0, alpha / lam * (1.0 + xp / lam) ** (-(alpha + 1)), 0.0)

    def cdf(self, x, alpha, lam):
        xp = np.maximum(x, 0.0)
        return -np.expm1(-alpha * np.log1p(xp / lam))

    def ppf(self, u, alpha, lam):
        return lam * np.expm1(-np.log1p(-u) / alpha)


class InvGauss(Family):
    """Mean mu, shape lambda (scipy: mu / lambda with scale lambda)."""
    name, param_names = 'invgauss', ('mu', 'lambda')

    def validate(self, mu, lam):
        _require(mu > 0 and lam > 0, "invgauss: mu and lambda must be > 0")

    def bounds(self, mu, lam):
        return 0.0, math.inf

    def pdf(self, x, mu, lam):
        xp = np.where(x > 0, x, 1.0)
        out = np.sqrt(lam / (2.0 * math.pi * xp ** 3)) * np.exp(-lam * (xp - mu) ** 2 / (2.0 * mu * mu * xp))
        return np.where(x > 0, out, 0.0)

    def cdf(self, x, mu, lam):
        xp = np.where(x > 0, x, 1.0)
        r = np.sqrt(lam / xp)
        first = norm_cdf(r * (xp / mu - 1.0))
        with np.errstate(divide='ignore'):
            second = np.exp(2.0 * lam / mu + _log(norm_cdf(-r * (xp / mu + 1.0))))
        return np.where(x > 0, np.clip(first + second, 0.0, 1.0), 0.0)

    def hint(self, mu, lam):
        return mu, math.sqrt(mu ** 3 / lam)


FAMILIES: Dict[str, Family] = {fam.name: fam for fam in (
    Uniform(), Norm(), Bernoulli(), Beta(), Binom(), Expon(), Geom(), NBinom(), LogNorm(),
    Triang(), Rayleigh(), Poisson(), Maxwell(), Cauchy(), StudentT(), Chi(), Chi2(), FDist(),
    GammaDist(), WeibullMin(), TruncNorm(), Laplace(), Logistic(), Pareto(), Hypergeom(),
    GumbelR(), Skellam(), BetaBinom(), Lomax(), InvGauss(),
)}


def family_names() -> List[str]:
    return list(FAMILIES)


def parameter_names(family: str) -> Tuple[str, ...]:
    fam = FAMILIES.get(family)
    if fam is None:
        raise ParameterDomainError(f"Unknown family '{family}'")
    return fam.param_names


def is_discrete(family: str) -> bool:
    return FAMILIES[family].discrete


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def _as_array(x) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    return np.atleast_1d(arr).copy(), arr.ndim == 0


def _out(values: np.ndarray, scalar: bool):
    values = np.asarray(values, dtype=float)
    return float(values.reshape(-1)[0]) if scalar else values


def support(spec: DistributionSpec) -> SupportInfo:
    fam = FAMILIES[spec.family]
    lo, hi = fam.bounds(*spec.values)
    return SupportInfo(DISCRETE if fam.discrete else CONTINUOUS, float(lo), float(hi))


def density(spec: DistributionSpec, x: ArrayLike) -> ArrayLike:
    """PMF for discrete families, PDF for continuous ones."""
    arr, scalar = _as_array(x)
    fam = FAMILIES[spec.family]
    return _out(fam.pdf(arr, *spec.values), scalar)


def cdf(spec: DistributionSpec, x: ArrayLike) -> ArrayLike:
    arr, scalar = _as_array(x)
    fam = FAMILIES[spec.family]
    out = np.asarray(fam.cdf(arr, *spec.values), dtype=float)
    out = np.where(np.isneginf(arr), 0.0, np.where(np.isposinf(arr), 1.0, out))
    return _out(np.clip(out, 0.0, 1.0), scalar)


def ppf(spec: DistributionSpec, u: ArrayLike) -> ArrayLike:
    """Smallest x with cdf(x) >= u."""
    arr, scalar = _as_array(u)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise ParameterDomainError("ppf: u must lie in the open interval (0, 1)")
    fam = FAMILIES[spec.family]
    closed = fam.ppf(arr, *spec.values)
    if closed is not None:
        return _out(closed, scalar)
    if fam.discrete:
        return _out(_discrete_ppf(fam, arr, spec.values), scalar)
    return _out(_continuous_ppf(fam, arr, spec.values), scalar)


def _discrete_ppf(fam: DiscreteFamily, u: np.ndarray, p: Tuple[float, ...]) -> np.ndarray:
    start = fam.scan_start(*p)
    out = np.full(u.shape, np.nan)
    pending = np.ones(u.shape, dtype=bool)
    chunk = 64
    scanned = 0
    while np.any(pending) and scanned < SCAN_LIMIT:
        ks = start + np.arange(chunk, dtype=float)
        cum = np.maximum.accumulate(fam.cdf(ks, *p))
        idx = np.searchsorted(cum, u[pending], side='left')
        found = idx < chunk
        sel = np.flatnonzero(pending)
        out[sel[found]] = ks[idx[found]]
        pending[sel[found]] = False
        start += chunk
        scanned += chunk
        chunk = min(chunk * 2, 1 << 16)
    if np.any(pending):
        logger.warning(f"[PPF] {fam.name}{p}: CDF scan hit the {SCAN_LIMIT} step cap")
        out[pending] = start - 1
    return out


def _continuous_ppf(fam: Family, u: np.ndarray, p: Tuple[float, ...]) -> np.ndarray:
    """Safeguarded Newton iteration inside an expanding bisection bracket."""
    lower, upper = fam.bounds(*p)
    center, spread = fam.hint(*p)
    spread = spread if spread > 0 else 1.0
    if math.isfinite(lower) and math.isfinite(upper):
        lo = np.full(u.shape, float(lower))
        hi = np.full(u.shape, float(upper))
    else:
        lo = np.full(u.shape, center - spread)
        hi = np.full(u.shape, center + spread)
        if math.isfinite(lower):
            lo = np.maximum(lo, lower)
        if math.isfinite(upper):
            hi = np.minimum(hi, upper)
        step = spread
        for _ in range(200):
            too_high = (fam.cdf(lo, *p) >= u) & (lo > lower)
            too_low = (fam.cdf(hi, *p) < u) & (hi < upper)
            if not (np.any(too_high) or np.any(too_low)):
                break
            step *= 2.0
            lo = np.where(too_high, np.maximum(center - step, lower), lo)
            hi = np.where(too_low, np.minimum(center + step, upper), hi)

    x = 0.5 * (lo + hi)
    for _ in range(PPF_MAX_ITER):
        f = fam.cdf(x, *p) - u
        lo = np.where(f < 0, x, lo)
        hi = np.where(f >= 0, x, hi)
        dens = fam.pdf(x, *p)
        with np.errstate(divide='ignore', invalid='ignore'):
            newton = x - f / dens
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi) & (dens > 0)
        x_new = np.where(ok, newton, 0.5 * (lo + hi))
        done = (np.abs(x_new - x) <= PPF_TOLERANCE * (1.0 + np.abs(x))) | \
               (hi - lo <= PPF_TOLERANCE * (1.0 + np.abs(x)))
        x = x_new
        if np.all(done):
            break
    return x


def _draw_uniform(rng: np.random.Generator, n: Optional[int] = None):
    u = rng.random(n)
    if n is None:
        while u == 0.0:
            u = rng.random()
        return u
    zero = u == 0.0
    while np.any(zero):
        u[zero] = rng.random(int(zero.sum()))
        zero = u == 0.0
    return u


def sample(spec: DistributionSpec, rng: np.random.Generator) -> float:
    """One inverse-transform draw."""
    return ppf(spec, _draw_uniform(rng))


def sample_many(spec: DistributionSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if n <= 0:
        return np.empty(0)
    return ppf(spec, _draw_uniform(rng, n))
