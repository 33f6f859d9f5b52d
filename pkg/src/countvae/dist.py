"""Count and continuous distributions used by the latent layer.

Log-densities are written with tensor ops so they can sit inside a loss.
Samplers draw all randomness from an :class:`RngStream`, a thin wrapper
around a Philox counter-based generator, so draws are reproducible and
child streams can be split off by key.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import special

from .tensor import (DomainError, Tensor, _make, as_tensor, expand, lgamma,
                     lgamma_np, log, sub)

U_EPS = 1e-12


@dataclass
class NBParams:
    """Negative Binomial with dispersion ``r`` and success probability ``p``.

    Mean r(1-p)/p, variance r(1-p)/p^2.
    """

    r: Tensor
    p: Tensor

    def __post_init__(self):
        self.r = as_tensor(self.r)
        self.p = as_tensor(self.p)
        if np.any(~(self.r.values > 0)):
            raise DomainError("NB dispersion r must be positive")
        if np.any(~((self.p.values > 0) & (self.p.values < 1))):
            raise DomainError("NB success probability p must lie in (0, 1)")

    def mean(self) -> np.ndarray:
        r, p = self.r.values, self.p.values
        return r * (1 - p) / p

    def variance(self) -> np.ndarray:
        r, p = self.r.values, self.p.values
        return r * (1 - p) / p ** 2

    def gamma_rate(self) -> Tensor:
        """Rate of the Gamma mixing distribution, p / (1 - p)."""
        return self.p / sub(1.0, self.p)


def _key_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    return int(key)


class RngStream:
    """Splittable Philox stream; ``child(key)`` derives an independent stream."""

    def __init__(self, seed: int = 0, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, key) -> "RngStream":
        return RngStream(self.seed, self.path + (_key_int(key),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return _jsonable(st)

    def set_state(self, state: dict) -> None:
        st = dict(state)
        inner = {k: np.asarray(v, dtype=np.uint64) for k, v in st["state"].items()}
        st["state"] = inner
        st["buffer"] = np.asarray(st["buffer"], dtype=np.uint64)
        self._gen.bit_generator.state = st

    def uniform(self, shape=()) -> np.ndarray:
        return np.clip(self._gen.random(shape), U_EPS, 1.0 - U_EPS)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def gumbel(self, shape=()) -> np.ndarray:
        return -np.log(-np.log(self.uniform(shape)))

    def poisson(self, lam) -> np.ndarray:
        return self._gen.poisson(lam)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def standard_gamma(self, shape_param) -> np.ndarray:
        return marsaglia_tsang(np.asarray(shape_param, dtype=np.float64), self)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj.ravel()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class ReplayStream:
    """Wraps a stream, recording draws on the first pass and replaying them after
    :meth:`freeze`.

    Gamma draws are recorded as CDF levels and replayed through the inverse CDF,
    so a replayed forward pass is a smooth function of the shape parameter whose
    derivative is the implicit reparameterization gradient. This is what finite
    difference checks need as "common random numbers".
    """

    def __init__(self, base: RngStream):
        self.base = base
        self._draws: list[np.ndarray] = []
        self._pos = 0
        self.replaying = False

    def freeze(self) -> None:
        self.replaying = True
        self._pos = 0

    def rewind(self) -> None:
        self._pos = 0

    def _next(self) -> np.ndarray:
        out = self._draws[self._pos]
        self._pos += 1
        return out

    def _wrap(self, draw):
        if self.replaying:
            return self._next()
        out = draw()
        self._draws.append(out)
        return out

    def uniform(self, shape=()):
        return self._wrap(lambda: self.base.uniform(shape))

    def normal(self, shape=()):
        return self._wrap(lambda: self.base.normal(shape))

    def gumbel(self, shape=()):
        return -np.log(-np.log(self.uniform(shape)))

    def poisson(self, lam):
        return self._wrap(lambda: self.base.poisson(lam))

    def standard_gamma(self, shape_param):
        a = np.asarray(shape_param, dtype=np.float64)
        if self.replaying:
            return special.gammaincinv(a, self._next())
        x = self.base.standard_gamma(a)
        self._draws.append(special.gammainc(a, x))
        return x


# log densities -----------------------------------------------------------

def poisson_log_pmf(z, lam) -> Tensor:
    """z log(lam) - lam - lgamma(z + 1); z may be a relaxed (real) count."""
    z, lam = as_tensor(z), as_tensor(lam)
    if np.any(~(lam.values > 0)):
        raise DomainError("Poisson rate must be positive")
    if np.any(z.values < 0):
        raise DomainError("Poisson count must be non-negative")
    return z * log(lam) - lam - lgamma(z + 1.0)


def nb_log_pmf(z, params: NBParams) -> Tensor:
    """log NB(z; r, p), with the binomial coefficient written through lgamma."""
    z = as_tensor(z)
    if np.any(z.values < 0):
        raise DomainError("NB count must be non-negative")
    r, p = params.r, params.p
    return (lgamma(z + r) - lgamma(z + 1.0) - lgamma(r)
            + z * log(sub(1.0, p)) + r * log(p))


def gamma_log_pdf_np(x, shape, rate) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (shape * np.log(rate) + (shape - 1.0) * np.log(x) - rate * x
            - lgamma_np(shape))


# samplers ----------------------------------------------------------------

def marsaglia_tsang(a: np.ndarray, rng) -> np.ndarray:
    """Standard Gamma(a, 1) draws by Marsaglia-Tsang squeeze/rejection.

    Shapes below one are boosted: Gamma(a) = Gamma(a + 1) * U^(1/a).
    """
    a = np.asarray(a, dtype=np.float64)
    if np.any(~(a > 0)):
        raise DomainError("Gamma shape must be positive")
    boost = a < 1.0
    aa = np.where(boost, a + 1.0, a)
    d = aa - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(aa)
    todo = np.arange(aa.size)
    d_flat, c_flat = d.ravel(), c.ravel()
    out_flat = out.reshape(-1)
    while todo.size:
        dd, cc = d_flat[todo], c_flat[todo]
        x = rng.normal(todo.shape)
        v = 1.0 + cc * x
        u = rng.uniform(todo.shape)
        pos = v > 0
        v3 = np.where(pos, v, 1.0) ** 3
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = pos & ((u < 1.0 - 0.0331 * x ** 4)
                            | (np.log(u) < 0.5 * x * x + dd * (1.0 - v3 + np.log(v3))))
        out_flat[todo[accept]] = dd[accept] * v3[accept]
        todo = todo[~accept]
    if np.any(boost):
        u = rng.uniform(a.shape)
        out = np.where(boost, out * u ** (1.0 / a), out)
    return out


def standard_gamma_shape_grad(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """dx/da for x ~ Gamma(a, 1) at fixed CDF level: -(dF/da) / f(x).

    dF/da is a central finite difference of the regularized incomplete gamma;
    the upper tail uses the complement to keep absolute error small.
    """
    x = np.maximum(np.asarray(x, dtype=np.float64), 1e-300)
    a = np.asarray(a, dtype=np.float64)
    h = np.minimum(np.maximum(1e-4, 1e-4 * a), 0.5 * a)
    upper = x > a
    d_lower = (special.gammainc(a + h, x) - special.gammainc(a - h, x)) / (2 * h)
    d_upper = -(special.gammaincc(a + h, x) - special.gammaincc(a - h, x)) / (2 * h)
    dF = np.where(upper, d_upper, d_lower)
    log_f = (a - 1.0) * np.log(x) - x - lgamma_np(a)
    with np.errstate(over="ignore"):
        grad = -dF * np.exp(-log_f)
    return np.where(np.isfinite(grad), grad, 0.0)


def gamma_rsample(shape, rate, rng) -> Tensor:
    """Gamma(shape, rate) draw, differentiable in both parameters.

    Rate enters pathwise (z = x / rate); shape uses the implicit gradient.
    """
    shape, rate = as_tensor(shape), as_tensor(rate)
    if shape.shape != rate.shape:
        target = np.broadcast_shapes(shape.shape, rate.shape)
        shape, rate = expand(shape, target), expand(rate, target)
    a, b = shape.values, rate.values
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise DomainError("Gamma shape and rate must be positive")
    x = np.asarray(rng.standard_gamma(a), dtype=np.float64)
    z = x / b
    dx_da = standard_gamma_shape_grad(x, a)
    return _make(z, (shape, rate), lambda g: (g * dx_da / b, -g * z / b))


def exponential_rsample(lam, rng, shape=None) -> Tensor:
    """-log(U) / lam; ``shape`` defaults to the shape of ``lam``."""
    lam = as_tensor(lam)
    if np.any(~(lam.values > 0)):
        raise DomainError("Exponential rate must be positive")
    u = rng.uniform(lam.shape if shape is None else shape)
    e = Tensor(-np.log(u))
    if shape is not None and tuple(shape) != lam.shape:
        lam = expand(lam, shape)
    return e / lam


def gumbel_sample(rng, shape=()) -> np.ndarray:
    return rng.gumbel(shape)


def nb_sample_hard(params: NBParams, rng, size=None) -> np.ndarray:
    """Exact integer NB draws via the Gamma-Poisson mixture (no gradient)."""
    r, p = params.r.values, params.p.values
    if size is not None:
        r, p = np.broadcast_to(r, size), np.broadcast_to(p, size)
    lam = rng.standard_gamma(r) * (1.0 - p) / p
    return np.asarray(rng.poisson(lam), dtype=np.int64)
