"""KL divergences between latent posteriors and priors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .dist import NBParams, nb_log_pmf
from .optim import ConfigError
from .tensor import (DomainError, Tensor, as_tensor, clamp, exp, expand, log,
                     sub, sum_)

DISPERSION_SHARING = "dispersion_sharing"
MONTE_CARLO = "monte_carlo"
_ALIASES = {"ds": DISPERSION_SHARING, DISPERSION_SHARING: DISPERSION_SHARING,
            "mc": MONTE_CARLO, MONTE_CARLO: MONTE_CARLO}

# success probabilities of the posterior are kept at or below this
Q_MAX = 1.0 - 1e-6


@dataclass
class KlMode:
    mode: str = DISPERSION_SHARING
    mc_samples: int = 1

    def __post_init__(self):
        if self.mode not in _ALIASES:
            raise ConfigError(f"unknown KL mode {self.mode!r}")
        self.mode = _ALIASES[self.mode]
        if int(self.mc_samples) < 1:
            raise ConfigError("mc_samples must be at least 1")
        self.mc_samples = int(self.mc_samples)


def _common(*xs) -> list[Tensor]:
    ts = [as_tensor(x) for x in xs]
    shape = np.broadcast_shapes(*(t.shape for t in ts))
    return [t if t.shape == shape else expand(t, shape) for t in ts]


def _check_q(q: np.ndarray) -> None:
    bad = ~(q < 1.0)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        unit = int(idx[-1]) if idx.size else 0
        raise DomainError(
            f"posterior success probability p*delta_p = {q[tuple(idx)]:.6g} >= 1 at unit {unit}")


def g(a, b) -> Tensor:
    """Per-unit KL kernel for NB posteriors sharing the prior's dispersion.

    g(a, b) = log b + (1 - ab)/(ab) * log((1 - ab)/(1 - a)),
    the KL of NB(r, ab) from NB(r, a) divided by r.
    """
    a, b = _common(a, b)
    q_raw = a * b
    _check_q(q_raw.values)
    q = clamp(q_raw, None, Q_MAX)
    one_minus_q = sub(1.0, q)
    return log(b) + one_minus_q / q * log(one_minus_q / sub(1.0, a))


def kl_dispersion_sharing_terms(r, p, delta_p) -> Tensor:
    r, p, delta_p = _common(r, p, delta_p)
    return r * g(p, delta_p)


def kl_dispersion_sharing(r, p, delta_p) -> Tensor:
    return sum_(kl_dispersion_sharing_terms(r, p, delta_p))


def mc_kl_terms(post: NBParams, prior: NBParams, z) -> Tensor:
    """Single-draw log q(z) - log p(z), elementwise."""
    return nb_log_pmf(z, post) - nb_log_pmf(z, prior)


def kl_monte_carlo(post: NBParams, prior: NBParams, samples: Sequence) -> Tensor:
    """Average over draws of sum(log q(z) - log p(z)).

    ``samples`` is a sequence of draws (tensors or LatentSample objects), each
    shaped like the parameters.
    """
    if not len(samples):
        raise ValueError("kl_monte_carlo needs at least one sample")
    total = None
    for s in samples:
        z = getattr(s, "z", s)
        term = sum_(mc_kl_terms(post, prior, z))
        total = term if total is None else total + term
    return total * (1.0 / len(samples))


def kl_poisson_terms(r, delta_r) -> Tensor:
    r, delta_r = _common(r, delta_r)
    return r * (sub(1.0, delta_r) + delta_r * log(delta_r))


def kl_poisson(r, delta_r) -> Tensor:
    return sum_(kl_poisson_terms(r, delta_r))


def kl_gaussian_terms(mu, logvar) -> Tensor:
    mu, logvar = _common(mu, logvar)
    return (mu * mu + exp(logvar) - logvar - 1.0) * 0.5


def kl_gaussian(mu, logvar) -> Tensor:
    return sum_(kl_gaussian_terms(mu, logvar))


def nb_kl_exact(post_r, post_p, prior_r, prior_p, tail: float = 1e-12,
                z_cap: int = 10_000, chunk: int = 4096) -> np.ndarray:
    """KL(NB(post) || NB(prior)) by truncated summation over the support.

    Elementwise over broadcast parameter arrays. The support is cut where the
    posterior tail mass drops below ``tail`` (capped at ``z_cap``).
    """
    pr, pp, qr, qp = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64)
                                           for v in (post_r, post_p, prior_r, prior_p)))
    flat = [v.ravel() for v in (pr, pp, qr, qp)]
    n_max = int(min(z_cap, np.max(stats.nbinom.isf(tail, flat[0], flat[1])) + 1))
    z = np.arange(n_max + 1, dtype=np.float64)
    out = np.empty(flat[0].size)
    for lo in range(0, out.size, chunk):
        sl = slice(lo, lo + chunk)
        a_r, a_p, b_r, b_p = (v[sl, None] for v in flat)
        lq = stats.nbinom.logpmf(z, a_r, a_p)
        lp = stats.nbinom.logpmf(z, b_r, b_p)
        w = np.exp(lq)
        out[sl] = np.sum(np.where(w > 0, w * (lq - lp), 0.0), axis=1)
    return out.reshape(pr.shape)

