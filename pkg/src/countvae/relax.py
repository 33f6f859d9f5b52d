"""Relaxed ("soft count") Poisson and Negative Binomial sampling.

Two relaxations of a Poisson draw with rate ``lam``:

* Gumbel-Softmax over the truncated support ``0..z_max``: perturb the
  log-pmf with Gumbel noise, soften with temperature ``tau`` and return the
  expected count under the resulting weights.
* Continuous-time simulation: draw ``m`` exponential inter-arrival times,
  and count arrival times before t=1 with a sigmoid of width ``tau``.

An NB draw is a Gamma draw of the rate followed by one of the above.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from .dist import NBParams, exponential_rsample, gamma_rsample
from .optim import ConfigError
from .tensor import (Tensor, as_tensor, clamp, cumsum, expand, lgamma_np, log,
                     reshape, sigmoid, softmax, straight_through, sum_)

logger = logging.getLogger(__name__)

GUMBEL_SOFTMAX = "gumbel_softmax"
CONTINUOUS_TIME = "continuous_time"
_ALIASES = {"g": GUMBEL_SOFTMAX, "gumbel": GUMBEL_SOFTMAX, GUMBEL_SOFTMAX: GUMBEL_SOFTMAX,
            "c": CONTINUOUS_TIME, "continuous": CONTINUOUS_TIME, CONTINUOUS_TIME: CONTINUOUS_TIME}

TAIL_WARN = 0.01


@dataclass
class RelaxConfig:
    method: str = CONTINUOUS_TIME
    tau: float = 0.1
    z_max: int = 30
    m: int = 50
    straight_through: bool = False

    def __post_init__(self):
        if self.method not in _ALIASES:
            raise ConfigError(f"unknown relaxation method {self.method!r}")
        self.method = _ALIASES[self.method]
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if int(self.z_max) < 1 or int(self.m) < 1:
            raise ConfigError("z_max and m must be at least 1")
        self.z_max, self.m = int(self.z_max), int(self.m)


@dataclass
class LatentSample:
    soft: Tensor
    hard: np.ndarray
    rates: Tensor
    # what the decoder consumes: soft, or hard with the soft gradient
    z: Tensor


def _record(run_log, msg: str) -> None:
    if run_log is None:
        logger.warning(msg)
    else:
        run_log.append(msg)


def poisson_tail(lam, n: int) -> np.ndarray:
    """P(Z > n) for Z ~ Poisson(lam)."""
    return special.gammainc(n + 1, np.maximum(np.asarray(lam, dtype=np.float64), 0.0))


def _unsqueeze_to(lam: Tensor, k: int) -> Tensor:
    shape = lam.shape + (k,)
    return expand(reshape(lam, lam.shape + (1,)), shape)


def gumbel_softmax_poisson(lam, cfg: RelaxConfig, rng, run_log=None) -> Tensor:
    lam = as_tensor(lam)
    tail = poisson_tail(lam.values, cfg.z_max)
    if tail.size and tail.max() > TAIL_WARN:
        _record(run_log, f"gumbel_softmax: P(Z > z_max={cfg.z_max}) reaches "
                         f"{tail.max():.4f} (max rate {lam.values.max():.3g})")
    k = cfg.z_max + 1
    shape = lam.shape + (k,)
    counts = np.broadcast_to(np.arange(k, dtype=np.float64), shape)
    lam_k = _unsqueeze_to(clamp(lam, 1e-10), k)
    noise = rng.gumbel(shape)
    logits = (Tensor(counts) * log(lam_k) - lam_k
              + Tensor(noise - lgamma_np(counts + 1.0)))
    weights = softmax(logits * (1.0 / cfg.tau), axis=-1)
    return sum_(weights * Tensor(counts), axis=-1)


def continuous_time_poisson(lam, cfg: RelaxConfig, rng, run_log=None) -> Tensor:
    lam = as_tensor(lam)
    tail = poisson_tail(lam.values, cfg.m)
    if tail.size and tail.max() > TAIL_WARN:
        _record(run_log, f"continuous_time: P(N > m={cfg.m}) reaches "
                         f"{tail.max():.4f} (max rate {lam.values.max():.3g})")
    lam_m = _unsqueeze_to(clamp(lam, 1e-10), cfg.m)
    gaps = exponential_rsample(lam_m, rng)
    arrivals = cumsum(gaps, axis=-1)
    return sum_(sigmoid((1.0 - arrivals) * (1.0 / cfg.tau)), axis=-1)


def relaxed_poisson(lam, cfg: RelaxConfig, rng, run_log=None) -> Tensor:
    if cfg.method == GUMBEL_SOFTMAX:
        return gumbel_softmax_poisson(lam, cfg, rng, run_log)
    return continuous_time_poisson(lam, cfg, rng, run_log)


def _finish(soft: Tensor, rates: Tensor, cfg: RelaxConfig) -> LatentSample:
    hard = np.rint(soft.values)
    z = straight_through(hard, soft) if cfg.straight_through else soft
    return LatentSample(soft=soft, hard=hard, rates=rates, z=z)


def poisson_rsample(lam, cfg: RelaxConfig, rng, run_log=None) -> LatentSample:
    lam = as_tensor(lam)
    return _finish(relaxed_poisson(lam, cfg, rng, run_log), lam, cfg)


def nb_rsample(params: NBParams, cfg: RelaxConfig, rng, run_log=None) -> LatentSample:
    """Gamma(r, p/(1-p)) rate, then a relaxed Poisson count at that rate."""
    lam = gamma_rsample(params.r, params.gamma_rate(), rng)
    return _finish(relaxed_poisson(lam, cfg, rng, run_log), lam, cfg)
