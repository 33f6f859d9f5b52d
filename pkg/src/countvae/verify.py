"""Self-check suites behind ``countvae verify``: gradients, samplers, KL estimators.

Every check returns a dict with the measured error, the tolerance and a pass flag.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy import stats

from . import tensor as T
from .dist import (NBParams, ReplayStream, RngStream, exponential_rsample,
                   gamma_rsample, nb_log_pmf, nb_sample_hard)
from .kl import g, kl_dispersion_sharing, mc_kl_terms, nb_kl_exact
from .model import CountVAE, ModelConfig, forward, variant_suite
from .relax import RelaxConfig, continuous_time_poisson, gumbel_softmax_poisson

GRAD_TOL = 1e-3
FD_STEP = 1e-6
SUITES = ("gradcheck", "distcheck", "klcheck")


def _check(name: str, measured: float, tol: float, passed: bool | None = None, **extra) -> dict:
    ok = bool(measured <= tol) if passed is None else bool(passed)
    out = {"name": name, "measured": float(measured), "tolerance": float(tol), "passed": ok}
    out.update(extra)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


# gradcheck ----------------------------------------------------------------

def numeric_grad(fn: Callable[[list[np.ndarray]], float], values: list[np.ndarray],
                 h: float = FD_STEP) -> list[np.ndarray]:
    grads = []
    for i, v in enumerate(values):
        gi = np.zeros_like(v)
        for j in np.ndindex(v.shape):
            up = [x.copy() for x in values]
            dn = [x.copy() for x in values]
            up[i][j] += h
            dn[i][j] -= h
            gi[j] = (fn(up) - fn(dn)) / (2 * h)
        grads.append(gi)
    return grads


def analytic_grad(build: Callable[[list[T.Tensor]], T.Tensor],
                  values: list[np.ndarray]) -> list[np.ndarray]:
    tape = T.get_tape()
    tape.clear()
    leaves = [T.parameter(v.copy()) for v in values]
    out = build(leaves)
    T.backward(out, tape)
    tape.clear()
    return [l.grad if l.grad is not None else np.zeros_like(l.values) for l in leaves]


def check_op(name: str, build: Callable[[list[T.Tensor]], T.Tensor], values: list[np.ndarray],
             rng: RngStream, tol: float = GRAD_TOL, h: float = FD_STEP,
             reference: Callable | None = None) -> dict:
    """Compare d/dx sum(w * f(x)) with central differences for random weights w.

    ``reference`` replaces ``build`` on the finite-difference side, for ops whose
    gradient is defined through a surrogate (straight-through).
    """
    probe = build([T.Tensor(v) for v in values])
    w = rng.normal(probe.shape)

    def weighted(fn):
        def scalar(ts):
            out = fn(ts)
            return T.sum_(out * T.Tensor(w)) if out.shape else out * float(w)
        return scalar

    fd = weighted(reference or build)
    with T.no_grad():
        num = numeric_grad(lambda vs: float(fd([T.Tensor(v) for v in vs]).values), values, h)
    ana = analytic_grad(weighted(build), values)
    err = max(rel_error(a, n) for a, n in zip(ana, num))
    return _check(f"grad:{name}", err, tol)


def _pos(rng, shape, lo=0.5, hi=2.0):
    return lo + (hi - lo) * rng.uniform(shape)


def primitive_checks(rng: RngStream) -> list[dict]:
    r = rng
    x, y = r.child(1).normal((3, 4)), r.child(2).normal((3, 4))
    px, py = _pos(r.child(3), (3, 4)), _pos(r.child(4), (3, 4))
    A, B = r.child(5).normal((3, 4)), r.child(6).normal((4, 2))
    cases = [
        ("add", lambda t: t[0] + t[1], [x, y]),
        ("add_scalar", lambda t: t[0] + t[1], [x, np.array(0.7)]),
        ("sub", lambda t: t[0] - t[1], [x, y]),
        ("mul", lambda t: t[0] * t[1], [x, y]),
        ("mul_scalar", lambda t: t[0] * t[1], [x, np.array(-1.3)]),
        ("div", lambda t: t[0] / t[1], [x, py]),
        ("neg", lambda t: -t[0], [x]),
        ("pow", lambda t: T.pow(t[0], 2.5), [px]),
        ("exp", lambda t: T.exp(t[0]), [x]),
        ("log", lambda t: T.log(t[0]), [px]),
        ("sigmoid", lambda t: T.sigmoid(t[0]), [x]),
        ("softplus", lambda t: T.softplus(t[0]), [x]),
        ("clamp", lambda t: T.clamp(t[0], -5.0, 5.0), [x]),
        ("lgamma", lambda t: T.lgamma(t[0]), [px * 3.0]),
        ("sum", lambda t: T.sum_(t[0], axis=1), [x]),
        ("mean", lambda t: T.mean(t[0], axis=0, keepdims=True), [x]),
        ("softmax", lambda t: T.softmax(t[0], axis=-1), [x]),
        ("matmul", lambda t: T.matmul(t[0], t[1]), [A, B]),
        ("reshape", lambda t: T.reshape(t[0], (4, 3)), [x]),
        ("expand", lambda t: T.expand(t[0], (3, 4)), [x[:1]]),
        ("concat", lambda t: T.concat([t[0], t[1]], axis=1), [x, y]),
        ("slice", lambda t: t[0][:, 1:3], [x]),
        ("cumsum", lambda t: T.cumsum(t[0], axis=-1), [x]),
        ("g", lambda t: g(t[0], t[1]), [np.array([0.2, 0.5, 0.7]), np.array([0.5, 1.3, 1.2])]),
        ("nb_log_pmf", lambda t: nb_log_pmf(t[0], NBParams(t[1], t[2])),
         [np.array([0.4, 2.3, 7.0]), np.array([1.5, 2.0, 4.0]), np.array([0.3, 0.5, 0.8])]),
    ]
    out = [check_op(n, f, v, r.child(f"w:{n}")) for n, f, v in cases]
    out.append(check_op("straight_through",
                        lambda t: T.straight_through(np.rint(t[0].values), t[0] * t[0]), [x],
                        r.child("w:straight_through"), reference=lambda t: t[0] * t[0]))
    out += sampler_checks(r.child("samplers"))
    return out


def sampler_checks(rng: RngStream) -> list[dict]:
    """Reparameterized samplers with common random numbers."""
    cfg_g = RelaxConfig("gumbel_softmax", tau=0.5, z_max=30)
    cfg_c = RelaxConfig("continuous_time", tau=0.3, m=40)
    cases = [
        ("gamma_rsample", lambda t, s: gamma_rsample(t[0], t[1], s),
         [np.array([0.7, 2.0, 5.0]), np.array([0.5, 1.0, 3.0])]),
        ("exponential_rsample", lambda t, s: exponential_rsample(t[0], s),
         [np.array([0.5, 1.0, 3.0])]),
        ("gumbel_softmax_poisson", lambda t, s: gumbel_softmax_poisson(t[0], cfg_g, s, []),
         [np.array([0.5, 3.0, 8.0])]),
        ("continuous_time_poisson", lambda t, s: continuous_time_poisson(t[0], cfg_c, s, []),
         [np.array([0.5, 3.0, 8.0])]),
    ]
    out = []
    for name, f, vals in cases:
        replay = ReplayStream(rng.child(name))
        with T.no_grad():
            f([T.Tensor(v) for v in vals], replay)
        replay.freeze()

        def build(ts, f=f, replay=replay):
            replay.rewind()
            return f(ts, replay)

        out.append(check_op(name, build, vals, rng.child(f"w:{name}")))
    return out


def micro_model_check(name: str, cfg: ModelConfig, rng: RngStream, n_features: int = 4,
                      batch: int = 3, tol: float = GRAD_TOL, h: float = FD_STEP) -> dict:
    """End-to-end dLoss/dtheta for a tiny model with frozen randomness."""
    model = CountVAE.create(cfg, n_features, rng.child("init"))
    # move off the symmetric initial point so every path carries gradient
    for k, p in sorted(model.params.items()):
        p.values += 0.3 * rng.child(f"jitter:{k}").normal(p.shape)
    x = rng.child("x").uniform((batch, n_features))
    replay = ReplayStream(rng.child("noise"))
    with T.no_grad():
        forward(model, x, replay, run_log=[])
    replay.freeze()
    names = sorted(model.params)

    def loss_at(values: list[np.ndarray]) -> T.Tensor:
        for k, v in zip(names, values):
            model.params[k].values = v
        replay.rewind()
        return forward(model, x, replay, run_log=[]).loss

    base = [model.params[k].values.copy() for k in names]
    tape = T.get_tape()
    tape.clear()
    for k, v in zip(names, base):
        model.params[k].values = v.copy()
        model.params[k].zero_grad()
    replay.rewind()
    T.backward(forward(model, x, replay, run_log=[]).loss, tape)
    tape.clear()
    ana = [model.params[k].grad.copy() if model.params[k].grad is not None
           else np.zeros_like(base[i]) for i, k in enumerate(names)]
    with T.no_grad():
        num = numeric_grad(lambda vs: float(loss_at([v.copy() for v in vs]).values), base, h)
    for k, v in zip(names, base):
        model.params[k].values = v
        model.params[k].zero_grad()
    per_param = {k: rel_error(a, n) for k, a, n in zip(names, ana, num)}
    worst = max(per_param, key=per_param.get)
    return _check(f"grad:model:{name}", per_param[worst], tol, worst_param=worst,
                  per_param=per_param)


def micro_configs() -> dict[str, ModelConfig]:
    base = ModelConfig(latent_dim=2, hidden=3, learn_prior=True, tau=0.5, z_max=30, m=30,
                       mc_samples=2)
    return variant_suite(base)


def gradcheck(seed: int = 0) -> list[dict]:
    rng = RngStream(seed).child("gradcheck")
    out = primitive_checks(rng.child("primitives"))
    for name, cfg in micro_configs().items():
        out.append(micro_model_check(name, cfg, rng.child(name)))
    return out


# distcheck ----------------------------------------------------------------

def tv_distance(counts: np.ndarray, pmf: Callable[[np.ndarray], np.ndarray]) -> float:
    """Total variation between integer samples and a pmf over the non-negative integers."""
    counts = np.asarray(counts, dtype=np.int64)
    top = int(counts.max()) + 1
    emp = np.bincount(counts, minlength=top) / counts.size
    ref = pmf(np.arange(top))
    # mass of the reference beyond the largest sample
    tail = max(0.0, 1.0 - float(ref.sum()))
    return 0.5 * (float(np.abs(emp - ref).sum()) + tail)


def relaxed_poisson_tv(method: str, lam: float, tau: float, n: int, rng: RngStream,
                       z_max: int = 30, m: int = 50) -> float:
    cfg = RelaxConfig(method, tau=tau, z_max=z_max, m=m)
    fn = gumbel_softmax_poisson if cfg.method == "gumbel_softmax" else continuous_time_poisson
    with T.no_grad():
        soft = fn(np.full(n, float(lam)), cfg, rng, []).values
    return tv_distance(np.rint(soft), lambda k: stats.poisson.pmf(k, lam))


def distcheck(seed: int = 0, n: int = 10_000, lam: float = 3.0, tol: float = 0.05) -> list[dict]:
    rng = RngStream(seed).child("distcheck")
    out = []
    for method in ("gumbel_softmax", "continuous_time"):
        tv = {tau: relaxed_poisson_tv(method, lam, tau, n, rng.child(f"{method}:{tau}"))
              for tau in (0.05, 0.5)}
        out.append(_check(f"tv:{method}:tau=0.05", tv[0.05], tol, lam=lam, n=n))
        out.append(_check(f"tv:{method}:tau=0.5", tv[0.5], 1.0, passed=tv[0.05] <= tv[0.5],
                          lam=lam, n=n, note="passes when TV does not shrink as tau grows"))
    return out


# klcheck ------------------------------------------------------------------

def mc_kl_estimate(post: tuple[float, float], prior: tuple[float, float], n: int,
                   rng: RngStream) -> tuple[float, float]:
    """Mean and standard error of log q(z) - log p(z) over ``n`` exact posterior draws."""
    z = nb_sample_hard(NBParams(np.array(post[0]), np.array(post[1])), rng, size=(n,))
    with T.no_grad():
        terms = mc_kl_terms(NBParams(np.full(n, post[0]), np.full(n, post[1])),
                            NBParams(np.full(n, prior[0]), np.full(n, prior[1])),
                            z.astype(np.float64)).values
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(n))


KL_POINTS = (0.5, 1.0, 1.5)


def klcheck(seed: int = 0, n: int = 100_000, r: float = 2.0, p: float = 0.5) -> list[dict]:
    rng = RngStream(seed).child("klcheck")
    out = []
    for dp in KL_POINTS:
        with T.no_grad():
            closed = float(kl_dispersion_sharing(np.array([r]), np.array([p]), np.array([dp])).values)
        oracle = float(nb_kl_exact(r, p * dp, r, p))
        est, se = mc_kl_estimate((r, p * dp), (r, p), n, rng.child(str(dp)))
        out.append(_check(f"kl:mc_vs_closed:dp={dp}", abs(est - closed), 3 * se,
                          passed=abs(est - closed) <= 3 * se, estimate=est, se=se, closed=closed))
        out.append(_check(f"kl:mc_vs_oracle:dp={dp}", abs(est - oracle), 3 * se,
                          passed=abs(est - oracle) <= 3 * se, estimate=est, oracle=oracle))
        out.append(_check(f"kl:closed_vs_oracle:dp={dp}", abs(closed - oracle), 1e-9,
                          closed=closed, oracle=oracle))
    return out


def run_suite(name: str, seed: int = 0) -> list[dict]:
    if name == "gradcheck":
        return gradcheck(seed)
    if name == "distcheck":
        return distcheck(seed)
    if name == "klcheck":
        return klcheck(seed)
    raise ValueError(f"unknown verification suite {name!r}; choose from {SUITES}")


def is_unimodal(counts) -> bool:
    """Histogram of integer samples rises then falls, up to count noise.

    Bins have integer width max(1, round(sd / 2)). A reversal between adjacent
    bins is ignored when it is smaller than 2 * sqrt(c_j + c_{j+1}).
    """
    counts = np.asarray(counts, dtype=np.int64)
    w = max(1, int(round(counts.std() / 2)))
    edges = np.arange(counts.min(), counts.max() + w + 1, w)
    c, _ = np.histogram(counts, edges)
    mode = int(np.argmax(c))
    slack = 2.0 * np.sqrt(c[:-1] + c[1:])
    diff = np.diff(c)
    rising, falling = diff[:mode], diff[mode:]
    return bool(np.all(rising >= -slack[:mode]) and np.all(falling <= slack[mode:]))
