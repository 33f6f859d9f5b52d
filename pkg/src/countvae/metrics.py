"""Latent diagnostics (ODI, DNR) and representation probes (linear probes, shattering)."""
from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .data import probe_split
from .dist import NBParams, RngStream, nb_sample_hard
from .tensor import no_grad

ODI_EPS = 1e-8
DNR_THRESHOLD = 0.01
LOGREG = {"iters": 500, "lr": 0.1, "l2": 1e-4}


@dataclass
class MetricsReport:
    mse: float
    elbo: float
    kl_total: float
    kl_per_unit: list
    odi_aggregate: float
    odi_aggregate_mean: float
    dnr: float
    odi_per_batch: float | None = None
    probe_accuracies: dict = field(default_factory=dict)
    shattering: float | None = None
    shattering_control: float | None = None
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.dnr <= 1.0:
            raise ValueError(f"dnr must lie in [0, 1], got {self.dnr}")
        for acc in list(self.probe_accuracies.values()) + [self.shattering]:
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy out of range: {acc}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kl_per_unit"] = [float(v) for v in self.kl_per_unit]
        d["probe_accuracies"] = {str(k): float(v) for k, v in self.probe_accuracies.items()}
        return {k: v for k, v in d.items() if v is not None}

    def to_json(self, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True)


# dispersion ---------------------------------------------------------------

def odi(z, eps: float = ODI_EPS) -> tuple[np.ndarray, float]:
    """Per-unit Var(z)/(E[z] + eps) over the rows of ``z`` and its mean over units."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] < 2:
        raise ValueError(f"odi needs at least 2 samples, got {z.shape[0]}")
    per_unit = z.var(axis=0, ddof=1) / (z.mean(axis=0) + eps)
    return per_unit, float(per_unit.mean())


def cellwise_odi(draws, eps: float = ODI_EPS) -> float:
    """Mean ODI over (input, unit) cells of repeated posterior draws shaped (S, B, K).

    Cells whose draws are all zero carry no dispersion information and are skipped.
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.shape[0] < 2:
        raise ValueError("cellwise_odi needs at least 2 draws per cell")
    mu = draws.mean(axis=0)
    keep = np.any(draws != 0, axis=0)
    if not keep.any():
        return 0.0
    ratio = draws.var(axis=0, ddof=1) / (mu + eps)
    return float(ratio[keep].mean())


def posterior_draws(model, x_batch, rng: RngStream, n_samples: int = 200) -> np.ndarray:
    """Exact (unrelaxed) posterior draws for a fixed batch, shaped (S, B, K)."""
    with no_grad():
        enc = model.encode(np.asarray(x_batch, dtype=np.float64))
    if enc.variant == "negbio":
        B, K = enc.post_p.shape
        return nb_sample_hard(NBParams(enc.post_r.values, enc.post_p.values), rng,
                              size=(n_samples, B, K)).astype(np.float64)
    if enc.variant == "poisson":
        lam = np.broadcast_to(enc.rate.values, (n_samples,) + enc.rate.shape)
        return rng.poisson(lam).astype(np.float64)
    mu, sd = enc.mu.values, np.exp(0.5 * enc.logvar.values)
    return mu + sd * rng.normal((n_samples,) + mu.shape)


def odi_per_batch(model, x_batch, rng: RngStream, n_samples: int = 200,
                  eps: float = ODI_EPS) -> float:
    """ODI of repeated posterior draws for one fixed batch, without pooling across inputs."""
    return cellwise_odi(posterior_draws(model, x_batch, rng, n_samples), eps)


def dnr(kl_per_unit, threshold: float = DNR_THRESHOLD) -> float:
    kl = np.asarray(kl_per_unit, dtype=np.float64).ravel()
    if not kl.size:
        raise ValueError("dnr needs at least one unit")
    return float(np.mean(kl < threshold))


# probes -------------------------------------------------------------------

def _standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(a - mu) / sd for a in (train,) + others]


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(X: np.ndarray, y: np.ndarray, n_classes: int, iters: int = LOGREG["iters"],
                 lr: float = LOGREG["lr"], l2: float = LOGREG["l2"]) -> np.ndarray:
    """Multinomial logistic regression by full-batch gradient descent.

    Returns weights of shape (features + 1, n_classes); the last row is the bias.
    """
    n = len(X)
    Xb = np.hstack([X, np.ones((n, 1))])
    Y = np.eye(n_classes)[y]
    W = np.zeros((Xb.shape[1], n_classes))
    reg = np.ones((Xb.shape[1], 1))
    reg[-1] = 0.0
    for _ in range(iters):
        P = _softmax_rows(Xb @ W)
        grad = Xb.T @ (P - Y) / n + l2 * reg * W
        W -= lr * grad
    return W


def predict_logistic(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.argmax(np.hstack([X, np.ones((len(X), 1))]) @ W, axis=1)


def linear_probe(latents, labels, n: int, rng: RngStream, half: int | None = None) -> float:
    """Train on ``n`` labelled codes from one half, report accuracy on the disjoint other half."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pool, held = probe_split(len(labels), rng.child("split"), half)
    if n > len(pool):
        raise ValueError(f"probe asks for {n} labelled samples but the pool has {len(pool)}")
    train = np.sort(rng.child("draw").choice(len(pool), n))
    tr = pool[train]
    Xtr, Xte = _standardize(latents[tr], latents[held])
    W = fit_logistic(Xtr, labels[tr], int(labels.max()) + 1)
    return float(np.mean(predict_logistic(W, Xte) == labels[held]))


def balanced_partitions(n_classes: int) -> list[tuple[int, ...]]:
    """Every class subset of size C/2; a subset and its complement count as separate tasks."""
    if n_classes < 2 or n_classes % 2:
        raise ValueError(f"balanced partitions need an even class count >= 2, got {n_classes}")
    return list(itertools.combinations(range(n_classes), n_classes // 2))


def shattering_dim(latents, labels, rng: RngStream, budget: int | None = None,
                   iters: int = LOGREG["iters"], lr: float = LOGREG["lr"],
                   l2: float = LOGREG["l2"]) -> float:
    """Mean held-out accuracy of binary logistic regressions over all balanced class splits.

    All tasks are fitted together as independent columns of one weight matrix.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    tasks = balanced_partitions(n_classes)
    pool, held = probe_split(len(labels), rng.child("split"))
    if budget is not None:
        if budget > len(pool):
            raise ValueError(f"budget {budget} exceeds the pool of {len(pool)}")
        pool = pool[np.sort(rng.child("draw").choice(len(pool), budget))]
    member = np.zeros((n_classes, len(tasks)))
    for t, subset in enumerate(tasks):
        member[list(subset), t] = 1.0
    Ytr, Yte = member[labels[pool]], member[labels[held]]
    Xtr, Xte = _standardize(latents[pool], latents[held])
    Xtr = np.hstack([Xtr, np.ones((len(Xtr), 1))])
    Xte = np.hstack([Xte, np.ones((len(Xte), 1))])
    W = np.zeros((Xtr.shape[1], len(tasks)))
    reg = np.ones((Xtr.shape[1], 1))
    reg[-1] = 0.0
    for _ in range(iters):
        P = 1.0 / (1.0 + np.exp(-(Xtr @ W)))
        W -= lr * (Xtr.T @ (P - Ytr) / len(Xtr) + l2 * reg * W)
    acc = np.mean(((Xte @ W) > 0) == (Yte > 0.5), axis=0)
    return float(acc.mean())


def kl_estimator_se(model, x, rng: RngStream, n: int, repeats: int = 200,
                    chunk: int = 4096) -> float:
    """Standard deviation of the n-draw Monte Carlo KL estimate (batch mean, summed over units).

    Zero for closed-form KLs. Draws use the model's relaxation, as in training.
    """
    from .kl import mc_kl_terms
    from .relax import nb_rsample

    with no_grad():
        enc = model.encode(np.asarray(x, dtype=np.float64))
    cfg = model.cfg
    if enc.variant != "negbio" or cfg.kl_mode != "monte_carlo":
        return 0.0
    if repeats < 2:
        raise ValueError("need at least 2 repeats for a standard error")
    B, K = enc.post_p.shape
    params = [t.values for t in (enc.post_r, enc.post_p, enc.prior_r, enc.prior_p)]
    total = repeats * n
    per_draw = np.empty(total)
    step = max(1, chunk // B)
    rcfg = cfg.relax_config()
    with no_grad():
        for i, lo in enumerate(range(0, total, step)):
            c = min(step, total - lo)
            tiled = [np.tile(v, (c, 1)) for v in params]
            post, prior = NBParams(tiled[0], tiled[1]), NBParams(tiled[2], tiled[3])
            s = nb_rsample(post, rcfg, rng.child(i), [])
            z = s.hard if cfg.kl_on_hard else s.z.values
            terms = mc_kl_terms(post, prior, z).values.sum(axis=1)
            per_draw[lo:lo + c] = terms.reshape(c, B).mean(axis=1)
    est = per_draw.reshape(repeats, n).mean(axis=1)
    return float(est.std(ddof=1))
