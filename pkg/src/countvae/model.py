"""Encoders, decoders and the three latent families (NegBio, Poisson, Gaussian).

Parameters live in a flat ``dict[str, Tensor]``. The encoder never emits the
posterior success probability ratio directly: it emits a logit, the posterior
probability is its sigmoid, and ``delta_p`` is that probability divided by the
prior's. The posterior therefore always stays inside (0, 1).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .dist import NBParams, RngStream
from .kl import (DISPERSION_SHARING, MONTE_CARLO, Q_MAX, KlMode,
                 kl_dispersion_sharing_terms, kl_gaussian_terms,
                 kl_poisson_terms, mc_kl_terms)
from .optim import ConfigError
from .relax import (CONTINUOUS_TIME, LatentSample, RelaxConfig, nb_rsample,
                    poisson_rsample)
from .tensor import (Tensor, as_tensor, clamp, exp, expand, matmul, mean,
                     parameter, sigmoid, softplus, straight_through, sum_)

VARIANTS = ("negbio", "poisson", "gaussian")
ARCHS = ("linear", "mlp")
DELTA_FLOOR = 1e-4
P_FLOOR = 1e-9


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    variant: str = "negbio"
    latent_dim: int = 10
    encoder_arch: str = "mlp"
    decoder_arch: str = "mlp"
    hidden: int = 256
    beta: float = 1.0
    kl_mode: str = DISPERSION_SHARING
    mc_samples: int = 1
    kl_on_hard: bool = False
    relax: str = CONTINUOUS_TIME
    tau: float = 0.1
    tau_anneal: bool = False
    z_max: int = 30
    m: int = 50
    straight_through: bool = False
    prior_r: float | list = 2.0
    prior_p: float | list = 0.5
    learn_prior: bool = False
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("encoder_arch", "decoder_arch"):
            if getattr(self, name) not in ARCHS:
                raise ConfigError(f"{name} must be one of {ARCHS}")
        if int(self.latent_dim) < 1 or int(self.hidden) < 1:
            raise ConfigError("latent_dim and hidden must be positive")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if int(self.epochs) < 0 or int(self.batch_size) < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        r = np.asarray(self.prior_r, dtype=float)
        p = np.asarray(self.prior_p, dtype=float)
        if np.any(~(r > 0)):
            raise ConfigError("prior_r must be positive")
        if np.any(~((p > 0) & (p < 1))):
            raise ConfigError("prior_p must lie in (0, 1)")
        for v in (r, p):
            if v.ndim and v.shape != (self.latent_dim,):
                raise ConfigError("per-unit priors need exactly latent_dim entries")
        # normalizes aliases and checks ranges
        self.kl_mode = KlMode(self.kl_mode, self.mc_samples).mode
        self.relax = RelaxConfig(self.relax, self.tau, self.z_max, self.m).method

    @property
    def kl(self) -> KlMode:
        return KlMode(self.kl_mode, self.mc_samples)

    def relax_config(self, tau: float | None = None) -> RelaxConfig:
        return RelaxConfig(self.relax, self.tau if tau is None else tau, self.z_max, self.m,
                           self.straight_through)

    def tau_at(self, epoch: int) -> float:
        if not self.tau_anneal:
            return self.tau
        frac = min(1.0, epoch / max(1.0, self.epochs / 2))
        return 1.0 + (self.tau - 1.0) * frac

    def n_heads(self) -> int:
        if self.variant == "gaussian":
            return 2
        if self.variant == "negbio" and self.kl_mode == MONTE_CARLO:
            return 2
        return 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def variant_suite(base: ModelConfig) -> dict[str, ModelConfig]:
    """The four NegBio variants: {DS, MC} KL x {Gumbel, continuous-time} sampling."""
    out = {}
    for kl_tag, kl_mode in (("DS", DISPERSION_SHARING), ("MC", MONTE_CARLO)):
        for rx_tag, relax in (("G", "gumbel_softmax"), ("C", CONTINUOUS_TIME)):
            out[f"{kl_tag}-{rx_tag}"] = base.replace(variant="negbio", kl_mode=kl_mode,
                                                     relax=relax)
    return out


# parameters --------------------------------------------------------------

def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def _glorot(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * s


def init_params(cfg: ModelConfig, n_features: int, rng: RngStream) -> dict[str, Tensor]:
    K, H, D = cfg.latent_dim, cfg.hidden, n_features
    params: dict[str, np.ndarray] = {}
    enc_in = D
    if cfg.encoder_arch == "mlp":
        params["enc.W0"] = _glorot(rng.child("enc.W0"), D, H)
        params["enc.b0"] = np.zeros(H)
        enc_in = H
    n_out = cfg.n_heads() * K
    params["enc.Wh"] = _glorot(rng.child("enc.Wh"), enc_in, n_out)
    bias = np.zeros(n_out)
    if cfg.variant == "negbio":
        p0 = np.broadcast_to(np.asarray(cfg.prior_p, dtype=float), (K,))
        bias[:K] = np.log(p0 / (1.0 - p0))
        if cfg.kl_mode == MONTE_CARLO:
            bias[K:] = _inv_softplus(1.0 - DELTA_FLOOR)
    elif cfg.variant == "poisson":
        bias[:] = _inv_softplus(1.0 - DELTA_FLOOR)
    params["enc.bh"] = bias
    if cfg.decoder_arch == "mlp":
        params["dec.W0"] = _glorot(rng.child("dec.W0"), K, H)
        params["dec.b0"] = np.zeros(H)
        params["dec.W1"] = _glorot(rng.child("dec.W1"), H, D)
        params["dec.b1"] = np.zeros(D)
    else:
        params["dec.W1"] = _glorot(rng.child("dec.W1"), K, D)
        params["dec.b1"] = np.zeros(D)
    if cfg.learn_prior and cfg.variant != "gaussian":
        r0 = np.broadcast_to(np.asarray(cfg.prior_r, dtype=float), (K,))
        params["prior.r_raw"] = np.log(np.expm1(r0))
        if cfg.variant == "negbio":
            p0 = np.broadcast_to(np.asarray(cfg.prior_p, dtype=float), (K,))
            params["prior.p_logit"] = np.log(p0 / (1.0 - p0))
    return {k: parameter(v.copy(), name=k) for k, v in params.items()}


def _linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    out = matmul(x, W)
    return out + expand(b, out.shape)


# forward -----------------------------------------------------------------

@dataclass
class EncoderOutput:
    variant: str
    logits: np.ndarray
    delta_r: Tensor | None = None
    delta_p: Tensor | None = None
    post_r: Tensor | None = None
    post_p: Tensor | None = None
    prior_r: Tensor | None = None
    prior_p: Tensor | None = None
    rate: Tensor | None = None
    mu: Tensor | None = None
    logvar: Tensor | None = None

    def posterior(self) -> NBParams:
        return NBParams(self.post_r, self.post_p)

    def prior(self) -> NBParams:
        return NBParams(self.prior_r, self.prior_p)

    def representation(self) -> np.ndarray:
        """Posterior mean code: NB mean, Poisson rate, or Gaussian mean."""
        if self.variant == "negbio":
            r, q = self.post_r.values, self.post_p.values
            return r * (1.0 - q) / q
        if self.variant == "poisson":
            return self.rate.values.copy()
        return self.mu.values.copy()


class CountVAE:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], n_features: int):
        self.cfg = cfg
        self.params = params
        self.n_features = n_features

    @classmethod
    def create(cls, cfg: ModelConfig, n_features: int, rng: RngStream | None = None):
        rng = rng or RngStream(cfg.seed).child("init")
        return cls(cfg, init_params(cfg, n_features, rng), n_features)

    def _prior(self, batch: int) -> tuple[Tensor, Tensor | None]:
        cfg, K = self.cfg, self.cfg.latent_dim
        if "prior.r_raw" in self.params:
            r = softplus(self.params["prior.r_raw"])
        else:
            r = Tensor(np.broadcast_to(np.asarray(cfg.prior_r, dtype=float), (K,)))
        p = None
        if cfg.variant == "negbio":
            if "prior.p_logit" in self.params:
                p = sigmoid(self.params["prior.p_logit"])
            else:
                p = Tensor(np.broadcast_to(np.asarray(cfg.prior_p, dtype=float), (K,)))
            p = expand(p, (batch, K))
        return expand(r, (batch, K)), p

    def encode(self, x, batch_index: int | None = None) -> EncoderOutput:
        cfg, P, K = self.cfg, self.params, self.cfg.latent_dim
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"encoder expects (batch, {self.n_features}) input, got {x.shape}")
        h = x
        if cfg.encoder_arch == "mlp":
            h = softplus(_linear(h, P["enc.W0"], P["enc.b0"]))
        heads = _linear(h, P["enc.Wh"], P["enc.bh"])
        if not np.all(np.isfinite(heads.values)):
            where = "" if batch_index is None else f" in batch {batch_index}"
            raise TrainingError(f"non-finite encoder activations{where}")
        B = x.shape[0]
        prior_r, prior_p = self._prior(B)
        first = heads[:, :K]
        if cfg.variant == "gaussian":
            logvar = clamp(heads[:, K:], -20.0, 10.0)
            return EncoderOutput("gaussian", heads.values, mu=first, logvar=logvar)
        if cfg.variant == "poisson":
            delta_r = softplus(first) + DELTA_FLOOR
            return EncoderOutput("poisson", heads.values, delta_r=delta_r, prior_r=prior_r,
                                 rate=prior_r * delta_r)
        post_p = clamp(sigmoid(first), P_FLOOR, Q_MAX)
        delta_p = post_p / prior_p
        if cfg.kl_mode == MONTE_CARLO:
            delta_r = softplus(heads[:, K:]) + DELTA_FLOOR
            post_r = prior_r * delta_r
        else:
            delta_r = Tensor(np.ones((B, K)))
            post_r = prior_r
        return EncoderOutput("negbio", heads.values, delta_r=delta_r, delta_p=delta_p,
                             post_r=post_r, post_p=post_p, prior_r=prior_r, prior_p=prior_p)

    def decode(self, z) -> Tensor:
        P = self.params
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ValueError(f"decoder expects (batch, {self.cfg.latent_dim}) latents, got {z.shape}")
        h = z
        if self.cfg.decoder_arch == "mlp":
            h = softplus(_linear(h, P["dec.W0"], P["dec.b0"]))
        return sigmoid(_linear(h, P["dec.W1"], P["dec.b1"]))

    def sample(self, enc: EncoderOutput, rng, tau: float | None = None,
               run_log: list | None = None) -> LatentSample:
        rcfg = self.cfg.relax_config(tau)
        if enc.variant == "negbio":
            return nb_rsample(enc.posterior(), rcfg, rng, run_log)
        if enc.variant == "poisson":
            return poisson_rsample(enc.rate, rcfg, rng, run_log)
        eps = Tensor(rng.normal(enc.mu.shape))
        z = enc.mu + exp(enc.logvar * 0.5) * eps
        return LatentSample(soft=z, hard=z.values.copy(), rates=enc.mu, z=z)

    def kl_terms(self, enc: EncoderOutput, samples: list[LatentSample]) -> Tensor:
        """Per-example, per-unit KL (batch, K)."""
        if enc.variant == "gaussian":
            return kl_gaussian_terms(enc.mu, enc.logvar)
        if enc.variant == "poisson":
            return kl_poisson_terms(enc.prior_r, enc.delta_r)
        if self.cfg.kl_mode == DISPERSION_SHARING:
            return kl_dispersion_sharing_terms(enc.prior_r, enc.prior_p, enc.delta_p)
        post, prior = enc.posterior(), enc.prior()
        total = None
        for s in samples:
            z = straight_through(s.hard, s.soft) if self.cfg.kl_on_hard else s.z
            term = mc_kl_terms(post, prior, z)
            total = term if total is None else total + term
        return total * (1.0 / len(samples))

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class MetricsRecord:
    loss: float
    recon_sse: float      # per example
    mse: float            # per pixel
    kl: float             # per example, summed over units
    kl_per_unit: np.ndarray
    elbo: float

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kl_per_unit"] = [float(v) for v in self.kl_per_unit]
        return d


def gaussian_elbo(recon_sse, kl, beta: float, n_features: int):
    """ELBO with decoder variance sigma^2 = beta / 2, constants included (NaN at beta = 0)."""
    if beta <= 0:
        return float("nan")
    return -(recon_sse / beta + kl) - 0.5 * n_features * math.log(math.pi * beta)


@dataclass
class ForwardPass:
    loss: Tensor
    record: MetricsRecord
    enc: EncoderOutput
    sample: LatentSample
    x_hat: Tensor
    kl_terms: Tensor
    sse: Tensor
    kl_sum: Tensor


def forward(model: CountVAE, x: np.ndarray, rng, tau: float | None = None,
            run_log: list | None = None, batch_index: int | None = None,
            beta: float | None = None) -> ForwardPass:
    """Loss = mean over the batch of ||x - x_hat||^2 + beta * KL."""
    cfg = model.cfg
    beta = cfg.beta if beta is None else beta
    enc = model.encode(x, batch_index)
    samples = [model.sample(enc, rng, tau, run_log)]
    if enc.variant == "negbio" and cfg.kl_mode == MONTE_CARLO:
        samples += [model.sample(enc, rng, tau, run_log) for _ in range(cfg.mc_samples - 1)]
    x_hat = model.decode(samples[0].z)
    diff = x_hat - Tensor(x)
    sse = sum_(diff * diff, axis=1)
    kl = model.kl_terms(enc, samples)
    kl_sum = sum_(kl, axis=1)
    loss = mean(sse + kl_sum * beta)
    if not np.isfinite(loss.values).all():
        where = "" if batch_index is None else f" at batch {batch_index}"
        raise TrainingError(
            f"non-finite loss{where}: recon={sse.values.mean():.6g} "
            f"kl={kl_sum.values.mean():.6g} max|logit|={np.abs(enc.logits).max():.6g}")
    B, D = x.shape
    recon = float(sse.values.mean())
    kl_mean = float(kl_sum.values.mean())
    rec = MetricsRecord(
        loss=float(loss.values), recon_sse=recon, mse=recon / D, kl=kl_mean,
        kl_per_unit=kl.values.mean(axis=0),
        elbo=float(gaussian_elbo(recon, kl_mean, beta, D)))
    return ForwardPass(loss, rec, enc, samples[0], x_hat, kl, sse, kl_sum)


def negative_elbo(fp: ForwardPass, beta: float, n_features: int) -> Tensor:
    """Batch-mean negative ELBO of a Gaussian decoder with variance beta / 2."""
    const = 0.5 * n_features * math.log(math.pi * beta)
    return mean(fp.sse) * (1.0 / beta) + mean(fp.kl_sum) + const
