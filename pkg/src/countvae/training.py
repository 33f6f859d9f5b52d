"""Training loop, evaluation pass and checkpoint files."""
from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, batch_indices
from .dist import RngStream
from .kl import MONTE_CARLO, nb_kl_exact
from .metrics import MetricsReport, dnr, odi
from .model import CountVAE, ModelConfig, forward, gaussian_elbo
from .optim import AdamState, adam_step, clip_grad_norm
from .tensor import Tensor, backward, get_tape, no_grad, parameter

CSV_HEADER = ("epoch", "mse", "kl", "elbo", "odi", "dnr")
EVAL_BATCH = 256

CKPT_MAGIC = b"CVAECKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    model: CountVAE
    opt: AdamState
    epoch: int = 0
    rng: RngStream = field(default_factory=RngStream)
    run_log: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.params


def new_state(cfg: ModelConfig, n_features: int) -> TrainState:
    root = RngStream(cfg.seed)
    model = CountVAE.create(cfg, n_features, root.child("init"))
    return TrainState(model, AdamState(), 0, root, [])


def train_step(state: TrainState, x: np.ndarray, rng, tau: float | None = None,
               batch_index: int | None = None):
    """One Adam step on batch ``x``; returns the pre-update metrics record."""
    tape = get_tape()
    tape.clear()
    params = state.params
    for p in params.values():
        p.zero_grad()
    fp = forward(state.model, x, rng, tau, state.run_log, batch_index)
    backward(fp.loss, tape)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.values))
             for k, p in params.items()}
    tape.clear()
    clip_grad_norm(grads, state.cfg.clip_norm)
    adam_step(params, grads, state.opt, lr=state.cfg.lr)
    for p in params.values():
        p.zero_grad()
    return fp.record


def evaluate(model: CountVAE, dataset: Dataset, rng: RngStream,
             tau: float | None = None, batch_size: int = EVAL_BATCH,
             run_log: list | None = None) -> MetricsReport:
    """Deterministic pass over ``dataset`` in order with a fixed stream.

    KL per unit is exact: closed form where one exists, truncated summation for
    NB posteriors with their own dispersion.
    """
    cfg = model.cfg
    N, D = dataset.images.shape
    sse = 0.0
    kl_units = np.zeros(cfg.latent_dim)
    hard, means = [], []
    log = [] if run_log is None else run_log
    with no_grad():
        for b, idx in enumerate(batch_indices(N, batch_size)):
            x = dataset.images[idx]
            enc = model.encode(x, b)
            sample = model.sample(enc, rng.child(b), tau, log)
            x_hat = model.decode(sample.z).values
            sse += float(np.sum((x_hat - x) ** 2))
            if enc.variant == "negbio" and cfg.kl_mode == MONTE_CARLO:
                kl = nb_kl_exact(enc.post_r.values, enc.post_p.values,
                                 enc.prior_r.values, enc.prior_p.values)
            else:
                kl = model.kl_terms(enc, [sample]).values
            kl_units += kl.sum(axis=0)
            hard.append(sample.hard)
            means.append(enc.representation())
    kl_units /= N
    kl_total = float(kl_units.sum())
    mse = sse / (N * D)
    z = np.concatenate(hard)
    return MetricsReport(
        mse=mse, elbo=float(gaussian_elbo(sse / N, kl_total, cfg.beta, D)),
        kl_total=kl_total, kl_per_unit=[float(v) for v in kl_units],
        odi_aggregate=odi(z)[1], odi_aggregate_mean=odi(np.concatenate(means))[1],
        dnr=dnr(kl_units))


def eval_stream(cfg: ModelConfig) -> RngStream:
    return RngStream(cfg.seed).child("eval")


def csv_row(epoch: int, rep: MetricsReport) -> list[str]:
    return [str(epoch)] + [repr(float(v)) for v in
                           (rep.mse, rep.kl_total, rep.elbo, rep.odi_aggregate, rep.dnr)]


def train(dataset: Dataset, cfg: ModelConfig, out_dir=None, state: TrainState | None = None,
          progress=None, meta: dict | None = None) -> tuple[TrainState, list[MetricsReport]]:
    """Train for ``cfg.epochs`` epochs (continuing ``state`` if given).

    After each epoch the model is evaluated on the training set with the fixed
    evaluation stream; with ``out_dir`` the rows go to ``train_log.csv`` and the
    final state to ``checkpoint.bin``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = state or new_state(cfg, dataset.n_features)
    if meta:
        state.meta.update(meta)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {out}: {e}") from e
    reports: list[MetricsReport] = []
    rows: list[list[str]] = []
    root = state.rng
    while state.epoch < cfg.epochs:
        e = state.epoch
        tau = cfg.tau_at(e)
        order = batch_indices(len(dataset), cfg.batch_size, root.child("batches").child(e))
        for step, idx in enumerate(order):
            rng = root.child("train").child(e).child(step)
            train_step(state, dataset.images[idx], rng, tau, step)
        state.epoch += 1
        rep = evaluate(state.model, dataset, eval_stream(cfg), cfg.tau, run_log=state.run_log)
        reports.append(rep)
        rows.append(csv_row(state.epoch, rep))
        if progress is not None:
            progress(state.epoch, rep)
    if out is not None:
        write_csv(out / "train_log.csv", rows)
        save_checkpoint(state, out / "checkpoint.bin")
    return state, reports


def write_csv(path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    try:
        Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


# checkpoints ---------------------------------------------------------------
#
# layout: magic (8 bytes) | u32 version | u64 header length | JSON header |
#         float64 little-endian payload, tensors in header order

def _tensor_table(state: TrainState) -> list[tuple[str, np.ndarray]]:
    items = [(f"param/{k}", p.values) for k, p in sorted(state.params.items())]
    for k in sorted(state.opt.m):
        items.append((f"adam.m/{k}", state.opt.m[k]))
        items.append((f"adam.v/{k}", state.opt.v[k]))
    return items


def checkpoint_bytes(state: TrainState) -> bytes:
    table = _tensor_table(state)
    index, offset = [], 0
    for name, arr in table:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "meta": state.meta,
        "n_features": state.model.n_features,
        "optimizer": {"name": "adam", "step": state.opt.step},
        "rng": {"seed": state.rng.seed, "path": list(state.rng.path),
                "state": state.rng.get_state()},
        "tensors": index,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in table)
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + payload


def save_checkpoint(state: TrainState, path) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(state))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> TrainState:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {CKPT_VERSION}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        lo = base + t["offset"]
        if lo + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated payload at tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=lo) \
            .reshape(t["shape"]).astype(np.float64)
    cfg = ModelConfig(**header["config"])
    params = {k.split("/", 1)[1]: parameter(v, name=k.split("/", 1)[1])
              for k, v in arrays.items() if k.startswith("param/")}
    opt = AdamState(step=header["optimizer"]["step"],
                    m={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam.m/")},
                    v={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam.v/")})
    rng = RngStream(header["rng"]["seed"], tuple(header["rng"]["path"]))
    rng.set_state(header["rng"]["state"])
    model = CountVAE(cfg, params, header["n_features"])
    return TrainState(model, opt, header["epoch"], rng, [], header.get("meta", {}))
