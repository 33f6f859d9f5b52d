"""Command line: ``countvae {train,eval,sweep,verify}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, load_mnist, subsample, synth_bars
from .dist import RngStream
from .metrics import (DNR_THRESHOLD, LOGREG, ODI_EPS, kl_estimator_se, linear_probe,
                      odi_per_batch, shattering_dim)
from .model import ModelConfig, TrainingError
from .optim import ConfigError
from .training import (CheckpointError, csv_row, eval_stream, evaluate, load_checkpoint,
                       new_state, train)
from .verify import SUITES, run_suite

log = logging.getLogger("countvae")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
AXES = {"beta": "beta", "mc_samples": "mc_samples", "tau": "tau"}
SWEEP_HEADER = ("axis", "value", "status", "mse", "kl", "elbo", "odi", "dnr", "kl_se", "kl_se_final")


@dataclass
class RunConfig:
    model: ModelConfig
    dataset: str = "mnist"
    data_dir: str | None = None
    out: str = "runs/latest"
    n_train: int | None = 2048
    synth_n: int = 2000
    synth_side: int = 8
    odi_per_batch: bool = True
    odi_batch_size: int = 256
    odi_samples: int = 200
    probes: list = field(default_factory=list)
    shattering: bool = False
    kl_se_repeats: int = 400
    kl_se_batch: int = 16
    beta_grid: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    mc_samples_grid: list = field(default_factory=lambda: [1, 4, 16, 64])
    tau_grid: list = field(default_factory=lambda: [0.05, 0.1, 0.3])

    def to_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "model"}
        d.update(self.model.to_dict())
        return d


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"model"}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    unknown = sorted(set(raw) - _MODEL_KEYS - _RUN_KEYS)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    try:
        model = ModelConfig(**{k: v for k, v in raw.items() if k in _MODEL_KEYS})
        run = RunConfig(model, **{k: v for k, v in raw.items() if k in _RUN_KEYS})
    except TypeError as e:
        raise ConfigError(f"{source}: {e}")
    if run.dataset not in ("mnist", "synth_bars"):
        raise ConfigError(f"{source}: dataset must be 'mnist' or 'synth_bars'")
    return run


def read_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(path))


def resolve_data_dir(run: RunConfig, override: str | None) -> str | None:
    return override or run.data_dir or os.environ.get("COUNTVAE_DATA_DIR")


def load_dataset(run: RunConfig, split: str = "train") -> Dataset:
    seed = run.model.seed
    if run.dataset == "synth_bars":
        return synth_bars(run.synth_n, run.synth_side, RngStream(seed).child("bars").child(split))
    if not run.data_dir:
        raise FileNotFoundError("no MNIST directory: pass --data-dir, set data_dir, "
                                "or set COUNTVAE_DATA_DIR")
    ds = load_mnist(run.data_dir, split)
    if split == "train" and run.n_train:
        ds = subsample(ds, run.n_train, RngStream(seed).child("subsample"))
    return ds


def _portable(run: RunConfig) -> dict:
    """Run config without the output location, so identical runs give identical files."""
    d = run.to_dict()
    d.pop("out")
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _apply_overrides(run: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        run.model = run.model.replace(seed=args.seed)
    run.data_dir = resolve_data_dir(run, getattr(args, "data_dir", None))
    if getattr(args, "out", None):
        run.out = args.out
    return run


def full_report(state, run: RunConfig, dataset: Dataset, split: str, odi_flag: bool,
                probes: list, shattering: bool) -> dict:
    cfg = state.cfg
    rep = evaluate(state.model, dataset, eval_stream(cfg), cfg.tau)
    if odi_flag:
        batch = dataset.images[:run.odi_batch_size]
        rep.odi_per_batch = odi_per_batch(state.model, batch, RngStream(cfg.seed).child("odi"),
                                          run.odi_samples)
    if probes or shattering:
        codes = _codes(state.model, dataset.images)
        for n in probes:
            rep.probe_accuracies[str(n)] = linear_probe(
                codes, dataset.labels, int(n), RngStream(cfg.seed).child("probe").child(int(n)))
        if shattering:
            n_classes = int(dataset.labels.max()) + 1
            if n_classes % 2:
                raise ConfigError(f"shattering needs an even class count, {run.dataset} has {n_classes}")
            rng = RngStream(cfg.seed).child("shattering")
            rep.shattering = shattering_dim(codes, dataset.labels, rng)
            shuffled = rng.child("control").permutation(len(dataset.labels))
            rep.shattering_control = shattering_dim(codes, dataset.labels[shuffled], rng)
    rep.settings = {"odi_eps": ODI_EPS, "dnr_threshold": DNR_THRESHOLD, "logreg": LOGREG,
                    "split": split, "n_samples": len(dataset)}
    return rep.to_dict()


def _codes(model, images: np.ndarray, batch: int = 512) -> np.ndarray:
    from .tensor import no_grad
    out = []
    with no_grad():
        for lo in range(0, len(images), batch):
            out.append(model.encode(images[lo:lo + batch]).representation())
    return np.concatenate(out)


# commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    run = _apply_overrides(read_config(args.config), args)
    ds = load_dataset(run, "train")
    out = Path(run.out)
    state, reports = train(ds, run.model, out, meta={"run": _portable(run)},
                           progress=lambda e, r: log.info("epoch %d mse %.6f kl %.4f", e, r.mse,
                                                          r.kl_total))
    report = full_report(state, run, ds, "train", run.odi_per_batch, run.probes, run.shattering)
    _write_json(out / "report.json", {"config": run.to_dict(), "seed": run.model.seed,
                                      "metrics": report, "epochs": len(reports),
                                      "warnings": len(state.run_log)})
    _write_json(out / "run_log.json", {"config": run.to_dict(), "seed": run.model.seed,
                                       "warnings": state.run_log})
    print(json.dumps({"out": str(out), "mse": report["mse"], "kl_total": report["kl_total"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    meta = state.meta.get("run")
    if args.config:
        run = read_config(args.config)
    elif meta is not None:
        run = parse_config(json.dumps(meta), f"{args.checkpoint} (embedded run config)")
    else:
        run = RunConfig(state.cfg)
    run.model = state.cfg
    run.data_dir = resolve_data_dir(run, args.data_dir)
    ds = load_dataset(run, args.split)
    report = full_report(state, run, ds, args.split, args.odi_per_batch or run.odi_per_batch,
                         args.probe or run.probes, args.shattering or run.shattering)
    doc = {"config": run.to_dict(), "seed": state.cfg.seed, "checkpoint": str(args.checkpoint),
           "metrics": report}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval_report.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def sweep_values(run: RunConfig, axis: str) -> list:
    grid = getattr(run, f"{axis}_grid")
    if not grid:
        raise ConfigError(f"sweep grid for {axis} is empty")
    return list(grid)


def cmd_sweep(args) -> int:
    if args.axis not in AXES:
        raise ConfigError(f"--axis must be one of {sorted(AXES)}")
    run = _apply_overrides(read_config(args.config), args)
    ds = load_dataset(run, "train")
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in sweep_values(run, args.axis):
        sub = out / f"{args.axis}={value}"
        try:
            cfg = run.model.replace(**{AXES[args.axis]: value})
            state, reports = train(ds, cfg, sub, meta={"run": _portable(run),
                                                       "sweep": {args.axis: value}})
            x = ds.images[:run.kl_se_batch]
            se_rng = RngStream(cfg.seed).child("kl_se")
            # initial parameters are shared by every grid point (same seed)
            se = kl_estimator_se(new_state(cfg, ds.n_features).model, x, se_rng.child("init"),
                                 int(cfg.mc_samples), run.kl_se_repeats)
            se_final = kl_estimator_se(state.model, x, se_rng.child("final"),
                                       int(cfg.mc_samples), run.kl_se_repeats)
            last = reports[-1] if reports else evaluate(state.model, ds, eval_stream(cfg), cfg.tau)
            rows.append([args.axis, repr(value), "ok"] + csv_row(0, last)[1:]
                        + [repr(float(se)), repr(float(se_final))])
        except (ConfigError, TrainingError, ValueError, ArithmeticError) as e:
            log.error("sweep point %s=%s failed: %s", args.axis, value, e)
            rows.append([args.axis, repr(value), f"failed: {e}"] + [""] * 7)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    w.writerows(rows)
    (out / f"sweep_{args.axis}.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
    _write_json(out / f"sweep_{args.axis}.json", {"config": run.to_dict(), "seed": run.model.seed,
                                                  "axis": args.axis, "rows": rows})
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    checks = run_suite(args.suite, seed)
    ok = all(c["passed"] for c in checks)
    doc = {"suite": args.suite, "seed": seed, "passed": ok, "checks": checks,
           "failed": [c["name"] for c in checks if not c["passed"]]}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"verify_{args.suite}.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    if not ok:
        print(f"verification failed: {', '.join(doc['failed'])}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="countvae", description="Count-latent VAE toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, metavar="PATH")
        p.add_argument("--data-dir", metavar="PATH")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--seed", type=int, metavar="U64")

    p = sub.add_parser("train", help="train a model from a JSON config")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--odi-per-batch", action="store_true")
    p.add_argument("--probe", type=int, action="append", default=[], metavar="N")
    p.add_argument("--shattering", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="one run per grid value along an axis")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="run a self-check suite")
    p.add_argument("suite", choices=SUITES)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--seed", type=int, metavar="U64")
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
