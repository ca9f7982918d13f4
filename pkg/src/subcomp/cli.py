"""Command-line front end.

Subcommands:
  train     full-space training, writes a checkpoint (for transfer priors)
  bound     one pipeline run: train, quantize, encode, report the bounds
  grid      grid search over declared hyperparameter grids
  corrupt   write a corrupted copy of a dataset as an IDX file pair
  report    convert a JSON report to CSV

Configs are either JSON or `key = value` lines with `#` comments; dotted
keys nest (`train.lr = 0.01`). The --dataset flag / `dataset` key takes
  idx:<images_path>,<labels_path>
  synth:image,seed=0,n=4096,classes=10
  synth:blobs,seed=0,n=1024,dim=20,classes=4
  synth:random,seed=0,n=1024,dim=20,classes=4
"""

from __future__ import annotations

import argparse
import json
import struct
import sys

import numpy as np

from . import data as datamod
from . import nets, pipeline
from .data import Dataset
from .nets import ModelSpec
from .training import TrainConfig, train_full_space


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(p) for p in text.split(",")]
    return text


def parse_config(text: str) -> dict:
    """JSON object, or line-oriented `key = value` with dotted nesting."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key.strip()!r} nests into a scalar")
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path) -> dict:
    with open(path) as f:
        return parse_config(f.read())


def _as_tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(v)
    return (v,)


def parse_dataset_spec(spec: str) -> Dataset:
    if spec.startswith("idx:"):
        paths = spec[4:].split(",")
        if len(paths) != 2:
            raise ConfigError("idx: spec needs <images_path>,<labels_path>")
        return datamod.load_idx_dataset(paths[0], paths[1])
    if not spec.startswith("synth:"):
        raise ConfigError(f"unknown dataset spec {spec!r}")
    parts = spec[6:].split(",")
    kind, kw = parts[0], {}
    for part in parts[1:]:
        if "=" not in part:
            raise ConfigError(f"bad synth option {part!r}")
        k, v = part.split("=", 1)
        kw[k] = _parse_value(v)
    if kind == "image":
        return datamod.synth_image_dataset(
            seed=int(kw.get("seed", 0)), n=int(kw.get("n", 4096)),
            shape=(int(kw.get("height", 28)), int(kw.get("width", 28))),
            classes=int(kw.get("classes", 10)),
            prototypes_per_class=int(kw.get("prototypes", 8)),
            noise=float(kw.get("noise", 0.25)),
            cutoff=float(kw.get("cutoff", 0.15)),
            channels=int(kw["channels"]) if "channels" in kw else None,
            sample_seed=int(kw["sample_seed"]) if "sample_seed" in kw else None)
    if kind in ("blobs", "random"):
        return datamod.synth_dataset(
            seed=int(kw.get("seed", 0)), n=int(kw.get("n", 1024)),
            dim=int(kw.get("dim", 20)), classes=int(kw.get("classes", 4)),
            structure="clustered" if kind == "blobs" else "random")
    raise ConfigError(f"unknown synthetic dataset kind {kind!r}")


def build_run_config(cfg: dict) -> pipeline.RunConfig:
    try:
        m = dict(cfg["model"])
    except KeyError:
        raise ConfigError("config needs a [model] section (model.arch = ...)")
    m["input_shape"] = _as_tuple(m.get("input_shape", (28, 28)))
    if "hidden" in m:
        m["hidden"] = _as_tuple(m["hidden"])
    spec = ModelSpec(**m)
    train = TrainConfig(**cfg.get("train", {}))
    prior_train = cfg.get("prior_train")
    run_keys = ("projector_kind", "projector_seed", "sub_dim", "num_levels",
                "init_method", "prior_mode", "checkpoint_path", "prior_fraction",
                "delta", "alpha", "init_seed", "split_seed")
    kw = {k: cfg[k] for k in run_keys if k in cfg}
    return pipeline.RunConfig(
        model=spec, train=train,
        prior_train=TrainConfig(**prior_train) if prior_train else None, **kw)


def _apply_prior_flag(run: pipeline.RunConfig, flag: str) -> pipeline.RunConfig:
    from dataclasses import replace
    if flag == "scratch":
        return replace(run, prior_mode="scratch")
    if flag.startswith("transfer:"):
        return replace(run, prior_mode="transfer", checkpoint_path=flag[9:])
    if flag.startswith("datadep:"):
        return replace(run, prior_mode="data_dependent",
                       prior_fraction=float(flag[8:]))
    raise ConfigError(f"bad --prior value {flag!r}")


def _load_run(args) -> tuple[Dataset, pipeline.RunConfig, dict]:
    from dataclasses import replace
    cfg = load_config(args.config) if args.config else {}
    run = build_run_config(cfg)
    if args.prior:
        run = _apply_prior_flag(run, args.prior)
    if args.seed is not None:
        run = replace(run, train=replace(run.train, seed=args.seed),
                      init_seed=args.seed, projector_seed=args.seed,
                      split_seed=args.seed)
    if args.delta is not None:
        run = replace(run, delta=args.delta)
    spec_str = args.dataset or cfg.get("dataset")
    if not spec_str:
        raise ConfigError("no dataset given (flag --dataset or config key)")
    if isinstance(spec_str, list):  # comma-held spec split by the value parser
        spec_str = ",".join(str(p) for p in spec_str)
    ds = parse_dataset_spec(spec_str)
    corrupt = getattr(args, "corrupt", None) or cfg.get("corrupt")
    if corrupt:
        mode, _, cseed = str(corrupt).partition(":")
        ds = datamod.corrupt(ds, mode, int(cseed) if cseed else 0)
    return ds, run, cfg


def _write_idx_pair(ds: Dataset, stem: str):
    images = np.clip(np.round(ds.inputs * 255.0), 0, 255).astype(np.uint8)
    if images.ndim != 3:
        raise ConfigError("IDX export needs (n, H, W) images")
    n, rows, cols = images.shape
    with open(f"{stem}-images.idx", "wb") as f:
        f.write(struct.pack(">IIII", datamod.IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(f"{stem}-labels.idx", "wb") as f:
        f.write(struct.pack(">II", datamod.IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def cmd_train(args) -> int:
    ds, run, _ = _load_run(args)
    theta0 = nets.init_params(run.model, run.init_seed)
    fit = train_full_space(run.model, theta0, ds, run.train)
    theta = fit.w.astype(np.float32)
    risk = nets.zero_one_risk(run.model, theta, ds.inputs, ds.labels,
                              mode=run.train.bn_mode)
    pipeline.save_checkpoint(theta, args.out)
    print(f"trained {run.model.arch} for {run.train.epochs} epochs, "
          f"final loss {fit.loss_curve[-1]:.4f}, train error {risk:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_bound(args) -> int:
    ds, run, _ = _load_run(args)
    result = pipeline.compute_bound_pipeline(ds, run)
    r = result.report
    if args.blob and result.blob is not None:
        pipeline._atomic_write(args.blob, result.blob)
    report = {"schema_version": pipeline.REPORT_SCHEMA_VERSION,
              "runs": [r.to_dict()], "mdl": result.mdl,
              "summary": {"best_index": 0, "best_catoni": r.catoni}}
    if args.out:
        pipeline.emit_report(report, args.format, args.out)
    print(f"n={r.n} emp_risk={r.emp_risk:.4f} bits={r.ledger.total_bits:.1f} "
          f"kl={r.kl_nats:.1f} nats")
    print(f"catoni={r.catoni:.4f} (lambda={r.catoni_lambda:.1f}) "
          f"mcallester={r.mcallester:.4f}")
    if r.hoeffding_prior is not None:
        print(f"prior-only bound={r.hoeffding_prior:.4f}")
    return 0


def cmd_grid(args) -> int:
    ds, run, cfg = _load_run(args)
    grids = dict(cfg.get("grid", {}))
    for flag in args.grid or []:
        key, _, values = flag.partition("=")
        if not values:
            raise ConfigError(f"bad --grid value {flag!r}")
        parsed = _parse_value(values)
        grids[key] = parsed if isinstance(parsed, list) else [parsed]
    if not grids:
        raise ConfigError("grid search needs at least one grid")
    report = pipeline.grid_search(ds, run, grids, workers=args.workers)
    if args.out:
        pipeline.emit_report(report, args.format, args.out)
    s = report["summary"]
    best = report["runs"][s["best_index"]]
    print(f"{len(report['runs'])} runs, {len(s['failures'])} failed, "
          f"{s['hyperparameter_bits']:.2f} grid bits charged")
    bc = best["config"]
    print(f"best: d={bc.get('sub_dim')} L={bc.get('num_levels')} "
          f"init={bc.get('init_method')} catoni={s['best_catoni']:.4f} "
          f"emp_risk={best['emp_risk']:.4f}")
    return 0


def cmd_corrupt(args) -> int:
    ds = parse_dataset_spec(args.dataset)
    out = datamod.corrupt(ds, args.mode, args.seed or 0)
    _write_idx_pair(out, args.out)
    print(f"wrote {args.out}-images.idx / {args.out}-labels.idx ({len(out)} items)")
    return 0


def cmd_report(args) -> int:
    with open(getattr(args, "in")) as f:
        report = json.load(f)
    if report.get("schema_version") != pipeline.REPORT_SCHEMA_VERSION:
        raise ConfigError("unsupported report schema version")
    pipeline.emit_report(report, args.format, args.out)
    print(f"wrote {args.out}")
    return 0


def _add_run_flags(p, with_corrupt=True):
    p.add_argument("--config", help="config file (key = value or JSON)")
    p.add_argument("--dataset", help="dataset spec (idx:... or synth:...)")
    p.add_argument("--seed", type=int, help="override every seed at once")
    p.add_argument("--prior", help="scratch | transfer:<ckpt> | datadep:<frac>")
    p.add_argument("--delta", type=float, help="confidence parameter")
    if with_corrupt:
        p.add_argument("--corrupt", help="shuffle_labels[:seed] | shuffle_pixels[:seed]")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="subcomp",
        description="Train in random subspaces, compress, and certify risk.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="full-space training to a checkpoint")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bound", help="one certified run")
    _add_run_flags(p)
    p.add_argument("--out", help="report path")
    p.add_argument("--blob", help="compressed-weights output path")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(fn=cmd_bound)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    _add_run_flags(p)
    p.add_argument("--grid", action="append",
                   help="e.g. --grid sub_dim=250,500,1000 (repeatable)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="report path")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("corrupt", help="write a corrupted IDX dataset copy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", required=True,
                   choices=("shuffle_labels", "shuffle_pixels"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path stem")
    p.set_defaults(fn=cmd_corrupt)

    p = sub.add_parser("report", help="convert a JSON report to CSV")
    p.add_argument("--in", required=True, dest="in")
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
