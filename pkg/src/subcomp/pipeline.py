"""Run orchestration: train in a subspace, quantize, encode, convert the
bit ledger into bounds, and persist/reconstruct certified models.

The certificate contract: given the run config (seeds and specs, all of
which are fixed before seeing data) plus the compressed-weights blob, a
fresh process rebuilds the exact certified parameter vector and
reproduces the reported empirical risk bit for bit.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import struct
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import bounds as bnd
from . import coding, nets, quantize
from .data import Dataset, split_prior_holdout
from .nets import ModelSpec
from .projectors import Projector, ProjectorSpec, make_projector
from .training import TrainConfig, train_full_space, train_quantize, train_subspace

CHECKPOINT_MAGIC = b"OCKP"
CHECKPOINT_VERSION = 1
REPORT_SCHEMA_VERSION = 1

CSV_COLUMNS = ["run", "prior_mode", "sub_dim", "num_levels", "init_method",
               "emp_risk", "catoni", "mcallester", "hoeffding_prior",
               "kl_nats", "total_bits", "n", "delta"]


class PipelineError(RuntimeError):
    def __init__(self, stage: str, config: dict, cause: Exception):
        super().__init__(f"stage {stage!r} failed for config {config}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    model: ModelSpec
    train: TrainConfig
    projector_kind: str = "kron_product"
    projector_seed: int = 0
    sub_dim: int = 1000
    num_levels: int = 7
    init_method: str = "uniform"
    prior_mode: str = "scratch"  # "scratch" | "transfer" | "data_dependent"
    checkpoint_path: str | None = None
    prior_fraction: float = 0.5
    prior_train: TrainConfig | None = None
    delta: float = bnd.DEFAULT_DELTA
    alpha: float = bnd.DEFAULT_ALPHA
    init_seed: int = 0
    split_seed: int = 0
    grid_sizes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.prior_mode not in ("scratch", "transfer", "data_dependent"):
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")
        if self.prior_mode == "transfer" and not self.checkpoint_path:
            raise ValueError("transfer mode needs a checkpoint path")
        if self.prior_mode == "data_dependent" and not (0 < self.prior_fraction < 1):
            raise ValueError("prior fraction must lie in (0, 1)")
        if self.sub_dim < 0:
            raise ValueError("sub_dim must be >= 0 (0 = pure prior)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["input_shape"] = list(self.model.input_shape)
        d["model"]["hidden"] = list(self.model.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        m = dict(d.pop("model"))
        m["input_shape"] = tuple(m["input_shape"])
        m["hidden"] = tuple(m.get("hidden", ()))
        t = TrainConfig(**d.pop("train"))
        pt = d.pop("prior_train", None)
        return cls(model=ModelSpec(**m), train=t,
                   prior_train=TrainConfig(**pt) if pt else None, **d)


@dataclass
class RunResult:
    report: bnd.BoundReport
    blob: bytes | None  # compressed-weights file contents (None when d=0)
    theta_hat: np.ndarray
    mdl: dict
    loss_curves: dict


def _film_mask(spec: ModelSpec) -> np.ndarray:
    return spec.head_coords()


def projector_for(cfg: RunConfig, spec: ModelSpec) -> Projector:
    mask = None
    if cfg.projector_kind in ("film", "film_plus_kron"):
        mask = _film_mask(spec)
    return make_projector(ProjectorSpec(
        kind=cfg.projector_kind, big_dim=spec.num_params, sub_dim=cfg.sub_dim,
        seed=cfg.projector_seed, film_mask=mask))


def _theta0_for(cfg: RunConfig, spec: ModelSpec, prior_theta=None) -> np.ndarray:
    if cfg.prior_mode == "scratch":
        return nets.init_params(spec, cfg.init_seed)
    if cfg.prior_mode == "transfer":
        theta0 = load_checkpoint(cfg.checkpoint_path)
        if len(theta0) != spec.num_params:
            raise ValueError(
                f"checkpoint has {len(theta0)} params, model needs {spec.num_params}")
        # Fresh head on the downstream task, taken from the seeded init so
        # the prior stays reconstructible without extra bits.
        fresh = nets.init_params(spec, cfg.init_seed)
        head = spec.head_coords()
        theta0 = theta0.copy()
        theta0[head] = fresh[head]
        return theta0
    if prior_theta is None:
        raise ValueError("data-dependent mode needs the trained prior vector")
    return prior_theta


def compute_bound_pipeline(dataset: Dataset, cfg: RunConfig) -> RunResult:
    """Full pipeline per run: subspace training, quantization-aware
    training, certified-risk evaluation with half-precision coding levels,
    arithmetic encoding, and all bound families."""
    spec = cfg.model
    if dataset.input_shape != tuple(spec.input_shape):
        raise PipelineError("setup", cfg.to_dict(), ValueError(
            f"dataset shape {dataset.input_shape} vs model {spec.input_shape}"))
    D = spec.num_params
    curves = {}

    hoeffding_prior = None
    if cfg.prior_mode == "data_dependent":
        prior_set, eval_set = split_prior_holdout(
            dataset, cfg.prior_fraction, cfg.split_seed)
        prior_cfg = cfg.prior_train or cfg.train
        try:
            prior_fit = train_full_space(
                spec, nets.init_params(spec, cfg.init_seed), prior_set, prior_cfg)
        except Exception as e:
            raise PipelineError("prior_training", cfg.to_dict(), e)
        prior_theta = prior_fit.w.astype(np.float32)
        curves["prior"] = prior_fit.loss_curve
        train_set = eval_set
        prior_risk = nets.zero_one_risk(spec, prior_theta, eval_set.inputs,
                                        eval_set.labels, mode=cfg.train.bn_mode)
        hoeffding_prior = bnd.hoeffding_prior_bound(
            prior_risk, len(eval_set), D, cfg.delta)
        theta0 = _theta0_for(cfg, spec, prior_theta)
    else:
        train_set = dataset
        try:
            theta0 = _theta0_for(cfg, spec)
        except (OSError, ValueError) as e:
            raise PipelineError("setup", cfg.to_dict(), e)

    n_bound = len(train_set)
    dimension_bits = math.ceil(math.log2(D))
    hyper_bits = bnd.hyperparam_bits(cfg.grid_sizes) if cfg.grid_sizes else 0.0

    if cfg.sub_dim == 0:
        # Pure prior: theta = theta0, no message beyond dimension/grid bits.
        theta_hat = theta0.astype(np.float32)
        ledger = bnd.BitLedger(hyperparameter_bits=hyper_bits,
                               dimension_bits=dimension_bits)
        blob = None
    else:
        P = projector_for(cfg, spec)
        try:
            fit = train_subspace(spec, theta0, P, train_set, cfg.train)
        except Exception as e:
            raise PipelineError("train_subspace", cfg.to_dict(), e)
        curves["subspace"] = fit.loss_curve
        if cfg.num_levels == 0:
            # "L = 0" config alias: no learned codebook; coordinates are
            # stored directly in half precision, 16 bits each.
            w_half = np.float16(fit.w)
            theta_hat = (theta0.astype(np.float64)
                         + P.apply(w_half.astype(np.float64))).astype(np.float32)
            ledger = bnd.BitLedger(payload_bits=16 * cfg.sub_dim,
                                   hyperparameter_bits=hyper_bits,
                                   dimension_bits=dimension_bits)
            blob = None
        else:
            try:
                qfit = train_quantize(spec, theta0, P, fit.w, cfg.num_levels,
                                      cfg.init_method, train_set, cfg.train)
            except Exception as e:
                raise PipelineError("train_quantize", cfg.to_dict(), e)
            curves["quantize"] = qfit.loss_curve
            qw = quantize.quantize(qfit.w, qfit.codebook)
            w_hat = qw.reconstruct()
            theta_hat = (theta0.astype(np.float64) + P.apply(w_hat)).astype(np.float32)
            model = coding.symbol_counts(qw.assignments, cfg.num_levels)
            payload = coding.encode(qw.assignments, model)
            blob = coding.write_compressed(
                np.float16(qfit.codebook.levels), model, payload, cfg.sub_dim)
            lb = coding.message_length_bits(cfg.sub_dim, model, payload.num_bits)
            ledger = bnd.BitLedger(payload_bits=lb["payload_bits"],
                                   codebook_bits=lb["codebook_bits"],
                                   count_table_bits=lb["count_table_bits"],
                                   hyperparameter_bits=hyper_bits,
                                   dimension_bits=dimension_bits)

    emp_risk = nets.zero_one_risk(spec, theta_hat, train_set.inputs,
                                  train_set.labels, mode=cfg.train.bn_mode)
    report = bnd.make_report(emp_risk, ledger, n_bound, cfg.delta, cfg.alpha,
                             config=cfg.to_dict(), prior_mode=cfg.prior_mode,
                             hoeffding_prior=hoeffding_prior)
    total_nll = nets.mean_nll(spec, theta_hat, train_set.inputs, train_set.labels,
                              mode=cfg.train.bn_mode) * len(train_set)
    mdl = bnd.mdl_dataset_bits(ledger.total_bits, total_nll, len(train_set),
                               spec.num_classes)
    return RunResult(report=report, blob=blob, theta_hat=theta_hat, mdl=mdl,
                     loss_curves=curves)


def reconstruct_certified(cfg: RunConfig, blob: bytes | None,
                          prior_theta: np.ndarray | None = None) -> np.ndarray:
    """Rebuild the certified parameter vector from config + blob alone
    (plus the prior checkpoint vector in data-dependent mode)."""
    spec = cfg.model
    theta0 = _theta0_for(cfg, spec, prior_theta)
    if cfg.sub_dim == 0 or blob is None:
        return theta0.astype(np.float32)
    levels, model, assignments = coding.read_compressed(blob)
    if len(assignments) != cfg.sub_dim:
        raise coding.DecodeError("blob dimension does not match the config")
    w_hat = levels[assignments]
    P = projector_for(cfg, spec)
    return (theta0.astype(np.float64) + P.apply(w_hat)).astype(np.float32)


# ---------------------------------------------------------------------------
# grid search


GRID_FIELDS = ("sub_dim", "num_levels", "quant_lr", "init_method")


def _apply_cell(cfg: RunConfig, cell: dict) -> RunConfig:
    kw = {}
    train = cfg.train
    for name, value in cell.items():
        if name == "quant_lr":
            train = replace(train, quant_lr=value)
        else:
            kw[name] = value
    return replace(cfg, train=train, **kw)


def _grid_worker(args):
    dataset, cfg = args
    return compute_bound_pipeline(dataset, cfg)


def grid_search(dataset: Dataset, base: RunConfig, grids: dict,
                workers: int = 1) -> dict:
    """Run every grid combination, charging each run log2 of every declared
    grid size plus the ceil(log2 D) dimension bits; select the argmin
    Catoni bound (ties go to the first combination in declared order)."""
    for name in grids:
        if name not in GRID_FIELDS:
            raise ValueError(f"unknown grid field {name!r}")
        if not grids[name]:
            raise ValueError(f"empty grid for {name!r}")
    names = [n for n in GRID_FIELDS if n in grids]
    sizes = [len(grids[n]) for n in names]
    cells = [dict(zip(names, combo))
             for combo in itertools.product(*(grids[n] for n in names))]
    configs = [_apply_cell(replace(base, grid_sizes=sizes), cell) for cell in cells]

    start = time.time()
    results: list[RunResult | None] = []
    failures = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cfg, outcome in zip(configs, pool.map(
                    _grid_worker, [(dataset, c) for c in configs])):
                results.append(outcome)
    else:
        for cfg in configs:
            try:
                results.append(compute_bound_pipeline(dataset, cfg))
            except PipelineError as e:
                results.append(None)
                failures.append(str(e))
    if all(r is None for r in results):
        raise RuntimeError("all grid runs failed: " + "; ".join(failures))

    best_idx = min((i for i, r in enumerate(results) if r is not None),
                   key=lambda i: results[i].report.catoni)
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "runs": [None if r is None else r.report.to_dict() for r in results],
        "results": results,
        "summary": {
            "best_index": best_idx,
            "best_catoni": results[best_idx].report.catoni,
            "hyperparameter_bits": bnd.hyperparam_bits(sizes),
            "grid_sizes": sizes,
            "wall_time_s": time.time() - start,
            "failures": failures,
            "seeds": {"init": base.init_seed, "projector": base.projector_seed,
                      "train": base.train.seed, "split": base.split_seed},
        },
    }


# ---------------------------------------------------------------------------
# checkpoints and reports


def _atomic_write(path, blob: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_checkpoint(theta: np.ndarray, path):
    theta = np.asarray(theta, dtype=np.float32)
    blob = (CHECKPOINT_MAGIC + struct.pack("<BQ", CHECKPOINT_VERSION, len(theta))
            + theta.astype("<f4").tobytes())
    _atomic_write(path, blob)


def load_checkpoint(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    version, n = struct.unpack("<BQ", blob[4:13])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    body = blob[13:]
    if len(body) != 4 * n:
        raise ValueError(
            f"checkpoint declares {n} params but holds {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").copy()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _csv_rows(report: dict):
    yield ",".join(CSV_COLUMNS)
    for i, run in enumerate(report.get("runs", [])):
        if run is None:
            continue
        cfg = run.get("config", {})
        row = [i, run.get("prior_mode"), cfg.get("sub_dim"),
               cfg.get("num_levels"), cfg.get("init_method"),
               run.get("emp_risk"), run.get("catoni"), run.get("mcallester"),
               run.get("hoeffding_prior"), run.get("kl_nats"),
               run.get("ledger", {}).get("total_bits"), run.get("n"),
               run.get("delta")]
        yield ",".join(_fmt(v) for v in row)


def emit_report(report: dict, fmt: str, path):
    """Write the grid/run report as schema-versioned JSON or fixed-column CSV."""
    public = {k: v for k, v in report.items() if k != "results"}
    if fmt == "json":
        blob = json.dumps(public, indent=2, default=_json_default).encode()
    elif fmt == "csv":
        blob = ("\n".join(_csv_rows(public)) + "\n").encode()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    _atomic_write(path, blob)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")
