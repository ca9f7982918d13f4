"""Bit ledgers, KL values under the compression prior, and the bound
families (Catoni, McAllester, finite-hypothesis, prior-only Hoeffding),
plus the compressed-dataset size used for the MDL comparison.

All bound arithmetic is in natural log and float64; bit <-> nat
conversions happen only at the entry points of this module. Bounds are
clamped to [empirical risk, 1]; a value of 1 is vacuous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

DEFAULT_DELTA = 0.05
DEFAULT_ALPHA = 1.1
LAMBDA_CAP_FACTOR = 10  # lambda grid capped at 10 * n

LN2 = math.log(2.0)


@dataclass
class BitLedger:
    """Everything the compressed description of a hypothesis is charged for."""

    payload_bits: int = 0
    codebook_bits: int = 0
    count_table_bits: int = 0
    hyperparameter_bits: float = 0.0
    dimension_bits: int = 0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"negative ledger entry {name}")

    @property
    def total_bits(self) -> float:
        return (self.payload_bits + self.codebook_bits + self.count_table_bits
                + self.hyperparameter_bits + self.dimension_bits)


def hyperparam_bits(grid_sizes: list[int]) -> float:
    """Bits charged for selecting one cell of a declared hyperparameter
    grid: sum of log2(size). Dimension search is charged separately."""
    total = 0.0
    for size in grid_sizes:
        if size < 1:
            raise ValueError("grid sizes must be positive")
        total += math.log2(size)
    return total


def kl_nats_from_bits(total_bits: float) -> float:
    """KL(point mass || universal prior) <= l*ln2 + 2*ln(l) for an l-bit message."""
    if total_bits < 1:
        raise ValueError("zero-length message has no prior mass")
    return total_bits * LN2 + 2.0 * math.log(total_bits)


def phi_inverse(gamma: float, x: float) -> float:
    """(1 - exp(gamma*x)) / (1 - exp(gamma)); the limit x as gamma -> 0."""
    if gamma == 0.0:
        return x
    return (1.0 - math.exp(gamma * x)) / (1.0 - math.exp(gamma))


def _check_risk(emp_risk):
    if not (0.0 <= emp_risk <= 1.0):
        raise ValueError(f"empirical risk {emp_risk} outside [0, 1]")


def _check_delta(delta):
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta {delta} outside (0, 1)")


def catoni_bound(emp_risk: float, kl_nats: float, n: int, delta: float = DEFAULT_DELTA,
                 alpha: float = DEFAULT_ALPHA) -> tuple[float, float]:
    """Catoni-style bound minimized over the geometric grid
    lambda in {alpha^j : j >= 1, alpha^j <= 10n}.

    The 2*ln(ln(alpha^2 * lambda)/ln(alpha)) penalty inside the bracket is
    what pays for searching the grid, so no extra delta splitting is
    applied. Returns (bound clamped to [emp_risk, 1], argmin lambda).
    """
    _check_risk(emp_risk)
    _check_delta(delta)
    if kl_nats < 0:
        raise ValueError("negative KL")
    if n < 2:
        raise ValueError("need n >= 2")
    if alpha <= 1.0:
        raise ValueError("alpha must exceed 1")
    complexity = kl_nats + math.log(1.0 / delta)
    lam_max = LAMBDA_CAP_FACTOR * n
    best, best_lam = math.inf, alpha
    lam = alpha
    while lam <= lam_max:
        penalty = 2.0 * math.log(math.log(alpha * alpha * lam) / math.log(alpha))
        inner = emp_risk + (alpha / lam) * (complexity + penalty)
        # phi_inverse at -lambda/n inflates the bracket (it is >= x there and
        # grows with lambda), which is the sound orientation: larger lambda
        # buys a smaller complexity term at the price of more inflation.
        value = phi_inverse(-lam / n, min(inner, 1.0)) if inner < 1.0 else 1.0
        if value < best:
            best, best_lam = value, lam
        lam *= alpha
    return min(max(best, emp_risk), 1.0), best_lam


def mcallester_bound(emp_risk: float, kl_nats: float, n: int,
                     delta: float = DEFAULT_DELTA) -> float:
    """emp_risk + sqrt((KL + ln(n/delta) + 2) / (2n - 1)), clamped to [0, 1]."""
    _check_risk(emp_risk)
    _check_delta(delta)
    if kl_nats < 0:
        raise ValueError("negative KL")
    if n < 1:
        raise ValueError("need n >= 1")
    gap = math.sqrt((kl_nats + math.log(n / delta) + 2.0) / (2.0 * n - 1.0))
    return min(emp_risk + gap, 1.0)


def finite_hypothesis_bound(emp_risk: float, hypothesis_count: float, n: int,
                            delta: float = DEFAULT_DELTA) -> float:
    """emp_risk + sqrt((ln|H| + ln(1/delta)) / (2n)), clamped to [0, 1]."""
    _check_risk(emp_risk)
    _check_delta(delta)
    if hypothesis_count < 1:
        raise ValueError("hypothesis class must be non-empty")
    if n < 1:
        raise ValueError("need n >= 1")
    gap = math.sqrt((math.log(hypothesis_count) + math.log(1.0 / delta)) / (2.0 * n))
    return min(emp_risk + gap, 1.0)


def finite_hypothesis_bound_bits(emp_risk: float, log2_hypotheses: float, n: int,
                                 delta: float = DEFAULT_DELTA) -> float:
    """Finite-hypothesis bound with |H| given as log2(|H|) to dodge overflow."""
    _check_risk(emp_risk)
    _check_delta(delta)
    if n < 1:
        raise ValueError("need n >= 1")
    gap = math.sqrt((log2_hypotheses * LN2 + math.log(1.0 / delta)) / (2.0 * n))
    return min(emp_risk + gap, 1.0)


def hoeffding_prior_bound(emp_risk_holdout: float, m: int, big_dim: int,
                          delta: float = DEFAULT_DELTA) -> float:
    """Prior-only bound: the checkpoint trained on D_a evaluated on the m
    held-out points, paying only for the dimension search over D."""
    _check_risk(emp_risk_holdout)
    _check_delta(delta)
    if m < 1 or big_dim < 1:
        raise ValueError("need m >= 1 and D >= 1")
    gap = math.sqrt((math.log(big_dim * m / delta) + 2.0) / (2.0 * m - 1.0))
    return min(emp_risk_holdout + gap, 1.0)


def mdl_dataset_bits(message_bits: float, total_nll_nats: float,
                     n: int, num_classes: int) -> dict:
    """Compressed dataset size: model message plus NLL/ln2 + 1 bits, with
    the raw label size n*log2(C) for comparison."""
    if total_nll_nats < 0:
        raise ValueError("negative NLL")
    data_bits = total_nll_nats / LN2
    return {
        "model_bits": message_bits,
        "data_bits": data_bits,
        "total_bits": message_bits + data_bits + 1.0,
        "raw_label_bits": n * math.log2(num_classes),
    }


@dataclass
class BoundReport:
    """One run's certified numbers plus the config echo."""

    emp_risk: float
    n: int
    delta: float
    kl_nats: float
    ledger: BitLedger
    catoni: float
    catoni_lambda: float
    mcallester: float
    config: dict = field(default_factory=dict)
    prior_mode: str = "scratch"
    hoeffding_prior: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ledger"]["total_bits"] = self.ledger.total_bits
        return d


def make_report(emp_risk: float, ledger: BitLedger, n: int,
                delta: float = DEFAULT_DELTA, alpha: float = DEFAULT_ALPHA,
                config: dict | None = None, prior_mode: str = "scratch",
                hoeffding_prior: float | None = None) -> BoundReport:
    kl = kl_nats_from_bits(max(ledger.total_bits, 1.0))
    cat, lam = catoni_bound(emp_risk, kl, n, delta, alpha)
    mac = mcallester_bound(emp_risk, kl, n, delta)
    return BoundReport(emp_risk=emp_risk, n=n, delta=delta, kl_nats=kl,
                       ledger=ledger, catoni=cat, catoni_lambda=lam,
                       mcallester=mac, config=config or {},
                       prior_mode=prior_mode, hoeffding_prior=hoeffding_prior)
