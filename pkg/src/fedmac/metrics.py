"""Round-level metrics and the best-round summary.

CSV column order (fixed): round, gm_acc, pm_acc, train_loss, gm_sparsity,
mean_pm_sparsity, cum_comm_bits. Strategies without a personalized model
leave pm_acc and mean_pm_sparsity empty.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .models import ParamVector, evaluate_array
from .sparsity import DEFAULT_ZERO_TOL, CommCostModel, round_comm_bits, sparsity_fraction

CSV_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    gm_acc: float
    pm_acc: float | None
    train_loss: float
    gm_sparsity: float
    mean_pm_sparsity: float | None
    cum_comm_bits: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_row(self) -> list[str]:
        return ["" if v is None else repr(v) for v in astuple(self)]

    @classmethod
    def from_row(cls, row: dict) -> MetricsRecord:
        def num(v, kind=float):
            return None if v in ("", None) else kind(v)

        return cls(int(row["round"]), num(row["gm_acc"]), num(row["pm_acc"]), num(row["train_loss"]),
                   num(row["gm_sparsity"]), num(row["mean_pm_sparsity"]), int(row["cum_comm_bits"]))


def upload_bits(models: list[ParamVector], comm: CommCostModel = CommCostModel(),
                zero_tol: float = DEFAULT_ZERO_TOL) -> int:
    """Sum of per-model exchange costs, each at that model's own sparsity."""
    return sum(round_comm_bits(len(m), sparsity_fraction(m.values, zero_tol), comm) for m in models)


def _mean(values, weights):
    if weights is None:
        return math.fsum(values) / len(values)
    return math.fsum(v * w for v, w in zip(values, weights)) / math.fsum(weights)


def eval_round(server, clients, comm: CommCostModel = CommCostModel(), zero_tol: float = DEFAULT_ZERO_TOL,
               pms: list[ParamVector] | None = None, weighted: bool = False) -> MetricsRecord:
    """Evaluate the global model and, when ``pms`` is given, the personalized models.

    ``server.cum_comm_bits`` must already include this round's traffic.
    Client means are unweighted unless ``weighted`` (then by test-set size
    for accuracies and train-set size for the loss).
    """
    w = server.w
    spec = w.spec
    gm, pm, loss = [], [], []
    for i, c in enumerate(clients):
        gm.append(evaluate_array(spec, w.values, c.test.inputs, c.test.labels)[0])
        model = w if pms is None else pms[i]
        if pms is not None:
            pm.append(evaluate_array(spec, model.values, c.test.inputs, c.test.labels)[0])
        loss.append(evaluate_array(spec, model.values, c.train.inputs, c.train.labels)[1])
    test_w = [len(c.test) for c in clients] if weighted else None
    train_w = [len(c.train) for c in clients] if weighted else None
    return MetricsRecord(
        round=int(server.round),
        gm_acc=_mean(gm, test_w),
        pm_acc=None if pms is None else _mean(pm, test_w),
        train_loss=_mean(loss, train_w),
        gm_sparsity=sparsity_fraction(w.values, zero_tol),
        mean_pm_sparsity=None if pms is None else float(np.mean([sparsity_fraction(m.values, zero_tol) for m in pms])),
        cum_comm_bits=int(server.cum_comm_bits),
    )


@dataclass(frozen=True)
class BestSummary:
    best_gm: float
    best_pm: float | None
    gm_round: int
    pm_round: int | None


def best_summary(history: list[MetricsRecord]) -> BestSummary:
    """Highest accuracy over rounds; ties resolve to the earliest round."""
    if not history:
        raise ValueError("empty history")
    gm_i = int(np.argmax([r.gm_acc for r in history]))
    if any(r.pm_acc is None for r in history):
        return BestSummary(history[gm_i].gm_acc, None, history[gm_i].round, None)
    pm_i = int(np.argmax([r.pm_acc for r in history]))
    return BestSummary(history[gm_i].gm_acc, history[pm_i].pm_acc, history[gm_i].round, history[pm_i].round)
