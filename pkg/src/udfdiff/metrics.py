"""Reconstruction metrics: Acc, Comp, CD, Prec, Recall and F1 at a threshold."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .geometry import PointCloud, fit_transform
from .kdtree import brute_force_nn, build_index

RHO = 0.1
COLUMNS = ("acc", "comp", "cd", "prec", "recall", "f1")


@dataclass(frozen=True)
class EvalReport:
    acc: float
    comp: float
    cd: float
    prec: float
    recall: float
    f1: float
    rho: float

    def as_dict(self) -> dict:
        return asdict(self)


def _pts(c) -> np.ndarray:
    return np.asarray(getattr(c, "points", c), dtype=np.float64).reshape(-1, 3)


def _report(d_pred_to_gt: np.ndarray, d_gt_to_pred: np.ndarray, rho: float) -> EvalReport:
    acc = float(np.mean(d_pred_to_gt))
    comp = float(np.mean(d_gt_to_pred))
    prec = float(100.0 * np.mean(d_pred_to_gt < rho))
    recall = float(100.0 * np.mean(d_gt_to_pred < rho))
    f1 = 0.0 if prec + recall == 0 else 2.0 * prec * recall / (prec + recall)
    return EvalReport(acc, comp, acc + comp, prec, recall, f1, float(rho))


def _check(pred, gt, rho):
    if len(pred) == 0 or len(gt) == 0:
        raise ContractError("evaluation needs two non-empty clouds")
    if not rho > 0:
        raise ContractError("rho must be > 0")


def evaluate(pred, gt, rho: float = RHO) -> EvalReport:
    """Metrics between two clouds using k-d tree nearest-neighbor queries."""
    p, g = _pts(pred), _pts(gt)
    _check(p, g, rho)
    d_pg, _ = build_index(g).query(p)
    d_gp, _ = build_index(p).query(g)
    return _report(d_pg, d_gp, rho)


def evaluate_bruteforce(pred, gt, rho: float = RHO) -> EvalReport:
    """Same contract as :func:`evaluate`, from exhaustive pairwise distances."""
    p, g = _pts(pred), _pts(gt)
    _check(p, g, rho)
    d_pg, _ = brute_force_nn(p, g)
    d_gp, _ = brute_force_nn(g, p)
    return _report(d_pg, d_gp, rho)


def evaluate_in_gt_frame(pred, gt, rho: float = RHO) -> EvalReport:
    """Evaluate after mapping both clouds into the GT's zero-mean, unit-variance frame."""
    tf = fit_transform(_pts(gt))
    return evaluate(tf.apply(PointCloud(_pts(pred))), tf.apply(PointCloud(_pts(gt))), rho)


def mean_report(reports: list) -> EvalReport:
    """Arithmetic mean of per-sample metrics (F1 is averaged, not recomputed)."""
    if not reports:
        raise ContractError("no reports to average")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in COLUMNS}
    return EvalReport(rho=reports[0].rho, **vals)
