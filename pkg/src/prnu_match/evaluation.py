"""Closed-set / open-set evaluation, ROC/AUC, and the compression domain grid.

Closed-set accuracy is the per-device-averaged fraction of argmax-correct
queries (ties broken by earliest column). Open-set AUC pools, per device, its
own residuals as positives against its fingerprint and everyone else's as
negatives; the AUC is the Mann-Whitney statistic P(pos > neg) + 0.5 P(pos = neg),
which equals trapezoidal integration of the threshold-swept ROC.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyInputError
from .fingerprint import FingerprintDb
from .imaging import crop_center
from .pce import pce
from .pcn import PcnModel, build_pair_batch, pcn_forward_batch, sigmoid
from .training import DeviceSet, TrainConfig, train


@dataclass
class ScoreMatrix:
    """Rows are query residuals (with true device id), columns are fingerprints."""

    values: np.ndarray
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    scorer: str


@dataclass
class EvalReport:
    a_cs: float
    auc_os: float
    per_device_accuracy: dict[str, float]
    per_device_auc: dict[str, float]
    roc_points: list[tuple[float, float, float]]  # (fpr, tpr, threshold)
    config: dict


@dataclass
class GridReport:
    """2x2 domain-adaptation table: cells keyed by (train_variant, eval_variant)."""

    cells: dict[tuple[str, str], float]
    config: dict


# ---------------------------------------------------------------------------
# Scorers: callable(w_crop, list_of_k_crops) -> score per fingerprint
# ---------------------------------------------------------------------------

def make_pce_scorer(exclusion_radius: int = 5, threads: int = 1):
    """PCE scorer; entries are independent, so the loop parallelizes across
    fingerprints when threads > 1 (the FFTs release the GIL)."""

    def score(w_crop: np.ndarray, k_crops: list[np.ndarray]) -> np.ndarray:
        if threads > 1 and len(k_crops) > 1:
            with ThreadPoolExecutor(max_workers=min(threads, len(k_crops))) as pool:
                return np.array(list(pool.map(lambda k: pce(w_crop, k, exclusion_radius).pce, k_crops)))
        return np.array([pce(w_crop, k, exclusion_radius).pce for k in k_crops])

    score.tag = "pce"
    return score


def make_pcn_scorer(model: PcnModel, threads: int = 1):
    buffer: dict = {}

    def score(w_crop: np.ndarray, k_crops: list[np.ndarray]) -> np.ndarray:
        pairs = build_pair_batch(k_crops, w_crop, dtype=model.dtype, out=buffer.get("pairs"))
        buffer["pairs"] = pairs
        logits = pcn_forward_batch(pairs, model, threads).astype(np.float64)
        return sigmoid(logits)

    score.tag = "pcn"
    return score


def score_matrix(ds: DeviceSet, db: FingerprintDb, scorer, crop_p: int, split: str = "eval") -> ScoreMatrix:
    """Score every residual in the chosen split against every fingerprint."""
    pools = {"train": lambda d: d.train_pool, "val": lambda d: d.val_pool, "eval": lambda d: d.eval_pool}
    if split not in pools:
        raise ConfigError(f"unknown split {split!r}")
    k_crops = [crop_center(fp.K, crop_p) for fp in db]
    rows = []
    row_ids = []
    for dev in ds.devices:
        for res in pools[split](dev):
            rows.append(scorer(crop_center(res.values, crop_p), k_crops))
            row_ids.append(dev.device_id)
    if not rows:
        raise EmptyInputError(f"no residuals in split {split!r}")
    return ScoreMatrix(
        values=np.stack(rows),
        row_ids=tuple(row_ids),
        col_ids=db.device_ids,
        scorer=getattr(scorer, "tag", "custom"),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def closed_set_accuracy(sm: ScoreMatrix) -> tuple[float, dict[str, float]]:
    """Equal-device-weight average of per-device argmax accuracy."""
    col_index = {c: i for i, c in enumerate(sm.col_ids)}
    for rid in sm.row_ids:
        if rid not in col_index:
            raise ConfigError(f"query device {rid!r} has no fingerprint column")
    predictions = np.argmax(sm.values, axis=1)  # first maximum wins ties
    correct_per_device: dict[str, list[bool]] = {}
    for row, rid in enumerate(sm.row_ids):
        correct_per_device.setdefault(rid, []).append(predictions[row] == col_index[rid])
    per_device = {rid: float(np.mean(oks)) for rid, oks in correct_per_device.items()}
    return float(np.mean(list(per_device.values()))), per_device


def roc_auc(pos_scores, neg_scores) -> tuple[float, list[tuple[float, float, float]]]:
    """Mann-Whitney AUC with tie credit, plus the threshold-swept ROC points."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EmptyInputError("ROC needs non-empty positive and negative score lists")

    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = ranks[: pos.size].sum()
    auc = (rank_sum_pos - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size)

    # threshold sweep: predict positive when score >= t, from strictest down
    thresholds = np.unique(combined)[::-1]
    points = [(0.0, 0.0, math.inf)]
    for t in thresholds:
        tpr = float((pos >= t).mean())
        fpr = float((neg >= t).mean())
        points.append((fpr, tpr, float(t)))
    return float(auc), points


def report_from_matrix(sm: ScoreMatrix, config: dict | None = None) -> EvalReport:
    """Closed-set and open-set views of one score matrix.

    Positives pool each device's residual scores against its own fingerprint,
    negatives pool everyone else's; per-device AUCs come from the same columns.
    """
    a_cs, per_device_acc = closed_set_accuracy(sm)

    col_index = {c: i for i, c in enumerate(sm.col_ids)}
    row_ids = np.array(sm.row_ids)
    pos_mask = np.zeros_like(sm.values, dtype=bool)
    for row, rid in enumerate(sm.row_ids):
        pos_mask[row, col_index[rid]] = True
    auc_os, roc_points = roc_auc(sm.values[pos_mask], sm.values[~pos_mask])

    per_device_auc = {}
    for cid, col in col_index.items():
        own = row_ids == cid
        if own.any() and (~own).any():
            per_device_auc[cid] = roc_auc(sm.values[own, col], sm.values[~own, col])[0]

    echo = {"scorer": sm.scorer, "n_queries": len(sm.row_ids), "n_fingerprints": len(sm.col_ids)}
    echo.update(config or {})
    return EvalReport(
        a_cs=a_cs,
        auc_os=auc_os,
        per_device_accuracy=per_device_acc,
        per_device_auc=per_device_auc,
        roc_points=roc_points,
        config=echo,
    )


def open_set_eval(
    ds: DeviceSet, db: FingerprintDb, scorer, crop_p: int, split: str = "eval"
) -> EvalReport:
    """Score the chosen split against the database and report both views."""
    sm = score_matrix(ds, db, scorer, crop_p, split)
    return report_from_matrix(sm, {"crop_p": crop_p, "split": split})


def domain_grid(
    train_sets: dict[str, DeviceSet],
    eval_sets: dict[str, DeviceSet],
    cfg: TrainConfig,
    threads: int = 1,
    log=None,
) -> GridReport:
    """Train one model per training variant, evaluate closed-set on every eval variant."""
    for tag, e_ds in eval_sets.items():
        ids = {d.device_id for d in e_ds.devices}
        for t_tag, t_ds in train_sets.items():
            if {d.device_id for d in t_ds.devices} - ids:
                raise ConfigError(f"train variant {t_tag!r} has devices missing from eval variant {tag!r}")
    cells = {}
    for t_tag, t_ds in train_sets.items():
        model, history = train(t_ds, cfg, log=log)
        for e_tag, e_ds in eval_sets.items():
            db = FingerprintDb([d.fingerprint for d in e_ds.devices])
            sm = score_matrix(e_ds, db, make_pcn_scorer(model, threads), cfg.crop_p)
            cells[(t_tag, e_tag)] = closed_set_accuracy(sm)[0]
    return GridReport(
        cells=cells,
        config={"crop_p": cfg.crop_p, "seed": cfg.seed, "max_epochs": cfg.max_epochs,
                "patience": cfg.patience, "train_variants": sorted(train_sets),
                "eval_variants": sorted(eval_sets)},
    )


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_scores_csv(sm: ScoreMatrix, path) -> None:
    with open(path, "w") as f:
        f.write("query,device,score\n")
        for row, rid in enumerate(sm.row_ids):
            for col, cid in enumerate(sm.col_ids):
                f.write(f"q{row:05d}:{rid},{cid},{sm.values[row, col]!r}\n")


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w") as f:
        f.write("metric,value\n")
        f.write(f"a_cs,{report.a_cs!r}\n")
        f.write(f"auc_os,{report.auc_os!r}\n")
        for dev, acc in sorted(report.per_device_accuracy.items()):
            f.write(f"accuracy[{dev}],{acc!r}\n")
        for dev, auc in sorted(report.per_device_auc.items()):
            f.write(f"auc[{dev}],{auc!r}\n")
        for key, value in sorted(report.config.items()):
            f.write(f"config[{key}],{value}\n")


def write_roc_csv(points: list[tuple[float, float, float]], path) -> None:
    with open(path, "w") as f:
        f.write("fpr,tpr,threshold\n")
        for fpr, tpr, thr in points:
            f.write(f"{fpr!r},{tpr!r},{thr!r}\n")
