"""Detection drivers and metrics: ROC, AUC, Youden threshold, budgets.

Scores are predicted probabilities of the observed activity code, so a
LOWER probability means MORE anomalous; internally scores are negated
so the sweep runs over an ascending probability cutoff. The ROC is an
exact sweep over unique scores (no binning); AUC is the trapezoid area,
which handles ties with the 1/2 rank-statistic convention.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .ingest import make_ph_instances, make_rt_subsequences
from .scorer import ScoredActivity, prepare_batch, score_instances


class DegenerateLabels(ValueError):
    """Metrics need at least one positive and one negative label."""


@dataclass
class RocCurve:
    """Ordered sweep points (threshold, FPR, DR). An activity is flagged
    when its probability <= threshold; the first point's threshold is
    -inf (nothing flagged) and the last flags everything."""

    points: list

    @property
    def thresholds(self):
        return [p[0] for p in self.points]


@dataclass
class EvalReport:
    mode: str
    auc: float
    dr: float
    fpr: float
    threshold: float
    dr_at_5: float
    dr_at_10: float
    dr_at_15: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_scored: int
    n_abnormal: int
    latency_ms: float

    def to_text(self):
        lines = [f"{k}: {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"


def detect_realtime(model, sessions, max_len=256):
    """Score every activity from position 2 on, one at a time using only
    its preceding activities. Returns (scored list, mean ms/activity)."""
    if model.mode != "rt":
        raise ValueError("detect_realtime needs a real-time (causal) model")
    model.eval()
    scored = []
    elapsed = 0.0
    with torch.no_grad():
        for session in sessions:
            for inst in make_rt_subsequences(session, max_len=max_len):
                t0 = time.perf_counter()
                codes, lengths, qpos, targets, _ = prepare_batch([inst])
                probs, _, _, _ = model.forward_batch(codes, lengths, qpos)
                p = float(probs[0, inst.target])
                elapsed += time.perf_counter() - t0
                scored.append(ScoredActivity(
                    user_id=inst.user_id, timestamp=inst.timestamp,
                    code=inst.target, probability=p, label=int(inst.label),
                    mode="real_time"))
    latency = 1000.0 * elapsed / len(scored) if scored else 0.0
    return scored, latency


def detect_posthoc(model, sessions):
    """Score every activity by masking it and predicting it from both
    directions; a session's cloze instances are scored as one batch."""
    if model.mode != "ph":
        raise ValueError("detect_posthoc needs a post-hoc (bidirectional) model")
    mask_code = model.vocab_size - 1
    scored = []
    elapsed = 0.0
    for session in sessions:
        instances = make_ph_instances(session, mask_code)
        t0 = time.perf_counter()
        batch = score_instances(model, instances, batch_size=len(instances))
        elapsed += time.perf_counter() - t0
        scored.extend(batch)
    latency = 1000.0 * elapsed / len(scored) if scored else 0.0
    return scored, latency


def _as_arrays(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateLabels("need both abnormal and normal labels")
    return scores, labels, n_pos


def roc_and_auc(scores, labels):
    """Exact ROC sweep over unique scores plus trapezoid AUC."""
    scores, labels, n_pos = _as_arrays(scores, labels)
    n_neg = len(labels) - n_pos
    order = np.argsort(scores, kind="stable")  # most anomalous first
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    # group ties: keep the last index of each unique score
    last = np.nonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])[0]
    points = [(-math.inf, 0.0, 0.0)]
    for i in last:
        points.append((float(sorted_scores[i]), fp[i] / n_neg, tp[i] / n_pos))
    fprs = np.array([p[1] for p in points])
    drs = np.array([p[2] for p in points])
    auc = float(np.trapezoid(drs, fprs))
    return RocCurve(points=points), auc


def youden_threshold(curve):
    """Sweep point maximizing DR - FPR over the unique-score candidates
    (the flag-nothing sentinel is not a candidate); ties break toward
    lower FPR."""
    best = None
    for thr, fpr, dr in curve.points:
        if math.isinf(thr):
            continue
        j = dr - fpr
        key = (j, -fpr)
        if best is None or key > best[0]:
            best = (key, thr, dr, fpr)
    return best[1], best[2], best[3]


def dr_at_budget(scores, labels, budget_fraction, timestamps=None):
    """Detection rate when flagging the ceil(budget * N) most anomalous
    activities; score ties at the cutoff break by earlier timestamp."""
    if not 0.0 < budget_fraction <= 1.0:
        raise ValueError("budget_fraction must lie in (0, 1]")
    scores, labels, n_pos = _as_arrays(scores, labels)
    n_flag = math.ceil(budget_fraction * len(scores))
    if timestamps is None:
        timestamps = np.arange(len(scores))
    order = np.lexsort((np.asarray(timestamps), scores))
    flagged = order[:n_flag]
    return float(labels[flagged].sum() / n_pos)


def confusion_at(scores, labels, threshold):
    """Counts when flagging probability <= threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    flagged = scores <= threshold
    tp = int(np.sum(flagged & (labels == 1)))
    fp = int(np.sum(flagged & (labels == 0)))
    fn = int(np.sum(~flagged & (labels == 1)))
    tn = int(np.sum(~flagged & (labels == 0)))
    return tp, fp, tn, fn


def evaluate(scored, latency_ms=0.0):
    """Full report from a list of ScoredActivity."""
    scores = np.array([s.probability for s in scored])
    labels = np.array([s.label for s in scored])
    timestamps = np.array([s.timestamp for s in scored])
    curve, auc = roc_and_auc(scores, labels)
    threshold, dr, fpr = youden_threshold(curve)
    tp, fp, tn, fn = confusion_at(scores, labels, threshold)
    return EvalReport(
        mode=scored[0].mode if scored else "unknown",
        auc=auc,
        dr=dr,
        fpr=fpr,
        threshold=threshold,
        dr_at_5=dr_at_budget(scores, labels, 0.05, timestamps),
        dr_at_10=dr_at_budget(scores, labels, 0.10, timestamps),
        dr_at_15=dr_at_budget(scores, labels, 0.15, timestamps),
        tp=tp, fp=fp, tn=tn, fn=fn,
        n_scored=len(scored),
        n_abnormal=int(labels.sum()),
        latency_ms=latency_ms,
    ), curve


SCORE_HEADER = ("user_id", "timestamp", "code", "probability", "label", "mode")


def write_scores(path, scored):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_HEADER)
        for s in scored:
            writer.writerow([s.user_id, s.timestamp, s.code,
                             repr(s.probability), s.label, s.mode])


def read_scores(path):
    scored = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SCORE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for user, ts, code, prob, label, mode in reader:
            scored.append(ScoredActivity(
                user_id=user, timestamp=int(ts), code=int(code),
                probability=float(prob), label=int(label), mode=mode))
    return scored


def write_roc(path, curve):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("threshold", "fpr", "dr"))
        for thr, fpr, dr in curve.points:
            writer.writerow([repr(thr), repr(fpr), repr(dr)])


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
