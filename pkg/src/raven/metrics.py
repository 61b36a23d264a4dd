"""Segmentation and detection metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)


def _binary(mask, threshold: float = 0.5) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    return m > threshold if m.dtype.kind == "f" else m.astype(bool)


def _pair(pred, gt):
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(pred_mask, gt_mask) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _pair(pred_mask, gt_mask)
    denom = p.sum() + g.sum()
    return 1.0 if denom == 0 else float(2.0 * (p & g).sum() / denom)


def iou(pred_mask, gt_mask) -> float:
    """|P & G| / |P | G|; float inputs are thresholded at 0.5, both empty gives 1."""
    p, g = _pair(pred_mask, gt_mask)
    union = (p | g).sum()
    return 1.0 if union == 0 else float((p & g).sum() / union)


def chamfer(pred_points, gt_points, empty_value: float | None = None, return_flag: bool = False):
    """Mean of the two directed mean nearest-neighbour distances.

    If exactly one set is empty the distance is ``empty_value`` (the caller
    passes the BEV diagonal); both empty gives 0. With ``return_flag`` the
    result is (value, degenerate).
    """
    a = np.asarray(pred_points, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        if len(a) == 0 and len(b) == 0:
            val = 0.0
        else:
            if empty_value is None:
                raise ValueError("one point set is empty and no empty_value was given")
            val = float(empty_value)
        log.debug("chamfer on an empty point set -> %.3f", val)
        return (val, True) if return_flag else val
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    val = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
    return (float(val), False) if return_flag else float(val)


@dataclass
class DetScores:
    ap: float
    ar: float
    f1: float
    precision: float
    recall: float
    re_m: float
    ae_deg: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)


def _polar(x, y):
    return math.hypot(x, y), math.degrees(math.atan2(x, y))


def _match_frame(preds, gts, radius):
    """Greedy one-to-one matching in descending score order.

    Returns per-prediction (score, matched gt index or -1) in that order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][2])
    used = np.zeros(len(gts), dtype=bool)
    out = []
    for i in order:
        x, y, s = preds[i]
        best, best_d = -1, math.inf
        for j, (gx, gy) in enumerate(gts):
            if used[j]:
                continue
            d = math.hypot(x - gx, y - gy)
            if d <= radius and d < best_d:
                best, best_d = j, d
        if best >= 0:
            used[best] = True
        out.append((s, best, i))
    return out


def _ap11(scores, is_tp, n_gt):
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(is_tp, dtype=float)[order]
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        sel = prec[rec >= r - 1e-12]
        ap += sel.max() if sel.size else 0.0
    return float(ap / 11.0)


def _single_frame(preds, gts) -> bool:
    try:
        g = np.asarray(gts, dtype=float)
    except ValueError:
        return False
    if g.ndim == 2 and g.shape[1] == 2:
        return True
    if g.size == 0 and g.ndim == 1:
        return all(np.ndim(p) == 1 and len(p) == 3 for p in preds)
    return False


def det_pr(preds, gts, match_radius: float = 0.5, threshold: float = 0.5) -> DetScores:
    """Detection scores over a set of frames.

    ``preds`` is a list (per frame) of (x, y, score) tuples and ``gts`` a list of
    (x, y) arrays; a single frame may be passed unwrapped. AP uses every
    prediction (11-point interpolation); recall, precision, F1 and the
    range/azimuth errors use predictions scoring at least ``threshold``.
    """
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    if _single_frame(preds, gts):
        preds, gts = [preds], [gts]
    scores, flags = [], []
    tp = fp = fn = 0
    rerr, aerr = [], []
    n_gt = 0
    for fp_list, g in zip(preds, gts):
        g = [tuple(map(float, p)) for p in np.asarray(g, dtype=float).reshape(-1, 2)]
        n_gt += len(g)
        fp_list = [tuple(map(float, p)) for p in fp_list]
        matches = _match_frame(fp_list, g, match_radius)
        for s, j, _ in matches:
            scores.append(s)
            flags.append(j >= 0)
        kept = [p for p in fp_list if p[2] >= threshold]
        hit = 0
        for _, j, i in _match_frame(kept, g, match_radius):
            if j >= 0:
                hit += 1
                pr, pa = _polar(kept[i][0], kept[i][1])
                gr, ga = _polar(*g[j])
                rerr.append(abs(pr - gr))
                aerr.append(abs(pa - ga))
            else:
                fp += 1
        tp += hit
        fn += len(g) - hit
    precision = tp / (tp + fp) if tp + fp else (1.0 if n_gt == 0 else 0.0)
    recall = tp / n_gt if n_gt else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetScores(ap=_ap11(scores, flags, n_gt), ar=float(recall), f1=float(f1),
                     precision=float(precision), recall=float(recall),
                     re_m=float(np.mean(rerr)) if rerr else 0.0,
                     ae_deg=float(np.mean(aerr)) if aerr else 0.0, tp=tp, fp=fp, fn=fn)
