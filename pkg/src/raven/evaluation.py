"""Model evaluation over a dataset at one or more chirp prefixes."""
from __future__ import annotations

import math

import numpy as np

from . import metrics
from .data import Dataset
from .model import RavenModel, decode_detections
from .numerics.tensor import no_grad


def _summary(dets, gts, seg_probs, masks, extent, match_radius, thresh) -> dict:
    scores = metrics.det_pr(dets, gts, match_radius=match_radius, threshold=thresh)
    ious = [metrics.iou(p, m) for p, m in zip(seg_probs, masks)]
    dices = [metrics.dice(p, m) for p, m in zip(seg_probs, masks)]
    diag = extent * math.sqrt(2.0)
    ch = [metrics.chamfer([d[:2] for d in ds if d[2] >= thresh], g, empty_value=diag)
          for ds, g in zip(dets, gts)]
    return {"miou": float(np.mean(ious)) if ious else 0.0,
            "dice": float(np.mean(dices)) if dices else 0.0,
            "chamfer": float(np.mean(ch)) if ch else 0.0,
            "ap": scores.ap, "ar": scores.ar, "f1": scores.f1,
            "re_m": scores.re_m, "ae_deg": scores.ae_deg}


AP_FLOOR = 0.05  # lowest heatmap score decoded; AP sweeps the threshold above this


def predict(model: RavenModel, frames: np.ndarray, prefixes, thresh: float = AP_FLOOR,
            nms_radius: float = 2.0, batch: int = 16):
    """Per prefix: (detections per frame scoring above ``thresh``, seg probabilities (N, H, W))."""
    out = {int(L): ([], []) for L in prefixes}
    with no_grad():
        for s in range(0, len(frames), batch):
            model.params.begin()
            states = model.encode(frames[s:s + batch])
            for L in out:
                z = states.z[:, :L]
                det = model.decode_det(z)
                seg = model.decode_seg(z)
                for b in range(det.logits.shape[0]):
                    out[L][0].append(decode_detections(det, thresh, nms_radius, model.config.extent, index=b))
                out[L][1].append(seg.prob[:, 0])
    return {L: (d, np.concatenate(p) if p else np.zeros((0,))) for L, (d, p) in out.items()}


def evaluate(model: RavenModel, ds: Dataset, prefixes=None, thresh: float = 0.5, nms_radius: float = 2.0,
             match_radius: float = 0.5, batch: int = 16) -> dict:
    """Eval report; top-level numbers are for the full frame (L = N_c)."""
    nc = model.config.n_chirps
    prefixes = sorted(set(int(L) for L in (prefixes or [])) | {nc})
    preds = predict(model, ds.frames, prefixes, min(thresh, AP_FLOOR), nms_radius, batch)
    per = {}
    for L in prefixes:
        dets, probs = preds[L]
        per[str(L)] = _summary(dets, ds.points, probs, ds.masks, model.config.extent, match_radius, thresh)
    report = dict(per[str(nc)])
    report["per_prefix"] = per
    report["frames"] = len(ds)
    return report


THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def select_threshold(model: RavenModel, ds: Dataset, grid=THRESHOLD_GRID, nms_radius: float = 2.0,
                     match_radius: float = 0.5, batch: int = 16) -> tuple[float, float]:
    """Full-frame detection threshold with the best F1 on ``ds``; ties go to the lower threshold.

    Focal-trained heatmaps rarely reach 0.5 on positives, so the operating point is
    picked on training frames instead of being fixed.
    """
    if len(ds) == 0:
        return 0.5, 0.0
    nc = model.config.n_chirps
    dets = predict(model, ds.frames, [nc], min(min(grid), AP_FLOOR), nms_radius, batch)[nc][0]
    best = (0.5, -1.0)
    for t in grid:
        f1 = metrics.det_pr(dets, ds.points, match_radius=match_radius, threshold=t).f1
        if f1 > best[1]:
            best = (float(t), float(f1))
    return best
