"""Chirp novelty, the block-averaged stopping rule, and threshold calibration."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import ChirpStates, DetOutput, RavenModel, SegOutput
from .numerics.tensor import no_grad
from .profiling import mac_report

log = logging.getLogger(__name__)

TAU_CLAMP = (0.05, 0.5)


@dataclass
class ExitConfig:
    tau: float = 0.2
    block: int | None = None  # None -> N_c / T_det
    rule: str = "cosine"  # or "entropy"
    min_blocks: int = 1

    def __post_init__(self):
        if self.rule not in ("cosine", "entropy"):
            raise ValueError("rule must be 'cosine' or 'entropy'")
        if self.min_blocks < 1:
            raise ValueError("min_blocks must be >= 1")
        if self.block is not None and self.block < 1:
            raise ValueError("block must be positive")

    def block_size(self, n_chirps: int, t_det: int) -> int:
        k = self.block if self.block is not None else n_chirps // t_det
        if k < 1 or n_chirps % k:
            raise ValueError(f"block size {k} must divide N_c={n_chirps}")
        return k


def novelty(z, prior) -> float:
    """Minimum cosine distance from ``z`` to the rows of ``prior``; 1.0 for zero-norm vectors or no prior."""
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(prior, dtype=np.float64).reshape(-1, z.shape[-1])
    if len(p) == 0:
        return 1.0
    nz = np.linalg.norm(z)
    npr = np.linalg.norm(p, axis=1)
    if nz == 0:
        return 1.0
    ok = npr > 0
    d = np.ones(len(p))
    d[ok] = 1.0 - (p[ok] @ z) / (npr[ok] * nz)
    return float(np.clip(d.min(), 0.0, 2.0))


def novelty_curve(z) -> np.ndarray:
    """d_L for every row of (L, D); the first row has no prior and scores 1."""
    z = np.asarray(z, dtype=np.float64)
    n = np.linalg.norm(z, axis=1)
    safe = np.where(n > 0, n, 1.0)
    u = z / safe[:, None]
    dist = 1.0 - u @ u.T
    zero = n == 0
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    out = np.ones(len(z))
    for i in range(1, len(z)):
        out[i] = dist[i, :i].min()
    return np.clip(out, 0.0, 2.0)


def entropy_novelty(z) -> float:
    """Entropy of softmax(z) divided by ln D, in [0, 1]."""
    z = np.asarray(z, dtype=np.float64)
    if z.size < 2:
        raise ValueError("need at least two components")
    s = z - z.max()
    p = np.exp(s)
    p /= p.sum()
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum() / math.log(z.size))


def entropy_curve(z) -> np.ndarray:
    return np.array([entropy_novelty(row) for row in np.asarray(z)])


def block_means(d, k: int) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    rem = len(d) % k
    if rem:
        d = np.concatenate([d, np.full(k - rem, d[len(d) - rem:].mean())])
    return d.reshape(-1, k).mean(axis=1)


def exit_index(d, cfg: ExitConfig, k: int | None = None) -> int | None:
    """K * (first block m >= min_blocks whose mean score is <= tau), or None.

    A non-positive tau never exits.
    """
    k = k if k is not None else cfg.block
    if k is None:
        raise ValueError("block size unknown")
    if cfg.tau <= 0:
        return None
    means = block_means(d, k)
    for m in range(cfg.min_blocks, len(means) + 1):
        if means[m - 1] <= cfg.tau:
            return k * m
    return None


def _knee(curve: np.ndarray) -> int | None:
    """Index of the point farthest from the chord joining the curve's end points."""
    n = len(curve)
    if n < 3:
        return None
    x = np.arange(n, dtype=np.float64)
    y = np.asarray(curve, dtype=np.float64)
    dx, dy = x[-1] - x[0], y[-1] - y[0]
    dist = np.abs(dy * (x - x[0]) - dx * (y - y[0])) / math.hypot(dx, dy)
    if dist.max() <= 1e-12 * max(1.0, np.abs(y).max()):
        return None
    return int(np.argmax(dist))


def calibrate_tau(curves, clamp=TAU_CLAMP, return_info: bool = False):
    """Threshold at the knee of the mean d_L curve, clamped to ``clamp``."""
    curves = [np.asarray(c, dtype=np.float64) for c in curves]
    if len(curves) < 10:
        raise ValueError("calibration needs at least 10 frames")
    n = min(len(c) for c in curves)
    mean = np.mean([c[:n] for c in curves], axis=0)
    idx = _knee(mean)
    if idx is None:
        tau = 0.5 * (clamp[0] + clamp[1])
        log.warning("mean novelty curve has no knee; using tau=%.3f", tau)
        info = {"knee_L": None, "raw_tau": None, "mean_curve": mean.tolist()}
    else:
        raw = float(mean[idx])
        tau = float(np.clip(raw, *clamp))
        info = {"knee_L": idx + 1, "raw_tau": raw, "mean_curve": mean.tolist()}
    return (tau, info) if return_info else tau


def write_traces(path, curves) -> None:
    """CSV rows (frame_id, L, d_L), L counted from 1."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "L", "d_L"])
        for fid, c in enumerate(curves):
            for L, v in enumerate(c, start=1):
                w.writerow([fid, L, repr(float(v))])


def read_traces(path) -> list[np.ndarray]:
    rows: dict[int, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["frame_id"]), []).append((int(r["L"]), float(r["d_L"])))
    return [np.array([v for _, v in sorted(rows[k])]) for k in sorted(rows)]


def scores_for(z, rule: str) -> np.ndarray:
    return novelty_curve(z) if rule == "cosine" else entropy_curve(z)


@dataclass
class ExitResult:
    det: DetOutput
    seg: SegOutput
    states: ChirpStates
    l_exit: int  # chirps actually consumed
    exited: bool  # False when the frame ran to the end
    macs_used: int
    macs_full: int
    chirp_macs_used: int
    chirp_macs_full: int
    scores: np.ndarray


def _decide(model: RavenModel, scores: np.ndarray, cfg: ExitConfig, nc: int):
    k = cfg.block_size(nc, model.config.t_det)
    lo = max(model.config.t_det, model.config.t_seg)
    L = exit_index(scores, cfg, k)
    if L is not None and L < lo:
        # never decode a prefix shorter than the pooling lengths
        L = k * math.ceil(lo / k)
    return (L, True) if L is not None and L < nc else (nc, False)


def run_with_exit(model: RavenModel, frame, cfg: ExitConfig, streaming: bool = True) -> ExitResult:
    """Consume chirps until the stopping rule fires, then decode the prefix.

    ``streaming`` feeds chirps one at a time through the recurrent path and
    stops ingesting at the exit point. Otherwise the frame is encoded in one
    batch pass and the rule is applied to its (causal) chirp states; the
    decoded outputs then equal prefix decoding of the full-frame states
    exactly.
    """
    x = np.asarray(frame.data if hasattr(frame, "data") and not isinstance(frame, np.ndarray) else frame)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("run_with_exit handles one frame at a time")
        x = x[0]
    nc = x.shape[0]
    k = cfg.block_size(nc, model.config.t_det)
    rep = mac_report(model.config, nc)
    if streaming:
        st = model.stream_init(1)
        L, exited = nc, False
        lo = max(model.config.t_det, model.config.t_seg)
        for i in range(nc):
            model.stream_chirp(st, x[i][None])
            n = i + 1
            if n % k == 0 and n < nc:
                z = np.stack(st.z, axis=1)[0]
                s = scores_for(z, cfg.rule)
                Lc = exit_index(s, ExitConfig(cfg.tau, k, cfg.rule, cfg.min_blocks), k)
                if Lc is not None and Lc <= n and n >= lo:
                    L, exited = n, True
                    break
        z = np.stack(st.z, axis=1)
        scores = scores_for(z[0], cfg.rule)
    else:
        with no_grad():
            model.params.begin()
            full = model.encode(x[None]).z.data
        scores = scores_for(full[0], cfg.rule)
        L, exited = _decide(model, scores, cfg, nc)
        z = full if L == nc else full[:, :L]
    states = ChirpStates(z, novelty=list(scores[:L]))
    with no_grad():
        model.params.begin()
        det, seg = model.decode_det(states), model.decode_seg(states)
    return ExitResult(det, seg, states, L, exited, rep.total(L), rep.total(nc),
                      rep.chirp_dependent(L), rep.chirp_dependent(nc), scores)
