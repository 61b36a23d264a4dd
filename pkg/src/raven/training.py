"""Losses, Adam, and the training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .model import DetOutput, RavenModel, SegOutput
from .numerics import ops
from .numerics.params import ParamStore
from .numerics.tensor import NonFiniteError, Tape, Tensor, as_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-6
    batch_size: int = 8
    epochs: int = 10
    prefixes: list[int] | None = None  # None -> N_c/8, N_c/4, N_c/2, N_c
    prefix_supervision: bool = True
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    w_det: float = 1.0
    w_seg: float = 1.0
    seed: int = 0
    max_seconds: float | None = None
    eval_prefixes: list[int] | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def resolved_prefixes(self, n_chirps: int) -> list[int]:
        ps = self.prefixes or [n_chirps // 8, n_chirps // 4, n_chirps // 2, n_chirps]
        ps = sorted(set(int(p) for p in ps))
        if ps[0] < 1 or ps[-1] != n_chirps:
            raise ValueError(f"prefix set must be positive and end at N_c={n_chirps}: {ps}")
        return ps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ losses

def logit(p, clip: float = 1e-6) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), clip, 1.0 - clip)
    return np.log(p) - np.log1p(-p)


def focal_loss(logits, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean over cells of the binary focal loss, computed from logits."""
    x = as_tensor(logits)
    t = np.asarray(target, dtype=x.dtype)
    if t.shape != x.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {x.shape}")
    p = ops.sigmoid(x)
    log_p = ops.neg(ops.softplus(ops.neg(x)))
    log_q = ops.neg(ops.softplus(x))
    pos = ops.mul(ops.mul(ops.power(ops.sub(1.0, p), gamma), log_p), alpha * t)
    neg = ops.mul(ops.mul(ops.power(p, gamma), log_q), (1.0 - alpha) * (1.0 - t))
    return ops.neg(ops.mean(ops.add(pos, neg)))


def offset_loss(offsets, target_offsets, heatmap, beta: float = 1.0) -> Tensor:
    """Smooth-L1 on (dx, dy) at cells with heatmap target > 0.5, averaged over those cells."""
    r = as_tensor(offsets)
    tgt = np.asarray(target_offsets, dtype=r.dtype)
    if tgt.shape != r.shape:
        raise ValueError(f"offset target shape {tgt.shape} != prediction shape {r.shape}")
    pos = (np.asarray(heatmap) > 0.5).astype(r.dtype)  # (B, 1, H, W)
    n = pos.sum()
    if n == 0:
        return ops.mul(ops.sum(r), 0.0)
    sl = ops.sum(ops.smooth_l1(ops.sub(r, tgt), beta), axis=1, keepdims=True)
    return ops.mul(ops.sum(ops.mul(sl, pos)), 1.0 / n)


def det_loss(pred: DetOutput, heatmap, offsets, alpha: float = 0.25, gamma: float = 2.0,
             beta: float = 1.0) -> Tensor:
    heat = np.asarray(heatmap)
    if heat.ndim == pred.logits.ndim - 1:
        heat = heat[:, None]
    return ops.add(focal_loss(pred.logits, heat, alpha, gamma),
                   offset_loss(pred.offsets, offsets, heat, beta))


def seg_loss(pred: SegOutput | Tensor, mask, eps: float = 1e-6) -> Tensor:
    """BCE(sigmoid(M), mask) + mean over frames of (1 - soft Jaccard), Jaccard smoothed by eps."""
    x = pred.logits if isinstance(pred, SegOutput) else as_tensor(pred)
    m = np.asarray(mask, dtype=x.dtype)
    if m.ndim == x.ndim - 1:
        m = m[:, None]
    if m.shape != x.shape:
        raise ValueError(f"mask shape {m.shape} != prediction shape {x.shape}")
    bce = ops.mean(ops.sub(ops.softplus(x), ops.mul(x, m)))
    p = ops.sigmoid(x)
    axes = tuple(range(1, x.ndim))
    inter = ops.sum(ops.mul(p, m), axis=axes)
    union = ops.add(ops.sub(ops.sum(p, axis=axes), inter), m.sum(axis=axes) + eps)
    # eps in both terms: an empty mask with an empty prediction scores J = 1
    jac = ops.div(ops.add(inter, eps), union)
    return ops.add(bce, ops.mean(ops.sub(1.0, jac)))


def multi_prefix_loss(model: RavenModel, frames, heatmaps, offsets, masks, prefixes, cfg: TrainConfig | None = None,
                      parts: dict | None = None) -> Tensor:
    """Encode once, decode every prefix through the same heads, sum the losses."""
    cfg = cfg or TrainConfig()
    c = model.config
    nc = np.asarray(frames).shape[1]
    lo = max(c.t_det, c.t_seg)
    if any(L < lo or L > nc for L in prefixes):
        raise ValueError(f"prefixes must lie in [{lo}, {nc}]: {list(prefixes)}")
    states = model.encode(frames)
    total = None
    ld = ls = 0.0
    for L in prefixes:
        z = states.z if L == nc else states.z[:, :L]
        d = det_loss(model.decode_det(z), heatmaps, offsets, cfg.focal_alpha, cfg.focal_gamma, cfg.smooth_l1_beta)
        s = seg_loss(model.decode_seg(z), masks)
        term = ops.add(ops.mul(d, cfg.w_det), ops.mul(s, cfg.w_seg))
        total = term if total is None else ops.add(total, term)
        ld += float(d.data)
        ls += float(s.data)
    if parts is not None:
        parts["det"] = ld
        parts["seg"] = ls
    return total


# --------------------------------------------------------------- optimiser

class Adam:
    """Adam with decoupled weight decay over a ParamStore's trainable entries."""

    def __init__(self, params: ParamStore, lr: float = 1e-4, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params.items() if p.trainable}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items() if p.trainable}
        self.skipped = 0

    def step(self) -> bool:
        """Apply one update from the accumulated grads; False if skipped (non-finite grads)."""
        grads = {n: p.grad for n, p in self.params.items() if p.trainable and p.grad is not None}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient; skipping optimiser step %d", self.t + 1)
            return False
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            if not p.trainable:
                continue
            g = grads.get(n)
            if g is not None:
                self.m[n] = b1 * self.m[n] + (1 - b1) * g
                self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            upd = self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.lr * self.weight_decay * p.value
            p.value -= upd.astype(p.value.dtype)
        return True


def adam_step(params: ParamStore, opt: Adam) -> bool:
    return opt.step()


# ------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: ParamStore
    log: list[dict] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0
    skipped: int = 0


def train_step(model: RavenModel, batch: Dataset, prefixes, cfg: TrainConfig, opt: Adam) -> dict:
    parts: dict = {}
    model.params.zero_grad()
    model.params.begin()
    with Tape() as tape:
        loss = multi_prefix_loss(model, batch.frames, batch.heatmaps, batch.offsets, batch.masks, prefixes,
                                 cfg, parts)
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"loss became {float(loss.data)} (det {parts.get('det')}, seg {parts.get('seg')})")
    tape.backward(loss)
    model.params.collect_grads()
    opt.step()
    return {"loss": float(loss.data), **parts}


def train(model: RavenModel, train_ds: Dataset, cfg: TrainConfig, val_ds: Dataset | None = None,
          log_path=None, callback=None) -> TrainResult:
    """Seeded mini-batch training; one metrics-log row per epoch."""
    from .evaluation import evaluate

    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    nc = model.config.n_chirps
    all_prefixes = cfg.resolved_prefixes(nc)
    prefixes = all_prefixes if cfg.prefix_supervision else [nc]
    eval_prefixes = sorted(set(cfg.eval_prefixes or all_prefixes))
    opt = Adam(model.params, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model.params)
    t0 = time.perf_counter()
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_ds))
            sums = {"loss": 0.0, "det": 0.0, "seg": 0.0}
            nb = 0
            for s in range(0, len(order), cfg.batch_size):
                try:
                    out = train_step(model, train_ds.subset(order[s:s + cfg.batch_size]), prefixes, cfg, opt)
                except NonFiniteError as e:
                    raise TrainingDiverged(f"non-finite value during epoch {epoch}: {e}") from e
                for k in sums:
                    sums[k] += out[k]
                nb += 1
                result.steps += 1
            row = {"epoch": epoch + 1, "loss": sums["loss"] / nb,
                   "loss_det": sums["det"] / nb / len(prefixes), "loss_seg": sums["seg"] / nb / len(prefixes)}
            if val_ds is not None and len(val_ds):
                rep = evaluate(model, val_ds, eval_prefixes)
                for L in eval_prefixes:
                    row[f"f1@{L}"] = rep["per_prefix"][str(L)]["f1"]
                    row[f"miou@{L}"] = rep["per_prefix"][str(L)]["miou"]
            row["seconds"] = round(time.perf_counter() - t0, 3)
            result.log.append(row)
            log.info("epoch %d: %s", epoch + 1, row)
            if fh:
                fh.write(json.dumps({k: v for k, v in row.items() if k != "seconds"}) + "\n")
                fh.flush()
            if callback:
                callback(row)
            if cfg.max_seconds is not None and time.perf_counter() - t0 > cfg.max_seconds:
                log.info("time budget reached after epoch %d", epoch + 1)
                break
    finally:
        if fh:
            fh.close()
    result.seconds = time.perf_counter() - t0
    result.skipped = opt.skipped
    return result
