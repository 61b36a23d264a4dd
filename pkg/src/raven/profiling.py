"""Analytic multiply-accumulate counts and wall-clock timing per stage."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig


def matmul_macs(m: int, k: int, n: int) -> int:
    return m * k * n


def conv1d_macs(c_out: int, c_in: int, groups: int, k: int, l_out: int) -> int:
    return c_out * (c_in // groups) * k * l_out


def ssm_step_macs(d_model: int, expand: int, d_state: int, d_conv: int) -> int:
    """One time step of one SSM block: projections, depthwise conv, and the scan update."""
    di = expand * d_model
    return (matmul_macs(1, d_model, 2 * di)        # in projection
            + conv1d_macs(di, di, di, d_conv, 1)    # causal depthwise conv
            + matmul_macs(1, di, di + 2 * d_state)  # delta, B, C
            + 3 * di * d_state                      # decay, input, readout
            + di                                    # skip
            + matmul_macs(1, di, d_model))          # out projection


def attention_macs(n_q: int, n_k: int, d: int, heads: int, project_q: bool = True) -> int:
    dh = d // heads
    proj = (n_q * d * d if project_q else 0) + 2 * n_k * d * d + n_q * d * d
    return proj + heads * (n_q * n_k * dh) * 2


@dataclass
class MacReport:
    """Per-stage MACs split into a per-chirp part and a fixed part."""

    per_chirp: dict[str, int]
    fixed: dict[str, int]
    chirps: int
    params: int = 0
    wall_ms: dict[str, float] = field(default_factory=dict)

    def stage(self, name: str, chirps: int | None = None) -> int:
        L = self.chirps if chirps is None else chirps
        return self.per_chirp.get(name, 0) * L + self.fixed.get(name, 0)

    @property
    def stages(self) -> dict[str, int]:
        names = list(dict.fromkeys(list(self.per_chirp) + list(self.fixed)))
        return {n: self.stage(n) for n in names}

    def chirp_dependent(self, chirps: int | None = None) -> int:
        L = self.chirps if chirps is None else chirps
        return sum(self.per_chirp.values()) * L

    def chirp_independent(self) -> int:
        return sum(self.fixed.values())

    def total(self, chirps: int | None = None) -> int:
        return self.chirp_dependent(chirps) + self.chirp_independent()

    def at(self, chirps: int) -> "MacReport":
        return MacReport(dict(self.per_chirp), dict(self.fixed), chirps, self.params, dict(self.wall_ms))

    def to_dict(self) -> dict:
        return {"chirps": self.chirps, "stages": self.stages, "total": self.total(),
                "chirp_dependent": self.chirp_dependent(), "chirp_independent": self.chirp_independent(),
                "per_chirp": self.per_chirp, "fixed": self.fixed, "params": self.params,
                "wall_ms": self.wall_ms}


def mac_report(c: ModelConfig, chirps: int | None = None, params: int = 0) -> MacReport:
    L = c.n_chirps if chirps is None else chirps
    per: dict[str, int] = {}
    fixed: dict[str, int] = {}
    d, k = c.d_mixer, c.tokens_per_rx
    m = c.mixer_out
    if c.full_res_attention:
        t = c.n_samples * c.n_rx
        per["full_attention"] = matmul_macs(t, 2, d) + attention_macs(t, t, d, c.heads) + matmul_macs(t, d, 2)
    if c.per_rx_encoders:
        per["fast_time"] = c.n_rx * c.n_samples * ssm_step_macs(2, c.ssm_expand, c.ssm_state, c.ssm_conv)
    else:
        per["fast_time"] = c.n_samples * ssm_step_macs(2 * c.n_rx, c.ssm_expand, c.ssm_state, c.ssm_conv)
    if c.has_antenna_mixer and c.mixer == "attention":
        f = c.ffn_expand * d
        per["mixer"] = (matmul_macs(c.n_rx, 2 * k, d)
                        + attention_macs(c.n_tx, c.n_rx, d, c.heads)
                        + 2 * matmul_macs(c.n_tx, d, f)
                        + matmul_macs(c.n_rx, d, 2) + matmul_macs(c.n_tx, d, 2)
                        + c.n_rx * c.n_tx * 2)
    elif c.has_antenna_mixer:
        per["mixer"] = c.n_rx * 2 * k
    else:
        per["mixer"] = matmul_macs(1, 2 * c.n_rx * k, m)
    db = c.d_backbone
    per["backbone"] = matmul_macs(1, m, db) + matmul_macs(1, db, db) + ssm_step_macs(db, c.ssm_expand, c.ssm_state,
                                                                                       c.ssm_conv)
    h, w = c.grid
    hw = h * w
    ch = c.decoder_channels
    for head, t_pool, outs in (("det", c.t_det, 3), ("seg", c.t_seg, 1)):
        per[f"{head}_projection"] = matmul_macs(1, db, hw) + hw  # 1x1 conv plus its share of the pooling
        convs = up = 0
        cin, cells = t_pool, hw
        nl = c.decoder_layers
        for i in range(nl):
            if i == nl - 1 and i > 0:
                up = 2 * (2 * h) * w * cin + 2 * (2 * h) * (2 * w) * cin
                cells = 4 * hw
            convs += 9 * cin * ch * cells
            cin = ch
        if nl <= 1:
            up = 2 * (2 * h) * w * cin + 2 * (2 * h) * (2 * w) * cin
        fixed[f"{head}_decoder"] = convs + up + 4 * hw * cin * outs
    return MacReport(per, fixed, L, params)


def time_stages(model, frames: np.ndarray, runs: int = 100) -> dict[str, float]:
    """Median wall-clock milliseconds per stage for one forward pass."""
    from .numerics.tensor import no_grad

    stamps: dict[str, list[float]] = {k: [] for k in ("fast_time", "mixer", "backbone", "det_decoder", "seg_decoder",
                                                      "total")}
    with no_grad():
        for _ in range(runs):
            model.params.begin()
            t0 = time.perf_counter()
            f = model.encode_fast_time(frames)
            t1 = time.perf_counter()
            c = model.config
            if not c.has_antenna_mixer:
                y = model._adapter(f)
            elif c.mixer == "uniform":
                y = model.mix_uniform(f)
            else:
                y = model.antenna_mixer(f)
            t2 = time.perf_counter()
            states = model.backbone(y)
            t3 = time.perf_counter()
            model.decode_det(states)
            t4 = time.perf_counter()
            model.decode_seg(states)
            t5 = time.perf_counter()
            for k, v in zip(stamps, (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4, t5 - t0)):
                v_ms = 1000.0 * v
                stamps[k].append(v_ms)
    return {k: float(np.median(v)) for k, v in stamps.items()}
