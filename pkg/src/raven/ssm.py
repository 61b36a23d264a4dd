"""Mamba-style selective state-space block.

Pipeline per block: input projection to (value, gate), causal depthwise conv
over time, SiLU, diagonal selective scan, SiLU-gated output, output
projection. The same arithmetic is available as a whole-sequence op
(:func:`ssm_forward`, differentiable) and as a single-step update
(:func:`ssm_step`, inference only) so that streaming reproduces batch output.

All tensors carry a leading group axis ``G`` so independent blocks (one per
receiver) run as one batched computation; a lone block uses ``G == 1``.
Sequence inputs are shaped ``(G, N, L, d_model)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.params import ParamStore
from .numerics.tensor import Tensor, as_tensor, make

PARAM_NAMES = ("in_w", "in_b", "conv_w", "conv_b", "x_w", "dt_b", "A_raw", "D", "out_w", "out_b")


@dataclass(frozen=True)
class SsmSpec:
    d_model: int
    expand: int = 2
    d_state: int = 16
    d_conv: int = 4

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


def _inv_softplus(y):
    return np.log(np.expm1(y))


def init_ssm_params(store: ParamStore, prefix: str, spec: SsmSpec, rng: np.random.Generator,
                    dt_range=(1e-3, 1e-1)) -> None:
    dm, di, n, k = spec.d_model, spec.d_inner, spec.d_state, spec.d_conv
    store.add(f"{prefix}.in_w", rng.normal(0.0, 1.0 / np.sqrt(dm), (dm, 2 * di)))
    store.add(f"{prefix}.in_b", np.zeros(2 * di))
    store.add(f"{prefix}.conv_w", rng.uniform(-1.0, 1.0, (di, k)) / np.sqrt(k))
    store.add(f"{prefix}.conv_b", np.zeros(di))
    store.add(f"{prefix}.x_w", rng.normal(0.0, 1.0 / np.sqrt(di), (di, di + 2 * n)))
    dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), di))
    store.add(f"{prefix}.dt_b", _inv_softplus(dt))
    store.add(f"{prefix}.A_raw", _inv_softplus(np.tile(np.arange(1, n + 1, dtype=float), (di, 1))))
    store.add(f"{prefix}.D", np.ones(di))
    store.add(f"{prefix}.out_w", rng.normal(0.0, 1.0 / np.sqrt(di), (di, dm)))
    store.add(f"{prefix}.out_b", np.zeros(dm))


def bind(store: ParamStore, prefixes: list[str]) -> dict[str, Tensor]:
    """Tensors for one or more blocks, stacked along a leading group axis."""
    if len(prefixes) == 1:
        return {k: ops.reshape(store.t(f"{prefixes[0]}.{k}"), (1,) + store[f"{prefixes[0]}.{k}"].shape)
                for k in PARAM_NAMES}
    return {k: ops.stack([store.t(f"{p}.{k}") for p in prefixes]) for k in PARAM_NAMES}


def bind_numpy(store: ParamStore, prefixes: list[str]) -> dict[str, np.ndarray]:
    return {k: np.stack([store[f"{p}.{k}"] for p in prefixes]) for k in PARAM_NAMES}


# --------------------------------------------------------------- primitives

def discretize(a_cont, delta):
    """Zero-order hold for a diagonal A: returns (exp(delta*A), delta) as the B scale."""
    a_cont = np.asarray(a_cont, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta < 0):
        raise ValueError("delta must be non-negative")
    return np.exp(delta * a_cont), delta


def causal_dwconv(x, w, b) -> Tensor:
    """Causal depthwise conv over time, channels-last.

    x: (G, N, L, C); w: (G, C, K); b: (G, C). Output t sees inputs t-K+1..t.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd = x.data, w.data
    k = wd.shape[-1]
    length = xd.shape[2]
    xp = np.concatenate([np.zeros(xd.shape[:2] + (k - 1,) + xd.shape[3:], xd.dtype), xd], axis=2)
    wk = wd[:, None, None, :, :]  # (G,1,1,C,K)
    out = np.zeros_like(xd)
    for j in range(k):
        out += xp[:, :, j:j + length, :] * wk[..., j]
    out += b.data[:, None, None, :]

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + length, :] += g * wk[..., j]
            gx = gxp[:, :, k - 1:, :]
        if w.requires_grad:
            gw = np.stack([np.einsum("gnlc,gnlc->gc", g, xp[:, :, j:j + length, :])
                           for j in range(k)], axis=-1)
        if b.requires_grad:
            gb = g.sum(axis=(1, 2))
        return gx, gw, gb

    return make(out, (x, w, b), back)


def _scan_numpy(u, delta, a, bm, cm, dskip, h0=None):
    """Returns (y, all states (G, N, L, d_i, n), decay exp(delta*A) per step)."""
    g, n, length, di = u.shape
    ns = a.shape[-1]
    da = np.exp(delta[..., None] * a[:, None, None])  # (G,N,L,di,ns)
    hs = (delta * u)[..., None] * bm[:, :, :, None, :]  # input term, overwritten by states
    h = np.zeros((g, n, di, ns), dtype=u.dtype) if h0 is None else h0
    for t in range(length):
        h = hs[:, :, t] = da[:, :, t] * h + hs[:, :, t]
    ys = np.matmul(hs, cm[..., None])[..., 0] + dskip[:, None, None] * u
    return ys, hs, da


def selective_scan(u, delta, a, bm, cm, dskip) -> Tensor:
    """Diagonal selective scan from a zero state.

    h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * u_t ;  y_t = C_t . h_t + D * u_t

    u, delta: (G, N, L, d_i); A: (G, d_i, n); B, C: (G, N, L, n); D: (G, d_i).
    """
    tensors = [as_tensor(t) for t in (u, delta, a, bm, cm, dskip)]
    ud, dd, ad, bd, cd, sd = (t.data for t in tensors)
    ys, hs, da = _scan_numpy(ud, dd, ad, bd, cd, sd)

    def back(gy):
        length = ud.shape[2]
        gu = gy * sd[:, None, None, :]
        gdskip = (gy * ud).sum(axis=(1, 2))
        gc = np.matmul(gy[:, :, :, None, :], hs)[..., 0, :]
        # adjoint recurrence: gh_t = gy_t C_t + exp(delta_{t+1} A) gh_{t+1}
        gh = gy[..., None] * cd[:, :, :, None, :]
        for t in range(length - 2, -1, -1):
            gh[:, :, t] += da[:, :, t + 1] * gh[:, :, t + 1]
        h_prev = np.zeros_like(hs)
        h_prev[:, :, 1:] = hs[:, :, :-1]
        gda = gh * h_prev * da
        gdelta = (gda * ad[:, None, None]).sum(-1)
        ga = np.einsum("gnlds,gnld->gds", gda, dd, optimize=True)
        gx = np.matmul(gh, bd[..., None])[..., 0]
        gdelta += gx * ud
        gu += gx * dd
        gb = np.matmul((dd * ud)[:, :, :, None, :], gh)[..., 0, :]
        return gu, gdelta, ga, gb, gc, gdskip

    return make(ys, tuple(tensors), back)


# ------------------------------------------------------------------- block

def ssm_forward(w: dict[str, Tensor], x, spec: SsmSpec) -> Tensor:
    """Whole-sequence block output, (G, N, L, d_model) -> same shape. Causal in L."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[-1] != spec.d_model:
        raise ValueError(f"expected (G, N, L, {spec.d_model}), got {x.shape}")
    if x.shape[2] < 1:
        raise ValueError("empty sequence")
    di = spec.d_inner
    xz = ops.add(ops.matmul(x, ops.reshape(w["in_w"], (w["in_w"].shape[0], 1) + w["in_w"].shape[1:])),
                 ops.reshape(w["in_b"], (w["in_b"].shape[0], 1, 1, -1)))
    xv, gate = xz[..., :di], xz[..., di:]
    u = ops.silu(causal_dwconv(xv, w["conv_w"], w["conv_b"]))
    proj = ops.matmul(u, ops.reshape(w["x_w"], (w["x_w"].shape[0], 1) + w["x_w"].shape[1:]))
    dt_pre, bm, cm = proj[..., :di], proj[..., di:di + spec.d_state], proj[..., di + spec.d_state:]
    delta = ops.softplus(ops.add(dt_pre, ops.reshape(w["dt_b"], (w["dt_b"].shape[0], 1, 1, -1))))
    a = ops.mul(ops.softplus(w["A_raw"]), -1.0)
    y = selective_scan(u, delta, a, bm, cm, w["D"])
    y = ops.mul(y, ops.silu(gate))
    out = ops.matmul(y, ops.reshape(w["out_w"], (w["out_w"].shape[0], 1) + w["out_w"].shape[1:]))
    return ops.add(out, ops.reshape(w["out_b"], (w["out_b"].shape[0], 1, 1, -1)))


@dataclass
class SsmState:
    """Per-stream recurrent state: conv ring buffer (G,N,K-1,d_i) and scan state (G,N,d_i,n)."""

    conv: np.ndarray | None = None
    h: np.ndarray | None = None

    @classmethod
    def zeros(cls, spec: SsmSpec, groups: int, n: int, dtype=np.float32) -> "SsmState":
        st = cls()
        st.conv = np.zeros((groups, n, spec.d_conv - 1, spec.d_inner), dtype=dtype)
        st.h = np.zeros((groups, n, spec.d_inner, spec.d_state), dtype=dtype)
        return st

    def reset(self) -> None:
        if self.conv is None:
            raise RuntimeError("state was never initialized")
        self.conv[...] = 0.0
        self.h[...] = 0.0

    @property
    def initialized(self) -> bool:
        return self.conv is not None and self.h is not None


def _silu_np(x):
    return x * ops._sigmoid(x)


def ssm_step(w: dict[str, np.ndarray], state: SsmState, x_t: np.ndarray, spec: SsmSpec):
    """One time step. x_t: (G, N, d_model). Returns (y_t, state), state updated in place."""
    if not state.initialized:
        raise RuntimeError("ssm_step needs an initialized SsmState")
    di, ns = spec.d_inner, spec.d_state
    xz = np.einsum("gnm,gmo->gno", x_t, w["in_w"]) + w["in_b"][:, None]
    xv, gate = xz[..., :di], xz[..., di:]
    window = np.concatenate([state.conv, xv[:, :, None, :]], axis=2)  # (G,N,K,di)
    # same accumulation order as causal_dwconv
    conv = np.zeros_like(xv)
    wk = w["conv_w"][:, None]  # (G,1,di,K)
    for j in range(spec.d_conv):
        conv += window[:, :, j, :] * wk[..., j]
    conv += w["conv_b"][:, None]
    state.conv = window[:, :, 1:, :]
    u = _silu_np(conv)
    proj = np.einsum("gnd,gdo->gno", u, w["x_w"])
    dt_pre, bm, cm = proj[..., :di], proj[..., di:di + ns], proj[..., di + ns:]
    delta = ops._softplus(dt_pre + w["dt_b"][:, None])
    a = -ops._softplus(w["A_raw"])
    da = np.exp(delta[..., None] * a[:, None])
    state.h = da * state.h + (delta * u)[..., None] * bm[:, :, None, :]
    y = np.einsum("gnds,gns->gnd", state.h, cm) + w["D"][:, None] * u
    y = y * _silu_np(gate)
    out = np.einsum("gnd,gdm->gnm", y, w["out_w"]) + w["out_b"][:, None]
    return out, state


def ssm_forward_numpy(w: dict[str, np.ndarray], x: np.ndarray, spec: SsmSpec) -> np.ndarray:
    """Tape-free whole-sequence forward (same arithmetic as ssm_forward)."""
    from .numerics.tensor import no_grad
    with no_grad():
        tw = {k: Tensor(v) for k, v in w.items()}
        return ssm_forward(tw, Tensor(x), spec).data
