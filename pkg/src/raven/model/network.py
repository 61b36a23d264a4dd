"""RAVEN encoder-decoder.

Stages: fast-time SSM per receiver, cross-antenna mixer (TX queries attend
to RX tokens, then pairwise (RX, TX) fusion), chirp-wise backbone SSM, and
det/seg decoders that pool a chirp prefix into a small BEV map.

Tensors are batched: frames enter as (B, N_c, N_s, 2 N_rx) with I/Q
interleaved per receiver, the same layout as :class:`AdcFrame.data`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import ssm
from ..numerics import ops
from ..numerics.params import ParamStore
from ..numerics.tensor import Tensor, as_tensor, no_grad
from ..ssm import SsmSpec, SsmState
from .config import ModelConfig


@dataclass
class ChirpStates:
    z: np.ndarray | Tensor  # (B, L, D)
    novelty: list | None = None

    @property
    def length(self) -> int:
        return self.z.shape[1]


@dataclass
class DetOutput:
    logits: Tensor  # (B, 1, H', W')
    offsets: Tensor  # (B, 2, H', W')

    @property
    def heatmap(self) -> np.ndarray:
        return ops._sigmoid(self.logits.data)

    @property
    def P(self) -> np.ndarray:  # noqa: N802
        return self.heatmap

    @property
    def R(self) -> np.ndarray:  # noqa: N802
        return self.offsets.data


@dataclass
class SegOutput:
    logits: Tensor  # (B, 1, H'', W'')

    @property
    def M(self) -> np.ndarray:  # noqa: N802
        return self.logits.data

    @property
    def prob(self) -> np.ndarray:
        return ops._sigmoid(self.logits.data)


@dataclass
class StreamState:
    """Mutable per-stream state for chirp-by-chirp inference."""

    backbone: SsmState
    z: list = field(default_factory=list)

    @property
    def chirps_seen(self) -> int:
        return len(self.z)


def _glorot(rng, fan_in, shape):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = ops.reshape(x, tuple(lead) + (t, heads, d // heads))
    return ops.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = ops.swapaxes(x, -2, -3)
    *lead, t, h, dh = x.shape
    return ops.reshape(x, tuple(lead) + (t, h * dh))


def attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, store: ParamStore, prefix: str,
              heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head attention with projections ``{prefix}.w{q,k,v,o}``.

    Returns (output (..., Tq, d), weights (..., heads, Tq, Tk)).
    """
    t = store.t
    d = q_in.shape[-1]
    q = _split_heads(ops.linear(q_in, t(f"{prefix}.wq"), t(f"{prefix}.bq")), heads)
    k = _split_heads(ops.linear(k_in, t(f"{prefix}.wk"), t(f"{prefix}.bk")), heads)
    v = _split_heads(ops.linear(v_in, t(f"{prefix}.wv"), t(f"{prefix}.bv")), heads)
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d // heads))
    w = ops.softmax(scores, axis=-1)
    out = _merge_heads(ops.matmul(w, v))
    return ops.linear(out, t(f"{prefix}.wo"), t(f"{prefix}.bo")), w


def _add_attention_params(store, prefix, d, rng):
    for n in ("q", "k", "v", "o"):
        store.add(f"{prefix}.w{n}", _glorot(rng, d, (d, d)))
        store.add(f"{prefix}.b{n}", np.zeros(d))


def _add_ln(store, name, n):
    store.add(f"{name}_g", np.ones(n))
    store.add(f"{name}_b", np.zeros(n))


class RavenModel:
    """Weights plus the forward computation for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, params: ParamStore | None = None, dtype=np.float32):
        self.config = config
        c = config
        self.fast_spec = SsmSpec(2 if c.per_rx_encoders else 2 * c.n_rx, c.ssm_expand, c.ssm_state, c.ssm_conv)
        self.chirp_spec = SsmSpec(c.d_backbone, c.ssm_expand, c.ssm_state, c.ssm_conv)
        if params is None:
            params = self.init_params(config, dtype)
        self.params = params
        self._check_params()

    # ------------------------------------------------------------ params

    @property
    def rx_prefixes(self) -> list[str]:
        c = self.config
        if not c.per_rx_encoders:
            return ["ssm.shared"]
        return self._prefixes_for(c)

    @classmethod
    def init_params(cls, c: ModelConfig, dtype=np.float32) -> ParamStore:
        rng = np.random.default_rng(c.seed)
        store = ParamStore(dtype)
        fast = SsmSpec(2 if c.per_rx_encoders else 2 * c.n_rx, c.ssm_expand, c.ssm_state, c.ssm_conv)
        k2 = 2 * c.tokens_per_rx
        d = c.d_mixer
        m = c.mixer_out
        if c.full_res_attention:
            store.add("fullattn.in_w", _glorot(rng, 2, (2, d)))
            store.add("fullattn.in_b", np.zeros(d))
            store.add("fullattn.e_rx", rng.normal(0.0, 0.02, (c.n_rx, d)))
            _add_ln(store, "fullattn.ln", d)
            _add_attention_params(store, "fullattn", d, rng)
            store.add("fullattn.out_w", _glorot(rng, d, (d, 2)) * 0.1)
            store.add("fullattn.out_b", np.zeros(2))
        if c.per_rx_encoders:
            for p in sorted(set(cls._prefixes_for(c))):
                ssm.init_ssm_params(store, p, fast, rng)
        else:
            ssm.init_ssm_params(store, "ssm.shared", fast, rng)
        if c.has_antenna_mixer and c.mixer == "attention":
            store.add("mixer.in_w", _glorot(rng, k2, (k2, d)))
            store.add("mixer.in_b", np.zeros(d))
            store.add("mixer.e_rx", rng.normal(0.0, 0.02, (c.n_rx, d)))
            store.add("mixer.query", rng.normal(0.0, 1.0, (c.n_tx, d)))
            _add_ln(store, "mixer.ln_q", d)
            _add_ln(store, "mixer.ln_k", d)
            _add_attention_params(store, "mixer", d, rng)
            _add_ln(store, "mixer.ln_ffn", d)
            f = c.ffn_expand * d
            store.add("mixer.ffn1_w", _glorot(rng, d, (d, f)))
            store.add("mixer.ffn1_b", np.zeros(f))
            store.add("mixer.ffn2_w", _glorot(rng, f, (f, d)))
            store.add("mixer.ffn2_b", np.zeros(d))
            store.add("mixer.pair_w", _glorot(rng, 2 * d, (2 * d, 2)))
            store.add("mixer.pair_b", np.zeros(2))
            _add_ln(store, "mixer.ln_out", m)
        elif not c.has_antenna_mixer:
            store.add("adapter.w", _glorot(rng, fast.d_model * c.tokens_per_rx, (fast.d_model * c.tokens_per_rx, m)))
            store.add("adapter.b", np.zeros(m))
            _add_ln(store, "adapter.ln", m)
        db = c.d_backbone
        store.add("backbone.red_w", _glorot(rng, m, (m, db)))
        store.add("backbone.red_b", np.zeros(db))
        store.add("backbone.pre_w", _glorot(rng, db, (db, db)))
        store.add("backbone.pre_b", np.zeros(db))
        ssm.init_ssm_params(store, "ssm.chirp", SsmSpec(db, c.ssm_expand, c.ssm_state, c.ssm_conv), rng)
        hw = c.grid[0] * c.grid[1]
        for head, t_pool, outs in (("det", c.t_det, {"cls": 1, "reg": 2}), ("seg", c.t_seg, {"mask": 1})):
            store.add(f"{head}.proj_w", _glorot(rng, db, (db, hw)))
            store.add(f"{head}.proj_b", np.zeros(hw))
            cin = t_pool
            for i in range(c.decoder_layers):
                store.add(f"{head}.conv{i}_w", _glorot(rng, 9 * cin, (3, 3, cin, c.decoder_channels)))
                # small random biases keep the per-cell channel spread away from zero, where
                # the following LayerNorm (over few channels) is badly conditioned
                store.add(f"{head}.conv{i}_b", rng.normal(0.0, 0.1, c.decoder_channels))
                _add_ln(store, f"{head}.ln{i}", c.decoder_channels)
                cin = c.decoder_channels
            for name, n in outs.items():
                store.add(f"{head}.{name}_w", _glorot(rng, cin, (cin, n)))
                # focal-loss prior: start with few confident positives
                store.add(f"{head}.{name}_b", np.full(n, -2.0 if name in ("cls", "mask") else 0.0))
        return store

    @staticmethod
    def _prefixes_for(c: ModelConfig) -> list[str]:
        return ["ssm.rx0"] * c.n_rx if c.share_rx_params else [f"ssm.rx{r}" for r in range(c.n_rx)]

    def _check_params(self) -> None:
        for name in ("backbone.red_w", "ssm.chirp.in_w", "det.proj_w", "seg.proj_w"):
            if name not in self.params:
                raise ValueError(f"parameter store lacks {name!r}; wrong config for these weights?")
        if self.params["det.proj_w"].shape != (self.config.d_backbone, self.config.grid[0] * self.config.grid[1]):
            raise ValueError("checkpoint grid/backbone dims do not match the model config")

    # ---------------------------------------------------------- stages

    def _frames(self, frames) -> Tensor:
        c = self.config
        x = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        if x.ndim == 3:
            x = x[None]
        if x.shape[2:] != (c.n_samples, 2 * c.n_rx) or x.shape[1] < 1 or x.shape[1] > c.n_chirps:
            raise ValueError(f"frame shape {x.shape[1:]} does not match (<= {c.n_chirps}, {c.n_samples}, {2 * c.n_rx})")
        return as_tensor(x, self.params.dtype)

    def full_res_attention(self, x: Tensor) -> Tensor:
        """Self-attention over all N_s * N_rx samples of each chirp, residual back to I/Q."""
        c, t = self.config, self.params.t
        b, nc, ns, _ = x.shape
        tok = ops.reshape(x, (b * nc, ns * c.n_rx, 2))
        e_rx = ops.reshape(ops.broadcast_to(t("fullattn.e_rx"), (ns, c.n_rx, c.d_mixer)), (ns * c.n_rx, c.d_mixer))
        h = ops.add(ops.linear(tok, t("fullattn.in_w"), t("fullattn.in_b")), e_rx)
        a = ops.layer_norm(h, t("fullattn.ln_g"), t("fullattn.ln_b"))
        att, _ = attention(a, a, a, self.params, "fullattn", c.heads)
        h = ops.add(h, att)
        out = ops.linear(h, t("fullattn.out_w"), t("fullattn.out_b"))
        return ops.add(x, ops.reshape(out, x.shape))

    def encode_fast_time(self, frames) -> Tensor:
        """Per-RX fast-time SSM, pooled to K_tok tokens: (B, N_c, N_rx, 2 K_tok).

        For variants without per-RX encoders the joint SSM output channels
        (2r, 2r+1) play the role of receiver r.
        """
        c = self.config
        x = self._frames(frames)
        if c.full_res_attention:
            x = self.full_res_attention(x)
        b, nc, ns, ch = x.shape
        k = c.tokens_per_rx
        if c.per_rx_encoders:
            xs = ops.reshape(x, (b * nc, ns, c.n_rx, 2))
            xs = ops.transpose(xs, (2, 0, 1, 3))  # (G=N_rx, N, L, 2)
            w = ssm.bind(self.params, self.rx_prefixes)
            y = ssm.ssm_forward(w, xs, self.fast_spec)  # (G, N, L, 2)
            pooled = ops.adaptive_avg_pool(ops.swapaxes(y, -1, -2), k)  # (G, N, 2, K)
            pooled = ops.transpose(pooled, (1, 0, 2, 3))
        else:
            xs = ops.reshape(x, (1, b * nc, ns, ch))
            y = ssm.ssm_forward(ssm.bind(self.params, ["ssm.shared"]), xs, self.fast_spec)
            pooled = ops.adaptive_avg_pool(ops.swapaxes(y[0], -1, -2), k)  # (N, 2 N_rx, K)
            pooled = ops.reshape(pooled, (b * nc, c.n_rx, 2, k))
        return ops.reshape(pooled, (b, nc, c.n_rx, 2 * k))

    def antenna_mixer(self, f: Tensor, return_weights: bool = False):
        """(..., N_rx, 2 K_tok) -> (..., 2 N_rx N_tx)."""
        c, t = self.config, self.params.t
        f = as_tensor(f, self.params.dtype)
        lead = f.shape[:-2]
        h = ops.add(ops.linear(f, t("mixer.in_w"), t("mixer.in_b")), t("mixer.e_rx"))  # (..., N_rx, d)
        query = t("mixer.query")
        q = ops.layer_norm(query, t("mixer.ln_q_g"), t("mixer.ln_q_b"))
        k = ops.layer_norm(h, t("mixer.ln_k_g"), t("mixer.ln_k_b"))
        att, weights = attention(q, k, h, self.params, "mixer", c.heads)  # (..., N_tx, d)
        tx = ops.add(query, att)
        ffn = ops.linear(ops.silu(ops.linear(ops.layer_norm(tx, t("mixer.ln_ffn_g"), t("mixer.ln_ffn_b")),
                                             t("mixer.ffn1_w"), t("mixer.ffn1_b"))),
                         t("mixer.ffn2_w"), t("mixer.ffn2_b"))
        tx = ops.add(tx, ffn)
        # W_pair [h_r; t_t] == h_r W_top + t_t W_bottom
        pw = t("mixer.pair_w")
        d = c.d_mixer
        pr = ops.linear(h, pw[:d])  # (..., N_rx, 2)
        pt = ops.linear(tx, pw[d:], t("mixer.pair_b"))  # (..., N_tx, 2)
        pr = ops.reshape(pr, lead + (c.n_rx, 1, 2))
        pt = ops.reshape(pt, lead + (1, c.n_tx, 2))
        pairs = ops.add(pr, pt)  # (..., N_rx, N_tx, 2), r-major
        y = ops.reshape(pairs, lead + (c.mixer_out,))
        y = ops.layer_norm(y, t("mixer.ln_out_g"), t("mixer.ln_out_b"))
        return (y, weights) if return_weights else y

    def mix_uniform(self, f) -> Tensor:
        """RX average tiled to the antenna-mixer output length."""
        c = self.config
        f = as_tensor(f, self.params.dtype)
        avg = ops.mean(f, axis=-2)  # (..., 2K)
        reps = -(-c.mixer_out // avg.shape[-1])
        tiled = ops.concat([avg] * reps, axis=-1)
        return tiled[..., : c.mixer_out]

    def _adapter(self, f: Tensor) -> Tensor:
        t = self.params.t
        lead = f.shape[:-2]
        flat = ops.reshape(f, lead + (f.shape[-2] * f.shape[-1],))
        return ops.layer_norm(ops.linear(flat, t("adapter.w"), t("adapter.b")), t("adapter.ln_g"), t("adapter.ln_b"))

    def encode_chirps(self, frames) -> Tensor:
        """Frames -> per-chirp mixer output Y: (B, L, 2 N_rx N_tx)."""
        c = self.config
        f = self.encode_fast_time(frames)
        if not c.has_antenna_mixer:
            return self._adapter(f)
        if c.mixer == "uniform":
            return self.mix_uniform(f)
        return self.antenna_mixer(f)

    def _pre_mlp(self, y: Tensor) -> Tensor:
        t = self.params.t
        z = ops.silu(ops.linear(y, t("backbone.red_w"), t("backbone.red_b")))
        return ops.silu(ops.linear(z, t("backbone.pre_w"), t("backbone.pre_b")))

    def backbone(self, y) -> ChirpStates:
        y = as_tensor(y, self.params.dtype)
        if y.ndim == 2:
            y = ops.reshape(y, (1,) + y.shape)
        z = self._pre_mlp(y)
        w = ssm.bind(self.params, ["ssm.chirp"])
        zs = ssm.ssm_forward(w, ops.reshape(z, (1,) + z.shape), self.chirp_spec)
        return ChirpStates(zs[0])

    def _decode(self, z, head: str, t_pool: int) -> Tensor:
        """Shared decoder trunk: returns channels-last features (B, 2H, 2W, C)."""
        c, t = self.config, self.params.t
        z = z.z if isinstance(z, ChirpStates) else z
        z = as_tensor(z, self.params.dtype)
        b, length, _ = z.shape
        if length < t_pool:
            raise ValueError(f"prefix of {length} chirps is shorter than the {head} pooling length {t_pool}")
        h, w = c.grid
        u = ops.linear(z, t(f"{head}.proj_w"), t(f"{head}.proj_b"))  # (B, L, HW)
        u = ops.adaptive_avg_pool(ops.swapaxes(u, 1, 2), t_pool)  # (B, HW, T)
        a = ops.reshape(u, (b, h, w, t_pool))
        for i in range(c.decoder_layers):
            if i == c.decoder_layers - 1 and i > 0:
                # the last layer runs at output resolution; 1x1 heads on an
                # interpolated map could only express smooth fields
                a = ops.upsample_bilinear(a, 2)
            a = ops.conv2d_same(a, t(f"{head}.conv{i}_w"), t(f"{head}.conv{i}_b"))
            a = ops.silu(ops.layer_norm(a, t(f"{head}.ln{i}_g"), t(f"{head}.ln{i}_b")))
        return a if c.decoder_layers > 1 else ops.upsample_bilinear(a, 2)

    def decode_det(self, z) -> DetOutput:
        t = self.params.t
        a = self._decode(z, "det", self.config.t_det)
        logits = ops.transpose(ops.linear(a, t("det.cls_w"), t("det.cls_b")), (0, 3, 1, 2))
        offsets = ops.transpose(ops.linear(a, t("det.reg_w"), t("det.reg_b")), (0, 3, 1, 2))
        return DetOutput(logits, offsets)

    def decode_seg(self, z) -> SegOutput:
        t = self.params.t
        a = self._decode(z, "seg", self.config.t_seg)
        return SegOutput(ops.transpose(ops.linear(a, t("seg.mask_w"), t("seg.mask_b")), (0, 3, 1, 2)))

    # ----------------------------------------------------------- forward

    def encode(self, frames, prefix: int | None = None) -> ChirpStates:
        x = self._frames(frames)
        if prefix is not None:
            if not 1 <= prefix <= x.shape[1]:
                raise ValueError(f"prefix {prefix} outside [1, {x.shape[1]}]")
            if prefix < x.shape[1]:
                x = x[:, :prefix]
        return self.backbone(self.encode_chirps(x))

    def forward(self, frames, mode: str = "full", prefix: int | None = None):
        """Returns (DetOutput, SegOutput, ChirpStates).

        ``mode`` is ``full``, ``prefix`` (first ``prefix`` chirps) or
        ``streaming`` (chirp-by-chirp recurrent steps, optionally stopping
        after ``prefix`` chirps). Streaming runs without a tape.
        """
        self.params.begin()
        if mode == "full":
            states = self.encode(frames)
        elif mode == "prefix":
            if prefix is None:
                raise ValueError("prefix mode needs a prefix length")
            states = self.encode(frames, prefix)
        elif mode == "streaming":
            x = self._frames(frames)
            stop = x.shape[1] if prefix is None else prefix
            st = self.stream_init(x.shape[0])
            for k in range(stop):
                self.stream_chirp(st, x.data[:, k])
            states = ChirpStates(np.stack(st.z, axis=1))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return self.decode_det(states), self.decode_seg(states), states

    __call__ = forward

    # ---------------------------------------------------------- streaming

    def stream_init(self, batch: int = 1) -> StreamState:
        return StreamState(SsmState.zeros(self.chirp_spec, 1, batch, self.params.dtype))

    def stream_chirp(self, state: StreamState, chirp) -> np.ndarray:
        """Feed one chirp (B, N_s, 2 N_rx); returns z_k (B, D) and appends it to the state."""
        chirp = np.asarray(chirp, dtype=self.params.dtype)
        if chirp.ndim == 2:
            chirp = chirp[None]
        with no_grad():
            self.params.begin()
            y = self.encode_chirps(chirp[:, None])  # (B, 1, M)
            z = self._pre_mlp(y).data[:, 0]
        w = ssm.bind_numpy(self.params, ["ssm.chirp"])
        out, _ = ssm.ssm_step(w, state.backbone, z[None], self.chirp_spec)
        zk = out[0]
        state.z.append(zk)
        return zk

    # ---------------------------------------------------------- detections

    def decode_detections(self, det: DetOutput, thresh: float = 0.5, nms_radius: float = 2.0):
        return decode_detections(det, thresh, nms_radius, self.config.extent)


def decode_detections(det, thresh: float = 0.5, nms_radius: float = 2.0, extent: float = 3.2,
                      index: int = 0) -> list[tuple[float, float, float]]:
    """Peaks of the heatmap as metric (x, y, score), strongest first.

    A peak is an 8-neighbourhood local maximum above ``thresh``; peaks within
    ``nms_radius`` cells of a stronger kept peak are dropped. Offsets are added
    in cell units before mapping to metres.
    """
    if not 0.0 < thresh < 1.0:
        raise ValueError("thresh must lie in (0, 1)")
    if isinstance(det, DetOutput):
        p, r = det.heatmap[index, 0], det.R[index]
    else:
        p, r = det
    p = np.asarray(p, dtype=np.float64)
    h, w = p.shape
    padded = np.pad(p, 1, constant_values=-np.inf)
    neigh = np.stack([padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
                      for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj])
    peaks = np.argwhere((p > thresh) & (p >= neigh.max(axis=0)))
    order = np.argsort(-p[peaks[:, 0], peaks[:, 1]], kind="stable")
    kept: list[tuple[int, int]] = []
    for i, j in peaks[order]:
        if all(math.hypot(i - a, j - b) > nms_radius for a, b in kept):
            kept.append((int(i), int(j)))
    cw, ch = extent / w, extent / h
    out = []
    for i, j in kept:
        gx = j + 0.5 + float(r[0, i, j])
        gy = i + 0.5 + float(r[1, i, j])
        out.append((-extent / 2 + gx * cw, gy * ch, float(p[i, j])))
    return out
