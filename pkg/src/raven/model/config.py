from __future__ import annotations

from dataclasses import asdict, dataclass, field

VARIANTS = ("A", "B", "C", "D", "E", "F")
TOKENS_PER_RX = (1, 4, 8, 16)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``grid`` is the base BEV grid produced by the spatial projection; the
    decoders upsample it once by 2. ``extent`` is the metric side of the BEV
    box (x in [-E/2, E/2], y in [0, E]).
    """

    n_rx: int = 4
    n_tx: int = 2
    n_chirps: int = 64
    n_samples: int = 64
    d_mixer: int = 64
    heads: int = 8
    ffn_expand: int = 4
    tokens_per_rx: int = 1
    d_backbone: int = 32
    grid: tuple[int, int] = (16, 16)
    t_det: int = 8
    t_seg: int = 8
    decoder_channels: int = 32
    decoder_layers: int = 2
    ssm_expand: int = 2
    ssm_state: int = 16
    ssm_conv: int = 4
    variant: str = "E"
    mixer: str = "attention"  # or "uniform"
    share_rx_params: bool = False
    extent: float = 3.2
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.d_mixer % self.heads:
            raise ValueError("d_mixer must be divisible by heads")
        if self.tokens_per_rx not in TOKENS_PER_RX:
            raise ValueError(f"tokens_per_rx must be one of {TOKENS_PER_RX}")
        if self.mixer not in ("attention", "uniform"):
            raise ValueError("mixer must be 'attention' or 'uniform'")
        if self.variant in ("E", "F") and self.mixer == "attention" and self.share_rx_params:
            # tied per-RX encoders still run one encoder per RX; allowed
            pass
        if self.variant in ("A", "B", "C") and self.mixer == "uniform":
            raise ValueError("the uniform mixer replaces the antenna mixer of variants D/E/F only")
        if min(self.t_det, self.t_seg) < 1 or max(self.t_det, self.t_seg) > self.n_chirps:
            raise ValueError("pooling lengths must lie in [1, N_c]")

    @property
    def mixer_out(self) -> int:
        return 2 * self.n_rx * self.n_tx

    @property
    def out_grid(self) -> tuple[int, int]:
        return 2 * self.grid[0], 2 * self.grid[1]

    @property
    def per_rx_encoders(self) -> bool:
        return self.variant in ("D", "E", "F")

    @property
    def has_antenna_mixer(self) -> bool:
        return self.variant in ("C", "D", "E", "F")

    @property
    def full_res_attention(self) -> bool:
        return self.variant in ("B", "D")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def for_radar(cls, radar, **kw) -> "ModelConfig":
        return cls(n_rx=radar.n_rx, n_tx=radar.n_tx, n_chirps=radar.n_chirps,
                   n_samples=radar.n_samples, **kw)
