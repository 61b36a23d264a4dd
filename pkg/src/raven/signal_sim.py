"""FMCW MIMO ADC synthesis for point-target scenes, plus BEV label rendering.

Beat model (far field, constant velocity, range frozen within a chirp):

    x_{k,r}[n] = sum_l A_l exp(j2pi(f_r n T_s + f_D k T_R))
                 * sum_{t active at k} code_t(k) exp(j (t N_rx + r) phi_l) + w

with f_r = 2 S R / c, f_D = 2 v / lambda and phi = 2 pi (d / lambda) sin(theta).
TX elements sit N_rx * d apart, so the virtual array is the Kronecker
product of the TX and RX steering vectors.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 3e8
FRAME_MAGIC = b"RVNF"
FRAME_VERSION = 1


class Multiplexing(enum.IntEnum):
    TDM = 0
    DDM = 1


@dataclass(frozen=True)
class RadarConfig:
    n_chirps: int = 64
    n_samples: int = 64
    n_tx: int = 2
    n_rx: int = 4
    bandwidth: float = 1.5e9
    chirp_time: float = 6.4e-6
    sample_period: float = 1e-7
    chirp_interval: float = 40e-6
    carrier: float = 77e9
    spacing: float | None = None  # defaults to half a wavelength
    multiplexing: Multiplexing = Multiplexing.DDM
    max_targets: int = 8

    def __post_init__(self):
        if isinstance(self.multiplexing, str):
            object.__setattr__(self, "multiplexing", Multiplexing[self.multiplexing.upper()])
        else:
            object.__setattr__(self, "multiplexing", Multiplexing(self.multiplexing))
        if self.spacing is None:
            object.__setattr__(self, "spacing", self.wavelength / 2)
        if min(self.n_chirps, self.n_samples, self.n_tx, self.n_rx) < 1:
            raise ValueError("frame dimensions must be positive")
        if self.n_samples * self.sample_period > self.chirp_time * (1 + 1e-9):
            raise ValueError("N_s * T_s exceeds the chirp duration")
        if self.chirp_interval < self.chirp_time:
            raise ValueError("chirp repetition interval shorter than the chirp")
        if self.bandwidth <= 0 or self.chirp_time <= 0:
            raise ValueError("sweep slope must be positive")

    @property
    def slope(self) -> float:
        return self.bandwidth / self.chirp_time

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier

    @property
    def nyquist_beat(self) -> float:
        return 1.0 / (2.0 * self.sample_period)

    @property
    def max_range(self) -> float:
        return self.nyquist_beat * SPEED_OF_LIGHT / (2.0 * self.slope)

    @property
    def max_velocity(self) -> float:
        """Largest |v| that stays unambiguous after TX separation."""
        return self.wavelength / (4.0 * self.n_tx * self.chirp_interval)

    @property
    def n_virtual(self) -> int:
        return self.n_tx * self.n_rx

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multiplexing"] = self.multiplexing.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RadarConfig":
        return cls(**d)


@dataclass
class Target:
    range: float
    velocity: float = 0.0
    theta: float = 0.0  # radians
    amplitude: float = 1.0
    phase: float = 0.0  # radians

    def __post_init__(self):
        if self.range <= 0:
            raise ValueError("target range must be positive")
        if abs(self.theta) >= math.pi / 2:
            raise ValueError("azimuth must lie strictly inside (-pi/2, pi/2)")

    @property
    def complex_amplitude(self) -> complex:
        return self.amplitude * complex(math.cos(self.phase), math.sin(self.phase))

    @property
    def xy(self) -> tuple[float, float]:
        return self.range * math.sin(self.theta), self.range * math.cos(self.theta)


@dataclass
class SceneSpec:
    targets: list[Target] = field(default_factory=list)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_json_dict(self) -> dict:
        return {
            "targets": [{"r": t.range, "v": t.velocity, "theta_deg": math.degrees(t.theta),
                         "amp": t.amplitude, "phase": t.phase} for t in self.targets],
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        targets = [Target(range=t["r"], velocity=t.get("v", 0.0),
                          theta=math.radians(t.get("theta_deg", 0.0)),
                          amplitude=t.get("amp", 1.0), phase=t.get("phase", 0.0))
                   for t in d.get("targets", [])]
        return cls(targets, float(d.get("noise_sigma", 0.0)), int(d.get("seed", 0)))

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def loads(cls, text: str) -> "SceneSpec":
        return cls.from_json_dict(json.loads(text))


@dataclass
class AdcFrame:
    config: RadarConfig
    data: np.ndarray  # (N_c, N_s, 2 N_rx) float32, I/Q interleaved per receiver
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        want = (cfg.n_chirps, cfg.n_samples, 2 * cfg.n_rx)
        if self.data.shape != want:
            raise ValueError(f"frame shape {self.data.shape} != {want}")

    def complex_samples(self) -> np.ndarray:
        """(N_c, N_s, N_rx) complex view of the interleaved data."""
        return self.data[..., 0::2].astype(np.float64) + 1j * self.data[..., 1::2]

    def to_bytes(self) -> bytes:
        cfg = self.config
        head = FRAME_MAGIC + struct.pack("<5IB", FRAME_VERSION, cfg.n_chirps, cfg.n_samples,
                                         cfg.n_rx, cfg.n_tx, int(cfg.multiplexing))
        return head + np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def read_frame(path_or_bytes, config: RadarConfig) -> AdcFrame:
    raw = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    if raw[:4] != FRAME_MAGIC:
        raise ValueError("not a frame file (bad magic)")
    version, nc, ns, nrx, ntx, mux = struct.unpack_from("<5IB", raw, 4)
    if version != FRAME_VERSION:
        raise ValueError(f"unsupported frame version {version}")
    if (nc, ns, nrx, ntx, mux) != (config.n_chirps, config.n_samples, config.n_rx,
                                   config.n_tx, int(config.multiplexing)):
        raise ValueError("frame header does not match the radar config")
    data = np.frombuffer(raw, dtype="<f4", offset=25).reshape(nc, ns, 2 * nrx).astype(np.float32)
    return AdcFrame(config, data)


# ---------------------------------------------------------------- physics

def beat_frequencies(cfg: RadarConfig, target: Target) -> tuple[float, float, list[str]]:
    """(f_r, f_D, warnings). A range beat at or beyond Nyquist is flagged, not rejected."""
    f_r = 2.0 * cfg.slope * target.range / SPEED_OF_LIGHT
    f_d = 2.0 * target.velocity / cfg.wavelength
    warnings = []
    if f_r >= cfg.nyquist_beat:
        warnings.append(f"range beat {f_r:.4g} Hz aliases (Nyquist {cfg.nyquist_beat:.4g} Hz)")
    return f_r, f_d, warnings


def steering_vector(cfg: RadarConfig, theta: float, n_elem: int, spacing: float | None = None) -> np.ndarray:
    """exp(j r phi) for r = 0..n_elem-1, phi = 2 pi (d / lambda) sin(theta)."""
    if n_elem < 1:
        raise ValueError("n_elem must be >= 1")
    d = cfg.spacing if spacing is None else spacing
    phi = 2.0 * math.pi * d / cfg.wavelength * math.sin(theta)
    return np.exp(1j * phi * np.arange(n_elem))


def virtual_steering(cfg: RadarConfig, theta: float) -> np.ndarray:
    """Kronecker(TX steering, RX steering), index t * N_rx + r."""
    a_tx = steering_vector(cfg, theta, cfg.n_tx, spacing=cfg.spacing * cfg.n_rx)
    a_rx = steering_vector(cfg, theta, cfg.n_rx)
    return np.kron(a_tx, a_rx)


def tx_codes(cfg: RadarConfig) -> np.ndarray:
    """(N_c, N_tx) complex slow-time weights; zero where a TX is silent."""
    k = np.arange(cfg.n_chirps)[:, None]
    t = np.arange(cfg.n_tx)[None, :]
    if cfg.multiplexing == Multiplexing.TDM:
        return (k % cfg.n_tx == t).astype(np.complex128)
    return np.exp(2j * math.pi * k * t / cfg.n_tx)


def synthesize_complex(cfg: RadarConfig, scene: SceneSpec) -> tuple[np.ndarray, list[str]]:
    """Complex (N_c, N_s, N_rx) cube plus any aliasing warnings."""
    n = np.arange(cfg.n_samples)
    k = np.arange(cfg.n_chirps)
    cube = np.zeros((cfg.n_chirps, cfg.n_samples, cfg.n_rx), dtype=np.complex128)
    codes = tx_codes(cfg)
    warnings: list[str] = []
    for tgt in scene.targets:
        f_r, f_d, w = beat_frequencies(cfg, tgt)
        warnings.extend(w)
        fast = np.exp(2j * math.pi * f_r * n * cfg.sample_period)
        slow = np.exp(2j * math.pi * f_d * k * cfg.chirp_interval)
        a_tx = steering_vector(cfg, tgt.theta, cfg.n_tx, spacing=cfg.spacing * cfg.n_rx)
        a_rx = steering_vector(cfg, tgt.theta, cfg.n_rx)
        slow_tx = slow * (codes @ a_tx)  # (N_c,)
        cube += tgt.complex_amplitude * slow_tx[:, None, None] * fast[None, :, None] * a_rx[None, None, :]
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(scene.seed)
        s = scene.noise_sigma / math.sqrt(2.0)
        cube += s * (rng.standard_normal(cube.shape) + 1j * rng.standard_normal(cube.shape))
    return cube, warnings


def synthesize_frame(cfg: RadarConfig, scene: SceneSpec) -> AdcFrame:
    if len(scene.targets) > cfg.max_targets:
        raise ValueError(f"scene has {len(scene.targets)} targets, config allows {cfg.max_targets}")
    cube, warnings = synthesize_complex(cfg, scene)
    for w in warnings:
        log.warning(w)
    data = np.empty((cfg.n_chirps, cfg.n_samples, 2 * cfg.n_rx), dtype=np.float32)
    data[..., 0::2] = cube.real
    data[..., 1::2] = cube.imag
    return AdcFrame(cfg, data, warnings)


# ----------------------------------------------------------------- labels

POSITIVE_RADIUS = math.sqrt(2.0 * math.log(2.0))  # Gaussian(sigma=1) > 0.5 inside this


@dataclass
class Labels:
    heatmap: np.ndarray  # (H, W) binary center blobs
    offsets: np.ndarray  # (2, H, W) (dx, dy) in cells, from cell centre to nearest target
    mask: np.ndarray  # (H, W) binary occupancy disks
    kept: list[int]  # indices of targets inside the extent
    points: np.ndarray  # (n_kept, 2) metric (x, y) of kept targets


def grid_geometry(extent: float, grid: tuple[int, int]):
    """Cell size (dx, dy) in metres for a BEV box x in [-E/2, E/2], y in [0, E]."""
    h, w = grid
    return extent / w, extent / h


def cell_center(extent: float, grid: tuple[int, int], i, j):
    dx, dy = grid_geometry(extent, grid)
    return -extent / 2 + (np.asarray(j) + 0.5) * dx, (np.asarray(i) + 0.5) * dy


def labels_for_scene(cfg: RadarConfig, scene: SceneSpec, grid: tuple[int, int], extent: float,
                     disk_radius: float = 3.0) -> Labels:
    """Rasterise targets onto an H x W BEV grid covering x in [-E/2, E/2], y in [0, E].

    The heatmap is the sigma=1 Gaussian blob thresholded at 0.5 (the target's
    own cell is always set). Offsets point from each cell centre to the
    nearest kept target, in cell units. Targets outside the box are dropped.
    """
    h, w = grid
    dx, dy = grid_geometry(extent, grid)
    heat = np.zeros((h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.float32)
    offsets = np.zeros((2, h, w), dtype=np.float32)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    cx = jj + 0.5
    cy = ii + 0.5
    best = np.full((h, w), np.inf)
    kept, pts = [], []
    for idx, tgt in enumerate(scene.targets):
        x, y = tgt.xy
        if not (-extent / 2 <= x < extent / 2 and 0 <= y < extent):
            log.info("target %d at (%.2f, %.2f) m lies outside the BEV extent; dropped", idx, x, y)
            continue
        kept.append(idx)
        pts.append((x, y))
        gx = (x + extent / 2) / dx
        gy = y / dy
        dist = np.hypot(cx - gx, cy - gy)
        heat[dist <= POSITIVE_RADIUS] = 1.0
        heat[min(int(gy), h - 1), min(int(gx), w - 1)] = 1.0
        mask[dist <= disk_radius] = 1.0
        closer = dist < best
        best = np.where(closer, dist, best)
        offsets[0] = np.where(closer, gx - cx, offsets[0])
        offsets[1] = np.where(closer, gy - cy, offsets[1])
    points = np.array(pts, dtype=np.float64).reshape(-1, 2)
    return Labels(heat, offsets, mask, kept, points)


# ---------------------------------------------------------- scene sampling

@dataclass
class SceneDistribution:
    """Random point-target scenes inside the BEV box."""

    min_targets: int = 1
    max_targets: int = 3
    extent: float = 3.2
    margin: float = 0.3
    min_range: float = 0.5
    max_velocity: float | None = None  # None -> 0.8 of the unambiguous limit
    min_separation: float = 0.6
    snr_db: tuple[float, float] = (15.0, 25.0)
    amplitude: float = 1.0

    def sample(self, cfg: RadarConfig, rng: np.random.Generator, seed: int) -> SceneSpec:
        n = int(rng.integers(self.min_targets, self.max_targets + 1))
        vmax = 0.8 * cfg.max_velocity if self.max_velocity is None else self.max_velocity
        half = self.extent / 2 - self.margin
        targets: list[Target] = []
        pts: list[tuple[float, float]] = []
        tries = 0
        while len(targets) < n:
            tries += 1
            if tries > 10_000:
                raise RuntimeError("could not place targets with the requested separation")
            x = rng.uniform(-half, half)
            y = rng.uniform(self.margin, self.extent - self.margin)
            r = math.hypot(x, y)
            if r < self.min_range or r >= 0.98 * cfg.max_range:
                continue
            if any(math.hypot(x - px, y - py) < self.min_separation for px, py in pts):
                continue
            pts.append((x, y))
            targets.append(Target(range=r, velocity=float(rng.uniform(-vmax, vmax)),
                                  theta=math.atan2(x, y), amplitude=self.amplitude,
                                  phase=float(rng.uniform(0, 2 * math.pi))))
        snr = rng.uniform(*self.snr_db)
        sigma = self.amplitude / (10 ** (snr / 20.0))
        return SceneSpec(targets, float(sigma), seed)
