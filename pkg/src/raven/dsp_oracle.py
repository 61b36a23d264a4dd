"""Classical FFT / beamforming / CFAR reference chain.

Used to validate the simulator and as a brute-force estimator of range,
velocity and azimuth. FFTs use numpy with zero padding to the next power of
two and Hann windows on both axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .signal_sim import SPEED_OF_LIGHT, AdcFrame, Multiplexing, RadarConfig, virtual_steering


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


@dataclass
class RdMap:
    """Range-Doppler cube per virtual channel.

    data: (N_rng, N_dop, N_tx * N_rx) complex. The Doppler axis is centred:
    index ``N_dop // 2`` is zero velocity.
    """

    data: np.ndarray
    range_per_bin: float
    velocity_per_bin: float
    n_range_fft: int
    n_doppler_fft: int

    @property
    def power(self) -> np.ndarray:
        """Non-coherent sum of |.|^2 over virtual channels, (N_rng, N_dop)."""
        return (np.abs(self.data) ** 2).sum(axis=-1)

    @property
    def zero_doppler(self) -> int:
        return self.data.shape[1] // 2

    def range_of(self, bin_idx: float) -> float:
        return bin_idx * self.range_per_bin

    def velocity_of(self, dop_idx: float) -> float:
        return (dop_idx - self.zero_doppler) * self.velocity_per_bin

    def to_csv(self, path) -> None:
        np.savetxt(path, self.power, delimiter=",")


def _hann(n: int) -> np.ndarray:
    # periodic-free symmetric Hann, matches numpy.hanning
    return np.hanning(n) if n > 1 else np.ones(1)


def slow_time_period(cfg: RadarConfig) -> float:
    return cfg.chirp_interval * (cfg.n_tx if cfg.multiplexing == Multiplexing.TDM else 1)


def demultiplex(cfg: RadarConfig, cube: np.ndarray) -> np.ndarray:
    """(N_c, N_s, N_rx) complex -> (N_slow, N_s, N_tx * N_rx), channel t * N_rx + r.

    TDM keeps chirps fired by each TX. DDM removes each TX's slow-time code,
    which moves that TX's echoes to their true Doppler.
    """
    nc = cfg.n_chirps
    if cfg.multiplexing == Multiplexing.TDM:
        n_slow = nc // cfg.n_tx
        out = np.empty((n_slow, cube.shape[1], cfg.n_virtual), dtype=np.complex128)
        for t in range(cfg.n_tx):
            out[..., t * cfg.n_rx:(t + 1) * cfg.n_rx] = cube[t::cfg.n_tx][:n_slow]
        return out
    k = np.arange(nc)
    out = np.empty((nc, cube.shape[1], cfg.n_virtual), dtype=np.complex128)
    for t in range(cfg.n_tx):
        decode = np.exp(-2j * math.pi * k * t / cfg.n_tx)
        out[..., t * cfg.n_rx:(t + 1) * cfg.n_rx] = cube * decode[:, None, None]
    return out


def range_doppler(frame: AdcFrame, window: bool = True) -> RdMap:
    cfg = frame.config
    cube = demultiplex(cfg, frame.complex_samples())
    n_slow, ns, _ = cube.shape
    nr = next_pow2(ns)
    nd_full = next_pow2(n_slow)
    if window:
        cube = cube * _hann(ns)[None, :, None] * _hann(n_slow)[:, None, None]
    rng_fft = np.fft.fft(cube, n=nr, axis=1)[:, : nr // 2]  # keep beats below Nyquist
    rd = np.fft.fftshift(np.fft.fft(rng_fft, n=nd_full, axis=0), axes=0)
    if cfg.multiplexing == Multiplexing.DDM and cfg.n_tx > 1:
        # other TX echoes sit outside the central 1/N_tx of the Doppler band
        keep = nd_full // cfg.n_tx
        lo = nd_full // 2 - keep // 2
        rd = rd[lo:lo + keep]
    rd = np.transpose(rd, (1, 0, 2))
    t_slow = slow_time_period(cfg)
    range_per_bin = SPEED_OF_LIGHT / (2.0 * cfg.slope * nr * cfg.sample_period)
    velocity_per_bin = cfg.wavelength / (2.0 * nd_full * t_slow)
    return RdMap(rd, range_per_bin, velocity_per_bin, nr, nd_full)


def true_bins(cfg: RadarConfig, rd: RdMap, rng_m: float, vel: float) -> tuple[float, float]:
    """Fractional (range bin, Doppler index) where a target should appear."""
    return rng_m / rd.range_per_bin, rd.zero_doppler + vel / rd.velocity_per_bin


ANGLE_GRID = np.deg2rad(np.linspace(-90.0, 90.0, 181))


def angle_spectrum(cfg: RadarConfig, snapshot: np.ndarray, grid: np.ndarray = ANGLE_GRID):
    """Conventional beamformer P(theta) = |a_v(theta)^H x|^2 over ``grid`` (radians)."""
    snapshot = np.asarray(snapshot)
    if snapshot.shape != (cfg.n_virtual,):
        raise ValueError(f"snapshot must have {cfg.n_virtual} entries")
    steer = np.stack([virtual_steering(cfg, th) for th in grid])
    return grid, np.abs(steer.conj() @ snapshot) ** 2


def spectrum_peaks(power: np.ndarray, rel_floor: float = 0.25) -> list[int]:
    """Indices of local maxima at least ``rel_floor`` of the global maximum."""
    p = np.asarray(power)
    top = p.max()
    peaks = []
    for i in range(len(p)):
        left = p[i - 1] if i > 0 else -np.inf
        right = p[i + 1] if i + 1 < len(p) else -np.inf
        if p[i] >= left and p[i] > right and p[i] >= rel_floor * top:
            peaks.append(i)
    return peaks


def tdm_motion_compensate(cfg: RadarConfig, snapshot: np.ndarray, velocity: float) -> np.ndarray:
    """Undo the Doppler phase TX t accrues from firing t chirp slots later."""
    if cfg.multiplexing != Multiplexing.TDM:
        return snapshot
    f_d = 2.0 * velocity / cfg.wavelength
    t = np.repeat(np.arange(cfg.n_tx), cfg.n_rx)
    return snapshot * np.exp(-2j * math.pi * f_d * t * cfg.chirp_interval)


def _window_sums(img: np.ndarray, half: int) -> np.ndarray:
    """Sum over a (2*half+1)^2 box centred on each cell (truncated at edges) and its cell count."""
    pad = np.pad(img, half)
    ones = np.pad(np.ones_like(img), half)
    ii = np.pad(np.cumsum(np.cumsum(pad, 0), 1), ((1, 0), (1, 0)))
    oo = np.pad(np.cumsum(np.cumsum(ones, 0), 1), ((1, 0), (1, 0)))
    w = 2 * half + 1
    h, wd = img.shape

    def box(s):
        return s[w:w + h, w:w + wd] - s[:h, w:w + wd] - s[w:w + h, :wd] + s[:h, :wd]

    return box(ii), box(oo)


def cfar_detect(img: np.ndarray, guard: int = 2, train: int = 4, scale: float = 4.0,
                peaks_only: bool = True) -> list[tuple[int, int]]:
    """2-D cell-averaging CFAR.

    A cell is a detection when it exceeds ``scale`` times the mean of its
    training ring (the (guard+train) box minus the guard box, truncated at
    the map edges). With ``peaks_only`` a detection must also be a 3x3 local
    maximum, which leaves one report per target.
    """
    img = np.asarray(img, dtype=np.float64)
    if guard < 0 or train < 1:
        raise ValueError("need guard >= 0 and train >= 1")
    if 2 * (guard + train) + 1 > min(img.shape):
        raise ValueError("CFAR window larger than the map")
    outer_s, outer_n = _window_sums(img, guard + train)
    inner_s, inner_n = _window_sums(img, guard)
    ring_n = outer_n - inner_n
    noise = (outer_s - inner_s) / np.maximum(ring_n, 1)
    hits = img > scale * noise
    if peaks_only:
        padded = np.pad(img, 1, constant_values=-np.inf)
        h, w = img.shape
        neigh = np.stack([padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
                          for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj])
        hits &= img >= neigh.max(axis=0)
    return [tuple(map(int, ij)) for ij in np.argwhere(hits)]


@dataclass
class OracleEstimate:
    range: float
    velocity: float
    theta: float
    range_bin: int
    doppler_bin: int
    theta_index: int


def estimate_targets(frame: AdcFrame, max_targets: int = 1, cfar: dict | None = None) -> list[OracleEstimate]:
    """Range/velocity/azimuth for the strongest returns.

    With ``max_targets == 1`` the global RD power peak is used; otherwise CFAR
    peaks ranked by power.
    """
    cfg = frame.config
    rd = range_doppler(frame)
    power = rd.power
    if max_targets == 1:
        cells = [tuple(np.unravel_index(np.argmax(power), power.shape))]
    else:
        cells = cfar_detect(power, **(cfar or {}))
        cells.sort(key=lambda c: -power[c])
        cells = cells[:max_targets]
    out = []
    for rb, db in cells:
        vel = rd.velocity_of(db)
        snap = tdm_motion_compensate(cfg, rd.data[rb, db], vel)
        grid, p = angle_spectrum(cfg, snap)
        ai = int(np.argmax(p))
        out.append(OracleEstimate(rd.range_of(rb), vel, float(grid[ai]), int(rb), int(db), ai))
    return out
