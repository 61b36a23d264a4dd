"""Synthetic datasets: frames plus rasterised labels, kept in memory or on disk."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal_sim import (AdcFrame, RadarConfig, SceneDistribution, SceneSpec, labels_for_scene, read_frame,
                         synthesize_frame)


@dataclass
class Dataset:
    frames: np.ndarray  # (N, N_c, N_s, 2 N_rx) float32
    heatmaps: np.ndarray  # (N, H, W)
    offsets: np.ndarray  # (N, 2, H, W)
    masks: np.ndarray  # (N, H, W)
    points: list  # per frame (n, 2) metric target positions
    scenes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.frames[idx], self.heatmaps[idx], self.offsets[idx], self.masks[idx],
                       [self.points[i] for i in idx], [self.scenes[i] for i in idx] if self.scenes else [])


def concat(parts: list[Dataset]) -> Dataset:
    return Dataset(np.concatenate([p.frames for p in parts]), np.concatenate([p.heatmaps for p in parts]),
                   np.concatenate([p.offsets for p in parts]), np.concatenate([p.masks for p in parts]),
                   [x for p in parts for x in p.points], [x for p in parts for x in p.scenes])


def scene_seed(base_seed: int, index: int) -> int:
    """Per-frame seed, independent of how many frames are generated."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate(radar: RadarConfig, dist: SceneDistribution, n: int, seed: int,
             grid: tuple[int, int], disk_radius: float = 3.0, start: int = 0) -> Dataset:
    """Frames ``start .. start+n-1``; frame i depends only on (seed, i)."""
    h, w = grid
    frames = np.zeros((n, radar.n_chirps, radar.n_samples, 2 * radar.n_rx), dtype=np.float32)
    heat = np.zeros((n, h, w), dtype=np.float32)
    off = np.zeros((n, 2, h, w), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=np.float32)
    points, scenes = [], []
    for i in range(n):
        s = scene_seed(seed, start + i)
        scene = dist.sample(radar, np.random.default_rng(s), s)
        frames[i] = synthesize_frame(radar, scene).data
        lab = labels_for_scene(radar, scene, grid, dist.extent, disk_radius)
        heat[i], off[i], masks[i] = lab.heatmap, lab.offsets, lab.mask
        points.append(lab.points)
        scenes.append(scene)
    return Dataset(frames, heat, off, masks, points, scenes)


def save(ds: Dataset, out_dir, radar: RadarConfig, meta: dict | None = None) -> Path:
    """One ``frame_XXXXX.bin`` and ``label_XXXXX.npy`` per frame plus ``manifest.json``.

    A label file stacks (heatmap, dx, dy, mask) as float32 (4, H, W); kept
    target positions live in the manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        fname, lname = f"frame_{i:05d}.bin", f"label_{i:05d}.npy"
        AdcFrame(radar, ds.frames[i]).save(out / fname)
        stack = np.concatenate([ds.heatmaps[i][None], ds.offsets[i], ds.masks[i][None]]).astype(np.float32)
        np.save(out / lname, stack)
        entries.append({"frame": fname, "label": lname,
                        "points": np.asarray(ds.points[i], dtype=np.float64).reshape(-1, 2).tolist(),
                        "scene": ds.scenes[i].to_json_dict() if ds.scenes else None})
    manifest = {"radar": radar.to_dict(), "count": len(ds), "frames": entries, **(meta or {})}
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, out / "manifest.json")
    return out


def load(in_dir) -> tuple[Dataset, dict]:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    radar = RadarConfig.from_dict(manifest["radar"])
    frames, heat, off, masks, points, scenes = [], [], [], [], [], []
    for e in manifest["frames"]:
        frames.append(read_frame(d / e["frame"], radar).data)
        lab = np.load(d / e["label"])
        heat.append(lab[0])
        off.append(lab[1:3])
        masks.append(lab[3])
        points.append(np.asarray(e["points"], dtype=np.float64).reshape(-1, 2))
        if e.get("scene") is not None:
            scenes.append(SceneSpec.from_json_dict(e["scene"]))
    if not frames:
        g = manifest.get("grid", [1, 1])
        shape = (0, radar.n_chirps, radar.n_samples, 2 * radar.n_rx)
        return Dataset(np.zeros(shape, np.float32), np.zeros((0, *g), np.float32),
                       np.zeros((0, 2, *g), np.float32), np.zeros((0, *g), np.float32), []), manifest
    return Dataset(np.stack(frames), np.stack(heat), np.stack(off), np.stack(masks), points, scenes), manifest
