"""Experiment configuration and the drivers behind the CLI subcommands.

Every command writes into an output directory together with ``config.json``
(the fully resolved experiment config) so a run can be repeated exactly.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .early_exit import ExitConfig, calibrate_tau, entropy_curve, novelty_curve, run_with_exit, write_traces
from .evaluation import evaluate, select_threshold
from .model import ModelConfig, RavenModel
from .numerics.params import ParamStore
from .numerics.tensor import no_grad
from .profiling import mac_report, time_stages
from .signal_sim import RadarConfig, SceneDistribution
from .training import TrainConfig, train

log = logging.getLogger(__name__)

WEIGHTS = "weights.rvwt"
TIMING = "timing.json"
OPERATING = "operating_point.json"


@dataclass
class DataConfig:
    n_train: int = 512
    n_val: int = 128
    seed: int = 1
    disk_radius: float = 3.0
    dir: str | None = None  # load a gen-data directory instead of synthesising in memory


@dataclass
class EvalConfig:
    threshold: float | None = None  # None -> selected on training frames after `train`
    calib_frames: int = 128
    match_radius: float = 0.5
    nms_radius: float = 2.0


@dataclass
class ExperimentConfig:
    radar: RadarConfig = field(default_factory=RadarConfig)
    scene: SceneDistribution = field(default_factory=SceneDistribution)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    exit: ExitConfig = field(default_factory=ExitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    sweep: list[int] | None = None  # chirp counts for sweep-chirps

    def __post_init__(self):
        r, m = self.radar, self.model
        if (m.n_rx, m.n_tx, m.n_chirps, m.n_samples) != (r.n_rx, r.n_tx, r.n_chirps, r.n_samples):
            raise ValueError("model dims must match the radar config")
        if abs(m.extent - self.scene.extent) > 1e-12:
            raise ValueError("model extent must equal the scene extent")

    @property
    def label_grid(self) -> tuple[int, int]:
        return self.model.out_grid

    def to_dict(self) -> dict:
        sc = asdict(self.scene)
        sc["snr_db"] = list(self.scene.snr_db)
        return {"radar": self.radar.to_dict(), "scene": sc, "data": asdict(self.data),
                "model": self.model.to_dict(), "train": self.train.to_dict(), "exit": asdict(self.exit),
                "eval": asdict(self.eval), "seed": self.seed, "out_dir": self.out_dir, "sweep": self.sweep}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        radar = RadarConfig.from_dict(d.get("radar", {})) if d.get("radar") else RadarConfig()
        sc = d.get("scene", {})
        if "snr_db" in sc:
            sc["snr_db"] = tuple(sc["snr_db"])
        scene = SceneDistribution(**sc)
        md = {"n_rx": radar.n_rx, "n_tx": radar.n_tx, "n_chirps": radar.n_chirps, "n_samples": radar.n_samples,
              "extent": scene.extent, **d.get("model", {})}
        _reject_unknown(ModelConfig, md, "model")
        _reject_unknown(TrainConfig, d.get("train", {}), "train")
        _reject_unknown(ExitConfig, d.get("exit", {}), "exit")
        _reject_unknown(DataConfig, d.get("data", {}), "data")
        _reject_unknown(EvalConfig, d.get("eval", {}), "eval")
        unknown = set(d) - {"radar", "scene", "data", "model", "train", "exit", "eval", "seed", "out_dir", "sweep"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(radar, scene, DataConfig(**d.get("data", {})), ModelConfig.from_dict(md),
                   TrainConfig.from_dict(d.get("train", {})), ExitConfig(**d.get("exit", {})),
                   EvalConfig(**d.get("eval", {})), int(d.get("seed", 0)),
                   str(d.get("out_dir", "runs/default")), d.get("sweep"))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def resolved(self) -> "ExperimentConfig":
        """Copy where the experiment seed has been pushed into model init and batch order."""
        d = self.to_dict()
        d["model"]["seed"] = self.seed
        d["train"]["seed"] = self.seed
        return ExperimentConfig.from_dict(d)

    def content_hash(self, keys=("radar", "scene", "data", "model", "train", "eval", "seed")) -> str:
        d = self.resolved().to_dict()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _reject_unknown(cls, d: dict, section: str) -> None:
    names = {f.name for f in fields(cls)}
    bad = set(d) - names
    if bad:
        raise ValueError(f"unknown keys in [{section}]: {sorted(bad)}")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        d = tomllib.loads(text)
    else:
        d = json.loads(text)
    return ExperimentConfig.from_dict(d)


def threads() -> int:
    try:
        return max(1, int(os.environ.get("RAVEN_THREADS", "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------------ data

def _gen_chunk(args):
    radar, scene, start, n, seed, grid, disk = args
    ds = data_mod.generate(radar, scene, n, seed, grid, disk, start=start)
    return ds


def make_split(cfg: ExperimentConfig, split: str) -> data_mod.Dataset:
    """Train/val data: loaded from ``data.dir`` when set, otherwise synthesised."""
    if cfg.data.dir:
        ds, manifest = data_mod.load(Path(cfg.data.dir) / split)
        if RadarConfig.from_dict(manifest["radar"]) != cfg.radar:
            raise ValueError("dataset radar config differs from the experiment config")
        return ds
    n = cfg.data.n_train if split == "train" else cfg.data.n_val
    seed = split_seed(cfg.data.seed, split)
    return generate_parallel(cfg.radar, cfg.scene, n, seed, cfg.label_grid, cfg.data.disk_radius)


def split_seed(seed: int, split: str) -> int:
    return int(np.random.SeedSequence([seed, {"train": 0, "val": 1, "calib": 2}[split]]).generate_state(1)[0])


def generate_parallel(radar, scene, n, seed, grid, disk, workers: int | None = None) -> data_mod.Dataset:
    workers = workers or threads()
    if workers <= 1 or n < 2 * workers:
        return data_mod.generate(radar, scene, n, seed, grid, disk)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    jobs = [(radar, scene, int(a), int(b - a), seed, grid, disk) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_gen_chunk, jobs))
    return data_mod.concat(parts)


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> dict:
    res = {}
    for split in ("train", "val"):
        n = cfg.data.n_train if split == "train" else cfg.data.n_val
        ds = generate_parallel(cfg.radar, cfg.scene, n, split_seed(cfg.data.seed, split), cfg.label_grid,
                               cfg.data.disk_radius)
        data_mod.save(ds, out / split, cfg.radar, meta={"grid": list(cfg.label_grid), "extent": cfg.scene.extent,
                                                         "disk_radius": cfg.data.disk_radius,
                                                         "seed": cfg.data.seed, "split": split})
        res[split] = len(ds)
    return res


# --------------------------------------------------------------- outputs

def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, path)


def write_run_header(cfg: ExperimentConfig, out: Path, params: ParamStore | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    if params is not None:
        (out / "weights.sha256").write_text(params.content_hash() + "\n")


def load_model(cfg: ExperimentConfig, weights) -> RavenModel:
    store = ParamStore.load(weights)
    try:
        return RavenModel(cfg.model, store)
    except (ValueError, KeyError) as e:
        raise ValueError(f"checkpoint {weights} does not fit the configured model: {e}") from e


# ---------------------------------------------------------------- train

def cmd_train(cfg: ExperimentConfig, out: Path, train_ds=None, val_ds=None) -> dict:
    cfg = cfg.resolved()
    train_ds = train_ds if train_ds is not None else make_split(cfg, "train")
    val_ds = val_ds if val_ds is not None else make_split(cfg, "val")
    model = RavenModel(cfg.model)
    out.mkdir(parents=True, exist_ok=True)
    res = train(model, train_ds, cfg.train, val_ds, log_path=out / "metrics.jsonl")
    model.params.save(out / WEIGHTS)
    write_run_header(cfg, out, model.params)
    ev = cfg.eval
    if ev.threshold is None:
        n = min(len(train_ds), ev.calib_frames)
        thresh, train_f1 = select_threshold(model, train_ds.subset(range(n)), nms_radius=ev.nms_radius,
                                            match_radius=ev.match_radius)
        write_json(out / OPERATING, {"threshold": thresh, "train_f1": train_f1, "frames": n})
    else:
        thresh = ev.threshold
    report = evaluate(model, val_ds, cfg.train.resolved_prefixes(cfg.model.n_chirps), thresh, ev.nms_radius,
                      ev.match_radius)
    summary = {"steps": res.steps, "skipped_steps": res.skipped, "threshold": thresh,
               "weights_sha256": model.params.content_hash(), "val": report}
    write_json(out / "train_summary.json", summary)
    # wall-clock lives apart from the summary so reruns stay byte-identical
    write_json(out / TIMING, {"train_seconds": round(res.seconds, 3),
                              "epoch_seconds": [row.get("seconds") for row in res.log]})
    return summary


# ----------------------------------------------------------------- eval

def operating_threshold(cfg: ExperimentConfig, weights) -> float:
    """Configured threshold, else the one stored beside the weights by `train`, else 0.5."""
    if cfg.eval.threshold is not None:
        return cfg.eval.threshold
    p = Path(weights).parent / OPERATING
    if p.exists():
        return float(json.loads(p.read_text())["threshold"])
    log.warning("no %s next to %s; using threshold 0.5", OPERATING, weights)
    return 0.5


def exit_eval(model: RavenModel, ds, ecfg: ExitConfig, thresh=0.5, match_radius=0.5, nms_radius=2.0) -> dict:
    """Metrics when every frame stops at its own exit point."""
    from .evaluation import _summary
    from .model import decode_detections

    nc = model.config.n_chirps
    dets, probs, lexit = [], [], []
    chirp_used = chirp_full = 0
    for i in range(len(ds)):
        r = run_with_exit(model, ds.frames[i], ecfg, streaming=False)
        dets.append(decode_detections(r.det, min(thresh, 0.05), nms_radius, model.config.extent))
        probs.append(r.seg.prob[0, 0])
        lexit.append(r.l_exit)
        chirp_used += r.chirp_macs_used
        chirp_full += r.chirp_macs_full
    rep = _summary(dets, ds.points, probs, ds.masks, model.config.extent, match_radius, thresh)
    rep.update({"rule": ecfg.rule, "tau": ecfg.tau, "mean_l_exit": float(np.mean(lexit)) if lexit else float(nc),
                "l_exit": lexit, "chirp_mac_ratio": chirp_used / chirp_full if chirp_full else 1.0,
                "mean_l_exit_ratio": float(np.mean(lexit)) / nc if lexit else 1.0})
    return rep


def cmd_eval(cfg: ExperimentConfig, out: Path, weights, prefix: int | None = None, exit_mode: str = "off",
             val_ds=None) -> dict:
    model = load_model(cfg, weights)
    val_ds = val_ds if val_ds is not None else make_split(cfg, "val")
    prefixes = cfg.train.resolved_prefixes(cfg.model.n_chirps)
    if prefix is not None:
        prefixes = sorted(set(prefixes) | {prefix})
    thresh = operating_threshold(cfg, weights)
    ev = cfg.eval
    report = evaluate(model, val_ds, prefixes, thresh, ev.nms_radius, ev.match_radius)
    report["threshold"] = thresh
    if prefix is not None:
        report["prefix"] = prefix
        report["at_prefix"] = report["per_prefix"][str(prefix)]
    if exit_mode != "off":
        rules = ("cosine", "entropy") if exit_mode == "compare" else (exit_mode,)
        report["exit"] = {}
        for rule in rules:
            e = ExitConfig(**{**asdict(cfg.exit), "rule": rule})
            report["exit"][rule] = exit_eval(model, val_ds, e, thresh, ev.match_radius, ev.nms_radius)
    report["weights_sha256"] = model.params.content_hash()
    write_run_header(cfg, out, model.params)
    write_json(out / "eval.json", report)
    return report


def cmd_infer(cfg: ExperimentConfig, out: Path, weights, frames=None, exit_mode: str = "off",
              prefix: int | None = None) -> dict:
    """Per-frame detections, masks and exit point for the validation split (or given frames)."""
    from .model import decode_detections

    model = load_model(cfg, weights)
    thresh = operating_threshold(cfg, weights)
    if frames is None:
        frames = make_split(cfg, "val").frames
    nc = cfg.model.n_chirps
    rows, masks = [], []
    for i, fr in enumerate(frames):
        if exit_mode != "off":
            r = run_with_exit(model, fr, ExitConfig(**{**asdict(cfg.exit), "rule": exit_mode}), streaming=True)
            det, seg, L = r.det, r.seg, r.l_exit
        else:
            L = prefix or nc
            with no_grad():
                det, seg, _ = model.forward(fr[None], mode="prefix", prefix=L)
        dets = decode_detections(det, thresh, cfg.eval.nms_radius, cfg.model.extent)
        masks.append((seg.prob[0, 0] > 0.5).astype(np.uint8))
        rows.append({"frame": i, "l_exit": int(L), "detections": [list(map(float, d)) for d in dets]})
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "masks.npy", np.stack(masks) if masks else np.zeros((0,) + cfg.label_grid, np.uint8))
    write_run_header(cfg, out, model.params)
    result = {"threshold": thresh, "frames": rows}
    write_json(out / "infer.json", result)
    return result


# ------------------------------------------------------------ calibration

def novelty_traces(model: RavenModel, frames, rule: str = "cosine", batch: int = 16) -> list[np.ndarray]:
    curves = []
    with no_grad():
        for s in range(0, len(frames), batch):
            model.params.begin()
            z = model.encode(frames[s:s + batch]).z.data
            for row in z:
                curves.append(novelty_curve(row) if rule == "cosine" else entropy_curve(row))
    return curves


def cmd_calibrate_tau(cfg: ExperimentConfig, out: Path, weights, train_ds=None) -> dict:
    model = load_model(cfg, weights)
    train_ds = train_ds if train_ds is not None else make_split(cfg, "train")
    curves = novelty_traces(model, train_ds.frames, cfg.exit.rule)
    tau, info = calibrate_tau(curves, return_info=True)
    out.mkdir(parents=True, exist_ok=True)
    write_traces(out / "traces.csv", curves)
    derived = cfg.to_dict()
    derived["exit"]["tau"] = tau
    write_json(out / "config.calibrated.json", derived)
    write_run_header(cfg, out, model.params)
    res = {"tau": tau, "knee_L": info["knee_L"], "raw_tau": info["raw_tau"], "frames": len(curves)}
    write_json(out / "calibration.json", res)
    return res


# --------------------------------------------------------------- profile

def cmd_profile(cfg: ExperimentConfig, out: Path, runs: int = 100, weights=None) -> dict:
    model = load_model(cfg, weights) if weights else RavenModel(cfg.resolved().model)
    rep = mac_report(cfg.model, params=model.params.num_values())
    rng = np.random.default_rng(cfg.seed)
    frame = rng.normal(size=(1, cfg.model.n_chirps, cfg.model.n_samples, 2 * cfg.model.n_rx)).astype(np.float32)
    if runs > 0:
        rep.wall_ms = time_stages(model, frame, runs)
    res = rep.to_dict()
    res["wall_clock_note"] = "advisory; medians over %d runs" % runs
    write_run_header(cfg, out)
    write_json(out / "profile.json", res)
    return res


# ----------------------------------------------------------- chirp sweep

def cmd_sweep_chirps(cfg: ExperimentConfig, out: Path, weights, lengths=None, val_ds=None) -> dict:
    model = load_model(cfg, weights)
    val_ds = val_ds if val_ds is not None else make_split(cfg, "val")
    nc = cfg.model.n_chirps
    lo = max(cfg.model.t_det, cfg.model.t_seg)
    lengths = sorted(set(lengths or cfg.sweep or range(lo, nc + 1, lo)))
    if lengths[0] < lo:
        raise ValueError(f"chirp counts below the decoder pooling length {lo}: {lengths[0]}")
    thresh = operating_threshold(cfg, weights)
    report = evaluate(model, val_ds, lengths, thresh, cfg.eval.nms_radius, cfg.eval.match_radius)
    out.mkdir(parents=True, exist_ok=True)
    keys = ("f1", "ap", "ar", "miou", "dice", "chamfer", "re_m", "ae_deg")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", *keys])
        for L in lengths:
            r = report["per_prefix"][str(L)]
            w.writerow([L, *[repr(float(r[k])) for k in keys]])
    curves = novelty_traces(model, val_ds.frames, "cosine")
    mean = np.mean(curves, axis=0) if curves else np.zeros(0)
    with open(out / "novelty.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", "mean_d_L"])
        for L, v in enumerate(mean, start=1):
            w.writerow([L, repr(float(v))])
    write_run_header(cfg, out, model.params)
    return {"lengths": lengths, "threshold": thresh, "per_prefix": {str(L): report["per_prefix"][str(L)] for L in lengths},
            "mean_d_L": mean.tolist()}


def exit_rule_comparison(model: RavenModel, ds, cfg: ExitConfig, entropy_tau: float | None = None,
                         thresh: float = 0.5) -> dict:
    """Cosine and entropy exits on the same model and frames."""
    res = {"cosine": exit_eval(model, ds, ExitConfig(**{**asdict(cfg), "rule": "cosine"}), thresh)}
    et = cfg.tau if entropy_tau is None else entropy_tau
    res["entropy"] = exit_eval(model, ds, ExitConfig(**{**asdict(cfg), "rule": "entropy", "tau": et}), thresh)
    return res

