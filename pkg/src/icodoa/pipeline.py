"""Dataset generation, training and evaluation loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import io
from .evaluation import EvalConfig, RunRecord, angular_error, rmsae
from .grid import build_grid
from .model import ModelConfig, forward, init_params, load_checkpoint, load_model, save_checkpoint, save_model
from .sim import RENDER_REVISION, SceneRanges, SimJob, add_noise, ground_truth_doa, sample_scene, simulate
from .srp import FramingConfig, MicArray, SrpMapSeq, SrpProcessor, frame_stream, map_argmax_doa, vad_flags
from .training import AdamState, Curriculum, adam_step, backward, loss_mse, set_deterministic

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def job_seed(master: int, index: int, stream: int = 0) -> int:
    """Per-job seed derived from a master seed, a job index and a stream id."""
    return int(np.random.SeedSequence([master, stream, index]).generate_state(1, dtype=np.uint32)[0])


@dataclass
class Trajectory:
    """One rendered trajectory as used by training and evaluation."""

    name: str
    audio: np.ndarray
    doa: np.ndarray
    active: np.ndarray
    clean: np.ndarray | None = None
    job: SimJob | None = None


def dry_activity(source: np.ndarray, framing: FramingConfig) -> np.ndarray:
    """Per-frame activity from the dry source signal."""
    return vad_flags(frame_stream(source[None, :], framing))


def render_trajectory(job: SimJob, array: MicArray, framing: FramingConfig = FramingConfig(), name: str = "") -> Trajectory:
    scene = simulate(job, array, framing.hop)
    n_frames = framing.n_frames(scene.audio.shape[1])
    doa = ground_truth_doa(job, framing.frame_centers(n_frames, job.fs))
    return Trajectory(name, scene.audio, doa, dry_activity(scene.source, framing), scene.clean, job)


def write_trajectory(folder: Path, traj: Trajectory, keep_clean: bool = False) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    peak = float(np.max(np.abs(traj.audio)))
    gain = 1.0 / peak if peak > 0 else 1.0
    io.write_wav(folder / "audio.wav", traj.audio * gain, traj.job.fs)
    if keep_clean and traj.clean is not None:
        io.write_wav(folder / "clean.wav", traj.clean * gain, traj.job.fs)
    io.write_gt_csv(folder / "gt.csv", traj.doa, traj.active)
    io.write_toml(folder / "job.toml", {**traj.job.to_dict(), "wav_gain": gain, "render_revision": RENDER_REVISION})


def read_trajectory(folder: Path) -> Trajectory:
    folder = Path(folder)
    audio, fs = io.read_wav(folder / "audio.wav")
    doa, active = io.read_gt_csv(folder / "gt.csv")
    meta = io.read_toml(folder / "job.toml")
    job = SimJob.from_dict(meta)
    clean = io.read_wav(folder / "clean.wav")[0] if (folder / "clean.wav").exists() else None
    if fs != job.fs:
        raise PipelineError(f"{folder}: WAV rate {fs} != job rate {job.fs}")
    return Trajectory(folder.name, audio, doa, active, clean, job)


def list_trajectories(data: Path) -> list[Path]:
    dirs = sorted(p for p in Path(data).iterdir() if (p / "audio.wav").exists())
    if not dirs:
        raise PipelineError(f"no trajectories found in {data}")
    return dirs


def generate_dataset(out: Path, n_traj: int, ranges: SceneRanges, seed: int, array: MicArray, keep_clean: bool = False, framing: FramingConfig = FramingConfig()) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    extent = float(np.max(np.linalg.norm(array.positions, axis=1)))
    io.write_array_csv(out / "array.csv", array)
    io.write_toml(out / "dataset.toml", {"seed": seed, "n_traj": n_traj, "ranges": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(ranges).items()}})
    paths = []
    for i in range(n_traj):
        job = sample_scene(job_seed(seed, i), ranges, array_extent=extent, framing=framing, fs=int(array.fs))
        folder = out / f"traj_{i:05d}"
        write_trajectory(folder, render_trajectory(job, array, framing, folder.name), keep_clean)
        log.info("wrote %s (T60 %.2f s, SNR %.1f dB)", folder, job.room.t60, job.snr_db)
        paths.append(folder)
    return paths


# --- maps -------------------------------------------------------------------


class MapCache:
    """SRP-PHAT maps per (trajectory, SNR override)."""

    def __init__(self, array: MicArray, r: int, framing: FramingConfig = FramingConfig()):
        self.proc = SrpProcessor(array, build_grid(r), framing)
        self._cache: dict = {}

    def maps(self, traj: Trajectory, key=None) -> SrpMapSeq:
        k = (traj.name, key)
        if k not in self._cache:
            self._cache[k] = self.proc.process(traj.audio)
        return self._cache[k]

    def retain(self, names: set[str]) -> None:
        """Drop everything except maps of the unmodified trajectories in ``names``."""
        self._cache = {k: v for k, v in self._cache.items() if k[1] is None and k[0] in names}


def align(maps: SrpMapSeq, doa: np.ndarray, active: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = min(len(maps), len(doa))
    return maps.maps[:T], doa[:T], active[:T]


def estimate(maps: np.ndarray, params, cfg: ModelConfig) -> np.ndarray:
    with torch.no_grad():
        v, _ = forward(torch.from_numpy(np.asarray(maps, dtype=np.float32)), params, cfg)
    return v.double().numpy()


# --- training -------------------------------------------------------------


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    curriculum: Curriculum = field(default_factory=Curriculum)
    epochs: int = 50
    lr: float = 1e-4
    batch: int = 5
    seed: int = 0
    traj_per_epoch: int = 50
    n_val: int = 5
    ranges: SceneRanges = field(default_factory=SceneRanges)
    skip_frames: int = 5


class TrajectorySource:
    """Training trajectories for an epoch: from a dataset directory or generated on the fly.

    With a dataset, the last ``n_val`` trajectories are held out for
    validation (none if the dataset is not larger than that).  If they
    store ``clean.wav``, noise is re-drawn at the
    curriculum SNR; otherwise the stored mixtures are used as they are.
    Generated trajectories are rendered at the curriculum SNR.
    """

    def __init__(self, cfg: TrainConfig, array: MicArray, data: Path | None = None, framing: FramingConfig = FramingConfig(), render_cache: Path | None = None):
        self.cfg, self.array, self.framing = cfg, array, framing
        self.render_cache = None if render_cache is None else Path(render_cache)
        self.paths = self.val_paths = None
        if data is not None:
            paths = list_trajectories(data)
            n_val = cfg.n_val if len(paths) > cfg.n_val else 0
            self.paths, self.val_paths = paths[: len(paths) - n_val], paths[len(paths) - n_val :]
        self._loaded: dict[Path, Trajectory] = {}
        self.extent = float(np.max(np.linalg.norm(array.positions, axis=1)))

    def _load(self, p: Path) -> Trajectory:
        if p not in self._loaded:
            self._loaded[p] = read_trajectory(p)
        return self._loaded[p]

    def epoch(self, epoch: int) -> tuple[list[Trajectory], list[object]]:
        """Trajectories for ``epoch`` (1-based) and a cache key per trajectory."""
        cfg = self.cfg
        snr_rng = np.random.default_rng([cfg.seed, 7, epoch])
        if self.paths is not None:
            order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(len(self.paths))
            out, keys = [], []
            for i in order:
                tr = self._load(self.paths[i])
                snr = cfg.curriculum.snr(epoch, snr_rng)
                if tr.clean is not None:
                    noisy = add_noise(tr.clean, snr, np.random.default_rng([cfg.seed, 11, epoch, int(i)]))
                    tr = replace(tr, audio=noisy)
                    keys.append((epoch, snr))
                else:
                    keys.append(None)
                out.append(tr)
            return out, keys
        out = []
        for i in range(cfg.traj_per_epoch):
            snr = cfg.curriculum.snr(epoch, snr_rng)
            job = sample_scene(job_seed(cfg.seed, i, stream=epoch), cfg.ranges, self.extent, self.framing, int(self.array.fs), snr_db=snr)
            out.append(self._render(job, f"e{epoch}_t{i}"))
        return out, [None] * len(out)

    def _render(self, job: SimJob, name: str) -> Trajectory:
        """Render ``job``, reusing a cached copy when the stored job matches exactly."""
        if self.render_cache is None:
            return render_trajectory(job, self.array, self.framing, name)
        folder = self.render_cache / name
        meta = folder / "job.toml"
        if meta.exists() and io.read_toml(meta).get("render_revision") == RENDER_REVISION:
            tr = read_trajectory(folder)
            if tr.job.to_dict() == job.to_dict():
                return replace(tr, name=name)
        tr = render_trajectory(job, self.array, self.framing, name)
        folder.mkdir(parents=True, exist_ok=True)
        write_trajectory(folder, tr)
        return read_trajectory(folder)

    def validation(self) -> list[Trajectory]:
        if self.paths is not None:
            return [self._load(p) for p in self.val_paths]
        snr = self.cfg.curriculum.fixed_snr
        return [
            self._render(sample_scene(job_seed(self.cfg.seed, i, stream=10_000), self.cfg.ranges, self.extent, self.framing, int(self.array.fs), snr_db=snr), f"val_{i}")
            for i in range(self.cfg.n_val)
        ]


def adam_path(ckpt: Path) -> Path:
    return Path(str(ckpt) + ".adam")


def save_training_state(ckpt: Path, params, model: ModelConfig, state: AdamState, epoch: int, train_cfg: dict) -> None:
    save_model(ckpt, params, model, {"epoch": epoch, "train": train_cfg})
    save_checkpoint(adam_path(ckpt), state.tensors(), {"adam": state.hyper(), "epoch": epoch})


def _train_cfg_dict(cfg: TrainConfig) -> dict:
    return {
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "batch": cfg.batch,
        "seed": cfg.seed,
        "traj_per_epoch": cfg.traj_per_epoch,
        "curriculum": asdict(cfg.curriculum),
    }


def run_training(cfg: TrainConfig, array: MicArray, ckpt: Path, data: Path | None = None, log_path: Path | None = None, resume: bool = False, stop_after: int | None = None, render_cache: Path | None = None) -> dict:
    """Train, writing the checkpoint (plus Adam state) after every epoch and a CSV log.

    ``stop_after`` ends the run after that many epochs of this invocation,
    leaving a resumable checkpoint.  ``render_cache`` stores generated
    trajectories so repeated runs with the same seed skip the simulation.
    """
    set_deterministic(cfg.seed)
    ckpt = Path(ckpt)
    log_path = Path(log_path) if log_path is not None else ckpt.with_suffix(".log.csv")
    framing = FramingConfig()
    source = TrajectorySource(cfg, array, data, framing, render_cache)
    if resume and ckpt.exists():
        params, model, meta = load_model(ckpt)
        tensors, ameta = load_checkpoint(adam_path(ckpt))
        state = AdamState.restore(ameta["adam"], tensors)
        start = int(meta["epoch"]) + 1
        if model != cfg.model:
            raise PipelineError("checkpoint model configuration differs from the requested one")
    else:
        params = init_params(cfg.model, seed=cfg.seed)
        state = AdamState(lr=cfg.lr)
        start = 1
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "mean_loss", "val_rmsae_deg", "lr", "snr_phase"])
    maps = MapCache(array, cfg.model.r, framing)
    val = source.validation()
    history = []
    done = 0
    for epoch in range(start, cfg.epochs + 1):
        if stop_after is not None and done >= stop_after:
            break
        trajs, keys = source.epoch(epoch)
        losses = []
        for b in range(0, len(trajs), cfg.batch):
            batch = list(zip(trajs[b : b + cfg.batch], keys[b : b + cfg.batch]))
            leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
            total = 0.0
            for tr, key in batch:
                m, doa, _ = align(maps.maps(tr, key), tr.doa, tr.active)
                v, _ = forward(torch.from_numpy(m.astype(np.float32)), leaves, cfg.model)
                total = total + loss_mse(v, torch.from_numpy(doa.astype(np.float32)))
            loss = total / len(batch)
            if not torch.isfinite(loss):
                seeds = [tr.job.seed if tr.job else tr.name for tr, _ in batch]
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, trajectories {seeds}")
            grads = backward(loss, leaves)
            params = adam_step(leaves, grads, state)
            losses.append(float(loss.detach()))
        val_rmsae = evaluate_params(params, cfg.model, val, maps, EvalConfig(cfg.skip_frames)) if val else float("nan")
        row = [epoch, float(np.mean(losses)), val_rmsae, state.lr, cfg.curriculum.phase(epoch)]
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)
        history.append(dict(zip(["epoch", "mean_loss", "val_rmsae_deg", "lr", "snr_phase"], row)))
        save_training_state(ckpt, params, cfg.model, state, epoch, _train_cfg_dict(cfg))
        log.info("epoch %d loss %.5f val RMSAE %.2f deg", epoch, row[1], val_rmsae)
        keep = {t.name for t in val} | ({p.name for p in source.paths} if source.paths else set())
        maps.retain(keep)
        done += 1
    return {"params": params, "history": history, "state": state}


def evaluate_params(params, model: ModelConfig, trajs: list[Trajectory], maps: MapCache, ecfg: EvalConfig) -> float:
    vals = []
    for tr in trajs:
        m, doa, active = align(maps.maps(tr), tr.doa, tr.active)
        vals.append(rmsae(angular_error(estimate(m, params, model), doa), ecfg, active))
    return float(np.mean(vals))


def evaluate(params, model: ModelConfig, trajs: list[Trajectory], array: MicArray, ecfg: EvalConfig, seed: int | None = None) -> RunRecord:
    """Per-trajectory and pooled RMSAE of the model and of the SRP map-argmax baseline.

    The pooled figure is the RMS over the retained frames of all trajectories.
    """
    maps = MapCache(array, model.r)
    grid = build_grid(model.r)
    rec = RunRecord({"model": asdict(model), "eval": asdict(ecfg)}, seed)
    baseline = {}
    sq = {"model": [], "baseline": []}
    for tr in trajs:
        seq = maps.maps(tr)
        m, doa, active = align(seq, tr.doa, tr.active)
        e_model = angular_error(estimate(m, params, model), doa)
        e_base = angular_error(map_argmax_doa(m, grid, seq.active[: len(m)]), doa)
        rec.per_trajectory[tr.name] = rmsae(e_model, ecfg, active)
        baseline[tr.name] = rmsae(e_base, ecfg, active)
        keep = _kept_frames(len(m), ecfg, active)
        sq["model"].append(e_model[keep] ** 2)
        sq["baseline"].append(e_base[keep] ** 2)
    pooled = {k: float(np.sqrt(np.concatenate(v).mean())) if v else float("nan") for k, v in sq.items()}
    b = np.array(list(baseline.values()))
    rec.extra["pooled_rmsae_deg"] = pooled["model"]
    rec.extra["baseline_srp_argmax"] = {"per_trajectory": baseline, "mean": float(b.mean()) if len(b) else float("nan"), "pooled_rmsae_deg": pooled["baseline"]}
    return rec


def _kept_frames(n: int, ecfg: EvalConfig, active: np.ndarray) -> np.ndarray:
    keep = np.arange(n) >= ecfg.skip_initial_frames
    if ecfg.exclude_silent:
        keep &= np.asarray(active, dtype=bool)
    return keep


def infer(params, model: ModelConfig, audio: np.ndarray, array: MicArray) -> np.ndarray:
    seq = SrpProcessor(array, build_grid(model.r)).process(audio)
    return estimate(seq.maps, params, model)
