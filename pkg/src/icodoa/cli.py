"""Command-line interface.

Errors are reported as one JSON line on stderr, ``{"error": ..., "type": ...}``,
with a nonzero exit code.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import checks, io
from .evaluation import EvalConfig
from .grid import build_grid
from .model import ModelConfig, load_model, param_count, receptive_field
from .pipeline import TrainConfig, evaluate, generate_dataset, infer, list_trajectories, read_trajectory, run_training
from .sim import SceneRanges
from .srp import MicArray, SrpProcessor
from .training import Curriculum, set_deterministic

EXIT_FAILURE = 1


def _emit(obj: dict) -> None:
    click.echo(json.dumps(obj, sort_keys=True, default=float))


def _fail(exc: BaseException, code: int = EXIT_FAILURE):
    click.echo(json.dumps({"error": str(exc), "type": type(exc).__name__}), err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
            _fail(exc)

    return wrapper


def _array(path: str | None) -> MicArray:
    return MicArray.head12() if path is None else io.read_array_csv(path)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Sound source DOA estimation with icosahedral CNNs on SRP-PHAT maps."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)


# --- selftest ---------------------------------------------------------------


def _suite_grid() -> list[dict]:
    rows = []
    for rep in checks.grid_report():
        r = rep["r"]
        ok = (
            rep["cells"] == checks.REFERENCE_SIZES["cells"][r]
            and rep["nonvertex"] == checks.REFERENCE_SIZES["srp_points"][r]
            and rep["seconds"] < 1.0
            and rep["unit_norm_err"] < 1e-12
            and rep["full_rings"]
            and rep["symmetric_adjacency"]
        )
        rows.append({"check": f"grid r={r}", "ok": ok, **rep})
    for r in (1, 2, 3, 4):
        cfg = ModelConfig(r=r)
        n = param_count(cfg)
        frames, secs = receptive_field(cfg)
        ref = checks.REFERENCE_SIZES["params"][r]
        ok = abs(n - ref) <= 1e-3 * ref and frames == checks.REFERENCE_SIZES["rf_frames"][r] and abs(secs - checks.REFERENCE_SIZES["rf_seconds"][r]) <= 0.01
        rows.append({"check": f"model size r={r}", "ok": ok, "params": n, "rf_frames": frames, "rf_seconds": secs})
    return rows


def _suite_equivariance() -> list[dict]:
    rows = []
    for r in (1, 2):
        for seed in (0, 1):
            le = checks.layer_equivariance(r, seed)
            me = checks.model_equivariance(r, seed)
            rows.append({"check": f"equivariance r={r} seed={seed}", "ok": le < 1e-5 and me < 1e-4, "layer_rel_err": le, "model_rel_err": me})
    return rows


def _suite_gradients() -> list[dict]:
    errs = checks.small_model_gradcheck()
    worst = max(errs.values())
    return [{"check": "gradients r=1 C=2", "ok": worst < 1e-4, "max_rel_err": worst, "tensors": len(errs)}]


def _suite_srp() -> list[dict]:
    rep = checks.srp_oracle(n_dirs=20, r=3, seed=0)
    ok = rep["mean_err_deg"] < rep["quantization_deg"] + 1.0
    return [{"check": "srp anechoic argmax r=3", "ok": ok, **rep}]


SUITES = {"grid": _suite_grid, "equivariance": _suite_equivariance, "gradients": _suite_gradients, "srp": _suite_srp}


@main.command()
@click.option("--suite", type=click.Choice([*SUITES, "all"]), default="all", show_default=True)
@guarded
def selftest(suite: str) -> None:
    """Run built-in consistency checks; one JSON line per check."""
    torch.set_num_threads(1)
    names = list(SUITES) if suite == "all" else [suite]
    failed = 0
    for name in names:
        for row in SUITES[name]():
            _emit({"suite": name, **row})
            failed += not row["ok"]
    if failed:
        _fail(RuntimeError(f"{failed} self-test check(s) failed"))


# --- data -------------------------------------------------------------------


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-traj", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--duration", default=20.0, show_default=True, type=float)
@click.option("--t60-min", default=0.2, show_default=True, type=float)
@click.option("--t60-max", default=1.3, show_default=True, type=float)
@click.option("--snr-min", default=5.0, show_default=True, type=float)
@click.option("--snr-max", default=30.0, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--array", "array_csv", type=click.Path(exists=True, dir_okay=False), help="Microphone positions CSV (default: 12-mic head array).")
@click.option("--keep-clean", is_flag=True, help="Also store the noise-free mixture so training can re-draw the noise.")
@guarded
def gen_data(out, n_traj, duration, t60_min, t60_max, snr_min, snr_max, seed, array_csv, keep_clean) -> None:
    """Simulate moving-source trajectories into OUT/traj_NNNNN/{audio.wav,gt.csv,job.toml}."""
    if not (0 < t60_min <= t60_max) or snr_min > snr_max or duration <= 0:
        raise click.BadParameter("need 0 < t60-min <= t60-max, snr-min <= snr-max and duration > 0")
    ranges = SceneRanges(t60_min=t60_min, t60_max=t60_max, snr_min=snr_min, snr_max=snr_max, duration=duration)
    paths = generate_dataset(Path(out), n_traj, ranges, seed, _array(array_csv), keep_clean)
    _emit({"command": "gen-data", "out": str(out), "trajectories": len(paths), "seed": seed})


@main.command("map")
@click.option("--wav", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--array", "array_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--r", "res", default=1, show_default=True, type=click.IntRange(1, 6))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="*.csv (frame,cell,value) or *.pgm (one image per frame).")
@guarded
def map_cmd(wav, array_csv, res, out) -> None:
    """Compute SRP-PHAT maps of a multichannel WAV."""
    audio, fs = io.read_wav(wav)
    array = _array(array_csv)
    if fs != array.fs:
        array = MicArray(array.positions, fs=fs, c=array.c)
    grid = build_grid(res)
    seq = SrpProcessor(array, grid).process(audio)
    files = io.export_maps(out, seq.maps, grid)
    _emit({"command": "map", "frames": len(seq), "active": int(seq.active.sum()), "r": res, "files": len(files)})


# --- training / evaluation --------------------------------------------------


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), help="Dataset directory; omit to simulate trajectories on the fly.")
@click.option("--r", "res", default=1, show_default=True, type=click.IntRange(1, 6))
@click.option("--epochs", default=50, show_default=True, type=click.IntRange(min=1))
@click.option("--lr", default=1e-4, show_default=True, type=float)
@click.option("--batch", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--log", "log_path", type=click.Path(dir_okay=False), help="Per-epoch CSV log (default: CKPT with .log.csv).")
@click.option("--fixed-snr-epochs", default=None, type=int, help="Epochs at the fixed 30 dB SNR (default: half of --epochs).")
@click.option("--traj-per-epoch", default=50, show_default=True, type=click.IntRange(min=1), help="On-the-fly mode only.")
@click.option("--duration", default=20.0, show_default=True, type=float, help="On-the-fly mode only.")
@click.option("--t60-min", default=0.2, show_default=True, type=float, help="On-the-fly mode only.")
@click.option("--t60-max", default=1.3, show_default=True, type=float, help="On-the-fly mode only.")
@click.option("--n-val", default=5, show_default=True, type=click.IntRange(min=0))
@click.option("--array", "array_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--resume", is_flag=True, help="Continue from CKPT and its .adam state.")
@click.option("--stop-after", type=click.IntRange(min=1), help="Stop after this many epochs (resumable).")
@click.option("--cache", "render_cache", type=click.Path(file_okay=False), help="On-the-fly mode: keep rendered trajectories here and reuse them on later runs.")
@guarded
def train(data, res, epochs, lr, batch, seed, ckpt, log_path, fixed_snr_epochs, traj_per_epoch, duration, t60_min, t60_max, n_val, array_csv, resume, stop_after, render_cache) -> None:
    """Train the DOA model with Adam under the SNR curriculum."""
    array = _array(array_csv if array_csv or data is None else (Path(data) / "array.csv") if (Path(data) / "array.csv").exists() else None)
    fixed = epochs // 2 if fixed_snr_epochs is None else fixed_snr_epochs
    cfg = TrainConfig(
        model=ModelConfig(r=res),
        curriculum=Curriculum(epochs=epochs, fixed_epochs=fixed),
        epochs=epochs,
        lr=lr,
        batch=batch,
        seed=seed,
        traj_per_epoch=traj_per_epoch,
        n_val=n_val,
        ranges=SceneRanges(t60_min=t60_min, t60_max=t60_max, duration=duration),
    )
    result = run_training(cfg, array, Path(ckpt), Path(data) if data else None, Path(log_path) if log_path else None, resume, stop_after, render_cache)
    last = result["history"][-1] if result["history"] else {}
    _emit({"command": "train", "ckpt": str(ckpt), "epochs_run": len(result["history"]), **last})


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--skip-frames", default=5, show_default=True, type=click.IntRange(min=0))
@click.option("--exclude-silent", is_flag=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="RunRecord JSON.")
@guarded
def eval_cmd(ckpt, data, skip_frames, exclude_silent, out) -> None:
    """RMSAE of a checkpoint (and of the SRP map-argmax baseline) over a dataset."""
    params, model, meta = load_model(ckpt)
    array_csv = Path(data) / "array.csv"
    array = io.read_array_csv(array_csv) if array_csv.exists() else MicArray.head12()
    trajs = [read_trajectory(p) for p in list_trajectories(Path(data))]
    rec = evaluate(params, model, trajs, array, EvalConfig(skip_frames, exclude_silent), seed=meta.get("train", {}).get("seed"))
    rec.config["ckpt"] = str(ckpt)
    Path(out).write_text(rec.to_json())
    _emit({"command": "eval", "rmsae_mean": rec.aggregates()["mean"], "baseline_mean": rec.extra["baseline_srp_argmax"]["mean"], "trajectories": len(trajs)})


@main.command("infer")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--wav", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--array", "array_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def infer_cmd(ckpt, wav, array_csv, out) -> None:
    """Per-frame DOA estimates: frame, vx, vy, vz, confidence, azimuth_deg, elevation_deg."""
    set_deterministic()
    params, model, _ = load_model(ckpt)
    audio, fs = io.read_wav(wav)
    array = _array(array_csv)
    if fs != array.fs:
        array = MicArray(array.positions, fs=fs, c=array.c)
    v = infer(params, model, audio, array)
    io.write_inference_csv(out, v)
    _emit({"command": "infer", "frames": len(v), "mean_confidence": float(np.linalg.norm(v, axis=1).mean()) if len(v) else 0.0})


def run(argv: list[str] | None = None) -> None:
    """Console entry point; usage errors also end in a JSON error line."""
    try:
        main.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        _fail(KeyboardInterrupt("aborted"), 130)
    except click.exceptions.ClickException as exc:
        exc.show()
        _fail(exc, exc.exit_code)


if __name__ == "__main__":
    run()
