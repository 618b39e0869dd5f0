"""Acceptance criteria A1-A11, one PASS/FAIL line each in the terminal summary."""

import filecmp
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from icodoa import checks
from icodoa import layers as L
from icodoa.grid import build_grid
from icodoa.model import ModelConfig, forward, init_params, param_count, receptive_field, soft_argmax
from icodoa.sim import RoomSpec, SceneRanges, SimJob, Trajectory, add_noise, ism_rir, measured_snr, render_reverberant, sample_scene, schroeder_t60, synth_source
from icodoa.srp import MicArray
from icodoa.training import directional_check, gradcheck_params, loss_mse

T1 = checks.REFERENCE_SIZES
CACHE = Path(os.environ.get("ICODOA_CACHE", Path.home() / ".cache" / "icodoa"))


def test_a1_grid_counts(criterion):
    got, slow = {}, []
    for r in (1, 2, 3, 4):
        build_grid.cache_clear()
        t0 = time.perf_counter()
        got[r] = build_grid(r).n_cells
        if time.perf_counter() - t0 >= 1.0:
            slow.append(r)
    criterion("A1", got == T1["cells"] and not slow, f"cells {got}, slower than 1 s: {slow or 'none'}")


def test_a2_srp_counts(criterion):
    got = {r: len(build_grid(r).nonvertex_indices) for r in (1, 2, 3, 4)}
    criterion("A2", got == T1["srp_points"], f"non-vertex cells {got}")


def test_a3_param_counts(criterion):
    got = {r: param_count(ModelConfig(r=r)) for r in (1, 2, 3, 4)}
    rel = {r: abs(got[r] - T1["params"][r]) / T1["params"][r] for r in got}
    criterion("A3", max(rel.values()) <= 1e-3, f"params {got}, max rel dev {max(rel.values()):.1e}")


def test_a4_receptive_fields(criterion):
    got = {r: receptive_field(ModelConfig(r=r)) for r in (1, 2, 3, 4)}
    ok = all(got[r][0] == T1["rf_frames"][r] and abs(got[r][1] - T1["rf_seconds"][r]) <= 0.01 for r in got)
    criterion("A4", ok, "frames/seconds " + ", ".join(f"r={r}: {f}/{s:.3f}" for r, (f, s) in got.items()))


def test_a5_equivariance(criterion):
    t0 = time.perf_counter()
    layer, model = 0.0, 0.0
    for r in (1, 2):
        for seed in range(10):
            layer = max(layer, checks.layer_equivariance(r, seed))
            model = max(model, checks.model_equivariance(r, seed))
    dt = time.perf_counter() - t0
    criterion("A5", layer < 1e-5 and model < 1e-4 and dt < 300, f"layers {layer:.2e} (<1e-5), end-to-end {model:.2e} (<1e-4), 10 draws x 60 rotations x r=1,2 in {dt:.0f} s")


def test_a6_srp_oracle(criterion):
    rep = checks.srp_oracle(n_dirs=100, r=3, seed=0)
    ok = rep["hit_rate"] >= 0.98 and rep["mean_err_deg"] < rep["quantization_deg"] + 1.0
    criterion("A6", ok, f"argmax == nearest cell in {rep['hit_rate']:.0%} (>=98%), mean error {rep['mean_err_deg']:.2f} deg (< {rep['quantization_deg']:.2f} + 1)")


def _op_checks() -> dict[str, float]:
    """Finite-difference checks of every differentiable op, all entries, float64."""
    gen = torch.Generator().manual_seed(0)
    d = torch.float64
    g1, g2 = build_grid(1), build_grid(2)

    def rnd(*shape):
        return torch.randn(*shape, generator=gen, dtype=d)

    def weight_of(shape):
        return rnd(*shape)

    def scalarize(shape):
        w = rnd(*shape)
        return lambda y: (y * w).sum()

    cases = {}
    x1, x6 = rnd(2, 1, 1, *g1.shape), rnd(2, 2, 6, *g1.shape)
    for name, x, w in [("ico_conv scalar", x1, weight_of((2, 1, 1, 7))), ("ico_conv regular", x6, weight_of((2, 2, 6, 7)))]:
        red = scalarize((2, 2, 6, *g1.shape))
        cases[name] = ({"x": x, "w": w, "b": rnd(2)}, lambda p, red=red: red(L.ico_conv(p["x"], p["w"], p["b"])))
    red = scalarize((1, 2, 6, *g1.shape))
    cases["ico_pool"] = ({"x": rnd(1, 2, 6, *g2.shape)}, lambda p: red(L.ico_pool(p["x"])))
    red_t = scalarize((4, 3, 6, *g1.shape))
    cases["temporal_conv"] = ({"x": rnd(4, 2, 6, *g1.shape), "w": rnd(3, 2, 5), "b": rnd(3)}, lambda p: red_t(L.temporal_conv(p["x"], p["w"], p["b"])))
    red_n = scalarize((2, 2, 6, *g1.shape))
    cases["layer_norm"] = ({"x": rnd(2, 2, 6, *g1.shape), "s": rnd(2), "b": rnd(2)}, lambda p: red_n(L.layer_norm(p["x"], p["s"], p["b"])))
    red_m = scalarize((2, 2, 1, *g1.shape))
    cases["orientation_maxpool"] = ({"x": rnd(2, 2, 6, *g1.shape)}, lambda p: red_m(L.orientation_maxpool(p["x"])))
    xr = rnd(50)
    xr = xr + 0.1 * torch.sign(xr)  # keep away from the kink
    cases["relu"] = ({"x": xr}, lambda p: (L.relu(p["x"]) * torch.arange(50, dtype=d)).sum())
    coords = torch.from_numpy(g1.coords)
    u = torch.nn.functional.normalize(rnd(3, 3), dim=1)
    cases["soft_argmax + mse"] = ({"z": rnd(3, 40)}, lambda p: loss_mse(soft_argmax(p["z"], coords)[0], u))
    out = {}
    for name, (params, fn) in cases.items():
        out[name] = max(gradcheck_params(fn, params).values())
    return out


def test_a7_gradients(criterion):
    t0 = time.perf_counter()
    ops = _op_checks()
    small = max(checks.small_model_gradcheck().values())
    cfg = ModelConfig(r=1)
    params = init_params(cfg, seed=0, dtype=torch.float64)
    gen = torch.Generator().manual_seed(1)
    x = checks.random_maps(1, 6, gen, torch.float64)
    gt = torch.nn.functional.normalize(torch.randn(6, 3, generator=gen, dtype=torch.float64), dim=1)
    fn = lambda p: loss_mse(forward(x, p, cfg)[0], gt)
    # h=1e-5 straddles ReLU / max-pool switch points in the 32-channel model
    full_sampled = max(gradcheck_params(fn, params, h=1e-6, max_entries=12, seed=2).values())
    full_dir = directional_check(fn, params, n_dirs=5, h=1e-6)
    dt = time.perf_counter() - t0
    worst_op = max(ops, key=ops.get)
    ok = max(ops.values()) < 1e-4 and small < 1e-4 and full_sampled < 1e-4 and full_dir < 1e-4 and dt < 600
    criterion(
        "A7",
        ok,
        f"ops max {ops[worst_op]:.1e} ({worst_op}), r=1 C=2 model all entries {small:.1e}, r=1 C=32 model sampled entries {full_sampled:.1e} / directional {full_dir:.1e}, {dt:.0f} s",
    )


@pytest.mark.slow
def test_a8_toy_training(criterion, tmp_path):
    res = checks.toy_training(tmp_path, seed=0, render_cache=CACHE / "a8")
    model, base = res["rmsae_deg"], res["baseline_rmsae_deg"]
    h = res["history"]
    criterion(
        "A8",
        model < 20.0 and model < base,
        f"held-out RMSAE {model:.2f} deg (<20) vs SRP-argmax baseline {base:.2f} deg; loss {h[0]['mean_loss']:.4f} -> {h[-1]['mean_loss']:.4f}; {res['seconds'] / 60:.1f} min",
    )


def test_a9_soft_argmax(criterion):
    coords = torch.from_numpy(build_grid(1).coords)
    errs = {}
    one_hot = torch.zeros(40, dtype=torch.float64)
    one_hot[11] = 20.0
    errs["one-hot"] = float((soft_argmax(one_hot, coords)[0] - coords[11]).abs().max())
    errs["uniform"] = float(soft_argmax(torch.zeros(40, dtype=torch.float64), coords)[0].abs().max())
    two = torch.zeros(40, dtype=torch.float64)
    two[[3, 30]] = 40.0
    errs["two-point"] = float((soft_argmax(two, coords)[0] - (coords[3] + coords[30]) / 2).abs().max())
    z = torch.randn(10_000, 40, generator=torch.Generator().manual_seed(0), dtype=torch.float64) * 50
    norm = float(soft_argmax(z, coords)[0].norm(dim=1).max())
    ok = errs["one-hot"] < 1e-5 and errs["uniform"] < 1e-9 and errs["two-point"] < 1e-6 and norm <= 1.0
    criterion("A9", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", max |v| {norm:.6f}")


def _free_field_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    array = MicArray.head12()
    center = np.array([4.0, 4.0, 4.0])
    u = rng.standard_normal(3)
    src = center + rng.uniform(1.0, 3.0) * u / np.linalg.norm(u)
    p = tuple(src)
    job = SimJob(RoomSpec.anechoic((8, 8, 8)), tuple(center), Trajectory(p, p, (0, 0, 0), (0, 0, 0), (0, 0, 0), 2.0), 30.0, seed)
    s, _ = synth_source(rng, 2.0)
    y = render_reverberant(job, array, s)
    n, fs, c = len(s), array.fs, array.c
    S, k = np.fft.rfft(s), np.fft.rfftfreq(n)
    core = slice(2000, n - 2000)
    worst = 0.0
    for i, m in enumerate(center + array.positions):
        d = np.linalg.norm(m - src)
        ref = np.fft.irfft(S * np.exp(-2j * np.pi * k * d * fs / c), n) / (4 * math.pi * d)
        worst = max(worst, np.linalg.norm(y[i, core] - ref[core]) / np.linalg.norm(ref[core]))
    return worst


def test_a10_simulator(criterion):
    ratios = []
    for seed in range(50):
        job = sample_scene(seed, SceneRanges(), 0.06)
        h = ism_rir(job.room, job.trajectory.start, np.array(job.array_center)[None], duration=1.5 * job.room.t60)[0]
        ratios.append(schroeder_t60(h) / job.room.t60)
    ratios = np.array(ratios)
    rng = np.random.default_rng(0)
    snr_err = 0.0
    for snr in (5.0, 12.0, 30.0):
        clean = rng.standard_normal((12, 32000)) * rng.uniform(0.01, 1)
        snr_err = max(snr_err, abs(measured_snr(clean, add_noise(clean, snr, rng)) - snr))
    ff = max(_free_field_error(s) for s in range(5))
    ok = np.all(np.abs(ratios - 1) <= 0.2) and snr_err <= 0.1 and ff <= 1e-3
    criterion(
        "A10",
        ok,
        f"T60 measured/requested in [{ratios.min():.3f}, {ratios.max():.3f}] over 50 rooms (+-20%), SNR error {snr_err:.1e} dB, free-field rel. error {ff:.1e} (<=1e-3)",
    )


def _run(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "icodoa.cli", *args], cwd=cwd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all(filecmp.cmp(a / f, b / f, shallow=False) for f in fa)


def test_a11_determinism(criterion, tmp_path):
    gen = ["gen-data", "--n-traj", "3", "--duration", "5", "--t60-max", "0.4", "--seed", "11", "--keep-clean"]
    for run in ("a", "b"):
        _run(*gen, "--out", str(tmp_path / run / "data"), cwd=tmp_path)
        _run("train", "--data", str(tmp_path / run / "data"), "--epochs", "2", "--n-val", "1", "--batch", "2", "--lr", "1e-3", "--seed", "5", "--ckpt", str(tmp_path / run / "m.ckpt"), cwd=tmp_path)
        _run("train", "--epochs", "1", "--traj-per-epoch", "2", "--duration", "5", "--t60-max", "0.4", "--n-val", "1", "--seed", "6", "--ckpt", str(tmp_path / run / "fly.ckpt"), cwd=tmp_path)
    data_same = _same_tree(tmp_path / "a" / "data", tmp_path / "b" / "data")
    train_same = all(filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False) for f in ("m.ckpt", "m.ckpt.adam", "m.log.csv", "fly.ckpt", "fly.ckpt.adam", "fly.log.csv"))
    criterion("A11", data_same and train_same, f"gen-data outputs identical: {data_same}; train checkpoints, optimizer state and logs identical: {train_same}")
