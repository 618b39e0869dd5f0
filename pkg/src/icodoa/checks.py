"""Self-test routines shared by the CLI ``selftest`` command and the test suite."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import torch
from scipy import signal as sps

from . import layers as L
from .grid import build_grid, quantization_angle, rotation_set
from .evaluation import EvalConfig
from .model import ModelConfig, forward, init_params
from .sim import RoomSpec, SceneRanges, ism_rir
from .srp import FramingConfig, MicArray, SrpProcessor
from .training import Curriculum, backward, gradcheck_params, loss_mse

REFERENCE_SIZES = {
    "cells": {1: 40, 2: 160, 3: 640, 4: 2560},
    "srp_points": {1: 30, 2: 150, 3: 630, 4: 2550},
    "params": {1: 193_505, 2: 290_017, 3: 386_529, 4: 483_041},
    "rf_frames": {1: 21, 2: 29, 3: 37, 4: 45},
    "rf_seconds": {1: 4.10, 2: 5.63, 3: 7.17, 4: 8.70},
}


def grid_report(resolutions=(1, 2, 3, 4)) -> list[dict]:
    out = []
    for r in resolutions:
        build_grid.cache_clear()
        t0 = time.perf_counter()
        g = build_grid(r)
        dt = time.perf_counter() - t0
        ring = g.ring[g.nonvertex_indices]
        symmetric = all(i in g.neighbors[j] for i in range(g.n_cells) for j in g.neighbors[i] if j < g.n_cells)
        out.append(
            {
                "r": r,
                "cells": g.n_cells,
                "nonvertex": int(len(g.nonvertex_indices)),
                "seconds": dt,
                "unit_norm_err": float(np.abs(np.linalg.norm(g.coords, axis=1) - 1).max()),
                "full_rings": bool(np.all(ring >= 0)),
                "symmetric_adjacency": symmetric,
            }
        )
    return out


# --- equivariance -----------------------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def random_maps(r: int, T: int, gen: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    g = build_grid(r)
    x = torch.randn(T, g.n_cells, generator=gen, dtype=torch.float64)
    x[:, torch.from_numpy(g.vertex_indices)] = 0.0
    return x.to(dtype)


def layer_equivariance(r: int, seed: int, dtype=torch.float32, channels: int = 4, T: int = 2) -> float:
    """Max relative error of scalar-projected layer stacks under all 60 rotations.

    Stacks: conv -> maxpool; conv -> relu -> conv (regular) -> maxpool;
    and for ``r >= 2`` the same followed by ico_pool.  Errors are measured on
    non-vertex cells.
    """
    g = build_grid(r)
    rs = rotation_set(r)
    gen = torch.Generator().manual_seed(seed)
    w1 = L.init_uniform((channels, 1, 1, 7), 7, gen, dtype)
    w2 = L.init_uniform((channels, channels, L.N_ORIENT, 7), 7 * channels * 6, gen, dtype)
    x = random_maps(r, T, gen, dtype)

    def stacks(flat):
        xi = flat.reshape(T, 1, 1, *g.shape)
        y1 = L.ico_conv(xi, w1)
        y2 = L.ico_conv(L.relu(y1), w2)
        outs = [(L.orientation_maxpool(y1), r), (L.orientation_maxpool(y2), r)]
        if r >= 2:
            outs.append((L.ico_pool(L.orientation_maxpool(y2)), r - 1))
        return [(o.reshape(T, channels, -1).numpy(), q) for o, q in outs]

    base = stacks(x)
    worst = 0.0
    for k in range(len(rs)):
        rotated = stacks(torch.from_numpy(rs.act(k, x.numpy())))
        for (b, q), (o, _) in zip(base, rotated):
            nv = build_grid(q).nonvertex_indices
            expected = rs.act(k, b, q)
            worst = max(worst, _rel_err(o[..., nv], expected[..., nv]))
    return worst


def model_equivariance(r: int, seed: int, dtype=torch.float32, T: int = 3, channels: int = 32) -> float:
    """Max relative error of ``v(g x)`` against ``R_g v(x)`` over all 60 rotations."""
    cfg = ModelConfig(r=r, channels=channels)
    params = init_params(cfg, seed=seed, dtype=dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    x = random_maps(r, T, gen, dtype)
    rs = rotation_set(r)
    with torch.no_grad():
        v = forward(x, params, cfg)[0].double().numpy()
        worst = 0.0
        for k in range(len(rs)):
            vr = forward(torch.from_numpy(rs.act(k, x.numpy())), params, cfg)[0].double().numpy()
            worst = max(worst, _rel_err(vr, v @ rs.matrices[k].T))
    return worst


# --- gradients --------------------------------------------------------------


def small_model_gradcheck(seed: int = 0, channels: int = 2, T: int = 3, h: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every parameter of a small r=1 model in float64."""
    cfg = ModelConfig(r=1, channels=channels)
    params = init_params(cfg, seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 100)
    x = random_maps(1, T, gen, torch.float64)
    gt = torch.nn.functional.normalize(torch.randn(T, 3, generator=gen, dtype=torch.float64), dim=1)
    return gradcheck_params(lambda p: loss_mse(forward(x, p, cfg)[0], gt), params, h=h)


# --- SRP oracle -------------------------------------------------------------


def anechoic_capture(u: np.ndarray, array: MicArray, rng: np.random.Generator, distance: float = 4.0, n_samples: int = 4096) -> np.ndarray:
    """Array recording of a white-noise point source in free field, direction ``u`` from the array centre."""
    room = RoomSpec.anechoic((4 * distance,) * 3)
    center = np.full(3, 2 * distance)
    h = ism_rir(room, center + distance * np.asarray(u), center + array.positions, array.fs, array.c)
    lead = h.shape[1]
    s = rng.standard_normal(n_samples + lead)
    y = sps.fftconvolve(s[None, :], h, axes=1)
    return y[:, lead : lead + n_samples]


def srp_oracle(n_dirs: int = 100, r: int = 3, seed: int = 0, array: MicArray | None = None) -> dict:
    """Argmax of single-frame SRP maps against the nearest non-vertex cell of the true DOA."""
    array = MicArray.head12() if array is None else array
    g = build_grid(r)
    proc = SrpProcessor(array, g, FramingConfig())
    rng = np.random.default_rng(seed)
    hits, errs = 0, []
    for _ in range(n_dirs):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        m = proc.process(anechoic_capture(u, array, rng)).maps[0]
        am = int(np.argmax(np.where(g.vertex_mask, -np.inf, m)))
        hits += am == g.nearest_cell(u, exclude_vertices=True)
        errs.append(float(np.degrees(np.arccos(np.clip(g.coords[am] @ u, -1, 1)))))
    return {
        "n": n_dirs,
        "hit_rate": hits / n_dirs,
        "mean_err_deg": float(np.mean(errs)),
        "quantization_deg": quantization_angle(g),
    }


def loss_sum_grad(params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    return backward(sum(t.sum() for t in leaves.values()), leaves)


# --- toy training -----------------------------------------------------------

TOY_TRAINING = {"epochs": 10, "traj_per_epoch": 50, "n_heldout": 20, "t60": (0.2, 0.6), "snr_db": 30.0, "duration": 10.0, "lr": 1e-3, "batch": 5}


def toy_training(workdir, seed: int = 0, render_cache=None, **overrides) -> dict:
    """Train an r=1 model on freshly simulated trajectories and score it on held-out ones.

    Returns the final training history and held-out RMSAE of the model and of
    the SRP map-argmax baseline (same maps, same frames).
    """
    from .pipeline import TrainConfig, TrajectorySource, evaluate, run_training

    p = {**TOY_TRAINING, **overrides}
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(
        model=ModelConfig(r=1),
        curriculum=Curriculum(epochs=p["epochs"], fixed_epochs=p["epochs"], fixed_snr=p["snr_db"]),
        epochs=p["epochs"],
        lr=p["lr"],
        batch=p["batch"],
        seed=seed,
        traj_per_epoch=p["traj_per_epoch"],
        n_val=p["n_heldout"],
        ranges=SceneRanges(t60_min=p["t60"][0], t60_max=p["t60"][1], snr_min=p["snr_db"], snr_max=p["snr_db"], duration=p["duration"]),
    )
    array = MicArray.head12()
    t0 = time.perf_counter()
    out = run_training(cfg, array, workdir / "model.ckpt", render_cache=render_cache)
    heldout = TrajectorySource(cfg, array, render_cache=render_cache).validation()
    rec = evaluate(out["params"], cfg.model, heldout, array, EvalConfig(skip_initial_frames=5), seed=seed)
    return {
        "rmsae_deg": rec.extra["pooled_rmsae_deg"],
        "baseline_rmsae_deg": rec.extra["baseline_srp_argmax"]["pooled_rmsae_deg"],
        "history": out["history"],
        "seconds": time.perf_counter() - t0,
        "record": rec,
    }
