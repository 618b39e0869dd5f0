import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icodoa.checks import REFERENCE_SIZES, model_equivariance, random_maps
from icodoa.grid import build_grid
from icodoa.model import (
    CheckpointError,
    ModelConfig,
    forward,
    forward_logits,
    init_params,
    load_checkpoint,
    load_model,
    param_count,
    receptive_field,
    save_checkpoint,
    save_model,
    soft_argmax,
)

COORDS = torch.from_numpy(build_grid(1).coords)


def test_soft_argmax_one_hot():
    for i in (0, 7, 39):
        logits = torch.zeros(40, dtype=torch.float64)
        logits[i] = 20.0
        v, p = soft_argmax(logits, COORDS)
        assert torch.allclose(v, COORDS[i], atol=1e-5)
        assert p.sum() == pytest.approx(1.0)


def test_soft_argmax_uniform():
    v, _ = soft_argmax(torch.full((40,), 3.0, dtype=torch.float64), COORDS)
    assert torch.allclose(v, torch.zeros(3, dtype=torch.float64), atol=1e-9)


def test_soft_argmax_two_point():
    i, j = 4, 27
    logits = torch.zeros(40, dtype=torch.float64)
    logits[[i, j]] = 30.0
    v, _ = soft_argmax(logits, COORDS)
    assert torch.allclose(v, (COORDS[i] + COORDS[j]) / 2, atol=1e-9)


def test_soft_argmax_shift_invariant_and_stable():
    logits = torch.randn(5, 40, dtype=torch.float64)
    a, _ = soft_argmax(logits, COORDS)
    b, _ = soft_argmax(logits + 1e4, COORDS)
    assert torch.allclose(a, b)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 40, elements=st.floats(-1e3, 1e3)))
def test_soft_argmax_inside_ball(logits):
    v, p = soft_argmax(torch.from_numpy(logits), COORDS)
    assert float(v.norm()) <= 1.0 + 1e-12
    assert torch.all(p >= 0)


@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_param_count_and_receptive_field(r):
    cfg = ModelConfig(r=r)
    ref = REFERENCE_SIZES["params"][r]
    assert abs(param_count(cfg) - ref) <= 1e-3 * ref
    frames, secs = receptive_field(cfg)
    assert frames == REFERENCE_SIZES["rf_frames"][r]
    assert secs == pytest.approx(REFERENCE_SIZES["rf_seconds"][r], abs=0.01)


def test_architecture_layout():
    assert ModelConfig(r=1).n_downsampling == 0 and ModelConfig(r=1).n_units == 5
    assert ModelConfig(r=3).n_units == 9
    shapes = ModelConfig(r=1).param_shapes()
    assert shapes["units.0.hex.weight"] == (32, 1, 1, 7)
    assert shapes["units.4.time.weight"] == (1, 32, 5)
    assert "units.4.norm.scale" not in shapes


@pytest.mark.parametrize("r", [1, 2, 3])
def test_output_is_resolution_one(r):
    cfg = ModelConfig(r=r, channels=4)
    params = init_params(cfg, seed=0)
    x = random_maps(r, 3, torch.Generator().manual_seed(0))
    logits = forward_logits(x, params, cfg)
    assert logits.shape == (3, 40)
    v, p = forward(x, params, cfg)
    assert v.shape == (3, 3) and p.shape == (3, 40)
    assert torch.all(v.norm(dim=1) <= 1 + 1e-6)


def test_forward_rejects_wrong_resolution():
    cfg = ModelConfig(r=2, channels=2)
    with pytest.raises(ValueError):
        forward(torch.zeros(2, 40), init_params(cfg), cfg)


def test_model_is_causal():
    cfg = ModelConfig(r=1, channels=4)
    params = init_params(cfg, seed=1, dtype=torch.float64)
    x = random_maps(1, 12, torch.Generator().manual_seed(1), torch.float64)
    v = forward(x, params, cfg)[0]
    x2 = x.clone()
    x2[7:] = torch.randn(5, 40, dtype=torch.float64)
    v2 = forward(x2, params, cfg)[0]
    assert torch.equal(v[:7], v2[:7])


def test_receptive_field_is_exact():
    """Frame t depends on frames t-20..t and on nothing earlier."""
    cfg = ModelConfig(r=1, channels=4)
    params = init_params(cfg, seed=2, dtype=torch.float64)
    x = random_maps(1, 30, torch.Generator().manual_seed(2), torch.float64).requires_grad_(True)
    v = forward(x, params, cfg)[0]
    (g,) = torch.autograd.grad(v[25].sum(), x)
    touched = torch.nonzero(g.abs().sum(1)).flatten()
    assert touched.min() == 25 - 20 and touched.max() == 25


def test_init_is_seeded():
    cfg = ModelConfig(r=1, channels=4)
    a, b, c = init_params(cfg, 3), init_params(cfg, 3), init_params(cfg, 4)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)
    assert torch.all(a["units.0.norm.scale"] == 1)


def test_small_model_equivariance():
    assert model_equivariance(1, seed=9, dtype=torch.float64, channels=4) < 1e-10


def test_checkpoint_roundtrip(tmp_path):
    t = {"a": torch.randn(2, 3), "b.c": torch.arange(5.0), "scalar": torch.tensor(1.5)}
    save_checkpoint(tmp_path / "x.ckpt", t, {"k": [1, 2]})
    data = (tmp_path / "x.ckpt").read_bytes()
    assert data.startswith(b"ICODOA1\n")
    got, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"k": [1, 2]}
    assert list(got) == list(t)
    assert all(torch.equal(got[k], t[k]) for k in t)
    # raw little-endian float32 payload in header order
    payload = np.concatenate([v.numpy().ravel() for v in t.values()]).astype("<f4").tobytes()
    assert data.endswith(payload)


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, {"a": torch.ones(4)})
    good = p.read_bytes()
    p.write_bytes(good[:-2])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(good + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(b"NOTACKPT\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    with pytest.raises(CheckpointError):
        save_checkpoint(p, {"bad name": torch.ones(1)})


def test_model_roundtrip_and_validation(tmp_path):
    cfg = ModelConfig(r=2, channels=3)
    params = init_params(cfg, seed=5)
    save_model(tmp_path / "m.ckpt", params, cfg, {"epoch": 3})
    got, cfg2, meta = load_model(tmp_path / "m.ckpt")
    assert cfg2 == cfg and meta["epoch"] == 3
    assert all(torch.equal(got[k], params[k]) for k in params)
    params.pop("units.0.hex.bias")
    save_model(tmp_path / "bad.ckpt", params, cfg)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "bad.ckpt")
