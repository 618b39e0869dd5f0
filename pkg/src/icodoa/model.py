"""Icosahedral CNN for DOA regression with a soft-argmax head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import layers as L
from .grid import build_grid
from .srp import FramingConfig

MAGIC = b"ICODOA1"


@dataclass(frozen=True)
class ModelConfig:
    r: int = 1
    channels: int = 32
    n_final_units: int = 5
    temporal_kernel: int = 5

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("input resolution must be >= 1")

    @property
    def n_downsampling(self) -> int:
        return self.r - 1

    @property
    def n_units(self) -> int:
        return 2 * self.n_downsampling + self.n_final_units

    def unit_shapes(self, k: int) -> dict[str, tuple[int, ...]]:
        C, K = self.channels, self.temporal_kernel
        c_in, o_in = (1, 1) if k == 0 else (C, L.N_ORIENT)
        last = k == self.n_units - 1
        c_t = 1 if last else C
        shapes = {
            "hex.weight": (C, c_in, o_in, 7),
            "hex.bias": (C,),
            "time.weight": (c_t, C, K),
            "time.bias": (c_t,),
        }
        if not last:
            shapes["norm.scale"] = (C,)
            shapes["norm.bias"] = (C,)
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"units.{k}.{name}": shape for k in range(self.n_units) for name, shape in self.unit_shapes(k).items()}


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in cfg.param_shapes().values())


def receptive_field(cfg: ModelConfig, framing: FramingConfig = FramingConfig(), fs: float = 16000) -> tuple[int, float]:
    """Temporal receptive field in frames and seconds."""
    frames = 1 + (cfg.temporal_kernel - 1) * cfg.n_units
    seconds = (frames - 1) * framing.hop / fs + framing.K / fs
    return frames, seconds


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Uniform +/- sqrt(1/fan_in) weights and biases; layer-norm scale 1, bias 0."""
    gen = torch.Generator().manual_seed(seed)
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith("norm.scale"):
            params[name] = torch.ones(shape, dtype=dtype)
        elif name.endswith("norm.bias"):
            params[name] = torch.zeros(shape, dtype=dtype)
        else:
            unit = name.rsplit(".", 2)[0]
            wshape = cfg.param_shapes()[unit + (".hex.weight" if ".hex." in name else ".time.weight")]
            fan_in = int(np.prod(wshape[1:]))
            params[name] = L.init_uniform(shape, fan_in, gen, dtype)
    return params


def soft_argmax(logits: torch.Tensor, coords: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Expected grid direction under the max-shifted softmax of ``(..., cells)`` logits.

    The mean of unit vectors can exceed unit length by rounding; such
    results are scaled back onto the sphere.
    """
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    prob = e / e.sum(dim=-1, keepdim=True)
    v = prob @ coords
    return v / v.norm(dim=-1, keepdim=True).clamp(min=1.0), prob


def _apply_unit(x: torch.Tensor, params: dict[str, torch.Tensor], k: int, last: bool) -> torch.Tensor:
    p = f"units.{k}."
    x = L.ico_conv(x, params[p + "hex.weight"], params[p + "hex.bias"])
    x = L.temporal_conv(x, params[p + "time.weight"], params[p + "time.bias"])
    if not last:
        x = L.layer_norm(x, params[p + "norm.scale"], params[p + "norm.bias"])
        x = L.relu(x)
    if not torch.all(torch.isfinite(x)):
        raise FloatingPointError(f"non-finite activations after unit {k}")
    return x


def forward_logits(maps: torch.Tensor, params: dict[str, torch.Tensor], cfg: ModelConfig) -> torch.Tensor:
    """Output logits ``[T, n_cells(r=1)]`` for input maps ``[T, n_cells(r)]``."""
    grid = build_grid(cfg.r)
    if maps.dim() != 2 or maps.shape[1] != grid.n_cells:
        raise ValueError(f"expected maps of shape [T, {grid.n_cells}] for r={cfg.r}, got {tuple(maps.shape)}")
    x = maps.reshape(maps.shape[0], 1, 1, *grid.shape)
    k = 0
    for _ in range(cfg.n_downsampling):
        for _ in range(2):
            x = _apply_unit(x, params, k, last=False)
            k += 1
        x = L.ico_pool(x)
    for j in range(cfg.n_final_units):
        x = _apply_unit(x, params, k, last=j == cfg.n_final_units - 1)
        k += 1
    x = L.orientation_maxpool(x)
    return x.reshape(x.shape[0], -1)


def _coords(dtype) -> torch.Tensor:
    return torch.from_numpy(build_grid(1).coords).to(dtype)


def forward(maps: torch.Tensor, params: dict[str, torch.Tensor], cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """DOA vectors ``[T, 3]`` and probability maps ``[T, 40]``.

    Vertex logits are set to 0 before the soft-argmax, so vertex cells keep a
    small probability.  Their coordinates sum to zero, which keeps the
    output exactly equivariant.
    """
    logits = forward_logits(maps, params, cfg)
    vmask = torch.from_numpy(build_grid(1).vertex_mask)
    logits = logits.masked_fill(vmask, 0.0)
    return soft_argmax(logits, _coords(logits.dtype))


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write ``ICODOA1``, a text header of (name, rank, dims) lines, then little-endian float32 data."""
    lines = [MAGIC.decode(), "meta " + json.dumps(meta or {}, sort_keys=True), f"tensors {len(tensors)}"]
    for name, t in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        lines.append(" ".join([name, str(t.dim()), *map(str, t.shape)]))
    header = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(header)
        for t in tensors.values():
            fh.write(t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: not an ICODOA1 checkpoint")
    pos = len(MAGIC) + 1

    def readline() -> str:
        nonlocal pos
        end = data.index(b"\n", pos)
        line = data[pos:end].decode()
        pos = end + 1
        return line

    meta_line = readline()
    if not meta_line.startswith("meta "):
        raise CheckpointError("missing meta line")
    meta = json.loads(meta_line[5:])
    count_line = readline().split()
    if count_line[0] != "tensors":
        raise CheckpointError("missing tensor count")
    specs = []
    for _ in range(int(count_line[1])):
        parts = readline().split()
        name, rank = parts[0], int(parts[1])
        dims = tuple(int(d) for d in parts[2 : 2 + rank])
        specs.append((name, dims))
    tensors = {}
    for name, dims in specs:
        n = int(np.prod(dims)) if dims else 1
        nbytes = 4 * n
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated data for {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        pos += nbytes
    if pos != len(data):
        raise CheckpointError("trailing bytes after tensor data")
    return tensors, meta


def save_model(path, params: dict[str, torch.Tensor], cfg: ModelConfig, extra: dict | None = None) -> None:
    meta = {"model": asdict(cfg), **(extra or {})}
    save_checkpoint(path, params, meta)


def load_model(path) -> tuple[dict[str, torch.Tensor], ModelConfig, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model"])
    expected = cfg.param_shapes()
    if set(expected) != set(tensors):
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(f"{name}: shape {tuple(tensors[name].shape)} != {shape}")
    return tensors, cfg, meta
