"""Rotation-equivariant layers on the planar icosahedral representation.

Activations are ``IcoTensor``-shaped torch tensors ``[T, C, O, 5*2^r, 2^(r+1)]``
with ``O`` orientation channels (1 for scalar fields, 6 for regular fields).

Hexagonal kernels are stored as ``[c_out, c_in, o_in, 7]``: tap 0 is the
centre, taps 1..6 follow ``grid.RING_OFFSETS`` (counter-clockwise).
"""

from __future__ import annotations

import functools
import math

import numpy as np
import torch
import torch.nn.functional as F

from .grid import RING_OFFSETS, IcoGrid, build_grid

N_ORIENT = 6
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


def _stencil_pos(di: int, dj: int) -> int:
    return (di + 1) * 3 + (dj + 1)


@functools.lru_cache(maxsize=None)
def _kernel_index() -> tuple[torch.Tensor, torch.Tensor]:
    """``tap[s, pos]`` and ``orient[s, o]`` gather tables for ``expand_kernel``."""
    zero_tap = 7
    tap = np.full((N_ORIENT, 9), zero_tap, dtype=np.int64)
    for s in range(N_ORIENT):
        tap[s, 4] = 0
        for d, (di, dj) in enumerate(RING_OFFSETS):
            tap[s, _stencil_pos(di, dj)] = 1 + (d - s) % N_ORIENT
    orient = (np.arange(N_ORIENT)[None, :] - np.arange(N_ORIENT)[:, None]) % N_ORIENT
    return torch.from_numpy(tap), torch.from_numpy(orient)


def expand_kernel(weight: torch.Tensor) -> torch.Tensor:
    """Expand hexagonal kernels to the 2D bank ``[c_out, 6, c_in, o_in, 3, 3]``.

    Output orientation ``s`` rotates the ring taps by ``s`` steps and, for
    regular inputs, cyclically shifts the input orientation by ``s``.
    """
    c_out, c_in, o_in, taps = weight.shape
    if taps != 7 or o_in not in (1, N_ORIENT):
        raise ShapeError(f"bad hexagonal kernel shape {tuple(weight.shape)}")
    tap, orient = _kernel_index()
    w = torch.cat([weight, weight.new_zeros(c_out, c_in, o_in, 1)], dim=-1)
    if o_in == N_ORIENT:
        bank = w[:, :, orient[:, :, None], tap[:, None, :]]  # [co, ci, s, o, 9]
    else:
        bank = w[:, :, :, tap]  # [co, ci, 1, s, 9]
        bank = bank.permute(0, 1, 3, 2, 4)
    return bank.permute(0, 2, 1, 3, 4).reshape(c_out, N_ORIENT, c_in, o_in, 3, 3)


class _Tables:
    """Torch index tables for one grid resolution."""

    def __init__(self, grid: IcoGrid):
        self.grid = grid
        n = grid.n_cells
        self.vertex = torch.from_numpy(grid.vertex_indices)
        self.vertex_nbrs = torch.from_numpy(grid.vertex_neighbors())
        self.pole_nbrs = torch.from_numpy(grid.pole_neighbors)
        self.nonvertex = torch.from_numpy(grid.nonvertex_indices)
        src = grid.pad_source.ravel()
        self.pad_scalar = torch.from_numpy(src)
        shift = grid.pad_shift.ravel()
        o = np.arange(N_ORIENT)[:, None]
        self.pad_regular = torch.from_numpy((((o - shift[None, :]) % N_ORIENT) * (n + 3) + src[None, :]).ravel())


@functools.lru_cache(maxsize=None)
def tables(r: int) -> _Tables:
    return _Tables(build_grid(r))


def _resolution(x: torch.Tensor) -> int:
    rows, cols = x.shape[-2:]
    r = int(round(math.log2(cols))) - 1
    if r < 1 or cols != 2 ** (r + 1) or rows != 5 * 2**r:
        raise ShapeError(f"spatial shape {(rows, cols)} is not an icosahedral chart layout")
    return r


def _check(x: torch.Tensor) -> int:
    if x.dim() != 5 or x.shape[2] not in (1, N_ORIENT):
        raise ShapeError(f"expected [T, C, O, rows, cols] with O in (1, 6), got {tuple(x.shape)}")
    return _resolution(x)


def vertex_fill(x: torch.Tensor) -> torch.Tensor:
    """Replace vertex cells by the mean of their 5 neighbours.

    Regular fields are also averaged over orientations at the vertices:
    a pentagonal cell has no well-defined frame, and the orientation average
    is the only choice that keeps the layer exactly equivariant.
    """
    r = _check(x)
    tb = tables(r)
    T, C, O = x.shape[:3]
    flat = x.reshape(T, C, O, -1)
    fill = flat[..., tb.vertex_nbrs].mean(dim=-1)
    if O > 1:
        fill = fill.mean(dim=2, keepdim=True).expand(-1, -1, O, -1)
    flat = flat.index_copy(3, tb.vertex, fill)
    return flat.reshape(x.shape)


def planar_pad(x: torch.Tensor) -> torch.Tensor:
    """Pad each chart with one ring copied from the adjacent charts.

    Returns ``[T, C, O, 5*(2^r+2), 2^(r+1)+2]``.  Pole positions take the
    mean of the 5 pole neighbours (orientation-averaged for regular fields);
    positions seen only by vertex stencils are zero.  Regular fields have
    their orientation channels rotated into the receiving chart's frame.
    """
    r = _check(x)
    tb = tables(r)
    g = tb.grid
    T, C, O = x.shape[:3]
    flat = x.reshape(T, C, O, -1)
    poles = flat[..., tb.pole_nbrs].mean(dim=-1)
    if O > 1:
        poles = poles.mean(dim=2, keepdim=True).expand(-1, -1, O, -1)
    ext = torch.cat([flat, poles, flat.new_zeros(T, C, O, 1)], dim=-1)
    PH, PW = g.padded_shape
    if O == 1:
        out = ext[..., tb.pad_scalar]
    else:
        out = ext.reshape(T, C, -1)[..., tb.pad_regular]
    return out.reshape(T, C, O, PH, PW)


def _charts_as_batch(padded: torch.Tensor, r: int) -> torch.Tensor:
    T, C, O, PH5, PW = padded.shape
    PH = PH5 // 5
    return padded.reshape(T, C * O, 5, PH, PW).permute(0, 2, 1, 3, 4).reshape(T * 5, C * O, PH, PW)


def ico_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Icosahedral convolution: vertex fill, chart padding, 3x3 conv with the expanded bank."""
    r = _check(x)
    T, C, O = x.shape[:3]
    c_out, c_in, o_in, _ = weight.shape
    if (c_in, o_in) != (C, O):
        raise ShapeError(f"kernel expects (C, O) = {(c_in, o_in)}, input has {(C, O)}")
    padded = planar_pad(vertex_fill(x))
    bank = expand_kernel(weight).reshape(c_out * N_ORIENT, c_in * o_in, 3, 3)
    y = F.conv2d(_charts_as_batch(padded, r), bank)
    H, W = 2**r, 2 ** (r + 1)
    y = y.reshape(T, 5, c_out, N_ORIENT, H, W).permute(0, 2, 3, 1, 4, 5).reshape(T, c_out, N_ORIENT, 5 * H, W)
    if bias is not None:
        y = y + bias.reshape(1, c_out, 1, 1, 1)
    return y


@functools.lru_cache(maxsize=None)
def _pool_kernel() -> torch.Tensor:
    k = torch.zeros(3, 3, dtype=torch.float64)
    k[1, 1] = 1.0
    for di, dj in RING_OFFSETS:
        k[di + 1, dj + 1] = 1.0
    return k / 7.0


def ico_pool(x: torch.Tensor) -> torch.Tensor:
    """Average each surviving cell with its 6 neighbours, halving the resolution.

    Coarse vertex cells take the mean of the fine vertex and its 5
    neighbours.
    """
    r = _check(x)
    if r < 2:
        raise ShapeError("ico_pool needs resolution >= 2")
    T, C, O = x.shape[:3]
    filled = vertex_fill(x)
    padded = planar_pad(filled)
    k = _pool_kernel().to(x.dtype).reshape(1, 1, 3, 3).expand(C * O, 1, 3, 3)
    y = F.conv2d(_charts_as_batch(padded, r), k, stride=2, groups=C * O)
    H, W = 2 ** (r - 1), 2**r
    y = y.reshape(T, 5, C, O, H, W).permute(0, 2, 3, 1, 4, 5).reshape(T, C, O, -1)
    # fine vertex (already the mean of its 5 neighbours) equals the 6-point mean
    fine, coarse = tables(r), tables(r - 1)
    fine_vertex = filled.reshape(T, C, O, -1)[..., fine.vertex]
    order = _coarse_vertex_order(r)
    y = y.index_copy(3, coarse.vertex, fine_vertex[..., order])
    return y.reshape(T, C, O, 5 * H, W)


@functools.lru_cache(maxsize=None)
def _coarse_vertex_order(r: int) -> torch.Tensor:
    fine, coarse = build_grid(r), build_grid(r - 1)
    idx = fine.match(coarse.coords[coarse.vertex_indices])
    pos = {int(v): k for k, v in enumerate(fine.vertex_indices)}
    return torch.tensor([pos[int(i)] for i in idx])


def temporal_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Causal convolution over frames; tap ``-1`` multiplies the current frame.

    Orientations and cells are treated as independent signals sharing the
    weights ``[c_out, c_in, K]``.
    """
    if x.dim() != 5:
        raise ShapeError(f"expected a 5-D IcoTensor, got {tuple(x.shape)}")
    T, C, O, R, W = x.shape
    c_out, c_in, K = weight.shape
    if c_in != C:
        raise ShapeError(f"temporal kernel expects {c_in} channels, input has {C}")
    seq = x.permute(2, 3, 4, 1, 0).reshape(O * R * W, C, T)
    y = F.conv1d(F.pad(seq, (K - 1, 0)), weight, bias)
    return y.reshape(O, R, W, c_out, T).permute(4, 3, 0, 1, 2)


def layer_norm(x: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Per-frame normalization over channels, orientations and non-vertex cells.

    Vertex cells are normalized with the same statistics but do not
    contribute to them (their values are recomputed by the next layer).
    """
    r = _check(x)
    T, C, O = x.shape[:3]
    flat = x.reshape(T, C, O, -1)
    sel = flat[..., tables(r).nonvertex].reshape(T, -1)
    mean = sel.mean(dim=1)
    var = sel.var(dim=1, unbiased=False)
    norm = (x - mean.reshape(T, 1, 1, 1, 1)) / torch.sqrt(var.reshape(T, 1, 1, 1, 1) + eps)
    return norm * scale.reshape(1, C, 1, 1, 1) + bias.reshape(1, C, 1, 1, 1)


def orientation_maxpool(x: torch.Tensor) -> torch.Tensor:
    """Max over the orientation axis; ties send the gradient to the lowest index."""
    if x.shape[2] == 1:
        return x
    top = x.max(dim=2, keepdim=True).values
    idx = (x == top).to(torch.uint8).argmax(dim=2, keepdim=True)
    return x.gather(2, idx)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def init_uniform(shape, fan_in: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)
