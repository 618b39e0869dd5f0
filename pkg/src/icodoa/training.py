"""Loss, gradients, Adam and the SNR curriculum.

Reverse-mode differentiation is delegated to torch autograd; the ops in
``layers`` are built from gathers, convolutions and elementwise functions,
all of which autograd records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch


def set_deterministic(seed: int | None = None) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    if seed is not None:
        torch.manual_seed(seed)


def loss_mse(est: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean of squared differences over frames and the 3 coordinates."""
    if est.shape != gt.shape:
        raise ValueError(f"estimate shape {tuple(est.shape)} != ground truth {tuple(gt.shape)}")
    return ((est - gt) ** 2).mean()


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss with respect to every parameter.

    Parameters not reached by the loss get zero gradients.
    """
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)}


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"m.{k}": t for k, t in self.m.items()}
        out.update({f"v.{k}": t for k, t in self.v.items()})
        return out

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}

    @classmethod
    def restore(cls, hyper: dict, tensors: dict[str, torch.Tensor]) -> "AdamState":
        st = cls(**hyper)
        for key, t in tensors.items():
            kind, name = key.split(".", 1)
            (st.m if kind == "m" else st.v)[name] = t.clone()
        return st


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState) -> dict[str, torch.Tensor]:
    """Bias-corrected Adam update; returns new parameter tensors and mutates ``state``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not torch.all(torch.isfinite(g)):
            bad = int((~torch.isfinite(g)).sum())
            raise NonFiniteGradient(f"{bad} non-finite gradient entries in {name} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name, torch.zeros_like(p))
            v = state.v.get(name, torch.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            state.m[name], state.v[name] = m, v
            upd = state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps)
            out[name] = (p - upd).detach()
    return out


@dataclass(frozen=True)
class Curriculum:
    epochs: int = 50
    fixed_epochs: int = 25
    fixed_snr: float = 30.0
    snr_min: float = 5.0
    snr_max: float = 30.0

    def phase(self, epoch: int) -> str:
        """``epoch`` is 1-based."""
        if not 1 <= epoch <= self.epochs:
            raise ValueError(f"epoch {epoch} outside 1..{self.epochs}")
        return "fixed" if epoch <= self.fixed_epochs else "random"

    def snr(self, epoch: int, rng: np.random.Generator) -> float:
        if self.phase(epoch) == "fixed":
            return self.fixed_snr
        return float(rng.uniform(self.snr_min, self.snr_max))


def finite_difference_grad(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-5, indices=None) -> torch.Tensor:
    """Central differences of scalar ``fn()`` with respect to entries of ``tensor`` (modified in place)."""
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = torch.zeros(flat.numel(), dtype=torch.float64)
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.view(tensor.shape)


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """``max|a-b| / max(max|a|, max|b|, floor)``."""
    scale = max(float(a.abs().max()), float(b.abs().max()), floor)
    return float((a - b).abs().max()) / scale


def gradcheck_params(fn: Callable[[dict[str, torch.Tensor]], torch.Tensor], params: dict[str, torch.Tensor], h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare autograd against central differences for each named tensor.

    ``max_entries`` limits the number of probed entries per tensor (chosen
    at random with ``seed``); ``None`` probes all of them.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    analytic = backward(fn(leaves), leaves)
    rng = np.random.default_rng(seed)
    errs = {}
    for name, t in leaves.items():
        n = t.numel()
        idx = None if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        num = finite_difference_grad(lambda: fn(leaves), t, h, idx)
        ana = analytic[name].reshape(-1)
        numf = num.reshape(-1)
        if idx is not None:
            ana, numf = ana[idx], numf[idx]
        errs[name] = relative_error(ana.double(), numf)
    return errs


def directional_check(fn: Callable[[dict[str, torch.Tensor]], torch.Tensor], params: dict[str, torch.Tensor], n_dirs: int = 3, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between grad . d and the central difference along random directions d."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    grads = backward(fn(leaves), leaves)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = {k: torch.randn(v.shape, generator=gen, dtype=v.dtype) for k, v in leaves.items()}
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs.values()))
        dirs = {k: d / norm for k, d in dirs.items()}
        ana = sum(float((grads[k] * dirs[k]).sum()) for k in leaves)
        with torch.no_grad():
            plus = {k: v + h * dirs[k] for k, v in leaves.items()}
            minus = {k: v - h * dirs[k] for k, v in leaves.items()}
            num = (float(fn(plus)) - float(fn(minus))) / (2 * h)
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst
