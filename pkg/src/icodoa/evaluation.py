"""Angular error metrics and run records."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

ZERO_NORM = 1e-9


class EvaluationError(ValueError):
    pass


def angular_error(v_est, u_gt) -> np.ndarray:
    """Angle in degrees between estimate and ground truth, per row.

    Estimates are normalized first; estimates shorter than 1e-9 count as 90 degrees.
    """
    v = np.atleast_2d(np.asarray(v_est, dtype=float))
    u = np.atleast_2d(np.asarray(u_gt, dtype=float))
    n = np.linalg.norm(v, axis=1)
    ok = n >= ZERO_NORM
    cos = np.einsum("ij,ij->i", v, u) / np.where(ok, n, 1.0)
    err = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    err = np.where(ok, err, 90.0)
    return err if np.ndim(v_est) > 1 else err[0]


@dataclass(frozen=True)
class EvalConfig:
    skip_initial_frames: int = 5
    exclude_silent: bool = False

    def __post_init__(self):
        if self.skip_initial_frames < 0:
            raise EvaluationError("skip_initial_frames must be >= 0")


def rmsae(errors, cfg: EvalConfig = EvalConfig(), active=None) -> float:
    """Root mean square of per-frame angular errors after skipping and optional silence filtering."""
    e = np.asarray(errors, dtype=float)
    keep = np.arange(len(e)) >= cfg.skip_initial_frames
    if cfg.exclude_silent:
        if active is None:
            raise EvaluationError("exclude_silent needs per-frame active flags")
        keep &= np.asarray(active, dtype=bool)
    if not keep.any():
        raise EvaluationError("no frames left after filtering")
    return float(np.sqrt(np.mean(e[keep] ** 2)))


@dataclass
class RunRecord:
    config: dict
    seed: int | None
    per_trajectory: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def aggregates(self) -> dict[str, float]:
        vals = np.array(list(self.per_trajectory.values()), dtype=float)
        if len(vals) == 0:
            return {"mean": float("nan"), "median": float("nan"), "std": float("nan"), "count": 0}
        return {"mean": float(vals.mean()), "median": float(np.median(vals)), "std": float(vals.std()), "count": int(len(vals))}

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "aggregates": self.aggregates()}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        d.pop("aggregates", None)
        return cls(**d)
