"""GCC-PHAT and SRP-PHAT power maps sampled on the icosahedral grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import IcoGrid

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
DEFAULT_FS = 16000

# 12-microphone robot-head array (metres), origin at the head centre.
# Minimum / maximum inter-microphone distances: 1.27 cm / 12.08 cm.
HEAD_ARRAY_12 = np.array(
    [
        [-0.028, 0.030, -0.040],
        [0.006, 0.057, 0.000],
        [0.022, 0.022, -0.046],
        [-0.055, -0.024, -0.025],
        [-0.031, 0.023, 0.042],
        [-0.032, 0.011, 0.046],
        [-0.025, -0.003, 0.051],
        [-0.036, -0.027, 0.038],
        [-0.035, -0.043, 0.025],
        [0.029, -0.048, -0.012],
        [0.034, -0.030, 0.037],
        [0.035, 0.025, 0.039],
    ]
)


class ArrayGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class MicArray:
    positions: np.ndarray
    fs: float = DEFAULT_FS
    c: float = SPEED_OF_SOUND
    strict: bool = True

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 2:
            raise ArrayGeometryError(f"need at least 2 microphones as an (N, 3) array, got {pos.shape}")
        if self.fs <= 0 or self.c <= 0:
            raise ArrayGeometryError("fs and c must be positive")
        object.__setattr__(self, "positions", pos)
        if self.strict and not self.is_3d:
            raise ArrayGeometryError("microphones are coplanar; azimuth and elevation would be ambiguous")

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    @property
    def is_3d(self) -> bool:
        centered = self.positions - self.positions.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        return len(sv) == 3 and sv[-1] > 1e-6 * max(sv[0], 1e-12)

    @property
    def max_distance(self) -> float:
        p = self.positions
        return float(np.linalg.norm(p[:, None] - p[None], axis=-1).max())

    def pairs(self) -> np.ndarray:
        n, m = np.triu_indices(self.n_mics, k=1)
        return np.stack([n, m], axis=1)

    @classmethod
    def head12(cls, fs: float = DEFAULT_FS, c: float = SPEED_OF_SOUND) -> "MicArray":
        return cls(HEAD_ARRAY_12.copy(), fs=fs, c=c)


@dataclass(frozen=True)
class FramingConfig:
    K: int = 4096
    hop: int | None = None
    fft_len: int | None = None

    def __post_init__(self):
        if self.hop is None:
            object.__setattr__(self, "hop", 3 * self.K // 4)
        if self.fft_len is None:
            object.__setattr__(self, "fft_len", self.K)
        if not 0 < self.hop <= self.K <= self.fft_len:
            raise ValueError(f"need 0 < hop <= K <= fft_len, got {self.hop}, {self.K}, {self.fft_len}")

    def n_frames(self, length: int) -> int:
        if length < self.K:
            raise ValueError(f"signal of {length} samples is shorter than one frame ({self.K})")
        return (length - self.K) // self.hop + 1

    def frame_centers(self, n_frames: int, fs: float) -> np.ndarray:
        """Centre time (s) of each frame."""
        return (np.arange(n_frames) * self.hop + self.K / 2) / fs


@dataclass(frozen=True)
class GccConfig:
    """PHAT floor and lag resolution.

    ``upsample`` evaluates the correlation on a ``1/upsample`` sample lag
    grid (zero-padded inverse FFT, i.e. band-limited interpolation) before
    the linear interpolation at fractional lags; 1 interpolates directly
    between integer lags.
    """

    eps: float = 1e-12
    upsample: int = 4

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.upsample < 1:
            raise ValueError("upsample must be >= 1")


@dataclass(frozen=True)
class VadConfig:
    theta_abs: float = 1e-6
    theta_rel: float = 0.01


@dataclass
class SrpMapSeq:
    maps: np.ndarray  # (T, n_cells)
    active: np.ndarray  # (T,) bool
    r: int

    def __len__(self) -> int:
        return len(self.maps)


def frame_stream(signal: np.ndarray, cfg: FramingConfig) -> np.ndarray:
    """``(T, N, K)`` read-only view of the frames of an ``(N, L)`` signal."""
    signal = np.asarray(signal)
    if signal.ndim == 1:
        signal = signal[None]
    T = cfg.n_frames(signal.shape[-1])
    win = np.lib.stride_tricks.sliding_window_view(signal, cfg.K, axis=-1)
    return win[:, : (T - 1) * cfg.hop + 1 : cfg.hop].transpose(1, 0, 2)


def tdoa_table(array: MicArray, grid: IcoGrid, pairs: np.ndarray | None = None) -> np.ndarray:
    """Far-field TDOA in samples, ``fs * (p_m - p_n) . u / c``.

    With ``pairs`` given, returns ``(P, n_cells)`` for those ordered pairs;
    otherwise the full ``(N, N, n_cells)`` table.
    """
    p = array.positions
    proj = p @ grid.coords.T  # (N, cells)
    scale = array.fs / array.c
    if pairs is None:
        return scale * (proj[None, :, :] - proj[:, None, :])
    pairs = np.asarray(pairs)
    return scale * (proj[pairs[:, 1]] - proj[pairs[:, 0]])


def _phat_spectra(frames: np.ndarray, fft_len: int) -> np.ndarray:
    return np.fft.rfft(frames, n=fft_len, axis=-1)


def gcc_phat(
    frame: np.ndarray,
    fft_len: int | None = None,
    eps: float = 1e-12,
    pairs: np.ndarray | None = None,
    upsample: int = 1,
) -> np.ndarray:
    """PHAT-weighted circular cross-correlations of an ``(..., N, K)`` frame.

    ``R[n, m, tau] = irfft(X_n conj(X_m) / max(|X_n conj(X_m)|, eps))``, so the
    peak sits at ``tau = t_n - t_m`` (negative lags in the upper half).  With
    ``pairs`` the result is ``(..., P, fft_len)`` for those pairs only.  With
    ``upsample > 1`` the lag axis has ``upsample * fft_len`` points spaced
    ``1/upsample`` samples apart, scaled so values match the plain transform.
    """
    frame = np.asarray(frame, dtype=float)
    if not np.all(np.isfinite(frame)):
        raise ValueError("frame contains non-finite samples")
    L = fft_len or frame.shape[-1]
    X = _phat_spectra(frame, L)
    if pairs is None:
        cross = X[..., :, None, :] * np.conj(X[..., None, :, :])
    else:
        cross = X[..., pairs[:, 0], :] * np.conj(X[..., pairs[:, 1], :])
    cross /= np.maximum(np.abs(cross), eps)
    if not np.any(frame):
        logger.debug("all-zero frame: GCC is identically zero")
    if upsample > 1 and L % 2 == 0:
        # the Nyquist bin becomes an ordinary bin of the longer transform
        cross[..., -1] *= 0.5
    return np.fft.irfft(cross, n=L * upsample, axis=-1) * upsample


def _interp_lags(gcc: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``(..., P, L)`` circular lag functions at ``(P, C)`` lags."""
    L = gcc.shape[-1]
    lo = np.floor(tau)
    frac = tau - lo
    i0 = lo.astype(np.int64) % L
    i1 = (i0 + 1) % L
    P = gcc.shape[-2]
    rows = np.arange(P)[:, None]
    return gcc[..., rows, i0] * (1 - frac) + gcc[..., rows, i1] * frac


def srp_map(gcc: np.ndarray, tau: np.ndarray, grid: IcoGrid, upsample: int = 1) -> np.ndarray:
    """SRP power ``2pi * sum_{n != m} R_nm(tau_nm)`` at every non-vertex cell.

    ``gcc`` holds ``(..., P, L)`` lag functions for unordered pairs ``n < m``
    and ``tau`` the matching ``(P, n_cells)`` TDOAs; each pair stands for both
    orderings since ``R_mn(tau_mn) = R_nm(tau_nm)``.  Diagonal terms are
    omitted and vertex cells are zero.  ``upsample`` must match the lag
    resolution used in ``gcc_phat``.
    """
    nv = grid.nonvertex_indices
    vals = _interp_lags(gcc, tau[:, nv] * upsample)
    out = np.zeros(gcc.shape[:-2] + (grid.n_cells,))
    out[..., nv] = 4 * np.pi * vals.sum(axis=-2)
    return out


def normalize_map(m: np.ndarray, grid: IcoGrid) -> np.ndarray:
    """Zero-mean over non-vertex cells, then scale to max |value| = 1; vertices stay 0."""
    m = np.asarray(m, dtype=float)
    nv = grid.nonvertex_indices
    vals = m[..., nv]
    vals = vals - vals.mean(axis=-1, keepdims=True)
    peak = np.abs(vals).max(axis=-1, keepdims=True)
    safe = peak >= 1e-12
    vals = np.where(safe, vals / np.where(safe, peak, 1.0), 0.0)
    out = np.zeros_like(m)
    out[..., nv] = vals
    return out


class EnergyVad:
    """Energy detector with a running maximum over the stream."""

    def __init__(self, cfg: VadConfig = VadConfig()):
        self.cfg = cfg
        self.running_max = 0.0

    def __call__(self, frame: np.ndarray) -> bool:
        power = float(np.mean(np.square(frame)))
        self.running_max = max(self.running_max, power)
        return power > self.cfg.theta_abs and power > self.cfg.theta_rel * self.running_max


def vad_flags(frames: np.ndarray, cfg: VadConfig = VadConfig()) -> np.ndarray:
    """Active flag for each frame of a ``(T, N, K)`` stream, in order."""
    vad = EnergyVad(cfg)
    return np.array([vad(f) for f in frames], dtype=bool)


@dataclass
class SrpProcessor:
    """Turns multichannel audio into normalized, VAD-gated SRP-PHAT map sequences."""

    array: MicArray
    grid: IcoGrid
    framing: FramingConfig = field(default_factory=FramingConfig)
    gcc: GccConfig = field(default_factory=GccConfig)
    vad: VadConfig = field(default_factory=VadConfig)
    chunk: int = 16

    def __post_init__(self):
        self.pairs = self.array.pairs()
        self.tau = tdoa_table(self.array, self.grid, self.pairs)

    def raw_maps(self, frames: np.ndarray) -> np.ndarray:
        out = np.empty((len(frames), self.grid.n_cells))
        L = self.framing.fft_len
        for s in range(0, len(frames), self.chunk):
            block = np.asarray(frames[s : s + self.chunk], dtype=float)
            R = gcc_phat(block, L, self.gcc.eps, self.pairs, self.gcc.upsample)
            out[s : s + len(block)] = srp_map(R, self.tau, self.grid, self.gcc.upsample)
        return out

    def process(self, signal: np.ndarray) -> SrpMapSeq:
        signal = np.asarray(signal, dtype=float)
        if signal.shape[0] != self.array.n_mics:
            raise ArrayGeometryError(f"signal has {signal.shape[0]} channels, array has {self.array.n_mics}")
        frames = frame_stream(signal, self.framing)
        active = vad_flags(frames, self.vad)
        maps = normalize_map(self.raw_maps(frames), self.grid)
        maps[~active] = 0.0
        return SrpMapSeq(maps=maps, active=active, r=self.grid.r)


def map_argmax_doa(maps: np.ndarray, grid: IcoGrid, active: np.ndarray | None = None) -> np.ndarray:
    """DOA estimate from the map maximum, holding the last estimate over silent frames.

    Frames before the first active one point at the first non-vertex cell.
    """
    est = np.empty((len(maps), 3))
    last = grid.coords[grid.nonvertex_indices[0]]
    for t, m in enumerate(maps):
        if (active is None or active[t]) and np.any(m):
            masked = np.where(grid.vertex_mask, -np.inf, m)
            last = grid.coords[int(np.argmax(masked))]
        est[t] = last
    return est
