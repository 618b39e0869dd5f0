"""Shoebox room simulation: scenes, image-source RIRs, moving-source rendering."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage
from scipy import signal as sps

from .srp import DEFAULT_FS, SPEED_OF_SOUND, FramingConfig, MicArray

FD_TAPS = 16
# bumped whenever rendered audio for a given SimJob changes
RENDER_REVISION = 3
GAP_RAMP = 0.02
FD_KAISER_BETA = 8.0
FD_TABLE_STEPS = 16384


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    """Box room with a uniform wall reflection coefficient ``beta``.

    ``beta_model`` selects the T60 to beta map:

    ``"image"`` (default) calibrates beta against the energy decay of the
    image-source lattice itself (``calibrate_beta``).  ``"eyring"`` uses
    ``beta**2 = exp(-0.161 V / (S T60))`` and ``"sabine"`` uses
    ``beta**2 = 1 - 0.161 V / (S T60)``.  Both closed forms assume a
    diffuse field; in a box with uniform walls the image-source decay
    misses the request by up to 70 percent with them.

    ``fixed_beta`` bypasses the map (0 gives an anechoic room).  Derived
    values are computed on first access.
    """

    dims: tuple[float, float, float]
    t60: float
    beta_model: str = "image"
    fixed_beta: float | None = None

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise SimulationError(f"invalid room dimensions {dims}")
        if not self.t60 > 0:
            raise SimulationError("T60 must be positive")
        if self.beta_model not in ("image", "eyring", "sabine"):
            raise SimulationError(f"unknown beta model {self.beta_model!r}")
        if self.fixed_beta is not None and not 0.0 <= self.fixed_beta < 1.0:
            raise SimulationError(f"beta {self.fixed_beta} outside [0, 1)")
        if self.fixed_beta is None and self.beta_model == "sabine" and self.sabine_absorption >= 1.0:
            raise SimulationError(f"Sabine absorption {self.sabine_absorption:.3f} >= 1: T60 {self.t60} s unattainable for room {dims}")

    @classmethod
    def anechoic(cls, dims) -> "RoomSpec":
        return cls(tuple(dims), 1e-3, fixed_beta=0.0)

    @property
    def volume(self) -> float:
        x, y, z = self.dims
        return x * y * z

    @property
    def surface(self) -> float:
        x, y, z = self.dims
        return 2 * (x * y + x * z + y * z)

    @property
    def sabine_absorption(self) -> float:
        return 0.161 * self.volume / (self.surface * self.t60)

    @functools.cached_property
    def beta(self) -> float:
        if self.fixed_beta is not None:
            return self.fixed_beta
        k = self.sabine_absorption
        if self.beta_model == "sabine":
            return math.sqrt(1.0 - k)
        if self.beta_model == "eyring":
            return math.exp(-0.5 * k)
        return calibrate_beta(self.dims, self.t60)

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.dims) - margin))


# --- decay measurement and calibration ------------------------------------


def _edc_db(energy: np.ndarray) -> np.ndarray:
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise SimulationError("impulse response has no energy")
    return 10 * np.log10(np.maximum(edc / edc[0], 1e-300))


def _fit_t60(db: np.ndarray, fs: float, lo_db: float, hi_db: float) -> float:
    idx = np.nonzero((db <= lo_db) & (db >= hi_db))[0]
    if len(idx) < 2:
        raise SimulationError("decay range not covered by the impulse response")
    slope, _ = np.polyfit(idx / fs, db[idx], 1)
    return -60.0 / slope


DECAY_BAND = (100.0, 4000.0)


def schroeder_t60(rir: np.ndarray, fs: float = DEFAULT_FS, band: tuple[float, float] | None = DECAY_BAND, lo_db: float = -5.0, hi_db: float = -35.0) -> float:
    """T60 from a linear fit to the backward-integrated energy between ``lo_db`` and ``hi_db``.

    The response is first band-passed (zero phase) to ``band``.  Image-source
    responses are sums of positive pulses whose density grows with time, so
    the broadband energy carries a growing low-frequency offset that hides
    the decay; ``band=None`` measures it anyway.
    """
    h = np.asarray(rir, dtype=float)
    if band is not None:
        sos = sps.butter(4, band, btype="bandpass", fs=fs, output="sos")
        h = sps.sosfiltfilt(sos, h)
    return _fit_t60(_edc_db(h**2), fs, lo_db, hi_db)


@numba.njit(cache=True)
def _energy_histogram(src, mic, dims, gamma, fs, c, max_dist):
    """Arrival energy per sample with energy loss ``exp(-gamma)`` per bounce."""
    n = int(math.ceil(max_dist * fs / c)) + 1
    out = np.zeros(n)
    nx = int(math.ceil(max_dist / (2 * dims[0]))) + 1
    ny = int(math.ceil(max_dist / (2 * dims[1]))) + 1
    nz = int(math.ceil(max_dist / (2 * dims[2]))) + 1
    for qx in range(2):
        for a in range(-nx, nx + 1):
            dx = (1 - 2 * qx) * src[0] + 2 * a * dims[0] - mic[0]
            rx = abs(a - qx) + abs(a)
            for qy in range(2):
                for b in range(-ny, ny + 1):
                    dy = (1 - 2 * qy) * src[1] + 2 * b * dims[1] - mic[1]
                    ry = abs(b - qy) + abs(b)
                    for qz in range(2):
                        for e in range(-nz, nz + 1):
                            dz = (1 - 2 * qz) * src[2] + 2 * e * dims[2] - mic[2]
                            d2 = dx * dx + dy * dy + dz * dz
                            d = math.sqrt(d2)
                            if d > max_dist:
                                continue
                            refl = rx + ry + abs(e - qz) + abs(e)
                            out[int(d * fs / c)] += math.exp(-gamma * refl) / d2
    return out


# relative (source, microphone) positions whose decays are averaged during calibration
CALIBRATION_PAIRS = (
    ((0.61, 0.37, 0.56), (0.43, 0.52, 0.38)),
    ((0.18, 0.72, 0.31), (0.77, 0.24, 0.66)),
    ((0.85, 0.83, 0.79), (0.29, 0.41, 0.22)),
    ((0.33, 0.15, 0.87), (0.58, 0.88, 0.47)),
    ((0.49, 0.62, 0.14), (0.14, 0.11, 0.81)),
    ((0.71, 0.28, 0.42), (0.82, 0.69, 0.18)),
)


def calibrate_beta(dims, t60: float, c: float = SPEED_OF_SOUND, fs: float = DEFAULT_FS, iterations: int = 6, refine: int = 2) -> float:
    """Reflection coefficient whose image-source decay has the requested T60.

    The exponent ``gamma = -2 ln beta`` is refined by fixed-point iteration
    (T60 scales roughly as ``1 / gamma``).  The first ``iterations`` steps
    fit the mean normalized arrival-energy histogram over
    ``CALIBRATION_PAIRS``, which is cheap but sums energies incoherently.
    The last ``refine`` steps fit the mean normalized energy of the actual
    band-passed impulse responses at the same pairs, the quantity
    ``schroeder_t60`` measures.  In elongated rooms the slow axial modes make
    that decay up to 15 percent longer than the incoherent one.
    """
    return _calibrate_beta(tuple(float(d) for d in dims), float(t60), float(c), float(fs), int(iterations), int(refine))


@functools.lru_cache(maxsize=4096)
def _calibrate_beta(dims, t60, c, fs, iterations, refine) -> float:
    L = np.asarray(dims)
    gamma = 0.161 * L.prod() / (2 * (L[0] * L[1] + L[0] * L[2] + L[1] * L[2]) * t60)
    for _ in range(iterations):
        total = 0.0
        for s_rel, m_rel in CALIBRATION_PAIRS:
            hist = _energy_histogram(np.asarray(s_rel) * L, np.asarray(m_rel) * L, L, gamma, fs, c, c * t60)
            total = total + hist / hist.sum()
        gamma *= _fit_t60(_edc_db(total), fs, -5.0, -35.0) / t60
    sos = sps.butter(4, DECAY_BAND, btype="bandpass", fs=fs, output="sos")
    for _ in range(refine):
        room = RoomSpec(dims, t60, fixed_beta=math.exp(-0.5 * gamma))
        total = 0.0
        for s_rel, m_rel in CALIBRATION_PAIRS:
            h = sps.sosfiltfilt(sos, ism_rir(room, np.asarray(s_rel) * L, np.asarray(m_rel)[None] * L, fs, c, duration=t60)[0])
            total = total + h**2 / np.sum(h**2)
        gamma *= _fit_t60(_edc_db(total), fs, -5.0, -35.0) / t60
    return math.exp(-0.5 * gamma)


# --- image-source RIRs ----------------------------------------------------


def _fd_table(steps: int = FD_TABLE_STEPS) -> np.ndarray:
    """Kaiser-windowed sinc taps for fractional delays ``j / steps`` (nearest row is used); tap ``i`` sits at offset ``i - 7``."""
    half = FD_TAPS // 2
    frac = np.arange(steps + 1) / steps
    x = np.arange(-half + 1, half + 1)[None, :] - frac[:, None]
    win = np.i0(FD_KAISER_BETA * np.sqrt(np.clip(1 - (x / half) ** 2, 0, None))) / np.i0(FD_KAISER_BETA)
    return np.sinc(x) * win


FD_TABLE = _fd_table()


@numba.njit(cache=True, fastmath=True)
def _deposit(row, t, amp, table):
    base = int(math.floor(t))
    steps = table.shape[0] - 1
    taps = table[int((t - base) * steps + 0.5)]
    width = taps.shape[0]
    start = base - width // 2 + 1
    n = row.shape[0]
    if start >= 0 and start + width <= n:
        seg = row[start : start + width]
        for k in range(width):
            seg[k] += amp * taps[k]
    else:
        for k in range(width):
            i = start + k
            if 0 <= i < n:
                row[i] += amp * taps[k]


@numba.njit(cache=True)
def _ism(src, mics, dims, beta, fs, c, max_dist, n_samples, max_order, table):
    M = mics.shape[0]
    out = np.zeros((M, n_samples))
    nx = int(math.ceil(max_dist / (2 * dims[0]))) + 1
    ny = int(math.ceil(max_dist / (2 * dims[1]))) + 1
    nz = int(math.ceil(max_dist / (2 * dims[2]))) + 1
    for qx in range(2):
        for a in range(-nx, nx + 1):
            ix = (1 - 2 * qx) * src[0] + 2 * a * dims[0]
            rx = abs(a - qx) + abs(a)
            for qy in range(2):
                for b in range(-ny, ny + 1):
                    iy = (1 - 2 * qy) * src[1] + 2 * b * dims[1]
                    ry = abs(b - qy) + abs(b)
                    for qz in range(2):
                        for e in range(-nz, nz + 1):
                            iz = (1 - 2 * qz) * src[2] + 2 * e * dims[2]
                            refl = rx + ry + abs(e - qz) + abs(e)
                            if max_order >= 0 and refl > max_order:
                                continue
                            if refl > 0 and beta == 0.0:
                                continue
                            g = beta**refl
                            for m in range(M):
                                dx = ix - mics[m, 0]
                                dy = iy - mics[m, 1]
                                dz = iz - mics[m, 2]
                                d = math.sqrt(dx * dx + dy * dy + dz * dz)
                                if d <= max_dist:
                                    _deposit(out[m], d * fs / c, g / (4 * math.pi * d), table)
    return out


def image_sources(room: RoomSpec, src, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Image positions and reflection counts with at most ``max_order`` reflections."""
    L = np.asarray(room.dims)
    s = np.asarray(src, dtype=float)
    pos, refl = [], []
    span = 2 * max_order + 3
    for q in np.ndindex(2, 2, 2):
        q = np.array(q)
        for n in np.ndindex(span, span, span):
            n = np.array(n) - max_order - 1
            k = int(np.sum(np.abs(n - q) + np.abs(n)))
            if k <= max_order:
                pos.append((1 - 2 * q) * s + 2 * n * L)
                refl.append(k)
    return np.array(pos), np.array(refl)


def ism_rir(room: RoomSpec, src, mics, fs: float = DEFAULT_FS, c: float = SPEED_OF_SOUND, duration: float | None = None, max_order: int = -1) -> np.ndarray:
    """Impulse responses ``(M, samples)`` from ``src`` to each row of ``mics``.

    All images within ``c * duration`` metres are used (``duration`` defaults
    to T60), each contributing ``beta**k / (4 pi d)`` at delay ``d / c``
    through a 16-tap Kaiser-windowed sinc.  ``max_order >= 0`` additionally
    caps the reflection count.
    """
    src = np.asarray(src, dtype=np.float64)
    mics = np.atleast_2d(np.asarray(mics, dtype=np.float64))
    if not room.contains(src):
        raise SimulationError(f"source {src} outside room {room.dims}")
    for m in mics:
        if not room.contains(m):
            raise SimulationError(f"microphone {m} outside room {room.dims}")
        if np.linalg.norm(m - src) < 1e-6:
            raise SimulationError("source coincides with a microphone")
    direct = float(np.max(np.linalg.norm(mics - src, axis=1)))
    duration = room.t60 if duration is None else duration
    max_dist = direct if room.beta == 0.0 else max(c * duration, direct)
    n_samples = int(math.ceil(max_dist * fs / c)) + FD_TAPS + 1
    return _ism(src, mics, np.asarray(room.dims), float(room.beta), float(fs), float(c), max_dist + 1e-9, n_samples, int(max_order), FD_TABLE)


# --- scene sampling -------------------------------------------------------


@dataclass(frozen=True)
class SceneRanges:
    dims_min: tuple[float, float, float] = (3.0, 3.0, 2.5)
    dims_max: tuple[float, float, float] = (10.0, 8.0, 6.0)
    t60_min: float = 0.2
    t60_max: float = 1.3
    snr_min: float = 5.0
    snr_max: float = 30.0
    duration: float = 20.0
    wall_margin: float = 0.1
    source_margin: float = 0.1
    min_source_distance: float = 0.5
    max_oscillations: float = 2.0
    max_attempts: int = 1000


@dataclass(frozen=True)
class Trajectory:
    """``p(t) = start + (end - start) t / D + amp * sin(2 pi freq t + phase)`` per axis."""

    start: tuple[float, float, float]
    end: tuple[float, float, float]
    amplitude: tuple[float, float, float]
    frequency: tuple[float, float, float]
    phase: tuple[float, float, float]
    duration: float

    def _arrays(self):
        return tuple(np.asarray(v, dtype=float) for v in (self.start, self.end, self.amplitude, self.frequency, self.phase))

    def position(self, t) -> np.ndarray:
        a, b, amp, f, ph = self._arrays()
        t = np.asarray(t, dtype=float)[..., None]
        return a + (b - a) * t / self.duration + amp * np.sin(2 * np.pi * f * t + ph)

    def velocity(self, t) -> np.ndarray:
        a, b, amp, f, ph = self._arrays()
        t = np.asarray(t, dtype=float)[..., None]
        return (b - a) / self.duration + amp * 2 * np.pi * f * np.cos(2 * np.pi * f * t + ph)


@dataclass(frozen=True)
class SimJob:
    room: RoomSpec
    array_center: tuple[float, float, float]
    trajectory: Trajectory
    snr_db: float
    seed: int
    fs: int = DEFAULT_FS

    def to_dict(self) -> dict:
        tr = self.trajectory
        return {
            "seed": self.seed,
            "fs": self.fs,
            "snr_db": self.snr_db,
            "room": {"dims": list(self.room.dims), "t60": self.room.t60, "beta_model": self.room.beta_model, "beta": self.room.beta},
            "array": {"center": list(self.array_center), "orientation": "identity"},
            "trajectory": {
                "start": list(tr.start),
                "end": list(tr.end),
                "amplitude": list(tr.amplitude),
                "frequency": list(tr.frequency),
                "phase": list(tr.phase),
                "duration": tr.duration,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimJob":
        r = d["room"]
        room = RoomSpec(tuple(r["dims"]), r["t60"], r.get("beta_model", "image"), fixed_beta=r.get("beta"))
        t = d["trajectory"]
        traj = Trajectory(*(tuple(t[k]) for k in ("start", "end", "amplitude", "frequency", "phase")), duration=t["duration"])
        return cls(room, tuple(d["array"]["center"]), traj, d["snr_db"], d["seed"], d.get("fs", DEFAULT_FS))


def hop_centers(n_samples: int, hop: int) -> np.ndarray:
    return np.arange(int(math.ceil(n_samples / hop))) * hop + 0.5 * hop


def check_times(duration: float, fs: float, framing: FramingConfig) -> np.ndarray:
    """Times at which trajectory constraints are checked: every hop and frame centre."""
    n = int(round(duration * fs))
    hops = hop_centers(n, framing.hop)
    frames = np.arange(framing.n_frames(n)) * framing.hop + 0.5 * framing.K if n >= framing.K else np.zeros(0)
    return np.concatenate([hops, frames]) / fs


def sample_scene(seed: int, ranges: SceneRanges = SceneRanges(), array_extent: float = 0.0, framing: FramingConfig = FramingConfig(), fs: int = DEFAULT_FS, snr_db: float | None = None) -> SimJob:
    """Draw a room, array placement and trajectory from ``seed``.

    T60 and SNR are drawn first; room dimensions are redrawn when the
    placement constraints cannot be met, so both stay uniformly distributed.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(ranges.dims_min), np.asarray(ranges.dims_max)
    t60 = float(rng.uniform(ranges.t60_min, ranges.t60_max))
    snr = float(rng.uniform(ranges.snr_min, ranges.snr_max))
    if snr_db is not None:
        snr = float(snr_db)
    D = ranges.duration
    times = check_times(D, fs, framing)
    sm = ranges.source_margin
    for _ in range(ranges.max_attempts):
        dims = rng.uniform(lo, hi)
        room = RoomSpec(tuple(dims), t60)
        m = ranges.wall_margin * dims
        c_lo = m + array_extent
        c_hi = dims - m - array_extent
        c_hi[2] = min(c_hi[2], dims[2] / 2)
        if np.any(c_hi <= c_lo):
            continue
        center = rng.uniform(c_lo, c_hi)
        for _ in range(ranges.max_attempts):
            start = rng.uniform(sm, dims - sm)
            end = rng.uniform(sm, dims - sm)
            amp = rng.uniform(0, dims / 4)
            freq = rng.uniform(0, ranges.max_oscillations / D, size=3)
            phase = rng.uniform(0, 2 * np.pi, size=3)
            traj = Trajectory(tuple(start), tuple(end), tuple(amp), tuple(freq), tuple(phase), D)
            pos = traj.position(times)
            inside = np.all(pos > sm) and np.all(pos < dims - sm)
            far = np.all(np.linalg.norm(pos - center, axis=1) > ranges.min_source_distance + array_extent)
            if inside and far:
                return SimJob(room, tuple(center), traj, snr, seed, fs)
        raise SimulationError(f"seed {seed}: trajectory rejection budget exhausted")
    raise SimulationError(f"seed {seed}: room rejection budget exhausted")


# --- source signal --------------------------------------------------------


def synth_source(rng: np.random.Generator, duration: float, fs: int = DEFAULT_FS) -> tuple[np.ndarray, np.ndarray]:
    """Band-limited AM noise with silent gaps faded in and out over ``GAP_RAMP`` seconds.

    Returns the peak-normalized signal and a boolean mask of gap samples.
    """
    n = int(round(duration * fs))
    if n <= 0:
        raise SimulationError("duration must be positive")
    sos = sps.butter(6, [100, 4000], btype="bandpass", fs=fs, output="sos")
    x = sps.sosfilt(sos, rng.standard_normal(n + fs // 2))[fs // 2 :]
    t = np.arange(n) / fs
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2, 8) * t + rng.uniform(0, 2 * np.pi))
    gap = np.zeros(n, dtype=bool)
    target = rng.uniform(0.1, 0.3) * duration
    guard = fs // 10
    covered = 0.0
    for _ in range(1000):
        if covered >= target:
            break
        length = max(min(rng.uniform(0.2, 1.0), target - covered), 0.2)
        start = rng.uniform(0, max(duration - length, 0))
        a, b = int(start * fs), min(int((start + length) * fs), n)
        if gap[max(a - guard, 0) : b + guard].any():
            continue
        gap[a:b] = True
        covered += (b - a) / fs
    # raised-cosine fades into and out of each gap keep the signal band-limited
    ramp = int(GAP_RAMP * fs)
    dist = ndimage.distance_transform_edt(~gap) if gap.any() else np.full(n, np.inf)
    x *= np.where(dist >= ramp, 1.0, 0.5 - 0.5 * np.cos(np.pi * np.minimum(dist, ramp) / ramp))
    peak = np.max(np.abs(x))
    return (x / peak if peak > 0 else x), gap


# --- rendering ------------------------------------------------------------


def render_reverberant(job: SimJob, array: MicArray, source: np.ndarray, hop: int | None = None) -> np.ndarray:
    """Noise-free N-channel signal for a moving source.

    The source is cut into hop-length segments; each is weighted by a
    triangular window reaching one hop either side of its centre (so
    neighbouring segments crossfade linearly; the weights sum to one
    everywhere), convolved with the static RIR
    at the segment-centre position, and overlap-added.
    """
    fs = job.fs
    hop = FramingConfig().hop if hop is None else hop
    n = len(source)
    mics = np.asarray(job.array_center) + array.positions
    out = np.zeros((array.n_mics, n))
    t_idx = np.arange(n) + 0.5
    centers = hop_centers(n, hop)
    for c in centers:
        lo, hi = int(max(c - hop, 0)), int(min(c + hop, n))
        w = np.clip(1.0 - np.abs(t_idx[lo:hi] - c) / hop, 0.0, 1.0)
        # outermost segments hold full weight out to the signal edges
        if c == centers[0]:
            w[t_idx[lo:hi] < c] = 1.0
        if c == centers[-1]:
            w[t_idx[lo:hi] > c] = 1.0
        seg = source[lo:hi] * w
        if not np.any(seg):
            continue
        h = ism_rir(job.room, job.trajectory.position(c / fs), mics, fs, array.c)
        y = sps.fftconvolve(seg[None, :], h, axes=1)
        end = min(lo + y.shape[1], n)
        out[:, lo:end] += y[:, : end - lo]
    return out


def add_noise(clean: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian noise scaled so that mean signal power over mean noise power equals ``snr_db``."""
    p_sig = float(np.mean(clean**2))
    if p_sig <= 0:
        raise SimulationError("silent signal: SNR undefined")
    noise = rng.standard_normal(clean.shape)
    noise *= math.sqrt(p_sig / 10 ** (snr_db / 10) / np.mean(noise**2))
    return clean + noise


def measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    return 10 * math.log10(np.mean(clean**2) / np.mean((noisy - clean) ** 2))


def ground_truth_doa(job: SimJob, times) -> np.ndarray:
    """Unit vectors from the array centre to the source at ``times`` (array axes = room axes)."""
    d = job.trajectory.position(times) - np.asarray(job.array_center)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n < 1e-9):
        raise SimulationError("source coincides with the array centre")
    return d / n


@dataclass
class RenderedScene:
    job: SimJob
    audio: np.ndarray
    clean: np.ndarray
    source: np.ndarray
    gap: np.ndarray


def simulate(job: SimJob, array: MicArray, hop: int | None = None) -> RenderedScene:
    """Source synthesis, reverberant rendering and noise, all seeded from ``job.seed``."""
    src, gap = synth_source(np.random.default_rng([job.seed, 1]), job.trajectory.duration, job.fs)
    clean = render_reverberant(job, array, src, hop)
    noisy = add_noise(clean, job.snr_db, np.random.default_rng([job.seed, 2]))
    return RenderedScene(job, noisy, clean, src, gap)
