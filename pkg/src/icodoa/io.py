"""File formats: WAV audio, array geometry, dataset trajectories, map exports, inference CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import tomli
import tomli_w
from scipy.io import wavfile

from .grid import IcoGrid
from .srp import MicArray


def write_wav(path, audio: np.ndarray, fs: int) -> None:
    """Write ``(channels, samples)`` audio as 32-bit float WAV."""
    audio = np.atleast_2d(np.asarray(audio, dtype=np.float32))
    wavfile.write(str(path), int(fs), np.ascontiguousarray(audio.T))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Audio as float64 ``(channels, samples)`` in [-1, 1] for integer formats, and the sample rate."""
    fs, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    return data.T, int(fs)


def read_array_csv(path, fs: float | None = None, strict: bool = True) -> MicArray:
    """Microphone positions in metres, one ``x,y,z`` row per microphone; a header row is optional."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row[:3]])
            except ValueError:
                if rows:
                    raise
    kw = {} if fs is None else {"fs": fs}
    return MicArray(np.array(rows), strict=strict, **kw)


def write_array_csv(path, array: MicArray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"])
        for p in array.positions:
            w.writerow([repr(float(v)) for v in p])


def write_gt_csv(path, doa: np.ndarray, active: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "y", "z", "active"])
        for t, (u, a) in enumerate(zip(doa, active)):
            w.writerow([t, repr(float(u[0])), repr(float(u[1])), repr(float(u[2])), int(bool(a))])


def read_gt_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    doa = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)
    active = np.array([r["active"].strip() in ("1", "true", "True") for r in rows], dtype=bool)
    return doa, active


def write_toml(path, data: dict) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(data, fh)


def read_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomli.load(fh)


def write_map_csv(path, maps: np.ndarray) -> None:
    """``frame,cell,value`` rows for a ``(T, cells)`` or ``(cells,)`` field."""
    maps = np.atleast_2d(maps)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "cell", "value"])
        for t, m in enumerate(maps):
            for c, v in enumerate(m):
                w.writerow([t, c, repr(float(v))])


def read_map_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [(int(r["frame"]), int(r["cell"]), float(r["value"])) for r in csv.DictReader(fh)]
    if not rows:
        return np.zeros((0, 0))
    T = max(r[0] for r in rows) + 1
    C = max(r[1] for r in rows) + 1
    out = np.zeros((T, C))
    for t, c, v in rows:
        out[t, c] = v
    return out


def map_to_gray(field_: np.ndarray, grid: IcoGrid) -> np.ndarray:
    """Planar 8-bit image; min maps to 0 and max to 255, a constant field to 128."""
    img = grid.to_planar(np.asarray(field_, dtype=float))
    lo, hi = float(img.min()), float(img.max())
    if not hi > lo:
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_maps(path, maps: np.ndarray, grid: IcoGrid, fmt: str | None = None) -> list[Path]:
    """Write maps as CSV or one PGM per frame (``stem_0000.pgm`` ...; a single map goes to ``path``)."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        write_map_csv(path, maps)
        return [path]
    if fmt == "pgm":
        if np.ndim(maps) == 1:
            write_pgm(path, map_to_gray(maps, grid))
            return [path]
        out = []
        for t, m in enumerate(maps):
            p = path.with_name(f"{path.stem}_{t:04d}.pgm")
            write_pgm(p, map_to_gray(m, grid))
            out.append(p)
        return out
    raise ValueError(f"unknown map format {fmt!r} (use csv or pgm)")


def azimuth_elevation(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Degrees; elevation = arcsin(z) of the normalized vector, azimuth = atan2(y, x)."""
    v = np.atleast_2d(v)
    n = np.linalg.norm(v, axis=1)
    z = np.divide(v[:, 2], n, out=np.zeros_like(n), where=n > 0)
    return np.degrees(np.arctan2(v[:, 1], v[:, 0])), np.degrees(np.arcsin(np.clip(z, -1, 1)))


def write_inference_csv(path, v: np.ndarray) -> None:
    az, el = azimuth_elevation(v)
    conf = np.linalg.norm(v, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "vx", "vy", "vz", "confidence", "azimuth_deg", "elevation_deg"])
        for t in range(len(v)):
            w.writerow([t, *(f"{x:.8g}" for x in v[t]), f"{conf[t]:.8g}", f"{az[t]:.6f}", f"{el[t]:.6f}"])
