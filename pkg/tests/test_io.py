import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icodoa import io
from icodoa.grid import build_grid
from icodoa.srp import MicArray


def test_wav_roundtrip(tmp_path, rng):
    x = rng.uniform(-1, 1, (3, 1000))
    io.write_wav(tmp_path / "a.wav", x, 16000)
    y, fs = io.read_wav(tmp_path / "a.wav")
    assert fs == 16000 and y.shape == (3, 1000)
    assert np.array_equal(y, x.astype(np.float32).astype(np.float64))


def test_wav_int16(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "i.wav", 8000, np.array([[0, 16384], [-32768, 0]], dtype=np.int16))
    y, fs = io.read_wav(tmp_path / "i.wav")
    assert fs == 8000
    assert np.array_equal(y, [[0.0, -1.0], [0.5, 0.0]])


def test_array_csv_roundtrip(tmp_path):
    arr = MicArray.head12()
    io.write_array_csv(tmp_path / "a.csv", arr)
    back = io.read_array_csv(tmp_path / "a.csv")
    assert np.array_equal(back.positions, arr.positions)
    (tmp_path / "b.csv").write_text("# comment\n0,0,0\n0.1,0,0\n0,0.1,0\n0,0,0.1\n")
    assert io.read_array_csv(tmp_path / "b.csv").n_mics == 4


def test_gt_csv_roundtrip(tmp_path, rng):
    doa = rng.standard_normal((7, 3))
    active = rng.random(7) > 0.5
    io.write_gt_csv(tmp_path / "gt.csv", doa, active)
    d, a = io.read_gt_csv(tmp_path / "gt.csv")
    assert np.array_equal(d, doa) and np.array_equal(a, active)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 40), elements=st.floats(-1e9, 1e9)))
def test_map_csv_roundtrip(maps):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.csv"
        io.write_map_csv(p, maps)
        assert np.array_equal(io.read_map_csv(p), maps)


def test_pgm_layout_and_scaling(tmp_path, rng):
    g = build_grid(2)
    m = rng.standard_normal(g.n_cells)
    img = io.map_to_gray(m, g)
    assert img.shape == (20, 8)
    assert img.min() == 0 and img.max() == 255
    io.write_pgm(tmp_path / "m.pgm", img)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n8 20\n255\n")
    assert np.array_equal(io.read_pgm(tmp_path / "m.pgm"), img)


def test_constant_map_is_midgray():
    g = build_grid(1)
    assert np.all(io.map_to_gray(np.full(g.n_cells, 0.3), g) == 128)


def test_export_maps(tmp_path, rng):
    g = build_grid(1)
    maps = rng.standard_normal((3, 40))
    files = io.export_maps(tmp_path / "seq.pgm", maps, g)
    assert [f.name for f in files] == ["seq_0000.pgm", "seq_0001.pgm", "seq_0002.pgm"]
    assert io.read_pgm(files[1]).shape == (10, 4)
    assert io.export_maps(tmp_path / "one.csv", maps, g) == [tmp_path / "one.csv"]
    with pytest.raises(ValueError):
        io.export_maps(tmp_path / "x.png", maps, g)


def test_azimuth_elevation():
    az, el = io.azimuth_elevation(np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 0.5], [0, 0, 0]]))
    assert np.allclose(az[:3], [0, 90, 0]) and np.allclose(el, [0, 0, 90, 0])


def test_inference_csv(tmp_path):
    io.write_inference_csv(tmp_path / "o.csv", np.array([[0.0, 0.5, 0.0]]))
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "frame,vx,vy,vz,confidence,azimuth_deg,elevation_deg"
    assert lines[1].split(",")[4] == "0.5"


def test_toml_roundtrip(tmp_path):
    d = {"a": 1, "b": {"c": [1.5, 2.5]}, "s": "x"}
    io.write_toml(tmp_path / "t.toml", d)
    assert io.read_toml(tmp_path / "t.toml") == d
