"""Generators (exact ground truth, determinism) and file format contracts."""

import math

import numpy as np
import pytest

from motionkit.data import (DatasetManifest, DepthGenParams, FlowGenParams,
                            Plane, bilinear_sample, depth_sample_from_planes,
                            flow_sample_from_motion, flow_to_color,
                            gen_depth_sample, gen_flow_sample, load_manifest,
                            read_flo, read_pfm, read_ppm, sample_rng,
                            save_manifest, write_flo, write_pfm, write_ppm)
from motionkit.errors import ConfigError, FormatError
from motionkit.heads import DepthMap, FlowField
from motionkit.autodiff import Tensor
from motionkit.tokenizer import make_image


# ---------------------------------------------------------------------------
# flow generator

def test_identity_motion_reproduces_frame():
    s = gen_flow_sample(7, FlowGenParams(size=32, max_disp=0.0, rot_max_deg=0.0))
    assert np.array_equal(s.frame1.data, s.frame2.data)
    assert np.array_equal(s.gt_flow.u.data, np.zeros((32, 32)))
    assert np.array_equal(s.gt_flow.v.data, np.zeros((32, 32)))
    assert s.gt_flow.valid.all()


def test_pure_translation_flow_and_validity():
    s = flow_sample_from_motion(3, FlowGenParams(size=16, max_disp=4.0),
                                tx=2.0, ty=0.0, theta_rad=0.0)
    assert np.allclose(s.gt_flow.u.data, 2.0)
    assert np.allclose(s.gt_flow.v.data, 0.0)
    assert s.gt_flow.valid[:, :14].all()
    assert not s.gt_flow.valid[:, 14:].any()  # rightmost 2-pixel band


def test_flow_sample_deterministic():
    a = gen_flow_sample(123, FlowGenParams(size=24, max_disp=3.0))
    b = gen_flow_sample(123, FlowGenParams(size=24, max_disp=3.0))
    assert np.array_equal(a.frame1.data, b.frame1.data)
    assert np.array_equal(a.frame2.data, b.frame2.data)
    assert np.array_equal(a.gt_flow.u.data, b.gt_flow.u.data)
    c = gen_flow_sample(124, FlowGenParams(size=24, max_disp=3.0))
    assert not np.array_equal(a.frame1.data, c.frame1.data)


def test_flow_sample_param_bounds():
    with pytest.raises(ConfigError):
        gen_flow_sample(0, FlowGenParams(size=16, max_disp=5.0))


def test_ground_truth_rewarp_consistency():
    # brightness constancy: frame2 sampled at x + flow(x) must reproduce
    # frame1(x) within interpolation error on valid pixels
    worst = 0.0
    for seed in range(5):
        s = gen_flow_sample(seed, FlowGenParams(size=64, max_disp=4.0))
        n = 64
        xs, ys = np.meshgrid(np.arange(n, dtype=np.float64),
                             np.arange(n, dtype=np.float64))
        rewarped = bilinear_sample(s.frame2.data[:, :, 0].astype(np.float64),
                                   xs + s.gt_flow.u.data, ys + s.gt_flow.v.data)
        err = np.abs(rewarped - s.frame1.data[:, :, 0])[s.gt_flow.valid]
        worst = max(worst, float(err.max()))
    assert worst <= 2.0 / 255.0, worst


def test_flow_sample_values_in_range():
    s = gen_flow_sample(11, FlowGenParams(size=32, max_disp=4.0))
    for img in (s.frame1, s.frame2):
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0


# ---------------------------------------------------------------------------
# depth generator

def test_single_fronto_parallel_plane():
    plane = Plane(z0=5.0, gx=0.0, gy=0.0, cx=7.5, cy=7.5, rect=(0, 0, 16, 16),
                  albedo=0.5)
    light = np.array([0.0, 0.0, 1.0])
    s = depth_sample_from_planes(0, 16, [plane], light)
    assert np.allclose(s.gt_depth.d.data, 5.0)
    assert s.gt_depth.valid.all()


def test_overlapping_planes_nearest_wins():
    back = Plane(z0=8.0, gx=0.0, gy=0.0, cx=7.5, cy=7.5, rect=(0, 0, 16, 16),
                 albedo=0.4)
    front = Plane(z0=2.0, gx=0.0, gy=0.0, cx=7.5, cy=7.5, rect=(4, 4, 12, 12),
                  albedo=0.8)
    s = depth_sample_from_planes(0, 16, [back, front],
                                 np.array([0.0, 0.0, 1.0]))
    d = s.gt_depth.d.data
    assert np.allclose(d[4:12, 4:12], 2.0)   # overlap: nearest wins
    assert np.allclose(d[0, 0], 8.0)
    assert np.allclose(d[3, 4], 8.0)         # boundary row above the overlay


def test_depth_sample_deterministic_and_bounded():
    a = gen_depth_sample(55, DepthGenParams(size=32, n_planes=4))
    b = gen_depth_sample(55, DepthGenParams(size=32, n_planes=4))
    assert np.array_equal(a.frame1.data, b.frame1.data)
    assert np.array_equal(a.gt_depth.d.data, b.gt_depth.d.data)
    assert a.gt_depth.d.data.min() >= 1.0 - 1e-6
    assert a.gt_depth.d.data.max() <= 10.0 + 1e-6
    assert a.frame1.data.min() >= 0.0 and a.frame1.data.max() <= 1.0


def test_depth_sample_param_validation():
    with pytest.raises(ConfigError):
        gen_depth_sample(0, DepthGenParams(size=16, n_planes=0))


def test_depth_brightness_correlates_with_depth():
    # the generator bakes in a monotone depth cue; verify it is learnable
    corrs = []
    for seed in range(8):
        s = gen_depth_sample(seed, DepthGenParams(size=32, n_planes=3))
        img = s.frame1.data[:, :, 0].reshape(-1)
        d = s.gt_depth.d.data.reshape(-1)
        if d.std() > 1e-6:
            corrs.append(np.corrcoef(img, d)[0, 1])
    assert np.mean(corrs) < -0.5


# ---------------------------------------------------------------------------
# .flo

def test_flo_round_trip_bitwise(tmp_path):
    g = sample_rng(1)
    u = g.normal(size=(5, 7)).astype(np.float32)
    v = g.normal(size=(5, 7)).astype(np.float32)
    path = tmp_path / "x.flo"
    write_flo(path, FlowField(Tensor(u), Tensor(v), np.ones((5, 7), bool)))
    back = read_flo(path)
    assert np.array_equal(back.u.data, u)
    assert np.array_equal(back.v.data, v)


def test_flo_1x1_is_20_bytes(tmp_path):
    path = tmp_path / "one.flo"
    write_flo(path, FlowField(Tensor(np.array([[1.5]], dtype=np.float32)),
                              Tensor(np.array([[-2.0]], dtype=np.float32)),
                              np.ones((1, 1), bool)))
    blob = path.read_bytes()
    assert len(blob) == 20
    back = read_flo(path)
    assert back.u.data[0, 0] == 1.5 and back.v.data[0, 0] == -2.0


def test_flo_bad_magic(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(b"\x00" * 20)
    with pytest.raises(FormatError) as exc:
        read_flo(path)
    assert "byte 0" in str(exc.value)


def test_flo_truncated(tmp_path):
    g = sample_rng(2)
    u = g.normal(size=(3, 3)).astype(np.float32)
    path = tmp_path / "t.flo"
    write_flo(path, FlowField(Tensor(u), Tensor(u), np.ones((3, 3), bool)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FormatError) as exc:
        read_flo(path)
    assert "byte" in str(exc.value)


# ---------------------------------------------------------------------------
# PFM

def test_pfm_round_trip_bitwise(tmp_path):
    d = sample_rng(3).uniform(1.0, 9.0, size=(4, 6)).astype(np.float32)
    path = tmp_path / "d.pfm"
    write_pfm(path, DepthMap(Tensor(d), np.ones((4, 6), bool)))
    back = read_pfm(path)
    assert np.array_equal(back.d.data, d)


def test_pfm_layout_2x1(tmp_path):
    path = tmp_path / "two.pfm"
    write_pfm(path, DepthMap(Tensor(np.array([[3.0, 4.0]], dtype=np.float32)),
                             np.ones((1, 2), bool)))
    blob = path.read_bytes()
    header = b"Pf\n2 1\n-1.0\n"
    assert blob.startswith(header)
    assert len(blob) == len(header) + 8


def test_pfm_color_rejected(tmp_path):
    path = tmp_path / "c.pfm"
    path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
    with pytest.raises(FormatError) as exc:
        read_pfm(path)
    assert "unsupported" in str(exc.value)


def test_pfm_big_endian_scale(tmp_path):
    d = np.array([[1.5, 2.5]], dtype=np.float32)
    path = tmp_path / "be.pfm"
    path.write_bytes(b"Pf\n2 1\n1.0\n" + d[::-1].astype(">f4").tobytes())
    assert np.array_equal(read_pfm(path).d.data, d)


# ---------------------------------------------------------------------------
# PPM / PGM

def test_ppm_round_trip_quantized(tmp_path):
    img = make_image(sample_rng(4).uniform(size=(6, 5, 3)).astype(np.float32))
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back.channels == 3
    assert np.max(np.abs(back.data - img.data)) <= 1.0 / 255.0


def test_pgm_black_payload(tmp_path):
    path = tmp_path / "b.pgm"
    write_ppm(path, make_image(np.zeros((2, 2), dtype=np.float32)))
    blob = path.read_bytes()
    assert blob == b"P5\n2 2\n255\n" + b"\x00" * 4


def test_ppm_ascii_rejected(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P3\n2 2\n255\n0 0 0 0 0 0 0 0 0 0 0 0\n")
    with pytest.raises(FormatError):
        read_ppm(path)


def test_ppm_maxval_rejected(tmp_path):
    path = tmp_path / "m.pgm"
    path.write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(FormatError) as exc:
        read_ppm(path)
    assert "maxval" in str(exc.value)


def test_ppm_header_comments_tolerated(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 1\n255\n\x10\x20")
    img = read_ppm(path)
    assert img.width == 2 and img.height == 1


# ---------------------------------------------------------------------------
# header fuzzing: structured errors, never crashes

@pytest.mark.parametrize("fmt", ["flo", "pfm", "pgm"])
def test_header_fuzz_structured_errors(tmp_path, fmt):
    g = sample_rng(5)
    base = tmp_path / f"base.{fmt}"
    if fmt == "flo":
        u = g.normal(size=(3, 4)).astype(np.float32)
        write_flo(base, FlowField(Tensor(u), Tensor(u), np.ones((3, 4), bool)))
        reader = read_flo
    elif fmt == "pfm":
        d = g.uniform(1, 5, size=(3, 4)).astype(np.float32)
        write_pfm(base, DepthMap(Tensor(d), np.ones((3, 4), bool)))
        reader = read_pfm
    else:
        write_ppm(base, make_image(g.uniform(size=(3, 4)).astype(np.float32)))
        reader = read_ppm
    blob = bytearray(base.read_bytes())
    target = tmp_path / f"fuzz.{fmt}"
    header_len = min(16, len(blob))
    for trial in range(200):
        mutated = bytearray(blob)
        pos = int(g.integers(0, header_len))
        mutated[pos] = int(g.integers(0, 256))
        if g.uniform() < 0.3:
            mutated = mutated[:int(g.integers(0, len(mutated)))]
        target.write_bytes(bytes(mutated))
        try:
            reader(target)
        except FormatError:
            pass  # structured rejection is the contract
        except Exception as exc:  # noqa: BLE001 - the point of the fuzz
            pytest.fail(f"{fmt} trial {trial}: unstructured {type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# flow visualization

def test_flow_color_zero_is_white():
    z = FlowField(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))),
                  np.ones((4, 4), bool))
    img = flow_to_color(z)
    assert np.allclose(img.data, 1.0)


def test_flow_color_opposite_directions_opposite_hues():
    m = 3.0
    right = FlowField(Tensor(np.full((2, 2), m)), Tensor(np.zeros((2, 2))),
                      np.ones((2, 2), bool))
    left = FlowField(Tensor(np.full((2, 2), -m)), Tensor(np.zeros((2, 2))),
                     np.ones((2, 2), bool))
    img_r = flow_to_color(right, max_mag=m).data[0, 0]
    img_l = flow_to_color(left, max_mag=m).data[0, 0]
    assert np.allclose(img_r, [1.0, 0.0, 0.0], atol=1e-6)   # 0 deg hue
    assert np.allclose(img_l, [0.0, 1.0, 1.0], atol=1e-6)   # 180 deg hue


def test_flow_color_rotating_field_covers_hues():
    n = 16
    xs, ys = np.meshgrid(np.arange(n) - n / 2, np.arange(n) - n / 2)
    mag = np.hypot(xs, ys) + 1e-9
    fl = FlowField(Tensor(xs / mag), Tensor(ys / mag), np.ones((n, n), bool))
    img1 = flow_to_color(fl).data
    img2 = flow_to_color(fl).data
    assert np.array_equal(img1, img2)
    hues = np.arctan2(fl.v.data, fl.u.data).reshape(-1)
    hist, _ = np.histogram(hues, bins=8, range=(-math.pi, math.pi))
    assert (hist > 0).all()
    channel_span = img1.max(axis=(0, 1)) - img1.min(axis=(0, 1))
    assert (channel_span > 0.5).all()


def test_flow_color_invalid_pixels_black():
    valid = np.ones((2, 2), bool)
    valid[0, 0] = False
    fl = FlowField(Tensor(np.ones((2, 2))), Tensor(np.zeros((2, 2))), valid)
    img = flow_to_color(fl)
    assert np.allclose(img.data[0, 0], 0.0)


# ---------------------------------------------------------------------------
# manifests

def test_manifest_round_trip(tmp_path):
    m = DatasetManifest(kind="flow", count=8, size=64, base_seed=100,
                        max_disp=4.0, texture_octaves=3)
    path = tmp_path / "train.manifest"
    save_manifest(path, m)
    back = load_manifest(path)
    assert back == m
    s = back.sample(3)
    assert s.kind == "flow" and s.seed == 103
    again = back.sample(3)
    assert np.array_equal(s.frame1.data, again.frame1.data)


def test_manifest_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.manifest"
    path.write_text("kind = flow\ncount = 4\nsize = 32\nbase_seed = 0\n"
                    "max_disp = 2\ntexture_octaves = 2\nbogus = 1\n")
    with pytest.raises(ConfigError) as exc:
        load_manifest(path)
    assert "bogus" in str(exc.value)


def test_manifest_depth_kind(tmp_path):
    path = tmp_path / "d.manifest"
    save_manifest(path, DatasetManifest(kind="depth", count=2, size=32,
                                        base_seed=5, n_planes=2))
    m = load_manifest(path)
    s = m.sample(0)
    assert s.kind == "depth" and s.gt_depth is not None and s.frame2 is None
    with pytest.raises(ConfigError):
        m.sample(2)
