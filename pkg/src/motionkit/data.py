"""Synthetic datasets with exact ground truth, plus flow/depth/image files.

Generators are pure functions of (seed, params): every random draw comes
from a counter-based Philox stream keyed by the sample seed, so samples
regenerate bitwise on any platform.  Flow samples are multi-octave value
noise warped by a global affine motion whose per-pixel displacement is
the exact ground truth; depth samples are plane scenes with Lambertian
shading plus a depth-correlated brightness cue.

File formats (all little-endian on disk):
  .flo  Middlebury: float32 magic 202021.25, int32 w, int32 h, then
        h*w interleaved (u, v) float32 pairs, row-major.
  .pfm  grayscale PFM: ``Pf\\n<w> <h>\\n<scale>\\n`` then float32 rows
        bottom-to-top; negative scale marks little-endian.
  .ppm/.pgm  binary P6/P5, maxval 255, values quantized from [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DomainError, FormatError
from .heads import DepthMap, FlowField
from .tokenizer import ImageBuffer, make_image

FLO_MAGIC = 202021.25
ROTATION_MAX_DEG_DEFAULT = 5.0


def sample_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """The named reproducibility contract: counter-based Philox, keyed by
    (sample seed, substream).  Same key, same platform-independent draws."""
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


# ---------------------------------------------------------------------------
# sample containers and generator parameters

@dataclass
class FlowGenParams:
    size: int
    max_disp: float
    # two octaves (16px and 8px cells) keep 8px patches distinctive while
    # honoring the 2/255 re-warp bound; a third octave (4px) overshoots it
    texture_octaves: int = 2
    rot_max_deg: float = ROTATION_MAX_DEG_DEFAULT


@dataclass
class DepthGenParams:
    size: int
    n_planes: int = 3


@dataclass
class Sample:
    kind: str                       # "flow" | "depth"
    seed: int
    frame1: ImageBuffer
    frame2: Optional[ImageBuffer] = None
    gt_flow: Optional[FlowField] = None
    gt_depth: Optional[DepthMap] = None


# ---------------------------------------------------------------------------
# value-noise texture

def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


class ValueNoise:
    """Periodic multi-octave value noise, sampled analytically anywhere."""

    # the octave split balances two pulls: high-frequency energy makes
    # patches distinctive for matching, but curvature drives the
    # double-resampling error of warped frames, which must stay under the
    # 2/255 ground-truth consistency bound (calibrated in tests)
    def __init__(self, rng: np.random.Generator, size: int, octaves: int,
                 base_cell: float = 16.0, total_amp: float = 0.38,
                 decay: float = 0.55):
        self.octaves = []
        weights = [decay ** o for o in range(octaves)]
        norm = sum(weights)
        for o in range(octaves):
            cell = max(2.0, base_cell / (2 ** o))
            lat = max(1, int(round(size / cell)))
            vals = rng.uniform(0.0, 1.0, size=(lat, lat))
            self.octaves.append((cell, lat, vals, total_amp * weights[o] / norm))

    def __call__(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        out = np.full(xs.shape, 0.5)
        for cell, lat, vals, amp in self.octaves:
            gx = xs / cell
            gy = ys / cell
            x0 = np.floor(gx).astype(np.int64)
            y0 = np.floor(gy).astype(np.int64)
            tx = _fade(gx - x0)
            ty = _fade(gy - y0)
            x0m, x1m = x0 % lat, (x0 + 1) % lat
            y0m, y1m = y0 % lat, (y0 + 1) % lat
            v00 = vals[y0m, x0m]
            v10 = vals[y0m, x1m]
            v01 = vals[y1m, x0m]
            v11 = vals[y1m, x1m]
            top = v00 + (v10 - v00) * tx
            bot = v01 + (v11 - v01) * tx
            out = out + amp * ((top + (bot - top) * ty) - 0.5)
        return out


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sampling of a (H, W) array with edge clamping."""
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] + (img[y0, x1] - img[y0, x0]) * fx
    bot = img[y1, x0] + (img[y1, x1] - img[y1, x0]) * fx
    return top + (bot - top) * fy


# ---------------------------------------------------------------------------
# flow samples

def flow_sample_from_motion(seed: int, params: FlowGenParams, tx: float,
                            ty: float, theta_rad: float) -> Sample:
    """Build a flow sample for a fixed affine motion (texture from seed)."""
    n = params.size
    noise = ValueNoise(sample_rng(seed), n, params.texture_octaves)
    xs, ys = np.meshgrid(np.arange(n, dtype=np.float64),
                         np.arange(n, dtype=np.float64))
    frame1 = noise(xs, ys)

    c = (n - 1) / 2.0
    cos_t, sin_t = math.cos(theta_rad), math.sin(theta_rad)
    # A(p) = R (p - c) + c + t ; frame2 backward-samples frame1 at A^-1
    fwd_x = cos_t * (xs - c) - sin_t * (ys - c) + c + tx
    fwd_y = sin_t * (xs - c) + cos_t * (ys - c) + c + ty
    inv_x = cos_t * (xs - c - tx) + sin_t * (ys - c - ty) + c
    inv_y = -sin_t * (xs - c - tx) + cos_t * (ys - c - ty) + c
    frame2 = bilinear_sample(frame1, inv_x, inv_y)

    u = fwd_x - xs
    v = fwd_y - ys
    valid = ((fwd_x >= 0) & (fwd_x <= n - 1) & (fwd_y >= 0) & (fwd_y <= n - 1))
    gt = FlowField(Tensor(u.astype(np.float32)), Tensor(v.astype(np.float32)),
                   valid)
    return Sample(kind="flow", seed=seed,
                  frame1=make_image(frame1.astype(np.float32)),
                  frame2=make_image(frame2.astype(np.float32)),
                  gt_flow=gt)


def gen_flow_sample(seed: int, params: FlowGenParams) -> Sample:
    """Textured frame pair under a random global affine motion."""
    if params.max_disp > params.size / 4:
        raise ConfigError(
            f"max_disp {params.max_disp} exceeds size/4 = {params.size / 4}")
    if params.size < 2:
        raise ConfigError("flow samples need size >= 2")
    rng = sample_rng(seed, stream=1)  # texture uses stream 0
    tx, ty = rng.uniform(-params.max_disp, params.max_disp, size=2)
    theta = math.radians(float(
        rng.uniform(-params.rot_max_deg, params.rot_max_deg)))
    return flow_sample_from_motion(seed, params, float(tx), float(ty), theta)


# ---------------------------------------------------------------------------
# depth samples

@dataclass
class Plane:
    """depth(x, y) = z0 + gx * (x - cx) + gy * (y - cy) over a pixel rect."""

    z0: float
    gx: float
    gy: float
    cx: float
    cy: float
    rect: Tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    albedo: float

    def depth_at(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return self.z0 + self.gx * (xs - self.cx) + self.gy * (ys - self.cy)

    def normal(self) -> np.ndarray:
        n = np.array([-self.gx, -self.gy, 1.0])
        return n / np.linalg.norm(n)


def depth_sample_from_planes(seed: int, size: int, planes: List[Plane],
                             light: np.ndarray) -> Sample:
    """Nearest-depth compositing plus Lambert shading and a depth cue."""
    xs, ys = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64))
    depth = np.full((size, size), np.inf)
    shade = np.zeros((size, size))
    albedo = np.zeros((size, size))
    for p in planes:
        x0, y0, x1, y1 = p.rect
        cover = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        d = p.depth_at(xs, ys)
        closer = cover & (d < depth)
        depth = np.where(closer, d, depth)
        lam = max(0.0, float(p.normal() @ light))
        shade = np.where(closer, lam, shade)
        albedo = np.where(closer, p.albedo, albedo)
    if not np.all(np.isfinite(depth)):
        raise ConfigError("planes do not cover the full image")
    img = 0.1 + 0.4 * albedo * (0.35 + 0.65 * shade) + 0.45 * (1 - (depth - 1) / 9)
    img = np.clip(img, 0.0, 1.0)
    gt = DepthMap(Tensor(depth.astype(np.float32)),
                  np.ones((size, size), dtype=bool))
    return Sample(kind="depth", seed=seed,
                  frame1=make_image(img.astype(np.float32)), gt_depth=gt)


def gen_depth_sample(seed: int, params: DepthGenParams) -> Sample:
    """Random plane scene: fronto-parallel background plus n-1 overlays."""
    if params.n_planes < 1:
        raise ConfigError("depth samples need n_planes >= 1")
    n = params.size
    rng = sample_rng(seed)
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                      rng.uniform(0.8, 1.5)])
    light /= np.linalg.norm(light)
    planes = [Plane(z0=float(rng.uniform(1.0, 10.0)), gx=0.0, gy=0.0,
                    cx=(n - 1) / 2, cy=(n - 1) / 2, rect=(0, 0, n, n),
                    albedo=float(rng.uniform(0.25, 0.95)))]
    for _ in range(params.n_planes - 1):
        x0, x1 = np.sort(rng.integers(0, n, size=2))
        y0, y1 = np.sort(rng.integers(0, n, size=2))
        x1 = min(n, x1 + max(4, n // 8))
        y1 = min(n, y1 + max(4, n // 8))
        z0 = float(rng.uniform(1.2, 9.8))
        slack = min(z0 - 1.0, 10.0 - z0)
        if rng.uniform() < 0.5:
            gx = gy = 0.0
        else:
            span = max(x1 - x0, y1 - y0)
            gmax = 0.9 * slack / max(span, 1)
            gx = float(rng.uniform(-gmax, gmax))
            gy = float(rng.uniform(-gmax, gmax))
        planes.append(Plane(z0=z0, gx=gx, gy=gy, cx=(x0 + x1) / 2,
                            cy=(y0 + y1) / 2, rect=(int(x0), int(y0), int(x1), int(y1)),
                            albedo=float(rng.uniform(0.25, 0.95))))
    return depth_sample_from_planes(seed, n, planes, light)


# ---------------------------------------------------------------------------
# dataset manifests

MANIFEST_KEYS = {
    "flow": {"kind", "count", "size", "base_seed", "max_disp", "texture_octaves"},
    "depth": {"kind", "count", "size", "base_seed", "n_planes"},
}


@dataclass
class DatasetManifest:
    kind: str
    count: int
    size: int
    base_seed: int
    max_disp: float = 4.0
    texture_octaves: int = 2
    n_planes: int = 3

    def sample(self, index: int) -> Sample:
        if not 0 <= index < self.count:
            raise ConfigError(f"sample index {index} outside count {self.count}")
        seed = self.base_seed + index
        if self.kind == "flow":
            return gen_flow_sample(seed, FlowGenParams(
                self.size, self.max_disp, self.texture_octaves))
        return gen_depth_sample(seed, DepthGenParams(self.size, self.n_planes))


def save_manifest(path, m: DatasetManifest):
    lines = [f"kind = {m.kind}", f"count = {m.count}", f"size = {m.size}",
             f"base_seed = {m.base_seed}"]
    if m.kind == "flow":
        lines += [f"max_disp = {m.max_disp}",
                  f"texture_octaves = {m.texture_octaves}"]
    else:
        lines += [f"n_planes = {m.n_planes}"]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    entries = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
        entries[key] = val
    kind = entries.get("kind")
    if kind not in MANIFEST_KEYS:
        raise ConfigError(f"{path}: manifest kind must be flow|depth, got {kind!r}")
    unknown = set(entries) - MANIFEST_KEYS[kind]
    if unknown:
        raise ConfigError(f"{path}: unknown manifest keys {sorted(unknown)}")
    try:
        m = DatasetManifest(
            kind=kind,
            count=int(entries["count"]),
            size=int(entries["size"]),
            base_seed=int(entries["base_seed"]),
            max_disp=float(entries.get("max_disp", 4.0)),
            texture_octaves=int(entries.get("texture_octaves", 2)),
            n_planes=int(entries.get("n_planes", 3)),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing manifest key {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: bad manifest value: {exc}") from None
    if m.count < 1 or m.size < 1:
        raise ConfigError(f"{path}: count and size must be positive")
    return m


# ---------------------------------------------------------------------------
# .flo

def write_flo(path, flow: FlowField):
    u, v = flow.u.data, flow.v.data
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise DomainError("flow values must be finite to write .flo")
    h, w = u.shape
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        np.stack([u, v], axis=-1).astype("<f4").tofile(f)


def read_flo(path) -> FlowField:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header, {len(blob)} bytes at offset 0")
    magic = np.frombuffer(blob, dtype="<f4", count=1)[0]
    if not np.isclose(magic, FLO_MAGIC):
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    w, h = np.frombuffer(blob, dtype="<i4", count=2, offset=4)
    if w <= 0 or h <= 0 or w > 10**6 or h > 10**6:
        raise FormatError(f"{path}: implausible dimensions {w}x{h} at byte 4")
    need = 12 + 8 * int(w) * int(h)
    if len(blob) != need:
        raise FormatError(
            f"{path}: payload ends at byte {len(blob)}, expected {need}")
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(int(h), int(w), 2)
    return FlowField(Tensor(data[:, :, 0].copy()), Tensor(data[:, :, 1].copy()),
                     np.ones((int(h), int(w)), dtype=bool))


# ---------------------------------------------------------------------------
# PFM (grayscale)

def write_pfm(path, depth: DepthMap):
    d = depth.d.data
    if not np.all(np.isfinite(d)) or not np.all(d > 0):
        raise DomainError("PFM writer requires positive finite depth")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        d[::-1].astype("<f4").tofile(f)  # bottom-to-top rows


def read_pfm(path) -> DepthMap:
    blob = Path(path).read_bytes()

    def token(start):
        while start < len(blob) and blob[start:start + 1].isspace():
            start += 1
        end = start
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        if start == end:
            raise FormatError(f"{path}: truncated header at byte {start}")
        return blob[start:end], end

    magic, pos = token(0)
    if magic == b"PF":
        raise FormatError(f"{path}: color PFM is unsupported (grayscale 'Pf' only)")
    if magic != b"Pf":
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    try:
        wtok, pos = token(pos)
        htok, pos = token(pos)
        stok, pos = token(pos)
        w, h, scale = int(wtok), int(htok), float(stok)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path}: malformed PFM header: {exc}") from None
    if w <= 0 or h <= 0 or w > 10**6 or h > 10**6 or scale == 0:
        raise FormatError(f"{path}: implausible PFM header {w}x{h} scale {scale}")
    pos += 1  # single whitespace after the scale line
    need = pos + 4 * w * h
    if len(blob) != need:
        raise FormatError(f"{path}: payload ends at byte {len(blob)}, expected {need}")
    dt = "<f4" if scale < 0 else ">f4"
    rows = np.frombuffer(blob, dtype=dt, offset=pos).reshape(h, w)
    return DepthMap(Tensor(rows[::-1].astype(np.float32)),
                    np.ones((h, w), dtype=bool))


# ---------------------------------------------------------------------------
# PPM / PGM

def write_ppm(path, img: ImageBuffer):
    data = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if img.channels == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + f"\n{img.width} {img.height}\n255\n".encode("ascii"))
        data.tofile(f)


def read_ppm(path) -> ImageBuffer:
    blob = Path(path).read_bytes()

    def token(start):
        while start < len(blob):
            ch = blob[start:start + 1]
            if ch == b"#":  # header comment runs to end of line
                nl = blob.find(b"\n", start)
                start = len(blob) if nl < 0 else nl + 1
            elif ch.isspace():
                start += 1
            else:
                break
        end = start
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        if start == end:
            raise FormatError(f"{path}: truncated header at byte {start}")
        return blob[start:end], end

    magic, pos = token(0)
    if magic == b"P3":
        raise FormatError(f"{path}: ASCII P3 is unsupported (binary P5/P6 only)")
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    channels = 3 if magic == b"P6" else 1
    try:
        wtok, pos = token(pos)
        htok, pos = token(pos)
        mtok, pos = token(pos)
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if w <= 0 or h <= 0 or w > 10**6 or h > 10**6:
        raise FormatError(f"{path}: implausible dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    need = pos + w * h * channels
    if len(blob) != need:
        raise FormatError(f"{path}: payload ends at byte {len(blob)}, expected {need}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(h, w, channels)
    return ImageBuffer(h, w, channels, (data.astype(np.float32) / 255.0))


# ---------------------------------------------------------------------------
# flow visualization

def flow_to_color(flow: FlowField, max_mag: Optional[float] = None) -> ImageBuffer:
    """Standard flow color wheel: hue from direction, saturation from speed."""
    u, v = flow.u.data, flow.v.data
    mag = np.hypot(u, v)
    if max_mag is None:
        valid_mags = mag[flow.valid] if flow.valid.any() else np.zeros(1)
        max_mag = float(valid_mags.max()) if valid_mags.size else 0.0
    if max_mag <= 0:
        max_mag = 1.0
    hue = (np.arctan2(v, u) % (2 * math.pi)) / (2 * math.pi)
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    val = np.ones_like(sat)

    i = np.floor(hue * 6.0) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = val * (1 - sat)
    q = val * (1 - f * sat)
    t = val * (1 - (1 - f) * sat)
    r = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5],
                  [val, q, p, p, t, val])
    g = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5],
                  [t, val, val, q, p, p])
    b = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5],
                  [p, p, t, val, val, q])
    rgb = np.stack([r, g, b], axis=-1)
    rgb[~flow.valid] = 0.0
    return make_image(rgb.astype(np.float32))
