"""Synthetic wrap-consistent panorama rendering and bit-exact tensor files.

The PTNS file layout is: magic "PTNS" | version u8=1 | dtype u8
(0=f32, 1=u16, 2=u8) | ndim u8 | dims u32 LE | payload row-major LE.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PTNS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint16"): 1, np.dtype("uint8"): 2}

CLASS_NAMES = ("wall", "floor", "ceiling", "table", "chair", "bookcase",
               "door", "clutter")
N_CLASSES = len(CLASS_NAMES)

_PALETTE = np.array([
    [200, 200, 200],  # wall
    [120, 80, 40],    # floor
    [230, 230, 250],  # ceiling
    [180, 120, 60],   # table
    [60, 120, 180],   # chair
    [120, 60, 150],   # bookcase
    [200, 160, 60],   # door
    [90, 170, 90],    # clutter
], dtype=np.uint8)


class FormatError(IOError):
    """Base class for tensor-file format violations."""


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass


def _atomic_write(path, payload):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(array):
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"dtype {array.dtype} not storable")
    code = _DTYPE_CODES[array.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.astype(_DTYPES[code]).tobytes()


def write_tensor(path, array):
    _atomic_write(path, encode_tensor(array))


def read_tensor(path):
    with open(path, "rb") as f:
        blob = f.read()
    return decode_tensor(blob)


def decode_tensor(blob):
    if len(blob) < 7:
        raise TruncatedFileError("file shorter than fixed header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    version, code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    if len(blob) < 7 + 4 * ndim:
        raise TruncatedFileError("truncated dims")
    dims = struct.unpack(f"<{ndim}I", blob[7:7 + 4 * ndim])
    dtype = _DTYPES[code]
    need = 7 + 4 * ndim + int(np.prod(dims)) * dtype.itemsize
    if len(blob) < need:
        raise TruncatedFileError(f"payload needs {need} bytes, got {len(blob)}")
    payload = blob[7 + 4 * ndim:need]
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


# -- synthetic scenes --------------------------------------------------------

@dataclass
class BoxSpec:
    center: tuple        # (x, y, z) meters, camera at origin, y up
    size: tuple          # full extents
    class_id: int


@dataclass
class SceneSpec:
    room_half: tuple = (3.0, 3.0)     # half extents in x and z
    room_height: float = 2.8
    camera_height: float = 1.4
    boxes: tuple = ()
    seed: int = 0
    yaw_steps: int = 0                # integer column offset (camera yaw)
    black_rect: tuple = None          # (i0, i1, j0, j1) in azimuth coords
    noise_sigma: float = 0.02

    def __post_init__(self):
        if not 0 < self.camera_height < self.room_height:
            raise ValueError("camera must sit strictly inside the room")
        ex, ez = self.room_half
        for b in self.boxes:
            cx, cy, cz = b.center
            sx, sy, sz = b.size
            if (abs(cx) + sx / 2 > ex or abs(cz) + sz / 2 > ez
                    or cy - sy / 2 < -self.camera_height
                    or cy + sy / 2 > self.room_height - self.camera_height):
                raise ValueError(f"box {b} extends outside the room")


@dataclass
class EquirectSample:
    rgb: np.ndarray        # (3, h, w) float32 in [0, 1]
    depth: np.ndarray      # (h, w) float32 meters
    normals: np.ndarray    # (3, h, w) float32 unit vectors
    labels: np.ndarray     # (h, w) uint8 class ids
    instances: np.ndarray  # (h, w) uint16 ids, 0 = background
    id: str = "sample"


def render_equirect(spec, h, w):
    """Ray-cast the scene into an equirectangular sample.

    Pixel (i, j) looks along polar angle pi*(i+0.5)/h and azimuth
    2*pi*(a+0.5)/w with a = (j + yaw_steps) mod w, so an integer yaw change
    is pixel-exactly a horizontal roll.
    """
    if w != 2 * h:
        raise ValueError("equirectangular rendering requires w == 2h")
    az = (np.arange(w) + spec.yaw_steps) % w
    phi = 2 * np.pi * (az + 0.5) / w
    theta = np.pi * (np.arange(h) + 0.5) / h
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    dx = st * np.sin(phi)[None, :]
    dy = np.broadcast_to(ct, (h, w)).copy()
    dz = st * np.cos(phi)[None, :]

    ex, ez = spec.room_half
    y_lo, y_hi = -spec.camera_height, spec.room_height - spec.camera_height
    big = np.float64(1e30)

    def safe_div(num, den):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.abs(den) > 1e-12,
                            num / np.where(den == 0, 1, den), big)

    # room exit distances per face (camera strictly inside)
    faces = [
        (safe_div(np.where(dx > 0, ex, np.inf), dx), 0, (-1, 0, 0), dx > 0),
        (safe_div(np.where(dx < 0, -ex, np.inf), dx), 0, (1, 0, 0), dx < 0),
        (safe_div(np.where(dy > 0, y_hi, np.inf), dy), 2, (0, -1, 0), dy > 0),
        (safe_div(np.where(dy < 0, y_lo, np.inf), dy), 1, (0, 1, 0), dy < 0),
        (safe_div(np.where(dz > 0, ez, np.inf), dz), 0, (0, 0, -1), dz > 0),
        (safe_div(np.where(dz < 0, -ez, np.inf), dz), 0, (0, 0, 1), dz < 0),
    ]
    depth = np.full((h, w), big)
    labels = np.zeros((h, w), dtype=np.uint8)
    normals = np.zeros((3, h, w))
    for t, cls, n, active in faces:
        t = np.where(active, t, big)
        closer = t < depth
        depth = np.where(closer, t, depth)
        labels[closer] = cls
        for k in range(3):
            normals[k][closer] = n[k]

    instances = np.zeros((h, w), dtype=np.uint16)
    d = np.stack([dx, dy, dz])
    for bi, box in enumerate(spec.boxes):
        lo = np.array(box.center) - np.array(box.size) / 2
        hi = np.array(box.center) + np.array(box.size) / 2
        t_near = np.full((h, w), -big)
        t_far = np.full((h, w), big)
        axis_near = np.zeros((h, w), dtype=np.int8)
        for k in range(3):
            t0 = safe_div(np.full((h, w), lo[k]), d[k])
            t1 = safe_div(np.full((h, w), hi[k]), d[k])
            tn, tf = np.minimum(t0, t1), np.maximum(t0, t1)
            upd = tn > t_near
            axis_near = np.where(upd, k, axis_near)
            t_near = np.maximum(t_near, tn)
            t_far = np.minimum(t_far, tf)
        hit = (t_near <= t_far) & (t_near > 1e-9) & (t_near < depth)
        depth = np.where(hit, t_near, depth)
        labels[hit] = box.class_id
        instances[hit] = bi + 1
        for k in range(3):
            sign = -np.sign(d[k])
            normals[k][hit] = np.where(axis_near == k, sign, 0.0)[hit]

    rng = np.random.default_rng(spec.seed)
    tint = rng.uniform(-0.08, 0.08, size=(max(len(spec.boxes), 1), 3))
    noise = rng.normal(0.0, spec.noise_sigma, size=(3, h, w))
    base = _PALETTE[labels].transpose(2, 0, 1) / 255.0
    rgb = base.copy()
    for bi in range(len(spec.boxes)):
        sel = instances == bi + 1
        for k in range(3):
            rgb[k][sel] += tint[bi, k]
    rgb += noise[:, :, az]  # noise indexed by azimuth keeps wrap consistency
    rgb = np.clip(rgb, 0.0, 1.0)
    if spec.black_rect is not None:
        i0, i1, j0, j1 = spec.black_rect
        cols = np.isin(az, np.arange(j0, j1))
        rgb[:, i0:i1, :][:, :, cols] = 0.0
    return EquirectSample(
        rgb=rgb.astype(np.float32),
        depth=depth.astype(np.float32),
        normals=normals.astype(np.float32),
        labels=labels,
        instances=instances,
        id=f"scene{spec.seed:05d}",
    )


def random_scene(rng, n_boxes=(2, 4), straddle_p=0.5):
    """Random desk-scale room; each box straddles the panorama seam with
    probability ``straddle_p``."""
    ex = float(rng.uniform(2.2, 3.5))
    ez = float(rng.uniform(2.2, 3.5))
    room_h = float(rng.uniform(2.4, 3.2))
    cam_h = float(rng.uniform(1.2, 1.6))
    boxes = []
    for _ in range(int(rng.integers(n_boxes[0], n_boxes[1] + 1))):
        cls = int(rng.choice([3, 4, 5, 6, 7]))  # table..clutter
        if rng.random() < straddle_p:
            psi = float(rng.normal(0.0, 0.08))  # near the seam azimuth
        else:
            psi = float(rng.uniform(0.6, 2 * np.pi - 0.6))
        r = float(rng.uniform(1.0, 1.8))
        sx = float(rng.uniform(0.8, 1.6))
        sy = float(rng.uniform(0.8, 1.6))
        sz = float(rng.uniform(0.8, 1.6))
        cx = r * np.sin(psi)
        cz = r * np.cos(psi)
        cy = float(rng.uniform(-cam_h + sy / 2 + 0.05, 0.6))
        # clamp inside the room
        cx = float(np.clip(cx, -ex + sx / 2 + 0.05, ex - sx / 2 - 0.05))
        cz = float(np.clip(cz, -ez + sz / 2 + 0.05, ez - sz / 2 - 0.05))
        cy = float(np.clip(cy, -cam_h + sy / 2 + 0.05,
                           room_h - cam_h - sy / 2 - 0.05))
        boxes.append(BoxSpec(center=(cx, cy, cz), size=(sx, sy, sz), class_id=cls))
    return SceneSpec(room_half=(ex, ez), room_height=room_h, camera_height=cam_h,
                     boxes=tuple(boxes), seed=int(rng.integers(0, 2 ** 31)))


# -- dataset persistence -----------------------------------------------------

_SAMPLE_FILES = {
    "rgb": "rgb.ptns", "depth": "depth.ptns", "normals": "normals.ptns",
    "labels": "labels.ptns", "instances": "instances.ptns",
}


def write_sample(dataset_dir, sample):
    d = os.path.join(dataset_dir, sample.id)
    os.makedirs(d, exist_ok=True)
    write_tensor(os.path.join(d, "rgb.ptns"), sample.rgb.astype(np.float32))
    write_tensor(os.path.join(d, "depth.ptns"), sample.depth.astype(np.float32))
    write_tensor(os.path.join(d, "normals.ptns"), sample.normals.astype(np.float32))
    write_tensor(os.path.join(d, "labels.ptns"), sample.labels.astype(np.uint8))
    write_tensor(os.path.join(d, "instances.ptns"), sample.instances.astype(np.uint16))


def read_sample(dataset_dir, sample_id, modalities=("rgb", "depth", "normals")):
    d = os.path.join(dataset_dir, sample_id)
    arrays = {}
    for key in ("rgb", "labels", "instances", *[m for m in modalities
                                                if m in ("depth", "normals")]):
        path = os.path.join(d, _SAMPLE_FILES[key])
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"sample {sample_id!r} is missing required map {key!r} at {path}")
        arrays[key] = read_tensor(path)
    h, w = arrays["rgb"].shape[-2:]
    for key, arr in arrays.items():
        if arr.shape[-2:] != (h, w):
            raise FormatError(f"{key} map of {sample_id!r} has mismatched shape")
    return EquirectSample(
        rgb=arrays["rgb"],
        depth=arrays.get("depth", np.ones((h, w), dtype=np.float32)),
        normals=arrays.get("normals", np.zeros((3, h, w), dtype=np.float32)),
        labels=arrays["labels"],
        instances=arrays["instances"],
        id=sample_id,
    )


def write_manifest(dataset_dir, d_t, splits):
    manifest = {"classes": list(CLASS_NAMES), "k": N_CLASSES, "d_t": d_t,
                "splits": splits}
    _atomic_write(os.path.join(dataset_dir, "manifest.json"),
                  json.dumps(manifest, indent=2).encode())


def read_manifest(dataset_dir):
    path = os.path.join(dataset_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json in {dataset_dir}")
    with open(path) as f:
        return json.load(f)


def generate_dataset(out_dir, n_samples, height, seed, straddle_p=0.5,
                     val_fraction=0.25):
    """Render, persist, and index a synthetic dataset; returns the manifest."""
    from .encoder import compute_d_t

    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    samples = []
    for i in range(n_samples):
        spec = random_scene(rng, straddle_p=straddle_p)
        s = render_equirect(spec, height, 2 * height)
        s.id = f"sample{i:04d}"
        write_sample(out_dir, s)
        samples.append(s)
    n_val = max(1, int(round(n_samples * val_fraction))) if n_samples > 1 else 0
    train_ids = [s.id for s in samples[:n_samples - n_val]]
    val_ids = [s.id for s in samples[n_samples - n_val:]]
    d_t = compute_d_t(np.concatenate(
        [s.depth.reshape(-1) for s in samples if s.id in train_ids]))
    splits = {"train": train_ids, "val": val_ids}
    write_manifest(out_dir, d_t, splits)
    return {"classes": list(CLASS_NAMES), "k": N_CLASSES, "d_t": d_t,
            "splits": splits}


def palette_color(class_id):
    return tuple(int(v) for v in _PALETTE[class_id])


def write_label_ppm(path, labels):
    """Binary P6 visualization of a label map with the fixed class palette."""
    labels = np.asarray(labels)
    h, w = labels.shape
    img = _PALETTE[labels]
    header = f"P6\n{w} {h}\n255\n".encode()
    _atomic_write(path, header + img.tobytes())
