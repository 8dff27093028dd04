"""Multi-frame observation bundles (masks, boxes, sparse points and depths) and their binary container.

Pixel-set tags follow the mask/depth constraints: ``TAG_MASK`` pixels are
inside the object mask, ``TAG_BOX`` pixels are inside the 2D box but off the
mask, ``TAG_SURFACE`` pixels carry a measured depth on the object.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import SimilarityPose
from .render import CameraModel, backproject, render_view

TAG_MASK = 0
TAG_BOX = 1
TAG_SURFACE = 2

NFOB_MAGIC = b"NFOB"
NFOB_VERSION = 1


@dataclass
class NoiseConfig:
    """Measurement corruption.

    ``mask_radius`` > 0 dilates the mask by that many pixels, < 0 erodes it.
    """

    point_sigma: float = 0.0
    depth_sigma: float = 0.0
    mask_radius: int = 0
    bbox_pad: int = 2

    def __post_init__(self):
        if self.point_sigma < 0 or self.depth_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        if abs(int(self.mask_radius)) > 2:
            raise ValueError("mask_radius must lie in [-2, 2]")
        self.mask_radius = int(self.mask_radius)
        self.bbox_pad = int(self.bbox_pad)


@dataclass
class FrameObservation:
    camera: CameraModel
    mask: np.ndarray
    bbox2d: np.ndarray  # (u0, v0, u1, v1), inclusive pixel bounds
    surface_points: np.ndarray  # (n, 3) world frame
    depth_pixels: np.ndarray  # (m, 4): u, v, depth (nan for box pixels), tag

    def mask_pixels(self):
        v, u = np.nonzero(self.mask)
        return np.stack([u, v], axis=-1)

    def box_pixels(self):
        u0, v0, u1, v1 = self.bbox2d
        box = np.zeros_like(self.mask, dtype=bool)
        box[v0 : v1 + 1, u0 : u1 + 1] = True
        v, u = np.nonzero(box & ~self.mask)
        return np.stack([u, v], axis=-1)


@dataclass
class ObservationBundle:
    frames: list
    metadata: dict = field(default_factory=dict)

    @property
    def fused_points(self):
        pts = [f.surface_points for f in self.frames if len(f.surface_points)]
        return np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))

    def __len__(self):
        return len(self.frames)


def _bbox_from_mask(mask, pad):
    v, u = np.nonzero(mask)
    if len(u) == 0:
        return np.array([0, 0, -1, -1], dtype=np.int64)
    h, w = mask.shape
    return np.array([max(u.min() - pad, 0), max(v.min() - pad, 0), min(u.max() + pad, w - 1), min(v.max() + pad, h - 1)], dtype=np.int64)


def corrupt_mask(mask, radius):
    if radius == 0:
        return mask.copy()
    st = ndimage.generate_binary_structure(2, 1)
    it = abs(radius)
    if radius > 0:
        return ndimage.binary_dilation(mask, structure=st, iterations=it)
    return ndimage.binary_erosion(mask, structure=st, iterations=it)


def make_observation_bundle(shape, cameras, noise=None, n_points_per_frame=50, seed=0, object_pose=None):
    """Render every camera and synthesize the per-frame measurements.

    Pure in (shape, cameras, noise, seed, object_pose). ``object_pose`` maps
    world points into the shape's canonical frame (identity when ``None``).
    """
    if len(cameras) < 1:
        raise ValueError("need at least one camera")
    noise = noise or NoiseConfig()
    rng = np.random.default_rng(seed)
    frames = []
    meta = {"short_frames": [], "empty_frames": [], "n_points_per_frame": int(n_points_per_frame), "seed": int(seed)}
    for qi, cam in enumerate(cameras):
        rr = render_view(shape, cam, object_pose)
        if rr.empty:
            meta["empty_frames"].append(qi)
        mask = corrupt_mask(rr.mask, noise.mask_radius)
        bbox = _bbox_from_mask(mask, noise.bbox_pad)

        vv, uu = np.nonzero(rr.mask & mask)
        n_avail = len(uu)
        k = min(n_points_per_frame, n_avail)
        if k < n_points_per_frame:
            meta["short_frames"].append(qi)
        pick = np.sort(rng.choice(n_avail, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
        u, v = uu[pick].astype(np.float64), vv[pick].astype(np.float64)
        true_depth = rr.depth[vv[pick], uu[pick]]
        pts = backproject(cam, u, v, true_depth) if k else np.zeros((0, 3))
        if noise.point_sigma > 0 and k:
            pts = pts + rng.normal(scale=noise.point_sigma, size=pts.shape)
        d_meas = true_depth + (rng.normal(scale=noise.depth_sigma, size=k) if noise.depth_sigma > 0 else 0.0)
        surf_px = np.stack([u, v, d_meas, np.full(k, TAG_SURFACE, dtype=np.float64)], axis=-1)

        frame = FrameObservation(cam, mask, bbox, pts, surf_px)
        bp = frame.box_pixels().astype(np.float64)
        box_px = np.stack([bp[:, 0], bp[:, 1], np.full(len(bp), np.nan), np.full(len(bp), TAG_BOX, dtype=np.float64)], axis=-1)
        frame.depth_pixels = np.concatenate([surf_px, box_px], axis=0)
        frames.append(frame)
    return ObservationBundle(frames, meta)


# -- binary container -------------------------------------------------------


def _pack_array(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.append(struct.pack("<I", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.append(arr.tobytes())


def _unpack_array(data, off):
    (ndim,) = struct.unpack_from("<I", data, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
    return arr, off + 8 * n


def bundle_to_bytes(bundle):
    """Serialize to the NFOB layout: magic, u32 version, u32 frame count, then per-frame f64 arrays."""
    buf = [NFOB_MAGIC, struct.pack("<II", NFOB_VERSION, len(bundle.frames))]
    for f in bundle.frames:
        _pack_array(buf, f.camera.to_array())
        _pack_array(buf, f.mask.astype(np.float64))
        _pack_array(buf, np.asarray(f.bbox2d, dtype=np.float64))
        _pack_array(buf, np.asarray(f.surface_points, dtype=np.float64).reshape(-1, 3))
        _pack_array(buf, np.asarray(f.depth_pixels, dtype=np.float64).reshape(-1, 4))
    return b"".join(buf)


def bundle_from_bytes(data, metadata=None):
    if data[:4] != NFOB_MAGIC:
        raise ValueError("not an NFOB observation bundle")
    version, n = struct.unpack_from("<II", data, 4)
    if version != NFOB_VERSION:
        raise ValueError(f"unsupported NFOB version {version}")
    off = 12
    frames = []
    for _ in range(n):
        cam, off = _unpack_array(data, off)
        mask, off = _unpack_array(data, off)
        bbox, off = _unpack_array(data, off)
        pts, off = _unpack_array(data, off)
        px, off = _unpack_array(data, off)
        frames.append(FrameObservation(CameraModel.from_array(cam), mask > 0.5, bbox.astype(np.int64), pts, px))
    if off != len(data):
        raise ValueError("trailing bytes in NFOB container")
    return ObservationBundle(frames, dict(metadata or {}))


def save_bundle(bundle, path):
    """Write ``path`` (binary) and ``path + '.json'`` (metadata sidecar)."""
    with open(path, "wb") as fh:
        fh.write(bundle_to_bytes(bundle))
    meta = dict(bundle.metadata)
    meta.update({"format": "NFOB", "version": NFOB_VERSION, "n_frames": len(bundle.frames)})
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def load_bundle(path):
    with open(path, "rb") as fh:
        data = fh.read()
    meta = {}
    try:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    return bundle_from_bytes(data, meta)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, SimilarityPose):
        return o.as_vector().tolist()
    raise TypeError(type(o))
