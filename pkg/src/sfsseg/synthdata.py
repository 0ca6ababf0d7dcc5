"""Synthetic paired segmentation domains with a controllable intensity shift.

Each "volume" is a stack of slices through K-1 organ-like shapes on a
background.  An image is three consecutive slices stacked as channels and
labelled by the middle slice.  The target domain is the same generator
pushed through a per-class gain/bias remap and a power-law contrast curve.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numerics import ContractViolation, RngStream

log = logging.getLogger(__name__)

SPLITS = ("source", "target")
IMAGE_MAGIC = b"SFSI"
IMAGE_VERSION = 1
_IMG_HEADER = struct.Struct("<4sIIIIII")  # magic, version, H, W, C, volume, slice


class CoverageError(RuntimeError):
    pass


@dataclass
class DomainSpec:
    width: int = 64
    height: int = 64
    num_classes: int = 5
    slices_per_volume: int = 8
    # one entry per foreground class: "ellipse", "ring" (around the previous
    # class's organ) or "blob" (ellipse with a wavy outline)
    shapes: list = field(default_factory=lambda: ["ellipse", "ring", "blob", "ellipse"])
    # radii as fractions of the image side
    radius_min: list = field(default_factory=lambda: [0.10, 0.05, 0.10, 0.06])
    radius_max: list = field(default_factory=lambda: [0.18, 0.08, 0.20, 0.10])
    # per class including background (index 0)
    intensity_mean: list = field(default_factory=lambda: [0.0, 2.0, -1.5, 1.0, -3.0])
    noise_amp: float = 0.35
    smooth_radius: float = 1.0
    # target shift, per class including background
    gain: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0, 1.0])
    bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0, 0.0])
    contrast_gamma: float = 1.0
    noise_delta: float = 0.0
    clip: list = None
    normalize: bool = False
    paired: bool = True
    min_class_fraction: float = 0.01

    def __post_init__(self):
        K = self.num_classes
        for name in ("shapes", "radius_min", "radius_max"):
            if len(getattr(self, name)) != K - 1:
                raise ContractViolation(f"DomainSpec.{name} needs {K - 1} entries (one per foreground class)")
        for name in ("intensity_mean", "gain", "bias"):
            if len(getattr(self, name)) != K:
                raise ContractViolation(f"DomainSpec.{name} needs {K} entries (one per class)")
        if self.shapes and self.shapes[0] == "ring":
            raise ContractViolation("class 1 cannot be a ring: rings wrap the previous organ")

    def to_dict(self):
        return asdict(self)

    def identity_shift(self):
        """Copy of this domain with the target shift switched off."""
        d = self.to_dict()
        d.update(gain=[1.0] * self.num_classes, bias=[0.0] * self.num_classes,
                 contrast_gamma=1.0, noise_delta=0.0, clip=None)
        return DomainSpec(**d)


def default_shift_spec(**overrides):
    """The reference source/target pair used throughout the tests and demos."""
    base = dict(
        gain=[1.0, 0.6, 1.1, 0.7, 0.9],
        bias=[1.0, 1.5, 1.2, 1.6, 0.8],
        contrast_gamma=1.0,
    )
    base.update(overrides)
    return DomainSpec(**base)


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x 3 float64
    labels: np.ndarray  # N x H x W int64, or None when withheld
    volume_ids: np.ndarray
    slice_ids: np.ndarray
    split: str
    spec: DomainSpec
    seed: int

    def __len__(self):
        return len(self.images)

    def without_labels(self):
        return Dataset(self.images, None, self.volume_ids, self.slice_ids, self.split, self.spec, self.seed)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx],
                       self.volume_ids[idx], self.slice_ids[idx], self.split, self.spec, self.seed)


# -- geometry ------------------------------------------------------------------------------

def _organ_params(spec, rng):
    """Random shape parameters for one volume."""
    size = min(spec.width, spec.height)
    organs = []
    for k, kind in enumerate(spec.shapes, start=1):
        r = rng.uniform(spec.radius_min[k - 1], spec.radius_max[k - 1]) * size
        if kind == "ring":
            parent = organs[-1]
            organs.append({"kind": kind, "cx": parent["cx"], "cy": parent["cy"], "thick": r,
                           "parent": len(organs) - 1, "angle": parent["angle"]})
            continue
        margin = spec.radius_max[k - 1] * size + 2
        organs.append({
            "kind": kind,
            "cx": rng.uniform(margin, spec.width - margin),
            "cy": rng.uniform(margin, spec.height - margin),
            "rx": r, "ry": r * rng.uniform(0.6, 1.0),
            "angle": rng.uniform(0, np.pi),
            "zc": rng.uniform(0.3, 0.7), "zr": rng.uniform(0.6, 1.0),
            "waves": int(rng.integers(3, 6)), "wamp": rng.uniform(0.1, 0.25),
            "phase": rng.uniform(0, 2 * np.pi),
        })
    return organs


def _ellipse_radius_at(o, z):
    # ellipsoid profile along the slice axis; 0 outside the organ
    u = (z - o["zc"]) / o["zr"]
    return np.sqrt(max(0.0, 1.0 - u * u))


def _label_slice(spec, organs, z):
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(float)
    lab = np.zeros((spec.height, spec.width), dtype=np.uint8)
    polar = []
    for o in organs:
        if o["kind"] == "ring":
            polar.append(None)
            continue
        dx, dy = xx - o["cx"], yy - o["cy"]
        c, s = np.cos(o["angle"]), np.sin(o["angle"])
        u, v = c * dx + s * dy, -s * dx + c * dy
        scale = _ellipse_radius_at(o, z)
        if scale <= 0:
            polar.append(np.full(lab.shape, np.inf))
            continue
        rho = np.sqrt((u / (o["rx"] * scale)) ** 2 + (v / (o["ry"] * scale)) ** 2)
        if o["kind"] == "blob":
            rho = rho / (1.0 + o["wamp"] * np.sin(o["waves"] * np.arctan2(v, u) + o["phase"]))
        polar.append(rho)
    for k, o in enumerate(organs, start=1):
        if o["kind"] == "ring":
            parent = organs[o["parent"]]
            prho = polar[o["parent"]]
            if not np.isfinite(prho).any():
                continue
            mean_r = 0.5 * (parent["rx"] + parent["ry"]) * _ellipse_radius_at(parent, z)
            outer = 1.0 + o["thick"] / max(mean_r, 1e-9)
            mask = (prho > 1.0) & (prho <= outer)
        else:
            mask = polar[k - 1] <= 1.0
        lab[mask] = k
    return lab


def _smooth_noise(shape, spec, rng):
    n = rng.normal(size=shape)
    if spec.smooth_radius > 0:
        n = ndimage.gaussian_filter(n, spec.smooth_radius, mode="wrap")
        std = n.std()
        if std > 0:
            n /= std
    return n


def contrast_curve(x, gamma):
    if gamma == 1.0:
        return x
    return np.sign(x) * np.abs(x) ** gamma


def apply_shift(source_slice, label_slice, spec, noise=None):
    """Push a source intensity slice through the target remap."""
    gain = np.asarray(spec.gain, dtype=float)[label_slice]
    bias = np.asarray(spec.bias, dtype=float)[label_slice]
    out = contrast_curve(gain * source_slice + bias, spec.contrast_gamma)
    if noise is not None and spec.noise_delta:
        out = out + spec.noise_delta * noise
    if spec.clip is not None:
        out = np.clip(out, spec.clip[0], spec.clip[1])
    return out


def _volume(spec, split, rng):
    S = spec.slices_per_volume
    organs = _organ_params(spec, rng.spawn("geometry"))
    zs = (np.arange(S + 2) + 0.5) / (S + 2)
    labels = np.stack([_label_slice(spec, organs, z) for z in zs])
    texture = rng.spawn("texture")
    means = np.asarray(spec.intensity_mean, dtype=float)
    raw = means[labels] + spec.noise_amp * np.stack(
        [_smooth_noise(labels.shape[1:], spec, texture) for _ in zs])
    if split == "target":
        extra = rng.spawn("target-noise")
        raw = np.stack([apply_shift(raw[i], labels[i], spec,
                                    _smooth_noise(labels.shape[1:], spec, extra)) for i in range(len(zs))])
    if spec.normalize:
        raw = (raw - raw.mean()) / (raw.std() + 1e-12)
    images = np.stack([np.moveaxis(raw[i : i + 3], 0, -1) for i in range(S)])
    return images, labels[1 : S + 1]


def generate(spec, n_images, split="source", seed=0, max_attempts=10):
    """Deterministic dataset of ``n_images`` slices for ``split``.

    With ``spec.paired`` the source and target of a seed share geometry and
    texture, so labels match image-for-image.  Without it the target uses an
    independent geometry stream.
    """
    if n_images < 1:
        raise ContractViolation("n_images must be >= 1")
    if split not in SPLITS:
        raise ContractViolation(f"split must be one of {SPLITS}")
    S = spec.slices_per_volume
    n_vol = -(-n_images // S)
    for attempt in range(max_attempts):
        stream = f"attempt-{attempt}" if spec.paired else f"{split}/attempt-{attempt}"
        root = RngStream(seed, stream)
        imgs, labs, vols, slices = [], [], [], []
        for v in range(n_vol):
            im, lb = _volume(spec, split, root.spawn(f"volume-{v}"))
            imgs.append(im)
            labs.append(lb)
            vols.append(np.full(S, v))
            slices.append(np.arange(S))
        images = np.concatenate(imgs)[:n_images]
        labels = np.concatenate(labs)[:n_images].astype(np.int64)
        present = np.stack([(labels == k).any(axis=(1, 2)) for k in range(spec.num_classes)], axis=1)
        if np.all(present.mean(axis=0) >= spec.min_class_fraction):
            return Dataset(images, labels, np.concatenate(vols)[:n_images], np.concatenate(slices)[:n_images],
                           split, spec, seed)
        log.warning("coverage check failed on attempt %d; regenerating with a new sub-seed", attempt)
    raise CoverageError(f"could not meet the class coverage guarantee in {max_attempts} attempts")


# -- augmentation ----------------------------------------------------------------------------

AUGMENT_OPS = ("rotation", "flip", "crop", "noise", "negate")


def augment(image, label, ops, rng=None):
    """Apply ``ops`` in order.  Each op is a name or ``(name, parameter)``.

    rotation: angle in degrees (multiples of 90 are exact), flip: axis,
    crop: margin in pixels (crop then nearest/linear resize back), noise:
    std, negate: no parameter.  Missing parameters are drawn from ``rng``.
    """
    image = np.array(image, dtype=float)
    label = None if label is None else np.array(label)
    for op in ops:
        name, param = (op, None) if isinstance(op, str) else op
        if name == "rotation":
            angle = float(param if param is not None else rng.choice([0, 90, 180, 270]))
            if angle % 90 == 0:
                k = int(angle // 90) % 4
                image = np.rot90(image, k, axes=(0, 1)).copy()
                label = None if label is None else np.rot90(label, k).copy()
            else:
                image = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
                if label is not None:
                    label = ndimage.rotate(label, angle, axes=(1, 0), reshape=False, order=0, mode="nearest")
        elif name == "flip":
            axis = int(param if param is not None else rng.integers(2))
            image = np.flip(image, axis=axis).copy()
            label = None if label is None else np.flip(label, axis=axis).copy()
        elif name == "crop":
            m = int(param if param is not None else rng.integers(1, max(2, image.shape[0] // 8)))
            if m == 0:
                continue
            h, w = image.shape[:2]
            top = int(rng.integers(0, 2 * m + 1)) if rng is not None else m
            left = int(rng.integers(0, 2 * m + 1)) if rng is not None else m
            sub = image[top : top + h - 2 * m, left : left + w - 2 * m]
            zoom = (h / sub.shape[0], w / sub.shape[1])
            image = ndimage.zoom(sub, zoom + (1,), order=1, mode="nearest", grid_mode=True)[:h, :w]
            if label is not None:
                lsub = label[top : top + h - 2 * m, left : left + w - 2 * m]
                label = ndimage.zoom(lsub, zoom, order=0, mode="nearest", grid_mode=True)[:h, :w]
        elif name == "noise":
            std = float(param if param is not None else 0.1)
            image = image + std * rng.normal(size=image.shape)
        elif name == "negate":
            image = -image
        else:
            raise ContractViolation(f"unknown augmentation '{name}'; expected one of {AUGMENT_OPS}")
    return image, label


# -- persistence --------------------------------------------------------------------------------

def save_dataset(ds, out_dir, preview=False):
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    (out / "images").mkdir(parents=True, exist_ok=True)
    meta = {"format": "sfs-dataset", "version": 1, "split": ds.split, "seed": ds.seed,
            "count": len(ds), "spec": ds.spec.to_dict(), "has_labels": ds.labels is not None}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    N, H, W, C = ds.images.shape
    for i in range(N):
        hdr = _IMG_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, H, W, C, int(ds.volume_ids[i]), int(ds.slice_ids[i]))
        lab = ds.labels[i] if ds.labels is not None else np.zeros((H, W))
        with open(out / "images" / f"{i:06d}.bin", "wb") as fh:
            fh.write(hdr)
            fh.write(np.ascontiguousarray(ds.images[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(lab, dtype=np.uint8).tobytes())
    if preview:
        write_previews(ds, out / "preview")
    return out


def load_dataset(path, with_labels=True):
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("format") != "sfs-dataset":
        raise ValueError(f"{path} is not a dataset directory")
    files = sorted((path / "images").glob("*.bin"))
    if len(files) != meta["count"]:
        raise ValueError(f"{path}: meta lists {meta['count']} images, found {len(files)}")
    images, labels, vols, slices = [], [], [], []
    for f in files:
        raw = f.read_bytes()
        magic, version, H, W, C, vol, sl = _IMG_HEADER.unpack_from(raw)
        if magic != IMAGE_MAGIC or version != IMAGE_VERSION:
            raise ValueError(f"{f}: bad image header")
        off = _IMG_HEADER.size
        n = H * W * C
        images.append(np.frombuffer(raw, "<f8", n, off).reshape(H, W, C))
        if with_labels:
            labels.append(np.frombuffer(raw, np.uint8, H * W, off + 8 * n).reshape(H, W))
        vols.append(vol)
        slices.append(sl)
    spec = DomainSpec(**meta["spec"])
    lab = np.stack(labels).astype(np.int64) if with_labels and meta.get("has_labels", True) else None
    return Dataset(np.stack(images).astype(np.float64), lab, np.array(vols), np.array(slices),
                   meta["split"], spec, meta["seed"])


def write_previews(ds, out_dir, limit=16):
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = ds.spec.num_classes
    for i in range(min(limit, len(ds))):
        mid = ds.images[i][..., 1]
        lo, hi = np.percentile(mid, [1, 99])
        gray = np.clip((mid - lo) / max(hi - lo, 1e-9) * 255, 0, 255).astype(np.uint8)
        Image.fromarray(gray).save(out / f"{i:06d}_image.png")
        if ds.labels is not None:
            lab = (ds.labels[i] * (255 // max(K - 1, 1))).astype(np.uint8)
            Image.fromarray(lab).save(out / f"{i:06d}_label.png")
