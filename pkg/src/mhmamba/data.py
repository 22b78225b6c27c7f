"""Volume files, synthetic phantoms and sliding-window inference.

A volume on disk is two files sharing a stem: ``<stem>.json`` (header) and
``<stem>.raw`` (little-endian samples in (C, D, H, W) row-major order).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .network import softmax_probs

FORMAT_TAG = "mhmamba-volume"
DTYPE_TAGS = {"f32": "<f4", "f64": "<f8", "u8": "u1", "i16": "<i2", "i32": "<i4"}
MODALITIES = ("T1", "T1ce", "T2", "FLAIR")


class VolumeFormatError(ValueError):
    pass


class VolumeTruncatedError(VolumeFormatError):
    pass


class VolumeSizeMismatchError(VolumeFormatError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def _tag_for(dtype) -> str:
    dt = np.dtype(dtype)
    for tag, code in DTYPE_TAGS.items():
        if np.dtype(code).kind == dt.kind and np.dtype(code).itemsize == dt.itemsize:
            return tag
    raise VolumeFormatError(f"unsupported dtype {dt}")


def write_volume(path, volume: np.ndarray, spacing=(1.0, 1.0, 1.0), modalities=None) -> Path:
    """Write a (C, D, H, W) array, or a (1, C, D, H, W) batch of one."""
    v = np.asarray(volume)
    if v.ndim == 5:
        if v.shape[0] != 1:
            raise VolumeFormatError("only single-sample volumes can be written")
        v = v[0]
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4:
        raise VolumeFormatError(f"expected (C, D, H, W), got shape {v.shape}")
    tag = _tag_for(v.dtype)
    hdr_path, raw_path = _paths(path)
    header = {
        "format": FORMAT_TAG,
        "version": 1,
        "shape": list(v.shape),
        "dtype": tag,
        "spacing": [float(s) for s in spacing],
        "modalities": list(modalities) if modalities is not None else [],
    }
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    hdr_path.write_text(json.dumps(header, indent=1) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(v, dtype=DTYPE_TAGS[tag]).tobytes())
    return raw_path


def read_header(path) -> dict:
    hdr_path, _ = _paths(path)
    try:
        header = json.loads(hdr_path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{hdr_path}: malformed header ({e})") from None
    if header.get("format") != FORMAT_TAG:
        raise VolumeFormatError(f"{hdr_path}: not a {FORMAT_TAG} header")
    if header.get("dtype") not in DTYPE_TAGS:
        raise VolumeFormatError(f"{hdr_path}: unknown dtype tag {header.get('dtype')!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or len(shape) != 4 or any(
            not isinstance(n, int) or n < 1 for n in shape):
        raise VolumeFormatError(f"{hdr_path}: shape must be four positive integers, got {shape!r}")
    return header


def read_volume(path) -> np.ndarray:
    """Read a volume as (1, C, D, H, W) in its stored dtype (native byte order)."""
    header = read_header(path)
    _, raw_path = _paths(path)
    payload = raw_path.read_bytes()
    dt = np.dtype(DTYPE_TAGS[header["dtype"]])
    expected = int(np.prod(header["shape"]))
    if len(payload) % dt.itemsize:
        raise VolumeTruncatedError(
            f"{raw_path}: {len(payload)} bytes is not a whole number of {header['dtype']} samples")
    if len(payload) // dt.itemsize != expected:
        raise VolumeSizeMismatchError(
            f"{raw_path}: header shape {header['shape']} needs {expected} samples, "
            f"payload holds {len(payload) // dt.itemsize}")
    arr = np.frombuffer(payload, dtype=dt).reshape(header["shape"])
    return arr.astype(dt.newbyteorder("="))[None]


# --------------------------------------------------------------------------
# phantoms
# --------------------------------------------------------------------------

# mean intensity per (modality, class); classes: background, edema, core, enhancing
DEFAULT_INTENSITIES = (
    (0.0, -0.4, -0.8, 0.2),
    (0.0, 0.2, 0.6, 1.6),
    (0.0, 1.2, 0.5, 0.3),
    (0.0, 1.4, 0.7, 0.5),
)


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    # semi-axes (d, h, w) of the whole-tumour, core and enhancing ellipsoids
    radii: tuple = ((20.0, 17.0, 15.0), (13.0, 11.0, 10.0), (8.0, 7.0, 6.5))
    center: tuple | None = None
    jitter: float = 4.0
    intensities: tuple = DEFAULT_INTENSITIES
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.radii = tuple(tuple(float(r) for r in rad) for rad in self.radii)


def phantom_center(spec: PhantomSpec) -> tuple:
    if spec.center is not None:
        return tuple(float(c) for c in spec.center)
    rng = np.random.default_rng([spec.seed, 1])
    return tuple((d - 1) / 2.0 + rng.uniform(-spec.jitter, spec.jitter) for d in spec.dims)


def _validate_phantom(spec: PhantomSpec, center):
    if len(spec.radii) != 3:
        raise ValueError("a phantom needs exactly three nested ellipsoids")
    for outer, inner in zip(spec.radii, spec.radii[1:]):
        if any(i >= o for i, o in zip(inner, outer)):
            raise ValueError(f"radii not strictly nested: {inner} inside {outer}")
    for c, r, d in zip(center, spec.radii[0], spec.dims):
        if c - r < 0 or c + r > d - 1:
            raise ValueError(f"ellipsoid (centre {c:.1f}, radius {r}) does not fit extent {d}")


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Four-channel image (1, 4, D, H, W) float32 and labels (1, D, H, W) uint8.

    Labels: 1 outer shell, 2 middle shell, 3 centre.
    """
    center = phantom_center(spec)
    _validate_phantom(spec, center)
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in spec.dims], indexing="ij")
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for cls, rad in enumerate(spec.radii, start=1):
        q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, rad))
        labels[q <= 1.0] = cls
    means = np.asarray(spec.intensities, dtype=np.float64)
    image = means[:, labels]
    if spec.noise > 0:
        rng = np.random.default_rng([spec.seed, 2])
        image = image + rng.normal(0.0, spec.noise, image.shape)
    return image.astype(np.float32)[None], labels[None]


# --------------------------------------------------------------------------
# sliding-window inference
# --------------------------------------------------------------------------

def tile_starts(dim: int, patch: int, overlap: float) -> list[int]:
    """Window origins along one axis; the last window is shifted to end at ``dim``."""
    if patch > dim:
        raise ValueError(f"patch {patch} exceeds volume extent {dim}")
    stride = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def tiles(dims, patch, overlap) -> list[tuple[int, int, int]]:
    return list(itertools.product(*(tile_starts(d, p, overlap) for d, p in zip(dims, patch))))


def _check_window(dims, patch, overlap):
    if not 0.0 <= overlap <= 0.9:
        raise ValueError(f"overlap {overlap} outside [0, 0.9]")
    if len(patch) != 3 or any(p > d for p, d in zip(patch, dims)):
        raise ValueError(f"patch {tuple(patch)} exceeds volume {tuple(dims)}")


def _logits_fn(model):
    def run(x):
        out = model(x)
        logits = getattr(out, "logits", out)
        return logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    return run


def sliding_window_probs(model, volume: np.ndarray, patch, overlap: float = 0.5, order=None):
    """Average softmax probabilities over uniform-weight tiles.

    Returns (probs (B, K, D, H, W), counts (D, H, W)). ``order`` optionally
    permutes tile processing.
    """
    volume = np.asarray(volume)
    dims = volume.shape[2:]
    _check_window(dims, patch, overlap)
    run = _logits_fn(model)
    acc = None
    counts = np.zeros(dims, dtype=np.float64)
    windows = tiles(dims, patch, overlap)
    if order is not None:
        windows = [windows[i] for i in order]
    with ad.no_grad():
        for corner in windows:
            sl = tuple(slice(c, c + p) for c, p in zip(corner, patch))
            probs = softmax_probs(run(volume[(slice(None), slice(None)) + sl]).astype(np.float64))
            if acc is None:
                acc = np.zeros((volume.shape[0], probs.shape[1]) + tuple(dims))
            acc[(slice(None), slice(None)) + sl] += probs
            counts[sl] += 1.0
    return acc / counts, counts


def sliding_window_infer(model, volume: np.ndarray, patch, overlap: float = 0.5) -> np.ndarray:
    """Label volume (B, D, H, W) from argmax of tile-averaged probabilities."""
    probs, _ = sliding_window_probs(model, volume, patch, overlap)
    return np.argmax(probs, axis=1).astype(np.uint8)
