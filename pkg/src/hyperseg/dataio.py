"""Scene containers, the HSC1 on-disk format, synthetic scenes, PCA and patches.

A scene is a hyperspectral cube plus a label map (0 = unlabeled) and an
optional co-registered auxiliary raster. The HSC1 container is bit-exact:
little-endian throughout, f32 payloads, u16 labels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ArgumentError, interp_matrix

MAGIC = b"HSC1"
HEADER_KEYS = ("h", "w", "c", "k", "k2", "has_aux")


class FormatError(ValueError):
    """The byte stream does not conform to the HSC1 container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(ValueError):
    """The decoded payload violates a scene invariant."""


@dataclass
class HsiScene:
    """A hyperspectral cube with labels and an optional auxiliary raster."""

    cube: np.ndarray          # (H, W, C0) float32
    labels: np.ndarray        # (H, W) int, 0 = unlabeled, 1..K = classes
    class_count: int
    aux: np.ndarray | None = None  # (H, W, K2) float32

    def __post_init__(self):
        self.cube = np.ascontiguousarray(self.cube, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.cube.ndim != 3:
            raise ValidationError(f"cube must be (H, W, C), got {self.cube.shape}")
        if self.labels.shape != self.cube.shape[:2]:
            raise ValidationError(
                f"labels {self.labels.shape} do not match cube {self.cube.shape[:2]}"
            )
        if not np.isfinite(self.cube).all():
            raise ValidationError("cube contains non-finite values")
        bad = np.argwhere((self.labels < 0) | (self.labels > self.class_count))
        if bad.size:
            i, j = bad[0]
            raise ValidationError(
                f"label {self.labels[i, j]} at pixel ({i}, {j}) outside 0..{self.class_count}"
            )
        if self.aux is not None:
            self.aux = np.ascontiguousarray(self.aux, dtype=np.float32)
            if self.aux.ndim != 3 or self.aux.shape[:2] != self.cube.shape[:2]:
                raise ValidationError(
                    f"aux raster {self.aux.shape} not co-registered with cube"
                )

    @property
    def height(self):
        return self.cube.shape[0]

    @property
    def width(self):
        return self.cube.shape[1]

    @property
    def bands(self):
        return self.cube.shape[2]

    @property
    def aux_bands(self):
        return 0 if self.aux is None else self.aux.shape[2]


@dataclass
class PatchSample:
    """One model input: a resized spectral crop with its label crop."""

    center: tuple
    spectral: np.ndarray      # (r, r, C1)
    label_patch: np.ndarray   # (r, r) ints in 0..K
    aux_patch: np.ndarray | None
    patch_size: int
    model_size: int


@dataclass
class SplitSpec:
    per_class_train: int = 10
    seed: int = 0
    train_coords: list = field(default_factory=list)
    test_coords: list = field(default_factory=list)


# -- HSC1 container ---------------------------------------------------------


def save_scene(scene, path):
    header = {
        "h": scene.height,
        "w": scene.width,
        "c": scene.bands,
        "k": scene.class_count,
        "k2": scene.aux_bands,
        "has_aux": scene.aux is not None,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(scene.cube.astype("<f4").tobytes())
        fh.write(scene.labels.astype("<u2").tobytes())
        if scene.aux is not None:
            fh.write(scene.aux.astype("<f4").tobytes())


def load_scene(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(raw) < 8:
        raise FormatError("truncated header length field", offset=4)
    (hlen,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    if len(raw) < pos + hlen:
        raise FormatError("truncated header payload", offset=pos)
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", offset=pos) from exc
    if set(header) != set(HEADER_KEYS):
        raise FormatError(
            f"header keys {sorted(header)} do not match required {sorted(HEADER_KEYS)}",
            offset=pos,
        )
    pos += hlen
    h, w, c, k, k2 = (int(header[x]) for x in ("h", "w", "c", "k", "k2"))
    has_aux = bool(header["has_aux"])

    def read_block(count, np_dtype, itemsize, what):
        nonlocal pos
        nbytes = count * itemsize
        if len(raw) < pos + nbytes:
            raise FormatError(
                f"{what} payload needs {nbytes} bytes, {len(raw) - pos} remain",
                offset=pos,
            )
        arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=pos)
        pos += nbytes
        return arr

    cube = read_block(h * w * c, "<f4", 4, "cube").reshape(h, w, c)
    labels = read_block(h * w, "<u2", 2, "labels").reshape(h, w).astype(np.int64)
    aux = None
    if has_aux:
        aux = read_block(h * w * k2, "<f4", 4, "aux").reshape(h, w, k2)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after payload", offset=pos)
    return HsiScene(cube=cube.copy(), labels=labels, class_count=k, aux=None if aux is None else aux.copy())


# -- synthetic scenes ---------------------------------------------------------


def synth_scene(h, w, bands, classes, noise_sigma, seed, with_aux=True):
    """Deterministic Voronoi mosaic of class regions with smooth signatures.

    Each class owns one Gaussian-bump spectral prototype; pixels get the
    prototype of their nearest seeded site plus i.i.d. noise. The auxiliary
    raster is a per-class constant elevation plus noise, and a one-pixel-deep
    border frame is relabeled 0 (unlabeled).
    """
    if h < 4 or w < 4:
        raise ArgumentError(f"scene extents too small: {h}x{w}")
    if classes < 2:
        raise ArgumentError("need at least 2 classes")
    if bands < classes:
        raise ArgumentError(f"need bands >= classes, got {bands} < {classes}")
    rng = np.random.default_rng(seed)

    border = _border_width(h, w)
    margin = border + 1
    sites = np.stack(
        [
            rng.integers(margin, h - margin, size=classes),
            rng.integers(margin, w - margin, size=classes),
        ],
        axis=1,
    )
    ii, jj = np.mgrid[0:h, 0:w]
    d2 = (ii[..., None] - sites[:, 0]) ** 2 + (jj[..., None] - sites[:, 1]) ** 2
    region = d2.argmin(axis=-1)  # 0..classes-1

    b = np.arange(bands, dtype=np.float64)
    centers = (np.arange(classes) + 0.5) * bands / classes
    width = max(bands / (2.0 * classes), 1.0)
    protos = np.exp(-((b[None, :] - centers[:, None]) ** 2) / (2.0 * width**2))

    cube = protos[region] + noise_sigma * rng.standard_normal((h, w, bands))
    labels = region + 1
    labels[:border, :] = 0
    labels[-border:, :] = 0
    labels[:, :border] = 0
    labels[:, -border:] = 0

    aux = None
    if with_aux:
        elevation = (np.arange(classes) + 1.0) / (classes + 1.0)
        aux = elevation[region][..., None] + 0.5 * noise_sigma * rng.standard_normal((h, w, 1))
        aux = np.clip(aux, 0.0, 1.0)
    return HsiScene(cube=cube, labels=labels, class_count=classes, aux=aux)


def _border_width(h, w):
    # widest frame whose area stays closest to ~10% of the scene
    best, best_gap = 1, 1.0
    for k in range(1, min(h, w) // 4 + 1):
        frac = 1.0 - (h - 2 * k) * (w - 2 * k) / (h * w)
        gap = abs(frac - 0.10)
        if gap < best_gap:
            best, best_gap = k, gap
    return best


def class_prototypes(bands, classes):
    """The noiseless spectral prototypes used by synth_scene."""
    b = np.arange(bands, dtype=np.float64)
    centers = (np.arange(classes) + 0.5) * bands / classes
    width = max(bands / (2.0 * classes), 1.0)
    return np.exp(-((b[None, :] - centers[:, None]) ** 2) / (2.0 * width**2))


# -- PCA ---------------------------------------------------------------------


def pca_decompose(pixels, components):
    """Top eigenpairs of the pixel covariance, sign-fixed, descending."""
    n, c = pixels.shape
    if components > c:
        raise ArgumentError(f"cannot keep {components} components of {c} bands")
    x = pixels.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1][:components]
    values = values[order]
    vectors = vectors[:, order]
    for col in range(vectors.shape[1]):
        peak = np.abs(vectors[:, col]).argmax()
        if vectors[peak, col] < 0:
            vectors[:, col] = -vectors[:, col]
    return values, vectors, mean


def pca_reduce(scene, components):
    """Project the scene cube onto its top principal components."""
    h, w, c = scene.cube.shape
    values, vectors, mean = pca_decompose(scene.cube.reshape(-1, c), components)
    projected = (scene.cube.reshape(-1, c).astype(np.float64) - mean) @ vectors
    cube = projected.reshape(h, w, components)
    return HsiScene(
        cube=cube,
        labels=scene.labels.copy(),
        class_count=scene.class_count,
        aux=None if scene.aux is None else scene.aux.copy(),
    )


# -- patches ---------------------------------------------------------------------


def mirror_index(x, size):
    """Reflect an out-of-range index across the image border (no edge repeat)."""
    while x < 0 or x >= size:
        if x < 0:
            x = -x
        else:
            x = 2 * (size - 1) - x
    return x


def extract_patch(scene, i, j, p, label_map=None):
    """Raw p x p crop centered at (i, j); borders are mirror-reflected.

    ``label_map`` overrides scene.labels so training can draw labels from a
    restricted or pseudo-labeled view. Returns (spectral, labels, aux).
    """
    if p % 2 == 0:
        raise ArgumentError(f"patch size must be odd, got {p}")
    if not (0 <= i < scene.height and 0 <= j < scene.width):
        raise ArgumentError(f"patch center ({i}, {j}) outside scene")
    half = p // 2
    rows = np.array([mirror_index(i + a, scene.height) for a in range(-half, half + 1)])
    cols = np.array([mirror_index(j + b, scene.width) for b in range(-half, half + 1)])
    labels_src = scene.labels if label_map is None else label_map
    spectral = scene.cube[np.ix_(rows, cols)]
    labels = labels_src[np.ix_(rows, cols)]
    aux = None if scene.aux is None else scene.aux[np.ix_(rows, cols)]
    return spectral, labels, aux


def resize_hwc(arr, out_h, out_w):
    """Bilinear resize of an (H, W, C) array (align-corners false)."""
    mh = interp_matrix(arr.shape[0], out_h)
    mw = interp_matrix(arr.shape[1], out_w)
    return np.einsum("ij,jkc,lk->ilc", mh, arr.astype(np.float64), mw)


def resize_nearest(arr, out_h, out_w):
    """Nearest-neighbor resize for categorical maps."""
    h, w = arr.shape
    ri = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h), 0, h - 1).astype(int)
    ci = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w), 0, w - 1).astype(int)
    return arr[np.ix_(ri, ci)]


def resize_patch(spectral, labels, aux, r, center=(0, 0)):
    """Resize a raw crop to the model grid: bilinear bands, nearest labels."""
    p = spectral.shape[0]
    sample = PatchSample(
        center=tuple(center),
        spectral=resize_hwc(spectral, r, r) if p != r else spectral.astype(np.float64).copy(),
        label_patch=resize_nearest(labels, r, r) if p != r else labels.copy(),
        aux_patch=None if aux is None else (resize_hwc(aux, r, r) if p != r else aux.astype(np.float64).copy()),
        patch_size=p,
        model_size=r,
    )
    return sample


def make_patch(scene, i, j, p, r, label_map=None):
    spectral, labels, aux = extract_patch(scene, i, j, p, label_map=label_map)
    return resize_patch(spectral, labels, aux, r, center=(i, j))


# -- train/test split -----------------------------------------------------------


def make_split(scene, spec):
    """Seed-deterministic per-class split over labeled pixels only."""
    train, test = [], []
    for k in range(1, scene.class_count + 1):
        coords = np.argwhere(scene.labels == k)
        if coords.size == 0:
            raise ValidationError(f"class {k} has no labeled pixels")
        rng = np.random.default_rng((spec.seed, k))
        order = rng.permutation(len(coords))
        n = min(spec.per_class_train, len(coords))
        train.extend(map(tuple, coords[order[:n]]))
        test.extend(map(tuple, coords[order[n:]]))
    spec.train_coords = train
    spec.test_coords = test
    return train, test
