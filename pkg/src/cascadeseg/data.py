"""Volumes, label codec, normalization, augmentation, cropping, phantoms, CSEG I/O.

CSEG volume file (little-endian)::

    magic     4 bytes "CSEG"
    version   u16
    dtype     u8     0 = float32, 1 = uint8
    channels  u16
    dims      3 x u32 (D, H, W)
    spacing   3 x f32 (mm)
    data      row-major, channel-major (C, D, H, W)

Label maps are stored as 1-channel uint8 volumes.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import substream

LABELS = (0, 1, 2, 4)
REGIONS = ("WT", "TC", "ET")

CSEG_MAGIC = b"CSEG"
CSEG_VERSION = 1
_HEADER = struct.Struct("<4sHBH3I3f")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


@dataclass
class Volume:
    data: np.ndarray                        # (C, D, H, W) float32
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ValueError(f"Volume data must be (C,D,H,W) with positive extents, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume data contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1:]


@dataclass
class LabelMap:
    data: np.ndarray                        # (D, H, W) uint8 over {0,1,2,4}
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"LabelMap must be 3-D, got {self.data.shape}")
        bad = np.setdiff1d(np.unique(self.data), LABELS)
        if bad.size:
            raise ValueError(f"invalid label values {bad.tolist()}; allowed {LABELS}")
        self.data = self.data.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class RegionMasks:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        self.wt, self.tc, self.et = (np.asarray(m, dtype=bool) for m in (self.wt, self.tc, self.et))
        if not (self.wt.shape == self.tc.shape == self.et.shape):
            raise ValueError("region masks differ in shape")
        if np.any(self.et & ~self.tc) or np.any(self.tc & ~self.wt):
            raise ValueError("region masks are not nested (ET within TC within WT)")

    def stack(self, dtype=np.float32):
        return np.stack([self.wt, self.tc, self.et]).astype(dtype)

    @classmethod
    def from_stack(cls, arr):
        arr = np.asarray(arr)
        return cls(arr[0] > 0.5, arr[1] > 0.5, arr[2] > 0.5)

    def __iter__(self):
        return iter((self.wt, self.tc, self.et))


# ---------------------------------------------------------------------------
# label codec


def encode_labels(labels) -> RegionMasks:
    lab = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    bad = np.setdiff1d(np.unique(lab), LABELS)
    if bad.size:
        raise ValueError(f"invalid label values {bad.tolist()}; allowed {LABELS}")
    return RegionMasks(lab > 0, (lab == 1) | (lab == 4), lab == 4)


def decode_regions(probs, threshold=0.5) -> np.ndarray:
    """Hierarchical thresholding of (WT, TC, ET) channels into labels {0,1,2,4}."""
    p = probs.data if isinstance(probs, Volume) else np.asarray(probs)
    wt, tc, et = p[0] >= threshold, p[1] >= threshold, p[2] >= threshold
    out = np.zeros(p.shape[1:], dtype=np.uint8)
    out[wt] = 2
    out[wt & tc] = 1
    out[wt & tc & et] = 4
    return out


# ---------------------------------------------------------------------------
# normalization


def normalize(image):
    """Per-channel z-scoring with statistics of the strictly nonzero voxels.

    The affine map is applied to every voxel, background included. Uses the
    population standard deviation.
    """
    data = image.data if isinstance(image, Volume) else np.asarray(image)
    out = np.empty(data.shape, dtype=np.float32)
    for c in range(data.shape[0]):
        ch = data[c].astype(np.float64)
        vals = ch[ch != 0]
        if vals.size < 2:
            raise ValueError(f"normalize: channel {c} has {vals.size} nonzero voxels, need at least 2")
        sd = vals.std()
        if sd == 0:
            raise ValueError(f"normalize: channel {c} nonzero region has zero variance")
        out[c] = (ch - vals.mean()) / sd
    if isinstance(image, Volume):
        return Volume(out, image.spacing)
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentParams:
    shift: np.ndarray     # per channel, fraction of the channel SD in [-0.1, 0.1]
    scale: np.ndarray     # per channel factor in [0.9, 1.1]
    flips: Tuple[bool, bool, bool]

    @classmethod
    def identity(cls, channels):
        return cls(np.zeros(channels), np.ones(channels), (False, False, False))


def draw_augment_params(rng, channels, shift=0.1, scale=(0.9, 1.1), flip_p=0.5) -> AugmentParams:
    s = rng.uniform(-shift, shift, size=channels)
    f = rng.uniform(scale[0], scale[1], size=channels)
    flips = tuple(bool(v) for v in rng.random(3) < flip_p)
    return AugmentParams(s, f, flips)


def apply_augmentation(image, masks, params: AugmentParams):
    """Intensity shift, then scale, then flips (flips shared by image and masks)."""
    x = np.asarray(image, dtype=np.float32)
    sd = x.reshape(x.shape[0], -1).std(axis=1).reshape(-1, 1, 1, 1)
    shift = (params.shift.reshape(-1, 1, 1, 1) * sd).astype(np.float32)
    x = (x + shift) * params.scale.reshape(-1, 1, 1, 1).astype(np.float32)
    m = np.asarray(masks)
    for axis, flip in enumerate(params.flips):
        if flip:
            x = np.flip(x, axis=axis + 1)
            m = np.flip(m, axis=axis + 1)
    return np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(m)


def augment(image, masks, rng):
    """Random intensity shift/scale per channel and random flips on each axis.

    ``image`` is (C,D,H,W); ``masks`` is the (3,D,H,W) region stack or a
    RegionMasks. Returns arrays (or a RegionMasks when one was given).
    """
    as_regions = isinstance(masks, RegionMasks)
    m = masks.stack(np.uint8) if as_regions else masks
    x, m = apply_augmentation(image, m, draw_augment_params(rng, np.shape(image)[0]))
    return x, (RegionMasks.from_stack(m) if as_regions else m)


# ---------------------------------------------------------------------------
# cropping


def _check_crop(dims, crop_dims):
    if len(crop_dims) != 3:
        raise ValueError(f"crop dims must have 3 extents, got {crop_dims}")
    for axis, d, c in zip("DHW", dims, crop_dims):
        if c > d or c < 1:
            raise ValueError(f"crop extent {c} on axis {axis} does not fit volume extent {d}")


def crop(arr, offset, crop_dims):
    sl = tuple(slice(o, o + c) for o, c in zip(offset, crop_dims))
    return arr[(Ellipsis,) + sl]


def random_crop(image, masks, crop_dims, rng):
    """Crop ``image`` (C,D,H,W) and ``masks`` (...,D,H,W) at a uniformly drawn offset."""
    dims = np.shape(image)[-3:]
    _check_crop(dims, crop_dims)
    offset = tuple(int(rng.integers(0, d - c + 1)) for d, c in zip(dims, crop_dims))
    return crop(image, offset, crop_dims), crop(masks, offset, crop_dims), offset


def _bbox_center(mask):
    idx = np.argwhere(mask)
    return (idx.min(axis=0) + idx.max(axis=0)) / 2.0


def window_offset(center, dims, crop_dims):
    out = []
    for c, d, k in zip(center, dims, crop_dims):
        start = int(np.floor(c - k / 2 + 0.5))
        out.append(min(max(start, 0), d - k))
    return tuple(out)


def tumor_centered_crop(probs_or_masks, image, crop_dims, threshold=0.5, brain_mask=None):
    """Crop a window centered on the bounding box of the predicted whole tumor.

    ``probs_or_masks`` is a (3,D,H,W) array whose channel 0 is WT (probabilities
    or binary). Falls back to the bounding box of ``brain_mask`` (default: any
    nonzero image channel), then to the volume center. Returns
    ``(cropped_probs, cropped_image, offset)``.
    """
    p = probs_or_masks.stack() if isinstance(probs_or_masks, RegionMasks) else np.asarray(probs_or_masks)
    dims = p.shape[-3:]
    _check_crop(dims, crop_dims)
    wt = p[0] >= threshold
    if wt.any():
        center = _bbox_center(wt)
    else:
        brain = np.any(np.asarray(image) != 0, axis=0) if brain_mask is None else brain_mask
        center = _bbox_center(brain) if brain.any() else (np.asarray(dims) - 1) / 2.0
    offset = window_offset(center, dims, crop_dims)
    return crop(p, offset, crop_dims), crop(image, offset, crop_dims), offset


def uncrop(cropped, offset, full_dims, fill=0):
    """Place ``cropped`` (...,d,h,w) into a ``full_dims`` volume filled with ``fill``."""
    cropped = np.asarray(cropped)
    win = cropped.shape[-3:]
    for axis, o, c, d in zip("DHW", offset, win, full_dims):
        if o < 0 or o + c > d:
            raise ValueError(f"uncrop: window [{o}, {o + c}) on axis {axis} exceeds extent {d}")
    out = np.full(cropped.shape[:-3] + tuple(full_dims), fill, dtype=cropped.dtype)
    out[(Ellipsis,) + tuple(slice(o, o + c) for o, c in zip(offset, win))] = cropped
    return out


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class TumorSpec:
    """Radii in voxels of the nested tumor compartments.

    Whole tumor (edema envelope) > tumor core > necrotic center; the enhancing
    tumor is the core shell outside the necrotic center.
    """

    wt_radius: float = 5.0
    tc_radius: float = 3.0
    ncr_radius: float = 1.5
    center: Optional[Tuple[float, float, float]] = None
    elongation: Tuple[float, float, float] = (1.0, 1.0, 1.0)


# channel roles: 0 ~ T1, 1 ~ T1c, 2 ~ T2, 3 ~ FLAIR; rows: white matter, gray matter, CSF
_TISSUE = np.array([
    [0.90, 0.85, 0.45, 0.50],
    [0.65, 0.65, 0.65, 0.60],
    [0.25, 0.25, 1.00, 0.15],
])
_CONTRAST = {
    2: np.array([-0.15, 0.0, 0.45, 0.6]),     # edema: bright on T2 / FLAIR
    1: np.array([-0.35, -0.25, 0.55, 0.3]),   # necrosis: dark on T1 / T1c
    4: np.array([-0.1, 0.75, 0.25, 0.35]),    # enhancing: bright on T1c
}


def random_tumor_spec(rng, dims):
    brain_r = (np.asarray(dims) - 1) / 2.0 * 0.8
    wt = rng.uniform(0.45, 0.6) * brain_r.min()
    tc = wt * rng.uniform(0.6, 0.8)
    ncr = tc * rng.uniform(0.3, 0.5)
    lim = np.maximum(brain_r - wt * 1.2 - 1, 0)
    center = tuple((np.asarray(dims) - 1) / 2.0 + rng.uniform(-1, 1, 3) * lim * 0.6)
    elong = tuple(rng.uniform(0.8, 1.2, 3))
    return TumorSpec(wt, tc, ncr, center, elong)


def _ellipsoid(grid, center, radii):
    d = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return d <= 1.0


def generate_phantom(seed, dims=(24, 24, 24), tumor_spec: Optional[TumorSpec] = None, noise=0.08, index=None):
    """Synthetic 4-channel MRI-like volume with nested tumor labels.

    The brain is an ellipsoid with zero background; the tumor is three nested
    ellipsoids (labels: 2 edema envelope, 4 enhancing shell, 1 necrotic
    center). Deterministic per ``(seed, index)``; ``index`` selects one case of
    a seeded collection. Returns ``(Volume, LabelMap)``.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ValueError(f"phantom dims must be at least 16 per axis, got {dims}")
    rng = substream(seed, "phantom") if index is None else substream(seed, "phantom", int(index))
    spec = tumor_spec if tumor_spec is not None else random_tumor_spec(rng, dims)
    grid = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    center_vol = (np.asarray(dims) - 1) / 2.0
    brain = _ellipsoid(grid, center_vol, center_vol * np.array([0.85, 0.8, 0.8]))

    labels = np.zeros(dims, dtype=np.uint8)
    if spec.wt_radius > 0:
        c = spec.center if spec.center is not None else tuple(center_vol)
        el = np.asarray(spec.elongation)
        wt = _ellipsoid(grid, c, spec.wt_radius * el)
        if np.any(wt & ~brain):
            raise ValueError("tumor extends outside the brain region")
        tc = wt & _ellipsoid(grid, c, max(spec.tc_radius, 1e-9) * el) if spec.tc_radius > 0 else np.zeros(dims, bool)
        ncr = tc & _ellipsoid(grid, c, max(spec.ncr_radius, 1e-9) * el) if spec.ncr_radius > 0 else np.zeros(dims, bool)
        labels[wt] = 2
        labels[tc] = 4
        labels[ncr] = 1

    # tissue: gray-matter rim, CSF ventricle at the center, white matter elsewhere
    radius = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center_vol, center_vol * np.array([0.85, 0.8, 0.8]))))
    tissue = np.zeros(dims, dtype=np.int64)
    tissue[radius > 0.75] = 1
    tissue[_ellipsoid(grid, center_vol, center_vol * np.array([0.2, 0.3, 0.15]))] = 2
    gain = rng.uniform(0.7, 1.2, size=4)
    bias = gaussian_filter(rng.standard_normal(dims), 4.0)
    bias = 1 + 0.1 * bias / max(np.abs(bias).max(), 1e-12)
    image = np.zeros((4,) + dims, dtype=np.float64)
    for ch in range(4):
        base = gaussian_filter(_TISSUE[tissue, ch], 0.7)
        contrast = np.zeros(dims)
        for lab, vec in _CONTRAST.items():
            contrast[labels == lab] = vec[ch] * gain[ch]
        img = bias * (base + contrast) + noise * rng.standard_normal(dims)
        image[ch] = np.where(brain, np.maximum(img, 1e-3), 0.0)
    return Volume(image.astype(np.float32)), LabelMap(labels)


# ---------------------------------------------------------------------------
# CSEG file format


def write_cseg(path, data, spacing=(1.0, 1.0, 1.0)):
    """Write a (C,D,H,W) float32 or a (D,H,W) uint8 array."""
    arr = np.asarray(data)
    if arr.dtype == np.uint8:
        code = 1
        if arr.ndim == 3:
            arr = arr[None]
    else:
        code = 0
        arr = arr.astype("<f4")
    if arr.ndim != 4:
        raise ValueError(f"CSEG data must be (C,D,H,W), got {arr.shape}")
    header = _HEADER.pack(CSEG_MAGIC, CSEG_VERSION, code, arr.shape[0], *arr.shape[1:], *spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_cseg(path):
    """Return ``(array, spacing)``; uint8 volumes come back as (D,H,W) when single-channel."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated CSEG header")
    magic, version, code, channels, d, h, w, *spacing = _HEADER.unpack_from(raw)
    if magic != CSEG_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CSEG_VERSION:
        raise ValueError(f"{path}: unsupported CSEG version {version}")
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = channels * d * h * w
    if len(raw) - _HEADER.size != count * dtype.itemsize:
        raise ValueError(f"{path}: payload size does not match header")
    arr = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(channels, d, h, w).copy()
    if code == 1 and channels == 1:
        arr = arr[0]
    return arr, tuple(spacing)


def save_volume(path, volume: Volume):
    write_cseg(path, volume.data, volume.spacing)


def load_volume(path) -> Volume:
    arr, spacing = read_cseg(path)
    return Volume(arr.astype(np.float32), spacing)


def save_labels(path, labels: LabelMap):
    write_cseg(path, labels.data, labels.spacing)


def load_labels(path) -> LabelMap:
    arr, spacing = read_cseg(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: label file must hold one uint8 channel")
    return LabelMap(arr, spacing)


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class Case:
    case_id: str
    image: Volume
    labels: Optional[LabelMap] = None


def write_dataset(directory, cases: Sequence[Case]):
    """Write cases as CSEG files plus ``manifest.jsonl`` (one record per case)."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for case in cases:
        rec = {"case_id": case.case_id, "image": f"{case.case_id}_image.cseg"}
        save_volume(os.path.join(directory, rec["image"]), case.image)
        if case.labels is not None:
            rec["labels"] = f"{case.case_id}_labels.cseg"
            save_labels(os.path.join(directory, rec["labels"]), case.labels)
        records.append(rec)
    with open(os.path.join(directory, "manifest.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def read_dataset(directory, case_ids=None):
    path = os.path.join(directory, "manifest.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.jsonl in {directory}; run gen-phantoms first")
    cases = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if case_ids is not None and rec["case_id"] not in case_ids:
                continue
            labels = load_labels(os.path.join(directory, rec["labels"])) if "labels" in rec else None
            cases.append(Case(rec["case_id"], load_volume(os.path.join(directory, rec["image"])), labels))
    return cases
