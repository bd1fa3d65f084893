"""Synthetic datasets, the ATWB tensor container and the binary PGM codec.

ATWB layout (all integers little-endian)::

    b"ATWB" | version u16 | entry count u32
    per entry:
        name length u16 | UTF-8 name | dtype tag u8 (0=f32, 1=f64, 2=u8)
        rank u8 | extents u64 * rank | row-major payload
"""

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptHeaderError, DuplicateNameError, PGMFormatError, TruncatedPayloadError
from .tensor import PrngState

MAGIC = b"ATWB"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}

MASK_THRESHOLD = 0.1  # mask = noiseless shape above this fraction of its peak


# ---------------------------------------------------------------------------
# container


def encode_container(entries):
    items = list(entries.items()) if isinstance(entries, dict) else list(entries)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateNameError(f"duplicate entry names: {dup}")
    out = [MAGIC, struct.pack("<HI", VERSION, len(items))]
    for name, array in items:
        array = np.asarray(array)
        tag = _TAGS.get(array.dtype)
        if tag is None:
            raise TypeError(f"entry {name!r}: unsupported dtype {array.dtype} (f32, f64, u8 only)")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or array.ndim > 0xFF:
            raise ValueError(f"entry {name!r}: name or rank too large")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", tag, array.ndim))
        out.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        out.append(np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes())
    return b"".join(out)


def decode_container(blob):
    blob = bytes(blob)
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CorruptHeaderError("not an ATWB container (bad magic or short header)")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CorruptHeaderError(f"unsupported ATWB version {version}")
    pos = 10
    entries = {}

    def need(n, what, entry):
        if pos + n > len(blob):
            raise TruncatedPayloadError(f"file truncated in {what} of entry {entry!r}", entry=entry)

    for index in range(count):
        label = f"#{index}"
        need(2, "name length", label)
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(name_len, "name", label)
        try:
            name = blob[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptHeaderError(f"entry {label}: name is not valid UTF-8") from None
        pos += name_len
        need(2, "dtype/rank", name)
        tag, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CorruptHeaderError(f"entry {name!r}: unknown dtype tag {tag}")
        need(8 * rank, "extents", name)
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        dtype = _DTYPES[tag]
        nbytes = math.prod(shape) * dtype.itemsize
        need(nbytes, "payload", name)
        if name in entries:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=pos).reshape(shape)
        entries[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(blob):
        raise CorruptHeaderError(f"{len(blob) - pos} trailing bytes after last entry")
    return entries


def save_container(entries, path):
    data = encode_container(entries)
    with open(path, "wb") as fh:
        fh.write(data)


def load_container(path):
    with open(path, "rb") as fh:
        return decode_container(fh.read())


# ---------------------------------------------------------------------------
# PGM


def encode_pgm(grid):
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise PGMFormatError(f"PGM needs a 2-D grid, got shape {grid.shape}")
    if grid.dtype != np.uint8:
        if grid.size and (grid.min() < 0 or grid.max() > 255 or not np.all(grid == np.round(grid))):
            raise PGMFormatError("PGM values must be integers in 0..255")
        grid = grid.astype(np.uint8)
    h, w = grid.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(grid).tobytes()


def decode_pgm(data):
    data = bytes(data)
    if data[:2] != b"P5":
        raise PGMFormatError("not a binary PGM (magic P5 expected)")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise PGMFormatError("PGM header truncated")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise PGMFormatError(f"unexpected byte {ch!r} in PGM header")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PGMFormatError("PGM header must end with a single whitespace byte")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise PGMFormatError(f"only maxval 255 is supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise PGMFormatError(f"invalid PGM size {w}x{h}")
    if len(data) - pos != w * h:
        raise PGMFormatError(f"PGM payload has {len(data) - pos} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w).copy()


def write_pgm(path, grid):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(grid))


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_names: tuple = ("blob", "ring")
    masks: np.ndarray = None  # [N, H, W] uint8 in {0, 1}
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def class_count(self):
        return len(self.class_names)

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(
            self.images[index],
            self.labels[index],
            self.class_names,
            None if self.masks is None else self.masks[index],
            dict(self.provenance),
        )

    def validate(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be N,C,H,W with one label per image")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range")
        if self.masks is not None:
            if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
                raise ValueError("masks must be N,H,W aligned with images")
            if not np.isin(self.masks, (0, 1)).all():
                raise ValueError("masks must be binary")


@dataclass
class SynthConfig:
    n: int = 2000
    size: int = 32
    channels: int = 1
    imbalance_ratio: float = 1.0  # class-0 count : class-1 count
    noise_amplitude: float = 0.05
    ring_radius: tuple = (6.0, 11.0)
    ring_thickness: tuple = (1.2, 2.2)
    blob_sigma: tuple = (2.5, 4.5)
    seed: int = 0

    def __post_init__(self):
        self.ring_radius = tuple(self.ring_radius)
        self.ring_thickness = tuple(self.ring_thickness)
        self.blob_sigma = tuple(self.blob_sigma)
        if self.imbalance_ratio <= 0:
            raise ValueError("imbalance_ratio must be > 0")
        if self.size % 8:
            raise ValueError(f"size must be divisible by 8, got {self.size}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 (grayscale) or 3 (RGB)")

    def class_counts(self):
        n1 = int(math.floor(self.n / (self.imbalance_ratio + 1.0)))
        n0 = self.n - n1
        if n0 <= 0 or n1 <= 0:
            raise ValueError(f"n={self.n} with ratio {self.imbalance_ratio} leaves a class empty ({n0}/{n1})")
        return n0, n1


_TINT = np.array([1.0, 0.8, 0.65])


def _render_shape(label, size, rng, cfg):
    """Noiseless shape in [0, 1] with peak 1, for one image."""
    cy, cx = rng.generator.uniform(0.35 * size, 0.65 * size, 2)
    theta = rng.generator.uniform(0.0, math.pi)
    aspect = rng.generator.uniform(0.75, 1.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / aspect
    r = np.sqrt(u * u + v * v)
    if label == 0:
        sigma = rng.generator.uniform(*cfg.blob_sigma)
        shape = np.exp(-(r**2) / (2 * sigma**2))
    else:
        radius = rng.generator.uniform(*cfg.ring_radius)
        thick = rng.generator.uniform(*cfg.ring_thickness)
        shape = np.exp(-((r - radius) ** 2) / (2 * thick**2))
    return shape / shape.max()


def generate_synthetic(config):
    """Blobs (class 0) and rings (class 1) with per-image salient masks.

    Image ``i`` draws only from ``PrngState(seed, i)``; the label order
    comes from ``PrngState(seed).child("labels")``.
    """
    n0, n1 = config.class_counts()
    labels = np.array([0] * n0 + [1] * n1, dtype=np.int64)
    labels = labels[PrngState(config.seed).child("labels").permutation(config.n)]
    s, c = config.size, config.channels
    images = np.empty((config.n, c, s, s), dtype=np.float32)
    masks = np.empty((config.n, s, s), dtype=np.uint8)
    for i, label in enumerate(labels):
        rng = PrngState(config.seed, i)
        shape = _render_shape(int(label), s, rng, config)
        background = rng.generator.uniform(0.05, 0.2)
        contrast = rng.generator.uniform(0.55, 0.8)
        tint = _TINT[:c] if c == 3 else np.ones(1)
        img = background + contrast * tint[:, None, None] * shape[None]
        img = img + config.noise_amplitude * rng.normal((c, s, s))
        images[i] = np.clip(img, 0.0, 1.0)
        masks[i] = shape > MASK_THRESHOLD
    provenance = {"generator": "advwb.synthetic/blob-ring", "config": asdict(config)}
    return Dataset(images, labels, ("blob", "ring"), masks, provenance)


def save_dataset(dataset, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_container({"images": dataset.images.astype(np.float32)}, d / "images.atwb")
    with open(d / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "class_name"])
        for i, label in enumerate(dataset.labels):
            w.writerow([i, int(label), dataset.class_names[int(label)]])
    if dataset.masks is not None:
        save_container({"masks": dataset.masks.astype(np.uint8)}, d / "masks.atwb")
    elif (d / "masks.atwb").exists():
        os.remove(d / "masks.atwb")
    meta = dict(dataset.provenance)
    meta["class_names"] = list(dataset.class_names)
    with open(d / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory):
    d = Path(directory)
    for name in ("images.atwb", "labels.csv", "provenance.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} missing; create the dataset with `advwb synth`")
    images = load_container(d / "images.atwb")["images"]
    with open(d / "labels.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    with open(d / "provenance.json", encoding="utf-8") as fh:
        provenance = json.load(fh)
    class_names = tuple(provenance.pop("class_names", ("blob", "ring")))
    masks = load_container(d / "masks.atwb")["masks"] if (d / "masks.atwb").exists() else None
    ds = Dataset(images, labels, class_names, masks, provenance)
    ds.validate()
    return ds
