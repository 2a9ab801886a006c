"""Datasets: synthetic generator, IDX files, input encoding and splits."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from comix.bcos import InputEncodingSpec
from comix.errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_COLOR_IMAGES_MAGIC = 0x00000804
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # n x H x W x C, values in [0, 1]
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.ndim != 4:
            raise ContractError(f"images must be n x H x W x C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise ContractError("dataset is empty")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ContractError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0:
            raise ContractError("labels must be non-negative")
        if not self.class_names:
            self.class_names = [str(c) for c in range(int(self.labels.max()) + 1)]
        elif self.labels.max() >= len(self.class_names):
            raise ContractError(f"label {self.labels.max()} out of range for {len(self.class_names)} classes")

    def __len__(self):
        return len(self.labels)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def input_spec(self) -> InputEncodingSpec:
        _, h, w, c = self.images.shape
        return InputEncodingSpec(h, w, c)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        prov = dict(self.provenance)
        prov["subset_of"] = len(self)
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names), prov)

    def encoded(self) -> np.ndarray:
        return encode_batch(self.images)

    def mean_image(self) -> np.ndarray:
        return self.images.mean(axis=0)


# ----------------------------------------------------------------- encoding


def encode_input(image) -> np.ndarray:
    """``[v, 1 - v]`` channel pairs per pixel, flattened row-major."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3:
        raise ContractError(f"expected an H x W x C image, got shape {image.shape}")
    return encode_batch(image[None])[0]


def encode_batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ContractError(f"expected n x H x W x C images, got shape {images.shape}")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ContractError("pixel values must lie in [0, 1] before encoding")
    return np.concatenate([images, 1.0 - images], axis=-1).reshape(len(images), -1)


def decode_input(x, spec: InputEncodingSpec) -> np.ndarray:
    """Invert encode_input by keeping the primal half of each channel group."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.flat_dim:
        raise ContractError(f"flat input has {x.shape[-1]} entries, expected {spec.flat_dim}")
    grid = x.reshape(*x.shape[:-1], spec.height, spec.width, spec.encoded_channels)
    return grid[..., : spec.raw_channels]


# ---------------------------------------------------------------- synthetic

CLASS_NAMES = ("disk", "cross", "stripes")


@dataclass
class SyntheticConfig:
    class_count: int = 3
    train_per_class: int = 200
    test_per_class: int = 100
    height: int = 16
    width: int = 16
    noise_sigma: float = 0.1
    background: float = 0.0
    foreground: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.class_count <= len(CLASS_NAMES):
            raise ContractError(f"class_count must be in [1, {len(CLASS_NAMES)}]")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ContractError("per-class counts must be >= 1")
        if min(self.height, self.width) < 8:
            raise ContractError("image size must be at least 8 x 8")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        for v in (self.background, self.foreground):
            if not 0 <= v <= 1:
                raise ContractError("intensity levels must lie in [0, 1]")

    @classmethod
    def from_file(cls, path) -> "SyntheticConfig":
        return cls(**read_key_values(path, cls))

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def read_key_values(path, target=None) -> dict:
    """Parse a ``key=value`` file; with a dataclass ``target`` values are typed."""
    types = {f.name: f.type for f in fields(target)} if target is not None else None
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if types is not None:
            if key not in types:
                raise ContractError(f"{path}:{lineno}: unknown key {key!r}")
            value = _coerce(value, types[key], key)
        out[key] = value
    return out


def _coerce(value: str, type_name, key: str):
    type_name = getattr(type_name, "__name__", type_name)
    try:
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
    except ValueError:
        raise ContractError(f"{key}: cannot parse {value!r} as {type_name}") from None
    return value


def _jitter(rng, lo, hi):
    return int(rng.integers(lo, hi + 1))


def _disk(img, rng, h, w, fg):
    r = rng.uniform(2.5, 4.0)
    cy = h / 2 + rng.uniform(-2.5, 2.5)
    cx = w / 2 + rng.uniform(-2.5, 2.5)
    yy, xx = np.mgrid[:h, :w]
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = fg


def _cross(img, rng, h, w, fg):
    arm = int(rng.integers(3, 5))
    cy = h // 2 + _jitter(rng, -2, 2)
    cx = w // 2 + _jitter(rng, -2, 2)
    img[cy - arm:cy + arm + 1, cx] = fg
    img[cy, cx - arm:cx + arm + 1] = fg


def _stripes(img, rng, h, w, fg):
    size = int(rng.integers(6, 9))
    period = int(rng.integers(2, 4))
    y0 = (h - size) // 2 + _jitter(rng, -2, 2)
    x0 = (w - size) // 2 + _jitter(rng, -2, 2)
    for y in range(y0, y0 + size, period):
        img[y, x0:x0 + size] = fg


def _frame(img, rng, h, w, fg):
    img[0, :] = img[-1, :] = fg
    img[:, 0] = img[:, -1] = fg


def _dot_pair(img, rng, h, w, fg):
    y = int(rng.integers(0, h))
    x = int(rng.integers(0, w - 4))
    img[y, x] = img[y, x + 3] = fg


def _corner_block(img, rng, h, w, fg):
    y = 0 if rng.random() < 0.5 else h - 3
    x = 0 if rng.random() < 0.5 else w - 3
    img[y:y + 3, x:x + 3] = fg


def _bottom_bar(img, rng, h, w, fg):
    length = int(rng.integers(5, w - 2))
    x = int(rng.integers(0, w - length + 1))
    img[h - 1, x:x + length] = fg


def _diagonal(img, rng, h, w, fg):
    length = int(rng.integers(4, 7))
    y = int(rng.integers(0, h - length + 1))
    x = int(rng.integers(0, w - length + 1))
    for k in range(length):
        img[y + k, x + k] = fg


def _hollow_square(img, rng, h, w, fg):
    s = int(rng.integers(3, 5))
    y = int(rng.integers(0, h - s + 1))
    x = int(rng.integers(0, w - s + 1))
    img[y, x:x + s] = img[y + s - 1, x:x + s] = fg
    img[y:y + s, x] = img[y:y + s, x + s - 1] = fg


# class -> (primary shape, two alternative secondary cues)
SHAPE_GRAMMAR = (
    (_disk, (_frame, _dot_pair)),
    (_cross, (_corner_block, _bottom_bar)),
    (_stripes, (_diagonal, _hollow_square)),
)


def _draw(cls: int, rng, cfg: SyntheticConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    img = np.full((h, w), cfg.background)
    primary, cues = SHAPE_GRAMMAR[cls]
    primary(img, rng, h, w, cfg.foreground)
    cues[int(rng.integers(0, 2))](img, rng, h, w, cfg.foreground)
    if cfg.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, img.shape), 0.0, 1.0)
    return img


def generate_synthetic(cfg: SyntheticConfig | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Return ``(train, test)``; both are a pure function of ``cfg``."""
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    out = []
    for per_class, part in ((cfg.train_per_class, "train"), (cfg.test_per_class, "test")):
        labels = np.repeat(np.arange(cfg.class_count), per_class)
        labels = labels[rng.permutation(len(labels))]
        images = np.stack([_draw(int(c), rng, cfg) for c in labels])[..., None]
        prov = {"generator": asdict(cfg), "part": part}
        out.append(LabeledDataset(images, labels, list(CLASS_NAMES[: cfg.class_count]), prov))
    return out[0], out[1]


# ---------------------------------------------------------------------- IDX


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"cannot read {path}: {e.strerror}") from e


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label pair; pixel bytes are scaled by 1/255."""
    blob = _read(images_path)
    if len(blob) < 4:
        raise FormatError(f"{images_path}: truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_COLOR_IMAGES_MAGIC:
        ndim = 4
    else:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise FormatError(f"{images_path}: truncated header")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    size = int(np.prod(dims))
    if len(blob) != head + size:
        raise FormatError(f"{images_path}: expected {head + size} bytes, found {len(blob)}")
    images = np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(dims) / 255.0

    lblob = _read(labels_path)
    if len(lblob) < 8:
        raise FormatError(f"{labels_path}: truncated header")
    lmagic, count = struct.unpack(">II", lblob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    if len(lblob) != 8 + count:
        raise FormatError(f"{labels_path}: expected {8 + count} bytes, found {len(lblob)}")
    if count != dims[0]:
        raise FormatError(f"image count {dims[0]} does not match label count {count}")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    prov = {"images": str(images_path), "labels": str(labels_path)}
    return LabeledDataset(images, labels, provenance=prov)


def save_idx(data: LabeledDataset, images_path, labels_path):
    """Write images quantized to bytes (round to nearest) and uint8 labels."""
    if data.labels.max() > 255:
        raise ContractError("IDX labels are single bytes; class ids must be <= 255")
    pixels = np.rint(data.images * 255.0).astype(np.uint8)
    if pixels.shape[-1] == 1:
        pixels = pixels[..., 0]
        magic = IDX_IMAGES_MAGIC
    else:
        magic = IDX_COLOR_IMAGES_MAGIC
    header = struct.pack(f">I{pixels.ndim}I", magic, *pixels.shape)
    Path(images_path).write_bytes(header + pixels.tobytes())
    lheader = struct.pack(">II", IDX_LABELS_MAGIC, len(data.labels))
    Path(labels_path).write_bytes(lheader + data.labels.astype(np.uint8).tobytes())


def idx_paths(prefix) -> tuple[Path, Path]:
    """File pair used by the CLI for a dataset called ``prefix``."""
    prefix = str(prefix)
    return Path(prefix + "-images.idx"), Path(prefix + "-labels.idx")


def save_dataset(data: LabeledDataset, prefix):
    save_idx(data, *idx_paths(prefix))


def load_dataset(prefix) -> LabeledDataset:
    return load_idx(*idx_paths(prefix))


# -------------------------------------------------------------------- split


def split(data: LabeledDataset, test_fraction: float, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffle-and-partition, stratified when every class has >= 2 samples.

    Per-class test counts use largest-remainder rounding so the total matches
    ``round(test_fraction * n)`` and each class is within 1 of its share.
    """
    if not 0 < test_fraction < 1:
        raise ContractError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(data)
    n_test = int(round(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise ContractError(f"split of {n} samples at {test_fraction} leaves one side empty")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(data.labels, return_counts=True)

    if counts.min() >= 2:
        share = test_fraction * counts
        take = np.floor(share).astype(int)
        short = n_test - take.sum()
        # stable order: largest remainder first, then lower class id
        for k in np.argsort(-(share - take), kind="stable")[:short]:
            take[k] += 1
        test_idx = []
        for c, t in zip(classes, take):
            members = np.flatnonzero(data.labels == c)
            test_idx.append(members[rng.permutation(len(members))[:t]])
        test_idx = np.sort(np.concatenate(test_idx))
    else:
        test_idx = np.sort(rng.permutation(n)[:n_test])
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return data.subset(train_idx), data.subset(test_idx)
