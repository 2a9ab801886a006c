"""Per-pixel attribution maps, dominant-feature segmentation, PPM rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from comix.bcos import InputEncodingSpec, collapse
from comix.cdf import feature_directions
from comix.data import encode_input
from comix.errors import ContractError

NONE_SEGMENT = -1
NORM_GUARD = 1e-12

# fixed qualitative palette for segment legends; "none" renders black
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
)


@dataclass
class AttributionMap:
    values: np.ndarray  # H x W
    feature_index: int
    source: str = "test"


@dataclass
class SegmentationMap:
    labels: np.ndarray  # H x W feature indices, NONE_SEGMENT where nothing contributes
    legend: dict[int, tuple[int, int, int]] = field(default_factory=dict)


def attribution_map(row, x, spec: InputEncodingSpec, feature_index: int = -1, source: str = "test") -> AttributionMap:
    """Contribution of every pixel to one embedding feature.

    ``map[p] = sum_c row[p, c] * x[p, c]`` so the map sums to ``row . x``.
    """
    row = np.asarray(row, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if row.shape != (spec.flat_dim,) or x.shape != (spec.flat_dim,):
        raise ContractError(f"row {row.shape} and input {x.shape} must both have {spec.flat_dim} entries")
    contrib = (row * x).reshape(spec.height, spec.width, spec.encoded_channels)
    return AttributionMap(contrib.sum(axis=-1), feature_index, source)


def segment_dominant(maps: list[AttributionMap]) -> SegmentationMap:
    """Label every pixel with the feature of largest positive contribution.

    Ties go to the lower feature index; pixels where no map is positive get
    ``NONE_SEGMENT``.
    """
    if not maps:
        raise ContractError("need at least one attribution map")
    shape = maps[0].values.shape
    if any(m.values.shape != shape for m in maps):
        raise ContractError("attribution maps differ in size")
    maps = sorted(maps, key=lambda m: m.feature_index)
    stack = np.stack([m.values for m in maps])
    feats = np.array([m.feature_index for m in maps])
    labels = feats[np.argmax(stack, axis=0)]
    labels[stack.max(axis=0) <= 0] = NONE_SEGMENT
    legend = {int(f): PALETTE[k % len(PALETTE)] for k, f in enumerate(feats)}
    return SegmentationMap(labels, legend)


def cdf_maps(net, cdfs, x, cls: int, M: int | None = None) -> list[AttributionMap]:
    """Contribution maps of the class-defining features of ``cls`` for encoded ``x``."""
    W = collapse(net, x).matrix
    return [attribution_map(W[f], x, net.input_spec, f) for f in cdfs.indices(cls, M)]


def class_evidence_map(net, bank, cdfs, x, cls: int, M: int | None = None) -> AttributionMap:
    """Sum of the CDF contribution maps of ``cls``, each signed by its class direction.

    Used to order pixels for insertion/deletion and average drop.
    """
    maps = cdf_maps(net, cdfs, x, cls, M)
    signs = feature_directions(bank, cls, [m.feature_index for m in maps])
    total = sum(s * m.values for s, m in zip(signs, maps))
    return AttributionMap(total, -1, "evidence")


# ----------------------------------------------------------------- rendering


def write_ppm(path, rgb: np.ndarray):
    """Binary P6 with 8-bit channels."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ContractError(f"PPM needs an H x W x 3 uint8 array, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P6" or len(parts) < 5:
        raise ContractError(f"{path} is not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def _upscale(img: np.ndarray, scale: int) -> np.ndarray:
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def image_to_rgb(image: np.ndarray, scale: int = 1) -> np.ndarray:
    """Raw ``H x W x C`` image in [0, 1] to 8-bit RGB (gray when single-channel)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[2] == 3:
        rgb = image
    else:
        rgb = np.repeat(image[..., :1], 3, axis=2)
    return _upscale(np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8), scale)


def diverging_rgb(values: np.ndarray, vmax: float, scale: int = 1) -> np.ndarray:
    """Blue (negative) to white (zero) to red (positive), symmetric around 0."""
    v = np.clip(np.asarray(values, dtype=np.float64) / max(vmax, NORM_GUARD), -1.0, 1.0)
    pos, neg = np.clip(v, 0, 1), np.clip(-v, 0, 1)
    r = 1.0 - neg
    g = 1.0 - pos - neg
    b = 1.0 - pos
    rgb = np.rint(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
    return _upscale(rgb, scale)


def segmentation_rgb(seg: SegmentationMap, scale: int = 1) -> np.ndarray:
    rgb = np.zeros(seg.labels.shape + (3,), dtype=np.uint8)
    for f, color in seg.legend.items():
        rgb[seg.labels == f] = color
    return _upscale(rgb, scale)


def render_panel(panel, dataset, out_dir, test_image, scale: int = 8) -> list[Path]:
    """Write the four images of every panel pair plus ``index.tsv``.

    Per pair: test image, test heatmap, train heatmap, train image.  Both
    heatmaps of a pair share one normalisation, ``max |value|`` over the pair.
    Returns the written image paths in index order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = dataset.input_spec
    x = encode_input(test_image)
    test_rgb = image_to_rgb(test_image, scale)
    rows, paths = [], []
    for e in panel.entries:
        train_image = dataset.images[e.train_sample_ref]
        test_map = attribution_map(e.test_row, x, spec).values
        train_map = attribution_map(e.train_row, encode_input(train_image), spec).values
        vmax = max(np.abs(test_map).max(), np.abs(train_map).max())
        stem = f"f{e.feature_index:03d}_r{e.rank}"
        images = (
            ("test_image", test_rgb),
            ("test_attribution", diverging_rgb(test_map, vmax, scale)),
            ("train_attribution", diverging_rgb(train_map, vmax, scale)),
            ("train_image", image_to_rgb(train_image, scale)),
        )
        for role, rgb in images:
            path = out / f"{stem}_{role}.ppm"
            write_ppm(path, rgb)
            rows.append(f"{role}\t{e.feature_index}\t{e.rank}\t{path.name}\n")
            paths.append(path)
    (out / "index.tsv").write_text("".join(rows))
    return paths


def render_segmentation(seg: SegmentationMap, path, scale: int = 8) -> Path:
    """Write the segmentation as PPM and its legend as ``<path>.legend.tsv``."""
    path = Path(path)
    write_ppm(path, segmentation_rgb(seg, scale))
    lines = [f"{f}\t{r},{g},{b}\n" for f, (r, g, b) in sorted(seg.legend.items())]
    lines.append(f"{NONE_SEGMENT}\t0,0,0\n")
    Path(str(path) + ".legend.tsv").write_text("".join(lines))
    return path
