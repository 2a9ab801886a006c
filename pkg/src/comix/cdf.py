"""Feature bank over a reference set and class-defining feature selection.

Each class gets the ``M`` embedding features whose values carry the most
mutual information about the one-vs-rest indicator of that class.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from comix.bcos import BcosNetwork, encode_embedding, model_hash
from comix.data import encode_batch
from comix.errors import ContractError, FormatError, HashMismatchError, VersionMismatchError

BANK_MAGIC = b"COMIX-BANK"
BANK_VERSION = 1
CDF_HEADER = "# comix-cdf v1"
DEFAULT_BINS = 16


@dataclass
class FeatureBank:
    embeddings: np.ndarray  # n x C_L
    labels: np.ndarray
    sample_refs: np.ndarray
    source_model_hash: str
    class_count: int

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_refs = np.asarray(self.sample_refs, dtype=np.int64)
        n = len(self.labels)
        if n < 1:
            raise ContractError("feature bank is empty")
        if self.embeddings.ndim != 2 or len(self.embeddings) != n or len(self.sample_refs) != n:
            raise ContractError("bank embeddings, labels and sample refs disagree in length")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ContractError(f"bank labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.embeddings)):
            raise ContractError("bank embeddings must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.embeddings.shape[1]

    def row_of(self, sample_ref: int) -> int:
        hits = np.flatnonzero(self.sample_refs == sample_ref)
        if not len(hits):
            raise KeyError(f"sample {sample_ref} is not in the bank")
        return int(hits[0])


@dataclass
class CdfTable:
    """Per class, the top-M ``(feature_index, mi_nats)`` pairs, best first."""

    features: dict[int, list[tuple[int, float]]]
    bins: int
    source_model_hash: str = ""

    def __post_init__(self):
        for c, entries in self.features.items():
            idx = [f for f, _ in entries]
            if len(set(idx)) != len(idx):
                raise ContractError(f"class {c}: duplicate feature indices")
            scores = [s for _, s in entries]
            if any(s < 0 for s in scores) or any(a < b for a, b in zip(scores, scores[1:])):
                raise ContractError(f"class {c}: MI scores must be non-negative and non-increasing")

    @property
    def M(self) -> int:
        return min(len(v) for v in self.features.values())

    def indices(self, cls: int, M: int | None = None) -> list[int]:
        if cls not in self.features:
            raise ContractError(f"class {cls} has no class-defining features in the table")
        entries = self.features[cls]
        if M is not None:
            if not 1 <= M <= len(entries):
                raise ContractError(f"M={M} outside [1, {len(entries)}] available for class {cls}")
            entries = entries[:M]
        return [f for f, _ in entries]


def build_feature_bank(net: BcosNetwork, data, sample_refs=None) -> FeatureBank:
    """Embed every reference sample with the trained encoder."""
    if len(data.labels) == 0:
        raise ContractError("cannot build a bank from an empty dataset")
    if data.input_spec != net.input_spec:
        raise ContractError(f"dataset geometry {data.input_spec} does not match model {net.input_spec}")
    emb = encode_embedding(net, encode_batch(data.images))
    refs = np.arange(len(data.labels)) if sample_refs is None else sample_refs
    return FeatureBank(emb, data.labels, refs, model_hash(net), net.class_count)


# --------------------------------------------------------- mutual information


def quantile_bins(values, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Cell index per value; edges are sample quantiles, duplicate edges merged.

    Edges are actual sample values (inverted-CDF quantiles), so any strictly
    increasing rescaling of ``values`` yields the same cells.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("cannot bin an empty sample")
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    edges = np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1], method="inverted_cdf")
    # edges are sample values, so cells are closed on the right: (e_{k-1}, e_k]
    return np.searchsorted(np.unique(edges), values, side="left")


def discrete_mutual_information(a, b) -> float:
    """Plug-in mutual information (nats) between two discrete sequences."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("sequences must be 1-D and of equal length")
    n = len(a)
    if n == 0:
        raise ContractError("mutual information of an empty sample")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    return _mi_from_counts(joint, n)


def _mi_from_counts(joint: np.ndarray, n: int) -> float:
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    terms = joint[nz] * np.log(joint[nz] * n / (pa @ pb)[nz])
    # rounding can leave a -1e-17 residue on independent data
    return max(float(terms.sum()) / n, 0.0)


def mutual_information(values, is_class, bins: int = DEFAULT_BINS) -> float:
    """MI between quantile-binned ``values`` and a boolean class indicator."""
    cells = quantile_bins(values, bins)
    is_class = np.asarray(is_class, dtype=bool)
    if is_class.shape != cells.shape:
        raise ContractError("values and is_class must have the same length")
    return discrete_mutual_information(cells, is_class)


def select_cdfs(bank: FeatureBank, M: int, bins: int = DEFAULT_BINS) -> CdfTable:
    """Rank every feature column per class by MI, keep the top ``M``.

    Ties go to the lower feature index.
    """
    C_L = bank.feature_dim
    if not 1 <= M <= C_L:
        raise ContractError(f"M must lie in [1, {C_L}], got {M}")
    cells = [quantile_bins(bank.embeddings[:, j], bins) for j in range(C_L)]
    table = {}
    for c in range(bank.class_count):
        indicator = bank.labels == c
        scores = np.array([discrete_mutual_information(cells[j], indicator) for j in range(C_L)])
        order = np.lexsort((np.arange(C_L), -scores))[:M]
        table[c] = [(int(j), float(scores[j])) for j in order]
    return CdfTable(table, bins, bank.source_model_hash)


def feature_directions(bank: FeatureBank, cls: int, features) -> np.ndarray:
    """+1 where a feature runs higher on class ``cls`` than on the rest, else -1.

    MI ranks features regardless of sign; this recovers which way each one
    points so contribution maps can be read as evidence for the class.
    """
    features = np.asarray(features, dtype=np.int64)
    inside = bank.labels == cls
    if inside.all() or not inside.any():
        return np.ones(len(features))
    gap = bank.embeddings[inside][:, features].mean(axis=0) - bank.embeddings[~inside][:, features].mean(axis=0)
    return np.where(gap >= 0, 1.0, -1.0)


# ------------------------------------------------------------- persistence

_BANK_HEADER = struct.Struct("<IQII32s")


def bank_bytes(bank: FeatureBank) -> bytes:
    head = _BANK_HEADER.pack(BANK_VERSION, len(bank), bank.feature_dim, bank.class_count,
                             bytes.fromhex(bank.source_model_hash))
    return b"".join([
        BANK_MAGIC,
        head,
        bank.embeddings.astype("<f8").tobytes(),
        bank.labels.astype("<i8").tobytes(),
        bank.sample_refs.astype("<i8").tobytes(),
    ])


def save_bank(bank: FeatureBank, path) -> str:
    blob = bank_bytes(bank)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def _check_hash(found: str, expected: str | None, what: str):
    if expected is not None and found != expected:
        raise HashMismatchError(f"{what} was built from model {found[:12]}, not {expected[:12]}")


def load_bank(path, expected_model_hash: str | None = None) -> FeatureBank:
    blob = Path(path).read_bytes()
    if not blob.startswith(BANK_MAGIC):
        raise FormatError(f"{path}: not a feature bank file")
    off = len(BANK_MAGIC)
    if len(blob) < off + _BANK_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    version, n, d, k, digest = _BANK_HEADER.unpack_from(blob, off)
    if version != BANK_VERSION:
        raise VersionMismatchError(f"{path}: bank version {version}, expected {BANK_VERSION}")
    off += _BANK_HEADER.size
    need = off + 8 * (n * d + 2 * n)
    if len(blob) != need:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {need}")
    emb = np.frombuffer(blob, "<f8", n * d, off).reshape(n, d).astype(np.float64)
    off += 8 * n * d
    labels = np.frombuffer(blob, "<i8", n, off).astype(np.int64)
    refs = np.frombuffer(blob, "<i8", n, off + 8 * n).astype(np.int64)
    _check_hash(digest.hex(), expected_model_hash, "bank")
    try:
        return FeatureBank(emb, labels, refs, digest.hex(), k)
    except ContractError as e:
        raise FormatError(f"{path}: {e}") from e


def cdf_table_text(table: CdfTable) -> str:
    lines = [CDF_HEADER, f"# model_hash={table.source_model_hash}", f"# bins={table.bins}"]
    for c in sorted(table.features):
        pairs = " ".join(f"{f}:{s!r}" for f, s in table.features[c])
        lines.append(f"{c} {pairs}".rstrip())
    return "\n".join(lines) + "\n"


def save_cdf_table(table: CdfTable, path):
    Path(path).write_text(cdf_table_text(table))


def load_cdf_table(path, expected_model_hash: str | None = None) -> CdfTable:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != CDF_HEADER:
        raise FormatError(f"{path}: not a CDF table")
    meta, features = {}, {}
    try:
        for line in lines[1:]:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line.strip():
                cls, *pairs = line.split()
                features[int(cls)] = [(int(f), float(s)) for f, s in (p.split(":") for p in pairs)]
        bins = int(meta["bins"])
    except (ValueError, KeyError) as e:
        raise FormatError(f"{path}: malformed CDF table ({e})") from e
    if not features:
        raise FormatError(f"{path}: CDF table lists no classes")
    found = meta.get("model_hash", "")
    _check_hash(found, expected_model_hash, "CDF table")
    try:
        return CdfTable(features, bins, found)
    except ContractError as e:
        raise FormatError(f"{path}: {e}") from e
