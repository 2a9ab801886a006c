"""B-cos layers, networks, their exact linear collapse, and SGD training.

A B-cos unit computes ``|x| |w| |cos(x, w)|^B sign(cos(x, w))``.  Rewritten as
``(w . x) |cos(x, w)|^(B-1)`` every layer is, for a fixed input, a linear map
whose rows are the weight rows rescaled by ``|cos|^(B-1)``.  Chaining those
per-layer matrices gives one input-dependent matrix that reproduces the
encoder output exactly.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from comix.errors import ContractError, FormatError, TrainingError, VersionMismatchError

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-9

MODEL_MAGIC = b"COMIX-BCOS"
MODEL_VERSION = 1


@dataclass(frozen=True)
class InputEncodingSpec:
    """Image geometry; pixels are flattened row-major with channels innermost."""

    height: int
    width: int
    raw_channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.raw_channels) < 1:
            raise ContractError(f"invalid input geometry {self}")

    @property
    def encoded_channels(self) -> int:
        return 2 * self.raw_channels

    @property
    def flat_dim(self) -> int:
        return self.height * self.width * self.encoded_channels


@dataclass
class BcosLayer:
    weights: np.ndarray
    exponent: float = 1.5

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ContractError(f"layer weights must be a non-empty matrix, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ContractError("layer weights must be finite")
        if not self.exponent > 0:
            raise ContractError(f"exponent B must be > 0, got {self.exponent}")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class BcosNetwork:
    encoder_layers: list[BcosLayer]
    head: BcosLayer
    input_spec: InputEncodingSpec
    rng_seed: int = 0

    def __post_init__(self):
        if not self.encoder_layers:
            raise ContractError("network needs at least one encoder layer")
        if self.encoder_layers[0].in_dim != self.input_spec.flat_dim:
            raise ContractError(
                f"first layer in_dim {self.encoder_layers[0].in_dim} != flat input dim {self.input_spec.flat_dim}"
            )
        chain = self.encoder_layers + [self.head]
        for k, (a, b) in enumerate(zip(chain, chain[1:])):
            if a.out_dim != b.in_dim:
                raise ContractError(f"layer {k} out_dim {a.out_dim} does not feed layer {k + 1} in_dim {b.in_dim}")

    @property
    def layers(self) -> list[BcosLayer]:
        return self.encoder_layers + [self.head]

    @property
    def embedding_dim(self) -> int:
        return self.encoder_layers[-1].out_dim

    @property
    def class_count(self) -> int:
        return self.head.out_dim

    @classmethod
    def random(
        cls,
        input_spec: InputEncodingSpec,
        class_count: int,
        hidden: tuple[int, ...] = (256, 64),
        exponent: float = 1.5,
        seed: int = 0,
    ) -> "BcosNetwork":
        """Gaussian init with every weight row scaled to unit norm."""
        rng = np.random.default_rng(seed)
        dims = [input_spec.flat_dim, *hidden, class_count]
        layers = []
        for d_in, d_out in zip(dims, dims[1:]):
            w = rng.standard_normal((d_out, d_in))
            w /= np.linalg.norm(w, axis=1, keepdims=True)
            layers.append(BcosLayer(w, exponent))
        return cls(layers[:-1], layers[-1], input_spec, seed)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class predictions (argmax of logits) for a batch of flat inputs."""
        _, logits = network_forward(self, x)
        return np.argmax(np.atleast_2d(logits), axis=1)


@dataclass
class DynamicLinearMap:
    """The encoder, frozen at one input, as a single ``C_L x D_in`` matrix.

    Row ``i`` is the attribution vector of embedding feature ``i``.
    """

    matrix: np.ndarray
    source_input_id: str = ""

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def row(self, i: int) -> np.ndarray:
        return self.matrix[i]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    max_epochs: int = 500
    exponent: float = 1.5
    dropout_rate: float = 0.5
    early_stop_patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ContractError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not 0 <= self.dropout_rate < 1:
            raise ContractError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0 <= self.validation_fraction < 1:
            raise ContractError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        if not self.exponent > 0:
            raise ContractError(f"exponent B must be > 0, got {self.exponent}")


def _check_dim(x: np.ndarray, expected: int, what: str = "input"):
    if x.shape[-1] != expected:
        raise ContractError(f"{what} dimension {x.shape[-1]} does not match expected {expected}")


def bcos_unit(x, w, B: float) -> float:
    """Single B-cos unit; returns exactly 0.0 when either vector is zero."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape != w.shape or x.ndim != 1:
        raise ContractError(f"x and w must be vectors of equal length, got {x.shape} and {w.shape}")
    if not B > 0:
        raise ContractError(f"B must be > 0, got {B}")
    nx = float(np.linalg.norm(x))
    nw = float(np.linalg.norm(w))
    if nx == 0.0 or nw == 0.0:
        return 0.0
    cos = float(x @ w) / (nx * nw)
    if cos == 0.0:
        return 0.0
    return nx * nw * abs(cos) ** B * math.copysign(1.0, cos)


def _cos_scale(a: np.ndarray, nx: np.ndarray, nw: np.ndarray, B: float) -> np.ndarray:
    """``|cos|^(B-1)`` for pre-activations ``a`` with given input/weight norms."""
    if B == 1:
        return np.ones_like(a)
    cos = np.abs(a) / (np.maximum(nx, NORM_FLOOR)[..., None] * np.maximum(nw, NORM_FLOOR))
    with np.errstate(divide="ignore"):
        s = cos ** (B - 1)
    # B < 1 blows up at cos = 0, where the unit output is 0 anyway
    s[cos == 0] = 0.0
    return s


def _layer_forward(layer: BcosLayer, X: np.ndarray):
    """Batched layer forward; returns the output plus what backprop needs.

    The contraction goes through einsum rather than BLAS so each output row is
    bit-identical whatever batch it was computed in.
    """
    W = layer.weights
    a = np.einsum("ni,oi->no", X, W)
    nx = np.linalg.norm(X, axis=-1)
    nw = np.linalg.norm(W, axis=1)
    s = _cos_scale(a, nx, nw, layer.exponent)
    return a * s, (X, s, nx, nw)


def _layer_backward(layer: BcosLayer, grad_out: np.ndarray, cache, y: np.ndarray):
    """Gradients of the loss w.r.t. weights and layer input.

    With ``y = sign(a) |a|^B (|w| |x|)^(1-B)``:
    ``dy/dw = B |cos|^(B-1) x + (1-B) y w / |w|^2`` and symmetrically for x.
    """
    X, s, nx, nw = cache
    W = layer.weights
    B = layer.exponent
    t = grad_out * (B * s)
    grad_w = t.T @ X
    grad_x = t @ W
    if B != 1:
        gy = grad_out * y
        grad_w += (1 - B) * (gy.sum(axis=0) / np.maximum(nw, NORM_FLOOR) ** 2)[:, None] * W
        grad_x += (1 - B) * (gy.sum(axis=1) / np.maximum(nx, NORM_FLOOR) ** 2)[:, None] * X
    return grad_w, grad_x


def layer_effective_matrix(layer: BcosLayer, x) -> np.ndarray:
    """Matrix ``M`` with ``M @ x`` equal to the layer output at this very ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("layer_effective_matrix expects a single input vector")
    _check_dim(x, layer.in_dim)
    nx = float(np.linalg.norm(x))
    if nx == 0.0:
        return np.zeros_like(layer.weights)
    a = layer.weights @ x
    nw = np.linalg.norm(layer.weights, axis=1)
    s = _cos_scale(a[None, :], np.array([nx]), nw, layer.exponent)[0]
    s[nw == 0] = 0.0
    return s[:, None] * layer.weights


def _as_batch(net: BcosNetwork, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2:
        raise ContractError(f"expected a flat input or a batch of flat inputs, got shape {x.shape}")
    _check_dim(X, net.input_spec.flat_dim)
    return X, single


def encode_embedding(net: BcosNetwork, x) -> np.ndarray:
    """Encoder output only (skips the head)."""
    X, single = _as_batch(net, x)
    h = X
    for layer in net.encoder_layers:
        h, _ = _layer_forward(layer, h)
    return h[0] if single else h


def network_forward(net: BcosNetwork, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(embedding, logits)`` for one flat input or a batch of them."""
    X, single = _as_batch(net, x)
    h = X
    for layer in net.encoder_layers:
        h, _ = _layer_forward(layer, h)
    logits, _ = _layer_forward(net.head, h)
    if single:
        return h[0], logits[0]
    return h, logits


def collapse(net: BcosNetwork, x, source_input_id: str = "") -> DynamicLinearMap:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("collapse expects a single flat input")
    _check_dim(x, net.input_spec.flat_dim)
    total = None
    h = x
    for layer in net.encoder_layers:
        m = layer_effective_matrix(layer, h)
        total = m if total is None else m @ total
        h, _ = _layer_forward(layer, h[None, :])
        h = h[0]
    return DynamicLinearMap(total, source_input_id)


# ----------------------------------------------------------------- training


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    # log(sigmoid(z)) = -softplus(-z), computed stably
    return float(np.mean(np.logaddexp(0.0, logits) - targets * logits))


def loss_and_grads(net: BcosNetwork, X: np.ndarray, targets: np.ndarray, dropout_mask=None):
    """Mean BCE loss and its gradient for every layer, in ``net.layers`` order.

    ``dropout_mask`` multiplies the embedding (already scaled for inverted
    dropout); pass ``None`` for the deterministic network.
    """
    caches, outs = [], []
    h = X
    for layer in net.encoder_layers:
        h, cache = _layer_forward(layer, h)
        caches.append(cache)
        outs.append(h)
    emb = h if dropout_mask is None else h * dropout_mask
    logits, head_cache = _layer_forward(net.head, emb)
    loss = bce_loss(logits, targets)

    g = (_sigmoid(logits) - targets) / logits.size
    grads = [None] * (len(net.encoder_layers) + 1)
    grads[-1], g = _layer_backward(net.head, g, head_cache, logits)
    if dropout_mask is not None:
        g = g * dropout_mask
    for k in range(len(net.encoder_layers) - 1, -1, -1):
        grads[k], g = _layer_backward(net.encoder_layers[k], g, caches[k], outs[k])
    return loss, grads


def _one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    t = np.zeros((len(labels), class_count))
    t[np.arange(len(labels)), labels] = 1.0
    return t


def train(net: BcosNetwork, data, cfg: TrainConfig | None = None):
    """Mini-batch SGD on mean BCE with early stopping on a held-out split.

    Returns a trained copy of ``net`` (the best validation checkpoint when a
    validation split exists) and the per-epoch loss history.
    """
    from comix.data import encode_batch

    cfg = cfg or TrainConfig()
    labels = np.asarray(data.labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= net.class_count:
        raise ContractError(f"labels must lie in [0, {net.class_count})")

    X = encode_batch(data.images)
    _check_dim(X, net.input_spec.flat_dim)
    T = _one_hot(labels, net.class_count)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n)) if n >= 10 else 0
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])

    net = copy.deepcopy(net)
    params = [layer.weights for layer in net.layers]
    best = [p.copy() for p in params]
    best_val = math.inf
    stale = 0
    keep = 1.0 - cfg.dropout_rate
    history = []

    for epoch in range(cfg.max_epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            mask = None
            if cfg.dropout_rate > 0:
                mask = (rng.random((len(idx), net.embedding_dim)) < keep) / keep
            loss, grads = loss_and_grads(net, X[idx], T[idx], mask)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            for p, g in zip(params, grads):
                p -= cfg.learning_rate * g
            losses.append(loss * len(idx))
        record = {"epoch": epoch, "train_loss": sum(losses) / len(train_idx)}

        if n_val:
            _, logits = network_forward(net, X[val_idx])
            val_loss = bce_loss(logits, T[val_idx])
            if not math.isfinite(val_loss):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
            record["val_loss"] = val_loss
            if val_loss < best_val:
                best_val, stale = val_loss, 0
                best = [p.copy() for p in params]
            else:
                stale += 1
        history.append(record)
        log.debug("epoch %d: %s", epoch, record)
        if n_val and stale >= cfg.early_stop_patience:
            log.info("early stop at epoch %d (best val loss %.5f)", epoch, best_val)
            break

    if n_val and history:
        for p, b in zip(params, best):
            p[...] = b
    return net, history


# ------------------------------------------------------------- persistence

_HEADER = struct.Struct("<I III q II")
_LAYER = struct.Struct("<IId")


def model_bytes(net: BcosNetwork) -> bytes:
    spec = net.input_spec
    parts = [
        MODEL_MAGIC,
        _HEADER.pack(MODEL_VERSION, spec.height, spec.width, spec.raw_channels,
                     net.rng_seed, len(net.layers), len(net.encoder_layers)),
    ]
    parts += [_LAYER.pack(l.out_dim, l.in_dim, l.exponent) for l in net.layers]
    parts += [l.weights.astype("<f8").tobytes(order="C") for l in net.layers]
    return b"".join(parts)


def model_hash(net: BcosNetwork) -> str:
    return hashlib.sha256(model_bytes(net)).hexdigest()


def save_model(net: BcosNetwork, path) -> str:
    """Write the model file; returns its sha256 digest."""
    blob = model_bytes(net)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def model_from_bytes(blob: bytes) -> BcosNetwork:
    if not blob.startswith(MODEL_MAGIC):
        raise VersionMismatchError("not a B-cos model file (bad magic)")
    off = len(MODEL_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise FormatError("model file truncated in header")
    version, h, w, c, seed, n_layers, n_enc = _HEADER.unpack_from(blob, off)
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"model format version {version}, expected {MODEL_VERSION}")
    if not 1 <= n_enc < n_layers:
        raise FormatError(f"bad layer counts {n_enc}/{n_layers}")
    off += _HEADER.size
    if len(blob) < off + n_layers * _LAYER.size:
        raise FormatError("model file truncated in layer headers")
    shapes = []
    for _ in range(n_layers):
        shapes.append(_LAYER.unpack_from(blob, off))
        off += _LAYER.size
    need = off + 8 * sum(o * i for o, i, _ in shapes)
    if len(blob) != need:
        raise FormatError(f"model payload is {len(blob)} bytes, expected {need}")
    layers = []
    for out_dim, in_dim, B in shapes:
        size = out_dim * in_dim
        w_arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(out_dim, in_dim)
        off += 8 * size
        layers.append(BcosLayer(w_arr.astype(np.float64), B))
    try:
        return BcosNetwork(layers[:n_enc], layers[n_enc], InputEncodingSpec(h, w, c), seed)
    except ContractError as e:
        raise FormatError(f"inconsistent model file: {e}") from e


def load_model(path) -> BcosNetwork:
    return model_from_bytes(Path(path).read_bytes())
