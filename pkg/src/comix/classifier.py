"""Prototype-voting classifier over a feature bank, with explanation panels.

Inference for one input:

1. embed it with the B-cos encoder;
2. take the label of its nearest bank row as a pseudo-label;
3. look up the class-defining features (CDFs) of that pseudo-label;
4. for every CDF, the K bank rows closest *on that single feature* vote with
   their labels;
5. the prediction is the mode of the ``M x K`` votes, and the explanation
   pairs the input's attribution row for each CDF with the same row of each
   voting training sample.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from comix.bcos import BcosNetwork, collapse, encode_embedding
from comix.cdf import CdfTable, FeatureBank
from comix.data import encode_input
from comix.errors import ContractError, HashMismatchError

QUERY_CHUNK = 128


@dataclass(frozen=True)
class Vote:
    feature_index: int
    neighbor_rank: int
    train_sample_ref: int
    label: int
    scalar_distance: float


@dataclass
class PredictionRecord:
    pseudo_label: int
    votes: list[list[Vote]]  # one row per CDF, K votes each in rank order
    aggregated_label: int
    tie_broken: bool
    input_hash: str = ""

    @property
    def vote_labels(self) -> list[int]:
        return [v.label for row in self.votes for v in row]

    def vote_share(self, cls: int) -> float:
        labels = self.vote_labels
        return labels.count(cls) / len(labels)

    def to_dict(self) -> dict:
        return {
            "pseudo_label": self.pseudo_label,
            "aggregated_label": self.aggregated_label,
            "tie_broken": self.tie_broken,
            "input_hash": self.input_hash,
            "votes": [
                [
                    {
                        "feature": v.feature_index,
                        "rank": v.neighbor_rank,
                        "sample": v.train_sample_ref,
                        "label": v.label,
                        "distance": v.scalar_distance,
                    }
                    for v in row
                ]
                for row in self.votes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        votes = [
            [Vote(v["feature"], v["rank"], v["sample"], v["label"], v["distance"]) for v in row]
            for row in d["votes"]
        ]
        return cls(d["pseudo_label"], votes, d["aggregated_label"], d["tie_broken"], d.get("input_hash", ""))


@dataclass
class PanelEntry:
    feature_index: int
    rank: int
    test_row: np.ndarray
    train_row: np.ndarray
    train_sample_ref: int
    label: int


@dataclass
class ExplanationPanel:
    entries: list[PanelEntry]
    target_class: int
    factual: bool = True
    input_hash: str = ""
    record: PredictionRecord | None = field(default=None, repr=False)

    @property
    def sample_refs(self) -> list[int]:
        return [e.train_sample_ref for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "target_class": self.target_class,
            "factual": self.factual,
            "input_hash": self.input_hash,
            "entries": [
                {"feature": e.feature_index, "rank": e.rank, "sample": e.train_sample_ref, "label": e.label}
                for e in self.entries
            ],
        }


def input_hash(x) -> str:
    return hashlib.sha256(np.asarray(x, dtype="<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------- steps 2-4


def _pseudo_labels_batch(bank: FeatureBank, F: np.ndarray) -> np.ndarray:
    rows = np.empty(len(F), dtype=np.int64)
    for s in range(0, len(F), QUERY_CHUNK):
        chunk = F[s:s + QUERY_CHUNK]
        d2 = ((bank.embeddings[None, :, :] - chunk[:, None, :]) ** 2).sum(axis=-1)
        rows[s:s + QUERY_CHUNK] = np.argmin(d2, axis=1)  # first minimum = lowest row
    return rows


def nearest_bank_row(bank: FeatureBank, f_x) -> int:
    f_x = np.asarray(f_x, dtype=np.float64)
    if f_x.shape != (bank.feature_dim,):
        raise ContractError(f"query has shape {f_x.shape}, bank features are {bank.feature_dim}-d")
    return int(_pseudo_labels_batch(bank, f_x[None])[0])


def pseudo_label(bank: FeatureBank, f_x) -> int:
    """Label of the bank row nearest to ``f_x`` in full-embedding l2."""
    return int(bank.labels[nearest_bank_row(bank, f_x)])


def _neighbor_rows(bank: FeatureBank, F: np.ndarray, feats: np.ndarray, K: int, joint: bool) -> np.ndarray:
    """``(n, M, K)`` bank rows ranked by per-feature distance (stable on ties)."""
    out = np.empty((len(F), feats.shape[1], K), dtype=np.int64)
    for s in range(0, len(F), QUERY_CHUNK):
        f = feats[s:s + QUERY_CHUNK]
        q = np.take_along_axis(F[s:s + QUERY_CHUNK], f, axis=1)  # n x M
        ref = bank.embeddings[:, f].transpose(1, 2, 0)  # n x M x N
        diff = np.abs(ref - q[..., None])
        if joint:
            d = np.sqrt((diff**2).sum(axis=1, keepdims=True))
            order = np.argsort(d, axis=-1, kind="stable")[..., :K]
            out[s:s + QUERY_CHUNK] = np.broadcast_to(order, (len(f), f.shape[1], K))
        else:
            out[s:s + QUERY_CHUNK] = np.argsort(diff, axis=-1, kind="stable")[..., :K]
    return out


def _check_K(bank: FeatureBank, K: int):
    if not 1 <= K <= len(bank):
        raise ContractError(f"K must lie in [1, {len(bank)}] (bank size), got {K}")


def per_feature_predict(
    bank: FeatureBank,
    cdfs: CdfTable,
    f_x,
    pseudo: int,
    K: int,
    M: int | None = None,
    joint_distance: bool = False,
) -> list[list[Vote]]:
    """K nearest bank rows per class-defining feature of ``pseudo``.

    Distances are scalar ``|f_x[f] - bank[:, f]|``.  ``joint_distance`` ranks
    by one l2 over the whole CDF subset instead (every row then holds the same
    neighbours).
    """
    _check_K(bank, K)
    f_x = np.asarray(f_x, dtype=np.float64)
    feats = np.array([cdfs.indices(pseudo, M)])
    rows = _neighbor_rows(bank, f_x[None], feats, K, joint_distance)[0]
    return _votes(bank, f_x, feats[0], rows)


def _votes(bank: FeatureBank, f_x: np.ndarray, feats, rows) -> list[list[Vote]]:
    grid = []
    for f, ranked in zip(feats, rows):
        grid.append([
            Vote(int(f), k, int(bank.sample_refs[r]), int(bank.labels[r]),
                 float(abs(f_x[f] - bank.embeddings[r, f])))
            for k, r in enumerate(ranked)
        ])
    return grid


def aggregate(votes: list[list[Vote]], pseudo: int) -> tuple[int, bool]:
    """Mode of the vote labels, with deterministic tie-breaking.

    Frequency ties go to the pseudo-label if it is tied, else to the tied
    label with the smallest summed distance, else to the smallest class id.
    """
    flat = [v for row in votes for v in row]
    if not flat:
        raise ContractError("cannot aggregate an empty vote grid")
    counts = Counter(v.label for v in flat)
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if len(tied) == 1:
        return tied[0], False
    if pseudo in tied:
        return pseudo, True
    dist = {c: sum(v.scalar_distance for v in flat if v.label == c) for c in tied}
    best = min(dist.values())
    return min(c for c in tied if dist[c] == best), True


# ---------------------------------------------------------------- pipeline


def classify(
    net: BcosNetwork,
    bank: FeatureBank,
    cdfs: CdfTable,
    x,
    M: int | None = None,
    K: int = 3,
    joint_distance: bool = False,
) -> PredictionRecord:
    """Classify one encoded flat input (see ``comix.data.encode_input``)."""
    x = np.asarray(x, dtype=np.float64)
    (record,) = classify_batch(net, bank, cdfs, x[None], M, K, joint_distance)
    return record


def classify_image(net, bank, cdfs, image, M=None, K=3, joint_distance=False) -> PredictionRecord:
    """Classify one raw ``H x W x C`` image."""
    return classify(net, bank, cdfs, encode_input(image), M, K, joint_distance)


def _check_tables(net: BcosNetwork, bank: FeatureBank, cdfs: CdfTable):
    if bank.feature_dim != net.embedding_dim:
        raise ContractError(f"bank has {bank.feature_dim} features, model embeds to {net.embedding_dim}")
    if cdfs.source_model_hash and cdfs.source_model_hash != bank.source_model_hash:
        raise HashMismatchError("CDF table and feature bank come from different models")


def _vote_rows_batch(net, bank, cdfs, X, M, K, joint_distance, forced_class=None):
    _check_tables(net, bank, cdfs)
    _check_K(bank, K)
    F = encode_embedding(net, X)
    if forced_class is None:
        pseudo = bank.labels[_pseudo_labels_batch(bank, F)]
    else:
        pseudo = np.full(len(F), forced_class, dtype=np.int64)
    feats = np.array([cdfs.indices(int(c), M) for c in pseudo], dtype=np.int64).reshape(len(F), -1)
    rows = _neighbor_rows(bank, F, feats, K, joint_distance)
    return F, pseudo, feats, rows


def classify_batch(net, bank, cdfs, X, M=None, K=3, joint_distance=False) -> list[PredictionRecord]:
    """Full records for a batch of encoded inputs; identical to one-at-a-time."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    F, pseudo, feats, rows = _vote_rows_batch(net, bank, cdfs, X, M, K, joint_distance)
    records = []
    for i in range(len(X)):
        votes = _votes(bank, F[i], feats[i], rows[i])
        label, tie = aggregate(votes, int(pseudo[i]))
        records.append(PredictionRecord(int(pseudo[i]), votes, label, tie, input_hash(X[i])))
    return records


def vote_shares(net, bank, cdfs, X, target, M=None, K=3, joint_distance=False) -> np.ndarray:
    """Fraction of the ``M x K`` votes going to ``target``, per encoded input.

    ``target`` may be a scalar or one class per input.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _, _, _, rows = _vote_rows_batch(net, bank, cdfs, X, M, K, joint_distance)
    labels = bank.labels[rows]
    target = np.broadcast_to(np.asarray(target), (len(X),))
    return (labels == target[:, None, None]).mean(axis=(1, 2))


# ------------------------------------------------------------------ step 5


class _RowCache:
    """Attribution matrices of reference samples, computed on first use."""

    def __init__(self, net, dataset):
        self.net = net
        self.dataset = dataset
        self._maps = {}

    def __call__(self, sample_ref: int) -> np.ndarray:
        if sample_ref not in self._maps:
            if not 0 <= sample_ref < len(self.dataset):
                raise ContractError(f"sample {sample_ref} is not in the reference dataset")
            x = encode_input(self.dataset.images[sample_ref])
            self._maps[sample_ref] = collapse(self.net, x).matrix
        return self._maps[sample_ref]


def _panel(net, dataset, x, votes, target, factual, record) -> ExplanationPanel:
    test_map = collapse(net, x).matrix
    rows = _RowCache(net, dataset)
    entries = []
    for row in votes:
        for v in row:
            entries.append(PanelEntry(
                v.feature_index, v.neighbor_rank,
                test_map[v.feature_index].copy(), rows(v.train_sample_ref)[v.feature_index].copy(),
                v.train_sample_ref, v.label,
            ))
    return ExplanationPanel(entries, target, factual, input_hash(x), record)


def explain(net: BcosNetwork, bank: FeatureBank, dataset, record: PredictionRecord, x) -> ExplanationPanel:
    """Pair the input's attribution rows with those of every voting neighbour.

    ``x`` is the encoded input the record was produced from.
    """
    x = np.asarray(x, dtype=np.float64)
    if record.input_hash and record.input_hash != input_hash(x):
        raise HashMismatchError("prediction record was produced from a different input")
    return _panel(net, dataset, x, record.votes, record.aggregated_label, True, record)


def counterfactual_explain(
    net: BcosNetwork,
    bank: FeatureBank,
    dataset,
    cdfs: CdfTable,
    x,
    target: int,
    K: int = 3,
    M: int | None = None,
    joint_distance: bool = False,
) -> ExplanationPanel:
    """Explanation as if ``target`` had been the pseudo-label."""
    if not 0 <= target < bank.class_count or target not in cdfs.features:
        raise ContractError(f"unknown class {target}")
    x = np.asarray(x, dtype=np.float64)
    F, _, feats, rows = _vote_rows_batch(net, bank, cdfs, x[None], M, K, joint_distance, forced_class=target)
    votes = _votes(bank, F[0], feats[0], rows[0])
    label, tie = aggregate(votes, target)
    record = PredictionRecord(target, votes, label, tie, input_hash(x))
    return _panel(net, dataset, x, votes, target, False, record)


def document(record: PredictionRecord, panel: ExplanationPanel | None = None, **extra) -> str:
    """One classification as a JSON document (the CLI's machine output)."""
    doc = {"record": record.to_dict()}
    if panel is not None:
        doc["panel"] = panel.to_dict()
    doc.update(extra)
    return json.dumps(doc, sort_keys=True)
