"""``comix`` command line: data generation, training, banks, inference, evaluation.

Every command accepts ``--config FILE`` with ``key=value`` lines named like
the long flags (``M=8``, ``lr=0.01``...); flags given on the command line win.
Errors go to stderr as one JSON line ``{"error": code, "message": ...}`` and
map to distinct exit codes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from comix import attrib, metrics
from comix.bcos import BcosNetwork, TrainConfig, encode_embedding, load_model, model_hash, save_model, train
from comix.cdf import DEFAULT_BINS, build_feature_bank, load_bank, load_cdf_table, save_bank, save_cdf_table, select_cdfs
from comix.classifier import classify_batch, counterfactual_explain, document, explain
from comix.data import (
    SyntheticConfig,
    encode_batch,
    generate_synthetic,
    idx_paths,
    load_dataset,
    read_key_values,
    save_dataset,
)
from comix.errors import ComixError, ContractError

log = logging.getLogger("comix")

EXIT_CODES = {
    "error": 1,
    "missing_file": 3,
    "hash_mismatch": 4,
    "invalid_value": 5,
    "format_error": 6,
    "version_mismatch": 6,
    "training_failed": 7,
}

DEFAULTS = {
    "M": 8,
    "K": 3,
    "bins": DEFAULT_BINS,
    "steps": 100,
    "seed": 0,
    "fraction": 0.5,
    "B": 1.5,
    "lr": 0.01,
    "batch": 16,
    "dropout": 0.5,
    "epochs": 500,
    "patience": 10,
    "hidden": "256,64",
    "index": None,
    "metrics": "accuracy,drop,curves,pq,confusion",
    "limit": 0,
    "scale": 8,
}

INT_KEYS = {"M", "K", "bins", "steps", "seed", "batch", "epochs", "patience", "limit", "scale", "index",
            "counterfactual", "target"}
FLOAT_KEYS = {"fraction", "B", "lr", "dropout"}


class Settings(dict):
    """Flags over config file over defaults, with attribute access."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None


def _resolve(args: argparse.Namespace) -> Settings:
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        for key, value in read_key_values(_existing(args.config)).items():
            merged[key] = value
    for key, value in vars(args).items():
        if value is not None:
            merged[key] = value
    for key in list(merged):
        value = merged[key]
        if value is None or not isinstance(value, str):
            continue
        try:
            if key in INT_KEYS:
                merged[key] = int(value)
            elif key in FLOAT_KEYS:
                merged[key] = float(value)
        except ValueError:
            raise ContractError(f"--{key}: cannot parse {value!r}") from None
    return Settings(merged)


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _dataset(prefix):
    for p in idx_paths(prefix):
        _existing(p)
    return load_dataset(prefix)


def _threads() -> int:
    raw = os.environ.get("COMIX_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"COMIX_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ContractError("COMIX_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _load_triplet(s: Settings):
    net = load_model(_existing(s.model))
    digest = model_hash(net)
    bank = load_bank(_existing(s.bank), digest)
    cdfs = load_cdf_table(_existing(s.cdf), digest)
    return net, bank, cdfs


def _check_MK(s: Settings, bank, cdfs):
    if not 1 <= s.M <= cdfs.M:
        raise ContractError(f"M must lie in [1, {cdfs.M}] (features stored per class), got {s.M}")
    if not 1 <= s.K <= len(bank):
        raise ContractError(f"K must lie in [1, {len(bank)}] (bank size), got {s.K}")


def _selected(data, index):
    if index is None:
        return np.arange(len(data))
    if not 0 <= index < len(data):
        raise ContractError(f"--index must lie in [0, {len(data)}), got {index}")
    return np.array([index])


# ----------------------------------------------------------------- commands


def cmd_generate_data(s: Settings):
    cfg = SyntheticConfig.from_file(_existing(s.config)) if s.get("config") else SyntheticConfig()
    if s.get("seed_given"):
        cfg.seed = s.seed
    out = Path(s.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = generate_synthetic(cfg)
    save_dataset(train_set, out / "train")
    save_dataset(test_set, out / "test")
    (out / "synthetic.cfg").write_text(cfg.to_text())
    print(json.dumps({"train": str(out / "train"), "test": str(out / "test"),
                      "train_size": len(train_set), "test_size": len(test_set)}))


def cmd_train(s: Settings):
    data = _dataset(s.data)
    hidden = tuple(int(h) for h in str(s.hidden).split(","))
    cfg = TrainConfig(
        learning_rate=s.lr, batch_size=s.batch, max_epochs=s.epochs, exponent=s.B,
        dropout_rate=s.dropout, early_stop_patience=s.patience, seed=s.seed,
    )
    net = BcosNetwork.random(data.input_spec, data.class_count, hidden, s.B, s.seed)
    net, history = train(net, data, cfg)
    digest = save_model(net, s.out)
    lines = ["epoch\ttrain_loss\tval_loss"]
    for h in history:
        lines.append(f"{h['epoch']}\t{h['train_loss']!r}\t{h.get('val_loss', float('nan'))!r}")
    Path(str(s.out) + ".loss.tsv").write_text("\n".join(lines) + "\n")
    acc = metrics.accuracy(net.predict(data.encoded()), data.labels)
    print(json.dumps({"model": str(s.out), "hash": digest, "epochs": len(history), "train_accuracy": acc}))


def cmd_build_bank(s: Settings):
    net = load_model(_existing(s.model))
    data = _dataset(s.data)
    bank = build_feature_bank(net, data)
    table = select_cdfs(bank, s.M, s.bins)
    save_bank(bank, s.bank)
    save_cdf_table(table, s.cdf)
    print(json.dumps({"bank": str(s.bank), "cdf": str(s.cdf), "rows": len(bank), "M": s.M, "bins": s.bins}))


def cmd_classify(s: Settings):
    net, bank, cdfs = _load_triplet(s)
    _check_MK(s, bank, cdfs)
    data = _dataset(s.input)
    idx = _selected(data, s.index)
    records = classify_batch(net, bank, cdfs, encode_batch(data.images[idx]), s.M, s.K)
    lines = [document(r, sample=int(i)) for i, r in zip(idx, records)]
    text = "\n".join(lines) + "\n"
    if s.get("out"):
        Path(s.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_explain(s: Settings):
    net, bank, cdfs = _load_triplet(s)
    _check_MK(s, bank, cdfs)
    reference = _dataset(s.data)
    data = _dataset(s.input)
    i = int(_selected(data, s.index if s.index is not None else 0)[0])
    image = data.images[i]
    x = encode_batch(image[None])[0]
    if s.get("counterfactual") is not None:
        panel = counterfactual_explain(net, bank, reference, cdfs, x, s.counterfactual, s.K, s.M)
        record = panel.record
    else:
        (record,) = classify_batch(net, bank, cdfs, x[None], s.M, s.K)
        panel = explain(net, bank, reference, record, x)
    out = Path(s.out)
    paths = attrib.render_panel(panel, reference, out, image, s.scale)
    (out / "record.json").write_text(document(record, panel, sample=i) + "\n")
    print(json.dumps({"out": str(out), "images": len(paths), "label": record.aggregated_label,
                      "factual": panel.factual}))


def cmd_segment(s: Settings):
    net = load_model(_existing(s.model))
    digest = model_hash(net)
    cdfs = load_cdf_table(_existing(s.cdf), digest)
    data = _dataset(s.input)
    i = int(_selected(data, s.index if s.index is not None else 0)[0])
    x = encode_batch(data.images[i][None])[0]
    if s.get("target") is not None:
        cls = int(s.target)
    elif s.get("bank"):
        bank = load_bank(_existing(s.bank), digest)
        cls = classify_batch(net, bank, cdfs, x[None], s.M, s.K)[0].aggregated_label
    else:
        cls = int(net.predict(x)[0])
    seg = attrib.segment_dominant(attrib.cdf_maps(net, cdfs, x, cls, s.M))
    path = attrib.render_segmentation(seg, s.out, s.scale)
    print(json.dumps({"out": str(path), "class": cls,
                      "segments": sorted(int(v) for v in np.unique(seg.labels))}))


def cmd_eval(s: Settings):
    net, bank, cdfs = _load_triplet(s)
    _check_MK(s, bank, cdfs)
    data = _dataset(s.data)
    wanted = [m.strip() for m in str(s.metrics).split(",") if m.strip()]
    unknown = set(wanted) - {"accuracy", "drop", "curves", "pq", "confusion"}
    if unknown:
        raise ContractError(f"unknown metrics: {', '.join(sorted(unknown))}")
    if not 0 < s.fraction < 1:
        raise ContractError(f"--fraction must lie in (0, 1), got {s.fraction}")
    if s.steps < 2:
        raise ContractError(f"--steps must be >= 2, got {s.steps}")

    X = data.encoded()
    records = classify_batch(net, bank, cdfs, X, s.M, s.K)
    final = np.array([r.aggregated_label for r in records])
    pseudo = np.array([r.pseudo_label for r in records])
    backbone = net.predict(X)
    config = f"M={s.M};K={s.K};n={len(data)}"
    rows = []
    if "accuracy" in wanted:
        rows += [
            ("accuracy_backbone", config, metrics.accuracy(backbone, data.labels)),
            ("accuracy_comix", config, metrics.accuracy(final, data.labels)),
            ("accuracy_pseudo_label", config, metrics.accuracy(pseudo, data.labels)),
        ]
    if "confusion" in wanted:
        k = net.class_count
        rows += [
            ("confusion_pseudo_vs_final", config, metrics.confusion_matrix(pseudo, final, k)),
            ("confusion_truth_vs_final", config, metrics.confusion_matrix(data.labels, final, k)),
            ("confusion_truth_vs_pseudo", config, metrics.confusion_matrix(data.labels, pseudo, k)),
        ]
    if "pq" in wanted:
        emb = encode_embedding(net, X)
        pq = [metrics.pq_index(e) for e in emb if np.any(e)]
        rows.append(("pq_index_embedding", f"p=1;q=2;n={len(pq)}", float(np.mean(pq))))

    sel = np.arange(len(data)) if not s.limit else np.arange(min(s.limit, len(data)))
    out = Path(s.out)
    out.mkdir(parents=True, exist_ok=True)
    if "drop" in wanted or "curves" in wanted:
        baseline = bank_mean_image(s, data)
        score = metrics.comix_score(net, bank, cdfs, s.M, s.K)
        evidence = [attrib.class_evidence_map(net, bank, cdfs, X[i], int(final[i]), s.M) for i in sel]
        if "drop" in wanted:
            drop, inc = metrics.average_drop_increase(
                score, data.images[sel], evidence, final[sel], s.fraction, baseline)
            cfg = f"{config};fraction={s.fraction};samples={len(sel)}"
            rows += [("average_drop_pct", cfg, drop), ("average_increase_pct", cfg, inc)]
        if "curves" in wanted:
            def curves(j):
                i = sel[j]
                args = (score, data.images[i], evidence[j], s.steps, baseline, int(final[i]))
                return metrics.insertion_curve(*args), metrics.deletion_curve(*args)

            with ThreadPoolExecutor(max_workers=_threads()) as pool:
                results = list(pool.map(curves, range(len(sel))))
            curve_dir = out / "curves"
            curve_dir.mkdir(exist_ok=True)
            for i, (ins, dele) in zip(sel, results):
                (curve_dir / f"insertion_{i:05d}.csv").write_text(ins.to_csv())
                (curve_dir / f"deletion_{i:05d}.csv").write_text(dele.to_csv())
            cfg = f"{config};steps={s.steps};samples={len(sel)}"
            rows += [
                ("c_insertion_auc", cfg, float(np.mean([r[0].auc for r in results]))),
                ("c_deletion_auc", cfg, float(np.mean([r[1].auc for r in results]))),
            ]
    report = metrics.format_report(rows)
    (out / "report.tsv").write_text(report)
    sys.stdout.write(report)


def bank_mean_image(s: Settings, data):
    """Masking baseline: mean of the reference set when given, else of ``data``."""
    if s.get("reference"):
        return _dataset(s.reference).mean_image()
    return data.mean_image()


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comix", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="key=value settings file (flags override it)")
        return sp

    def add(sp, *names, **kw):
        for n in names:
            sp.add_argument(f"--{n}", **kw)

    sp = cmd("generate-data", cmd_generate_data, "write a synthetic train/test dataset")
    sp.add_argument("--seed", type=int, help="override the generator seed")
    sp.add_argument("--out", required=True, help="output directory")

    sp = cmd("train", cmd_train, "train a B-cos network")
    sp.add_argument("--data", required=True, help="dataset prefix (PREFIX-images.idx / PREFIX-labels.idx)")
    sp.add_argument("--out", required=True, help="model file to write")
    add(sp, "lr", "B", "dropout")
    add(sp, "batch", "epochs", "patience", "seed")
    sp.add_argument("--hidden", help="comma-separated encoder widths, e.g. 256,64")

    sp = cmd("build-bank", cmd_build_bank, "embed a reference set and select class-defining features")
    add(sp, "model", "data", "bank", "cdf")
    add(sp, "M", "bins")

    sp = cmd("classify", cmd_classify, "classify samples, one JSON record per line")
    add(sp, "model", "bank", "cdf", "input", "out")
    add(sp, "M", "K", "index")

    sp = cmd("explain", cmd_explain, "render an explanation panel for one sample")
    add(sp, "model", "bank", "cdf", "data", "input", "out")
    add(sp, "M", "K", "index", "counterfactual", "scale")

    sp = cmd("segment", cmd_segment, "dominant class-defining feature per pixel")
    add(sp, "model", "cdf", "bank", "input", "out")
    add(sp, "M", "K", "index", "target", "scale")

    sp = cmd("eval", cmd_eval, "accuracy, drop/increase, insertion/deletion, PQ-index, confusion")
    add(sp, "model", "bank", "cdf", "data", "out", "reference", "metrics")
    add(sp, "M", "K", "steps", "fraction", "limit", "seed")
    return p


REQUIRED = {
    "build-bank": ("model", "data", "bank", "cdf"),
    "classify": ("model", "bank", "cdf", "input"),
    "explain": ("model", "bank", "cdf", "data", "input", "out"),
    "segment": ("model", "cdf", "input", "out"),
    "eval": ("model", "bank", "cdf", "data", "out"),
}


def _fail(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return EXIT_CODES.get(code, 1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        s = _resolve(args)
        s["seed_given"] = getattr(args, "seed", None) is not None
        missing = [k for k in REQUIRED.get(args.command, ()) if not s.get(k)]
        if missing:
            raise ContractError("missing required setting(s): " + ", ".join(f"--{k}" for k in missing))
        args.func(s)
    except FileNotFoundError as e:
        return _fail("missing_file", str(e))
    except ComixError as e:
        return _fail(e.code, str(e))
    except OSError as e:
        return _fail("error", f"{e.__class__.__name__}: {e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
