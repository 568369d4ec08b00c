"""Open-set metrics and the experiment protocols built on them.

Confusion accounting (the cross cases are a convention of this package):

* known sample, predicted its own class: TP of that class
* known sample, predicted another known class: FN of the truth, FP of the prediction
* known sample, rejected as unknown: FN of the truth and one FU
* unknown sample, rejected: one TU
* unknown sample, accepted as class j: FP of j (no FU)

TN of class i counts every sample whose truth and prediction both differ from i.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .asc import KernelBank
from .data import SarSample, SocSplit, make_soc_split, to_arrays
from .errors import ArgumentError, ConfigError
from .network import Network, NetworkConfig, build_network, init_conv1_from_bank
from .rpl import UNKNOWN, USE_R, OpenPrediction, RplHead, calibrate_threshold, combined_matrix, predict_open_batch
from .training import FitResult, TrainConfig, fit, make_head

log = logging.getLogger(__name__)

ACCOUNTING_NOTE = (
    "known rejected -> FN(truth)+FU; unknown rejected -> TU; unknown accepted as j -> FP(j); "
    "TN(i) = samples with truth != i and prediction != i"
)


@dataclass
class OpenSetConfusion:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    tu: int = 0
    fu: int = 0

    @property
    def n_classes(self) -> int:
        return self.tp.size


def _as_index(p) -> int:
    return p.class_index if isinstance(p, OpenPrediction) else int(p)


def assemble_confusion(predictions, truths, n_classes: int) -> OpenSetConfusion:
    """Tally predictions (OpenPrediction or class index, -1 = unknown) against truths (-1 = unknown)."""
    if len(predictions) != len(truths):
        raise ArgumentError(f"{len(predictions)} predictions but {len(truths)} truths")
    pred = np.array([_as_index(p) for p in predictions], dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    for name, arr in (("prediction", pred), ("truth", true)):
        if arr.size and (arr.min() < UNKNOWN or arr.max() >= n_classes):
            raise ArgumentError(f"{name} indices must lie in [-1, {n_classes})")
    known_t = true >= 0
    known_p = pred >= 0
    cls = np.arange(n_classes)[:, None]
    tp = np.sum((true == cls) & (pred == cls), axis=1)
    fn = np.sum((true == cls) & (pred != cls), axis=1)
    fp = np.sum((pred == cls) & (true != cls), axis=1)
    tn = np.sum((pred != cls) & (true != cls), axis=1)
    tu = int(np.sum(~known_t & ~known_p))
    fu = int(np.sum(known_t & ~known_p))
    return OpenSetConfusion(tp, fp, fn, tn, tu, fu)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def per_class_metrics(conf: OpenSetConfusion):
    recall = _safe_div(conf.tp, conf.tp + conf.fn)
    precision = _safe_div(conf.tp, conf.tp + conf.fp)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return recall, precision, f1


def macro_metrics(conf: OpenSetConfusion) -> tuple[float, float, float]:
    """Macro-averaged (recall, precision, F1) over the known classes."""
    if conf.n_classes < 1:
        raise ArgumentError("need at least one known class")
    recall, precision, f1 = per_class_metrics(conf)
    return float(recall.mean()), float(precision.mean()), float(f1.mean())


def openset_accuracy(conf: OpenSetConfusion) -> float:
    num = int(np.sum(conf.tp + conf.tn)) + conf.tu
    den = int(np.sum(conf.tp + conf.tn + conf.fp + conf.fn)) + conf.fu + conf.tu
    if den == 0:
        raise ArgumentError("empty confusion: accuracy denominator is zero")
    return num / den


def openness(n_train_classes: int, n_test_classes: int) -> float:
    if n_train_classes < 1 or n_train_classes > n_test_classes:
        raise ArgumentError(
            f"need 1 <= train classes <= test classes, got {n_train_classes} and {n_test_classes}"
        )
    return 1.0 - float(np.sqrt(2.0 * n_train_classes / (n_train_classes + n_test_classes)))


@dataclass
class OpenSetReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    closed_set_accuracy: float
    threshold: float
    confusion: OpenSetConfusion

    def as_row(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "closed_set_accuracy": self.closed_set_accuracy,
            "threshold": self.threshold,
            "tu": self.confusion.tu,
            "fu": self.confusion.fu,
        }


# ---------------------------------------------------------------------------
# model-level helpers


def embed(net: Network, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = [net.forward(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, net.config.embedding_dim))
    return np.concatenate(out)


def closed_set_predictions(features: np.ndarray, head: RplHead) -> np.ndarray:
    return np.argmax(combined_matrix(features, head.points), axis=1)


def resolve_eval_threshold(threshold, head: RplHead, train_features=None, gate="euclid", percentile=5.0):
    """Map a threshold spec (number, 'R', 'calibrated', '-inf') to what predict_open expects."""
    if isinstance(threshold, str):
        t = threshold.strip().lower()
        if t in ("r", "use_r"):
            return USE_R
        if t == "calibrated":
            if train_features is None:
                raise ConfigError("calibrated threshold needs the training features")
            return calibrate_threshold(train_features, head, gate, percentile)
        return float(threshold)
    return float(threshold)


def evaluate_open_set(
    net: Network,
    head: RplHead,
    images: np.ndarray,
    truths: np.ndarray,
    threshold=USE_R,
    gate: str = "euclid",
    features: np.ndarray | None = None,
) -> OpenSetReport:
    feats = embed(net, images) if features is None else features
    preds = predict_open_batch(feats, head, gate, threshold)
    conf = assemble_confusion(preds, truths, head.n_classes)
    recall, precision, f1 = macro_metrics(conf)
    truths = np.asarray(truths)
    known = truths >= 0
    closed = closed_set_predictions(feats[known], head)
    closed_acc = float(np.mean(closed == truths[known])) if known.any() else float("nan")
    thr = preds[0].threshold_used if preds else float("nan")
    return OpenSetReport(precision, recall, f1, openset_accuracy(conf), closed_acc, float(thr), conf)


def train_model(
    net_config: NetworkConfig,
    train_cfg: TrainConfig,
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    bank: KernelBank | None = None,
) -> FitResult:
    net = build_network(net_config, seed=train_cfg.seed)
    if bank is not None:
        init_conv1_from_bank(net, bank)
    head = make_head(n_classes, net_config.embedding_dim, train_cfg)
    return fit(net, head, x, y, train_cfg)


# ---------------------------------------------------------------------------
# protocols


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def rows_to_csv(rows: Sequence[dict], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    if rows:
        w = csv.writer(buf, lineterminator="\n")
        cols = list(rows[0])
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def write_csv(path, rows, header_comment=None) -> None:
    atomic_write_text(path, rows_to_csv(rows, header_comment))


def run_openness_sweep(
    samples: Sequence[SarSample],
    class_order: Sequence[str],
    k_min: int,
    k_max: int,
    net_config: NetworkConfig,
    train_cfg: TrainConfig,
    repetitions: int = 3,
    threshold="calibrated",
    bank: KernelBank | None = None,
    image_mode: str = "pad",
) -> list[dict]:
    """Train on the first k classes of ``class_order`` and test on all of them, for each k."""
    total = len(class_order)
    if not 2 <= k_min <= k_max <= total:
        raise ConfigError(f"need 2 <= k_min <= k_max <= {total} classes, got k_min={k_min}, k_max={k_max}")
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    rows = []
    for k in range(k_min, k_max + 1):
        known, unknown = list(class_order[:k]), list(class_order[k:])
        split = make_soc_split(samples, known, unknown, seed=train_cfg.seed)
        size = net_config.input_size
        x_tr, y_tr = to_arrays(split.train, known, size, image_mode)
        x_te, y_te = to_arrays(split.test, known, size, image_mode)
        reports = []
        for rep in range(repetitions):
            cfg = replace(train_cfg, seed=train_cfg.seed + rep)
            result = train_model(net_config, cfg, x_tr, y_tr, k, bank)
            thr = resolve_eval_threshold(threshold, result.head, embed(result.net, x_tr))
            reports.append(evaluate_open_set(result.net, result.head, x_te, y_te, thr))
            log.info("k=%d rep=%d f1=%.4f acc=%.4f", k, rep, reports[-1].f1, reports[-1].accuracy)
        acc = np.array([r.accuracy for r in reports])
        f1 = np.array([r.f1 for r in reports])
        rows.append(
            {
                "k_known": k,
                "openness": openness(k, total),
                "precision": float(np.mean([r.precision for r in reports])),
                "recall": float(np.mean([r.recall for r in reports])),
                "f1": float(f1.mean()),
                "accuracy": float(acc.mean()),
                "f1_min": float(f1.min()),
                "f1_max": float(f1.max()),
                "accuracy_min": float(acc.min()),
                "accuracy_max": float(acc.max()),
                "repetitions": repetitions,
                "seed": train_cfg.seed,
            }
        )
    return rows


def subsample_per_class(
    samples: Sequence[SarSample], count: int, seed: int, contiguous_azimuth: bool = False
) -> list[SarSample]:
    """``count`` samples of every class, drawn under ``seed``; output keeps input order."""
    by_class: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    rng = np.random.default_rng([seed, count])
    chosen = []
    for label in sorted(by_class):
        idx = by_class[label]
        if count > len(idx):
            raise ArgumentError(f"class {label!r} has {len(idx)} training samples, {count} requested")
        if contiguous_azimuth and all("azimuth_deg" in samples[i].metadata for i in idx):
            ordered = sorted(idx, key=lambda i: samples[i].metadata["azimuth_deg"])
            start = int(rng.integers(0, len(ordered)))
            chosen += [ordered[(start + j) % len(ordered)] for j in range(count)]
        else:
            chosen += [idx[j] for j in rng.choice(len(idx), count, replace=False)]
    return [samples[i] for i in sorted(chosen)]


def paired_networks(net_config: NetworkConfig, bank: KernelBank, seed: int) -> tuple[Network, Network]:
    """Random-init and ASC-init networks that differ only in the first conv layer."""
    base = build_network(net_config, seed)
    asc = build_network(net_config, seed)
    init_conv1_from_bank(asc, bank)
    return base, asc


def run_limited_sample_protocol(
    split: SocSplit,
    per_class_counts: Sequence[int],
    net_config: NetworkConfig,
    train_cfg: TrainConfig,
    bank: KernelBank | None = None,
    contiguous_azimuth: bool = False,
    image_mode: str = "pad",
) -> list[dict]:
    """Closed-set accuracy per training-set size; with a bank, base and ASC runs are paired."""
    known = split.known
    available = {c: sum(1 for s in split.train if s.label == c) for c in known}
    for count in per_class_counts:
        short = {c: n for c, n in available.items() if n < count}
        if short:
            raise ArgumentError(f"requested {count} per class but only {short} available")
    cfg = replace(train_cfg, lam=0.0)
    size = net_config.input_size
    test = [s for s in split.test if s.label in set(known)]
    x_te, y_te = to_arrays(test, known, size, image_mode)
    rows = []
    for count in per_class_counts:
        subset = subsample_per_class(split.train, count, cfg.seed, contiguous_azimuth)
        x_tr, y_tr = to_arrays(subset, known, size, image_mode)
        variants = [("base", None)] + ([("asc", bank)] if bank is not None else [])
        for name, b in variants:
            result = train_model(net_config, cfg, x_tr, y_tr, len(known), b)
            pred = closed_set_predictions(embed(result.net, x_te), result.head)
            acc = float(np.mean(pred == y_te))
            log.info("count=%d init=%s accuracy=%.4f", count, name, acc)
            rows.append({"per_class": count, "init": name, "accuracy": acc, "seed": cfg.seed})
    return rows
