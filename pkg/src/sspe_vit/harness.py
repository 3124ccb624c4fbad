"""Training loop, evaluation metrics and ablation suites."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import (
    KL2,
    MIXED_KL,
    LabeledGrid,
    PositionPlan,
    bootstrap_oversample,
    conventional_augment,
    draw_candidates,
    exchange_key_patches,
    grade_index,
    make_sspe_plan,
    original_sequence,
    pe_dropout_plan,
)
from .config import ExperimentConfig
from .data import DatasetManifest, load_image, sample_rng
from .encoder import (
    EncoderParams,
    build_position_table,
    embed_patches,
    encode_batch,
    identity_plan,
)
from .loss import hybrid_loss_from_logits

log = logging.getLogger(__name__)

# stream tags for derived generators
_INIT, _EPOCH, _SAMPLE, _CANDIDATES = 11, 12, 13, 14

CSV_HEADER = ("condition", "seed", "accuracy", "f1", "epochs_to_90pct")
SUITES = ("pe-compare", "key-select", "mask-select", "hyper-grid", "n-sweep", "pe-dropout")
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    precision: float
    recall: float
    confusion: dict[str, int]
    loss_curve: list[float] = field(default_factory=list)
    val_accuracy_curve: list[float] = field(default_factory=list)
    epochs_to_90pct: int | None = None
    best_epoch: int | None = None
    seed: int | None = None
    runtime_seconds: float = 0.0

    def to_dict(self, include_runtime: bool = False) -> dict:
        out = asdict(self)
        if not include_runtime:
            out.pop("runtime_seconds")
        return out

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion_counts(y_true: Sequence[int], y_pred: Sequence[int]) -> dict[str, int]:
    """Confusion counts with KL-2 (index 1) as the positive class."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    return {
        "tp": int(np.sum((t == 1) & (p == 1))),
        "fp": int(np.sum((t == 0) & (p == 1))),
        "fn": int(np.sum((t == 1) & (p == 0))),
        "tn": int(np.sum((t == 0) & (p == 0))),
    }


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        warnings.warn("F1 is undefined (no true positives); reporting 0", RuntimeWarning, stacklevel=2)
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def epochs_to_fraction(curve: Sequence[float], fraction: float = 0.9) -> int | None:
    """First 1-based epoch whose value reaches ``fraction`` of the final value."""
    if not curve:
        return None
    target = fraction * curve[-1]
    for i, v in enumerate(curve, start=1):
        if v >= target:
            return i
    return len(curve)


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


def _mask_tokens(tokens: np.ndarray, mask_cells: Sequence[int]) -> np.ndarray:
    if mask_cells:
        tokens = tokens.copy()
        tokens[..., np.asarray(mask_cells) - 1, :] = 0.0
    return tokens


def split_tokens(
    manifest: DatasetManifest, split: str, patch_pixels: int, mask_cells: Sequence[int] = ()
) -> tuple[np.ndarray, np.ndarray]:
    """Patch tokens ``(N, P, pp**2)`` and label indices for one split, unaugmented."""
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    tokens = np.stack([embed_patches(load_image(manifest.image_path(e)), patch_pixels).tokens for e in entries])
    labels = np.array([grade_index(e.grade) for e in entries])
    return _mask_tokens(tokens, mask_cells), labels


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: EncoderParams, lr: float):
        self.params = params.trainable()
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.value -= self.lr * p.grad


class Adam:
    def __init__(self, params: EncoderParams, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params.trainable()
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: EncoderParams, cfg: ExperimentConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    return SGD(params, cfg.learning_rate)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def predict(params: EncoderParams, tokens: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Class indices; every token keeps its own position (identity plan)."""
    cfg = params.config
    pe = build_position_table(cfg)
    plan = identity_plan(cfg.num_tokens)
    out = []
    for i in range(0, len(tokens), chunk):
        part = tokens[i : i + chunk]
        plans = np.broadcast_to(plan, (len(part), cfg.num_tokens))
        logits = encode_batch(part, pe, plans, params, validate=False).value
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out)


def evaluate_tokens(params: EncoderParams, tokens: np.ndarray, labels: np.ndarray) -> MetricsReport:
    if len(tokens) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = predict(params, tokens)
    conf = confusion_counts(labels, pred)
    precision, recall, f1 = precision_recall_f1(conf["tp"], conf["fp"], conf["fn"])
    return MetricsReport(float(np.mean(pred == labels)), f1, precision, recall, conf)


def evaluate(
    params: EncoderParams, manifest: DatasetManifest, split: str = "test", mask_cells: Sequence[int] = ()
) -> MetricsReport:
    tokens, labels = split_tokens(manifest, split, params.config.patch_pixels, mask_cells)
    return evaluate_tokens(params, tokens, labels)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EpochBatch:
    patches: np.ndarray
    plans: np.ndarray
    labels: list[str]
    tags: list[str]
    n_exchanged: int


def _plan_hash(plans: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(plans, dtype="<i8").tobytes()).hexdigest()[:16]


def build_epoch(
    cfg: ExperimentConfig,
    epoch: int,
    train_ids: list[int],
    train_grades: dict[int, str],
    images: dict[int, np.ndarray],
) -> EpochBatch:
    """Every training sequence for one epoch, before shuffling into batches."""
    enc = cfg.encoder_config()
    keys = cfg.keys()
    aug = cfg.augment_config()
    rng_epoch = sample_rng(cfg.seed, _EPOCH, epoch)
    items = [(sid, train_grades[sid]) for sid in train_ids]
    if cfg.oversample:
        items = bootstrap_oversample(items, rng_epoch)

    def grid_of(sid: int, rng: np.random.Generator):
        g = embed_patches(conventional_augment(images[sid], rng, aug), enc.patch_pixels)
        if cfg.mask_cells:
            g = g.replace(_mask_tokens(g.tokens, cfg.mask_cells))
        return LabeledGrid(g, train_grades[sid], sid)

    patches, plans, labels, tags = [], [], [], []
    n_exchanged = 0
    for pos, (sid, _) in enumerate(items):
        rng = sample_rng(cfg.seed, _SAMPLE, epoch, pos)
        target = grid_of(sid, rng)
        if cfg.exchange_n > 0:
            cand_rng = rng if cfg.resample_candidates else sample_rng(cfg.seed, _CANDIDATES, sid)
            cids = draw_candidates(train_ids, sid, cfg.exchange_n, cand_rng)
            seqs = exchange_key_patches(target, [grid_of(c, rng) for c in cids], keys, cfg.dedupe_identity)
            n_exchanged += sum(1 for s in seqs if s.candidate_id is not None)
        else:
            seqs = [original_sequence(target, keys)]
        for s in seqs:
            if cfg.sspe:
                plan = make_sspe_plan(enc.num_tokens, keys, rng)
            else:
                plan = None
            if cfg.pe_dropout > 0:
                base = plan if plan is not None else PositionPlan(identity_plan(enc.num_tokens))
                plan = pe_dropout_plan(base, keys, cfg.pe_dropout, rng)
            patches.append(s.tokens.tokens)
            plans.append(plan.assignment if plan is not None else identity_plan(enc.num_tokens))
            labels.append(s.label)
            tags.append(s.set_tag)
    return EpochBatch(np.stack(patches), np.stack(plans), labels, tags, n_exchanged)


def train(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    log_path: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[EncoderParams, MetricsReport]:
    """Train from scratch; returns the best-validation parameters and test metrics."""
    start = time.perf_counter()
    enc = cfg.encoder_config()
    pe = build_position_table(enc)
    loss_cfg = cfg.loss_config()
    params = EncoderParams.init(enc, sample_rng(cfg.seed, _INIT))
    opt = make_optimizer(params, cfg)

    train_entries = manifest.split("train")
    if not train_entries:
        raise ValueError("manifest has no training split")
    train_ids = [e.sample_id for e in train_entries]
    train_grades = {e.sample_id: e.grade for e in train_entries}
    images = {e.sample_id: load_image(manifest.image_path(e)) for e in train_entries}
    val_tokens, val_labels = split_tokens(manifest, "val", enc.patch_pixels, cfg.mask_cells)
    test_tokens, test_labels = split_tokens(manifest, "test", enc.patch_pixels, cfg.mask_cells)

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    loss_curve: list[float] = []
    val_curve: list[float] = []
    best_acc, best_epoch, best_params = -1.0, 0, params.copy()
    try:
        for epoch in range(1, cfg.epochs + 1):
            ep = build_epoch(cfg, epoch, train_ids, train_grades, images)
            order = sample_rng(cfg.seed, _EPOCH, epoch, 1).permutation(len(ep.labels))
            total, count = 0.0, 0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        logits = encode_batch(ep.patches[idx], pe, ep.plans[idx], params, validate=False)
                        loss = hybrid_loss_from_logits(
                            logits, [ep.labels[j] for j in idx], [ep.tags[j] for j in idx], loss_cfg
                        )
                    value = float(loss.value)
                except ValueError as exc:
                    if "non-finite" not in str(exc):
                        raise
                    value = math.nan
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"loss became {value} at epoch {epoch}, batch {i // cfg.batch_size}; "
                        f"learning_rate={cfg.learning_rate}, optimizer={cfg.optimizer}"
                    )
                params.zero_grad()
                loss.backward()
                with np.errstate(over="ignore", invalid="ignore"):
                    opt.step()
                bad = [n for n, t in params.tensors.items() if not np.all(np.isfinite(t.value))]
                if bad:
                    raise TrainingDiverged(
                        f"non-finite parameters {bad[:3]} after epoch {epoch}, batch {i // cfg.batch_size}; "
                        f"learning_rate={cfg.learning_rate}, optimizer={cfg.optimizer}"
                    )
                total += value * len(idx)
                count += len(idx)
            epoch_loss = total / count
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                val_acc = evaluate_tokens(params, val_tokens, val_labels).accuracy
            loss_curve.append(epoch_loss)
            val_curve.append(val_acc)
            if val_acc > best_acc:
                best_acc, best_epoch, best_params = val_acc, epoch, params.copy()
            record = {
                "epoch": epoch,
                "loss": epoch_loss,
                "val_accuracy": val_acc,
                "plan_hash": _plan_hash(ep.plans),
                "sequences": len(ep.labels),
                "mixed_kl": sum(1 for t in ep.tags if t == MIXED_KL),
                "full_kl": sum(1 for t in ep.tags if t != MIXED_KL),
                "exchanged": ep.n_exchanged,
                "kl2_labels": sum(1 for g in ep.labels if g == KL2),
            }
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if on_epoch:
                on_epoch(record)
            log.debug("epoch %d loss %.4f val %.3f", epoch, epoch_loss, val_acc)
    finally:
        if log_fh:
            log_fh.close()

    report = evaluate_tokens(best_params, test_tokens, test_labels)
    report.loss_curve = loss_curve
    report.val_accuracy_curve = val_curve
    report.epochs_to_90pct = epochs_to_fraction(val_curve)
    report.best_epoch = best_epoch
    report.seed = cfg.seed
    report.runtime_seconds = time.perf_counter() - start
    return best_params, report


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

_PATCH_GROUPS = {"123": [1, 2, 3], "456": [4, 5, 6], "789": [7, 8, 9]}


def suite_conditions(suite: str, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Named configurations for one ablation suite."""
    ce_only = {"alpha": 0.0, "beta": 1.0, "exchange_n": 0}
    if suite == "pe-compare":
        out = []
        for kind in ("none", "sinusoidal-1d", "grid-2d", "relative"):
            out.append((f"{kind}/all", base.replace(pe_kind=kind, sspe=False, **ce_only)))
            if kind == "none":
                continue
            for name, keys in _PATCH_GROUPS.items():
                out.append((f"{kind}/sspe-{name}", base.replace(pe_kind=kind, sspe=True, key_set=keys, **ce_only)))
        return out
    if suite == "key-select":
        return [
            (f"sspe-{name}", base.replace(sspe=True, key_set=keys, **ce_only)) for name, keys in _PATCH_GROUPS.items()
        ]
    if suite == "mask-select":
        out = []
        for pair in ([4, 5], [4, 6], [5, 6]):
            masked = [k for k in (4, 5, 6) if k not in pair]
            out.append((f"keys-{pair[0]}{pair[1]}", base.replace(sspe=True, key_set=pair, mask_cells=masked, **ce_only)))
        return out
    if suite == "hyper-grid":
        out = [("ce-only", base.replace(exchange_n=1, alpha=0.0, beta=1.0))]
        for e in range(1, 7):
            eps = round(0.05 * e, 2)
            for a in range(1, 11):
                alpha = round(0.1 * a, 1)
                cond = f"eps={eps:.2f},alpha={alpha:.1f},beta={1 - alpha:.1f}"
                out.append((cond, base.replace(exchange_n=1, epsilon=eps, alpha=alpha, beta=round(1 - alpha, 1))))
        return out
    if suite == "n-sweep":
        return [(f"N={n}", base.replace(exchange_n=n)) for n in range(5)]
    if suite == "pe-dropout":
        return [(f"dropout={r}", base.replace(pe_dropout=r)) for r in (0.0, 0.2, 0.3, 0.5)]
    raise ValueError(f"unknown ablation suite {suite!r}; choose from {SUITES}")


@dataclass
class RunResult:
    condition: str
    seed: int
    report: MetricsReport

    def row(self) -> dict:
        return {
            "condition": self.condition,
            "seed": self.seed,
            "accuracy": self.report.accuracy,
            "f1": self.report.f1,
            "epochs_to_90pct": self.report.epochs_to_90pct,
        }


def run_ablation(
    suite: str,
    base: ExperimentConfig,
    manifest: DatasetManifest,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    out_dir: str | Path | None = None,
    conditions: Sequence[str] | None = None,
) -> list[RunResult]:
    """Train every (condition, seed) of a suite; optionally write CSV tables."""
    plan = suite_conditions(suite, base)
    if conditions is not None:
        plan = [(n, c) for n, c in plan if n in conditions]
    results = []
    for name, cfg in plan:
        for seed in seeds:
            _, report = train(cfg.replace(seed=seed), manifest)
            log.info("%s %s seed=%d acc=%.4f", suite, name, seed, report.accuracy)
            results.append(RunResult(name, seed, report))
    if out_dir is not None:
        write_suite_outputs(suite, results, out_dir)
    return results


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(path: Path, rows: list[dict], header: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])


def write_suite_outputs(suite: str, results: list[RunResult], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"long": out / f"{suite}.csv", "wide": out / f"{suite}_wide.csv"}
    write_rows_csv(paths["long"], [r.row() for r in results], CSV_HEADER)

    seeds = sorted({r.seed for r in results})
    conditions = list(dict.fromkeys(r.condition for r in results))
    acc = {(r.condition, r.seed): r.report.accuracy for r in results}
    wide = []
    for c in conditions:
        row = {"condition": c}
        for s in seeds:
            row[f"seed{s}"] = acc.get((c, s))
        wide.append(row)
    write_rows_csv(paths["wide"], wide, ["condition"] + [f"seed{s}" for s in seeds])

    if suite == "n-sweep":
        paths["curves"] = out / f"{suite}_curves.csv"
        rows = []
        for r in results:
            for e, (lv, av) in enumerate(zip(r.report.loss_curve, r.report.val_accuracy_curve), start=1):
                rows.append({"condition": r.condition, "seed": r.seed, "epoch": e, "loss": lv, "val_accuracy": av})
        write_rows_csv(paths["curves"], rows, ["condition", "seed", "epoch", "loss", "val_accuracy"])
    if suite == "pe-compare":
        paths["table"] = out / f"{suite}_table.csv"
        write_rows_csv(paths["table"], pe_compare_table(results), PE_TABLE_HEADER)
    return paths


PE_TABLE_HEADER = ("pe", "all", "sspe_123", "diff_123", "sspe_456", "diff_456", "sspe_789", "diff_789")


def pe_compare_table(results: list[RunResult]) -> list[dict]:
    """Seed-mean accuracies laid out as PE kind rows x patch-group columns."""
    means = summarize(results)
    rows = []
    for kind in ("none", "sinusoidal-1d", "grid-2d", "relative"):
        base = means.get(f"{kind}/all", {}).get("accuracy_mean")
        row: dict = {"pe": kind, "all": base}
        for g in _PATCH_GROUPS:
            m = means.get(f"{kind}/sspe-{g}", {}).get("accuracy_mean")
            row[f"sspe_{g}"] = m
            row[f"diff_{g}"] = (m - base) if (m is not None and base is not None) else None
        rows.append(row)
    return rows


def summarize(results: Sequence[RunResult] | Sequence[dict]) -> dict[str, dict]:
    """Mean and sample standard deviation per condition."""
    groups: dict[str, list[dict]] = {}
    for r in results:
        row = r.row() if isinstance(r, RunResult) else r
        groups.setdefault(row["condition"], []).append(row)
    out = {}
    for cond, rows in groups.items():
        stats = {"n": len(rows)}
        for key in ("accuracy", "f1", "epochs_to_90pct"):
            vals = [float(x[key]) for x in rows if x.get(key) not in (None, "")]
            if vals:
                stats[f"{key}_mean"] = statistics.fmean(vals)
                stats[f"{key}_sd"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out[cond] = stats
    return out


def read_suite_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
