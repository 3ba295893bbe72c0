"""Training, staged fine-tuning, evaluation and reporting."""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .data import NUM_AGE_GROUPS, DatasetManifest, ModalPair, Pairing, pair_modalities
from .errors import ConfigError, DataError, PipelineError
from .losses import (
    DEFAULT_BETA,
    DEFAULT_CENTER_ALPHA,
    DEFAULT_LAMBDA,
    CenterBank,
    multitask_loss,
    task_loss,
    update_centers,
)
from .model import NUM_CLASSES, AgeGenderNet, BackboneSpec, HeadOutputs
from .scorefuse import METHODS, ModelScore, fuse_decisions

logger = logging.getLogger(__name__)

UNIMODAL_BATCH_SIZE = 32
MULTIMODAL_BATCH_SIZE = 16
EVAL_BATCH_SIZE = 256

Data = Union[DatasetManifest, Pairing, Sequence[ModalPair]]


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_epochs: int = 25
    weight_decay: float = 1e-3
    lambda_center: float = DEFAULT_LAMBDA
    beta: float = DEFAULT_BETA
    dropout_rate: float = 0.75
    # None selects 32 for unimodal and 16 for multimodal models.
    batch_size: Optional[int] = None
    epochs: int = 50
    seed: int = 0
    center_alpha: float = DEFAULT_CENTER_ALPHA

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("learning_rate", "lr_decay_factor", "lr_decay_epochs", "epochs"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.lambda_center < 0:
            raise ConfigError("weight_decay and lambda_center must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 < self.center_alpha <= 1.0:
            raise ConfigError(f"center_alpha must be in (0, 1], got {self.center_alpha}")

    def batch_size_for(self, fusion_mode: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return UNIMODAL_BATCH_SIZE if fusion_mode == "none" else MULTIMODAL_BATCH_SIZE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainingConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                continue
            kwargs[key] = _coerce(key, raw, known[key].type)
        return cls(**kwargs)


def _coerce(key: str, raw: Any, annotation: str) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if text.lower() in ("", "none", "auto"):
            if "Optional" in str(annotation):
                return None
            raise ValueError
        if "int" in str(annotation):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def lr_at_epoch(config: TrainingConfig, epoch: int) -> float:
    """Step schedule ``lr * factor ** (epoch // step)``.

    Evaluated in decimal arithmetic on the configured values, so 1e-4 decays
    to exactly ``1e-05``, ``1e-06``, ... rather than accumulating binary
    rounding error.
    """
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    k = epoch // config.lr_decay_epochs
    value = Decimal(repr(config.learning_rate)) * Decimal(repr(config.lr_decay_factor)) ** k
    return float(value)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def _pairs(data: Data, input_size: tuple[int, int]) -> list[ModalPair]:
    if isinstance(data, DatasetManifest):
        return list(pair_modalities(data, input_size))
    return list(data)


def _split_pairs(pairs: list[ModalPair], split: Optional[str]) -> list[ModalPair]:
    if split is None:
        return pairs
    return [p for p in pairs if p.split == split]


def _labels(pairs: Sequence[ModalPair], task: str) -> torch.Tensor:
    values = [p.label(task) for p in pairs]
    if any(v is None for v in values):
        raise ConfigError(f"task {task!r} requested but some samples have no {task} label")
    return torch.tensor(values, dtype=torch.long)


def _take(inputs, idx):
    if isinstance(inputs, tuple):
        return tuple(t[idx] for t in inputs)
    return inputs[idx]


def _length(inputs) -> int:
    return inputs[0].shape[0] if isinstance(inputs, tuple) else inputs.shape[0]


def _forward_batched(model: AgeGenderNet, inputs) -> HeadOutputs:
    n = _length(inputs)
    chunks = [model(_take(inputs, slice(i, i + EVAL_BATCH_SIZE))) for i in range(0, n, EVAL_BATCH_SIZE)]
    merged = HeadOutputs()
    for name in ("age_logits", "gender_logits", "age_embedding", "gender_embedding"):
        parts = [getattr(c, name) for c in chunks]
        if parts and parts[0] is not None:
            setattr(merged, name, torch.cat(parts))
    return merged


class _EvalMode:
    """Put a model in eval mode under no_grad and restore its flags afterwards."""

    def __init__(self, model: nn.Module):
        self.model = model

    def __enter__(self):
        self.flags = {m: m.training for m in self.model.modules()}
        self.grad = torch.is_grad_enabled()
        self.model.eval()
        torch.set_grad_enabled(False)
        return self.model

    def __exit__(self, *exc):
        for m, flag in self.flags.items():
            m.training = flag
        torch.set_grad_enabled(self.grad)


def ensure_center_banks(
    model: AgeGenderNet,
    alpha: float = DEFAULT_CENTER_ALPHA,
    inputs=None,
    labels: Optional[Mapping[str, torch.Tensor]] = None,
) -> dict[str, CenterBank]:
    """Give ``model`` a center bank per task, keeping existing banks of the right shape.

    New banks start at the per-class means of the model's current (eval
    mode) embeddings of ``inputs`` when those are given, and at zero
    otherwise.
    """
    banks = getattr(model, "center_banks", None) or {}
    dims = model.embedding_dims()
    fresh = [
        t for t in model.tasks
        if t not in banks or banks[t].feat_dim != dims[t] or banks[t].num_classes != NUM_CLASSES[t]
    ]
    out = None
    if fresh and inputs is not None:
        with _EvalMode(model):
            out = _forward_batched(model, inputs)
    for task in fresh:
        if out is not None and labels is not None and task in labels:
            banks[task] = CenterBank.from_features(out.embedding(task), labels[task], NUM_CLASSES[task], alpha)
        else:
            banks[task] = CenterBank.zeros(NUM_CLASSES[task], dims[task], alpha)
    model.center_banks = banks
    return banks


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    age_accuracy: Optional[float] = None
    gender_accuracy: Optional[float] = None
    per_class_accuracy: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    sample_count: int = 0
    model: str = ""
    data: str = ""
    audit: Optional[list] = field(default=None, repr=False)

    def accuracy(self, task: str) -> Optional[float]:
        return self.age_accuracy if task == "age" else self.gender_accuracy

    def mean_accuracy(self) -> float:
        accs = [a for a in (self.age_accuracy, self.gender_accuracy) if a is not None]
        return float(np.mean(accs)) if accs else float("nan")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "data": self.data,
            "age_accuracy": self.age_accuracy,
            "gender_accuracy": self.gender_accuracy,
            "per_class_accuracy": {t: {str(k): v for k, v in d.items()} for t, d in self.per_class_accuracy.items()},
            "confusion": {t: np.asarray(m).tolist() for t, m in self.confusion.items()},
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Metrics":
        return cls(
            age_accuracy=d.get("age_accuracy"),
            gender_accuracy=d.get("gender_accuracy"),
            per_class_accuracy={t: {int(k): v for k, v in m.items()} for t, m in d.get("per_class_accuracy", {}).items()},
            confusion={t: np.asarray(m, dtype=np.int64) for t, m in d.get("confusion", {}).items()},
            sample_count=int(d.get("sample_count", 0)),
            model=d.get("model", ""),
            data=d.get("data", ""),
        )


def metrics_from_predictions(predictions: Mapping[str, np.ndarray], labels: Mapping[str, np.ndarray], n: int) -> Metrics:
    m = Metrics(sample_count=n)
    for task, pred in predictions.items():
        y = np.asarray(labels[task])
        pred = np.asarray(pred)
        k = NUM_CLASSES[task]
        conf = np.zeros((k, k), dtype=np.int64)
        np.add.at(conf, (y, pred), 1)
        correct = int(np.trace(conf))
        acc = correct / n
        per_class = {c: (conf[c, c] / conf[c].sum()) for c in range(k) if conf[c].sum() > 0}
        m.confusion[task] = conf
        m.per_class_accuracy[task] = {c: float(v) for c, v in per_class.items()}
        if task == "age":
            m.age_accuracy = acc
        else:
            m.gender_accuracy = acc
    return m


def predict_proba(model: AgeGenderNet, data: Data, split: Optional[str] = "test"):
    """Softmax posteriors per task: ``(sample_ids, {task: (N, M) array}, pairs)``."""
    pairs = _split_pairs(_pairs(data, model.input_size), split)
    if not pairs:
        raise DataError(f"no samples in split {split!r}")
    with _EvalMode(model):
        out = _forward_batched(model, model.prepare_inputs(pairs))
        probs = {t: torch.softmax(out.logits(t).double(), dim=1).numpy() for t in model.tasks}
    return [p.sample_id for p in pairs], probs, pairs


def evaluate(model: AgeGenderNet, data: Data, split: Optional[str] = "test", tasks: Optional[Sequence[str]] = None) -> Metrics:
    """Accuracy, per-class accuracy and confusion per task, with dropout off.

    Tasks default to the model's heads that have labels for every sample.
    The model (weights, buffers, center banks, train/eval flags) is unchanged.
    """
    ids, probs, pairs = predict_proba(model, data, split)
    if tasks is None:
        tasks = [t for t in model.tasks if all(p.label(t) is not None for p in pairs)]
    preds = {t: probs[t].argmax(axis=1) for t in tasks}
    labels = {t: _labels(pairs, t).numpy() for t in tasks}
    m = metrics_from_predictions(preds, labels, len(pairs))
    m.model = model.spec.family
    m.data = model.modality if model.fusion_mode == "none" else model.fusion_mode
    return m


def score_fusion_metrics(
    ids_profile: Sequence[str],
    probs_profile: Mapping[str, np.ndarray],
    ids_ear: Sequence[str],
    probs_ear: Mapping[str, np.ndarray],
    labels: Mapping[str, np.ndarray],
    method: str,
) -> Metrics:
    """Per-sample max-confidence fusion of two models' posteriors, then accuracy."""
    if list(ids_profile) != list(ids_ear):
        raise DataError("score fusion needs both models evaluated on the same samples in the same order")
    if method not in METHODS:
        raise ConfigError(f"unknown confidence method {method!r}; expected one of {METHODS}")
    tasks = [t for t in labels if t in probs_profile and t in probs_ear]
    preds = {t: np.empty(len(ids_profile), dtype=np.int64) for t in tasks}
    audit = []
    for i, sid in enumerate(ids_profile):
        row = {"sample_id": sid}
        for t in tasks:
            d = fuse_decisions(
                ModelScore.from_raw("profile", probs_profile[t][i]),
                ModelScore.from_raw("ear", probs_ear[t][i]),
                method,
            )
            preds[t][i] = d.predicted_class
            row[t] = {"chosen": d.chosen_model_id, "conf_profile": d.confidence_a, "conf_ear": d.confidence_b}
        audit.append(row)
    m = metrics_from_predictions(preds, {t: labels[t] for t in tasks}, len(ids_profile))
    m.audit = audit
    return m


def evaluate_score_fusion(
    model_profile: AgeGenderNet,
    model_ear: AgeGenderNet,
    data: Data,
    method: str,
    split: Optional[str] = "test",
) -> Metrics:
    if model_profile.input_size != model_ear.input_size:
        pairs_p = _pairs(data, model_profile.input_size)
        pairs_e = _pairs(data, model_ear.input_size)
    else:
        pairs_p = pairs_e = _pairs(data, model_profile.input_size)
    ids_p, probs_p, pairs = predict_proba(model_profile, pairs_p, split)
    ids_e, probs_e, _ = predict_proba(model_ear, pairs_e, split)
    tasks = [t for t in model_profile.tasks if t in model_ear.tasks and all(p.label(t) is not None for p in pairs)]
    labels = {t: _labels(pairs, t).numpy() for t in tasks}
    m = score_fusion_metrics(ids_p, probs_p, ids_e, probs_e, labels, method)
    m.model = model_profile.spec.family
    m.data = f"score:{method}"
    return m


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainingHistory:
    epochs: list[dict] = field(default_factory=list)
    batches: list[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_score: Optional[float] = None

    CSV_FIELDS = (
        "epoch", "lr", "train_loss", "val_loss", "val_age_acc", "val_gender_acc",
        "train_age_acc", "train_gender_acc",
        "train_age_softmax", "train_age_center", "train_gender_softmax", "train_gender_center",
    )

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            for row in self.epochs:
                w.writerow({k: ("" if row.get(k) is None else row[k]) for k in self.CSV_FIELDS})
        return path


def task_weights(tasks: Sequence[str], beta: float) -> dict[str, float]:
    if set(tasks) == {"age", "gender"}:
        return {"age": beta, "gender": 1.0 - beta}
    return {t: 1.0 for t in tasks}


def _combine(totals: Mapping[str, torch.Tensor], tasks: Sequence[str], beta: float):
    if set(tasks) == {"age", "gender"}:
        return multitask_loss(totals["age"], totals["gender"], beta)
    return totals[tasks[0]]


def _module_matches(name: str, prefixes: Sequence[str]) -> bool:
    return any(name == p or name.startswith(p + ".") for p in prefixes)


def _snapshot(model: AgeGenderNet) -> dict:
    return {
        "state": copy.deepcopy(model.state_dict()),
        "banks": {t: b.clone() for t, b in model.center_banks.items()},
    }


def _restore(model: AgeGenderNet, snap: dict) -> None:
    model.load_state_dict(snap["state"])
    model.center_banks = {t: b.clone() for t, b in snap["banks"].items()}


def _set_dropout(model: nn.Module, rate: float) -> None:
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.p = rate


def _loss_components(out: HeadOutputs, labels, banks, tasks, lam, idx=None):
    comps = {}
    for t in tasks:
        y = labels[t] if idx is None else labels[t][idx]
        comps[t] = task_loss(out.logits(t), out.embedding(t), y, banks[t], lam)
    return comps


def train_stage(
    model: AgeGenderNet,
    data: Data,
    config: TrainingConfig,
    tasks: Optional[Sequence[str]] = None,
    layers_frozen: Sequence[str] = (),
) -> tuple[AgeGenderNet, TrainingHistory]:
    """Mini-batch gradient descent on the per-task softmax + center objective.

    Plain SGD (no momentum) with L2 weight decay and the stepped learning
    rate of :func:`lr_at_epoch`. Center banks move once per optimiser step.
    Parameters of ``layers_frozen`` (module-name prefixes) and of heads whose
    task weight is zero are left out of the optimiser entirely. If the data
    has a ``val`` split, the weights with the best mean validation accuracy
    are restored at the end.
    """
    tasks = tuple(model.tasks if tasks is None else tasks)
    missing = [t for t in tasks if t not in model.tasks]
    if missing:
        raise ConfigError(f"task(s) {missing} have no head in this model ({model.tasks})")
    pairs = _pairs(data, model.input_size)
    has_splits = any(p.split is not None for p in pairs)
    train_pairs = _split_pairs(pairs, "train") if has_splits else pairs
    val_pairs = _split_pairs(pairs, "val") if has_splits else []
    if not train_pairs:
        raise DataError("no training samples")
    labels = {t: _labels(train_pairs, t) for t in tasks}
    val_labels = {t: _labels(val_pairs, t) for t in tasks} if val_pairs else {}

    weights = task_weights(tasks, config.beta)
    active = [t for t in tasks if weights[t] > 0.0]
    idle_heads = [f"head.{t}" for t in model.tasks if t not in active]
    excluded = list(layers_frozen) + idle_heads
    params = [p for n, p in model.named_parameters() if not _module_matches(n.rsplit(".", 1)[0], excluded)]
    frozen_modules = [m for n, m in model.named_modules() if n and _module_matches(n, layers_frozen)]

    x_train = model.prepare_inputs(train_pairs)
    banks = ensure_center_banks(model, config.center_alpha, x_train, labels)
    for t in tasks:
        banks[t] = CenterBank(banks[t].centers, config.center_alpha)
    _set_dropout(model, config.dropout_rate)

    x_val = model.prepare_inputs(val_pairs) if val_pairs else None
    n = _length(x_train)
    batch_size = config.batch_size_for(model.fusion_mode)
    history = TrainingHistory()
    best = None
    requires_grad = {p: p.requires_grad for p in model.parameters()}
    param_ids = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in param_ids)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        order_gen = torch.Generator().manual_seed(config.seed)
        optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=0.0, weight_decay=config.weight_decay)
        try:
            for epoch in range(config.epochs):
                lr = lr_at_epoch(config, epoch)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                model.train()
                for m in frozen_modules:
                    m.eval()
                perm = torch.randperm(n, generator=order_gen)
                sums = {f"{t}_{k}": 0.0 for t in tasks for k in ("softmax", "center")}
                total_sum = 0.0
                for start in range(0, n, batch_size):
                    idx = perm[start : start + batch_size]
                    out = model(_take(x_train, idx))
                    comps = _loss_components(out, labels, model.center_banks, tasks, config.lambda_center, idx)
                    total = _combine({t: c.total for t, c in comps.items()}, tasks, config.beta)
                    optimizer.zero_grad(set_to_none=True)
                    total.backward()
                    optimizer.step()
                    for t in active:
                        model.center_banks[t] = update_centers(model.center_banks[t], out.embedding(t).detach(), labels[t][idx])
                    record = {"epoch": epoch, "size": len(idx), "total": float(total.detach()), "beta": config.beta}
                    for t, c in comps.items():
                        f = c.as_floats()
                        record[f"{t}_softmax"], record[f"{t}_center"] = f["softmax"], f["center"]
                        sums[f"{t}_softmax"] += f["softmax"] * len(idx)
                        sums[f"{t}_center"] += f["center"] * len(idx)
                    total_sum += record["total"] * len(idx)
                    history.batches.append(record)

                row = {"epoch": epoch, "lr": lr, "train_loss": total_sum / n}
                for key, s in sums.items():
                    row[f"train_{key}"] = s / n
                row.update(_epoch_eval(model, x_train, labels, tasks, "train"))
                if x_val is not None:
                    row.update(_epoch_eval(model, x_val, val_labels, tasks, "val", config))
                    score = float(np.mean([row[f"val_{t}_acc"] for t in tasks]))
                    if history.best_score is None or score > history.best_score:
                        history.best_score, history.best_epoch = score, epoch
                        best = _snapshot(model)
                history.epochs.append(row)
                logger.info("epoch %d lr %.2e loss %.4f", epoch, lr, row["train_loss"])
        finally:
            for p, flag in requires_grad.items():
                p.requires_grad_(flag)
    if best is not None:
        _restore(model, best)
    model.eval()
    return model, history


def _epoch_eval(model, inputs, labels, tasks, prefix, config: Optional[TrainingConfig] = None) -> dict:
    row = {}
    with _EvalMode(model):
        out = _forward_batched(model, inputs)
        for t in tasks:
            row[f"{prefix}_{t}_acc"] = float((out.logits(t).argmax(1) == labels[t]).double().mean())
        if config is not None:
            comps = _loss_components(out, labels, model.center_banks, tasks, config.lambda_center)
            row[f"{prefix}_loss"] = float(_combine({t: c.total for t, c in comps.items()}, tasks, config.beta))
    return row


# ---------------------------------------------------------------------------
# stage plans
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    data: Union[Data, str, Path]
    config: TrainingConfig
    tasks: tuple[str, ...] = ("age", "gender")
    layers_frozen: tuple[str, ...] = ()
    name: str = ""


@dataclass
class StagePlan:
    """Ordered fine-tuning stages applied to one model.

    The model is built from ``spec`` with heads for every task any stage
    uses; each stage starts from the weights the previous one ended with.
    """

    spec: BackboneSpec
    stages: list[Stage]
    fusion_mode: str = "none"
    modality: str = "profile"
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a stage plan needs at least one stage")

    @property
    def tasks(self) -> tuple[str, ...]:
        used = {t for s in self.stages for t in s.tasks}
        return tuple(t for t in ("age", "gender") if t in used)


def _resolve_stage_data(data) -> Data:
    if isinstance(data, (str, Path)):
        from .data import read_manifest

        path = Path(data)
        if not path.is_file():
            raise PipelineError(f"stage manifest not found: {path}")
        return read_manifest(path)
    return data


def run_stage_plan(
    plan: StagePlan,
    model: Optional[AgeGenderNet] = None,
    checkpoint_dir: Optional[str | Path] = None,
) -> AgeGenderNet:
    """Run every stage in order; returns the final model with stage provenance in ``model.metadata``.

    With ``checkpoint_dir`` each stage's result is written to
    ``stage_<i>.npz`` and the next stage is initialised from that file.
    """
    from .checkpoint import load_model, save_model

    if model is None:
        model = AgeGenderNet(plan.spec, plan.tasks, plan.fusion_mode, plan.modality, seed=plan.seed)
    provenance = list(model.metadata.get("stages", []))
    histories = []
    for i, stage in enumerate(plan.stages):
        if checkpoint_dir is not None and i > 0:
            ckpt = Path(checkpoint_dir) / f"stage_{i - 1}.npz"
            if not ckpt.is_file():
                raise PipelineError(f"checkpoint from stage {i - 1} missing: {ckpt}")
            model = load_model(ckpt)
        data = _resolve_stage_data(stage.data)
        model, history = train_stage(model, data, stage.config, stage.tasks, stage.layers_frozen)
        histories.append(history)
        provenance.append(
            {
                "index": i,
                "name": stage.name or f"stage_{i}",
                "source": getattr(data, "source_name", "pairs"),
                "tasks": list(stage.tasks),
                "epochs": stage.config.epochs,
                "best_epoch": history.best_epoch,
                "layers_frozen": list(stage.layers_frozen),
                "config": stage.config.to_dict(),
            }
        )
        model.metadata = {**model.metadata, "stages": provenance}
        if checkpoint_dir is not None:
            save_model(model, Path(checkpoint_dir) / f"stage_{i}.npz")
    model.histories = histories
    return model


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

MISSING = "—"


@dataclass
class Report:
    text: str
    csv: str

    def __str__(self) -> str:
        return self.text


def _fmt_acc(value: Optional[float]) -> str:
    return MISSING if value is None else f"{100.0 * value:.2f}%"


def report(metrics_list: Sequence[Metrics]) -> Report:
    """Aligned text table plus CSV, one row per result (model, data/fusion, age, gender)."""
    if not metrics_list:
        raise ValueError("nothing to report")
    unimodal = all(m.data in ("profile", "ear", "") for m in metrics_list)
    second = "Data" if unimodal else "Fusion"
    header = ["Model", second, "Age Acc.", "Gender Acc."]
    rows = [
        [m.model or MISSING, m.data or MISSING, _fmt_acc(m.age_accuracy), _fmt_acc(m.gender_accuracy)]
        for m in metrics_list
    ]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    rule = "-" * len(line(header))
    text = "\n".join([line(header), rule] + [line(r) for r in rows]) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", second.lower(), "age_accuracy", "gender_accuracy", "sample_count"])
    for m in metrics_list:
        w.writerow(
            [
                m.model,
                m.data,
                "" if m.age_accuracy is None else repr(m.age_accuracy),
                "" if m.gender_accuracy is None else repr(m.gender_accuracy),
                m.sample_count,
            ]
        )
    return Report(text, buf.getvalue())
