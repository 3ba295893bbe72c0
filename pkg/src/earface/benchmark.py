"""Built-in toy benchmarks on synthetic paired data.

Two protocols, both small enough for a laptop CPU:

* :func:`fusion_benchmark` trains unimodal profile and ear models plus the
  requested fusion models on one synthetic set and reports test accuracy.
  The age cue is only in the profile image; the gender cue is strong in the
  ear and weak in the profile.
* :func:`staging_benchmark` compares training on a small target set from
  scratch against first fine-tuning on a larger proxy-domain set.

Toy runs use :func:`toy_config` rather than the full-scale defaults: a
randomly initialised network needs a larger step size and a lighter center
term than a pretrained one to learn in a few dozen epochs.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import pair_modalities
from .model import AgeGenderNet, BackboneSpec
from .pipeline import Metrics, Stage, StagePlan, TrainingConfig, evaluate, run_stage_plan, train_stage
from .synthetic import make_synthetic_dataset

TOY_SIZE = 32
TOY_SPEC = BackboneSpec(
    family="vgg_like",
    width_scale=0.125,
    input_size=(TOY_SIZE, TOY_SIZE),
    stage_layout=(1, 1, 1),
    embedding_dim=256,
)


def toy_config(seed: int = 0, epochs: int = 30, **overrides) -> TrainingConfig:
    """Training settings for the toy benchmarks (SGD, lr 0.02, lambda 0.01, dropout 0.5)."""
    values = dict(
        learning_rate=0.02,
        lr_decay_epochs=max(1, int(epochs * 0.8)),
        lambda_center=0.01,
        dropout_rate=0.5,
        epochs=epochs,
        seed=seed,
    )
    values.update(overrides)
    return TrainingConfig(**values)


@dataclass
class BenchmarkResult:
    # one {run name: Metrics} dict per seed
    runs: list[dict[str, Metrics]] = field(default_factory=list)

    def mean_accuracy(self, name: str) -> float:
        return float(np.mean([r[name].mean_accuracy() for r in self.runs]))

    def names(self) -> list[str]:
        return list(self.runs[0]) if self.runs else []

    def summary(self) -> dict[str, float]:
        return {name: self.mean_accuracy(name) for name in self.names()}


def _workdir(root: Optional[str | Path]) -> Path:
    return Path(root) if root is not None else Path(tempfile.mkdtemp(prefix="earface-bench-"))


def fusion_benchmark(
    seeds: Sequence[int] = (0, 1, 2),
    fusion_modes: Sequence[str] = ("spatial", "feature"),
    n: int = 400,
    epochs: int = 60,
    spec: BackboneSpec = TOY_SPEC,
    workdir: Optional[str | Path] = None,
) -> BenchmarkResult:
    """Unimodal ``profile``/``ear`` runs and one run per fusion mode, for each seed.

    Every run gets the same ``epochs`` budget. Spatial fusion squeezes each
    modality to half width and needs roughly 60 epochs to pick up the ear's
    gender cue.
    """
    root = _workdir(workdir)
    result = BenchmarkResult()
    for seed in seeds:
        manifest = make_synthetic_dataset(root / f"fusion_{seed}", n, seed=seed, size=spec.input_size[0])
        pairs = pair_modalities(manifest, spec.input_size).pairs
        runs = [("profile", "none", "profile"), ("ear", "none", "ear")]
        runs += [(mode, mode, "profile") for mode in fusion_modes]
        metrics = {}
        for name, mode, modality in runs:
            model = AgeGenderNet(spec, fusion_mode=mode, modality=modality, seed=seed)
            model, _ = train_stage(model, pairs, toy_config(seed, epochs))
            metrics[name] = evaluate(model, pairs, "test")
        result.runs.append(metrics)
    return result


def staging_benchmark(
    seeds: Sequence[int] = (0, 1, 2),
    n_target: int = 60,
    n_proxy: int = 400,
    epochs: int = 30,
    fusion_mode: str = "spatial",
    spec: BackboneSpec = TOY_SPEC,
    workdir: Optional[str | Path] = None,
) -> BenchmarkResult:
    """Target validation accuracy of a one-stage run versus proxy-then-target.

    Run names are ``single`` and ``two_stage``.
    """
    root = _workdir(workdir)
    result = BenchmarkResult()
    for seed in seeds:
        size = spec.input_size[0]
        target = make_synthetic_dataset(root / f"target_{seed}", n_target, seed=seed, size=size, ratios=(0.6, 0.2, 0.2))
        proxy = make_synthetic_dataset(root / f"proxy_{seed}", n_proxy, seed=100 + seed, size=size, domain="proxy")
        cfg = toy_config(seed, epochs)
        single = run_stage_plan(StagePlan(spec, [Stage(target, cfg, name="target")], fusion_mode, seed=seed))
        staged = run_stage_plan(
            StagePlan(spec, [Stage(proxy, cfg, name="proxy"), Stage(target, cfg, name="target")], fusion_mode, seed=seed)
        )
        result.runs.append({"single": evaluate(single, target, "val"), "two_stage": evaluate(staged, target, "val")})
    return result
