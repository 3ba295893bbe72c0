"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Keys fall into three groups:

training
    every :class:`~earface.pipeline.TrainingConfig` field (``learning_rate``,
    ``lr_decay_factor``, ``lr_decay_epochs``, ``weight_decay``,
    ``lambda_center``, ``beta``, ``dropout_rate``, ``batch_size``, ``epochs``,
    ``seed``, ``center_alpha``)
backbone
    ``family``, ``width_scale``, ``embedding_dim``, ``input_size`` (``HxW``),
    ``stage_layout`` (comma list), ``stem``, ``pretrained_weights``
run
    ``manifest``, ``fusion``, ``tasks`` (comma list), ``modality``,
    ``layers_frozen`` (comma list), and optional earlier stages given as
    ``stage.<name>.manifest`` / ``.epochs`` / ``.tasks`` / ``.layers_frozen``
    in the order they should run; the main ``manifest`` stage runs last.

Command-line flags override file values; :func:`dump` writes the resolved
result back in the same format.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigError
from .model import FUSION_MODES, MODALITIES, TASKS, BackboneSpec
from .pipeline import Stage, StagePlan, TrainingConfig

TRAINING_KEYS = tuple(f.name for f in fields(TrainingConfig))
BACKBONE_KEYS = ("family", "width_scale", "embedding_dim", "input_size", "stage_layout", "stem", "pretrained_weights")
RUN_KEYS = ("manifest", "fusion", "tasks", "modality", "layers_frozen")
STAGE_KEYS = ("manifest", "epochs", "tasks", "layers_frozen")
_SECTION = "run"


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` text into an ordered dict of strings."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if parser.sections() != [_SECTION]:
        raise ConfigError(f"{source}: sections are not allowed in a flat config")
    values = dict(parser[_SECTION])
    for key in values:
        if not _known(key):
            raise ConfigError(f"{source}: unknown key {key!r}")
    return values


def load(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, str(path))


def _known(key: str) -> bool:
    if key in TRAINING_KEYS or key in BACKBONE_KEYS or key in RUN_KEYS:
        return True
    parts = key.split(".")
    return len(parts) == 3 and parts[0] == "stage" and parts[2] in STAGE_KEYS


def _csv(text: Any) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(t) for t in text)
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def _size(text: Any) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        return int(text[0]), int(text[1])
    try:
        h, w = str(text).lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"input_size must look like 224x224, got {text!r}") from None


@dataclass
class RunConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    spec: BackboneSpec = field(default_factory=BackboneSpec)
    manifest: Optional[str] = None
    fusion: str = "none"
    tasks: tuple[str, ...] = TASKS
    modality: str = "profile"
    layers_frozen: tuple[str, ...] = ()
    # (name, {manifest, epochs, tasks, layers_frozen}) in run order
    stages: list[tuple[str, dict]] = field(default_factory=list)

    def validate(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"invalid fusion mode {self.fusion!r}; choose from {{{', '.join(FUSION_MODES)}}}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"invalid modality {self.modality!r}; choose from {{{', '.join(MODALITIES)}}}")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad or not self.tasks:
            raise ConfigError(f"invalid tasks {list(self.tasks)}; choose from {list(TASKS)}")

    def stage_plan(self) -> StagePlan:
        if self.manifest is None:
            raise ConfigError("no manifest given")
        stages = []
        for name, opts in self.stages:
            if "manifest" not in opts:
                raise ConfigError(f"stage {name!r} has no manifest")
            cfg = self.training if "epochs" not in opts else replace(self.training, epochs=int(opts["epochs"]))
            stages.append(
                Stage(
                    opts["manifest"],
                    cfg,
                    _csv(opts.get("tasks", ",".join(self.tasks))),
                    _csv(opts.get("layers_frozen", "")),
                    name,
                )
            )
        stages.append(Stage(self.manifest, self.training, self.tasks, self.layers_frozen, "main"))
        return StagePlan(self.spec, stages, self.fusion, self.modality, self.training.seed)

    def to_flat(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for k, v in self.training.to_dict().items():
            out[k] = "auto" if v is None else str(v)
        s = self.spec
        out["family"] = s.family
        out["width_scale"] = str(s.width_scale)
        out["embedding_dim"] = "auto" if s.embedding_dim is None else str(s.embedding_dim)
        out["input_size"] = f"{s.input_size[0]}x{s.input_size[1]}"
        out["stage_layout"] = "auto" if s.stage_layout is None else ",".join(map(str, s.stage_layout))
        out["stem"] = s.stem
        out["pretrained_weights"] = s.pretrained_weights_ref or "none"
        out["manifest"] = self.manifest or "none"
        out["fusion"] = self.fusion
        out["tasks"] = ",".join(self.tasks)
        out["modality"] = self.modality
        out["layers_frozen"] = ",".join(self.layers_frozen)
        for name, opts in self.stages:
            for k, v in opts.items():
                out[f"stage.{name}.{k}"] = str(v)
        return out


def _optional(text: Any) -> Optional[str]:
    if text is None:
        return None
    text = str(text).strip()
    return None if text.lower() in ("", "none", "auto") else text


def resolve(values: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Build a :class:`RunConfig` from file values with non-``None`` overrides applied on top."""
    merged = dict(values)
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    for key in merged:
        if not _known(key):
            raise ConfigError(f"unknown key {key!r}")

    training = TrainingConfig.from_mapping({k: merged[k] for k in TRAINING_KEYS if k in merged})

    spec_kwargs: dict[str, Any] = {}
    try:
        if "family" in merged:
            spec_kwargs["family"] = str(merged["family"])
        if "width_scale" in merged:
            spec_kwargs["width_scale"] = float(merged["width_scale"])
        if _optional(merged.get("embedding_dim")) is not None:
            spec_kwargs["embedding_dim"] = int(merged["embedding_dim"])
        if "input_size" in merged:
            spec_kwargs["input_size"] = _size(merged["input_size"])
        if _optional(merged.get("stage_layout")) is not None:
            spec_kwargs["stage_layout"] = tuple(int(v) for v in _csv(merged["stage_layout"]))
        if "stem" in merged:
            spec_kwargs["stem"] = str(merged["stem"])
    except ValueError as exc:
        raise ConfigError(f"bad backbone setting: {exc}") from None
    spec_kwargs["pretrained_weights_ref"] = _optional(merged.get("pretrained_weights"))
    spec_kwargs["dropout_rate"] = training.dropout_rate
    spec = BackboneSpec(**spec_kwargs)

    stages: dict[str, dict] = {}
    for key, v in merged.items():
        if key.startswith("stage."):
            _, name, opt = key.split(".")
            stages.setdefault(name, {})[opt] = v

    run = RunConfig(
        training=training,
        spec=spec,
        manifest=_optional(merged.get("manifest")),
        fusion=str(merged.get("fusion", "none")),
        tasks=_csv(merged.get("tasks", ",".join(TASKS))),
        modality=str(merged.get("modality", "profile")),
        layers_frozen=_csv(merged.get("layers_frozen", "")),
        stages=list(stages.items()),
    )
    run.validate()
    return run


def dump(values: Mapping[str, Any], path: str | Path, header: str = "") -> Path:
    """Write a flat config (e.g. a resolved-run snapshot) readable by :func:`load`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {line}" for line in header.splitlines()] if header else []
    lines += [f"{k} = {v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
