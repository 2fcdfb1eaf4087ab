"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .adapt import AdaptConfig
from .model import ModelConfig
from .synthdata import CORRUPTION_KINDS, CorruptionSpec, StreamConfig, TaskSpec


class ConfigError(ValueError):
    pass


def _opt(default, doc: str, ref: str | None = None):
    return field(default=default, metadata={"doc": doc, "ref": ref})


@dataclass(frozen=True)
class RunConfig:
    seed: int = _opt(0, "global seed (BRIMPR_SEED env var when unset)")
    # model
    layers: int = _opt(2, "transformer layers per modality encoder")
    joint_layers: int = _opt(2, "layers in the joint fusion module")
    dim: int = _opt(32, "token dimension")
    heads: int = _opt(2, "attention heads")
    tokens: int = _opt(8, "tokens per modality")
    prompts: int = _opt(10, "prompts per layer", "10 prompts per layer")
    d_in: int = _opt(16, "raw token feature width")
    classes: int = _opt(5, "number of classes")
    # task and pretraining
    separation: float = _opt(1.0, "per-token class-signal norm")
    noise: float = _opt(0.3, "intra-class noise std")
    task_seed: int = _opt(0, "seed of the class prototypes and mixing matrices")
    pretrain_epochs: int = _opt(20, "pretraining epochs")
    pretrain_lr: float = _opt(1e-3, "pretraining Adam learning rate")
    pretrain_batch: int = _opt(64, "pretraining batch size")
    contrastive_weight: float = _opt(1.0, "weight of the audio-visual InfoNCE term in pretraining")
    n_train: int = _opt(2000, "labelled pretraining samples")
    n_test: int = _opt(1000, "clean held-out samples for source accuracy")
    n_source: int = _opt(32, "unlabelled source samples for the statistics bank", "32 source samples")
    # adaptation
    mask_ratio: float = _opt(0.5, "token mask ratio for the recombination loss", "0.5")
    tau0: float = _opt(0.2, "adaptive temperature range", "0.2")
    d0: float = _opt(5.0, "adaptive temperature midpoint", "5")
    tau: float = _opt(0.07, "contrastive temperature (0.25 for two-modality shift)", "0.07 / 0.25")
    lr: float = _opt(1e-4, "prompt Adam learning rate", "1e-4")
    batch_size: int = _opt(16, "test batch size (reference setting 64)", "64")
    n_batches: int = _opt(100, "batches in the test stream")
    schedule_a: str = _opt("clean", "corruption schedule for modality a, e.g. 0@clean,20@gaussian-noise:5")
    schedule_v: str = _opt("clean", "corruption schedule for modality v")
    stream_seed: int = _opt(1, "seed of the test stream")
    adapt: bool = _opt(True, "update prompts (false = frozen inference)")
    max_adapt_batches: int = _opt(-1, "stop updating after this many batches (-1 = never)")
    continual: bool = _opt(False, "enable the drift detector with prompt re-initialization")
    window: int = _opt(10, "drift detector window", "w = 10")
    k: float = _opt(5.0, "drift detector z-score threshold", "k = 5")
    detector_eps: float = _opt(1e-8, "drift detector std floor")
    swap_lambdas: bool = _opt(False, "swap the two recombination weights (ablation)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.layers, n_joint_layers=self.joint_layers, dim=self.dim,
                           heads=self.heads, tokens=self.tokens, n_prompts=self.prompts,
                           d_in=self.d_in, classes=self.classes)

    def task_spec(self) -> TaskSpec:
        return TaskSpec(classes=self.classes, tokens=self.tokens, d_in=self.d_in, seed=self.task_seed,
                        separation=self.separation, noise=self.noise)

    def stream_config(self) -> StreamConfig:
        return StreamConfig(self.batch_size, self.n_batches,
                            {"a": parse_schedule(self.schedule_a), "v": parse_schedule(self.schedule_v)},
                            self.stream_seed)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(mask_ratio=self.mask_ratio, tau0=self.tau0, d0=self.d0, tau=self.tau, lr=self.lr,
                           adapt=self.adapt,
                           max_adapt_batches=None if self.max_adapt_batches < 0 else self.max_adapt_batches,
                           continual=self.continual, window=self.window, k=self.k,
                           detector_eps=self.detector_eps, swap_lambdas=self.swap_lambdas, seed=self.seed)


FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_schedule(text: str) -> tuple:
    """``0@clean,20@gaussian-noise:5`` -> ((0, spec), (20, spec)); a bare ``kind:sev`` starts at 0."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        start, _, body = part.rpartition("@")
        try:
            start_i = int(start) if start else 0
        except ValueError:
            raise ConfigError(f"bad schedule start in {part!r}") from None
        if body == "clean":
            spec = CorruptionSpec("gaussian-noise", 0)
        else:
            kind, _, sev = body.partition(":")
            if kind not in CORRUPTION_KINDS:
                raise ConfigError(f"unknown corruption kind {kind!r} in schedule")
            try:
                spec = CorruptionSpec(kind, int(sev))
            except ValueError as exc:
                raise ConfigError(f"bad schedule entry {part!r}: {exc}") from None
        out.append((start_i, spec))
    if [s for s, _ in out] != sorted(s for s, _ in out):
        raise ConfigError(f"schedule starts must be increasing: {text!r}")
    return tuple(out)


def convert(name: str, raw) -> object:
    if name not in FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    kind = FIELDS[name].type
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name} ({kind})") from None
    return raw.strip()


def parse_config_text(text: str) -> dict[str, object]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key = key.strip().replace("-", "_")
        values[key] = convert(key, value.strip())
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = convert(k, v)
    if "seed" not in values and os.environ.get("BRIMPR_SEED"):
        values["seed"] = convert("seed", os.environ["BRIMPR_SEED"])
    cfg = RunConfig(**values)
    try:
        cfg.model_config(), cfg.task_spec(), cfg.stream_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {str(getattr(cfg, f.name)).lower() if f.type == 'bool' else getattr(cfg, f.name)}\n"
                   for f in fields(cfg))


__all__ = ["RunConfig", "ConfigError", "load_config", "parse_schedule", "dump_config", "replace"]
