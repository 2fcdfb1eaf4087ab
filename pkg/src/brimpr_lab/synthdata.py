"""Synthetic two-modality classification task, corruptions, streams and source pretraining."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .adapt import Adam
from .model import MODALITIES, ModelBundle, ModelConfig, fuse_and_classify, encode, init_prompts, init_weights
from .losses import iicl_loss
from .stats import SourceStatsBank, precompute_source_bank

log = logging.getLogger(__name__)

CORRUPTION_KINDS = ("gaussian-noise", "channel-scale", "token-dropout")

# severity 0..5
SEVERITY_TABLE = {
    "gaussian-noise": (0.0, 0.1, 0.2, 0.4, 0.8, 1.6),   # additive noise std
    "channel-scale": (0.0, 0.05, 0.1, 0.2, 0.4, 0.8),   # std of per-channel gain around 1
    "token-dropout": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),    # fraction of tokens zeroed
}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    classes: int = 5
    tokens: int = 8
    d_in: int = 16
    seed: int = 0
    separation: float = 1.0
    noise: float = 0.3

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.tokens < 1 or self.d_in < 1:
            raise ValueError("tokens and d_in must be positive")
        if self.noise < 0 or not self.separation > self.noise:
            raise ValueError(f"need separation > noise >= 0, got {self.separation} and {self.noise}")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "gaussian-noise"
    severity: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if self.severity not in range(6):
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def level(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity]


CLEAN = CorruptionSpec("gaussian-noise", 0)


@dataclass(frozen=True)
class StreamConfig:
    batch_size: int = 16
    n_batches: int = 100
    # modality -> ordered ((start_batch, spec), ...); the first entry must start at 0
    schedule: dict = field(default_factory=dict)
    seed: int = 0

    def spec_at(self, modality: str, batch: int) -> CorruptionSpec:
        current = CLEAN
        for start, spec in self.schedule.get(modality, ()):
            if start <= batch:
                current = spec
        return current


@dataclass
class Batch:
    """What the adaptation loop is allowed to see."""
    xa: np.ndarray
    xv: np.ndarray

    def __len__(self) -> int:
        return len(self.xa)


@dataclass
class Stream:
    batches: list[Batch]
    labels: list[np.ndarray]        # evaluator-only side channel
    specs: list[dict[str, CorruptionSpec]]


def _prototypes(spec: TaskSpec):
    rng = np.random.default_rng([spec.seed, 0xB41])
    # unit expected norm per token, so ``separation`` is the per-token class-signal size
    proto = rng.standard_normal((spec.classes, spec.tokens, spec.d_in)) / math.sqrt(spec.d_in)
    mix = {u: rng.standard_normal((spec.d_in, spec.d_in)) / math.sqrt(spec.d_in) for u in MODALITIES}
    return proto, mix


def gen_labeled(spec: TaskSpec, n: int, rng: np.random.Generator):
    """n samples: (xa, xv, y) with x* of shape (n, m, d_in).

    Both modalities see the same class prototype through their own fixed
    mixing matrix plus independent noise, so either alone is informative and
    their combination is more so.
    """
    proto, mix = _prototypes(spec)
    y = rng.integers(0, spec.classes, size=n)
    out = []
    for u in MODALITIES:
        clean = spec.separation * (proto[y] @ mix[u])
        out.append(clean + spec.noise * rng.standard_normal((n, spec.tokens, spec.d_in)))
    return out[0], out[1], y


def corrupt(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply one corruption to tokens of shape (n, m, d) or (m, d); severity 0 returns ``x`` unchanged."""
    if spec.kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind {spec.kind!r}")
    x = np.asarray(x, dtype=np.float64)
    level = spec.level
    if level == 0:
        return x.copy()
    if spec.kind == "gaussian-noise":
        return x + level * rng.standard_normal(x.shape)
    if spec.kind == "channel-scale":
        gains = 1.0 + level * rng.standard_normal(x.shape[:-2] + (1, x.shape[-1]))
        return x * gains
    m = x.shape[-2]
    n_drop = int(round(level * m))
    flat = x.reshape(-1, m, x.shape[-1]).copy()
    for row in flat:
        row[rng.permutation(m)[:n_drop]] = 0.0
    return flat.reshape(x.shape)


def gen_stream(task: TaskSpec, config: StreamConfig, rng: np.random.Generator | None = None) -> Stream:
    if rng is None:
        rng = np.random.default_rng(config.seed)
    batches, labels, specs = [], [], []
    for t in range(config.n_batches):
        xa, xv, y = gen_labeled(task, config.batch_size, rng)
        at = {u: config.spec_at(u, t) for u in MODALITIES}
        xa = corrupt(xa, at["a"], rng)
        xv = corrupt(xv, at["v"], rng)
        batches.append(Batch(xa, xv))
        labels.append(y)
        specs.append(at)
    return Stream(batches, labels, specs)


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    bundle: ModelBundle
    bank: SourceStatsBank
    clean_accuracy: float
    clean_accuracy_prompted: float
    source_xa: np.ndarray
    source_xv: np.ndarray
    losses: list[float]


def evaluate(bundle: ModelBundle, xa, xv, y, use_prompts: bool = False, batch: int = 256) -> float:
    from .model import forward_logits
    hits = 0
    for s in range(0, len(y), batch):
        logits = forward_logits(bundle, xa[s:s + batch], xv[s:s + batch], use_prompts=use_prompts)
        hits += int((logits.argmax(axis=1) == y[s:s + batch]).sum())
    return hits / len(y)


def pretrain_source(config: ModelConfig, task: TaskSpec, epochs: int, rng: np.random.Generator,
                    n_train: int = 2000, n_test: int = 1000, n_source: int = 32,
                    batch_size: int = 64, lr: float = 1e-3, contrastive_weight: float = 1.0,
                    contrastive_tau: float = 0.07) -> PretrainResult:
    """Supervised training of every weight (no prompts), then freeze and build the source bank.

    The objective is fused cross-entropy plus ``contrastive_weight`` times an
    audio-visual InfoNCE term on the unimodal joint features, so that the two
    modalities of one sample land near each other as in contrastively
    pretrained audio-visual backbones.  ``contrastive_weight=0`` gives plain
    cross-entropy training.
    """
    if config.tokens != task.tokens or config.d_in != task.d_in or config.classes != task.classes:
        raise ValueError("model config and task disagree on tokens / d_in / classes")
    weights = init_weights(config, rng)
    xa, xv, y = gen_labeled(task, n_train, rng)
    params = {k: gc.Tensor(v, requires_grad=True, name=k) for k, v in weights.items()}
    opt = Adam(lr=lr)
    losses = []
    onehot = np.eye(config.classes)
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        for s in range(0, n_train, batch_size):
            idx = order[s:s + batch_size]
            try:
                ea = encode(params, config, xa[idx], "a")
                ev = encode(params, config, xv[idx], "v")
                logits = fuse_and_classify(params, config, [ea.tokens, ev.tokens]).logits
                loss = -(gc.log(gc.softmax(logits) + 1e-12) * onehot[y[idx]]).sum(axis=1).mean()
                if contrastive_weight:
                    za = fuse_and_classify(params, config, [ea.tokens]).feature
                    zv = fuse_and_classify(params, config, [ev.tokens]).feature
                    loss = loss + iicl_loss(za, zv, contrastive_tau) * contrastive_weight
                grads = gc.backprop(loss, list(params.values()))
            except gc.NonFiniteError as exc:
                raise TrainingDivergedError(f"pretraining diverged at epoch {epoch}: {exc}") from exc
            opt.step({k: p.data for k, p in params.items()}, {k: grads[p] for k, p in params.items()})
            losses.append(loss.item())
        log.info("pretrain epoch %d loss %.4f", epoch, np.mean(losses[-(n_train // batch_size):]))
    frozen = {k: p.data.copy() for k, p in params.items()}
    bundle = ModelBundle(config, frozen, init_prompts(config, rng))
    sa, sv, _ = gen_labeled(task, n_source, rng)
    bank = precompute_source_bank(bundle, sa, sv)
    ta, tv, ty = gen_labeled(task, n_test, rng)
    acc = evaluate(bundle, ta, tv, ty)
    acc_prompted = evaluate(bundle, ta, tv, ty, use_prompts=True)
    return PretrainResult(bundle, bank, acc, acc_prompted, sa, sv, losses)
