"""Two-modality prompted transformer: encoders, joint fusion module, classifier.

Weights live in a flat ``name -> ndarray`` dict so the checkpoint format and
the frozen-weight checksum can treat them uniformly.  Forward functions take
a mapping whose values are either arrays (frozen constants) or
:class:`~brimpr_lab.gradcore.Tensor` objects (trainable, used in pretraining).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

MODALITIES = ("a", "v")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_joint_layers: int = 2
    dim: int = 32
    heads: int = 2
    tokens: int = 8
    n_prompts: int = 10
    d_in: int = 16
    classes: int = 5
    mlp_ratio: int = 2

    def __post_init__(self):
        for name in ("n_layers", "n_joint_layers", "dim", "heads", "tokens", "d_in", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_prompts < 0:
            raise ValueError("n_prompts must be non-negative")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class MaskSpec:
    ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.ratio}")

    def kept(self, m: int) -> int:
        # tolerance absorbs float noise such as 10 * (1 - 0.7) = 3.0000000000000004
        return max(1, math.ceil(m * (1.0 - self.ratio) - 1e-9))


@dataclass
class EncoderOutput:
    tokens: Tensor                      # final layer output, prompt positions removed
    layers: list[Tensor]                # E_1 .. E_N
    pooled: list[Tensor]                # MeanPool(E_i), each (B, d)


@dataclass
class JointOutput:
    logits: Tensor
    feature: Tensor                     # MeanPool of the final (normalized) joint output
    pooled: list[Tensor] = field(default_factory=list)


@dataclass
class ModelBundle:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    prompts: dict[str, list[np.ndarray]]

    def frozen_checksum(self) -> str:
        return weights_checksum(self.weights)

    def prompt_tensors(self, requires_grad: bool = True) -> dict[str, list[Tensor]]:
        return {u: [Tensor(p, requires_grad=requires_grad, name=f"prompt/{u}/layer{i}")
                    for i, p in enumerate(ps)]
                for u, ps in self.prompts.items()}


def weights_checksum(weights: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights[name], dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- init

def _block_weights(prefix: str, d: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    def lin(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    w = {
        f"{prefix}/ln1/g": np.ones(d), f"{prefix}/ln1/b": np.zeros(d),
        f"{prefix}/ln2/g": np.ones(d), f"{prefix}/ln2/b": np.zeros(d),
        f"{prefix}/mlp/w1": lin(d, hidden), f"{prefix}/mlp/b1": np.zeros(hidden),
        f"{prefix}/mlp/w2": lin(hidden, d), f"{prefix}/mlp/b2": np.zeros(d),
    }
    for k in ("q", "k", "v", "o"):
        w[f"{prefix}/attn/w{k}"] = lin(d, d)
        w[f"{prefix}/attn/b{k}"] = np.zeros(d)
    return w


def init_weights(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, hidden = config.dim, config.dim * config.mlp_ratio
    w: dict[str, np.ndarray] = {}
    for u in MODALITIES:
        w[f"enc/{u}/embed/w"] = rng.normal(0.0, 1.0 / math.sqrt(config.d_in), size=(config.d_in, d))
        w[f"enc/{u}/embed/b"] = np.zeros(d)
        w[f"enc/{u}/pos"] = rng.normal(0.0, 0.02, size=(config.tokens, d))
        for i in range(config.n_layers):
            w.update(_block_weights(f"enc/{u}/layer{i}", d, hidden, rng))
    for i in range(config.n_joint_layers):
        w.update(_block_weights(f"joint/layer{i}", d, hidden, rng))
    w["joint/ln_f/g"] = np.ones(d)
    w["joint/ln_f/b"] = np.zeros(d)
    w["head/w"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, config.classes))
    w["head/b"] = np.zeros(config.classes)
    return w


def init_prompt_layer(config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    r = math.sqrt(6.0 / (config.dim + config.dim))
    return rng.uniform(-r, r, size=(config.n_prompts, config.dim))


def init_prompts(config: ModelConfig, rng: np.random.Generator) -> dict[str, list[np.ndarray]]:
    return {u: [init_prompt_layer(config, rng) for _ in range(config.n_layers)] for u in MODALITIES}


# ---------------------------------------------------------------- forward

def attention(x: Tensor, w: Mapping, prefix: str, heads: int) -> Tensor:
    B, T, d = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ w[f"{prefix}/wq"] + w[f"{prefix}/bq"])
    k = split(x @ w[f"{prefix}/wk"] + w[f"{prefix}/bk"])
    v = split(x @ w[f"{prefix}/wv"] + w[f"{prefix}/bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    out = gc.softmax(scores) @ v
    out = out.transpose(0, 2, 1, 3).reshape(B, T, d)
    return out @ w[f"{prefix}/wo"] + w[f"{prefix}/bo"]


def block(x: Tensor, w: Mapping, prefix: str, heads: int) -> Tensor:
    # post-norm residual block: prompts entering a layer are normalized together
    # with the tokens instead of being rescaled into the residual stream
    x = gc.layer_norm(x + attention(x, w, f"{prefix}/attn", heads), w[f"{prefix}/ln1/g"], w[f"{prefix}/ln1/b"])
    h = gc.gelu(x @ w[f"{prefix}/mlp/w1"] + w[f"{prefix}/mlp/b1"])
    h = h @ w[f"{prefix}/mlp/w2"] + w[f"{prefix}/mlp/b2"]
    return gc.layer_norm(x + h, w[f"{prefix}/ln2/g"], w[f"{prefix}/ln2/b"])



def encode(w: Mapping, config: ModelConfig, x, modality: str,
           prompts: Sequence | None = None, keep: np.ndarray | None = None) -> EncoderOutput:
    """Run encoder ``modality`` on raw tokens ``x`` of shape (B, m, d_in).

    ``prompts`` holds one (m_p, d) matrix per layer, prepended to that layer's
    input; their output positions are dropped.  ``keep`` (B, k) lists the
    token positions that survive masking; dropped tokens never enter the
    encoder, but kept tokens retain their positional embedding.
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    x = gc.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != config.d_in:
        raise gc.ShapeError(f"encoder {modality} expects (B, m, {config.d_in}) tokens, got {x.shape}")
    if x.shape[1] != config.tokens:
        raise gc.ShapeError(f"encoder {modality} expects {config.tokens} tokens, got {x.shape[1]}")
    p = f"enc/{modality}"
    e = x @ w[f"{p}/embed/w"] + w[f"{p}/embed/b"] + w[f"{p}/pos"]
    if keep is not None:
        keep = np.asarray(keep)
        e = gc.take(e, keep[:, :, None], axis=1)
    if prompts is not None and len(prompts) != config.n_layers:
        raise ValueError(f"expected {config.n_layers} prompt matrices, got {len(prompts)}")
    B, m, d = e.shape
    layers, pooled = [], []
    for i in range(config.n_layers):
        if prompts is not None:
            pr = gc.as_tensor(prompts[i])
            if pr.ndim != 2 or pr.shape[1] != d:
                raise gc.ShapeError(f"prompt layer {i} has shape {pr.shape}, expected (m_p, {d})")
            mp = pr.shape[0]
            seq = gc.concat([pr + np.zeros((B, mp, d)), e], axis=1)
            e = gc.slice_axis(block(seq, w, f"{p}/layer{i}", config.heads), mp, mp + m, axis=1)
        else:
            e = block(e, w, f"{p}/layer{i}", config.heads)
        layers.append(e)
        pooled.append(e.mean(axis=1))
    return EncoderOutput(tokens=e, layers=layers, pooled=pooled)


def fuse_and_classify(w: Mapping, config: ModelConfig, token_sets: Sequence[Tensor]) -> JointOutput:
    """Joint module over the token-axis concatenation of ``token_sets``, then the head.

    Passing a single modality's tokens gives the unimodal path.
    """
    if not token_sets:
        raise ValueError("need at least one token set")
    dims = {t.shape[-1] for t in token_sets}
    if dims != {config.dim}:
        raise gc.ShapeError(f"joint module expects token dim {config.dim}, got {sorted(dims)}")
    h = token_sets[0] if len(token_sets) == 1 else gc.concat(list(token_sets), axis=1)
    pooled = []
    for i in range(config.n_joint_layers):
        h = block(h, w, f"joint/layer{i}", config.heads)
        pooled.append(h.mean(axis=1))
    h = gc.layer_norm(h, w["joint/ln_f/g"], w["joint/ln_f/b"])
    feature = h.mean(axis=1)
    logits = feature @ w["head/w"] + w["head/b"]
    return JointOutput(logits=logits, feature=feature, pooled=pooled)


def forward_logits(bundle: ModelBundle, xa, xv, use_prompts: bool = True) -> np.ndarray:
    """Complete-pair logits as plain arrays; no gradient bookkeeping."""
    cfg, w = bundle.config, bundle.weights
    pa = bundle.prompts["a"] if use_prompts else None
    pv = bundle.prompts["v"] if use_prompts else None
    ea = encode(w, cfg, xa, "a", pa)
    ev = encode(w, cfg, xv, "v", pv)
    return fuse_and_classify(w, cfg, [ea.tokens, ev.tokens]).logits.data


# ---------------------------------------------------------------- masking

def mask_indices(m: int, spec: MaskSpec, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """Sorted kept positions: shape (k,) or (batch, k) with an independent draw per row."""
    k = spec.kept(m)
    if batch is None:
        return np.sort(rng.permutation(m)[:k])
    return np.sort(np.argsort(rng.random((batch, m)), axis=1)[:, :k], axis=1)


def mask_tokens(x: np.ndarray, spec: MaskSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Keep a uniformly random, order-preserving subset of the rows of ``x`` (m, d)."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    x = np.asarray(x)
    return x[mask_indices(x.shape[0], spec, rng)]
