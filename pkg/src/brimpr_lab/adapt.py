"""Online prompt adaptation: Adam, the per-batch step, the stream loop and the drift detector."""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import gradcore as gc
from .losses import (DiscReport, LossBreakdown, calibrated_pseudo_label, cmer_loss, compute_disc_report,
                     iicl_loss, pmgfa_terms, total_loss)
from .model import MODALITIES, MaskSpec, ModelBundle, encode, fuse_and_classify, init_prompt_layer, mask_indices
from .stats import SourceStatsBank, disc, layer_stats

log = logging.getLogger(__name__)

CSV_COLUMNS = ("batch_idx", "acc_batch", "acc_cum", "loss_total", "loss_pmgfa", "loss_cmer", "loss_iicl",
               "disc_a", "disc_v", "disc_j", "lambda_a", "ada_tp", "shift_a", "shift_v")


class Adam:
    """Bias-corrected Adam with a separate step count per parameter key.

    Per-key counts let one parameter group be reset (moments zeroed, count
    back to 0) without disturbing the others.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: dict, grads: dict, keys: Iterable | None = None) -> bool:
        """Update ``params`` in place.  Returns False (and changes nothing) if any gradient is non-finite."""
        keys = list(params if keys is None else keys)
        for k in keys:
            if grads[k].shape != params[k].shape:
                raise ValueError(f"gradient shape {grads[k].shape} != parameter shape {params[k].shape} for {k}")
        if not all(np.all(np.isfinite(grads[k])) for k in keys):
            return False
        for k in keys:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1**t)
            v_hat = self.v[k] / (1 - self.beta2**t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True

    def reset(self, keys: Iterable) -> None:
        for k in keys:
            self.m.pop(k, None)
            self.v.pop(k, None)
            self.t.pop(k, None)


def adam_update(params: dict, grads: dict, state: Adam) -> bool:
    return state.step(params, grads)


class ShiftDetector:
    """Sliding-window z-score test on one modality's discrepancy series."""

    def __init__(self, window: int = 10, k: float = 5.0, eps: float = 1e-8):
        if window < 2:
            raise ValueError("window must hold at least 2 values")
        self.window = window
        self.k = k
        self.eps = eps
        self.buffer: deque[float] = deque(maxlen=window)

    def update(self, value: float) -> bool:
        fired = False
        if len(self.buffer) == self.window:
            vals = np.fromiter(self.buffer, dtype=np.float64)
            z = (value - vals.mean()) / max(vals.std(), self.eps)
            fired = bool(z > self.k)
        self.buffer.append(float(value))
        return fired


def detect_shift(detectors: dict[str, ShiftDetector], discs: dict[str, float]) -> dict[str, bool]:
    return {u: detectors[u].update(discs[u]) for u in detectors}


@dataclass(frozen=True)
class AdaptConfig:
    mask_ratio: float = 0.5
    tau0: float = 0.2
    d0: float = 5.0
    tau: float = 0.07
    lr: float = 1e-4
    adapt: bool = True
    max_adapt_batches: int | None = None
    continual: bool = False
    window: int = 10
    k: float = 5.0
    detector_eps: float = 1e-8
    swap_lambdas: bool = False
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0


@dataclass
class StepRecord:
    batch_idx: int
    n: int
    correct: int | None
    losses: LossBreakdown | None
    report: DiscReport | None
    shift_a: bool = False
    shift_v: bool = False
    updated: bool = False
    note: str = ""

    @property
    def acc_batch(self) -> float | None:
        return None if self.correct is None else self.correct / self.n


@dataclass
class AdaptationState:
    optimizer: Adam
    rng: np.random.Generator
    detectors: dict[str, ShiftDetector]
    steps: int = 0

    @classmethod
    def fresh(cls, config: AdaptConfig) -> "AdaptationState":
        return cls(Adam(lr=config.lr), np.random.default_rng(config.seed),
                   {u: ShiftDetector(config.window, config.k, config.detector_eps) for u in MODALITIES})


@dataclass
class StepGraph:
    """Everything one forward pass produces."""
    logits: np.ndarray
    losses: LossBreakdown
    report: DiscReport
    prompts: dict[str, list[gc.Tensor]] | None


def forward_losses(bundle: ModelBundle, bank: SourceStatsBank, xa, xv, config: AdaptConfig,
                   rng: np.random.Generator, use_prompts: bool = True,
                   fixed: tuple[DiscReport, np.ndarray] | None = None) -> StepGraph:
    """One full forward pass of the method on a batch.

    ``fixed`` supplies the detached (report, pseudo-label) pair instead of
    recomputing it; finite-difference checks use this so that the numeric
    derivative sees the same constants as backprop.
    """
    cfg, w = bundle.config, bundle.weights
    B = len(xa)
    prompts = bundle.prompt_tensors() if use_prompts else None
    pa = prompts["a"] if prompts else None
    pv = prompts["v"] if prompts else None
    spec = MaskSpec(config.mask_ratio)
    keep_a = mask_indices(cfg.tokens, spec, rng, B)
    keep_v = mask_indices(cfg.tokens, spec, rng, B)

    ea = encode(w, cfg, xa, "a", pa)
    ev = encode(w, cfg, xv, "v", pv)
    ea_m = encode(w, cfg, xa, "a", pa, keep=keep_a)
    ev_m = encode(w, cfg, xv, "v", pv, keep=keep_v)
    j_av = fuse_and_classify(w, cfg, [ea.tokens, ev.tokens])
    j_amv = fuse_and_classify(w, cfg, [ea_m.tokens, ev.tokens])
    j_avm = fuse_and_classify(w, cfg, [ea.tokens, ev_m.tokens])

    terms = pmgfa_terms(bank, {"a": layer_stats(ea.pooled), "v": layer_stats(ev.pooled)})
    pmgfa = terms["a"] + terms["v"]
    if fixed is None:
        disc_j = disc(bank["j"], layer_stats([z.data for z in j_av.pooled])).item()
        report = compute_disc_report(terms["a"].item(), terms["v"].item(), disc_j,
                                     config.tau0, config.d0, config.swap_lambdas)
        pseudo = calibrated_pseudo_label(j_av.logits, report.ada_tp)
    else:
        report, pseudo = fixed
    cmer = cmer_loss(gc.softmax(j_amv.logits), gc.softmax(j_avm.logits), pseudo, report)

    za = fuse_and_classify(w, cfg, [ea.tokens]).feature
    zv = fuse_and_classify(w, cfg, [ev.tokens]).feature
    iicl = iicl_loss(za, zv, config.tau)
    losses = total_loss(pmgfa, cmer, iicl, config.loss_weights)
    return StepGraph(j_av.logits.data, losses, report, prompts)


def reset_prompts(bundle: ModelBundle, modality: str, rng: np.random.Generator, optimizer: Adam | None = None) -> None:
    """Redraw one modality's prompts from the init distribution and forget their Adam moments."""
    bundle.prompts[modality] = [init_prompt_layer(bundle.config, rng) for _ in bundle.prompts[modality]]
    if optimizer is not None:
        optimizer.reset([(modality, i) for i in range(len(bundle.prompts[modality]))])


def _inference(bundle: ModelBundle, xa, xv, use_prompts: bool) -> np.ndarray:
    cfg, w = bundle.config, bundle.weights
    ea = encode(w, cfg, xa, "a", bundle.prompts["a"] if use_prompts else None)
    ev = encode(w, cfg, xv, "v", bundle.prompts["v"] if use_prompts else None)
    return fuse_and_classify(w, cfg, [ea.tokens, ev.tokens]).logits.data


def adapt_step(bundle: ModelBundle, bank: SourceStatsBank, batch, config: AdaptConfig,
               state: AdaptationState, labels: np.ndarray | None = None):
    """Predict on ``batch`` with the current prompts, then take one optimizer step on the prompts.

    ``labels`` are used only to score the predictions after they are made.
    """
    idx = state.steps
    state.steps += 1
    xa, xv = batch.xa, batch.xv
    B = len(xa)
    adapting = config.adapt and (config.max_adapt_batches is None or idx < config.max_adapt_batches)

    def score(pred):
        return None if labels is None else int((pred == np.asarray(labels)).sum())

    if B < 2:
        pred = _inference(bundle, xa, xv, use_prompts=True).argmax(axis=1)
        return pred, StepRecord(idx, B, score(pred), None, None, note="batch too small; inference only")

    try:
        graph = forward_losses(bundle, bank, xa, xv, config, state.rng, use_prompts=True)
    except gc.NonFiniteError as exc:
        log.warning("batch %d: non-finite forward (%s); inference only", idx, exc)
        pred = _inference(bundle, xa, xv, use_prompts=True).argmax(axis=1)
        return pred, StepRecord(idx, B, score(pred), None, None, note="non-finite forward")
    pred = graph.logits.argmax(axis=1)
    rec = StepRecord(idx, B, score(pred), replace(graph.losses, tensor=None), graph.report)

    shifts = {u: False for u in MODALITIES}
    if config.continual and config.adapt:
        shifts = detect_shift(state.detectors, {"a": graph.report.disc_a, "v": graph.report.disc_v})
        rec.shift_a, rec.shift_v = shifts["a"], shifts["v"]

    if adapting:
        flat = [(u, i) for u in MODALITIES for i in range(len(graph.prompts[u]))]
        tensors = [graph.prompts[u][i] for u, i in flat]
        grads = gc.backprop(graph.losses.tensor, tensors)
        keys = [key for key in flat if not shifts[key[0]]]
        params = {key: bundle.prompts[key[0]][key[1]] for key in flat}
        rec.updated = state.optimizer.step(params, {key: grads[t] for key, t in zip(flat, tensors)}, keys)
        if not rec.updated:
            rec.note = "non-finite gradient; step skipped"
    for u in MODALITIES:
        if shifts[u]:
            reset_prompts(bundle, u, state.rng, state.optimizer)
    return pred, rec


@dataclass
class RunResult:
    records: list[StepRecord]
    summary: dict = field(default_factory=dict)


def summarize(records: Sequence[StepRecord]) -> dict:
    n = sum(r.n for r in records)
    scored = [r for r in records if r.correct is not None]
    acc = sum(r.correct for r in scored) / sum(r.n for r in scored) if scored else None
    discs = [r.report.disc_a + r.report.disc_v for r in records if r.report is not None]
    k = max(1, int(round(0.2 * len(discs)))) if discs else 0
    return {
        "n_batches": len(records),
        "n_samples": n,
        "acc_adapted": acc,
        "mean_disc_first_20pct": float(np.mean(discs[:k])) if discs else 0.0,
        "mean_disc_last_20pct": float(np.mean(discs[-k:])) if discs else 0.0,
        "shifts_detected": {"a": [r.batch_idx for r in records if r.shift_a],
                            "v": [r.batch_idx for r in records if r.shift_v]},
        "updates": sum(r.updated for r in records),
        "threads": 1,
    }


def run_stream(bundle: ModelBundle, bank: SourceStatsBank, batches: Iterable, config: AdaptConfig,
               labels: Sequence[np.ndarray] | None = None, state: AdaptationState | None = None) -> RunResult:
    """Process batches strictly in order; each batch is predicted before the prompts learn from it."""
    state = state or AdaptationState.fresh(config)
    records = []
    for t, batch in enumerate(batches):
        _, rec = adapt_step(bundle, bank, batch, config, state, None if labels is None else labels[t])
        records.append(rec)
    summary = summarize(records)
    if summary["acc_adapted"] is None:
        summary["acc_adapted"] = 0.0
    return RunResult(records, summary)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def metrics_rows(records: Sequence[StepRecord]) -> list[list[str]]:
    rows = []
    hits = seen = 0
    for r in records:
        if r.correct is not None:
            hits += r.correct
            seen += r.n
        L, D = r.losses, r.report
        rows.append([_fmt(v) for v in (
            r.batch_idx, r.acc_batch, hits / seen if seen else None,
            L and L.total, L and L.pmgfa, L and L.cmer, L and L.iicl,
            D and D.disc_a, D and D.disc_v, D and D.disc_j, D and D.lambda_a, D and D.ada_tp,
            r.shift_a, r.shift_v)])
    return rows


def write_metrics_csv(path, records: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        wr.writerows(metrics_rows(records))
