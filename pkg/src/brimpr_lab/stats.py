"""Gaussian moment estimation, the mean+std discrepancy, source statistics,
and the diagonal-vs-full covariance error analysis."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .model import MODALITIES, ModelBundle, encode, fuse_and_classify

PSD_TOL = 1e-10


@dataclass
class LayerGaussianStats:
    mean: Tensor | np.ndarray
    std: Tensor | np.ndarray

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return _arr(self.mean), _arr(self.std)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class SourceStatsBank:
    """Per-layer source statistics: keys ``a``, ``v`` (encoders) and ``j`` (joint module)."""
    layers: dict[str, list[LayerGaussianStats]]

    def __getitem__(self, key: str) -> list[LayerGaussianStats]:
        return self.layers[key]

    def to_named(self) -> dict[str, np.ndarray]:
        out = {}
        for key, stats in self.layers.items():
            for i, s in enumerate(stats):
                mu, sd = s.arrays()
                out[f"stats/{key}/layer{i}/mean"] = mu.copy()
                out[f"stats/{key}/layer{i}/std"] = sd.copy()
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray]) -> "SourceStatsBank":
        layers: dict[str, list[LayerGaussianStats]] = {}
        for key in ("a", "v", "j"):
            i = 0
            while f"stats/{key}/layer{i}/mean" in named:
                layers.setdefault(key, []).append(LayerGaussianStats(
                    named[f"stats/{key}/layer{i}/mean"], named[f"stats/{key}/layer{i}/std"]))
                i += 1
        return cls(layers)


def batch_stats(features) -> LayerGaussianStats:
    """Column mean and Bessel-corrected std of a (B, d) batch.

    Returns tensors when given a tensor (so gradients reach the features).
    """
    f = gc.as_tensor(features)
    if f.ndim != 2:
        raise gc.ShapeError(f"batch_stats expects (B, d) features, got {f.shape}")
    B = f.shape[0]
    if B < 2:
        raise ValueError(f"batch_stats needs B >= 2, got {B}")
    mu = f.mean(axis=0)
    dev = f - mu
    std = gc.sqrt((dev * dev).sum(axis=0) * (1.0 / (B - 1)))
    if isinstance(features, Tensor):
        return LayerGaussianStats(mu, std)
    return LayerGaussianStats(mu.data, std.data)


def disc(source: Sequence[LayerGaussianStats], target: Sequence[LayerGaussianStats]):
    """Layer-averaged ||mu_t - mu_s|| + ||sigma_t - sigma_s||.

    Differentiable in the target statistics when they are tensors.
    """
    if len(source) != len(target):
        raise ValueError(f"layer count mismatch: {len(source)} source vs {len(target)} target")
    if not source:
        raise ValueError("need at least one layer")
    total = None
    for s, t in zip(source, target):
        s_mu, s_sd = s.arrays()
        term = gc.norm(gc.as_tensor(t.mean) - s_mu) + gc.norm(gc.as_tensor(t.std) - s_sd)
        total = term if total is None else total + term
    return total * (1.0 / len(source))


def disc_value(source, target) -> float:
    return disc(source, target).item()


def layer_stats(pooled: Sequence) -> list[LayerGaussianStats]:
    return [batch_stats(z) for z in pooled]


def precompute_source_bank(bundle: ModelBundle, xa: np.ndarray, xv: np.ndarray) -> SourceStatsBank:
    """Promptless statistics of both encoders and the joint module on clean source samples."""
    if len(xa) < 2 or len(xv) < 2:
        raise ValueError("need at least 2 source samples")
    cfg, w = bundle.config, bundle.weights
    ea = encode(w, cfg, xa, "a")
    ev = encode(w, cfg, xv, "v")
    joint = fuse_and_classify(w, cfg, [ea.tokens, ev.tokens])
    return SourceStatsBank({
        "a": layer_stats([z.data for z in ea.pooled]),
        "v": layer_stats([z.data for z in ev.pooled]),
        "j": layer_stats([z.data for z in joint.pooled]),
    })


def disc_noise_floor(bundle: ModelBundle, bank: SourceStatsBank, xa: np.ndarray, xv: np.ndarray,
                     batch: int, rng: np.random.Generator, draws: int = 200,
                     quantile: float = 0.95) -> dict[str, float]:
    """Disc of bootstrap batches of the bank's own source samples against the bank.

    Batches are drawn with replacement from (xa, xv) and encoded promptless,
    so the result is the discrepancy that sampling noise alone produces at
    this batch size.  Returns the ``quantile`` of Disc^a and Disc^v.
    """
    if batch < 2:
        raise ValueError("batch must be at least 2")
    cfg, w = bundle.config, bundle.weights
    pooled = {u: [z.data for z in encode(w, cfg, x, u).pooled] for u, x in (("a", xa), ("v", xv))}
    vals: dict[str, list[float]] = {u: [] for u in MODALITIES}
    n = len(xa)
    for _ in range(draws):
        idx = rng.integers(0, n, size=batch)
        for u in MODALITIES:
            vals[u].append(disc_value(bank[u], layer_stats([z[idx] for z in pooled[u]])))
    return {u: float(np.quantile(v, quantile)) for u, v in vals.items()}


# ---------------------------------------------------------------- covariance error analysis

@dataclass
class CovEstimate:
    full: np.ndarray
    diag: np.ndarray


def sample_covariance(X) -> CovEstimate:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected an (n, d) sample matrix, got shape {X.shape}")
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"sample covariance needs n >= 2, got {n}")
    xc = X - X.mean(axis=0)
    full = xc.T @ xc / (n - 1)
    full = 0.5 * (full + full.T)
    return CovEstimate(full, np.diag(full).copy())


def _check_sigma(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"Sigma must be square, got shape {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12):
        raise ValueError("Sigma must be symmetric")
    return sigma


def theorem1_closed_form(sigma, n: int) -> tuple[float, float]:
    """Exact E||S - Sigma||_F^2 and E||diag(S) - diag(Sigma)||^2 for the unbiased estimator S."""
    sigma = _check_sigma(sigma)
    if n < 2:
        raise ValueError("n must be at least 2")
    frob = (np.sum(sigma**2) + np.trace(sigma) ** 2) / (n - 1)
    diag = 2.0 * np.sum(np.diag(sigma) ** 2) / (n - 1)
    return float(frob), float(diag)


def gaussian_factor(sigma) -> np.ndarray:
    """L with L @ L.T == Sigma; Cholesky when possible, eigen-factor for singular PSD Sigma."""
    sigma = _check_sigma(sigma)
    evals, evecs = np.linalg.eigh(sigma)
    if evals.min(initial=0.0) < -PSD_TOL:
        raise ValueError(f"Sigma is not positive semi-definite (min eigenvalue {evals.min():.3g})")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return evecs * np.sqrt(np.clip(evals, 0.0, None))


@dataclass
class MonteCarloResult:
    frob_mse: float
    diag_mse: float
    entry_var: np.ndarray       # empirical Var(S_ij)
    entry_mean: np.ndarray      # empirical E[S_ij]


def theorem1_monte_carlo(sigma, n: int, trials: int, rng: np.random.Generator,
                         chunk: int = 2000) -> MonteCarloResult:
    """Average squared estimation errors over ``trials`` independent Gaussian samples of size n."""
    if trials < 1000:
        raise ValueError(f"need at least 1000 trials, got {trials}")
    if n < 2:
        raise ValueError("n must be at least 2")
    L = gaussian_factor(sigma)
    sigma = np.asarray(sigma, dtype=np.float64)
    d = sigma.shape[0]
    frob = diag = 0.0
    s1 = np.zeros((d, d))
    s2 = np.zeros((d, d))
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        X = rng.standard_normal((b, n, d)) @ L.T
        xc = X - X.mean(axis=1, keepdims=True)
        S = np.einsum("tni,tnj->tij", xc, xc) / (n - 1)
        err = S - sigma
        frob += np.sum(err**2)
        diag += np.sum(np.diagonal(err, axis1=1, axis2=2) ** 2)
        s1 += S.sum(axis=0)
        s2 += (S**2).sum(axis=0)
        done += b
    mean = s1 / trials
    var = (s2 - trials * mean**2) / (trials - 1)
    return MonteCarloResult(frob / trials, diag / trials, var, mean)
