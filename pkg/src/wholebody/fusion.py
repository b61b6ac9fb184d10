"""Quality-guided mixture-of-experts score fusion.

Scores are normalized per modality, each expert is an affine map of the
normalized (face, gait, body) row, and the experts are blended by a gate
driven by per-modality quality weights in (0, 1).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, softmax

from .core import MODALITY_ORDER, Modality
from .errors import (
    ConfigError,
    InputError,
    MissingScoreError,
    NormalizationError,
    RankingDegenerateError,
)

N_MOD = len(MODALITY_ORDER)


@dataclass
class NormStats:
    method: str  # "zscore" or "minmax"
    loc: np.ndarray
    scale: np.ndarray

    def apply(self, S) -> np.ndarray:
        return (np.asarray(S, dtype=np.float64) - self.loc) / self.scale


def fit_normalizer(scores, method: str = "zscore") -> NormStats:
    """Per-modality statistics from an (n, 3) calibration array; NaN entries are skipped.

    zscore uses the population standard deviation.  A modality with no finite
    score at all keeps identity statistics.
    """
    if method not in ("zscore", "minmax"):
        raise ConfigError(f"unknown normalization {method!r}")
    if isinstance(scores, Mapping):
        cols = [np.asarray(scores.get(m, scores.get(m.value, [])), dtype=np.float64) for m in MODALITY_ORDER]
    else:
        S = np.asarray(scores, dtype=np.float64)
        cols = [S[:, k] for k in range(N_MOD)]
    loc, scale = np.zeros(N_MOD), np.ones(N_MOD)
    for k, col in enumerate(cols):
        col = col[np.isfinite(col)]
        if col.size == 0:
            continue
        if col.size < 2:
            raise NormalizationError(f"{MODALITY_ORDER[k].value}: need at least 2 scores")
        if method == "zscore":
            mu = col.mean()
            sd = math.sqrt(((col - mu) ** 2).mean())
            loc[k], scale[k] = mu, sd
        else:
            loc[k], scale[k] = col.min(), col.max() - col.min()
        if not scale[k] > 0:
            raise NormalizationError(f"{MODALITY_ORDER[k].value}: zero spread in calibration scores")
    return NormStats(method, loc, scale)


@dataclass
class QualityEstimator:
    """Per-modality logistic map from a quality-feature vector to a weight in (0, 1)."""

    weights: dict[Modality, np.ndarray] = field(default_factory=dict)
    bias: dict[Modality, float] = field(default_factory=dict)

    def logit(self, modality: Modality, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.weights[modality] + self.bias[modality]

    def predict(self, features: Mapping[Modality, np.ndarray], n: int | None = None) -> np.ndarray:
        """(n, 3) quality matrix; modalities without an estimator or features get 0.5."""
        if n is None:
            n = next(len(np.atleast_2d(v)) for v in features.values())
        W = np.full((n, N_MOD), 0.5)
        for k, m in enumerate(MODALITY_ORDER):
            if m in self.weights and m in features:
                W[:, k] = expit(self.logit(m, np.atleast_2d(features[m])))
        return W


@dataclass
class FusionModel:
    norm: NormStats
    expert_weights: np.ndarray  # (Z, 3)
    expert_bias: np.ndarray  # (Z,)
    gate: str = "pair"
    qe: QualityEstimator | None = None

    def __post_init__(self):
        self.expert_weights = np.asarray(self.expert_weights, dtype=np.float64).reshape(-1, N_MOD)
        self.expert_bias = np.asarray(self.expert_bias, dtype=np.float64).reshape(-1)
        Z = self.expert_weights.shape[0]
        if self.expert_bias.shape != (Z,):
            raise ConfigError("one bias per expert required")
        if self.gate == "pair" and Z != 2:
            raise ConfigError("pair gate needs exactly two experts")
        if self.gate == "softmax" and Z != N_MOD:
            raise ConfigError("softmax gate needs one expert per modality")
        if self.gate not in ("pair", "softmax"):
            raise ConfigError(f"unknown gate {self.gate!r}")

    @property
    def n_experts(self) -> int:
        return self.expert_weights.shape[0]

    def gate_weights(self, quality) -> np.ndarray:
        q = np.asarray(quality, dtype=np.float64)
        if self.gate == "pair":
            return np.array([q[0], 1.0 - q[0]])
        return softmax(q)

    def fuse(self, S_raw, quality) -> np.ndarray:
        return moe_fuse(self.norm.apply(S_raw), quality, self)


def init_fusion_model(norm: NormStats, n_experts: int = 2, gate: str = "pair", seed: int = 0,
                      jitter: float = 0.0) -> FusionModel:
    """Experts start as the plain modality mean, optionally jittered from ``seed``."""
    rng = np.random.default_rng(seed)
    W = np.full((n_experts, N_MOD), 1.0 / N_MOD)
    if jitter:
        W = W + jitter * rng.standard_normal(W.shape)
    return FusionModel(norm, W, np.zeros(n_experts), gate)


def _expert_rows(w, b, S, present):
    """Affine expert on each row with absent modalities dropped.

    Present weights are rescaled so they keep the full weight sum.
    Returns outputs (R,) and d out / d w (R, 3).
    """
    X = np.where(present, S, 0.0)
    A = w.sum()
    B = present @ w
    R = X @ w
    degenerate = np.abs(B) < 1e-12
    Bs = np.where(degenerate, 1.0, B)
    mx = X.sum(axis=1) / present.sum(axis=1)
    full = present.all(axis=1)
    # rows with every modality skip the rescale so they match the plain affine map exactly
    out = np.where(degenerate, A * mx, np.where(full, R, A * R / Bs)) + b
    dw = (R / Bs)[:, None] + present * (A * X / Bs[:, None] - (A * R / Bs**2)[:, None])
    dw = np.where(degenerate[:, None], mx[:, None], dw)
    return out, dw


def _moe_rows(S_norm, quality, model):
    S = np.atleast_2d(np.asarray(S_norm, dtype=np.float64))
    g = model.gate_weights(quality)
    present = np.isfinite(S)
    bad = ~present.any(axis=1)
    if bad.any():
        raise MissingScoreError(f"row {int(np.argmax(bad))} has no modality score")
    out = np.zeros(S.shape[0])
    dW = np.zeros((S.shape[0],) + model.expert_weights.shape)
    for z in range(model.n_experts):
        o, dw = _expert_rows(model.expert_weights[z], model.expert_bias[z], S, present)
        out += g[z] * o
        dW[:, z] = g[z] * dw
    return out, dW, g


def moe_fuse(S_norm, quality, model: FusionModel) -> np.ndarray:
    """Fused column: sum_z gate_z(quality) * expert_z(row)."""
    return _moe_rows(S_norm, quality, model)[0]


def baseline_fuse(S_norm) -> np.ndarray:
    """Unweighted mean of the present modalities."""
    S = np.atleast_2d(np.asarray(S_norm, dtype=np.float64))
    present = np.isfinite(S)
    if not present.any(axis=1).all():
        raise MissingScoreError("a row has no modality score")
    return np.where(present, S, 0.0).sum(axis=1) / present.sum(axis=1)


def score_triplet_loss(fused, mate_index: int | None, margin: float) -> tuple[float, np.ndarray]:
    """mean ReLU(non-match) + ReLU(margin - match); gradient w.r.t. the fused column."""
    s = np.asarray(fused, dtype=np.float64)
    grad = np.zeros_like(s)
    nm = np.ones(s.shape[0], dtype=bool)
    val = 0.0
    if mate_index is not None:
        nm[mate_index] = False
        h = margin - s[mate_index]
        if h > 0:
            val += h
            grad[mate_index] = -1.0
    n_nm = nm.sum()
    if n_nm:
        pos = nm & (s > 0)
        val += s[pos].sum() / n_nm
        grad[pos] = 1.0 / n_nm
    return float(val), grad


@dataclass
class FusionSample:
    S_norm: np.ndarray  # (N_G, 3), NaN = missing
    mate_index: int | None
    quality: np.ndarray  # (3,)


class _Stacked:
    """All samples' rows in one array so the loss is a few vector ops per step."""

    def __init__(self, model: FusionModel, samples: Sequence[FusionSample]):
        S = np.vstack([np.atleast_2d(np.asarray(s.S_norm, dtype=np.float64)) for s in samples])
        sizes = [np.atleast_2d(s.S_norm).shape[0] for s in samples]
        owner = np.repeat(np.arange(len(samples)), sizes)
        start = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
        is_mate = np.zeros(S.shape[0], dtype=bool)
        for k, smp in enumerate(samples):
            if smp.mate_index is not None:
                is_mate[start[k] + smp.mate_index] = True
        # rows sharing no modality with the probe cannot be fused and carry no signal
        keep = np.isfinite(S).any(axis=1)
        if not keep.any():
            raise MissingScoreError("no row has a modality score")
        self.S = S[keep]
        self.present = np.isfinite(self.S)
        self.owner = owner[keep]
        self.is_mate = is_mate[keep]
        self.G = np.array([model.gate_weights(s.quality) for s in samples])[self.owner]
        n_nm = np.bincount(self.owner[~self.is_mate], minlength=len(samples))
        self.nm_scale = np.where(self.is_mate, 0.0, 1.0 / np.maximum(n_nm[self.owner], 1))
        self.n = len(samples)

    def loss(self, W, b, margin):
        out = np.zeros(self.S.shape[0])
        dW = np.zeros((self.S.shape[0],) + W.shape)
        for z in range(W.shape[0]):
            o, dw = _expert_rows(W[z], b[z], self.S, self.present)
            out += self.G[:, z] * o
            dW[:, z] = self.G[:, z, None] * dw
        h = np.where(self.is_mate, margin - out, out)
        act = h > 0
        val = (np.where(act, h, 0.0) * np.where(self.is_mate, 1.0, self.nm_scale)).sum()
        dout = np.where(act, np.where(self.is_mate, -1.0, self.nm_scale), 0.0)
        gW = np.einsum("r,rzm->zm", dout, dW)
        gb = dout @ self.G
        return val / self.n, gW / self.n, gb / self.n


def fusion_loss(model: FusionModel, samples: Sequence[FusionSample], margin: float):
    """Mean score-triplet loss over samples with gradients for expert weights and biases."""
    return _Stacked(model, samples).loss(model.expert_weights, model.expert_bias, margin)


def train_fusion(
    model: FusionModel,
    samples: Sequence[FusionSample],
    epochs: int = 1000,
    lr: float = 0.2,
    margin: float = 1.0,
    seed: int = 0,
) -> tuple[FusionModel, list[float]]:
    """Full-batch gradient descent on the experts; quality weights stay fixed.

    ``seed`` fixes the order in which per-sample gradients are accumulated.
    Returns a new model and the loss recorded before each step.
    """
    if not any(s.mate_index is not None for s in samples):
        raise InputError("training set needs at least one mated probe")
    order = np.random.default_rng(seed).permutation(len(samples))
    samples = [samples[i] for i in order]
    W = model.expert_weights.copy()
    b = model.expert_bias.copy()
    history = []
    stacked = _Stacked(model, samples)
    for _ in range(epochs):
        val, gW, gb = stacked.loss(W, b, margin)
        history.append(val)
        if lr == 0.0:
            continue
        W = W - lr * gW
        b = b - lr * gb
    return FusionModel(model.norm, W, b, model.gate, model.qe), history


# ------------------------------------------------------------- quality estimator

def pairwise_ranking_loss(z, t, margin: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean hinge over ordered pairs (t_i > t_j) of ``margin - (z_i - z_j)``."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    I, J = np.nonzero(t[:, None] > t[None, :])
    if I.size == 0:
        raise RankingDegenerateError("targets are all equal")
    h = margin - (z[I] - z[J])
    act = h > 0
    grad = np.zeros_like(z)
    np.add.at(grad, I[act], -1.0 / I.size)
    np.add.at(grad, J[act], 1.0 / I.size)
    return float(np.where(act, h, 0.0).sum() / I.size), grad


def train_quality_estimator(
    features: Mapping[Modality, np.ndarray],
    targets: Mapping[Modality, np.ndarray],
    epochs: int = 300,
    lr: float = 5.0,
    seed: int = 0,
    margin: float = 1.0,
) -> tuple[QualityEstimator, dict[Modality, list[float]]]:
    """Fit each modality's logistic quality map with a pairwise ranking loss.

    The ranking loss does not see the bias; afterwards the bias is set so the
    median training probe maps to 0.5.
    """
    rng = np.random.default_rng(seed)
    qe = QualityEstimator()
    histories = {}
    for m in MODALITY_ORDER:
        if m not in features:
            continue
        X = np.atleast_2d(np.asarray(features[m], dtype=np.float64))
        if X.shape[0] == 1 and X.shape[1] != 1:
            X = X.T
        t = np.asarray(targets[m], dtype=np.float64)
        if X.shape[0] < 2 or np.unique(t).size < 2:
            raise RankingDegenerateError(f"{m.value}: need two probes with distinct targets")
        w = 0.01 * rng.standard_normal(X.shape[1])
        hist = []
        for _ in range(epochs):
            val, gz = pairwise_ranking_loss(X @ w, t, margin)
            hist.append(val)
            w = w - lr * (X.T @ gz)
        hist.append(pairwise_ranking_loss(X @ w, t, margin)[0])
        qe.weights[m] = w
        qe.bias[m] = float(-np.median(X @ w))
        histories[m] = hist
    return qe, histories


def genuine_margin(S_norm, mate_index: int) -> np.ndarray:
    """Per-modality mate score minus the best non-mate score (NaN when absent)."""
    S = np.asarray(S_norm, dtype=np.float64)
    others = np.delete(S, mate_index, axis=0)
    with np.errstate(all="ignore"):
        best = np.full(S.shape[1], -np.inf) if others.shape[0] == 0 else np.nanmax(
            np.where(np.isfinite(others), others, -np.inf), axis=0)
    out = S[mate_index] - best
    out[~np.isfinite(out)] = np.nan
    return out


# --------------------------------------------------------------- persistence

def model_to_dict(model: FusionModel) -> dict:
    d = {
        "norm": {
            "method": model.norm.method,
            "loc": model.norm.loc.tolist(),
            "scale": model.norm.scale.tolist(),
        },
        "modalities": [m.value for m in MODALITY_ORDER],
        "gate": model.gate,
        "experts": [
            {"weights": model.expert_weights[z].tolist(), "bias": float(model.expert_bias[z])}
            for z in range(model.n_experts)
        ],
        "qe": None,
    }
    if model.qe is not None:
        d["qe"] = {
            m.value: {"weights": model.qe.weights[m].tolist(), "bias": model.qe.bias[m]}
            for m in MODALITY_ORDER
            if m in model.qe.weights
        }
    return d


def model_from_dict(d: dict) -> FusionModel:
    norm = NormStats(d["norm"]["method"], np.array(d["norm"]["loc"]), np.array(d["norm"]["scale"]))
    qe = None
    if d.get("qe"):
        qe = QualityEstimator(
            {Modality(k): np.array(v["weights"]) for k, v in d["qe"].items()},
            {Modality(k): float(v["bias"]) for k, v in d["qe"].items()},
        )
    return FusionModel(
        norm,
        np.array([e["weights"] for e in d["experts"]]),
        np.array([e["bias"] for e in d["experts"]]),
        d["gate"],
        qe,
    )


def save_model(path, model: FusionModel) -> None:
    # json writes floats with repr(), which round-trips float64 exactly.
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, indent=2)
        f.write("\n")


def load_model(path) -> FusionModel:
    with open(path) as f:
        return model_from_dict(json.load(f))


def fit_qme(
    S_raw: Sequence[np.ndarray],
    mates: Sequence[int | None],
    quality_features: Mapping[Modality, np.ndarray],
    *,
    method: str = "zscore",
    epochs_qe: int = 300,
    lr_qe: float = 5.0,
    epochs: int = 1000,
    lr: float = 0.2,
    margin: float = 1.0,
    seed: int = 0,
) -> tuple[FusionModel, dict]:
    """Two-stage training: quality estimator first, then the experts with QE frozen.

    QE targets are each mated probe's per-modality genuine margin (mate score
    minus best non-mate score, normalized).  Returns the model and the loss
    histories.
    """
    norm = fit_normalizer(np.vstack(S_raw), method)
    S_norm = [norm.apply(S) for S in S_raw]
    feats, targets = {}, {}
    mated_idx = [i for i, m in enumerate(mates) if m is not None]
    for m, X in quality_features.items():
        X = np.asarray(X, dtype=np.float64).reshape(len(S_raw), -1)
        k = MODALITY_ORDER.index(Modality(m))
        t = np.array([genuine_margin(S_norm[i], mates[i])[k] for i in mated_idx])
        ok = np.isfinite(t)
        feats[Modality(m)] = X[mated_idx][ok]
        targets[Modality(m)] = t[ok]
    qe, qe_hist = train_quality_estimator(feats, targets, epochs_qe, lr_qe, seed)
    model = init_fusion_model(norm, 2, "pair")
    model.qe = qe
    all_feats = {Modality(m): np.asarray(X, dtype=np.float64).reshape(len(S_raw), -1)
                 for m, X in quality_features.items()}
    Q = qe.predict(all_feats, len(S_raw))
    samples = [FusionSample(S_norm[i], mates[i], Q[i]) for i in range(len(S_raw))]
    model, hist = train_fusion(model, samples, epochs, lr, margin, seed)
    model.qe = qe
    return model, {"qe": {m.value: h for m, h in qe_hist.items()}, "fusion": hist}
