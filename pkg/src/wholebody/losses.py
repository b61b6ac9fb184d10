"""Open-set training losses and auxiliary feature-map losses.

Every loss returns ``(value, gradient)``.  Open-set losses take their gradient
with respect to the batch score table; :func:`embedding_grad` chains that
through the cosine similarity to the raw embeddings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .core import RangeClass, cosine_grad
from .errors import (
    DegenerateActivationError,
    DimensionError,
    EmptyMatedSetError,
    EmptyThresholdSetError,
    InputError,
    PartitionError,
    RangeClassViolation,
)


@dataclass(frozen=True)
class LossHyperparams:
    alpha: float = 16.0
    beta: float = 16.0
    gamma: float = 16.0
    lam: float = 0.5
    margin: float = 0.3
    mated_fraction: float = 0.5
    include_self: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "margin"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be > 0")
        if self.lam < 0:
            raise InputError("lam must be >= 0")
        if not 0.0 < self.mated_fraction <= 1.0:
            raise InputError("mated_fraction must be in (0, 1]")


@dataclass
class BatchPartition:
    """Simulated gallery/probe split of one training batch.

    ``scores[r, c]`` is the similarity of probe row ``r`` to gallery column ``c``.
    ``mated`` holds ``(probe_row, gallery_col)`` pairs; ``non_mated`` holds probe rows.
    ``gallery_index`` / ``probe_index`` point back into the exemplar list when the
    partition was built from exemplars.
    """

    gallery_subjects: list[str]
    mated: list[tuple[int, int]]
    non_mated: list[int]
    scores: np.ndarray | None = None
    gallery_index: list[int] = field(default_factory=list)
    probe_index: list[int] = field(default_factory=list)
    probe_subjects: list[str] = field(default_factory=list)

    def validate(self) -> None:
        rows = [r for r, _ in self.mated]
        if set(rows) & set(self.non_mated):
            raise PartitionError("a probe is both mated and non-mated")
        ng = len(self.gallery_subjects)
        if any(not 0 <= c < ng for _, c in self.mated):
            raise PartitionError("mated probe points outside the gallery")
        if self.probe_subjects:
            gal = set(self.gallery_subjects)
            if any(self.probe_subjects[r] in gal for r in self.non_mated):
                raise PartitionError("non-mated probe has a subject in the gallery")


def _sig(x, k):
    return expit(k * np.asarray(x, dtype=np.float64))


# ------------------------------------------------------------ detection term

def r_det_tau(s_ig: float, tau: float, alpha: float) -> tuple[float, float]:
    sg = float(_sig(s_ig - tau, alpha))
    return sg, alpha * sg * (1.0 - sg)


def detection_thresholds(part: BatchPartition, gallery_col: int) -> np.ndarray:
    """Sorted scores of every non-mated probe against one gallery subject."""
    if not part.non_mated:
        raise EmptyThresholdSetError("no non-mated probes in the batch")
    return np.sort(part.scores[part.non_mated, gallery_col])


def r_det(s_ig: float, thresholds, alpha: float) -> tuple[float, float, np.ndarray]:
    """Mean sigmoid detection rate over the threshold set.

    Returns the value, d/d s_ig and d/d tau for each threshold.
    """
    T = np.asarray(thresholds, dtype=np.float64)
    if T.size == 0:
        raise EmptyThresholdSetError("empty threshold set")
    sg = _sig(s_ig - T, alpha)
    d = alpha * sg * (1.0 - sg) / T.size
    return float(sg.mean()), float(d.sum()), -d


# ------------------------------------------------------- identification term

def softrank(row, i: int, gamma: float, include_self: bool = True) -> tuple[float, np.ndarray]:
    """Sum over gallery columns of sigmoid(gamma * (s_j - s_i))."""
    row = np.asarray(row, dtype=np.float64)
    sg = _sig(row - row[i], gamma)
    d = gamma * sg * (1.0 - sg)
    d[i] = 0.0
    d[i] = -d.sum()
    if not include_self:
        sg[i] = 0.0
    return float(sg.sum()), d


def r_id(softrank_value: float, beta: float) -> tuple[float, float]:
    r = float(_sig(1.0 - softrank_value, beta))
    return r, -beta * r * (1.0 - r)


def l_idl(part: BatchPartition, hp: LossHyperparams = LossHyperparams()) -> tuple[float, np.ndarray]:
    if not part.mated:
        raise EmptyMatedSetError("no mated probes in the batch")
    S = np.asarray(part.scores, dtype=np.float64)
    grad = np.zeros_like(S)
    total = 0.0
    n = len(part.mated)
    for r, c in part.mated:
        T = S[part.non_mated, c]
        det, d_sig, d_tau = r_det(S[r, c], T, hp.alpha)
        sr, d_row = softrank(S[r], c, hp.gamma, hp.include_self)
        rid, d_sr = r_id(sr, hp.beta)
        total += det * rid
        # L = -(1/n) sum det * rid
        grad[r, c] -= rid * d_sig / n
        grad[part.non_mated, c] -= rid * d_tau / n
        grad[r] -= det * d_sr * d_row / n
    return -total / n, grad


# ----------------------------------------------------------------- RTM term

def l_rtm(scores) -> tuple[float, np.ndarray]:
    """Softmax-weighted mean of the scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyThresholdSetError("no non-mated scores")
    e = np.exp(s - s.max())
    w = e / e.sum()
    val = float(w @ s.ravel() if s.ndim == 1 else (w * s).sum())
    val = min(max(val, float(s.min())), float(s.max()))
    return val, w * (1.0 + s - val)


def l_open(part: BatchPartition, hp: LossHyperparams = LossHyperparams()) -> tuple[float, np.ndarray]:
    """L_IDL + lam * L_RTM, RTM pooled over every non-mated probe x gallery score."""
    if not part.non_mated:
        raise EmptyThresholdSetError("no non-mated probes in the batch")
    idl, grad = l_idl(part, hp)
    if hp.lam == 0.0:
        return idl, grad
    rtm, g = l_rtm(part.scores[part.non_mated, :])
    grad[part.non_mated, :] += hp.lam * g
    return idl + hp.lam * rtm, grad


def loss_components(part: BatchPartition, hp: LossHyperparams = LossHyperparams()) -> dict:
    idl, _ = l_idl(part, hp)
    rtm, _ = l_rtm(part.scores[part.non_mated, :]) if part.non_mated else (float("nan"), None)
    total, grad = l_open(part, hp)
    return {
        "l_idl": idl,
        "l_rtm": rtm,
        "l_open": total,
        "grad_norm": float(np.linalg.norm(grad)),
    }


# ------------------------------------------------------------- partitioning

def partition_batch(
    subject_ids: Sequence[str], exemplar_counts: Sequence[int], p: float, rng_seed: int
) -> BatchPartition:
    """Split a batch into simulated gallery and probes.

    Exemplars are numbered contiguously in ``subject_ids`` order.  A fraction
    ``p`` of subjects become mated: one exemplar enters the gallery, the rest
    become probes.  Other subjects contribute probes only.
    """
    if len(subject_ids) != len(exemplar_counts):
        raise InputError("subject_ids and exemplar_counts differ in length")
    if len(set(subject_ids)) != len(subject_ids):
        raise InputError("duplicate subject ids")
    if len(subject_ids) < 2:
        raise PartitionError("need at least two subjects")
    rng = np.random.default_rng(rng_seed)
    n_sub = len(subject_ids)
    k = int(math.floor(p * n_sub + 0.5))
    eligible = [i for i in range(n_sub) if exemplar_counts[i] >= 2]
    if k > len(eligible):
        raise PartitionError(f"{k} mated subjects requested but only {len(eligible)} have 2+ exemplars")
    # Permuting the eligible pool is the deterministic "resample": single-exemplar
    # subjects are never drawn.
    mated_subj = sorted(rng.permutation(eligible)[:k].tolist()) if k else []
    offsets = np.concatenate([[0], np.cumsum(exemplar_counts)]).astype(int)

    gallery_subjects, gallery_index = [], []
    probe_owner: dict[int, int] = {}
    for s in range(n_sub):
        ex = list(range(offsets[s], offsets[s + 1]))
        if s in mated_subj:
            ex = rng.permutation(ex).tolist()
            gallery_subjects.append(subject_ids[s])
            gallery_index.append(ex[0])
            ex = ex[1:]
        for e in ex:
            probe_owner[e] = s
    probe_index = sorted(probe_owner)
    col = {subject_ids[s]: c for c, s in enumerate(mated_subj)}
    mated, non_mated, probe_subjects = [], [], []
    for r, e in enumerate(probe_index):
        sid = subject_ids[probe_owner[e]]
        probe_subjects.append(sid)
        if sid in col:
            mated.append((r, col[sid]))
        else:
            non_mated.append(r)
    part = BatchPartition(gallery_subjects, mated, non_mated, None, gallery_index, probe_index, probe_subjects)
    part.validate()
    return part


def score_batch(part: BatchPartition, embeddings) -> BatchPartition:
    """Fill ``part.scores`` with cosine similarities of the raw exemplar embeddings."""
    X = np.asarray(embeddings, dtype=np.float64)
    P = X[part.probe_index]
    G = X[part.gallery_index]
    Pn = P / np.linalg.norm(P, axis=1, keepdims=True)
    Gn = G / np.linalg.norm(G, axis=1, keepdims=True)
    part.scores = Pn @ Gn.T
    return part


def embedding_grad(part: BatchPartition, embeddings, score_grad) -> np.ndarray:
    """Chain a score-table gradient through cosine similarity to the embeddings."""
    X = np.asarray(embeddings, dtype=np.float64)
    out = np.zeros_like(X)
    sg = np.asarray(score_grad)
    for r, e in enumerate(part.probe_index):
        for c, g in enumerate(part.gallery_index):
            if sg[r, c] == 0.0:
                continue
            _, da, db = cosine_grad(X[e], X[g])
            out[e] += sg[r, c] * da
            out[g] += sg[r, c] * db
    return out


# ---------------------------------------------------- range-restricted triplet

def range_triplet_loss(
    anchors,
    positives,
    negatives,
    margin: float,
    anchor_range: Sequence = None,
    positive_range: Sequence = None,
    negative_range: Sequence = None,
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Mean hinge over row-aligned triplets; anchors must be close-range, the rest long-range.

    Range labels default to the required classes; pass them to have them checked.
    """
    A = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    P = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    N = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if not (A.shape == P.shape == N.shape):
        raise DimensionError("anchor/positive/negative shapes differ")
    for labels, want, role in (
        (anchor_range, RangeClass.CLOSE, "anchor"),
        (positive_range, RangeClass.LONG, "positive"),
        (negative_range, RangeClass.LONG, "negative"),
    ):
        if labels is None:
            continue
        if len(labels) != A.shape[0]:
            raise DimensionError(f"{role} range labels do not match triplet count")
        bad = [i for i, l in enumerate(labels) if RangeClass(l) is not want]
        if bad:
            raise RangeClassViolation(f"{role} {bad[0]} is not {want.value}-range")
    n = A.shape[0]
    gA, gP, gN = np.zeros_like(A), np.zeros_like(P), np.zeros_like(N)
    total = 0.0
    for k in range(n):
        sp, dap, dp = cosine_grad(A[k], P[k])
        sn, dan, dn = cosine_grad(A[k], N[k])
        h = margin - sp + sn
        if h > 0:
            total += h
            gA[k] += (dan - dap) / n
            gP[k] -= dp / n
            gN[k] += dn / n
    return total / n, (gA, gP, gN)


# ------------------------------------------------------ feature-map losses

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def softmax_channels(x) -> np.ndarray:
    """Channel softmax of a C x H x W array."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def l_rec(f, f_hat) -> tuple[float, np.ndarray]:
    """Euclidean norm of ``f - f_hat``; gradient w.r.t. ``f``."""
    f = np.asarray(f, dtype=np.float64)
    f_hat = np.asarray(f_hat, dtype=np.float64)
    if f.shape != f_hat.shape:
        raise DimensionError(f"shape mismatch {f.shape} vs {f_hat.shape}")
    d = f - f_hat
    n = float(np.linalg.norm(d))
    return n, (d / n if n > 0 else np.zeros_like(d))


def _sobel(ch, k):
    return ndimage.correlate(ch, k, mode="constant", cval=0.0)


def _sobel_adjoint(ch, k):
    return ndimage.convolve(ch, k, mode="constant", cval=0.0)


def l_smo(f_de) -> tuple[float, np.ndarray]:
    """mean|sobel_x * f| + mean|sobel_y * f|, per channel, zero padding."""
    f = np.asarray(f_de, dtype=np.float64)
    if f.ndim != 3 or f.shape[1] < 3 or f.shape[2] < 3:
        raise DimensionError("feature map must be C x H x W with H, W >= 3")
    n = f.size
    val = 0.0
    grad = np.zeros_like(f)
    for k in (SOBEL_X, SOBEL_Y):
        for c in range(f.shape[0]):
            r = _sobel(f[c], k)
            val += np.abs(r).sum() / n
            grad[c] += _sobel_adjoint(np.sign(r), k) / n
    return float(val), grad


def l_div(f_de) -> tuple[float, np.ndarray]:
    """log C + sum p_c log p_c over channel activation shares."""
    f = np.asarray(f_de, dtype=np.float64)
    if (f < 0).any():
        raise InputError("activations must be non-negative")
    C = f.shape[0]
    mass = f.reshape(C, -1).sum(axis=1)
    M = mass.sum()
    if M <= 0:
        raise DegenerateActivationError("total activation is zero")
    p = mass / M
    logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    neg_entropy = float((p * logp).sum())
    val = math.log(C) + neg_entropy
    # Empty channels get the 0 log 0 := 0 convention in their derivative too.
    dmass = (logp - neg_entropy) / M
    grad = np.broadcast_to(dmass.reshape((C,) + (1,) * (f.ndim - 1)), f.shape).copy()
    return min(max(val, 0.0), math.log(C)), grad


def descend_open_set(embeddings, labels, steps: int = 200, lr: float = 0.1,
                     hp: LossHyperparams = LossHyperparams(), seed: int = 0):
    """Plain gradient descent of L_open directly on exemplar embeddings.

    Every step draws a fresh gallery/probe partition from ``seed``.
    Returns the final embeddings and the per-step loss.
    """
    X = np.array(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    subjects = list(dict.fromkeys(labels.tolist()))
    order = np.concatenate([np.flatnonzero(labels == s) for s in subjects])
    counts = [int((labels == s).sum()) for s in subjects]
    names = [str(s) for s in subjects]
    seeds = np.random.SeedSequence(seed).generate_state(steps)
    history = []
    for step in range(steps):
        part = partition_batch(names, counts, hp.mated_fraction, int(seeds[step]))
        Xo = X[order]
        score_batch(part, Xo)
        val, sgrad = l_open(part, hp)
        history.append(val)
        g = embedding_grad(part, Xo, sgrad)
        X[order] -= lr * g
    return X, history
