"""Independent reference implementations used only by the tests.

Nothing here imports the metric or assignment code under test: thresholds,
ranks and rates are recomputed by exhaustive search over candidate
thresholds, assignments by enumerating permutations.
"""
import itertools

import numpy as np

from wholebody.core import MODALITY_ORDER, build_score_matrix
from wholebody.fusion import baseline_fuse, fit_normalizer

H = 1e-5


def fd_grad(f, x, h=H):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


# ----------------------------------------------------------- metric oracles

def bf_threshold(impostor, rate):
    """Smallest candidate tau (from the impostor scores and +inf side) with P(imp >= tau) <= rate."""
    imp = [float(x) for x in impostor]
    cands = sorted(set(imp))
    above = np.nextafter(max(imp), np.inf)
    best = None
    for tau in cands + [above]:
        frac = sum(1 for s in imp if s >= tau) / len(imp)
        if frac <= rate and (best is None or tau < best):
            best = tau
    return best


def bf_tar(genuine, impostor, far):
    tau = bf_threshold(impostor, far)
    return sum(1 for g in genuine if g >= tau) / len(genuine), tau


def bf_rank(row, mate):
    # pessimistic: every other finite score >= the mate's counts ahead of it
    if not np.isfinite(row[mate]):
        return np.inf
    return 1 + sum(1 for j, s in enumerate(row) if j != mate and np.isfinite(s) and s >= row[mate])


def bf_rank_k(rows, mates, k):
    return sum(1 for r, m in zip(rows, mates) if bf_rank(r, m) <= k) / len(rows)


def bf_fnir(mated, non_mated, fpir):
    tops = [max((s for s in row if np.isfinite(s)), default=-np.inf) for row in non_mated]
    tau = bf_threshold(tops, fpir)
    miss = 0
    for row, m in mated:
        ok = bf_rank(row, m) == 1 and row[m] >= tau
        miss += not ok
    return miss / len(mated), tau


def bf_cosine(a, b):
    return sum(x * y for x, y in zip(a, b)) / (np.sqrt(sum(x * x for x in a)) * np.sqrt(sum(y * y for y in b)))


# --------------------------------------------------------- protocol oracle

def bf_report(gallery, probes, cfg):
    """Every run_protocol value recomputed with the exhaustive-search metric oracles.

    Keys are (system, metric, target).  Only the score matrix, the normalizer
    and the mean fuser come from the package; each has its own tests.  Using
    the score matrix keeps exact ties intact, where a per-pair dot product
    can differ by one ulp.
    """
    idx = {g.subject_id: k for k, g in enumerate(gallery)}
    out = {}
    matrices = [build_score_matrix(p, gallery) for p in probes]
    cols = {m.value: [sm.column(m) for sm in matrices] for m in MODALITY_ORDER}
    norm = fit_normalizer(np.vstack([np.column_stack([cols[m.value][k] for m in MODALITY_ORDER])
                                     for k in range(len(probes))]))
    fused = []
    for k in range(len(probes)):
        S = norm.apply(np.column_stack([cols[m.value][k] for m in MODALITY_ORDER]))
        f = np.full(len(gallery), np.nan)
        ok = np.isfinite(S).any(axis=1)
        if ok.any():
            f[ok] = baseline_fuse(S[ok])
        fused.append(f)
    cols["fused"] = fused
    for name, cs in cols.items():
        gen, imp, mated, non = [], [], [], []
        for c, p in zip(cs, probes):
            if not np.isfinite(c).any():
                continue
            if p.true_subject_id is not None:
                m = idx[p.true_subject_id]
                mated.append((c, m))
                if np.isfinite(c[m]):
                    gen.append(c[m])
                imp += [x for j, x in enumerate(c) if j != m and np.isfinite(x)]
            else:
                non.append(c)
                imp += [x for x in c if np.isfinite(x)]
        if not mated:
            continue
        for far in cfg.far_targets:
            if gen and imp:
                out[(name, "TAR@FAR", far)] = bf_tar(gen, imp, far)[0]
        out[(name, "Rank-k", cfg.rank_k)] = bf_rank_k([c for c, _ in mated], [m for _, m in mated], cfg.rank_k)
        if non:
            out[(name, "FNIR@FPIR", cfg.fpir_target)] = bf_fnir(mated, non, cfg.fpir_target)[0]
    return out


# ------------------------------------------------------- assignment oracle

def brute_force_assignment(C):
    """Exhaustive search: most allowed pairs first, then least total cost."""
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    best = None
    small, large = (n, m) if n <= m else (m, n)
    for perm in itertools.permutations(range(large), small):
        pairs = [(i, perm[i]) if n <= m else (perm[i], i) for i in range(small)]
        allowed = [(r, c) for r, c in pairs if np.isfinite(C[r, c])]
        key = (-len(allowed), sum(C[r, c] for r, c in allowed))
        if best is None or key < best:
            best = key
    return best
