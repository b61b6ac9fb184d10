"""1:1 verification, closed-set and open-set identification metrics.

Thresholds are empirical (no interpolation) and ties always count against
the system, so every number is reproducible exactly.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    MODALITY_ORDER,
    GalleryEntry,
    Modality,
    ProbeRecord,
    ScoreMatrix,
    build_gallery,
    build_probes,
    build_score_matrix,
    fmt_float,
    read_template_store,
    read_templates_jsonl,
)
from .errors import ConfigError, InsufficientDataError, ProtocolError
from .fusion import FusionModel, baseline_fuse, fit_normalizer, load_model

log = logging.getLogger(__name__)


@dataclass
class ProtocolConfig:
    far_targets: tuple[float, ...] = (1e-3, 1e-4)
    fpir_target: float = 0.01
    rank_k: int = 20
    modalities: tuple[Modality, ...] = MODALITY_ORDER
    fusion: bool = True

    def __post_init__(self):
        self.far_targets = tuple(float(x) for x in self.far_targets)
        self.modalities = tuple(Modality(m) for m in self.modalities)
        for x in (*self.far_targets, self.fpir_target):
            if not 0.0 < x < 1.0:
                raise ConfigError(f"rate target {x} outside (0, 1)")
        if int(self.rank_k) < 1:
            raise ConfigError("rank_k must be >= 1")
        self.rank_k = int(self.rank_k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["far_targets"] = list(self.far_targets)
        d["modalities"] = [m.value for m in self.modalities]
        return d


@dataclass
class EvalReport:
    config: dict
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    def value(self, system: str, metric: str, target=None) -> float:
        for r in self.rows:
            if r["system"] == system and r["metric"] == metric and (target is None or r["target"] == target):
                return r["value"]
        raise KeyError((system, metric, target))

    @property
    def systems(self) -> list[str]:
        return list(self.counts)


def empirical_threshold(impostor, rate: float) -> float:
    """Smallest impostor score tau with fraction(impostor >= tau) <= rate.

    Falls back to the next float above the maximum when no score qualifies.
    """
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    n = imp.size
    if n == 0:
        raise InsufficientDataError("no impostor / non-mated scores")
    vals = np.unique(imp)
    # count of scores >= v for each distinct v
    ge = n - np.searchsorted(imp, vals, side="left")
    ok = ge / n <= rate
    if ok.any():
        return float(vals[np.argmax(ok)])
    return float(np.nextafter(imp[-1], np.inf))


def tar_at_far(genuine, impostor, far: float) -> tuple[float, float]:
    gen = np.asarray(genuine, dtype=np.float64)
    if gen.size == 0:
        raise InsufficientDataError("no genuine scores")
    tau = empirical_threshold(impostor, far)
    return float((gen >= tau).sum() / gen.size), tau


def mate_rank(row, mate: int) -> float:
    """1 + number of other gallery entries scoring >= the mate (pessimistic ties).

    A missing mate score ranks last (inf); missing non-mate scores never outrank.
    """
    row = np.asarray(row, dtype=np.float64)
    s = row[mate]
    if not np.isfinite(s):
        return float("inf")
    others = np.delete(row, mate)
    return 1.0 + float((others[np.isfinite(others)] >= s).sum())


def rank_k_accuracy(rows: Sequence, mates: Sequence[int], k: int) -> float:
    if len(rows) != len(mates):
        raise ProtocolError("one mate index per score row required")
    if not rows:
        raise InsufficientDataError("no mated searches")
    for row, m in zip(rows, mates):
        if m is None or not 0 <= m < len(row):
            raise ProtocolError("mate absent from gallery")
    hits = sum(mate_rank(r, m) <= k for r, m in zip(rows, mates))
    return hits / len(rows)


def top_score(row) -> float:
    row = np.asarray(row, dtype=np.float64)
    fin = row[np.isfinite(row)]
    return float(fin.max()) if fin.size else float("-inf")


def fnir_at_fpir(mated: Sequence[tuple], non_mated: Sequence, fpir: float) -> tuple[float, float]:
    """``mated`` is a list of (score_row, mate_index); ``non_mated`` a list of score rows.

    A mated search counts as found only when the mate is rank 1 and scores >= tau.
    """
    if not mated:
        raise InsufficientDataError("no mated searches")
    if not non_mated:
        raise InsufficientDataError("no non-mated searches")
    tau = empirical_threshold([top_score(r) for r in non_mated], fpir)
    misses = 0
    for row, m in mated:
        if mate_rank(row, m) != 1.0 or not np.asarray(row)[m] >= tau:
            misses += 1
    return misses / len(mated), tau


# ------------------------------------------------------------------ protocol

Fuser = Callable[[ScoreMatrix, ProbeRecord], np.ndarray]


def probe_quality(probe: ProbeRecord, model: FusionModel | None = None) -> np.ndarray:
    """Quality weights in (face, gait, body) order; absent modalities get 0.5."""
    q = np.array([probe.quality.get(m, 0.5) for m in MODALITY_ORDER])
    if model is not None and model.qe is not None:
        feats = {m: np.array([[probe.quality[m]]]) for m in MODALITY_ORDER if m in probe.quality}
        if feats:
            q = model.qe.predict(feats, 1)[0]
    return q


def model_fuser(model: FusionModel) -> Fuser:
    def fuse(sm: ScoreMatrix, probe: ProbeRecord) -> np.ndarray:
        return model.fuse(sm.full(), probe_quality(probe, model))

    return fuse


def baseline_fuser(matrices: Sequence[ScoreMatrix]) -> Fuser:
    """Z-score + mean fusion with statistics fitted on the given matrices."""
    norm = fit_normalizer(np.vstack([sm.full() for sm in matrices]))

    def fuse(sm: ScoreMatrix, probe: ProbeRecord) -> np.ndarray:
        return baseline_fuse(norm.apply(sm.full()))

    return fuse


def check_protocol(gallery: Sequence[GalleryEntry], probes: Sequence[ProbeRecord]) -> dict[str, int]:
    ids = [g.subject_id for g in gallery]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate gallery subject")
    index = {g.subject_id: i for i, g in enumerate(gallery)}
    for p in probes:
        if p.true_subject_id is None:
            continue
        if p.true_subject_id not in index:
            raise ProtocolError(f"probe {p.probe_id}: mate {p.true_subject_id} missing from gallery")
        if gallery[index[p.true_subject_id]].is_distractor:
            raise ProtocolError(f"probe {p.probe_id}: mate {p.true_subject_id} is a distractor")
    return index


def _system_rows(name, columns, probes, index, config):
    """Metrics for one system; ``columns`` holds one score vector per probe."""
    genuine, impostor, mated, non_mated = [], [], [], []
    for col, p in zip(columns, probes):
        if not np.isfinite(col).any():
            continue
        if p.is_mated:
            m = index[p.true_subject_id]
            mated.append((col, m))
            if np.isfinite(col[m]):
                genuine.append(col[m])
            rest = np.delete(col, m)
        else:
            non_mated.append(col)
            rest = col
        impostor.extend(rest[np.isfinite(rest)].tolist())
    counts = {
        "mated_searches": len(mated),
        "non_mated_searches": len(non_mated),
        "genuine_pairs": len(genuine),
        "impostor_pairs": len(impostor),
    }
    rows = []

    def add(metric, target, fn):
        try:
            value, thr = fn()
        except InsufficientDataError as exc:
            log.info("%s %s skipped: %s", name, metric, exc)
            return
        rows.append({"system": name, "metric": metric, "target": target, "value": value, "threshold": thr, **counts})

    for far in config.far_targets:
        add("TAR@FAR", far, lambda far=far: tar_at_far(genuine, impostor, far))
    add("Rank-k", config.rank_k,
        lambda: (rank_k_accuracy([c for c, _ in mated], [m for _, m in mated], config.rank_k), float("nan")))
    add("FNIR@FPIR", config.fpir_target, lambda: fnir_at_fpir(mated, non_mated, config.fpir_target))
    return counts, rows


def run_protocol(
    gallery: Sequence[GalleryEntry],
    probes: Sequence[ProbeRecord],
    config: ProtocolConfig = ProtocolConfig(),
    fuser: Fuser | FusionModel | None = None,
) -> EvalReport:
    """Per-modality and fused metrics.  Without a fuser, fusion is z-score + mean."""
    index = check_protocol(gallery, probes)
    matrices = [build_score_matrix(p, gallery) for p in probes]
    report = EvalReport(config.to_dict())
    for m in config.modalities:
        cols = [sm.column(m) for sm in matrices]
        if not any(np.isfinite(c).any() for c in cols):
            continue
        counts, rows = _system_rows(m.value, cols, probes, index, config)
        report.counts[m.value] = counts
        report.rows.extend(rows)
    if config.fusion and matrices:
        if isinstance(fuser, FusionModel):
            fuser = model_fuser(fuser)
        elif fuser is None:
            fuser = baseline_fuser(matrices)
        cols = []
        for sm, p in zip(matrices, probes):
            # restrict fusion to the selected modalities
            keep = [k for k, mod in enumerate(sm.modalities) if mod in config.modalities]
            fused = np.full(len(sm.gallery_ids), np.nan)
            # gallery rows sharing no modality with the probe stay unscored
            ok = np.isfinite(sm.scores[:, keep]).any(axis=1) if keep else np.zeros(len(fused), dtype=bool)
            if ok.any():
                sub = ScoreMatrix(sm.probe_id, [g for g, o in zip(sm.gallery_ids, ok) if o],
                                  tuple(sm.modalities[k] for k in keep), sm.scores[np.ix_(ok, keep)])
                fused[ok] = fuser(sub, p)
            sm.fused = fused
            cols.append(sm.fused)
        counts, rows = _system_rows("fused", cols, probes, index, config)
        report.counts["fused"] = counts
        report.rows.extend(rows)
    return report


# ----------------------------------------------------------------- file I/O

def load_protocol(path):
    """Read protocol.json; returns (gallery, probes, config, fusion model or None)."""
    with open(path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    try:
        tpath = os.path.join(base, doc["templates"])
        gallery_media = set(doc["gallery_media"])
        probe_media = set(doc["probe_media"])
    except KeyError as exc:
        raise ProtocolError(f"protocol missing key {exc}") from None
    unknown = set(doc) - {"templates", "gallery_media", "probe_media", "non_mated_probe_media",
                           "distractor_ids", "config", "fusion_model", "dims"}
    if unknown:
        raise ProtocolError(f"unknown protocol keys {sorted(unknown)}")
    dims = None
    if "dims" in doc:
        try:
            dims = {Modality(k): int(v) for k, v in doc["dims"].items()}
        except (ValueError, AttributeError) as exc:
            raise ProtocolError(f"bad dims: {exc}") from None
        if set(dims) != set(MODALITY_ORDER):
            raise ProtocolError("dims must name face, gait and body")
    templates = read_template_store(tpath) if tpath.endswith(".bin") else read_templates_jsonl(tpath, dims)
    known = {t.media_id for t in templates}
    missing = (gallery_media | probe_media) - known
    if missing:
        raise ProtocolError(f"media not found in templates: {sorted(missing)[:5]}")
    if gallery_media & probe_media:
        raise ProtocolError("media listed as both gallery and probe")
    gallery = build_gallery(
        [t for t in templates if t.media_id in gallery_media], doc.get("distractor_ids", [])
    )
    probes = build_probes([t for t in templates if t.media_id in probe_media])
    non_mated = set(doc.get("non_mated_probe_media", []))
    for p in probes:
        if p.probe_id in non_mated:
            p.true_subject_id = None
    cfg = ProtocolConfig(**doc.get("config", {}))
    model = None
    if doc.get("fusion_model"):
        model = load_model(os.path.join(base, doc["fusion_model"]))
    return gallery, probes, cfg, model


REPORT_COLUMNS = ["system", "metric", "target", "value", "threshold",
                  "mated_searches", "non_mated_searches", "genuine_pairs", "impostor_pairs"]


def _num(x):
    return x if isinstance(x, int) else (None if x != x else x)


def write_report(report: EvalReport, json_path, csv_path) -> None:
    rows = [{k: _num(v) if k not in ("system", "metric") else v for k, v in r.items()} for r in report.rows]
    with open(json_path, "w") as f:
        json.dump({"config": report.config, "counts": report.counts, "rows": rows}, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([
                r["system"], r["metric"],
                r["target"] if isinstance(r["target"], int) else fmt_float(r["target"]),
                fmt_float(r["value"]), fmt_float(r["threshold"]),
                r["mated_searches"], r["non_mated_searches"], r["genuine_pairs"], r["impostor_pairs"],
            ])
