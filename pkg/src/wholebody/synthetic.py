"""Synthetic data for protocol, fusion, open-set training and tracking checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MODALITY_ORDER, GalleryEntry, Modality, ProbeRecord, RangeClass, Template, normalize
from .track import Detection


def make_protocol(seed: int, n_subjects: int = 20, n_distractors: int = 5, n_non_mated: int = 10,
                  probes_per_subject: int = 2, dim: int = 8, noise: float = 0.8,
                  p_missing: float = 0.15, ties: bool = True):
    """Random gallery (with distractor entries) and mated / non-mated probes.

    With ``ties`` some distractors copy an enrolled subject's vectors, which
    produces exact score ties.
    """
    rng = np.random.default_rng(seed)
    n_gal = n_subjects + n_distractors
    centers = {m: [normalize(rng.standard_normal(dim)) for _ in range(n_gal)] for m in MODALITY_ORDER}
    if ties and n_distractors and n_subjects:
        for k in range(min(2, n_distractors)):
            src = int(rng.integers(n_subjects))
            for m in MODALITY_ORDER:
                centers[m][n_subjects + k] = centers[m][src].copy()
    gallery = []
    for g in range(n_gal):
        vecs = {m: centers[m][g] for m in MODALITY_ORDER if g == 0 or rng.random() >= p_missing}
        sid = f"S{g:03d}" if g < n_subjects else f"D{g - n_subjects:03d}"
        gallery.append(GalleryEntry(sid, vecs, g >= n_subjects, 1))

    def probe_vecs(center_idx):
        present = [m for m in MODALITY_ORDER if rng.random() >= p_missing] or [MODALITY_ORDER[0]]
        vecs, qual = {}, {}
        for m in present:
            base = centers[m][center_idx] if center_idx is not None else normalize(rng.standard_normal(dim))
            vecs[m] = normalize(base + noise * rng.standard_normal(dim) / np.sqrt(dim))
            qual[m] = float(rng.uniform(0.05, 0.95))
        return vecs, qual

    probes = []
    for s in range(n_subjects):
        for k in range(probes_per_subject):
            v, q = probe_vecs(s)
            probes.append(ProbeRecord(f"P{s:03d}_{k}", v, q, f"S{s:03d}"))
    for k in range(n_non_mated):
        # some non-mated probes resemble a distractor, the rest are unrelated
        src = n_subjects + int(rng.integers(n_distractors)) if n_distractors and rng.random() < 0.5 else None
        v, q = probe_vecs(src)
        probes.append(ProbeRecord(f"N{k:03d}", v, q, None))
    return gallery, probes


def protocol_templates(gallery, probes, dims=None, seed: int = 0):
    """Template list whose aggregation reproduces ``gallery`` and ``probes`` (for file round-trips)."""
    out = []
    for g in gallery:
        for m, v in g.vectors.items():
            out.append(Template(g.subject_id, f"g_{g.subject_id}", m, v, 1.0, RangeClass.CLOSE))
    for p in probes:
        sid = p.true_subject_id or f"U_{p.probe_id}"
        for m, v in p.vectors.items():
            out.append(Template(sid, p.probe_id, m, v, p.quality.get(m, 1.0), RangeClass.LONG))
    return out


def write_protocol_files(directory, gallery, probes, dim: int = 8, config: dict | None = None) -> str:
    """Write templates.jsonl and protocol.json for ``gallery``/``probes``; returns the protocol path."""
    import json
    import os

    from .core import write_templates_jsonl

    os.makedirs(directory, exist_ok=True)
    write_templates_jsonl(os.path.join(directory, "templates.jsonl"), protocol_templates(gallery, probes))
    spec = {
        "templates": "templates.jsonl",
        "gallery_media": [f"g_{g.subject_id}" for g in gallery],
        "probe_media": [p.probe_id for p in probes],
        "non_mated_probe_media": [p.probe_id for p in probes if p.true_subject_id is None],
        "distractor_ids": [g.subject_id for g in gallery if g.is_distractor],
        "dims": {m.value: dim for m in MODALITY_ORDER},
        "config": config or {},
    }
    path = os.path.join(directory, "protocol.json")
    with open(path, "w") as f:
        json.dump(spec, f, indent=2)
        f.write("\n")
    return path


# ------------------------------------------------------------------- fusion

@dataclass
class FusionProbe:
    S_raw: np.ndarray  # (N_G, 3)
    mate_index: int | None
    true_quality: float
    quality_feature: float


def make_fusion_data(rng: np.random.Generator, n_probes: int = 200, n_gallery: int = 20,
                     face_signal: float = 2.5, other_signal: float = 1.0,
                     noise_floor: float = 0.2, noise_gain: float = 2.5,
                     feature_noise: float = 0.05) -> list[FusionProbe]:
    """Score matrices where the face column degrades with (1 - quality).

    Face noise std is ``noise_floor + noise_gain * (1 - q)``; gait and body
    have fixed unit noise and a weaker mate signal.
    """
    out = []
    for _ in range(n_probes):
        q = float(rng.uniform(0.0, 1.0))
        mate = int(rng.integers(n_gallery))
        S = np.empty((n_gallery, 3))
        S[:, 0] = (noise_floor + noise_gain * (1.0 - q)) * rng.standard_normal(n_gallery)
        S[mate, 0] += face_signal
        S[:, 1:] = rng.standard_normal((n_gallery, 2))
        S[mate, 1:] += other_signal
        S = S * 0.1  # keep raw scores in a cosine-like range
        out.append(FusionProbe(S, mate, q, q + feature_noise * float(rng.standard_normal())))
    return out


# ------------------------------------------------------------ embedding toy

def make_embedding_toy(seed: int, n_subjects: int = 10, per_subject: int = 8, spread: float = 0.45):
    """2-D Gaussian clusters whose centers sit at random angles on the unit circle."""
    rng = np.random.default_rng(seed)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_subjects))
    centers = np.column_stack([np.cos(angles), np.sin(angles)])
    X = np.concatenate([c + spread * rng.standard_normal((per_subject, 2)) for c in centers])
    labels = np.repeat(np.arange(n_subjects), per_subject)
    return X, labels


# ----------------------------------------------------------------- tracking

def make_crossing_scenario(seed: int = 0, n_frames: int = 45, occlusion: int = 10, speed: float = 10.0,
                           emb_dim: int = 16, emb_noise: float = 0.05, with_faces: bool = True,
                           with_verifier: bool = True, video_id: str = "crossing") -> list[Detection]:
    """Two subjects walk toward each other, overlap for ``occlusion`` frames and walk back.

    While they overlap only the front subject (gt 1) is detected.  A
    constant-velocity tracker expects them to pass through each other, so the
    hidden subject's track is lost and comes back under another id.
    """
    rng = np.random.default_rng(seed)
    meet = 15
    centers = {1: rng.standard_normal(emb_dim), 2: rng.standard_normal(emb_dim)}
    w, h, y = 40.0, 100.0, 100.0

    def x_of(gt, f):
        start, direction = (100.0, 1.0) if gt == 1 else (100.0 + 2 * meet * speed, -1.0)
        mid = start + direction * meet * speed
        if f <= meet:
            return start + direction * f * speed
        if f < meet + occlusion:
            return mid
        return mid - direction * (f - meet - occlusion + 1) * speed

    dets = []
    for f in range(n_frames):
        visible = [1] if meet <= f < meet + occlusion else [1, 2]
        for gt in visible:
            box = (x_of(gt, f), y, w, h)
            emb = centers[gt] + emb_noise * rng.standard_normal(emb_dim)
            dets.append(Detection(video_id, f, "body", box, 0.9, emb, "primary", gt))
            if with_faces:
                dets.append(Detection(video_id, f, "face", (box[0] + 12, y + 5, 16, 16), 0.8, None, "primary", gt))
            if with_verifier:
                dets.append(Detection(video_id, f, "body", box, 0.85, None, "verifier", gt))
    return dets


def embedding_fnir(X, labels, fpir: float = 0.1, n_enrolled: int | None = None) -> float:
    """FNIR@FPIR of a fixed open-set split of a labelled embedding set.

    The first half of the subjects is enrolled with their first exemplar; their
    other exemplars are mated probes, every exemplar of the rest is non-mated.
    """
    from .evaluation import fnir_at_fpir

    X = np.asarray(X, dtype=np.float64)
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    labels = np.asarray(labels)
    subjects = list(dict.fromkeys(labels.tolist()))
    n_enrolled = len(subjects) // 2 if n_enrolled is None else n_enrolled
    enrolled = subjects[:n_enrolled]
    gal_idx = [int(np.flatnonzero(labels == s)[0]) for s in enrolled]
    G = Xn[gal_idx]
    mated, non_mated = [], []
    for i in range(len(X)):
        if i in gal_idx:
            continue
        row = G @ Xn[i]
        if labels[i] in enrolled:
            mated.append((row, enrolled.index(labels[i])))
        else:
            non_mated.append(row)
    return fnir_at_fpir(mated, non_mated, fpir)[0]
