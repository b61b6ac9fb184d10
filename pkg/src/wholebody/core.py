"""Templates, similarity, gallery aggregation and the on-disk formats.

Vectors are float64 in memory and float32 on disk.  A missing modality score
is NaN in memory and an empty CSV cell on disk; it is never 0.0.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionError,
    EmptyAggregationError,
    FormatError,
    InputError,
    NormalizationError,
)

MISSING = float("nan")
MAGIC = b"FSTPLT01"


class Modality(str, Enum):
    FACE = "face"
    GAIT = "gait"
    BODY = "body"


class RangeClass(str, Enum):
    CLOSE = "close"
    LONG = "long"


# Column order of every score matrix and scores.csv.
MODALITY_ORDER = (Modality.FACE, Modality.GAIT, Modality.BODY)

DEFAULT_DIMS: dict[Modality, int] = {
    Modality.FACE: 512,
    Modality.GAIT: 8192,
    Modality.BODY: 2048,
}


def fmt_float(x: float) -> str:
    """Text representation used by every text format (9 significant digits)."""
    if x != x:
        return ""
    return format(float(x), ".9g")


def _resolve_dims(dims: Mapping[Modality, int] | None) -> Mapping[Modality, int]:
    return DEFAULT_DIMS if dims is None else dims


@dataclass(frozen=True)
class Template:
    subject_id: str
    media_id: str
    modality: Modality
    vector: np.ndarray
    quality: float = 1.0
    range_class: RangeClass = RangeClass.CLOSE

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "range_class", RangeClass(self.range_class))
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1:
            raise DimensionError("template vector must be 1-D")
        object.__setattr__(self, "vector", vec)
        q = float(self.quality)
        if not 0.0 <= q <= 1.0:
            raise InputError(f"quality {q} outside [0, 1]")
        object.__setattr__(self, "quality", q)

    def normalized(self) -> "Template":
        return replace(self, vector=normalize(self.vector))

    def check_dim(self, dims: Mapping[Modality, int] | None = None) -> None:
        want = _resolve_dims(dims)[self.modality]
        if self.vector.shape[0] != want:
            raise DimensionError(
                f"{self.modality.value} vector has length {self.vector.shape[0]}, expected {want}"
            )


@dataclass
class GalleryEntry:
    subject_id: str
    vectors: dict[Modality, np.ndarray] = field(default_factory=dict)
    is_distractor: bool = False
    media_count: int = 0


@dataclass
class ProbeRecord:
    probe_id: str
    vectors: dict[Modality, np.ndarray] = field(default_factory=dict)
    quality: dict[Modality, float] = field(default_factory=dict)
    true_subject_id: str | None = None

    @property
    def is_mated(self) -> bool:
        return self.true_subject_id is not None


@dataclass
class ScoreMatrix:
    """Scores of one probe against every gallery subject, one column per modality."""

    probe_id: str
    gallery_ids: list[str]
    modalities: tuple[Modality, ...]
    scores: np.ndarray
    fused: np.ndarray | None = None

    def column(self, modality: Modality) -> np.ndarray:
        """Scores for ``modality``; all-NaN when the modality is not present."""
        modality = Modality(modality)
        if modality in self.modalities:
            return self.scores[:, self.modalities.index(modality)]
        return np.full(len(self.gallery_ids), np.nan)

    def full(self) -> np.ndarray:
        """N_G x 3 matrix in (face, gait, body) order, NaN for absent columns."""
        return np.column_stack([self.column(m) for m in MODALITY_ORDER])


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise NormalizationError("cannot normalize a zero-norm vector")
    return v / n


def cosine_similarity(a, b) -> float:
    """Dot product of two unit vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def cosine_grad(a, b) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine of two *unnormalized* vectors and its gradients w.r.t. both.

    d cos / d a = (b_hat - cos * a_hat) / |a|
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NormalizationError("cosine of a zero vector")
    ah, bh = a / na, b / nb
    c = float(ah @ bh)
    return c, (bh - c * ah) / na, (ah - c * bh) / nb


def aggregate_gallery(templates: Sequence[Template]) -> np.ndarray:
    """Quality-weighted mean of one subject's templates for one modality, renormalized."""
    if not templates:
        raise EmptyAggregationError("no templates to aggregate")
    subj, mod = templates[0].subject_id, templates[0].modality
    for t in templates:
        if t.subject_id != subj or t.modality != mod:
            raise InputError("aggregation mixes subjects or modalities")
    vecs = np.stack([t.vector for t in templates])
    w = np.array([t.quality for t in templates])
    if w.sum() == 0.0:
        w = np.ones_like(w)
    # Sort rows so the floating-point sum does not depend on input order.
    order = np.lexsort(vecs.T[::-1])
    mean = (w[order, None] * vecs[order]).sum(axis=0) / w.sum()
    if np.linalg.norm(mean) < 1e-12:
        raise NormalizationError(f"aggregate for {subj}/{mod.value} cancels to zero")
    return normalize(mean)


def build_gallery(
    templates: Iterable[Template], distractor_ids: Iterable[str] = ()
) -> list[GalleryEntry]:
    """Group templates by subject and aggregate each modality."""
    distractors = set(distractor_ids)
    groups: dict[str, dict[Modality, list[Template]]] = {}
    media: dict[str, set[str]] = {}
    for t in templates:
        groups.setdefault(t.subject_id, {}).setdefault(t.modality, []).append(t)
        media.setdefault(t.subject_id, set()).add(t.media_id)
    gallery = []
    for sid in sorted(groups):
        vecs = {m: aggregate_gallery(ts) for m, ts in groups[sid].items()}
        gallery.append(GalleryEntry(sid, vecs, sid in distractors, len(media[sid])))
    return gallery


def build_probes(templates: Iterable[Template]) -> list[ProbeRecord]:
    """One probe per media id; vectors normalized, subject taken from the templates."""
    probes: dict[str, ProbeRecord] = {}
    for t in templates:
        p = probes.setdefault(t.media_id, ProbeRecord(t.media_id, true_subject_id=t.subject_id))
        if t.modality in p.vectors:
            raise InputError(f"probe {t.media_id} has two {t.modality.value} templates")
        p.vectors[t.modality] = normalize(t.vector)
        p.quality[t.modality] = t.quality
    return [probes[k] for k in sorted(probes)]


def build_score_matrix(probe: ProbeRecord, gallery: Sequence[GalleryEntry]) -> ScoreMatrix:
    if not probe.vectors:
        raise InputError(f"probe {probe.probe_id} has no modality")
    if not gallery:
        raise InputError("empty gallery")
    mods = tuple(m for m in MODALITY_ORDER if m in probe.vectors)
    S = np.full((len(gallery), len(mods)), np.nan)
    for k, m in enumerate(mods):
        pv = probe.vectors[m]
        rows = [g for g, e in enumerate(gallery) if m in e.vectors]
        if rows:
            G = np.stack([gallery[g].vectors[m] for g in rows])
            if G.shape[1] != pv.shape[0]:
                raise DimensionError(f"{m.value}: probe dim {pv.shape[0]} vs gallery dim {G.shape[1]}")
            S[rows, k] = G @ pv
    return ScoreMatrix(probe.probe_id, [e.subject_id for e in gallery], mods, S)


# ---------------------------------------------------------------- binary store

def payload_nbytes(modality: Modality, dims: Mapping[Modality, int] | None = None) -> int:
    """Raw float32 payload size; the face payload carries one extra quality float."""
    modality = Modality(modality)
    n = _resolve_dims(dims)[modality] + (1 if modality is Modality.FACE else 0)
    return 4 * n


def template_payload(t: Template) -> bytes:
    vec = t.vector
    if t.modality is Modality.FACE:
        vec = np.append(vec, t.quality)
    return vec.astype("<f4").tobytes()


def serialize_template(t: Template) -> bytes:
    """One record: u16 metadata length, metadata JSON, float32 payload."""
    meta = json.dumps(
        {
            "subject_id": t.subject_id,
            "media_id": t.media_id,
            "modality": t.modality.value,
            "quality": t.quality,
            "range_class": t.range_class.value,
            "dim": int(t.vector.shape[0]),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    if len(meta) > 0xFFFF:
        raise FormatError("template metadata too long")
    return struct.pack("<H", len(meta)) + meta + template_payload(t)


def deserialize_template(buf: bytes, offset: int = 0) -> tuple[Template, int]:
    """Decode the record at ``offset``; returns the template and the next offset."""
    if offset + 2 > len(buf):
        raise FormatError(f"truncated record header at byte {offset}")
    (mlen,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    if offset + mlen > len(buf):
        raise FormatError(f"truncated metadata at byte {offset}")
    try:
        meta = json.loads(buf[offset : offset + mlen])
        modality = Modality(meta["modality"])
        dim = int(meta["dim"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad metadata at byte {offset}: {exc}") from None
    offset += mlen
    n = dim + (1 if modality is Modality.FACE else 0)
    if offset + 4 * n > len(buf):
        raise FormatError(f"truncated payload at byte {offset}")
    vals = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float64)
    offset += 4 * n
    t = Template(
        meta["subject_id"],
        meta["media_id"],
        modality,
        vals[:dim],
        meta["quality"],
        meta["range_class"],
    )
    return t, offset


def write_template_store(path, templates: Iterable[Template]) -> int:
    n = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        for t in templates:
            f.write(serialize_template(t))
            n += 1
    return n


def read_template_store(path) -> list[Template]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic header")
    out, off = [], len(MAGIC)
    while off < len(buf):
        t, off = deserialize_template(buf, off)
        out.append(t)
    return out


# ----------------------------------------------------------------- text formats

def template_to_json(t: Template) -> str:
    # Field order follows the documented schema, not alphabetical order.
    vec = "[" + ",".join(fmt_float(x) for x in t.vector) + "]"
    return (
        "{"
        f'"subject_id":{json.dumps(t.subject_id)},'
        f'"media_id":{json.dumps(t.media_id)},'
        f'"modality":"{t.modality.value}",'
        f'"vector":{vec},'
        f'"quality":{fmt_float(t.quality)},'
        f'"range_class":"{t.range_class.value}"'
        "}"
    )


def template_from_json(obj: dict, dims: Mapping[Modality, int] | None = None) -> Template:
    try:
        t = Template(
            str(obj["subject_id"]),
            str(obj["media_id"]),
            obj["modality"],
            obj["vector"],
            obj.get("quality", 1.0),
            obj.get("range_class", "close"),
        )
    except KeyError as exc:
        raise InputError(f"missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(str(exc)) from None
    t.check_dim(dims)
    return t


def read_templates_jsonl(path, dims: Mapping[Modality, int] | None = None) -> list[Template]:
    """Parse templates.jsonl; errors name the offending line."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(template_from_json(json.loads(line), dims))
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except InputError as exc:
                raise type(exc)(f"line {lineno}: {exc}") from None
    return out


def write_templates_jsonl(path, templates: Iterable[Template]) -> None:
    with open(path, "w") as f:
        for t in templates:
            f.write(template_to_json(t) + "\n")


SCORE_COLUMNS = ["probe_id", "gallery_id", "face", "gait", "body", "fused"]


def write_scores_csv(path_or_buf, matrices: Iterable[ScoreMatrix]) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    f = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for sm in matrices:
            full = sm.full()
            fused = sm.fused if sm.fused is not None else np.full(len(sm.gallery_ids), np.nan)
            for g, gid in enumerate(sm.gallery_ids):
                w.writerow([sm.probe_id, gid, *(fmt_float(x) for x in full[g]), fmt_float(fused[g])])
    finally:
        if own:
            f.close()


def read_scores_csv(path) -> list[ScoreMatrix]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    required = set(SCORE_COLUMNS) - {"fused"}
    if rows and required - set(rows[0]):
        raise FormatError(f"{path}: missing columns {sorted(required - set(rows[0]))}")

    def val(s):
        return float(s) if s not in ("", None) else np.nan

    present = tuple(m for m in MODALITY_ORDER if any(r[m.value] != "" for r in rows))
    by_probe: dict[str, list[dict]] = {}
    for r in rows:
        by_probe.setdefault(r["probe_id"], []).append(r)
    out = []
    for pid, rs in by_probe.items():
        S = np.array([[val(r[m.value]) for m in present] for r in rs]).reshape(len(rs), len(present))
        fused = np.array([val(r.get("fused")) for r in rs])
        out.append(
            ScoreMatrix(
                pid,
                [r["gallery_id"] for r in rs],
                present,
                S,
                None if np.isnan(fused).all() else fused,
            )
        )
    return out


def scores_csv_text(matrices: Iterable[ScoreMatrix]) -> str:
    buf = io.StringIO()
    write_scores_csv(buf, matrices)
    return buf.getvalue()
