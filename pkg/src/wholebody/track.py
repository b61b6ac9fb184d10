"""Detection post-processing and multi-subject tracking.

Boxes are ``(x, y, w, h)`` in pixels.  The tracker is a two-stage
confidence-bucketed IoU matcher with a constant-velocity motion model; the
optional patch-memory layer (:class:`PatchMemory`) reassigns ids by
appearance.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import fmt_float
from .errors import ConfigError, DimensionError, InputError, StreamOrderError

Box = tuple[float, float, float, float]


@dataclass
class Detection:
    video_id: str
    frame: int
    kind: str  # "body" | "face"
    box: Box
    confidence: float
    embedding: np.ndarray | None = None
    source: str = "primary"  # "primary" | "verifier"
    gt_id: int | None = None

    def __post_init__(self):
        if self.kind not in ("body", "face"):
            raise InputError(f"unknown detection kind {self.kind!r}")
        if self.source not in ("primary", "verifier"):
            raise InputError(f"unknown detection source {self.source!r}")
        if int(self.frame) < 0:
            raise InputError("frame must be >= 0")
        self.frame = int(self.frame)
        x, y, w, h = (float(v) for v in self.box)
        if not (w > 0 and h > 0):
            raise InputError("box width and height must be positive")
        self.box = (x, y, w, h)
        if not 0.0 <= self.confidence <= 1.0:
            raise InputError("confidence outside [0, 1]")
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=np.float64)


def clamp_box(box: Box, width: float, height: float) -> Box | None:
    x0, y0 = max(box[0], 0.0), max(box[1], 0.0)
    x1, y1 = min(box[0] + box[2], width), min(box[1] + box[3], height)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _inter(a: Box, b: Box) -> float:
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    return max(iw, 0.0) * max(ih, 0.0)


def iou(a: Box, b: Box) -> float:
    inter = _inter(a, b)
    union = a[2] * a[3] + b[2] * b[3] - inter
    # corner arithmetic can overshoot 1 by an ulp
    return min(inter / union, 1.0) if union > 0 else 0.0


def inner_iou(face: Box, body: Box) -> float:
    """Intersection over the face box area."""
    return min(_inter(face, body) / (face[2] * face[3]), 1.0)


def linear_assignment(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment; ``inf`` marks forbidden pairs.

    Among optimal solutions the number of allowed pairs is maximized first.
    Forbidden pairs never appear in the output.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.size == 0:
        return []
    forbidden = ~np.isfinite(C)
    if forbidden.all():
        return []
    fin = C[~forbidden]
    big = (np.abs(fin).max() + 1.0) * (min(C.shape) + 1) + 1.0
    rows, cols = linear_sum_assignment(np.where(forbidden, big, C))
    return sorted((int(r), int(c)) for r, c in zip(rows, cols) if not forbidden[r, c])


# ------------------------------------------------------------------ detection

def associate_body_face(bodies: Sequence[Detection], faces: Sequence[Detection],
                        min_inner_iou: float = 0.5) -> list[tuple[Detection, Detection | None]]:
    if not bodies:
        return []
    out: list[tuple[Detection, Detection | None]] = [(b, None) for b in bodies]
    if not faces:
        return out
    score = np.array([[inner_iou(f.box, b.box) for f in faces] for b in bodies])
    cost = np.where(score >= min_inner_iou, -score, np.inf)
    for r, c in linear_assignment(cost):
        out[r] = (bodies[r], faces[c])
    return out


def cross_verify(primary: Sequence[Detection], verifier: Sequence[Detection],
                 conf_min: float = 0.7, min_iou: float = 0.5) -> list[Detection]:
    """Keep a primary detection only if a confident verifier body overlaps it."""
    strong = [v for v in verifier if v.kind == "body" and v.confidence >= conf_min]
    return [p for p in primary if any(iou(p.box, v.box) >= min_iou for v in strong)]


# ------------------------------------------------------------------- tracking

@dataclass
class Track:
    track_id: int
    box: Box
    velocity: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    state: str = "active"  # active | lost | removed
    frames_since_update: int = 0
    last_frame: int = 0
    history: list[tuple[int, Box]] = field(default_factory=list)

    def predicted(self, frame: int) -> Box:
        dt = frame - self.last_frame
        return tuple(b + v * dt for b, v in zip(self.box, self.velocity))


@dataclass
class TrackerConfig:
    tau_high: float = 0.6
    tau_low: float = 0.1
    iou_min: float = 0.2
    patience: int = 1
    max_age: int = 30
    psr: bool = True
    psr_period: int = 30
    mse_threshold: float = 0.5
    psr_reduce: str = "min"  # how an id's stored patches combine: min | mean
    cross_verify: str = "auto"  # on | off | auto (when the video has verifier detections)
    verify_conf: float = 0.7
    verify_iou: float = 0.5
    min_inner_iou: float = 0.5
    frame_width: float | None = None
    frame_height: float | None = None

    def __post_init__(self):
        if not self.tau_high > self.tau_low:
            raise ConfigError("tau_high must exceed tau_low")
        if self.psr_period < 1:
            raise ConfigError("psr_period must be positive")
        if not self.mse_threshold > 0:
            raise ConfigError("mse_threshold must be positive")
        if self.psr_reduce not in ("min", "mean"):
            raise ConfigError("psr_reduce must be min or mean")
        if self.cross_verify not in ("on", "off", "auto"):
            raise ConfigError("cross_verify must be on, off or auto")


class IdAllocator:
    """Monotone id source shared by the tracker and the patch memory."""

    def __init__(self, start: int = 1):
        self._it = itertools.count(start)

    def __call__(self) -> int:
        return next(self._it)


class ByteTracker:
    """Two-stage IoU association for one video stream."""

    def __init__(self, config: TrackerConfig = TrackerConfig(), new_id: Callable[[], int] | None = None):
        self.config = config
        self.tracks: list[Track] = []
        self.new_id = new_id or IdAllocator()
        self.frame: int | None = None

    def _match(self, tracks, dets, frame):
        if not tracks or not dets:
            return [], list(range(len(tracks))), list(range(len(dets)))
        preds = [t.predicted(frame) for t in tracks]
        ious = np.array([[iou(p, d.box) for d in dets] for p in preds])
        cost = np.where(ious >= self.config.iou_min, 1.0 - ious, np.inf)
        pairs = linear_assignment(cost)
        mt = {r for r, _ in pairs}
        md = {c for _, c in pairs}
        return pairs, [i for i in range(len(tracks)) if i not in mt], [j for j in range(len(dets)) if j not in md]

    def _update(self, t: Track, det: Detection, frame: int):
        dt = frame - t.last_frame
        if dt > 0:
            t.velocity = tuple((n - o) / dt for n, o in zip(det.box, t.box))
        t.box = det.box
        t.last_frame = frame
        t.frames_since_update = 0
        # lost tracks are re-activated on a match
        t.state = "active"
        t.history.append((frame, det.box))

    def step(self, frame: int, detections: Sequence[Detection]) -> list[tuple[Detection, int]]:
        """Advance one frame; returns (detection, track_id) for every tracked detection."""
        if self.frame is not None and frame < self.frame:
            raise StreamOrderError(f"frame {frame} after frame {self.frame}")
        self.frame = frame
        cfg = self.config
        live = [t for t in self.tracks if t.state != "removed"]
        high = [d for d in detections if d.confidence >= cfg.tau_high]
        low = [d for d in detections if cfg.tau_low <= d.confidence < cfg.tau_high]
        out: list[tuple[Detection, int]] = []

        pairs, rem_t, rem_d = self._match(live, high, frame)
        for r, c in pairs:
            self._update(live[r], high[c], frame)
            out.append((high[c], live[r].track_id))
        second = [live[i] for i in rem_t if live[i].state == "active"]
        pairs2, _, _ = self._match(second, low, frame)
        matched = {id(live[r]) for r, _ in pairs} | {id(second[r]) for r, _ in pairs2}
        for r, c in pairs2:
            self._update(second[r], low[c], frame)
            out.append((low[c], second[r].track_id))
        for t in live:
            if id(t) in matched:
                continue
            t.frames_since_update = frame - t.last_frame
            if t.frames_since_update > cfg.max_age:
                t.state = "removed"
            elif t.frames_since_update >= cfg.patience:
                t.state = "lost"
        for j in rem_d:
            d = high[j]
            t = Track(self.new_id(), d.box, last_frame=frame, history=[(frame, d.box)])
            self.tracks.append(t)
            out.append((d, t.track_id))
        return out


@dataclass
class PatchMemory:
    """Per-id appearance patches used to correct track ids."""

    period: int = 30
    mse_threshold: float = 0.5
    reduce: str = "min"
    entries: dict[int, list[tuple[int, np.ndarray]]] = field(default_factory=dict)
    new_id: Callable[[], int] = field(default_factory=IdAllocator)
    dim: int | None = None

    def store(self, track_id: int, frame: int, emb: np.ndarray) -> None:
        self.entries.setdefault(track_id, []).append((frame, np.array(emb, dtype=np.float64)))

    def distance(self, emb: np.ndarray, track_id: int) -> float:
        mses = [float(np.mean((emb - e) ** 2)) for _, e in self.entries[track_id]]
        return min(mses) if self.reduce == "min" else float(np.mean(mses))


def psr_correct(assignments: Sequence[tuple[Detection, int]], memory: PatchMemory,
                frame: int) -> list[tuple[Detection, int]]:
    """Reassign ids of one frame's detections by minimum MSE against the memory.

    Detections are matched one-to-one to stored ids whose MSE is within the
    threshold.  A detection with no such id keeps its tracker id when that id is
    new to the memory (and its patch is stored); otherwise it gets a fresh id.
    Every ``period`` frames the current patches are appended.
    """
    for d, _ in assignments:
        if d.embedding is None:
            raise InputError("patch memory needs an embedding for every detection")
        if memory.dim is None:
            memory.dim = d.embedding.shape[0]
        elif d.embedding.shape[0] != memory.dim:
            raise DimensionError(f"embedding dim {d.embedding.shape[0]} != {memory.dim}")
    ids = sorted(memory.entries)
    result: list[int | None] = [None] * len(assignments)
    if ids and assignments:
        D = np.array([[memory.distance(d.embedding, i) for i in ids] for d, _ in assignments])
        cost = np.where(D <= memory.mse_threshold, D, np.inf)
        for r, c in linear_assignment(cost):
            result[r] = ids[c]
    used = {i for i in result if i is not None}
    out = []
    for k, (d, raw) in enumerate(assignments):
        tid = result[k]
        if tid is None:
            if raw not in memory.entries and raw not in used:
                tid = raw
            else:
                tid = memory.new_id()
            used.add(tid)
            memory.store(tid, frame, d.embedding)
        elif frame % memory.period == 0 and memory.entries[tid][-1][0] != frame:
            memory.store(tid, frame, d.embedding)
        out.append((d, tid))
    return out


@dataclass
class TrackRow:
    video_id: str
    frame: int
    track_id: int
    box: Box
    face_box: Box | None = None
    gt_id: int | None = None


def _by_frame(dets: Iterable[Detection]):
    last = None
    for frame, group in itertools.groupby(dets, key=lambda d: d.frame):
        if last is not None and frame <= last:
            raise StreamOrderError(f"detections not sorted by frame ({frame} after {last})")
        last = frame
        yield frame, list(group)


def run_tracker(detections: Iterable[Detection], config: TrackerConfig = TrackerConfig()) -> list[TrackRow]:
    """cross-verify -> body/face pairing -> two-stage tracking -> patch-memory correction."""
    videos: dict[str, list[Detection]] = {}
    for d in detections:
        videos.setdefault(d.video_id, []).append(d)
    rows: list[TrackRow] = []
    for vid, dets in videos.items():
        ids = IdAllocator()
        tracker = ByteTracker(config, ids)
        memory = PatchMemory(config.psr_period, config.mse_threshold, config.psr_reduce, new_id=ids)
        verify = config.cross_verify == "on" or (
            config.cross_verify == "auto" and any(d.source == "verifier" for d in dets))
        for frame, group in _by_frame(dets):
            if config.frame_width and config.frame_height:
                clamped = []
                for d in group:
                    b = clamp_box(d.box, config.frame_width, config.frame_height)
                    if b is not None:
                        d.box = b
                        clamped.append(d)
                group = clamped
            bodies = [d for d in group if d.source == "primary" and d.kind == "body"]
            faces = [d for d in group if d.source == "primary" and d.kind == "face"]
            if verify:
                bodies = cross_verify(bodies, [d for d in group if d.source == "verifier"],
                                      config.verify_conf, config.verify_iou)
            face_of = {id(b): f for b, f in associate_body_face(bodies, faces, config.min_inner_iou)}
            assigned = tracker.step(frame, bodies)
            if config.psr:
                assigned = psr_correct(assigned, memory, frame)
            for d, tid in sorted(assigned, key=lambda a: a[1]):
                f = face_of.get(id(d))
                rows.append(TrackRow(vid, frame, tid, d.box, f.box if f else None, d.gt_id))
    return rows


def count_id_switches(rows: Sequence[TrackRow]) -> int:
    """Number of times a ground-truth subject's output id changes between frames."""
    last: dict[tuple[str, int], int] = {}
    switches = 0
    for r in sorted(rows, key=lambda r: (r.video_id, r.frame, r.track_id)):
        if r.gt_id is None:
            continue
        key = (r.video_id, r.gt_id)
        if key in last and last[key] != r.track_id:
            switches += 1
        last[key] = r.track_id
    return switches


# ------------------------------------------------------------------ file I/O

def detection_from_json(obj: dict) -> Detection:
    try:
        return Detection(
            str(obj["video_id"]),
            obj["frame"],
            obj.get("kind", "body"),
            tuple(obj["box"]),
            float(obj["confidence"]),
            obj.get("embedding"),
            obj.get("source", "primary"),
            obj.get("gt_id"),
        )
    except KeyError as exc:
        raise InputError(f"missing field {exc}") from None


def detection_to_json(d: Detection) -> str:
    obj = {
        "video_id": d.video_id,
        "frame": d.frame,
        "kind": d.kind,
        "box": [float(fmt_float(v)) for v in d.box],
        "confidence": float(fmt_float(d.confidence)),
        "source": d.source,
    }
    if d.embedding is not None:
        obj["embedding"] = [float(fmt_float(v)) for v in d.embedding]
    if d.gt_id is not None:
        obj["gt_id"] = d.gt_id
    return json.dumps(obj)


def read_detections(path) -> list[Detection]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(detection_from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise InputError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except InputError as exc:
                raise InputError(f"line {lineno}: {exc}") from None
    return out


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as f:
        for d in dets:
            f.write(detection_to_json(d) + "\n")


TRACK_COLUMNS = ["video_id", "frame", "track_id", "x", "y", "w", "h",
                 "face_x", "face_y", "face_w", "face_h", "gt_id"]


def write_tracks_csv(path, rows: Iterable[TrackRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for r in rows:
            face = [fmt_float(v) for v in r.face_box] if r.face_box else ["", "", "", ""]
            w.writerow([r.video_id, r.frame, r.track_id, *(fmt_float(v) for v in r.box), *face,
                        "" if r.gt_id is None else r.gt_id])
