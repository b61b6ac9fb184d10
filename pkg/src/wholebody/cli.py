"""Command-line entry point: ``wholebody <subcommand> ...``.

Every subcommand takes ``--config FILE`` (key=value lines, keys named like the
long flags) and ``--seed``.  Flags given on the command line win over the
config file.  The resolved configuration is logged to stderr.

Exit codes: 0 success, 1 runtime failure, 2 input or validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .core import (
    DEFAULT_DIMS,
    MODALITY_ORDER,
    Modality,
    RangeClass,
    read_scores_csv,
    read_template_store,
    read_templates_jsonl,
    write_scores_csv,
    write_template_store,
    write_templates_jsonl,
)
from .errors import ConfigError, InputError
from .track import TrackerConfig

log = logging.getLogger("wholebody")

ON_OFF = ("on", "off")


class ArgError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; raise instead so main() owns the exit code
    def error(self, message):
        raise ArgError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ------------------------------------------------------------------ config

def read_config(path) -> dict[str, str]:
    """key=value lines; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _explicit_dests(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    given = set()
    for action in parser._actions:
        for opt in action.option_strings:
            if any(a == opt or a.startswith(opt + "=") for a in argv):
                given.add(action.dest)
    return given


def resolve_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> dict:
    """Merge --config values under explicit flags; unknown keys raise ConfigError."""
    actions = {a.dest: a for a in parser._actions if a.option_strings and a.dest not in ("help", "config")}
    if args.config:
        explicit = _explicit_dests(parser, argv)
        for key, raw in read_config(args.config).items():
            if key not in actions:
                raise ConfigError(f"unknown config key {key!r}")
            if key in explicit:
                continue
            act = actions[key]
            try:
                val = act.type(raw) if act.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
            if act.choices and val not in act.choices:
                raise ConfigError(f"config key {key!r}: {val!r} not in {list(act.choices)}")
            setattr(args, key, val)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))
    return resolved


# --------------------------------------------------------------- subcommands

def cmd_ingest(args) -> int:
    dims = {Modality.FACE: args.face_dim, Modality.GAIT: args.gait_dim, Modality.BODY: args.body_dim}
    templates = [t.normalized() for t in read_templates_jsonl(args.input, dims)]
    n = write_template_store(args.output, templates)
    counts = {m.value: sum(t.modality is m for t in templates) for m in MODALITY_ORDER}
    print(json.dumps({"templates": n, "per_modality": counts}, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    write_templates_jsonl(args.output, read_template_store(args.input))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import ProtocolConfig, load_protocol, run_protocol, write_report

    gallery, probes, cfg, model = load_protocol(args.protocol)
    d = cfg.to_dict()
    if args.far is not None:
        d["far_targets"] = args.far
    if args.fpir is not None:
        d["fpir_target"] = args.fpir
    if args.rank_k is not None:
        d["rank_k"] = args.rank_k
    if args.fusion != "protocol":
        d["fusion"] = args.fusion == "on"
    if args.fusion_model:
        from .fusion import load_model

        model = load_model(args.fusion_model)
    cfg = ProtocolConfig(**d)
    report = run_protocol(gallery, probes, cfg, model)
    os.makedirs(args.out_dir, exist_ok=True)
    write_report(report, os.path.join(args.out_dir, "report.json"), os.path.join(args.out_dir, "report.csv"))
    if args.scores:
        from .core import build_score_matrix

        write_scores_csv(args.scores, [build_score_matrix(p, gallery) for p in probes])
    return 0


def read_labels(path) -> dict[str, dict]:
    """labels.csv: probe_id, subject_id (blank = non-mated), q_face, q_gait, q_body (optional)."""
    out = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "probe_id" not in reader.fieldnames:
            raise InputError(f"{path}: needs a probe_id column")
        for lineno, r in enumerate(reader, 2):
            q = {}
            for m in MODALITY_ORDER:
                v = (r.get(f"q_{m.value}") or "").strip()
                if v:
                    try:
                        q[m] = float(v)
                    except ValueError:
                        raise InputError(f"{path} line {lineno}: bad q_{m.value} {v!r}") from None
            out[r["probe_id"]] = {"subject_id": (r.get("subject_id") or "").strip() or None, "quality": q}
    return out


def _quality_features(matrices, labels):
    feats = {}
    for m in MODALITY_ORDER:
        vals = [labels.get(sm.probe_id, {}).get("quality", {}).get(m) for sm in matrices]
        if all(v is not None for v in vals):
            feats[m] = np.array(vals, dtype=np.float64).reshape(-1, 1)
    return feats


def cmd_fuse_train(args) -> int:
    from .fusion import fit_qme, save_model

    matrices = read_scores_csv(args.scores)
    labels = read_labels(args.labels)
    mates = []
    for sm in matrices:
        if sm.probe_id not in labels:
            raise InputError(f"probe {sm.probe_id} has no label row")
        sid = labels[sm.probe_id]["subject_id"]
        mates.append(sm.gallery_ids.index(sid) if sid in sm.gallery_ids else None)
    feats = _quality_features(matrices, labels)
    if not feats:
        raise InputError("no modality has a quality value for every probe")
    model, hist = fit_qme(
        [sm.full() for sm in matrices], mates, feats,
        method=args.method, epochs_qe=args.qe_epochs, lr_qe=args.qe_lr,
        epochs=args.epochs, lr=args.lr, margin=args.margin, seed=args.seed,
    )
    save_model(args.output, model)
    log.info("score triplet loss %.6g -> %.6g", hist["fusion"][0], hist["fusion"][-1])
    return 0


def cmd_fuse_apply(args) -> int:
    from .fusion import load_model

    model = load_model(args.model)
    matrices = read_scores_csv(args.scores)
    labels = read_labels(args.labels) if args.labels else {}
    for sm in matrices:
        q = labels.get(sm.probe_id, {}).get("quality", {})
        W = np.array([q.get(m, 0.5) for m in MODALITY_ORDER])
        if model.qe is not None:
            feats = {m: np.array([[q[m]]]) for m in q}
            if feats:
                W = model.qe.predict(feats, 1)[0]
        S = sm.full()
        ok = np.isfinite(S).any(axis=1)
        sm.fused = np.full(len(sm.gallery_ids), np.nan)
        if ok.any():
            sm.fused[ok] = model.fuse(S[ok], W)
    write_scores_csv(args.output, matrices)
    return 0


def read_batch(path):
    """batch.jsonl for loss-demo; returns (subject_ids, splits, vectors or None, score_rows or None)."""
    subjects, splits, vectors, rows = [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                subjects.append(str(obj["subject_id"]))
                split = obj.get("split")
                if split not in (None, "gallery", "probe"):
                    raise InputError(f"bad split {split!r}")
                splits.append(split)
                RangeClass(obj.get("range_class", "close"))
                vectors.append(obj.get("vector"))
                rows.append(obj.get("score_row"))
            except json.JSONDecodeError as exc:
                raise InputError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except (KeyError, ValueError) as exc:
                raise InputError(f"line {lineno}: {exc}") from None
    return subjects, splits, vectors, rows


def _partition_from_batch(subjects, splits, vectors, rows, hp, seed):
    from .losses import BatchPartition, partition_batch, score_batch

    if not subjects:
        raise InputError("empty batch")
    if all(v is not None for v in vectors):
        X = np.array(vectors, dtype=np.float64)
        if X.ndim != 2:
            raise InputError("all vectors must have the same length")
        if all(s is None for s in splits):
            names = list(dict.fromkeys(subjects))
            order = np.concatenate([[i for i, s in enumerate(subjects) if s == n] for n in names]).astype(int)
            part = partition_batch(names, [subjects.count(n) for n in names], hp.mated_fraction, seed)
            return score_batch(part, X[order]), X[order], [subjects[i] for i in order]
        if any(s is None for s in splits):
            raise InputError("either every exemplar has a split or none does")
        gal = [i for i, s in enumerate(splits) if s == "gallery"]
        gsub = [subjects[i] for i in gal]
        if len(set(gsub)) != len(gsub):
            raise InputError("one gallery exemplar per subject")
        probes = [i for i, s in enumerate(splits) if s == "probe"]
        col = {s: c for c, s in enumerate(gsub)}
        mated = [(r, col[subjects[i]]) for r, i in enumerate(probes) if subjects[i] in col]
        non_mated = [r for r, i in enumerate(probes) if subjects[i] not in col]
        part = BatchPartition(gsub, mated, non_mated, None, gal, probes, [subjects[i] for i in probes])
        part.validate()
        return score_batch(part, X), X, subjects
    if all(r is not None for r in rows):
        gsub = [s for s, sp in zip(subjects, splits) if sp == "gallery"]
        prs = [(s, r) for s, sp, r in zip(subjects, splits, rows) if sp == "probe"]
        S = np.array([r for _, r in prs], dtype=np.float64)
        if S.ndim != 2 or S.shape[1] != len(gsub):
            raise InputError("score_row length must equal the number of gallery exemplars")
        col = {s: c for c, s in enumerate(gsub)}
        mated = [(r, col[s]) for r, (s, _) in enumerate(prs) if s in col]
        non_mated = [r for r, (s, _) in enumerate(prs) if s not in col]
        part = BatchPartition(gsub, mated, non_mated, S, probe_subjects=[s for s, _ in prs])
        part.validate()
        return part, None, subjects
    raise InputError("every exemplar needs a vector, or every probe a score_row")


def cmd_loss_demo(args) -> int:
    from .losses import LossHyperparams, descend_open_set, loss_components, score_batch
    from .synthetic import embedding_fnir, make_embedding_toy

    hp = LossHyperparams(args.alpha, args.beta, args.gamma, args.lam, mated_fraction=args.mated_fraction,
                         include_self=args.include_self == "on")
    if args.batch:
        part, X, labels = _partition_from_batch(*read_batch(args.batch), hp, args.seed)
    else:
        from .losses import partition_batch

        X, lab = make_embedding_toy(args.seed, args.subjects, args.per_subject)
        labels = [f"S{k:03d}" for k in lab]
        part = score_batch(partition_batch(list(dict.fromkeys(labels)), [args.per_subject] * args.subjects,
                                           hp.mated_fraction, args.seed), X)
    out = loss_components(part, hp)
    if args.steps > 0:
        if X is None:
            raise InputError("gradient steps need exemplar vectors, not score rows")
        out["fnir_before"] = embedding_fnir(X, labels, args.fpir)
        X2, hist = descend_open_set(X, labels, args.steps, args.lr, hp, args.seed)
        out["fnir_after"] = embedding_fnir(X2, labels, args.fpir)
        out["l_open_first_step"] = hist[0]
        out["l_open_last_step"] = hist[-1]
    text = json.dumps(out, indent=2, sort_keys=True, allow_nan=True) + "\n"
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_track(args) -> int:
    from .track import TrackerConfig, count_id_switches, read_detections, run_tracker, write_tracks_csv

    cfg = TrackerConfig(
        tau_high=args.tau_high, tau_low=args.tau_low, iou_min=args.iou_min, patience=args.patience,
        max_age=args.max_age, psr=args.psr == "on", psr_period=args.psr_period,
        mse_threshold=args.mse_threshold, psr_reduce=args.psr_reduce, cross_verify=args.cross_verify,
        verify_conf=args.verify_conf, verify_iou=args.verify_iou, min_inner_iou=args.min_inner_iou,
        frame_width=args.frame_width, frame_height=args.frame_height,
    )
    rows = run_tracker(read_detections(args.detections), cfg)
    write_tracks_csv(args.output, rows)
    log.info("%d track rows, %d ground-truth id switches", len(rows), count_id_switches(rows))
    return 0


def cmd_turbsim(args) -> int:
    from .turbsim import TurbulenceParams, ZernikeSpec, degrade_image, read_image, write_image

    spec = ZernikeSpec(args.j_max, args.grid, None, args.kernel)
    params = TurbulenceParams(args.dr0, args.noise, args.tile, args.seed, args.cn2)
    img = read_image(args.input)
    write_image(args.output, degrade_image(img, spec, params, args.frame), like=args.input)
    return 0


def cmd_scenario_gen(args) -> int:
    from .synthetic import make_crossing_scenario
    from .track import write_detections

    dets = make_crossing_scenario(args.seed, args.frames, args.occlusion, args.speed, args.emb_dim,
                                  args.emb_noise, args.faces == "on", args.verifier == "on", args.video_id)
    write_detections(args.output, dets)
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="wholebody", description="Whole-body biometric recognition toolkit.",
                     formatter_class=fmt, allow_abbrev=False)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt, allow_abbrev=False)
        p.add_argument("--config", help="key=value file; command-line flags win")
        p.add_argument("--seed", type=int, default=0, help="seed for every random substream")
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "validate templates.jsonl and write the binary template store")
    p.add_argument("input", help="templates.jsonl")
    p.add_argument("output", help="templates.bin")
    p.add_argument("--face-dim", type=int, default=DEFAULT_DIMS[Modality.FACE], help="face identity dims")
    p.add_argument("--gait-dim", type=int, default=DEFAULT_DIMS[Modality.GAIT], help="gait dims")
    p.add_argument("--body-dim", type=int, default=DEFAULT_DIMS[Modality.BODY], help="body shape dims")

    p = add("export", cmd_export, "convert a binary template store back to JSON-Lines")
    p.add_argument("input", help="templates.bin")
    p.add_argument("output", help="templates.jsonl")

    p = add("eval", cmd_eval, "run a verification / identification protocol")
    p.add_argument("protocol", help="protocol.json")
    p.add_argument("--out-dir", default=".", help="directory for report.json and report.csv")
    p.add_argument("--far", type=_floats, default=None, help="comma-separated FAR targets (protocol value if unset)")
    p.add_argument("--fpir", type=float, default=None, help="FPIR target (protocol value if unset)")
    p.add_argument("--rank-k", type=int, default=None, help="closed-set rank (protocol value if unset)")
    p.add_argument("--fusion", choices=("on", "off", "protocol"), default="protocol", help="fused system rows")
    p.add_argument("--fusion-model", default=None, help="fusion_model.json overriding the protocol's")
    p.add_argument("--scores", default=None, help="also write raw per-modality scores.csv here")

    p = add("fuse-train", cmd_fuse_train, "train quality estimator and fusion experts")
    p.add_argument("scores", help="scores.csv")
    p.add_argument("labels", help="labels.csv with probe_id, subject_id, q_face, q_gait, q_body")
    p.add_argument("output", help="fusion_model.json")
    p.add_argument("--method", choices=("zscore", "minmax"), default="zscore", help="score normalization")
    p.add_argument("--epochs", type=int, default=1000, help="expert training steps")
    p.add_argument("--lr", type=float, default=0.2, help="expert learning rate")
    p.add_argument("--margin", type=float, default=1.0, help="score triplet margin")
    p.add_argument("--qe-epochs", type=int, default=300, help="quality estimator steps")
    p.add_argument("--qe-lr", type=float, default=5.0, help="quality estimator learning rate")

    p = add("fuse-apply", cmd_fuse_apply, "fill the fused column of scores.csv")
    p.add_argument("scores", help="scores.csv")
    p.add_argument("model", help="fusion_model.json")
    p.add_argument("output", help="scores.csv with fused column")
    p.add_argument("--labels", default=None, help="labels.csv supplying quality features")

    p = add("loss-demo", cmd_loss_demo, "evaluate the open-set loss on a batch")
    p.add_argument("--batch", default=None, help="batch.jsonl (default: synthetic 2-D toy)")
    p.add_argument("--output", default=None, help="JSON output path (default: stdout)")
    p.add_argument("--alpha", type=float, default=16.0, help="detection sigmoid sharpness")
    p.add_argument("--beta", type=float, default=16.0, help="identification sigmoid sharpness")
    p.add_argument("--gamma", type=float, default=16.0, help="soft rank sharpness")
    p.add_argument("--lam", type=float, default=0.5, help="weight of the non-mated term")
    p.add_argument("--mated-fraction", type=float, default=0.5, help="share of subjects enrolled per batch")
    p.add_argument("--include-self", choices=ON_OFF, default="on", help="soft rank counts the mate itself")
    p.add_argument("--subjects", type=int, default=10, help="toy subjects")
    p.add_argument("--per-subject", type=int, default=8, help="toy exemplars per subject")
    p.add_argument("--steps", type=int, default=0, help="gradient descent steps on the embeddings")
    p.add_argument("--lr", type=float, default=0.1, help="step size")
    p.add_argument("--fpir", type=float, default=0.1, help="FPIR for the before/after FNIR")

    d = TrackerConfig()
    p = add("track", cmd_track, "multi-subject tracking with patch-memory id correction")
    p.add_argument("detections", help="detections.jsonl")
    p.add_argument("output", help="tracks.csv")
    p.add_argument("--tau-high", type=float, default=d.tau_high, help="first-stage confidence")
    p.add_argument("--tau-low", type=float, default=d.tau_low, help="lowest usable confidence")
    p.add_argument("--iou-min", type=float, default=d.iou_min, help="minimum IoU for a match")
    p.add_argument("--patience", type=int, default=d.patience, help="missed frames before a track is lost")
    p.add_argument("--max-age", type=int, default=d.max_age, help="frames a lost track is kept")
    p.add_argument("--psr", choices=ON_OFF, default="on", help="patch-memory id correction")
    p.add_argument("--psr-period", type=int, default=d.psr_period, help="frames between stored patches")
    p.add_argument("--mse-threshold", type=float, default=d.mse_threshold, help="largest MSE accepted as a match")
    p.add_argument("--psr-reduce", choices=("min", "mean"), default=d.psr_reduce, help="combine stored patches")
    p.add_argument("--cross-verify", choices=("on", "off", "auto"), default=d.cross_verify,
                   help="require verifier agreement")
    p.add_argument("--verify-conf", type=float, default=d.verify_conf, help="verifier confidence floor")
    p.add_argument("--verify-iou", type=float, default=d.verify_iou, help="verifier overlap floor")
    p.add_argument("--min-inner-iou", type=float, default=d.min_inner_iou, help="face-in-body overlap floor")
    p.add_argument("--frame-width", type=float, default=None, help="clamp boxes to this width")
    p.add_argument("--frame-height", type=float, default=None, help="clamp boxes to this height")

    p = add("turbsim", cmd_turbsim, "degrade an image with simulated atmospheric turbulence")
    p.add_argument("input", help=".pgm or float image")
    p.add_argument("output", help="output image (same format rules)")
    p.add_argument("--dr0", type=float, default=2.0, help="aperture diameter over Fried parameter, 0 = none")
    p.add_argument("--noise", type=float, default=0.0, help="white noise standard deviation")
    p.add_argument("--tile", type=int, default=64, help="tile size with one kernel each")
    p.add_argument("--frame", type=int, default=0, help="frame index for the random substreams")
    p.add_argument("--j-max", type=int, default=28, help="highest Noll index")
    p.add_argument("--grid", type=int, default=256, help="pupil grid size")
    p.add_argument("--kernel", type=int, default=33, help="initial kernel crop size")
    p.add_argument("--cn2", type=float, default=None, help="turbulence strength, recorded only")

    p = add("scenario-gen", cmd_scenario_gen, "write a scripted two-subject crossing as detections.jsonl")
    p.add_argument("output", help="detections.jsonl")
    p.add_argument("--frames", type=int, default=45, help="frames")
    p.add_argument("--occlusion", type=int, default=10, help="frames of mutual occlusion")
    p.add_argument("--speed", type=float, default=10.0, help="pixels per frame")
    p.add_argument("--emb-dim", type=int, default=16, help="appearance embedding size")
    p.add_argument("--emb-noise", type=float, default=0.05, help="per-frame embedding noise")
    p.add_argument("--faces", choices=ON_OFF, default="on", help="emit face boxes")
    p.add_argument("--verifier", choices=ON_OFF, default="on", help="emit verifier detections")
    p.add_argument("--video-id", default="crossing", help="video id")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        resolve_config(_subparser(parser, args.command), args, argv)
        return args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
