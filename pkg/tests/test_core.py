import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wholebody.core import (
    DEFAULT_DIMS,
    MAGIC,
    MODALITY_ORDER,
    GalleryEntry,
    Modality,
    ProbeRecord,
    RangeClass,
    Template,
    aggregate_gallery,
    build_gallery,
    build_probes,
    build_score_matrix,
    cosine_grad,
    cosine_similarity,
    deserialize_template,
    fmt_float,
    normalize,
    payload_nbytes,
    read_scores_csv,
    read_template_store,
    read_templates_jsonl,
    serialize_template,
    write_scores_csv,
    write_template_store,
    write_templates_jsonl,
)
from wholebody.errors import (
    DimensionError,
    EmptyAggregationError,
    FormatError,
    InputError,
    NormalizationError,
)

from oracles import bf_cosine, fd_grad, rel_err


def unit(rng, d):
    return normalize(rng.standard_normal(d))


# ------------------------------------------------------------------ cosine

def test_cosine_examples():
    e1, e2 = np.eye(2)
    assert cosine_similarity(e1, e1) == 1.0
    assert cosine_similarity(e1, e2) == 0.0
    assert cosine_similarity([0.6, 0.8], [0.8, 0.6]) == pytest.approx(0.96, abs=1e-15)


def test_cosine_dimension_mismatch():
    with pytest.raises(DimensionError):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


def test_normalize_zero():
    with pytest.raises(NormalizationError):
        normalize(np.zeros(4))


def test_cosine_symmetry_and_range():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a, b = unit(rng, 6), unit(rng, 6)
        s = cosine_similarity(a, b)
        assert s == cosine_similarity(b, a)
        assert -1.0 <= s <= 1.0


def test_cosine_grad_fd():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.standard_normal(5), rng.standard_normal(5)
        c, da, db = cosine_grad(a, b)
        assert c == pytest.approx(bf_cosine(a, b), abs=1e-12)
        assert rel_err(da, fd_grad(lambda x: cosine_grad(x, b)[0], a)) < 1e-4
        assert rel_err(db, fd_grad(lambda x: cosine_grad(a, x)[0], b)) < 1e-4


# ------------------------------------------------------------- aggregation

def _tpl(vec, q=1.0, sid="A", mid="m", mod=Modality.FACE):
    return Template(sid, mid, mod, np.asarray(vec, dtype=float), q)


def test_aggregate_examples():
    v = normalize([1.0, 2.0, 2.0])
    np.testing.assert_allclose(aggregate_gallery([_tpl(v, 0.2), _tpl(v, 0.9)]), v, atol=1e-15)
    with pytest.raises(NormalizationError):
        aggregate_gallery([_tpl(v), _tpl(-v)])
    np.testing.assert_allclose(aggregate_gallery([_tpl([1, 0]), _tpl([0, 1])]), [2**-0.5, 2**-0.5], atol=1e-15)
    with pytest.raises(EmptyAggregationError):
        aggregate_gallery([])


def test_aggregate_is_quality_weighted():
    out = aggregate_gallery([_tpl([1, 0], 0.75), _tpl([0, 1], 0.25)])
    np.testing.assert_allclose(out, normalize([0.75, 0.25]), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7), st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(seed, n, rnd):
    rng = np.random.default_rng(seed)
    tpls = [_tpl(unit(rng, 4), float(rng.uniform(0.05, 1.0)), mid=f"m{k}") for k in range(n)]
    shuffled = list(tpls)
    rnd.shuffle(shuffled)
    np.testing.assert_allclose(aggregate_gallery(tpls), aggregate_gallery(shuffled), atol=1e-12, rtol=0)


def test_aggregate_unit_norm():
    rng = np.random.default_rng(3)
    for _ in range(100):
        tpls = [_tpl(rng.standard_normal(5), float(rng.uniform(0, 1))) for _ in range(3)]
        assert abs(np.linalg.norm(aggregate_gallery(tpls)) - 1.0) < 1e-9


def test_template_validation():
    with pytest.raises(InputError):
        _tpl([1.0, 0.0], q=1.5)
    with pytest.raises(DimensionError):
        _tpl(np.zeros(3)).check_dim()
    _tpl(np.ones(512)).check_dim()


def test_build_gallery_and_probes():
    rng = np.random.default_rng(4)
    tpls = [
        Template("A", "a1", Modality.FACE, unit(rng, 3), 0.5),
        Template("A", "a2", Modality.FACE, unit(rng, 3), 0.5),
        Template("A", "a1", Modality.GAIT, unit(rng, 3), 0.5),
        Template("D", "d1", Modality.BODY, unit(rng, 3), 0.5),
    ]
    gal = build_gallery(tpls, ["D"])
    by = {g.subject_id: g for g in gal}
    assert by["A"].media_count == 2 and not by["A"].is_distractor
    assert by["D"].is_distractor and set(by["D"].vectors) == {Modality.BODY}
    probes = build_probes(tpls)
    assert sorted(p.probe_id for p in probes) == ["a1", "a2", "d1"]


# ------------------------------------------------------------ score matrix

def test_score_matrix_trivial():
    v = normalize([1.0, 1.0])
    g = [GalleryEntry("A", {Modality.FACE: v}, False, 1)]
    p = ProbeRecord("p", {Modality.FACE: v}, {Modality.FACE: 1.0}, "A")
    sm = build_score_matrix(p, g)
    assert sm.modalities == (Modality.FACE,)
    np.testing.assert_allclose(sm.scores, [[1.0]], atol=1e-15)


def test_score_matrix_missing_gait_column():
    rng = np.random.default_rng(5)
    g = [GalleryEntry(f"S{k}", {Modality.FACE: unit(rng, 4), Modality.BODY: unit(rng, 4)}, False, 1)
         for k in range(3)]
    p = ProbeRecord("p", {m: unit(rng, 4) for m in MODALITY_ORDER}, {}, None)
    sm = build_score_matrix(p, g)
    assert np.isnan(sm.column(Modality.GAIT)).all()
    assert np.isfinite(sm.column(Modality.FACE)).all()


def test_score_matrix_matches_double_loop():
    rng = np.random.default_rng(6)
    for _ in range(100):
        gal = []
        for k in range(5):
            vecs = {m: unit(rng, 6) for m in MODALITY_ORDER if rng.random() > 0.2}
            gal.append(GalleryEntry(f"S{k}", vecs, False, 1))
        pv = {m: unit(rng, 6) for m in MODALITY_ORDER if rng.random() > 0.2} or {Modality.FACE: unit(rng, 6)}
        sm = build_score_matrix(ProbeRecord("p", pv, {}, None), gal)
        full = sm.full()
        for gi, g in enumerate(gal):
            for k, m in enumerate(MODALITY_ORDER):
                if m in pv and m in g.vectors:
                    assert abs(full[gi, k] - bf_cosine(pv[m], g.vectors[m])) < 1e-12
                else:
                    assert np.isnan(full[gi, k])
        assert all(m in pv for m in sm.modalities)
        assert list(sm.modalities) == [m for m in MODALITY_ORDER if m in sm.modalities]


# ------------------------------------------------------------ binary layout

@pytest.mark.parametrize("mod,nbytes,mb", [
    (Modality.FACE, 2052, "0.002"),
    (Modality.GAIT, 32768, "0.031"),
    (Modality.BODY, 8192, "0.008"),
])
def test_payload_sizes(mod, nbytes, mb):
    assert payload_nbytes(mod) == nbytes
    t = Template("A", "m", mod, np.ones(DEFAULT_DIMS[mod]), 0.5)
    rec = serialize_template(t)
    (mlen,) = struct.unpack_from("<H", rec)
    assert len(rec) - 2 - mlen == nbytes
    assert f"{nbytes / 2**20:.3f}" == mb


def test_combined_size():
    total = sum(payload_nbytes(m) for m in MODALITY_ORDER)
    assert total == 43012
    assert f"{total / 2**20:.3f}" == "0.041"


def test_face_payload_carries_quality():
    t = Template("A", "m", Modality.FACE, np.arange(512) / 512.0, 0.375)
    rec = serialize_template(t)
    (mlen,) = struct.unpack_from("<H", rec)
    vals = np.frombuffer(rec[2 + mlen:], dtype="<f4")
    assert vals.shape == (513,) and vals[-1] == np.float32(0.375)


def test_binary_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    tpls = [Template(f"S{k}", f"m{k}", m, rng.standard_normal(DEFAULT_DIMS[m]), float(rng.uniform()),
                     RangeClass.LONG if k % 2 else RangeClass.CLOSE)
            for k, m in enumerate(MODALITY_ORDER * 2)]
    path = tmp_path / "t.bin"
    assert write_template_store(path, tpls) == 6
    assert path.read_bytes()[:8] == MAGIC
    back = read_template_store(path)
    for a, b in zip(tpls, back):
        assert (a.subject_id, a.media_id, a.modality, a.quality, a.range_class) == \
               (b.subject_id, b.media_id, b.modality, b.quality, b.range_class)
        np.testing.assert_array_equal(a.vector.astype(np.float32).astype(np.float64), b.vector)


def test_truncated_record():
    rec = serialize_template(Template("A", "m", Modality.BODY, np.ones(2048)))
    for cut in (1, 10, len(rec) - 1):
        with pytest.raises(FormatError):
            deserialize_template(rec[:cut])


def test_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTMAGIC")
    with pytest.raises(FormatError):
        read_template_store(p)


# --------------------------------------------------------------- text formats

def test_fmt_float():
    assert fmt_float(0.1) == "0.1"
    assert fmt_float(1 / 3) == "0.333333333"
    assert fmt_float(np.nan) == ""


def test_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    dims = {m: 4 for m in MODALITY_ORDER}
    tpls = [Template("S", f"m{k}", m, unit(rng, 4), 0.5) for k, m in enumerate(MODALITY_ORDER)]
    p = tmp_path / "t.jsonl"
    write_templates_jsonl(p, tpls)
    text = p.read_text()
    back = read_templates_jsonl(p, dims)
    write_templates_jsonl(p, back)
    assert p.read_text() == text
    assert list(json.loads(text.splitlines()[0])) == [
        "subject_id", "media_id", "modality", "vector", "quality", "range_class"]


def test_jsonl_error_names_line(tmp_path):
    p = tmp_path / "t.jsonl"
    good = json.dumps({"subject_id": "A", "media_id": "m", "modality": "body", "vector": [1, 0]})
    bad = json.dumps({"subject_id": "A", "media_id": "m", "modality": "body", "vector": [1, 0, 0]})
    p.write_text(good + "\n" + bad + "\n")
    with pytest.raises(DimensionError, match="line 2"):
        read_templates_jsonl(p, {m: 2 for m in MODALITY_ORDER})
    p.write_text(good + "\n{oops\n")
    with pytest.raises(FormatError, match="line 2"):
        read_templates_jsonl(p, {m: 2 for m in MODALITY_ORDER})


def test_scores_csv_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    gal = [GalleryEntry(f"S{k}", {m: unit(rng, 3) for m in MODALITY_ORDER[:2]}, False, 1) for k in range(4)]
    p = ProbeRecord("p0", {m: unit(rng, 3) for m in MODALITY_ORDER}, {}, None)
    sm = build_score_matrix(p, gal)
    path = tmp_path / "s.csv"
    write_scores_csv(path, [sm])
    lines = path.read_text().splitlines()
    assert lines[0] == "probe_id,gallery_id,face,gait,body,fused"
    assert lines[1].endswith(",,")  # body and fused missing
    back = read_scores_csv(path)[0]
    assert back.gallery_ids == sm.gallery_ids
    np.testing.assert_allclose(back.full(), sm.full(), atol=1e-9)
