"""Corpus schema, 3x expansion, ordering, and validation reporting."""
import json

import pytest

from irsis.dataset import (
    ExpandedSample,
    InstrumentAnnotation,
    build_synthetic_corpus,
    expand,
    load_corpus,
    load_expanded,
    validate_corpus,
    write_expanded,
)
from irsis.scene import InstrumentLabels


def _ann(image_id="img_000", index=0, l0="surgical instrument",
         l1="forceps", l2="bipolar forceps", mask_file=None):
    mask_file = mask_file or f"masks/{image_id}_{index}.irle"
    return InstrumentAnnotation(image_id, f"images/{image_id}.png", index,
                                mask_file, InstrumentLabels(l0, l1, l2))


def test_expand_single_annotation_levels():
    result = expand([_ann()])
    assert result.skipped == []
    assert [s.query for s in result.samples] == [
        "surgical instrument", "forceps", "bipolar forceps"]
    assert [s.level for s in result.samples] == [0, 1, 2]
    assert all(s.mask_file == "masks/img_000_0.irle" for s in result.samples)


def test_expand_empty_input():
    result = expand([])
    assert result.samples == [] and result.skipped == []


def test_expand_is_three_times_input():
    anns = [_ann(image_id=f"img_{i:05d}", index=j)
            for i in range(20) for j in range(3)]
    result = expand(anns)
    assert len(result.samples) == 3 * len(anns)


def test_expand_paper_scale_arithmetic():
    # 6,498 annotations expand to exactly 19,494 samples
    anns = [_ann(image_id=f"img_{i:05d}", index=j)
            for i in range(2166) for j in range(3)]
    assert len(anns) == 6498
    result = expand(anns)
    assert len(result.samples) == 19494
    assert len(result.samples) == 3 * 6498


def test_expand_order_is_input_order_independent(rng):
    anns = [_ann(image_id=f"img_{i:03d}", index=j, l2=f"tool {i}.{j}")
            for i in range(8) for j in range(2)]
    shuffled = list(anns)
    rng.shuffle(shuffled)
    samples = expand(anns).samples
    assert expand(shuffled).samples == samples
    # canonical order: image ids non-decreasing, levels cycling 0,1,2
    ids = [s.image_id for s in samples]
    assert ids == sorted(ids)
    assert [s.level for s in samples] == [0, 1, 2] * (len(samples) // 3)
    # no duplicates: injective on (annotation, level)
    flat = [(s.image_id, s.mask_file, s.level) for s in samples]
    assert len(flat) == len(set(flat))


def test_expand_skips_and_reports_missing_levels():
    good = _ann(image_id="img_b")
    bad = _ann(image_id="img_a", l1="  ")
    result = expand([good, bad])
    assert len(result.samples) == 3
    assert all(s.image_id == "img_b" for s in result.samples)
    assert result.skipped == ["img_a[0]: missing label at level 1"]


def test_corpus_round_trip(tmp_path):
    corpus = build_synthetic_corpus(tmp_path, n_images=4, seed=9)
    annotations, errors = load_corpus(corpus)
    assert errors == []
    assert len({a.image_id for a in annotations}) == 4
    report = validate_corpus(corpus, check_masks=True)
    assert report.ok, report.errors
    assert report.images == 4
    assert report.expanded == 3 * report.annotations
    assert report.divisible_by_3
    assert report.vocabulary["l0"] == ["surgical instrument"]
    assert all(report.vocabulary[f"l{lvl}"] for lvl in (0, 1, 2))


def test_validate_counts_fixture(tmp_path):
    corpus = build_synthetic_corpus(tmp_path, n_images=10, seed=4, n_instruments=2)
    report = validate_corpus(corpus)
    assert (report.images, report.annotations, report.expanded) == (10, 20, 60)


def test_duplicate_image_id_is_flagged(tmp_path):
    corpus = build_synthetic_corpus(tmp_path, n_images=2, seed=1, n_instruments=1)
    lines = corpus.read_text().splitlines()
    corpus.write_text("\n".join(lines + [lines[0]]) + "\n")
    report = validate_corpus(corpus)
    assert not report.ok
    assert any("duplicate image_id" in e and "line 3" in e for e in report.errors)


def test_schema_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "corpus.jsonl"
    rows = [
        json.dumps({"image_id": "a", "image_file": "x.png",
                    "instruments": [{"mask_file": "m.irle", "l0": "t", "l1": "u", "l2": "v"}]}),
        "this is not json",
        json.dumps({"image_id": "b", "image_file": "y.png"}),
        json.dumps({"image_id": "c", "image_file": "z.png",
                    "instruments": [{"l0": "t", "l1": "u", "l2": "v"}]}),
    ]
    path.write_text("\n".join(rows) + "\n")
    annotations, errors = load_corpus(path)
    assert len(annotations) == 1
    assert any(e.startswith("line 2: invalid JSON") for e in errors)
    assert any(e.startswith("line 3: missing field") for e in errors)
    assert any("line 4: instrument 0" in e for e in errors)


def test_mask_checks_catch_dimension_and_decode_problems(tmp_path):
    corpus = build_synthetic_corpus(tmp_path, n_images=1, seed=2, n_instruments=2)
    annotations, _ = load_corpus(corpus)
    (tmp_path / annotations[0].mask_file).write_text("IRLE1 7 5\n0,35\n")
    (tmp_path / annotations[1].mask_file).write_text("garbage")
    report = validate_corpus(corpus, check_masks=True)
    assert not report.ok
    assert any("mask is 7x5" in e for e in report.errors)
    assert any("undecodable mask" in e for e in report.errors)


def test_expanded_file_round_trip_and_cross_check(tmp_path):
    corpus = build_synthetic_corpus(tmp_path, n_images=3, seed=5)
    annotations, _ = load_corpus(corpus)
    samples = expand(annotations).samples
    out = tmp_path / "expanded.jsonl"
    write_expanded(samples, out)
    assert load_expanded(out) == samples
    assert validate_corpus(corpus, expanded_path=out).ok
    # byte-identical on re-write
    first = out.read_bytes()
    write_expanded(samples, out)
    assert out.read_bytes() == first
    # drift is detected
    write_expanded(samples[:-1], out)
    report = validate_corpus(corpus, expanded_path=out)
    assert not report.ok
    assert any("disagrees" in e for e in report.errors)


def test_expanded_sample_validation():
    with pytest.raises(ValueError):
        ExpandedSample.from_dict({"image_id": "a", "query": "q",
                                  "level": 5, "mask_file": "m"})
    s = ExpandedSample.from_dict({"image_id": "a", "query": "q",
                                  "level": 2, "mask_file": "m"})
    assert s.level == 2


def test_label_at_validation():
    ann = _ann()
    assert ann.label_at(2) == "bipolar forceps"
    with pytest.raises(ValueError):
        ann.label_at(3)
