from __future__ import annotations

import numpy as np
import pytest

from irsis.mask import (
    BinaryMask,
    BoundingBox,
    IrleError,
    StructuringElement,
    dilate,
    erode,
)

import pixel_oracles as po
from conftest import random_box, random_mask


# =====================================================================
# set algebra
# =====================================================================

def test_union_of_disjoint_rows():
    a = BinaryMask.from_rows(["1100"])
    b = BinaryMask.from_rows(["0110"])
    assert (a | b) == BinaryMask.from_rows(["1110"])
    assert (a | b).area == 3


def test_union_identity_and_idempotence():
    m = BinaryMask.from_rows(["10", "01"])
    empty = BinaryMask.empty(2, 2)
    assert m.union(empty) == m
    assert m.union(m) == m


def test_intersect_annihilator_and_box():
    m = BinaryMask.full(10, 10)
    assert m.intersect(BinaryMask.empty(10, 10)).area == 0
    clipped = m.intersect_box(BoundingBox(2, 2, 5, 5))
    assert clipped.area == 9
    arr = clipped.to_array()
    assert arr[2:5, 2:5].all()
    assert arr.sum() == 9


def test_subtract_box_cases():
    m = BinaryMask.full(6, 6)
    gone = m.subtract_box(BoundingBox(0, 0, 6, 6))
    assert gone.area == 0
    solo = BinaryMask.from_pixels(6, 6, [(0, 0)])
    assert solo.subtract_box(BoundingBox(3, 3, 6, 6)) == solo


def test_dimension_mismatch_raises():
    a = BinaryMask.empty(4, 4)
    b = BinaryMask.empty(5, 4)
    with pytest.raises(ValueError, match="dimensions differ"):
        a.union(b)
    with pytest.raises(ValueError, match="dimensions differ"):
        a.intersect(b)


def test_box_out_of_bounds_raises():
    m = BinaryMask.empty(4, 4)
    with pytest.raises(ValueError, match="exceeds"):
        m.intersect_box(BoundingBox(0, 0, 5, 2))
    with pytest.raises(ValueError):
        BoundingBox(2, 2, 2, 5)
    with pytest.raises(ValueError):
        BoundingBox(-1, 0, 2, 2)


def test_random_set_ops_match_enumeration(rng):
    for trial in range(60):
        w = int(rng.integers(3, 20))
        h = int(rng.integers(3, 20))
        m = random_mask(rng, w, h)
        box = random_box(rng, w, h)
        grid = po.box_grid(box, w, h)
        arr = m.to_array()
        assert np.array_equal(m.intersect_box(box).to_array(), arr & grid)
        assert np.array_equal(m.subtract_box(box).to_array(), arr & ~grid)
        # intersect + subtract partition the mask
        assert m.intersect_box(box).area + m.subtract_box(box).area == m.area
        assert (m.intersect_box(box) & m.subtract_box(box)).area == 0


def test_inclusion_exclusion(rng):
    for trial in range(60):
        w = int(rng.integers(2, 24))
        h = int(rng.integers(2, 24))
        a = random_mask(rng, w, h)
        b = random_mask(rng, w, h)
        assert (a | b).area == a.area + b.area - (a & b).area


def test_area_matches_enumeration(rng):
    for trial in range(20):
        m = random_mask(rng, 13, 9)
        assert m.area == po.area_by_enumeration(m.to_array())


def test_roundtrip_array_conversion(rng):
    arr = rng.random((17, 31)) < 0.5
    m = BinaryMask.from_array(arr)
    assert np.array_equal(m.to_array(), arr)
    assert m.width == 31 and m.height == 17


# =====================================================================
# morphology
# =====================================================================

def test_open_removes_isolated_pixel():
    m = BinaryMask.from_pixels(9, 9, [(4, 4)])
    assert m.morph_open(StructuringElement(3)).area == 0


def test_close_fills_one_pixel_hole():
    rows = [
        "000000000",
        "011111110",
        "011111110",
        "011101110",
        "011111110",
        "011111110",
        "000000000",
    ]
    m = BinaryMask.from_rows(rows)
    closed = m.morph_close(StructuringElement(3))
    assert closed.get(4, 3)
    assert closed.bits & m.bits == m.bits  # nothing lost


def test_morphology_matches_pixel_oracle(rng):
    for side in (3, 5):
        for trial in range(25):
            w = int(rng.integers(4, 18))
            h = int(rng.integers(4, 18))
            m = random_mask(rng, w, h, density=0.55)
            assert np.array_equal(
                m.morph_open(StructuringElement(side)).to_array(),
                po.open_oracle(m.to_array(), side),
            )
            assert np.array_equal(
                m.morph_close(StructuringElement(side)).to_array(),
                po.close_oracle(m.to_array(), side),
            )


def test_morphology_laws(rng):
    se = StructuringElement(3)
    for trial in range(50):
        m = random_mask(rng, 16, 16, density=0.5)
        opened = m.morph_open(se)
        closed = m.morph_close(se)
        assert opened.bits & m.bits == opened.bits  # open(m) subset of m
        assert closed.bits & m.bits == m.bits       # m subset of close(m)
        assert opened.morph_open(se) == opened
        assert closed.morph_close(se) == closed


def test_erode_dilate_steps(rng):
    se = StructuringElement(3)
    for trial in range(15):
        m = random_mask(rng, 12, 12, density=0.6)
        assert np.array_equal(erode(m, se).to_array(), po.erode_oracle(m.to_array(), 3))
        assert np.array_equal(dilate(m, se).to_array(), po.dilate_oracle(m.to_array(), 3))


def test_structuring_element_validation():
    with pytest.raises(ValueError):
        StructuringElement(4)
    with pytest.raises(ValueError):
        StructuringElement(0)
    assert StructuringElement(1).radius == 0


# =====================================================================
# connected components
# =====================================================================

def test_components_against_flood_fill(rng):
    for trial in range(40):
        w = int(rng.integers(4, 24))
        h = int(rng.integers(4, 24))
        m = random_mask(rng, w, h, density=0.35)
        got = m.connected_components()
        want = po.flood_fill_components(m.to_array())
        assert len(got) == len(want)
        got_sets = sorted(c.bits for c, _ in got)
        want_sets = sorted(BinaryMask.from_array(c).bits for c in want)
        assert got_sets == want_sets
        # areas descending, components partition the mask
        areas = [a for _, a in got]
        assert areas == sorted(areas, reverse=True)
        acc = BinaryMask.empty(w, h)
        for c, a in got:
            assert (acc & c).area == 0
            assert c.area == a
            acc = acc | c
        assert acc == m


def test_components_diagonal_touching_is_one():
    m = BinaryMask.from_rows(["10", "01"])
    comps = m.connected_components()
    assert len(comps) == 1
    assert comps[0][1] == 2


def test_components_empty_mask():
    assert BinaryMask.empty(5, 5).connected_components() == []


# =====================================================================
# tight boxes
# =====================================================================

def test_tight_box_basics(rng):
    assert BinaryMask.empty(4, 4).tight_box() is None
    m = BinaryMask.from_pixels(10, 8, [(2, 3), (6, 5)])
    b = m.tight_box()
    assert (b.x0, b.y0, b.x1, b.y1) == (2, 3, 7, 6)
    # shrinking any edge excludes at least one pixel
    for shrunk in (
        BoundingBox(3, 3, 7, 6),
        BoundingBox(2, 4, 7, 6),
        BoundingBox(2, 3, 6, 6),
        BoundingBox(2, 3, 7, 5),
    ):
        assert m.intersect_box(shrunk).area < m.area


# =====================================================================
# IRLE v1 wire format
# =====================================================================

def test_irle_all_background():
    m = BinaryMask.empty(2, 2)
    assert m.rle_encode() == b"IRLE1 2 2\n4\n"


def test_irle_all_foreground():
    m = BinaryMask.full(2, 2)
    assert m.rle_encode() == b"IRLE1 2 2\n0,4\n"


def test_irle_known_pattern():
    m = BinaryMask.from_rows(["110", "001"])
    # flat scan: 1 1 0 0 0 1 -> leading zero bg, 2 fg, 3 bg, 1 fg
    assert m.rle_encode() == b"IRLE1 3 2\n0,2,3,1\n"
    assert BinaryMask.rle_decode(m.rle_encode()) == m


def test_irle_roundtrip_random(rng):
    for trial in range(300):
        w = int(rng.integers(1, 40))
        h = int(rng.integers(1, 40))
        m = random_mask(rng, w, h, density=float(rng.random()))
        data = m.rle_encode()
        back = BinaryMask.rle_decode(data)
        assert back == m
        assert back.rle_encode() == data


def test_irle_runs_sum_invariant(rng):
    for trial in range(25):
        m = random_mask(rng, 9, 7)
        body = m.rle_encode().decode().split("\n")[1]
        runs = [int(t) for t in body.split(",")]
        assert sum(runs) == 63
        assert all(r >= 1 for r in runs[1:])


def test_irle_malformed_payloads():
    with pytest.raises(IrleError, match="header"):
        BinaryMask.rle_decode(b"NOPE 2 2\n4\n")
    with pytest.raises(IrleError, match="header"):
        BinaryMask.rle_decode(b"IRLE1 2\n4\n")
    with pytest.raises(IrleError, match="sum"):
        BinaryMask.rle_decode(b"IRLE1 2 2\n3\n")
    with pytest.raises(IrleError, match="non-negative"):
        BinaryMask.rle_decode(b"IRLE1 2 2\n-1,5\n")
    with pytest.raises(IrleError, match="run list"):
        BinaryMask.rle_decode(b"IRLE1 2 2\n1,a,2\n")
    with pytest.raises(IrleError):
        BinaryMask.rle_decode(b"IRLE1 0 2\n0\n")
    with pytest.raises(IrleError):
        BinaryMask.rle_decode(b"")


# =====================================================================
# construction validation
# =====================================================================

def test_mask_validation():
    with pytest.raises(ValueError):
        BinaryMask(0, 4)
    with pytest.raises(ValueError):
        BinaryMask(2, 2, 1 << 4)
    with pytest.raises(ValueError):
        BinaryMask.from_pixels(2, 2, [(2, 0)])


def test_from_rows_and_get():
    m = BinaryMask.from_rows(["01", "10"])
    assert not m.get(0, 0)
    assert m.get(1, 0)
    assert m.get(0, 1)
    with pytest.raises(ValueError):
        m.get(2, 0)
