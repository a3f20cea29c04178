import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import sheet_text
from mapmeta.ingest import (
    DegeneratePolygonError,
    MapSheet,
    SheetFormatError,
    SheetValidationError,
    TextRegion,
    caps_flag,
    derive_geometry,
    emit_sheet,
    iter_sheet_files,
    parse_sheet,
    parse_sheet_text,
    write_sheet,
)

BOX = ((0, 0), (10, 0), (10, 4), (0, 4))


def rotate(poly, deg, about=(0.0, 0.0)):
    """Rotate clockwise on screen (y down) by ``deg`` degrees."""
    t = math.radians(deg)
    ox, oy = about
    out = []
    for x, y in poly:
        dx, dy = x - ox, y - oy
        out.append((ox + dx * math.cos(t) - dy * math.sin(t), oy + dx * math.sin(t) + dy * math.cos(t)))
    return out


def test_two_region_sheet_keeps_ids_and_order():
    text = sheet_text([("a", 80, 10, 120, 30, "Fall"), ("b", 270, 10, 330, 30, "River")])
    sheet = parse_sheet_text(text)
    assert [r.id for r in sheet.regions] == ["a", "b"]
    assert sheet.region("a").center == (100.0, 20.0)
    assert sheet.region("b").center[0] == 300.0


def test_duplicate_region_id_rejected():
    text = sheet_text([("r1", 0, 0, 10, 4, "A"), ("r1", 20, 0, 30, 4, "B")])
    with pytest.raises(SheetValidationError, match="duplicate"):
        parse_sheet_text(text)


def test_many_regions():
    regions = [(f"r{i}", (i % 20) * 50, (i // 20) * 30, (i % 20) * 50 + 40, (i // 20) * 30 + 20, f"w{i}")
               for i in range(293)]
    sheet = parse_sheet_text(sheet_text(regions, size=(1200, 600)))
    assert len(sheet.regions) == 293


@pytest.mark.parametrize("line,match", [
    ("sheet s1 100", "header"),
    ("sheet s1 100 100 1 2 3", "header"),
    ("sheet s1 100 abc", "non-numeric"),
])
def test_bad_header(line, match):
    with pytest.raises(SheetFormatError, match=match) as exc:
        parse_sheet_text(line + "\n")
    assert exc.value.line == 1


def test_format_error_carries_line_number():
    text = "sheet s1 100 100\nregion r1 0 0 10 0 10 x 0 4 A\n"
    with pytest.raises(SheetFormatError) as exc:
        parse_sheet_text(text, source="f.sheet")
    assert exc.value.line == 2
    assert "f.sheet:2" in str(exc.value)


@pytest.mark.parametrize("text", [
    "region r1 0 0 10 0 10 4 0 4 A\n",
    "sheet s1 10 10\nsheet s2 10 10\n",
    "sheet s1 10 10\nbogus\n",
    "sheet s1 10 10\nregion r1 0 0 10 0 10 4 0 4\n",
    "sheet s1 10 10\ngroup\n",
    "",
])
def test_malformed_files(text):
    with pytest.raises(SheetFormatError):
        parse_sheet_text(text)


def test_degenerate_polygon_names_region():
    text = "sheet s1 100 100\nregion flat 0 0 5 0 10 0 20 0 A\n"
    with pytest.raises(DegeneratePolygonError, match="flat"):
        parse_sheet_text(text)


@pytest.mark.parametrize("groups,match", [
    ((("a", "zz"),), "unknown"),
    ((("a", "b"), ("b",)), "more than one"),
])
def test_group_validation(groups, match):
    text = sheet_text([("a", 0, 0, 10, 4, "A"), ("b", 20, 0, 30, 4, "B")], groups=groups)
    with pytest.raises(SheetValidationError, match=match):
        parse_sheet_text(text)


def test_overlapping_regions_accepted():
    sheet = parse_sheet_text(sheet_text([("a", 0, 0, 10, 4, "A"), ("b", 5, 0, 15, 4, "B")]))
    assert len(sheet.regions) == 2


@pytest.mark.parametrize("extra,gt,corners", [
    ("", None, None),
    ("34.5 -115.5", (34.5, -115.5), None),
    ("34 -116 35 -115", None, ((34.0, -116.0), (35.0, -115.0))),
    ("34.5 -115.5 34 -116 35 -115", (34.5, -115.5), ((34.0, -116.0), (35.0, -115.0))),
])
def test_header_coordinates(extra, gt, corners):
    sheet = parse_sheet_text(sheet_text([("a", 0, 0, 10, 4, "A")], header_extra=extra))
    assert sheet.gt_location == gt
    assert sheet.corners == corners


def test_comments_blank_lines_and_multiword_text():
    text = "# header\nsheet s1 100 100\n\nregion a 0 0 10 0 10 4 0 4   St  Paul \n"
    sheet = parse_sheet_text(text)
    assert sheet.region("a").text == "St  Paul"


def test_all_groups_adds_singletons():
    text = sheet_text([("a", 0, 0, 10, 4, "A"), ("b", 20, 0, 30, 4, "B"), ("c", 40, 0, 50, 4, "C")],
                      groups=[("b", "a")])
    assert parse_sheet_text(text).all_groups() == [("b", "a"), ("c",)]


def test_unknown_region_lookup():
    sheet = parse_sheet_text(sheet_text([("a", 0, 0, 10, 4, "A")]))
    with pytest.raises(KeyError):
        sheet.region("nope")


# -- geometry --------------------------------------------------------------

def test_axis_aligned_box_is_horizontal():
    center, w, h, angle = derive_geometry(BOX)
    assert center == (5.0, 2.0)
    assert (w, h, angle) == (10.0, 4.0, 90.0)


def test_box_rotated_ninety_is_vertical():
    _, w, h, angle = derive_geometry(rotate(BOX, 90))
    assert w == pytest.approx(10.0)
    assert h == pytest.approx(4.0)
    assert angle == pytest.approx(0.0, abs=1e-9)


def test_box_rotated_thirty_clockwise():
    # long edge turned 30 degrees clockwise from horizontal points at 120 from screen-up
    _, w, h, angle = derive_geometry(rotate(BOX, 30, about=(5, 2)))
    assert angle == pytest.approx(120.0, abs=1e-9)
    assert (w, h) == (pytest.approx(10.0), pytest.approx(4.0))


def test_collinear_corners_rejected():
    with pytest.raises(DegeneratePolygonError):
        derive_geometry(((0, 0), (1, 1), (2, 2), (3, 3)))


def test_wrong_corner_count_rejected():
    with pytest.raises(DegeneratePolygonError):
        derive_geometry(((0, 0), (1, 0), (1, 1)))


@given(st.floats(0, 360), st.floats(1, 200), st.floats(1, 200), st.booleans())
def test_half_turn_leaves_geometry_unchanged(deg, w, h, reverse):
    poly = [(0, 0), (w, 0), (w, h), (0, h)]
    if reverse:
        poly = poly[::-1]
    base = derive_geometry(rotate(poly, deg))
    turned = derive_geometry(rotate(poly, deg + 180))
    assert turned[1] == pytest.approx(base[1])
    assert turned[2] == pytest.approx(base[2])
    diff = abs(turned[3] - base[3])
    assert min(diff, 180 - diff) == pytest.approx(0.0, abs=1e-6)


@given(st.floats(0, 360), st.floats(1, 200), st.floats(1, 200))
def test_angle_in_range(deg, w, h):
    _, width, height, angle = derive_geometry(rotate([(0, 0), (w, 0), (w, h), (0, h)], deg))
    assert 0.0 <= angle < 180.0
    assert width >= height > 0


# -- caps flag -------------------------------------------------------------

@pytest.mark.parametrize("text,flag", [
    ("SUMMIT", 1), ("Summit", 0), ("1234", 0), ("U.S.", 1), ("MT. 4521", 1), ("", 0),
])
def test_caps_flag(text, flag):
    assert caps_flag(text) == flag


@given(st.text(), st.text(alphabet="0123456789.,-'() "))
def test_caps_flag_ignores_non_letters(text, noise):
    assert caps_flag(text) == caps_flag(text)
    if any(c.isalpha() for c in text):
        assert caps_flag(text + noise) == caps_flag(text)


# -- round trip ------------------------------------------------------------

coord = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


@st.composite
def sheets(draw):
    n = draw(st.integers(1, 6))
    regions = []
    for i in range(n):
        x, y = draw(coord), draw(coord)
        w = draw(st.floats(0.5, 300))
        h = draw(st.floats(0.5, 300))
        deg = draw(st.floats(0, 360))
        text = draw(st.text(alphabet=st.characters(blacklist_categories=("Cs", "Zs", "Zl", "Zp", "Cc")),
                            min_size=1, max_size=12))
        poly = rotate([(x, y), (x + w, y), (x + w, y + h), (x, y + h)], deg, about=(x, y))
        regions.append(TextRegion(f"r{i}", text, poly))
    ids = [r.id for r in regions]
    groups = [tuple(ids[:2])] if n >= 2 and draw(st.booleans()) else []
    gt = (draw(st.floats(-90, 90)), draw(st.floats(-180, 180))) if draw(st.booleans()) else None
    corners = None
    if draw(st.booleans()):
        corners = ((draw(st.floats(-90, 90)), draw(st.floats(-180, 180))),
                   (draw(st.floats(-90, 90)), draw(st.floats(-180, 180))))
    return MapSheet("sheet-x", draw(st.floats(1, 1e5)), draw(st.floats(1, 1e5)),
                    tuple(regions), tuple(groups), gt, corners)


@given(sheets())
def test_emit_parse_round_trip(sheet):
    back = parse_sheet_text(emit_sheet(sheet))
    assert back == sheet
    assert emit_sheet(back) == emit_sheet(sheet)


def test_file_helpers(tmp_path):
    sheet = parse_sheet_text(sheet_text([("a", 0, 0, 10, 4, "A")], sid="one"))
    write_sheet(sheet, tmp_path / "one.sheet")
    (tmp_path / "notes.txt").write_text("x")
    assert iter_sheet_files([tmp_path]) == [tmp_path / "one.sheet"]
    assert parse_sheet(tmp_path / "one.sheet") == sheet
