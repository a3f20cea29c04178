import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import sheet_text
from mapmeta.ingest import parse_sheet_text
from mapmeta.phrase_graph import (
    LocationPhrase,
    build_graph,
    order_and_join,
    phrases_from_edges,
    read_phrases,
    strongly_connected_components,
    weakly_connected_components,
    write_phrases,
)
from oracles import scc_oracle, wcc_oracle


def row(ids, texts=None):
    texts = texts or [i.upper() for i in ids]
    boxes = [(rid, 100 * k, 0, 100 * k + 60, 20, t) for k, (rid, t) in enumerate(zip(ids, texts))]
    return parse_sheet_text(sheet_text(boxes, size=(100 * len(ids) + 100, 100)))


def test_mutual_pair_and_singleton():
    sheet = row(["a", "b", "c"])
    g = build_graph(sheet, [("a", "b"), ("b", "a")])
    assert strongly_connected_components(g) == [["a", "b"], ["c"]]
    assert weakly_connected_components(g) == [["a", "b"], ["c"]]


def test_one_way_edge_splits_under_scc_only():
    sheet = row(["a", "b", "c"])
    g = build_graph(sheet, [("a", "b"), ("b", "c")])
    assert strongly_connected_components(g) == [["a"], ["b"], ["c"]]
    assert weakly_connected_components(g) == [["a", "b", "c"]]


def test_cycle_of_three():
    sheet = row(["a", "b", "c", "d"])
    g = build_graph(sheet, [("a", "b"), ("b", "c"), ("c", "a"), ("c", "d")])
    assert strongly_connected_components(g) == [["a", "b", "c"], ["d"]]


def test_no_edges_gives_singletons():
    sheet = row(["x", "y"])
    assert strongly_connected_components(build_graph(sheet, [])) == [["x"], ["y"]]


def test_bad_edges():
    sheet = row(["a", "b"])
    with pytest.raises(ValueError, match="self-edge"):
        build_graph(sheet, [("a", "a")])
    with pytest.raises(KeyError):
        build_graph(sheet, [("a", "zz")])


def test_long_chain_does_not_recurse():
    n = 5000
    ids = [f"n{i}" for i in range(n)]
    sheet = row(ids)
    edges = [(ids[i], ids[i + 1]) for i in range(n - 1)] + [(ids[-1], ids[0])]
    assert strongly_connected_components(build_graph(sheet, edges)) == [sorted(ids)]


@st.composite
def graphs(draw):
    n = draw(st.integers(1, 12))
    nodes = [f"v{i:02d}" for i in range(n)]
    pairs = [(a, b) for a in nodes for b in nodes if a != b]
    edges = draw(st.lists(st.sampled_from(pairs), max_size=30)) if pairs else []
    return nodes, edges


@given(graphs())
def test_components_match_oracles(g):
    nodes, edges = g
    sheet = row(nodes)
    graph = build_graph(sheet, edges)
    scc = strongly_connected_components(graph)
    wcc = weakly_connected_components(graph)
    assert scc == scc_oracle(nodes, edges)
    assert wcc == wcc_oracle(nodes, edges)
    # partition of the node set, and every SCC sits inside one WCC
    assert sorted(x for c in scc for x in c) == sorted(nodes)
    where = {x: k for k, c in enumerate(wcc) for x in c}
    assert all(len({where[x] for x in c}) == 1 for c in scc)


# -- ordering --------------------------------------------------------------

def test_left_to_right_ordering():
    sheet = row(["r", "f"], ["Fall", "River"])
    ph = order_and_join(["f", "r"], sheet)
    assert ph.ids == ("r", "f")
    assert ph.text == "Fall River"


def test_vertical_tie_breaks_by_y_then_id():
    boxes = [("low", 0, 50, 40, 60, "Lower"), ("up", 0, 0, 40, 10, "Upper"),
             ("b", 100, 0, 140, 10, "B"), ("a", 100, 0, 140, 10, "A")]
    sheet = parse_sheet_text(sheet_text(boxes))
    assert order_and_join(["low", "up"], sheet).text == "Upper Lower"
    assert order_and_join(["b", "a"], sheet).ids == ("a", "b")


def test_empty_group():
    with pytest.raises(ValueError):
        order_and_join([], row(["a"]))


def test_phrases_from_edges_modes():
    sheet = row(["a", "b", "c"], ["Mount", "Shasta", "City"])
    edges = [("a", "b"), ("b", "a"), ("c", "b")]
    assert [p.text for p in phrases_from_edges(sheet, edges)] == ["Mount Shasta", "City"]
    assert [p.text for p in phrases_from_edges(sheet, edges, "wcc")] == ["Mount Shasta City"]
    with pytest.raises(ValueError):
        phrases_from_edges(sheet, edges, "clique")


def test_phrase_file_round_trip(tmp_path):
    phrases = [LocationPhrase(("a", "b"), "Fall River"), LocationPhrase(("c",), "A | B")]
    write_phrases("s1", phrases, tmp_path / "s1.phrases")
    sid, back = read_phrases(tmp_path / "s1.phrases")
    assert sid == "s1"
    assert [(p.ids, p.text) for p in back] == [(p.ids, p.text) for p in phrases]


@pytest.mark.parametrize("text", ["phrase s1 Fall River\n", "phrase s1 A | a\nphrase s2 B | b\n", "word s1 A | a\n"])
def test_malformed_phrase_file(tmp_path, text):
    (tmp_path / "x.phrases").write_text(text)
    with pytest.raises(ValueError):
        read_phrases(tmp_path / "x.phrases")
