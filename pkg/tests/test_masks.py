import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamforge.buffer import Group, parse_layout
from streamforge.masks import (
    LayoutError, build_group_mask, expand_to_token_mask, render_mask,
)


def layout_of(n_lt, has_st, n_stream):
    groups = [Group("Ref")] + [Group("LT", i) for i in range(n_lt)]
    if has_st:
        groups.append(Group("ST"))
    return tuple(groups + [Group("S", j) for j in range(n_stream)])


layouts = st.builds(layout_of, st.integers(0, 3), st.booleans(), st.integers(0, 3))


def rule_oracle(layout):
    n = len(layout)
    out = [[False] * n for _ in range(n)]
    for q in range(n):
        for k in range(n):
            out[q][k] = layout[q].kind == "S" or layout[k].kind != "S"
    return out


def test_two_group_example():
    mask = build_group_mask(parse_layout("Ref,S0"))
    assert mask.allowed.astype(int).tolist() == [[1, 0], [1, 1]]


def test_six_group_example_blocks_nine_cells():
    mask = build_group_mask(parse_layout("Ref,LT0,ST,S0,S1,S2"))
    assert mask.blocked_count == 9
    assert not mask.allowed[:3, 3:].any()


def test_reference_only():
    assert build_group_mask(parse_layout("Ref")).allowed.tolist() == [[True]]


def test_layout_must_start_with_reference():
    with pytest.raises(LayoutError):
        build_group_mask(parse_layout("LT0,S0"))
    with pytest.raises(LayoutError):
        build_group_mask(())


@given(layouts)
def test_mask_matches_rule_enumeration(layout):
    mask = build_group_mask(layout)
    assert mask.allowed.tolist() == rule_oracle(layout)
    assert mask.allowed.diagonal().all()
    n_stream = sum(g.is_stream for g in layout)
    assert mask.blocked_count == (len(layout) - n_stream) * n_stream


@given(layouts)
def test_asymmetry_witness(layout):
    mask = build_group_mask(layout)
    idx = {g: i for i, g in enumerate(layout)}
    for c in (g for g in layout if not g.is_stream):
        for s in (g for g in layout if g.is_stream):
            assert mask.allowed[idx[s], idx[c]] and not mask.allowed[idx[c], idx[s]]


@given(st.integers(0, 3), st.booleans(), st.integers(0, 3), st.integers(0, 3))
def test_context_rows_independent_of_stream_length(n_lt, has_st, s1, s2):
    a = build_group_mask(layout_of(n_lt, has_st, s1))
    b = build_group_mask(layout_of(n_lt, has_st, s2))
    n_ctx = 1 + n_lt + int(has_st)
    assert np.array_equal(a.allowed[:n_ctx, :n_ctx], b.allowed[:n_ctx, :n_ctx])


def test_token_expansion_example():
    mask = build_group_mask(parse_layout("Ref,S0"))
    tok = expand_to_token_mask(mask, [2, 3])
    assert tok.shape == (5, 5)
    assert not tok[:2, 2:].any()
    assert tok.sum() == 25 - 6


def test_token_expansion_identity_and_single_group():
    mask = build_group_mask(parse_layout("Ref,LT0,ST,S0,S1"))
    assert np.array_equal(expand_to_token_mask(mask, [1] * 5), mask.allowed)
    single = build_group_mask(parse_layout("Ref"))
    assert expand_to_token_mask(single, {Group("Ref"): 4}).all()


@given(layouts, st.data())
def test_token_expansion_blockwise(layout, data):
    counts = data.draw(st.lists(st.integers(1, 4), min_size=len(layout), max_size=len(layout)))
    mask = build_group_mask(layout)
    tok = expand_to_token_mask(mask, counts)
    owner = [g for g, c in enumerate(counts) for _ in range(c)]
    for i, gi in enumerate(owner):
        for j, gj in enumerate(owner):
            assert tok[i, j] == mask.allowed[gi, gj]
    expected = sum(mask.allowed[q, k] * counts[q] * counts[k]
                   for q in range(len(layout)) for k in range(len(layout)))
    assert tok.sum() == expected


def test_token_expansion_missing_group():
    mask = build_group_mask(parse_layout("Ref,S0"))
    with pytest.raises(LayoutError):
        expand_to_token_mask(mask, {Group("Ref"): 2})


def test_render_golden():
    text = render_mask(build_group_mask(parse_layout("Ref,ST,S0")))
    assert text == (
        "    Ref  ST  S0\n"
        "Ref   1   1   0\n"
        " ST   1   1   0\n"
        " S0   1   1   1"
    )
