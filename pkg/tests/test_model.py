import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import apply_in_order, byte_spans
from txnfs.model import (
    AssertKind,
    BlockRef,
    LengthAssertion,
    WriteRecord,
    block_span,
    coalesce_writes,
    merge_read_view,
    norm_path,
    normalize_assertions,
    parent_and_name,
)

BS = 1024


class TestBlockSpan:
    def test_exact_single_block(self):
        assert block_span(0, 1024, BS) == [(0, 0, 1024)]

    def test_zero_length(self):
        assert block_span(0, 0, BS) == []

    def test_straddling_range_matches_byte_oracle(self):
        expected = byte_spans(1500, 1000, BS)
        assert expected == [(1, 476, 548), (2, 0, 452)]
        assert block_span(1500, 1000, BS) == expected

    def test_rejects_zero_block_size(self):
        with pytest.raises(ValueError):
            block_span(0, 1, 0)

    @given(st.integers(0, 5000), st.integers(0, 3000), st.integers(1, 700))
    def test_bijection_with_byte_indexing(self, offset, length, bs):
        spans = block_span(offset, length, bs)
        assert spans == byte_spans(offset, length, bs)
        covered = [b * bs + o + k for b, o, n in spans for k in range(n)]
        assert covered == list(range(offset, offset + length))


def W(block, off, data, fid=1):
    return WriteRecord(BlockRef(fid, block), off, data)


def apply_records(base_blocks, records, bs):
    out = {k: bytearray(v) for k, v in base_blocks.items()}
    for w in records:
        buf = out.setdefault(w.block.block_no, bytearray(bs))
        buf[w.offset:w.end] = w.data
    return {k: bytes(v) for k, v in out.items()}


class TestCoalesce:
    def test_overlap_later_wins(self):
        got = coalesce_writes([W(0, 0, b"AAAA"), W(0, 2, b"BB")])
        assert got == [W(0, 0, b"AABB")]
        assert apply_in_order(bytes(8), [(0, b"AAAA"), (2, b"BB")])[:4] == b"AABB"

    def test_singleton(self):
        assert coalesce_writes([W(3, 10, b"X")]) == [W(3, 10, b"X")]

    def test_disjoint_blocks_sorted(self):
        assert coalesce_writes([W(1, 0, b"B"), W(0, 0, b"A")]) == [W(0, 0, b"A"), W(1, 0, b"B")]

    def test_adjacent_ranges_merge(self):
        assert coalesce_writes([W(0, 0, b"ab"), W(0, 2, b"cd")]) == [W(0, 0, b"abcd")]

    def test_gap_keeps_two_records(self):
        assert coalesce_writes([W(0, 5, b"y"), W(0, 0, b"x")]) == [W(0, 0, b"x"), W(0, 5, b"y")]

    def test_empty_write_rejected(self):
        with pytest.raises(ValueError):
            W(0, 0, b"")

    writes = st.lists(
        st.tuples(st.integers(0, 3), st.integers(0, 15), st.binary(min_size=1, max_size=8)).map(
            lambda t: W(t[0], t[1], t[2][: 16 - t[1]] or b"z") if t[1] < 16 else W(t[0], 15, b"q")
        ),
        max_size=20,
    )

    @given(writes)
    def test_idempotent(self, ws):
        once = coalesce_writes(ws)
        assert coalesce_writes(once) == once

    @given(writes, st.binary(min_size=16, max_size=16))
    def test_same_bytes_as_apply_in_order(self, ws, seed):
        base = {b: seed for b in range(4)}
        assert apply_records(base, ws, 16) == apply_records(base, coalesce_writes(ws), 16)

    @given(writes)
    def test_output_sorted_and_disjoint(self, ws):
        out = coalesce_writes(ws)
        keys = [(w.block.block_no, w.offset) for w in out]
        assert keys == sorted(keys)
        for a, b in zip(out, out[1:]):
            if a.block == b.block:
                assert a.end < b.offset


class TestMergeReadView:
    def test_read_your_writes(self):
        got = merge_read_view(bytes(1024), [W(0, 10, b"hi")])
        assert got[10:12] == b"hi"
        assert got[:10] == bytes(10) and got[12:] == bytes(1012)

    def test_identity(self):
        base = bytes(range(256)) * 4
        assert merge_read_view(base, []) == base

    def test_in_order_overlay(self):
        got = merge_read_view(bytes(1024), [W(0, 0, b"AA"), W(0, 1, b"B")])
        assert got == b"AB" + bytes(1022)
        assert got == apply_in_order(bytes(1024), [(0, b"AA"), (1, b"B")])

    def test_input_not_modified(self):
        base = bytearray(16)
        merge_read_view(base, [W(0, 0, b"x")])
        assert base == bytearray(16)


class TestAssertions:
    def A(self, kind, n, fid=7):
        return LengthAssertion(fid, kind, n)

    def test_exactly_subsumes(self):
        out = normalize_assertions([
            self.A(AssertKind.AT_LEAST, 40), self.A(AssertKind.EXACTLY, 100), self.A(AssertKind.AT_MOST, 200),
        ])
        assert out == [self.A(AssertKind.EXACTLY, 100)]

    def test_bounds_meeting_become_exact(self):
        out = normalize_assertions([self.A(AssertKind.AT_LEAST, 9), self.A(AssertKind.AT_MOST, 9)])
        assert out == [self.A(AssertKind.EXACTLY, 9)]

    def test_tightest_bounds_kept(self):
        out = normalize_assertions([
            self.A(AssertKind.AT_LEAST, 3), self.A(AssertKind.AT_LEAST, 8),
            self.A(AssertKind.AT_MOST, 50), self.A(AssertKind.AT_MOST, 20),
        ])
        assert out == [self.A(AssertKind.AT_LEAST, 8), self.A(AssertKind.AT_MOST, 20)]

    def test_negative_length_rejected(self):
        with pytest.raises(ValueError):
            self.A(AssertKind.AT_LEAST, -1)

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.sampled_from(list(AssertKind)), st.integers(0, 30)), max_size=8),
           st.integers(0, 40))
    def test_normalized_set_is_equivalent(self, items, actual):
        raw = [self.A(k, n) for k, n in items]
        norm = normalize_assertions(raw)
        assert all(a.holds(actual) for a in raw) == all(a.holds(actual) for a in norm)
        assert sum(a.kind is AssertKind.EXACTLY for a in norm) <= 1


class TestPaths:
    def test_normalization(self):
        assert norm_path("//a///b/") == "/a/b"
        assert norm_path("/") == "/"

    def test_relative_rejected(self):
        with pytest.raises(ValueError):
            norm_path("a/b")
        with pytest.raises(ValueError):
            norm_path("/a/../b")

    def test_parent_and_name(self):
        assert parent_and_name("/a/b") == ("/a", "b")
        assert parent_and_name("/a") == ("/", "a")
