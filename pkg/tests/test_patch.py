import pytest
from hypothesis import given, strategies as st

from heapseal.patch import (
    PATCH_FUNS,
    FrozenTableError,
    Patch,
    PatchFormatError,
    PatchTable,
    Vuln,
    build_table,
    lookup,
    parse_patches,
    serialize_patches,
)


def test_line_format():
    assert serialize_patches([Patch("malloc", 7, 1)]) == "malloc 0000000000000007 1\n"


def test_combined_mask():
    p = Patch("malloc", 0xDEAD, Vuln.UNINIT | Vuln.OVERFLOW)
    assert p.to_line() == "malloc 000000000000dead 5"


def test_bit_values():
    assert (Vuln.OVERFLOW, Vuln.UAF, Vuln.UNINIT) == (1, 2, 4)


def test_sorted_by_fun_then_ccid():
    ps = [Patch("malloc", 2, 1), Patch("calloc", 9, 2), Patch("malloc", 1, 4)]
    assert [line.split()[0:2] for line in serialize_patches(ps).splitlines()] == [
        ["calloc", "0000000000000009"],
        ["malloc", "0000000000000001"],
        ["malloc", "0000000000000002"],
    ]


def test_params_kept():
    (p,) = parse_patches("realloc ff 3 x=1 y=abc\n")
    assert p.params == (("x", "1"), ("y", "abc"))
    assert p.to_line() == "realloc 00000000000000ff 3 x=1 y=abc"


@pytest.mark.parametrize("text,msg", [
    ("malloc 00 8\n", "outside"),
    ("malloc 00 0\n", "outside"),
    ("malloc zz 1\n", "bad ccid"),
    ("malloc 12345678901234567 1\n", "bad ccid"),
    ("malloc 1\n", "expected"),
    ("free 1 1\n", "unknown allocation function"),
    ("malloc 1 -1\n", "bad mask"),
    ("malloc 1 1 =x\n", "bad parameter"),
    ("malloc 1 1\nmalloc 0001 2\n", "line 2: duplicate"),
])
def test_parse_errors(text, msg):
    with pytest.raises(PatchFormatError, match=msg):
        parse_patches(text)


def test_comments_and_blank_lines():
    assert parse_patches("# none\n\nmalloc 1 1  # one\n") == [Patch("malloc", 1, 1)]


class TestTable:
    def test_empty(self):
        t = build_table([])
        assert t.frozen and len(t) == 0
        assert lookup(t, "malloc", 0) is None

    def test_five_entries(self):
        ps = [Patch("malloc", i, 1 + i % 7) for i in range(5)]
        t = build_table(ps)
        assert len(t) == 5
        for p in ps:
            assert lookup(t, p.fun, p.ccid) == (p.t_bits, ())

    def test_insert_after_freeze(self):
        t = build_table([Patch("malloc", 1, 1)])
        with pytest.raises(FrozenTableError):
            t.insert(Patch("malloc", 2, 1))
        assert len(t) == 1

    def test_entries_view_is_read_only(self):
        t = build_table([Patch("malloc", 1, 1)])
        with pytest.raises(TypeError):
            t.entries[("malloc", 2)] = (1, ())

    def test_duplicate_key(self):
        with pytest.raises(PatchFormatError):
            build_table([Patch("malloc", 1, 1), Patch("malloc", 1, 2)])

    def test_lookup_needs_frozen(self):
        with pytest.raises(FrozenTableError):
            lookup(PatchTable(), "malloc", 1)

    def test_fun_is_part_of_key(self):
        t = build_table([Patch("malloc", 0x42, 1)])
        assert lookup(t, "calloc", 0x42) is None

    def test_one_bit_off_misses(self):
        t = build_table([Patch("malloc", 0x42, 1)])
        for b in range(64):
            assert lookup(t, "malloc", 0x42 ^ (1 << b)) is None


patches = st.builds(
    Patch,
    st.sampled_from(sorted(PATCH_FUNS)),
    st.integers(0, 2**64 - 1),
    st.integers(1, 7),
)
patch_sets = st.lists(patches, max_size=30, unique_by=lambda p: p.key)


@given(patch_sets)
def test_round_trip(ps):
    text = serialize_patches(ps)
    back = parse_patches(text)
    assert sorted(back) == sorted(ps)
    assert serialize_patches(back) == text


@given(patch_sets, patches)
def test_lookup_survives_round_trip(ps, probe):
    a = build_table(ps)
    b = build_table(parse_patches(serialize_patches(ps)))
    for p in ps + [probe]:
        assert lookup(a, p.fun, p.ccid) == lookup(b, p.fun, p.ccid)
    if probe.key not in {p.key for p in ps}:
        assert lookup(a, probe.fun, probe.ccid) is None
