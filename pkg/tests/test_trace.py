import pytest
from hypothesis import given, strategies as st

from heapseal.trace import (
    ALIGNED_FUNS,
    ALLOC_FUNS,
    Alloc,
    Call,
    Copy,
    Free,
    Read,
    Realloc,
    Ret,
    Sink,
    TraceFormatError,
    Write,
    format_trace,
    parse_trace,
)

from conftest import ALL_TRACES, load_trace


def test_three_events():
    ev = parse_trace("alloc malloc b1 64\nwrite b1 0 64\nfree b1\n")
    assert ev == (Alloc("malloc", "b1", 64), Write("b1", 0, 64), Free("b1"))


def test_copy_sink_is_unchecked():
    (ev,) = parse_trace("read b1 60 8 copy")
    assert ev == Read("b1", 60, 8, Sink.COPY)
    assert not ev.sink.checked
    assert all(s.checked for s in Sink if s is not Sink.COPY)


def test_every_record_kind():
    text = """
    call A B 3
    ret
    alloc memalign m 100 64
    realloc m n 200
    copy n -4 m 120 16   # comment
    """
    assert parse_trace(text) == (
        Call("A", "B", 3), Ret(), Alloc("memalign", "m", 100, 64),
        Realloc("m", "n", 200), Copy("n", -4, "m", 120, 16),
    )


def test_negative_offsets_allowed():
    assert parse_trace("write b -16 4\n")[0].offset == -16


@pytest.mark.parametrize("text,msg", [
    ("alloc memalign b2 100\n", "requires an alignment"),
    ("alloc malloc b 10 16\n", "takes no alignment"),
    ("alloc valloc b 10\n", "unknown allocation function"),
    ("jump A\n", "unknown event"),
    ("write b x 4\n", "malformed offset"),
    ("write b 0 0\n", "length must be >= 1"),
    ("alloc malloc b 0\n", "size must be >= 1"),
    ("read b 0 4 stdout\n", "unknown sink"),
    ("call A B -1\n", "site id"),
    ("free\n", "wrong number"),
    ("free b$\n", "invalid name"),
])
def test_errors(text, msg):
    with pytest.raises(TraceFormatError, match=msg):
        parse_trace(text)


def test_error_line_number():
    with pytest.raises(TraceFormatError, match="line 3") as exc:
        parse_trace("ret\n# note\nbogus\n")
    assert exc.value.lineno == 3


def test_semantic_nonsense_is_syntactically_fine():
    # Double free and use of unknown buffers are for the analyzers to notice.
    assert len(parse_trace("free a\nfree a\nread zz 0 1 branch\n")) == 3


@pytest.mark.parametrize("name", ALL_TRACES)
def test_fixtures_round_trip(name):
    ev = load_trace(name)
    assert parse_trace(format_trace(ev)) == ev


names = st.from_regex(r"[A-Za-z0-9_.]{1,6}", fullmatch=True)
offs = st.integers(-10_000, 10_000)
lens = st.integers(1, 10_000)


@st.composite
def allocs(draw):
    fun = draw(st.sampled_from(ALLOC_FUNS))
    align = draw(st.integers(1, 4096)) if fun in ALIGNED_FUNS else None
    return Alloc(fun, draw(names), draw(lens), align)


events = st.one_of(
    st.builds(Call, names, names, st.integers(0, 99)),
    st.just(Ret()),
    allocs(),
    st.builds(Realloc, names, names, lens),
    st.builds(Free, names),
    st.builds(Write, names, offs, lens),
    st.builds(Read, names, offs, lens, st.sampled_from(Sink)),
    st.builds(Copy, names, offs, names, offs, lens),
)


@given(st.lists(events, max_size=40))
def test_round_trip(evs):
    assert parse_trace(format_trace(evs)) == tuple(evs)
