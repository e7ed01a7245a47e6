import io
import subprocess
import sys

import pytest

from heapseal.cli import main

from conftest import ATTACK_FIXTURES, fixture_path

GRAPH = str(fixture_path("sample.graph"))


def trace(name):
    return str(fixture_path(f"{name}.trace"))


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


class TestEncode:
    def test_incremental_lists_four_sites(self):
        code, text = run("encode", GRAPH, "--strategy", "incremental")
        assert code == 0
        assert [l for l in text.splitlines() if l.startswith("site ")] == [
            "site A B 0", "site A C 0", "site C E 0", "site C F 0"]

    def test_all_counts(self):
        code, text = run("encode", GRAPH, "--all")
        assert code == 0
        counts = dict(l.split()[1:] for l in text.splitlines() if l.startswith("count"))
        assert counts == {"fcs": "10", "tcs": "8", "slim": "6", "incremental": "4"}
        assert "site D H 0 x . . ." in text

    def test_no_targets(self, tmp_path):
        g = tmp_path / "g.graph"
        g.write_text("node A\nnode B\nedge A B 0\nroot A\n")
        assert run("encode", str(g), "--strategy", "tcs")[0] == 1
        assert run("encode", str(g), "--strategy", "fcs")[0] == 0

    def test_missing_file(self, tmp_path):
        assert run("encode", str(tmp_path / "nope"))[0] == 1


class TestAnalyze:
    def test_overflow(self, tmp_path):
        out = tmp_path / "p.txt"
        code, text = run("analyze", GRAPH, trace("overflow"), "-o", str(out))
        assert code == 0
        (line,) = out.read_text().splitlines()
        assert line.endswith(" 1") and line.startswith("malloc ")
        assert "warning kind=OVERFLOW" in text

    def test_heartbleed(self, tmp_path):
        out = tmp_path / "p.txt"
        run("analyze", GRAPH, trace("heartbleed"), "-o", str(out))
        (line,) = out.read_text().splitlines()
        assert line.split()[2] == "5"

    def test_benign(self, tmp_path):
        out = tmp_path / "p.txt"
        code, text = run("analyze", GRAPH, trace("benign"), "-o", str(out))
        assert (code, out.read_text()) == (0, "")
        assert text == "patches=0 warnings=0\n"

    def test_malformed_trace(self, tmp_path):
        bad = tmp_path / "t.trace"
        bad.write_text("alloc malloc a 8\nbogus\n")
        code, _ = run("analyze", GRAPH, str(bad), "-o", str(tmp_path / "p"))
        assert code == 1

    def test_seed_from_env(self, tmp_path, monkeypatch):
        a, b = tmp_path / "a", tmp_path / "b"
        run("analyze", GRAPH, trace("overflow"), "-o", str(a), "--seed", "7")
        monkeypatch.setenv("HEAPSEAL_SEED", "7")
        run("analyze", GRAPH, trace("overflow"), "-o", str(b))
        assert a.read_text() == b.read_text()
        monkeypatch.delenv("HEAPSEAL_SEED")
        run("analyze", GRAPH, trace("overflow"), "-o", str(b))
        assert a.read_text() != b.read_text()


class TestDefend:
    @pytest.mark.parametrize("name", ATTACK_FIXTURES)
    def test_attack_with_patch(self, tmp_path, name):
        p = tmp_path / "p.txt"
        run("analyze", GRAPH, trace(name), "-o", str(p))
        code, text = run("defend", GRAPH, trace(name), str(p))
        blocked = [l for l in text.splitlines() if l.startswith("blocked")]
        if name == "uninit":
            # Zero-fill defends without blocking anything.
            assert (code, blocked) == (0, [])
        else:
            assert code == 2 and len(blocked) == 1

    @pytest.mark.parametrize("name", ATTACK_FIXTURES)
    def test_attack_without_patch(self, tmp_path, name):
        p = tmp_path / "empty.txt"
        p.write_text("")
        code, text = run("defend", GRAPH, trace(name), str(p))
        assert code == 0 and "blocked=0" in text

    def test_benign_with_patches(self, tmp_path):
        p = tmp_path / "p.txt"
        run("analyze", GRAPH, trace("uaf"), "-o", str(p))
        code, text = run("defend", GRAPH, trace("benign"), str(p))
        assert code == 0 and "blocked=0" in text

    def test_bad_patch_file(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("malloc 00 8\n")
        assert run("defend", GRAPH, trace("benign"), str(p))[0] == 1


class TestE2E:
    @pytest.mark.parametrize("name", ATTACK_FIXTURES + ("benign", "padding", "chained"))
    def test_passes(self, name):
        code, text = run("e2e", GRAPH, trace(name))
        assert code == 0
        assert text.splitlines()[-1].startswith("result pass")

    def test_compat_mode_uaf(self):
        code, text = run("e2e", GRAPH, trace("uaf"), "--no-strict-uaf")
        assert code == 0
        assert "via=non-reuse" in text and "blocked=0" in text

    def test_failed_check_exits_2(self):
        # With a zero quota nothing is ever quarantined, offline or online.
        code, text = run("e2e", GRAPH, trace("uaf"), "--quota-bytes", "0")
        assert code == 0 and "checks=0" in text
        # 64 bytes hold the 64-byte buffer offline, but not its 72-byte block online.
        code, text = run("e2e", GRAPH, trace("uaf"), "--strategy", "fcs", "--quota-bytes", "64")
        assert code == 2 and "result fail" in text

    def test_writes_patch_file(self, tmp_path):
        p = tmp_path / "p.txt"
        run("e2e", GRAPH, trace("heartbleed"), "-o", str(p))
        assert p.read_text().split()[2] == "5"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "heapseal", "encode", GRAPH],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "strategy=incremental sites=4" in res.stdout
