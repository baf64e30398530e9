import numpy as np
import pytest

from mandarin_e2e.formats import (
    FormatError,
    Manifest,
    ManifestRecord,
    format_hypothesis,
    read_hypotheses,
    read_posteriors,
    write_posteriors,
)
from mandarin_e2e.hypothesis import Hypothesis


def test_manifest_round_trip_and_resolution(tmp_path):
    (tmp_path / "f").mkdir()
    (tmp_path / "f" / "a.fbk").write_bytes(b"")
    m = Manifest([ManifestRecord("u1", "f/a.fbk", "你好"), ManifestRecord("u2", str(tmp_path / "f" / "a.fbk"), "好")])
    m.write(tmp_path / "m.tsv")
    assert (tmp_path / "m.tsv").read_text(encoding="utf-8") == f"u1\tf/a.fbk\t你好\nu2\t{tmp_path}/f/a.fbk\t好\n"
    back = Manifest.read(tmp_path / "m.tsv")
    assert list(back) == list(m)
    assert back.resolve(back[0]) == tmp_path / "f" / "a.fbk"
    assert back.resolve(back[1]) == tmp_path / "f" / "a.fbk"


@pytest.mark.parametrize(
    "text,match",
    [("u1\ta.fbk\n", "3 tab-separated"), ("u1\ta\tx\nu1\ta\ty\n", "duplicate"), ("u1\tmissing.fbk\tx\n", "missing")],
)
def test_manifest_errors(tmp_path, text, match):
    (tmp_path / "a").write_bytes(b"")
    (tmp_path / "m.tsv").write_text(text, encoding="utf-8")
    with pytest.raises(FormatError, match=match):
        Manifest.read(tmp_path / "m.tsv")


def test_manifest_skips_blank_lines_and_can_skip_file_checks(tmp_path):
    (tmp_path / "m.tsv").write_text("u1\tnope\tx\n\nu2\tnope2\ty\n", encoding="utf-8")
    assert [r.utt_id for r in Manifest.read(tmp_path / "m.tsv", check_files=False)] == ["u1", "u2"]


def test_hypothesis_lines(tmp_path):
    h = Hypothesis((0, 1), -1.25, -3.5, 2, -4.0, coverage=3, normalized=-0.625)
    ctc = format_hypothesis("u1", ["你", "好"], h)
    att = format_hypothesis("u2", ["你"], h, attention=True)
    assert ctc == "u1\t你 好\t-1.250000\t-3.500000\t2"
    assert att == "u2\t你\t-1.250000\t-3.500000\t2\t3\t-0.625000"
    empty = format_hypothesis("u3", [], h)
    (tmp_path / "h.tsv").write_text("\n".join([ctc, att, empty]) + "\n", encoding="utf-8")
    assert read_hypotheses(tmp_path / "h.tsv") == {"u1": ["你", "好"], "u2": ["你"], "u3": []}


def test_hypothesis_errors(tmp_path):
    (tmp_path / "dup.tsv").write_text("u\ta\nu\tb\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_hypotheses(tmp_path / "dup.tsv")
    (tmp_path / "bad.tsv").write_text("lonely\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_hypotheses(tmp_path / "bad.tsv")


def test_posteriors_round_trip(tmp_path):
    lp = np.log(np.random.default_rng(0).dirichlet(np.ones(5), size=7))
    write_posteriors(tmp_path / "p.post", lp)
    raw = (tmp_path / "p.post").read_bytes()
    assert raw[:4] == b"POST" and len(raw) == 12 + 4 * 35
    np.testing.assert_array_equal(read_posteriors(tmp_path / "p.post"), lp.astype(np.float32).astype(np.float64))
    (tmp_path / "bad.post").write_bytes(b"FBK1" + raw[4:])
    with pytest.raises(FormatError):
        read_posteriors(tmp_path / "bad.post")
    (tmp_path / "short.post").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_posteriors(tmp_path / "short.post")
