
import pytest
from hypothesis import given, strategies as st

from trimodal.tokencore import (BOS, EOS, PAD, UNK, Modality, TokenSequence, bits_report,
                                build_vocabulary, dedup_runs, read_token_corpus,
                                token_bit_width, write_token_corpus)


def test_paper_sized_vocabulary():
    v = build_vocabulary(8192, 200, 30522)
    assert v.total == 38918
    assert sum(v.sizes) == 38914
    assert v.offsets == (4, 8196, 8396)


def test_minimal_vocabulary():
    v = build_vocabulary(1, 1, 1)
    assert v.total == 7
    assert v.offsets == (4, 5, 6)


def test_desk_vocabulary_offsets():
    v = build_vocabulary(256, 50, 200)
    assert v.offsets == (4, 260, 310)
    assert v.total == 510


def test_zero_size_rejected():
    with pytest.raises(ValueError):
        build_vocabulary(0, 5, 5)


def test_local_to_global_examples():
    v = build_vocabulary(256, 50, 200)
    assert v.local_to_global(Modality.IMAGE, 0) == 4
    assert v.local_to_global(Modality.SPEECH, 0) == 260
    assert v.local_to_global(Modality.TEXT, 10) == 320
    with pytest.raises(IndexError):
        v.local_to_global(Modality.SPEECH, 50)


def test_global_to_local_examples():
    v = build_vocabulary(256, 50, 200)
    assert v.global_to_local(4) == (Modality.IMAGE, 0)
    assert v.global_to_local(320) == (Modality.TEXT, 10)
    for special in (PAD, BOS, EOS, UNK):
        with pytest.raises(ValueError):
            v.global_to_local(special)
    with pytest.raises(ValueError):
        v.global_to_local(v.total)


sizes = st.tuples(*(st.integers(1, 300),) * 3)


@given(sizes, st.data())
def test_round_trip(sz, data):
    v = build_vocabulary(*sz)
    m = data.draw(st.sampled_from(list(Modality)))
    x = data.draw(st.integers(0, sz[m] - 1))
    assert v.global_to_local(v.local_to_global(m, x)) == (m, x)


@given(sizes)
def test_ranges_disjoint(sz):
    v = build_vocabulary(*sz)
    ranges = [set(range(v.special_count))] + [set(v.range(m)) for m in Modality]
    assert sum(len(r) for r in ranges) == v.total
    assert len(set().union(*ranges)) == v.total


@pytest.mark.parametrize("inp,out", [
    ([5, 5, 5, 2, 2, 7], [5, 2, 7]),
    ([1, 2, 3], [1, 2, 3]),
    ([9, 9, 3, 9, 9], [9, 3, 9]),
    ([], []),
])
def test_dedup_examples(inp, out):
    assert list(dedup_runs(TokenSequence(Modality.SPEECH, tuple(inp))).tokens) == out


@given(st.lists(st.integers(0, 4), max_size=40))
def test_dedup_properties(toks):
    s = TokenSequence(Modality.SPEECH, tuple(toks))
    d = dedup_runs(s)
    assert dedup_runs(d) == d
    assert all(a != b for a, b in zip(d.tokens, d.tokens[1:]))
    has_dups = any(a == b for a, b in zip(toks, toks[1:]))
    assert (len(d) < len(s)) == has_dups


def test_bits_report_paper_constants():
    r = bits_report(1.0, 50, 200, (224, 224), 32, 8192)
    assert (r.speech_bits_per_token, r.image_bits_per_token) == (8, 13)
    assert r.audio_raw_bits == 256000
    assert r.speech_token_bits == 400
    assert r.speech_ratio_pct == pytest.approx(0.15625, abs=1e-12)
    assert r.image_raw_bits == 1204224
    assert r.image_token_bits == 416
    assert round(r.image_ratio_pct, 3) == 0.035


def test_bits_report_zero_duration():
    r = bits_report(0.0, 50, 200, (224, 224), 32, 8192)
    assert r.audio_raw_bits == 0
    assert r.speech_ratio_pct is None
    assert "undefined" in r.lines()[0]


def test_bit_width():
    assert [token_bit_width(v) for v in (2, 200, 256, 257, 8192)] == [1, 8, 8, 9, 13]


def test_token_corpus_round_trip(tmp_path):
    recs = [("a", TokenSequence(Modality.IMAGE, (4, 5))),
            ("a", TokenSequence(Modality.SPEECH, (9,))),
            ("a", TokenSequence(Modality.TEXT, (12, 13, 14)))]
    path = tmp_path / "c.tok"
    write_token_corpus(path, recs)
    assert path.read_bytes() == b"a\ti\t4 5\na\ts\t9\na\tt\t12 13 14\n"
    assert read_token_corpus(path) == recs


def test_validate_rejects_foreign_tokens():
    v = build_vocabulary(2, 2, 2)
    TokenSequence(Modality.SPEECH, (6, 7)).validate(v)
    with pytest.raises(ValueError):
        TokenSequence(Modality.SPEECH, (4,)).validate(v)
