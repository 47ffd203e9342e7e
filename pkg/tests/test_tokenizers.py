import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trimodal.tokencore import UNK, Modality, TokenSequence, build_vocabulary
from trimodal.tokenizers import (BpeModel, Codebook, InsufficientDataError, PatchGrid,
                                 SequenceTooLongError, decode_text, dequantize, detokenize_image,
                                 encode_text, image_patches, quantize, tokenize_image,
                                 tokenize_speech, train_bpe, train_codebook)


def best_two_partition(points):
    """Exhaustive k=2 oracle: minimum within-cluster sum of squares over all splits."""
    best = None
    pts = list(points)
    for mask in itertools.product([0, 1], repeat=len(pts)):
        groups = [[p for p, g in zip(pts, mask) if g == j] for j in (0, 1)]
        if not all(groups):
            continue
        cost = sum(sum((p - np.mean(g)) ** 2 for p in g) for g in groups)
        centers = sorted(float(np.mean(g)) for g in groups)
        if best is None or cost < best[0]:
            best = (cost, centers)
    return best


def test_kmeans_exact_two_points():
    cb = train_codebook([[0.0], [10.0]], 2, seed=3)
    assert sorted(cb.centers[:, 0]) == [0.0, 10.0]


def test_kmeans_matches_exhaustive_oracle():
    pts = [0.0, 1.0, 9.0, 10.0]
    cost, centers = best_two_partition(pts)
    assert (cost, centers) == (1.0, [0.5, 9.5])
    for seed in range(10):
        hist = []
        cb = train_codebook(np.array(pts)[:, None], 2, seed=seed, history=hist)
        assert sorted(cb.centers[:, 0]) == centers
        assert hist[-1] == pytest.approx(cost)


def test_kmeans_insufficient_data():
    with pytest.raises(InsufficientDataError):
        train_codebook(np.zeros((3, 2)), 5)


def test_kmeans_objective_non_increasing():
    rng = np.random.default_rng(0)
    for trial in range(20):
        x = rng.normal(size=(int(rng.integers(10, 60)), 3)) * rng.uniform(0.5, 4)
        hist = []
        train_codebook(x, int(rng.integers(1, 8)), iters=30, seed=trial, history=hist)
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_more_centers_than_distinct_points():
    x = np.repeat(np.eye(3), 10, axis=0)
    cb = train_codebook(x, 8, seed=1)
    assert cb.k == 8
    assert len(set(quantize(cb, np.eye(3)))) == 3


def test_quantize_examples():
    cb = Codebook(np.array([[0.0], [10.0]]))
    assert quantize(cb, [[4.9], [5.1], [5.0]]) == [0, 1, 0]
    cb4 = Codebook(np.arange(12.0).reshape(4, 3))
    assert quantize(cb4, [cb4.centers[3]]) == [3]
    with pytest.raises(ValueError):
        quantize(cb4, np.zeros((2, 2)))


def test_dequantize_examples():
    cb = Codebook(np.array([[0.0], [10.0]]))
    assert dequantize(cb, []).shape == (0, 1)
    assert dequantize(cb, [0, 0, 1])[:, 0].tolist() == [0.0, 0.0, 10.0]
    with pytest.raises(IndexError):
        dequantize(cb, [2])


def test_quantize_dequantize_round_trip():
    rng = np.random.default_rng(1)
    cb = Codebook(rng.normal(size=(16, 5)))
    for _ in range(100):
        ids = rng.integers(0, 16, size=int(rng.integers(0, 20))).tolist()
        assert quantize(cb, dequantize(cb, ids)) == ids
    x = rng.normal(size=(30, 5))
    once = dequantize(cb, quantize(cb, x))
    np.testing.assert_array_equal(dequantize(cb, quantize(cb, once)), once)


def test_codebook_file_round_trip(tmp_path):
    cb = Codebook(np.random.default_rng(2).normal(size=(3, 4)))
    cb.save(tmp_path / "c.cb")
    assert (tmp_path / "c.cb").read_text().splitlines()[0] == "TMTCB 4 3"
    np.testing.assert_array_equal(Codebook.load(tmp_path / "c.cb").centers, cb.centers)


@pytest.fixture
def speech_setup():
    protos = np.eye(8) * 5
    return Codebook(protos), build_vocabulary(4, 8, 4)


def test_tokenize_speech_collapses_runs(speech_setup):
    cb, v = speech_setup
    seq = tokenize_speech(cb, np.repeat(cb.centers[[7]], 4, axis=0), v)
    assert seq.tokens == (v.local_to_global(Modality.SPEECH, 7),)
    alt = tokenize_speech(cb, cb.centers[[1, 2, 1, 2]], v)
    assert len(alt) == 4
    assert alt.modality == Modality.SPEECH


def test_tokenize_speech_cap():
    cb = Codebook(np.array([[0.0], [1.0]]))
    v = build_vocabulary(1, 2, 1)
    frames = np.array([[i % 2] for i in range(385)], dtype=float)
    with pytest.raises(SequenceTooLongError, match="384"):
        tokenize_speech(cb, frames, v, cap=384)
    assert len(tokenize_speech(cb, frames[:384], v)) == 384


@given(st.lists(st.integers(0, 3), min_size=1, max_size=50))
def test_tokenize_speech_no_adjacent_repeats(ids):
    cb = Codebook(np.eye(4))
    seq = tokenize_speech(cb, cb.centers[ids], build_vocabulary(1, 4, 1))
    assert all(a != b for a, b in zip(seq.tokens, seq.tokens[1:]))


def test_image_tokenize_and_detokenize():
    grid = PatchGrid.for_image(32, 32)
    assert (grid.rows, grid.cols, grid.patch_h, grid.patch_w) == (4, 8, 8, 4)
    rng = np.random.default_rng(3)
    centers = rng.integers(0, 256, size=(5, grid.patch_dim)).astype(float)
    cb = Codebook(centers)
    v = build_vocabulary(5, 1, 1)
    ids = rng.integers(0, 5, size=32)
    from trimodal.tokenizers import patches_to_image
    img = patches_to_image(centers[ids], grid)
    seq = tokenize_image(cb, img, grid, v)
    assert len(seq) == 32
    assert [t - 4 for t in seq.tokens] == ids.tolist()
    np.testing.assert_array_equal(detokenize_image(cb, seq, grid, v), img)
    uniform = np.full((32, 32, 3), 17, dtype=np.uint8)
    assert len(set(tokenize_image(cb, uniform, grid, v).tokens)) == 1
    with pytest.raises(ValueError):
        tokenize_image(cb, np.zeros((30, 30, 3)), grid, v)
    with pytest.raises(ValueError):
        detokenize_image(cb, TokenSequence(Modality.IMAGE, seq.tokens[:31]), grid, v)


def test_patch_flatten_order():
    grid = PatchGrid(1, 2, 1, 2)
    img = np.arange(12).reshape(1, 4, 3)
    patches = image_patches(img, grid)
    assert patches[0].tolist() == [0, 1, 2, 3, 4, 5]
    assert patches[1].tolist() == [6, 7, 8, 9, 10, 11]


def test_single_patch_detokenize_clamps():
    grid = PatchGrid(1, 1, 1, 1)
    cb = Codebook(np.array([[-5.0, 300.0, 12.4]]))
    v = build_vocabulary(1, 1, 1)
    out = detokenize_image(cb, TokenSequence(Modality.IMAGE, (4,)), grid, v)
    assert out.reshape(-1).tolist() == [0, 255, 12]


def test_bpe_first_merge():
    m = train_bpe(["aaab"], 3)
    assert m.merges == [("a", "a")]
    assert m.segment("aaab") == ["aa", "a", "b"]
    assert m.size == 3


def test_bpe_no_merges_at_base_size():
    assert train_bpe(["ab"], 2).merges == []


def test_bpe_errors():
    with pytest.raises(ValueError):
        train_bpe([], 10)
    with pytest.raises(ValueError):
        train_bpe(["abc"], 2)


def test_bpe_tie_break_lexicographic():
    # "ab" and "cd" both occur twice
    m = train_bpe(["cdab", "abcd"], 5)
    assert m.merges[0] == ("a", "b")


def test_text_round_trip_and_unk():
    m = train_bpe(["a red circle", "a blue square", "a green triangle and a red square"], 60)
    v = build_vocabulary(1, 1, m.size)
    seq = encode_text(m, "a red circle", v)
    assert decode_text(m, seq, v) == "a red circle"
    odd = encode_text(m, "a red Zircle", v)
    assert UNK in odd.tokens
    assert "�" in decode_text(m, odd, v)


@settings(max_examples=60)
@given(st.text(alphabet="ab c", max_size=30))
def test_bpe_round_trip_property(text):
    m = train_bpe(["abab cab", "aab bc ", "cc ab"], 20)
    v = build_vocabulary(1, 1, m.size)
    assert decode_text(m, encode_text(m, text, v), v) == text


def test_bpe_file_round_trip(tmp_path):
    m = train_bpe(["a red circle and a red square"], 40)
    m.save(tmp_path / "t.bpe")
    head = (tmp_path / "t.bpe").read_text().splitlines()[0]
    assert head == f"TMTBPE {len(m.base_symbols)} {len(m.merges)}"
    m2 = BpeModel.load(tmp_path / "t.bpe")
    assert m2.merges == m.merges and m2.base_symbols == m.base_symbols
