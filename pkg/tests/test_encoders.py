import numpy as np
import pytest
import torch

from fdcheck import analytic, central_difference, rel_error
from incant.core import EmbeddingMatrix, LatentImage, PromptState
from incant.encoders import (MASK_WORD, ToyImageEncoder, ToyTextEncoder, UnknownWordsError,
                             Vocabulary, encode_image, encode_text, word_image_similarity)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.toy()


@pytest.fixture(scope="module")
def text_enc(vocab):
    return ToyTextEncoder(len(vocab), d=32, max_length=24, seed=3)


def test_vocab_file_roundtrip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines[vocab.mask_id] == MASK_WORD
    assert Vocabulary.load(path).words == vocab.words
    path.write_text("a\ncat\n")
    with pytest.raises(ValueError, match="mask word"):
        Vocabulary.load(path)


def test_tokenize_reports_unknown_words(vocab):
    with pytest.raises(UnknownWordsError) as exc:
        vocab.tokenize("a zebra and a unicorn")
    assert exc.value.words == ["zebra", "unicorn"]
    with pytest.raises(ValueError):
        vocab.tokenize("a " * 17, n_max=16)


def test_shapes_without_and_with_prompt(vocab, text_enc):
    tok = vocab.tokenize("a cat")
    m, g = encode_text(text_enc, tok)
    assert m.values.shape == (2, 32) and g.values.shape == (32,)
    prompt = PromptState(torch.zeros(4, 32, dtype=torch.float64))
    m, g = encode_text(text_enc, tok, prompt)
    assert m.values.shape == (6, 32)
    assert m.row_roles == ("word", "word", "prompt", "prompt", "prompt", "prompt")


def test_masking_replaces_input_embedding(vocab, text_enc):
    tok = vocab.tokenize("an elephant and a bag")
    plain, _ = encode_text(text_enc, tok)
    masked, _ = encode_text(text_enc, tok, mask_positions=[4], mask_id=vocab.mask_id)
    assert masked.row_roles[4] == "mask"
    ref = vocab.tokenize("an elephant and a -")
    direct, _ = encode_text(text_enc, ref)
    assert torch.equal(masked.values, direct.values)
    assert not torch.equal(masked.values, plain.values)
    with pytest.raises(IndexError):
        encode_text(text_enc, tok, mask_positions=[5], mask_id=vocab.mask_id)


def test_empty_mask_matches_no_mask_bitwise(vocab, text_enc):
    tok = vocab.tokenize("a red ball")
    p = PromptState(torch.randn(4, 32, dtype=torch.float64) * 0.02)
    a = encode_text(text_enc, tok, p)
    b = encode_text(text_enc, tok, p, mask_positions=[], mask_id=vocab.mask_id)
    assert torch.equal(a[0].values, b[0].values) and torch.equal(a[1].values, b[1].values)


def test_context_mixing_is_order_sensitive(vocab, text_enc):
    ab, _ = encode_text(text_enc, vocab.tokenize("a b"))
    ba, _ = encode_text(text_enc, vocab.tokenize("b a"))
    assert not torch.allclose(ab.values, ba.values.flip(0))


def test_rows_depend_on_other_positions(vocab, text_enc):
    # changing word 1 must change row 0 through attention
    a, _ = encode_text(text_enc, vocab.tokenize("a cat"))
    b, _ = encode_text(text_enc, vocab.tokenize("a dog"))
    assert not torch.equal(a.values[0], b.values[0])


def test_too_long_sequence_rejected(vocab, text_enc):
    tok = vocab.tokenize(" ".join(["a"] * 16))
    with pytest.raises(ValueError, match="max length"):
        encode_text(text_enc, tok, torch.zeros(9, 32, dtype=torch.float64))


@pytest.mark.parametrize("seed", range(3))
def test_global_embedding_gradient_matches_finite_differences(vocab, seed):
    enc = ToyTextEncoder(len(vocab), seed=seed)
    ids = torch.tensor(vocab.tokenize("a cat next to a bag").ids)
    w = torch.randn(32, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    x = torch.randn(4, 32, generator=torch.Generator().manual_seed(100 + seed), dtype=torch.float64) * 0.02

    def f(p):
        return enc(ids, p)[1] @ w

    g = analytic(f, x)
    assert float(g.norm()) > 0
    assert rel_error(g, central_difference(f, x)) < 1e-4


def test_image_encoder_contract():
    enc = ToyImageEncoder((3, 8, 8), d=32, seed=0)
    zero = LatentImage(torch.zeros(3, 8, 8, dtype=torch.float64))
    e1, e2 = encode_image(enc, zero).values, encode_image(enc, zero).values
    assert torch.equal(e1, e2) and float(e1.norm()) > 0
    x = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    ex, e2x = enc(x), enc(2 * x)
    assert not torch.allclose(ex, e2x) and not torch.allclose(2 * (ex - e1), e2x - e1)
    assert ex.shape == (32,) and bool(torch.isfinite(ex).all())
    with pytest.raises(ValueError):
        enc(torch.zeros(3, 4, 4, dtype=torch.float64))
    with pytest.raises(ValueError, match="clean"):
        encode_image(enc, LatentImage(x, t=10))


def test_similarity_extremes():
    img = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    rows = torch.stack([img, -img, 2.5 * img])
    s = word_image_similarity(EmbeddingMatrix(rows, ("word",) * 3), img)
    assert s.scores[:2] == (1.0, -1.0)
    assert s.scores[2] == pytest.approx(1.0, abs=1e-15)


def test_similarity_matches_brute_force_oracle(vocab, text_enc, gen):
    tok = vocab.tokenize("an elephant and a bag")
    m, _ = encode_text(text_enc, tok, torch.randn(4, 32, generator=gen, dtype=torch.float64) * 0.02)
    img = torch.randn(32, generator=gen, dtype=torch.float64)
    s = word_image_similarity(m, img, project=text_enc.project)
    assert s.n == tok.n_o
    proj = m.values[:tok.n_o].detach().numpy() @ text_enc.projection.numpy()
    v = img.numpy()
    oracle = [sum(a * b for a, b in zip(r, v)) / (np.sqrt(sum(a * a for a in r)) * np.sqrt(sum(b * b for b in v)))
              for r in proj]
    np.testing.assert_allclose(s.scores, oracle, rtol=0, atol=1e-12)


def test_similarity_zero_row_scores_zero():
    rows = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    with pytest.warns(UserWarning, match="zero-norm"):
        s = word_image_similarity(rows, torch.tensor([1.0, 1.0], dtype=torch.float64))
    assert s.scores[0] == 0.0 and s.scores[1] == pytest.approx(2 ** -0.5)
