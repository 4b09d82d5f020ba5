import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lcad.textenc import (
    N_TOK,
    PAD,
    UNK,
    TextEncoder,
    Vocabulary,
    default_vocabulary,
    tokenize,
    tokenize_batch,
)


def test_vocabulary_contract():
    v = default_vocabulary()
    assert v.index["<pad>"] == PAD == 0 and v.index["<unk>"] == UNK == 1
    assert len(v) <= 64
    assert sorted(v.index.values()) == list(range(len(v)))
    with pytest.raises(ValueError):
        Vocabulary(("<unk>", "<pad>"))
    with pytest.raises(ValueError):
        Vocabulary(("<pad>", "<unk>", *[f"w{i}" for i in range(63)]))


def test_tokenize_examples():
    v = default_vocabulary()
    ids = tokenize("a red circle", v)
    assert ids[:3] == [v.index["a"], v.index["red"], v.index["circle"]]
    assert ids[3:] == [PAD] * (N_TOK - 3)
    assert tokenize("a crimson circle", v)[1] == UNK
    assert len(tokenize("a red circle, a blue square, a green triangle, a pink circle, a gray square", v)) == N_TOK
    with pytest.raises(ValueError):
        tokenize("   ", v)


def test_four_instance_description_fits():
    text = "a red circle, a blue square, a green triangle, a pink circle"
    assert PAD not in tokenize(text)[:15]


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz ,.", min_size=1, max_size=80).filter(lambda s: s.strip()))
def test_token_count_is_fixed(text):
    assert len(tokenize(text)) == N_TOK


def _encoder(dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    return TextEncoder().to(dtype)


def test_determinism_and_pad_rows():
    enc = _encoder()
    toks = tokenize_batch(["a red circle", "a colorful image"])
    a, pad = enc(toks)
    b, _ = enc(toks)
    assert torch.equal(a, b)
    assert torch.all(a[pad] == 0)
    all_pad = torch.zeros(1, N_TOK, dtype=torch.long)
    out, pad = enc(all_pad)
    assert torch.all(out == 0) and bool(pad.all())
    assert torch.isfinite(out).all()


def test_errors():
    enc = _encoder()
    with pytest.raises(ValueError):
        enc(torch.full((1, N_TOK), len(enc.vocab)))
    with pytest.raises(ValueError):
        enc(torch.zeros(1, N_TOK + 1, dtype=torch.long))


def test_row_norm_bounded():
    enc = _encoder()
    out, _ = enc(tokenize_batch(["a red circle, a blue square", "a colorful image"]))
    assert out.norm(dim=-1).max() <= 10


def test_permutation_sensitive():
    enc = _encoder()
    a, _ = enc(tokenize_batch(["a red circle"]))
    b, _ = enc(tokenize_batch(["a circle red"]))
    assert not torch.allclose(a, b)


def test_embedding_gradient_matches_finite_differences():
    enc = _encoder(torch.float64, seed=3)
    toks = tokenize_batch(["a red circle, a blue square"])
    probe = torch.randn(1, N_TOK, enc.dim, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    f = lambda: (enc(toks)[0] * probe).sum()
    enc.zero_grad()
    f().backward()
    grad = enc.token_emb.weight.grad.clone()
    h = 1e-4
    table = enc.token_emb.weight.data
    for row in (toks[0, 1].item(), toks[0, 2].item(), toks[0, 0].item()):
        for col in (0, 7, 33):
            orig = table[row, col].item()
            table[row, col] = orig + h
            up = f().item()
            table[row, col] = orig - h
            down = f().item()
            table[row, col] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - grad[row, col].item()) <= 1e-4 * max(abs(fd), 1e-3)
