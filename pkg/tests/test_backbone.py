import numpy as np
import pytest
import torch

from ufo.backbone import (
    BIDIRECTIONAL,
    SEQ2SEQ,
    LayoutError,
    ModelConfig,
    UnifiedTransformer,
    build_mask,
    parameter_kind,
    representative,
)
from ufo.tokenize import ConfigError, TokenKind, TokenSequence

K = TokenKind
TWO_THREE = [K.IMG_CLS, K.IMG_PATCH, K.TXT_CLS, K.TXT_TOKEN, K.TXT_EOS]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden=63, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(layers=0)


def test_bidirectional_mask_all_ones():
    assert build_mask(TWO_THREE, BIDIRECTIONAL).all()


def test_seq2seq_mask_matches_rule():
    expected = torch.tensor([
        [1, 1, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 1, 1, 1, 0],
        [1, 1, 1, 1, 1],
    ], dtype=torch.bool)
    assert torch.equal(build_mask(TWO_THREE, SEQ2SEQ), expected)


def test_text_only_seq2seq_is_causal():
    kinds = [K.TXT_CLS, K.TXT_TOKEN, K.TXT_TOKEN, K.TXT_EOS]
    assert torch.equal(build_mask(kinds, SEQ2SEQ), torch.tril(torch.ones(4, 4, dtype=torch.bool)))


def test_pad_attends_only_itself():
    kinds = [K.IMG_CLS, K.TXT_CLS, K.TXT_EOS, K.PAD]
    m = build_mask(kinds, BIDIRECTIONAL)
    assert m[3].tolist() == [False, False, False, True]
    assert m[:3, 3].tolist() == [False, False, False]
    assert m.diagonal().all()


def test_interleaved_layout_rejected():
    with pytest.raises(LayoutError):
        build_mask([K.TXT_CLS, K.IMG_CLS], BIDIRECTIONAL)


def _pair(vocab, n=1):
    img = torch.rand(n, 32, 32, 3, dtype=torch.float64)
    txt = [vocab.encode("a red square and a blue circle")[0]] * n
    return img, txt


def test_masked_input_does_not_affect_output(vocab):
    img, txt = _pair(vocab)
    model1 = UnifiedTransformer(ModelConfig(layers=1, vocab_size=len(vocab)), vocab).double()
    seq1 = model1.pair_tokens(img, txt)
    mask = torch.ones(len(seq1), len(seq1), dtype=torch.bool)
    mask[3, 10] = False
    emb1 = seq1.embeddings.clone()
    b1 = model1(seq1, mask)
    emb1[0, 10] += 3.0
    o1 = model1(TokenSequence(emb1, seq1.kinds, seq1.positions, "pair"), mask)
    assert torch.equal(o1[0, 3], b1[0, 3])
    assert not torch.equal(o1[0, 4], b1[0, 4])


def test_zero_attention_branch_is_mlp_only(model, vocab):
    img, txt = _pair(vocab)
    with torch.no_grad():
        for blk in model.blocks:
            blk.attn.proj.weight.zero_()
            blk.attn.proj.bias.zero_()
    seq = model.pair_tokens(img, txt)
    x = seq.embeddings
    for blk in model.blocks:
        x = x + blk.mlp(blk.mlp_norm(x))
    expected = model.norm(x)
    assert torch.allclose(model(seq, build_mask(seq.kinds)), expected, atol=1e-12)


def test_permutation_equivariance(model, vocab):
    img, txt = _pair(vocab)
    seq = model.pair_tokens(img, txt)
    L = len(seq)
    mask = build_mask(seq.kinds)[0]
    out = model(seq, mask)
    perm = torch.arange(L)
    perm[[5, 20]] = perm[[20, 5]]
    pseq = TokenSequence(seq.embeddings[:, perm], seq.kinds[:, perm], seq.positions[:, perm], "pair")
    pout = model(pseq, mask[perm][:, perm])
    assert torch.allclose(pout[:, perm], out, atol=1e-12)


def test_encode_image_equals_pair_with_empty_text_block(model):
    img = torch.rand(1, 32, 32, 3, dtype=torch.float64)
    cls, _ = model.encode_image(img)
    seq = model.image_tokens(img)
    from ufo.tokenize import IMAGE, add_modality
    seq = add_modality(seq, model.modal_embed, IMAGE)
    h = model(seq, build_mask(seq.kinds, SEQ2SEQ))
    assert torch.equal(h[0, 0], cls[0])


def test_encode_text_empty_gives_distinct_cls_eos(model):
    eos, cls, enc = model.encode_text([[]])
    assert enc.hidden.shape[1] == 2
    assert not torch.allclose(eos, cls)


def test_batched_encode_equals_single(model, vocab):
    imgs = torch.rand(4, 32, 32, 3, dtype=torch.float64)
    cls, _ = model.encode_image(imgs)
    for i in range(4):
        single, _ = model.encode_image(imgs[i : i + 1])
        assert torch.allclose(single[0], cls[i], atol=1e-6)
    texts = [vocab.encode(t)[0] for t in ["a red square", "a blue circle and a green square", "a white triangle"]]
    eos, c, _ = model.encode_text(texts)
    for i, t in enumerate(texts):
        e1, c1, _ = model.encode_text([t])
        assert torch.allclose(e1[0], eos[i], atol=1e-6) and torch.allclose(c1[0], c[i], atol=1e-6)


def test_role_unification_single_parameter_set(model, vocab):
    img, txt = _pair(vocab)
    seen = []
    hook = lambda mod, inp, out: seen.append(id(mod))
    handles = [b.register_forward_hook(hook) for b in model.blocks]
    model.encode_image(img)
    model.encode_text(txt)
    model.encode_pair(img, txt, SEQ2SEQ)
    for h in handles:
        h.remove()
    assert set(seen) == {id(b) for b in model.blocks} and len(seen) == 3 * len(model.blocks)


def test_seq2seq_causality(model, vocab):
    rng = np.random.default_rng(1)
    img = torch.rand(1, 32, 32, 3, dtype=torch.float64)
    ids = [int(x) for x in rng.choice(vocab.regular_ids, 8)]
    base = model.encode_pair(img, [ids], SEQ2SEQ).hidden
    k = 4
    changed = list(ids)
    changed[k + 1] = vocab.regular_ids[0] if ids[k + 1] != vocab.regular_ids[0] else vocab.regular_ids[1]
    out = model.encode_pair(img, [changed], SEQ2SEQ).hidden
    n_img = 17
    # text position k within the body is sequence position n_img + 1 + k
    assert torch.equal(out[0, : n_img + 1 + k + 1], base[0, : n_img + 1 + k + 1])
    assert not torch.equal(out[0, n_img + 1 + k + 1], base[0, n_img + 1 + k + 1])


def test_attention_rows_are_distributions(model, vocab):
    img, txt = _pair(vocab, 2)
    for blk in model.blocks:
        blk.attn.keep_weights = True
    enc = model.encode_pair(img, [txt[0], txt[0][:3]], SEQ2SEQ)
    mask = build_mask(enc.kinds, SEQ2SEQ)
    for blk in model.blocks:
        w = blk.attn.last_weights
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-9)
        assert (w.masked_select(~mask[:, None].expand_as(w)) == 0).all()


def test_representative_picks_kind_positions():
    kinds = torch.tensor([[K.IMG_CLS, K.TXT_CLS, K.TXT_TOKEN, K.TXT_EOS, K.PAD],
                          [K.IMG_CLS, K.TXT_CLS, K.TXT_EOS, K.PAD, K.PAD]])
    hidden = torch.arange(10.0).reshape(2, 5, 1).expand(2, 5, 3)
    assert representative(hidden, kinds, K.TXT_EOS)[:, 0].tolist() == [3.0, 7.0]
    assert representative(hidden, kinds, K.TXT_CLS)[:, 0].tolist() == [1.0, 6.0]
    with pytest.raises(LayoutError):
        representative(hidden, kinds, K.TXT_MASK)


def test_parameter_kinds_cover_model(model):
    kinds = {n: parameter_kind(n) for n, _ in model.named_parameters()}
    assert kinds["log_temp"] == "temperature"
    assert kinds["blocks.0.attn_norm.weight"] == "layernorm"
    assert kinds["blocks.0.attn.qkv.weight"] == "weight"
    assert kinds["blocks.0.attn.qkv.bias"] == "bias"
    assert kinds["text_embed"] == "embedding"


def test_mask_extent_mismatch(model, vocab):
    img, txt = _pair(vocab)
    seq = model.pair_tokens(img, txt)
    with pytest.raises(ValueError, match="mask extent"):
        model(seq, torch.ones(3, 3, dtype=torch.bool))
