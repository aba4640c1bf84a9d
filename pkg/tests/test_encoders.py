import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mama.captions import build_structured_caption
from mama.encoders import (EncoderConfig, DualEncoder, TextEncoderKind, TokenRole, encode_image, encode_text,
                           gather_sentence_features, image_token_roles, l2_normalize, lora_forward,
                           select_patch_features, select_sentence_features)
from mama.errors import AlignmentError, InputError, NumericError, ShapeError
from mama.tokenizer import CLS_ID, PAD_ID, SEP_ID, HashTokenizer
from factories import record

TINY = dict(embed_dim=4, image_size=8, patch_grid=(2, 2), max_text_tokens=32, vision_width=8, text_width=8,
            depth=1, heads=2, vocab_size=64, lora_rank=2, lora_alpha=4.0)


def tiny(seed=0, **kw):
    return DualEncoder(EncoderConfig(**{**TINY, **kw}, seed=seed)).double()


class TestConfig:
    def test_grid_must_divide_image(self):
        with pytest.raises(ShapeError):
            EncoderConfig(image_size=30, patch_grid=(4, 4))

    def test_rank_bounded(self):
        with pytest.raises(ShapeError):
            EncoderConfig(lora_rank=65, text_width=64)

    def test_embed_dim_positive(self):
        with pytest.raises(ShapeError):
            EncoderConfig(embed_dim=0)


class TestImageEncoder:
    def test_shapes_and_roles(self):
        m = tiny()
        emb = encode_image(np.zeros((8, 8)), m)
        assert emb.global_.shape == (4,) and emb.local.shape == (5, 4)
        assert list(emb.token_roles) == [TokenRole.CLS] + [TokenRole.PATCH] * 4

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            tiny().encode_images(torch.zeros(1, 9, 8, dtype=torch.float64))

    def test_zero_backbone_and_bias_gives_zero_global(self):
        m = tiny()
        with torch.no_grad():
            m.g_v.bias.zero_()
            tokens = torch.zeros(1, 5, 8, dtype=torch.float64)
            glob, _ = m.project_image_tokens(tokens)
        assert torch.all(glob == 0)

    def test_constant_tokens_pool_to_their_projection(self):
        m = tiny()
        feat = torch.arange(8, dtype=torch.float64)
        glob, _ = m.project_image_tokens(feat.expand(1, 5, 8))
        torch.testing.assert_close(glob[0], m.g_v(feat))

    def test_global_is_mean_of_projected_tokens(self):
        m = tiny(seed=1)
        x = torch.tensor(np.random.default_rng(0).uniform(size=(1, 8, 8)))
        with torch.no_grad():
            tokens = m.vision(x)[0].numpy()
            glob, _ = m.encode_images(x)
        W, b = m.g_v.weight.detach().numpy().tolist(), m.g_v.bias.detach().numpy().tolist()
        projected = [[v + bi for v, bi in zip(oracles.matvec(W, t), b)] for t in tokens.tolist()]
        expected = [sum(col) / len(projected) for col in zip(*projected)]
        np.testing.assert_allclose(glob[0].numpy(), expected, atol=1e-12)

    def test_patchify_is_row_major(self):
        m = tiny()
        img = torch.zeros(1, 8, 8, dtype=torch.float64)
        img[0, 0:4, 4:8] = 1.0  # top-right cell
        patches = m.vision.patchify(img)[0]
        assert patches.sum(dim=1).tolist() == [0.0, 16.0, 0.0, 0.0]


class TestTextEncoder:
    def test_decoder_only_takes_last_real_token(self):
        m = tiny()
        ids = np.array([CLS_ID, 7, SEP_ID] + [PAD_ID] * 5)
        emb = encode_text(ids, m, TextEncoderKind.DECODER_ONLY)
        np.testing.assert_allclose(emb.global_, m.g_t(m.text(torch.as_tensor(ids)[None]))[0, 2].detach().numpy())

    def test_bidirectional_constant_tokens(self):
        m = tiny(text_kind="bidirectional")
        feat = torch.linspace(-1, 1, 8, dtype=torch.float64)
        ids = torch.tensor([[CLS_ID, 5, 6, SEP_ID]])
        glob, _ = m.project_text_tokens(feat.expand(1, 4, 8), ids)
        torch.testing.assert_close(glob[0], m.g_t(feat))

    @pytest.mark.parametrize("kind", ["decoder_only", "bidirectional"])
    def test_padding_invariance(self, kind):
        m = tiny(text_kind=kind)
        ids = [CLS_ID, 9, 10, SEP_ID, 11, SEP_ID]
        a = encode_text(np.array(ids), m).global_
        b = encode_text(np.array(ids + [PAD_ID] * 7), m).global_
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_empty_sequence(self):
        with pytest.raises(InputError):
            encode_text(np.array([], dtype=np.int64), tiny())
        with pytest.raises(InputError):
            tiny().encode_texts(torch.zeros(1, 3, dtype=torch.long))

    def test_too_long(self):
        with pytest.raises(ShapeError):
            tiny().encode_texts(torch.ones(1, 33, dtype=torch.long))

    def test_lora_start_equivalence(self):
        with_lora = tiny(seed=4)
        plain = DualEncoder(EncoderConfig(**TINY, seed=4), use_lora=False).double()
        plain.load_state_dict({k: v for k, v in with_lora.state_dict().items() if "lora_" not in k})
        ids = torch.tensor([[CLS_ID, 4, 5, SEP_ID, 6, SEP_ID]])
        assert torch.equal(with_lora.encode_texts(ids)[0], plain.encode_texts(ids)[0])

    def test_only_lora_trainable_in_text_tower(self):
        m = tiny()
        trainable = [n for n, p in m.text.named_parameters() if p.requires_grad]
        assert trainable and all("lora_" in n for n in trainable)
        assert not any("lora_" in n for n, _ in m.vision.named_parameters())


class TestSelection:
    def test_single_sep(self):
        local = np.arange(12.0).reshape(4, 3)
        roles = [TokenRole.CLS, TokenRole.WORD, TokenRole.SEP, TokenRole.PAD]
        np.testing.assert_array_equal(select_sentence_features(local, roles, 1), local[[2]])

    def test_sep_positions_in_order(self):
        roles = np.full(15, TokenRole.WORD)
        roles[[4, 9, 13]] = TokenRole.SEP
        local = np.random.default_rng(0).normal(size=(15, 2))
        np.testing.assert_array_equal(select_sentence_features(local, roles, 3), local[[4, 9, 13]])

    def test_non_sep_permutation_invariance(self):
        rng = np.random.default_rng(1)
        roles = np.array([TokenRole.CLS, TokenRole.WORD, TokenRole.SEP, TokenRole.WORD, TokenRole.WORD, TokenRole.SEP])
        local = rng.normal(size=(6, 3))
        shuffled = local.copy()
        non_sep = np.flatnonzero(roles != TokenRole.SEP)
        shuffled[non_sep] = local[rng.permutation(non_sep)]
        np.testing.assert_array_equal(select_sentence_features(local, roles, 2),
                                      select_sentence_features(shuffled, roles, 2))

    def test_sep_count_mismatch(self):
        with pytest.raises(AlignmentError):
            select_sentence_features(np.zeros((3, 2)), [TokenRole.CLS, TokenRole.SEP, TokenRole.WORD], 2)

    def test_patch_rows(self):
        local = np.arange(10.0).reshape(5, 2)
        np.testing.assert_array_equal(select_patch_features(local, image_token_roles(4)), local[1:])
        with pytest.raises(AlignmentError):
            select_patch_features(local, [TokenRole.PATCH] * 5)

    def test_batched_gather_matches_per_row(self):
        tok = HashTokenizer(64, 32)
        ids, n = tok.batch(["one. two three.", "four.", "a. b. c."])
        local = torch.tensor(np.random.default_rng(2).normal(size=(*ids.shape, 3)))
        feats, mask = gather_sentence_features(local, torch.as_tensor(ids), n)
        for i in range(3):
            roles = np.where(ids[i] == SEP_ID, TokenRole.SEP, TokenRole.WORD)
            ref = select_sentence_features(local[i].numpy(), roles, int(n[i]))
            np.testing.assert_array_equal(feats[i][mask[i]].numpy(), ref)


class TestLoRAMath:
    def test_zero_b_is_base(self):
        rng = np.random.default_rng(0)
        W, A, x = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=4)
        assert np.array_equal(lora_forward(x, W, A, np.zeros((3, 2)), 4.0, 2), W @ x)

    def test_rank_zero(self):
        W, x = np.eye(3), np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(lora_forward(x, W, None, None, 1.0, 0), x)

    def test_dense_oracle(self):
        rng = np.random.default_rng(1)
        W, A, B, x = rng.normal(size=(3, 3)), rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), rng.normal(size=3)
        ref = oracles.lora_dense(x.tolist(), W.tolist(), A.tolist(), B.tolist(), 4.0, 2)
        np.testing.assert_allclose(lora_forward(x, W, A, B, 4.0, 2), ref, atol=1e-6)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            lora_forward(np.ones(3), np.ones((2, 4)), None, None, 1.0, 0)
        with pytest.raises(ShapeError):
            lora_forward(np.ones(4), np.ones((2, 4)), np.ones((3, 4)), np.ones((2, 2)), 1.0, 2)

    def test_module_matches_numpy(self):
        m = tiny(seed=2)
        layer = m.text.blocks[0].q
        with torch.no_grad():
            layer.lora_B.normal_()
        x = np.random.default_rng(3).normal(size=8)
        out = layer(torch.tensor(x)).detach().numpy() - layer.bias.detach().numpy()
        ref = lora_forward(x, layer.weight.detach().numpy(), layer.lora_A.detach().numpy(),
                           layer.lora_B.detach().numpy(), 4.0, 2)
        np.testing.assert_allclose(out, ref, atol=1e-10)


class TestNormalize:
    def test_examples(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])
        np.testing.assert_array_equal(l2_normalize([0.0, 1.0]), [0.0, 1.0])

    def test_zero(self):
        with pytest.raises(NumericError):
            l2_normalize([0.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=8, max_size=8).filter(lambda v: any(abs(x) > 1e-3 for x in v)))
    def test_unit_norm(self, v):
        assert abs(np.linalg.norm(l2_normalize(v)) - 1) < 1e-7


class TestTokenizer:
    def test_layout(self):
        tok = HashTokenizer(64, 32)
        enc = tok.encode("Left breast. No mass!")
        assert enc.ids[0] == CLS_ID and enc.ids.count(SEP_ID) == 2 == enc.n_sentences
        assert enc.ids[-1] == SEP_ID

    def test_overflow_drops_whole_sentences(self):
        tok = HashTokenizer(64, 8)
        enc = tok.encode("a b c. d e f. g h i.")
        assert enc.n_sentences == 1 and enc.ids.count(SEP_ID) == 1 and len(enc.ids) <= 8

    def test_ids_in_range(self):
        tok = HashTokenizer(50, 128)
        ids, _ = tok.batch([build_structured_caption(record())])
        assert ids.min() >= 0 and ids.max() < 50

    def test_hyphen_word_is_one_token(self):
        assert HashTokenizer().words("BI-RADS 2.") == ["bi-rads", "2"]
