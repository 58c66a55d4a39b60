import numpy as np
import pytest

import oracles
from finealign import diffcore as dc
from finealign.diffcore import ShapeError, Tensor
from finealign.encoders import (
    CLS_ID,
    PAD_ID,
    UNK_ID,
    DualEncoder,
    TextConfig,
    VisionConfig,
    Vocabulary,
    extend_position_embeddings,
    patchify,
    tokenize,
    tokenize_batch,
)

VOCAB = Vocabulary.build(["a red square", "a blue striped circle on a plain cross", "small large green"])


def small_model(seed=0, layers=2):
    vision = VisionConfig(image_size=16, patch_size=4, embed_dim=16, num_layers=layers, num_heads=2, proj_dim=8)
    text = TextConfig(vocab_size=32, embed_dim=16, num_layers=layers, num_heads=2, proj_dim=8)
    return DualEncoder.create(vision, text, VOCAB, seed=seed)


# -- tokenizer -------------------------------------------------------------------------------


def test_tokenize_direct_rule():
    vocab = Vocabulary({"a": 4, "bird": 9})
    seq = tokenize("a bird", vocab, max_len=6)
    assert seq.ids.tolist() == [CLS_ID, 4, 9, PAD_ID, PAD_ID, PAD_ID]
    assert seq.length == 3
    assert seq.mask.tolist() == [True, True, True, False, False, False]


def test_tokenize_is_deterministic_and_maps_unknown_words():
    a = tokenize("A Red, SQUARE!", VOCAB)
    b = tokenize("A Red, SQUARE!", VOCAB)
    assert np.array_equal(a.ids, b.ids)
    assert tokenize("zebra", VOCAB).ids[1] == UNK_ID


def test_long_caption_truncates_to_extended_length():
    seq = tokenize(" ".join(["square"] * 300), VOCAB, max_len=248)
    assert len(seq.ids) == 248 and seq.length == 248


def test_empty_caption_is_flagged():
    seq = tokenize(";;", VOCAB)
    assert seq.empty and seq.length == 1


def test_vocabulary_build_ignores_corpus_order():
    assert Vocabulary.build(["b a", "c"]) == Vocabulary.build(["c", "a b"])


def test_tokenize_batch_trims_padding():
    ids, mask = tokenize_batch(["a", "a red square"], VOCAB)
    assert ids.shape == (2, 4)
    assert mask.tolist() == [[True, True, False, False], [True] * 4]


# -- positional extension -----------------------------------------------------------------------


@pytest.fixture
def table():
    return np.random.default_rng(0).normal(size=(77, 6))


def test_extension_shape_prefix_knots_and_midpoints(table):
    out = extend_position_embeddings(table)
    assert out.shape == (248, 6)
    assert np.array_equal(out[7], table[7])
    assert np.array_equal(out[:20], table[:20])
    assert np.array_equal(out[24], table[21])
    assert np.allclose(out[22], 0.5 * table[20] + 0.5 * table[21], atol=1e-12)


def test_extension_matches_hand_interpolation(table):
    out = extend_position_embeddings(table)
    for i in range(248):
        assert np.allclose(out[i], oracles.interpolate_row(table.tolist(), i), rtol=0, atol=1e-12)


def test_extension_rows_are_convex_combinations_of_neighbours(table):
    out = extend_position_embeddings(table)
    for j in range(228):
        c = 20 + j / 4
        lo = min(int(c), 76)
        hi = min(lo + 1, 76)
        # solve out = (1 - f) * lo + f * hi for f in the least-squares sense
        d = table[hi] - table[lo]
        f = 0.0 if not d.any() else float((out[20 + j] - table[lo]) @ d / (d @ d))
        assert -1e-12 <= f <= 1 + 1e-12
        assert np.allclose(out[20 + j], (1 - f) * table[lo] + f * table[hi], atol=1e-12)


def test_extension_endpoints(table):
    out = extend_position_embeddings(table)
    assert np.array_equal(out[20], table[20])
    # the last four rows map to source coordinates 76, 76.25, 76.5, 76.75; past row 76 the table ends
    for i in range(244, 248):
        assert np.array_equal(out[i], table[76])


def test_extension_is_differentiable():
    t = Tensor(np.random.default_rng(1).normal(size=(77, 3)), requires_grad=True)
    w = np.random.default_rng(2).normal(size=(248, 3))
    assert np.array_equal(extend_position_embeddings(t).data, extend_position_embeddings(t.data))
    err = dc.finite_difference_check(lambda: dc.tsum(extend_position_embeddings(t) * w), [t], max_entries=60)
    assert err < 1e-4


def test_extension_rejects_wrong_length():
    with pytest.raises(ShapeError):
        extend_position_embeddings(np.zeros((76, 4)))


# -- text encoder ---------------------------------------------------------------------------------


def test_text_encoder_determinism_and_dimension():
    model = small_model()
    seq = tokenize("a red square", VOCAB, 16)
    a = model.encode_text(seq).cls_embedding.data
    b = model.encode_text(seq).cls_embedding.data
    assert a.shape == (8,)
    assert a.tobytes() == b.tobytes()


def test_changing_one_token_changes_the_embedding():
    model = small_model()
    a = model.encode_text(tokenize("a red square", VOCAB, 16)).cls_embedding.data
    b = model.encode_text(tokenize("a blue square", VOCAB, 16)).cls_embedding.data
    assert np.linalg.norm(a - b) > 0


def test_padding_does_not_leak_into_the_embedding():
    model = small_model()
    short = model.encode_text(tokenize("a red square", VOCAB, 4)).cls_embedding.data
    padded = model.encode_text(tokenize("a red square", VOCAB, 40)).cls_embedding.data
    assert np.allclose(short, padded, atol=1e-12)


def test_bucketed_batch_matches_one_at_a_time():
    model = small_model()
    texts = ["a red square", "a", "a blue striped circle on a plain cross", "green", "a red square"]
    batch = model.encode_texts(texts).data
    single = np.stack([model.encode_text(tokenize(t, VOCAB)).cls_embedding.data for t in texts])
    assert np.allclose(batch, single, atol=1e-12)


def test_text_token_ids_must_fit_vocabulary():
    model = small_model()
    with pytest.raises(ValueError):
        model.encode_text(np.array([CLS_ID, 40]))


# -- vision encoder -------------------------------------------------------------------------------


def test_default_vision_grid():
    assert VisionConfig().grid == 4  # 32 x 32 with patch 8


def test_image_encoder_shapes():
    model = small_model()
    out = model.encode_image(np.zeros((16, 16, 3)))
    assert out.cls_embedding.shape == (8,)
    assert out.token_grid.shape == (4, 4, 8)
    assert out.caches["final_block_input"].shape == (17, 16)
    with pytest.raises(ShapeError):
        model.encode_image(np.zeros((15, 16, 3)))


def test_zero_image_gives_identical_patch_tokens():
    model = small_model()
    model.params["vision.patch.b"].data[:] = 0.0
    tokens = model.patch_embed(np.zeros((1, 16, 16, 3))).data[0]
    assert np.all(tokens == tokens[0])


def test_permuting_patches_permutes_patch_embeddings():
    model = small_model()
    img = np.random.default_rng(3).normal(size=(1, 16, 16, 3))
    swapped = img.copy()
    swapped[0, 0:4, 0:4], swapped[0, 8:12, 4:8] = img[0, 8:12, 4:8], img[0, 0:4, 0:4]
    a = model.patch_embed(img).data[0]
    b = model.patch_embed(swapped).data[0]
    i, j = 0, 2 * 4 + 1  # row-major patch indices of the two swapped cells
    assert np.allclose(a[i], b[j]) and np.allclose(a[j], b[i])
    rest = [k for k in range(16) if k not in (i, j)]
    assert np.array_equal(a[rest], b[rest])


def test_patchify_row_major():
    img = np.arange(4 * 4 * 1, dtype=float).reshape(1, 4, 4, 1)
    patches = patchify(img, 2)
    assert patches[0, 1].tolist() == [2, 3, 6, 7]


def test_batch_and_single_image_agree():
    model = small_model()
    imgs = np.random.default_rng(4).normal(size=(3, 16, 16, 3))
    batch = model.encode_image(imgs).cls_embedding.data
    one = model.encode_image(imgs[1]).cls_embedding.data
    assert np.allclose(batch[1], one, atol=1e-12)


# -- gradients through full encoders ---------------------------------------------------------------


def _jitter(model, seed):
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = p.data + rng.normal(0, 0.1, p.data.shape)


def test_vision_encoder_gradients():
    model = small_model(layers=2)
    _jitter(model, 5)
    imgs = np.random.default_rng(6).normal(size=(2, 16, 16, 3))
    w = np.random.default_rng(7).normal(size=(2, 8))
    params = {k: v for k, v in model.params.items() if k.startswith("vision.")}
    err = dc.finite_difference_check(lambda: dc.tsum(model.encode_image(imgs).cls_embedding * w), params, max_entries=8)
    assert err < 1e-4


def test_text_encoder_gradients():
    model = small_model(layers=2)
    _jitter(model, 8)
    ids, mask = tokenize_batch(["a red square", "a blue circle on a cross"], VOCAB)
    w = np.random.default_rng(9).normal(size=(2, 8))
    params = {k: v for k, v in model.params.items() if k.startswith("text.")}
    err = dc.finite_difference_check(lambda: dc.tsum(model.encode_text(ids, mask).cls_embedding * w), params, max_entries=8)
    assert err < 1e-4
