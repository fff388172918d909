import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irk.checks import CASES, run_gradcheck
from irk.config import ModelConfig
from irk.editing import editing_layer_forward, editing_transformer_forward, fusion_forward, match_head
from irk.encoders import (encode_text_batch, image_to_patches, patchify, pool_instruction, text_token_ids,
                          tokenize)
from irk.errors import ContractError, ShapeError
from irk.model import InstructReID
from irk.nn import Linear
from irk.tensor import Tensor, precision

from conftest import SMALL_MODEL


@pytest.fixture(scope="module")
def model():
    return InstructReID(ModelConfig(**SMALL_MODEL), seed=3)


def _tokens(model, rng, b=2):
    imgs = rng.normal(size=(b, 3, 16, 16)).astype(np.float32)
    return patchify(imgs, model.embed, model.cfg)


def test_gates_start_at_zero(model):
    for layer in model.layers:
        np.testing.assert_array_equal(layer.gate.data, 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_zero_gate_output_ignores_instruction(model, seed):
    rng = np.random.default_rng(seed)
    tokens = _tokens(model, rng)
    a = editing_transformer_forward(tokens, rng.normal(size=(2, 5, 16)).astype(np.float32), model.layers)
    b = editing_transformer_forward(tokens, rng.normal(size=(2, 3, 16)).astype(np.float32), model.layers)
    base = editing_transformer_forward(tokens, None, model.layers)
    assert np.max(np.abs(a.data - base.data)) <= 1e-6
    assert np.max(np.abs(b.data - base.data)) <= 1e-6


def test_nonzero_gate_uses_instruction(rng):
    m = InstructReID(ModelConfig(**SMALL_MODEL), seed=4)
    for layer in m.layers:
        layer.gate.data = np.full(layer.gate.shape, 0.5, dtype=np.float32)
    tokens = _tokens(m, rng)
    a = editing_transformer_forward(tokens, rng.normal(size=(2, 5, 16)).astype(np.float32), m.layers)
    b = editing_transformer_forward(tokens, rng.normal(size=(2, 5, 16)).astype(np.float32), m.layers)
    assert np.max(np.abs(a.data - b.data)) > 1e-4


def test_layer_trace_and_shapes(model, rng):
    x = _tokens(model, rng)
    trace = {}
    out = editing_layer_forward(x, rng.normal(size=(4, 16)).astype(np.float32), model.layers[0], trace=trace)
    assert out.shape == x.shape
    assert trace["self"].shape == (2, 2, 5, 5)
    np.testing.assert_allclose(trace["self"].sum(-1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(trace["instruction"], 0.0)
    single = editing_layer_forward(x[0], None, model.layers[0])
    np.testing.assert_allclose(single.data, editing_layer_forward(x, None, model.layers[0]).data[0], atol=1e-6)


def test_instruction_batch_mismatch(model, rng):
    with pytest.raises(ShapeError):
        editing_layer_forward(_tokens(model, rng), rng.normal(size=(3, 4, 16)), model.layers[0])
    with pytest.raises(ContractError):
        editing_transformer_forward(_tokens(model, rng), None, [])


def test_padding_mask_equals_truncation(rng):
    m = InstructReID(ModelConfig(**SMALL_MODEL), seed=5)
    for layer in m.layers:
        layer.gate.data = np.ones(layer.gate.shape, dtype=np.float32)
    with precision(np.float64):
        tokens = patchify(rng.normal(size=(1, 3, 16, 16)), m.embed, m.cfg)
        instr = rng.normal(size=(1, 3, 16))
        padded = np.concatenate([instr, rng.normal(size=(1, 2, 16)) * 50], axis=1)
        mask = np.array([[True, True, True, False, False]])
        a = editing_transformer_forward(tokens, instr, m.layers)
        b = editing_transformer_forward(tokens, padded, m.layers, mask)
    np.testing.assert_allclose(a.data, b.data, atol=1e-5)


def test_fusion_with_zero_output_projection_is_identity(rng):
    m = InstructReID(ModelConfig(**SMALL_MODEL), seed=6)
    for blk in m.fusion:
        blk.o.weight.data = np.zeros(blk.o.weight.shape, dtype=np.float32)
        blk.o.bias.data = np.zeros(blk.o.bias.shape, dtype=np.float32)
    f = Tensor(rng.normal(size=(3, 16)))
    out = fusion_forward(f, rng.normal(size=(3, 4, 16)), m.fusion)
    np.testing.assert_array_equal(out.data, f.data)
    with pytest.raises(ContractError):
        fusion_forward(f, None, m.fusion)


def test_match_head_hand_logits():
    head = Linear(np.random.default_rng(0), 2, 2)
    head.weight.data = np.array([[1.0, 0.0], [0.0, 2.0]], dtype=np.float32)
    head.bias.data = np.array([0.5, -0.5], dtype=np.float32)
    out = match_head(Tensor([[1.0, 1.0], [2.0, -1.0]]), head).data
    np.testing.assert_allclose(out, [[1.5, 1.5], [2.5, -2.5]])


def test_tokenize_is_deterministic_and_bounded():
    ids = tokenize("Do not change clothes, please!", 50)
    assert ids == tokenize("do NOT change   clothes please", 50)
    assert len(ids) == 5 and all(0 <= i < 50 for i in ids)


def test_text_encoding_contracts(model):
    with pytest.raises(ContractError):
        text_token_ids(["..."], model.cfg)
    with pytest.raises(ContractError):
        text_token_ids(["word " * 40], model.cfg)
    feats, mask = encode_text_batch([["a b c"], ["a b c d e"]], model.instruction, model.cfg)
    assert feats.shape == (2, 5, 16)
    assert mask.tolist() == [[True] * 3 + [False] * 2, [True] * 5]


def test_padded_text_matches_unpadded(model):
    alone, _ = encode_text_batch([["red coat and shorts"]], model.instruction, model.cfg)
    batch, mask = encode_text_batch([["red coat and shorts"], ["a longer sentence with more words"]],
                                    model.instruction, model.cfg)
    np.testing.assert_allclose(batch.data[0, :4], alone.data[0], atol=1e-5)
    np.testing.assert_allclose(pool_instruction(batch.data, mask)[0], pool_instruction(alone.data)[0], atol=1e-5)


def test_image_to_patches_row_major():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    p = image_to_patches(img, 2)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])


def test_patchify_rejects_wrong_size(model):
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 3, 8, 16)), model.embed, model.cfg)


def test_image_features_are_normalised(model, rng):
    f = model.image_features(rng.normal(size=(3, 3, 16, 16)).astype(np.float32)).data
    np.testing.assert_allclose(f.mean(axis=1), 0.0, atol=1e-5)


def test_frozen_encoder_excluded_from_training(model):
    names = [n for n, _ in model.named_parameters()]
    trainable = {id(p) for p in model.trainable_parameters()}
    enc = {id(p) for p in model.instruction.parameters()}
    assert any(n.startswith("instruction.") for n in names)
    assert not trainable & enc


def test_state_round_trip(model, rng):
    other = InstructReID(ModelConfig(**SMALL_MODEL), seed=99)
    other.load_arrays(model.state_arrays())
    imgs = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(other.image_features(imgs).data, model.image_features(imgs).data)
    with pytest.raises(ContractError):
        other.load_arrays({})


@pytest.mark.parametrize("case", ["editing_layer", "fusion", "text_encoder", "adaptive_triplet"])
def test_gradcheck_cases(case):
    (res,) = run_gradcheck(seed=1, cases=[case])
    assert res.passed, res


def test_every_case_registered():
    assert {"editing_layer", "editing_transformer", "fusion", "text_encoder", "image_encoder",
            "adaptive_triplet", "identity_ce", "contrastive", "match_ce", "loss_retrieval",
            "loss_t2i", "full_model"} <= set(CASES)
