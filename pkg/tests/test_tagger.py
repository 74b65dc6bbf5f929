import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from addrparse import nn
from addrparse.domain import BOS_ID, PAD_ID, TAGS, Tag
from addrparse.errors import CorruptFile, EmptyAddress, LengthMismatch, SchemaError, VersionError
from addrparse.subword import learn_bpe
from addrparse.tagger import (
    MODEL_MAGIC,
    ModelConfig,
    ParserModel,
    batch_loss,
    decode,
    encode,
    load_model,
    model_bytes,
    model_from_bytes,
    parse,
    parse_many,
    parse_tokens,
    save_model,
)
from tests.test_nn import reference_lstm_step

WORDS = ["350", "rue", "des", "Lilas", "Ouest", "Quebec", "city", "G1L", "1B6", "Apt", "12"]
VOCAB = learn_bpe(WORDS * 2, 40)
SMALL = dict(hidden_dim=2, word_dim=3, subword_dim=2, hash_buckets=31)


def small_model(variant="composed", seed=0, **dims):
    cfg = ModelConfig(variant=variant, seed=seed, **{**SMALL, **dims})
    model = ParserModel.build(cfg, VOCAB if variant == "composed" else None)
    rng = np.random.default_rng(seed + 100)
    for p in model.parameters():
        if p.name.endswith(".b"):
            p.data[:] = rng.uniform(-0.5, 0.5, p.shape)
    return model


def _ref_cell(cell, x, h, c):
    return reference_lstm_step(x, h, c, cell.w_ih.data.tolist(), cell.w_hh.data.tolist(), cell.b.data.tolist())


def test_encode_single_step():
    model = small_model()
    x = np.array([[0.3, -0.2, 0.5]])
    states, (h, c) = encode(nn.Tensor(x), model)
    h_ref, c_ref = _ref_cell(model.encoder, x[0], np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(h.data, h_ref, atol=1e-12)
    np.testing.assert_allclose(c.data, c_ref, atol=1e-12)
    assert states.shape == (1, 2)


def test_encode_zero_params():
    model = small_model()
    for p in model.encoder.parameters():
        p.data[...] = 0.0
    _, (h, c) = encode(nn.Tensor(np.ones((4, 3))), model)
    assert np.array_equal(h.data, np.zeros(2)) and np.array_equal(c.data, np.zeros(2))


def test_encode_hand_rolled():
    model = small_model(seed=1)
    x = np.random.default_rng(2).normal(size=(3, 3))
    states, (h, c) = encode(nn.Tensor(x), model)
    h_ref, c_ref = np.zeros(2), np.zeros(2)
    for t in range(3):
        h_ref, c_ref = _ref_cell(model.encoder, x[t], h_ref, c_ref)
        np.testing.assert_allclose(states.data[t], h_ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(h.data, h_ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(c.data, c_ref, rtol=0, atol=1e-10)


def _hand_decode(model, h, c, T, teacher=None):
    emb = model.tag_embedding.data
    prev = BOS_ID
    rows = []
    for t in range(T):
        h, c = _ref_cell(model.decoder, emb[prev], h, c)
        logits = model.proj_w.data @ h + model.proj_b.data
        rows.append(logits)
        prev = teacher[t] if teacher is not None else int(np.argmax(logits))
    return np.array(rows)


@pytest.mark.parametrize("teacher", [None, [Tag.StreetName, Tag.Municipality]])
def test_decode_hand_rolled(teacher):
    model = small_model(seed=3)
    h0, c0 = np.array([0.4, -0.7]), np.array([1.2, 0.1])
    logits = decode((nn.Tensor(h0), nn.Tensor(c0)), 2, model, teacher)
    ids = None if teacher is None else [t.index for t in teacher]
    np.testing.assert_allclose(logits.data, _hand_decode(model, h0, c0, 2, ids), rtol=0, atol=1e-10)


def test_decode_single_step_uses_bos_only():
    model = small_model(seed=4)
    h0, c0 = np.array([0.1, 0.2]), np.array([0.3, 0.4])
    free = decode((nn.Tensor(h0), nn.Tensor(c0)), 1, model).data
    forced = decode((nn.Tensor(h0), nn.Tensor(c0)), 1, model, [Tag.Unit]).data
    assert np.array_equal(free, forced)


def test_teacher_on_greedy_path_matches_free_running():
    model = small_model(seed=5, hidden_dim=6, word_dim=4)
    ctx = (nn.Tensor(np.linspace(-1, 1, 6)), nn.Tensor(np.linspace(1, -1, 6)))
    free = decode(ctx, 7, model).data
    path = [TAGS[i] for i in free.argmax(axis=1)]
    assert np.array_equal(decode(ctx, 7, model, path).data, free)


def test_decode_length_mismatch():
    model = small_model()
    with pytest.raises(LengthMismatch):
        decode((nn.Tensor(np.zeros(2)), nn.Tensor(np.zeros(2))), 3, model, [Tag.Unit])


@pytest.mark.parametrize("variant", ["fixed", "composed"])
def test_parse_length_and_probabilities(variant):
    model = small_model(variant)
    result = parse("350 rue des Lilas Ouest Quebec city Quebec G1L 1B6", model)
    assert len(result.tags) == len(result.tokens) == 10
    np.testing.assert_allclose(result.probabilities.sum(axis=1), 1.0, rtol=0, atol=1e-9)
    assert result.lines()[0].startswith("350\t")
    with pytest.raises(EmptyAddress):
        parse("   ", model)


def test_zero_model_is_uniform():
    model = small_model()
    for p in model.parameters():
        p.data[...] = 0.0
    result = parse("350 rue des Lilas", model)
    assert np.array_equal(result.probabilities, np.full((4, 8), 0.125))


def test_batched_parse_matches_single():
    model = small_model(hidden_dim=5, word_dim=4)
    raws = ["350 rue des Lilas Ouest", "G1L 1B6", "12", "Apt 12 rue Quebec city G1L 1B6 Ouest"]
    for single, batched in zip((parse(r, model) for r in raws), parse_many(raws, model)):
        assert single.tags == batched.tags
        np.testing.assert_allclose(single.probabilities, batched.probabilities, rtol=0, atol=1e-12)


def test_context_dependence():
    model = small_model(hidden_dim=6, word_dim=4, seed=7)
    a = parse("350 rue des Lilas", model).probabilities
    b = parse("350 rue des Quebec", model).probabilities
    # the change sits in the last token, yet the first step's distribution moves
    assert not np.allclose(a[0], b[0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="abcXYZ019é", min_size=1, max_size=6), min_size=1, max_size=15))
def test_length_invariant_property(tokens):
    model = small_model()
    (result,) = parse_tokens([tokens], model)
    assert len(result.tags) == len(tokens)
    np.testing.assert_allclose(result.probabilities.sum(axis=1), 1.0, rtol=0, atol=1e-9)


@pytest.mark.parametrize("variant", ["fixed", "composed"])
def test_save_load_round_trip(tmp_path, variant):
    model = small_model(variant, seed=8)
    path = tmp_path / "m.bin"
    save_model(model, path)
    again = load_model(path)
    for (na, a), (nb, b) in zip(model.blocks(), again.blocks()):
        assert na == nb and np.array_equal(a, b)
    raws = ["350 rue des Lilas", "G1L 1B6 Quebec"]
    for x, y in zip(parse_many(raws, model), parse_many(raws, again)):
        assert x.tags == y.tags and np.array_equal(x.probabilities, y.probabilities)
    assert model_bytes(again) == path.read_bytes()


def test_corrupt_and_version_errors():
    blob = model_bytes(small_model())
    with pytest.raises(CorruptFile):
        model_from_bytes(blob[:-10])
    with pytest.raises(CorruptFile):
        model_from_bytes(b"not a model")
    tampered = bytearray(blob)
    tampered[-1] ^= 0xFF
    with pytest.raises(CorruptFile):
        model_from_bytes(bytes(tampered))
    head_end = blob.index(b"\n", len(MODEL_MAGIC))
    header = json.loads(blob[len(MODEL_MAGIC):head_end])
    for key, value, error in (("format_version", 2, VersionError), ("tags", ["A"] * 8, SchemaError)):
        bad = dict(header, **{key: value})
        raw = MODEL_MAGIC + json.dumps(bad).encode() + blob[head_end:]
        with pytest.raises(error):
            model_from_bytes(raw)


def test_fixed_variant_table_gets_no_gradient():
    model = small_model("fixed")
    tokens = [["350", "rue"], ["Quebec"]]
    tags = np.array([[0, 1], [3, PAD_ID]])
    mask = tags != PAD_ID
    nn.zero_grad(model.parameters())
    nn.backward(batch_loss(model, tokens, tags, mask, True))
    assert all(p.grad is not None for p in model.parameters())
    assert "ngram_table" not in {p.name for p in model.parameters()}


@pytest.mark.parametrize("variant, forcing", [("composed", True), ("composed", False), ("fixed", True)])
def test_full_loss_gradcheck(variant, forcing):
    model = small_model(variant, seed=9, hidden_dim=4, word_dim=3)
    tokens = [["350", "rue", "des", "Lilas"], ["G1L", "1B6"], ["Quebec", "city", "Ouest"]]
    rng = np.random.default_rng(10)
    tags = np.full((3, 4), PAD_ID)
    for i, toks in enumerate(tokens):
        tags[i, : len(toks)] = rng.integers(0, 8, len(toks))
    mask = tags != PAD_ID
    records = nn.gradient_check(lambda: batch_loss(model, tokens, tags, mask, forcing),
                                model.parameters(), 6, rng)
    assert {r["param"] for r in records} == {p.name for p in model.parameters()}
    errors = [nn.relative_error(r["analytic"], r["numeric"], floor=1e-6) for r in records]
    assert max(errors) < 1e-4
