import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import hamming_similarity

from eclipse.errors import DimensionMismatch, FailedToConverge, FormatError, LengthMismatch
from eclipse.fixtures import random_mlp, toy_cnn
from eclipse.model import LinearLayer, ModelGraph
from eclipse.obf_conv import base_obfuscate_conv
from eclipse.obf_linear import base_obfuscate_linear
from eclipse.watermark import (
    NoSignature,
    Scheme,
    SecretKey,
    Status,
    VerificationOutcome,
    active_verify,
    crop_zero_frame,
    embed,
    extract,
    key_from_bytes,
    key_to_bytes,
    load_key,
    make_key,
    merge_adjacent,
    random_message,
    save_key,
    similarity,
    verify,
    zero_frame,
)

bits = st.lists(st.integers(0, 1), min_size=1, max_size=64)


def test_similarity_examples():
    assert similarity([1, 0, 1], [1, 0, 1]) == 1.0
    assert similarity([1, 0, 1, 0], [0, 1, 0, 1]) == 0.0
    assert similarity([1, 1, 0, 0], [1, 0, 0, 1]) == 0.5


def test_similarity_all_four_bit_pairs():
    words = list(itertools.product([0, 1], repeat=4))
    for a, b in itertools.product(words, words):
        assert similarity(a, b) == hamming_similarity(a, b)


@given(bits, st.data())
def test_similarity_symmetric_and_reflexive(a, data):
    b = data.draw(st.lists(st.integers(0, 1), min_size=len(a), max_size=len(a)))
    assert similarity(a, a) == 1.0
    assert similarity(a, b) == similarity(b, a)
    assert 0.0 <= similarity(a, b) <= 1.0


def test_similarity_length_checks():
    with pytest.raises(LengthMismatch):
        similarity([1, 0], [1])
    with pytest.raises(LengthMismatch):
        similarity([], [])


@pytest.mark.parametrize("scheme", list(Scheme))
def test_unmarked_model_decodes_at_chance(scheme):
    model = random_mlp(0, (32, 64, 128, 10))
    sims = []
    for seed in range(50):
        key = make_key(model, scheme, 1, 64, seed=seed, n_probes=16)
        sims.append(similarity(random_message(64, seed + 1000), extract(model, key)))
    assert abs(np.mean(sims) - 0.5) <= 0.05


def test_verify_threshold_is_strict():
    model = random_mlp(0, (8, 4, 2))
    key = make_key(model, Scheme.WEIGHT_SELECTION, 0, 4, seed=0)
    bits = extract(model, key)
    half = bits.copy()
    half[:2] ^= 1
    assert verify(model, key, half).status is Status.BELOW_THRESHOLD
    assert verify(model, key, half).confidence == 0.5
    assert verify(model, key, bits).verified
    # 3 of 4 bits: c = 0.75 passes at delta 0.05, fails at delta 0.25 (strict inequality)
    three = bits.copy()
    three[0] ^= 1
    assert verify(model, key, three, delta=0.05).verified
    assert not verify(model, key, three, delta=0.25).verified


@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_verify_monotone_in_delta(d1, d2):
    model = random_mlp(0, (8, 16, 2))
    key = make_key(model, Scheme.WEIGHT_PROJECTION, 0, 32, seed=1)
    msg = random_message(32, 2)
    lo, hi = sorted((d1, d2))
    if verify(model, key, msg, delta=hi).verified:
        assert verify(model, key, msg, delta=lo).verified


@pytest.mark.parametrize("scheme", list(Scheme))
def test_embed_reaches_full_similarity(scheme):
    model = random_mlp(3, (64, 64, 64, 10))
    key = make_key(model, scheme, 1, 64, seed=5)
    msg = random_message(64, 6)
    res = embed(model, key, msg)
    assert res.similarity >= 0.98 and verify(res.model, key, msg).verified
    assert 0 < res.steps_run <= 500
    # only the marked layer changes
    for j, (a, b) in enumerate(zip(model.layers, res.model.layers)):
        if j != 1:
            assert a.weights.tobytes() == b.weights.tobytes()


def test_embed_without_steps_is_chance():
    model = random_mlp(3, (64, 64, 64, 10))
    sims = []
    for seed in range(10):
        key = make_key(model, Scheme.WEIGHT_PROJECTION, 1, 256, seed=seed)
        sims.append(embed(model, key, random_message(256, seed + 50), steps=0, check=False).similarity)
    assert abs(np.mean(sims) - 0.5) <= 0.07


def test_huge_penalty_pins_weights():
    model = random_mlp(3, (64, 64, 64, 10))
    key = make_key(model, Scheme.WEIGHT_PROJECTION, 1, 64, seed=5)
    res = embed(model, key, random_message(64, 6), penalty=1e9, check=False)
    assert res.max_abs_delta <= 1e-6


def test_embed_convergence_and_length_checks():
    model = random_mlp(3, (64, 64, 64, 10))
    key = make_key(model, Scheme.WEIGHT_PROJECTION, 1, 64, seed=5)
    with pytest.raises(LengthMismatch):
        embed(model, key, random_message(63, 0))
    with pytest.raises(FailedToConverge):
        embed(model, key, random_message(64, 6), steps=0)


def test_capacity_checks():
    model = random_mlp(0, (8, 4, 2))
    with pytest.raises(DimensionMismatch):
        make_key(model, Scheme.WEIGHT_PROJECTION, 1, 9, seed=0)  # 8 weights
    with pytest.raises(DimensionMismatch):
        make_key(model, Scheme.ACTIVATION_PROJECTION, 0, 5, seed=0)  # response dim 4
    with pytest.raises(DimensionMismatch):
        make_key(toy_cnn(0, fit=False), Scheme.WEIGHT_PROJECTION, 1, 8, seed=0)  # pool layer


def test_key_round_trip(tmp_path):
    model = toy_cnn(0, fit=False)
    for scheme in Scheme:
        key = make_key(model, scheme, 2, 32, seed=3, n_probes=4)
        msg = random_message(32, 4)
        save_key(key, tmp_path / "k.eck", msg)
        back, back_msg = load_key(tmp_path / "k.eck")
        assert key_to_bytes(back, back_msg) == key_to_bytes(key, msg)
        np.testing.assert_array_equal(back_msg, msg)
        np.testing.assert_array_equal(extract(model, back), extract(model, key))
    no_msg, none = key_from_bytes(key_to_bytes(key))
    assert none is None and no_msg.n_bits == 32
    with pytest.raises(FormatError):
        key_from_bytes(key_to_bytes(key)[:-1])


@pytest.mark.parametrize("scheme", [Scheme.WEIGHT_PROJECTION, Scheme.ACTIVATION_PROJECTION])
def test_base_linear_split_removes_projection_signature(scheme):
    model = random_mlp(0, (64, 128, 512, 64, 10))
    key = make_key(model, scheme, 1, 128, seed=1)
    msg = random_message(128, 2)
    marked = embed(model, key, msg).model
    out = verify(base_obfuscate_linear(marked, 1, seed=3), key, msg)
    assert out.status is Status.NO_SIGNATURE and "dim" in out.reason


def test_base_linear_split_scrambles_selection():
    model = random_mlp(0, (64, 128, 512, 64, 10))
    key = make_key(model, Scheme.WEIGHT_SELECTION, 1, 256, seed=1)
    msg = random_message(256, 2)
    marked = embed(model, key, msg).model
    out = verify(base_obfuscate_linear(marked, 1, seed=3), key, msg)
    assert out.status is Status.BELOW_THRESHOLD and abs(out.confidence - 0.5) <= 0.1


def test_missing_layer_is_no_signature():
    model = random_mlp(0, (8, 4, 2))
    key = make_key(model, Scheme.WEIGHT_PROJECTION, 1, 4, seed=0)
    short = ModelGraph(model.layers[:1], model.input_shape)
    out = verify(short, key, random_message(4, 0))
    assert out.status is Status.NO_SIGNATURE and "does not exist" in out.reason


def test_outcome_json():
    assert VerificationOutcome(Status.VERIFIED, 0.9).to_dict() == {
        "outcome": "Verified", "confidence": 0.9, "reason": None
    }


def test_merge_adjacent_recovers_after_split():
    model = random_mlp(0, (16, 24, 12, 4))
    marked_layer = model.layers[1]
    split = base_obfuscate_linear(model, 1, seed=0)
    merged = merge_adjacent(split, 1)
    np.testing.assert_allclose(merged.layers[1].weights, marked_layer.weights, atol=1e-10)
    np.testing.assert_allclose(merged.layers[1].bias, marked_layer.bias, atol=1e-10)
    assert isinstance(merge_adjacent(model, 2), NoSignature)
    assert isinstance(merge_adjacent(toy_cnn(0, fit=False), 0), NoSignature)


def test_zero_frame_detection():
    k = np.zeros((2, 1, 5, 5))
    k[:, :, 1:4, 2:4] = 1.0
    assert zero_frame(k) == (1, 1, 2, 1)
    assert zero_frame(np.ones((1, 1, 3, 3))) == (0, 0, 0, 0)
    assert zero_frame(np.zeros((1, 1, 3, 3))) == (0, 0, 0, 0)


def test_crop_inverts_base_frame():
    model = toy_cnn(0, fit=False)
    framed = base_obfuscate_conv(model, 2)
    cropped = crop_zero_frame(framed, 2)
    assert cropped.layers[2].kernel.tobytes() == model.layers[2].kernel.tobytes()
    assert cropped.layers[2].padding == model.layers[2].padding
    assert crop_zero_frame(model, 2).reason == "no zero frame detected in the kernel"


def test_active_verify_trace():
    model = random_mlp(0, (64, 128, 512, 64, 10))
    key = make_key(model, Scheme.WEIGHT_PROJECTION, 1, 128, seed=1)
    msg = random_message(128, 2)
    marked = embed(model, key, msg).model
    split = base_obfuscate_linear(marked, 1, seed=3)
    best, trace = active_verify(split, key, msg)
    assert [t["strategy"] for t in trace] == ["reshape_truncate", "merge_adjacent", "crop_zero_frame"]
    assert trace[2]["outcome"] == "NoSignature"
    # merging the two halves of a base split restores the marked matrix exactly
    assert trace[1]["confidence"] == 1.0 and best.verified
    with pytest.raises(ValueError):
        active_verify(split, key, msg, strategies=("guess",))


def test_key_scheme_coerced():
    key = SecretKey("weight_selection", 0, 4, positions=np.array([0, 1]))
    assert key.scheme is Scheme.WEIGHT_SELECTION and key.n_bits == 2
