import numpy as np
import pytest
from hypothesis import given, seed
from hypothesis import strategies as st

from oracles import gru_step_oracle
from webvse.encoders import (
    GRU_NAMES,
    MAGIC,
    UNK,
    GruCellParams,
    embed_sentences,
    encode_image,
    encode_sentence,
    encode_tags,
    gru_step,
    init_model,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    sentence_state,
)
from webvse.errors import EmptyInputError, FormatError, ShapeError


def zero_gru(dh=2, dx=2):
    z = lambda *shape: np.zeros(shape)
    return GruCellParams(z(dh, dx), z(dh, dx), z(dh, dx), z(dh, dh), z(dh, dh), z(dh, dh), z(dh), z(dh), z(dh))


def random_gru(r, dh=2, dx=2):
    m = lambda *shape: r.uniform(-1, 1, shape)
    return GruCellParams(m(dh, dx), m(dh, dx), m(dh, dx), m(dh, dh), m(dh, dh), m(dh, dh), m(dh), m(dh), m(dh))


def small_model(seed_=0, D=4, hidden=3, word_dim=2, image_dim=2, tag_dim=2):
    return init_model(image_dim, tag_dim, ["a", "b", "c"], D, hidden, word_dim, seed=seed_)


def test_encode_image_examples():
    m = small_model(D=2)
    m.params.values["W_image"][...] = np.eye(2)
    assert encode_image(m, [1, 2]).tolist() == [1, 2]
    m.params.values["W_image"][...] = [[1, 1], [1, -1]]
    assert encode_image(m, [2, 3]).tolist() == [5, -1]
    m.params.values["W_image"][...] = 0
    assert not encode_image(m, [2, 3]).any()
    with pytest.raises(ShapeError):
        encode_image(m, [1, 2, 3])


def test_gru_step_zero_params():
    assert not gru_step(zero_gru(), np.zeros(2), np.zeros(2)).any()


def test_gru_step_saturated_update_gate():
    p = zero_gru()
    p.b_z[...] = 50.0
    h = np.array([0.3, -0.7])
    assert np.allclose(gru_step(p, h, np.zeros(2)), 0.0, atol=1e-20)


@seed(2023)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4))
def test_gru_step_matches_scalar_oracle(s, dh, dx):
    r = np.random.default_rng(s)
    p = random_gru(r, dh, dx)
    h, x = r.uniform(-1, 1, dh), r.standard_normal(dx)
    assert np.allclose(gru_step(p, h, x), gru_step_oracle(p, h, x), rtol=0, atol=1e-12)


def test_gru_step_shape_error():
    with pytest.raises(ShapeError):
        gru_step(zero_gru(2, 3), np.zeros(2), np.zeros(2))


@seed(2023)
@given(st.integers(0, 2**32 - 1))
def test_hidden_state_bounded_after_first_step(s):
    r = np.random.default_rng(s)
    p = random_gru(r, 3, 2)
    h = gru_step(p, np.zeros(3), 5 * r.standard_normal(2))
    assert np.all(np.abs(h) < 1)


def test_encode_sentence_zero_gru():
    m = small_model()
    for n in GRU_NAMES:
        m.params.values[n][...] = 0
    assert not encode_sentence(m, ["a"]).any()


def test_closed_update_gate_keeps_initial_state():
    m = small_model(seed_=3)
    m.params.values["gru.b_z"][...] = -50.0
    assert np.allclose(sentence_state(m, ["b", "b", "b"]), 0.0, atol=1e-20)


def test_encode_sentence_matches_iterated_steps():
    m = small_model(seed_=4)
    table = m.params["word_table"]
    h = np.zeros(m.hidden_dim)
    for tok in ["c", "a", "b"]:
        h = gru_step_oracle(m.gru, h, table[m.token_index[tok]])
    assert np.allclose(encode_sentence(m, ["c", "a", "b"]), m.params["W_sentence"] @ h, rtol=0, atol=1e-12)


def test_empty_inputs_rejected():
    m = small_model()
    with pytest.raises(EmptyInputError):
        encode_sentence(m, [])
    with pytest.raises(EmptyInputError):
        encode_tags(m, [])


@seed(2023)
@given(st.integers(0, 2**31 - 1))
def test_sentence_depends_on_order(s):
    m = small_model(seed_=s)
    seq = ["a", "b", "c"]
    assert not np.allclose(sentence_state(m, seq), sentence_state(m, seq[::-1]), rtol=0, atol=1e-9)


def test_unknown_tokens_share_the_unk_row():
    m = small_model(seed_=1)
    assert m.vocab[0] == UNK
    assert np.array_equal(encode_sentence(m, ["zebra", "a"]), encode_sentence(m, ["yak", "a"]))
    # length is preserved rather than dropping the unknown token
    assert not np.array_equal(encode_sentence(m, ["zebra", "a"]), encode_sentence(m, ["a"]))


def test_batched_sentences_match_single_encoder():
    m = small_model(seed_=2)
    batch = [["a"], ["b", "c", "a"], ["c", "zebra"]]
    single = np.array([encode_sentence(m, s) for s in batch])
    assert np.allclose(embed_sentences(m, batch), single, rtol=0, atol=1e-12)


def test_encode_tags_examples():
    m = small_model(D=2)
    m.params.values["W_tag"][...] = np.eye(2)
    assert encode_tags(m, [[3.0, 4.0]]).tolist() == [3.0, 4.0]
    assert encode_tags(m, [[1.0, 0.0], [0.0, 1.0]]).tolist() == [0.5, 0.5]


@seed(2023)
@given(st.integers(0, 2**32 - 1))
def test_encode_tags_mean_oracle(s):
    r = np.random.default_rng(s)
    m = small_model(D=2, tag_dim=3)
    m.params.values["W_tag"][...] = [[1, 0, 0], [0, 1, 0]]
    vecs = r.standard_normal((3, 3))
    expected = [(vecs[0][c] + vecs[1][c] + vecs[2][c]) / 3 for c in range(2)]
    assert np.allclose(encode_tags(m, vecs), expected, rtol=0, atol=1e-12)


@seed(2023)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_encode_tags_permutation_invariant(s, n):
    r = np.random.default_rng(s)
    m = small_model(seed_=s % 1000)
    vecs = [q for q in np.round(r.standard_normal((n, 2)), 3)]
    perm = r.permutation(n)
    assert np.allclose(encode_tags(m, vecs), encode_tags(m, [vecs[k] for k in perm]), rtol=0, atol=1e-15)


@seed(2023)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_image_and_tag_encoders_linear(s, alpha, beta):
    r = np.random.default_rng(s)
    m = small_model(seed_=s % 1000)
    u, v = r.standard_normal(2), r.standard_normal(2)
    for enc in (encode_image, lambda mm, f: encode_tags(mm, [f])):
        assert np.allclose(enc(m, alpha * u + beta * v), alpha * enc(m, u) + beta * enc(m, v), atol=1e-12)


def test_init_uses_pretrained_word_vectors():
    wv = {"b": np.array([7.0, 8.0])}
    m = init_model(2, 2, ["a", "b"], 3, 3, 2, seed=0, word_vectors=wv)
    assert m.params["word_table"][m.token_index["b"]].tolist() == [7.0, 8.0]
    assert not m.params["gru.b_z"].any()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = small_model(seed_=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.vocab == m.vocab
    assert back.params.equal(m.params) and m.params.equal(back.params)
    header = read_checkpoint_header(path)
    assert (header["D"], header["D_h"], header["V"], header["word_dim"]) == (4, 3, 2, 2)
    assert header["normalized"] is False
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    save_checkpoint(small_model(), good)
    bad.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    assert good.read_bytes().startswith(MAGIC)
