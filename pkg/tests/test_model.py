import hashlib

import numpy as np
import pytest

from baar import tensor as T
from baar.gradcheck import check_gradients
from baar.model import (
    BaarModel,
    CheckpointError,
    ModelConfig,
    checkpoint_extra,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    sequence_representation,
)


def small(**kw):
    base = dict(n_layers=2, d_model=8, n_heads=2, feature_dim=2, dtype="float64", init_std=0.3)
    base.update(kw)
    return BaarModel(ModelConfig(**base))


def test_config_validation():
    with pytest.raises(ValueError, match="even"):
        ModelConfig(n_layers=3)
    with pytest.raises(ValueError, match="n_heads"):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError, match="even"):
        ModelConfig(d_model=12, n_heads=4)
    with pytest.raises(ValueError, match="dtype"):
        ModelConfig(dtype="float16")
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"layers": 2})


@pytest.mark.parametrize("t", range(4, 101))
def test_tokenizer_length_law(t):
    m = small(feature_dim=1)
    assert m.tokenize(np.zeros((1, t, 1))).shape == (1, -(-t // 4), 1)


def test_tokenizer_examples_and_errors():
    m = small(feature_dim=1)
    assert m.tokenize(np.zeros((1, 3000, 1))).shape[1] == 750
    assert m.tokenize(np.zeros((1, 8, 1))).shape[1] == 2
    assert m.tokenize(np.zeros((1, 10, 1))).shape[1] == 3
    with pytest.raises(ValueError, match="4 timesteps"):
        m.tokenize(np.zeros((1, 3, 1)))


def test_embed_adds_special_rows_and_positions():
    m = small()
    seq = m.embed(np.ones((1, 2, 2)))
    assert seq.embeddings.shape == (1, 4, 8)
    np.testing.assert_array_equal(seq.embeddings.data[0, 0], m.params["sos"].data)
    np.testing.assert_array_equal(seq.embeddings.data[0, -1], m.params["eos"].data)
    np.testing.assert_array_equal(seq.positions, [[-1.0, 0.0, 1.0, 2.0]])
    stamped = m.embed(np.ones((1, 3, 2)), timestamps=[2.0, 5.0, 11.0])
    np.testing.assert_array_equal(stamped.positions, [[1.0, 2.0, 5.0, 11.0, 12.0]])
    assert stamped.sos_index == 0 and stamped.eos_index == 4 and stamped.n_tokens == 3


def test_zero_projection_rows_equal_bias():
    m = small()
    m.params["in_proj.weight"].data[:] = 0.0
    m.params["in_proj.bias"].data[:] = np.arange(8.0)
    rows = m.embed(np.random.default_rng(0).normal(size=(1, 5, 2))).embeddings.data[0, 1:-1]
    np.testing.assert_array_equal(rows, np.tile(np.arange(8.0), (5, 1)))


def test_discrete_embedding_lookup():
    m = small(vocab_size=7)
    codes = np.array([[3, 0, 6]])
    rows = m.embed(codes).embeddings.data[0, 1:-1]
    np.testing.assert_array_equal(rows, m.params["embed.weight"].data[[3, 0, 6]])


def test_forward_shapes_and_directions():
    m = small(feature_dim=1)
    out, tokens = m.encode(np.zeros((1, 4, 1)), capture=True)
    assert tokens.shape == (1, 1, 1)
    assert len(out.hidden_per_layer) == 2
    assert out.hidden_per_layer[0].shape == (1, 3, 8)
    assert out.next_token_logits.shape == (1, 3, 1) and out.prev_token_logits.shape == (1, 3, 1)
    assert [layer.direction for layer in m.layers] == ["forward", "backward"]


def test_layer_direction_alternates_in_captured_matrices():
    m = small(n_layers=4)
    out = m(np.random.default_rng(0).normal(size=(2, 24, 2)), capture=True)
    for i, mats in enumerate(out.retention_matrices_per_layer):
        tri = np.tril if i % 2 == 0 else np.triu
        for b in range(2):
            for h in range(2):
                np.testing.assert_array_equal(mats[b, h], tri(mats[b, h]))


def test_forms_agree_end_to_end():
    m = small(n_layers=4)
    x = np.random.default_rng(1).normal(size=(2, 40, 2))
    ref = m(x, form="parallel").prev_token_logits.data
    for form in ("recurrent", "chunkwise"):
        np.testing.assert_allclose(m(x, form=form).prev_token_logits.data, ref, rtol=1e-9, atol=1e-12)


def test_swapping_tokens_changes_both_directions():
    m = small(feature_dim=2, tokenizer=False)
    x = np.random.default_rng(2).normal(size=(1, 6, 2))
    swapped = x.copy()
    swapped[0, [2, 3]] = swapped[0, [3, 2]]
    a, b = m(x), m(swapped)
    assert not np.allclose(a.next_token_logits.data, b.next_token_logits.data)
    assert not np.allclose(a.prev_token_logits.data, b.prev_token_logits.data)


def test_vanishing_decay_without_rotation_isolates_each_slot():
    m = small(tokenizer=False, use_rotary=False, gammas=(1e-30, 1e-30))
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 6, 2))
    base = m(x).prev_token_logits.data
    bumped = x.copy()
    bumped[0, 2] += 1.0
    diff = np.abs(m(bumped).prev_token_logits.data - base)[0, :, 0]
    changed = np.nonzero(diff > 1e-12)[0]
    np.testing.assert_array_equal(changed, [3])  # token 2 sits at slot 3


def test_sequence_representation_variants():
    m = small()
    out = m(np.random.default_rng(4).normal(size=(3, 8, 2)))
    last = out.hidden_per_layer[-1].data
    prev = out.hidden_per_layer[-2].data
    np.testing.assert_array_equal(sequence_representation(out, "sos").data, last[:, 0])
    np.testing.assert_array_equal(sequence_representation(out, "eos").data, last[:, -1])
    np.testing.assert_allclose(sequence_representation(out, "mean").data, last.mean(axis=1))
    both = sequence_representation(out, "sos_eos").data
    assert both.shape == (3, 16)
    np.testing.assert_array_equal(both, np.concatenate([last[:, 0], last[:, -1]], axis=1))
    two = sequence_representation(out, "sos", "last_two").data
    np.testing.assert_allclose(two, 0.5 * (last[:, 0] + prev[:, 0]))
    with pytest.raises(ValueError):
        sequence_representation(out, "max")
    with pytest.raises(ValueError):
        sequence_representation(out, "sos", "first")


def test_deterministic_replay():
    x = np.random.default_rng(5).normal(size=(2, 16, 2))
    a = small(seed=3)(x).prev_token_logits.data
    b = small(seed=3)(x).prev_token_logits.data
    assert a.tobytes() == b.tobytes()


def test_full_model_gradients():
    m = small(n_layers=2, d_model=4, n_heads=1, feature_dim=1, init_std=0.5)
    m.attach_head(2)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 8, 1))
    w_next = rng.normal(size=(2, 4, 1))
    w_prev = rng.normal(size=(2, 4, 1))
    for p in m.params.values():
        p.data += rng.normal(scale=0.1, size=p.shape)

    def loss():
        out = m(x)
        head = m.head_logits(out)
        return T.sum(out.next_token_logits * w_next) + T.sum(out.prev_token_logits * w_prev) + T.sum(head * head)

    errs = check_gradients(loss, m.params)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


def test_head_logits_requires_head():
    m = small()
    with pytest.raises(RuntimeError, match="head"):
        m.head_logits(m(np.zeros((1, 8, 2))))
    with pytest.raises(ValueError):
        m.attach_head(2, repr_mode="max")


def test_checkpoint_round_trip(tmp_path):
    m = small(gammas=(0.9, 0.8))
    m.attach_head(3, repr_mode="sos_eos", repr_layers="last_two")
    path = save_checkpoint(tmp_path / "m.ckpt", m, extra={"note": "x"})
    assert path.read_bytes()[:8] == b"BAARCKPT"
    back = load_checkpoint(path)
    assert back.config == m.config
    assert back.head_config == m.head_config
    for k, v in m.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
    assert checkpoint_extra(path) == {"note": "x"}
    header, arrays = read_checkpoint(path)
    assert sorted(arrays) == sorted(m.params)
    assert header["tensors"][0]["offset"] == 0


def test_checkpoint_bytes_are_deterministic(tmp_path):
    a = save_checkpoint(tmp_path / "a.ckpt", small(seed=9)).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", small(seed=9)).read_bytes()
    assert hashlib.sha256(a).hexdigest() == hashlib.sha256(b).hexdigest()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad)
    good = save_checkpoint(tmp_path / "g.ckpt", small()).read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(good[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(cut)
    future = tmp_path / "future.ckpt"
    future.write_bytes(good[:8] + (99).to_bytes(4, "little") + good[12:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(future)
