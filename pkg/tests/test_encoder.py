import dataclasses
import struct

import numpy as np
import pytest

from recobert.encoder import (
    BadMagic,
    CHECKPOINT_MAGIC,
    CorruptTensor,
    EmptySpan,
    EncodedBatch,
    EncoderConfig,
    InvalidConfig,
    Parameters,
    ShapeMismatch,
    VersionUnsupported,
    VocabMismatch,
    checkpoint_load,
    checkpoint_save,
    forward,
    gelu,
    gelu_grad,
    init_model,
    pool_features,
    stack_batch,
    tensor_shapes,
    zero_grads,
)
from recobert.tokenizer import InputSequence, encode_pair

SMALL = EncoderConfig(vocab_size=50, max_len=16, hidden=16, layers=2, heads=2, ffn_dim=32)


def small_batch(tiny_vocab, config=SMALL, n=3):
    seqs = [
        encode_pair([f"w{k}", f"w{k + 1}"], [f"w{k + 2}", f"w{k + 3}", f"w{k + 4}"],
                    tiny_vocab, config.max_len)
        for k in range(1, 1 + n)
    ]
    return seqs


class TestConfig:
    def test_head_dim(self):
        assert SMALL.head_dim == 8

    @pytest.mark.parametrize("overrides", [
        {"vocab_size": 5},
        {"max_len": 3},
        {"hidden": 0},
        {"heads": 0},
        {"hidden": 16, "heads": 3},
        {"ffn_dim": 8},
        {"dropout": 1.0},
        {"dropout": -0.1},
        {"layer_norm_eps": 0.0},
    ])
    def test_invalid_configs(self, overrides):
        with pytest.raises(InvalidConfig):
            dataclasses.replace(SMALL, **overrides).validate()

    def test_valid_config_passes(self):
        SMALL.validate()


class TestTensorShapes:
    def test_shapes_and_order(self):
        shapes = tensor_shapes(SMALL)
        names = list(shapes)
        assert names[0] == "tok_emb" and shapes["tok_emb"] == (50, 16)
        assert names[1] == "pos_emb" and shapes["pos_emb"] == (16, 16)
        assert "seg_emb" in shapes and shapes["seg_emb"] == (2, 16)
        assert shapes["layer0.ffn_w1"] == (16, 32)
        assert shapes["layer1.ffn_w2"] == (32, 16)
        assert names[-1] == "mlm_bias" and shapes["mlm_bias"] == (50,)
        assert "tdm_proj_t" not in shapes

    def test_optional_tensors(self):
        no_seg = dataclasses.replace(SMALL, use_segments=False)
        assert "seg_emb" not in tensor_shapes(no_seg)
        proj = dataclasses.replace(SMALL, tdm_projection=True)
        shapes = tensor_shapes(proj)
        assert shapes["tdm_proj_t"] == (16, 16)
        assert shapes["tdm_proj_d"] == (16, 16)

    def test_layer_count_scales(self):
        base = len(tensor_shapes(SMALL))
        plus = len(tensor_shapes(dataclasses.replace(SMALL, layers=3)))
        assert plus - base == 16  # tensors per encoder layer


class TestInit:
    def test_deterministic_and_seed_sensitive(self):
        a = init_model(SMALL, seed=3)
        b = init_model(SMALL, seed=3)
        c = init_model(SMALL, seed=4)
        assert a.allclose(b)
        assert not a.allclose(c)

    def test_gains_ones_biases_zeros(self):
        params = init_model(SMALL, seed=0)
        assert np.all(params["emb_ln_g"] == 1.0)
        assert np.all(params["layer1.attn_ln_g"] == 1.0)
        assert np.all(params["layer0.ffn_b2"] == 0.0)
        assert np.all(params["mlm_bias"] == 0.0)
        assert np.all(params["layer0.attn_bq"] == 0.0)

    def test_truncated_normal_statistics(self):
        config = EncoderConfig(vocab_size=3000, max_len=8, hidden=64,
                               layers=0, heads=1, ffn_dim=64)
        w = init_model(config, seed=11)["tok_emb"].astype(np.float64)
        # normal(0, 0.02) truncated at 2 sigma: bounded by 0.04, true std 0.0175922
        assert np.abs(w).max() <= 0.04 + 1e-9
        assert w.std() == pytest.approx(0.0175922, abs=5e-4)
        assert w.mean() == pytest.approx(0.0, abs=2e-4)

    def test_dtype(self):
        assert init_model(SMALL, seed=0).dtype == np.float32
        assert init_model(SMALL, seed=0, dtype=np.float64).dtype == np.float64

    def test_zero_grads_shapes(self):
        params = init_model(SMALL, seed=0)
        grads = zero_grads(params)
        assert grads.keys() == params.tensors.keys()
        for name, arr in grads.items():
            assert arr.shape == params[name].shape
            assert not arr.any()


class TestParametersContainer:
    def test_copy_is_deep(self):
        params = init_model(SMALL, seed=0)
        clone = params.copy()
        clone.tensors["tok_emb"][0, 0] += 1.0
        assert params["tok_emb"][0, 0] != clone.tensors["tok_emb"][0, 0]

    def test_astype(self):
        params = init_model(SMALL, seed=0).astype(np.float64)
        assert params.dtype == np.float64

    def test_allclose_detects_difference(self):
        a = init_model(SMALL, seed=0)
        b = a.copy()
        assert a.allclose(b)
        b.tensors["mlm_bias"][3] = 0.5
        assert not a.allclose(b)


class TestStackBatch:
    def test_shapes_and_content_mask(self, tiny_vocab):
        seqs = small_batch(tiny_vocab)
        batch = stack_batch(seqs, SMALL)
        assert batch.ids.shape == (3, 16)
        assert batch.segments.shape == (3, 16)
        for i, seq in enumerate(seqs):
            pad_start = 16 - seq.pad_len
            assert batch.content[i, :pad_start].all()
            assert not batch.content[i, pad_start:].any()

    def test_wrong_length_rejected(self, tiny_vocab):
        seq = encode_pair(["w1"], ["w2"], tiny_vocab, max_len=8)
        with pytest.raises(ShapeMismatch):
            stack_batch([seq], SMALL)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stack_batch([], SMALL)


class TestGelu:
    def test_point_values(self):
        assert gelu(np.array([0.0]))[0] == 0.0
        assert gelu(np.array([1.0]))[0] == pytest.approx(0.8413447, abs=1e-6)
        assert gelu(np.array([3.0]))[0] == pytest.approx(2.9959505, abs=1e-6)
        assert gelu(np.array([-3.0]))[0] == pytest.approx(-0.0040495, abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        x = np.linspace(-4.0, 4.0, 41)
        step = 1e-6
        numeric = (gelu(x + step) - gelu(x - step)) / (2 * step)
        assert np.allclose(gelu_grad(x), numeric, atol=1e-7)


class TestForward:
    def test_shape_and_determinism(self, tiny_vocab):
        params = init_model(SMALL, seed=0)
        seqs = small_batch(tiny_vocab)
        h1 = forward(params, seqs)
        h2 = forward(params, seqs)
        assert h1.shape == (3, 16, 16)
        assert np.array_equal(h1, h2)
        assert np.isfinite(h1).all()

    def test_padding_ids_cannot_leak_into_content(self, tiny_vocab):
        params = init_model(SMALL, seed=1)
        seqs = small_batch(tiny_vocab)
        batch = stack_batch(seqs, SMALL)
        mutated_ids = batch.ids.copy()
        mutated_ids[~batch.content] = 7  # arbitrary non-PAD token id
        mutated = EncodedBatch(ids=mutated_ids, segments=batch.segments,
                               content=batch.content, seqs=batch.seqs)
        h_ref = forward(params, batch)
        h_mut = forward(params, mutated)
        assert np.array_equal(h_ref[batch.content], h_mut[batch.content])

    def test_batch_composition_independence(self, tiny_vocab):
        params = init_model(SMALL, seed=2)
        seqs = small_batch(tiny_vocab, n=4)
        together = forward(params, seqs)
        for i, seq in enumerate(seqs):
            alone = forward(params, [seq])
            assert np.allclose(together[i], alone[0], atol=1e-5)

    def test_dropout_perturbs_only_in_train_mode(self, tiny_vocab):
        config = dataclasses.replace(SMALL, dropout=0.3)
        params = init_model(config, seed=0)
        seqs = small_batch(tiny_vocab, config)
        eval_a = forward(params, seqs, train_mode=False)
        eval_b = forward(params, seqs, train_mode=False)
        assert np.array_equal(eval_a, eval_b)
        train_a = forward(params, seqs, train_mode=True, rng=np.random.default_rng(0))
        train_b = forward(params, seqs, train_mode=True, rng=np.random.default_rng(1))
        assert not np.array_equal(train_a, train_b)
        assert not np.array_equal(train_a, eval_a)

    def test_cache_request(self, tiny_vocab):
        params = init_model(SMALL, seed=0)
        seqs = small_batch(tiny_vocab)
        hidden, cache = forward(params, seqs, want_cache=True)
        plain = forward(params, seqs)
        assert np.array_equal(hidden, plain)
        assert cache is not None


class TestPooling:
    def test_mean_over_spans(self):
        states = np.arange(24, dtype=np.float64).reshape(6, 4)
        seq = InputSequence(ids=(2, 9, 9, 3, 9, 0), segments=(0, 0, 0, 0, 1, 0),
                            title_span=(1, 3), desc_span=(4, 5), pad_len=1)
        emb = pool_features(states, seq)
        assert np.array_equal(emb.f_t, states[1:3].mean(axis=0))
        assert np.array_equal(emb.f_d, states[4])

    def test_empty_span_rejected(self):
        states = np.zeros((6, 4))
        seq = InputSequence(ids=(2, 3, 9, 9, 9, 0), segments=(0,) * 6,
                            title_span=(1, 1), desc_span=(2, 5), pad_len=1)
        with pytest.raises(EmptySpan):
            pool_features(states, seq)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        params = init_model(SMALL, seed=5)
        path = tmp_path / "model.rcbt"
        checkpoint_save(params, vocab_hash=0xDEADBEEF, path=path)
        loaded, config, vocab_hash = checkpoint_load(path)
        assert config == SMALL
        assert vocab_hash == 0xDEADBEEF
        assert loaded.tensors.keys() == params.tensors.keys()
        for name in params.tensors:
            assert np.array_equal(loaded[name], params[name])
        assert loaded.dtype == np.float32

    def test_identical_params_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a.rcbt", tmp_path / "b.rcbt"
        checkpoint_save(init_model(SMALL, seed=5), 1, a)
        checkpoint_save(init_model(SMALL, seed=5), 1, b)
        assert a.read_bytes() == b.read_bytes()

    def test_vocab_hash_verification(self, tmp_path):
        path = tmp_path / "model.rcbt"
        checkpoint_save(init_model(SMALL, seed=0), vocab_hash=111, path=path)
        checkpoint_load(path, expected_vocab_hash=111)
        with pytest.raises(VocabMismatch):
            checkpoint_load(path, expected_vocab_hash=222)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.rcbt"
        checkpoint_save(init_model(SMALL, seed=0), 1, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagic):
            checkpoint_load(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "model.rcbt"
        checkpoint_save(init_model(SMALL, seed=0), 1, path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionUnsupported):
            checkpoint_load(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "model.rcbt"
        checkpoint_save(init_model(SMALL, seed=0), 1, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(CorruptTensor):
            checkpoint_load(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "model.rcbt"
        checkpoint_save(init_model(SMALL, seed=0), 1, path)
        path.write_bytes(path.read_bytes() + b"ZZ")
        with pytest.raises(CorruptTensor):
            checkpoint_load(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"hi")
        with pytest.raises(BadMagic):
            checkpoint_load(path)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"RCBT"

    def test_optional_tensors_round_trip(self, tmp_path):
        config = dataclasses.replace(SMALL, tdm_projection=True, use_segments=False)
        params = init_model(config, seed=9)
        path = tmp_path / "proj.rcbt"
        checkpoint_save(params, 7, path)
        loaded, loaded_config, _ = checkpoint_load(path)
        assert loaded_config == config
        assert "tdm_proj_t" in loaded.tensors
        assert "seg_emb" not in loaded.tensors
