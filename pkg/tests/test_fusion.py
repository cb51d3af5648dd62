import numpy as np
import pytest

from dyadsynth.errors import ShapeError
from dyadsynth.fusion import FusionConfig, SpeakerEncoder, cross_attend, encode_speaker, pool_audio
from dyadsynth.nn import MultiHeadAttention
from dyadsynth.params import ParameterStore
from dyadsynth.rng import RngPool
from dyadsynth.tensor import Tensor, backward, tsum


def small_cfg(**kw):
    base = dict(motion_dim=6, audio_dim=5, hidden=16, heads=4, layers=2,
                conv_stages=3, context_len=48, target_tokens=4)
    base.update(kw)
    return FusionConfig(**base)


def make_encoder(cfg=None, seed=3):
    store = ParameterStore(seed)
    enc = SpeakerEncoder(store, "spk", cfg or small_cfg(), RngPool(seed).stream("init"))
    return enc, store


# -- pool_audio -----------------------------------------------------------------


def test_pool_audio_constant():
    audio = np.full((128, 5), 2.5, dtype=np.float32)
    out = pool_audio(audio, 32)
    assert out.shape == (32, 5)
    assert np.allclose(out, 2.5)


def test_pool_audio_blockwise_max_oracle(rng):
    audio = rng.standard_normal((128, 5))
    out = pool_audio(audio, 32)
    for t in range(32):
        assert np.allclose(out[t], audio[4 * t:4 * t + 4].max(axis=0))


def test_pool_audio_spike_lands_in_its_block():
    audio = np.zeros((32, 2)) - 1.0
    audio[5, 0] = 7.0
    out = pool_audio(audio, 8)
    assert out[1, 0] == 7.0
    assert (out[[0, 2, 3, 4, 5, 6, 7], 0] == -1.0).all()


def test_pool_audio_padding_tolerance():
    out = pool_audio(np.ones((126, 3)), 32)  # 2 short of 128: zero-padded
    assert out.shape == (32, 3)
    with pytest.raises(ShapeError):
        pool_audio(np.ones((100, 3)), 32)


# -- attention semantics -----------------------------------------------------------


def make_identity_attention(dim=4):
    store = ParameterStore(0)
    rng = RngPool(0).stream("init")
    mha = MultiHeadAttention(store, "attn", dim, 1, rng)
    mha.wq.w.data[:] = 0.0
    mha.wk.w.data[:] = 0.0
    mha.wv.w.data[:] = np.eye(dim, dtype=np.float32)
    mha.wo.w.data[:] = np.eye(dim, dtype=np.float32)
    return mha


def test_zero_logits_give_uniform_average(rng):
    mha = make_identity_attention()
    q = Tensor(rng.standard_normal((1, 3, 4)).astype(np.float32))
    kv = Tensor(rng.standard_normal((1, 5, 4)).astype(np.float32))
    out = mha(q, kv).data
    expected = kv.data[0].mean(axis=0)
    assert np.abs(out - expected).max() < 1e-6
    rows = mha.last_attention.sum(axis=-1)
    assert np.abs(rows - 1.0).max() < 1e-6


def test_one_hot_attention_selects_value_row(rng):
    mha = make_identity_attention()
    mha.wq.w.data[:] = np.eye(4, dtype=np.float32)
    mha.wk.w.data[:] = np.eye(4, dtype=np.float32)
    kv = np.eye(4, dtype=np.float32)[None] * 1.0  # 4 one-hot key rows
    q = np.zeros((1, 1, 4), dtype=np.float32)
    q[0, 0, 2] = 100.0  # huge logit on key 2
    out = mha(Tensor(q), Tensor(kv)).data
    assert np.abs(out[0, 0] - kv[0, 2]).max() < 1e-4


def test_attention_rows_sum_to_one(rng):
    enc, _ = make_encoder()
    motion = rng.standard_normal((1, 40, 6)).astype(np.float32)
    audio = rng.standard_normal((1, 40, 5)).astype(np.float32)
    cross_attend(enc, motion, audio)
    for blk in enc.blocks:
        rows = blk.attn.last_attention.sum(axis=-1)
        assert np.abs(rows - 1.0).max() < 1e-6


# -- encode_speaker ------------------------------------------------------------------


def test_encode_speaker_paper_shape(rng):
    enc, _ = make_encoder()
    motion = rng.standard_normal((32, 6)).astype(np.float32)
    audio = rng.standard_normal((128, 5)).astype(np.float32)
    assert encode_speaker(enc, motion, audio).shape == (4, 16)


def test_output_len_invariant_across_input_lengths(rng):
    enc, _ = make_encoder()
    for frames in (32, 40, 48):
        motion = rng.standard_normal((frames, 6)).astype(np.float32)
        audio = rng.standard_normal((frames * 4, 5)).astype(np.float32)
        assert encode_speaker(enc, motion, audio).shape == (4, 16)


def test_extra_summary_step_flag(rng):
    enc, _ = make_encoder(small_cfg(extra_summary_step=True))
    motion = rng.standard_normal((40, 6)).astype(np.float32)
    audio = rng.standard_normal((160, 5)).astype(np.float32)
    assert encode_speaker(enc, motion, audio).shape == (5, 16)


def test_audio_not_ignored(rng):
    enc, _ = make_encoder()
    motion = rng.standard_normal((40, 6)).astype(np.float32)
    audio = rng.standard_normal((160, 5)).astype(np.float32)
    base = encode_speaker(enc, motion, audio).data
    perm = audio[RngPool(1).stream("perm").permutation(160)]
    assert np.abs(encode_speaker(enc, motion, perm).data - base).max() > 1e-6


def test_motion_not_ignored(rng):
    enc, _ = make_encoder()
    motion = rng.standard_normal((40, 6)).astype(np.float32)
    audio = rng.standard_normal((160, 5)).astype(np.float32)
    base = encode_speaker(enc, motion, audio).data
    zeroed = encode_speaker(enc, np.zeros_like(motion), audio).data
    assert np.abs(zeroed - base).max() > 1e-6


def test_no_dead_modality_gradients(rng):
    """Randomly initialized encoder has non-zero input gradients for both streams."""
    enc, store = make_encoder()
    motion = Tensor(rng.standard_normal((1, 40, 6)).astype(np.float32), requires_grad=True)
    audio_pooled = Tensor(rng.standard_normal((1, 40, 5)).astype(np.float32),
                          requires_grad=True)
    out = cross_attend(enc, motion, audio_pooled)
    backward(tsum(out * out))
    assert np.abs(motion.grad).max() > 0
    assert np.abs(audio_pooled.grad).max() > 0


def test_cross_attend_length_mismatch(rng):
    enc, _ = make_encoder()
    with pytest.raises(ShapeError):
        cross_attend(enc, rng.standard_normal((1, 40, 6)).astype(np.float32),
                     rng.standard_normal((1, 32, 5)).astype(np.float32))


def test_ablation_modes_shapes(rng):
    motion = rng.standard_normal((40, 6)).astype(np.float32)
    audio = rng.standard_normal((160, 5)).astype(np.float32)
    for mode in ("concat", "motion", "audio"):
        enc, _ = make_encoder(small_cfg(mode=mode, layers=1), seed=4)
        assert encode_speaker(enc, motion, audio).shape == (4, 16)
