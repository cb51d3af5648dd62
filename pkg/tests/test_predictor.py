import numpy as np
import pytest
import scipy.stats

from dyadsynth.errors import ContractError, RangeError, ShapeError
from dyadsynth.fusion import FusionConfig, SpeakerEncoder, encode_speaker
from dyadsynth.motiondata import synth_dataset
from dyadsynth.params import ParameterStore
from dyadsynth.predictor import (
    PredictorConfig,
    PredictorModel,
    forward_logits,
    multi_sample_min_l2,
    nucleus_sample,
    nucleus_set,
    predict_dist,
    rollout,
    train_predictor,
)
from dyadsynth.rng import RngPool
from dyadsynth.tensor import Tensor
from dyadsynth.vqvae import VqVaeConfig, VqVaeModel


K = 200


def make_stack(seed=2, k=K):
    store = ParameterStore(seed)
    pool = RngPool(seed)
    fcfg = FusionConfig(motion_dim=6, audio_dim=5, hidden=16, heads=4, layers=1,
                        conv_stages=3, context_len=40, target_tokens=4)
    enc = SpeakerEncoder(store, "spk", fcfg, pool.stream("init/spk"))
    pcfg = PredictorConfig(codebook_size=k, context_tokens=4, speaker_tokens=4,
                           d_k=16, hidden=20, heads=4, layers=1)
    pred = PredictorModel(store, "pred", pcfg, pool.stream("init/pred"))
    vq = VqVaeModel(VqVaeConfig(frame_dim=6, window=8, codebook_size=k, code_dim=8,
                                hidden=16, heads=4, layers=1, train_len=32), seed).freeze()
    return pred, enc, vq, store


def speaker_embedding(enc, rng, frames=40):
    motion = rng.standard_normal((frames, 6)).astype(np.float32)
    audio = rng.standard_normal((frames * 4, 5)).astype(np.float32)
    return encode_speaker(enc, motion, audio)


# -- predict_dist ------------------------------------------------------------------


def test_dist_is_probability_vector(rng):
    pred, enc, _, _ = make_stack()
    sp = speaker_embedding(enc, rng)
    dist = predict_dist(pred, sp, [0, 1, 2, 3], [True] * 4)
    assert dist.shape == (K,)
    assert abs(dist.sum() - 1.0) < 1e-6
    assert (dist >= 0).all()


def test_dist_deterministic_fully_masked(rng):
    pred, enc, _, _ = make_stack()
    sp = speaker_embedding(enc, rng)
    a = predict_dist(pred, sp, [5, 6, 7, 8], [False] * 4)
    b = predict_dist(pred, sp, [5, 6, 7, 8], [False] * 4)
    assert np.array_equal(a, b)


def test_masked_token_changes_nothing_bitwise(rng):
    pred, enc, _, _ = make_stack()
    sp = speaker_embedding(enc, rng)
    mask = [True, False, True, False]
    base = predict_dist(pred, sp, [1, 2, 3, 4], mask)
    for val in (0, 9, K - 1):
        alt = predict_dist(pred, sp, [1, val, 3, val], mask)
        assert np.array_equal(base, alt)


def test_visible_token_changes_distribution(rng):
    pred, enc, _, _ = make_stack()
    sp = speaker_embedding(enc, rng)
    a = predict_dist(pred, sp, [1, 2, 3, 4], [True] * 4)
    b = predict_dist(pred, sp, [1, 2, 3, 5], [True] * 4)
    assert not np.array_equal(a, b)


def test_aux_positions(rng):
    pred, enc, _, _ = make_stack()
    sp = speaker_embedding(enc, rng)
    dist, aux = predict_dist(pred, sp, [0, 0, 0, 0], [True] * 4, with_aux=True)
    assert aux.shape == (3, K)
    assert np.abs(aux.sum(axis=1) - 1.0).max() < 1e-6


def test_token_out_of_range(rng):
    pred, enc, _, _ = make_stack()
    sp = speaker_embedding(enc, rng)
    with pytest.raises(RangeError):
        predict_dist(pred, sp, [0, 0, 0, K], [True] * 4)
    with pytest.raises(ShapeError):
        predict_dist(pred, sp, [0, 0, 0], [True] * 3)
    with pytest.raises(ShapeError):
        predict_dist(pred, sp, [0, 0, 0, 0], [True] * 3)


# -- nucleus sampling ----------------------------------------------------------------


def test_nucleus_one_hot_always_wins():
    dist = np.zeros(10)
    dist[4] = 1.0
    for p in (0.01, 0.4, 1.0):
        rng = np.random.default_rng(0)
        assert all(nucleus_sample(dist, p, rng) == 4 for _ in range(50))


def test_nucleus_truncation_and_ratio():
    dist = np.array([0.5, 0.3, 0.2])
    assert list(nucleus_set(dist, 0.6)) == [0, 1]
    rng = np.random.default_rng(1)
    draws = np.array([nucleus_sample(dist, 0.6, rng) for _ in range(20000)])
    assert set(draws) <= {0, 1}
    ratio = (draws == 0).sum() / (draws == 1).sum()
    assert abs(ratio - 5 / 3) < 0.15


def test_nucleus_full_distribution_chi_square():
    rng_src = np.random.default_rng(2)
    dist = rng_src.dirichlet(np.ones(20))
    rng = np.random.default_rng(3)
    draws = np.array([nucleus_sample(dist, 1.0, rng) for _ in range(20000)])
    counts = np.bincount(draws, minlength=20)
    res = scipy.stats.chisquare(counts, f_exp=dist * 20000)
    assert res.pvalue > 0.01


def test_nucleus_ties_break_by_index():
    dist = np.array([0.25, 0.25, 0.25, 0.25])
    assert list(nucleus_set(dist, 0.5)) == [0, 1]


def test_nucleus_bad_p():
    with pytest.raises(ContractError):
        nucleus_sample(np.array([1.0]), 0.0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        nucleus_sample(np.array([1.0]), 1.5, np.random.default_rng(0))


def test_nucleus_membership_property(rng):
    for _ in range(50):
        dist = rng.dirichlet(np.ones(12))
        p = float(rng.uniform(0.05, 1.0))
        members = set(nucleus_set(dist, p))
        draw_rng = np.random.default_rng(int(rng.integers(1 << 31)))
        for _ in range(20):
            assert nucleus_sample(dist, p, draw_rng) in members


# -- rollout ----------------------------------------------------------------------


def test_rollout_length_and_determinism(rng):
    pred, enc, vq, _ = make_stack()
    motion = rng.standard_normal((72, 6)).astype(np.float32)
    audio = rng.standard_normal((288, 5)).astype(np.float32)
    out, toks = rollout(pred, enc, vq, motion, audio, steps=8, p=0.9,
                        rng=np.random.default_rng(7))
    assert out.shape == (64, 6)
    assert toks.shape == (8,)
    out2, toks2 = rollout(pred, enc, vq, motion, audio, steps=8, p=0.9,
                          rng=np.random.default_rng(7))
    assert np.array_equal(out, out2) and np.array_equal(toks, toks2)


def test_rollout_seed_variation(rng):
    pred, enc, vq, _ = make_stack()
    motion = rng.standard_normal((72, 6)).astype(np.float32)
    audio = rng.standard_normal((288, 5)).astype(np.float32)
    _, t1 = rollout(pred, enc, vq, motion, audio, 8, 0.95, np.random.default_rng(1))
    _, t2 = rollout(pred, enc, vq, motion, audio, 8, 0.95, np.random.default_rng(2))
    assert not np.array_equal(t1, t2)


def test_rollout_insufficient_speaker(rng):
    pred, enc, vq, _ = make_stack()
    motion = rng.standard_normal((60, 6)).astype(np.float32)
    audio = rng.standard_normal((240, 5)).astype(np.float32)
    with pytest.raises(RangeError):
        rollout(pred, enc, vq, motion, audio, steps=8, p=0.9,
                rng=np.random.default_rng(0))


def test_multi_sample_curve_monotone(rng):
    pred, enc, vq, _ = make_stack()
    motion = rng.standard_normal((72, 6)).astype(np.float32)
    audio = rng.standard_normal((288, 5)).astype(np.float32)
    gt = rng.standard_normal((64, 6)).astype(np.float32)
    curve = multi_sample_min_l2(pred, enc, vq, motion, audio, gt, 6, 0.9,
                                np.random.default_rng(4))
    assert len(curve) == 6
    assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))
    single = multi_sample_min_l2(pred, enc, vq, motion, audio, gt, 1, 0.9,
                                 np.random.default_rng(4))
    assert single[0] == curve[0]
    with pytest.raises(ContractError):
        multi_sample_min_l2(pred, enc, vq, motion, audio, gt, 0, 0.9,
                            np.random.default_rng(4))


# -- training ---------------------------------------------------------------------


def build_training_windows(seed=1, n_dyads=3, length=160, k=24):
    samples = synth_dataset(seed, n_dyads, length, 1, d_m=3, d_a=5, noise=0.0, lag=14)
    li, sp, au = [], [], []
    for s in samples:
        lm = s.listener_motion.matrix()
        sm = s.speaker_motion.matrix()
        af = s.speaker_audio.features
        for lo in range(0, length - 64 + 1, 8):
            li.append(lm[lo:lo + 64])
            sp.append(sm[lo:lo + 40])
            au.append(af[lo * 4:(lo + 40) * 4])
    return np.stack(li), np.stack(sp), np.stack(au)


def test_train_predictor_requires_frozen_vqvae():
    pred, enc, vq, store = make_stack(k=24)
    vq.frozen = False
    li, sp, au = build_training_windows()
    with pytest.raises(ContractError):
        train_predictor(pred, enc, vq, store, li, sp, au, epochs=1)


def test_train_predictor_initial_ce_and_report():
    pred, enc, vq, store = make_stack(seed=5, k=24)
    li, sp, au = build_training_windows()
    report = train_predictor(pred, enc, vq, store, li, sp, au, epochs=2,
                             batch_size=16, base_lr=0.01, warmup=100,
                             rng_pool=RngPool(3))
    assert abs(report.initial_ce - np.log(24)) < 0.3
    assert len(report.loss) == 2
    assert report.steps == 2 * int(np.ceil(len(li) / 16))
