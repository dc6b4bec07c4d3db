import itertools

import numpy as np
import pytest

from rvqsynth.armodel import (ARConfig, ARModel, held_out_cross_entropy,
                              prepare_sequences, soft_target_distributions,
                              stochastic_grid, train_ar)
from rvqsynth.codec import CodecConfig, train_codec
from rvqsynth.tensor import ShapeError

TINY_AR = ARConfig(code_dim=4, codebook_size=3, depth=2, width=8,
                   audio_dim=4, motion_dim=12, heads=2, depth_layers=1,
                   epochs=2, batch=4, seed=0)


def make_model(config=TINY_AR, seed=0):
    rng = np.random.default_rng(seed)
    codebook = rng.normal(0.0, 1.0, (config.codebook_size, config.code_dim))
    return ARModel(config, codebook, rng)


def random_inputs(config, T, seed=1):
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1.0, (T, config.audio_dim))
    s = rng.normal(0.0, 1.0, (6, config.motion_dim))
    return y, s


def test_codebook_shape_validated():
    with pytest.raises(ShapeError):
        ARModel(TINY_AR, np.zeros((5, 9)))


def test_grid_probabilities_sum_to_one():
    """Brute-force enumeration over every possible code grid."""
    model = make_model()
    y, s = random_inputs(TINY_AR, T=2)
    C, D, T = 3, 2, 2
    grids = np.array(list(itertools.product(range(C), repeat=T * D)),
                     dtype=np.int64).reshape(-1, T, D)
    assert grids.shape[0] == C ** (T * D) == 81
    logps = model.sequence_log_probs(grids, y, s)
    total = np.exp(logps).sum()
    assert abs(total - 1.0) <= 1e-9


def test_future_frames_do_not_affect_past_logits():
    model = make_model()
    y, s = random_inputs(TINY_AR, T=6)
    rng = np.random.default_rng(2)
    grid = rng.integers(0, 3, (6, 2))
    base = model.forward_logits(y[None], s[None], grid[None]).data.copy()
    tampered = grid.copy()
    tampered[4:] = (tampered[4:] + 1) % 3
    out = model.forward_logits(y[None], s[None], tampered[None]).data
    np.testing.assert_array_equal(out[:, :4], base[:, :4])


def test_same_or_later_depths_do_not_affect_depth_logits():
    model = make_model()
    y, s = random_inputs(TINY_AR, T=4)
    rng = np.random.default_rng(3)
    grid = rng.integers(0, 3, (4, 2))
    base = model.forward_logits(y[None], s[None], grid[None]).data.copy()
    tampered = grid.copy()
    tampered[2, 1] = (tampered[2, 1] + 1) % 3  # depth 1 of frame 2
    out = model.forward_logits(y[None], s[None], tampered[None]).data
    # logits for (frame 2, depths <= 1) must be unchanged; frames < 2 too
    np.testing.assert_array_equal(out[:, :2], base[:, :2])
    np.testing.assert_array_equal(out[:, 2, :2], base[:, 2, :2])


def test_audio_outside_window_does_not_affect_logits():
    model = make_model()
    T = 12
    y, s = random_inputs(TINY_AR, T=T)
    rng = np.random.default_rng(4)
    grid = rng.integers(0, 3, (T, 2))
    base = model.forward_logits(y[None], s[None], grid[None]).data.copy()
    # frame t sees raw audio up to index t + R only (centered audio convs,
    # causal temporal convs), so perturbing from t + R + 1 on is invisible
    R = model.audio_radius
    t = 2
    y2 = y.copy()
    y2[t + R + 1:] += 7.0
    assert t + R + 1 < T
    out = model.forward_logits(y2[None], s[None], grid[None]).data
    np.testing.assert_array_equal(out[:, :t + 1], base[:, :t + 1])


def test_incremental_api_matches_teacher_forced_logits():
    model = make_model()
    T = 5
    y, s = random_inputs(TINY_AR, T=T)
    rng = np.random.default_rng(5)
    grid = rng.integers(0, 3, (T, 2))
    full = model.forward_logits(y[None], s[None], grid[None]).data[0]
    audio, style = model.context_features(y, s)
    committed = model.frame_embedding(grid)
    for t in range(T):
        h = model.h_av_at(audio, committed, t, style)
        for d in range(2):
            logits = model.depth_step(h[None], style, grid[None, t, :d])
            np.testing.assert_allclose(logits[0], full[t, d], atol=1e-10)


def test_depth_pass_counter_counts_rows():
    model = make_model()
    model.depth_pass_count = 0
    h = np.zeros((3, TINY_AR.width))
    style = np.zeros(TINY_AR.width)
    model.depth_step(h, style, np.zeros((3, 0), dtype=np.int64))
    model.depth_step(h, style, np.zeros((3, 1), dtype=np.int64))
    assert model.depth_pass_count == 6


def test_style_conditioning_changes_depth_logits():
    model = make_model()
    y, s = random_inputs(TINY_AR, T=3)
    rng = np.random.default_rng(6)
    grid = rng.integers(0, 3, (3, 2))
    a = model.forward_logits(y[None], s[None], grid[None]).data
    b = model.forward_logits(y[None], (s + 1.0)[None], grid[None]).data
    assert not np.allclose(a, b)


@pytest.fixture(scope="module")
def trained(tiny_corpus):
    codec_cfg = CodecConfig(input_dim=12, depth=2, codebook_size=4,
                            code_dim=4, epochs=3, seed=0)
    codec, _ = train_codec(tiny_corpus, codec_cfg)
    ar_cfg = ARConfig(code_dim=4, codebook_size=4, depth=2, width=8,
                      audio_dim=4, motion_dim=12, heads=2, depth_layers=1,
                      epochs=3, batch=8, seed=0)
    model, history = train_ar(codec, tiny_corpus, ar_cfg)
    return codec, model, history


def test_training_reduces_cross_entropy(trained):
    _, _, history = trained
    assert history[-1]["loss"] < history[0]["loss"]


def test_geometry_mismatch_rejected(trained, tiny_corpus):
    codec, _, _ = trained
    bad = ARConfig(code_dim=4, codebook_size=8, depth=2, width=8,
                   audio_dim=4, motion_dim=12, heads=2, epochs=1)
    with pytest.raises(ValueError):
        train_ar(codec, tiny_corpus, bad)


def test_held_out_cross_entropy_finite(trained, tiny_corpus):
    codec, model, _ = trained
    ce = held_out_cross_entropy(model, codec, tiny_corpus,
                                tiny_corpus.split("val")[:4])
    assert np.isfinite(ce) and ce > 0.0


def test_checkpoint_roundtrip_bit_exact(trained, tmp_path):
    _, model, _ = trained
    path = tmp_path / "ar.ckpt"
    model.save(path, seed=1)
    back = ARModel.load(path)
    y, s = random_inputs(back.config, T=4)
    rng = np.random.default_rng(7)
    grid = rng.integers(0, back.config.codebook_size, (4, 2))
    np.testing.assert_array_equal(
        back.forward_logits(y[None], s[None], grid[None]).data,
        model.forward_logits(y[None], s[None], grid[None]).data)


def test_transformer_temporal_variant_runs():
    cfg = ARConfig(code_dim=4, codebook_size=3, depth=2, width=8,
                   audio_dim=4, motion_dim=12, heads=2, depth_layers=1,
                   temporal="transformer", temporal_layers=1, epochs=1)
    model = make_model(cfg)
    y, s = random_inputs(cfg, T=4)
    grid = np.zeros((4, 2), dtype=np.int64)
    out = model.forward_logits(y[None], s[None], grid[None])
    assert out.shape == (1, 4, 2, 3)


def test_stochastic_grid_tends_to_argmin_at_low_tau():
    rng = np.random.default_rng(8)
    codebook = rng.normal(0.0, 1.0, (6, 4))
    z = rng.normal(0.0, 1.0, (10, 4))
    from rvqsynth.codec import rvq_quantize_frames
    hard = rvq_quantize_frames(z, codebook, 3).grid
    soft = stochastic_grid(z, codebook, 3, tau=1e-9,
                           rng=np.random.default_rng(9))
    np.testing.assert_array_equal(soft, hard)


def test_soft_targets_are_distributions():
    rng = np.random.default_rng(10)
    codebook = rng.normal(0.0, 1.0, (6, 4))
    z = rng.normal(0.0, 1.0, (5, 4))
    from rvqsynth.codec import rvq_quantize_frames
    grid = rvq_quantize_frames(z, codebook, 2).grid
    tgt = soft_target_distributions(z, grid, codebook, eps=0.3, alpha=0.1)
    np.testing.assert_allclose(tgt.sum(axis=-1), 1.0, atol=1e-12)
    # the selected code always keeps the largest share
    np.testing.assert_array_equal(tgt.argmax(axis=-1), grid)


def test_prepare_sequences_freezes_grids(trained, tiny_corpus):
    codec, _, _ = trained
    rng = np.random.default_rng(11)
    prepared = prepare_sequences(codec, tiny_corpus,
                                 tiny_corpus.split("train")[:3], rng)
    for p in prepared:
        np.testing.assert_array_equal(p.grid, codec.quantize(p.latents).grid)
