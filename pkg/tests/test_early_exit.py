import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raven.early_exit import (ExitConfig, block_means, calibrate_tau, entropy_novelty, exit_index, novelty,
                              novelty_curve, read_traces, run_with_exit, write_traces)
from raven.model import ModelConfig, RavenModel
from raven.numerics import no_grad

EXIT_MODEL = dict(n_rx=2, n_tx=2, n_chirps=16, n_samples=16, d_mixer=8, heads=2, d_backbone=16, grid=(4, 4),
                  t_det=4, t_seg=4, decoder_channels=4, ssm_state=4)


@pytest.fixture(scope="module")
def exit_model():
    return RavenModel(ModelConfig(**EXIT_MODEL, seed=2))


def frame(seed=0, scale=1.0):
    c = EXIT_MODEL
    r = np.random.default_rng(seed)
    return (scale * r.normal(size=(c["n_chirps"], c["n_samples"], 2 * c["n_rx"]))).astype(np.float32)


# ----------------------------------------------------------------- novelty

def test_novelty_hand_cases():
    assert novelty([1.0, 1.0] / np.sqrt(2), [[1, 0], [0, 1]]) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    assert novelty([0.3, -2.0], [[0.3, -2.0], [5, 5]]) == pytest.approx(0.0, abs=1e-12)
    assert novelty([0, 0, 1.0], [[1, 0, 0], [0, 2, 0]]) == pytest.approx(1.0)
    assert novelty([0.0, 0.0], [[1, 0]]) == 1.0
    assert novelty([1.0, 0.0], [[0, 0]]) == 1.0
    assert novelty([1.0, 0.0], np.zeros((0, 2))) == 1.0
    assert novelty([1.0, 0.0], [[-1.0, 0.0]]) == pytest.approx(2.0)


vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(z=vec, prior=st.lists(vec, min_size=1, max_size=5), extra=vec)
def test_novelty_range_and_prior_growth(z, prior, extra):
    d = novelty(z, prior)
    assert 0.0 <= d <= 2.0
    assert novelty(z, prior + [extra]) <= d + 1e-12


def test_novelty_curve_matches_pointwise(rng):
    z = rng.normal(size=(12, 5))
    z[4] = 0.0
    c = novelty_curve(z)
    assert c[0] == 1.0
    for i in range(1, 12):
        assert c[i] == pytest.approx(novelty(z[i], z[:i]), abs=1e-12)


# ----------------------------------------------------------------- entropy

def test_entropy_cases():
    assert entropy_novelty([math.log(3), 0.0]) == pytest.approx(0.8113, abs=1e-4)
    p = np.array([0.75, 0.25])
    assert entropy_novelty([math.log(3), 0.0]) == pytest.approx(-(p * np.log(p)).sum() / math.log(2), rel=1e-12)
    assert entropy_novelty(np.full(7, 2.5)) == pytest.approx(1.0)
    assert entropy_novelty([500.0, 0, 0, 0]) < 1e-6
    with pytest.raises(ValueError):
        entropy_novelty([1.0])


# ----------------------------------------------------------------- rule

def test_exit_rule_block_example():
    d = np.repeat([0.5, 0.3, 0.15, 0.1], 4)
    assert exit_index(d, ExitConfig(tau=0.2), k=4) == 12
    assert exit_index(d, ExitConfig(tau=0.2, min_blocks=4), k=4) == 16


def test_exit_rule_extremes():
    assert exit_index(np.zeros(16), ExitConfig(tau=0.2, min_blocks=3), k=4) == 12
    assert exit_index(np.zeros(16), ExitConfig(tau=0.2), k=4) == 4
    assert exit_index(np.ones(16), ExitConfig(tau=0.2), k=4) is None
    assert exit_index(np.zeros(16), ExitConfig(tau=0.0), k=4) is None
    assert exit_index(np.full(16, 1.9), ExitConfig(tau=2.0, min_blocks=2), k=4) == 8


def test_block_means_pads_with_own_mean():
    assert block_means([1, 1, 1, 1, 0.2, 0.4], 4).tolist() == pytest.approx([1.0, 0.3])


@settings(max_examples=200, deadline=None)
@given(d=st.lists(st.floats(0, 2), min_size=8, max_size=8), t1=st.floats(0.01, 2), t2=st.floats(0.01, 2))
def test_exit_index_monotone_in_tau(d, t1, t2):
    lo, hi = sorted((t1, t2))
    a = exit_index(d, ExitConfig(tau=lo), k=2)
    b = exit_index(d, ExitConfig(tau=hi), k=2)
    assert (math.inf if a is None else a) >= (math.inf if b is None else b)


def test_exit_config_validation():
    with pytest.raises(ValueError):
        ExitConfig(rule="psychic")
    with pytest.raises(ValueError):
        ExitConfig(min_blocks=0)
    with pytest.raises(ValueError):
        ExitConfig(block=3).block_size(16, 4)
    assert ExitConfig().block_size(64, 8) == 8


# ----------------------------------------------------------------- calibration

def tangent_knee(n, scale):
    """Analytic max-distance-to-chord point of exp(-L/scale) sampled at L = 1..n."""
    y1, yn = math.exp(-1 / scale), math.exp(-n / scale)
    slope = (yn - y1) / (n - 1)
    return -scale * math.log(-slope * scale)


def test_calibrate_tau_exponential_knee():
    L = np.arange(1, 65)
    curves = [np.exp(-L / 8.0) * (1 + 0.001 * i) for i in range(12)]
    tau, info = calibrate_tau(curves, return_info=True)
    want = tangent_knee(64, 8.0)
    assert abs(info["knee_L"] - want) <= 1.0
    assert 0.05 <= tau <= 0.5
    assert tau == pytest.approx(np.mean(curves, axis=0)[info["knee_L"] - 1])
    # a short trace puts the knee at the scale length with tau near 1/e
    short = [np.exp(-np.arange(1, 25) / 8.0)] * 10
    tau_s, info_s = calibrate_tau(short, return_info=True)
    assert abs(info_s["knee_L"] - tangent_knee(24, 8.0)) <= 1.0
    assert 0.25 < tau_s < 0.37


def test_calibrate_tau_clamps():
    L = np.arange(1, 65)
    assert calibrate_tau([np.exp(-L / 2.0)] * 10) == 0.05
    assert calibrate_tau([2.0 - np.exp(-L / 2.0) * 0.1] * 10) == 0.5


def test_calibrate_tau_degenerate(caplog):
    with caplog.at_level(logging.WARNING):
        assert calibrate_tau([np.full(16, 0.4)] * 10) == pytest.approx(0.275)
    assert "knee" in caplog.text
    with pytest.raises(ValueError):
        calibrate_tau([np.ones(16)] * 9)


def test_traces_round_trip(tmp_path, rng):
    curves = [rng.uniform(0, 2, 16) for _ in range(3)]
    p = tmp_path / "traces.csv"
    write_traces(p, curves)
    assert p.read_text().splitlines()[0] == "frame_id,L,d_L"
    back = read_traces(p)
    assert len(back) == 3
    for a, b in zip(curves, back):
        assert np.array_equal(a, b)


# ----------------------------------------------------------------- run_with_exit

def prefix_decode(m, x, L):
    with no_grad():
        m.params.begin()
        z = m.encode(x[None]).z.data[:, :L]
        return m.decode_det(z), m.decode_seg(z)


@pytest.mark.parametrize("tau", [0.3, 0.6, 1.2, 2.0])
def test_exit_decode_equals_prefix_decode_bitwise(exit_model, tau):
    x = frame(1)
    r = run_with_exit(exit_model, x, ExitConfig(tau=tau), streaming=False)
    det, seg = prefix_decode(exit_model, x, r.l_exit)
    assert np.array_equal(r.det.logits.data, det.logits.data)
    assert np.array_equal(r.det.offsets.data, det.offsets.data)
    assert np.array_equal(r.seg.logits.data, seg.logits.data)


def test_tau_zero_is_full_frame(exit_model):
    x = frame(2)
    r = run_with_exit(exit_model, x, ExitConfig(tau=0.0), streaming=False)
    assert r.l_exit == 16 and not r.exited
    with no_grad():
        exit_model.params.begin()
        det, seg, _ = exit_model.forward(x[None])
    assert np.array_equal(r.det.logits.data, det.logits.data)
    assert np.array_equal(r.seg.logits.data, seg.logits.data)


def test_tau_two_exits_at_min_blocks(exit_model):
    for mb in (1, 2, 3):
        for streaming in (False, True):
            r = run_with_exit(exit_model, frame(3), ExitConfig(tau=2.0, min_blocks=mb), streaming=streaming)
            assert r.l_exit == 4 * mb and r.exited


def test_streaming_exit_matches_batch(exit_model):
    x = frame(4)
    for tau in (0.0, 0.5, 2.0):
        a = run_with_exit(exit_model, x, ExitConfig(tau=tau), streaming=True)
        b = run_with_exit(exit_model, x, ExitConfig(tau=tau), streaming=False)
        assert a.l_exit == b.l_exit
        np.testing.assert_allclose(a.det.logits.data, b.det.logits.data, atol=1e-4)
        np.testing.assert_allclose(a.seg.logits.data, b.seg.logits.data, atol=1e-4)


def test_entropy_rule_runs(exit_model):
    r = run_with_exit(exit_model, frame(5), ExitConfig(tau=2.0, rule="entropy"), streaming=False)
    assert r.l_exit == 4
    assert ((r.scores >= 0) & (r.scores <= 1 + 1e-12)).all()


def test_mac_ratio_tracks_exit_point(exit_model):
    for tau in (2.0, 0.0):
        for mb in (1, 2, 3):
            r = run_with_exit(exit_model, frame(6), ExitConfig(tau=tau, min_blocks=mb), streaming=False)
            assert r.chirp_macs_used / r.chirp_macs_full == pytest.approx(r.l_exit / 16, rel=0.01)
            assert r.macs_used <= r.macs_full
            if r.exited:
                assert r.macs_used / r.macs_full > r.l_exit / 16  # the decoders cost the same either way


def test_rejects_batches(exit_model):
    with pytest.raises(ValueError):
        run_with_exit(exit_model, np.stack([frame(0), frame(1)]), ExitConfig())
