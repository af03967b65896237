import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrfrecon.sequence import (ScheduleConfig, SequenceSchedule, TissueParams, add_complex_noise,
                               generate_schedule, read_schedule, simulate_fingerprint,
                               simulate_fingerprints, write_schedule)
from oracles import bloch_isochromat_signal


def test_paper_schedule_ranges():
    s = generate_schedule(ScheduleConfig(n_reps=3000, fa_min_deg=5, fa_max_deg=74,
                                         tr_min_ms=12, tr_max_ms=15, seed=7))
    assert s.n_reps == 3000
    assert s.flip_angles_deg.min() >= 5 and s.flip_angles_deg.max() <= 74
    assert s.repetition_times_ms.min() >= 12 and s.repetition_times_ms.max() <= 15


@pytest.mark.parametrize("pattern", ["sinusoidal", "random"])
def test_degenerate_flip_range(pattern):
    s = generate_schedule(ScheduleConfig(n_reps=50, fa_min_deg=10, fa_max_deg=10, pattern=pattern))
    assert np.all(s.flip_angles_deg == 10.0)


def test_schedule_deterministic():
    cfg = ScheduleConfig(n_reps=500, seed=3)
    a, b = generate_schedule(cfg), generate_schedule(cfg)
    assert a.flip_angles_deg.tobytes() == b.flip_angles_deg.tobytes()
    assert a.repetition_times_ms.tobytes() == b.repetition_times_ms.tobytes()
    assert a.digest() == b.digest()
    assert generate_schedule(ScheduleConfig(n_reps=500, seed=4)).digest() != a.digest()


@pytest.mark.parametrize("kw", [dict(fa_min_deg=50, fa_max_deg=10), dict(tr_min_ms=20, tr_max_ms=12),
                                dict(n_reps=0)])
def test_schedule_rejects_bad_config(kw):
    with pytest.raises(ValueError):
        generate_schedule(ScheduleConfig(**kw))


def test_schedule_rejects_empty():
    with pytest.raises(ValueError):
        SequenceSchedule(np.array([]), np.array([]))


def test_tissue_params_validation():
    with pytest.raises(ValueError):
        TissueParams(100, 200)
    with pytest.raises(ValueError):
        TissueParams(-1, 0.5)
    with pytest.raises(ValueError):
        TissueParams(1000, 100, -0.1)


def _schedule(n=50, seed=1, inversion=False, fa=None):
    s = generate_schedule(ScheduleConfig(n_reps=n, seed=seed, initial_inversion=inversion))
    if fa is not None:
        return SequenceSchedule(np.full(n, fa), s.repetition_times_ms, inversion)
    return s


def test_zero_flip_gives_zero_signal():
    fp = simulate_fingerprint(TissueParams(1000, 100), _schedule(fa=0.0))
    assert np.all(fp == 0)


def test_zero_b1_gives_zero_signal():
    for inv in (False, True):
        fp = simulate_fingerprint(TissueParams(800, 60, 0.0), _schedule(inversion=inv))
        assert np.all(fp == 0)


def test_first_sample_is_sine_of_flip():
    s = _schedule(n=20, seed=5)
    for b1 in (0.7, 1.0, 1.3):
        fp = simulate_fingerprint(TissueParams(1000, 100, b1), s)
        assert abs(abs(fp[0]) - math.sin(math.radians(s.flip_angles_deg[0]) * b1)) < 1e-12


def test_magnitude_bounded_and_finite():
    s = generate_schedule(ScheduleConfig(n_reps=400, seed=2))
    rng = np.random.default_rng(0)
    t1 = rng.uniform(50, 4500, 200)
    t2 = np.minimum(rng.uniform(20, 800, 200), t1)
    fp = simulate_fingerprints(t1, t2, rng.uniform(0.7, 1.3, 200), s)
    assert np.all(np.isfinite(fp))
    assert np.abs(fp).max() <= 1 + 1e-9


def test_rejects_unphysical():
    with pytest.raises(ValueError):
        simulate_fingerprints(100.0, 200.0, 1.0, _schedule())


def test_matches_bloch_oracle_fixed_case():
    s = _schedule(n=50, seed=11)
    fp = simulate_fingerprint(TissueParams(1000, 100, 1.0), s)
    ref = bloch_isochromat_signal(1000, 100, 1.0, s.flip_angles_deg, s.repetition_times_ms, n_spins=2000)
    assert np.sqrt(np.mean(np.abs(fp - ref) ** 2)) < 1e-3


def test_truncation_converges():
    s = generate_schedule(ScheduleConfig(n_reps=3000, seed=7))
    t1 = np.array([4500.0, 1000.0, 300.0])
    t2 = np.array([800.0, 100.0, 40.0])
    ref = simulate_fingerprints(t1, t2, 1.3, s, n_states=1600)
    assert np.abs(simulate_fingerprints(t1, t2, 1.3, s) - ref).max() < 1e-6


def test_n_states_cap_is_exact():
    # orders above n_reps/2 never refocus, so any larger state count is identical
    s = _schedule(n=60, seed=4, inversion=True)
    a = simulate_fingerprints(2000.0, 500.0, 1.1, s, n_states=31)
    b = simulate_fingerprints(2000.0, 500.0, 1.1, s, n_states=500)
    assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(c=st.floats(0.5, 2.0), b1=st.floats(0.35, 1.3), seed=st.integers(0, 1000))
def test_b1_acts_as_flip_multiplier(c, b1, seed):
    s = _schedule(n=40, seed=seed, inversion=True)
    scaled = SequenceSchedule(s.flip_angles_deg * c, s.repetition_times_ms, True)
    a = simulate_fingerprint(TissueParams(900, 80, b1), s)
    b = simulate_fingerprint(TissueParams(900, 80, b1 / c), scaled)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_noise_disabled_and_deterministic():
    fp = simulate_fingerprint(TissueParams(1000, 100), _schedule())
    assert np.array_equal(add_complex_noise(fp, None), fp)
    assert np.array_equal(add_complex_noise(fp, math.inf), fp)
    assert np.array_equal(add_complex_noise(fp, 20, seed=3), add_complex_noise(fp, 20, seed=3))
    assert not np.array_equal(add_complex_noise(fp, 20, seed=3), add_complex_noise(fp, 20, seed=4))


def test_noise_standard_deviation():
    snr = 25.0
    noisy = add_complex_noise(np.zeros(100_000, dtype=complex), snr, seed=0)
    assert abs(noisy.real.std() - 1 / snr) < 0.03 / snr
    assert abs(noisy.imag.std() - 1 / snr) < 0.03 / snr


def test_noise_scales_with_peak():
    fp = np.zeros(100_000, dtype=complex)
    fp[0] = 4.0
    noisy = add_complex_noise(fp, 10.0, seed=1)
    assert abs(noisy[1:].real.std() - 0.4) < 0.03 * 0.4


@pytest.mark.parametrize("snr", [0, -1])
def test_noise_rejects_bad_snr(snr):
    with pytest.raises(ValueError):
        add_complex_noise(np.ones(4, dtype=complex), snr)


def test_schedule_csv_roundtrip(tmp_path):
    s = generate_schedule(ScheduleConfig(n_reps=100, seed=9, initial_inversion=False, inversion_delay_ms=7.5))
    path = tmp_path / "sched.csv"
    write_schedule(s, path)
    assert path.read_text().splitlines()[0] == "index,fa_deg,tr_ms"
    back = read_schedule(path)
    assert back == s
    assert back.initial_inversion is False and back.inversion_delay_ms == 7.5
