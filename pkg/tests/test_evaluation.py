import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from binmap import evaluation as ev
from binmap import synth
from binmap.spectro import AudioBuffer, ComplexSpectrogram, stft
from binmap.vessl import separate


def _buf(x):
    x = np.asarray(x, dtype=float)
    return AudioBuffer(x[: x.size // 2], x[x.size // 2:])


# ---------------------------------------------------------------- angular errors

def test_identical_directions_have_zero_error():
    assert ev.angular_error([10.0, -5.0], [10.0, -5.0]) == (0.0, 0.0)


def test_azimuth_wraps():
    az, el = ev.angular_error([170.0, 0.0], [-170.0, 10.0])
    assert az == pytest.approx(20.0) and el == pytest.approx(10.0)
    assert ev.angular_error([0.0, 0], [180.0, 0])[0] == pytest.approx(180.0)
    assert ev.angular_error([-179.0, 0], [179.0, 0])[0] == pytest.approx(2.0)


def test_batch_summary_matches_direct_recomputation():
    rng = np.random.default_rng(0)
    est = rng.uniform([-160, -60], [160, 60], size=(50, 2))
    truth = rng.uniform([-160, -60], [160, 60], size=(50, 2))
    az, _ = ev.angular_error(est, truth)
    direct = []
    for e, t in zip(est, truth):
        d = abs(e[0] - t[0]) % 360
        direct.append(min(d, 360 - d))
    mean, std = ev.summarize(az)
    n = len(direct)
    ref_mean = sum(direct) / n
    assert mean == pytest.approx(ref_mean, rel=1e-12)
    assert std == pytest.approx((sum((v - ref_mean) ** 2 for v in direct) / n) ** 0.5, rel=1e-12)


# ---------------------------------------------------------------- permutations

def test_swapped_pair_and_identity():
    truth = [[-30.0, 0.0], [40.0, 10.0]]
    assert ev.permutation_align([[41.0, 9.0], [-29.0, 1.0]], truth) == (1, 0)
    assert ev.permutation_align(truth, truth) == (0, 1)


@given(st.integers(0, 2 ** 31))
def test_three_sources_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    est = rng.uniform(-90, 90, size=(3, 2))
    truth = rng.uniform(-90, 90, size=(3, 2))
    perm = ev.permutation_align(est, truth)

    def cost(p):
        return sum(sum(ev.angular_error(est[p[i]], truth[i])) for i in range(3))

    best = min(cost(p) for p in itertools.permutations(range(3)))
    assert cost(perm) == pytest.approx(best)
    assert sorted(perm) == [0, 1, 2]


def test_count_mismatch_is_rejected():
    with pytest.raises(ValueError):
        ev.permutation_align([[0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]])


# ---------------------------------------------------------------- oracle masks

def _spec(values):
    values = np.asarray(values, dtype=complex)
    return ComplexSpectrogram(values, np.zeros(values.shape[1], complex), 15.625, 128)


def test_disjoint_sources_recover_support():
    rng = np.random.default_rng(0)
    support = rng.integers(0, 3, size=(6, 5))
    specs = []
    for m in range(3):
        vals = np.where(support == m, rng.normal(size=support.shape) + 2.0, 0.0)
        specs.append((_spec(vals), _spec(vals * 0.5)))
    np.testing.assert_array_equal(ev.oracle_mask(specs, 3), support)


def test_equal_power_tie_goes_to_lowest_index():
    a = _spec(np.ones((2, 2)))
    b = _spec(np.ones((2, 2)) * 1j)
    np.testing.assert_array_equal(ev.oracle_mask([(a, a), (b, b)]), np.zeros((2, 2)))


def test_oracle_mask_beats_other_binary_masks():
    head = synth.VirtualHead(seed=1)
    rng = np.random.default_rng(3)
    oracle, rival = [], []
    for trial in range(20):
        scene = synth.Scene([((-40.0, 0.0), synth.noise_bursts(0.5, 16000, rng)),
                             ((35.0, 10.0), synth.noise_bursts(0.5, 16000, rng))], seed=trial)
        images = synth.render_images(head, scene)
        mix = images[0] + images[1]
        left, right = stft(mix)
        specs = [stft(img) for img in images]
        true_labels = ev.oracle_mask(specs)
        flip = rng.random(true_labels.shape) < 0.2
        for labels, sink in ((true_labels, oracle), (np.where(flip, 1 - true_labels, true_labels), rival)):
            est = separate(left, right, labels, 2, len(mix))
            sink.append(ev.score_separation(est, images).sdr_db.mean())
    assert np.mean(oracle) > np.mean(rival)
    assert np.mean(np.array(oracle) >= np.array(rival)) >= 0.9


# ---------------------------------------------------------------- SDR / SIR

def test_exact_estimate_hits_the_ceiling():
    rng = np.random.default_rng(0)
    s, u = _buf(rng.normal(size=400)), _buf(rng.normal(size=400))
    assert ev.sdr_sir(s, s, [u]) == (ev.SCORE_CEILING_DB, ev.SCORE_CEILING_DB)


def test_pure_interferer_has_nonpositive_sir():
    rng = np.random.default_rng(1)
    s, u = _buf(rng.normal(size=400)), _buf(rng.normal(size=400))
    sdr, sir = ev.sdr_sir(u, s, [u])
    assert sir <= 0.0 and sdr <= sir


def test_orthogonal_construction_has_closed_form_scores():
    n = 64
    basis = np.linalg.qr(np.random.default_rng(2).normal(size=(2 * n, 3)))[0].T
    s, u, a = basis * 5.0
    est = s + 0.5 * u + 0.25 * a
    sdr, sir = ev.sdr_sir(_buf(est), _buf(s), [_buf(u)])
    # powers relative to the target: interference 0.5^2, artifact 0.25^2
    assert sir == pytest.approx(10 * np.log10(1 / 0.25))
    assert sdr == pytest.approx(10 * np.log10(1 / (0.25 + 0.0625)))


@pytest.mark.parametrize("seed", range(5))
def test_matches_normal_equations_oracle(seed):
    rng = np.random.default_rng(seed)
    s, u1, u2 = (rng.normal(size=40) for _ in range(3))
    e = 0.8 * s + 0.3 * u1 - 0.2 * u2 + 0.1 * rng.normal(size=40)
    B = np.column_stack([s, u1, u2])
    coef = np.linalg.solve(B.T @ B, B.T @ e)
    target = (s @ e) / (s @ s) * s
    interference = B @ coef - target
    artifact = e - B @ coef
    sdr, sir = ev.sdr_sir(_buf(e), _buf(s), [_buf(u1), _buf(u2)])
    assert sdr == pytest.approx(10 * np.log10(target @ target / (interference @ interference + artifact @ artifact)), rel=1e-9)
    assert sir == pytest.approx(10 * np.log10(target @ target / (interference @ interference)), rel=1e-9)


@given(st.integers(0, 2 ** 31), st.floats(0.01, 100.0))
def test_sdr_below_sir_and_gain_invariant(seed, gain):
    rng = np.random.default_rng(seed)
    s, u, e = (rng.normal(size=60) for _ in range(3))
    sdr, sir = ev.sdr_sir(_buf(e), _buf(s), [_buf(u)])
    assert sdr <= sir + 1e-12
    sdr2, sir2 = ev.sdr_sir(_buf(gain * e), _buf(gain * s), [_buf(gain * u)])
    assert sdr2 == pytest.approx(sdr, abs=1e-9) and sir2 == pytest.approx(sir, abs=1e-9)


def test_silent_reference_is_undefined():
    with pytest.raises(ev.UndefinedScoreError):
        ev.sdr_sir(_buf(np.ones(10)), _buf(np.zeros(10)), [])


def test_length_mismatch():
    with pytest.raises(ValueError):
        ev.sdr_sir(_buf(np.ones(10)), _buf(np.ones(12)), [])


def test_score_separation_applies_permutation():
    rng = np.random.default_rng(4)
    refs = [_buf(rng.normal(size=200)) for _ in range(2)]
    score = ev.score_separation([refs[1], refs[0]], refs, permutation=(1, 0))
    assert np.all(score.sdr_db == ev.SCORE_CEILING_DB)
    assert score.permutation == (1, 0)
    with pytest.raises(ValueError):
        ev.score_separation(refs, refs, permutation=(0, 0))


def test_mixture_baseline_is_finite():
    rng = np.random.default_rng(5)
    refs = [_buf(rng.normal(size=300)) for _ in range(2)]
    mix = refs[0] + refs[1]
    score = ev.score_separation([mix, mix], refs)
    assert np.all(np.isfinite(score.sdr_db)) and np.all(score.sdr_db < 5)


# ---------------------------------------------------------------- tables

def test_table_has_rows_and_summary():
    rows = [{"trial": 0, "az": 1.0, "el": 2.0}, {"trial": 1, "az": 3.0, "el": 4.0}]
    text = ev.format_table(rows, ["trial", "az", "el"])
    lines = text.strip().split("\n")
    assert lines[0] == "trial\taz\tel"
    assert len(lines) == 4
    assert lines[-1].split("\t")[1] == "2.000±1.000"
    labelled = ev.format_table([{"name": "a", "v": 1.0}], ["name", "v"])
    assert labelled.strip().split("\n")[-1].startswith("Avg±Std")
