import numpy as np
import pytest

from meramdiff import markov as mk
from meramdiff import sampler as sm
from meramdiff.macrospin import AP, P, DeviceParams, PulseSpec, switching_probability
from meramdiff.markov import UnitConfig
from meramdiff.sampler import StreamConfigError, StreamSpec, open_stream
from meramdiff.stats import chi2_gof, serial_permutation_test


def test_identity_config_gives_zero_noise():
    s = open_stream(UnitConfig.uniform(8, 0.0), StreamSpec(mode="sequential"))
    assert not s.draw(1000).any()
    assert not s.fill((16, 16)).any()


def test_draws_live_on_the_grid(coins):
    x = open_stream(coins, StreamSpec(seed=3)).draw(2000)
    np.testing.assert_array_equal(x * 64, np.rint(x * 64))
    assert np.abs(x).max() <= 255 / 64


def test_independent_mode_has_no_lag_one_correlation(coins):
    n = 100_000
    x = open_stream(coins, StreamSpec(seed=1)).draw(n)
    assert abs(mk.lag_autocorr(x, 1)) < 4 / np.sqrt(n)


def test_sequential_mode_has_minus_half_lag_one(coins):
    x = open_stream(coins, StreamSpec(mode="sequential", seed=1)).draw(100_000)
    assert mk.lag_autocorr(x, 1) == pytest.approx(-0.5, abs=0.02)


def test_sequential_mode_follows_the_exact_law():
    cfg = UnitConfig.from_arrays([0.3, 0.6, 0.2], [0.5, 0.1, 0.4], frac_bits=0)
    x = open_stream(cfg, StreamSpec(mode="sequential", seed=8)).draw(60_000)
    rep = chi2_gof(x, mk.epsilon_distribution(cfg))
    assert rep.p_value > 0.001


def test_independent_mode_follows_the_exact_law():
    # fast-flipping bits make any leftover correlation easy to see
    cfg = UnitConfig.from_arrays([0.97, 0.9], [0.95, 0.9], frac_bits=0)
    x = open_stream(cfg, StreamSpec(seed=2)).draw(40_000)
    assert chi2_gof(x, mk.epsilon_distribution(cfg)).p_value > 0.001
    assert abs(mk.lag_autocorr(x, 1)) < 4 / np.sqrt(len(x))


def test_calibrated_draw_moments(calibrated_sym):
    x = open_stream(calibrated_sym, StreamSpec(seed=0)).draw(40_000)
    assert abs(x.mean()) <= 0.05
    assert 0.9 <= x.std() <= 1.1


def test_streams_are_deterministic_and_split_invariant(coins):
    for mode in sm.MODES:
        spec = StreamSpec(mode=mode, seed=5, n_units=3)
        whole = open_stream(coins, spec).draw(999)
        s = open_stream(coins, spec)
        parts = np.concatenate([s.draw(1), s.draw(500), s.draw(498)])
        np.testing.assert_array_equal(whole, parts)
        assert not np.array_equal(whole, open_stream(coins, StreamSpec(mode=mode, seed=6, n_units=3)).draw(999))


def test_scale_and_offset(coins):
    raw = open_stream(coins, StreamSpec(seed=2)).draw(100)
    moved = open_stream(coins, StreamSpec(seed=2, scale=0.5, offset=1.0)).draw(100)
    np.testing.assert_array_equal(moved, 0.5 * raw + 1.0)


def test_fill_is_row_major(coins):
    spec = StreamSpec(seed=4)
    np.testing.assert_array_equal(open_stream(coins, spec).fill((1,)), open_stream(coins, spec).draw(1))
    img = open_stream(coins, spec).fill((80, 80))
    np.testing.assert_array_equal(img.ravel(), open_stream(coins, spec).draw(6400))
    with pytest.raises(ValueError):
        open_stream(coins, spec).fill((10**5, 10**4))
    with pytest.raises(ValueError):
        open_stream(coins, spec).draw(0)


def test_zero_defect_rate_is_a_no_op(coins):
    a = open_stream(coins, StreamSpec(seed=9)).draw(500)
    b = open_stream(coins, StreamSpec(seed=9, defect_rate=0.0, defect_kind="random")).draw(500)
    np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def msb_stuck(calibrated_sym):
    mask = np.zeros((1, 8), dtype=bool)
    mask[0, 7] = True
    return open_stream(calibrated_sym, StreamSpec(seed=3, defect_rate=0.01), defects=mask)


def test_stuck_msb_law_matches_the_reduced_chain(msb_stuck, calibrated_sym):
    # oracle: the exact law of the seven healthy bits on the same grid
    cfg = calibrated_sym.config
    healthy = UnitConfig(cfg.bits[:7], cfg.frac_bits)
    small = mk.epsilon_distribution(healthy).probs
    want = np.zeros(511)
    want[255 - 127:255 + 128] = small
    np.testing.assert_allclose(msb_stuck.exact_law().probs, want, atol=1e-15)


def test_stuck_msb_narrows_the_noise_and_is_flagged(msb_stuck, calibrated_sym):
    x = msb_stuck.draw(40_000)
    # the weight-2 bit no longer moves: std drops from 1.033 to 0.837
    assert x.std() == pytest.approx(msb_stuck.exact_law().std(), abs=0.01)
    assert msb_stuck.exact_law().std() < 0.85
    assert np.abs(x).max() <= 127 / 64
    rep = chi2_gof(x, mk.epsilon_distribution(calibrated_sym.config))
    assert not rep.passed
    assert rep.p_value < 1e-6
    assert chi2_gof(x, msb_stuck.exact_law()).passed


def test_random_defects_follow_rate(coins):
    s = open_stream(coins, StreamSpec(seed=1, defect_rate=0.25, defect_kind="random", n_units=200))
    assert s.stuck.mean() == pytest.approx(0.25, abs=0.03)
    assert set(np.unique(s.stuck_value[s.stuck])) == {0, 1}
    ap = open_stream(coins, StreamSpec(seed=1, defect_rate=0.25, defect_kind="stuck_AP", n_units=50))
    assert ap.stuck_value[ap.stuck].all()


def test_spec_validation():
    for bad in ({"backend": "quantum"}, {"mode": "burst"}, {"scale": 0.0}, {"defect_rate": 1.0},
                {"burn_in": -1}, {"defect_kind": "broken"}, {"n_units": 0}):
        with pytest.raises(StreamConfigError):
            StreamSpec(**bad)
    with pytest.raises(StreamConfigError):
        StreamSpec.from_dict({"seed": 1, "colour": "red"})
    assert StreamSpec.from_dict(StreamSpec(seed=4).to_dict()) == StreamSpec(seed=4)


def test_open_stream_guards(coins):
    with pytest.raises(StreamConfigError, match="physical"):
        open_stream(coins, StreamSpec(backend="physical"))
    with pytest.raises(StreamConfigError):
        open_stream(coins, StreamSpec(backend="physical"), device=DeviceParams(), pulses=[PulseSpec(2.4, 1e-9)])
    with pytest.raises(StreamConfigError):
        open_stream({"bits": []})
    with pytest.raises(StreamConfigError):
        open_stream(coins, defects=np.zeros((2, 8), dtype=bool))


def test_bank_round_trip(tmp_path, coins):
    bank = sm.NoiseBank.from_stream(open_stream(coins, StreamSpec(seed=2)), 1000)
    sm.save_bank(tmp_path / "b.bin", bank)
    back = sm.load_bank(tmp_path / "b.bin", expected_digest=sm.config_digest(coins))
    np.testing.assert_array_equal(back.values, bank.values)
    assert back.digest == bank.digest
    assert back.provenance["stream"]["seed"] == 2
    sm.write_bank_csv(tmp_path / "b.csv", bank)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "b.csv"), bank.values)


def test_bank_errors(tmp_path, coins):
    bank = sm.NoiseBank.from_stream(open_stream(coins), 10)
    path = tmp_path / "b.bin"
    sm.save_bank(path, bank)
    with pytest.raises(sm.BankDigestError):
        sm.load_bank(path, expected_digest=sm.config_digest(UnitConfig.uniform(8, 0.4)))
    blob = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"X" + blob[1:])
    (tmp_path / "short.bin").write_bytes(blob[:-3])
    (tmp_path / "tiny.bin").write_bytes(blob[:10])
    for name in ("magic.bin", "short.bin", "tiny.bin"):
        with pytest.raises(sm.BankFormatError):
            sm.load_bank(tmp_path / name)
    with pytest.raises(ValueError):
        sm.NoiseBank(np.array([1.0, np.inf]))


def test_bank_noise_consumes_then_resamples():
    bank = sm.NoiseBank(np.arange(10.0))
    src = sm.BankNoise(bank, seed=0)
    np.testing.assert_array_equal(src.draw(4), [0, 1, 2, 3])
    tail = src.draw(8)
    np.testing.assert_array_equal(tail[:6], [4, 5, 6, 7, 8, 9])
    assert set(tail[6:]) <= set(range(10))
    again = sm.BankNoise(bank, seed=0)
    again.draw(4)
    np.testing.assert_array_equal(again.draw(8), tail)
    rep = sm.BankNoise(bank, seed=1, replacement=True).normal((3, 4))
    assert rep.shape == (3, 4)
    assert src.name == "meram" and sm.IdealNoise().name == "ideal"


def test_ideal_and_stream_noise(coins):
    a = sm.IdealNoise(3).normal((2, 5))
    np.testing.assert_array_equal(a, np.random.default_rng(3).standard_normal((2, 5)))
    spec = StreamSpec(seed=1)
    np.testing.assert_array_equal(sm.StreamNoise(open_stream(coins, spec)).normal((4, 4)),
                                  open_stream(coins, spec).fill((4, 4)))


def test_serial_independence_lags_one_to_four(calibrated_sym):
    x = open_stream(calibrated_sym, StreamSpec(seed=11)).draw(20_000)
    for lag in range(1, 5):
        assert serial_permutation_test(x, lag=lag, n_perm=200, seed=lag).p_value > 0.01


@pytest.mark.slow
def test_physical_backend_agrees_with_its_measured_chain():
    """Reduced form of the backend agreement check: two bits, probabilities measured
    with the same pulses, then a chi-square test of the physical stream against the
    exact law of those measured probabilities."""
    dev = DeviceParams()
    pulses = [PulseSpec(2.4, 2.0e-9, 2e-9), PulseSpec(2.4, 1.0e-9, 2e-9)]
    pa, ap = [], []
    for k, pulse in enumerate(pulses):
        pa.append(switching_probability(dev, pulse, P, n_trials=3000, seed=100 + k).p_pa)
        ap.append(switching_probability(dev, pulse, AP, n_trials=3000, seed=200 + k).p_ap)
    measured = UnitConfig.from_arrays(pa, ap, frac_bits=0)
    s = open_stream(measured, StreamSpec(backend="physical", mode="sequential", burn_in=5, seed=4),
                    device=dev, pulses=pulses)
    x = s.draw(1500)
    assert chi2_gof(x, mk.epsilon_distribution(measured)).p_value > 0.001
