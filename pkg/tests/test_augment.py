import math
from unittest import mock

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fairwake import augment, dsp
from fairwake.augment import (AugmentationPolicy, FilterAugmentConfig, FreqMaskConfig, FreqMixStyleConfig,
                              ImpulseResponse)
from fairwake.dsp import FrameConfig, Spectrogram, Waveform
from fairwake.errors import ConfigError, DimensionError

CFG = FrameConfig()
POWER = FreqMixStyleConfig(domain="power")


def spec(values):
    return Spectrogram(np.asarray(values, dtype=float), CFG)


def rand_spec(rng, t=29, f=CFG.n_bins):
    return spec(rng.gamma(1.0, 1.0, (t, f)))


# ------------------------------------------------------------- FreqMixStyle

class TestFreqMixStyle:
    @pytest.mark.parametrize("domain", ["log", "power"])
    def test_lambda_one_is_identity(self, rng, domain):
        a, b = rand_spec(rng), rand_spec(rng)
        out = augment.freq_mix_style(a, b, FreqMixStyleConfig(domain=domain), rng, lam=1.0)
        np.testing.assert_allclose(out.values, a.values, atol=1e-9)

    def test_lambda_zero_swaps_statistics(self, rng):
        # bounded spread keeps the non-negativity clamp inactive
        a, b = spec(rng.uniform(5, 6, (29, 1025))), spec(rng.uniform(1, 3, (29, 1025)))
        out = augment.freq_mix_style(a, b, POWER, rng, lam=0.0).values
        np.testing.assert_allclose(out.mean(axis=0), b.values.mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(out.std(axis=0), b.values.std(axis=0), atol=1e-6)

    def test_lambda_half_averages_statistics(self, rng):
        a, b = spec(rng.uniform(5, 6, (29, 1025))), spec(rng.uniform(1, 3, (29, 1025)))
        out = augment.freq_mix_style(a, b, POWER, rng, lam=0.5).values
        mu = 0.5 * (a.values.mean(axis=0) + b.values.mean(axis=0))
        sd = 0.5 * (a.values.std(axis=0) + b.values.std(axis=0))
        np.testing.assert_allclose(out.mean(axis=0), mu, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=0), sd, atol=1e-6)

    def test_statistics_recomputed_for_100_triples(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            lam = rng.uniform()
            a = rng.normal(3.0, 1.0, (20, 16))
            b = rng.normal(1.0, 2.0, (20, 16))
            out = augment.mix_statistics(a, b, lam)
            np.testing.assert_allclose(out.mean(axis=0), lam * a.mean(0) + (1 - lam) * b.mean(0), atol=1e-6)
            np.testing.assert_allclose(out.std(axis=0), lam * a.std(0) + (1 - lam) * b.std(0), atol=1e-6)

    def test_log_domain_statistics(self, rng):
        a, b = rand_spec(rng), rand_spec(rng)
        out = augment.freq_mix_style(a, b, FreqMixStyleConfig(), rng, lam=0.3).values
        la, lb = np.log(a.values + 1e-10), np.log(b.values + 1e-10)
        lo = np.log(out + 1e-10)
        np.testing.assert_allclose(lo.mean(0), 0.3 * la.mean(0) + 0.7 * lb.mean(0), atol=1e-6)

    def test_silent_bins_stay_finite(self, rng):
        a = rand_spec(rng).values
        a[:, :5] = 0.0
        out = augment.freq_mix_style(spec(a), rand_spec(rng), FreqMixStyleConfig(), rng)
        assert np.all(np.isfinite(out.values))

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            augment.freq_mix_style(rand_spec(rng, t=5), rand_spec(rng, t=6), FreqMixStyleConfig(), rng)

    def test_lambda_is_beta_distributed(self):
        rng = np.random.default_rng(0)
        lams = []
        with mock.patch.object(augment, "mix_statistics", side_effect=lambda a, b, lam, eps: lams.append(lam) or a):
            for _ in range(4000):
                augment.freq_mix_style(spec(np.ones((2, 3))), spec(np.ones((2, 3))), POWER, rng)
        lams = np.array(lams)
        # Beta(0.4, 0.4): mean 0.5, variance ab / ((a+b)^2 (a+b+1)) = 0.1389
        assert abs(lams.mean() - 0.5) < 0.02
        assert abs(lams.var() - 0.16 / (0.64 * 1.8)) < 0.01


# ------------------------------------------------------------- FilterAugment

class TestFilterAugment:
    def test_zero_gains_identity(self, rng):
        x = rand_spec(rng)
        out = augment.filter_augment(x, FilterAugmentConfig(gain_db_range=(0.0, 0.0)), rng)
        np.testing.assert_allclose(out.values, x.values, atol=1e-9)

    def test_gain_bounds(self):
        rng = np.random.default_rng(1)
        x = spec(np.ones((4, CFG.n_bins)))
        for _ in range(50):
            ratio = augment.filter_augment(x, FilterAugmentConfig(), rng).values
            assert np.all(ratio >= 10 ** (-0.6) - 1e-12) and np.all(ratio <= 10 ** 0.6 + 1e-12)

    def test_two_node_interpolation_oracle(self):
        freqs = np.linspace(0, 8000, 17)
        w = augment.filter_augment_weights(freqs, np.array([0.0, 8000.0]), np.array([6.0, -6.0]))
        expected = [10 ** ((6.0 - 12.0 * f / 8000.0) / 10.0) for f in freqs]
        np.testing.assert_allclose(w, expected, atol=1e-9)

    def test_time_invariant_mask(self, rng):
        x = rand_spec(rng)
        out = augment.filter_augment(x, FilterAugmentConfig(), rng).values
        weights = out / x.values
        np.testing.assert_allclose(weights, np.broadcast_to(weights[0], weights.shape), rtol=1e-12)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_band_layout(self, seed):
        cfg = FilterAugmentConfig()
        nodes = augment.sample_band_nodes(cfg, 8000.0, np.random.default_rng(seed))
        assert nodes[0] == 0.0 and nodes[-1] == 8000.0
        assert 3 <= len(nodes) - 1 <= 9
        assert np.all(np.diff(nodes) >= 187.0)

    def test_infeasible_layout(self, rng):
        with pytest.raises(ConfigError):
            augment.sample_band_nodes(FilterAugmentConfig(min_bandwidth_hz=3000.0), 8000.0, rng)


# --------------------------------------------------------------- FreqMask

class TestFreqMask:
    def test_zero_width_identity(self, rng):
        x = rand_spec(rng)
        out = augment.freq_mask(x, FreqMaskConfig(), rng, band=(17, 0))
        np.testing.assert_array_equal(out.values, x.values)

    def test_full_mask(self, rng):
        cfg = FreqMaskConfig(max_width=128)
        out = augment.freq_mask(rand_spec(rng), cfg, rng, band=(0, 128))
        assert not np.any(out.values)

    def test_band_10_20_oracle(self, rng):
        nyq_mel = 2595.0 * math.log10(1 + 8000.0 / 700.0)
        step = nyq_mel / 128

        def to_hz(m):
            return 700.0 * (10 ** (m / 2595.0) - 1)

        lo, hi = to_hz(10 * step), to_hz(20 * step)
        expected = [lo <= k * 16000 / 2048 < hi for k in range(CFG.n_bins)]
        x = rand_spec(rng)
        out = augment.freq_mask(x, FreqMaskConfig(), rng, band=(10, 10)).values
        zeroed = np.all(out == 0, axis=0)
        np.testing.assert_array_equal(zeroed, expected)
        np.testing.assert_array_equal(out[:, ~zeroed], x.values[:, ~zeroed])

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_only_band_changes(self, seed):
        rng = np.random.default_rng(seed)
        x = spec(rng.uniform(0.1, 1.0, (3, CFG.n_bins)))
        cfg = FreqMaskConfig()
        f0, width = augment.draw_mask_band(cfg, np.random.default_rng(seed))
        assert 0 <= width <= 30 and 0 <= f0 <= 128 - width
        out = augment.freq_mask(x, cfg, np.random.default_rng(seed)).values
        sel = augment.mel_band_to_bins(f0, width, cfg, CFG)
        assert not np.any(out[:, sel])
        np.testing.assert_array_equal(out[:, ~sel], x.values[:, ~sel])


# -------------------------------------------------------------------- DIR

class TestDir:
    def test_unit_impulse(self, rng):
        w = Waveform(rng.standard_normal(500))
        out = augment.dir_convolve(w, ImpulseResponse(np.array([1.0])))
        np.testing.assert_allclose(out.samples, w.samples, atol=1e-9)

    @pytest.mark.parametrize("k", [1, 7, 100])
    def test_shift(self, rng, k):
        w = Waveform(rng.standard_normal(500))
        taps = np.zeros(k + 1)
        taps[k] = 0.5  # peak normalisation restores unit gain
        out = augment.dir_convolve(w, ImpulseResponse(taps)).samples
        np.testing.assert_allclose(out[k:], w.samples[:-k], atol=1e-9)
        np.testing.assert_allclose(out[:k], 0.0, atol=1e-12)

    @pytest.mark.parametrize("taps", [32, 300])
    def test_direct_sum_oracle(self, rng, taps):
        x = rng.standard_normal(256)
        h = rng.standard_normal(taps)
        hn = h / np.max(np.abs(h))
        expected = [sum(x[n - k] * hn[k] for k in range(taps) if 0 <= n - k < 256) for n in range(256)]
        out = augment.dir_convolve(Waveform(x), ImpulseResponse(h)).samples
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_rate_mismatch(self, rng):
        with pytest.raises(ConfigError):
            augment.dir_convolve(Waveform(np.ones(10)), ImpulseResponse(np.ones(3), sample_rate=8000))

    def test_all_zero_taps_rejected(self):
        with pytest.raises(ConfigError):
            ImpulseResponse(np.zeros(4))


# ------------------------------------------------------------- validation

class TestValidationPerturb:
    def test_infinite_snr_delta_rir(self, rng):
        w = Waveform(rng.standard_normal(2000))
        out = augment.validation_perturb(w, Waveform(rng.standard_normal(10)), ImpulseResponse([1.0]),
                                         math.inf, rng)
        np.testing.assert_allclose(out.samples, w.samples, atol=1e-9)

    def test_zero_db_power_balance(self, rng):
        w = Waveform(rng.standard_normal(4000))
        rir = ImpulseResponse(rng.standard_normal(50))
        wet = augment.dir_convolve(w, rir).samples
        out = augment.validation_perturb(w, Waveform(rng.standard_normal(1000)), rir, 0.0, rng).samples
        noise = out - wet
        assert abs(np.mean(noise ** 2) / np.mean(wet ** 2) - 1.0) < 1e-6

    def test_deterministic(self, rng):
        w = Waveform(rng.standard_normal(3000))
        noise = Waveform(rng.standard_normal(5000))
        rir = ImpulseResponse(rng.standard_normal(20))
        a = augment.validation_perturb(w, noise, rir, 10.0, np.random.default_rng(3)).samples
        b = augment.validation_perturb(w, noise, rir, 10.0, np.random.default_rng(3)).samples
        assert a.tobytes() == b.tobytes()

    def test_zero_power_noise(self, rng):
        with pytest.raises(ConfigError):
            augment.validation_perturb(Waveform(np.ones(100)), Waveform(np.zeros(100)),
                                       ImpulseResponse([1.0]), 10.0, rng)


# ----------------------------------------------------------------- policy

def wave_batch(rng, n, length=24000):
    return [(Waveform(rng.standard_normal(length) * 0.1), i % 2) for i in range(n)]


class TestPolicy:
    def test_p_zero_identity(self, rng):
        batch = wave_batch(rng, 8)
        out = augment.apply_policy(batch, AugmentationPolicy(apply_probability=0.0), rng)
        assert all(o is w for o, (w, _) in zip(out, batch))

    def test_dir_delta_identity(self, rng):
        batch = wave_batch(rng, 4)
        pol = AugmentationPolicy(apply_probability=1.0, enabled=(augment.DIR,),
                                 impulse_responses=[ImpulseResponse([1.0])])
        for o, (w, _) in zip(augment.apply_policy(batch, pol, rng), batch):
            np.testing.assert_allclose(o.samples, w.samples, atol=1e-6)

    def test_gate_count_for_1000(self):
        rng = np.random.default_rng(2024)
        batch = [(Waveform(np.zeros(16)), 0)] * 1000
        pol = AugmentationPolicy(apply_probability=0.2, enabled=())
        _, gates = augment.apply_policy(batch, pol, rng, return_mask=True)
        assert 160 <= gates.sum() <= 240

    def test_gate_rate_by_simulation(self):
        counts = []
        for s in range(200):
            gates = np.random.default_rng(s).random(1000) < 0.2
            counts.append(gates.sum())
        inside = np.mean([(160 <= c <= 240) for c in counts])
        assert inside > 0.95

    @pytest.mark.parametrize("tech", [augment.FREQ_MASK, augment.FILTER_AUGMENT, augment.FREQ_MIX_STYLE])
    def test_spectral_roundtrip_keeps_length(self, rng, tech):
        batch = wave_batch(rng, 4, 20000)
        pol = AugmentationPolicy(apply_probability=1.0, enabled=(tech,))
        out = augment.apply_policy(batch, pol, rng)
        assert [len(o) for o in out] == [20000] * 4
        assert all(np.all(np.isfinite(o.samples)) for o in out)

    def test_unit_spectral_change_is_near_identity(self, rng):
        # zero-gain FilterAugment reduces the policy to STFT -> ISTFT
        w = Waveform(rng.standard_normal(24000))
        pol = AugmentationPolicy(apply_probability=1.0, enabled=(augment.FILTER_AUGMENT,),
                                 filter_augment=FilterAugmentConfig(gain_db_range=(0.0, 0.0)))
        out = augment.augment_one(w, augment.FILTER_AUGMENT, pol, rng)
        np.testing.assert_allclose(out.samples, w.samples, atol=1e-9)

    def test_phase_is_preserved(self, rng):
        w = Waveform(rng.standard_normal(24000))
        seen = {}
        real = augment.resynthesise

        def spy(mag, phase, cfg, n, pad):
            seen["phase"] = phase
            return real(mag, phase, cfg, n, pad)

        pol = AugmentationPolicy(apply_probability=1.0)
        with mock.patch.object(augment, "resynthesise", side_effect=spy):
            augment.augment_one(w, augment.FREQ_MASK, pol, rng)
        spec, _ = augment._analysis(w, CFG)
        assert seen["phase"].tobytes() == np.angle(spec.frames).tobytes()

    def test_reproducible(self):
        batch = wave_batch(np.random.default_rng(0), 6)
        pol = AugmentationPolicy(apply_probability=0.5,
                                 enabled=(augment.FREQ_MASK, augment.FILTER_AUGMENT, augment.FREQ_MIX_STYLE))
        a = augment.apply_policy(batch, pol, np.random.default_rng(9))
        b = augment.apply_policy(batch, pol, np.random.default_rng(9))
        assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a, b))

    def test_no_partner_skips_mixing(self, rng):
        batch = [(Waveform(rng.standard_normal(4000)), 1)]
        pol = AugmentationPolicy(apply_probability=1.0, enabled=(augment.FREQ_MIX_STYLE,))
        out, gates = augment.apply_policy(batch, pol, rng, return_mask=True)
        assert gates[0]
        np.testing.assert_array_equal(out[0].samples, batch[0][0].samples)

    def test_partner_has_same_label(self, rng):
        batch = wave_batch(rng, 6, 4000)
        labels = {id(w): y for w, y in batch}
        partners = []
        real = augment.augment_one

        def spy(w, tech, policy, srng, partner=None):
            partners.append((labels[id(w)], labels[id(partner)]))
            return real(w, tech, policy, srng, partner)

        pol = AugmentationPolicy(apply_probability=1.0, enabled=(augment.FREQ_MIX_STYLE,))
        with mock.patch.object(augment, "augment_one", side_effect=spy):
            augment.apply_policy(batch, pol, rng)
        assert len(partners) == 6 and all(a == b for a, b in partners)

    def test_bad_policy(self):
        with pytest.raises(ConfigError):
            AugmentationPolicy(apply_probability=1.5)
        with pytest.raises(ConfigError):
            AugmentationPolicy(enabled=("time_warp",))


@given(arrays(np.float64, (6, 40), elements=st.floats(0, 1e3)), st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_magnitude_transforms_preserve_shape_and_sign(values, seed):
    rng = np.random.default_rng(seed)
    x = spec(values)
    other = spec(np.random.default_rng(seed + 1).uniform(0, 10, values.shape))
    outs = [
        augment.freq_mix_style(x, other, FreqMixStyleConfig(), rng),
        augment.freq_mix_style(x, other, POWER, rng),
        augment.filter_augment(x, FilterAugmentConfig(), rng),
        augment.freq_mask(x, FreqMaskConfig(), rng),
    ]
    for out in outs:
        assert out.values.shape == values.shape
        assert np.all(out.values >= 0)
