import math

import numpy as np
import pytest

from hdrstack.calibration import (
    CalibrationError,
    NoiseSample,
    exclude_low_snr,
    fit_noise_params,
    format_samples_csv,
    initial_guess,
    model_std,
    predict_relative_std,
    read_samples_csv,
)
from hdrstack.noise import CameraNoiseParams, Channel, ExposureMeta, pixel_mean, pixel_variance

GAINS = (1.0, 2.0, 4.0, 8.0, 16.0)


def forward_samples(params, levels=np.geomspace(2.0, 12000.0, 30), gains=GAINS):
    out = []
    for ch in "RGB":
        for g in gains:
            for mu in levels:
                std = model_std(mu, g, params.k(ch), params.sigma_read, params.sigma_adc)
                out.append(NoiseSample(float(mu), float(std), g, ch, 10_000))
    return out


class TestModel:
    def test_std_matches_noise_model(self, a7r3):
        # a patch of mean mu at gain g came from phi * t = mu / (g k)
        for ch in "RGB":
            k = a7r3.k(ch)
            mu, g = 800.0, 4.0
            phi = mu / (g * k)
            var = pixel_variance(phi, ExposureMeta(1.0, g), a7r3, ch)
            assert pixel_mean(phi, ExposureMeta(1.0, g), a7r3, ch) == pytest.approx(mu)
            assert model_std(mu, g, k, a7r3.sigma_read, a7r3.sigma_adc) == pytest.approx(math.sqrt(var))

    def test_predict_relative_std(self, a7r3):
        # sqrt(1000 * 8 * 0.384 + 0.705**2 * 64 * 0.384**2 + 3.028**2 * 0.384**2) / 1000
        expected = math.sqrt(3072 + 4.6904 + 1.35198) / 1000
        got = predict_relative_std(1000.0, 8.0, a7r3, "G")
        assert got == pytest.approx(expected, rel=1e-5)
        assert got == pytest.approx(0.0555, abs=5e-5)

    def test_green_gain_one(self, a7r3):
        # photon term in counts is mean * g * k; static terms as in the noise model
        expected = math.sqrt(100 * 0.384 + 0.705**2 * 0.384**2 + 3.028**2 * 0.384**2) / 100
        assert predict_relative_std(100.0, 1.0, a7r3, "G") == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.0631, abs=5e-5)

    def test_snr_one_at_one_photon(self):
        cam = CameraNoiseParams("clean", 0.7, 0.7, 0.7, 0.0, 0.0)
        assert predict_relative_std(4 * 0.7, 4.0, cam, "R") == pytest.approx(1.0, rel=1e-12)

    def test_photon_asymptote(self, a7r3):
        mean = 1e9
        assert predict_relative_std(mean, 2.0, a7r3, "G") == pytest.approx(math.sqrt(2 * 0.384 / mean), rel=1e-6)

    def test_predict_rejects_nonpositive(self, a7r3):
        with pytest.raises(ValueError):
            predict_relative_std(0.0, 1.0, a7r3, "G")

    def test_relative_std_falls_with_mean(self, a7r3):
        rel = predict_relative_std(np.geomspace(1, 1e4, 20), 2.0, a7r3, "B")
        assert np.all(np.diff(rel) < 0)


class TestSamples:
    def test_snr_boundary_inclusive(self):
        kept = exclude_low_snr([NoiseSample(2.0, 2.0, 1, "G"), NoiseSample(1.0, 2.0, 1, "G"),
                                NoiseSample(3.0, 0.0, 1, "G")])
        assert [s.mean for s in kept] == [2.0, 3.0]

    @pytest.mark.parametrize("mean,std,kept", [(10, 5, True), (1, 2, False), (3, 3, True)])
    def test_snr_examples(self, mean, std, kept):
        assert bool(exclude_low_snr([NoiseSample(mean, std, 1.0, "R")])) is kept

    def test_idempotent(self, a7r3):
        once = exclude_low_snr(forward_samples(a7r3))
        assert exclude_low_snr(once) == once

    def test_invalid(self):
        with pytest.raises(ValueError):
            NoiseSample(1.0, -1.0, 1.0, "G")
        with pytest.raises(ValueError):
            NoiseSample(1.0, 1.0, 0.0, "G")
        with pytest.raises(ValueError):
            NoiseSample(1.0, 1.0, 1.0, "G", count=1)

    def test_csv_roundtrip(self, a7r3):
        samples = forward_samples(a7r3, levels=[10.0, 1000.0], gains=(1.0, 4.0))
        assert read_samples_csv(format_samples_csv(samples)) == samples

    def test_csv_file(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("mean,std,gain,channel,count\n100,10,1,R,50\n")
        assert read_samples_csv(path) == [NoiseSample(100.0, 10.0, 1.0, Channel.R, 50)]

    def test_csv_bad_header(self):
        with pytest.raises(CalibrationError):
            read_samples_csv("mean,std\n1,2\n")

    def test_csv_bad_row(self):
        with pytest.raises(CalibrationError, match="line 2"):
            read_samples_csv("mean,std,gain,channel,count\n1,2,1,Q,5\n")

    def test_initial_guess_bright_slope(self, a7r3):
        guess = initial_guess(forward_samples(a7r3))
        for ch in Channel:
            assert guess[ch] == pytest.approx(a7r3.k(ch), rel=0.05)


class TestFit:
    def test_noiseless_roundtrip(self, a7r3):
        res = fit_noise_params(forward_samples(a7r3))
        p = res.params
        assert res.converged
        for name in ("k_r", "k_g", "k_b", "sigma_read", "sigma_adc"):
            assert getattr(p, name) == pytest.approx(getattr(a7r3, name), rel=1e-4), name
        assert res.residual < 1e-6

    def test_other_camera(self, t1i):
        p = fit_noise_params(forward_samples(t1i)).params
        assert p.sigma_read == pytest.approx(t1i.sigma_read, rel=1e-3)
        assert p.sigma_adc == pytest.approx(t1i.sigma_adc, rel=1e-3)

    def test_too_few_samples(self):
        with pytest.raises(CalibrationError):
            fit_noise_params([NoiseSample(100.0, 10.0, 1.0, "G")] * 4)

    def test_low_snr_counted(self, a7r3):
        base = forward_samples(a7r3)
        already = sum(s.mean < s.std for s in base)
        samples = base + [NoiseSample(0.5, 3.0, 1.0, "G")] * 3
        res = fit_noise_params(samples)
        assert res.n_excluded == already + 3
        assert res.n_used == len(base) - already

    def test_single_gain_flagged(self, a7r3):
        res = fit_noise_params(forward_samples(a7r3, gains=(4.0,)))
        assert not res.converged
        assert "single gain" in res.message

    def test_zero_static_noise(self):
        cam = CameraNoiseParams("clean", 0.5, 0.5, 0.5, 0.0, 0.0)
        res = fit_noise_params(forward_samples(cam))
        assert res.params.k_g == pytest.approx(0.5, rel=1e-3)
        assert res.params.sigma_read <= 1e-3 and res.params.sigma_adc <= 1e-3

    def test_residual_not_worse_than_start(self, a7r3):
        rng = np.random.default_rng(1)
        noisy = [NoiseSample(s.mean, s.std * rng.uniform(0.9, 1.1), s.gain, s.channel, s.count)
                 for s in forward_samples(a7r3)]
        for init in (None, CameraNoiseParams("far", 2.0, 0.05, 1.0, 20.0, 0.01)):
            res = fit_noise_params(noisy, init)
            assert res.residual <= res.initial_residual

    def test_init_carries_metadata(self, a7r3):
        init = CameraNoiseParams("mine", 0.3, 0.3, 0.3, 1.0, 1.0, black_level=512, saturation=4095, bit_depth=12)
        p = fit_noise_params(forward_samples(a7r3), init).params
        assert (p.name, p.black_level, p.saturation, p.bit_depth) == ("mine", 512, 4095, 12)
