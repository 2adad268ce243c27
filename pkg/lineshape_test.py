import sys, pathlib

import numpy as np
import pytest

sys.path.append(str(pathlib.Path(__file__).parent / "src"))
from nvphasor.errors import CalibrationError, DetectionError, InvalidInputError
from nvphasor.lineshape import (
    FitSettings,
    FmCalibration,
    LineshapeFit,
    QuadratureSpectrum,
    calibrate_modulations,
    derivative_gaussian,
    fit_lineshapes,
    linearity_guard,
)
from nvphasor.simulate import SyntheticScenario, generate_pair
from nvphasor.spin import ALL_LABELS, ModulationSet

FREQS = np.linspace(2.82e9, 2.92e9, 1001)


def single_line(a_x=1.0, a_y=0.5, center=2.87e9, sigma=5e6, noise=0.0, seed=0):
    g = derivative_gaussian(FREQS, center, sigma)
    rng = np.random.default_rng(seed)
    return QuadratureSpectrum(
        FREQS,
        a_x * g + rng.normal(0.0, noise, len(FREQS)),
        a_y * g + rng.normal(0.0, noise, len(FREQS)),
    )


def test_derivative_gaussian_extrema():
    sigma = 5e6
    assert derivative_gaussian(2.87e9 - sigma, 2.87e9, sigma) == pytest.approx(1.0)
    assert derivative_gaussian(2.87e9 + sigma, 2.87e9, sigma) == pytest.approx(-1.0)
    assert derivative_gaussian(2.87e9, 2.87e9, sigma) == 0.0


def test_noise_free_single_line_recovered():
    fits = fit_lineshapes(single_line(), 1)
    assert len(fits) == 1
    fit = fits[0]
    assert fit.center == pytest.approx(2.87e9, rel=1e-6)
    assert fit.sigma == pytest.approx(5e6, rel=1e-6)
    assert fit.amplitude.real == pytest.approx(1.0, rel=1e-6)
    assert fit.amplitude.imag == pytest.approx(0.5, rel=1e-6)
    assert fit.converged


def test_noisy_single_line_center_within_tenth_sigma():
    for seed in range(5):
        fit = fit_lineshapes(single_line(noise=0.01, seed=seed), 1)[0]
        assert abs(fit.center - 2.87e9) < 0.1 * 5e6, f"seed {seed}: {fit.center}"
        assert fit.amplitude_error > 0


def test_eight_line_synthetic_spectrum():
    scenario = SyntheticScenario(noise_std=0.0)
    fm, _ = generate_pair(scenario)
    fits = fit_lineshapes(fm, 8, settings=FitSettings(linewidth_guess=scenario.linewidth_sigma))
    centers = np.array([f.center for f in fits])
    expected = np.sort(scenario.resonance_centers().ravel())
    assert np.all(np.diff(centers) > 0), "fits must come back sorted by center"
    assert np.max(np.abs(centers - expected)) < 1e3, f"center errors {centers - expected}"
    for f in fits:
        assert f.sigma == pytest.approx(scenario.linewidth_sigma, rel=1e-4)
        assert f.amplitude.real == pytest.approx(1.0, rel=1e-4)


def test_amplitudes_scale_linearly():
    spectrum = single_line(a_x=0.3, a_y=-0.8, noise=0.01, seed=3)
    base = fit_lineshapes(spectrum, 1)[0]
    scaled = fit_lineshapes(spectrum.scaled(7.5), 1)[0]
    assert abs(scaled.amplitude - 7.5 * base.amplitude) < 1e-8 * abs(7.5 * base.amplitude)
    assert scaled.center == pytest.approx(base.center, rel=1e-12)


def test_quadrature_rotation_rotates_amplitudes():
    spectrum = single_line(a_x=1.0, a_y=0.0)
    locked = fit_lineshapes(
        spectrum.rotated(0.6), 1, [2.87e9], initial_sigmas=[5e6], fixed_geometry=True
    )[0]
    assert locked.amplitude == pytest.approx(np.exp(0.6j), abs=1e-9)


def test_too_few_resonances_detected():
    freqs = np.linspace(2.75e9, 2.99e9, 2401)
    g = derivative_gaussian(freqs, 2.85e9, 4e6) + derivative_gaussian(freqs, 2.89e9, 4e6)
    spectrum = QuadratureSpectrum(freqs, g, 0.2 * g)
    with pytest.raises(DetectionError) as info:
        fit_lineshapes(spectrum, 8)
    assert len(info.value.found_centers) == 2
    assert info.value.to_dict()["error"] == "detection-failed"


def test_spectrum_validation():
    with pytest.raises(InvalidInputError):
        QuadratureSpectrum(FREQS[:20], np.zeros(20), np.zeros(20))
    with pytest.raises(InvalidInputError):
        QuadratureSpectrum(FREQS[::-1], np.zeros(len(FREQS)), np.zeros(len(FREQS)))
    with pytest.raises(InvalidInputError):
        QuadratureSpectrum(FREQS, np.zeros(len(FREQS)), np.zeros(len(FREQS) - 1))
    bad = np.zeros(len(FREQS))
    bad[10] = np.nan
    with pytest.raises(InvalidInputError):
        QuadratureSpectrum(FREQS, bad, np.zeros(len(FREQS)))


def fits_with(amplitude, error=1e-3, sigma=4e6):
    return [
        LineshapeFit(2.8e9 + 1e7 * k, sigma, complex(amplitude), 0.0, amplitude_error=error)
        for k in range(8)
    ]


def test_calibration_with_equal_amplitudes():
    a_fm = 0.6 + 0.8j
    cal = FmCalibration(1e5, fits_with(a_fm))
    mods = calibrate_modulations(fits_with(a_fm), cal, ALL_LABELS)
    for label, m in mods:
        assert abs(m) == pytest.approx(1e5, rel=1e-12), f"{label}: {m}"
        assert np.angle(m) == pytest.approx(np.angle(a_fm), abs=1e-12)
    assert mods.uncertainty is not None and np.all(mods.uncertainty > 0)


def test_calibration_of_quadrature_response():
    cal = FmCalibration(1e5, fits_with(2.0))
    mods = calibrate_modulations(fits_with(2.0j), cal, ALL_LABELS)
    assert np.allclose(mods.values, 1e5j)


def test_phase_reference_removes_instrument_phase():
    phase = np.exp(0.9j)
    cal = FmCalibration(1e5, fits_with(1.5 * phase))
    mods = calibrate_modulations(fits_with(0.3 * phase), cal, ALL_LABELS, phase_reference=True)
    assert np.allclose(mods.values, 2e4, atol=1e-9)


def test_unresolved_fm_amplitude_rejected():
    cal = FmCalibration(1e5, fits_with(1.0, error=0.2))
    with pytest.raises(CalibrationError):
        calibrate_modulations(fits_with(1.0), cal, ALL_LABELS)


def test_calibration_needs_eight_fm_fits():
    with pytest.raises(InvalidInputError):
        FmCalibration(1e5, fits_with(1.0)[:7])


def test_linearity_guard():
    fits = fits_with(1.0)
    assert linearity_guard(ModulationSet.zeros(), fits, ALL_LABELS) == []
    values = np.zeros((4, 2), dtype=complex)
    values[0, 0] = 4e6  # |M| equal to the linewidth on resonance -1
    warnings = linearity_guard(ModulationSet(values), fits, ALL_LABELS)
    assert len(warnings) == 1
    assert warnings[0].label == ALL_LABELS[0]
    assert warnings[0].ratio == pytest.approx(1.0)
    # the threshold itself is still linear
    values[0, 0] = 0.2 * 4e6
    assert linearity_guard(ModulationSet(values), fits, ALL_LABELS, ratio=0.2) == []

def test_frequency_shift_moves_centers():
    spectrum = single_line(a_x=0.7, a_y=-0.4, noise=0.01, seed=8)
    base = fit_lineshapes(spectrum, 1)[0]
    delta = 3.3e6
    moved = fit_lineshapes(spectrum.shifted(delta), 1)[0]
    assert moved.center - base.center == pytest.approx(delta, abs=1e-3 * 5e6)
    assert moved.sigma == pytest.approx(base.sigma, rel=1e-6)
    assert abs(moved.amplitude - base.amplitude) < 1e-6 * abs(base.amplitude)


def test_linearity_guard_at_half_linewidth():
    fits = fits_with(1.0)
    values = np.zeros((4, 2), dtype=complex)
    values[2, 1] = 0.5 * 4e6
    warnings = linearity_guard(ModulationSet(values), fits, ALL_LABELS)
    assert [w.label for w in warnings] == [ALL_LABELS[5]]
    assert warnings[0].ratio == pytest.approx(0.5)
    assert "outside the linear regime" in str(warnings[0])


if __name__ == "__main__":
    test_derivative_gaussian_extrema()
    test_noise_free_single_line_recovered()
    test_noisy_single_line_center_within_tenth_sigma()
    test_eight_line_synthetic_spectrum()
    test_amplitudes_scale_linearly()
    test_quadrature_rotation_rotates_amplitudes()
    test_too_few_resonances_detected()
    test_spectrum_validation()
    test_calibration_with_equal_amplitudes()
    test_calibration_of_quadrature_response()
    test_phase_reference_removes_instrument_phase()
    test_unresolved_fm_amplitude_rejected()
    test_calibration_needs_eight_fm_fits()
    test_linearity_guard()
    test_frequency_shift_moves_centers()
    test_linearity_guard_at_half_linewidth()
    print("All tests passed")
