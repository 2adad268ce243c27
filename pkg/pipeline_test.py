import sys, pathlib

import numpy as np
import pytest

sys.path.append(str(pathlib.Path(__file__).parent / "src"))
from nvphasor.config import PipelineConfig
from nvphasor.errors import DetectionError, InvalidInputError
from nvphasor.lineshape import FitSettings, QuadratureSpectrum
from nvphasor.pipeline import analyze_reference, analyze_spectrum, phasor_from_result, run_pipeline
from nvphasor.simulate import SyntheticScenario, generate_pair, rotating_coil_scenario
from nvphasor.spin import ComplexFieldVector


def config_for(scenario, **kwargs):
    return PipelineConfig(
        params=scenario.params,
        orient=scenario.orient,
        m_fm=scenario.m_fm,
        lineshape=FitSettings(linewidth_guess=scenario.linewidth_sigma),
        **kwargs,
    )


def test_run_pipeline_over_several_spectra():
    first = SyntheticScenario(noise_std=0.0)
    second = rotating_coil_scenario(amplitude=1e-6, noise_std=0.0)
    fm, ac1 = generate_pair(first)
    _, ac2 = generate_pair(second)
    results = run_pipeline(fm, [ac1, ac2], config_for(first))
    assert len(results) == 2
    assert results[0].dc is results[1].dc, "the bias field comes from the FM spectrum once"
    assert results[1].ac.b_ac.norm == pytest.approx(second.b_ac.norm, rel=1e-3)


def test_dc_refit_per_spectrum():
    scenario = SyntheticScenario(noise_std=0.0)
    config = config_for(scenario, refit_dc_per_spectrum=True)
    fm, ac = generate_pair(scenario)
    result = analyze_spectrum(analyze_reference(fm, config), ac, config)
    truth = scenario.b_ac.as_array()
    assert np.allclose(result.ac.b_ac.as_array(), truth, atol=1e-3 * np.max(np.abs(truth)))
    assert np.allclose(result.dc.b_dc.as_array(), scenario.b_dc.as_array(), atol=1e-6)


def test_free_ac_geometry_matches_locked():
    scenario = SyntheticScenario(noise_std=0.0)
    fm, ac = generate_pair(scenario)
    locked_config = config_for(scenario)
    free_config = config_for(scenario, lock_ac_geometry=False)
    locked = analyze_spectrum(analyze_reference(fm, locked_config), ac, locked_config)
    free = analyze_spectrum(analyze_reference(fm, free_config), ac, free_config)
    assert np.allclose(
        free.ac.b_ac.as_array(), locked.ac.b_ac.as_array(), atol=1e-4 * locked.ac.b_ac.norm
    )


def test_vanishing_ac_field_is_reported_not_raised():
    scenario = SyntheticScenario(b_ac=ComplexFieldVector.zero(), noise_std=0.0)
    config = config_for(scenario)
    fm, ac = generate_pair(scenario)
    result = analyze_spectrum(analyze_reference(fm, config), ac, config)
    assert result.ac.b_ac.norm == 0.0
    assert result.ellipse is None
    assert any(w.startswith("low SNR") for w in result.warnings), result.warnings
    assert any(w.startswith("undefined ellipse") for w in result.warnings), result.warnings
    assert result.to_dict()["ellipse"] is None


def test_strong_modulation_warns_about_linearity():
    scenario = rotating_coil_scenario(amplitude=40e-6, noise_std=0.0)
    config = config_for(scenario)
    fm, ac = generate_pair(scenario)
    result = analyze_spectrum(analyze_reference(fm, config), ac, config)
    assert any("outside the linear regime" in w for w in result.warnings), result.warnings


def test_stage_label_on_detection_failure():
    freqs = np.linspace(2.6e9, 3.1e9, 1001)
    flat = QuadratureSpectrum(freqs, np.zeros(len(freqs)), np.zeros(len(freqs)))
    with pytest.raises(DetectionError) as info:
        analyze_reference(flat, PipelineConfig())
    assert info.value.stage == "lineshape-fit"
    assert info.value.to_dict()["stage"] == "lineshape-fit"


def test_partial_resonance_sets_rejected():
    scenario = SyntheticScenario(noise_std=0.0)
    fm, _ = generate_pair(scenario)
    with pytest.raises(InvalidInputError):
        analyze_reference(fm, config_for(scenario, n_resonances=6))


def test_result_document_round_trip():
    scenario = SyntheticScenario(noise_std=0.0)
    config = config_for(scenario)
    fm, ac = generate_pair(scenario)
    result = analyze_spectrum(analyze_reference(fm, config), ac, config)
    payload = result.to_dict()
    assert set(payload) == {"dc", "fm_fits", "ac_fits", "modulations_hz", "ac", "ellipse", "warnings"}
    assert np.array_equal(phasor_from_result(payload).as_array(), result.ac.b_ac.as_array())
    with pytest.raises(InvalidInputError):
        phasor_from_result({"dc": {}})


if __name__ == "__main__":
    test_run_pipeline_over_several_spectra()
    test_dc_refit_per_spectrum()
    test_free_ac_geometry_matches_locked()
    test_vanishing_ac_field_is_reported_not_raised()
    test_strong_modulation_warns_about_linearity()
    test_stage_label_on_detection_failure()
    test_partial_resonance_sets_rejected()
    test_result_document_round_trip()
    print("All tests passed")
