import sys, pathlib

import numpy as np
import pytest

sys.path.append(str(pathlib.Path(__file__).parent / "src"))
from nvphasor.errors import AmbiguousAssignmentError, InvalidInputError
from nvphasor.geometry import axis_permutation, crystal_symmetries, default_orientation_set, to_nv_frame
from nvphasor.reconstruct import (
    FieldReconstructor,
    ReconstructionSettings,
    canonical_bias_field,
    fit_ac_field,
    fit_dc_field,
    phase_gauge,
)
from nvphasor.spin import (
    BRANCHES,
    ComplexFieldVector,
    ModulationSet,
    RealFieldVector,
    SpinModelParams,
    complex_modulation,
    resonance_frequencies,
)

PARAMS = SpinModelParams()
ORIENT = default_orientation_set()
B_DC = RealFieldVector(1e-3, 2e-3, 3e-3)


def true_centers(b_dc):
    """(4, 2) [f_minus, f_plus] per orientation from the forward model only."""
    out = np.zeros((4, 2))
    for i in range(1, 5):
        pair = resonance_frequencies(PARAMS, to_nv_frame(ORIENT, i, b_dc))
        out[i - 1] = pair.f_minus, pair.f_plus
    return out


def true_modulations(b_dc, b_ac):
    values = np.zeros((4, 2), dtype=complex)
    for i in range(1, 5):
        m_plus, m_minus = complex_modulation(
            PARAMS, to_nv_frame(ORIENT, i, b_dc), to_nv_frame(ORIENT, i, b_ac)
        )
        values[i - 1] = m_minus, m_plus
    return ModulationSet(values)


def test_bias_field_recovered_with_assignment():
    centers = true_centers(B_DC)
    result = fit_dc_field(np.sort(centers.ravel()), PARAMS, ORIENT)
    error = np.abs(result.b_dc.as_array() - B_DC.as_array())
    assert np.max(error) < 1e-6, f"bias field off by {error} T"
    assert result.center_residual_rms < 1.0
    assert not result.degenerate
    sorted_centers = np.sort(centers.ravel())
    for k, label in enumerate(result.assignment):
        expected = centers[label.orientation - 1, BRANCHES.index(label.branch)]
        assert expected == pytest.approx(sorted_centers[k], abs=1.0), f"{label} misassigned"


def test_bias_field_guess_selects_equivalent_orientation():
    symmetric = RealFieldVector(-3e-3, 1e-3, -2e-3)
    centers = np.sort(true_centers(symmetric).ravel())
    # centers alone cannot tell symmetry-equivalent fields apart
    assert np.allclose(centers, np.sort(true_centers(B_DC).ravel()), atol=1.0)
    result = fit_dc_field(centers, PARAMS, ORIENT, RealFieldVector(-2.9e-3, 1.1e-3, -2.2e-3))
    assert np.allclose(result.b_dc.as_array(), symmetric.as_array(), atol=1e-6)


def test_field_along_111_is_ambiguous():
    b = RealFieldVector.from_array(3e-3 * np.ones(3) / np.sqrt(3.0))
    with pytest.raises(AmbiguousAssignmentError) as info:
        fit_dc_field(np.sort(true_centers(b).ravel()), PARAMS, ORIENT, linewidth=1e6)
    collisions = info.value.collisions
    assert collisions, "expected colliding resonance pairs"
    assert all(1 not in (a.orientation, c.orientation) for a, c, _ in collisions)
    assert info.value.exit_status == 4


def test_zero_field_returns_zero():
    result = fit_dc_field(np.full(8, PARAMS.zero_field_splitting), PARAMS, ORIENT)
    assert result.b_dc.norm == 0.0
    assert result.center_residual_rms == 0.0
    assert result.degenerate


def test_bias_field_needs_eight_centers():
    with pytest.raises(InvalidInputError):
        fit_dc_field(np.full(7, 2.87e9), PARAMS, ORIENT)


def test_canonical_bias_field_is_symmetry_invariant():
    b = np.array([0.4e-3, -2.2e-3, 1.3e-3])
    reference = canonical_bias_field(b)
    for s in crystal_symmetries():
        assert np.allclose(canonical_bias_field(s @ b), reference)


def test_ac_phasor_round_trip():
    b_ac = ComplexFieldVector.from_array([1e-6, 1e-6j, 0.0])
    result = fit_ac_field(true_modulations(B_DC, b_ac), B_DC, PARAMS, ORIENT)
    error = np.abs(result.b_ac.as_array() - b_ac.as_array())
    assert np.max(error) < 1e-3 * 1e-6, f"component errors {error}"
    assert result.converged
    assert result.cost < 1e-6


def test_zero_modulations_give_zero_field():
    result = fit_ac_field(ModulationSet.zeros(), B_DC, PARAMS, ORIENT)
    assert result.b_ac.norm == 0.0
    assert result.cost == 0.0


def test_real_field_has_no_imaginary_part():
    b_ac = ComplexFieldVector.from_array([0.8e-6, -0.4e-6, 1.5e-6])
    result = fit_ac_field(true_modulations(B_DC, b_ac), B_DC, PARAMS, ORIENT)
    recovered = result.b_ac.as_array()
    assert np.max(np.abs(recovered.imag)) < 1e-6 * np.linalg.norm(recovered.real)


def test_global_phase_carries_through():
    b_ac = ComplexFieldVector.from_array([1e-6, 0.3e-6j, -0.2e-6])
    base = fit_ac_field(true_modulations(B_DC, b_ac), B_DC, PARAMS, ORIENT).b_ac.as_array()
    turned = true_modulations(B_DC, b_ac.times_phase(1.1))
    result = fit_ac_field(turned, B_DC, PARAMS, ORIENT).b_ac.as_array()
    assert np.allclose(result, base * np.exp(1.1j), atol=1e-4 * 1e-6)


def test_linearized_guess_is_close():
    b_ac = ComplexFieldVector.from_array([1e-6, 1e-6j, 0.5e-6])
    reconstructor = FieldReconstructor(PARAMS, ORIENT)
    guess = reconstructor.linearized_guess(true_modulations(B_DC, b_ac), B_DC.as_array())
    assert np.allclose(guess, b_ac.as_array(), atol=1e-3 * 1e-6)
    assert reconstructor.evaluations > 0


def test_cost_vanishes_at_truth():
    b_ac = ComplexFieldVector.from_array([1e-6, 1e-6j, 0.0])
    mods = true_modulations(B_DC, b_ac)
    reconstructor = FieldReconstructor(PARAMS, ORIENT)
    at_truth = reconstructor.cost(mods, B_DC.as_array(), b_ac.as_array())
    away = reconstructor.cost(mods, B_DC.as_array(), 1.1 * b_ac.as_array())
    assert at_truth < 1e-12
    assert away > 1.0


def test_poor_fit_is_flagged():
    rng = np.random.default_rng(1)
    values = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    mods = ModulationSet(1e4 * values, np.full((4, 2), 1e-3))
    result = fit_ac_field(mods, B_DC, PARAMS, ORIENT)
    assert any("poor fit" in w for w in result.warnings), result.warnings


def test_sign_gauge():
    b = ComplexFieldVector.from_array([0.1e-6, -2e-6 + 0.5e-6j, 0.3e-6j])
    gauged = phase_gauge(b)
    assert np.allclose(gauged.as_array(), -b.as_array())
    assert phase_gauge(gauged) == gauged
    # equal magnitudes: the real part decides, not a near-zero real component
    tied = ComplexFieldVector.from_array([1e-6, -1e-22 + 1e-6j, 0.0])
    assert phase_gauge(tied) == tied
    imaginary = ComplexFieldVector.from_array([0.2e-6j, -1e-6j, 0.0])
    assert np.allclose(phase_gauge(imaginary).as_array(), -imaginary.as_array())
    mods = true_modulations(B_DC, b)
    result = fit_ac_field(
        mods, B_DC, PARAMS, ORIENT, settings=ReconstructionSettings(sign_gauge=True)
    )
    assert result.b_ac.as_array()[1].real > 0


def test_result_serialisation():
    b_ac = ComplexFieldVector.from_array([1e-6, 1e-6j, 0.0])
    dc = fit_dc_field(np.sort(true_centers(B_DC).ravel()), PARAMS, ORIENT)
    ac = fit_ac_field(true_modulations(B_DC, b_ac), dc.b_dc, PARAMS, ORIENT)
    assert type(dc).from_dict(dc.to_dict()) == dc
    restored = type(ac).from_dict(ac.to_dict())
    assert np.array_equal(restored.b_ac.as_array(), ac.b_ac.as_array())


def test_dominant_negative_component_is_reported_positive():
    b = ComplexFieldVector.from_array([-2e-6, 0.3e-6 + 0.1e-6j, 0.1e-6j])
    mods = true_modulations(B_DC, b)
    result = fit_ac_field(mods, B_DC, PARAMS, ORIENT)
    assert result.b_ac.as_array()[0].real > 0, result.b_ac
    assert np.allclose(result.b_ac.as_array(), -b.as_array(), atol=1e-9)
    # the flipped phasor is the same field half a period later
    assert result.cost < 1e-6
    raw = fit_ac_field(
        mods, B_DC, PARAMS, ORIENT, settings=ReconstructionSettings(sign_gauge=False)
    )
    assert np.allclose(raw.b_ac.as_array(), b.as_array(), atol=1e-9)


def test_cost_splits_into_real_and_imaginary_parts():
    truth = ComplexFieldVector.from_array([1e-6, 0.4e-6j, -0.3e-6 + 0.2e-6j])
    mods = true_modulations(B_DC, truth)
    trial = np.array([1.2e-6 + 0.1e-6j, -0.1e-6 + 0.5e-6j, -0.2e-6])
    reconstructor = FieldReconstructor(PARAMS, ORIENT)
    dc = B_DC.as_array()
    whole = reconstructor.cost(mods, dc, trial)
    real_part = reconstructor.cost(ModulationSet(mods.values.real), dc, trial.real)
    imag_part = reconstructor.cost(ModulationSet(mods.values.imag), dc, trial.imag)
    assert whole > 1.0
    assert whole == pytest.approx(real_part + imag_part, rel=1e-9)


def test_cost_is_invariant_under_crystal_symmetries():
    truth = ComplexFieldVector.from_array([1e-6, 0.4e-6j, -0.3e-6])
    mods = true_modulations(B_DC, truth)
    trial = -0.5 * truth.as_array() + np.array([0.2e-6, 0.0, 0.1e-6j])
    reconstructor = FieldReconstructor(PARAMS, ORIENT)
    dc = B_DC.as_array()
    reference = reconstructor.cost(mods, dc, trial)
    assert reference > 1.0
    for s in crystal_symmetries():
        images = axis_permutation(s)
        permuted = np.zeros((4, 2), dtype=complex)
        for i, j in enumerate(images):
            permuted[j - 1] = mods.values[i]
        cost = reconstructor.cost(ModulationSet(permuted), s @ dc, s @ trial)
        assert cost == pytest.approx(reference, rel=1e-9), f"symmetry\n{s}"


def test_doubling_the_ac_field_doubles_the_result():
    b = ComplexFieldVector.from_array([0.6e-6, -0.2e-6 + 0.9e-6j, 0.3e-6j])
    single = fit_ac_field(true_modulations(B_DC, b), B_DC, PARAMS, ORIENT).b_ac.as_array()
    double = fit_ac_field(true_modulations(B_DC, b.scaled(2.0)), B_DC, PARAMS, ORIENT).b_ac.as_array()
    assert np.allclose(double, 2.0 * single, atol=1e-6 * np.linalg.norm(single))


def test_axial_fields_follow_closed_form():
    axis = np.ones(3) / np.sqrt(3.0)
    reconstructor = FieldReconstructor(PARAMS, ORIENT)
    gamma = PARAMS.gyromagnetic_ratio
    d = PARAMS.zero_field_splitting
    for b0 in (0.1e-3, 1e-3, 10e-3):
        f_minus, f_plus = reconstructor.model_frequencies(b0 * axis)[0]
        assert f_minus == pytest.approx(d - gamma * b0, abs=1e-3), f"B={b0}"
        assert f_plus == pytest.approx(d + gamma * b0, abs=1e-3), f"B={b0}"
        m_minus, m_plus = reconstructor.model_modulations(b0 * axis, 1e-6 * axis)[0]
        assert m_plus == pytest.approx(2 * gamma * 1e-6, rel=1e-6), f"B={b0}"
        assert m_minus == pytest.approx(-2 * gamma * 1e-6, rel=1e-6), f"B={b0}"


if __name__ == "__main__":
    test_bias_field_recovered_with_assignment()
    test_bias_field_guess_selects_equivalent_orientation()
    test_field_along_111_is_ambiguous()
    test_zero_field_returns_zero()
    test_bias_field_needs_eight_centers()
    test_canonical_bias_field_is_symmetry_invariant()
    test_ac_phasor_round_trip()
    test_zero_modulations_give_zero_field()
    test_real_field_has_no_imaginary_part()
    test_global_phase_carries_through()
    test_linearized_guess_is_close()
    test_cost_vanishes_at_truth()
    test_poor_fit_is_flagged()
    test_sign_gauge()
    test_result_serialisation()
    test_dominant_negative_component_is_reported_positive()
    test_cost_splits_into_real_and_imaginary_parts()
    test_cost_is_invariant_under_crystal_symmetries()
    test_doubling_the_ac_field_doubles_the_result()
    test_axial_fields_follow_closed_form()
    print("All tests passed")
