import sys, pathlib
import contextlib
import io
import json
import tempfile

import numpy as np

sys.path.append(str(pathlib.Path(__file__).parent / "src"))
from nvphasor.cli import main
from nvphasor.experiments import crossed_coil_model
from nvphasor.fileio import read_ellipse_points, read_json, write_json
from nvphasor.polarization import coupled_coil_phasors
from nvphasor.reconstruct import AcFitResult


def run(argv):
    """Exit status and stderr of one CLI invocation."""
    err = io.StringIO()
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(err):
        status = main([str(a) for a in argv])
    return status, err.getvalue()


def error_payload(stderr):
    return json.loads(stderr.strip().splitlines()[-1])


def test_synth_fit_ellipse():
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        write_json(root / "scenario.json", {"noise_std": 0.0, "seed": 3})
        write_json(root / "config.json", {"lineshape": {"linewidth_guess_hz": 4e6}})

        status, _ = run(["synth", root / "scenario.json", "--out", root])
        assert status == 0
        index = read_json(root / "index.json")
        assert index["records"][0]["fm"] == "synthetic_fm.csv"

        status, stderr = run([
            "fit", root / "synthetic_fm.csv", root / "synthetic_ac.csv",
            "--config", root / "config.json", "--out", root,
        ])
        assert status == 0, stderr
        result = read_json(root / "synthetic_ac.result.json")
        truth = read_json(root / "synthetic_truth.json")
        recovered = np.array(result["ac"]["b_ac_t"]["real"]) + 1j * np.array(result["ac"]["b_ac_t"]["imag"])
        expected = np.array(truth["b_ac_t"]["real"]) + 1j * np.array(truth["b_ac_t"]["imag"])
        assert np.max(np.abs(recovered - expected)) < 1e-3 * np.max(np.abs(expected))
        assert np.allclose(result["dc"]["b_dc_t"], truth["b_dc_t"], atol=1e-7)
        assert result["provenance"]["command"] == "fit"
        assert len(result["provenance"]["inputs"]) == 2
        assert result["provenance"]["config_sha256"]

        status, _ = run(["ellipse", root / "synthetic_ac.result.json", "--n-points", 90])
        assert status == 0
        points = read_ellipse_points(root / "synthetic_ac.result.ellipse.csv")
        assert points.shape == (90, 4)
        major = np.linalg.norm(result["ellipse"]["semi_major_t"])
        assert np.max(np.linalg.norm(points[:, 1:], axis=1)) <= major * (1 + 1e-12)


def test_synth_rotation_series():
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        write_json(root / "scenario.json", {"rotation": {"n_angles": 3}, "noise_std": 0.0})
        status, _ = run(["synth", root / "scenario.json", "--out", root, "--seed", 12])
        assert status == 0
        names = [r["name"] for r in read_json(root / "index.json")["records"]]
        assert names == ["angle_00", "angle_01", "angle_02"]
        assert read_json(root / "angle_01_truth.json")["scenario"]["seed"] == 13


def test_missing_input_exits_with_2():
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        status, stderr = run(["fit", root / "nope_fm.csv", root / "nope_ac.csv", "--out", root])
    assert status == 2
    assert error_payload(stderr)["error"] == "input-not-found"


def test_parse_error_names_line():
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        (root / "bad.csv").write_text("freq_hz,x,y\n1,0,0\n2,0,0\n3,abc,0\n")
        status, stderr = run(["fit", root / "bad.csv", root / "bad.csv", "--out", root])
    assert status == 2
    payload = error_payload(stderr)
    assert payload["error"] == "parse-error"
    assert payload["details"]["line"] == 4


def test_unknown_scenario_key_is_invalid_input():
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        write_json(root / "scenario.json", {"noise": 0.1})
        status, stderr = run(["synth", root / "scenario.json", "--out", root])
    assert status == 2
    assert error_payload(stderr)["error"] == "invalid-input"


def test_coils_command():
    phasors = coupled_coil_phasors(crossed_coil_model(m_c=0.1))
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        paths = []
        for name, phasor in zip(("a", "b", "ab"), phasors):
            path = root / f"coil_{name}.result.json"
            write_json(path, {"ac": AcFitResult(phasor, 0.0, True, 1).to_dict()})
            paths.append(path)
        status, stderr = run(["coils", *paths, "--out", root])
        assert status == 0, stderr
        payload = read_json(root / "coils.json")
    assert abs(payload["model"]["m_c"] - 0.1) < 1e-6
    assert payload["residual_t2"] < 1e-24
    assert set(payload["ellipses"]) == {"a", "b", "ab"}

def test_bootstrap_command_is_reproducible():
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        write_json(root / "scenario.json", {"noise_std": 0.01, "seed": 4})
        write_json(root / "config.json", {"lineshape": {"linewidth_guess_hz": 4e6}})
        assert run(["synth", root / "scenario.json", "--out", root])[0] == 0
        outputs = []
        for name in ("first", "second"):
            status, stderr = run([
                "bootstrap", root / "synthetic_fm.csv", root / "synthetic_ac.csv",
                "--config", root / "config.json", "--n", 100, "--seed", 9, "--out", root / name,
            ])
            assert status == 0, stderr
            outputs.append((root / name / "synthetic_ac.bootstrap.json").read_bytes())
        assert outputs[0] == outputs[1], "same seed must give a byte-identical report"
        report = json.loads(outputs[0])
        assert report["n_replicas"] == 100 and len(report["replicas"]) == 100
        assert report["metadata"]["seed"] == 9
        assert report["provenance"]["command"] == "bootstrap"

        status, stderr = run([
            "bootstrap", root / "synthetic_fm.csv", root / "synthetic_ac.csv",
            "--config", root / "config.json", "--n", 50, "--out", root,
        ])
    assert status == 2
    assert error_payload(stderr)["error"] == "invalid-input"


def test_undecodable_spectrum_is_a_parse_error():
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        (root / "bad.csv").write_bytes(b"# kind=\xff\xfe\nfreq_hz,x,y\n1,0,0\n")
        status, stderr = run(["fit", root / "bad.csv", root / "bad.csv", "--out", root])
    assert status == 2
    payload = error_payload(stderr)
    assert payload["error"] == "parse-error"
    assert payload["details"]["line"] == 1


def test_malformed_metadata_is_a_parse_error():
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        rows = "".join(f"{2.8e9 + k * 1e6},0,0\n" for k in range(60))
        (root / "bad.csv").write_text("# kind=fm\n# demod_frequency_hz=abc\nfreq_hz,x,y\n" + rows)
        status, stderr = run(["fit", root / "bad.csv", root / "bad.csv", "--out", root])
    assert status == 2
    payload = error_payload(stderr)
    assert payload["error"] == "parse-error"
    assert payload["details"]["line"] == 2


if __name__ == "__main__":
    test_synth_fit_ellipse()
    test_synth_rotation_series()
    test_missing_input_exits_with_2()
    test_parse_error_names_line()
    test_unknown_scenario_key_is_invalid_input()
    test_coils_command()
    test_bootstrap_command_is_reproducible()
    test_undecodable_spectrum_is_a_parse_error()
    test_malformed_metadata_is_a_parse_error()
    print("All tests passed")
