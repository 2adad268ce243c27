from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .bootstrap import bootstrap
from .config import load_config
from .errors import InvalidInputError, PhasorError
from .fileio import (
    payload_sha256,
    provenance,
    read_json,
    read_spectrum,
    write_ellipse,
    write_json,
    write_spectrum,
)
from .pipeline import phasor_from_result, run_pipeline
from .polarization import (
    CoupledCoilModel,
    align_coil_signs,
    coupled_coil_residual,
    ellipse_from_phasor,
    fit_coupled_coils,
)
from .simulate import (
    SeriesRecord,
    SyntheticScenario,
    generate_crossed_coils,
    generate_pair,
    generate_rotation_series,
)

logger = logging.getLogger(__name__)


def _stamp(payload: Dict, config_digest: Optional[str], inputs: Sequence[Path], command: str) -> Dict:
    payload = dict(payload)
    payload["provenance"] = dict(provenance(config_digest, inputs), command=command)
    return payload


def command_fit(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    fm = read_spectrum(args.fm)
    ac_spectra = [read_spectrum(p) for p in args.ac]
    results = run_pipeline(fm, ac_spectra, config)
    out = Path(args.out)
    for path, result in zip(args.ac, results):
        target = out / f"{Path(path).stem}.result.json"
        write_json(target, _stamp(result.to_dict(), config.digest(), [args.fm, path], "fit"))
        print(target)
    return 0


def _write_record(out: Path, record: SeriesRecord) -> Dict:
    fm_path = write_spectrum(out / f"{record.name}_fm.csv", record.fm)
    ac_path = write_spectrum(out / f"{record.name}_ac.csv", record.ac)
    truth = record.scenario.truth()
    truth["scenario"] = record.scenario.to_dict()
    if record.angle is not None:
        truth["angle_rad"] = record.angle
    truth_path = write_json(out / f"{record.name}_truth.json", truth)
    return {"name": record.name, "fm": fm_path.name, "ac": ac_path.name, "truth": truth_path.name}


def command_synth(args: argparse.Namespace) -> int:
    payload = dict(read_json(args.scenario))
    rotation = payload.pop("rotation", None)
    crossed = payload.pop("crossed_coils", None)
    if rotation is not None and crossed is not None:
        raise InvalidInputError("a scenario may carry a rotation or a crossed_coils block, not both")
    scenario = SyntheticScenario.from_dict(payload)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)

    if rotation is not None:
        records = generate_rotation_series(
            scenario, int(rotation.get("n_angles", 12)), rotation.get("axis", (0.0, 0.0, 1.0))
        )
    elif crossed is not None:
        records = generate_crossed_coils(scenario, CoupledCoilModel.from_dict(crossed))
    else:
        fm, ac = generate_pair(scenario)
        records = [SeriesRecord("synthetic", scenario, fm, ac)]

    out = Path(args.out)
    entries = [_write_record(out, record) for record in records]
    index = {
        "records": entries,
        "scenario_sha256": payload_sha256(scenario.to_dict()),
        "tool_version": __version__,
    }
    write_json(out / "index.json", index)
    print(out / "index.json")
    return 0


def command_bootstrap(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    fm = read_spectrum(args.fm)
    ac = read_spectrum(args.ac)
    report = bootstrap(
        fm, ac, config, args.n, args.seed,
        noise_scale=args.noise_scale, workers=args.workers, progress=args.progress,
    )
    target = Path(args.out) / f"{Path(args.ac).stem}.bootstrap.json"
    write_json(target, _stamp(report.to_dict(), config.digest(), [args.fm, args.ac], "bootstrap"))
    print(target)
    return 0


def command_ellipse(args: argparse.Namespace) -> int:
    phasor = phasor_from_result(read_json(args.result))
    ellipse = ellipse_from_phasor(phasor, args.n_points)
    target = Path(args.out) if args.out else Path(args.result).with_suffix(".ellipse.csv")
    write_ellipse(target, ellipse)
    print(target)
    return 0


def command_coils(args: argparse.Namespace) -> int:
    phasors = [phasor_from_result(read_json(p)) for p in (args.coil_a, args.coil_b, args.coil_ab)]
    phasors = list(align_coil_signs(*phasors))
    model = fit_coupled_coils(*phasors)
    payload = {
        "model": model.to_dict(),
        "residual_t2": coupled_coil_residual(model, *phasors),
        "ellipses": {
            name: ellipse_from_phasor(p).to_dict() for name, p in zip(("a", "b", "ab"), phasors)
        },
    }
    target = Path(args.out) / "coils.json"
    write_json(target, _stamp(payload, None, [args.coil_a, args.coil_b, args.coil_ab], "coils"))
    print(target)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvphasor",
        description=(
            "Reconstruct AC magnetic-field phasors from quadrature ODMR spectra of an "
            "NV-center ensemble, with polarization ellipses and bootstrap uncertainties."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--debug", action="store_true", help="Verbose optimizer logging.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    fit = subparsers.add_parser("fit", help="Reconstruct B_DC and the AC phasor from spectra.")
    fit.add_argument("fm", help="FM calibration spectrum CSV.")
    fit.add_argument("ac", nargs="+", help="AC spectrum CSV(s).")
    fit.add_argument("--config", help="Pipeline config JSON.")
    fit.add_argument("--out", default=".", help="Output directory.")
    fit.set_defaults(func=command_fit)

    synth = subparsers.add_parser("synth", help="Generate synthetic spectra from a scenario.")
    synth.add_argument("scenario", help="Scenario JSON.")
    synth.add_argument("--seed", type=int, help="Override the scenario seed.")
    synth.add_argument("--out", default=".", help="Output directory.")
    synth.set_defaults(func=command_synth)

    boot = subparsers.add_parser("bootstrap", help="Monte-Carlo bootstrap of the full analysis.")
    boot.add_argument("fm", help="FM calibration spectrum CSV.")
    boot.add_argument("ac", help="AC spectrum CSV.")
    boot.add_argument("--config", help="Pipeline config JSON.")
    boot.add_argument("--n", type=int, help="Number of replicas (config default 1000).")
    boot.add_argument("--seed", type=int, help="Replica seed (config default 0).")
    boot.add_argument("--noise-scale", type=float, default=1.0, help="Multiply injected noise.")
    boot.add_argument("--workers", type=int, help="Worker processes (or NVPHASOR_WORKERS).")
    boot.add_argument("--progress", action="store_true", help="Show a progress bar.")
    boot.add_argument("--out", default=".", help="Output directory.")
    boot.set_defaults(func=command_bootstrap)

    ell = subparsers.add_parser("ellipse", help="Trace the polarization ellipse of a fit result.")
    ell.add_argument("result", help="Result JSON written by `fit`.")
    ell.add_argument("--n-points", type=int, default=360)
    ell.add_argument("--out", help="Output CSV (default: next to the result).")
    ell.set_defaults(func=command_ellipse)

    coils = subparsers.add_parser("coils", help="Fit the crossed-coil coupling model.")
    coils.add_argument("coil_a", help="Result JSON with coil a driven alone.")
    coils.add_argument("coil_b", help="Result JSON with coil b driven alone.")
    coils.add_argument("coil_ab", help="Result JSON with both coils driven.")
    coils.add_argument("--out", default=".", help="Output directory.")
    coils.set_defaults(func=command_coils)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("nvphasor").setLevel(logging.DEBUG if args.debug else logging.INFO)
    try:
        return args.func(args)
    except PhasorError as exc:
        logger.debug("command failed", exc_info=True)
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
