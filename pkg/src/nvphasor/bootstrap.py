"""Monte-Carlo bootstrap of the full analysis.

Each replica adds Gaussian noise to both spectra, with the per-channel
standard deviation taken from the baseline fit residuals, and replays the
whole pipeline. Replica streams are PCG64 generators spawned from
``numpy.random.SeedSequence(seed)``, so reports depend only on the inputs and
the seed, never on the worker count.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .config import PipelineConfig, worker_count
from .errors import InvalidInputError, PhasorError, UnstablePipelineError
from .lineshape import QuadratureSpectrum, channel_noise, model_channels
from .pipeline import PipelineResult, analyze_reference, analyze_spectrum
from .spin import ComplexFieldVector, RealFieldVector

logger = logging.getLogger(__name__)

MIN_REPLICAS = 100


@dataclass(frozen=True, eq=False)
class ReplicaSummary:
    b_ac: np.ndarray
    cost: float
    semi_major: float
    semi_minor: float
    eccentricity: float

    @property
    def components(self) -> np.ndarray:
        return np.concatenate([self.b_ac.real, self.b_ac.imag])

    def to_dict(self) -> Dict:
        return {
            "b_ac_t": {"real": self.b_ac.real.tolist(), "imag": self.b_ac.imag.tolist()},
            "cost_hz2": self.cost,
            "semi_major_t": self.semi_major,
            "semi_minor_t": self.semi_minor,
            "eccentricity": self.eccentricity,
        }


@dataclass(frozen=True, eq=False)
class BootstrapReport:
    n_replicas: int
    n_failed: int
    replicas: Tuple[ReplicaSummary, ...]
    std_major: float
    std_minor: float
    geometric_mean_uncertainty: float
    component_covariance: np.ndarray
    baseline: PipelineResult
    metadata: Dict = field(default_factory=dict)

    @property
    def component_std(self) -> np.ndarray:
        """Standard deviations of (Re bx, Re by, Re bz, Im bx, Im by, Im bz)."""
        return np.sqrt(np.clip(np.diag(self.component_covariance), 0.0, None))

    def to_dict(self) -> Dict:
        return {
            "n_replicas": self.n_replicas,
            "n_failed": self.n_failed,
            "std_major_t": self.std_major,
            "std_minor_t": self.std_minor,
            "geometric_mean_uncertainty_t": self.geometric_mean_uncertainty,
            "component_std_t": self.component_std.tolist(),
            "component_covariance_t2": self.component_covariance.tolist(),
            "baseline": self.baseline.to_dict(),
            "replicas": [r.to_dict() for r in self.replicas],
            "metadata": dict(self.metadata),
        }


@dataclass(frozen=True, eq=False)
class _ReplicaContext:
    config: PipelineConfig
    fm: QuadratureSpectrum
    ac: QuadratureSpectrum
    noise: Tuple[float, float, float, float]
    centers_guess: Tuple[float, ...]
    dc_guess: RealFieldVector
    ac_guess: ComplexFieldVector


def _perturb(spectrum: QuadratureSpectrum, sx: float, sy: float, rng) -> QuadratureSpectrum:
    n = len(spectrum)
    return spectrum.with_channels(
        spectrum.x_channel + rng.normal(0.0, sx, n), spectrum.y_channel + rng.normal(0.0, sy, n)
    )


def _run_replica(task) -> Tuple[Optional[ReplicaSummary], Optional[Dict]]:
    context, seed = task
    rng = np.random.default_rng(seed)
    fx, fy, ax, ay = context.noise
    fm = _perturb(context.fm, fx, fy, rng)
    ac = _perturb(context.ac, ax, ay, rng)
    try:
        reference = analyze_reference(
            fm, context.config, centers_guess=context.centers_guess, dc_guess=context.dc_guess
        )
        result = analyze_spectrum(reference, ac, context.config, ac_guess=context.ac_guess)
    except PhasorError as exc:
        return None, exc.to_dict()
    if result.ellipse is None:
        return None, {"error": "undefined-ellipse", "message": "replica phasor vanished"}
    return (
        ReplicaSummary(
            b_ac=result.ac.b_ac.as_array(),
            cost=result.ac.cost,
            semi_major=result.ellipse.major_length,
            semi_minor=result.ellipse.minor_length,
            eccentricity=result.ellipse.eccentricity,
        ),
        None,
    )


def _model_spectrum(spectrum: QuadratureSpectrum, fits) -> QuadratureSpectrum:
    return spectrum.with_channels(*model_channels(spectrum.freqs, fits))


def bootstrap(
    fm: QuadratureSpectrum,
    ac: QuadratureSpectrum,
    config: PipelineConfig,
    n_replicas: Optional[int] = None,
    seed: Optional[int] = None,
    *,
    noise_scale: float = 1.0,
    workers: Optional[int] = None,
    progress: bool = False,
) -> BootstrapReport:
    settings = config.bootstrap
    n_replicas = settings.n_replicas if n_replicas is None else int(n_replicas)
    seed = settings.seed if seed is None else int(seed)
    if n_replicas < MIN_REPLICAS:
        raise InvalidInputError(f"bootstrap needs at least {MIN_REPLICAS} replicas, got {n_replicas}")
    if noise_scale < 0:
        raise InvalidInputError("noise_scale must be non-negative")
    workers = worker_count(workers)

    reference = analyze_reference(fm, config)
    baseline = analyze_spectrum(reference, ac, config)
    if baseline.ellipse is None:
        raise UnstablePipelineError(
            "baseline phasor is zero; nothing to bootstrap", stage="bootstrap"
        )
    fm_noise = channel_noise(fm, reference.fm_fits)
    ac_noise = channel_noise(ac, baseline.ac_fits)
    noise = tuple(noise_scale * s for s in fm_noise + ac_noise)

    if settings.resample == "model":
        fm_base = _model_spectrum(fm, reference.fm_fits)
        ac_base = _model_spectrum(ac, baseline.ac_fits)
    else:
        fm_base, ac_base = fm, ac

    context = _ReplicaContext(
        config=config,
        fm=fm_base,
        ac=ac_base,
        noise=noise,
        centers_guess=tuple(f.center for f in reference.fm_fits),
        dc_guess=reference.dc.b_dc,
        ac_guess=baseline.ac.b_ac,
    )
    seeds = np.random.SeedSequence(seed).spawn(n_replicas)
    tasks = [(context, s) for s in seeds]
    logger.info(
        "bootstrap: %d replicas, seed %d, %s resampling, %d worker(s), noise %s",
        n_replicas, seed, settings.resample, workers, np.array2string(np.array(noise), precision=3),
    )

    if workers > 1:
        chunksize = max(1, n_replicas // (4 * workers))
        with Pool(workers) as pool:
            outcomes = list(
                tqdm(pool.imap(_run_replica, tasks, chunksize=chunksize), total=n_replicas,
                     desc="Bootstrap", disable=not progress)
            )
    else:
        outcomes = [
            _run_replica(task)
            for task in tqdm(tasks, total=n_replicas, desc="Bootstrap", disable=not progress)
        ]

    replicas = [r for r, _ in outcomes if r is not None]
    failures = [e for _, e in outcomes if e is not None]
    failure_rate = len(failures) / n_replicas
    if failure_rate > settings.max_failure_rate or len(replicas) < 2:
        codes = Counter(f.get("error", "unknown") for f in failures)
        raise UnstablePipelineError(
            f"{len(failures)} of {n_replicas} replicas failed",
            stage="bootstrap",
            details={
                "n_failed": len(failures),
                "n_replicas": n_replicas,
                "failure_rate": failure_rate,
                "by_code": dict(codes),
                "examples": failures[:5],
            },
        )
    if failures:
        logger.warning("%d of %d bootstrap replicas failed", len(failures), n_replicas)

    majors = np.array([r.semi_major for r in replicas])
    minors = np.array([r.semi_minor for r in replicas])
    components = np.array([r.components for r in replicas])
    covariance = np.cov(components, rowvar=False, ddof=1)
    covariance = 0.5 * (covariance + covariance.T)
    std_major = float(np.std(majors, ddof=1))
    std_minor = float(np.std(minors, ddof=1))

    metadata = {
        "n_replicas": n_replicas,
        "seed": seed,
        "rng": "PCG64 via SeedSequence.spawn",
        "resample": settings.resample,
        "noise_scale": noise_scale,
        "noise_std": {"fm_x": noise[0], "fm_y": noise[1], "ac_x": noise[2], "ac_y": noise[3]},
        "failure_rate": failure_rate,
        "config_sha256": config.digest(),
    }
    return BootstrapReport(
        n_replicas=n_replicas,
        n_failed=len(failures),
        replicas=tuple(replicas),
        std_major=std_major,
        std_minor=std_minor,
        geometric_mean_uncertainty=float(np.sqrt(std_major * std_minor)),
        component_covariance=covariance,
        baseline=baseline,
        metadata=metadata,
    )
