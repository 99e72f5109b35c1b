"""Multimode fiber as a random transfer matrix, SLM focusing and speckle detection maps."""

import csv
import math
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from logger_config import get_logger
from models import Basis, OutOfRange, RandomSource, as_generator
from utils.file_lock import atomic_text_file

logger = get_logger(__name__)

RngLike = Union[RandomSource, np.random.Generator, int]

DEFAULT_TEST_PHASES = 16
DEFAULT_SWEEPS = 3
NORMALIZATION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TransferMatrix:
    """Complex map t[n, m] from SLM segment n to output mode m. Static once drawn."""
    matrix: np.ndarray = field(repr=False)
    seed: Optional[int] = None

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.complex128)
        if matrix.ndim != 2 or 0 in matrix.shape:
            raise OutOfRange('matrix', matrix.shape, "need a non-empty (segments, modes) array")
        if not np.all(np.isfinite(matrix)):
            raise OutOfRange('matrix', None, "entries must be finite")
        matrix.setflags(write=False)
        object.__setattr__(self, 'matrix', matrix)

    @property
    def segments(self) -> int:
        return self.matrix.shape[0]

    @property
    def modes(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: Union[str, Path]) -> None:
        """Write as .npz: matrix, seed (-1 when unknown), segments, modes."""
        np.savez(
            path,
            matrix=self.matrix,
            seed=np.int64(-1 if self.seed is None else self.seed),
            segments=np.int64(self.segments),
            modes=np.int64(self.modes),
        )
        logger.debug(f"Saved transfer matrix {self.matrix.shape} to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'TransferMatrix':
        with np.load(path) as data:
            matrix = data['matrix']
            seed = int(data['seed'])
            if matrix.shape != (int(data['segments']), int(data['modes'])):
                raise OutOfRange('matrix', matrix.shape, "shape disagrees with stored metadata")
        return cls(matrix, None if seed < 0 else seed)


@dataclass(frozen=True)
class SlmMask:
    """Unit-modulus phase per SLM segment."""
    phases: np.ndarray

    def __post_init__(self):
        phases = np.mod(np.asarray(self.phases, dtype=float), 2 * np.pi)
        phases.setflags(write=False)
        object.__setattr__(self, 'phases', phases)

    @classmethod
    def flat(cls, segments: int) -> 'SlmMask':
        return cls(np.zeros(segments))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(1j * self.phases)


@dataclass(frozen=True)
class IntensityMap:
    """Normalised detection probability per output mode (one mode per detector pixel)."""
    probabilities: np.ndarray
    measurement_basis: Basis = Basis.COMPUTATIONAL
    prepared_basis: Basis = Basis.COMPUTATIONAL

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > NORMALIZATION_TOLERANCE:
            raise OutOfRange('probabilities', float(p.sum()), "must be non-negative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, 'probabilities', p)

    @classmethod
    def from_intensity(cls, intensity: np.ndarray, measurement_basis: Basis = Basis.COMPUTATIONAL,
                       prepared_basis: Basis = Basis.COMPUTATIONAL) -> 'IntensityMap':
        intensity = np.asarray(intensity, dtype=float)
        total = intensity.sum()
        if total <= 0:
            raise OutOfRange('intensity', total, "total must be positive")
        return cls(intensity / total, measurement_basis, prepared_basis)

    @property
    def modes(self) -> int:
        return self.probabilities.size

    @property
    def localized(self) -> bool:
        return self.measurement_basis == self.prepared_basis

    def peak_mass(self) -> float:
        return float(self.probabilities.max())

    def as_grid(self) -> np.ndarray:
        return self.probabilities.reshape(grid_shape(self.modes))


@dataclass(frozen=True)
class DetectionMaps:
    """Sampled PD (single-photon frequency) and PD2 (same-pixel successive pairs) per pixel."""
    pd: np.ndarray
    pd2: np.ndarray
    photon_pairs: int

    @property
    def same_pixel_fraction(self) -> float:
        return float(self.pd2.sum())

    @property
    def different_pixel_fraction(self) -> float:
        return 1.0 - self.same_pixel_fraction


@dataclass
class FocusResult:
    mask: SlmMask
    enhancement: float
    history: List[float]
    target: int
    basis: Basis


def grid_shape(modes: int) -> Tuple[int, int]:
    """Square detector grid when modes is a perfect square, otherwise a single row."""
    side = math.isqrt(modes)
    return (side, side) if side * side == modes else (1, modes)


def to_basis(field_amplitudes: np.ndarray, basis: Basis) -> np.ndarray:
    """Amplitudes of an output field in the given basis.

    The Fourier basis is the unitary DFT over output modes, so total power is preserved.
    """
    if Basis(basis) is Basis.COMPUTATIONAL:
        return np.asarray(field_amplitudes)
    return np.fft.fft(field_amplitudes, axis=-1, norm='ortho')


def generate_fiber(segments: int, modes: int, rng: RngLike) -> TransferMatrix:
    """i.i.d. circular Gaussian entries with variance 1/segments."""
    if segments < 1:
        raise OutOfRange('segments', segments, "must be >= 1")
    if modes < 1:
        raise OutOfRange('modes', modes, "must be >= 1")
    gen = as_generator(rng)
    scale = math.sqrt(1.0 / (2.0 * segments))
    matrix = gen.normal(0.0, scale, (segments, modes)) + 1j * gen.normal(0.0, scale, (segments, modes))
    seed = rng.seed if isinstance(rng, RandomSource) else (rng if isinstance(rng, int) else None)
    return TransferMatrix(matrix, seed)


def output_field(tm: TransferMatrix, mask: SlmMask) -> np.ndarray:
    """E_m = sum_n t_nm sigma_n with unit input amplitudes."""
    if mask.phases.size != tm.segments:
        raise OutOfRange('mask', mask.phases.size, f"need {tm.segments} segments")
    return mask.sigma @ tm.matrix


def _target_couplings(tm: TransferMatrix, target: int, basis: Basis) -> np.ndarray:
    if not 0 <= target < tm.modes:
        raise OutOfRange('target', target, f"fiber has {tm.modes} modes")
    return to_basis(tm.matrix, basis)[:, target]


def focus_trace(tm: TransferMatrix, target: int, basis: Basis = Basis.COMPUTATIONAL,
                iterations: int = DEFAULT_SWEEPS,
                test_phases: int = DEFAULT_TEST_PHASES) -> FocusResult:
    """Sequential segment-phase optimisation with its objective history.

    Each sweep visits the segments in order and sets each one to the grid phase
    maximising the target intensity; history holds the objective after every
    sweep, starting from the flat mask. Sweeps stop early once a full pass
    changes nothing.
    """
    if iterations < 1:
        raise OutOfRange('iterations', iterations, "must be >= 1")
    if test_phases < 1:
        raise OutOfRange('test_phases', test_phases, "must be >= 1")
    couplings = _target_couplings(tm, target, basis)
    grid = 2 * np.pi * np.arange(test_phases) / test_phases
    rotations = np.exp(1j * grid)

    choice = np.zeros(tm.segments, dtype=np.int64)
    amplitude = couplings.sum()
    history = [float(abs(amplitude) ** 2)]

    for _ in range(iterations):
        changed = False
        for n in range(tm.segments):
            rest = amplitude - couplings[n] * rotations[choice[n]]
            candidates = np.abs(rest + couplings[n] * rotations) ** 2
            best = int(np.argmax(candidates))
            if candidates[best] > candidates[choice[n]]:
                choice[n] = best
                changed = True
            amplitude = rest + couplings[n] * rotations[choice[n]]
        history.append(float(abs(amplitude) ** 2))
        if history[-1] < history[-2] * (1 - 1e-12):
            raise AssertionError("focus objective decreased")
        if not changed:
            break

    baseline = float(np.sum(np.abs(couplings) ** 2))
    enhancement = history[-1] / baseline if baseline > 0 else math.inf
    return FocusResult(SlmMask(grid[choice]), enhancement, history, target, Basis(basis))


def optimize_focus(tm: TransferMatrix, target: int, basis: Basis = Basis.COMPUTATIONAL,
                   iterations: int = DEFAULT_SWEEPS,
                   test_phases: int = DEFAULT_TEST_PHASES) -> Tuple[SlmMask, float]:
    """Focus on one output mode in the given basis.

    Enhancement is the focused target intensity over the target's mean
    intensity under random masks, sum_n |c_n|^2.
    """
    started = time.perf_counter()
    result = focus_trace(tm, target, basis, iterations, test_phases)
    logger.debug_with_context(
        "Focus optimised",
        segments=tm.segments,
        modes=tm.modes,
        basis=Basis(basis).value,
        enhancement=round(result.enhancement, 3),
        sweeps=len(result.history) - 1,
        seconds=round(time.perf_counter() - started, 3),
    )
    return result.mask, result.enhancement


def exhaustive_focus(tm: TransferMatrix, target: int, basis: Basis = Basis.COMPUTATIONAL,
                     test_phases: int = 4) -> float:
    """Best target intensity over every grid mask; the first segment is pinned at 0."""
    if tm.segments > 8:
        raise OutOfRange('segments', tm.segments, "exhaustive search is limited to 8 segments")
    couplings = _target_couplings(tm, target, basis)
    rotations = np.exp(2j * np.pi * np.arange(test_phases) / test_phases)
    best = abs(couplings[0]) ** 2
    for combo in product(range(test_phases), repeat=tm.segments - 1):
        amplitude = couplings[0] + np.sum(couplings[1:] * rotations[list(combo)])
        best = max(best, abs(amplitude) ** 2)
    return float(best)


def enhancement_bound(segments: int) -> float:
    """Expected enhancement of phase-only sequential focusing with continuous phases."""
    return math.pi / 4 * (segments - 1) + 1


def measure_intensity(tm: TransferMatrix, mask: SlmMask, measurement_basis: Basis,
                      prepared_basis: Basis) -> IntensityMap:
    """Detection probabilities for a mask focused in prepared_basis, read out in measurement_basis."""
    amplitudes = to_basis(output_field(tm, mask), measurement_basis)
    return IntensityMap.from_intensity(np.abs(amplitudes) ** 2, Basis(measurement_basis), Basis(prepared_basis))


def delocalized_distribution(tm: TransferMatrix, mask: SlmMask,
                             prepared_basis: Basis = Basis.COMPUTATIONAL) -> IntensityMap:
    """Conjugate-basis map, usable as SimulationOptions.speckle_weights."""
    prepared = Basis(prepared_basis)
    return measure_intensity(tm, mask, prepared.other(), prepared)


def same_detector_fraction(imap: IntensityMap) -> float:
    """Probability two independent photons land on the same pixel."""
    return float(np.sum(imap.probabilities ** 2))


def sample_pd_pd2(imap: IntensityMap, photon_pairs: int, rng: RngLike) -> DetectionMaps:
    """Draw successive independent photon pairs and histogram singles and same-pixel pairs."""
    if photon_pairs < 1:
        raise OutOfRange('photon_pairs', photon_pairs, "must be >= 1")
    gen = as_generator(rng)
    m = imap.modes
    first = gen.choice(m, size=photon_pairs, p=imap.probabilities)
    second = gen.choice(m, size=photon_pairs, p=imap.probabilities)
    pd = np.bincount(np.concatenate([first, second]), minlength=m) / (2.0 * photon_pairs)
    pd2 = np.bincount(first[first == second], minlength=m) / float(photon_pairs)
    return DetectionMaps(pd, pd2, photon_pairs)


def write_grid_csv(grid: np.ndarray, path: Union[str, Path]) -> None:
    """Row-major CSV with a '# rows=R cols=C' header line."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    rows, cols = grid.shape
    with atomic_text_file(str(path)) as f:
        f.write(f"# rows={rows} cols={cols}\n")
        writer = csv.writer(f)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])


def read_grid_csv(path: Union[str, Path]) -> np.ndarray:
    with open(path, 'r', newline='') as f:
        header = f.readline().strip()
        fields = dict(part.split('=') for part in header.lstrip('# ').split())
        grid = np.array([[float(v) for v in row] for row in csv.reader(f) if row], dtype=float)
    shape = (int(fields['rows']), int(fields['cols']))
    if grid.shape != shape:
        raise OutOfRange('grid', grid.shape, f"header says {shape}")
    return grid


def fiber_ensemble(count: int, segments: int, modes: int, rng: RngLike) -> List[TransferMatrix]:
    """Independent fibers on spawned streams."""
    if isinstance(rng, np.random.Generator):
        return [generate_fiber(segments, modes, gen) for gen in rng.spawn(count)]
    source = rng if isinstance(rng, RandomSource) else RandomSource(int(rng))
    return [generate_fiber(segments, modes, stream) for stream in source.spawn(count)]


def speckle_weights(imap: IntensityMap, dimension: int) -> Tuple[float, ...]:
    """Map probabilities as a detector weight tuple for the channel simulator."""
    if imap.modes != dimension:
        raise OutOfRange('modes', imap.modes, f"need one mode per detector ({dimension})")
    return tuple(float(p) for p in imap.probabilities)
