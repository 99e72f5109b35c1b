"""Core domain types for the DBS simulator."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.stats import norm


# Experimental multimode-fiber conditions; tau is the 0.5 us laser pulse.
DEFAULT_DIMENSION = 16
DEFAULT_EFFICIENCY = 0.52
DEFAULT_DARK_RATE = 300.0
DEFAULT_GATE_TIME = 5e-7
DEFAULT_MEAN_PHOTON_NUMBER = 0.2
DEFAULT_BASIS_COUNT = 2


class DBSError(Exception):
    """Base class for all simulator errors."""


class OutOfRange(DBSError):
    """A parameter lies outside its validity range."""

    def __init__(self, field_name: str, value: Any = None, reason: str = ""):
        self.field = field_name
        self.value = value
        self.reason = reason
        message = f"{field_name} out of range"
        if value is not None:
            message += f": {value!r}"
        if reason:
            message += f" ({reason})"
        super().__init__(message)


class LetterOutOfRange(DBSError):
    """A message letter is not in [0, D-1]."""

    def __init__(self, index: int, letter: int, dimension: int):
        self.index = index
        self.letter = letter
        self.dimension = dimension
        super().__init__(f"letter {letter} at position {index} not in [0, {dimension - 1}]")


class DegenerateDenominator(DBSError):
    """A ratio was requested whose denominator probability is zero."""

    def __init__(self, quantity: str):
        self.quantity = quantity
        super().__init__(f"{quantity} is zero")


class OddLength(DBSError):
    """Pairing combinatorics need an even number of photons."""

    def __init__(self, n: int):
        self.n = n
        super().__init__(f"photon count must be even and >= 2, got {n}")


class LengthMismatch(DBSError):
    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"expected {expected} detection events, got {actual}")


class NoSolution(DBSError):
    """A calibration target cannot be reached inside the search bounds."""


class UsageError(DBSError):
    """Invalid command line or sweep request."""

    def __init__(self, message: str, field_name: Optional[str] = None):
        self.field = field_name
        super().__init__(message)


class Basis(str, Enum):
    """The two mutually unbiased bases."""
    COMPUTATIONAL = "computational"
    FOURIER = "fourier"

    @property
    def code(self) -> int:
        return 0 if self is Basis.COMPUTATIONAL else 1

    @classmethod
    def from_code(cls, code: int) -> 'Basis':
        return cls.COMPUTATIONAL if int(code) == 0 else cls.FOURIER

    def other(self) -> 'Basis':
        return Basis.FOURIER if self is Basis.COMPUTATIONAL else Basis.COMPUTATIONAL


class DetectionModel(str, Enum):
    """How channel loss acts on a multi-photon pulse."""
    PER_PULSE = "per_pulse"    # a loaded pulse yields one detected photon with probability eta
    PER_PHOTON = "per_photon"  # each photon survives independently with probability eta


class Delocalization(str, Enum):
    """Outcome distribution for a photon measured in the wrong basis."""
    UNIFORM = "uniform"
    SPECKLE = "speckle"


class ProtocolMode(str, Enum):
    DBS = "dbs"
    IPBE = "ipbe"


class ChannelParams(BaseModel):
    """Physical and protocol parameters of one channel configuration."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    dimension: int = Field(default=DEFAULT_DIMENSION, ge=2, description="Alphabet size D")
    efficiency: float = Field(default=DEFAULT_EFFICIENCY, ge=0.0, le=1.0, description="Channel+detector efficiency")
    dark_rate: float = Field(default=DEFAULT_DARK_RATE, ge=0.0, description="Dark counts per second")
    gate_time: float = Field(default=DEFAULT_GATE_TIME, gt=0.0, description="Gate time in seconds")
    mean_photon_number: float = Field(default=DEFAULT_MEAN_PHOTON_NUMBER, ge=0.0, description="Poisson mean per pulse")
    basis_count: int = Field(default=DEFAULT_BASIS_COUNT, ge=2, description="Number of mutually unbiased bases")

    @model_validator(mode='after')
    def _check_dark_exponent(self) -> 'ChannelParams':
        for name in ('efficiency', 'dark_rate', 'gate_time', 'mean_photon_number'):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name}: must be finite")
        # 1 - P_gamma must stay strictly positive in double precision
        if math.exp(-self.dark_exponent) <= 0.0:
            raise ValueError("dark_rate: gamma*tau*(D-1) underflows the no-dark-click probability")
        return self

    @property
    def dark_exponent(self) -> float:
        """gamma * tau * (D - 1)."""
        return self.dark_rate * self.gate_time * (self.dimension - 1)

    @property
    def dark_click_probability(self) -> float:
        """Probability that a single detector fires from a dark count in one gate."""
        return -math.expm1(-self.dark_rate * self.gate_time)

    @property
    def loss(self) -> float:
        return 1.0 - self.efficiency

    def with_updates(self, **changes: Any) -> 'ChannelParams':
        """Return a re-validated copy with the given fields replaced."""
        data = self.to_dict()
        data.update(changes)
        return validate_params(data)

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'ChannelParams':
        return validate_params(data)


def validate_params(raw: Union[ChannelParams, Mapping[str, Any]]) -> ChannelParams:
    """Validate a parameter candidate, raising OutOfRange for the first bad field."""
    if isinstance(raw, ChannelParams):
        raw = raw.model_dump()
    try:
        return ChannelParams(**dict(raw))
    except ValidationError as e:
        error = e.errors()[0]
        loc = error.get('loc') or ()
        if loc:
            field_name = str(loc[0])
            reason = error.get('msg', '')
        else:
            # model-level validator: message starts with "Value error, <field>: ..."
            message = error.get('msg', '').split('Value error, ', 1)[-1]
            field_name, _, reason = message.partition(":")
        field_name = field_name.strip()
        raise OutOfRange(field_name, dict(raw).get(field_name), reason.strip()) from None
    except TypeError as e:
        raise OutOfRange('params', None, str(e)) from None


@dataclass(frozen=True)
class QuditSymbol:
    """One letter prepared in one basis."""
    letter: int
    basis: Basis

    def check(self, dimension: int) -> None:
        if not 0 <= self.letter < dimension:
            raise OutOfRange('letter', self.letter, f"must be < {dimension}")

    def state_vector(self, dimension: int) -> np.ndarray:
        """Amplitudes over the computational basis (Fourier states per the unitary DFT)."""
        self.check(dimension)
        if self.basis is Basis.COMPUTATIONAL:
            vec = np.zeros(dimension, dtype=complex)
            vec[self.letter] = 1.0
            return vec
        k = np.arange(dimension)
        return np.exp(2j * np.pi * self.letter * k / dimension) / np.sqrt(dimension)

    def ket(self, dimension: int) -> str:
        if dimension == 2:
            if self.basis is Basis.COMPUTATIONAL:
                return f"|{self.letter}⟩"
            return "|+⟩" if self.letter == 0 else "|−⟩"
        if self.basis is Basis.COMPUTATIONAL:
            return f"|{self.letter}⟩"
        return f"|f_{self.letter}⟩"

    def to_dict(self) -> Dict[str, Any]:
        return {'letter': self.letter, 'basis': self.basis.value}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'QuditSymbol':
        return cls(letter=int(data['letter']), basis=Basis(data['basis']))


def basis_overlap(a: QuditSymbol, b: QuditSymbol, dimension: int) -> float:
    """|<a|b>|^2."""
    return float(abs(np.vdot(a.state_vector(dimension), b.state_vector(dimension))) ** 2)


@dataclass(frozen=True)
class RandomSource:
    """Seeded, independent random stream for one trial or chunk."""
    seed: int
    stream_id: int = 0
    # path below stream_id in the SeedSequence spawn tree
    spawn_key: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise OutOfRange('seed', self.seed, "must fit in 64 bits")
        if self.stream_id < 0:
            raise OutOfRange('stream_id', self.stream_id)
        object.__setattr__(self, 'spawn_key', tuple(int(k) for k in self.spawn_key))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.spawn_key))

    def generator(self) -> np.random.Generator:
        """A fresh Generator; equal (seed, stream_id, spawn_key) gives identical draws."""
        return np.random.default_rng(self.seed_sequence())

    def spawn(self, count: int) -> List['RandomSource']:
        """Child streams, disjoint from this one, from each other and from any other stream's children."""
        children = self.seed_sequence().spawn(count)
        return [RandomSource(self.seed, self.stream_id, tuple(child.spawn_key[1:])) for child in children]

    def to_dict(self) -> Dict[str, Any]:
        return {'seed': self.seed, 'stream_id': self.stream_id, 'spawn_key': list(self.spawn_key)}


@dataclass(frozen=True)
class SimulationOptions:
    """Monte Carlo model switches."""
    detection_model: DetectionModel = DetectionModel.PER_PHOTON
    delocalization: Delocalization = Delocalization.UNIFORM
    # distribution over D detectors for Delocalization.SPECKLE
    speckle_weights: Optional[tuple] = field(default=None, compare=False)
    force_single_photon: bool = False

    def outcome_weights(self, dimension: int) -> Optional[np.ndarray]:
        """Wrong-basis outcome distribution, or None for uniform."""
        if self.delocalization is Delocalization.UNIFORM:
            return None
        if self.speckle_weights is None:
            raise OutOfRange('speckle_weights', None, "required for speckle delocalization")
        weights = np.asarray(self.speckle_weights, dtype=float)
        if weights.shape != (dimension,):
            raise OutOfRange('speckle_weights', weights.shape, f"need {dimension} entries")
        return weights / weights.sum()

    def to_dict(self) -> Dict[str, Any]:
        return {
            'detection_model': self.detection_model.value,
            'delocalization': self.delocalization.value,
            'force_single_photon': self.force_single_photon,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'SimulationOptions':
        return cls(
            detection_model=DetectionModel(data.get('detection_model', 'per_photon')),
            delocalization=Delocalization(data.get('delocalization', 'uniform')),
            force_single_photon=bool(data.get('force_single_photon', False)),
        )


def as_generator(rng: Union[RandomSource, np.random.Generator, int, None]) -> np.random.Generator:
    """Accept a RandomSource, an existing Generator or a bare seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RandomSource):
        return rng.generator()
    if rng is None:
        raise OutOfRange('rng', None, "a seed or RandomSource is required")
    return RandomSource(int(rng)).generator()


@dataclass(frozen=True)
class DetectionEvent:
    """Bob's detector-array read-out for one gate.

    signal_origin is omniscient ground truth (the resolved click came from a
    photon) and is only read by scoring.
    """
    basis_used: Basis
    clicks: tuple
    signal_origin: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'clicks', tuple(bool(c) for c in self.clicks))

    @property
    def resolved(self) -> Optional[int]:
        """Letter of the single clicking detector; None for no click or multi-click."""
        fired = [i for i, c in enumerate(self.clicks) if c]
        return fired[0] if len(fired) == 1 else None

    @property
    def click_string(self) -> str:
        return ''.join('1' if c else '0' for c in self.clicks)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'bob_basis': self.basis_used.value,
            'clicks': self.click_string,
            'signal': self.signal_origin,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'DetectionEvent':
        return cls(
            basis_used=Basis(data['bob_basis']),
            clicks=tuple(ch == '1' for ch in data['clicks']),
            signal_origin=bool(data.get('signal', False)),
        )


class PairVerdict(str, Enum):
    """Scoring classification of one twin (DBS) or one slot (IPBE)."""
    CORRECT = "correct"                      # accepted, Bob in Alice's basis
    BASIS_ERROR = "basis_error"              # accepted, Bob in the other basis
    DISCARDED_MIXED_BASES = "discarded_mixed_bases"
    DISCARDED_MISMATCH = "discarded_mismatch"
    LOST = "lost"
    EMPTY_ERROR = "empty_error"              # accepted, both clicks from dark counts

    @property
    def code(self) -> int:
        return VERDICT_ORDER.index(self)


VERDICT_ORDER = tuple(PairVerdict)


@dataclass
class SessionTally:
    """Verdict counts of a session and the empirical probabilities derived from them."""
    counts: Dict[PairVerdict, int]
    twin_count: int
    mode: ProtocolMode = ProtocolMode.DBS

    def __post_init__(self):
        self.counts = {tag: int(self.counts.get(tag, 0)) for tag in VERDICT_ORDER}
        total = sum(self.counts.values())
        if total != self.twin_count:
            raise OutOfRange('twin_count', self.twin_count, f"verdict counts sum to {total}")

    @classmethod
    def empty(cls, mode: ProtocolMode = ProtocolMode.DBS) -> 'SessionTally':
        return cls({}, 0, mode)

    @classmethod
    def from_codes(cls, codes: np.ndarray, mode: ProtocolMode = ProtocolMode.DBS) -> 'SessionTally':
        binned = np.bincount(np.asarray(codes, dtype=np.int64), minlength=len(VERDICT_ORDER))
        counts = {tag: int(binned[i]) for i, tag in enumerate(VERDICT_ORDER)}
        return cls(counts, int(binned.sum()), mode)

    def merge(self, other: 'SessionTally') -> 'SessionTally':
        """Associative, commutative combination of two tallies."""
        if self.mode != other.mode:
            raise OutOfRange('mode', other.mode.value, f"cannot merge into {self.mode.value} tally")
        counts = {tag: self.counts[tag] + other.counts[tag] for tag in VERDICT_ORDER}
        return SessionTally(counts, self.twin_count + other.twin_count, self.mode)

    def probability(self, tag: PairVerdict) -> float:
        if self.twin_count == 0:
            return 0.0
        return self.counts[tag] / self.twin_count

    def standard_error(self, tag: PairVerdict) -> float:
        if self.twin_count == 0:
            return math.inf
        p = self.probability(tag)
        return math.sqrt(p * (1.0 - p) / self.twin_count)

    def wilson_interval(self, tag: PairVerdict, confidence: float = 0.95) -> tuple:
        """Wilson score interval for the frequency of tag."""
        n = self.twin_count
        if n == 0:
            return 0.0, 1.0
        z = float(norm.ppf(0.5 + confidence / 2.0))
        p = self.probability(tag)
        denom = 1.0 + z * z / n
        centre = (p + z * z / (2 * n)) / denom
        half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
        return max(0.0, centre - half), min(1.0, centre + half)

    @property
    def p_corr(self) -> float:
        return self.probability(PairVerdict.CORRECT)

    @property
    def p_be(self) -> float:
        return self.probability(PairVerdict.BASIS_ERROR)

    @property
    def p_ee(self) -> float:
        return self.probability(PairVerdict.EMPTY_ERROR)

    @property
    def ratio(self) -> float:
        """Empirical (P_BE + P_EE) / P_Corr."""
        errors = self.counts[PairVerdict.BASIS_ERROR] + self.counts[PairVerdict.EMPTY_ERROR]
        correct = self.counts[PairVerdict.CORRECT]
        if correct == 0:
            return math.inf
        return errors / correct

    @property
    def ratio_standard_error(self) -> float:
        """Delta-method error of the ratio, treating both counts as Poisson."""
        errors = self.counts[PairVerdict.BASIS_ERROR] + self.counts[PairVerdict.EMPTY_ERROR]
        correct = self.counts[PairVerdict.CORRECT]
        if correct == 0:
            return math.inf
        if errors == 0:
            return 1.0 / correct
        return self.ratio * math.sqrt(1.0 / errors + 1.0 / correct)

    def to_row(self) -> Dict[str, Any]:
        """Flat record of counts, estimates and standard errors."""
        row: Dict[str, Any] = {'mode': self.mode.value, 'twin_count': self.twin_count}
        for tag in VERDICT_ORDER:
            row[f"n_{tag.value}"] = self.counts[tag]
        for name, tag in (('p_corr', PairVerdict.CORRECT), ('p_be', PairVerdict.BASIS_ERROR),
                          ('p_ee', PairVerdict.EMPTY_ERROR)):
            row[f"{name}_hat"] = self.probability(tag)
            row[f"{name}_se"] = self.standard_error(tag)
            row[f"{name}_wilson_lo"], row[f"{name}_wilson_hi"] = self.wilson_interval(tag)
        row['ratio_hat'] = self.ratio
        row['ratio_se'] = self.ratio_standard_error
        return row
