"""Monte Carlo physical layer: Poisson source, loss, gated detector array with dark counts,
and the photon-number-splitting eavesdropper."""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial, reduce
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import analytics
from logger_config import get_logger
from models import (
    VERDICT_ORDER,
    Basis,
    ChannelParams,
    Delocalization,
    DetectionEvent,
    DetectionModel,
    OutOfRange,
    PairVerdict,
    ProtocolMode,
    QuditSymbol,
    RandomSource,
    SessionTally,
    SimulationOptions,
    as_generator,
)
from protocol import NO_CLICK, classify_pairs, encode_arrays

logger = get_logger(__name__)

RngLike = Union[RandomSource, np.random.Generator, int]

DEFAULT_CHUNK_SIZE = 200_000

_CODE = {tag: i for i, tag in enumerate(VERDICT_ORDER)}


@dataclass
class OscarTally:
    """Photon-number-splitting outcome counts.

    loaded_count counts twins (DBS) or slots (IPBE) whose pulses all carried
    at least one photon; both success probabilities are conditioned on it.
    """
    loaded_count: int
    intercepted_multi: int
    extracted_pairs: int
    bob_successes: int
    mode: ProtocolMode = ProtocolMode.DBS

    def __post_init__(self):
        if self.extracted_pairs > self.intercepted_multi:
            raise OutOfRange('extracted_pairs', self.extracted_pairs, "exceeds intercepted_multi")
        if self.intercepted_multi > self.loaded_count:
            raise OutOfRange('intercepted_multi', self.intercepted_multi, "exceeds loaded_count")

    @classmethod
    def empty(cls, mode: ProtocolMode = ProtocolMode.DBS) -> 'OscarTally':
        return cls(0, 0, 0, 0, mode)

    def merge(self, other: 'OscarTally') -> 'OscarTally':
        if self.mode != other.mode:
            raise OutOfRange('mode', other.mode.value, f"cannot merge into {self.mode.value} tally")
        return OscarTally(
            self.loaded_count + other.loaded_count,
            self.intercepted_multi + other.intercepted_multi,
            self.extracted_pairs + other.extracted_pairs,
            self.bob_successes + other.bob_successes,
            self.mode,
        )

    def _rate(self, count: int) -> float:
        return count / self.loaded_count if self.loaded_count else 0.0

    def _se(self, count: int) -> float:
        if not self.loaded_count:
            return math.inf
        p = self._rate(count)
        return math.sqrt(p * (1.0 - p) / self.loaded_count)

    @property
    def p_o_hat(self) -> float:
        return self._rate(self.extracted_pairs)

    @property
    def p_o_se(self) -> float:
        return self._se(self.extracted_pairs)

    @property
    def p_b_hat(self) -> float:
        return self._rate(self.bob_successes)

    @property
    def p_b_se(self) -> float:
        return self._se(self.bob_successes)

    @property
    def ratio(self) -> float:
        if self.extracted_pairs == 0:
            return math.inf
        return self.bob_successes / self.extracted_pairs

    def to_row(self) -> Dict[str, Any]:
        return {
            'mode': self.mode.value,
            'loaded_count': self.loaded_count,
            'intercepted_multi': self.intercepted_multi,
            'extracted_pairs': self.extracted_pairs,
            'bob_successes': self.bob_successes,
            'p_b_hat': self.p_b_hat,
            'p_b_se': self.p_b_se,
            'p_o_hat': self.p_o_hat,
            'p_o_se': self.p_o_se,
            'ratio_hat': self.ratio,
        }


def _photon_numbers(size: int, params: ChannelParams, options: SimulationOptions,
                    gen: np.random.Generator) -> np.ndarray:
    if options.force_single_photon:
        return np.ones(size, dtype=np.int64)
    return gen.poisson(params.mean_photon_number, size)


def _surviving(photons: np.ndarray, params: ChannelParams, options: SimulationOptions,
               gen: np.random.Generator) -> np.ndarray:
    """Photons reaching the detectors."""
    if options.detection_model is DetectionModel.PER_PULSE:
        return ((photons >= 1) & (gen.random(photons.size) < params.efficiency)).astype(np.int64)
    return gen.binomial(photons, params.efficiency)


def _delocalized(count: int, photons_each: np.ndarray, dimension: int,
                 weights: Optional[np.ndarray], gen: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Wrong-basis landing detectors: first detector and whether all photons share it."""
    width = int(photons_each.max()) if count else 0
    if width == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    if weights is None:
        draws = gen.integers(0, dimension, size=(count, width))
    else:
        draws = gen.choice(dimension, size=(count, width), p=weights)
    used = np.arange(width)[None, :] < photons_each[:, None]
    same = np.all((draws == draws[:, :1]) | ~used, axis=1)
    return draws[:, 0], same


def transmit_batch(letters: np.ndarray, alice_basis: np.ndarray, bob_basis: np.ndarray,
                   params: ChannelParams, gen: np.random.Generator,
                   options: SimulationOptions = SimulationOptions(),
                   photons: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised channel for many slots.

    Returns the resolved detector per slot (NO_CLICK when none or several
    fired) and whether that click came from a photon. Dark clicks on the
    signal detector are indistinguishable from the photon and are absorbed.
    """
    size = letters.size
    d = params.dimension
    q = params.dark_click_probability
    if photons is None:
        photons = _photon_numbers(size, params, options, gen)
    arrived = _surviving(photons, params, options, gen)

    matched = bob_basis == alice_basis
    has_signal = arrived >= 1
    signal_det = np.where(matched, letters, NO_CLICK).astype(np.int64)
    single = has_signal & matched

    wrong = np.flatnonzero(has_signal & ~matched)
    first, same = _delocalized(wrong.size, arrived[wrong], d, options.outcome_weights(d), gen)
    signal_det[wrong] = first
    single[wrong] = same

    other_dark = gen.binomial(d - 1, q, size)
    all_dark = gen.binomial(d, q, size)
    dark_letter = gen.integers(0, d, size)

    resolved = np.full(size, NO_CLICK, dtype=np.int64)
    photon_ok = single & (other_dark == 0)
    resolved[photon_ok] = signal_det[photon_ok]
    dark_only = ~has_signal & (all_dark == 1)
    resolved[dark_only] = dark_letter[dark_only]
    return resolved, photon_ok


def transmit_pulse(symbol: QuditSymbol, bob_basis: Basis, params: ChannelParams, rng: RngLike,
                   options: SimulationOptions = SimulationOptions(),
                   photons: Optional[int] = None) -> DetectionEvent:
    """One gate with the full detector click vector."""
    gen = as_generator(rng)
    d = params.dimension
    symbol.check(d)
    if photons is None:
        photons = 1 if options.force_single_photon else int(gen.poisson(params.mean_photon_number))
    if options.detection_model is DetectionModel.PER_PULSE:
        arrived = int(photons >= 1 and gen.random() < params.efficiency)
    else:
        arrived = int(gen.binomial(photons, params.efficiency))

    signal = np.zeros(d, dtype=bool)
    if arrived:
        if bob_basis == symbol.basis:
            signal[symbol.letter] = True
        else:
            weights = options.outcome_weights(d)
            landing = gen.choice(d, size=arrived, p=weights)
            signal[landing] = True

    clicks = signal | (gen.random(d) < params.dark_click_probability)
    fired = np.flatnonzero(clicks)
    signal_origin = fired.size == 1 and bool(signal[fired[0]])
    return DetectionEvent(basis_used=bob_basis, clicks=tuple(clicks.tolist()), signal_origin=signal_origin)


def transmit_stream(stream: Sequence[QuditSymbol], params: ChannelParams, rng: RngLike,
                    options: SimulationOptions = SimulationOptions(),
                    bob_bases: Optional[Sequence[Basis]] = None) -> List[DetectionEvent]:
    """Send every slot; Bob picks a basis per slot independently (he cannot see pairings)."""
    gen = as_generator(rng)
    if bob_bases is None:
        bob_bases = [Basis.from_code(c) for c in gen.integers(0, 2, len(stream))]
    return [transmit_pulse(s, b, params, gen, options) for s, b in zip(stream, bob_bases)]


def _dbs_chunk(twin_count: int, params: ChannelParams, options: SimulationOptions,
               source: RandomSource) -> SessionTally:
    gen = source.generator()
    letters = gen.integers(0, params.dimension, twin_count)
    alice_basis, slots = encode_arrays(letters, params.dimension, gen)

    slot_letter = np.empty(2 * twin_count, dtype=np.int64)
    slot_basis = np.empty(2 * twin_count, dtype=np.int8)
    for column in (0, 1):
        slot_letter[slots[:, column]] = letters
        slot_basis[slots[:, column]] = alice_basis
    bob_basis = gen.integers(0, 2, 2 * twin_count, dtype=np.int8)

    resolved, signal = transmit_batch(slot_letter, slot_basis, bob_basis, params, gen, options)
    codes = classify_pairs(bob_basis, resolved, signal, slots, alice_basis)
    return SessionTally.from_codes(codes, ProtocolMode.DBS)


def _ipbe_chunk(slot_count: int, params: ChannelParams, options: SimulationOptions,
                source: RandomSource) -> SessionTally:
    gen = source.generator()
    letters = gen.integers(0, params.dimension, slot_count)
    alice_basis = gen.integers(0, 2, slot_count, dtype=np.int8)
    bob_basis = gen.integers(0, 2, slot_count, dtype=np.int8)
    resolved, signal = transmit_batch(letters, alice_basis, bob_basis, params, gen, options)

    codes = np.full(slot_count, _CODE[PairVerdict.LOST], dtype=np.int8)
    kept = bob_basis == alice_basis
    clicked = kept & (resolved >= 0)
    codes[~kept] = _CODE[PairVerdict.DISCARDED_MIXED_BASES]
    codes[clicked & signal] = _CODE[PairVerdict.CORRECT]
    # any surviving dark click is a false positive: IPBE cannot check it
    codes[clicked & ~signal] = _CODE[PairVerdict.EMPTY_ERROR]
    return SessionTally.from_codes(codes, ProtocolMode.IPBE)


def _oscar_chunk(count: int, params: ChannelParams, options: SimulationOptions,
                 mode: ProtocolMode, source: RandomSource) -> OscarTally:
    gen = source.generator()
    d = params.dimension
    pulses = 2 if mode is ProtocolMode.DBS else 1
    photons = _photon_numbers(count * pulses, params, options, gen).reshape(count, pulses)

    loaded = np.all(photons >= 1, axis=1)
    multi = np.all(photons >= 2, axis=1)
    if mode is ProtocolMode.DBS:
        # one stored photon per pulse, both measured in one guessed basis after the pairing is public
        extracted = multi & (gen.random(count) < 0.5)
    else:
        extracted = multi
    forwarded = np.where(photons >= 2, photons - 1, photons)

    letters = gen.integers(0, d, count)
    alice_basis = gen.integers(0, 2, count, dtype=np.int8)
    slot_letter = np.repeat(letters, pulses)
    slot_basis = np.repeat(alice_basis, pulses)
    bob_basis = gen.integers(0, 2, count * pulses, dtype=np.int8)
    resolved, signal = transmit_batch(slot_letter, slot_basis, bob_basis, params, gen, options,
                                      photons=forwarded.reshape(-1))

    if mode is ProtocolMode.DBS:
        slots = np.arange(2 * count).reshape(count, 2)
        codes = classify_pairs(bob_basis, resolved, signal, slots, alice_basis)
        bob_ok = codes == _CODE[PairVerdict.CORRECT]
    else:
        bob_ok = (bob_basis == alice_basis) & (resolved >= 0) & signal

    return OscarTally(
        loaded_count=int(loaded.sum()),
        intercepted_multi=int(multi.sum()),
        extracted_pairs=int(extracted.sum()),
        bob_successes=int((bob_ok & loaded).sum()),
        mode=mode,
    )


class _ChunkWorker:
    """Picklable adapter turning a keyword partial into a (size, stream) worker."""

    def __init__(self, func: partial):
        self.func = func

    def __call__(self, size: int, stream: RandomSource):
        return self.func(size, source=stream)


def chunk_sizes(total: int, chunk_size: int) -> List[int]:
    """Deterministic split of total into chunks, independent of worker count."""
    if chunk_size < 1:
        raise OutOfRange('chunk_size', chunk_size, "must be >= 1")
    full, rest = divmod(total, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def run_parallel(worker: Callable[[int, RandomSource], Any], total: int, rng: RngLike,
                 chunk_size: int = DEFAULT_CHUNK_SIZE, workers: int = 1) -> List[Any]:
    """Run worker(size, stream) over chunks, each on its own spawned stream.

    Results come back in chunk order, so merged tallies do not depend on the
    number of workers.
    """
    source = rng if isinstance(rng, RandomSource) else RandomSource(int(rng))
    sizes = chunk_sizes(total, chunk_size)
    streams = source.spawn(len(sizes))
    if workers <= 1 or len(sizes) <= 1:
        return [worker(size, stream) for size, stream in zip(sizes, streams)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, sizes, streams))


def _check_count(message_len: int) -> None:
    if message_len < 1:
        raise OutOfRange('message_len', message_len, "must be >= 1")


def run_dbs_session(message_len: int, params: ChannelParams, rng: RngLike,
                    options: SimulationOptions = SimulationOptions(),
                    chunk_size: int = DEFAULT_CHUNK_SIZE, workers: int = 1) -> SessionTally:
    """Encode, transmit, sift and score message_len random twins."""
    _check_count(message_len)
    analytics.require_two_bases(params)
    started = time.perf_counter()
    worker = partial(_dbs_chunk, params=params, options=options)
    parts = run_parallel(_ChunkWorker(worker), message_len, rng, chunk_size, workers)
    tally = reduce(SessionTally.merge, parts, SessionTally.empty(ProtocolMode.DBS))
    logger.info_with_context(
        "DBS session complete",
        twins=message_len,
        dimension=params.dimension,
        correct=tally.counts[PairVerdict.CORRECT],
        seconds=round(time.perf_counter() - started, 3),
    )
    return tally


def run_ipbe_session(message_len: int, params: ChannelParams, rng: RngLike,
                     options: SimulationOptions = SimulationOptions(),
                     chunk_size: int = DEFAULT_CHUNK_SIZE, workers: int = 1) -> SessionTally:
    """Single-pulse baseline with classical basis sifting."""
    _check_count(message_len)
    analytics.require_two_bases(params)
    worker = partial(_ipbe_chunk, params=params, options=options)
    parts = run_parallel(_ChunkWorker(worker), message_len, rng, chunk_size, workers)
    tally = reduce(SessionTally.merge, parts, SessionTally.empty(ProtocolMode.IPBE))
    logger.info_with_context("IPBE session complete", slots=message_len, dimension=params.dimension)
    return tally


def run_oscar_pns(message_len: int, params: ChannelParams, rng: RngLike,
                  options: SimulationOptions = SimulationOptions(),
                  mode: ProtocolMode = ProtocolMode.DBS,
                  chunk_size: int = DEFAULT_CHUNK_SIZE, workers: int = 1) -> OscarTally:
    """Oscar splits every multi-photon pulse, keeps one photon and forwards the rest."""
    _check_count(message_len)
    if params.mean_photon_number <= 0 and not options.force_single_photon:
        raise OutOfRange('mean_photon_number', params.mean_photon_number, "must be > 0")
    mode = ProtocolMode(mode)
    worker = partial(_oscar_chunk, params=params, options=options, mode=mode)
    parts = run_parallel(_ChunkWorker(worker), message_len, rng, chunk_size, workers)
    tally = reduce(OscarTally.merge, parts, OscarTally.empty(mode))
    logger.info_with_context(
        "PNS run complete",
        mode=mode.value,
        loaded=tally.loaded_count,
        extracted=tally.extracted_pairs,
    )
    return tally


def session_record(params: ChannelParams, tally: SessionTally,
                   options: SimulationOptions = SimulationOptions()) -> Dict[str, Any]:
    """One flat row: inputs, empirical estimates with errors, closed-form and exact expectations."""
    row: Dict[str, Any] = dict(params.to_dict())
    row.update(options.to_dict())
    row.update(tally.to_row())
    if tally.mode is ProtocolMode.DBS:
        printed = analytics.dbs_budget(params, strict=False)
    else:
        printed = analytics.ipbe_budget(params, strict=False)
    for key, value in printed.to_dict().items():
        row[f"{key}_analytic"] = value
    if options.delocalization is Delocalization.UNIFORM:
        exact = analytics.expected_session_budget(params, tally.mode, options.detection_model,
                                                  options.force_single_photon)
        for key, value in exact.to_dict().items():
            row[f"{key}_expected"] = value
    return row
