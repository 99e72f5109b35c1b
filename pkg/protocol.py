"""DBS protocol: twin encoding, random interweaving, pairing announcement and sifting."""

import json
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from logger_config import get_logger
from models import (
    VERDICT_ORDER,
    Basis,
    ChannelParams,
    DetectionEvent,
    LengthMismatch,
    LetterOutOfRange,
    OutOfRange,
    PairVerdict,
    ProtocolMode,
    QuditSymbol,
    RandomSource,
    SessionTally,
    as_generator,
)
from utils.file_lock import atomic_text_file

logger = get_logger(__name__)

RngLike = Union[RandomSource, np.random.Generator, int]

NO_CLICK = -1

_CODE = {tag: i for i, tag in enumerate(VERDICT_ORDER)}


@dataclass(frozen=True)
class TwinRecord:
    """One letter sent as two identical photons at two stream slots."""
    symbol: QuditSymbol
    first_slot: int
    second_slot: int

    def check(self, stream_length: int) -> None:
        if self.first_slot == self.second_slot:
            raise OutOfRange('second_slot', self.second_slot, "twin slots must differ")
        for slot in (self.first_slot, self.second_slot):
            if not 0 <= slot < stream_length:
                raise OutOfRange('slot', slot, f"stream has {stream_length} slots")


@dataclass(frozen=True)
class ShuffleAnnouncement:
    """The secret pairing, revealed only after Bob has measured.

    pairs[i] holds the two slots of twin i.
    """
    pairs: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        object.__setattr__(self, 'pairs', pairs)
        slots = [s for pair in pairs for s in pair]
        if sorted(slots) != list(range(len(slots))):
            raise OutOfRange('pairs', None, "must be a perfect matching of 0..N-1")

    @property
    def stream_length(self) -> int:
        return 2 * len(self.pairs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def partner(self, slot: int) -> int:
        for a, b in self.pairs:
            if a == slot:
                return b
            if b == slot:
                return a
        raise OutOfRange('slot', slot)

    def to_dict(self) -> dict:
        return {'pairs': [list(p) for p in self.pairs]}


@dataclass(frozen=True)
class SiftedKey:
    """Letters Bob accepts after sifting, with the twin each came from.

    Wrong-basis coincidences are included unmarked: Bob cannot tell them apart.
    """
    letters: Tuple[int, ...]
    source_twin: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.letters)


def random_pairing(twin_count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform perfect matching of 2*twin_count slots, shape (twin_count, 2), rows sorted."""
    slots = rng.permutation(2 * twin_count).reshape(twin_count, 2)
    return np.sort(slots, axis=1)


def encode_arrays(letters: np.ndarray, dimension: int,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised encoder: per-twin basis codes and the (twins, 2) slot matrix."""
    letters = np.asarray(letters, dtype=np.int64)
    bad = np.flatnonzero((letters < 0) | (letters >= dimension))
    if bad.size:
        i = int(bad[0])
        raise LetterOutOfRange(i, int(letters[i]), dimension)
    bases = rng.integers(0, 2, size=letters.size, dtype=np.int8)
    return bases, random_pairing(letters.size, rng)


def encode_message(letters: Sequence[int], params: ChannelParams,
                   rng: RngLike) -> Tuple[List[QuditSymbol], ShuffleAnnouncement]:
    """Encode each letter as a twin in a random basis, interwoven at random slots.

    Returns the per-slot stream Alice transmits and the announcement she
    will publish after Bob's measurement.
    """
    generator = as_generator(rng)
    letters_arr = np.asarray(list(letters), dtype=np.int64)
    bases, slots = encode_arrays(letters_arr, params.dimension, generator)

    stream: List[QuditSymbol] = [None] * (2 * letters_arr.size)  # type: ignore[list-item]
    for i, (letter, basis_code) in enumerate(zip(letters_arr, bases)):
        symbol = QuditSymbol(int(letter), Basis.from_code(basis_code))
        twin = TwinRecord(symbol, int(slots[i, 0]), int(slots[i, 1]))
        twin.check(len(stream))
        stream[twin.first_slot] = symbol
        stream[twin.second_slot] = symbol

    announcement = ShuffleAnnouncement(tuple(map(tuple, slots.tolist())))
    logger.debug_with_context("Encoded message", twins=len(letters_arr), slots=len(stream))
    return stream, announcement


def twins_of(stream: Sequence[QuditSymbol], announcement: ShuffleAnnouncement) -> List[TwinRecord]:
    """Rebuild the twin records from a stream and its announcement."""
    return [TwinRecord(stream[a], a, b) for a, b in announcement.pairs]


def accept_pairs(bob_basis: np.ndarray, resolved: np.ndarray,
                 slots: np.ndarray) -> np.ndarray:
    """Bob's in-protocol rule: both slots resolved, same basis, same letter.

    Uses only his own read-out and the public pairing.
    """
    first, second = slots[:, 0], slots[:, 1]
    r1, r2 = resolved[first], resolved[second]
    return (r1 >= 0) & (r2 >= 0) & (bob_basis[first] == bob_basis[second]) & (r1 == r2)


def classify_pairs(bob_basis: np.ndarray, resolved: np.ndarray, signal: np.ndarray,
                   slots: np.ndarray, alice_basis: np.ndarray) -> np.ndarray:
    """Omniscient scoring of every twin, returned as PairVerdict codes."""
    first, second = slots[:, 0], slots[:, 1]
    r1, r2 = resolved[first], resolved[second]
    b1, b2 = bob_basis[first], bob_basis[second]
    s1, s2 = signal[first], signal[second]

    codes = np.full(slots.shape[0], _CODE[PairVerdict.LOST], dtype=np.int8)
    both = (r1 >= 0) & (r2 >= 0)
    mixed = both & (b1 != b2)
    mismatch = both & ~mixed & (r1 != r2)
    accepted = both & ~mixed & ~mismatch

    codes[mixed] = _CODE[PairVerdict.DISCARDED_MIXED_BASES]
    codes[mismatch] = _CODE[PairVerdict.DISCARDED_MISMATCH]
    # at least one photon click: scored on Bob's basis alone, a dark partner included
    with_photon = accepted & (s1 | s2)
    codes[with_photon & (b1 == alice_basis)] = _CODE[PairVerdict.CORRECT]
    codes[with_photon & (b1 != alice_basis)] = _CODE[PairVerdict.BASIS_ERROR]
    codes[accepted & ~s1 & ~s2] = _CODE[PairVerdict.EMPTY_ERROR]
    return codes


def events_to_arrays(events: Sequence[DetectionEvent]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    bob_basis = np.fromiter((e.basis_used.code for e in events), dtype=np.int8, count=len(events))
    resolved = np.fromiter(
        (NO_CLICK if e.resolved is None else e.resolved for e in events), dtype=np.int64, count=len(events)
    )
    signal = np.fromiter((e.signal_origin for e in events), dtype=bool, count=len(events))
    return bob_basis, resolved, signal


def sift(bob_outcomes: Sequence[DetectionEvent], announcement: ShuffleAnnouncement,
         params: ChannelParams, sent: Sequence[QuditSymbol]) -> Tuple[SiftedKey, List[PairVerdict]]:
    """Cross-reference Bob's outcomes with the revealed pairing.

    The sifted key depends only on the outcomes and the announcement; `sent`
    (Alice's per-slot symbols) feeds the verdicts used for scoring.
    """
    n = announcement.stream_length
    if len(bob_outcomes) != n:
        raise LengthMismatch(n, len(bob_outcomes))
    if len(sent) != n:
        raise LengthMismatch(n, len(sent))
    for event in bob_outcomes:
        if len(event.clicks) != params.dimension:
            raise OutOfRange('clicks', len(event.clicks), f"need {params.dimension} detectors")

    bob_basis, resolved, signal = events_to_arrays(bob_outcomes)
    slots = announcement.as_array()

    keep = accept_pairs(bob_basis, resolved, slots)
    kept = np.flatnonzero(keep)
    key = SiftedKey(
        letters=tuple(int(x) for x in resolved[slots[kept, 0]]),
        source_twin=tuple(int(i) for i in kept),
    )

    alice_basis = np.fromiter((sent[a].basis.code for a, _ in announcement.pairs),
                              dtype=np.int8, count=len(announcement.pairs))
    codes = classify_pairs(bob_basis, resolved, signal, slots, alice_basis)
    verdicts = [VERDICT_ORDER[c] for c in codes]
    return key, verdicts


def score_session(verdicts: Iterable[PairVerdict],
                  mode: ProtocolMode = ProtocolMode.DBS) -> SessionTally:
    """Count verdicts into a tally."""
    codes = np.fromiter((PairVerdict(v).code for v in verdicts), dtype=np.int64)
    return SessionTally.from_codes(codes, mode)


def write_transcript(path: str, stream: Sequence[QuditSymbol],
                     events: Sequence[DetectionEvent]) -> None:
    """One JSON record per slot: slot, Alice's basis and letter, Bob's basis and clicks."""
    if len(stream) != len(events):
        raise LengthMismatch(len(stream), len(events))
    with atomic_text_file(path) as f:
        for slot, (symbol, event) in enumerate(zip(stream, events)):
            record = {
                'slot': slot,
                'alice_basis': symbol.basis.value,
                'alice_letter': symbol.letter,
                **event.to_dict(),
            }
            f.write(json.dumps(record) + '\n')


def read_transcript(path: str) -> Tuple[List[QuditSymbol], List[DetectionEvent]]:
    stream: List[QuditSymbol] = []
    events: List[DetectionEvent] = []
    with open(path, 'r') as f:
        for expected_slot, line in enumerate(l for l in f if l.strip()):
            record = json.loads(line)
            if record['slot'] != expected_slot:
                raise OutOfRange('slot', record['slot'], f"expected {expected_slot}")
            stream.append(QuditSymbol(int(record['alice_letter']), Basis(record['alice_basis'])))
            events.append(DetectionEvent.from_dict(record))
    return stream, events
