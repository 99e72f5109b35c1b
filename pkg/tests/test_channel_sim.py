import math
from functools import reduce

import numpy as np
import pytest
from scipy import stats

import analytics
from channel_sim import (
    OscarTally,
    chunk_sizes,
    run_dbs_session,
    run_ipbe_session,
    run_oscar_pns,
    run_parallel,
    session_record,
    transmit_batch,
    transmit_pulse,
    transmit_stream,
)
from models import (
    Basis,
    ChannelParams,
    Delocalization,
    DetectionModel,
    OutOfRange,
    PairVerdict,
    ProtocolMode,
    QuditSymbol,
    RandomSource,
    SessionTally,
    SimulationOptions,
)
from protocol import NO_CLICK

SINGLE = SimulationOptions(force_single_photon=True)
PER_PULSE = SimulationOptions(detection_model=DetectionModel.PER_PULSE)
SIGMAS = 4.0


def within_errors(hat, expected, trials, sigmas=SIGMAS):
    """Binomial agreement with an exact expectation, with one count of slack for rare tags."""
    spread = math.sqrt(trials * expected * (1.0 - expected))
    return abs(hat - expected) * trials <= sigmas * spread + 1.0


def noiseless(dimension, efficiency=1.0, mean_photon_number=1.0):
    return ChannelParams(dimension=dimension, efficiency=efficiency, dark_rate=0.0,
                         gate_time=1e-6, mean_photon_number=mean_photon_number)


@pytest.mark.unit
class TestTransmitPulse:
    def test_ideal_matched_basis(self):
        """Test one photon, no loss, no darks: a single click at the letter"""
        event = transmit_pulse(QuditSymbol(3, Basis.FOURIER), Basis.FOURIER, noiseless(8), 1, SINGLE)
        assert event.resolved == 3
        assert sum(event.clicks) == 1
        assert event.signal_origin

    def test_lost_photon_no_click(self):
        """Test zero efficiency and no darks leave the gate empty"""
        event = transmit_pulse(QuditSymbol(1, Basis.COMPUTATIONAL), Basis.COMPUTATIONAL,
                               noiseless(4, efficiency=0.0), 2, SINGLE)
        assert event.resolved is None
        assert not any(event.clicks)

    def test_empty_pulse_dark_clicks(self):
        """Test vacuum pulses fire the other D-1 detectors with probability P_gamma"""
        params = ChannelParams(dimension=8, efficiency=0.5, dark_rate=2e4, gate_time=1e-6)
        gen = np.random.default_rng(31)
        trials = 4000
        hits = sum(
            any(transmit_pulse(QuditSymbol(0, Basis.COMPUTATIONAL), Basis.COMPUTATIONAL,
                               params, gen, photons=0).clicks[1:])
            for _ in range(trials)
        )
        assert within_errors(hits / trials, analytics.p_gamma(params), trials)

    def test_speckle_weights_steer_wrong_basis(self):
        """Test a point-like outcome distribution sends wrong-basis photons to one detector"""
        options = SimulationOptions(delocalization=Delocalization.SPECKLE,
                                    speckle_weights=(0.0, 0.0, 1.0, 0.0), force_single_photon=True)
        gen = np.random.default_rng(4)
        for _ in range(20):
            event = transmit_pulse(QuditSymbol(0, Basis.COMPUTATIONAL), Basis.FOURIER,
                                   noiseless(4), gen, options)
            assert event.resolved == 2

    def test_letter_checked(self):
        """Test symbols outside the alphabet are rejected"""
        with pytest.raises(OutOfRange):
            transmit_pulse(QuditSymbol(4, Basis.COMPUTATIONAL), Basis.COMPUTATIONAL, noiseless(4), 1)

    def test_stream_uses_given_bases(self):
        """Test Bob's per-slot bases are honoured"""
        stream = [QuditSymbol(i % 4, Basis.COMPUTATIONAL) for i in range(6)]
        bases = [Basis.FOURIER, Basis.COMPUTATIONAL] * 3
        events = transmit_stream(stream, noiseless(4), 9, SINGLE, bob_bases=bases)
        assert [e.basis_used for e in events] == bases
        assert [e.resolved for e in events[1::2]] == [1, 3, 1]


@pytest.mark.unit
class TestTransmitBatch:
    def test_mismatched_basis_uniform(self):
        """Test wrong-basis single photons resolve uniformly over D detectors"""
        d, size = 36, 36000
        gen = np.random.default_rng(12)
        resolved, photon_ok = transmit_batch(
            np.zeros(size, dtype=np.int64), np.zeros(size, dtype=np.int8), np.ones(size, dtype=np.int8),
            noiseless(d), gen, SINGLE,
        )
        assert photon_ok.all()
        assert stats.chisquare(np.bincount(resolved, minlength=d)).pvalue > 0.001

    def test_multi_photon_wrong_basis_can_split(self):
        """Test several wrong-basis photons usually fire several detectors"""
        size = 2000
        gen = np.random.default_rng(13)
        photons = np.full(size, 3, dtype=np.int64)
        resolved, _ = transmit_batch(
            np.zeros(size, dtype=np.int64), np.zeros(size, dtype=np.int8), np.ones(size, dtype=np.int8),
            noiseless(4), gen, SimulationOptions(), photons=photons,
        )
        # all three on one detector: probability 1/16
        assert within_errors(np.mean(resolved != NO_CLICK), 1 / 16, size)

    def test_matched_multi_photon_stays_local(self):
        """Test matched-basis photons all reach the letter's detector"""
        size = 500
        letters = np.arange(size) % 4
        resolved, _ = transmit_batch(
            letters, np.zeros(size, dtype=np.int8), np.zeros(size, dtype=np.int8),
            noiseless(4), np.random.default_rng(1), SimulationOptions(),
            photons=np.full(size, 5, dtype=np.int64),
        )
        np.testing.assert_array_equal(resolved, letters)


@pytest.mark.unit
class TestDbsSession:
    def test_ideal_limit(self):
        """Test single photons on a perfect channel: p_corr 1/4, p_be 1/(4D)"""
        d, twins = 8, 20000
        tally = run_dbs_session(twins, noiseless(d), 3, SINGLE)
        assert within_errors(tally.p_corr, 0.25, twins)
        assert within_errors(tally.p_be, 1 / (4 * d), twins)
        assert tally.p_ee == 0.0

    @pytest.mark.parametrize('dimension', [2, 4, 16, 36])
    def test_wrong_basis_coincidence_is_one_over_d(self, dimension):
        """Test same-wrong-basis twins coincide with probability 1/D"""
        tally = run_dbs_session(40000, noiseless(dimension), dimension, SINGLE)
        be = tally.counts[PairVerdict.BASIS_ERROR]
        # on a perfect channel only wrong-basis twins can disagree
        same_wrong = be + tally.counts[PairVerdict.DISCARDED_MISMATCH]
        assert within_errors(be / same_wrong, 1 / dimension, same_wrong)

    def test_vacuum_source(self):
        """Test lambda = 0 gives no correct or basis-error twins"""
        params = ChannelParams(mean_photon_number=0.0, dark_rate=2e4, gate_time=1e-6)
        tally = run_dbs_session(20000, params, 6)
        assert tally.p_corr == 0.0
        assert tally.p_be == 0.0
        assert tally.p_ee > 0.0

    def test_verdicts_partition_twins(self, experiment_params):
        """Test verdict counts sum to the twin count"""
        tally = run_dbs_session(12345, experiment_params, 8, chunk_size=1000)
        assert sum(tally.counts.values()) == tally.twin_count == 12345

    def test_deterministic_replay(self, experiment_params):
        """Test equal seeds give equal tallies"""
        first = run_dbs_session(20000, experiment_params, 99, chunk_size=3000)
        second = run_dbs_session(20000, experiment_params, 99, chunk_size=3000)
        assert first == second
        assert run_dbs_session(20000, experiment_params, 100, chunk_size=3000) != first

    @pytest.mark.parametrize('detection_model', list(DetectionModel))
    def test_matches_expected_budget(self, experiment_params, detection_model):
        """Test experimental-condition twins agree with the exact expectation"""
        twins = 300_000
        options = SimulationOptions(detection_model=detection_model)
        tally = run_dbs_session(twins, experiment_params, 21, options)
        expected = analytics.expected_session_budget(experiment_params, ProtocolMode.DBS, detection_model)
        assert within_errors(tally.p_corr, expected.p_corr, twins)
        assert within_errors(tally.p_be, expected.p_be, twins)
        assert within_errors(tally.p_ee, expected.p_ee, twins)

    def test_per_pulse_corr_matches_closed_form(self, experiment_params):
        """Test the per-pulse model reproduces the printed P_Corr"""
        twins = 300_000
        tally = run_dbs_session(twins, experiment_params, 22, PER_PULSE)
        printed = analytics.dbs_budget(experiment_params)
        assert within_errors(tally.p_corr, printed.p_corr, twins)

    def test_loss_is_quadratic(self):
        """Test halving the efficiency quarters p_corr"""
        twins = 400_000
        full = run_dbs_session(twins, noiseless(16, 0.8, 0.2), 5, PER_PULSE)
        half = run_dbs_session(twins, noiseless(16, 0.4, 0.2), 6, PER_PULSE)
        ratio = full.p_corr / half.p_corr
        ratio_se = ratio * math.sqrt(1 / full.counts[PairVerdict.CORRECT] + 1 / half.counts[PairVerdict.CORRECT])
        assert abs(ratio - 4.0) <= SIGMAS * ratio_se

    def test_requires_two_bases(self):
        """Test the simulator refuses basis counts it does not model"""
        with pytest.raises(OutOfRange):
            run_dbs_session(10, ChannelParams(basis_count=3), 1)

    def test_message_length(self, experiment_params):
        """Test an empty message is rejected"""
        with pytest.raises(OutOfRange):
            run_dbs_session(0, experiment_params, 1)


@pytest.mark.unit
class TestIpbeSession:
    def test_no_darks_no_errors(self):
        """Test gamma = 0 gives zero errors"""
        tally = run_ipbe_session(50000, noiseless(16, 0.52, 0.2), 1)
        assert tally.p_ee == 0.0
        assert tally.p_be == 0.0
        assert tally.p_corr > 0.0

    def test_no_efficiency_no_correct(self, experiment_params):
        """Test eta = 0 gives no correct detections"""
        tally = run_ipbe_session(20000, experiment_params.with_updates(efficiency=0.0), 2)
        assert tally.counts[PairVerdict.CORRECT] == 0

    def test_matches_expected_budget(self, experiment_params):
        """Test D = 36 slots agree with the exact expectation"""
        slots = 400_000
        params = experiment_params.with_updates(dimension=36)
        tally = run_ipbe_session(slots, params, 3)
        expected = analytics.expected_session_budget(params, ProtocolMode.IPBE, DetectionModel.PER_PHOTON)
        assert within_errors(tally.p_corr, expected.p_corr, slots)
        assert within_errors(tally.p_ee, expected.p_ee, slots)
        assert tally.mode is ProtocolMode.IPBE


@pytest.mark.integration
class TestParallelRuns:
    def test_worker_count_does_not_change_result(self, experiment_params):
        """Test chunked results are identical with one or two processes"""
        serial = run_dbs_session(40000, experiment_params, 17, chunk_size=10000, workers=1)
        pooled = run_dbs_session(40000, experiment_params, 17, chunk_size=10000, workers=2)
        assert serial == pooled

    def test_chunk_sizes(self):
        """Test the split covers the total"""
        assert chunk_sizes(25, 10) == [10, 10, 5]
        assert chunk_sizes(20, 10) == [10, 10]
        with pytest.raises(OutOfRange):
            chunk_sizes(5, 0)

    def test_run_parallel_streams_are_distinct(self):
        """Test each chunk draws from its own stream"""
        draws = run_parallel(lambda size, stream: stream.generator().random(), 30, RandomSource(1), 10)
        assert len(set(draws)) == 3

    def test_merge_order_independent(self, experiment_params):
        """Test tallies merge commutatively"""
        parts = [run_dbs_session(3000, experiment_params, seed) for seed in range(4)]
        forward = reduce(SessionTally.merge, parts)
        backward = reduce(SessionTally.merge, reversed(parts))
        assert forward == backward


@pytest.mark.slow
class TestRandomizedAgreement:
    @pytest.mark.parametrize('case', range(20))
    def test_randomized_parameters(self, case):
        """Test every empirical probability against its exact expectation"""
        gen = np.random.default_rng(1000 + case)
        params = ChannelParams(
            dimension=int(gen.integers(2, 101)),
            efficiency=float(gen.uniform(0.1, 1.0)),
            mean_photon_number=float(gen.uniform(0.05, 1.0)),
            dark_rate=float(gen.uniform(0.0, 1e4)),
            gate_time=1e-6,
        )
        if params.dark_exponent > 1e-2:
            params = params.with_updates(dark_rate=1e-2 / (params.gate_time * (params.dimension - 1)))
        twins = 1_000_000
        tally = run_dbs_session(twins, params, case)
        expected = analytics.expected_session_budget(params, ProtocolMode.DBS, DetectionModel.PER_PHOTON)
        for hat, exact in [(tally.p_corr, expected.p_corr), (tally.p_be, expected.p_be),
                           (tally.p_ee, expected.p_ee)]:
            assert within_errors(hat, exact, twins)

    def test_experiment_million_twins(self, experiment_params):
        """Test the figure of merit at 10^6 twins against the exact expectation"""
        tally = run_dbs_session(1_000_000, experiment_params, 7)
        expected = analytics.expected_session_budget(experiment_params)
        assert abs(tally.ratio - expected.ratio) <= SIGMAS * tally.ratio_standard_error

    def test_per_pulse_million_twins_match_printed_budget(self, experiment_params):
        """Test per-pulse P_Corr, P_BE and their ratio sit within 3 sigma of the closed form"""
        twins = 1_000_000
        tally = run_dbs_session(twins, experiment_params, 31, PER_PULSE)
        printed = analytics.dbs_budget(experiment_params)
        assert within_errors(tally.p_corr, printed.p_corr, twins, sigmas=3)
        assert within_errors(tally.p_be, printed.p_be, twins, sigmas=3)
        assert abs(tally.ratio - printed.ratio) <= 3 * tally.ratio_standard_error

    def test_empty_error_near_printed_with_same_basis_gap(self):
        """Test dark-dominated P_EE stays within 30% of the closed form

        The closed form counts dark twins without requiring both darks in
        one basis group, so it runs about 12% above the simulated rate here.
        """
        params = ChannelParams(dimension=4, efficiency=0.52, mean_photon_number=0.2,
                               dark_rate=5e4, gate_time=1e-6)
        twins = 200_000
        tally = run_dbs_session(twins, params, 32, PER_PULSE)
        printed = analytics.dbs_budget(params)
        assert tally.counts[PairVerdict.EMPTY_ERROR] > 300
        assert tally.p_ee == pytest.approx(printed.p_ee, rel=0.3)


@pytest.mark.unit
class TestOscar:
    def test_dbs_extraction(self, experiment_params):
        """Test Oscar's DBS success is half the squared multi-photon fraction"""
        tally = run_oscar_pns(400_000, experiment_params, 41)
        target = analytics.eve_budget(experiment_params, ProtocolMode.DBS).p_o
        assert abs(tally.p_o_hat - target) <= SIGMAS * tally.p_o_se
        assert tally.extracted_pairs <= tally.intercepted_multi <= tally.loaded_count

    def test_ipbe_extraction(self, experiment_params):
        """Test Oscar reads every multi-photon IPBE pulse"""
        tally = run_oscar_pns(400_000, experiment_params, 42, mode=ProtocolMode.IPBE)
        target = analytics.eve_budget(experiment_params, ProtocolMode.IPBE).p_o
        assert abs(tally.p_o_hat - target) <= SIGMAS * tally.p_o_se
        assert tally.extracted_pairs == tally.intercepted_multi

    def test_dbs_beats_ipbe_against_oscar(self, experiment_params):
        """Test the twin requirement shrinks Oscar's share"""
        dbs = run_oscar_pns(200_000, experiment_params, 43)
        ipbe = run_oscar_pns(200_000, experiment_params, 43, mode=ProtocolMode.IPBE)
        assert dbs.p_o_hat < ipbe.p_o_hat

    def test_small_lambda_expansion(self):
        """Test lambda = 0.01 extraction is about (lambda/2)^2 / 2"""
        params = ChannelParams(mean_photon_number=0.01)
        assert analytics.eve_budget(params).p_o == pytest.approx(0.5 * (0.01 / 2) ** 2, rel=0.02)
        tally = run_oscar_pns(200_000, params, 44)
        assert tally.extracted_pairs <= 2

    def test_single_photons_cannot_be_split(self, experiment_params):
        """Test forcing n = 1 leaves nothing to extract"""
        tally = run_oscar_pns(10000, experiment_params, 45, SINGLE)
        assert tally.intercepted_multi == 0
        assert tally.extracted_pairs == 0
        assert tally.loaded_count == 10000

    def test_vacuum_rejected(self):
        """Test a zero mean photon number is refused"""
        with pytest.raises(OutOfRange):
            run_oscar_pns(10, ChannelParams(mean_photon_number=0.0), 1)

    def test_tally_invariants(self):
        """Test extraction cannot exceed interception"""
        with pytest.raises(OutOfRange):
            OscarTally(loaded_count=10, intercepted_multi=2, extracted_pairs=3, bob_successes=0)
        with pytest.raises(OutOfRange):
            OscarTally(loaded_count=1, intercepted_multi=2, extracted_pairs=0, bob_successes=0)

    def test_tally_merge(self):
        """Test merging is additive, commutative and mode-checked"""
        a = OscarTally(100, 10, 4, 20)
        b = OscarTally(50, 5, 1, 6)
        assert a.merge(b) == b.merge(a) == OscarTally(150, 15, 5, 26)
        with pytest.raises(OutOfRange):
            a.merge(OscarTally.empty(ProtocolMode.IPBE))

    def test_tally_ratio(self):
        """Test Bob-to-Oscar ratio and its sentinel"""
        assert OscarTally(100, 10, 4, 20).ratio == pytest.approx(5.0)
        assert math.isinf(OscarTally(100, 0, 0, 20).ratio)
        assert OscarTally.empty().p_o_hat == 0.0


@pytest.mark.unit
class TestSessionRecord:
    def test_row_has_inputs_estimates_and_expectations(self, experiment_params):
        """Test the flat output record"""
        tally = run_dbs_session(2000, experiment_params, 1)
        row = session_record(experiment_params, tally)
        assert row['dimension'] == 16
        assert row['mode'] == 'dbs'
        assert row['p_corr_analytic'] == pytest.approx(analytics.dbs_budget(experiment_params).p_corr)
        assert 'p_corr_expected' in row
        assert 'p_corr_se' in row

    def test_speckle_row_has_no_exact_expectation(self, experiment_params):
        """Test exact expectations are only reported for uniform delocalization"""
        options = SimulationOptions(delocalization=Delocalization.SPECKLE, speckle_weights=tuple([1.0] * 16))
        tally = run_ipbe_session(2000, experiment_params, 1, options)
        row = session_record(experiment_params, tally, options)
        assert row['delocalization'] == 'speckle'
        assert 'ratio_analytic' in row
        assert 'ratio_expected' not in row
