import os

import numpy as np
import pytest
from scipy import stats

from models import Basis, Delocalization, OutOfRange, RandomSource, SimulationOptions
from speckle import (
    IntensityMap,
    SlmMask,
    TransferMatrix,
    delocalized_distribution,
    enhancement_bound,
    exhaustive_focus,
    fiber_ensemble,
    focus_trace,
    generate_fiber,
    grid_shape,
    measure_intensity,
    optimize_focus,
    output_field,
    read_grid_csv,
    same_detector_fraction,
    sample_pd_pd2,
    speckle_weights,
    to_basis,
    write_grid_csv,
)

COMP = Basis.COMPUTATIONAL
FOUR = Basis.FOURIER


@pytest.mark.unit
class TestFiber:
    def test_shapes(self):
        """Test the 17 x 17 detector configuration and the trivial fiber"""
        assert generate_fiber(256, 289, 1).matrix.shape == (256, 289)
        single = generate_fiber(1, 1, 1)
        assert single.segments == single.modes == 1

    def test_deterministic(self):
        """Test a fixed seed reproduces the matrix"""
        np.testing.assert_array_equal(generate_fiber(8, 9, 5).matrix, generate_fiber(8, 9, 5).matrix)
        assert generate_fiber(8, 9, 5).seed == 5

    def test_variance_one_over_segments(self):
        """Test entry variance is 1/S"""
        tm = generate_fiber(100, 400, RandomSource(3))
        assert np.mean(np.abs(tm.matrix) ** 2) == pytest.approx(0.01, rel=0.05)

    def test_static_once_drawn(self):
        """Test the matrix cannot be modified in place"""
        tm = generate_fiber(2, 2, 1)
        with pytest.raises(ValueError):
            tm.matrix[0, 0] = 0

    @pytest.mark.parametrize('segments,modes', [(0, 4), (4, 0)])
    def test_sizes_validated(self, segments, modes):
        """Test empty fibers are rejected"""
        with pytest.raises(OutOfRange):
            generate_fiber(segments, modes, 1)

    def test_save_load(self, temp_dir):
        """Test the npz export keeps the matrix and seed"""
        tm = generate_fiber(6, 9, 12)
        path = os.path.join(temp_dir, 'fiber.npz')
        tm.save(path)
        loaded = TransferMatrix.load(path)
        np.testing.assert_array_equal(loaded.matrix, tm.matrix)
        assert loaded.seed == 12

    def test_ensemble_members_differ(self):
        """Test spawned fibers are independent"""
        first, second = fiber_ensemble(2, 4, 4, 7)
        assert not np.array_equal(first.matrix, second.matrix)
        assert [f.matrix.tolist() for f in fiber_ensemble(2, 4, 4, 7)] == [first.matrix.tolist(),
                                                                          second.matrix.tolist()]


@pytest.mark.unit
class TestFieldsAndBases:
    def test_dft_is_unitary(self):
        """Test the Fourier transform preserves total power"""
        gen = np.random.default_rng(0)
        field = gen.normal(size=289) + 1j * gen.normal(size=289)
        before = np.sum(np.abs(field) ** 2)
        assert np.sum(np.abs(to_basis(field, FOUR)) ** 2) == pytest.approx(before, rel=1e-9)
        assert to_basis(field, COMP) is field

    def test_two_mode_closed_form(self):
        """Test a hand-computable 2 x 2 fiber"""
        tm = TransferMatrix(np.array([[1.0, 1.0], [1.0, -1.0]]))
        flat = SlmMask.flat(2)
        np.testing.assert_allclose(output_field(tm, flat), [2.0, 0.0])
        np.testing.assert_allclose(measure_intensity(tm, flat, COMP, COMP).probabilities, [1.0, 0.0])
        np.testing.assert_allclose(measure_intensity(tm, flat, FOUR, COMP).probabilities, [0.5, 0.5])
        flipped = SlmMask(np.array([0.0, np.pi]))
        np.testing.assert_allclose(measure_intensity(tm, flipped, COMP, COMP).probabilities, [0.0, 1.0],
                                   atol=1e-12)

    def test_mask_size_checked(self):
        """Test the mask must have one phase per segment"""
        with pytest.raises(OutOfRange):
            output_field(generate_fiber(3, 3, 1), SlmMask.flat(2))

    def test_mask_is_unit_modulus(self):
        """Test phases wrap and sigma has modulus one"""
        mask = SlmMask(np.array([-np.pi / 2, 7.0]))
        assert np.all((mask.phases >= 0) & (mask.phases < 2 * np.pi))
        np.testing.assert_allclose(np.abs(mask.sigma), 1.0)

    def test_energy_bookkeeping(self):
        """Test mean total output power does not depend on the mask"""
        fibers = fiber_ensemble(100, 64, 64, 21)
        gen = np.random.default_rng(22)
        flat = np.mean([np.sum(np.abs(output_field(tm, SlmMask.flat(64))) ** 2) for tm in fibers])
        scrambled = np.mean([
            np.sum(np.abs(output_field(tm, SlmMask(gen.uniform(0, 2 * np.pi, 64)))) ** 2) for tm in fibers
        ])
        assert flat == pytest.approx(64.0, rel=0.05)
        assert scrambled == pytest.approx(flat, rel=0.05)

    def test_grid_shape(self):
        """Test square grids and the single-row fallback"""
        assert grid_shape(289) == (17, 17)
        assert grid_shape(36) == (6, 6)
        assert grid_shape(10) == (1, 10)


@pytest.mark.unit
class TestFocus:
    def test_single_segment_no_gain(self):
        """Test one segment cannot be enhanced"""
        _, enhancement = optimize_focus(generate_fiber(1, 4, 2), 0)
        assert enhancement == pytest.approx(1.0)

    def test_sixty_four_segments(self):
        """Test enhancement near pi/4 (S - 1) + 1 for S = M = 64"""
        fibers = fiber_ensemble(5, 64, 64, 30)
        mean = np.mean([optimize_focus(tm, 10)[1] for tm in fibers])
        assert mean == pytest.approx(enhancement_bound(64), rel=0.3)

    @pytest.mark.parametrize('basis', [COMP, FOUR])
    def test_history_non_decreasing(self, basis):
        """Test the objective never drops across sweeps"""
        result = focus_trace(generate_fiber(32, 49, 8), 24, basis, iterations=5)
        assert all(b >= a for a, b in zip(result.history, result.history[1:]))
        assert result.history[-1] > result.history[0]
        assert result.basis is basis

    @pytest.mark.parametrize('segments', [1, 2, 3])
    def test_matches_exhaustive_search(self, segments):
        """Test coordinate ascent finds the grid optimum on small fibers"""
        for tm in fiber_ensemble(50, segments, 5, 100 + segments):
            result = focus_trace(tm, 2, COMP, iterations=20, test_phases=4)
            assert result.history[-1] == pytest.approx(exhaustive_focus(tm, 2, COMP, test_phases=4), rel=1e-9)

    def test_fourier_focus_localises_in_fourier(self):
        """Test a Fourier-basis focus is concentrated after the transform"""
        tm = generate_fiber(64, 64, 9)
        mask, _ = optimize_focus(tm, 5, FOUR)
        imap = measure_intensity(tm, mask, FOUR, FOUR)
        assert int(np.argmax(imap.probabilities)) == 5
        assert imap.localized

    def test_target_checked(self):
        """Test targets outside the mode range are rejected"""
        with pytest.raises(OutOfRange):
            optimize_focus(generate_fiber(4, 4, 1), 4)

    def test_exhaustive_size_limit(self):
        """Test brute force refuses large segment counts"""
        with pytest.raises(OutOfRange):
            exhaustive_focus(generate_fiber(9, 4, 1), 0)


@pytest.mark.unit
class TestDelocalization:
    def test_localization_contrast(self):
        """Test matched-basis peak mass beats the mismatched peak tenfold"""
        tm = generate_fiber(256, 289, 40)
        mask, _ = optimize_focus(tm, 144)
        localized = measure_intensity(tm, mask, COMP, COMP)
        spread = delocalized_distribution(tm, mask)
        assert int(np.argmax(localized.probabilities)) == 144
        assert localized.peak_mass() >= 10 * spread.peak_mass()
        assert not spread.localized
        assert spread.probabilities.sum() == pytest.approx(1.0, abs=1e-9)

    def test_rayleigh_coincidence(self):
        """Test unfocused speckle coincides on one pixel about 2/M of the time"""
        modes = 64
        fractions = [
            same_detector_fraction(delocalized_distribution(tm, SlmMask.flat(32)))
            for tm in fiber_ensemble(60, 32, modes, 50)
        ]
        assert np.mean(fractions) == pytest.approx(2.0 / modes, rel=0.15)

    def test_focused_pairs_mostly_split(self):
        """Test mismatched-basis photon pairs from a tight focus rarely share a detector"""
        modes = 36
        fractions = []
        for tm in fiber_ensemble(10, 2048, modes, 60):
            mask, _ = optimize_focus(tm, 17)
            fractions.append(same_detector_fraction(delocalized_distribution(tm, mask)))
        assert np.mean(fractions) == pytest.approx(0.02, abs=0.015)

    def test_weights_feed_channel_options(self):
        """Test the delocalized map becomes simulator weights"""
        tm = generate_fiber(16, 16, 3)
        mask, _ = optimize_focus(tm, 0)
        weights = speckle_weights(delocalized_distribution(tm, mask), 16)
        options = SimulationOptions(delocalization=Delocalization.SPECKLE, speckle_weights=weights)
        assert options.outcome_weights(16).sum() == pytest.approx(1.0)
        with pytest.raises(OutOfRange):
            speckle_weights(delocalized_distribution(tm, mask), 8)


@pytest.mark.unit
class TestDetectionMaps:
    def test_delta_map(self):
        """Test a point map puts every pair on one pixel"""
        maps = sample_pd_pd2(IntensityMap(np.array([0.0, 0.0, 1.0, 0.0])), 500, 1)
        np.testing.assert_allclose(maps.pd2, [0.0, 0.0, 1.0, 0.0])
        assert maps.different_pixel_fraction == 0.0

    def test_uniform_map(self):
        """Test uniform outcomes coincide with probability 1/M"""
        maps = sample_pd_pd2(IntensityMap(np.full(36, 1 / 36)), 200_000, 2)
        assert maps.same_pixel_fraction == pytest.approx(1 / 36, abs=0.002)
        assert maps.pd.sum() == pytest.approx(1.0)

    def test_pd2_is_pd_squared(self):
        """Test same-pixel pairs follow p_m^2 (chi-square, 10^6 pairs)"""
        gen = np.random.default_rng(5)
        imap = IntensityMap.from_intensity(gen.uniform(0.5, 1.5, 25))
        pairs = 1_000_000
        maps = sample_pd_pd2(imap, pairs, gen)
        same = np.rint(maps.pd2 * pairs)
        observed = np.append(same, pairs - same.sum())
        p2 = imap.probabilities ** 2
        expected = np.append(p2, 1.0 - p2.sum()) * pairs
        assert stats.chisquare(observed, expected).pvalue > 0.001

    def test_pair_count_validated(self):
        """Test at least one pair is required"""
        with pytest.raises(OutOfRange):
            sample_pd_pd2(IntensityMap(np.array([1.0])), 0, 1)

    def test_normalisation_enforced(self):
        """Test maps must sum to one"""
        with pytest.raises(OutOfRange):
            IntensityMap(np.array([0.5, 0.6]))
        with pytest.raises(OutOfRange):
            IntensityMap.from_intensity(np.zeros(3))


@pytest.mark.unit
class TestGridCsv:
    def test_round_trip(self, temp_dir):
        """Test row-major export with a dimension header"""
        grid = np.arange(12, dtype=float).reshape(3, 4) / 7.0
        path = os.path.join(temp_dir, 'pd.csv')
        write_grid_csv(grid, path)
        with open(path) as f:
            assert f.readline().strip() == "# rows=3 cols=4"
        np.testing.assert_array_equal(read_grid_csv(path), grid)

    def test_header_mismatch(self, temp_dir):
        """Test a truncated grid is detected"""
        path = os.path.join(temp_dir, 'bad.csv')
        with open(path, 'w') as f:
            f.write("# rows=2 cols=2\n1.0,2.0\n")
        with pytest.raises(OutOfRange):
            read_grid_csv(path)
