"""Closed-form error, eavesdropping and combinatorial quantities for DBS and IPBE.

Formulas are implemented exactly as printed for the two-basis protocol;
expected_session_budget gives the exact expectations of the Monte Carlo
model so the two can be compared.
"""

import math
from dataclasses import asdict, dataclass
from decimal import Decimal, localcontext
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import special

from logger_config import get_logger
from models import (
    ChannelParams,
    DegenerateDenominator,
    DetectionModel,
    NoSolution,
    OddLength,
    OutOfRange,
    ProtocolMode,
    validate_params,
)

logger = get_logger(__name__)

INF = math.inf

# crossover scan defaults
DEFAULT_MAX_LOSS = 0.95
DEFAULT_LOSS_STEPS = 951
LOSS_TOLERANCE = 1e-6
DEFAULT_MAX_DIMENSION = 100
DEFAULT_RATIO_THRESHOLD = 0.4


@dataclass(frozen=True)
class ErrorBudget:
    """P_Corr, P_BE, P_EE and the figure of merit (P_BE + P_EE) / P_Corr."""
    p_corr: float
    p_be: float
    p_ee: float
    ratio: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class EveBudget:
    """Bob and Oscar success probabilities under photon-number splitting."""
    p_b: float
    p_o: float
    ratio: float
    p_mult: float
    p_phot: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class ExpectedBudget:
    """Exact per-twin (DBS) or per-slot (IPBE) frequencies of the simulator."""
    p_corr: float
    p_be: float
    p_ee: float
    ratio: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class CrossoverResult:
    """Where DBS and IPBE swap preference along the loss axis.

    dominant is "crossing" when the preference changes inside the scanned
    range, otherwise "dbs" or "ipbe" for the protocol preferred throughout.
    """
    loss: Optional[float]
    dominant: str
    dbs_preferred_above: Optional[bool] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def require_two_bases(params: ChannelParams) -> None:
    if params.basis_count != 2:
        raise OutOfRange('basis_count', params.basis_count, "closed forms hold for two bases only")


def _safe_ratio(numerator: float, denominator: float) -> float:
    if denominator == 0.0:
        return INF
    return numerator / denominator


def p_gamma(params: ChannelParams) -> float:
    """Probability of a false click among the D-1 non-signal detectors."""
    return -math.expm1(-params.dark_exponent)


def dbs_budget(params: ChannelParams, strict: bool = True) -> ErrorBudget:
    """DBS error budget.

    With strict=False a zero P_Corr yields an infinite ratio instead of
    raising, which keeps sweep tables rectangular.
    """
    require_two_bases(params)
    eta = params.efficiency
    lam = params.mean_photon_number
    loaded = -math.expm1(-lam)
    pg = p_gamma(params)

    p_corr = (eta ** 2 / 4.0) * loaded ** 2 * math.exp(-2.0 * params.dark_exponent)
    p_be = (eta ** 2 / (4.0 * params.dimension)) * loaded ** 2
    p_ee = (math.exp(-2.0 * lam) * pg ** 2 / params.dimension
            + loaded ** 2 * (1.0 - eta) ** 2 * pg ** 2 / params.dimension)
    if p_corr == 0.0 and strict:
        raise DegenerateDenominator('p_corr')
    return ErrorBudget(p_corr, p_be, p_ee, _safe_ratio(p_be + p_ee, p_corr))


def ipbe_budget(params: ChannelParams, strict: bool = True) -> ErrorBudget:
    """IPBE error budget; wrong-basis errors are always sifted out."""
    require_two_bases(params)
    eta = params.efficiency
    lam = params.mean_photon_number
    loaded = -math.expm1(-lam)
    pg = p_gamma(params)

    p_corr = eta * loaded * (1.0 - pg) / 2.0
    p_ee = math.exp(-lam) * pg + loaded * (1.0 - eta) * pg
    if p_corr == 0.0 and strict:
        raise DegenerateDenominator('p_corr')
    return ErrorBudget(p_corr, 0.0, p_ee, _safe_ratio(p_ee, p_corr))


def dbs_corr_equivalence(params: ChannelParams) -> Tuple[float, float]:
    """Both published forms of the DBS P_Corr; they agree since 1 - P_gamma = exp(-gamma tau (D-1))."""
    eta = params.efficiency
    loaded = -math.expm1(-params.mean_photon_number)
    exponential_form = eta ** 2 / 4.0 * loaded ** 2 * math.exp(-2.0 * params.dark_exponent)
    p_gamma_form = eta ** 2 * loaded ** 2 * (1.0 - p_gamma(params)) ** 2 / 4.0
    return exponential_form, p_gamma_form


def p_mult(mean_photon_number: float) -> float:
    """P(n >= 2) for a Poisson pulse, i.e. 1 - e^-lambda (1 + lambda)."""
    return float(special.gammainc(2, mean_photon_number)) if mean_photon_number > 0 else 0.0


def p_phot(mean_photon_number: float) -> float:
    """P(n >= 1) = 1 - e^-lambda."""
    return -math.expm1(-mean_photon_number)


def p_mult_ratio(mean_photon_number: float) -> float:
    """Fraction of loaded pulses that carry two or more photons."""
    if mean_photon_number <= 0:
        raise DegenerateDenominator('p_phot')
    return p_mult(mean_photon_number) / p_phot(mean_photon_number)


def eve_budget(params: ChannelParams, mode: ProtocolMode = ProtocolMode.DBS,
               strict: bool = True) -> EveBudget:
    """Bob vs. photon-number-splitting Oscar, for DBS twins or IPBE single pulses.

    A vacuum source leaves Oscar's share undefined. With strict=False it is
    reported as inf, as is the ratio, instead of raising.
    """
    require_two_bases(params)
    lam = params.mean_photon_number
    survival = math.exp(-params.dark_exponent)
    dbs = ProtocolMode(mode) is ProtocolMode.DBS
    p_b = (params.efficiency / 2.0) ** 2 * survival ** 2 if dbs else (params.efficiency / 2.0) * survival
    if lam <= 0.0:
        if strict:
            raise DegenerateDenominator('p_mult')
        return EveBudget(p_b=p_b, p_o=INF, ratio=INF, p_mult=0.0, p_phot=0.0)
    mult = p_mult(lam)
    phot = p_phot(lam)
    fraction = mult / phot
    p_o = 0.5 * fraction ** 2 if dbs else fraction
    return EveBudget(p_b=p_b, p_o=p_o, ratio=_safe_ratio(p_b, p_o), p_mult=mult, p_phot=phot)


def pairing_combinations(n: int) -> int:
    """Number of sequential pairings of n interwoven photons, prod_{j=2,4..n} C(j, 2)."""
    if n < 2 or n % 2:
        raise OddLength(n)
    return math.prod(j * (j - 1) // 2 for j in range(2, n + 1, 2))


def basis_guess_probability(n: int, basis_count: int = 2) -> float:
    """Probability of guessing every basis of n photons."""
    if n < 1:
        raise OutOfRange('n', n, "must be >= 1")
    if basis_count < 2:
        raise OutOfRange('basis_count', basis_count, "must be >= 2")
    return float(basis_count) ** (-n)


def reciprocal_scientific(value: int, digits: int = 3) -> str:
    """1/value in scientific notation with `digits` significant digits, exact for any big integer."""
    if value <= 0:
        raise OutOfRange('value', value, "must be positive")
    with localcontext() as ctx:
        ctx.prec = digits + 10
        reciprocal = Decimal(1) / Decimal(value)
    return f"{reciprocal:.{digits - 1}E}"


def _dbs_ratio_raw(eta, lam, dark_exponent, dimension):
    """Vectorised DBS ratio; inf where P_Corr vanishes."""
    eta = np.asarray(eta, dtype=float)
    loaded = -np.expm1(-lam)
    pg = -np.expm1(-np.asarray(dark_exponent, dtype=float))
    p_corr = eta ** 2 / 4.0 * loaded ** 2 * np.exp(-2.0 * np.asarray(dark_exponent))
    p_be = eta ** 2 / (4.0 * dimension) * loaded ** 2
    p_ee = (np.exp(-2.0 * lam) + loaded ** 2 * (1.0 - eta) ** 2) * pg ** 2 / dimension
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(p_corr > 0, (p_be + p_ee) / np.where(p_corr > 0, p_corr, 1.0), INF)


def _ipbe_ratio_raw(eta, lam, dark_exponent):
    eta = np.asarray(eta, dtype=float)
    loaded = -np.expm1(-lam)
    pg = -np.expm1(-np.asarray(dark_exponent, dtype=float))
    p_corr = eta * loaded * (1.0 - pg) / 2.0
    p_ee = (np.exp(-lam) + loaded * (1.0 - eta)) * pg
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(p_corr > 0, p_ee / np.where(p_corr > 0, p_corr, 1.0), INF)


def dbs_ratio(params: ChannelParams) -> float:
    return dbs_budget(params, strict=False).ratio


def ipbe_ratio(params: ChannelParams) -> float:
    return ipbe_budget(params, strict=False).ratio


def _dbs_preferred(dbs, ipbe):
    """Ties go to DBS; IPBE needs a strictly smaller ratio. Both infinite prefers neither."""
    dbs = np.asarray(dbs)
    ipbe = np.asarray(ipbe)
    return (dbs <= ipbe) & ~(np.isinf(dbs) & np.isinf(ipbe))


def find_crossover_dimension(params: ChannelParams,
                             max_dimension: int = DEFAULT_MAX_DIMENSION) -> Optional[int]:
    """Smallest D >= 2 at which DBS is preferred over IPBE, or None up to max_dimension."""
    require_two_bases(params)
    if max_dimension < 2:
        raise OutOfRange('max_dimension', max_dimension, "must be >= 2")
    dims = np.arange(2, max_dimension + 1)
    exponent = params.dark_rate * params.gate_time * (dims - 1)
    dbs = _dbs_ratio_raw(params.efficiency, params.mean_photon_number, exponent, dims)
    ipbe = _ipbe_ratio_raw(params.efficiency, params.mean_photon_number, exponent)
    preferred = _dbs_preferred(dbs, ipbe)
    if not preferred.any():
        return None
    return int(dims[np.argmax(preferred)])


def max_dimension_within(params: ChannelParams, threshold: float,
                         mode: ProtocolMode = ProtocolMode.DBS,
                         max_dimension: int = 200) -> Optional[int]:
    """Largest D <= max_dimension whose error ratio is below threshold, or None.

    The DBS ratio falls roughly as 1/D before dark counts take over, so small
    D may sit above the threshold while larger D do not.
    """
    require_two_bases(params)
    dims = np.arange(2, max_dimension + 1)
    exponent = params.dark_rate * params.gate_time * (dims - 1)
    if ProtocolMode(mode) is ProtocolMode.DBS:
        ratio = _dbs_ratio_raw(params.efficiency, params.mean_photon_number, exponent, dims)
    else:
        ratio = _ipbe_ratio_raw(params.efficiency, params.mean_photon_number, exponent)
    below = np.flatnonzero(ratio < threshold)
    if below.size == 0:
        return None
    return int(dims[below[-1]])


def _preference_gap(loss: float, d: int, params: ChannelParams) -> bool:
    exponent = params.dark_rate * params.gate_time * (d - 1)
    eta = 1.0 - loss
    dbs = _dbs_ratio_raw(eta, params.mean_photon_number, exponent, d)
    ipbe = _ipbe_ratio_raw(eta, params.mean_photon_number, exponent)
    return bool(_dbs_preferred(dbs, ipbe))


def find_crossover_loss(d: int, params: ChannelParams,
                        max_loss: float = DEFAULT_MAX_LOSS,
                        steps: int = DEFAULT_LOSS_STEPS,
                        tolerance: float = LOSS_TOLERANCE) -> CrossoverResult:
    """Loss (1 - eta) at which DBS and IPBE ratios cross for dimension d.

    The efficiency in params is ignored; loss is scanned over [0, max_loss]
    and the first preference change is refined by bisection.
    """
    require_two_bases(params)
    if d < 2:
        raise OutOfRange('dimension', d, "must be >= 2")
    if not 0.0 < max_loss < 1.0:
        raise OutOfRange('max_loss', max_loss, "must lie in (0, 1)")

    losses = np.linspace(0.0, max_loss, steps)
    exponent = params.dark_rate * params.gate_time * (d - 1)
    dbs = _dbs_ratio_raw(1.0 - losses, params.mean_photon_number, exponent, d)
    ipbe = _ipbe_ratio_raw(1.0 - losses, params.mean_photon_number, exponent)
    preferred = _dbs_preferred(dbs, ipbe)

    if preferred.all():
        return CrossoverResult(loss=None, dominant='dbs')
    if not preferred.any():
        return CrossoverResult(loss=None, dominant='ipbe')

    change = int(np.argmax(preferred != preferred[0]))
    lo, hi = float(losses[change - 1]), float(losses[change])
    low_side = bool(preferred[0])
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        if _preference_gap(mid, d, params) == low_side:
            lo = mid
        else:
            hi = mid
    return CrossoverResult(loss=0.5 * (lo + hi), dominant='crossing', dbs_preferred_above=not low_side)


def calibrate_tau(target_dimension: int = 16, target_loss: float = 0.45,
                  dark_rate: float = 500.0, mean_photon_number: float = 0.2,
                  tau_bounds: Tuple[float, float] = (1e-12, 1e-3),
                  loss_tolerance: float = 0.005,
                  max_loss: float = DEFAULT_MAX_LOSS,
                  max_iterations: int = 200,
                  grid_points: int = 181) -> float:
    """Gate time tau placing the DBS/IPBE loss crossover of target_dimension at target_loss.

    The crossover moves to lower loss as tau grows until DBS dominates at
    every loss; bisection on log(tau) runs inside that branch. NoSolution is
    raised when the target lies outside what the bounds can reach.
    """
    if not 0.0 < target_loss < max_loss:
        raise NoSolution(f"target loss {target_loss} outside (0, {max_loss})")
    lo, hi = tau_bounds
    if not 0.0 < lo < hi:
        raise OutOfRange('tau_bounds', tau_bounds)

    def excess(tau: float) -> Tuple[float, CrossoverResult]:
        params = validate_params({
            'dimension': target_dimension,
            'efficiency': 1.0,
            'dark_rate': dark_rate,
            'gate_time': tau,
            'mean_photon_number': mean_photon_number,
        })
        result = find_crossover_loss(target_dimension, params, max_loss=max_loss)
        if result.dominant == 'ipbe':
            return INF, result
        if result.dominant == 'dbs':
            return -INF, result
        return result.loss - target_loss, result

    # Very large tau makes IPBE dominant again, so bracket the first
    # downward passage through the target on a log grid before bisecting.
    grid = np.geomspace(lo, hi, grid_points)
    gaps = [excess(float(tau))[0] for tau in grid]
    bracket = next((i for i in range(1, len(grid)) if gaps[i - 1] > 0 >= gaps[i]), None)
    if bracket is None:
        raise NoSolution(
            f"no tau in [{lo:g}, {hi:g}] puts the D={target_dimension} crossover at loss {target_loss}"
        )

    log_lo, log_hi = math.log(grid[bracket - 1]), math.log(grid[bracket])
    tau = math.exp(0.5 * (log_lo + log_hi))
    result = None
    for _ in range(max_iterations):
        tau = math.exp(0.5 * (log_lo + log_hi))
        gap, result = excess(tau)
        if abs(gap) < LOSS_TOLERANCE * 10 or log_hi - log_lo < 1e-12:
            break
        if gap > 0:
            log_lo = math.log(tau)
        else:
            log_hi = math.log(tau)

    if result is None or result.loss is None or abs(result.loss - target_loss) > loss_tolerance:
        raise NoSolution(f"bisection did not reach loss {target_loss} within {loss_tolerance}")
    logger.info_with_context(
        "Calibrated gate time",
        tau=tau,
        dark_rate=dark_rate,
        crossover_loss=result.loss,
        target_dimension=target_dimension,
    )
    return tau


def expected_session_budget(params: ChannelParams,
                            mode: ProtocolMode = ProtocolMode.DBS,
                            detection_model: DetectionModel = DetectionModel.PER_PULSE,
                            force_single_photon: bool = False) -> ExpectedBudget:
    """Exact expected verdict frequencies of the Monte Carlo channel with uniform delocalization.

    DBS frequencies are per twin, IPBE frequencies per slot. Unlike the
    printed closed forms these carry the dark-count survival factor on
    wrong-basis coincidences, the 1/2 same-basis factor on empty-pulse
    errors, and twins where a photon click meets a dark click on the same
    detector (scored by Bob's basis like a photon pair).
    """
    require_two_bases(params)
    d = params.dimension
    eta = params.efficiency
    lam = params.mean_photon_number
    q = params.dark_click_probability
    quiet_others = math.exp(-params.dark_rate * params.gate_time * (d - 1))

    if force_single_photon:
        detected = eta
        wrong_at_each = eta / d
    elif DetectionModel(detection_model) is DetectionModel.PER_PULSE:
        detected = eta * -math.expm1(-lam)
        wrong_at_each = detected / d
    else:
        mu = lam * eta
        detected = -math.expm1(-mu)
        # every surviving photon must land on the same detector
        wrong_at_each = math.exp(-mu) * math.expm1(mu / d)

    right = detected * quiet_others
    wrong = wrong_at_each * quiet_others
    dark_at_each = (1.0 - detected) * q * quiet_others

    if ProtocolMode(mode) is ProtocolMode.DBS:
        p_corr = (right ** 2 + 2.0 * right * dark_at_each) / 4.0
        p_be = d * (wrong ** 2 + 2.0 * wrong * dark_at_each) / 4.0
        p_ee = d * dark_at_each ** 2 / 2.0
    else:
        p_corr = right / 2.0
        p_be = 0.0
        p_ee = d * dark_at_each / 2.0
    return ExpectedBudget(p_corr, p_be, p_ee, _safe_ratio(p_be + p_ee, p_corr))
