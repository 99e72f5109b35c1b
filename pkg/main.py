"""Command-line front end: sweeps, session simulation, speckle maps, combinatorics, tau calibration."""

import argparse
import asyncio
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

import analytics
import channel_sim
import protocol
import speckle
from config_manager import ConfigManager
from logger_config import get_logger, setup_logging
from models import (
    Basis,
    ChannelParams,
    DBSError,
    Delocalization,
    DetectionModel,
    OddLength,
    OutOfRange,
    ProtocolMode,
    RandomSource,
    SimulationOptions,
    UsageError,
)
from utils.file_lock import atomic_text_file, safe_json_write

__version__ = "1.0.0"

# Load environment variables
load_dotenv()

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

INTEGER_FIELDS = {'dimension', 'basis_count'}
# 'loss' is shorthand for efficiency = 1 - loss
AXIS_ALIASES = {'loss': 'efficiency'}


@dataclass
class SweepSpec:
    """One axis swept over values, everything else fixed."""
    axis: Optional[str]
    values: List[float]
    fixed: ChannelParams
    mode: str = 'analytic'
    trials: int = 1

    def __post_init__(self):
        if self.mode not in ('analytic', 'montecarlo', 'both'):
            raise UsageError(f"unknown sweep mode {self.mode!r}", 'mode')
        if self.trials < 1:
            raise UsageError("trials must be >= 1", 'trials')
        if self.axis is not None and self.axis not in AXIS_ALIASES and self.axis not in ChannelParams.model_fields:
            raise UsageError(f"unknown sweep axis {self.axis!r}", 'axis')

    def points(self) -> List[ChannelParams]:
        """Validated parameter set per sweep value; invalid values raise UsageError naming the field."""
        if self.axis is None:
            return [self.fixed]
        target = AXIS_ALIASES.get(self.axis, self.axis)
        result = []
        for value in self.values:
            if self.axis == 'loss':
                value = 1.0 - value
            if target in INTEGER_FIELDS:
                if float(value) != int(value):
                    raise UsageError(f"{target} must be an integer, got {value}", target)
                value = int(value)
            try:
                result.append(self.fixed.with_updates(**{target: value}))
            except OutOfRange as e:
                raise UsageError(str(e), self.axis) from e
        return result


@dataclass
class RunManifest:
    """Provenance written next to every output file."""
    command: str
    argv: List[str]
    seed: Optional[int]
    parameters: Dict[str, Any]
    code_version: str = field(default_factory=lambda: os.getenv('APP_VERSION', __version__))
    calibrated_tau: Optional[float] = None
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: Optional[str] = None
    outputs: List[str] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    def finish(self) -> None:
        self.finished_at = datetime.now(timezone.utc).isoformat()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, path: str) -> bool:
        return safe_json_write(path, self.to_dict())


def manifest_path_for(output: str) -> str:
    return f"{output}.manifest.json"


def parse_values(text: Optional[str]) -> List[float]:
    """'2,4,16' lists values; 'a:b' is the integer range a..b; 'a:b:n' is n evenly spaced points."""
    if text is None or not text.strip():
        return []
    text = text.strip()
    try:
        if ':' in text:
            parts = [float(p) for p in text.split(':')]
            if len(parts) == 2:
                if not all(p.is_integer() for p in parts):
                    raise UsageError(f"range bounds must be integers, got {text!r}", 'values')
                start, stop = int(parts[0]), int(parts[1])
                return [float(v) for v in range(start, stop + 1)]
            if len(parts) == 3:
                return [float(v) for v in np.linspace(parts[0], parts[1], int(parts[2]))]
            raise ValueError(text)
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise UsageError(f"cannot parse values {text!r}", 'values') from e


def format_cell(value: Any) -> str:
    """CSV cell text; infinities become the literal 'inf'."""
    if value is None:
        return ''
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return repr(value)
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def render_csv(rows: Sequence[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> str:
    """Header from the first row (or columns), then every row in order."""
    header: List[str] = list(columns or [])
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(row.get(key)) for key in header])
    return buffer.getvalue()


def emit_table(rows: Sequence[Dict[str, Any]], out: Optional[str], manifest: Optional[RunManifest],
               columns: Optional[Sequence[str]] = None) -> None:
    text = render_csv(rows, columns)
    if out is None:
        sys.stdout.write(text)
        return
    with atomic_text_file(out) as f:
        f.write(text)
    logger.info_with_context("Table written", path=out, rows=len(rows))
    if manifest is not None:
        manifest.outputs.append(out)
        manifest.finish()
        manifest.write(manifest_path_for(out))


async def run_points_async(func: Callable[..., Any], jobs: Sequence[tuple], workers: int = 1) -> List[Any]:
    """Evaluate func(*job) for every job, in a process pool when workers > 1, preserving job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [func(*job) for job in jobs]
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        tasks = [loop.run_in_executor(pool, func, *job) for job in jobs]
        return list(await asyncio.gather(*tasks))


def _prefixed(prefix: str, data: Dict[str, Any]) -> Dict[str, Any]:
    return {f"{prefix}_{key}": value for key, value in data.items()}


def analytic_row(params: ChannelParams) -> Dict[str, Any]:
    row: Dict[str, Any] = dict(params.to_dict())
    row['loss'] = params.loss
    row['p_gamma'] = analytics.p_gamma(params)
    row.update(_prefixed('dbs', analytics.dbs_budget(params, strict=False).to_dict()))
    row.update(_prefixed('ipbe', analytics.ipbe_budget(params, strict=False).to_dict()))
    row.update(_prefixed('eve_dbs', analytics.eve_budget(params, ProtocolMode.DBS, strict=False).to_dict()))
    row.update(_prefixed('eve_ipbe', analytics.eve_budget(params, ProtocolMode.IPBE, strict=False).to_dict()))
    return row


ANALYTIC_COLUMNS = list(ChannelParams().to_dict()) + [
    'loss', 'p_gamma',
    'dbs_p_corr', 'dbs_p_be', 'dbs_p_ee', 'dbs_ratio',
    'ipbe_p_corr', 'ipbe_p_be', 'ipbe_p_ee', 'ipbe_ratio',
] + [f"eve_{mode}_{key}" for mode in ('dbs', 'ipbe') for key in ('p_b', 'p_o', 'ratio', 'p_mult', 'p_phot')]


def cmd_analytic(sweep: SweepSpec) -> List[Dict[str, Any]]:
    """One row per sweep value with DBS/IPBE error budgets and the PNS budgets."""
    return [analytic_row(params) for params in sweep.points()]


def simulate_point(params: ChannelParams, options: SimulationOptions, trials: int, seed: int,
                   index: int, mode: ProtocolMode, chunk_size: int) -> Dict[str, Any]:
    source = RandomSource(seed, index)
    if mode is ProtocolMode.DBS:
        tally = channel_sim.run_dbs_session(trials, params, source, options, chunk_size)
    else:
        tally = channel_sim.run_ipbe_session(trials, params, source, options, chunk_size)
    row = channel_sim.session_record(params, tally, options)
    row['seed'] = seed
    row['stream_id'] = index
    return row


def cmd_simulate(sweep: SweepSpec, seed: int, options: SimulationOptions,
                 modes: Sequence[ProtocolMode] = (ProtocolMode.DBS,), workers: int = 1,
                 chunk_size: int = channel_sim.DEFAULT_CHUNK_SIZE) -> List[Dict[str, Any]]:
    """Monte Carlo estimates with standard errors and the matching analytic columns."""
    points = sweep.points()
    jobs = []
    for mode in modes:
        for i, params in enumerate(points):
            stream = i if mode is ProtocolMode.DBS else len(points) + i
            jobs.append((params, options, sweep.trials, seed, stream, mode, chunk_size))
    return asyncio.run(run_points_async(simulate_point, jobs, workers))


def oscar_point(params: ChannelParams, options: SimulationOptions, trials: int, seed: int,
                index: int, mode: ProtocolMode, chunk_size: int) -> Dict[str, Any]:
    tally = channel_sim.run_oscar_pns(trials, params, RandomSource(seed, index), options, mode, chunk_size)
    row: Dict[str, Any] = dict(params.to_dict())
    row.update(tally.to_row())
    row.update(_prefixed('analytic', analytics.eve_budget(params, mode).to_dict()))
    row['seed'] = seed
    row['stream_id'] = index
    return row


def cmd_oscar(sweep: SweepSpec, seed: int, options: SimulationOptions,
              modes: Sequence[ProtocolMode] = (ProtocolMode.DBS, ProtocolMode.IPBE),
              workers: int = 1, chunk_size: int = channel_sim.DEFAULT_CHUNK_SIZE) -> List[Dict[str, Any]]:
    """PNS eavesdropper: analytic P_B/P_O beside Monte Carlo estimates."""
    points = sweep.points()
    jobs = []
    for m, mode in enumerate(modes):
        for i, params in enumerate(points):
            jobs.append((params, options, sweep.trials, seed, m * len(points) + i, mode, chunk_size))
    return asyncio.run(run_points_async(oscar_point, jobs, workers))


def cmd_crossover(params: ChannelParams, dimensions: Sequence[int], max_loss: float,
                  steps: int, max_dimension: int,
                  threshold: float = analytics.DEFAULT_RATIO_THRESHOLD,
                  tau_source: str = 'explicit') -> List[Dict[str, Any]]:
    """Loss crossover per dimension plus the crossover dimension at the fixed efficiency.

    Rows also carry the largest D whose error ratio stays below threshold
    for each protocol. Those caps move with the gate time, so tau_source
    records where it came from.
    """
    crossover_dimension = analytics.find_crossover_dimension(params, max_dimension)
    dbs_cap = analytics.max_dimension_within(params, threshold, ProtocolMode.DBS, max_dimension)
    ipbe_cap = analytics.max_dimension_within(params, threshold, ProtocolMode.IPBE, max_dimension)
    rows = []
    for d in dimensions:
        result = analytics.find_crossover_loss(int(d), params.with_updates(dimension=int(d)), max_loss, steps)
        rows.append({
            'dimension': int(d),
            'gate_time': params.gate_time,
            'dark_rate': params.dark_rate,
            'mean_photon_number': params.mean_photon_number,
            'crossover_loss': result.loss,
            'dominant': result.dominant,
            'dbs_preferred_above': result.dbs_preferred_above,
            'crossover_dimension': crossover_dimension,
            'threshold': threshold,
            'dbs_max_dimension': dbs_cap,
            'ipbe_max_dimension': ipbe_cap,
            'tau_source': tau_source,
        })
    return rows


def cmd_combinatorics(n: int) -> Dict[str, Any]:
    """Exact pairing count C for n photons, 1/C and the basis-guess probability 2^-n."""
    combinations = analytics.pairing_combinations(n)
    return {
        'n': n,
        'combinations': combinations,
        'inverse': analytics.reciprocal_scientific(combinations),
        'basis_guess': analytics.reciprocal_scientific(2 ** n),
    }


def cmd_speckle(segments: int, modes: int, seed: int, pairs: int, out_dir: str,
                test_phases: int = speckle.DEFAULT_TEST_PHASES,
                sweeps: int = speckle.DEFAULT_SWEEPS,
                target: Optional[int] = None) -> Dict[str, Any]:
    """PD/PD2 grids for matched and mismatched read-out of a focused fiber."""
    source = RandomSource(seed)
    fiber_stream, matched_stream, mismatched_stream = source.spawn(3)
    tm = speckle.generate_fiber(segments, modes, fiber_stream)
    target = modes // 2 if target is None else target
    mask, enhancement = speckle.optimize_focus(tm, target, Basis.COMPUTATIONAL, sweeps, test_phases)

    matched = speckle.measure_intensity(tm, mask, Basis.COMPUTATIONAL, Basis.COMPUTATIONAL)
    mismatched = speckle.delocalized_distribution(tm, mask, Basis.COMPUTATIONAL)
    maps = {
        'matched': speckle.sample_pd_pd2(matched, pairs, matched_stream),
        'mismatched': speckle.sample_pd_pd2(mismatched, pairs, mismatched_stream),
    }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shape = speckle.grid_shape(modes)
    files = []
    for name, detection in maps.items():
        for kind in ('pd', 'pd2'):
            path = out / f"{kind}_{name}.csv"
            speckle.write_grid_csv(getattr(detection, kind).reshape(shape), path)
            files.append(str(path))
    fiber_path = out / "fiber.npz"
    tm.save(fiber_path)
    files.append(str(fiber_path))

    summary = {
        'segments': segments,
        'modes': modes,
        'target': target,
        'enhancement': enhancement,
        'enhancement_bound': speckle.enhancement_bound(segments),
        'matched_peak_mass': matched.peak_mass(),
        'mismatched_peak_mass': mismatched.peak_mass(),
        'matched_pd2_peak': float(maps['matched'].pd2.max()),
        'mismatched_pd2_peak': float(maps['mismatched'].pd2.max()),
        'mismatched_same_detector_fraction': speckle.same_detector_fraction(mismatched),
        'mismatched_same_pixel_sampled': maps['mismatched'].same_pixel_fraction,
        'photon_pairs': pairs,
        'files': files,
    }
    safe_json_write(str(out / "summary.json"), summary)
    return summary


def speckle_options(base: SimulationOptions, params: ChannelParams, section: Dict[str, Any],
                    seed: int) -> SimulationOptions:
    """Options whose wrong-basis outcomes follow a focused fiber with one mode per detector."""
    stream = RandomSource(seed).spawn(1)[0]
    tm = speckle.generate_fiber(int(section['segments']), params.dimension, stream)
    mask, _ = speckle.optimize_focus(tm, 0, Basis.COMPUTATIONAL, int(section['sweeps']),
                                     int(section['test_phases']))
    imap = speckle.delocalized_distribution(tm, mask)
    return SimulationOptions(
        detection_model=base.detection_model,
        delocalization=Delocalization.SPECKLE,
        speckle_weights=speckle.speckle_weights(imap, params.dimension),
        force_single_photon=base.force_single_photon,
    )


def write_session_transcript(path: str, params: ChannelParams, twins: int, seed: int,
                             options: SimulationOptions) -> Dict[str, Any]:
    """Run one small session through the object path and dump every slot as JSON Lines."""
    gen = RandomSource(seed, 0).generator()
    letters = gen.integers(0, params.dimension, twins).tolist()
    stream, announcement = protocol.encode_message(letters, params, gen)
    events = channel_sim.transmit_stream(stream, params, gen, options)
    key, verdicts = protocol.sift(events, announcement, params, stream)
    protocol.write_transcript(path, stream, events)
    safe_json_write(f"{path}.pairs.json", announcement.to_dict())
    tally = protocol.score_session(verdicts)
    return {'transcript': path, 'sifted_length': len(key), **tally.to_row()}


def _modes(choice: str) -> List[ProtocolMode]:
    if choice == 'both':
        return [ProtocolMode.DBS, ProtocolMode.IPBE]
    return [ProtocolMode(choice)]


def build_parser() -> argparse.ArgumentParser:
    channel = argparse.ArgumentParser(add_help=False)
    channel.add_argument("--config", type=str, default=None, help="YAML configuration (default: $DBS_CONFIG or config.yaml)")
    channel.add_argument("--dimension", type=int, default=None)
    channel.add_argument("--efficiency", type=float, default=None)
    channel.add_argument("--dark-rate", type=float, default=None, help="dark counts per second")
    channel.add_argument("--gate-time", type=float, default=None, help="seconds")
    channel.add_argument("--mean-photon-number", type=float, default=None)
    channel.add_argument("--basis-count", type=int, default=None)
    channel.add_argument("--use-calibrated-tau", action="store_true",
                         help="take gate time from the calibrated value in the configuration")
    channel.add_argument("--seed", type=int, default=0)
    channel.add_argument("--out", type=str, default=None, help="output file (stdout when omitted)")
    channel.add_argument("--log-level", type=str, default=None)

    sweep = argparse.ArgumentParser(add_help=False)
    sweep.add_argument("--axis", type=str, default=None,
                       help="ChannelParams field to sweep, or 'loss' for 1 - efficiency")
    sweep.add_argument("--values", type=str, default=None, help="'2,4,16', 'a:b' or 'a:b:n'")

    mc = argparse.ArgumentParser(add_help=False)
    mc.add_argument("--trials", type=int, default=100_000, help="twins (DBS) or slots (IPBE) per point")
    mc.add_argument("--protocol", choices=['dbs', 'ipbe', 'both'], default='dbs')
    mc.add_argument("--detection-model", choices=[m.value for m in DetectionModel], default=None)
    mc.add_argument("--delocalization", choices=[d.value for d in Delocalization], default=None)
    mc.add_argument("--force-single-photon", action="store_true")
    mc.add_argument("--workers", type=int, default=None)
    mc.add_argument("--chunk-size", type=int, default=None)

    p = argparse.ArgumentParser(prog="dbs-sim", description="Data basis shuffling QKD simulator")
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("analytic", parents=[channel, sweep], help="closed-form error and PNS budgets")

    s = sub.add_parser("simulate", parents=[channel, sweep, mc], help="Monte Carlo sessions")
    s.add_argument("--transcript", type=str, default=None, help="also write a JSON Lines slot transcript")
    s.add_argument("--transcript-twins", type=int, default=1000)

    o = sub.add_parser("oscar", parents=[channel, sweep, mc], help="photon-number-splitting runs")
    o.set_defaults(protocol='both')

    sp = sub.add_parser("speckle", parents=[channel], help="transfer-matrix PD/PD2 maps")
    sp.add_argument("--segments", type=int, default=None)
    sp.add_argument("--modes", type=int, default=None)
    sp.add_argument("--pairs", type=int, default=None)
    sp.add_argument("--sweeps", type=int, default=None)
    sp.add_argument("--test-phases", type=int, default=None)
    sp.add_argument("--target", type=int, default=None)
    sp.add_argument("--out-dir", type=str, default="speckle_out")

    c = sub.add_parser("combinatorics", parents=[channel], help="exact pairing combinatorics")
    c.add_argument("n", type=int)

    x = sub.add_parser("crossover", parents=[channel], help="DBS/IPBE loss crossovers per dimension")
    x.add_argument("--dimensions", type=str, default="4,16,36,100")
    x.add_argument("--threshold", type=float, default=None,
                   help="error-ratio budget for the dbs/ipbe_max_dimension columns")

    t = sub.add_parser("calibrate-tau", parents=[channel], help="fit the gate time to a loss crossover")
    t.add_argument("--target-dimension", type=int, default=None)
    t.add_argument("--target-loss", type=float, default=None)
    t.add_argument("--no-save", action="store_true", help="do not write the result into the configuration")
    return p


def _channel_params(args: argparse.Namespace, config: ConfigManager) -> ChannelParams:
    gate_time = args.gate_time
    if gate_time is None and args.use_calibrated_tau:
        gate_time = config.get_calibrated_tau()
        if gate_time is None:
            raise UsageError("no calibrated tau in configuration; run calibrate-tau first", 'gate_time')
    try:
        return config.get_channel_params(
            dimension=args.dimension,
            efficiency=args.efficiency,
            dark_rate=args.dark_rate,
            gate_time=gate_time,
            mean_photon_number=args.mean_photon_number,
            basis_count=args.basis_count,
        )
    except OutOfRange as e:
        raise UsageError(str(e), e.field) from e


def _tau_source(args: argparse.Namespace) -> str:
    if args.gate_time is not None:
        return 'explicit'
    return 'calibrated' if args.use_calibrated_tau else 'configured'


def _simulation_options(args: argparse.Namespace, config: ConfigManager) -> SimulationOptions:
    options = config.get_simulation_options()
    changes: Dict[str, Any] = {}
    if args.detection_model:
        changes['detection_model'] = DetectionModel(args.detection_model)
    if args.delocalization:
        changes['delocalization'] = Delocalization(args.delocalization)
    if args.force_single_photon:
        changes['force_single_photon'] = True
    return replace(options, **changes)


def _sweep(args: argparse.Namespace, params: ChannelParams, mode: str, trials: int = 1) -> SweepSpec:
    values = parse_values(args.values)
    if args.axis is None and values:
        raise UsageError("--values needs --axis", 'axis')
    return SweepSpec(axis=args.axis, values=values, fixed=params, mode=mode, trials=trials)


def run(args: argparse.Namespace, argv: List[str]) -> int:
    config = ConfigManager(args.config)
    manifest = RunManifest(
        command=args.cmd,
        argv=argv,
        seed=args.seed,
        parameters={},
        calibrated_tau=config.get_calibrated_tau(),
    )

    if args.cmd == 'combinatorics':
        report = cmd_combinatorics(args.n)
        print(f"n = {report['n']}")
        print(f"C = {report['combinations']}")
        print(f"1/C = {report['inverse']}")
        print(f"2^-n = {report['basis_guess']}")
        if args.out:
            safe_json_write(args.out, {**report, 'combinations': str(report['combinations'])})
            manifest.parameters = {'n': args.n}
            manifest.outputs.append(args.out)
            manifest.finish()
            manifest.write(manifest_path_for(args.out))
        return EXIT_OK

    if args.cmd == 'calibrate-tau':
        calibration = config.get_section('calibration')
        crossover = config.get_section('crossover')
        target_dimension = args.target_dimension or int(calibration['target_dimension'])
        target_loss = args.target_loss if args.target_loss is not None else float(calibration['target_loss'])
        dark_rate = args.dark_rate if args.dark_rate is not None else float(calibration['dark_rate'])
        lam = (args.mean_photon_number if args.mean_photon_number is not None
               else float(calibration['mean_photon_number']))
        tau = analytics.calibrate_tau(
            target_dimension, target_loss, dark_rate, lam,
            tau_bounds=(float(calibration['tau_min']), float(calibration['tau_max'])),
            max_loss=float(crossover['max_loss']),
        )
        params = config.get_channel_params(dark_rate=dark_rate, gate_time=tau, mean_photon_number=lam)
        rows = cmd_crossover(params, [4, target_dimension, 36, 100], float(crossover['max_loss']),
                             int(crossover['loss_steps']), int(crossover['max_dimension']),
                             float(crossover['threshold']), 'calibrated')
        print(f"tau = {tau:.6e} s")
        if not args.no_save:
            saved, message = config.set_calibrated_tau(tau)
            if saved:
                logger.info(message)
            else:
                logger.warning(message)
        manifest.calibrated_tau = tau
        manifest.parameters = params.to_dict()
        emit_table(rows, args.out, manifest)
        return EXIT_OK

    params = _channel_params(args, config)
    manifest.parameters = params.to_dict()

    if args.cmd == 'analytic':
        sweep = _sweep(args, params, 'analytic')
        manifest.extra = {'axis': sweep.axis, 'values': sweep.values}
        emit_table(cmd_analytic(sweep), args.out, manifest, ANALYTIC_COLUMNS)
        return EXIT_OK

    if args.cmd == 'crossover':
        crossover = config.get_section('crossover')
        dims = [int(v) for v in parse_values(args.dimensions)]
        threshold = args.threshold if args.threshold is not None else float(crossover['threshold'])
        tau_source = _tau_source(args)
        rows = cmd_crossover(params, dims, float(crossover['max_loss']), int(crossover['loss_steps']),
                             int(crossover['max_dimension']), threshold, tau_source)
        manifest.extra = {
            'threshold': threshold,
            'tau_source': tau_source,
            'dimension_caps_depend_on': 'gate_time',
        }
        emit_table(rows, args.out, manifest)
        return EXIT_OK

    if args.cmd == 'speckle':
        section = config.get_section('speckle')
        summary = cmd_speckle(
            segments=args.segments or int(section['segments']),
            modes=args.modes or int(section['modes']),
            seed=args.seed,
            pairs=args.pairs or int(section['photon_pairs']),
            out_dir=args.out_dir,
            test_phases=args.test_phases or int(section['test_phases']),
            sweeps=args.sweeps or int(section['sweeps']),
            target=args.target,
        )
        print(json.dumps({k: v for k, v in summary.items() if k != 'files'}, indent=2))
        manifest.parameters = {k: summary[k] for k in ('segments', 'modes', 'target', 'photon_pairs')}
        manifest.outputs.extend(summary['files'])
        manifest.finish()
        manifest.write(str(Path(args.out_dir) / "manifest.json"))
        return EXIT_OK

    # Monte Carlo commands
    section = config.get_section('simulation')
    workers = args.workers or int(section['workers'])
    chunk_size = args.chunk_size or int(section['chunk_size'])
    options = _simulation_options(args, config)
    if options.delocalization is Delocalization.SPECKLE:
        options = speckle_options(options, params, config.get_section('speckle'), args.seed)
    sweep = _sweep(args, params, 'montecarlo', args.trials)
    manifest.extra = {
        'axis': sweep.axis,
        'values': sweep.values,
        'trials': sweep.trials,
        'options': options.to_dict(),
        'protocol': args.protocol,
    }

    if args.cmd == 'simulate':
        rows = cmd_simulate(sweep, args.seed, options, _modes(args.protocol), workers, chunk_size)
        if args.transcript:
            info = write_session_transcript(args.transcript, params, args.transcript_twins, args.seed, options)
            manifest.outputs.append(args.transcript)
            logger.info_with_context("Transcript written", **info)
        emit_table(rows, args.out, manifest)
        return EXIT_OK

    if args.cmd == 'oscar':
        rows = cmd_oscar(sweep, args.seed, options, _modes(args.protocol), workers, chunk_size)
        emit_table(rows, args.out, manifest)
        return EXIT_OK

    raise UsageError(f"unknown command {args.cmd!r}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return run(args, argv)
    except (UsageError, OutOfRange, OddLength) as e:
        logger.error_with_context("Usage error", error=str(e), field=getattr(e, 'field', None))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DBSError as e:
        logger.error_with_context("Run failed", error=str(e), error_type=type(e).__name__)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:
        logger.exception(f"Fatal error: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
