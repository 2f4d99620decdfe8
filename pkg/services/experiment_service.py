"""Batch orchestration: task planning, seeded parallel execution and resumable result files."""

import functools
import json
import logging
import multiprocessing
import time
from concurrent.futures import Future, ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import torch

from .ccm_stats import CouplingTestService, TestConfig
from .config_service import CSV_INPUT, ExperimentSpec
from .seeding import derive_seed
from .series_core import standardize
from .simulators import (
    LORENZ_CHANNELS,
    LORENZ_ROSSLER,
    NEUROVASCULAR,
    LorenzRosslerConfig,
    NeuroConfig,
    Realization,
    load_realization,
    save_realization,
    simulate_lorenz_rossler,
    simulate_neurovascular,
)

logger = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
ERRORS_FILE = "errors.jsonl"
TIMINGS_FILE = "timings.jsonl"
TRACES_DIR = "traces"

RecordKey = Tuple[str, int, str, str]


@dataclass
class ResultRecord:
    system: str
    coupling: str
    realization: int
    seed: int
    direction: str
    group: str
    mode: str
    k_observed: float
    p_value: float
    reject: bool
    is_null: Optional[bool]
    null_samples: List[float]
    config_hash: str
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def key(self) -> RecordKey:
        return self.coupling, self.realization, self.direction, self.mode

    def to_dict(self, include_timings: bool = True) -> dict:
        payload = asdict(self)
        if not include_timings:
            payload.pop("timings")
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ResultRecord":
        payload = dict(payload)
        payload.setdefault("timings", {})
        return cls(**payload)


@dataclass
class ErrorRecord:
    coupling: str
    realization: int
    direction: str
    mode: str
    error_type: str
    message: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Task:
    index: int
    system: str
    coupling: str
    realization: int
    seed: int
    source_config: Union[LorenzRosslerConfig, NeuroConfig, str]
    pair: Tuple[str, str]
    wanted: Tuple[Tuple[str, str, str], ...]  # (source, target, mode)
    test: TestConfig
    analysis_length: Optional[int]
    config_hash: str
    trace_dir: Optional[str] = None


@dataclass
class TaskOutcome:
    records: List[ResultRecord] = field(default_factory=list)
    errors: List[ErrorRecord] = field(default_factory=list)


def coupling_label(system: str, coupling: Optional[Tuple[float, float]] = None) -> str:
    if system == LORENZ_ROSSLER:
        return f"({coupling[0]:.2f},{coupling[1]:.2f})"
    if system == NEUROVASCULAR:
        return "B_upper"
    return "observed"


def direction_group(system: str, source: str, target: str) -> str:
    """Table grouping: Lorenz-to-Rossler comparisons pool into L->R and R->L."""
    if system == LORENZ_ROSSLER:
        return "L->R" if source in LORENZ_CHANNELS else "R->L"
    return f"{source}->{target}"


def ground_truth_null(system: str, source: str, coupling: Optional[Tuple[float, float]] = None) -> Optional[bool]:
    """True when no coupling runs from ``source`` towards the other subsystem."""
    if system == LORENZ_ROSSLER:
        eps_x, eps_y = coupling
        return eps_x == 0 if source in LORENZ_CHANNELS else eps_y == 0
    if system == NEUROVASCULAR:
        return source != "V1"
    return None


def failed_outcome(task: Task, error: BaseException) -> TaskOutcome:
    """Every wanted record of ``task`` reported as failed with ``error``."""
    return TaskOutcome(
        errors=[
            ErrorRecord(task.coupling, task.realization, f"{src}->{dst}", mode, type(error).__name__, str(error))
            for src, dst, mode in task.wanted
        ]
    )


def capture_errors(func):
    """Run a task; on failure log it and report every wanted record as failed."""

    @functools.wraps(func)
    def wrapper(task: Task) -> TaskOutcome:
        try:
            return func(task)
        except Exception as e:
            logger.error(
                f"Error in {func.__name__} for {task.coupling} realization {task.realization} pair {task.pair}: {e}",
                exc_info=True,
            )
            return failed_outcome(task, e)

    return wrapper


@functools.lru_cache(maxsize=4)
def _realize(source_config) -> Realization:
    if isinstance(source_config, LorenzRosslerConfig):
        return simulate_lorenz_rossler(source_config)
    if isinstance(source_config, NeuroConfig):
        return simulate_neurovascular(source_config)
    return load_realization(source_config)


@capture_errors
def run_task(task: Task) -> TaskOutcome:
    started = time.perf_counter()
    realization = _realize(task.source_config)
    a, b = (realization.series(name) for name in task.pair)
    if task.analysis_length is not None:
        a, b = a.tail(task.analysis_length), b.tail(task.analysis_length)
    service = CouplingTestService(standardize(a), standardize(b), task.test)
    service.fit()
    fit_seconds = time.perf_counter() - started
    if task.trace_dir is not None:
        prefix = f"{_slug(task.coupling)}_r{task.realization:03d}_{task.pair[0]}_{task.pair[1]}_"
        service.save_traces(task.trace_dir, prefix)

    outcome = TaskOutcome()
    for source, target, mode in task.wanted:
        test_started = time.perf_counter()
        result = service.test(source, target, mode)
        outcome.records.append(
            ResultRecord(
                system=task.system,
                coupling=task.coupling,
                realization=task.realization,
                seed=task.seed,
                direction=result.direction,
                group=direction_group(task.system, source, target),
                mode=mode,
                k_observed=result.k_observed,
                p_value=result.p_value,
                reject=result.reject_h0,
                is_null=ground_truth_null(task.system, source, _coupling_of(task)),
                null_samples=list(result.null_samples),
                config_hash=task.config_hash,
                timings={"fit_seconds": fit_seconds, "test_seconds": time.perf_counter() - test_started},
            )
        )
    logger.info(
        f"{task.coupling} realization {task.realization} {task.pair[0]}/{task.pair[1]}: "
        f"{len(outcome.records)} tests in {time.perf_counter() - started:.1f}s"
    )
    return outcome


def _coupling_of(task: Task) -> Optional[Tuple[float, float]]:
    if isinstance(task.source_config, LorenzRosslerConfig):
        return task.source_config.coupling
    return None


def _init_worker():
    torch.set_num_threads(1)


def _append_jsonl(path: Path, payloads: Iterable[dict]):
    with open(path, "a", encoding="utf-8") as f:
        for payload in payloads:
            f.write(json.dumps(payload, sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> List[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_records(path: Union[str, Path]) -> List[ResultRecord]:
    """Records from a records file (or a run directory), with timings merged back in when present."""
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS_FILE
    records = [ResultRecord.from_dict(p) for p in read_jsonl(path)]
    timings = {
        (t["coupling"], t["realization"], t["direction"], t["mode"]): t["timings"]
        for t in read_jsonl(path.with_name(TIMINGS_FILE))
    }
    for record in records:
        record.timings = timings.get(record.key, {})
    return records


@dataclass
class RunReport:
    records: List[ResultRecord]
    new_records: int
    failures: int
    out_dir: Path


class ExperimentService:
    """Plans (realization, channel pair) tasks for a spec and runs them.

    Results are appended to ``records.jsonl`` in task order, failures to
    ``errors.jsonl`` and wall-clock timings to ``timings.jsonl``. Records
    already on disk are never recomputed.
    """

    def __init__(self, spec: ExperimentSpec, jobs: int = 1, out_dir: Union[str, Path, None] = None):
        self.spec = spec
        self.jobs = max(1, int(jobs))
        self.out_dir = Path(out_dir or spec.output_dir)
        self.records_path = self.out_dir / RECORDS_FILE
        self.errors_path = self.out_dir / ERRORS_FILE
        self.timings_path = self.out_dir / TIMINGS_FILE

    def source_configs(self) -> List[Tuple[str, Optional[Tuple[float, float]], int, object]]:
        """(coupling label, coupling, realization index, simulator config or input path)."""
        spec = self.spec
        if spec.system == CSV_INPUT:
            label = coupling_label(spec.system)
            return [(label, None, r, path) for r, path in enumerate(spec.inputs)]
        sources = []
        couplings = spec.couplings if spec.system == LORENZ_ROSSLER else (None,)
        for coupling in couplings:
            label = coupling_label(spec.system, coupling)
            for r in range(spec.n_realizations):
                seed = spec.base_seed + r
                if spec.system == LORENZ_ROSSLER:
                    cfg = replace(spec.lorenz_rossler, eps_x=coupling[0], eps_y=coupling[1], seed=seed)
                else:
                    cfg = replace(spec.neurovascular, seed=seed)
                sources.append((label, coupling, r, cfg))
        return sources

    def _pair_groups(self) -> List[Tuple[Tuple[str, str], List[Tuple[str, str]]]]:
        groups: Dict[frozenset, Tuple[Tuple[str, str], List[Tuple[str, str]]]] = {}
        for source, target in self.spec.pairs:
            key = frozenset((source, target))
            if key not in groups:
                groups[key] = ((source, target), [])
            groups[key][1].append((source, target))
        return list(groups.values())

    def plan(self, done: Optional[set] = None) -> List[Task]:
        done = done or set()
        spec = self.spec
        config_hash = spec.config_hash
        channel_index = {name: i for i, name in enumerate(spec.channels)}
        trace_dir = str(self.out_dir / TRACES_DIR) if spec.save_traces else None
        tasks = []
        for source_index, (label, coupling, r, source_config) in enumerate(self.source_configs()):
            seed = source_config.seed if not isinstance(source_config, str) else spec.base_seed + r
            for pair, directions in self._pair_groups():
                wanted = tuple(
                    (src, dst, mode)
                    for mode in spec.modes
                    for src, dst in directions
                    if (label, r, f"{src}->{dst}", mode) not in done
                )
                if not wanted:
                    continue
                i, j = sorted(channel_index.get(name, hash_name(name)) for name in pair)
                test_seed = derive_seed(spec.base_seed, source_index, i, j)
                tasks.append(
                    Task(
                        index=len(tasks),
                        system=spec.system,
                        coupling=label,
                        realization=r,
                        seed=seed,
                        source_config=source_config,
                        pair=pair,
                        wanted=wanted,
                        test=replace(spec.test, seed=test_seed),
                        analysis_length=spec.analysis_length,
                        config_hash=config_hash,
                        trace_dir=trace_dir,
                    )
                )
        return tasks

    def _execute(self, tasks: List[Task]) -> Iterable[TaskOutcome]:
        if self.jobs == 1 or len(tasks) <= 1:
            _init_worker()
            return map(run_task, tasks)
        executor = ProcessPoolExecutor(
            max_workers=self.jobs, mp_context=multiprocessing.get_context("spawn"), initializer=_init_worker
        )
        return _drain(executor, tasks)

    def run(self) -> RunReport:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.spec.dump_resolved(self.out_dir)
        existing = load_records(self.records_path)
        done = {record.key for record in existing}
        tasks = self.plan(done)
        logger.info(f"{len(done)} records on disk, {len(tasks)} tasks to run with {self.jobs} worker(s)")

        new_records, failures = [], 0
        for outcome in self._execute(tasks):
            _append_jsonl(self.records_path, (r.to_dict(include_timings=False) for r in outcome.records))
            _append_jsonl(
                self.timings_path,
                ({"coupling": r.coupling, "realization": r.realization, "direction": r.direction,
                  "mode": r.mode, "timings": r.timings} for r in outcome.records),
            )
            _append_jsonl(self.errors_path, (e.to_dict() for e in outcome.errors))
            new_records.extend(outcome.records)
            failures += len(outcome.errors)

        if failures:
            logger.warning(f"{failures} test(s) failed, see {self.errors_path}")
        return RunReport(existing + new_records, len(new_records), failures, self.out_dir)

    def simulate_all(self) -> List[Path]:
        """Write every simulated realization as CSV plus sidecar."""
        paths = []
        for label, _, r, source_config in self.source_configs():
            if isinstance(source_config, str):
                continue
            realization = _realize(source_config)
            name = f"{self.spec.system}_{_slug(label)}_r{r:03d}.csv"
            paths.append(save_realization(realization, self.out_dir / "realizations" / name))
        logger.info(f"Saved {len(paths)} realizations under {self.out_dir / 'realizations'}")
        return paths


def _submit(executor: ProcessPoolExecutor, task: Task) -> Union[Future, BrokenProcessPool]:
    try:
        return executor.submit(run_task, task)
    except BrokenProcessPool as e:
        return e


def _drain(executor: ProcessPoolExecutor, tasks: List[Task]) -> Iterable[TaskOutcome]:
    """Outcomes in task order; tasks lost to a crashed worker come back as failures."""
    with executor:
        futures = [_submit(executor, task) for task in tasks]
        for task, future in zip(tasks, futures):
            try:
                if isinstance(future, BrokenProcessPool):
                    raise future
                yield future.result()
            except BrokenProcessPool as e:
                logger.error(
                    f"Worker pool broke before {task.coupling} realization {task.realization} pair {task.pair}: {e}"
                )
                yield failed_outcome(task, e)


def hash_name(name: str) -> int:
    """Stable non-negative integer for channel names outside a known channel list."""
    return int.from_bytes(name.encode("utf-8"), "little") % (2 ** 31)


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch == "." else "_" for ch in label).strip("_")


def run_experiment(spec: ExperimentSpec, jobs: int = 1, out_dir: Union[str, Path, None] = None) -> List[ResultRecord]:
    return ExperimentService(spec, jobs, out_dir).run().records
