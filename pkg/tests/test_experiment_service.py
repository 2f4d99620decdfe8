import json
from concurrent.futures import Future
from concurrent.futures.process import BrokenProcessPool

import pytest

from services.config_service import RESOLVED_CONFIG_FILE, resolve
from services.experiment_service import (
    ERRORS_FILE,
    RECORDS_FILE,
    TIMINGS_FILE,
    TRACES_DIR,
    ExperimentService,
    ResultRecord,
    TaskOutcome,
    _drain,
    coupling_label,
    direction_group,
    ground_truth_null,
    load_records,
    read_jsonl,
)

LORENZ_TO_ROSSLER = [[x, y] for x in ("X0", "X1", "X2") for y in ("Y0", "Y1", "Y2")]


def tiny_spec(**changes):
    raw = {
        "system": "lorenz_rossler",
        "base_seed": 2,
        "n_realizations": 3,
        "couplings": [[2.0, 0.0]],
        "pairs": LORENZ_TO_ROSSLER,
        "analysis_length": 60,
        "test": {
            "n_permutations": 3,
            "mc_draws_observed": 2,
            "n_inducing": 4,
            "embedding": {"m": 2, "tau": 1},
            "optimizer": {"iterations": 5, "mc_draws": 2},
        },
        "lorenz_rossler": {"n_steps": 200, "burn_in": 50, "substeps": 10, "coupling_form": "diffusive"},
    }
    raw.update(changes)
    return resolve(raw)


def test_coupling_labels_and_groups():
    assert coupling_label("lorenz_rossler", (2.0, 0.0)) == "(2.00,0.00)"
    assert coupling_label("neurovascular") == "B_upper"
    assert direction_group("lorenz_rossler", "X1", "Y2") == "L->R"
    assert direction_group("lorenz_rossler", "Y1", "X2") == "R->L"
    assert direction_group("neurovascular", "V1", "V2") == "V1->V2"


def test_ground_truth_null():
    assert ground_truth_null("lorenz_rossler", "X0", (0.0, 0.5)) is True
    assert ground_truth_null("lorenz_rossler", "Y0", (0.0, 0.5)) is False
    assert ground_truth_null("lorenz_rossler", "X0", (2.0, 0.0)) is False
    assert ground_truth_null("neurovascular", "V2") is True
    assert ground_truth_null("neurovascular", "V1") is False
    assert ground_truth_null("csv_input", "a") is None


def test_plan_pairs_directions_and_seeds(tmp_path):
    spec = tiny_spec(pairs=[["X0", "Y0"], ["Y0", "X0"], ["X1", "Y1"]])
    service = ExperimentService(spec, out_dir=tmp_path)
    tasks = service.plan()
    assert len(tasks) == 3 * 2
    first = tasks[0]
    assert first.pair == ("X0", "Y0")
    assert len(first.wanted) == 4
    assert first.seed == spec.base_seed
    assert len({task.test.seed for task in tasks}) == len(tasks)
    assert [t.test.seed for t in tasks] == [t.test.seed for t in service.plan()]


def test_plan_skips_records_already_done(tmp_path):
    service = ExperimentService(tiny_spec(pairs=[["X0", "Y0"]]), out_dir=tmp_path)
    done = {("(2.00,0.00)", 0, "X0->Y0", "gpccm"), ("(2.00,0.00)", 0, "X0->Y0", "vgpccm")}
    tasks = service.plan(done)
    assert [task.realization for task in tasks] == [1, 2]


@pytest.mark.slow
def test_run_writes_every_record_once(tmp_path):
    spec = tiny_spec()
    report = ExperimentService(spec, out_dir=tmp_path).run()
    assert report.new_records == 54
    assert report.failures == 0

    lines = (tmp_path / RECORDS_FILE).read_text(encoding="utf-8").splitlines()
    assert len(lines) == 54
    assert len({record.key for record in report.records}) == 54
    for record in report.records:
        assert record.group == "L->R"
        assert record.is_null is False
        assert len(record.null_samples) == 3
        assert -1.0 <= record.k_observed <= 1.0

    resolved = json.loads((tmp_path / RESOLVED_CONFIG_FILE).read_text(encoding="utf-8"))
    assert {json.loads(line)["config_hash"] for line in lines} == {resolved["config_hash"]}
    assert "timings" not in json.loads(lines[0])
    assert len(read_jsonl(tmp_path / TIMINGS_FILE)) == 54

    rerun = ExperimentService(spec, out_dir=tmp_path).run()
    assert rerun.new_records == 0
    assert len(rerun.records) == 54
    assert (tmp_path / RECORDS_FILE).read_text(encoding="utf-8").splitlines() == lines


@pytest.mark.slow
def test_parallel_run_matches_serial(tmp_path):
    spec = tiny_spec(n_realizations=1, pairs=[["X0", "Y0"], ["X1", "Y1"]])
    ExperimentService(spec, jobs=1, out_dir=tmp_path / "serial").run()
    ExperimentService(spec, jobs=2, out_dir=tmp_path / "parallel").run()
    serial = (tmp_path / "serial" / RECORDS_FILE).read_bytes()
    assert serial == (tmp_path / "parallel" / RECORDS_FILE).read_bytes()


def test_failed_tasks_go_to_the_error_file(tmp_path):
    spec = tiny_spec(n_realizations=1, pairs=[["X0", "Y0"]], analysis_length=500)
    report = ExperimentService(spec, out_dir=tmp_path).run()
    assert report.new_records == 0
    assert report.failures == 2
    errors = read_jsonl(tmp_path / ERRORS_FILE)
    assert {e["mode"] for e in errors} == {"gpccm", "vgpccm"}
    assert {e["error_type"] for e in errors} == {"TooShort"}
    assert read_jsonl(tmp_path / RECORDS_FILE) == []


def test_load_records_merges_timings(tmp_path):
    record = ResultRecord(
        system="neurovascular",
        coupling="B_upper",
        realization=0,
        seed=11,
        direction="V1->V2",
        group="V1->V2",
        mode="vgpccm",
        k_observed=0.2,
        p_value=1.0,
        reject=True,
        is_null=False,
        null_samples=[0.0, 0.1],
        config_hash="abc",
    )
    (tmp_path / RECORDS_FILE).write_text(json.dumps(record.to_dict(include_timings=False)) + "\n", encoding="utf-8")
    (tmp_path / TIMINGS_FILE).write_text(
        json.dumps({"coupling": "B_upper", "realization": 0, "direction": "V1->V2", "mode": "vgpccm",
                    "timings": {"fit_seconds": 1.5}}) + "\n",
        encoding="utf-8",
    )
    (loaded,) = load_records(tmp_path)
    assert loaded.timings == {"fit_seconds": 1.5}
    assert loaded.to_dict(include_timings=False) == record.to_dict(include_timings=False)


def test_simulate_all_writes_realizations(tmp_path):
    spec = tiny_spec(n_realizations=2)
    paths = ExperimentService(spec, out_dir=tmp_path).simulate_all()
    assert len(paths) == 2
    assert all(path.exists() and path.with_suffix(".json").exists() for path in paths)
    assert paths[0].name == "lorenz_rossler_2.00_0.00_r000.csv"


def test_traces_are_written_when_requested(tmp_path):
    spec = tiny_spec(n_realizations=1, pairs=[["X0", "Y0"]], save_traces=True)
    report = ExperimentService(spec, out_dir=tmp_path).run()
    assert report.failures == 0
    traces = sorted((tmp_path / TRACES_DIR).glob("*.csv"))
    assert [p.name for p in traces] == ["2.00_0.00_r000_X0_Y0_trace_X0.csv", "2.00_0.00_r000_X0_Y0_trace_Y0.csv"]
    header = traces[0].read_text(encoding="utf-8").splitlines()[0]
    assert header == "iteration,elbo,grad_norm,clipped_norm"


def test_no_traces_by_default(tmp_path):
    tasks = ExperimentService(tiny_spec(pairs=[["X0", "Y0"]]), out_dir=tmp_path).plan()
    assert all(task.trace_dir is None for task in tasks)


class CrashedPool:
    """Executor stand-in whose workers die after the first task."""

    def __init__(self):
        self.submitted = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def submit(self, fn, task):
        future = Future()
        if self.submitted == 0:
            future.set_result(TaskOutcome())
        else:
            future.set_exception(BrokenProcessPool("a worker process died"))
        self.submitted += 1
        return future


def test_broken_pool_fails_the_remaining_tasks():
    tasks = ExperimentService(tiny_spec(n_realizations=3, pairs=[["X0", "Y0"]])).plan()
    outcomes = list(_drain(CrashedPool(), tasks))
    assert len(outcomes) == 3
    assert outcomes[0].errors == []
    for task, outcome in zip(tasks[1:], outcomes[1:]):
        assert outcome.records == []
        assert {e.error_type for e in outcome.errors} == {"BrokenProcessPool"}
        assert {(e.realization, e.mode) for e in outcome.errors} == {
            (task.realization, "gpccm"),
            (task.realization, "vgpccm"),
        }
