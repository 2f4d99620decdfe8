import json
import logging

import numpy as np
import pytest

from main import EXIT_CONFIG, EXIT_OK, main
from services.experiment_service import RECORDS_FILE, ResultRecord

TINY_TEST = {
    "n_permutations": 3,
    "mc_draws_observed": 2,
    "n_inducing": 4,
    "embedding": {"m": 2, "tau": 1},
    "optimizer": {"iterations": 3, "mc_draws": 1},
}


@pytest.fixture(autouse=True)
def isolated_logging(tmp_path, monkeypatch):
    monkeypatch.setenv("GPCCM_LOG_DIR", str(tmp_path / "logs"))
    root = logging.getLogger()
    saved_handlers, saved_level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        if handler not in saved_handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in saved_handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(saved_level)


def test_bad_config_exits_with_config_code(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text('{"system": "lorenz_rossler", "base_seed": 1, "colour": "red"}', encoding="utf-8")
    assert main(["reproduce-chaotic", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert (tmp_path / "logs").is_dir()


def test_pair_test_from_files(tmp_path):
    rng = np.random.default_rng(0)
    b = np.sin(0.3 * np.arange(40)) + 0.1 * rng.standard_normal(40)
    a = np.roll(b, 1) + 0.1 * rng.standard_normal(40)
    (tmp_path / "a.json").write_text(json.dumps(a.tolist()), encoding="utf-8")
    (tmp_path / "b.json").write_text(json.dumps(b.tolist()), encoding="utf-8")
    (tmp_path / "cfg.json").write_text(json.dumps({"test": TINY_TEST}), encoding="utf-8")
    out = tmp_path / "pair"

    code = main([
        "test", "--x", str(tmp_path / "a.json"), "--y", str(tmp_path / "b.json"),
        "--config", str(tmp_path / "cfg.json"), "--out", str(out), "--seed", "5", "--traces",
    ])

    assert code == EXIT_OK
    results = json.loads((out / "test_results.json").read_text(encoding="utf-8"))
    assert {(r["direction"], r["mode"]) for r in results} == {
        ("a->b", "gpccm"), ("b->a", "gpccm"), ("a->b", "vgpccm"), ("b->a", "vgpccm"),
    }
    assert (out / "ecdf_a_to_b_vgpccm.csv").exists()
    trace = (out / "trace_a.csv").read_text(encoding="utf-8").splitlines()
    assert trace[0] == "iteration,elbo,grad_norm,clipped_norm"
    assert len(trace) == 1 + TINY_TEST["optimizer"]["iterations"]
    assert (out / "trace_b.csv").exists()


def test_summarize_and_ecdf_from_records(tmp_path):
    records = [
        ResultRecord(
            system="neurovascular",
            coupling="B_upper",
            realization=r,
            seed=r,
            direction=direction,
            group=direction,
            mode="vgpccm",
            k_observed=0.2,
            p_value=0.5,
            reject=False,
            is_null=direction == "V2->V1",
            null_samples=[0.1, 0.3, -0.2],
            config_hash="h",
        )
        for r in range(2)
        for direction in ("V1->V2", "V2->V1")
    ]
    (tmp_path / RECORDS_FILE).write_text(
        "".join(json.dumps(r.to_dict(include_timings=False)) + "\n" for r in records), encoding="utf-8"
    )

    assert main(["summarize", "--records", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "summary.txt").exists()
    assert main(["ecdf", "--records", str(tmp_path), "--direction", "V1->V2", "--realization", "1"]) == EXIT_OK
    assert (tmp_path / "ecdf_V1_to_V2_vgpccm_r001.csv").exists()
