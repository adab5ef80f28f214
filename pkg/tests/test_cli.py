"""Command-line behaviour: exit codes, determinism, crash resume.

End-to-end tests run the installed console entry through a subprocess so
os._exit in the crash hook cannot take the test process down with it.
"""

import json
import os
import shutil
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pytest
import yaml

from recollab.backends import BackendBundle, BackendError
from recollab.config import ConfigError, load_config
from recollab.geometry import BBox, Detection
from recollab.runner import (
    LOG_NAME,
    REPORT_JSON,
    REPORT_TEXT,
    BoundedHandle,
    pathway_units,
    read_log,
    run_specialist_task,
)

from helpers import build_export_corpus, build_sfa_corpus, make_positive

pytestmark = pytest.mark.filterwarnings("ignore::ResourceWarning")


def run_cli(*args, env=None, cwd=None):
    merged = {k: v for k, v in os.environ.items() if k != "RECOLLAB_CRASH_AFTER"}
    if env:
        merged.update(env)
    return subprocess.run(
        [sys.executable, "-m", "recollab", *map(str, args)],
        capture_output=True,
        text=True,
        env=merged,
        cwd=cwd,
        timeout=120,
    )


def read_records(log_path):
    lines = Path(log_path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


# ---------------------------------------------------------------- read_log


def test_read_log_missing_file(tmp_path):
    meta, preds, valid = read_log(tmp_path / "absent.jsonl")
    assert meta is None
    assert preds == {}
    assert valid == 0


def _pred_line(task_id):
    return json.dumps(
        {
            "record": "prediction",
            "task_id": task_id,
            "box": [1.0, 2.0, 3.0, 4.0],
            "confidence": 0.5,
            "pathway": "fast",
            "decision": None,
            "raw": None,
            "note": None,
            "ranked_boxes": [{"box": [1.0, 2.0, 3.0, 4.0], "confidence": 0.5}],
        }
    )


def test_read_log_torn_tail_is_dropped(tmp_path):
    path = tmp_path / "log.jsonl"
    meta_line = json.dumps({"record": "meta", "version": 1, "config_hash": "x"})
    body = meta_line + "\n" + _pred_line("t1") + "\n" + _pred_line("t2") + "\n"
    path.write_text(body + '{"record": "predi', encoding="utf-8")

    meta, preds, valid = read_log(path)
    assert meta is not None and meta["config_hash"] == "x"
    assert set(preds) == {"t1", "t2"}
    assert valid == len(body.encode("utf-8"))


def test_read_log_rejects_unknown_record_kind(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text('{"record": "mystery"}\n', encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown record kind"):
        read_log(path)


def test_read_log_rejects_corrupt_line(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text('{"record": "meta"}\nnot json\n', encoding="utf-8")
    with pytest.raises(ConfigError, match="line 2"):
        read_log(path)


# ----------------------------------------------------------- pathway units


def _cfg_with_costs(tmp_path, pipeline):
    fixtures = tmp_path / "fixtures"
    fixtures.mkdir(exist_ok=True)
    (tmp_path / "test.jsonl").write_text("", encoding="utf-8")
    replay = {"kind": "replay", "fixtures": "fixtures"}
    config = {
        "pipeline": pipeline,
        "datasets": {"test": "test.jsonl"},
        "backends": {
            "extractor": {**replay, "cost_unit": 0.0},
            "detector": {**replay, "cost_unit": 0.0},
            "grounder": {**replay, "cost_unit": 1.0},
            "mllm": {**replay, "cost_unit": 10.0},
            "selector": {**replay, "cost_unit": 2.0},
        },
    }
    path = tmp_path / f"{pipeline}.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return load_config(path)


def test_pathway_units_sum_backend_costs(tmp_path):
    assert pathway_units(_cfg_with_costs(tmp_path, "sfa")) == {"fast": 1.0, "slow": 10.0}
    assert pathway_units(_cfg_with_costs(tmp_path, "specialist")) == {"fast": 1.0}
    assert pathway_units(_cfg_with_costs(tmp_path, "mllm")) == {"slow": 10.0}
    assert pathway_units(_cfg_with_costs(tmp_path, "crs")) == {"crs": 3.0}


# ---------------------------------------------------------- bounded handle


class _CountingGrounder:
    def __init__(self):
        self.lock = threading.Lock()
        self.active = 0
        self.max_active = 0

    def ground(self, image, query):
        with self.lock:
            self.active += 1
            self.max_active = max(self.max_active, self.active)
        time.sleep(0.01)
        with self.lock:
            self.active -= 1
        return query


def test_bounded_handle_caps_in_flight_calls():
    inner = _CountingGrounder()
    handle = BoundedHandle(inner, 2)
    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(lambda i: handle.ground("img", f"q{i}"), range(16)))
    assert sorted(results) == sorted(f"q{i}" for i in range(16))
    assert inner.max_active <= 2
    assert inner.max_active == 2  # enough load to actually hit the cap


def test_bounded_handle_passes_plain_attributes_through():
    class Inner:
        marker = "thing"

    handle = BoundedHandle(Inner(), 1)
    assert handle.marker == "thing"


# ------------------------------------------------------- specialist worker


class _StubGrounder:
    def __init__(self, detections=None, error=None):
        self.detections = detections or ()
        self.error = error

    def ground(self, image, query):
        if self.error is not None:
            raise self.error
        from recollab.backends.types import GroundingResult

        return GroundingResult(detections=tuple(self.detections), query=query)


def test_specialist_task_ranks_every_detection():
    dets = (
        Detection(box=BBox(0, 0, 10, 10), score=0.9),
        Detection(box=BBox(20, 20, 30, 30), score=0.4),
    )
    sp = run_specialist_task(make_positive(0), BackendBundle(grounder=_StubGrounder(dets)))
    assert sp.prediction.box == dets[0].box
    assert sp.prediction.confidence == 0.9
    assert sp.prediction.pathway.value == "fast"
    assert sp.ranked_boxes == ((dets[0].box, 0.9), (dets[1].box, 0.4))


def test_specialist_task_empty_grounding_is_rejection():
    sp = run_specialist_task(make_positive(0), BackendBundle(grounder=_StubGrounder()))
    assert sp.prediction.box is None
    assert sp.prediction.confidence == 0.0
    assert "no detections" in sp.prediction.note
    assert sp.ranked_boxes == ()


def test_specialist_task_zero_score_is_rejection():
    dets = (Detection(box=BBox(0, 0, 10, 10), score=0.0),)
    sp = run_specialist_task(make_positive(0), BackendBundle(grounder=_StubGrounder(dets)))
    assert sp.prediction.box is None
    assert "zero confidence" in sp.prediction.note


def test_specialist_task_backend_failure_is_noted():
    stub = _StubGrounder(error=BackendError("socket closed"))
    sp = run_specialist_task(make_positive(0), BackendBundle(grounder=stub))
    assert sp.prediction.note.startswith("backend failure")
    assert "socket closed" in sp.prediction.note


# ----------------------------------------------------------- CLI: validate


def test_validate_passes_on_matching_counts(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=4)
    proc = run_cli("validate", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    assert "PASS" in proc.stdout
    assert "total" in proc.stdout
    summary = json.loads((tmp_path / "out" / "validation.json").read_text(encoding="utf-8"))
    assert summary["test"]["passed"] is True


def test_validate_fails_on_count_mismatch(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=4)
    config = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    config["expected_counts"]["test"]["total"] = 99
    cfg_path.write_text(yaml.safe_dump(config), encoding="utf-8")

    proc = run_cli("validate", "-c", cfg_path)
    assert proc.returncode == 1
    assert "FAIL" in proc.stdout


def test_validate_reports_malformed_dataset(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    with open(tmp_path / "test.jsonl", "a", encoding="utf-8") as handle:
        handle.write("{broken\n")

    proc = run_cli("validate", "-c", cfg_path)
    assert proc.returncode == 1
    assert "INVALID" in proc.stdout


def test_missing_config_file_is_usage_error(tmp_path):
    proc = run_cli("validate", "-c", tmp_path / "nope.yaml")
    assert proc.returncode == 2
    assert proc.stderr.startswith("error:")


def test_missing_dataset_file_is_usage_error(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    (tmp_path / "test.jsonl").unlink()
    proc = run_cli("validate", "-c", cfg_path)
    assert proc.returncode == 2
    assert "error:" in proc.stderr


# ---------------------------------------------------------------- CLI: run


def test_run_end_to_end(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=10)
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr

    records = read_records(tmp_path / "out" / LOG_NAME)
    assert records[0]["record"] == "meta"
    assert records[0]["pipeline"] == "sfa"
    assert records[0]["seed"] == 7
    assert len(records[0]["config_hash"]) == 64

    preds = [r for r in records[1:] if r["record"] == "prediction"]
    assert len(preds) == 20
    # even-index positives carry one confident detection and route fast
    assert sum(1 for r in preds if r["pathway"] == "fast") == 5
    assert sum(1 for r in preds if r["pathway"] == "slow") == 15

    assert (tmp_path / "out" / REPORT_JSON).exists()
    assert (tmp_path / "out" / REPORT_TEXT).exists()
    assert "Precision" in proc.stdout

    report = json.loads((tmp_path / "out" / REPORT_JSON).read_text(encoding="utf-8"))
    # every positive resolves to the true box: fast via target re-scoring,
    # slow via the generated coordinates
    assert report["precision_at_k"]["1"]["overall"]["value"] == 1.0
    assert report["pathways"]["counts"] == {"fast": 5, "slow": 15}
    assert report["pathways"]["total_cost"] == 5 * 1.0 + 15 * 10.0


def test_run_log_order_follows_dataset_order(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=5)
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    records = read_records(tmp_path / "out" / LOG_NAME)
    task_ids = [r["task_id"] for r in records if r["record"] == "prediction"]
    expected = [f"{kind}-{i:05d}" for i in range(5) for kind in ("pos", "neg")]
    assert task_ids == expected


def test_run_is_byte_deterministic(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=6)
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    first = (tmp_path / "out" / LOG_NAME).read_bytes()
    first_report = (tmp_path / "out" / REPORT_JSON).read_bytes()

    shutil.rmtree(tmp_path / "out")
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "out" / LOG_NAME).read_bytes() == first
    assert (tmp_path / "out" / REPORT_JSON).read_bytes() == first_report


def test_run_resumes_after_crash(tmp_path):
    crashed = build_sfa_corpus(tmp_path / "a", n_pairs=8)
    clean = build_sfa_corpus(tmp_path / "b", n_pairs=8)

    proc = run_cli("run", "-c", crashed, env={"RECOLLAB_CRASH_AFTER": "5"})
    assert proc.returncode == 3
    partial = read_records(tmp_path / "a" / "out" / LOG_NAME)
    assert partial[0]["record"] == "meta"
    assert len(partial) == 1 + 5

    proc = run_cli("run", "-c", crashed)
    assert proc.returncode == 0, proc.stderr

    proc = run_cli("run", "-c", clean)
    assert proc.returncode == 0, proc.stderr
    resumed_bytes = (tmp_path / "a" / "out" / LOG_NAME).read_bytes()
    clean_bytes = (tmp_path / "b" / "out" / LOG_NAME).read_bytes()
    assert resumed_bytes == clean_bytes


def test_run_resume_truncates_torn_tail(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=4)
    proc = run_cli("run", "-c", cfg_path, env={"RECOLLAB_CRASH_AFTER": "3"})
    assert proc.returncode == 3
    log_path = tmp_path / "out" / LOG_NAME
    with open(log_path, "a", encoding="utf-8") as handle:
        handle.write('{"record": "predic')  # simulated mid-write power cut

    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    records = read_records(log_path)
    assert len(records) == 1 + 8
    task_ids = [r["task_id"] for r in records[1:]]
    assert len(set(task_ids)) == 8


def test_run_refuses_log_from_other_config(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr

    config = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    config["seed"] = 99
    cfg_path.write_text(yaml.safe_dump(config), encoding="utf-8")

    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 2
    assert "different config" in proc.stderr


def test_run_reports_backend_failures_in_exit_code(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=3, omit_generate_for="pos-00001")
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 1
    records = read_records(tmp_path / "out" / LOG_NAME)
    failed = [r for r in records[1:] if r["note"] and r["note"].startswith("backend failure")]
    assert [r["task_id"] for r in failed] == ["pos-00001"]


def test_run_pipeline_override(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=4)
    proc = run_cli(
        "run", "-c", cfg_path, "--pipeline", "specialist", "--output-dir", "out-baseline"
    )
    assert proc.returncode == 0, proc.stderr
    records = read_records(tmp_path / "out-baseline" / LOG_NAME)
    assert records[0]["pipeline"] == "specialist"
    assert all(r["pathway"] == "fast" for r in records[1:])


def test_run_seed_override_changes_config_hash(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    proc = run_cli("run", "-c", cfg_path, "--seed", "11", "--output-dir", "out-a")
    assert proc.returncode == 0, proc.stderr
    proc = run_cli("run", "-c", cfg_path, "--seed", "12", "--output-dir", "out-b")
    assert proc.returncode == 0, proc.stderr
    hash_a = read_records(tmp_path / "out-a" / LOG_NAME)[0]["config_hash"]
    hash_b = read_records(tmp_path / "out-b" / LOG_NAME)[0]["config_hash"]
    assert hash_a != hash_b


def test_crash_env_must_be_positive_integer(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    proc = run_cli("run", "-c", cfg_path, env={"RECOLLAB_CRASH_AFTER": "zero"})
    assert proc.returncode == 2
    proc = run_cli("run", "-c", cfg_path, env={"RECOLLAB_CRASH_AFTER": "0"})
    assert proc.returncode == 2


def test_run_requires_backends_for_pipeline(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    config = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    del config["backends"]["mllm"]
    cfg_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 2
    assert "mllm" in proc.stderr


# ------------------------------------------------------------- CLI: report


def test_report_rerenders_from_log(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=4)
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    report_path = tmp_path / "out" / REPORT_TEXT
    original = report_path.read_text(encoding="utf-8")
    report_path.unlink()

    proc = run_cli("report", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    assert report_path.read_text(encoding="utf-8") == original
    assert "Precision" in proc.stdout


def test_report_accepts_explicit_log_path(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    moved = tmp_path / "archived.jsonl"
    shutil.move(tmp_path / "out" / LOG_NAME, moved)

    proc = run_cli("report", "-c", cfg_path, "--log", moved)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "out" / REPORT_JSON).exists()


def test_report_without_log_is_usage_error(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    proc = run_cli("report", "-c", cfg_path)
    assert proc.returncode == 2
    assert "no prediction log" in proc.stderr


def test_report_refuses_log_from_other_config(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    proc = run_cli("run", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr

    config = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    config["seed"] = 123
    cfg_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    proc = run_cli("report", "-c", cfg_path)
    assert proc.returncode == 2
    assert "different config" in proc.stderr


# ------------------------------------------------------ CLI: export-tuning


def test_export_tuning_writes_requested_counts(tmp_path):
    cfg_path = build_export_corpus(tmp_path, n_pos=12, n_neg=4, positives=10, negatives=3)
    proc = run_cli("export-tuning", "-c", cfg_path)
    assert proc.returncode == 0, proc.stderr
    assert "wrote 13 samples (10 positive)" in proc.stdout

    out_path = tmp_path / "out" / "tuning.jsonl"
    lines = out_path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 13
    sample = json.loads(lines[0])
    assert {"image", "expression", "options", "answer"} <= set(sample)


def test_export_tuning_is_deterministic(tmp_path):
    cfg_a = build_export_corpus(tmp_path / "a")
    cfg_b = build_export_corpus(tmp_path / "b")
    assert run_cli("export-tuning", "-c", cfg_a).returncode == 0
    assert run_cli("export-tuning", "-c", cfg_b).returncode == 0
    bytes_a = (tmp_path / "a" / "out" / "tuning.jsonl").read_bytes()
    bytes_b = (tmp_path / "b" / "out" / "tuning.jsonl").read_bytes()
    assert bytes_a == bytes_b


# ------------------------------------------------------------ CLI: parsing


def test_no_subcommand_is_usage_error():
    proc = run_cli()
    assert proc.returncode == 2


def test_unknown_pipeline_choice_is_usage_error(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    proc = run_cli("run", "-c", cfg_path, "--pipeline", "turbo")
    assert proc.returncode == 2
    assert "invalid choice" in proc.stderr


def test_config_with_unknown_key_is_usage_error(tmp_path):
    cfg_path = build_sfa_corpus(tmp_path, n_pairs=2)
    config = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    config["velocity"] = 9
    cfg_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    proc = run_cli("validate", "-c", cfg_path)
    assert proc.returncode == 2
    assert "velocity" in proc.stderr
