"""Run orchestration.

One coordinator thread submits tasks to a worker pool; per-backend
semaphores bound in-flight calls; results are written to an append-only
prediction log in submission order, which makes repeat runs byte-identical
and lets an interrupted run resume by skipping already-logged task ids.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .backends import (
    BackendBundle,
    BackendError,
    FixtureStore,
    HttpClient,
    HttpDetector,
    HttpGrounder,
    HttpMllm,
    HttpSelector,
    HttpTargetExtractor,
    ReplayDetector,
    ReplayGrounder,
    ReplayMllm,
    ReplaySelector,
    ReplayTargetExtractor,
)
from .config import BackendSettings, ConfigError, RunConfig, config_hash
from .crs import export_tuning, run_crs, save_tuning
from .datamodel import DatasetError, RecTask, image_ref, load_taskset, validate_counts
from .metrics import EvalReport, ScoredPrediction, build_report, render_text
from .prediction import Pathway, Prediction, RouteLevel
from .sfa import run_sfa

logger = logging.getLogger(__name__)

LOG_NAME = "predictions.jsonl"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"
LOG_VERSION = 1
CRASH_ENV = "RECOLLAB_CRASH_AFTER"
FAILURE_NOTE_PREFIX = "backend failure"

REQUIRED_ROLES: Mapping[str, tuple[str, ...]] = {
    "specialist": ("grounder",),
    "mllm": ("mllm",),
    "sfa": ("extractor", "detector", "grounder", "mllm"),
    "crs": ("grounder", "selector"),
}


class BoundedHandle:
    """Wraps a backend handle with a semaphore capping in-flight calls."""

    _CALLS = ("extract", "detect", "ground", "ground_generative", "select")

    def __init__(self, inner: Any, limit: int):
        self._inner = inner
        self._gate = threading.BoundedSemaphore(limit)

    def __getattr__(self, name: str) -> Any:
        attr = getattr(self._inner, name)
        if name in self._CALLS and callable(attr):
            def gated(*args: Any, **kwargs: Any) -> Any:
                with self._gate:
                    return attr(*args, **kwargs)

            return gated
        return attr


def _build_handle(role: str, settings: BackendSettings, cfg: RunConfig) -> Any:
    if settings.kind == "replay":
        assert settings.fixtures is not None
        store = FixtureStore(cfg.resolve(settings.fixtures))
        impl: Any = {
            "extractor": ReplayTargetExtractor,
            "detector": ReplayDetector,
            "grounder": ReplayGrounder,
            "mllm": ReplayMllm,
            "selector": ReplaySelector,
        }[role](store)
    else:
        client = HttpClient(
            endpoint=settings.endpoint or "",
            token=settings.token,
            timeout=settings.timeout,
            retries=settings.retries,
            backoff=settings.backoff,
        )
        if role == "extractor":
            impl = HttpTargetExtractor(client)
        elif role == "detector":
            impl = HttpDetector(client, settings.coordinate_space)
        elif role == "grounder":
            impl = HttpGrounder(client, settings.coordinate_space)
        elif role == "mllm":
            impl = HttpMllm(client, settings.coordinate_space)
        else:
            impl = HttpSelector(client)
    return BoundedHandle(impl, settings.concurrency)


def build_backends(cfg: RunConfig) -> BackendBundle:
    handles = {
        role: _build_handle(role, settings, cfg) for role, settings in cfg.backends.items()
    }
    return BackendBundle(**handles)


def pathway_units(cfg: RunConfig) -> dict[str, float]:
    """Cost units per task for each pathway the configured pipeline uses.

    A pathway's unit is the sum of the cost units of every backend a task
    on that pathway calls; totals in the report are counts times units.
    """

    def unit(*roles: str) -> float:
        return sum(cfg.backends[r].cost_unit for r in roles if r in cfg.backends)

    if cfg.pipeline == "specialist":
        return {Pathway.FAST.value: unit("grounder")}
    if cfg.pipeline == "mllm":
        return {Pathway.SLOW.value: unit("mllm")}
    if cfg.pipeline == "crs":
        return {Pathway.CRS.value: unit("grounder", "selector")}
    return {
        Pathway.FAST.value: unit("extractor", "detector", "grounder"),
        Pathway.SLOW.value: unit("extractor", "detector", "mllm"),
    }


def run_specialist_task(task: RecTask, handles: BackendBundle) -> ScoredPrediction:
    """Plain grounder baseline: top confidence box wins, full list ranked."""
    image = image_ref(task)
    try:
        grounding = handles.require("grounder").ground(image, task.expression)
    except BackendError as exc:
        logger.warning("specialist backend failure on task %s: %s", task.id, exc)
        return ScoredPrediction(
            prediction=Prediction(
                task_id=task.id,
                box=None,
                confidence=0.0,
                pathway=Pathway.FAST,
                note=f"{FAILURE_NOTE_PREFIX}: {exc}",
            ),
            ranked_boxes=(),
        )
    ranked = tuple((det.box, det.score) for det in grounding.detections)
    best = grounding.detections[0] if grounding.detections else None
    if best is None or best.score <= 0.0:
        note = "grounder returned no detections" if best is None else "best detection has zero confidence"
        prediction = Prediction(
            task_id=task.id, box=None, confidence=0.0, pathway=Pathway.FAST, note=note
        )
    else:
        prediction = Prediction(
            task_id=task.id, box=best.box, confidence=best.score, pathway=Pathway.FAST
        )
    return ScoredPrediction(prediction=prediction, ranked_boxes=ranked)


def run_mllm_task(task: RecTask, handles: BackendBundle, cfg: RunConfig) -> ScoredPrediction:
    """Vanilla generative baseline: base prompt, no routing, no focus."""
    vanilla = replace(cfg.sfa, focus=False, force_level=RouteLevel.SLOW)
    return ScoredPrediction.single(run_sfa(task, handles, vanilla))


def _worker_for(cfg: RunConfig, handles: BackendBundle) -> Callable[[RecTask], ScoredPrediction]:
    if cfg.pipeline == "specialist":
        return lambda task: run_specialist_task(task, handles)
    if cfg.pipeline == "mllm":
        return lambda task: run_mllm_task(task, handles, cfg)
    if cfg.pipeline == "sfa":
        return lambda task: ScoredPrediction.single(run_sfa(task, handles, cfg.sfa))
    if cfg.pipeline == "crs":
        return lambda task: ScoredPrediction.single(run_crs(task, handles, cfg.crs))
    raise ConfigError(f"unknown pipeline {cfg.pipeline!r}")


def _write_record(handle, record: Mapping[str, Any]) -> None:
    handle.write(json.dumps(record, ensure_ascii=False))
    handle.write("\n")
    handle.flush()


def read_log(path: Path) -> tuple[dict[str, Any] | None, dict[str, ScoredPrediction], int]:
    """Parse a prediction log; returns (meta, predictions, valid byte length).

    A torn final line (no trailing newline, from a hard crash) is excluded
    from the valid length so a resuming run can truncate it away.
    """
    if not path.exists():
        return None, {}, 0
    raw = path.read_bytes()
    valid_len = len(raw)
    if raw and not raw.endswith(b"\n"):
        cut = raw.rfind(b"\n") + 1
        logger.warning("prediction log ends mid-record; ignoring %d bytes", valid_len - cut)
        raw = raw[:cut]
        valid_len = cut
    meta: dict[str, Any] | None = None
    preds: dict[str, ScoredPrediction] = {}
    for line_no, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"prediction log line {line_no} is not valid JSON: {exc}") from exc
        kind = record.get("record")
        if kind == "meta":
            if meta is None:
                meta = record
        elif kind == "prediction":
            sp = ScoredPrediction.from_dict(record)
            preds[sp.prediction.task_id] = sp
        else:
            raise ConfigError(f"prediction log line {line_no} has unknown record kind {kind!r}")
    return meta, preds, valid_len


def _crash_budget() -> int | None:
    value = os.environ.get(CRASH_ENV)
    if value is None:
        return None
    try:
        budget = int(value)
    except ValueError as exc:
        raise ConfigError(f"{CRASH_ENV} must be an integer, got {value!r}") from exc
    if budget < 1:
        raise ConfigError(f"{CRASH_ENV} must be >= 1, got {budget}")
    return budget


def _count_failures(preds: Mapping[str, ScoredPrediction]) -> int:
    return sum(
        1
        for sp in preds.values()
        if sp.prediction.note is not None and sp.prediction.note.startswith(FAILURE_NOTE_PREFIX)
    )


def _write_report(report: EvalReport, out_dir: Path) -> str:
    text = render_text(report)
    (out_dir / REPORT_JSON).write_text(
        json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    (out_dir / REPORT_TEXT).write_text(text + "\n", encoding="utf-8")
    return text


def cmd_run(cfg: RunConfig) -> int:
    """Evaluate the configured pipeline over the test split.

    Exit status: 0 clean, 1 when task-level backend failures were logged
    (the run still completes), ConfigError propagates for exit 2.
    """
    cfg.check_paths()
    for role in REQUIRED_ROLES[cfg.pipeline]:
        if role not in cfg.backends:
            raise ConfigError(f"pipeline {cfg.pipeline!r} needs a {role!r} backend")

    ts = load_taskset(cfg.dataset_path("test"), "test")
    handles = build_backends(cfg)
    worker = _worker_for(cfg, handles)
    expected_hash = config_hash(cfg)

    out_dir = cfg.resolve(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_NAME

    meta, done, valid_len = read_log(log_path)
    if meta is not None:
        if meta.get("config_hash") != expected_hash:
            raise ConfigError(
                "existing prediction log was written under a different config; "
                "move it away or restore that config"
            )
        if done:
            logger.info("resuming: %d predictions already logged", len(done))
    if log_path.exists() and valid_len != log_path.stat().st_size:
        with open(log_path, "rb+") as tail:
            tail.truncate(valid_len)

    pending = [task for task in ts if task.id not in done]
    crash_after = _crash_budget()
    pool_size = max([s.concurrency for s in cfg.backends.values()] or [1])

    preds: dict[str, ScoredPrediction] = dict(done)
    with open(log_path, "a", encoding="utf-8") as log_file:
        if meta is None:
            _write_record(
                log_file,
                {
                    "record": "meta",
                    "version": LOG_VERSION,
                    "config_hash": expected_hash,
                    "pipeline": cfg.pipeline,
                    "seed": cfg.seed,
                },
            )
        written = 0
        with ThreadPoolExecutor(max_workers=pool_size) as pool:
            futures = [pool.submit(worker, task) for task in pending]
            for future in futures:
                sp = future.result()
                _write_record(log_file, {"record": "prediction", **sp.to_dict()})
                preds[sp.prediction.task_id] = sp
                written += 1
                if crash_after is not None and written >= crash_after:
                    logger.warning("crash hook: exiting after %d records", written)
                    os._exit(3)

    failed = _count_failures(preds)
    report = build_report(
        preds,
        ts,
        ks=cfg.metrics.ks,
        unit_costs=pathway_units(cfg),
        metadata={
            "config_hash": expected_hash,
            "pipeline": cfg.pipeline,
            "seed": cfg.seed,
            "failed_tasks": failed,
        },
    )
    print(_write_report(report, out_dir))
    if failed:
        logger.warning("%d task(s) failed at the backend level", failed)
        return 1
    return 0


def cmd_report(cfg: RunConfig, log_path: Path | None = None) -> int:
    """Re-render the report from an existing prediction log."""
    cfg.check_paths()
    out_dir = cfg.resolve(cfg.output_dir)
    path = log_path if log_path is not None else out_dir / LOG_NAME
    meta, preds, _ = read_log(path)
    if meta is None:
        raise ConfigError(f"no prediction log at {path}")
    if meta.get("config_hash") != config_hash(cfg):
        raise ConfigError("prediction log was written under a different config")
    ts = load_taskset(cfg.dataset_path("test"), "test")
    failed = _count_failures(preds)
    report = build_report(
        preds,
        ts,
        ks=cfg.metrics.ks,
        unit_costs=pathway_units(cfg),
        metadata={
            "config_hash": meta.get("config_hash"),
            "pipeline": meta.get("pipeline"),
            "seed": meta.get("seed"),
            "failed_tasks": failed,
        },
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    print(_write_report(report, out_dir))
    return 1 if failed else 0


def cmd_validate(cfg: RunConfig) -> int:
    """Load and census every configured dataset split."""
    cfg.check_paths()
    status = 0
    summaries: dict[str, Any] = {}
    for split in sorted(cfg.datasets):
        try:
            ts = load_taskset(cfg.dataset_path(split), split)
        except DatasetError as exc:
            print(f"split {split}: INVALID - {exc}")
            summaries[split] = {"error": str(exc)}
            status = 1
            continue
        stats = validate_counts(ts, cfg.expected_counts.get(split))
        print(stats.render_text())
        summaries[split] = stats.to_dict()
        if not stats.passed:
            status = 1
    out_dir = cfg.resolve(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "validation.json").write_text(
        json.dumps(summaries, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return status


def cmd_export_tuning(cfg: RunConfig) -> int:
    """Write instruction-tuning samples from the train split."""
    cfg.check_paths()
    if "grounder" not in cfg.backends:
        raise ConfigError("export-tuning needs a grounder backend")
    ts = load_taskset(cfg.dataset_path("train"), "train")
    handles = build_backends(cfg)
    samples = export_tuning(
        ts,
        handles.require("grounder"),
        k=cfg.crs.k,
        nms_threshold=cfg.crs.nms_threshold,
        counts=(cfg.tuning.positives, cfg.tuning.negatives),
        seed=cfg.seed,
        include_none=cfg.tuning.include_none,
    )
    out_dir = cfg.resolve(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / cfg.tuning.output
    save_tuning(samples, path)
    positives = sum(1 for s in samples if s.answer_box() is not None)
    print(f"wrote {len(samples)} samples ({positives} positive) to {path}")
    return 0
