"""Shared builders and independent reference implementations for the tests.

The reference functions here deliberately avoid the library's own code paths:
IoU is checked by rasterised cell counting, NMS by a quadratic scan over a
precomputed overlap matrix, AUROC by all-pairs counting, and the paired
recall rule by rank counting instead of sorting.
"""

from __future__ import annotations

import random
from pathlib import Path

import numpy as np

from recollab import (
    BBox,
    Detection,
    NegativeKind,
    Polarity,
    RecTask,
    TaskSet,
)
from recollab.datamodel import Difficulty, NegEdit, NegFacet, NegLocus, Split

GRID_LO = 0.0
GRID_HI = 32.0
GRID_STEP = 0.25


def grid_box(rng: random.Random) -> BBox:
    """Random box whose corners sit on the reference raster grid."""
    n = int((GRID_HI - GRID_LO) / GRID_STEP)
    x0, x1 = sorted(rng.randint(0, n) for _ in range(2))
    y0, y1 = sorted(rng.randint(0, n) for _ in range(2))
    return BBox(
        GRID_LO + x0 * GRID_STEP,
        GRID_LO + y0 * GRID_STEP,
        GRID_LO + x1 * GRID_STEP,
        GRID_LO + y1 * GRID_STEP,
    )


def raster_iou(a: BBox, b: BBox) -> float:
    """IoU by counting grid cells; exact for grid-aligned boxes."""
    n = int((GRID_HI - GRID_LO) / GRID_STEP)

    def mask(box: BBox) -> np.ndarray:
        m = np.zeros((n, n), dtype=bool)
        x0 = int(round((box.x0 - GRID_LO) / GRID_STEP))
        x1 = int(round((box.x1 - GRID_LO) / GRID_STEP))
        y0 = int(round((box.y0 - GRID_LO) / GRID_STEP))
        y1 = int(round((box.y1 - GRID_LO) / GRID_STEP))
        m[y0:y1, x0:x1] = True
        return m

    ma, mb = mask(a), mask(b)
    union = int(np.logical_or(ma, mb).sum())
    if union == 0:
        return 0.0
    inter = int(np.logical_and(ma, mb).sum())
    return inter / union


def np_iou_matrix(boxes: list[BBox]) -> np.ndarray:
    """Pairwise IoU via numpy broadcasting, written independently."""
    arr = np.array([[b.x0, b.y0, b.x1, b.y1] for b in boxes], dtype=float)
    x0 = np.maximum(arr[:, None, 0], arr[None, :, 0])
    y0 = np.maximum(arr[:, None, 1], arr[None, :, 1])
    x1 = np.minimum(arr[:, None, 2], arr[None, :, 2])
    y1 = np.minimum(arr[:, None, 3], arr[None, :, 3])
    inter = np.clip(x1 - x0, 0.0, None) * np.clip(y1 - y0, 0.0, None)
    area = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out

def brute_nms(dets: list[Detection], threshold: float) -> list[Detection]:
    """Quadratic greedy suppression over a precomputed overlap matrix."""
    if not dets:
        return []
    overlap = np_iou_matrix([d.box for d in dets])
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(overlap[i, j] <= threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def brute_auroc(pos: list[float], neg: list[float]) -> float:
    """All-pairs win/tie counting with numpy."""
    p = np.array(pos, dtype=float)[:, None]
    n = np.array(neg, dtype=float)[None, :]
    wins = int((p > n).sum())
    ties = int((p == n).sum())
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def rank_pair_hit(
    pos_entries: list[tuple[float, float]],
    neg_confs: list[float],
    k: int,
    threshold: float = 0.5,
) -> bool:
    """Paired recall hit by rank counting: an entry is in the top k iff
    fewer than k entries sort ahead of it. Negative boxes never overlap
    the ground truth, so only positive entries can produce a hit.

    pos_entries are (confidence, iou) for the positive member's boxes.
    """
    entries = [(c, 0, i, v) for i, (c, v) in enumerate(pos_entries)]
    entries += [(c, 1, j, 0.0) for j, c in enumerate(neg_confs)]
    for conf, member, idx, iou_value in entries:
        if iou_value <= threshold:
            continue
        ahead = sum(
            1
            for conf2, member2, idx2, _ in entries
            if conf2 > conf
            or (conf2 == conf and (member2, idx2) < (member, idx))
        )
        if ahead < k:
            return True
    return False


def make_positive(
    i: int,
    gt_box: BBox | None = None,
    expression: str | None = None,
    image: str | None = None,
    difficulty: Difficulty | None = Difficulty.L1,
    extras: dict | None = None,
) -> RecTask:
    return RecTask(
        id=f"pos-{i:05d}",
        image=image if image is not None else f"img-{i:05d}",
        expression=expression if expression is not None else f"object number {i}",
        polarity=Polarity.POSITIVE,
        difficulty=difficulty,
        gt_box=gt_box if gt_box is not None else BBox(10.0, 10.0, 60.0, 60.0),
        extras=dict(extras) if extras else {},
    )


def make_negative(
    i: int,
    paired: RecTask,
    polarity: Polarity = Polarity.NEGATIVE_EXPRESSION,
    kind: NegativeKind | None = None,
    expression: str | None = None,
    image: str | None = None,
) -> RecTask:
    if kind is None:
        edit = NegEdit.FLIP if polarity is Polarity.NEGATIVE_IMAGE else NegEdit.REPLACE
        kind = NegativeKind(edit=edit, facet=NegFacet.OBJECT, locus=NegLocus.L1)
    return RecTask(
        id=f"neg-{i:05d}",
        image=image if image is not None else f"negimg-{i:05d}",
        expression=expression if expression is not None else f"missing object {i}",
        polarity=polarity,
        difficulty=paired.difficulty,
        negative_kind=kind,
        paired_positive=paired.id,
    )


def paired_taskset(n_pairs: int, split: Split = Split.TEST) -> TaskSet:
    """n_pairs positives, each with one negative-expression partner."""
    tasks: list[RecTask] = []
    for i in range(n_pairs):
        pos = make_positive(i)
        tasks.append(pos)
        tasks.append(make_negative(i, pos))
    return TaskSet.build(split, tasks)


# Five disjoint slots so NMS keeps every proposal and top-5 is the full set.
SLOT_BOXES = tuple(BBox(120.0 * i, 400.0, 120.0 * i + 80.0, 480.0) for i in range(5))
SLOT_SCORES = (0.9, 0.85, 0.8, 0.75, 0.7)


class SlotGrounder:
    """Deterministic grounder proposing the five slot boxes for any query."""

    def ground(self, image, expression):
        from recollab.backends import GroundingResult

        dets = tuple(
            Detection(box=box, score=score) for box, score in zip(SLOT_BOXES, SLOT_SCORES)
        )
        return GroundingResult(detections=dets, query=expression)


def slot_gt(slot: int, inset: float = 5.0) -> BBox:
    """Ground truth inside a slot; inset 5 keeps IoU about 0.77, inset 12+ drops below 0.5."""
    base = SLOT_BOXES[slot]
    return BBox(base.x0 + inset, base.y0 + inset, base.x1 - inset, base.y1 - inset)


OFF_SLOT_GT = BBox(10.0, 10.0, 90.0, 90.0)  # overlaps no slot


def make_slot_positive(i: int, *, hit: bool = True, inset: float = 5.0) -> RecTask:
    gt = slot_gt(i % len(SLOT_BOXES), inset) if hit else OFF_SLOT_GT
    return make_positive(i, gt_box=gt, expression=f"slot object {i}")


SLOT_PAYLOAD = {
    "detections": [
        {"box": list(box.as_list()), "score": score}
        for box, score in zip(SLOT_BOXES, SLOT_SCORES)
    ]
}


def build_sfa_corpus(root, n_pairs=10, *, seed=7, omit_generate_for=None):
    """Dataset + replay fixtures + YAML config for end-to-end runs.

    Even-index positives route fast (one confident detection), odd ones
    and all negatives route slow. Every response a run will request is
    recorded, so runs are fully offline and deterministic. Returns the
    config path; all config paths are relative to it.
    """
    import yaml

    from recollab.backends.replay import (
        ROLE_DETECT,
        ROLE_EXTRACT,
        ROLE_GENERATE,
        ROLE_GROUND,
        write_fixture,
    )
    from recollab.datamodel import save_taskset
    from recollab.sfa import build_focus_prompt

    root = Path(root)
    fixtures = root / "fixtures"
    fixtures.mkdir(parents=True, exist_ok=True)
    gt = BBox(100.0, 100.0, 200.0, 200.0)

    tasks = []
    for i in range(n_pairs):
        expr = f"the widget near lamp {i}"
        pos = make_positive(i, gt_box=gt, expression=expr)
        tasks.append(pos)
        write_fixture(fixtures, ROLE_EXTRACT, "", expr, {"text": '{"target": "widget"}'})
        if i % 2 == 0:
            detect = [{"box": [100, 100, 200, 200], "score": 0.9}]
        else:
            detect = [
                {"box": [100, 100, 200, 200], "score": 0.9},
                {"box": [300, 300, 400, 400], "score": 0.5},
                {"box": [500, 500, 600, 600], "score": 0.3},
            ]
        write_fixture(fixtures, ROLE_DETECT, pos.image, "widget", {"detections": detect})
        # token scores point at "widget" (chars 4-10); the decoy outranks
        # the true box on overall score but not on target similarity
        write_fixture(
            fixtures,
            ROLE_GROUND,
            pos.image,
            expr,
            {
                "detections": [
                    {
                        "box": [300, 300, 400, 400],
                        "score": 0.85,
                        "token_scores": [{"start": 4, "end": 10, "score": 0.3}],
                    },
                    {
                        "box": [102, 102, 198, 198],
                        "score": 0.8,
                        "token_scores": [{"start": 4, "end": 10, "score": 0.9}],
                    },
                ]
            },
        )
        prompt = build_focus_prompt(expr, "widget")
        if omit_generate_for != pos.id:
            write_fixture(
                fixtures,
                ROLE_GENERATE,
                pos.image,
                prompt,
                {
                    "text": "[[102, 102, 198, 198]]",
                    "coordinate_token_probs": [0.8, 0.9, 0.85, 0.95],
                },
            )

        neg_expr = f"the missing widget {i}"
        neg = make_negative(i, pos, expression=neg_expr)
        tasks.append(neg)
        write_fixture(fixtures, ROLE_EXTRACT, "", neg_expr, {"text": '{"target": "widget"}'})
        write_fixture(
            fixtures,
            ROLE_DETECT,
            neg.image,
            "widget",
            {
                "detections": [
                    {"box": [300, 300, 350, 350], "score": 0.6},
                    {"box": [10, 10, 60, 60], "score": 0.4},
                ]
            },
        )
        write_fixture(
            fixtures,
            ROLE_GROUND,
            neg.image,
            neg_expr,
            {"detections": [{"box": [300, 300, 350, 350], "score": 0.4}]},
        )
        neg_prompt = build_focus_prompt(neg_expr, "widget")
        if i % 2 == 0:
            generate = {"text": "There is no such widget."}
        else:
            generate = {
                "text": "[[300, 300, 350, 350]]",
                "coordinate_token_probs": [0.3, 0.3, 0.3, 0.3],
            }
        if omit_generate_for != neg.id:
            write_fixture(fixtures, ROLE_GENERATE, neg.image, neg_prompt, generate)

    save_taskset(TaskSet.build(Split.TEST, tasks), root / "test.jsonl")

    backend = {"kind": "replay", "fixtures": "fixtures", "concurrency": 4}
    config = {
        "pipeline": "sfa",
        "seed": seed,
        "output_dir": "out",
        "datasets": {"test": "test.jsonl"},
        "backends": {
            "extractor": {**backend, "cost_unit": 0.0},
            "detector": {**backend, "cost_unit": 0.0},
            "grounder": {**backend, "cost_unit": 1.0},
            "mllm": {**backend, "cost_unit": 10.0},
        },
        "expected_counts": {
            "test": {"total": 2 * n_pairs, "positive": n_pairs, "pairs": n_pairs}
        },
    }
    config_path = root / "run.yaml"
    config_path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    return config_path


def build_export_corpus(root, n_pos=12, n_neg=4, *, positives=10, negatives=3):
    """Train split + grounder fixtures + config for export-tuning runs."""
    import yaml

    from recollab.backends.replay import ROLE_GROUND, write_fixture
    from recollab.datamodel import save_taskset

    root = Path(root)
    fixtures = root / "fixtures"
    fixtures.mkdir(parents=True, exist_ok=True)
    tasks = []
    for i in range(n_pos):
        pos = make_slot_positive(i)
        tasks.append(pos)
        write_fixture(fixtures, ROLE_GROUND, pos.image, pos.expression, SLOT_PAYLOAD)
    for j in range(n_neg):
        neg = make_negative(j, tasks[j])
        tasks.append(neg)
        write_fixture(fixtures, ROLE_GROUND, neg.image, neg.expression, SLOT_PAYLOAD)
    save_taskset(TaskSet.build(Split.TRAIN, tasks), root / "train.jsonl")
    config = {
        "pipeline": "crs",
        "seed": 3,
        "output_dir": "out",
        "datasets": {"train": "train.jsonl"},
        "backends": {"grounder": {"kind": "replay", "fixtures": "fixtures"}},
        "tuning": {"positives": positives, "negatives": negatives, "output": "tuning.jsonl"},
    }
    config_path = root / "export.yaml"
    config_path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    return config_path
