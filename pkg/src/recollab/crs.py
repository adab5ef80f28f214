"""Candidate region selection.

A specialist grounder proposes boxes for the full expression; after NMS
the top-k survivors become lettered options in a multiple-choice prompt,
optionally closed by a final None option for rejection. A selector model
answers with one letter. The same machinery exports instruction-tuning
samples that teach a model to pick among plausible boxes and to refuse.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

from .datamodel import RecTask, TaskSet, image_ref
from .geometry import BBox, Detection, box_to_pixels, iou, nms
from .prediction import Pathway, Prediction

if TYPE_CHECKING:  # pragma: no cover - annotations only
    from .backends import BackendBundle, Grounder

logger = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_NMS_THRESHOLD = 0.7
NONE_OPTION_TEXT = "None"
DEFAULT_QUESTION_TEMPLATE = 'Which option matches the expression "{expression}"?'
DEFAULT_REJECTION_INSTRUCTION = (
    'If no suitable option exists, please select the option corresponding to "None".'
)
DEFAULT_ANSWER_INSTRUCTION = "Answer with a single option letter."


def option_label(index: int) -> str:
    """Label for the option at ``index``: A, B, C, ..."""
    if not 0 <= index < 26:
        raise ValueError(f"option index out of range: {index}")
    return chr(ord("A") + index)


@dataclass(frozen=True)
class CandidateSet:
    """Post-NMS top-k detections, lettered in confidence order.

    ``none_label``, when set, is the letter reserved for the rejection
    option; it always follows the real options.
    """

    candidates: tuple[tuple[str, Detection], ...]
    k: int
    none_label: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "candidates", tuple((label, det) for label, det in self.candidates)
        )
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if len(self.candidates) > self.k:
            raise ValueError(f"{len(self.candidates)} candidates exceed k={self.k}")
        expected = [option_label(i) for i in range(len(self.candidates))]
        labels = [label for label, _ in self.candidates]
        if labels != expected:
            raise ValueError(f"labels must run consecutively from A, got {labels}")
        if self.none_label is not None and self.none_label != option_label(len(self.candidates)):
            raise ValueError(
                f"none_label must follow the real options, got {self.none_label!r}"
            )

    def __len__(self) -> int:
        return len(self.candidates)

    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.candidates)

    def with_none(self) -> CandidateSet:
        if self.none_label is not None:
            return self
        return CandidateSet(
            candidates=self.candidates, k=self.k, none_label=option_label(len(self.candidates))
        )


def generate_candidates(
    dets: Sequence[Detection], k: int = DEFAULT_K, nms_thr: float = DEFAULT_NMS_THRESHOLD
) -> CandidateSet:
    """NMS then truncate to the k highest-confidence survivors."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    kept = nms(list(dets), nms_thr)[:k]
    return CandidateSet(
        candidates=tuple((option_label(i), det) for i, det in enumerate(kept)), k=k
    )


@dataclass(frozen=True)
class ChoicePrompt:
    """Rendered multiple-choice prompt plus the label -> box mapping."""

    text: str
    option_map: Mapping[str, BBox]
    none_label: str | None = None

    @property
    def offered(self) -> tuple[str, ...]:
        labels = tuple(self.option_map)
        if self.none_label is not None:
            labels += (self.none_label,)
        return labels


def build_choice_prompt(
    expression: str,
    cs: CandidateSet,
    include_none: bool = True,
    *,
    question_template: str = DEFAULT_QUESTION_TEMPLATE,
    rejection_instruction: str = DEFAULT_REJECTION_INSTRUCTION,
    answer_instruction: str = DEFAULT_ANSWER_INSTRUCTION,
) -> ChoicePrompt:
    """Render the expression and lettered box options, None always last."""
    if not cs.candidates and not include_none:
        raise ValueError("no options to offer: empty candidate set without a None option")
    if include_none:
        cs = cs.with_none()
    lines = [question_template.format(expression=expression)]
    option_map: dict[str, BBox] = {}
    for label, det in cs.candidates:
        x0, y0, x1, y1 = box_to_pixels(det.box)
        lines.append(f"{label}. [[{x0}, {y0}, {x1}, {y1}]]")
        option_map[label] = det.box
    if include_none:
        lines.append(f"{cs.none_label}. {NONE_OPTION_TEXT}")
        lines.append(rejection_instruction)
    lines.append(answer_instruction)
    return ChoicePrompt(
        text="\n".join(lines),
        option_map=option_map,
        none_label=cs.none_label if include_none else None,
    )


_STANDALONE_LETTER = re.compile(r"\b([A-Za-z])\b")


def match_option_label(raw: str, labels: Sequence[str]) -> str | None:
    """Resolve raw selector output to one of the offered labels.

    An exact single-letter answer wins outright; otherwise the first
    standalone letter (case-insensitive) that names an option is taken.
    Free text without any standalone option letter fails.
    """
    stripped = raw.strip()
    for label in labels:
        if stripped == label:
            return label
    by_lower = {label.lower(): label for label in labels}
    for match in _STANDALONE_LETTER.finditer(raw):
        label = by_lower.get(match.group(1).lower())
        if label is not None:
            return label
    return None


def parse_choice(raw: str, cp: ChoicePrompt) -> str | None:
    """Selector answer -> offered label, or None on unparseable output."""
    return match_option_label(raw, cp.offered)


@dataclass(frozen=True)
class CrsParams:
    k: int = DEFAULT_K
    nms_threshold: float = DEFAULT_NMS_THRESHOLD
    include_none: bool = True
    question_template: str = DEFAULT_QUESTION_TEMPLATE
    rejection_instruction: str = DEFAULT_REJECTION_INSTRUCTION
    answer_instruction: str = DEFAULT_ANSWER_INSTRUCTION

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ValueError(f"nms threshold out of [0, 1]: {self.nms_threshold}")


def _miss(task: RecTask, note: str) -> Prediction:
    return Prediction(
        task_id=task.id, box=None, confidence=0.0, pathway=Pathway.CRS, note=note
    )


def run_crs(task: RecTask, handles: "BackendBundle", params: CrsParams = CrsParams()) -> Prediction:
    """Full candidate-selection pass for one task.

    Backend failures surface as miss predictions so a batch run skips the
    task and keeps going; a None answer is an explicit rejection, scored
    with confidence 0 so ranking metrics place it below every accepted box.
    """
    from .backends import BackendError

    image = image_ref(task)
    try:
        grounding = handles.require("grounder").ground(image, task.expression)
        cs = generate_candidates(grounding.detections, k=params.k, nms_thr=params.nms_threshold)
        if not cs.candidates and not params.include_none:
            return _miss(task, "no candidates survived")
        cp = build_choice_prompt(
            task.expression,
            cs,
            include_none=params.include_none,
            question_template=params.question_template,
            rejection_instruction=params.rejection_instruction,
            answer_instruction=params.answer_instruction,
        )
        sel = handles.require("selector").select(image, cp.text, cp.offered)
    except BackendError as exc:
        logger.warning("CRS backend failure on task %s: %s", task.id, exc)
        return _miss(task, f"backend failure: {exc}")

    label = parse_choice(sel.raw_text, cp) if sel.raw_text else sel.label
    raw: dict[str, Any] = {"text": sel.raw_text, "label_prob": sel.label_prob}
    if label is None:
        return _miss(task, f"unparseable selector answer: {sel.raw_text[:80]!r}")
    if label == cp.none_label:
        return Prediction(
            task_id=task.id,
            box=None,
            confidence=0.0,
            pathway=Pathway.CRS,
            raw=dict(raw, label=label),
            note="rejected via None option",
        )
    return Prediction(
        task_id=task.id,
        box=cp.option_map[label],
        confidence=sel.label_prob,
        pathway=Pathway.CRS,
        raw=dict(raw, label=label),
    )


@dataclass(frozen=True)
class TuningSample:
    """One exported multiple-choice training record.

    Real options are pre-shuffled; the None option, when present, keeps
    the final letter. For positive-derived samples the answer letter's
    box overlaps ground truth (IoU > 0.5); negative-derived samples
    answer the None option.
    """

    image: str
    expression: str
    options: tuple[tuple[str, BBox | None], ...]
    answer: str

    def __post_init__(self) -> None:
        labels = [label for label, _ in self.options]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate option labels: {labels}")
        if self.answer not in labels:
            raise ValueError(f"answer {self.answer!r} not among options {labels}")

    def answer_box(self) -> BBox | None:
        return dict(self.options)[self.answer]

    def to_dict(self) -> dict[str, Any]:
        return {
            "image": self.image,
            "expression": self.expression,
            "options": [
                {"label": label, "box": box.as_list() if box is not None else None}
                for label, box in self.options
            ],
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TuningSample:
        options = tuple(
            (
                entry["label"],
                BBox.from_list(entry["box"]) if entry.get("box") is not None else None,
            )
            for entry in data["options"]
        )
        return cls(
            image=data["image"],
            expression=data["expression"],
            options=options,
            answer=data["answer"],
        )


def candidate_hit(cs: CandidateSet, gt: BBox, iou_thr: float = 0.5) -> bool:
    """True when some candidate box beats the IoU threshold against GT."""
    return any(iou(det.box, gt) > iou_thr for _, det in cs.candidates)


def _sample_rng(seed: int, task_id: str) -> random.Random:
    # string seeding hashes via sha512 inside Random, stable across processes
    return random.Random(f"{seed}:{task_id}")


def _build_sample(task: RecTask, cs: CandidateSet, seed: int, include_none: bool) -> TuningSample:
    boxes = [det.box for _, det in cs.candidates]
    _sample_rng(seed, task.id).shuffle(boxes)
    options: list[tuple[str, BBox | None]] = [
        (option_label(i), box) for i, box in enumerate(boxes)
    ]
    none_label = option_label(len(boxes))
    if include_none:
        options.append((none_label, None))
    if task.is_positive:
        assert task.gt_box is not None
        answer = max(options[: len(boxes)], key=lambda item: iou(item[1], task.gt_box))[0]
    else:
        answer = none_label
    return TuningSample(
        image=task.image, expression=task.expression, options=tuple(options), answer=answer
    )


def export_tuning(
    ts: TaskSet,
    grounder: "Grounder",
    *,
    k: int = DEFAULT_K,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    counts: tuple[int, int] = (10000, 2500),
    seed: int = 0,
    include_none: bool = True,
) -> list[TuningSample]:
    """Export shuffled multiple-choice tuning records from a training split.

    Positives are kept only when some top-k candidate already overlaps
    the ground truth (the sample must be answerable); negatives teach
    rejection and require the None option. Requested counts beyond the
    eligible pool shrink to it with a warning. Output is deterministic
    for a given seed: per-task shuffles are keyed by (seed, task id) and
    oversampling draws from file order with a seeded RNG.
    """
    want_pos, want_neg = counts
    if want_pos < 0 or want_neg < 0:
        raise ValueError(f"counts must be non-negative, got {counts}")
    if want_neg > 0 and not include_none:
        raise ValueError("negative samples require the None option")

    eligible: dict[str, tuple[RecTask, CandidateSet]] = {}
    pos_ids: list[str] = []
    neg_ids: list[str] = []
    for task in ts.tasks:
        grounding = grounder.ground(image_ref(task), task.expression)
        cs = generate_candidates(grounding.detections, k=k, nms_thr=nms_threshold)
        if task.is_positive:
            if task.gt_box is not None and candidate_hit(cs, task.gt_box):
                eligible[task.id] = (task, cs)
                pos_ids.append(task.id)
        else:
            eligible[task.id] = (task, cs)
            neg_ids.append(task.id)

    chosen: list[str] = []
    for ids, want, kind in ((pos_ids, want_pos, "positive"), (neg_ids, want_neg, "negative")):
        if want > len(ids):
            logger.warning(
                "requested %d %s samples but only %d eligible; exporting all",
                want,
                kind,
                len(ids),
            )
            chosen.extend(ids)
        else:
            chosen.extend(_sample_rng(seed, f"select:{kind}").sample(ids, want))

    chosen_set = set(chosen)
    samples = [
        _build_sample(task, cs, seed, include_none)
        for task_id, (task, cs) in eligible.items()
        if task_id in chosen_set
    ]
    return samples


def save_tuning(samples: Iterable[TuningSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for sample in samples:
            handle.write(json.dumps(sample.to_dict(), ensure_ascii=False))
            handle.write("\n")


def load_tuning(path: str | Path) -> list[TuningSample]:
    samples = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                samples.append(TuningSample.from_dict(json.loads(line)))
    return samples
