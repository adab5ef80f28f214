"""Slow-fast adaptation: route each task to a specialist or an MLLM.

The router counts how many instances of the extracted target category a
detector finds above a confidence threshold. Exactly one instance means
the specialist's top box is trustworthy (fast pathway); zero or several
mean the task needs the MLLM's reasoning (slow pathway). Both pathways
can sharpen attention on the target: the fast side by re-scoring
proposals on target-token similarities, the slow side by appending a
focus clause to the grounding prompt.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .datamodel import ImageRef, RecTask, image_ref
from .geometry import Detection
from .prediction import Pathway, Prediction, RouteDecision, RouteLevel

if TYPE_CHECKING:  # pragma: no cover - annotations only
    from .backends import BackendBundle, Detector, GroundingResult

logger = logging.getLogger(__name__)

DEFAULT_ROUTE_THRESHOLD = 0.2
DEFAULT_GROUNDING_PROMPT = "Where is {expression}? answer in [[x0, y0, x1, y1]] format."
DEFAULT_FOCUS_SUFFIX = ", please focus on the {target}"


@dataclass(frozen=True)
class SfaParams:
    """Routing threshold, focus switches, and the prompt templates.

    ``force_level`` bypasses routing entirely (no RouteDecision is made);
    it exists for baseline comparisons, not normal runs.
    """

    threshold: float = DEFAULT_ROUTE_THRESHOLD
    focus: bool = True
    grounding_prompt: str = DEFAULT_GROUNDING_PROMPT
    focus_suffix: str = DEFAULT_FOCUS_SUFFIX
    force_level: RouteLevel | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"routing threshold out of [0, 1]: {self.threshold}")


def assess_route(
    image: ImageRef,
    target: str,
    detector: "Detector",
    threshold: float = DEFAULT_ROUTE_THRESHOLD,
) -> RouteDecision:
    """Count detections of the target category at or above the threshold.

    A count of exactly one routes fast; zero (nothing to trust) or two or
    more (ambiguity to resolve) route slow.
    """
    if not target:
        raise ValueError("empty target phrase")
    result = detector.detect(image, target)
    count = sum(1 for det in result.detections if det.score >= threshold)
    level = RouteLevel.FAST if count == 1 else RouteLevel.SLOW
    return RouteDecision(
        level=level, detection_count=count, target=target, threshold_used=threshold
    )


def build_focus_prompt(expression: str, target: str, params: SfaParams = SfaParams()) -> str:
    """Grounding prompt for the MLLM, with the focus clause when enabled."""
    if not expression:
        raise ValueError("empty expression")
    base = params.grounding_prompt.format(expression=expression)
    if not params.focus:
        return base
    if not target:
        raise ValueError("empty target phrase")
    return base + params.focus_suffix.format(target=target)


def find_target_span(query: str, target: str) -> tuple[int, int] | None:
    """Character span of the target phrase inside the query text."""
    if not target:
        return None
    match = re.search(r"\b" + re.escape(target) + r"\b", query, re.IGNORECASE)
    if match:
        return match.start(), match.end()
    index = query.lower().find(target.lower())
    if index >= 0:
        return index, index + len(target)
    return None


def target_focus_select(result: "GroundingResult", span: tuple[int, int] | None) -> Detection:
    """Pick the proposal whose target-token similarity is highest.

    Each proposal's aggregate is the max token score over spans
    overlapping the target; ties fall back to overall score order. When
    the span is unknown or any proposal lacks token scores there, the
    overall-score argmax is returned and the fallback is logged.
    """
    dets = result.detections
    if not dets:
        raise ValueError("empty grounding result")
    if span is None:
        logger.info("target span not found in query %r; using overall argmax", result.query)
        return dets[0]
    aggregates: list[float | None] = []
    for det in dets:
        overlapping = [
            ts.score for ts in det.token_scores if ts.overlaps(span[0], span[1])
        ]
        aggregates.append(max(overlapping) if overlapping else None)
    if any(agg is None for agg in aggregates):
        logger.info("token scores absent for target span; using overall argmax")
        return dets[0]
    # dets are score-sorted, so max() on (aggregate, -index) breaks
    # aggregate ties by overall score then input order
    best = max(range(len(dets)), key=lambda i: (aggregates[i], -i))
    return dets[best]


def run_sfa(task: RecTask, handles: "BackendBundle", params: SfaParams = SfaParams()) -> Prediction:
    """Route one task and ground it on the chosen pathway.

    Backend failures become miss predictions (box absent, confidence 0,
    error note) so batch runs skip the task and continue. Failures before
    routing completes are attributed to the slow pathway, the same
    conservative default the zero-detection rule uses.
    """
    from .backends import BackendError, derive_confidence

    image = image_ref(task)
    decision: RouteDecision | None = None
    try:
        target = ""
        if params.force_level is None or params.focus:
            target = handles.require("extractor").extract(task.expression)
        if params.force_level is None:
            decision = assess_route(image, target, handles.require("detector"), params.threshold)
            level = decision.level
        else:
            level = params.force_level

        if level is RouteLevel.FAST:
            grounding = handles.require("grounder").ground(image, task.expression)
            if not grounding.detections:
                return Prediction(
                    task_id=task.id,
                    box=None,
                    confidence=0.0,
                    pathway=Pathway.FAST,
                    decision=decision,
                    note="grounder returned no detections",
                )
            if params.focus:
                det = target_focus_select(grounding, find_target_span(task.expression, target))
            else:
                det = grounding.detections[0]
            if det.score <= 0.0:
                return Prediction(
                    task_id=task.id,
                    box=None,
                    confidence=0.0,
                    pathway=Pathway.FAST,
                    decision=decision,
                    note="selected detection has zero confidence",
                )
            return Prediction(
                task_id=task.id,
                box=det.box,
                confidence=det.score,
                pathway=Pathway.FAST,
                decision=decision,
            )

        prompt = build_focus_prompt(task.expression, target, params)
        answer = handles.require("mllm").ground_generative(image, prompt)
        if answer.box is None:
            note = (
                "malformed coordinates in generative answer"
                if answer.malformed
                else "no coordinates in generative answer"
            )
            return Prediction(
                task_id=task.id,
                box=None,
                confidence=0.0,
                pathway=Pathway.SLOW,
                decision=decision,
                raw={"text": answer.raw_text},
                note=note,
            )
        confidence = derive_confidence(answer.coordinate_token_probs)
        assert confidence is not None
        return Prediction(
            task_id=task.id,
            box=answer.box,
            confidence=confidence,
            pathway=Pathway.SLOW,
            decision=decision,
            raw={"text": answer.raw_text},
        )
    except BackendError as exc:
        logger.warning("SFA backend failure on task %s: %s", task.id, exc)
        pathway = Pathway.SLOW
        if decision is not None:
            pathway = Pathway.FAST if decision.level is RouteLevel.FAST else Pathway.SLOW
        elif params.force_level is RouteLevel.FAST:
            pathway = Pathway.FAST
        return Prediction(
            task_id=task.id,
            box=None,
            confidence=0.0,
            pathway=pathway,
            decision=decision,
            note=f"backend failure: {exc}",
        )
