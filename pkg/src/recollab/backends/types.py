"""Shared backend types: results, wire parsing, and role protocols.

Backends fill four roles. A target extractor names the referred object in
an expression. A detector proposes boxes for a named object class. A
grounder (specialist or generative) localizes a full expression. A
selector answers a multiple-choice prompt over candidate boxes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence, runtime_checkable

from ..datamodel import ImageRef
from ..geometry import BBox, Detection, box_to_pixels, round_half_up


class BackendError(Exception):
    """Backend call failed after retries, or returned an unusable payload."""


class FixtureMissError(BackendError):
    """Replay store has no recording for the requested (role, image, query)."""


@dataclass(frozen=True)
class GroundingResult:
    """Detector or grounder output: detections sorted by descending score."""

    detections: tuple[Detection, ...]
    query: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "detections", tuple(self.detections))
        scores = [d.score for d in self.detections]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("detections must be sorted by descending score")

    def best(self) -> Detection | None:
        return self.detections[0] if self.detections else None

    def above(self, threshold: float) -> tuple[Detection, ...]:
        return tuple(d for d in self.detections if d.score >= threshold)


@dataclass(frozen=True)
class GenerativeGrounding:
    """One autoregressive localization answer.

    ``box`` is absent when the reply contains no usable coordinates;
    ``malformed`` additionally marks replies that looked like coordinates
    but failed validation. A present box always carries the per-coordinate
    token probabilities it was decoded from.
    """

    raw_text: str
    box: BBox | None = None
    coordinate_token_probs: tuple[float, ...] = ()
    malformed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "coordinate_token_probs", tuple(self.coordinate_token_probs)
        )
        for p in self.coordinate_token_probs:
            if not 0.0 < p <= 1.0:
                raise ValueError(f"token probability out of (0, 1]: {p}")
        if self.box is not None and not self.coordinate_token_probs:
            raise ValueError("a present box requires coordinate token probabilities")


@dataclass(frozen=True)
class SelectionResult:
    """Selector answer: the chosen option label and its token probability."""

    label: str
    label_prob: float
    raw_text: str = ""
    offered: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.label_prob <= 1.0:
            raise ValueError(f"selection probability out of (0, 1]: {self.label_prob}")
        if self.offered and self.label not in self.offered:
            raise ValueError(f"label {self.label!r} not among offered {self.offered}")


@runtime_checkable
class TargetExtractor(Protocol):
    def extract(self, expression: str) -> str: ...


@runtime_checkable
class Detector(Protocol):
    def detect(self, image: ImageRef, class_name: str) -> GroundingResult: ...


@runtime_checkable
class Grounder(Protocol):
    def ground(self, image: ImageRef, expression: str) -> GroundingResult: ...


@runtime_checkable
class MllmGrounder(Protocol):
    def ground_generative(self, image: ImageRef, prompt: str) -> GenerativeGrounding: ...


@runtime_checkable
class Selector(Protocol):
    def select(self, image: ImageRef, prompt: str, offered: Sequence[str]) -> SelectionResult: ...


_COORD_BOX = re.compile(
    r"\[\[\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,"
    r"\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\]\]"
)


def parse_coordinate_box(text: str) -> tuple[BBox | None, bool]:
    """Extract the first ``[[x0, y0, x1, y1]]`` group from generated text.

    Returns ``(box, malformed)``. ``malformed`` is True when a coordinate
    group is present but unusable (inverted corners, non-finite values);
    text with no coordinate group at all is not malformed, just boxless.
    """
    match = _COORD_BOX.search(text)
    if match is None:
        return None, False
    values = [float(g) for g in match.groups()]
    try:
        return BBox(*values), False
    except ValueError:
        return None, True


def derive_confidence(token_probs: Sequence[float]) -> float | None:
    """Geometric mean of coordinate token probabilities.

    The geometric mean keeps confidences comparable across answers decoded
    into different token counts. Returns None when there are no tokens.
    """
    probs = list(token_probs)
    if not probs:
        return None
    for p in probs:
        if not 0.0 < p <= 1.0:
            raise ValueError(f"token probability out of (0, 1]: {p}")
    return math.exp(math.fsum(math.log(p) for p in probs) / len(probs))


def scale_box(box: BBox, *, from_size: tuple[int, int], to_size: tuple[int, int]) -> BBox:
    """Rescale box coordinates between coordinate spaces (e.g. 0-1000 grid)."""
    fw, fh = from_size
    tw, th = to_size
    if fw <= 0 or fh <= 0 or tw <= 0 or th <= 0:
        raise ValueError("coordinate space sizes must be positive")
    sx = tw / fw
    sy = th / fh
    return BBox(box.x0 * sx, box.y0 * sy, box.x1 * sx, box.y1 * sy)


def detections_from_payload(payload: Mapping[str, object], query: str = "") -> GroundingResult:
    """Build a GroundingResult from a decoded detection JSON payload.

    Expected shape: ``{"detections": [{"box": [x0,y0,x1,y1], "score": s,
    "token_scores": [{"start": i, "end": j, "score": s}, ...]}, ...]}``.
    Detections are re-sorted by descending score; ties keep payload order.
    """
    raw = payload.get("detections")
    if not isinstance(raw, list):
        raise BackendError("detection payload missing 'detections' list")
    dets: list[Detection] = []
    for entry in raw:
        if not isinstance(entry, Mapping):
            raise BackendError("detection entry is not an object")
        try:
            box = BBox.from_list(entry["box"])
            score = float(entry["score"])
            token_scores = tuple(
                _token_score_from(ts) for ts in entry.get("token_scores", ())
            )
            dets.append(Detection(box=box, score=score, token_scores=token_scores))
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"bad detection entry: {exc}") from exc
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return GroundingResult(detections=tuple(dets[i] for i in order), query=query)


def _token_score_from(entry: object):
    from ..geometry import TokenSpanScore

    if not isinstance(entry, Mapping):
        raise ValueError("token score entry is not an object")
    return TokenSpanScore(
        start=int(entry["start"]), end=int(entry["end"]), score=float(entry["score"])
    )
