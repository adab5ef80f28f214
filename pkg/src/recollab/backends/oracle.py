"""Oracle selector: always picks the offered option closest to ground truth.

A diagnostic backend, not a model. Running candidate selection with it
measures the candidate-generation ceiling: the score is exactly the
fraction of tasks whose offered options contain a good-enough box.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from ..geometry import BBox, iou
from .types import ImageRef, SelectionResult

_OPTION_LINE = re.compile(
    r"^\s*([A-Z])\.\s*\[\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]\]\s*$"
)


def parse_prompt_options(prompt: str) -> dict[str, BBox]:
    """Recover the label -> box map from rendered option lines."""
    options: dict[str, BBox] = {}
    for line in prompt.splitlines():
        match = _OPTION_LINE.match(line)
        if match:
            label = match.group(1)
            coords = [float(g) for g in match.groups()[1:]]
            options[label] = BBox(*coords)
    return options


@dataclass(frozen=True)
class OracleSelector:
    """Selects the max-IoU option against a per-image ground-truth table.

    Images without an entry (negatives) get the rejection label when one
    is offered. Images must map 1:1 to tasks for the answer to be exact.
    """

    gt_by_image: Mapping[str, BBox]

    def select(self, image: ImageRef, prompt: str, offered: Sequence[str]) -> SelectionResult:
        if not offered:
            raise ValueError("no option labels offered")
        options = parse_prompt_options(prompt)
        box_labels = [label for label in offered if label in options]
        none_labels = [label for label in offered if label not in options]
        gt = self.gt_by_image.get(image.image_id)
        if gt is None or not box_labels:
            label = none_labels[-1] if none_labels else offered[-1]
        else:
            label = max(box_labels, key=lambda lb: iou(options[lb], gt))
        return SelectionResult(
            label=label, label_prob=1.0, raw_text=label, offered=tuple(offered)
        )
