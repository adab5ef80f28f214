"""Evaluation protocol and report assembly.

Three metrics, all ratios of per-item indicators:

* Precision@k over positive tasks: does some top-k box beat IoU 0.5
  against ground truth (strictly greater).
* Recall@k over negative-positive pairs: pool both members' ranked
  boxes, sort by confidence, and ask whether a good box for the
  positive survives in the top k. Boxes predicted on the negative have
  no ground truth, so their IoU is defined as 0.
* AUROC over confidences: the probability a positive sample outranks a
  negative one, ties counted half.

The report breaks these down by difficulty and negative taxonomy, adds
pathway counts and cost units, and states every cell's denominator.
"""

from __future__ import annotations

import logging
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .datamodel import Difficulty, EvalPair, Polarity, RecTask, TaskSet, pair_negatives
from .geometry import BBox, iou
from .prediction import Prediction

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5
DEFAULT_KS = (1, 5)

COST_PROVENANCE = (
    "cost units are supplied by configuration, not measured; totals are "
    "arithmetic over those inputs"
)


@dataclass(frozen=True)
class ScoredPrediction:
    """A prediction plus every box the model would offer, best first.

    Single-output pipelines carry one ranked box (or none for a
    rejection); box-regression baselines carry their full ranked list.
    """

    prediction: Prediction
    ranked_boxes: tuple[tuple[BBox, float], ...]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "ranked_boxes", tuple((box, float(conf)) for box, conf in self.ranked_boxes)
        )
        confs = [conf for _, conf in self.ranked_boxes]
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise ValueError("ranked_boxes confidences must be non-increasing")

    @classmethod
    def single(cls, prediction: Prediction) -> ScoredPrediction:
        if prediction.box is None:
            return cls(prediction=prediction, ranked_boxes=())
        return cls(
            prediction=prediction, ranked_boxes=((prediction.box, prediction.confidence),)
        )

    def to_dict(self) -> dict[str, Any]:
        record = self.prediction.to_dict()
        record["ranked_boxes"] = [
            {"box": box.as_list(), "confidence": conf} for box, conf in self.ranked_boxes
        ]
        return record

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ScoredPrediction:
        return cls(
            prediction=Prediction.from_dict(dict(data)),
            ranked_boxes=tuple(
                (BBox.from_list(entry["box"]), float(entry["confidence"]))
                for entry in data.get("ranked_boxes", ())
            ),
        )


def _hits_top_k(sp: ScoredPrediction | None, gt: BBox, k: int, iou_thr: float) -> bool:
    if sp is None:
        return False
    return any(iou(box, gt) > iou_thr for box, _ in sp.ranked_boxes[:k])


def precision_at_k(
    preds: Mapping[str, ScoredPrediction],
    ts: TaskSet,
    k: int,
    iou_thr: float = IOU_THRESHOLD,
) -> float:
    """Fraction of positives with a top-k box strictly above the IoU bar."""
    positives = ts.positives()
    if not positives:
        raise ValueError("no positive tasks to score")
    hits = 0
    for task in positives:
        sp = preds.get(task.id)
        if sp is None:
            logger.warning("no prediction for positive task %s; counting a miss", task.id)
        assert task.gt_box is not None
        if _hits_top_k(sp, task.gt_box, k, iou_thr):
            hits += 1
    return hits / len(positives)


def _pair_hit(
    pair: EvalPair,
    preds: Mapping[str, ScoredPrediction],
    k: int,
    iou_thr: float,
) -> bool | None:
    """Top-k hit indicator for one pooled pair; None when a member is missing."""
    pos_sp = preds.get(pair.positive.id)
    neg_sp = preds.get(pair.negative.id)
    if pos_sp is None or neg_sp is None:
        return None
    gt = pair.positive.gt_box
    assert gt is not None
    # sort key: confidence desc, then positive-sample boxes, then input order
    pooled: list[tuple[float, int, int, float]] = []
    for idx, (box, conf) in enumerate(pos_sp.ranked_boxes):
        pooled.append((-conf, 0, idx, iou(box, gt)))
    for idx, (_, conf) in enumerate(neg_sp.ranked_boxes):
        pooled.append((-conf, 1, idx, 0.0))
    pooled.sort(key=lambda entry: entry[:3])
    return any(entry[3] > iou_thr for entry in pooled[:k])


def recall_at_k(
    pairs: Sequence[EvalPair],
    preds: Mapping[str, ScoredPrediction],
    k: int,
    iou_thr: float = IOU_THRESHOLD,
) -> float:
    """Hit fraction over pairs after pooling both members' ranked boxes."""
    hits = 0
    used = 0
    for pair in pairs:
        hit = _pair_hit(pair, preds, k, iou_thr)
        if hit is None:
            logger.warning(
                "pair (%s, %s) missing a prediction; dropped",
                pair.positive.id,
                pair.negative.id,
            )
            continue
        used += 1
        hits += hit
    if used == 0:
        raise ValueError("no scorable pairs")
    return hits / used


def _auroc_counts(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> tuple[int, int]:
    ordered = sorted(neg_scores)
    wins = 0
    ties = 0
    for score in pos_scores:
        lo = bisect_left(ordered, score)
        hi = bisect_right(ordered, score)
        wins += lo
        ties += hi - lo
    return wins, ties


def auroc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """P(pos > neg) + half P(pos = neg), by exact counting."""
    if not pos_scores or not neg_scores:
        raise ValueError("auroc undefined on empty score lists")
    wins, ties = _auroc_counts(pos_scores, neg_scores)
    return (wins + 0.5 * ties) / (len(pos_scores) * len(neg_scores))


@dataclass(frozen=True)
class Cell:
    """One report value with the evidence behind it."""

    value: float | None
    numerator: float | None
    denominator: int

    @property
    def present(self) -> bool:
        return self.value is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "value": self.value,
            "numerator": self.numerator,
            "denominator": self.denominator,
        }

    def render(self) -> str:
        if not self.present:
            return f"absent (n={self.denominator})"
        return f"{self.value:.4f} ({self._num_text()}/{self.denominator})"

    def _num_text(self) -> str:
        assert self.numerator is not None
        if self.numerator == int(self.numerator):
            return str(int(self.numerator))
        return f"{self.numerator:g}"


def _absent(denominator: int = 0) -> Cell:
    return Cell(value=None, numerator=None, denominator=denominator)


@dataclass(frozen=True)
class PathwayStats:
    """Task counts per pathway and the configured per-task cost units."""

    counts: Mapping[str, int]
    unit_costs: Mapping[str, float] = field(default_factory=dict)
    provenance: str = COST_PROVENANCE

    @property
    def total_tasks(self) -> int:
        return sum(self.counts.values())

    @property
    def total_cost(self) -> float:
        return sum(
            count * self.unit_costs.get(pathway, 0.0) for pathway, count in self.counts.items()
        )

    def share(self, pathway: str) -> float | None:
        total = self.total_tasks
        if total == 0:
            return None
        return self.counts.get(pathway, 0) / total

    def to_dict(self) -> dict[str, Any]:
        return {
            "counts": dict(self.counts),
            "unit_costs": dict(self.unit_costs),
            "total_tasks": self.total_tasks,
            "total_cost": self.total_cost,
            "provenance": self.provenance,
        }


@dataclass(frozen=True)
class EvalReport:
    """All metric cells, pathway stats, and run metadata."""

    precision: Mapping[int, Mapping[str, Cell]]
    recall: Mapping[int, Mapping[str, Cell]]
    auroc_cells: Mapping[str, Cell]
    pathways: PathwayStats
    metadata: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "precision_at_k": {
                str(k): {group: cell.to_dict() for group, cell in groups.items()}
                for k, groups in self.precision.items()
            },
            "recall_at_k": {
                str(k): {group: cell.to_dict() for group, cell in groups.items()}
                for k, groups in self.recall.items()
            },
            "auroc": {group: cell.to_dict() for group, cell in self.auroc_cells.items()},
            "pathways": self.pathways.to_dict(),
            "metadata": dict(self.metadata),
        }


def _precision_cell(
    preds: Mapping[str, ScoredPrediction],
    tasks: Sequence[RecTask],
    k: int,
    iou_thr: float,
) -> Cell:
    if not tasks:
        return _absent()
    hits = sum(
        1 for t in tasks if t.gt_box is not None and _hits_top_k(preds.get(t.id), t.gt_box, k, iou_thr)
    )
    return Cell(value=hits / len(tasks), numerator=hits, denominator=len(tasks))


def _recall_cell(
    preds: Mapping[str, ScoredPrediction],
    pairs: Sequence[EvalPair],
    k: int,
    iou_thr: float,
) -> Cell:
    indicators = [_pair_hit(pair, preds, k, iou_thr) for pair in pairs]
    usable = [ind for ind in indicators if ind is not None]
    if len(usable) < len(indicators):
        logger.warning("%d pairs dropped for missing predictions", len(indicators) - len(usable))
    if not usable:
        return _absent()
    hits = sum(usable)
    return Cell(value=hits / len(usable), numerator=hits, denominator=len(usable))


def _auroc_cell(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> Cell:
    pairs = len(pos_scores) * len(neg_scores)
    if pairs == 0:
        return _absent(pairs)
    wins, ties = _auroc_counts(pos_scores, neg_scores)
    numerator = wins + 0.5 * ties
    return Cell(value=numerator / pairs, numerator=numerator, denominator=pairs)


def _confidence(preds: Mapping[str, ScoredPrediction], task: RecTask) -> float:
    sp = preds.get(task.id)
    if sp is None:
        return 0.0
    return sp.prediction.confidence


def build_report(
    preds: Mapping[str, ScoredPrediction],
    ts: TaskSet,
    *,
    pairs: Sequence[EvalPair] | None = None,
    ks: Sequence[int] = DEFAULT_KS,
    unit_costs: Mapping[str, float] | None = None,
    metadata: Mapping[str, Any] | None = None,
    iou_thr: float = IOU_THRESHOLD,
) -> EvalReport:
    """Assemble every cell; groups with no members stay absent."""
    if pairs is None:
        pairs = pair_negatives(ts)

    positives = ts.positives()
    negatives = ts.negatives()

    precision: dict[int, dict[str, Cell]] = {}
    for k in ks:
        groups: dict[str, Cell] = {
            "overall": _precision_cell(preds, positives, k, iou_thr)
        }
        for level in Difficulty:
            members = [t for t in positives if t.difficulty is level]
            if members:
                groups[level.value] = _precision_cell(preds, members, k, iou_thr)
        precision[k] = groups

    recall: dict[int, dict[str, Cell]] = {}
    for k in ks:
        groups = {"overall": _recall_cell(preds, pairs, k, iou_thr)}
        by_kind: dict[str, list[EvalPair]] = {}
        for pair in pairs:
            kind = pair.negative.negative_kind
            if kind is not None:
                by_kind.setdefault(kind.key(), []).append(pair)
        for key in sorted(by_kind):
            groups[key] = _recall_cell(preds, by_kind[key], k, iou_thr)
        recall[k] = groups

    pos_scores = [_confidence(preds, t) for t in positives]
    auroc_cells: dict[str, Cell] = {
        "overall": _auroc_cell(pos_scores, [_confidence(preds, t) for t in negatives])
    }
    for polarity in (Polarity.NEGATIVE_EXPRESSION, Polarity.NEGATIVE_IMAGE):
        members = [t for t in negatives if t.polarity is polarity]
        if members:
            auroc_cells[polarity.value] = _auroc_cell(
                pos_scores, [_confidence(preds, t) for t in members]
            )
    by_kind_tasks: dict[str, list[RecTask]] = {}
    for task in negatives:
        if task.negative_kind is not None:
            by_kind_tasks.setdefault(task.negative_kind.key(), []).append(task)
    for key in sorted(by_kind_tasks):
        auroc_cells[key] = _auroc_cell(
            pos_scores, [_confidence(preds, t) for t in by_kind_tasks[key]]
        )

    counts: dict[str, int] = {}
    for sp in preds.values():
        counts[sp.prediction.pathway.value] = counts.get(sp.prediction.pathway.value, 0) + 1
    pathways = PathwayStats(counts=counts, unit_costs=dict(unit_costs or {}))

    return EvalReport(
        precision=precision,
        recall=recall,
        auroc_cells=auroc_cells,
        pathways=pathways,
        metadata=dict(metadata or {}),
    )


def render_text(report: EvalReport) -> str:
    """Human-readable tables; every value shows its denominator."""
    lines: list[str] = []

    lines.append("Precision@k over positive tasks")
    for k, groups in sorted(report.precision.items()):
        for group, cell in groups.items():
            lines.append(f"  P@{k:<2} {group:<24} {cell.render()}")

    lines.append("Recall@k over negative-positive pairs")
    for k, groups in sorted(report.recall.items()):
        for group, cell in groups.items():
            lines.append(f"  R@{k:<2} {group:<24} {cell.render()}")

    lines.append("AUROC (positive vs negative confidence ranking)")
    for group, cell in report.auroc_cells.items():
        lines.append(f"  {group:<29} {cell.render()}")

    lines.append("Pathways")
    stats = report.pathways
    for pathway in sorted(stats.counts):
        share = stats.share(pathway)
        share_text = f"{share:6.1%}" if share is not None else "   n/a"
        unit = stats.unit_costs.get(pathway, 0.0)
        cost = stats.counts[pathway] * unit
        lines.append(
            f"  {pathway:<10} tasks {stats.counts[pathway]:>6}  share {share_text}"
            f"  unit cost {unit:g}  cost {cost:g}"
        )
    lines.append(f"  total tasks {stats.total_tasks}  total cost {stats.total_cost:g}")
    lines.append(f"  note: {stats.provenance}")

    if report.metadata:
        lines.append("Run")
        for key in sorted(report.metadata):
            lines.append(f"  {key}: {report.metadata[key]}")
    return "\n".join(lines)
