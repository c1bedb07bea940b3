"""State-based evaluation.

A turn is scored by comparing what changed between two consecutive truth snapshots with
what changed between the agent's snapshots for the same turn:

- F1 positive: did the agent change the attributes that had to change?
- F1 negative: did it leave the other attributes alone?
- accuracy: of the attributes that had to change, how many ended at the right value
  (or moved in the right direction, for attributes scored by trend)?

Rule-based call matching, the auto-vs-expert error rate and Jensen-Shannon divergence
live here too.
"""

import json
import logging
from dataclasses import dataclass, field
from statistics import fmean
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .calls import ApiCall
from .errors import MetricError, TrendError
from .state import Value, WorldSnapshot, classify_trend, diff_snapshots, is_numeric, values_equal

logger = logging.getLogger(__name__)

METRIC_NAMES = ("f1_positive", "f1_negative", "accuracy")


# ---------------------------------------------------------------------------
# change sets and counters


@dataclass(frozen=True)
class ChangeSets:
    should_change: frozenset
    should_unchange: frozenset
    model_changed: frozenset
    # path -> (before, after)
    truth_values: Mapping[str, Tuple[Value, Value]] = field(default_factory=dict)
    model_values: Mapping[str, Tuple[Value, Value]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.should_change & self.should_unchange:
            raise MetricError("a path cannot both change and stay unchanged")

    @property
    def all_paths(self) -> frozenset:
        return self.should_change | self.should_unchange


def _pairs(before: WorldSnapshot, after: WorldSnapshot) -> Dict[str, Tuple[Value, Value]]:
    old, new = before.values(), after.values()
    return {path: (old[path], new[path]) for path in old}


def compute_change_sets(
    truth_prev: WorldSnapshot,
    truth_next: WorldSnapshot,
    model_prev: WorldSnapshot,
    model_next: WorldSnapshot,
) -> ChangeSets:
    """
    Raises:
        MetricError: If the four snapshots do not cover the same devices
    """
    device_sets = {s.device_ids for s in (truth_prev, truth_next, model_prev, model_next)}
    if len(device_sets) != 1:
        union = frozenset().union(*device_sets)
        common = frozenset.intersection(*device_sets)
        raise MetricError(f"snapshots cover different devices: {sorted(union - common)}")

    truth = diff_snapshots(truth_prev, truth_next)
    model = diff_snapshots(model_prev, model_next)
    return ChangeSets(
        should_change=truth.changed_paths,
        should_unchange=truth.unchanged,
        model_changed=model.changed_paths,
        truth_values=_pairs(truth_prev, truth_next),
        model_values=_pairs(model_prev, model_next),
    )


@dataclass(frozen=True)
class MetricCounters:
    TP: int
    FP: int
    negative_TP: int
    negative_FP: int
    total_should_changed: int
    total_should_unchanged: int
    N_correct: int
    N_total: int

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if not isinstance(value, int) or value < 0:
                raise MetricError(f"{name} must be a non-negative integer, got {value!r}")
        if self.TP > self.total_should_changed:
            raise MetricError("TP exceeds total_should_changed")
        if self.negative_TP > self.total_should_unchanged:
            raise MetricError("negative_TP exceeds total_should_unchanged")
        if self.N_correct > self.N_total:
            raise MetricError("N_correct exceeds N_total")
        if self.N_total != self.total_should_changed:
            raise MetricError("N_total must equal total_should_changed")

    @classmethod
    def from_change_sets(
        cls, change_sets: ChangeSets, trend_scored: Iterable[str] = ()
    ) -> "MetricCounters":
        """
        Count a turn.

        ``negative_FP`` counts attributes that should have been preserved but were changed,
        so an agent that changes nothing keeps a perfect F1 negative.
        """
        should_change = change_sets.should_change
        should_unchange = change_sets.should_unchange
        model_changed = change_sets.model_changed
        return cls(
            TP=len(should_change & model_changed),
            FP=len(should_unchange & model_changed),
            negative_TP=len(should_unchange - model_changed),
            negative_FP=len(should_unchange & model_changed),
            total_should_changed=len(should_change),
            total_should_unchanged=len(should_unchange),
            N_correct=_count_correct(change_sets, frozenset(trend_scored)),
            N_total=len(should_change),
        )

    def to_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


def _harmonic(tp: int, attempted: int, total: int) -> float:
    # zero denominators score 0
    precision = tp / attempted if attempted else 0.0
    recall = tp / total if total else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_positive(counters: MetricCounters) -> float:
    return _harmonic(counters.TP, counters.TP + counters.FP, counters.total_should_changed)


def f1_negative(counters: MetricCounters) -> float:
    return _harmonic(
        counters.negative_TP,
        counters.negative_TP + counters.negative_FP,
        counters.total_should_unchanged,
    )


def _is_correct(path: str, change_sets: ChangeSets, trend_scored: frozenset) -> bool:
    if path not in change_sets.model_changed:
        return False
    truth_before, truth_after = change_sets.truth_values[path]
    model_before, model_after = change_sets.model_values[path]
    if path in trend_scored and is_numeric(truth_before) and is_numeric(truth_after):
        try:
            return classify_trend(model_before, model_after) == classify_trend(truth_before, truth_after)
        except TrendError:
            return False
    return values_equal(model_after, truth_after)


def _count_correct(change_sets: ChangeSets, trend_scored: frozenset) -> int:
    return sum(1 for path in change_sets.should_change if _is_correct(path, change_sets, trend_scored))


def accuracy(change_sets: ChangeSets, trend_scored: Iterable[str] = ()) -> float:
    """
    Share of required changes the agent got right.

    A required change the agent never made counts as incorrect.

    Raises:
        MetricError: If nothing had to change
    """
    total = len(change_sets.should_change)
    if total == 0:
        raise MetricError("accuracy is undefined for a turn with no required change")
    return _count_correct(change_sets, frozenset(trend_scored)) / total


# ---------------------------------------------------------------------------
# rule-based comparison and error rate


def _calls_equal(left: ApiCall, right: ApiCall) -> bool:
    if left.api_name != right.api_name or set(left.args) != set(right.args):
        return False
    return all(values_equal(left.args[key], right.args[key]) for key in left.args)


def rule_based_evaluate(expected: Sequence[ApiCall], produced: Sequence[ApiCall]) -> bool:
    """Exact match of call count, order, API names and argument maps."""
    if len(expected) != len(produced):
        return False
    return all(_calls_equal(a, b) for a, b in zip(expected, produced))


def error_rate(auto: Sequence[bool], expert: Sequence[bool]) -> float:
    """
    Share of items where the automatic verdict disagrees with the expert label.

    Raises:
        MetricError: If the vectors are empty or differ in length
    """
    if len(auto) != len(expert):
        raise MetricError(f"label vectors differ in length: {len(auto)} != {len(expert)}")
    if not auto:
        raise MetricError("error rate needs at least one label")
    tp = sum(1 for a, e in zip(auto, expert) if a and e)
    tn = sum(1 for a, e in zip(auto, expert) if not a and not e)
    fp = sum(1 for a, e in zip(auto, expert) if a and not e)
    fn = sum(1 for a, e in zip(auto, expert) if not a and e)
    return (fp + fn) / (tp + tn + fp + fn)


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class Distribution:
    """Probability vector over an ordered, finite label set."""

    labels: Tuple[str, ...]
    probabilities: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.probabilities):
            raise MetricError("labels and probabilities differ in length")
        if len(set(self.labels)) != len(self.labels):
            raise MetricError("labels must be unique")
        p = np.asarray(self.probabilities, dtype=float)
        if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
            raise MetricError("probabilities must be finite and non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise MetricError(f"probabilities sum to {float(p.sum())!r}, not 1")

    @classmethod
    def from_counts(cls, counts: Mapping[str, float]) -> "Distribution":
        """Normalize label counts; labels are sorted."""
        labels = tuple(sorted(counts))
        values = np.asarray([counts[label] for label in labels], dtype=float)
        total = values.sum()
        if total <= 0:
            raise MetricError("counts must have a positive total")
        return cls(labels, tuple(float(v) for v in values / total))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probabilities, dtype=float)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd(p: Distribution, q: Distribution) -> float:
    """
    Jensen-Shannon divergence in nats; bounded by ln 2.

    Raises:
        MetricError: If the distributions are over different label sets
    """
    if p.labels != q.labels:
        raise MetricError(f"distributions have different supports: {p.labels} vs {q.labels}")
    a, b = p.as_array(), q.as_array()
    m = 0.5 * (a + b)
    value = 0.5 * _kl(a, m) + 0.5 * _kl(b, m)
    return float(min(max(value, 0.0), np.log(2)))


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class TurnReport:
    scenario_id: str
    turn_index: int
    domain: str
    category: str
    f1_positive: float
    f1_negative: float
    accuracy: float
    counters: Optional[MetricCounters] = None
    failed: bool = False

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "scenario_id": self.scenario_id,
            "turn": self.turn_index,
            "domain": self.domain,
            "category": self.category,
            "f1_positive": self.f1_positive,
            "f1_negative": self.f1_negative,
            "accuracy": self.accuracy,
            "failed": self.failed,
        }
        if self.counters is not None:
            data["counters"] = self.counters.to_dict()
        return data


def evaluate_turn(
    truth_prev: WorldSnapshot,
    truth_next: WorldSnapshot,
    model_prev: WorldSnapshot,
    model_next: WorldSnapshot,
    trend_scored: Iterable[str] = (),
    scenario_id: str = "",
    turn_index: int = 0,
    domain: str = "",
    category: str = "",
    failed: bool = False,
) -> TurnReport:
    trend_scored = frozenset(trend_scored)
    change_sets = compute_change_sets(truth_prev, truth_next, model_prev, model_next)
    counters = MetricCounters.from_change_sets(change_sets, trend_scored)
    return TurnReport(
        scenario_id=scenario_id,
        turn_index=turn_index,
        domain=domain,
        category=category,
        f1_positive=f1_positive(counters),
        f1_negative=f1_negative(counters),
        accuracy=accuracy(change_sets, trend_scored),
        counters=counters,
        failed=failed,
    )


def evaluate_trace(
    truth_states: Sequence[WorldSnapshot],
    model_states: Sequence[WorldSnapshot],
    trend_scored: Sequence[Iterable[str]] = (),
    scenario_id: str = "",
    domain: str = "",
    category: str = "",
    failed_turns: Iterable[int] = (),
) -> List[TurnReport]:
    """
    Score every turn of a trace. Both traces start with the initial state.

    Raises:
        MetricError: If the traces differ in length or have no turn
    """
    if len(truth_states) != len(model_states):
        raise MetricError(
            f"truth trace has {len(truth_states)} states, model trace {len(model_states)}"
        )
    if len(truth_states) < 2:
        raise MetricError("a trace needs an initial state and at least one turn")
    failed = set(failed_turns)
    reports = []
    for i in range(len(truth_states) - 1):
        trends = trend_scored[i] if i < len(trend_scored) else ()
        reports.append(
            evaluate_turn(
                truth_states[i], truth_states[i + 1], model_states[i], model_states[i + 1],
                trends, scenario_id, i, domain, category, i in failed,
            )
        )
    return reports


@dataclass(frozen=True)
class MetricSummary:
    turns: int
    f1_positive: float
    f1_negative: float
    accuracy: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "turns": self.turns,
            "f1_positive": self.f1_positive,
            "f1_negative": self.f1_negative,
            "accuracy": self.accuracy,
        }


def _summarize(reports: Sequence[TurnReport]) -> MetricSummary:
    return MetricSummary(
        turns=len(reports),
        f1_positive=fmean(r.f1_positive for r in reports),
        f1_negative=fmean(r.f1_negative for r in reports),
        accuracy=fmean(r.accuracy for r in reports),
    )


def _rollup(reports: Sequence[TurnReport], key: str) -> Dict[str, MetricSummary]:
    groups: Dict[str, List[TurnReport]] = {}
    for report in reports:
        groups.setdefault(getattr(report, key) or "unknown", []).append(report)
    return {name: _summarize(groups[name]) for name in sorted(groups)}


@dataclass(frozen=True)
class MetricReport:
    overall: MetricSummary
    per_domain: Mapping[str, MetricSummary]
    per_category: Mapping[str, MetricSummary]
    turns: Tuple[TurnReport, ...]

    @property
    def f1_positive(self) -> float:
        return self.overall.f1_positive

    @property
    def f1_negative(self) -> float:
        return self.overall.f1_negative

    @property
    def accuracy(self) -> float:
        return self.overall.accuracy

    @property
    def failed_turns(self) -> int:
        return sum(1 for turn in self.turns if turn.failed)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "overall": self.overall.to_dict(),
            "failed_turns": self.failed_turns,
            "per_domain": {k: v.to_dict() for k, v in self.per_domain.items()},
            "per_category": {k: v.to_dict() for k, v in self.per_category.items()},
            "turns": [turn.to_dict() for turn in self.turns],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def aggregate(turn_reports: Iterable[TurnReport]) -> MetricReport:
    """
    Unweighted mean of each metric over turns, with per-domain and per-category rollups.

    Raises:
        MetricError: If there are no turns
    """
    reports = tuple(turn_reports)
    if not reports:
        raise MetricError("cannot aggregate an empty set of turns")
    return MetricReport(
        overall=_summarize(reports),
        per_domain=_rollup(reports, "domain"),
        per_category=_rollup(reports, "category"),
        turns=reports,
    )


def report_from_dict(data: Mapping[str, Any]) -> MetricReport:
    """
    Rebuild a report from ``MetricReport.to_dict`` output, re-aggregating its turns.

    Raises:
        MetricError: If the document has no usable turns
    """
    try:
        turns = [
            TurnReport(
                scenario_id=item["scenario_id"],
                turn_index=item["turn"],
                domain=item.get("domain", ""),
                category=item.get("category", ""),
                f1_positive=float(item["f1_positive"]),
                f1_negative=float(item["f1_negative"]),
                accuracy=float(item["accuracy"]),
                counters=MetricCounters(**item["counters"]) if "counters" in item else None,
                failed=bool(item.get("failed", False)),
            )
            for item in data["turns"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise MetricError(f"malformed report document: {e}") from e
    return aggregate(turns)


_HEADER = "{:<14} {:>6} {:>8} {:>8} {:>8}"
_LINE = "{:<14} {:>6d} {:>8.4f} {:>8.4f} {:>8.4f}"


def render_table(report: MetricReport) -> str:
    """Aligned text table: overall, then per-domain and per-category rows."""
    lines = [_HEADER.format("group", "turns", "F1+", "F1-", "Acc")]

    def row(name: str, s: MetricSummary) -> str:
        return _LINE.format(name, s.turns, s.f1_positive, s.f1_negative, s.accuracy)

    lines.append(row("overall", report.overall))
    for title, groups in (("domain", report.per_domain), ("category", report.per_category)):
        lines.append("")
        lines.append(f"by {title}")
        lines.extend(row(name, summary) for name, summary in groups.items())
    if report.failed_turns:
        lines.append("")
        lines.append(f"failed turns: {report.failed_turns}")
    return "\n".join(lines) + "\n"
