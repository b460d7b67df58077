"""Group-wise detection metrics, Disparate Impact, Predictive Disparity and RRPD."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from fairwake.errors import DataError, DomainError, InsufficientGroupsError

THRESHOLD = 0.5
MIN_SUPPORT = 20
DI_SPLITS = ("train", "validation")

# user-facing attribute name -> Utterance field
ATTRIBUTE_FIELDS = {"sex": "sex", "age": "age_group", "age_group": "age_group", "accent": "accent"}


@dataclass(frozen=True)
class PredictionRecord:
    utterance_id: str
    window_index: int
    true_label: int  # 1 = wuw, 0 = unknown
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"score {self.score} for {self.utterance_id}/{self.window_index} outside [0, 1]")

    @property
    def predicted_label(self) -> int:
        return int(self.score >= THRESHOLD)


@dataclass
class GroupMetrics:
    attribute: str
    group: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    support: int
    n_windows: int
    n_speakers: int
    degenerate: bool = False
    excluded: bool = False
    reason: str = ""


@dataclass(frozen=True)
class DIEntry:
    attribute: str
    advantaged: str
    disadvantaged: str
    ratio: float


@dataclass
class AttributeReport:
    attribute: str
    groups: list[GroupMetrics]
    excluded: list[GroupMetrics]
    di_entries: list[DIEntry] = field(default_factory=list)
    di_extremal: DIEntry | None = None
    pd: float | None = None
    pd_pair: tuple[str, str] | None = None
    skipped_reason: str = ""
    rrpd: float | None = None
    baseline_pd: float | None = None


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float, bool]:
    """(precision, recall, f1, degenerate). Undefined ratios are reported as 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    degenerate = tp + fn == 0 and tp + fp == 0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1, degenerate


def _attr_field(attribute: str) -> str:
    try:
        return ATTRIBUTE_FIELDS[attribute]
    except KeyError:
        raise DataError(f"unknown attribute {attribute!r}; choose from {sorted(ATTRIBUTE_FIELDS)}") from None


def _index(manifest) -> dict:
    return {u.id: u for u in manifest}


def group_metrics(preds: Iterable[PredictionRecord], manifest, attribute: str,
                  min_support: int = MIN_SUPPORT) -> list[GroupMetrics]:
    fld = _attr_field(attribute)
    rows = _index(manifest)
    counts: dict[str, list[int]] = {}
    speakers: dict[str, set] = {}
    for rec in preds:
        u = rows.get(rec.utterance_id)
        if u is None:
            raise DataError(f"prediction for {rec.utterance_id!r} has no manifest row")
        g = str(getattr(u, fld))
        c = counts.setdefault(g, [0, 0, 0, 0])
        pred, true = rec.predicted_label, int(rec.true_label)
        c[0] += pred and true
        c[1] += pred and not true
        c[2] += (not pred) and true
        c[3] += (not pred) and not true
        speakers.setdefault(g, set()).add(u.speaker_id)
    out = []
    for g in sorted(counts):
        tp, fp, fn, tn = counts[g]
        p, r, f1, degenerate = f1_from_counts(tp, fp, fn)
        support = tp + fn
        m = GroupMetrics(attribute, g, tp, fp, fn, tn, p, r, f1, support, tp + fp + fn + tn,
                         len(speakers[g]), degenerate)
        if support < min_support:
            m.excluded = True
            m.reason = f"support {support} < min_support {min_support}"
        out.append(m)
    return out


def di_ratio(rate_disadvantaged: float, rate_advantaged: float) -> float:
    if rate_advantaged == 0:
        return 1.0 if rate_disadvantaged == 0 else float("inf")
    return rate_disadvantaged / rate_advantaged


def positive_rates(manifest, attribute: str, splits: Sequence[str] | None = DI_SPLITS) -> dict[str, float]:
    fld = _attr_field(attribute)
    tally: dict[str, list[int]] = {}
    for u in manifest:
        if getattr(u, "role", None) or u.label is None:
            continue
        if splits is not None and u.split not in splits:
            continue
        t = tally.setdefault(str(getattr(u, fld)), [0, 0])
        t[0] += u.label == "wuw"
        t[1] += 1
    return {g: pos / n for g, (pos, n) in sorted(tally.items()) if n > 0}


def disparate_impact(manifest, attribute: str, splits: Sequence[str] | None = DI_SPLITS,
                     rates: Mapping[str, float] | None = None) -> tuple[list[DIEntry], DIEntry | None]:
    """All group pairs with the higher-rate group as advantaged, plus the minimum-ratio pair."""
    if rates is None:
        rates = positive_rates(manifest, attribute, splits)
    entries = []
    for a, b in itertools.combinations(sorted(rates), 2):
        adv, dis = (a, b) if rates[a] >= rates[b] else (b, a)
        entries.append(DIEntry(attribute, adv, dis, di_ratio(rates[dis], rates[adv])))
    extremal = min(entries, key=lambda e: (e.ratio, e.advantaged, e.disadvantaged)) if entries else None
    return entries, extremal


def predictive_disparity(metrics: Sequence[GroupMetrics] | Mapping[str, float]) -> tuple[float, tuple[str, str]]:
    """Largest absolute F1 gap across retained groups; pair is (better, worse)."""
    if isinstance(metrics, Mapping):
        f1 = dict(metrics)
    else:
        f1 = {m.group: m.f1 for m in metrics if not m.excluded}
    if len(f1) < 2:
        raise InsufficientGroupsError(f"need at least 2 retained groups, got {len(f1)}")
    best = None
    for a, b in itertools.combinations(sorted(f1), 2):
        gap = abs(f1[a] - f1[b])
        pair = (a, b) if f1[a] >= f1[b] else (b, a)
        if best is None or gap > best[0] or (gap == best[0] and tuple(sorted(pair)) < tuple(sorted(best[1]))):
            best = (gap, pair)
    return best


def rrpd(pd_baseline: float, pd_technique: float) -> float:
    if not pd_baseline > 0:
        raise DomainError("RRPD undefined for a baseline PD of 0")
    # ratio form keeps rrpd(x, x) == 0 and rrpd(x, 0) == 100 exact
    return 100.0 * (1.0 - pd_technique / pd_baseline)


@dataclass
class FairnessReport:
    attributes: list[AttributeReport]
    min_support: int = MIN_SUPPORT
    threshold: float = THRESHOLD
    baseline_name: str | None = None

    def attribute(self, name: str) -> AttributeReport:
        for a in self.attributes:
            if a.attribute == name:
                return a
        raise KeyError(name)

    def to_dict(self) -> dict:
        attrs = {}
        for a in self.attributes:
            d = {
                "groups": [asdict(g) for g in a.groups],
                "excluded": [asdict(g) for g in a.excluded],
                "disparate_impact": {
                    "pairs": [asdict(e) for e in a.di_entries],
                    "extremal": asdict(a.di_extremal) if a.di_extremal else None,
                },
                "predictive_disparity": None if a.pd is None else {"value": a.pd, "pair": list(a.pd_pair)},
            }
            if a.skipped_reason:
                d["skipped_reason"] = a.skipped_reason
            if a.rrpd is not None or a.baseline_pd is not None:
                d["rrpd"] = {"percent": a.rrpd, "baseline_pd": a.baseline_pd}
            attrs[a.attribute] = d
        out = {"min_support": self.min_support, "threshold": self.threshold, "attributes": attrs}
        if self.baseline_name is not None:
            out["baseline"] = self.baseline_name
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def render_text(self) -> str:
        lines = [f"{'Group':<28}{'F1-score':>10}{'Support':>9}", "-" * 47]
        for a in self.attributes:
            for g in a.groups:
                lines.append(f"{g.group:<28}{g.f1:>10.4f}{g.support:>9d}")
            for g in a.excluded:
                lines.append(f"{g.group:<28}{'excluded':>10}{g.support:>9d}")
            lines.append("-" * 47)
        for a in self.attributes:
            val = "n/a" if a.pd is None else f"{a.pd:.4f}"
            lines.append(f"{'PD (' + a.attribute + ')':<28}{val:>19}")
        extremal = [a.di_extremal for a in self.attributes if a.di_extremal is not None]
        if extremal:
            lines += ["", format_di_table(extremal)]
        if any(a.rrpd is not None for a in self.attributes):
            lines += ["", f"RRPD vs {self.baseline_name or 'baseline'} (%)"]
            for a in self.attributes:
                val = "n/a" if a.rrpd is None else f"{a.rrpd:.2f}"
                lines.append(f"  {a.attribute:<10}{val:>10}")
        return "\n".join(lines) + "\n"


def format_di_table(entries: Sequence[DIEntry]) -> str:
    rows = [f"{'Attribute':<12}{'Advantaged':<26}{'Disadvantaged':<26}{'DI':>8}"]
    for e in entries:
        rows.append(f"{e.attribute.capitalize():<12}{e.advantaged:<26}{e.disadvantaged:<26}{e.ratio:>8.4f}")
    return "\n".join(rows)


def baseline_pds(baseline) -> dict[str, float]:
    """PD per attribute from a FairnessReport or its serialized dict."""
    if isinstance(baseline, FairnessReport):
        return {a.attribute: a.pd for a in baseline.attributes if a.pd is not None}
    out = {}
    for name, d in baseline.get("attributes", {}).items():
        pd = d.get("predictive_disparity")
        if pd is not None:
            out[name] = pd["value"]
    return out


def build_report(preds: Sequence[PredictionRecord], manifest, attributes: Sequence[str],
                 baseline_report=None, min_support: int = MIN_SUPPORT, baseline_name: str | None = None,
                 di_splits: Sequence[str] | None = DI_SPLITS) -> FairnessReport:
    if not attributes:
        raise DataError("no attributes requested")
    manifest = list(manifest)
    base = baseline_pds(baseline_report) if baseline_report is not None else None
    reports = []
    for attr in attributes:
        metrics = group_metrics(preds, manifest, attr, min_support)
        ar = AttributeReport(attr, [m for m in metrics if not m.excluded], [m for m in metrics if m.excluded])
        rates = positive_rates(manifest, attr, di_splits)
        ar.di_entries, ar.di_extremal = disparate_impact(manifest, attr, rates=rates)
        try:
            ar.pd, ar.pd_pair = predictive_disparity(ar.groups)
        except InsufficientGroupsError as exc:
            ar.skipped_reason = str(exc)
        if base is not None:
            ar.baseline_pd = base.get(attr)
            if ar.pd is not None and ar.baseline_pd:
                ar.rrpd = rrpd(ar.baseline_pd, ar.pd)
        reports.append(ar)
    if base is not None and baseline_name is None:
        baseline_name = "baseline"
    return FairnessReport(reports, min_support, THRESHOLD, baseline_name)
