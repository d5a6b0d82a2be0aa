"""Label and uncertainty-alignment metrics, and the evaluation pipeline."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LABELS, NEG, POS, AnnotatedSample, DisagreementDistribution
from .errors import DegenerateSeries, EmptyEvalSet
from .policy import Policy, greedy_decode
from .protocol import (
    INVALID_CONFIDENCE,
    StructuredOutput,
    model_distribution,
    parse_label,
    parse_output,
    render_prompt,
)
from .rewards import calibration_mae

REPORT_COLUMNS = ("Acc.", "F1", "MAE", "Coef.")


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    gold: str
    human: DisagreementDistribution
    prediction: str | None
    confidence: float
    model: DisagreementDistribution
    parse_valid: bool

    @property
    def human_agreement(self) -> float:
        return max(self.human.p_pos, self.human.p_neg)


def make_record(sample: AnnotatedSample, prediction: str | None, confidence: float | None) -> EvalRecord:
    """Build a record; a missing prediction is scored as maximally uncertain."""
    if prediction is None or confidence is None:
        return EvalRecord(sample.id, sample.majority_label, sample.dist, None, INVALID_CONFIDENCE,
                          model_distribution(NEG, INVALID_CONFIDENCE), False)
    return EvalRecord(sample.id, sample.majority_label, sample.dist, prediction, confidence,
                      model_distribution(prediction, confidence), True)


def _nonempty(records):
    if not records:
        raise EmptyEvalSet("no evaluation records")


def accuracy(records: Sequence[EvalRecord]) -> float:
    _nonempty(records)
    return sum(r.prediction == r.gold for r in records) / len(records)


def per_class_f1(records: Sequence[EvalRecord]) -> dict[str, float | None]:
    """F1 per class; ``None`` marks a class absent from gold and predictions."""
    _nonempty(records)
    out = {}
    for c in LABELS:
        tp = sum(r.prediction == c and r.gold == c for r in records)
        fp = sum(r.prediction == c and r.gold != c for r in records)
        fn = sum(r.prediction != c and r.gold == c for r in records)
        if tp + fp + fn == 0:
            out[c] = None
        else:
            out[c] = 2 * tp / (2 * tp + fp + fn)
    return out


def macro_f1(records: Sequence[EvalRecord]) -> float:
    scores = per_class_f1(records)
    return sum(0.0 if v is None else v for v in scores.values()) / len(scores)


def mean_mae(records: Sequence[EvalRecord]) -> float:
    _nonempty(records)
    return float(np.mean([calibration_mae(r.model, r.human) for r in records]))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 2:
        raise DegenerateSeries("Pearson correlation needs at least two records")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateSeries("a series has zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def pearson_coef(records: Sequence[EvalRecord]) -> float:
    """Correlation between model and human positive-class probabilities."""
    _nonempty(records)
    return _pearson(np.array([r.model.p_pos for r in records]),
                    np.array([r.human.p_pos for r in records]))


def confidence_agreement_coef(records: Sequence[EvalRecord]) -> float:
    """Secondary form: correlation of model confidence with human agreement."""
    _nonempty(records)
    return _pearson(np.array([r.confidence for r in records]),
                    np.array([r.human_agreement for r in records]))


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    model: tuple[int, ...]
    human: tuple[int, ...]

    def outer_mass(self, which: str = "model") -> float:
        """Fraction of records in the first and last bins."""
        counts = self.model if which == "model" else self.human
        total = sum(counts)
        return (counts[0] + counts[-1]) / total if total else 0.0

    def rows(self) -> list[tuple[str, int, int]]:
        out = []
        for i, (m, h) in enumerate(zip(self.model, self.human)):
            lo, hi = self.edges[i], self.edges[i + 1]
            closer = "]" if i == len(self.model) - 1 else ")"
            out.append((f"[{lo:.2f},{hi:.2f}{closer}", m, h))
        return out


def confidence_histogram(records: Sequence[EvalRecord], n_bins: int = 10) -> Histogram:
    """Counts of model and human pos-probabilities over shared bins on [0, 1]."""
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    _nonempty(records)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    m, _ = np.histogram([r.model.p_pos for r in records], bins=edges)
    h, _ = np.histogram([r.human.p_pos for r in records], bins=edges)
    return Histogram(tuple(float(e) for e in edges), tuple(int(v) for v in m), tuple(int(v) for v in h))


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    mean_mae: float
    pearson_coef: float | None
    confidence_agreement_coef: float | None
    parse_valid_rate: float
    n: int
    histogram: Histogram
    label: str = ""
    flags: list[str] = field(default_factory=list)
    unanimous_accuracy: float | None = None

    def row(self) -> list[str]:
        coef = "nan" if self.pearson_coef is None else f"{self.pearson_coef:.4f}"
        return [f"{self.accuracy:.4f}", f"{self.macro_f1:.4f}", f"{self.mean_mae:.4f}", coef]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = {"edges": list(self.histogram.edges), "model": list(self.histogram.model),
                          "human": list(self.histogram.human)}
        return d


def build_report(records: Sequence[EvalRecord], label: str = "", n_bins: int = 10,
                 unanimous_ids: set[str] | None = None) -> EvalReport:
    _nonempty(records)
    flags = []
    absent = [c for c, v in per_class_f1(records).items() if v is None]
    if absent:
        flags.append(f"class absent from gold and predictions: {','.join(absent)}")
    try:
        coef = pearson_coef(records)
    except DegenerateSeries as exc:
        coef = None
        flags.append(f"pearson undefined: {exc}")
    try:
        coef2 = confidence_agreement_coef(records)
    except DegenerateSeries as exc:
        coef2 = None
        flags.append(f"confidence/agreement correlation undefined: {exc}")
    unan = None
    if unanimous_ids:
        sub = [r for r in records if r.sample_id in unanimous_ids]
        unan = accuracy(sub) if sub else None
    return EvalReport(
        accuracy=accuracy(records), macro_f1=macro_f1(records), mean_mae=mean_mae(records),
        pearson_coef=coef, confidence_agreement_coef=coef2,
        parse_valid_rate=float(np.mean([r.parse_valid for r in records])), n=len(records),
        histogram=confidence_histogram(records, n_bins), label=label, flags=flags,
        unanimous_accuracy=unan,
    )


def label_probability_confidence(policy: Policy, prompt: Sequence[int], prediction: str, task) -> float:
    """Confidence of a label-only policy: its probability of the predicted
    surface renormalized over the two label surfaces."""
    prefix = list(prompt) + policy.vocab.encode("Prediction:")
    logp = policy.next_token_logprobs(prefix)
    pos_id = policy.vocab.encode(task.pos_label)[0]
    neg_id = policy.vocab.encode(task.neg_label)[0]
    p_pos, p_neg = math.exp(logp[pos_id]), math.exp(logp[neg_id])
    p = (p_pos if prediction == POS else p_neg) / (p_pos + p_neg)
    return min(1.0, max(p, INVALID_CONFIDENCE))


def predict_records(policy: Policy, samples: Sequence[AnnotatedSample], batch_size: int = 32,
                    max_new_tokens: int = 120) -> list[EvalRecord]:
    """Greedy-decode every sample and turn the output into an EvalRecord."""
    label_only = bool(policy.meta.get("label_only"))
    records = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        prompts = [policy.vocab.encode_prompt(render_prompt(s).text) for s in chunk]
        outs = greedy_decode(policy, prompts, max_new_tokens=max_new_tokens)
        for s, p, o in zip(chunk, prompts, outs):
            if label_only:
                lab = parse_label(o.text, s.task)
                conf = None if lab is None else label_probability_confidence(policy, p, lab, s.task)
                records.append(make_record(s, lab, conf))
            else:
                parsed = parse_output(o.text, s.task)
                if isinstance(parsed, StructuredOutput):
                    records.append(make_record(s, parsed.prediction, parsed.confidence))
                else:
                    records.append(make_record(s, None, None))
    return records


def evaluate(policy: Policy, samples: Sequence[AnnotatedSample], split: str | None = "test",
             label: str = "", n_bins: int = 10, batch_size: int = 32) -> tuple[EvalReport, list[EvalRecord]]:
    chosen = [s for s in samples if split is None or s.split == split]
    if not chosen:
        raise EmptyEvalSet(f"no samples in split {split!r}")
    records = predict_records(policy, chosen, batch_size=batch_size)
    unanimous = {s.id for s in chosen if s.agreement == 1.0}
    return build_report(records, label=label, n_bins=n_bins, unanimous_ids=unanimous), records


def transfer_eval(policy: Policy, target_samples: Sequence[AnnotatedSample], source: str, target: str,
                  n_bins: int = 10) -> EvalReport:
    """Evaluate a checkpoint on another dataset's test split, unchanged."""
    report, _ = evaluate(policy, target_samples, split="test", label=f"{source}->{target}", n_bins=n_bins)
    return report


def write_report(report: EvalReport, directory: str | Path, run_id: str, pair: str) -> tuple[Path, Path]:
    """Write ``<run>_<pair>_report.json`` and a flat ``.csv`` table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{run_id}_{pair}".replace("/", "_").replace(">", "")
    jpath = directory / f"{stem}_report.json"
    cpath = directory / f"{stem}_report.csv"
    jpath.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    with open(cpath, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "name", "value", "human"])
        for name, value in (("accuracy", report.accuracy), ("macro_f1", report.macro_f1),
                            ("mean_mae", report.mean_mae), ("pearson_coef", report.pearson_coef),
                            ("confidence_agreement_coef", report.confidence_agreement_coef),
                            ("parse_valid_rate", report.parse_valid_rate), ("n", report.n)):
            w.writerow(["metric", name, "" if value is None else repr(value), ""])
        for bin_label, m, h in report.histogram.rows():
            w.writerow(["histogram", bin_label, m, h])
    return jpath, cpath
