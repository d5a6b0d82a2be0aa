"""Prompt rendering and structured-output parsing.

The model is asked for three labeled lines (prediction, rationale,
confidence). ``parse_output`` turns arbitrary generated text into either a
``StructuredOutput`` or a ``ParseFailure``; it never raises.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .data import NEG, POS, AnnotatedSample, DisagreementDistribution, TaskKind
from .errors import ConfidenceOutOfRange, MissingReferenceRationale

RATIONALE_CAP = 100
INVALID_CONFIDENCE = 0.5 + 1e-6
MIN_TARGET_CONFIDENCE = 0.51
CONNECTIVE = "However, "

MISSING_FIELD = "MissingField"
UNKNOWN_LABEL = "UnknownLabel"
CONFIDENCE_OUT_OF_RANGE = "ConfidenceOutOfRange"
CONFIDENCE_UNPARSABLE = "ConfidenceUnparsable"
FAILURE_KINDS = (MISSING_FIELD, UNKNOWN_LABEL, CONFIDENCE_OUT_OF_RANGE, CONFIDENCE_UNPARSABLE)


@lru_cache(maxsize=None)
def prompt_template() -> str:
    text = resources.files("dpua").joinpath("assets/prompt_template.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


@dataclass(frozen=True)
class PromptRendering:
    text: str
    task: TaskKind


@dataclass(frozen=True)
class StructuredOutput:
    prediction: str
    rationale: str
    confidence: float


@dataclass(frozen=True)
class ParseFailure:
    kind: str
    span: str
    message: str = ""

    def __bool__(self):
        return False


def render_prompt(sample: AnnotatedSample) -> PromptRendering:
    task = sample.task
    context = ""
    if sample.context:
        context = f"Context: {sample.context}\nResponse: "
    text = prompt_template().format(
        task_definition=task.definition,
        pos_label=task.pos_label,
        neg_label=task.neg_label,
        context=context,
        input=sample.text,
    )
    return PromptRendering(text=text, task=task)


_FIELD_RE = re.compile(r"^\s*(?:[-*•]\s*)?(prediction|rationale|confidence)\s*:\s?(.*)$",
                       re.IGNORECASE)
_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)$")
_WORD_RE = re.compile(r"\S+")


def _match_label(value: str, task: TaskKind) -> str | None:
    cleaned = value.strip().strip("*_`\"'<>").rstrip(".").strip().lower()
    if cleaned == task.pos_label.lower():
        return POS
    if cleaned == task.neg_label.lower():
        return NEG
    return None


def cap_rationale(text: str, cap: int = RATIONALE_CAP) -> str:
    words = _WORD_RE.findall(text)
    if len(words) <= cap:
        return text.strip()
    return " ".join(words[:cap])


def parse_output(text, task: TaskKind, rationale_cap: int = RATIONALE_CAP) -> StructuredOutput | ParseFailure:
    """Extract ``(prediction, rationale, confidence)`` from generated text.

    Field names match case-insensitively and may carry a leading bullet.
    The first occurrence of each field wins; rationale continuation lines
    are kept until the next field line.
    """
    try:
        if isinstance(text, (bytes, bytearray)):
            text = bytes(text).decode("utf-8", errors="replace")
        elif not isinstance(text, str):
            text = str(text)
        fields: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            m = _FIELD_RE.match(line)
            if m:
                name = m.group(1).lower()
                if name in fields:
                    current = None
                    continue
                fields[name] = [m.group(2)]
                current = name
            elif current == "rationale":
                fields[current].append(line)
            else:
                current = None

        for name in ("prediction", "rationale", "confidence"):
            if name not in fields:
                return ParseFailure(MISSING_FIELD, name, f"no {name!r} line")

        pred_raw = fields["prediction"][0]
        label = _match_label(pred_raw, task)
        if label is None:
            return ParseFailure(UNKNOWN_LABEL, pred_raw.strip(),
                                f"expected {task.pos_label!r} or {task.neg_label!r}")

        conf_span = fields["confidence"][0].strip()
        conf_raw = conf_span[:-1] if conf_span.endswith(".") else conf_span
        if not _DECIMAL_RE.match(conf_raw):
            return ParseFailure(CONFIDENCE_UNPARSABLE, conf_span, "confidence is not a decimal number")
        conf = float(conf_raw)
        if not math.isfinite(conf) or not (0.5 < conf <= 1.0):
            return ParseFailure(CONFIDENCE_OUT_OF_RANGE, conf_raw, "confidence must lie in (0.5, 1.0]")

        rationale = cap_rationale("\n".join(fields["rationale"]), rationale_cap)
        return StructuredOutput(prediction=label, rationale=rationale, confidence=conf)
    except Exception as exc:  # totality guard
        return ParseFailure(MISSING_FIELD, "", f"unparsable input ({type(exc).__name__})")


def model_distribution(prediction: str, confidence: float) -> DisagreementDistribution:
    """Class distribution implied by a prediction and its confidence."""
    if not (0.5 < confidence <= 1.0):
        raise ConfidenceOutOfRange(f"confidence {confidence} not in (0.5, 1.0]")
    if prediction == POS:
        return DisagreementDistribution(confidence, 1.0 - confidence)
    if prediction == NEG:
        return DisagreementDistribution(1.0 - confidence, confidence)
    raise ValueError(f"unknown prediction {prediction!r}")


def format_confidence(value: float) -> str:
    """Two-decimal literal, floored at the smallest in-range value 0.51."""
    literal = f"{value:.2f}"
    if float(literal) < MIN_TARGET_CONFIDENCE:
        literal = f"{MIN_TARGET_CONFIDENCE:.2f}"
    return literal


def join_rationale(label_justification: str, disagreement_cue: str) -> str:
    lab = label_justification.strip().rstrip(".")
    cue = disagreement_cue.strip()
    lab = lab[:1].upper() + lab[1:]
    if not cue.endswith("."):
        cue += "."
    return f"{lab}. {CONNECTIVE}{cue}"


def serialize_target(sample: AnnotatedSample, gold_confidence: float | None = None,
                     with_rationale: bool = True) -> str:
    """Training target text for ``sample``.

    ``gold_confidence`` defaults to the sample's agreement score. With
    ``with_rationale=False`` only the prediction line is emitted (the
    hard-label baseline target).
    """
    label_line = f"Prediction: {sample.task.surface(sample.majority_label)}"
    if not with_rationale:
        return label_line
    if sample.ref_rationale is None:
        raise MissingReferenceRationale(f"sample {sample.id!r} has no reference rationale")
    if gold_confidence is None:
        gold_confidence = sample.agreement
    rationale = join_rationale(sample.ref_rationale.label_justification,
                               sample.ref_rationale.disagreement_cue)
    return f"{label_line}\nRationale: {rationale}\nConfidence: {format_confidence(gold_confidence)}"


def parse_label(text, task: TaskKind) -> str | None:
    """Prediction line only; used for label-only (hard-label) policies."""
    try:
        if isinstance(text, (bytes, bytearray)):
            text = bytes(text).decode("utf-8", errors="replace")
        for line in str(text).splitlines():
            m = _FIELD_RE.match(line)
            if m and m.group(1).lower() == "prediction":
                return _match_label(m.group(2), task)
    except Exception:
        return None
    return None
