"""Non-aggregated annotation datasets.

Records keep raw annotator vote counts per sample. The disagreement
distribution, the agreement score and the majority label are derived on
load and never stored independently, so they cannot drift apart.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CountInvariantViolated,
    EmptyDataset,
    InvalidProfile,
    MalformedRecord,
    ZeroAnnotators,
)

POS = "pos"
NEG = "neg"
LABELS = (POS, NEG)
SPLITS = ("train", "test")


class TaskKind(enum.Enum):
    SARCASM = "sarcasm"
    SENTIMENT = "sentiment"
    OFFENSE = "offense"

    @property
    def pos_label(self) -> str:
        return _SURFACES[self][0]

    @property
    def neg_label(self) -> str:
        return _SURFACES[self][1]

    @property
    def definition(self) -> str:
        return _DEFINITIONS[self]

    @property
    def has_context(self) -> bool:
        return self is TaskKind.SARCASM

    def surface(self, label: str) -> str:
        if label == POS:
            return self.pos_label
        if label == NEG:
            return self.neg_label
        raise ValueError(f"unknown label {label!r}")

    @classmethod
    def parse(cls, value: "TaskKind | str") -> "TaskKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown task {value!r}; expected one of "
                             f"{[t.value for t in cls]}") from None


_SURFACES = {
    TaskKind.SARCASM: ("Sarcastic", "Normal"),
    TaskKind.SENTIMENT: ("Positive", "Negative"),
    TaskKind.OFFENSE: ("Offensive", "Non-offensive"),
}

_DEFINITIONS = {
    TaskKind.SARCASM: (
        "Sarcasm detection. Decide whether the response, read against the "
        "preceding dialogue context, is sarcastic."
    ),
    TaskKind.SENTIMENT: (
        "Sentiment analysis. Decide whether the emotion expressed in the "
        "text is positive or negative."
    ),
    TaskKind.OFFENSE: (
        "Offensiveness detection. Decide whether the post is offensive "
        "toward a person or group, including implicit forms of aggression."
    ),
}


@dataclass(frozen=True)
class AnnotationCounts:
    pos: int
    neg: int

    def __post_init__(self):
        for name in ("pos", "neg"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise CountInvariantViolated(f"{name} count must be an integer, got {v!r}")
            if v < 0:
                raise CountInvariantViolated(f"{name} count must be non-negative, got {v}")
        if self.pos + self.neg < 1:
            raise ZeroAnnotators("at least one annotation is required")

    @property
    def total(self) -> int:
        return self.pos + self.neg


@dataclass(frozen=True)
class DisagreementDistribution:
    p_pos: float
    p_neg: float

    def __post_init__(self):
        for v in (self.p_pos, self.p_neg):
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValueError(f"probability out of [0, 1]: {v}")
        if abs(self.p_pos + self.p_neg - 1.0) > 1e-12:
            raise ValueError("distribution components must sum to 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_pos, self.p_neg])

    def __getitem__(self, label: str) -> float:
        return self.p_pos if label == POS else self.p_neg


@dataclass(frozen=True)
class RationalePair:
    label_justification: str
    disagreement_cue: str


def disagreement_distribution(counts: AnnotationCounts | tuple[int, int]) -> DisagreementDistribution:
    """Vote proportions ``[p_pos, p_neg]``."""
    if not isinstance(counts, AnnotationCounts):
        pos, neg = counts
        if pos + neg < 1:
            raise ZeroAnnotators("at least one annotation is required")
        counts = AnnotationCounts(int(pos), int(neg))
    p_pos = counts.pos / counts.total
    return DisagreementDistribution(p_pos, 1.0 - p_pos)


def agreement_score(dist: DisagreementDistribution) -> float:
    return max(dist.p_pos, dist.p_neg)


def majority_label(dist: DisagreementDistribution) -> tuple[str, bool]:
    """Return ``(label, tied)``.

    An exact 0.5/0.5 split has no argmax; it resolves to ``neg`` and is
    flagged so callers can report it.
    """
    if dist.p_pos > 0.5:
        return POS, False
    if dist.p_pos < 0.5:
        return NEG, False
    return NEG, True


@dataclass(frozen=True)
class AnnotatedSample:
    id: str
    task: TaskKind
    text: str
    counts: AnnotationCounts
    context: str | None = None
    ref_rationale: RationalePair | None = None
    split: str = "train"
    dist: DisagreementDistribution = field(init=False)
    agreement: float = field(init=False)
    majority_label: str = field(init=False)
    tied: bool = field(init=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        dist = disagreement_distribution(self.counts)
        label, tied = majority_label(dist)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "agreement", agreement_score(dist))
        object.__setattr__(self, "majority_label", label)
        object.__setattr__(self, "tied", tied)

    def to_record(self) -> dict:
        rationale = None
        if self.ref_rationale is not None:
            rationale = {
                "label_justification": self.ref_rationale.label_justification,
                "disagreement_cue": self.ref_rationale.disagreement_cue,
            }
        return {
            "id": self.id,
            "task": self.task.value,
            "context": self.context,
            "text": self.text,
            "annotations": {"pos": self.counts.pos, "neg": self.counts.neg},
            "rationale": rationale,
            "split": self.split,
        }


_REQUIRED = ("id", "task", "context", "text", "annotations", "rationale", "split")


def parse_record(obj: Mapping, line: int = 0, task: TaskKind | None = None,
                 strict: bool = True) -> AnnotatedSample:
    if not isinstance(obj, Mapping):
        raise MalformedRecord(line, "record is not an object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise MalformedRecord(line, f"missing fields {missing}")
    if strict:
        unknown = sorted(set(obj) - set(_REQUIRED))
        if unknown:
            raise MalformedRecord(line, f"unknown fields {unknown}")

    if not isinstance(obj["id"], str) or not obj["id"]:
        raise MalformedRecord(line, "id must be a non-empty string")
    try:
        rec_task = TaskKind.parse(obj["task"])
    except ValueError as exc:
        raise MalformedRecord(line, str(exc)) from None
    if task is not None and rec_task is not task:
        raise MalformedRecord(line, f"task {rec_task.value!r} does not match {task.value!r}")
    if obj["context"] is not None and not isinstance(obj["context"], str):
        raise MalformedRecord(line, "context must be a string or null")
    if not isinstance(obj["text"], str) or not obj["text"].strip():
        raise MalformedRecord(line, "text must be a non-empty string")

    ann = obj["annotations"]
    if not isinstance(ann, Mapping) or set(ann) != {"pos", "neg"}:
        raise MalformedRecord(line, "annotations must be an object with exactly 'pos' and 'neg'")
    try:
        counts = AnnotationCounts(ann["pos"], ann["neg"])
    except CountInvariantViolated as exc:
        raise MalformedRecord(line, str(exc)) from None

    rat = obj["rationale"]
    pair = None
    if rat is not None:
        if (not isinstance(rat, Mapping)
                or set(rat) != {"label_justification", "disagreement_cue"}
                or not all(isinstance(v, str) and v.strip() for v in rat.values())):
            raise MalformedRecord(
                line, "rationale must be null or an object with non-empty "
                      "'label_justification' and 'disagreement_cue'")
        pair = RationalePair(rat["label_justification"], rat["disagreement_cue"])

    if obj["split"] not in SPLITS:
        raise MalformedRecord(line, f"split must be 'train' or 'test', got {obj['split']!r}")

    return AnnotatedSample(
        id=obj["id"], task=rec_task, text=obj["text"], counts=counts,
        context=obj["context"], ref_rationale=pair, split=obj["split"],
    )


def load_dataset(path: str | Path, task: TaskKind | str | None = None,
                 strict: bool = True) -> list[AnnotatedSample]:
    """Read a line-delimited dataset file.

    Blank lines are skipped. Any malformed record aborts the load with a
    ``MalformedRecord`` carrying its 1-based line number.
    """
    task = TaskKind.parse(task) if task is not None else None
    samples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})") from None
            sample = parse_record(obj, lineno, task=task, strict=strict)
            if sample.id in seen:
                raise MalformedRecord(lineno, f"duplicate id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    if not samples:
        raise EmptyDataset(f"{path} contains no records")
    return samples


def dumps_dataset(samples: Iterable[AnnotatedSample]) -> str:
    return "".join(json.dumps(s.to_record(), ensure_ascii=False) + "\n" for s in samples)


def save_dataset(samples: Iterable[AnnotatedSample], path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(samples), encoding="utf-8")


def split_samples(samples: Sequence[AnnotatedSample], split: str) -> list[AnnotatedSample]:
    return [s for s in samples if s.split == split]


@dataclass(frozen=True)
class DatasetStats:
    n_pos: int
    n_neg: int
    n_train: int
    n_test: int
    n_total: int
    annotator_range: tuple[int, int]
    avg_agreement: float
    avg_length_words: float

    def table_row(self, name: str = "") -> list[str]:
        lo, hi = self.annotator_range
        anno = str(lo) if lo == hi else f"{lo}-{hi}"
        return [name, f"{self.n_pos:,}", f"{self.n_neg:,}", f"{self.n_train:,}",
                f"{self.n_test:,}", f"{self.n_total:,}", anno,
                f"{self.avg_agreement:.2f}", f"{self.avg_length_words:.2f}"]


STATS_HEADER = ["Dataset", "#Pos.", "#Neg.", "#Train", "#Test", "#Total",
                "#Anno.", "Avg. C^h", "Avg. L"]


def dataset_stats(samples: Sequence[AnnotatedSample]) -> DatasetStats:
    if not samples:
        raise EmptyDataset("cannot summarize an empty dataset")
    n_pos = sum(s.majority_label == POS for s in samples)
    n_train = sum(s.split == "train" for s in samples)
    totals = [s.counts.total for s in samples]
    return DatasetStats(
        n_pos=n_pos,
        n_neg=len(samples) - n_pos,
        n_train=n_train,
        n_test=len(samples) - n_train,
        n_total=len(samples),
        annotator_range=(min(totals), max(totals)),
        avg_agreement=float(np.mean([s.agreement for s in samples])),
        avg_length_words=float(np.mean([len(s.text.split()) for s in samples])),
    )


# ---------------------------------------------------------------------------
# synthetic corpora

@dataclass(frozen=True)
class Bucket:
    """An agreement level: majority votes, minority votes and the marker
    words that signal it in the text."""
    name: str
    majority: int
    minority: int
    markers: tuple[str, ...]
    cue_template: str

    @property
    def agreement(self) -> float:
        return self.majority / (self.majority + self.minority)


@dataclass(frozen=True)
class SyntheticProfile:
    task: TaskKind
    buckets: tuple[Bucket, ...]
    pos_cues: tuple[str, ...]
    neg_cues: tuple[str, ...]
    subjects: tuple[str, ...]
    frames: tuple[str, ...]
    justification_template: str
    contexts: tuple[str, ...] = ()
    test_fraction: float = 0.25

    def validate(self) -> None:
        if not self.buckets:
            raise InvalidProfile("profile needs at least one bucket")
        for b in self.buckets:
            if b.majority < b.minority or b.minority < 0 or b.majority < 1:
                raise InvalidProfile(f"bucket {b.name!r}: need majority >= minority >= 0")
            if not b.markers:
                raise InvalidProfile(f"bucket {b.name!r} has no marker words")
        if not self.pos_cues or not self.neg_cues or not self.subjects or not self.frames:
            raise InvalidProfile("cue, subject and frame lists must be non-empty")
        if set(self.pos_cues) & set(self.neg_cues):
            raise InvalidProfile("positive and negative cue lists overlap")
        if not 0.0 <= self.test_fraction < 1.0:
            raise InvalidProfile("test_fraction must be in [0, 1)")
        if self.task.has_context and not self.contexts:
            raise InvalidProfile(f"task {self.task.value} needs context lines")


_BUCKET_CUES = {
    "unanimous": "the marker {marker} leaves little room for another reading",
    "split-4/1": "the hedge {marker} may lead a few readers to disagree",
    "split-3/2": "the marker {marker} hints at a joke so many readers may disagree",
}


def make_buckets(names: Iterable[str] = ("unanimous", "split-4/1", "split-3/2")) -> tuple[Bucket, ...]:
    known = {
        "unanimous": (5, 0, ("seriously", "truly", "clearly")),
        "split-4/1": (4, 1, ("maybe", "perhaps", "somewhat")),
        "split-3/2": (3, 2, ("lol", "jk", "haha")),
    }
    out = []
    for name in names:
        if name not in known:
            raise InvalidProfile(f"unknown bucket {name!r}")
        maj, mino, markers = known[name]
        out.append(Bucket(name, maj, mino, markers, _BUCKET_CUES[name]))
    return tuple(out)


_LEXICONS = {
    TaskKind.OFFENSE: dict(
        pos_cues=("idiot", "trash", "pathetic", "clown", "disgusting", "loser", "moron", "worthless"),
        neg_cues=("lovely", "brilliant", "kind", "wonderful", "helpful", "great", "sweet", "decent"),
        subjects=("the referee", "your friend", "the new mayor", "this player",
                  "my neighbor", "that streamer", "the manager", "our coach"),
        frames=("{subject} is {cue}", "what a {cue} move from {subject}",
                "honestly {subject} seems {cue}", "everyone says {subject} is {cue}"),
        justification_template="the word {cue} marks the post as {surface}",
    ),
    TaskKind.SENTIMENT: dict(
        pos_cues=("happy", "grateful", "thrilled", "proud", "delighted", "excited", "relieved", "glad"),
        neg_cues=("sad", "angry", "annoyed", "upset", "furious", "miserable", "worried", "bitter"),
        subjects=("the results", "my sister", "this weekend", "the new job",
                  "the trip", "our team", "the concert", "that message"),
        frames=("i feel {cue} about {subject}", "{subject} left me {cue}",
                "so {cue} after {subject}", "still {cue} because of {subject}"),
        justification_template="the word {cue} expresses a {surface} emotion",
    ),
    TaskKind.SARCASM: dict(
        pos_cues=("suuure", "obviously", "wowww", "genius", "fantastic", "totally", "brilliant", "amazing"),
        neg_cues=("okay", "thanks", "noted", "agreed", "fine", "understood", "right", "sure"),
        subjects=("that plan", "the meeting", "your idea", "the update",
                  "this weather", "the schedule", "the new rule", "dinner"),
        frames=("{cue} , {subject} sounds great", "oh {cue} about {subject}",
                "{subject} ? {cue}", "yeah {cue} , {subject} it is"),
        justification_template="the word {cue} gives the reply a {surface} tone",
        contexts=("how was the exam ?", "the bus is late again .", "i finished the report .",
                  "we lost the match .", "want to join us later ?", "the wifi is down ."),
    ),
}


def default_profile(task: TaskKind | str = TaskKind.OFFENSE,
                    buckets: Iterable[str] = ("unanimous", "split-4/1", "split-3/2"),
                    test_fraction: float = 0.25) -> SyntheticProfile:
    task = TaskKind.parse(task)
    return SyntheticProfile(task=task, buckets=make_buckets(buckets),
                            test_fraction=test_fraction, **_LEXICONS[task])


def generate_synthetic(n: int, profile: SyntheticProfile | None = None,
                       seed: int = 0) -> list[AnnotatedSample]:
    """Draw ``n`` samples whose realized agreement equals their bucket's.

    Buckets and labels are assigned round-robin, so every bucket receives
    ``n // len(buckets)`` samples (remainders go to the first buckets) and
    labels alternate within a bucket. The cue word fixes the intended
    label; the marker word fixes the agreement level.
    """
    if profile is None:
        profile = default_profile()
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
        raise InvalidProfile(f"n must be a positive integer, got {n!r}")
    profile.validate()
    rng = np.random.default_rng(seed)
    task = profile.task
    nb = len(profile.buckets)

    order = rng.permutation(n)
    n_test = int(round(profile.test_fraction * n))
    test_ids = set(order[:n_test].tolist())

    samples = []
    for i in range(n):
        bucket = profile.buckets[i % nb]
        label = POS if (i // nb) % 2 == 0 else NEG
        cues = profile.pos_cues if label == POS else profile.neg_cues
        cue = cues[rng.integers(len(cues))]
        marker = bucket.markers[rng.integers(len(bucket.markers))]
        subject = profile.subjects[rng.integers(len(profile.subjects))]
        frame = profile.frames[rng.integers(len(profile.frames))]
        text = frame.format(subject=subject, cue=cue) + f" {marker}"
        context = None
        if task.has_context:
            context = profile.contexts[rng.integers(len(profile.contexts))]
        if label == POS:
            counts = AnnotationCounts(bucket.majority, bucket.minority)
        else:
            counts = AnnotationCounts(bucket.minority, bucket.majority)
        surface = task.surface(label).lower()
        rationale = RationalePair(
            label_justification=profile.justification_template.format(cue=cue, surface=surface),
            disagreement_cue=bucket.cue_template.format(marker=marker),
        )
        samples.append(AnnotatedSample(
            id=f"{task.value}-{seed}-{i:05d}", task=task, text=text, counts=counts,
            context=context, ref_rationale=rationale,
            split="test" if i in test_ids else "train",
        ))
    return samples
