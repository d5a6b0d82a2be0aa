"""Input checks for the estimator facade."""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import AnnotatedSample, AnnotationCounts, TaskKind
from .errors import DataError, EmptyDataset


def check_task(task) -> TaskKind:
    if isinstance(task, TaskKind):
        return task
    try:
        return TaskKind(task)
    except ValueError:
        raise DataError(f"unknown task {task!r}; expected one of {[t.value for t in TaskKind]}") from None


def check_counts(y) -> np.ndarray:
    """Annotator vote counts as an ``(n, 2)`` array of non-negative ints."""
    arr = np.asarray(y)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"vote counts must have shape (n, 2), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
            raise DataError("vote counts must be integers")
        arr = arr.astype(np.int64)
    if (arr < 0).any():
        raise DataError("vote counts must be non-negative")
    if (arr.sum(axis=1) == 0).any():
        raise DataError("every sample needs at least one annotator")
    return arr


def check_samples(X, y=None, task=TaskKind.OFFENSE, split: str | None = None) -> list[AnnotatedSample]:
    """Normalize estimator input to a list of samples.

    ``X`` is either a sequence of ``AnnotatedSample`` (``y`` ignored) or a
    sequence of texts with ``y`` the matching ``(n, 2)`` pos/neg vote
    counts. ``y`` may be omitted for texts at prediction time; the samples
    then carry a placeholder single positive vote. ``split`` overrides
    the samples' split.
    """
    if isinstance(X, (str, bytes)):
        raise DataError("X must be a sequence of samples or texts, not a single string")
    items = list(X)
    if not items:
        raise EmptyDataset("no samples given")
    if all(isinstance(x, AnnotatedSample) for x in items):
        out = items
    elif all(isinstance(x, str) for x in items):
        kind = check_task(task)
        counts = check_counts(y) if y is not None else np.tile([1, 0], (len(items), 1))
        if len(counts) != len(items):
            raise DataError(f"{len(items)} texts but {len(counts)} count rows")
        out = [AnnotatedSample(f"x{i}", kind, t, AnnotationCounts(int(p), int(n)))
               for i, (t, (p, n)) in enumerate(zip(items, counts))]
    else:
        raise DataError("X must contain only AnnotatedSample objects or only strings")
    if split is not None:
        out = [s if s.split == split else dataclasses.replace(s, split=split) for s in out]
    return out


def check_is_fitted(estimator, attribute: str = "policy_") -> None:
    if getattr(estimator, attribute, None) is None:
        from sklearn.exceptions import NotFittedError

        raise NotFittedError(f"{type(estimator).__name__} is not fitted; call fit first")


def check_positive(name: str, value, allow_zero: bool = False) -> None:
    ok = value >= 0 if allow_zero else value > 0
    if not ok:
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
