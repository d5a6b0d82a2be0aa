"""Glue shared by the CLI, the estimator facade and the test suites."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Sequence

from .data import AnnotatedSample
from .policy import Policy, PolicyConfig
from .protocol import format_confidence, render_prompt, serialize_target
from .tokenizer import Vocabulary

# every two-decimal confidence literal the model may emit
CONFIDENCE_LITERALS = tuple(format_confidence(k / 100) for k in range(51, 101))


def vocabulary_texts(samples: Sequence[AnnotatedSample]) -> list[str]:
    texts = [render_prompt(s).text for s in samples]
    for s in samples:
        texts.append(serialize_target(s, with_rationale=s.ref_rationale is not None))
    texts.append(" ".join(CONFIDENCE_LITERALS))
    return texts


def build_vocabulary(samples: Sequence[AnnotatedSample], max_size: int = 5000) -> Vocabulary:
    """Word-level vocabulary over all prompts, targets and confidence literals."""
    return Vocabulary.build(vocabulary_texts(samples), max_size=max_size)


def new_policy(samples: Sequence[AnnotatedSample], config: PolicyConfig | None = None) -> Policy:
    return Policy(build_vocabulary(samples), config or PolicyConfig())


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
