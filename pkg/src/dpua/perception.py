"""Disagreement-perception phase: segment losses and agreement-weighted SFT."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import AnnotatedSample
from .errors import (
    AgreementOutOfRange,
    ConfigError,
    EmptyBatch,
    EmptySpan,
    IndexOutOfRange,
    MissingReferenceRationale,
)
from .policy import Policy, SegmentedTarget, apply_update, segment_spans
from .protocol import render_prompt, serialize_target

log = logging.getLogger(__name__)

MODES = ("dpua", "sft_star", "sft_plain")


@dataclass(frozen=True)
class PerceptionConfig:
    tau: float = 0.5
    alpha: float = 0.1
    eps: float = 0.1
    epochs: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 16
    mode: str = "dpua"
    uniform_weights: bool = False
    reduction: str = "sum"
    max_grad_norm: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha <= 0 or self.eps <= 0:
            raise ConfigError("alpha and eps must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def label_only(self) -> bool:
        return self.mode == "sft_plain"


@dataclass
class SegmentLosses:
    l_label: object
    l_rat: object
    l_conf: object


def segment_loss(per_token_logprobs, span: Sequence[int]):
    """Mean negative log-probability over ``span``.

    Works on numpy arrays (returns float) and torch tensors (returns a
    differentiable 0-d tensor).
    """
    span = list(span)
    if not span:
        raise EmptySpan("segment span is empty")
    n = len(per_token_logprobs)
    for i in span:
        if not 0 <= i < n:
            raise IndexOutOfRange(f"index {i} outside sequence of length {n}")
    if isinstance(per_token_logprobs, torch.Tensor):
        return -per_token_logprobs[torch.tensor(span, dtype=torch.long)].mean()
    return float(-np.mean(np.asarray(per_token_logprobs, dtype=np.float64)[span]))


def standard_label_loss(per_token_logprobs, label_span: Sequence[int]):
    """Hard-label objective: NLL restricted to the label segment."""
    return segment_loss(per_token_logprobs, label_span)


def adaptive_weights(agreement: float, cfg: PerceptionConfig = PerceptionConfig()) -> tuple[float, float, float]:
    """``(w_label, w_rat, w_conf)`` for one sample's agreement score."""
    if not 0.5 <= agreement <= 1.0:
        raise AgreementOutOfRange(f"agreement {agreement} not in [0.5, 1]")
    if cfg.uniform_weights or cfg.mode == "sft_star":
        return 1.0, 1.0, 1.0
    w_label = agreement - cfg.tau + cfg.eps
    w_rat = cfg.alpha * (1.0 - agreement + cfg.eps)
    return w_label, w_rat, 1.0


def joint_loss(batch: Sequence[tuple[SegmentLosses, float]], cfg: PerceptionConfig = PerceptionConfig()):
    """Agreement-weighted sum of segment losses over a mini-batch."""
    if not batch:
        raise EmptyBatch("joint loss needs at least one sample")
    total = 0.0
    for losses, agreement in batch:
        w_label, w_rat, w_conf = adaptive_weights(agreement, cfg)
        total = total + w_label * losses.l_label + w_rat * losses.l_rat + w_conf * losses.l_conf
    if cfg.reduction == "mean":
        total = total / len(batch)
    return total


@dataclass
class EncodedExample:
    sample: AnnotatedSample
    prompt: list[int]
    target: SegmentedTarget


def encode_examples(samples: Sequence[AnnotatedSample], policy: Policy,
                    label_only: bool = False) -> list[EncodedExample]:
    out = []
    for s in samples:
        if not label_only and s.ref_rationale is None:
            raise MissingReferenceRationale(
                f"sample {s.id!r} lacks a reference rationale required in rationale-supervised modes")
        text = serialize_target(s, with_rationale=not label_only)
        seg = segment_spans(text, policy.vocab, require_all=not label_only)
        out.append(EncodedExample(s, policy.vocab.encode_prompt(render_prompt(s).text), seg))
    return out


def batch_objective(policy: Policy, examples: Sequence[EncodedExample], cfg: PerceptionConfig):
    """Differentiable loss for one mini-batch plus detached components."""
    lps = policy.batch_logprobs([e.prompt for e in examples], [e.target.token_ids for e in examples])
    if cfg.label_only:
        parts = [standard_label_loss(lp, e.target.label) for lp, e in zip(lps, examples)]
        loss = sum(parts)
        if cfg.reduction == "mean":
            loss = loss / len(parts)
        comps = {"l_label": float(np.mean([p.item() for p in parts])),
                 "l_rat": 0.0, "l_conf": 0.0}
        return loss, comps
    items = []
    for lp, e in zip(lps, examples):
        items.append((SegmentLosses(segment_loss(lp, e.target.label),
                                    segment_loss(lp, e.target.rationale),
                                    segment_loss(lp, e.target.confidence)), e.sample.agreement))
    loss = joint_loss(items, cfg)
    comps = {k: float(np.mean([getattr(s, k).item() for s, _ in items]))
             for k in ("l_label", "l_rat", "l_conf")}
    return loss, comps


def dataset_objective(policy: Policy, samples: Sequence[AnnotatedSample], cfg: PerceptionConfig,
                      batch_size: int = 64) -> float:
    """Full-pass objective without gradient, normalized per sample."""
    examples = encode_examples(samples, policy, cfg.label_only)
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(examples), batch_size):
            loss, _ = batch_objective(policy, examples[lo:lo + batch_size], replace(cfg, reduction="sum"))
            total += float(loss)
    return total / len(examples)


def _clip(grads: list[torch.Tensor], max_norm: float | None) -> list[torch.Tensor]:
    if max_norm is None:
        return grads
    norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    if norm > max_norm:
        scale = max_norm / (float(norm) + 1e-12)
        grads = [g * scale for g in grads]
    return grads


def train_dp(samples: Sequence[AnnotatedSample], policy: Policy, cfg: PerceptionConfig = PerceptionConfig(),
             log_path: str | Path | None = None, checkpoint_path: str | Path | None = None):
    """Run the supervised phase in place on ``policy``.

    Only the ``train`` split is used. Returns ``(policy, log_records)``;
    one record per step plus one ``epoch`` summary record per epoch.
    """
    from .policy import save_checkpoint

    train = [s for s in samples if s.split == "train"]
    if not train:
        raise EmptyBatch("dataset has no train split")
    examples = encode_examples(train, policy, cfg.label_only)
    rng = np.random.default_rng(cfg.seed)
    records = []
    sink = open(log_path, "a", encoding="utf-8") if log_path else None
    step = 0
    policy.model.train()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(examples))
            ep_losses = []
            for lo in range(0, len(order), cfg.batch_size):
                batch = [examples[i] for i in order[lo:lo + cfg.batch_size]]
                policy.zero_grad()
                loss, comps = batch_objective(policy, batch, cfg)
                loss.backward()
                grads = _clip(policy.gradients(), cfg.max_grad_norm)
                apply_update(policy, grads, cfg.learning_rate)
                step += 1
                per_sample = float(loss.detach()) / (len(batch) if cfg.reduction == "sum" else 1)
                ep_losses.append(per_sample)
                weights = [adaptive_weights(e.sample.agreement, cfg) for e in batch]
                rec = {"kind": "step", "epoch": epoch, "step": step, "loss": per_sample, **comps,
                       "w_label_mean": float(np.mean([w[0] for w in weights])) if not cfg.label_only else 1.0,
                       "w_rat_mean": float(np.mean([w[1] for w in weights])) if not cfg.label_only else 0.0}
                records.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
            summary = {"kind": "epoch", "epoch": epoch, "step": step, "loss": float(np.mean(ep_losses)),
                       "mode": cfg.mode}
            records.append(summary)
            log.info("epoch %d loss %.4f", epoch, summary["loss"])
            if sink:
                sink.write(json.dumps(summary) + "\n")
                sink.flush()
    finally:
        policy.model.eval()
        policy.zero_grad()
        if sink:
            sink.close()
    policy.meta.update({"phase": "dp", "mode": cfg.mode, "label_only": cfg.label_only,
                        "perception_config": asdict(cfg)})
    if checkpoint_path is not None:
        save_checkpoint(policy, checkpoint_path)
    return policy, records
