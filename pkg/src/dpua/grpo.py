"""Uncertainty-alignment phase: group-relative policy optimization."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import AnnotatedSample
from .errors import ConfigError, EmptyBatch, GroupTooSmall, NonFiniteReward
from .perception import _clip
from .policy import Policy, SampledCompletion, apply_update, load_checkpoint, save_checkpoint
from .protocol import ParseFailure, parse_label, parse_output, render_prompt
from .rewards import (
    JudgeRequest,
    MockJudge,
    RewardBreakdown,
    RewardConfig,
    accuracy_reward,
    needs_judge,
    total_reward,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    group_size: int = 8
    eps_adv: float = 0.1
    temperature: float = 1.0
    epochs: int = 1
    max_steps: int | None = None
    prompts_per_step: int = 8
    learning_rate: float = 1e-4
    tau: float = 0.5
    eps: float = 0.1
    reasoning_on: bool = True
    calibration_on: bool = True
    reward: str = "dpua"  # "accuracy" for the vanilla baseline
    judge: str = "mock"
    std: str = "population"
    clip_eps: float | None = None
    kl_coef: float = 0.0
    max_new_tokens: int = 120
    max_grad_norm: float | None = 1.0
    save_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group_size must be at least 2")
        if self.eps_adv <= 0:
            raise ConfigError("eps_adv must be positive")
        if self.std not in ("population", "sample"):
            raise ConfigError("std must be 'population' or 'sample'")
        if self.judge not in ("mock", "remote"):
            raise ConfigError("judge must be 'mock' or 'remote'")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.reward_config()  # validates the reward flags

    def reward_config(self) -> RewardConfig:
        return RewardConfig(tau=self.tau, eps=self.eps, reasoning_on=self.reasoning_on,
                            calibration_on=self.calibration_on,
                            kind="accuracy" if self.reward == "accuracy" else "dpua")


def group_advantages(rewards: Sequence[float], eps_adv: float = 0.1, std: str = "population") -> np.ndarray:
    """Standardize rewards within one group: ``(R - mean) / (std + eps_adv)``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"a group needs at least 2 rewards, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise NonFiniteReward("rewards must be finite")
    if np.all(r == r[0]):
        # the float mean of equal values can miss them by an ulp
        return np.zeros_like(r)
    centered = r - r.mean()
    sd = r.std(ddof=0 if std == "population" else 1)
    return centered / (sd + eps_adv)


@dataclass
class GroupRecord:
    sample_id: str
    prompt: list[int]
    completions: list[SampledCompletion]
    rewards: list[RewardBreakdown]
    advantages: np.ndarray


def grpo_loss(advantages: Sequence[Sequence[float]], logprobs: Sequence[Sequence[torch.Tensor]],
              old_logprobs: Sequence[Sequence] | None = None, clip_eps: float | None = None,
              ref_logprobs: Sequence[Sequence] | None = None, kl_coef: float = 0.0):
    """Advantage-weighted sequence log-likelihood, averaged over groups.

    ``logprobs[i][g]`` holds the per-token log-probabilities of completion
    ``g`` for prompt ``i`` under the current policy. Advantages are
    constants. The clipped-ratio and KL terms are off unless requested.
    """
    if not advantages:
        raise EmptyBatch("no groups to optimize")
    total = 0.0
    for i, (adv, lps) in enumerate(zip(advantages, logprobs)):
        group = 0.0
        for g, (a, lp) in enumerate(zip(adv, lps)):
            a = float(a)
            if clip_eps is not None and old_logprobs is not None:
                old = torch.as_tensor(np.asarray(old_logprobs[i][g]), dtype=lp.dtype)
                ratio = torch.exp(lp - old)
                term = torch.minimum(ratio * a, ratio.clamp(1 - clip_eps, 1 + clip_eps) * a).sum()
            else:
                term = a * lp.sum()
            if kl_coef and ref_logprobs is not None:
                ref = torch.as_tensor(np.asarray(ref_logprobs[i][g]), dtype=lp.dtype)
                # k3 estimator of KL(pi || ref), per token
                term = term - kl_coef * (torch.exp(ref - lp) - (ref - lp) - 1).sum()
            group = group + term
        total = total + group / len(adv)
    return -total / len(advantages)


def policy_grpo_loss(policy: Policy, groups: Sequence[GroupRecord], cfg: AlignConfig | None = None,
                     reference: Policy | None = None):
    """Recompute completion log-probs under ``policy`` and evaluate the loss."""
    cfg = cfg or AlignConfig()
    prompts, targets = [], []
    for grp in groups:
        for c in grp.completions:
            prompts.append(grp.prompt)
            targets.append(c.tokens)
    flat = policy.batch_logprobs(prompts, targets)
    ref_flat = None
    if reference is not None and cfg.kl_coef:
        with torch.no_grad():
            ref_flat = [t.detach() for t in reference.batch_logprobs(prompts, targets)]
    nested, ref_nested, old_nested, k = [], [], [], 0
    for grp in groups:
        n = len(grp.completions)
        nested.append(flat[k:k + n])
        old_nested.append([c.logprobs for c in grp.completions])
        if ref_flat is not None:
            ref_nested.append(ref_flat[k:k + n])
        k += n
    return grpo_loss([grp.advantages for grp in groups], nested,
                     old_logprobs=old_nested, clip_eps=cfg.clip_eps,
                     ref_logprobs=ref_nested if ref_flat is not None else None, kl_coef=cfg.kl_coef)


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def rollout_groups(policy: Policy, samples: Sequence[AnnotatedSample], cfg: AlignConfig,
                   judge=None, seed: int = 0) -> list[GroupRecord]:
    """Sample, parse and score one group per sample."""
    rcfg = cfg.reward_config()
    label_only = bool(policy.meta.get("label_only"))
    if label_only and rcfg.kind != "accuracy":
        raise ConfigError("a label-only policy can only be aligned with the accuracy reward")
    prompts = [policy.vocab.encode_prompt(render_prompt(s).text) for s in samples]
    comps = policy.generate(prompts, temperature=cfg.temperature, seed=seed,
                            max_new_tokens=cfg.max_new_tokens, repeats=cfg.group_size)
    G = cfg.group_size
    parsed = []
    for j, c in enumerate(comps):
        s = samples[j // G]
        if label_only:
            lab = parse_label(c.text, s.task)
            c.parsed = lab
        else:
            c.parsed = parse_output(c.text, s.task)
        parsed.append(c.parsed)

    # judge calls for every valid output that needs one, batched
    judge_scores: dict[int, object] = {}
    if rcfg.kind == "dpua" and rcfg.reasoning_on:
        idx, reqs = [], []
        for j, c in enumerate(comps):
            s = samples[j // G]
            if needs_judge(s, rcfg) and not isinstance(c.parsed, ParseFailure):
                idx.append(j)
                reqs.append(JudgeRequest(s.task.value, c.parsed.rationale,
                                         s.ref_rationale.label_justification,
                                         s.ref_rationale.disagreement_cue))
        if reqs:
            if judge is None:
                judge = MockJudge()
            judge_scores = dict(zip(idx, judge.score_many(reqs)))

    groups = []
    for i, s in enumerate(samples):
        rewards = []
        for g in range(G):
            j = i * G + g
            out = parsed[j]
            if label_only:
                r = accuracy_reward(out, s.majority_label)
                rewards.append(RewardBreakdown(0.0, None, 0.0, r, out is not None))
            else:
                rewards.append(total_reward(out, s, judge_scores.get(j), rcfg))
        adv = group_advantages([r.r_total for r in rewards], cfg.eps_adv, cfg.std)
        groups.append(GroupRecord(s.id, prompts[i], comps[i * G:(i + 1) * G], rewards, adv))
    return groups


def _step_record(step: int, epoch: int, groups: Sequence[GroupRecord]) -> dict:
    rewards = [r for g in groups for r in g.rewards]
    maes = [r.mae for r in rewards if r.mae is not None]
    return {
        "kind": "step", "step": step, "epoch": epoch,
        "mean_r_rat": float(np.mean([r.r_rat for r in rewards])),
        "mean_r_cal": float(np.mean([r.r_cal for r in rewards])),
        "mean_reward": float(np.mean([r.r_total for r in rewards])),
        "mean_mae": float(np.mean(maes)) if maes else None,
        "parse_valid_rate": float(np.mean([r.parse_valid for r in rewards])),
        "mean_abs_adv": float(np.mean(np.abs(np.concatenate([g.advantages for g in groups])))),
    }


STATE_NAME = "ua_state.json"
OPT_NAME = "ua_optimizer.npz"


def _save_state(state_dir: Path, policy: Policy, step: int, epoch: int, offset: int) -> None:
    state_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(policy, state_dir / "latest", overwrite=True)
    opt = policy.optimizer_state()
    if opt is not None:
        arrays = {f"m{i}": a for i, a in enumerate(opt["m"])}
        arrays.update({f"v{i}": a for i, a in enumerate(opt["v"])})
        tmp = state_dir / (OPT_NAME + ".tmp.npz")
        np.savez(tmp, t=np.array(opt["t"]), **arrays)
        tmp.replace(state_dir / OPT_NAME)
    tmp = state_dir / (STATE_NAME + ".tmp")
    tmp.write_text(json.dumps({"step": step, "epoch": epoch, "offset": offset}))
    tmp.replace(state_dir / STATE_NAME)


def _load_state(state_dir: Path, policy: Policy):
    meta = json.loads((state_dir / STATE_NAME).read_text())
    restored = load_checkpoint(state_dir / "latest", expected_hash=policy.config_hash)
    opt_file = state_dir / OPT_NAME
    if opt_file.exists():
        with np.load(opt_file) as z:
            n = len(restored.parameters())
            restored.load_optimizer_state({"t": int(z["t"]), "m": [z[f"m{i}"] for i in range(n)],
                                           "v": [z[f"v{i}"] for i in range(n)]})
    return restored, meta


def train_ua(samples: Sequence[AnnotatedSample], policy: Policy, cfg: AlignConfig = AlignConfig(),
             judge=None, log_path: str | Path | None = None, state_dir: str | Path | None = None,
             resume: bool = False):
    """Refine ``policy`` with GRPO on the train split.

    Each step samples ``group_size`` completions for ``prompts_per_step``
    prompts, scores them, standardizes rewards per group and takes one
    gradient step. With ``state_dir`` the run saves resumable state every
    ``save_every`` steps; a judge failure leaves the last saved state intact.
    Returns ``(policy, log_records)``.
    """
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise EmptyBatch("dataset has no train split")
    if judge is None and cfg.reward != "accuracy" and cfg.reasoning_on:
        if cfg.judge == "remote":
            raise ConfigError("remote judge selected but no judge client supplied")
        judge = MockJudge()
    state_dir = Path(state_dir) if state_dir else None
    reference = policy.clone() if cfg.kl_coef else None

    step, start_epoch, start_offset = 0, 0, 0
    if resume and state_dir and (state_dir / STATE_NAME).exists():
        restored, meta = _load_state(state_dir, policy)
        policy.set_flat_parameters(restored.flat_parameters())
        policy.load_optimizer_state(restored.optimizer_state())
        step, start_epoch, start_offset = meta["step"], meta["epoch"], meta["offset"]
        log.info("resuming at step %d (epoch %d, offset %d)", step, start_epoch, start_offset)

    records = []
    sink = open(log_path, "a", encoding="utf-8") if log_path else None
    # position reached so far; a run capped by max_steps can be resumed from it
    pos_epoch, pos_offset = cfg.epochs, 0
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
            offset = start_offset if epoch == start_epoch else 0
            while offset < len(order):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                batch = [train[k] for k in order[offset:offset + cfg.prompts_per_step]]
                groups = rollout_groups(policy, batch, cfg, judge, seed=_step_seed(cfg.seed, step))
                policy.zero_grad()
                loss = policy_grpo_loss(policy, groups, cfg, reference)
                loss.backward()
                grads = _clip(policy.gradients(), cfg.max_grad_norm)
                apply_update(policy, grads, cfg.learning_rate)
                policy.zero_grad()
                step += 1
                offset += cfg.prompts_per_step
                rec = _step_record(step, epoch, groups)
                rec["loss"] = float(loss.detach())
                records.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                    sink.flush()
                if state_dir and (step % cfg.save_every == 0):
                    _save_state(state_dir, policy, step, epoch, offset)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                pos_epoch, pos_offset = (epoch, offset) if offset < len(order) else (epoch + 1, 0)
                break
    finally:
        if sink:
            sink.close()
    if state_dir:
        _save_state(state_dir, policy, step, pos_epoch, pos_offset)
    policy.meta.update({"phase": "ua", "align_config": asdict(cfg)})
    return policy, records
