"""Alignment-phase rewards and rationale judges.

Reward math is pure. Judges come in two flavours sharing one interface
(``score`` / ``score_many``): a deterministic token-overlap judge for
offline runs and an HTTP client for chat-completion style endpoints with
an on-disk response cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AnnotatedSample, DisagreementDistribution
from .errors import (
    ConfigError,
    EmptyReference,
    InputOutOfRange,
    InvalidDistribution,
    JudgeMalformedReply,
    JudgeUnavailable,
    LikertOutOfRange,
    MissingJudgeScores,
)
from .protocol import ParseFailure, StructuredOutput, model_distribution

log = logging.getLogger(__name__)

JUDGE_PROMPT_VERSION = "judge-prompt-v1"


# ---------------------------------------------------------------------------
# reward math

def normalize_likert(likert: int) -> float:
    if isinstance(likert, bool) or likert not in (1, 2, 3):
        raise LikertOutOfRange(f"Likert score must be 1, 2 or 3, got {likert!r}")
    return (likert - 1) / 2


@dataclass(frozen=True)
class JudgeScores:
    s_lab_likert: int
    s_cue_likert: int

    def __post_init__(self):
        normalize_likert(self.s_lab_likert)
        normalize_likert(self.s_cue_likert)

    @property
    def s_lab(self) -> float:
        return normalize_likert(self.s_lab_likert)

    @property
    def s_cue(self) -> float:
        return normalize_likert(self.s_cue_likert)


def reasoning_reward(agreement: float, s_lab: float, s_cue: float,
                     tau: float = 0.5, eps: float = 0.1) -> float:
    """Agreement-weighted mix of the two judge scores, in [0, 1].

    The two weights add up to the normalizer, so the result is a convex
    combination of ``s_lab`` and ``s_cue``.
    """
    if not 0.5 <= agreement <= 1.0:
        raise InputOutOfRange(f"agreement {agreement} not in [0.5, 1]")
    for v in (s_lab, s_cue):
        if not 0.0 <= v <= 1.0:
            raise InputOutOfRange(f"judge score {v} not in [0, 1]")
    w_lab = agreement - tau + eps
    w_cue = 1.0 - agreement + eps
    return (w_lab * s_lab + w_cue * s_cue) / (1.0 - tau + 2.0 * eps)


def _as_pair(p) -> np.ndarray:
    if isinstance(p, DisagreementDistribution):
        return p.as_array()
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (2,) or np.any(arr < 0) or np.any(arr > 1) or abs(arr.sum() - 1.0) > 1e-9:
        raise InvalidDistribution(f"not a binary distribution: {p!r}")
    return arr


def calibration_mae(p_model, p_human) -> float:
    """Half the L1 distance between two binary distributions."""
    m, h = _as_pair(p_model), _as_pair(p_human)
    return 0.5 * float(np.abs(m - h).sum())


def calibration_reward(mae: float) -> float:
    if not 0.0 <= mae <= 1.0:
        raise InputOutOfRange(f"MAE {mae} not in [0, 1]")
    return 1.0 - mae


def accuracy_reward(prediction: str | None, majority_label: str) -> float:
    """+1 for a correct label, -1 otherwise (unparsable output included)."""
    return 1.0 if prediction is not None and prediction == majority_label else -1.0


@dataclass(frozen=True)
class RewardConfig:
    tau: float = 0.5
    eps: float = 0.1
    reasoning_on: bool = True
    calibration_on: bool = True
    kind: str = "dpua"  # or "accuracy"

    def __post_init__(self):
        if self.kind not in ("dpua", "accuracy"):
            raise ConfigError(f"reward kind must be 'dpua' or 'accuracy', got {self.kind!r}")
        if self.kind == "dpua" and not (self.reasoning_on or self.calibration_on):
            raise ConfigError("both reward components disabled; reward would be identically 0")


@dataclass(frozen=True)
class RewardBreakdown:
    r_rat: float
    mae: float | None
    r_cal: float
    r_total: float
    parse_valid: bool


def needs_judge(sample: AnnotatedSample, cfg: RewardConfig) -> bool:
    return cfg.kind == "dpua" and cfg.reasoning_on and sample.ref_rationale is not None


def total_reward(output: StructuredOutput | ParseFailure, sample: AnnotatedSample,
                 judge: JudgeScores | None, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Reward for one sampled output.

    Samples without a reference rationale take no reasoning component.
    Unparsable outputs score 0 (or -1 under the accuracy reward).
    """
    valid = isinstance(output, StructuredOutput)
    if cfg.kind == "accuracy":
        r = accuracy_reward(output.prediction if valid else None, sample.majority_label)
        return RewardBreakdown(0.0, None, 0.0, r, valid)
    if not valid:
        return RewardBreakdown(0.0, None, 0.0, 0.0, False)
    r_rat = 0.0
    if needs_judge(sample, cfg):
        if judge is None:
            raise MissingJudgeScores(f"reasoning reward enabled but no judge scores for {sample.id!r}")
        r_rat = reasoning_reward(sample.agreement, judge.s_lab, judge.s_cue, cfg.tau, cfg.eps)
    mae = calibration_mae(model_distribution(output.prediction, output.confidence), sample.dist)
    r_cal = calibration_reward(mae) if cfg.calibration_on else 0.0
    return RewardBreakdown(r_rat, mae, r_cal, r_rat + r_cal, True)


# ---------------------------------------------------------------------------
# judges

@dataclass(frozen=True)
class JudgeRequest:
    task: str
    generated_rationale: str
    reference_label_justification: str
    reference_disagreement_cue: str

    def to_wire(self) -> dict:
        return asdict(self)


_WORDS = re.compile(r"\w+")


def _token_f1(generated: str, reference: str) -> float:
    gen = Counter(t.lower() for t in _WORDS.findall(generated))
    ref = Counter(t.lower() for t in _WORDS.findall(reference))
    overlap = sum((gen & ref).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(gen.values())
    recall = overlap / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


def _f1_to_likert(f1: float, thresholds: tuple[float, float]) -> int:
    low, high = thresholds
    if f1 < low:
        return 1
    if f1 < high:
        return 2
    return 3


def mock_judge(generated_rationale: str, ref_lab: str, ref_cue: str,
               thresholds: tuple[float, float] = (0.2, 0.5)) -> JudgeScores:
    """Deterministic offline judge scoring token-overlap F1 per aspect."""
    if not ref_lab.strip() or not ref_cue.strip():
        raise EmptyReference("reference components must be non-empty")
    return JudgeScores(_f1_to_likert(_token_f1(generated_rationale, ref_lab), thresholds),
                       _f1_to_likert(_token_f1(generated_rationale, ref_cue), thresholds))


class MockJudge:
    name = "mock"

    def __init__(self, thresholds: tuple[float, float] = (0.2, 0.5)):
        self.thresholds = tuple(thresholds)

    def score(self, request: JudgeRequest) -> JudgeScores:
        return mock_judge(request.generated_rationale, request.reference_label_justification,
                          request.reference_disagreement_cue, self.thresholds)

    def score_many(self, requests: Sequence[JudgeRequest]) -> list[JudgeScores]:
        return [self.score(r) for r in requests]


@lru_cache(maxsize=None)
def judge_system_prompt() -> str:
    return resources.files("dpua").joinpath("assets/judge_system.txt").read_text(encoding="utf-8").strip()


def judge_user_message(request: JudgeRequest) -> str:
    return (f"Task: {request.task}\n"
            f"Generated rationale: {request.generated_rationale}\n"
            f"Reference label justification: {request.reference_label_justification}\n"
            f"Reference disagreement cue: {request.reference_disagreement_cue}")


_SCORE_RE = {k: re.compile(rf"\b{k}\b\W{{0,3}}\s*[:=]\s*\"?(-?\d+(?:\.\d+)?)", re.IGNORECASE)
             for k in ("s_lab", "s_cue")}


def parse_judge_reply(content) -> JudgeScores:
    """Read two Likert integers from a JSON object or ``s_lab: n`` text."""
    values = {}
    obj = content
    if isinstance(content, str):
        obj = None
        start, end = content.find("{"), content.rfind("}")
        if start != -1 and end > start:
            try:
                obj = json.loads(content[start:end + 1])
            except json.JSONDecodeError:
                obj = None
    if isinstance(obj, dict):
        values = {k: obj.get(k) for k in ("s_lab", "s_cue")}
    elif isinstance(content, str):
        for k, rx in _SCORE_RE.items():
            m = rx.search(content)
            values[k] = m.group(1) if m else None
    out = []
    for k in ("s_lab", "s_cue"):
        v = values.get(k)
        if isinstance(v, str) and re.fullmatch(r"-?\d+", v.strip()):
            v = int(v)
        if isinstance(v, bool) or not isinstance(v, int) or v not in (1, 2, 3):
            raise JudgeMalformedReply(f"{k} missing or outside {{1, 2, 3}}: {v!r}")
        out.append(v)
    return JudgeScores(*out)


class JudgeCache:
    """Content-addressed JSON store; reads are lock-free, writes serialized."""

    def __init__(self, directory: str | Path | None):
        self.directory = Path(directory) if directory else None
        self._mem: dict[str, JudgeScores] = {}
        self._lock = threading.Lock()
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> JudgeScores | None:
        if key in self._mem:
            return self._mem[key]
        if self.directory:
            f = self.directory / f"{key}.json"
            if f.exists():
                data = json.loads(f.read_text(encoding="utf-8"))
                scores = JudgeScores(data["s_lab"], data["s_cue"])
                self._mem[key] = scores
                return scores
        return None

    def put(self, key: str, scores: JudgeScores) -> None:
        with self._lock:
            self._mem[key] = scores
            if self.directory:
                fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump({"s_lab": scores.s_lab_likert, "s_cue": scores.s_cue_likert}, fh)
                os.replace(tmp, self.directory / f"{key}.json")


class _Retryable(Exception):
    pass


class RemoteJudge:
    """HTTP judge client.

    ``protocol="wire"`` posts the request object and expects
    ``{"s_lab": n, "s_cue": n}`` back; ``protocol="chat"`` wraps the request
    in a chat-completion payload with the system prompt asset and parses the
    first choice's message content.
    """

    name = "remote"

    def __init__(self, url: str, key: str | None = None, protocol: str = "chat",
                 model: str = "gpt-4o-mini", cache_dir: str | Path | None = None,
                 max_retries: int = 3, backoff: float = 0.5, timeout: float = 30.0,
                 max_workers: int = 4, min_interval: float = 0.0, client=None, sleep=time.sleep):
        if protocol not in ("chat", "wire"):
            raise ConfigError(f"unknown judge protocol {protocol!r}")
        if not url:
            raise ConfigError("judge endpoint URL is not configured")
        import httpx

        self.url = url
        self.key = key
        self.protocol = protocol
        self.model = model
        self.cache = JudgeCache(cache_dir)
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_workers = max_workers
        self.min_interval = min_interval
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._rate_lock = threading.Lock()
        self._last_call = 0.0
        self.calls = 0

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteJudge":
        url = os.environ.get("DPUA_JUDGE_URL")
        if not url:
            raise ConfigError("DPUA_JUDGE_URL is not set")
        return cls(url, os.environ.get("DPUA_JUDGE_KEY"), **kwargs)

    def cache_key(self, request: JudgeRequest) -> str:
        payload = json.dumps({"v": JUDGE_PROMPT_VERSION, "protocol": self.protocol,
                              "model": self.model, "request": request.to_wire()}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _payload(self, request: JudgeRequest) -> dict:
        if self.protocol == "wire":
            return request.to_wire()
        return {"model": self.model, "temperature": 0,
                "messages": [{"role": "system", "content": judge_system_prompt()},
                             {"role": "user", "content": judge_user_message(request)}]}

    def _wait_turn(self):
        if self.min_interval <= 0:
            return
        with self._rate_lock:
            delay = self._last_call + self.min_interval - time.monotonic()
            if delay > 0:
                self._sleep(delay)
            self._last_call = time.monotonic()

    def _post(self, payload: dict):
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        self._wait_turn()
        self.calls += 1
        try:
            resp = self._client.post(self.url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            raise _Retryable(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Retryable(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise JudgeUnavailable(f"judge endpoint rejected the request: HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError:
            raise JudgeMalformedReply("judge reply is not JSON") from None

    def _extract(self, body) -> JudgeScores:
        if self.protocol == "wire":
            if not isinstance(body, dict):
                raise JudgeMalformedReply("wire reply must be an object")
            return parse_judge_reply(body)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise JudgeMalformedReply("chat reply lacks choices[0].message.content") from None
        return parse_judge_reply(content)

    def score(self, request: JudgeRequest) -> JudgeScores:
        key = self.cache_key(request)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        payload = self._payload(request)
        last_error = None
        for attempt in range(self.max_retries + 1):
            try:
                body = self._post(payload)
                break
            except _Retryable as exc:
                last_error = exc
                if attempt < self.max_retries:
                    self._sleep(self.backoff * (2 ** attempt))
        else:
            raise JudgeUnavailable(f"judge unreachable after {self.max_retries + 1} attempts: {last_error}")
        scores = self._extract(body)
        self.cache.put(key, scores)
        return scores

    def score_many(self, requests: Sequence[JudgeRequest]) -> list[JudgeScores]:
        if self.max_workers <= 1 or len(requests) <= 1:
            return [self.score(r) for r in requests]
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            return list(pool.map(self.score, requests))
