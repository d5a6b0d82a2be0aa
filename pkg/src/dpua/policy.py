"""Trainable autoregressive policy.

``Policy`` wraps a small pre-LayerNorm decoder-only transformer over a
word-level vocabulary. It exposes teacher-forced per-token
log-probabilities, temperature sampling with a KV cache, a first-order
update rule fed with externally computed gradients, and a two-file
checkpoint format (JSON manifest + little-endian float32 blob).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    CorruptCheckpoint,
    InvalidTemperature,
    MalformedTarget,
    NonFiniteGradient,
    SequenceTooLong,
    ShapeMismatch,
    TokenOutOfVocabulary,
    VersionMismatch,
)
from .tokenizer import Vocabulary, tokenize_with_spans

MAGIC = b"DPUA1"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    dtype: str = "float32"
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def arch(self) -> dict:
        return {k: getattr(self, k) for k in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len")}


def config_hash(vocab: Vocabulary, cfg: PolicyConfig) -> str:
    payload = json.dumps({"vocab": list(vocab.tokens), "arch": cfg.arch(),
                          "format_version": FORMAT_VERSION}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, d_ff)
        self.fc2 = nn.Linear(d_ff, d)

    def forward(self, x, past=None, key_mask=None):
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(b, t, h, d // h).transpose(1, 2)
        k = k.view(b, t, h, d // h).transpose(1, 2)
        v = v.view(b, t, h, d // h).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        total = k.shape[2]
        if key_mask is None and past is None:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            # query i sits at absolute index total - t + i
            qi = torch.arange(total - t, total).unsqueeze(1)
            kj = torch.arange(total).unsqueeze(0)
            allowed = kj <= qi
            if key_mask is not None:
                # a query always sees itself, so left-padding rows stay finite
                allowed = (allowed & key_mask[:, None, None, :]) | (kj == qi)
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        y = y.transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, (k, v)


class TinyDecoder(nn.Module):
    def __init__(self, vocab_size: int, cfg: PolicyConfig):
        super().__init__()
        if cfg.d_model % cfg.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.tok = nn.Embedding(vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg.d_model, cfg.n_heads, cfg.d_ff)
                                    for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, vocab_size)

    def forward(self, ids, positions, past=None, key_mask=None):
        x = self.tok(ids) + self.pos(positions)
        new_past = []
        for i, block in enumerate(self.blocks):
            x, kv = block(x, None if past is None else past[i], key_mask)
            new_past.append(kv)
        return self.head(self.ln_f(x)), new_past


@dataclass
class SampledCompletion:
    tokens: list[int]
    logprobs: np.ndarray
    text: str
    finished: bool
    parsed: object = None


class Policy:
    """A trainable policy: vocabulary, network and optimizer state."""

    def __init__(self, vocab: Vocabulary, config: PolicyConfig | None = None,
                 init: str = "random", meta: dict | None = None):
        self.vocab = vocab
        self.config = config or PolicyConfig()
        self.meta = dict(meta or {})
        self.dtype = _DTYPES[self.config.dtype]
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(self.config.seed)
        try:
            self.model = TinyDecoder(len(vocab), self.config).to(self.dtype)
            for name, p in self.model.named_parameters():
                if name.endswith("weight") and p.dim() == 2:
                    nn.init.normal_(p, std=0.02)
                elif name.endswith("bias"):
                    nn.init.zeros_(p)
        finally:
            torch.random.set_rng_state(gen_state)
        if init == "uniform":
            with torch.no_grad():
                self.model.head.weight.zero_()
                self.model.head.bias.zero_()
        elif init != "random":
            raise ValueError(f"unknown init {init!r}")
        self.model.eval()
        self._opt_state: dict | None = None

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        return list(self.model.named_parameters())

    def parameters(self) -> list[torch.Tensor]:
        return [p for _, p in self.named_parameters()]

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def config_hash(self) -> str:
        return config_hash(self.vocab, self.config)

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def set_flat_parameters(self, flat: torch.Tensor) -> None:
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(flat[offset:offset + n].view_as(p))
                offset += n

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def gradients(self) -> list[torch.Tensor]:
        return [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
                for p in self.parameters()]

    def clone(self) -> "Policy":
        other = Policy(self.vocab, self.config, meta=self.meta)
        other.set_flat_parameters(self.flat_parameters())
        if self._opt_state is not None:
            other._opt_state = {k: ([t.clone() for t in v] if isinstance(v, list) else v)
                                for k, v in self._opt_state.items()}
        return other

    # -- optimizer state ------------------------------------------------------

    def optimizer_state(self) -> dict | None:
        if self._opt_state is None:
            return None
        return {"t": self._opt_state["t"],
                "m": [t.detach().cpu().numpy().copy() for t in self._opt_state["m"]],
                "v": [t.detach().cpu().numpy().copy() for t in self._opt_state["v"]]}

    def load_optimizer_state(self, state: dict | None) -> None:
        if state is None:
            self._opt_state = None
            return
        self._opt_state = {"t": int(state["t"]),
                           "m": [torch.as_tensor(a, dtype=self.dtype) for a in state["m"]],
                           "v": [torch.as_tensor(a, dtype=self.dtype) for a in state["v"]]}

    # -- validation -----------------------------------------------------------

    def _check_ids(self, ids: Sequence[int]) -> None:
        v = len(self.vocab)
        for i in ids:
            if not 0 <= int(i) < v:
                raise TokenOutOfVocabulary(f"token id {i} outside vocabulary of size {v}")

    # -- scoring ----------------------------------------------------------------

    def batch_logprobs(self, prompts: Sequence[Sequence[int]],
                       targets: Sequence[Sequence[int]]) -> list[torch.Tensor]:
        """Teacher-forced log-probabilities of each target token, with grad.

        Sequences are right-padded; causal attention keeps padding from
        influencing real positions.
        """
        if len(prompts) != len(targets):
            raise ValueError("prompts and targets differ in length")
        seqs = []
        for p, t in zip(prompts, targets):
            if len(p) == 0:
                raise ValueError("prompt must contain at least one token")
            self._check_ids(p)
            self._check_ids(t)
            if len(p) + len(t) > self.config.max_seq_len:
                raise SequenceTooLong(f"{len(p) + len(t)} tokens > max_seq_len "
                                      f"{self.config.max_seq_len}")
            seqs.append(list(p) + list(t))
        if not seqs:
            return []
        width = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), width), self.vocab.pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = torch.tensor(s, dtype=torch.long)
        positions = torch.arange(width).unsqueeze(0).expand(len(seqs), -1)
        logits, _ = self.model(ids, positions)
        logp = torch.log_softmax(logits, dim=-1)
        out = []
        for i, (p, t) in enumerate(zip(prompts, targets)):
            if len(t) == 0:
                out.append(logp.new_zeros(0))
                continue
            rows = logp[i, len(p) - 1:len(p) - 1 + len(t)]
            out.append(rows.gather(1, torch.tensor(list(t), dtype=torch.long).unsqueeze(1)).squeeze(1))
        return out

    def next_token_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        self._check_ids(prefix)
        with torch.no_grad():
            ids = torch.tensor([list(prefix)], dtype=torch.long)
            logits, _ = self.model(ids, torch.arange(len(prefix)).unsqueeze(0))
            return torch.log_softmax(logits[0, -1].double(), dim=-1).numpy()

    # -- generation -------------------------------------------------------------

    def generate(self, prompts: Sequence[Sequence[int]], temperature: float = 1.0,
                 seed: int = 0, max_new_tokens: int = 128, greedy: bool = False,
                 repeats: int = 1) -> list[SampledCompletion]:
        """Decode every prompt ``repeats`` times in one left-padded batch.

        Log-probabilities are recorded under the untempered distribution.
        Output order is prompt-major: all repeats of prompt 0 come first.
        """
        if not greedy and not (temperature > 0 and math.isfinite(temperature)):
            raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
        rows = []
        for p in prompts:
            if len(p) == 0:
                raise ValueError("prompt must contain at least one token")
            if len(p) >= self.config.max_seq_len:
                raise SequenceTooLong(f"prompt of {len(p)} tokens leaves no room to generate")
            self._check_ids(p)
            rows.extend([list(p)] * repeats)
        if not rows:
            return []
        gen = torch.Generator().manual_seed(int(seed))
        b = len(rows)
        width = max(len(r) for r in rows)
        ids = torch.full((b, width), self.vocab.pad_id, dtype=torch.long)
        key_mask = torch.zeros((b, width), dtype=torch.bool)
        for i, r in enumerate(rows):
            ids[i, width - len(r):] = torch.tensor(r, dtype=torch.long)
            key_mask[i, width - len(r):] = True
        positions = (key_mask.long().cumsum(1) - 1).clamp(min=0)
        budget = min(max_new_tokens, self.config.max_seq_len - max(len(r) for r in rows))
        lengths = torch.tensor([len(r) for r in rows])

        out_tokens = [[] for _ in range(b)]
        out_logps = [[] for _ in range(b)]
        done = torch.zeros(b, dtype=torch.bool)
        eos = self.vocab.eos_id
        with torch.no_grad():
            logits, past = self.model(ids, positions, key_mask=key_mask)
            last = logits[:, -1]
            for step in range(budget):
                logp = torch.log_softmax(last.double(), dim=-1)
                if greedy:
                    nxt = logp.argmax(dim=-1)
                else:
                    scaled = torch.log_softmax(last.double() / temperature, dim=-1)
                    nxt = torch.multinomial(scaled.exp(), 1, generator=gen).squeeze(1)
                chosen = logp.gather(1, nxt.unsqueeze(1)).squeeze(1)
                for i in range(b):
                    if not done[i]:
                        out_tokens[i].append(int(nxt[i]))
                        out_logps[i].append(float(chosen[i]))
                done |= nxt == eos
                if bool(done.all()) or step == budget - 1:
                    break
                key_mask = torch.cat([key_mask, torch.ones((b, 1), dtype=torch.bool)], dim=1)
                pos = (lengths + step).unsqueeze(1)
                logits, past = self.model(nxt.unsqueeze(1), pos, past=past, key_mask=key_mask)
                last = logits[:, -1]
        results = []
        for toks, lps in zip(out_tokens, out_logps):
            finished = bool(toks) and toks[-1] == eos
            results.append(SampledCompletion(tokens=toks, logprobs=np.array(lps),
                                             text=self.vocab.decode(toks), finished=finished))
        return results


# ---------------------------------------------------------------------------
# functional surface

def token_logprobs(policy: Policy, prompt: Sequence[int], target: Sequence[int]) -> np.ndarray:
    """Per-token log-probabilities of ``target`` given ``prompt`` (float64)."""
    if len(target) == 0:
        policy._check_ids(prompt)
        return np.zeros(0)
    with torch.no_grad():
        return policy.batch_logprobs([prompt], [target])[0].double().numpy()


def sample_group(policy: Policy, prompt: Sequence[int], G: int = 8, temperature: float = 1.0,
                 seed: int = 0, max_new_tokens: int = 128) -> list[SampledCompletion]:
    if G < 2:
        raise ValueError("group size must be at least 2")
    return policy.generate([prompt], temperature=temperature, seed=seed,
                           max_new_tokens=max_new_tokens, repeats=G)


def greedy_decode(policy: Policy, prompts: Sequence[Sequence[int]],
                  max_new_tokens: int = 128) -> list[SampledCompletion]:
    return policy.generate(prompts, greedy=True, max_new_tokens=max_new_tokens)


def apply_update(policy: Policy, gradient: Sequence, learning_rate: float) -> Policy:
    """One in-place first-order step; returns ``policy`` for chaining."""
    params = policy.parameters()
    if len(gradient) != len(params):
        raise ShapeMismatch(f"expected {len(params)} gradient arrays, got {len(gradient)}")
    grads = []
    for g, p in zip(gradient, params):
        g = torch.as_tensor(np.asarray(g) if not isinstance(g, torch.Tensor) else g, dtype=p.dtype)
        if tuple(g.shape) != tuple(p.shape):
            raise ShapeMismatch(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("gradient contains NaN or inf")
        grads.append(g)
    cfg = policy.config
    with torch.no_grad():
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p.sub_(learning_rate * g)
        elif cfg.optimizer == "adam":
            st = policy._opt_state
            if st is None:
                st = policy._opt_state = {"t": 0, "m": [torch.zeros_like(p) for p in params],
                                          "v": [torch.zeros_like(p) for p in params]}
            st["t"] += 1
            t = st["t"]
            c1 = 1 - cfg.beta1 ** t
            c2 = 1 - cfg.beta2 ** t
            for p, g, m, v in zip(params, grads, st["m"], st["v"]):
                m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
                v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
                p.sub_(learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps))
        else:
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    return policy


# ---------------------------------------------------------------------------
# target segmentation

@dataclass(frozen=True)
class SegmentedTarget:
    token_ids: tuple[int, ...]
    label: tuple[int, ...]
    rationale: tuple[int, ...]
    confidence: tuple[int, ...]

    def spans(self) -> dict[str, tuple[int, ...]]:
        return {"label": self.label, "rat": self.rationale, "conf": self.confidence}


_FIELD_NAMES = ("Prediction", "Rationale", "Confidence")


def segment_spans(target_text: str, vocab: Vocabulary, require_all: bool = True) -> SegmentedTarget:
    """Tokenize a serialized target and split it into field segments.

    A field's name, its colon and the newline preceding it belong to that
    field's segment. The trailing end token belongs to the last segment.
    With ``require_all=False`` a label-only target is accepted.
    """
    toks = tokenize_with_spans(target_text)
    starts = {}
    for i, (tok, _, _) in enumerate(toks):
        if tok in _FIELD_NAMES and tok not in starts and i + 1 < len(toks) and toks[i + 1][0] == ":":
            if i == 0 or toks[i - 1][0] == "\n":
                starts[tok] = i - 1 if i > 0 else 0
    if "Prediction" not in starts or starts["Prediction"] != 0:
        raise MalformedTarget("target must start with a Prediction field")
    present = [f for f in _FIELD_NAMES if f in starts]
    if require_all and len(present) != 3:
        missing = [f for f in _FIELD_NAMES if f not in starts]
        raise MalformedTarget(f"target lacks field(s) {missing}")
    order = [starts[f] for f in present]
    if order != sorted(order):
        raise MalformedTarget("fields out of order")
    ids = [vocab.id(t) for t, _, _ in toks] + [vocab.eos_id]
    bounds = order + [len(ids)]
    segs = {}
    for k, (f, lo, hi) in enumerate(zip(present, bounds[:-1], bounds[1:])):
        scaffold = (2 if lo == 0 else 3) + (1 if k == len(present) - 1 else 0)
        if hi - lo <= scaffold:
            raise MalformedTarget(f"field {f} is empty")
        segs[f] = tuple(range(lo, hi))
    return SegmentedTarget(tuple(ids), segs["Prediction"], segs.get("Rationale", ()),
                           segs.get("Confidence", ()))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(policy: Policy, path: str | os.PathLike, overwrite: bool = False) -> Path:
    """Write ``path/manifest.json`` and ``path/params.bin`` atomically."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"checkpoint {path} already exists")
    names, shapes, chunks = [], [], []
    for name, p in policy.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        chunks.append(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    blob = MAGIC + b"".join(chunks)
    manifest = {
        "magic": MAGIC.decode(),
        "format_version": FORMAT_VERSION,
        "config": asdict(policy.config),
        "config_hash": policy.config_hash,
        "vocab": list(policy.vocab.tokens),
        "params": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": policy.meta,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        (tmp / BLOB_NAME).write_bytes(blob)
        (tmp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path: str | os.PathLike, expected_vocab: Vocabulary | None = None,
                    expected_hash: str | None = None) -> Policy:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
        blob = (path / BLOB_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptCheckpoint(f"missing checkpoint file: {exc.filename}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC.decode():
        raise CorruptCheckpoint("manifest lacks the DPUA1 magic")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {manifest.get('format_version')} != {FORMAT_VERSION}")
    if not blob.startswith(MAGIC):
        raise CorruptCheckpoint("parameter blob lacks the DPUA1 magic")
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CorruptCheckpoint("parameter blob digest mismatch (truncated or modified)")
    try:
        vocab = Vocabulary(tuple(manifest["vocab"]))
        cfg = PolicyConfig(**{**manifest["config"], "dtype": "float32"})
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"invalid manifest: {exc}") from None
    if config_hash(vocab, cfg) != manifest.get("config_hash"):
        raise CorruptCheckpoint("config hash does not match manifest contents")
    if expected_vocab is not None and tuple(expected_vocab.tokens) != vocab.tokens:
        raise VersionMismatch("checkpoint vocabulary differs from the expected vocabulary")
    if expected_hash is not None and expected_hash != manifest["config_hash"]:
        raise VersionMismatch("checkpoint config hash differs from the expected hash")

    policy = Policy(vocab, cfg, meta=manifest.get("meta") or {})
    entries = manifest["params"]
    named = policy.named_parameters()
    if [e["name"] for e in entries] != [n for n, _ in named]:
        raise CorruptCheckpoint("parameter names do not match the architecture")
    body = memoryview(blob)[len(MAGIC):]
    expected = sum(int(np.prod(e["shape"])) for e in entries) * 4
    if len(body) != expected:
        raise CorruptCheckpoint(f"parameter blob holds {len(body)} bytes, expected {expected}")
    offset = 0
    with torch.no_grad():
        for e, (_, p) in zip(entries, named):
            if list(p.shape) != e["shape"]:
                raise CorruptCheckpoint(f"shape mismatch for {e['name']}")
            n = int(np.prod(e["shape"]))
            arr = np.frombuffer(body[offset:offset + 4 * n], dtype="<f4").reshape(e["shape"])
            p.copy_(torch.from_numpy(arr.copy()))
            offset += 4 * n
    return policy


def checkpoint_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256((Path(path) / BLOB_NAME).read_bytes()).hexdigest()
