import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dpua.errors import (
    CorruptCheckpoint,
    InvalidTemperature,
    MalformedTarget,
    NonFiniteGradient,
    SequenceTooLong,
    ShapeMismatch,
    TokenOutOfVocabulary,
    VersionMismatch,
)
from dpua.policy import (
    Policy,
    PolicyConfig,
    apply_update,
    greedy_decode,
    load_checkpoint,
    sample_group,
    save_checkpoint,
    segment_spans,
    token_logprobs,
)
from dpua.protocol import render_prompt, serialize_target
from dpua.tokenizer import Vocabulary, detokenize, tokenize


class TestTokenizer:
    def test_confidence_literal_is_one_token(self):
        assert tokenize("Confidence: 0.75") == ["Confidence", ":", "0.75"]

    def test_hyphenated_label(self):
        assert tokenize("Prediction: Non-offensive") == ["Prediction", ":", "Non-offensive"]

    def test_specials_first(self):
        v = Vocabulary.build(["a b a"])
        assert v.tokens[:5] == ("<pad>", "<unk>", "<bos>", "<eos>", "<sep>")
        assert v.tokens[5] == "a"

    @given(st.lists(st.sampled_from(["Prediction", ":", "Offensive", "\n", "0.75", "the", "."]),
                    max_size=30))
    def test_detokenize_round_trip(self, toks):
        text = detokenize(toks)
        assert tokenize(text) == [t for t in toks]

    def test_unknown_maps_to_unk(self):
        v = Vocabulary.build(["a"])
        assert v.encode("zzz") == [v.unk_id]


def probe(policy, corpus, n=3):
    prompts = [policy.vocab.encode_prompt(render_prompt(s).text) for s in corpus[:n]]
    targets = [policy.vocab.encode_target(serialize_target(s)) for s in corpus[:n]]
    return prompts, targets


class TestLogprobs:
    def test_uniform_policy(self, vocab, corpus):
        pol = Policy(vocab, PolicyConfig(d_model=16, n_heads=2, d_ff=32, dtype="float64"), init="uniform")
        prompts, targets = probe(pol, corpus, 1)
        lp = token_logprobs(pol, prompts[0], targets[0])
        np.testing.assert_allclose(lp, -math.log(len(vocab)), atol=1e-12)

    def test_empty_target(self, small_policy, corpus):
        prompts, _ = probe(small_policy, corpus, 1)
        assert token_logprobs(small_policy, prompts[0], []).shape == (0,)

    def test_batched_equals_single(self, small_policy, corpus):
        prompts, targets = probe(small_policy, corpus, 3)
        with torch.no_grad():
            batched = small_policy.batch_logprobs(prompts, targets)
        for p, t, b in zip(prompts, targets, batched):
            np.testing.assert_allclose(token_logprobs(small_policy, p, t), b.double().numpy(), atol=1e-5)

    def test_next_token_consistent(self, small_policy, corpus):
        prompts, targets = probe(small_policy, corpus, 1)
        lp = token_logprobs(small_policy, prompts[0], targets[0])
        nxt = small_policy.next_token_logprobs(prompts[0])
        assert nxt[targets[0][0]] == pytest.approx(lp[0], abs=1e-5)

    def test_out_of_vocab_and_too_long(self, small_policy):
        with pytest.raises(TokenOutOfVocabulary):
            token_logprobs(small_policy, [2, 10_000], [3])
        with pytest.raises(SequenceTooLong):
            token_logprobs(small_policy, [2] * 600, [3])

    def test_memorize_one_pair(self, vocab, corpus):
        pol = Policy(vocab, PolicyConfig(d_model=32, n_heads=2, d_ff=64, seed=0))
        prompts, targets = probe(pol, corpus, 1)
        for _ in range(150):
            pol.zero_grad()
            loss = -pol.batch_logprobs(prompts, targets)[0].mean()
            loss.backward()
            apply_update(pol, pol.gradients(), 3e-3)
        assert token_logprobs(pol, prompts[0], targets[0]).mean() > -0.1


class TestSampling:
    def test_fixed_seed_is_deterministic(self, small_policy, corpus):
        prompts, _ = probe(small_policy, corpus, 1)
        a = sample_group(small_policy, prompts[0], G=8, seed=5, max_new_tokens=12)
        b = sample_group(small_policy, prompts[0], G=8, seed=5, max_new_tokens=12)
        assert len(a) == 8
        assert [c.tokens for c in a] == [c.tokens for c in b]

    def test_low_temperature_matches_greedy(self, small_policy, corpus):
        prompts, _ = probe(small_policy, corpus, 1)
        greedy = greedy_decode(small_policy, prompts, max_new_tokens=12)[0].tokens
        group = sample_group(small_policy, prompts[0], G=4, temperature=1e-4, seed=1, max_new_tokens=12)
        assert all(c.tokens == greedy for c in group)

    def test_recorded_logprobs_match_teacher_forcing(self, small_policy, corpus):
        prompts, _ = probe(small_policy, corpus, 1)
        for c in sample_group(small_policy, prompts[0], G=3, seed=2, max_new_tokens=10):
            np.testing.assert_allclose(c.logprobs, token_logprobs(small_policy, prompts[0], c.tokens),
                                       atol=1e-4)

    def test_left_padding_does_not_change_output(self, small_policy, corpus):
        prompts, _ = probe(small_policy, corpus, 3)
        together = greedy_decode(small_policy, prompts, max_new_tokens=8)
        for p, t in zip(prompts, together):
            assert greedy_decode(small_policy, [p], max_new_tokens=8)[0].tokens == t.tokens

    def test_invalid_temperature(self, small_policy):
        with pytest.raises(InvalidTemperature):
            small_policy.generate([[2]], temperature=0.0)

    def test_group_needs_two(self, small_policy):
        with pytest.raises(ValueError):
            sample_group(small_policy, [2], G=1)

    def test_first_token_frequencies(self, vocab):
        pol = Policy(vocab, PolicyConfig(d_model=16, n_heads=2, d_ff=32, seed=4))
        with torch.no_grad():
            pol.model.head.bias.copy_(torch.linspace(0, 4, len(vocab)))
        prompt = [vocab.bos_id, vocab.sep_id]
        n = 100_000
        draws = pol.generate([prompt], seed=11, max_new_tokens=1, repeats=n)
        counts = np.bincount([c.tokens[0] for c in draws], minlength=len(vocab))
        p = np.exp(pol.next_token_logprobs(prompt))
        top = np.argsort(p)[-5:]
        se = np.sqrt(p[top] * (1 - p[top]) / n)
        assert np.all(np.abs(counts[top] / n - p[top]) < 3 * se)


class TestUpdate:
    def test_zero_gradient_keeps_parameters(self, vocab):
        pol = Policy(vocab, PolicyConfig(d_model=16, n_heads=2, d_ff=32, optimizer="sgd"))
        before = pol.flat_parameters().clone()
        apply_update(pol, [torch.zeros_like(p) for p in pol.parameters()], 0.1)
        assert torch.equal(before, pol.flat_parameters())

    def test_plain_descent_rule(self, vocab):
        pol = Policy(vocab, PolicyConfig(d_model=16, n_heads=2, d_ff=32, optimizer="sgd", dtype="float64"))
        before = [p.detach().clone() for p in pol.parameters()]
        g = [torch.randn_like(p) for p in pol.parameters()]
        apply_update(pol, g, 0.01)
        for b, gg, p in zip(before, g, pol.parameters()):
            torch.testing.assert_close(p.detach(), b - 0.01 * gg)

    def test_descent_decreases_loss(self, vocab, corpus):
        pol = Policy(vocab, PolicyConfig(d_model=16, n_heads=2, d_ff=32, optimizer="sgd", dtype="float64"))
        prompts, targets = probe(pol, corpus, 2)

        def loss():
            return -sum(t.sum() for t in pol.batch_logprobs(prompts, targets))

        pol.zero_grad()
        l0 = loss()
        l0.backward()
        apply_update(pol, pol.gradients(), 1e-3)
        with torch.no_grad():
            assert loss() < l0

    def test_rejects_bad_gradients(self, small_policy):
        params = small_policy.parameters()
        with pytest.raises(ShapeMismatch):
            apply_update(small_policy, [torch.zeros(1)] * len(params), 0.1)
        bad = [torch.zeros_like(p) for p in params]
        bad[0][0] = float("nan")
        with pytest.raises(NonFiniteGradient):
            apply_update(small_policy, bad, 0.1)


class TestSegments:
    def test_partition(self, vocab, corpus):
        seg = segment_spans(serialize_target(corpus[0]), vocab)
        parts = [set(seg.label), set(seg.rationale), set(seg.confidence)]
        assert all(parts)
        assert not (parts[0] & parts[1]) and not (parts[1] & parts[2]) and not (parts[0] & parts[2])
        assert set().union(*parts) == set(range(len(seg.token_ids)))

    def test_label_segment_size(self, vocab, corpus):
        seg = segment_spans(serialize_target(corpus[0]), vocab)
        # "Prediction" ":" <label> then the newline opens the next segment
        assert len(seg.label) == 3
        # "\n" "Confidence" ":" <literal> <eos>
        assert len(seg.confidence) == 5

    def test_missing_confidence(self, vocab):
        with pytest.raises(MalformedTarget):
            segment_spans("Prediction: Offensive\nRationale: rude.", vocab)

    def test_label_only_allowed_when_asked(self, vocab):
        seg = segment_spans("Prediction: Offensive", vocab, require_all=False)
        assert seg.rationale == () and len(seg.label) == 4


class TestCheckpoint:
    def test_round_trip(self, tmp_path, small_policy, corpus):
        small_policy.meta["phase"] = "dp"
        save_checkpoint(small_policy, tmp_path / "c")
        loaded = load_checkpoint(tmp_path / "c", expected_vocab=small_policy.vocab)
        prompts, targets = probe(small_policy, corpus, 2)
        for p, t in zip(prompts, targets):
            np.testing.assert_array_equal(token_logprobs(small_policy, p, t), token_logprobs(loaded, p, t))
        assert loaded.meta["phase"] == "dp"

    def test_no_overwrite(self, tmp_path, small_policy):
        save_checkpoint(small_policy, tmp_path / "c")
        with pytest.raises(FileExistsError):
            save_checkpoint(small_policy, tmp_path / "c")

    def test_truncated(self, tmp_path, small_policy):
        path = save_checkpoint(small_policy, tmp_path / "c")
        blob = (path / "params.bin").read_bytes()
        (path / "params.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "nothing")

    def test_other_vocabulary(self, tmp_path, small_policy):
        save_checkpoint(small_policy, tmp_path / "c")
        other = Vocabulary.build(["a completely different corpus"])
        with pytest.raises(VersionMismatch):
            load_checkpoint(tmp_path / "c", expected_vocab=other)

    def test_format_version(self, tmp_path, small_policy):
        import json

        path = save_checkpoint(small_policy, tmp_path / "c")
        m = json.loads((path / "manifest.json").read_text())
        m["format_version"] = 99
        (path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_identical_bytes_for_identical_policies(self, tmp_path, vocab):
        a = save_checkpoint(Policy(vocab, PolicyConfig(d_model=16, n_heads=2, d_ff=32, seed=9)), tmp_path / "a")
        b = save_checkpoint(Policy(vocab, PolicyConfig(d_model=16, n_heads=2, d_ff=32, seed=9)), tmp_path / "b")
        assert (a / "params.bin").read_bytes() == (b / "params.bin").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
