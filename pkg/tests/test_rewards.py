import json
from fractions import Fraction

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpua.data import AnnotatedSample, AnnotationCounts, RationalePair, TaskKind
from dpua.errors import (
    ConfigError,
    EmptyReference,
    InputOutOfRange,
    InvalidDistribution,
    JudgeMalformedReply,
    JudgeUnavailable,
    LikertOutOfRange,
    MissingJudgeScores,
)
from dpua.protocol import ParseFailure, StructuredOutput
from dpua.rewards import (
    JudgeRequest,
    JudgeScores,
    MockJudge,
    RemoteJudge,
    RewardConfig,
    accuracy_reward,
    calibration_mae,
    calibration_reward,
    mock_judge,
    normalize_likert,
    parse_judge_reply,
    reasoning_reward,
    total_reward,
)

from oracles import mae_oracle, reasoning_oracle

unit = st.floats(0.0, 1.0)
agreement = st.floats(0.5, 1.0)


class TestLikert:
    @pytest.mark.parametrize("k, v", [(1, 0.0), (2, 0.5), (3, 1.0)])
    def test_map(self, k, v):
        assert normalize_likert(k) == v

    @pytest.mark.parametrize("bad", [0, 4, 2.5, True, "2"])
    def test_out_of_scale(self, bad):
        with pytest.raises(LikertOutOfRange):
            normalize_likert(bad)


class TestReasoningReward:
    def test_examples(self):
        assert abs(reasoning_reward(0.6, 1.0, 0.0) - 0.2 / 0.7) < 1e-12
        assert abs(reasoning_reward(1.0, 0.0, 1.0) - 0.1 / 0.7) < 1e-12

    @given(st.fractions(Fraction(1, 2), 1), st.sampled_from([0, Fraction(1, 2), 1]),
           st.sampled_from([0, Fraction(1, 2), 1]))
    def test_exact_oracle(self, c, a, b):
        assert abs(reasoning_reward(float(c), float(a), float(b)) - float(reasoning_oracle(c, a, b))) < 1e-12

    @given(agreement, unit, unit)
    def test_convex_bound(self, c, a, b):
        r = reasoning_reward(c, a, b)
        assert min(a, b) - 1e-12 <= r <= max(a, b) + 1e-12

    @given(agreement, unit)
    def test_equal_scores_identity(self, c, s):
        assert reasoning_reward(c, s, s) == pytest.approx(s, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(InputOutOfRange):
            reasoning_reward(0.4, 1, 1)
        with pytest.raises(InputOutOfRange):
            reasoning_reward(0.6, 1.5, 1)


class TestCalibration:
    def test_examples(self):
        assert abs(calibration_mae([0.75, 0.25], [0.6, 0.4]) - 0.15) < 1e-12
        assert calibration_mae([0.3, 0.7], [0.3, 0.7]) == 0.0
        assert abs(calibration_mae([0.1, 0.9], [0.9, 0.1]) - 0.8) < 1e-12
        assert abs(calibration_reward(0.15) - 0.85) < 1e-12
        assert calibration_reward(0.0) == 1.0 and calibration_reward(1.0) == 0.0

    @given(unit, unit)
    def test_binary_identity_and_oracle(self, m, h):
        got = calibration_mae([m, 1 - m], [h, 1 - h])
        assert got == pytest.approx(abs(m - h), abs=1e-12)
        assert got == pytest.approx(float(mae_oracle([m, 1 - m], [h, 1 - h])), abs=1e-12)

    def test_not_a_distribution(self):
        with pytest.raises(InvalidDistribution):
            calibration_mae([0.5, 0.6], [0.5, 0.5])


def sample(pos=3, neg=2, rationale=True):
    rat = RationalePair("the post insults the manager", "the marker lol softens it") if rationale else None
    return AnnotatedSample("s", TaskKind.OFFENSE, "t", AnnotationCounts(pos, neg), ref_rationale=rat)


class TestTotalReward:
    def test_accuracy_reward(self):
        assert accuracy_reward("pos", "pos") == 1.0
        assert accuracy_reward("pos", "neg") == -1.0
        assert accuracy_reward(None, "neg") == -1.0

    def test_worked_sum(self):
        out = StructuredOutput("pos", "r", 0.75)
        br = total_reward(out, sample(), JudgeScores(3, 1))
        assert br.r_rat == pytest.approx(0.2 / 0.7, abs=1e-12)
        assert br.r_cal == pytest.approx(0.85, abs=1e-12)
        assert br.r_total == pytest.approx(0.2 / 0.7 + 0.85, abs=1e-12)

    def test_without_calibration(self):
        br = total_reward(StructuredOutput("pos", "r", 0.75), sample(), JudgeScores(3, 1),
                          RewardConfig(calibration_on=False))
        assert br.r_total == br.r_rat

    def test_parse_failure(self):
        br = total_reward(ParseFailure("MissingField", ""), sample(), None)
        assert br.r_total == 0.0 and not br.parse_valid
        acc = total_reward(ParseFailure("MissingField", ""), sample(), None, RewardConfig(kind="accuracy"))
        assert acc.r_total == -1.0

    def test_missing_scores(self):
        with pytest.raises(MissingJudgeScores):
            total_reward(StructuredOutput("pos", "r", 0.75), sample(), None)

    def test_no_reference_means_no_reasoning_term(self):
        br = total_reward(StructuredOutput("pos", "r", 0.6), sample(rationale=False), None)
        assert br.r_rat == 0.0 and br.r_total == pytest.approx(1.0)

    def test_both_off_rejected(self):
        with pytest.raises(ConfigError):
            RewardConfig(reasoning_on=False, calibration_on=False)


class TestMockJudge:
    def test_identical_and_disjoint(self):
        s = mock_judge("the post insults the manager", "the post insults the manager", "zebra crossing")
        assert (s.s_lab_likert, s.s_cue_likert) == (3, 1)

    def test_half_overlap(self):
        # recall 1/2, precision 1 -> F1 2/3
        s = mock_judge("alpha beta", "alpha beta gamma delta", "zzz")
        assert s.s_lab_likert == 3

    def test_empty_reference(self):
        with pytest.raises(EmptyReference):
            mock_judge("x", " ", "y")


def request(text="the post insults"):
    return JudgeRequest("offense", text, "the post insults the manager", "lol softens it")


def chat_reply(content):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


class TestRemoteJudge:
    def make(self, handler, **kw):
        client = httpx.Client(transport=httpx.MockTransport(handler))
        return RemoteJudge("http://judge.test/v1", key="k", client=client, sleep=lambda s: None, **kw)

    def test_chat_protocol_and_cache(self, tmp_path):
        seen = []

        def handler(req):
            body = json.loads(req.content)
            seen.append(body)
            assert req.headers["Authorization"] == "Bearer k"
            return chat_reply('{"s_lab": 3, "s_cue": 2}')

        judge = self.make(handler, cache_dir=tmp_path)
        a = judge.score(request())
        b = judge.score(request())
        assert (a.s_lab_likert, a.s_cue_likert) == (3, 2) and a == b
        assert len(seen) == 1 and judge.calls == 1
        assert seen[0]["messages"][0]["role"] == "system"
        fresh = self.make(lambda r: pytest.fail("cache should answer"), cache_dir=tmp_path)
        assert fresh.score(request()) == a

    def test_wire_protocol(self):
        def handler(req):
            body = json.loads(req.content)
            assert set(body) == {"task", "generated_rationale", "reference_label_justification",
                                 "reference_disagreement_cue"}
            return httpx.Response(200, json={"s_lab": 1, "s_cue": 3})

        assert self.make(handler, protocol="wire").score(request()).s_cue_likert == 3

    def test_out_of_scale_reply(self):
        judge = self.make(lambda r: chat_reply("s_lab: 4, s_cue: 2"))
        with pytest.raises(JudgeMalformedReply):
            judge.score(request())

    def test_timeouts_exhaust_retries(self):
        calls = []

        def handler(req):
            calls.append(1)
            raise httpx.ReadTimeout("slow", request=req)

        judge = self.make(handler, max_retries=3)
        with pytest.raises(JudgeUnavailable):
            judge.score(request())
        assert len(calls) == 4

    def test_server_error_then_success(self):
        replies = iter([httpx.Response(503), chat_reply("s_lab: 2\ns_cue: 2")])
        judge = self.make(lambda r: next(replies))
        assert judge.score(request()).s_lab_likert == 2

    def test_client_error_is_not_retried(self):
        calls = []

        def handler(req):
            calls.append(1)
            return httpx.Response(401)

        with pytest.raises(JudgeUnavailable):
            self.make(handler).score(request())
        assert len(calls) == 1

    def test_score_many_preserves_order(self):
        def handler(req):
            text = json.loads(req.content)["messages"][1]["content"]
            k = 3 if "three" in text else 1
            return chat_reply(json.dumps({"s_lab": k, "s_cue": k}))

        judge = self.make(handler, max_workers=4)
        out = judge.score_many([request("three"), request("one"), request("three again")])
        assert [s.s_lab_likert for s in out] == [3, 1, 3]

    def test_from_env(self, monkeypatch):
        monkeypatch.delenv("DPUA_JUDGE_URL", raising=False)
        with pytest.raises(ConfigError):
            RemoteJudge.from_env()
        monkeypatch.setenv("DPUA_JUDGE_URL", "http://x.test")
        monkeypatch.setenv("DPUA_JUDGE_KEY", "secret")
        j = RemoteJudge.from_env()
        assert j.url == "http://x.test" and j.key == "secret"


class TestReplyParsing:
    @pytest.mark.parametrize("text, expected", [
        ('{"s_lab": 2, "s_cue": 3}', (2, 3)),
        ('Scores follow. {"s_lab": 1, "s_cue": 1} done', (1, 1)),
        ("s_lab: 3\ns_cue = 1", (3, 1)),
    ])
    def test_forms(self, text, expected):
        s = parse_judge_reply(text)
        assert (s.s_lab_likert, s.s_cue_likert) == expected

    @pytest.mark.parametrize("text", ["nothing", '{"s_lab": 2}', '{"s_lab": 2.5, "s_cue": 1}'])
    def test_malformed(self, text):
        with pytest.raises(JudgeMalformedReply):
            parse_judge_reply(text)


def test_mock_judge_object_matches_function():
    r = request("the manager")
    assert MockJudge().score(r) == mock_judge(r.generated_rationale, r.reference_label_justification,
                                              r.reference_disagreement_cue)
