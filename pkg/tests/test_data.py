import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpua.data import (
    NEG,
    POS,
    STATS_HEADER,
    AnnotatedSample,
    AnnotationCounts,
    DisagreementDistribution,
    TaskKind,
    agreement_score,
    dataset_stats,
    default_profile,
    disagreement_distribution,
    dumps_dataset,
    generate_synthetic,
    load_dataset,
    majority_label,
    parse_record,
)
from dpua.errors import EmptyDataset, InvalidProfile, MalformedRecord, ZeroAnnotators


def record(**overrides):
    base = {"id": "s1", "task": "offense", "context": None, "text": "some post",
            "annotations": {"pos": 3, "neg": 2},
            "rationale": {"label_justification": "rude words", "disagreement_cue": "could be banter"},
            "split": "train"}
    base.update(overrides)
    return base


class TestDistribution:
    def test_three_two_split(self):
        d = disagreement_distribution((3, 2))
        assert (d.p_pos, d.p_neg) == (0.6, 0.4)

    def test_tie_and_unanimous(self):
        assert disagreement_distribution((1, 1)).as_array().tolist() == [0.5, 0.5]
        assert disagreement_distribution((5, 0)).as_array().tolist() == [1.0, 0.0]

    def test_zero_annotators(self):
        with pytest.raises(ZeroAnnotators):
            AnnotationCounts(0, 0)

    def test_agreement_examples(self):
        assert agreement_score(DisagreementDistribution(0.6, 0.4)) == 0.6
        assert agreement_score(DisagreementDistribution(0.5, 0.5)) == 0.5
        assert agreement_score(DisagreementDistribution(0.9, 0.1)) == 0.9

    def test_majority_and_tie_rule(self):
        assert majority_label(DisagreementDistribution(0.6, 0.4)) == (POS, False)
        assert majority_label(DisagreementDistribution(0.4, 0.6)) == (NEG, False)
        assert majority_label(DisagreementDistribution(0.5, 0.5)) == (NEG, True)

    @given(st.integers(0, 50), st.integers(0, 50))
    @settings(max_examples=200)
    def test_distribution_properties(self, pos, neg):
        if pos + neg == 0:
            return
        d = disagreement_distribution((pos, neg))
        assert d.p_pos + d.p_neg == pytest.approx(1.0, abs=1e-12)
        assert 0.5 <= agreement_score(d) <= 1.0


class TestRecords:
    def test_parse_three_two(self):
        s = parse_record(record())
        assert s.dist.as_array().tolist() == [0.6, 0.4]
        assert s.agreement == 0.6 and s.majority_label == POS

    def test_parse_unanimous_neg(self):
        s = parse_record(record(annotations={"pos": 0, "neg": 5}))
        assert (s.agreement, s.majority_label) == (1.0, NEG)

    def test_zero_counts_is_malformed(self):
        with pytest.raises(MalformedRecord):
            parse_record(record(annotations={"pos": 0, "neg": 0}))

    def test_unknown_field_strict_vs_lenient(self):
        with pytest.raises(MalformedRecord):
            parse_record(record(extra=1))
        assert parse_record(record(extra=1), strict=False).id == "s1"

    def test_round_trip(self, tmp_path, corpus):
        path = tmp_path / "d.jsonl"
        path.write_text(dumps_dataset(corpus))
        assert load_dataset(path) == corpus

    def test_line_number_in_error(self, tmp_path):
        lines = [json.dumps(record(id=f"s{i}")) for i in range(20)]
        lines[16] = "{not json"
        path = tmp_path / "bad.jsonl"
        path.write_text("\n".join(lines))
        with pytest.raises(MalformedRecord, match="line 17"):
            load_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.jsonl"
        path.write_text("")
        with pytest.raises(EmptyDataset):
            load_dataset(path)

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        path.write_text(json.dumps(record()) + "\n" + json.dumps(record()) + "\n")
        with pytest.raises(MalformedRecord, match="line 2"):
            load_dataset(path)


class TestStats:
    def test_average_agreement_fixture(self):
        counts = [(3, 2), (4, 1), (5, 0), (2, 3)]
        samples = [AnnotatedSample(f"s{i}", TaskKind.OFFENSE, "a b", AnnotationCounts(*c))
                   for i, c in enumerate(counts)]
        st_ = dataset_stats(samples)
        assert st_.avg_agreement == pytest.approx(0.75, abs=1e-12)
        assert st_.n_total == 4 and st_.n_pos == 3 and st_.n_neg == 1

    def test_single_sample(self):
        s = AnnotatedSample("a", TaskKind.SENTIMENT, "fine", AnnotationCounts(1, 0))
        assert dataset_stats([s]).n_total == 1

    def test_header_order(self, corpus):
        row = dataset_stats(corpus).table_row("x")
        assert len(row) == len(STATS_HEADER)
        assert STATS_HEADER[-2:] == ["Avg. C^h", "Avg. L"]


class TestSynthetic:
    def test_generator_contract(self):
        s = generate_synthetic(4, default_profile("offense", buckets=("unanimous", "split-3/2")), seed=7)
        assert len(s) == 4
        assert sorted(x.agreement for x in s) == [0.6, 0.6, 1.0, 1.0]

    def test_deterministic(self):
        a = dumps_dataset(generate_synthetic(40, seed=7))
        b = dumps_dataset(generate_synthetic(40, seed=7))
        assert a == b
        assert a != dumps_dataset(generate_synthetic(40, seed=8))

    def test_zero_size_rejected(self):
        with pytest.raises(InvalidProfile):
            generate_synthetic(0)

    @pytest.mark.parametrize("task", [t.value for t in TaskKind])
    def test_every_task_has_rationales_and_both_splits(self, task):
        s = generate_synthetic(24, default_profile(task), seed=0)
        assert all(x.ref_rationale is not None for x in s)
        assert {x.split for x in s} == {"train", "test"}
        assert {x.majority_label for x in s} == {POS, NEG}
