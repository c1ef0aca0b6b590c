from __future__ import annotations

import pytest

from scope_slr.cleaning import (ConfusionPattern, MergeRule, ProcessedPairLog, apply_rules, dump_rules,
                                find_patterns, load_rules, mine_patterns, propose_merges, rewrite)
from scope_slr.dataset_io import DialogueTurn, Manifest, build_vocabulary
from scope_slr.errors import ConfigError, RuleConflictError
from scope_slr.synthetic import make_cleaning_fixture


def test_single_substitution_pattern():
    assert find_patterns("A X C".split(), "A B C".split()) == [("C-S-C", ("B",), ("X",))]


def test_split_pattern():
    assert find_patterns("A X Y C".split(), "A B C".split()) == [("C-S-I-C", ("B",), ("X", "Y"))]


def test_join_pattern():
    found = find_patterns("I NEWYORK GO".split(), "I NEW YORK GO".split())
    assert found == [("C-S-D-C", ("NEW", "YORK"), ("NEWYORK",))]


def test_overlapping_windows_both_counted():
    found = find_patterns("A X C Y E".split(), "A B C D E".split())
    assert found == [("C-S-C", ("B",), ("X",)), ("C-S-C", ("D",), ("Y",))]


def test_logged_pairs_are_skipped(tmp_path):
    log = ProcessedPairLog(tmp_path / "ledger.jsonl")
    assert log.add(("B",), ("X",))
    assert not log.add(("B",), ("X",))
    reopened = ProcessedPairLog(tmp_path / "ledger.jsonl")
    assert (("B",), ("X",)) in reopened
    pats = mine_patterns([("A X C".split(), "A B C".split()), ("A Y C".split(), "A B C".split())], reopened)
    assert [(p.ref_window, p.hyp_window) for p in pats] == [(("B",), ("Y",))]


def test_mine_requires_pairs():
    with pytest.raises(ValueError):
        mine_patterns([])


def test_synonym_direction_follows_frequency():
    pats = [ConfusionPattern("C-S-C", ("B",), ("X",), 5)]
    rules = propose_merges(pats, {"B": 100, "X": 7})
    assert [(r.source, r.target, r.kind) for r in rules] == [(("X",), ("B",), "synonym")]
    rules = propose_merges(pats, {"B": 2, "X": 7})
    assert rules[0].source == ("B",)


def test_threshold_and_join_rule():
    pats = [ConfusionPattern("C-S-C", ("B",), ("X",), 2),
            ConfusionPattern("C-D-S-C", ("NEW", "YORK"), ("NEWYORK",), 3)]
    rules = propose_merges(pats, {}, threshold=3)
    assert len(rules) == 1
    assert (rules[0].source, rules[0].target, rules[0].kind) == (("NEW", "YORK"), ("NEWYORK",), "join")
    assert not rules[0].approved


def _manifest(gloss_lines):
    turns = [DialogueTurn(f"d{i}", 0, "s", f"t{i}", tuple(g.split()), "k") for i, g in enumerate(gloss_lines)]
    return Manifest(turns, build_vocabulary(turns))


def test_apply_synonym_rule():
    m = _manifest(["A X C", "X X", "B"])
    out, report = apply_rules(m, [MergeRule(("X",), ("B",), "synonym", approved=True)])
    assert all("X" not in t.glosses for t in out.turns)
    assert out.vocabulary.size == m.vocabulary.size - 1
    assert report.removed == ["X"] and report.applications[0]["count"] == 3


def test_empty_rule_set_is_identity():
    m = _manifest(["A X C"])
    out, report = apply_rules(m, [])
    assert [t.glosses for t in out.turns] == [t.glosses for t in m.turns]
    assert report.turns_changed == 0


def test_rules_must_be_approved_and_consistent():
    m = _manifest(["A"])
    with pytest.raises(RuleConflictError, match="not approved"):
        apply_rules(m, [MergeRule(("A",), ("B",), "synonym")])
    with pytest.raises(RuleConflictError, match="conflicting"):
        apply_rules(m, [MergeRule(("A",), ("B",), "synonym", True), MergeRule(("A",), ("C",), "synonym", True)])
    with pytest.raises(RuleConflictError, match="cyclic"):
        apply_rules(m, [MergeRule(("A",), ("B",), "synonym", True), MergeRule(("B",), ("C",), "synonym", True)])


def test_longest_match_first():
    rules = [MergeRule(("NEW",), ("N",), "synonym", True), MergeRule(("NEW", "YORK"), ("NEWYORK",), "join", True)]
    assert rewrite("I NEW YORK NEW".split(), rules) == ["I", "NEWYORK", "N"]


def test_rules_file_roundtrip(tmp_path):
    rules = [MergeRule(("A", "B"), ("AB",), "join", True, 4)]
    (tmp_path / "r.json").write_text(dump_rules(rules))
    assert load_rules(tmp_path / "r.json") == rules
    (tmp_path / "bad.json").write_text('[{"from": ["A"]}]')
    with pytest.raises(ConfigError):
        load_rules(tmp_path / "bad.json")


def test_fixture_idempotent():
    fx = make_cleaning_fixture()
    pats = mine_patterns(fx.pairs)
    rules = [MergeRule(r.source, r.target, r.kind, True, r.support)
             for r in propose_merges(pats, fx.manifest.gloss_counts())]
    once, _ = apply_rules(fx.manifest, rules)
    twice, report = apply_rules(once, rules)
    assert [t.glosses for t in twice.turns] == [t.glosses for t in once.turns]
    assert report.turns_changed == 0
