import json

import pytest

import decomposer


def scored(score, subs=None):
    entries = [{"template": "complexity", "match": {}, "response": {"score": score}}]
    if subs is not None:
        entries.append({"template": "decomposition", "match": {}, "response": {"sub_questions": subs}})
    return entries


@pytest.mark.parametrize("score, decomposed", [(6.5, True), (6.4, False), (10.0, True), (0.0, False)])
def test_threshold_branching(make_gateway, score, decomposed):
    gateway = make_gateway(scored(score, [{"question": "Sub one?"}, {"question": "Sub two?"}]))
    plan = decomposer.plan("Main question?", gateway, threshold=6.5)
    assert plan.decomposed is decomposed
    assert plan.effective_set == (["Main question?", "Sub one?", "Sub two?"] if decomposed else ["Main question?"])


@pytest.mark.parametrize("raw, clamped", [(12, 10.0), (-3, 0.0), (4.25, 4.25)])
def test_complexity_is_clamped(make_gateway, raw, clamped):
    assert decomposer.score_complexity("q", make_gateway(scored(raw))) == clamped


def test_sub_questions_are_deduplicated_and_truncated(make_gateway, caplog):
    subs = [
        {"question": "main question"},
        {"question": "First?", "focus": "bridge"},
        {"question": "first"},
        {"question": "Second?"},
        {"question": "Third?"},
        {"question": "Fourth?"},
    ]
    plan = decomposer.plan("Main question?", make_gateway(scored(8, subs)), max_sub_questions=3)
    assert [(s.text, s.focus) for s in plan.sub_queries] == [("First?", "bridge"), ("Second?", "facet"), ("Third?", "facet")]
    assert "keeping the first 3" in caplog.text


def test_disabled_decomposition_makes_no_calls(make_gateway):
    gateway = make_gateway(scored(9))
    plan = decomposer.plan("q", gateway, enabled=False)
    assert plan.effective_set == ["q"]
    assert not plan.decomposed and not plan.scored
    assert gateway.usage.snapshot()["calls"] == 0
    json.dumps(plan.to_dict())


def test_fixture_compound_query(gateway):
    plan = decomposer.plan("Which drug approved in the United States treats a disease that raises cardiovascular risk?",
                           gateway)
    assert plan.complexity == 7.0
    assert len(plan.effective_set) == 3
    assert plan.to_dict()["decomposed"] is True
