import pytest
from hypothesis import given, settings, strategies as st

from gaze_align.regions import match_keywords
from gaze_align.report import (
    NORMAL_STUDY_PHRASE, ClientError, ConditionPrediction, RetryPolicy, StubClient,
    assemble_prompt, confidence_tier, contains_prohibited, fallback_report, filter_keywords,
    gate_conditions, generate, generate_many, keyword_band, keyword_filter_batches,
    parse_report, request_verdicts,
)


def pred(name, p, *kws):
    return ConditionPrediction(name, p, tuple(kws))


class FailingClient:
    def __init__(self):
        self.calls = 0

    def generate(self, request):
        self.calls += 1
        raise ClientError("unreachable")


class TestGating:
    def test_boundary_excluded(self):
        preds = [pred("Edema", 0.60), pred("Cardiomegaly", 0.61), pred("Pneumonia", 0.2)]
        assert [p.condition for p in gate_conditions(preds)] == ["Cardiomegaly"]

    @given(st.lists(st.floats(0, 1), max_size=8))
    def test_idempotent(self, probs):
        preds = [pred(f"c{i}", p) for i, p in enumerate(probs)]
        once = gate_conditions(preds)
        assert gate_conditions(once) == once
        assert all(p.probability > 0.6 for p in once)

    def test_tiers_and_bands(self):
        assert confidence_tier(0.71) == "definitive"
        assert confidence_tier(0.70) == "qualified"
        assert confidence_tier(0.50) == "qualified"
        assert confidence_tier(0.49) == "hedged"
        assert keyword_band(0.81).startswith("High")
        assert keyword_band(0.60).startswith("Moderate")
        assert keyword_band(0.4).startswith("Lower")
        assert keyword_band(0.39) is None

    def test_prediction_validation(self):
        with pytest.raises(ValueError):
            pred("Edema", 1.2)
        with pytest.raises(ValueError):
            pred("Edema", 0.9, ("x", -0.1))
        p = ConditionPrediction.from_json({"condition": "Edema", "probability": 0.8,
                                           "keywords": [{"term": "vascular", "confidence": 0.9}]})
        assert p.keywords == (("vascular", 0.9),)


class TestPrompt:
    def test_contains_condition_keyword_and_region(self, atlas):
        gated = [pred("Cardiomegaly", 0.87, ("enlarged heart", 0.9))]
        act = match_keywords(["enlarged heart"], atlas)
        b = assemble_prompt(gated, act, atlas)
        assert "Cardiomegaly" in b.text and "enlarged heart" in b.text
        assert "87.0%" in b.text and "cardiac silhouette" in b.text
        assert "upper mediastinum" in b.text
        assert b.generation_params == {"temperature": 0.3, "top_k": 1}
        assert "cardiac_silhouette" in b.region_names

    def test_deterministic(self, atlas):
        gated = [pred("Edema", 0.75, ("vascular congestion", 0.7)), pred("Pneumonia", 0.65)]
        assert assemble_prompt(gated, None, atlas) == assemble_prompt(gated, None, atlas)

    def test_normal_path(self, atlas):
        b = assemble_prompt([], None, atlas)
        assert NORMAL_STUDY_PHRASE in b.text
        assert b.conditions == ()

    def test_prohibited_keywords_dropped(self, atlas):
        b = assemble_prompt([pred("Edema", 0.9, ("saliency peak", 0.9), ("edema", 0.9))],
                            None, atlas)
        assert not contains_prohibited(b.text)
        assert "edema" in b.text

    def test_styles(self, atlas):
        assert "RECOMMENDATIONS" in assemble_prompt([], None, atlas, "detailed").text
        assert "RECOMMENDATIONS" not in assemble_prompt([], None, atlas, "concise").text
        with pytest.raises(ValueError):
            assemble_prompt([], None, atlas, "poetic")

    def test_template_free_of_prohibited_terms(self, atlas):
        for style in ("standard", "detailed", "concise"):
            assert not contains_prohibited(assemble_prompt([], None, atlas, style).text)


class TestGenerate:
    def test_stub_success(self, atlas):
        b = assemble_prompt([pred("Cardiomegaly", 0.9)], None, atlas)
        rep = generate(b, StubClient(), sleep=lambda s: None)
        assert not rep.fallback_used and rep.attempts == 1
        assert "cardiomegaly" in rep.findings.lower()

    def test_exhausted_schedule_then_fallback(self, atlas):
        b = assemble_prompt([pred("Pleural Effusion", 0.8)], None, atlas)
        slept = []
        client = FailingClient()
        rep = generate(b, client, RetryPolicy(), sleep=slept.append)
        assert slept == [3, 9, 27, 81, 243]
        assert client.calls == 6 and rep.fallback_used
        text = rep.to_text()
        assert "FINDINGS:" in text and "IMPRESSION:" in text
        assert "pleural effusion" in rep.findings.lower()

    def test_recovers_after_failures(self, atlas):
        b = assemble_prompt([], None, atlas)
        slept = []
        rep = generate(b, StubClient(fail_times=2), sleep=slept.append)
        assert slept == [3, 9] and rep.attempts == 3 and not rep.fallback_used

    def test_missing_impression_is_failure(self, atlas):
        b = assemble_prompt([], None, atlas)
        rep = generate(b, StubClient(["FINDINGS:\nclear lungs"]),
                       RetryPolicy(max_retries=2), sleep=lambda s: None)
        assert rep.fallback_used and rep.attempts == 3

    def test_parse(self):
        assert parse_report("findings: a b\n**IMPRESSION:** c") == ("a b", "c")
        assert parse_report("IMPRESSION: c\nFINDINGS: a") is None
        assert parse_report("nothing here") is None

    def test_provenance_closed(self, atlas):
        gated = [pred("Edema", 0.8, ("edema", 0.9)), pred("Cardiomegaly", 0.65)]
        b = assemble_prompt(gated, match_keywords(["trachea"], atlas), atlas)
        prov = generate(b, StubClient(), sleep=lambda s: None).provenance
        assert set(prov["conditions"]) == {"Edema", "Cardiomegaly"}
        assert set(prov["regions"]) <= set(atlas.region_ids)
        assert "trachea" in prov["regions"]
        for terms in prov["keyword_sources"].values():
            for t in terms:
                assert t in b.text

    def test_fallback_normal(self, atlas):
        f, i = fallback_report(assemble_prompt([], None, atlas))
        assert f == NORMAL_STUDY_PHRASE

    def test_generate_many(self, atlas):
        bundles = [assemble_prompt([pred("Edema", 0.7 + i / 100)], None, atlas)
                   for i in range(5)]
        reps = generate_many(bundles, StubClient, sleep=lambda s: None)
        assert [r.provenance["conditions"]["Edema"] for r in reps] == \
            [0.7 + i / 100 for i in range(5)]


class TestKeywordFilter:
    def test_batches(self):
        sizes = [len(b) for b in keyword_filter_batches(range(65))]
        assert sizes == [30, 30, 5]

    def test_large_manifest(self):
        cands = [("Edema", f"term{i}") for i in range(7322)]
        verdicts = {t: ("YES" if i < 3624 else "NO") for i, (_, t) in enumerate(cands)}
        kept = filter_keywords(cands, verdicts)
        assert len(kept) == 3624
        assert len(kept) / len(cands) == pytest.approx(0.495, abs=5e-4)
        assert len(keyword_filter_batches(cands)) == 245

    def test_missing_verdict(self):
        with pytest.raises(KeyError):
            filter_keywords([("Edema", "x")], {})

    @settings(max_examples=20)
    @given(st.lists(st.booleans(), min_size=1, max_size=70))
    def test_request_verdicts_with_stub(self, yes):
        cands = [("Edema", f"kw{i}") for i in range(len(yes))]

        class Judge:
            def generate(self, request):
                lines = [ln.split("] ", 1)[1] for ln in request["prompt"].splitlines()
                         if ln.startswith("- [")]
                return "\n".join(f"{t}: {'YES' if yes[int(t[2:])] else 'NO'}" for t in lines)

        verdicts = request_verdicts(cands, Judge(), sleep=lambda s: None)
        kept = filter_keywords(cands, verdicts)
        assert [t for _, t in kept] == [t for (_, t), y in zip(cands, yes) if y]
