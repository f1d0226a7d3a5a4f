import json

import pytest
from hypothesis import given, strategies as st

from claimcheck.errors import MissingBinding, ParseFailure, SchemaViolation, ScriptMiss
from claimcheck.llm import (
    CassetteBackend,
    CassetteRecorder,
    LlmGateway,
    LlmRequest,
    PromptTemplate,
    ResponseSchema,
    ScriptedBackend,
    extract_json,
    fingerprint,
)
from claimcheck.policy import PromptPolicy


def make_policy(*templates):
    return PromptPolicy(templates)


class TestRender:
    def test_direct_substitution(self):
        t = PromptTemplate(id="verify", text="Verify: {claim}")
        assert t.render({"claim": "X"}) == "Verify: X"

    def test_no_placeholders_identity(self):
        t = PromptTemplate(id="static", text="no slots here")
        assert t.render({}) == "no slots here"

    def test_missing_binding(self):
        t = PromptTemplate(id="rank", text="Rank {n} of {k}")
        with pytest.raises(MissingBinding) as exc:
            t.render({"n": "2"})
        assert exc.value.name == "k"

    def test_extra_bindings_ignored(self):
        t = PromptTemplate(id="verify", text="Verify: {claim}")
        assert t.render({"claim": "X", "junk": "y"}) == "Verify: X"

    def test_placeholder_listing(self):
        t = PromptTemplate(id="rank", text="Rank {n} of {k} and {n}")
        assert t.placeholders() == ["k", "n"]

    @given(value=st.text(min_size=0, max_size=40))
    def test_substitution_embeds_binding_verbatim(self, value):
        t = PromptTemplate(id="v", text="before {x} after")
        assert t.render({"x": value}) == f"before {value} after"

    @given(a=st.text(max_size=30), b=st.text(max_size=30))
    def test_fingerprint_injective_on_rendered_text(self, a, b):
        same = fingerprint(a, 0.0, 64) == fingerprint(b, 0.0, 64)
        assert same == (a == b)


class TestScriptedBackend:
    def test_fingerprint_keyed_response(self):
        text = "Verify: X"
        fp = fingerprint(text, 0.0, 1024)
        backend = ScriptedBackend(by_fingerprint={fp: "SUFFICIENT"})
        gateway = LlmGateway(backend, make_policy(PromptTemplate(id="v", text="Verify: {claim}")))
        resp = gateway.complete(LlmRequest(template_id="v", bindings={"claim": "X"}))
        assert resp.raw_text == "SUFFICIENT"

    def test_determinism_same_request_twice(self):
        fp = fingerprint("Q", 0.0, 1024)
        backend = ScriptedBackend(by_fingerprint={fp: "A"})
        gateway = LlmGateway(backend, make_policy(PromptTemplate(id="q", text="Q")))
        req = LlmRequest(template_id="q")
        assert gateway.complete(req).raw_text == gateway.complete(req).raw_text == "A"

    def test_script_miss(self):
        backend = ScriptedBackend()
        gateway = LlmGateway(backend, make_policy(PromptTemplate(id="q", text="Q")))
        with pytest.raises(ScriptMiss):
            gateway.complete(LlmRequest(template_id="q"))

    def test_call_counter_counts_every_invocation(self):
        backend = ScriptedBackend(default="ok")
        gateway = LlmGateway(backend, make_policy(PromptTemplate(id="q", text="Q")))
        for _ in range(3):
            gateway.complete(LlmRequest(template_id="q"))
        assert gateway.call_count == 3


class TestStructured:
    schema = ResponseSchema(required=("action", "label"))

    def test_well_formed(self):
        backend = ScriptedBackend(default='{"action":"verdict","label":"Supported"}')
        gateway = LlmGateway(backend, make_policy(PromptTemplate(id="q", text="Q")))
        payload = gateway.complete_structured(LlmRequest(template_id="q"), self.schema)
        assert payload == {"action": "verdict", "label": "Supported"}

    def test_success_on_second_retry(self):
        backend = ScriptedBackend(
            sequence=["not json", "still not json", '{"action":"a","label":"b"}']
        )
        gateway = LlmGateway(backend, make_policy(PromptTemplate(id="q", text="Q")))
        payload = gateway.complete_structured(LlmRequest(template_id="q"), self.schema)
        assert payload["label"] == "b"
        assert gateway.call_count == 3
        assert gateway.retry_count == 2

    def test_missing_required_field_thrice(self):
        backend = ScriptedBackend(default='{"action":"verdict"}')
        gateway = LlmGateway(backend, make_policy(PromptTemplate(id="q", text="Q")))
        with pytest.raises(ParseFailure):
            gateway.complete_structured(LlmRequest(template_id="q"), self.schema)
        assert gateway.call_count == 3  # initial ask + 2 repairs

    def test_value_domain(self):
        schema = ResponseSchema(required=("label",), allowed={"label": {"a", "b"}})
        with pytest.raises(SchemaViolation):
            schema.validate({"label": "c"})

    def test_json_embedded_in_prose(self):
        assert extract_json('Sure! Here it is: {"x": 1} hope that helps') == {"x": 1}


class TestCassette:
    def test_record_then_replay_byte_identical(self, tmp_path):
        cassette = tmp_path / "cassette.jsonl"
        live = ScriptedBackend(sequence=["first", "second"])
        recorder = CassetteRecorder(live, str(cassette))
        policy = make_policy(
            PromptTemplate(id="a", text="ask A"), PromptTemplate(id="b", text="ask B")
        )
        gw = LlmGateway(recorder, policy)
        originals = [
            gw.complete(LlmRequest(template_id="a")).raw_text,
            gw.complete(LlmRequest(template_id="b")).raw_text,
        ]

        replay = LlmGateway(CassetteBackend(str(cassette)), policy)
        replayed = [
            replay.complete(LlmRequest(template_id="a")).raw_text,
            replay.complete(LlmRequest(template_id="b")).raw_text,
        ]
        assert replayed == originals == ["first", "second"]

    def test_cassette_format(self, tmp_path):
        cassette = tmp_path / "cassette.jsonl"
        recorder = CassetteRecorder(ScriptedBackend(default="pong"), str(cassette))
        policy = make_policy(PromptTemplate(id="p", text="ping"))
        LlmGateway(recorder, policy).complete(LlmRequest(template_id="p"))
        entry = json.loads(cassette.read_text().splitlines()[0])
        assert set(entry) == {"fp", "request_text", "response_text"}
        assert entry["request_text"] == "ping"
        assert entry["response_text"] == "pong"

    def test_replay_miss(self, tmp_path):
        cassette = tmp_path / "cassette.jsonl"
        cassette.write_text("")
        backend = CassetteBackend(str(cassette))
        with pytest.raises(ScriptMiss):
            backend.generate("never recorded", 0.0, 16)

    def test_fingerprint_depends_on_rendered_text_only(self):
        # template refactors that preserve rendered text keep the fingerprint
        a = PromptTemplate(id="x", text="Verify: {claim}").render({"claim": "K"})
        b = PromptTemplate(id="y", text="Verify: K").render({})
        assert fingerprint(a, 0.0, 64) == fingerprint(b, 0.0, 64)
        assert fingerprint(a, 0.0, 64) != fingerprint(a, 0.5, 64)
