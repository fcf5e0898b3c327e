import json
import threading

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from cognav.cognition import View
from cognav.gateway import (
    SCHEMAS, BackendConfig, BackendUnavailable, CallableBackend, Gateway, HttpBackend, MalformedOutput,
    RoleRequest, SchemaMismatch, ScriptedBackend, ScriptExhausted, extract_structured, make_backend,
    script_key, serialize,
)
from cognav.geometry import DepthImage, Pose, empty_world

# one well-formed reply per role
FIXTURES = {
    "instruction_parser": [{"sub-instruction": "fly to the tower.", "landmark": ["the tower"]},
                           {"sub-instruction": "stop.", "landmark": []}],
    "subgoal_extractor": ["turn left", "fly forward"],
    "attention": [{"landmark": "the tower", "question": "Is the tower ahead?"}],
    "perception": {"overall": "Overall: a street.", "details": "In Front: the tower."},
    "imagination": {"state": "I might see the tower at the CENTER."},
    "subgoal_judger": {"subgoal": "turn left", "achieved": False, "reason": "not yet"},
    "step_memory": {"step_memory": "I turn left."},
    "subgoal_memory": {"subgoal_memory": "I turned left twice."},
    "decision": {"thought": "go", "probabilities": {"1": 0.9, "2": 0.1}, "selected_action": 1},
}

# schema violations per role, each naming the field at fault
BROKEN = {
    "instruction_parser": ([{"sub-instruction": "x"}], "landmark"),
    "subgoal_extractor": (["ok", ""], "non-empty"),
    "attention": ([{"landmark": "a"}], "question"),
    "perception": ({"overall": "x"}, "details"),
    "imagination": ({"status": "x"}, "state"),
    "subgoal_judger": ({"subgoal": "s", "achieved": "yes", "reason": "r"}, "achieved"),
    "step_memory": ({"memory": "x"}, "step_memory"),
    "subgoal_memory": ({"subgoal_memory": 3}, "subgoal_memory"),
    "decision": ({"thought": "t", "probabilities": {"x": 1.0}, "selected_action": 1}, "probability key"),
}


def test_fixtures_cover_every_role():
    assert set(FIXTURES) == set(SCHEMAS) == set(BROKEN)


@pytest.mark.parametrize("role", sorted(FIXTURES))
def test_fixture_round_trips(role):
    assert extract_structured(serialize(FIXTURES[role]), role) == FIXTURES[role]


@pytest.mark.parametrize("role", sorted(BROKEN))
def test_schema_violation_names_field(role):
    value, needle = BROKEN[role]
    with pytest.raises(SchemaMismatch) as exc:
        extract_structured(serialize(value), role)
    assert exc.value.role == role
    assert any(needle in p for p in exc.value.problems)


def test_extraction_variants():
    assert extract_structured('Thinking...\n```json\n{"a": 1}\n```\nmore text') == {"a": 1}
    assert extract_structured('```JSON\n[1, 2]\n```') == [1, 2]
    assert extract_structured('prefix {"a": "b}c", "d": [1, {"e": 2}]} suffix') == {"a": "b}c", "d": [1, {"e": 2}]}
    assert extract_structured("[{'landmark': 'x', 'question': \"it's\"}]", "attention")[0]["question"] == "it's"
    assert extract_structured("{'subgoal': 's', 'achieved': True, 'reason': 'r'}", "subgoal_judger")["achieved"]
    # the first fence wins over later ones
    assert extract_structured('```json\n{"a": 1}\n```\n```json\n{"a": 2}\n```') == {"a": 1}


@pytest.mark.parametrize("raw", ["no structure here", "```json\n\n```", "{unbalanced", "{'a': foo}", ""])
def test_malformed_replies(raw):
    with pytest.raises(MalformedOutput):
        extract_structured(raw)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False, allow_infinity=False) | st.text(),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(), inner, max_size=4),
    max_leaves=12)


@given(st.dictionaries(st.text(), json_values, max_size=5) | st.lists(json_values, max_size=5))
def test_serialize_extract_round_trip(value):
    assert extract_structured(serialize(value)) == value


# -- gateway retries -----------------------------------------------------------------

def replies(*texts):
    it = iter(texts)
    return CallableBackend(lambda req: next(it))


def test_malformed_reply_is_retried_with_same_prompt():
    seen = []
    it = iter(["nonsense", serialize({"status": "x"}), serialize(FIXTURES["imagination"])])

    def fn(req):
        seen.append(req.prompt)
        return next(it)

    gw = Gateway(CallableBackend(fn), episode_id="e")
    out = gw.ask("imagination", "P", lambda v: v["state"])
    assert out == FIXTURES["imagination"]["state"]
    assert seen == ["P", "P", "P"]
    assert gw.calls["imagination"] == 1
    assert [e["attempt"] for e in gw.transcript] == [0, 1, 2]
    assert "error" in gw.transcript[0] and "error" not in gw.transcript[2]


@pytest.mark.parametrize("retries", [0, 1, 2, 3])
def test_retries_exhausted_raise_after_configured_attempts(retries):
    count = []

    def fn(req):
        count.append(1)
        return "still not json"

    gw = Gateway(CallableBackend(fn), malformed_retries=retries)
    with pytest.raises(MalformedOutput):
        gw.ask("step_memory", "P", lambda v: v)
    assert len(count) == retries + 1


def test_out_of_range_decision_raises_schema_mismatch_after_retries():
    from cognav.cognition import Observation, decide
    from cognav.geometry import Action

    bad = serialize({"thought": "t", "probabilities": {"1": 1.0}, "selected_action": 9})
    gw = Gateway(replies(bad, bad, bad))
    with pytest.raises(SchemaMismatch, match="not a valid action"):
        decide(gw, "s", "i", Observation("o", "d"), "None", "None", [Action.MOVE_FORWARD])
    assert len(gw.transcript) == 3


def test_perception_goes_to_vision_backend():
    gw = Gateway(replies(), replies(serialize(FIXTURES["perception"])))
    assert gw.ask("perception", "P", lambda v: v) == FIXTURES["perception"]


def test_role_request_contract():
    with pytest.raises(ValueError):
        RoleRequest("navigator", "p")
    with pytest.raises(ValueError):
        RoleRequest("decision", "p", image=object())
    RoleRequest("perception", "p", image=object())


# -- scripted backend ----------------------------------------------------------------

def test_scripted_backend_counts_per_episode_and_role():
    b = ScriptedBackend({script_key("a", "decision", 0): "a0", script_key("a", "decision", 1): "a1",
                         script_key("b", "decision", 0): "b0"})
    assert b.complete(RoleRequest("decision", "", episode_id="a")) == "a0"
    assert b.complete(RoleRequest("decision", "", episode_id="b")) == "b0"
    assert b.complete(RoleRequest("decision", "", episode_id="a")) == "a1"
    with pytest.raises(ScriptExhausted) as exc:
        b.complete(RoleRequest("decision", "", episode_id="a"))
    assert (exc.value.episode_id, exc.value.role, exc.value.index) == ("a", "decision", 2)
    b.reset("a")
    assert b.complete(RoleRequest("decision", "", episode_id="a")) == "a0"


def test_scripted_backend_is_safe_across_threads():
    n = 200
    script = {script_key(f"e{k}", "step_memory", i): f"{k}:{i}" for k in range(4) for i in range(n)}
    b = ScriptedBackend(script)
    out: dict[int, list[str]] = {k: [] for k in range(4)}

    def work(k):
        for _ in range(n):
            out[k].append(b.complete(RoleRequest("step_memory", "", episode_id=f"e{k}")))

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(out[k] == [f"{k}:{i}" for i in range(n)] for k in range(4))


def test_make_backend_scripted(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"e/decision/0": "x"}))
    b = make_backend(BackendConfig(kind="scripted", script_path=str(path)))
    assert b.complete(RoleRequest("decision", "", episode_id="e")) == "x"
    with pytest.raises(ValueError):
        BackendConfig(kind="scripted").validate()
    with pytest.raises(ValueError):
        BackendConfig(kind="carrier-pigeon").validate()


# -- http backend --------------------------------------------------------------------

ENDPOINT = "https://models.invalid/v1/chat/completions"


def http_backend(monkeypatch, handler, retries=2):
    monkeypatch.setenv("COGNAV_TEST_KEY", "sekret-value")
    cfg = BackendConfig(kind="http", endpoint=ENDPOINT, model_name="m", max_retries=retries,
                        api_key_env="COGNAV_TEST_KEY")
    return HttpBackend(cfg, transport=httpx.MockTransport(handler))


def chat(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def test_http_request_shape_and_audit(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return chat("hello")

    b = http_backend(monkeypatch, handler)
    view = View(empty_world((4, 4, 4)), Pose(1, 1, 1), 90.0, DepthImage(np.full((4, 4), 3.0)))
    text, audit = b.complete_audited(RoleRequest("perception", "describe", image=view))
    assert text == "hello"
    assert seen["auth"] == "Bearer sekret-value"
    content = seen["body"]["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "describe"}
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
    assert seen["body"]["temperature"] == 0 and seen["body"]["model"] == "m"
    logged = json.dumps(audit)
    assert "sekret-value" not in logged and "base64" not in logged
    assert audit["request"]["messages"][0]["content"][1]["image_url"]["url"].startswith("sha256:")


def test_http_transient_failures_retry_then_give_up(monkeypatch):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503)

    with pytest.raises(BackendUnavailable):
        http_backend(monkeypatch, handler, retries=2).complete(RoleRequest("decision", "p"))
    assert len(calls) == 3


def test_http_rate_limit_is_retried(monkeypatch):
    codes = iter([429, 200])

    def handler(request):
        code = next(codes)
        return chat("ok") if code == 200 else httpx.Response(code)

    assert http_backend(monkeypatch, handler).complete(RoleRequest("decision", "p")) == "ok"


def test_http_timeout_then_success(monkeypatch):
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return chat("ok")

    assert http_backend(monkeypatch, handler).complete(RoleRequest("decision", "p")) == "ok"
    assert len(calls) == 2


@pytest.mark.parametrize("response", [httpx.Response(400), httpx.Response(200, json={"choices": []}),
                                      httpx.Response(200, text="not json")])
def test_http_bad_responses_are_not_retried(monkeypatch, response):
    calls = []

    def handler(request):
        calls.append(1)
        return response

    with pytest.raises(BackendUnavailable):
        http_backend(monkeypatch, handler).complete(RoleRequest("decision", "p"))
    assert len(calls) == 1


def test_http_config_needs_endpoint_and_key(monkeypatch):
    monkeypatch.delenv("COGNAV_API_KEY", raising=False)
    with pytest.raises(ValueError, match="COGNAV_API_KEY"):
        BackendConfig(kind="http", endpoint=ENDPOINT).validate()
    with pytest.raises(ValueError, match="endpoint"):
        BackendConfig(kind="http").validate()
    monkeypatch.setenv("COGNAV_API_KEY", "k")
    assert "k" not in json.dumps(BackendConfig(kind="http", endpoint=ENDPOINT).to_dict()).split('"')


def test_gateway_records_http_audit(monkeypatch):
    b = http_backend(monkeypatch, lambda r: chat(serialize(FIXTURES["step_memory"])))
    gw = Gateway(b)
    gw.ask("step_memory", "p", lambda v: v)
    assert gw.transcript[0]["http"]["response"]["choices"][0]["message"]["content"]
