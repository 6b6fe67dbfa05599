from __future__ import annotations

import base64
import io
import json
from pathlib import Path

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eagle_iad.dbt import ConfidenceVerdict
from eagle_iad.features import FeatureGrid
from eagle_iad.prompting import (
    ANOMALOUS_PRIOR,
    DEFECT_NO,
    DEFECT_YES,
    NORMAL_PRIOR,
    QUESTION,
    SYSTEM_INSTRUCTION,
    UNPARSEABLE,
    ChatRequest,
    ChatResponse,
    EmptyCompletionError,
    EndpointSettings,
    EndpointStatusError,
    EndpointUnreachable,
    OpenAIChatClient,
    PromptBundle,
    StubClient,
    build_prompt,
    draw_boxes,
    parse_answer,
    retrieve_template,
    send_to_model,
    serialize_request,
)
from eagle_iad.scoring import BoundingBox

GOLDEN = Path(__file__).parent / "golden"
ABNORMAL = ConfidenceVerdict("abnormal", True, 1.2)
NORMAL = ConfidenceVerdict("normal", False, 0.3)
B1, B2, B3 = BoundingBox(1, 2, 5, 6, 0.9), BoundingBox(8, 8, 9, 9, 0.7), BoundingBox(0, 0, 1, 1, 0.5)


def test_golden_strings():
    assert SYSTEM_INSTRUCTION == (GOLDEN / "system_instruction.txt").read_text()
    assert build_prompt(ABNORMAL, [B1]).user_text == (GOLDEN / "anomalous_user_text.txt").read_text()
    assert build_prompt(NORMAL).user_text == (GOLDEN / "normal_user_text.txt").read_text()


def test_abnormal_bundle_keeps_boxes():
    b = build_prompt(ABNORMAL, [B1, B2], template="train_0001", query_image_id="q")
    assert b.prior_kind == "anomalous_prior" and b.textual_prior == ANOMALOUS_PRIOR
    assert b.visual_boxes == (B1, B2)
    assert b.template_image_id == "train_0001" and b.low_confidence and not b.warnings


def test_normal_bundle_strips_boxes():
    b = build_prompt(NORMAL, [B1, B2, B3])
    assert b.prior_kind == "normal_prior" and b.textual_prior == NORMAL_PRIOR
    assert b.visual_boxes is None


def test_abnormal_without_boxes_warns():
    b = build_prompt(ABNORMAL, [])
    assert b.prior_kind == "anomalous_prior" and b.visual_boxes == ()
    assert b.warnings


def test_short_style():
    assert build_prompt(NORMAL, style="short").textual_prior == "This image is predicted as normal."
    assert build_prompt(ABNORMAL, [B1], style="short").textual_prior == "This image is predicted as abnormal."


def test_bundle_invariant_enforced():
    with pytest.raises(ValueError):
        PromptBundle("q", "normal_prior", NORMAL_PRIOR, (B1,))
    with pytest.raises(ValueError):
        PromptBundle("q", "anomalous_prior", ANOMALOUS_PRIOR, None)


# --------------------------------------------------------------------------- template retrieval


def _pooled(vec):
    return FeatureGrid(np.asarray(vec, np.float32)[:, None, None] * np.ones((1, 2, 2), np.float32))


def test_retrieve_self():
    rng = np.random.default_rng(0)
    train = [FeatureGrid(rng.standard_normal((4, 3, 3))) for _ in range(5)]
    assert retrieve_template(train[3], train) == 3
    assert retrieve_template(train[3], train, ids=list("abcde")) == "d"


def test_retrieve_cosine_three_candidates():
    s = 1 / np.sqrt(2)
    train = [_pooled([0, 1, 0]), _pooled([s, s, 0]), _pooled([1, 0, 0])]
    assert retrieve_template(_pooled([1, 0, 0]), train) == 2
    assert retrieve_template(_pooled([7, 0, 0]), train) == 2
    # equal similarity: lowest index wins
    assert retrieve_template(_pooled([1, 0, 0]), [_pooled([2, 0, 0]), _pooled([1, 0, 0])]) == 0
    with pytest.raises(ValueError):
        retrieve_template(_pooled([1, 0, 0]), [])


# --------------------------------------------------------------------------- serialisation


def _kinds(req: ChatRequest):
    parts = req.messages[1]["content"]
    return [p["type"] for p in parts], parts


def test_request_layout_abnormal():
    req = serialize_request(build_prompt(ABNORMAL, [B1], template="t0", query_image_id="q"), "m")
    assert req.messages[0] == {"role": "system", "content": SYSTEM_INSTRUCTION}
    kinds, parts = _kinds(req)
    urls = [p["image_url"]["url"] for p in parts if p["type"] == "image_url"]
    assert urls == ["urn:eagle:template:t0", "urn:eagle:query:q", "urn:eagle:annotated:q"]
    assert parts[-1]["text"] == ANOMALOUS_PRIOR + " " + QUESTION
    assert any("(1, 2, 5, 6)" in p.get("text", "") for p in parts)
    assert req.annotated
    assert json.dumps(req.payload()) == json.dumps(serialize_request(build_prompt(ABNORMAL, [B1], template="t0", query_image_id="q"), "m").payload())


def test_request_layout_normal_has_no_annotation():
    req = serialize_request(build_prompt(NORMAL, [B1], template="t0", query_image_id="q"), "m")
    _, parts = _kinds(req)
    assert not req.annotated
    assert not any("annotated" in p.get("image_url", {}).get("url", "") for p in parts)
    assert parts[-1]["text"] == NORMAL_PRIOR + " " + QUESTION


def test_pixels_become_png_data_uris():
    img = np.zeros((16, 16, 3), np.uint8)
    req = serialize_request(build_prompt(ABNORMAL, [B1], query_image_id="q"), "m", pixels={"q": img})
    urls = [p["image_url"]["url"] for p in req.messages[1]["content"] if p["type"] == "image_url"]
    assert len(urls) == 2 and all(u.startswith("data:image/png;base64,") for u in urls)
    import matplotlib.image as mpimg

    annotated = mpimg.imread(io.BytesIO(base64.b64decode(urls[1].split(",", 1)[1])), format="png")
    assert annotated[2, 1, 0] == 1.0 and annotated[2, 1, 1] == 0.0


def test_draw_boxes_three_pixel_frame():
    out = draw_boxes(np.zeros((20, 20, 3), np.uint8), [BoundingBox(2, 3, 12, 15, 1.0)])
    red = (out == [255, 0, 0]).all(axis=2)
    assert red[3:6, 2:13].all() and red[13:16, 2:13].all()
    assert red[3:16, 2:5].all() and red[3:16, 10:13].all()
    assert not red[6:13, 5:10].any()
    assert not red[:3].any() and not red[16:].any()


# --------------------------------------------------------------------------- parsing


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("A", DEFECT_YES),
        ("A. Yes", DEFECT_YES),
        ("The image is abnormal", DEFECT_YES),
        ("Yes, defective", DEFECT_YES),
        ("B. No.", DEFECT_NO),
        ("(B)", DEFECT_NO),
        ("There is no defect in the object.", DEFECT_NO),
        ("A normal part", DEFECT_NO),
        ("no", DEFECT_NO),
        ("Normal.", DEFECT_NO),
        ("not anomalous", DEFECT_NO),
        ("B. Yes", DEFECT_NO),
        ("hmm", UNPARSEABLE),
        ("", UNPARSEABLE),
    ],
)
def test_parse_answer(raw, expected):
    assert parse_answer(raw) == expected


@settings(max_examples=200, deadline=None)
@given(st.text())
def test_parse_total_and_case_stable(raw):
    r = parse_answer(raw)
    assert r in (DEFECT_YES, DEFECT_NO, UNPARSEABLE)
    assert parse_answer(raw.upper().lower()) == r
    assert parse_answer(raw) == r


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["A", "B"]), st.sampled_from([".", ")", ":", ""]), st.text(max_size=30))
def test_leading_letter_wins(letter, punct, tail):
    raw = letter + punct + ((" " + tail) if punct else "")
    assert parse_answer(raw) == (DEFECT_YES if letter == "A" else DEFECT_NO)


# --------------------------------------------------------------------------- sending


def test_stub_answers():
    b = build_prompt(ABNORMAL, [B1])
    assert send_to_model(b, StubClient("fixed", "A")).parsed == DEFECT_YES
    assert send_to_model(b, StubClient("fixed", "B. No.")).parsed == DEFECT_NO
    with pytest.raises(EmptyCompletionError) as err:
        send_to_model(b, StubClient("fixed", ""))
    assert err.value.answer.parsed == UNPARSEABLE


def test_echo_and_adversarial_stubs():
    sure = ConfidenceVerdict("abnormal", False, 9.0)
    assert send_to_model(build_prompt(sure, [B1]), StubClient("echo")).parsed == DEFECT_YES
    assert send_to_model(build_prompt(sure, [B1]), StubClient("adversarial")).parsed == DEFECT_YES
    assert send_to_model(build_prompt(ABNORMAL, [B1]), StubClient("adversarial")).parsed == DEFECT_NO
    assert send_to_model(build_prompt(NORMAL), StubClient("echo")).parsed == DEFECT_NO


def test_request_log_record():
    log: list = []
    send_to_model(build_prompt(NORMAL, query_image_id="x"), StubClient("echo"), request_log=log)
    (rec,) = log
    assert rec["image_id"] == "x" and rec["annotated_image"] is False and rec["prior_kind"] == "normal_prior"


def _completion(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def _client(handler, **kw):
    sleeps: list = []
    settings = EndpointSettings(url="http://mllm.test/v1", model="vlm", api_key="sk-secret", backoff_s=0.5, **kw)
    return OpenAIChatClient(settings, transport=httpx.MockTransport(handler), sleep=sleeps.append), sleeps


def test_client_posts_openai_payload():
    seen = {}

    def handler(request: httpx.Request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _completion("A")

    client, _ = _client(handler)
    ans = send_to_model(build_prompt(ABNORMAL, [B1]), client)
    assert ans.parsed == DEFECT_YES
    assert seen["url"] == "http://mllm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-secret"
    assert seen["body"]["model"] == "vlm"
    assert seen["body"]["messages"][0]["content"] == SYSTEM_INSTRUCTION


def test_client_retries_transient_status_with_backoff():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503) if len(calls) < 3 else _completion("B")

    client, sleeps = _client(handler)
    assert client.complete(serialize_request(build_prompt(NORMAL))).raw_text == "B"
    assert len(calls) == 3 and sleeps == [0.5, 1.0]


def test_client_gives_up_after_three_retries():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused", request=request)

    client, sleeps = _client(handler)
    with pytest.raises(EndpointUnreachable):
        client.complete(serialize_request(build_prompt(NORMAL)))
    assert len(calls) == 4 and sleeps == [0.5, 1.0, 2.0]


def test_client_non_transient_status_raises_immediately():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, text="bad key")

    client, sleeps = _client(handler)
    with pytest.raises(EndpointStatusError) as err:
        client.complete(serialize_request(build_prompt(NORMAL)))
    assert err.value.status == 401 and len(calls) == 1 and sleeps == []


def test_missing_endpoint():
    with pytest.raises(EndpointUnreachable):
        OpenAIChatClient(EndpointSettings(url=None))


def test_settings_from_env(monkeypatch):
    monkeypatch.setenv("EAGLE_ENDPOINT", "http://x")
    monkeypatch.setenv("EAGLE_MODEL", "m1")
    monkeypatch.setenv("EAGLE_API_KEY", "k")
    s = EndpointSettings.from_env(EndpointSettings(url="http://base", model="m0", max_retries=5))
    assert (s.url, s.model, s.api_key, s.max_retries) == ("http://x", "m1", "k", 5)


def test_chat_response_defaults():
    r = ChatResponse("A")
    assert r.status == 200 and r.latency_s == 0.0
