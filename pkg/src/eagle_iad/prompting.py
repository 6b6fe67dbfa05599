"""Conditional visual/textual prompts, the chat-endpoint client and answer parsing."""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .dbt import ConfidenceVerdict
from .features import FeatureGrid
from .scoring import BoundingBox

log = logging.getLogger(__name__)

SYSTEM_INSTRUCTION = (
    "You are my industrial image inspection assistant. You will receive multiple images simultaneously, "
    "including a template image, a query image, and a query image with red bounding boxes. Based on the "
    "input images and the accompanying textual information, answer the given question. The question is "
    "multiple-choice. Respond only with the letter of the correct option (e.g., A, B, C, or D). Do not "
    "include explanations or extra text."
)
ANOMALOUS_PRIOR = (
    "The query image is predicted as anomalous, The position of the red bounding box on the query image "
    "is the predicted defect location."
)
NORMAL_PRIOR = "The query image is predicted as normal."
QUESTION = (
    "Answer with the option's letter from the given choices directly! "
    "Is there any defect in the object? A. Yes. B. No."
)
SHORT_PRIORS = {
    "anomalous_prior": "This image is predicted as abnormal.",
    "normal_prior": "This image is predicted as normal.",
}
PRIORS = {"anomalous_prior": ANOMALOUS_PRIOR, "normal_prior": NORMAL_PRIOR}

DEFECT_YES, DEFECT_NO, UNPARSEABLE = "defect_yes", "defect_no", "unparseable"


@dataclass(frozen=True)
class PromptBundle:
    query_image_id: str
    prior_kind: str  # "anomalous_prior" | "normal_prior"
    textual_prior: str
    visual_boxes: tuple[BoundingBox, ...] | None
    template_image_id: str | None = None
    question: str = QUESTION
    system_instruction: str = SYSTEM_INSTRUCTION
    low_confidence: bool = False
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.visual_boxes is not None) != (self.prior_kind == "anomalous_prior"):
            raise ValueError("visual boxes must be attached exactly when the prior is anomalous")

    @property
    def user_text(self) -> str:
        return f"{self.textual_prior} {self.question}"


def build_prompt(
    verdict: ConfidenceVerdict,
    boxes: Sequence[BoundingBox] = (),
    template: str | None = None,
    query_image_id: str = "query",
    style: str = "full",
) -> PromptBundle:
    """Pick the textual prior from the verdict; attach boxes only when abnormal."""
    kind = "anomalous_prior" if verdict.abnormal else "normal_prior"
    priors = SHORT_PRIORS if style == "short" else PRIORS
    warnings: list[str] = []
    if verdict.abnormal:
        visual = tuple(boxes)
        if not visual:
            warnings.append("abnormal verdict without any localised box")
    else:
        visual = None
    return PromptBundle(
        query_image_id=query_image_id,
        prior_kind=kind,
        textual_prior=priors[kind],
        visual_boxes=visual,
        template_image_id=template,
        low_confidence=verdict.low_confidence,
        warnings=tuple(warnings),
    )


def pooled_descriptor(grid: FeatureGrid) -> np.ndarray:
    return grid.data.astype(np.float64).mean(axis=(1, 2))


def retrieve_template(query: FeatureGrid, train: Sequence[FeatureGrid], ids: Sequence[str] | None = None) -> str | int:
    """Most similar training image by cosine similarity of mean-pooled features.

    Returns the id from ``ids`` when given, else the index. Ties go to the
    lowest index.
    """
    if not train:
        raise ValueError("no training images to retrieve from")
    q = pooled_descriptor(query)
    bank = np.stack([pooled_descriptor(g) for g in train])
    norms = np.linalg.norm(bank, axis=1) * np.linalg.norm(q)
    sims = np.divide(bank @ q, norms, out=np.zeros(len(bank)), where=norms > 0)
    k = int(np.argmax(sims))
    return ids[k] if ids is not None else k


# --------------------------------------------------------------------------- rendering


def draw_boxes(image: np.ndarray, boxes: Sequence[BoundingBox], line_width: int = 3) -> np.ndarray:
    """Copy of an RGB uint8 image with red rectangles drawn inward from each box edge."""
    out = np.array(image, dtype=np.uint8, copy=True)
    if out.ndim == 2:
        out = np.repeat(out[:, :, None], 3, axis=2)
    h, w = out.shape[:2]
    red = np.array([255, 0, 0], dtype=np.uint8)
    for b in boxes:
        x0, y0 = max(b.x0, 0), max(b.y0, 0)
        x1, y1 = min(b.x1, w - 1), min(b.y1, h - 1)
        t = line_width
        out[y0:min(y0 + t, y1 + 1), x0:x1 + 1] = red
        out[max(y1 - t + 1, y0):y1 + 1, x0:x1 + 1] = red
        out[y0:y1 + 1, x0:min(x0 + t, x1 + 1)] = red
        out[y0:y1 + 1, max(x1 - t + 1, x0):x1 + 1] = red
    return out


def encode_png(image: np.ndarray) -> bytes:
    import matplotlib.image as mpimg

    buf = io.BytesIO()
    mpimg.imsave(buf, np.asarray(image, dtype=np.uint8), format="png", metadata={"Software": None})
    return buf.getvalue()


# --------------------------------------------------------------------------- wire format


@dataclass
class ChatRequest:
    messages: list[dict]
    model: str = ""
    image_id: str = ""
    annotated: bool = False
    prior_kind: str = ""
    low_confidence: bool = False

    def payload(self) -> dict:
        return {"model": self.model, "messages": self.messages, "temperature": 0, "max_tokens": 8}

    def log_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "prior_kind": self.prior_kind,
            "annotated_image": self.annotated,
            "low_confidence": self.low_confidence,
            "request": self.payload(),
        }


@dataclass
class ChatResponse:
    raw_text: str
    status: int = 200
    latency_s: float = 0.0


def _image_part(image_id: str, png: bytes | None, tag: str) -> dict:
    if png is not None:
        url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
    else:
        url = f"urn:eagle:{tag}:{image_id}"
    return {"type": "image_url", "image_url": {"url": url}}


def serialize_request(
    bundle: PromptBundle,
    model: str = "",
    pixels: dict[str, np.ndarray] | None = None,
) -> ChatRequest:
    """Lay out one chat request: instruction, template, query, annotated query, text.

    ``pixels`` maps image ids to RGB arrays. Without pixel data images are
    sent as ``urn:eagle:`` references and boxes travel as text coordinates.
    """
    pixels = pixels or {}

    def png(image_id):
        img = pixels.get(image_id)
        return None if img is None else encode_png(img)

    parts: list[dict] = []
    if bundle.template_image_id is not None:
        parts.append({"type": "text", "text": "Template image:"})
        parts.append(_image_part(bundle.template_image_id, png(bundle.template_image_id), "template"))
    parts.append({"type": "text", "text": "Query image:"})
    parts.append(_image_part(bundle.query_image_id, png(bundle.query_image_id), "query"))

    annotated = bundle.visual_boxes is not None and len(bundle.visual_boxes) > 0
    if annotated:
        parts.append({"type": "text", "text": "Query image with red bounding boxes:"})
        src = pixels.get(bundle.query_image_id)
        if src is not None:
            parts.append(_image_part(bundle.query_image_id, encode_png(draw_boxes(src, bundle.visual_boxes)), "annotated"))
        else:
            parts.append(_image_part(bundle.query_image_id, None, "annotated"))
            coords = "; ".join(f"({b.x0}, {b.y0}, {b.x1}, {b.y1})" for b in bundle.visual_boxes)
            parts.append({"type": "text", "text": f"Red bounding boxes (x0, y0, x1, y1): {coords}"})
    parts.append({"type": "text", "text": bundle.user_text})

    messages = [
        {"role": "system", "content": bundle.system_instruction},
        {"role": "user", "content": parts},
    ]
    return ChatRequest(
        messages=messages,
        model=model,
        image_id=bundle.query_image_id,
        annotated=annotated,
        prior_kind=bundle.prior_kind,
        low_confidence=bundle.low_confidence,
    )


# --------------------------------------------------------------------------- answers

_LEADING_LETTER = re.compile(r"^\W*([ab])(?:\s*$|[.):,;!\]])")
_NEGATIONS = re.compile(
    r"\b(?:no|not|without|free of|zero)\s+(?:any\s+|visible\s+|obvious\s+)?"
    r"(?:defects?|defective|anomal\w*|abnormal\w*)"
)
_POSITIVE = re.compile(r"\b(?:yes|abnormal|defect|defects|defective|anomalous)\b")
_NEGATIVE = re.compile(r"\b(?:no|normal)\b")


def parse_answer(raw: str) -> str:
    """Map a free-text answer to ``defect_yes`` / ``defect_no`` / ``unparseable``.

    Order: a leading option letter (A yes, B no); a negated defect phrase
    such as "no defect"; any positive keyword; a standalone "no"/"normal".
    """
    text = raw.upper().lower()
    m = _LEADING_LETTER.match(text)
    if m:
        return DEFECT_YES if m.group(1) == "a" else DEFECT_NO
    if _NEGATIONS.search(text):
        return DEFECT_NO
    if _POSITIVE.search(text):
        return DEFECT_YES
    if _NEGATIVE.search(text):
        return DEFECT_NO
    return UNPARSEABLE


@dataclass(frozen=True)
class ModelAnswer:
    raw_text: str
    parsed: str
    latency_s: float = 0.0


class EndpointError(RuntimeError):
    pass


class EndpointUnreachable(EndpointError):
    pass


class EndpointStatusError(EndpointError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")
        self.status = status


class EmptyCompletionError(EndpointError):
    def __init__(self, answer: ModelAnswer):
        super().__init__("model returned an empty completion")
        self.answer = answer


class ChatClient(Protocol):
    model: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


@dataclass
class EndpointSettings:
    url: str | None = None
    model: str = ""
    api_key: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_s: float = 0.5

    @classmethod
    def from_env(cls, base: "EndpointSettings | None" = None) -> "EndpointSettings":
        s = base or cls()
        return cls(
            url=os.environ.get("EAGLE_ENDPOINT", s.url),
            model=os.environ.get("EAGLE_MODEL", s.model),
            api_key=os.environ.get("EAGLE_API_KEY", s.api_key),
            timeout_s=s.timeout_s,
            max_retries=s.max_retries,
            backoff_s=s.backoff_s,
        )


_TRANSIENT_STATUS = {429, 502, 503, 504}


class OpenAIChatClient:
    """Minimal OpenAI-compatible ``/chat/completions`` client with retries."""

    def __init__(self, settings: EndpointSettings, transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        if not settings.url:
            raise EndpointUnreachable("no chat endpoint configured (set EAGLE_ENDPOINT or endpoint.url)")
        self.settings = settings
        self.model = settings.model
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if settings.api_key:
            headers["Authorization"] = f"Bearer {settings.api_key}"
        self._http = httpx.Client(timeout=settings.timeout_s, headers=headers, transport=transport)

    @property
    def url(self) -> str:
        base = self.settings.url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = request.payload()
        payload["model"] = self.model or payload["model"]
        delay = self.settings.backoff_s
        for attempt in range(self.settings.max_retries + 1):
            last = attempt == self.settings.max_retries
            t0 = time.perf_counter()
            try:
                resp = self._http.post(self.url, json=payload)
            except httpx.TransportError as exc:
                if last:
                    raise EndpointUnreachable(f"{self.url} unreachable after {attempt + 1} attempts: {exc}") from exc
                log.warning("transport error (%s); retrying in %.2fs", exc, delay)
            else:
                if resp.status_code in _TRANSIENT_STATUS and not last:
                    log.warning("HTTP %d; retrying in %.2fs", resp.status_code, delay)
                elif resp.status_code // 100 != 2:
                    raise EndpointStatusError(resp.status_code, resp.text)
                else:
                    body = resp.json()
                    try:
                        text = body["choices"][0]["message"]["content"] or ""
                    except (KeyError, IndexError, TypeError) as exc:
                        raise EndpointError(f"malformed completion: {json.dumps(body)[:200]}") from exc
                    return ChatResponse(text, resp.status_code, time.perf_counter() - t0)
            self._sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def close(self):
        self._http.close()


class StubClient:
    """Deterministic stand-in for the multimodal model.

    ``mode``: ``echo`` answers with the prior (A for anomalous, B for normal);
    ``adversarial`` flips the prior on low-confidence requests only;
    ``fixed`` always returns ``text``.
    """

    def __init__(self, mode: str = "echo", text: str = "A"):
        if mode not in ("echo", "adversarial", "fixed"):
            raise ValueError(f"unknown stub mode {mode!r}")
        self.mode = mode
        self.text = text
        self.model = f"stub-{mode}"

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.mode == "fixed":
            return ChatResponse(self.text)
        yes = request.prior_kind == "anomalous_prior"
        if self.mode == "adversarial" and request.low_confidence:
            yes = not yes
        return ChatResponse("A" if yes else "B")


def send_to_model(
    bundle: PromptBundle,
    client: ChatClient,
    pixels: dict[str, np.ndarray] | None = None,
    request_log: list | None = None,
) -> ModelAnswer:
    request = serialize_request(bundle, getattr(client, "model", ""), pixels)
    if request_log is not None:
        request_log.append(request.log_record())
    resp = client.complete(request)
    answer = ModelAnswer(resp.raw_text, parse_answer(resp.raw_text), resp.latency_s)
    if not resp.raw_text.strip():
        raise EmptyCompletionError(answer)
    return answer
