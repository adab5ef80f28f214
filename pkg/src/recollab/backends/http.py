"""JSON-over-HTTP backend adapters.

One POST per call, JSON in and JSON out, no streaming. Servers that speak
a normalized coordinate convention declare its grid size in config and
every adapter converts to absolute pixels before returning.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import requests

from ..geometry import Detection
from .extract import HeuristicTargetExtractor, build_extract_prompt, resolve_target
from .replay import grounding_from_payload, selection_from_payload
from .types import (
    BackendError,
    GenerativeGrounding,
    GroundingResult,
    ImageRef,
    SelectionResult,
    detections_from_payload,
    scale_box,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HttpClient:
    """Shared POST plumbing: bearer auth, timeout, bounded retries.

    Transport failures, timeouts, and 5xx responses are retried with
    exponential backoff; 4xx responses and error payloads fail fast.
    """

    endpoint: str
    token: str | None = None
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 0.5
    session: requests.Session = field(default_factory=requests.Session, compare=False)

    def post(self, payload: Mapping[str, Any]) -> dict[str, Any]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                response = self.session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("POST %s failed (attempt %d): %s", self.endpoint, attempt + 1, exc)
                continue
            if response.status_code >= 500:
                last_error = BackendError(
                    f"server error {response.status_code} from {self.endpoint}"
                )
                logger.warning("POST %s: HTTP %d (attempt %d)", self.endpoint, response.status_code, attempt + 1)
                continue
            if response.status_code != 200:
                raise BackendError(
                    f"HTTP {response.status_code} from {self.endpoint}: {response.text[:200]}"
                )
            try:
                body = response.json()
            except ValueError as exc:
                raise BackendError(f"non-JSON response from {self.endpoint}") from exc
            if not isinstance(body, dict):
                raise BackendError(f"response from {self.endpoint} is not a JSON object")
            if "error" in body:
                raise BackendError(f"backend error from {self.endpoint}: {body['error']}")
            return body
        raise BackendError(
            f"{self.endpoint} unreachable after {self.retries + 1} attempts: {last_error}"
        ) from last_error


def _to_pixels(result: GroundingResult, image: ImageRef, space: int | None) -> GroundingResult:
    if space is None:
        return result
    converted = tuple(
        Detection(
            box=scale_box(
                d.box, from_size=(space, space), to_size=(image.width, image.height)
            ),
            score=d.score,
            token_scores=d.token_scores,
        )
        for d in result.detections
    )
    return GroundingResult(detections=converted, query=result.query)


@dataclass(frozen=True)
class HttpDetector:
    client: HttpClient
    coordinate_space: int | None = None

    def detect(self, image: ImageRef, class_name: str) -> GroundingResult:
        if not class_name:
            raise ValueError("empty detection category")
        payload = self.client.post({"image": image.image_id, "query": class_name})
        return _to_pixels(detections_from_payload(payload, query=class_name), image, self.coordinate_space)


@dataclass(frozen=True)
class HttpGrounder:
    client: HttpClient
    coordinate_space: int | None = None

    def ground(self, image: ImageRef, expression: str) -> GroundingResult:
        if not expression:
            raise ValueError("empty grounding expression")
        payload = self.client.post({"image": image.image_id, "query": expression})
        return _to_pixels(detections_from_payload(payload, query=expression), image, self.coordinate_space)


@dataclass(frozen=True)
class HttpMllm:
    client: HttpClient
    coordinate_space: int | None = None

    def ground_generative(self, image: ImageRef, prompt: str) -> GenerativeGrounding:
        if not prompt:
            raise ValueError("empty prompt")
        payload = self.client.post({"image": image.image_id, "prompt": prompt})
        grounding = grounding_from_payload(payload)
        if grounding.box is not None and self.coordinate_space is not None:
            pixel_box = scale_box(
                grounding.box,
                from_size=(self.coordinate_space, self.coordinate_space),
                to_size=(image.width, image.height),
            )
            grounding = replace(grounding, box=pixel_box)
        return grounding


@dataclass(frozen=True)
class HttpSelector:
    client: HttpClient

    def select(self, image: ImageRef, prompt: str, offered: Sequence[str]) -> SelectionResult:
        payload = self.client.post(
            {"image": image.image_id, "prompt": prompt, "labels": list(offered)}
        )
        return selection_from_payload(payload, offered)


@dataclass(frozen=True)
class HttpTargetExtractor:
    client: HttpClient
    fallback: HeuristicTargetExtractor = HeuristicTargetExtractor()

    def extract(self, expression: str) -> str:
        prompt = build_extract_prompt(expression)
        payload = self.client.post({"prompt": prompt})
        return resolve_target(str(payload.get("text", "")), expression, self.fallback)
