"""Chat-completions backend for OpenAI-compatible serving endpoints."""

from __future__ import annotations

import logging
import os
from typing import Any

import httpx

from ..types import DivergencePair, Question, ReasoningPath, Step
from .base import Completion, GatewayError, GenerationRequest, ModelGateway, TransportError, render_reasoning
from .prompts import render

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "http://localhost:8000/v1"
BASE_URL_ENV = "STEPCRITIC_BASE_URL"
API_KEY_ENV = "STEPCRITIC_API_KEY"


class ChatClient:
    """Minimal chat-completions client.  Server errors, rate limits and
    network failures surface as :class:`TransportError`."""

    def __init__(self, base_url: str | None = None, model: str = "default", *,
                 api_key_env: str = API_KEY_ENV, timeout: float = 120.0,
                 transport: httpx.BaseTransport | None = None) -> None:
        self.base_url = (os.environ.get(BASE_URL_ENV) or base_url or DEFAULT_BASE_URL).rstrip("/")
        self.model = model
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout,
                                  transport=transport)

    def close(self) -> None:
        self._http.close()

    def chat(self, messages: list[dict[str, Any]], **params: Any) -> dict[str, Any]:
        body = {"model": self.model, "messages": messages}
        body.update({k: v for k, v in params.items() if v is not None})
        try:
            resp = self._http.post("/chat/completions", json=body)
        except httpx.TransportError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code} from {self.base_url}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError("response body is not JSON") from exc


def user_message(text: str, image_ref: str | None) -> dict[str, Any]:
    if not image_ref:
        return {"role": "user", "content": text}
    return {
        "role": "user",
        "content": [
            {"type": "image_url", "image_url": {"url": image_ref}},
            {"type": "text", "text": text},
        ],
    }


def _choices(data: dict[str, Any]) -> list[dict[str, Any]]:
    choices = data.get("choices") or []
    if not choices:
        raise TransportError("response has no choices")
    return choices


def _completion(choice: dict[str, Any], token_count: int | None = None) -> Completion:
    text = (choice.get("message") or {}).get("content") or ""
    return Completion(text, token_count, choice.get("finish_reason") == "stop")


class RemoteGateway(ModelGateway):
    """Actor, critic and annotator served over HTTP.

    Partial reasoning is sent as a trailing assistant message and continued in
    place (``continue_final_message``, as supported by vLLM-style servers).
    Separate clients may back the actor and critic roles.
    """

    def __init__(self, actor: ChatClient, critic: ChatClient | None = None,
                 annotator: ChatClient | None = None, *, annotator_temperature: float = 0.0,
                 critic_temperature: float = 0.0, continue_final_message: bool = True,
                 **kwargs: Any) -> None:
        super().__init__(**kwargs)
        self.actor = actor
        self.critic = critic or actor
        self.annotator = annotator or actor
        self.annotator_temperature = annotator_temperature
        self.critic_temperature = critic_temperature
        self.continue_final_message = continue_final_message

    def _actor_messages(self, question: Question, prior_steps) -> tuple[list[dict[str, Any]], dict[str, Any]]:
        prompt = render(self.templates.actor, question=question.text)
        messages = [user_message(prompt, question.image_ref)]
        extra: dict[str, Any] = {}
        if prior_steps:
            messages.append({"role": "assistant", "content": render_reasoning(prior_steps) + "\n"})
            if self.continue_final_message:
                extra = {"continue_final_message": True, "add_generation_prompt": False}
        return messages, extra

    def _sample_steps(self, req: GenerationRequest) -> list[Completion]:
        messages, extra = self._actor_messages(req.question, req.prior_steps)
        data = self.actor.chat(messages, max_tokens=req.max_new_tokens, temperature=req.temperature,
                               n=req.n_samples, seed=req.seed, **extra)
        choices = _choices(data)
        usage = (data.get("usage") or {}).get("completion_tokens")
        single = usage if req.n_samples == 1 else None
        return [_completion(c, single) for c in choices]

    def _complete(self, question: Question, prior_steps: tuple[Step, ...], budget: int, *,
                  temperature: float, seed: int, sample_index: int) -> Completion:
        messages, extra = self._actor_messages(question, prior_steps)
        data = self.actor.chat(messages, max_tokens=budget, temperature=temperature,
                               seed=seed, **extra)
        return _completion(_choices(data)[0])

    def _critique(self, question: Question, answer: ReasoningPath, *, seed: int,
                  sample_index: int) -> str:
        prompt = render(self.templates.critic, question=question.text,
                        reasoning=render_reasoning(answer.steps))
        data = self.critic.chat([user_message(prompt, question.image_ref)],
                                temperature=self.critic_temperature, seed=seed)
        return (_choices(data)[0].get("message") or {}).get("content") or ""

    def _refine(self, question: Question, answer: ReasoningPath, critique: str, budget: int, *,
                temperature: float, seed: int, sample_index: int) -> Completion:
        prompt = render(self.templates.refine, question=question.text,
                        reasoning=render_reasoning(answer.steps), critique=critique)
        data = self.actor.chat([user_message(prompt, question.image_ref)], max_tokens=budget,
                               temperature=temperature, seed=seed)
        return _completion(_choices(data)[0])

    def _annotate(self, question: Question, pair: DivergencePair) -> str:
        prompt = render(self.templates.annotator, question=question.text,
                        shared_prefix=render_reasoning(pair.shared_prefix) or "(none)",
                        branch_a=render_reasoning(pair.branch_a),
                        branch_b=render_reasoning(pair.branch_b))
        data = self.annotator.chat([user_message(prompt, question.image_ref)],
                                   temperature=self.annotator_temperature)
        return (_choices(data)[0].get("message") or {}).get("content") or ""


JUDGE_PROMPT = (
    "Decide whether the predicted answer means the same as the reference answer.\n"
    "Reference: {reference}\nPrediction: {prediction}\n"
    "Reply with a single word: yes or no."
)


class JudgeGrader:
    """Grader that asks a model whether prediction and reference agree."""

    def __init__(self, client: ChatClient) -> None:
        self.client = client

    def __call__(self, predicted: str | None, ground_truth: str) -> bool:
        if not ground_truth.strip():
            raise ValueError("ground truth must be non-empty")
        if predicted is None:
            return False
        prompt = render(JUDGE_PROMPT, reference=ground_truth, prediction=predicted)
        data = self.client.chat([{"role": "user", "content": prompt}], temperature=0.0, max_tokens=4)
        reply = (_choices(data)[0].get("message") or {}).get("content") or ""
        return reply.strip().lower().startswith("yes")
