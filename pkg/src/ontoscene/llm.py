"""Language-model backends for ontology construction.

Two live HTTP clients (chat completion and log-probability scoring) plus
deterministic stand-ins used by tests and the ``--mock`` CLI flag.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import urllib.error
import urllib.request
from pathlib import Path
from typing import Callable

import numpy as np

from .ontology import PromptTemplates, SpatialOntology

log = logging.getLogger(__name__)

API_KEY_ENV = "ONTO_LLM_API_KEY"
ENDPOINT_ENV = "ONTO_LLM_ENDPOINT"
MODEL_ENV = "ONTO_LLM_MODEL"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"


class MissingCredentials(RuntimeError):
    def __init__(self, var: str):
        super().__init__(f"environment variable {var} is not set")
        self.var = var


class TransportError(RuntimeError):
    pass


def _stable_hash(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class DiskCache:
    """One JSON file per key under ``root``; safe to share between runs."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def get(self, key: str):
        path = self.root / f"{key}.json"
        if path.exists():
            return json.loads(path.read_text())["value"]
        return None

    def put(self, key: str, value) -> None:
        path = self.root / f"{key}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"value": value}))
        tmp.replace(path)


def _post_json(url: str, payload: dict, api_key: str, timeout: float) -> dict:
    req = urllib.request.Request(
        url,
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json", "Authorization": f"Bearer {api_key}"},
        method="POST",
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


class _HttpBase:
    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        transport_retries: int = 4,
        backoff: float = 1.0,
        cache_dir=None,
        post: Callable[[str, dict, str, float], dict] = _post_json,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        if not self.api_key:
            raise MissingCredentials(API_KEY_ENV)
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT
        self.model = model or os.environ.get(MODEL_ENV) or "gpt-4"
        self.timeout = timeout
        self.transport_retries = transport_retries
        self.backoff = backoff
        self.cache = DiskCache(cache_dir) if cache_dir else None
        self._post = post

    def _request(self, payload: dict) -> dict:
        key = _stable_hash(self.endpoint, json.dumps(payload, sort_keys=True))
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        delay = self.backoff
        for attempt in range(self.transport_retries + 1):
            try:
                body = self._post(self.endpoint, payload, self.api_key, self.timeout)
                break
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as e:
                if attempt == self.transport_retries:
                    raise TransportError(f"{self.endpoint}: {e}") from e
                log.warning("transport error (%s), retrying in %.1fs", e, delay)
                time.sleep(delay)
                delay *= 2
        if self.cache is not None:
            self.cache.put(key, body)
        return body


class HttpChatClient(_HttpBase):
    """Chat-completion client for OpenAI-compatible endpoints."""

    def __init__(self, *args, temperature: float = 1.0, **kwargs):
        super().__init__(*args, **kwargs)
        self.temperature = temperature
        self._counts: dict[str, int] = {}

    def complete(self, prompt: str) -> str:
        # repeated identical prompts must be able to differ, so the cache key
        # carries the occurrence index
        n = self._counts.get(prompt, 0)
        self._counts[prompt] = n + 1
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "n": 1,
            "user": f"rep-{n}",
        }
        body = self._request(payload)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise TransportError(f"unexpected chat response shape: {str(body)[:200]}") from e


class HttpLogprobScorer(_HttpBase):
    """Sums token log-probabilities of the prompt via a legacy completions endpoint
    (``echo=True, max_tokens=0``)."""

    def score(self, text: str) -> float:
        body = self._request(
            {"model": self.model, "prompt": text, "echo": True, "max_tokens": 0, "logprobs": 0}
        )
        try:
            lps = body["choices"][0]["logprobs"]["token_logprobs"]
        except (KeyError, IndexError, TypeError) as e:
            raise TransportError(f"unexpected scoring response shape: {str(body)[:200]}") from e
        return float(sum(lp for lp in lps if lp is not None))


# ---------------------------------------------------------------------------
# deterministic stand-ins
# ---------------------------------------------------------------------------


class ScriptedChatClient:
    """Replays canned replies in order and records every prompt it saw.

    ``replies`` may be a list (consumed front to back, the last one repeating)
    or a callable ``prompt -> reply``.
    """

    def __init__(self, replies):
        self._replies = replies
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if callable(self._replies):
            return self._replies(prompt)
        idx = min(len(self.prompts) - 1, len(self._replies) - 1)
        return self._replies[idx]


class PlantedChatClient:
    """Answers each completion prompt with the planted edges of the queried
    high-level concept, shuffled by a seeded stream.

    With ``hallucination_rate > 0`` a reply occasionally includes a made-up
    concept, which the builder must reject and re-query.
    """

    def __init__(self, ontology: SpatialOntology, seed: int = 0, hallucination_rate: float = 0.0,
                 templates: PromptTemplates = PromptTemplates()):
        self.ontology = ontology
        self.rng = np.random.default_rng(seed)
        self.hallucination_rate = hallucination_rate
        self.templates = templates
        self.prompts: list[str] = []

    def _target(self, prompt: str) -> str:
        for high in sorted(self.ontology.high_levels, key=len, reverse=True):
            if f"distinguish {high} from" in prompt:
                return high
        raise ValueError("prompt does not name a known high-level concept")

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        i = self.ontology.high_levels.index(self._target(prompt))
        lows = [self.ontology.low_levels[j] for j in np.nonzero(self.ontology.omega[i])[0]]
        lows = [lows[j] for j in self.rng.permutation(len(lows))]
        if self.hallucination_rate and self.rng.random() < self.hallucination_rate and "Do not respond" not in prompt:
            lows = lows[:-1] + ["imaginary-" + lows[-1]] if lows else ["imaginary-thing"]
        return repr(lows)


class TableScorer:
    """Looks up scores from a mapping ``sentence -> log-probability``."""

    def __init__(self, table: dict[str, float]):
        self.table = dict(table)

    def score(self, text: str) -> float:
        try:
            return float(self.table[text])
        except KeyError:
            raise KeyError(f"no score for sentence {text!r}") from None


class PlantedScorer:
    """Log-probabilities that favour the planted edges of an ontology, plus
    seeded per-sentence jitter so ties do not line up."""

    def __init__(self, ontology: SpatialOntology, seed: int = 0, gap: float = 4.0, jitter: float = 0.5,
                 templates: PromptTemplates = PromptTemplates()):
        self.scores: dict[str, float] = {}
        for i, high in enumerate(ontology.high_levels):
            for j, low in enumerate(ontology.low_levels):
                text = templates.score(low, high)
                noise = int(_stable_hash(str(seed), text)[:8], 16) / 0xFFFFFFFF
                self.scores[text] = -10.0 + gap * float(ontology.omega[i, j] > 0) + jitter * noise

    def score(self, text: str) -> float:
        return self.scores.get(text, -10.0)


def client_from_env(cache_dir=None, **kwargs) -> HttpChatClient:
    return HttpChatClient(cache_dir=cache_dir, **kwargs)


def scorer_from_env(cache_dir=None, **kwargs) -> HttpLogprobScorer:
    return HttpLogprobScorer(cache_dir=cache_dir, **kwargs)
