"""LLM provider abstraction: remote HTTP, scripted fixtures, synthetic oracle.

Every provider exposes three pure reads: text completion, YES/NO first-token
probabilities, and text embeddings. All providers are deterministic given
their configuration (plus fixtures or seed), which is what makes pipeline
artifacts reproducible byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_API_KEY_ENV = "ECARE_API_KEY"


class ProviderError(Exception):
    """Base class for provider failures."""


class FixtureError(ProviderError):
    """A scripted fixture file is malformed."""


class MissingFixtureKeyError(ProviderError):
    """A prompt digest has no scripted response."""


class CapabilityError(ProviderError):
    """The provider cannot serve the requested signal."""


@dataclass
class ProviderResponse:
    """Completion text plus optional YES/NO probability mass."""

    text: str
    yes_probability: float | None = None
    no_probability: float | None = None

    def __post_init__(self) -> None:
        for name, value in (("yes", self.yes_probability), ("no", self.no_probability)):
            if value is not None and not 0.0 <= value <= 1.0:
                raise ProviderError(f"{name} probability {value} outside [0, 1]")


@dataclass
class ProviderConfig:
    """Declarative provider selection; see make_provider."""

    kind: str
    base_url: str | None = None
    model_name: str | None = None
    api_key_env_name: str = DEFAULT_API_KEY_ENV
    max_in_flight: int = 4
    timeout_ms: int = 30000
    max_retries: int = 2
    seed: int = 0
    fixture_path: str | None = None
    world: dict | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("http", "scripted", "oracle"):
            raise ProviderError(f"unknown provider kind {self.kind!r}")
        if self.kind == "http" and not (self.base_url and self.model_name):
            raise ProviderError("http provider requires base_url and model_name")
        if self.kind == "scripted" and not self.fixture_path:
            raise ProviderError("scripted provider requires fixture_path")
        if self.max_in_flight < 1:
            raise ProviderError("max_in_flight must be positive")


def prompt_digest(prompt: str) -> str:
    """SHA-256 hex digest of the exact prompt bytes; the fixture key."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class Provider:
    """Base provider: validation, call counters, and the public surface."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.complete_calls = 0
        self.yes_no_calls = 0
        self.embed_calls = 0

    # -- public API --------------------------------------------------------

    def complete(self, prompt: str) -> ProviderResponse:
        with self._lock:
            self.complete_calls += 1
        return self._complete(prompt)

    def yes_no_probabilities(self, prompt: str) -> tuple[float, float]:
        with self._lock:
            self.yes_no_calls += 1
        p_yes, p_no = self._yes_no(prompt)
        if not (0.0 <= p_yes <= 1.0 and 0.0 <= p_no <= 1.0):
            raise ProviderError(f"probabilities ({p_yes}, {p_no}) outside [0, 1]")
        if p_yes + p_no > 1.0 + 1e-9:
            raise ProviderError(f"probabilities ({p_yes}, {p_no}) sum above 1")
        return p_yes, p_no

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ProviderError("embed requires a non-empty input batch")
        for i, text in enumerate(texts):
            if not text:
                raise ProviderError(f"embed input {i} is empty")
        with self._lock:
            self.embed_calls += 1
        vectors = self._embed(list(texts))
        dims = {v.shape for v in vectors}
        if len(dims) != 1:
            raise ProviderError(f"embedding dimension mismatch within batch: {sorted(dims)}")
        return vectors

    # -- provider-specific hooks --------------------------------------------

    def _complete(self, prompt: str) -> ProviderResponse:
        raise NotImplementedError

    def _yes_no(self, prompt: str) -> tuple[float, float]:
        raise NotImplementedError

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError


class ScriptedProvider(Provider):
    """Replays fixture responses keyed by the SHA-256 of exact prompt bytes.

    A missing key is always an error, never a silent default, so tests fail
    loudly when a prompt template drifts.
    """

    def __init__(self, fixture_path: str) -> None:
        super().__init__()
        self.fixture_path = fixture_path
        self._records: dict[str, dict] = {}
        try:
            with open(fixture_path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise FixtureError(f"{fixture_path}:{lineno}: malformed JSON: {exc}") from exc
                    key = record.get("key")
                    if not key:
                        raise FixtureError(f"{fixture_path}:{lineno}: record without 'key'")
                    yes, no = record.get("yes"), record.get("no")
                    for name, value in (("yes", yes), ("no", no)):
                        if value is not None and not 0.0 <= value <= 1.0:
                            raise FixtureError(
                                f"{fixture_path}:{lineno}: {name} probability {value} outside [0, 1]"
                            )
                    if yes is not None and no is not None and yes + no > 1.0 + 1e-9:
                        raise FixtureError(f"{fixture_path}:{lineno}: yes + no above 1")
                    self._records[key] = record
        except OSError as exc:
            raise FixtureError(f"cannot read fixture file {fixture_path}: {exc}") from exc

    def _record_for(self, prompt: str) -> dict:
        digest = prompt_digest(prompt)
        record = self._records.get(digest)
        if record is None:
            raise MissingFixtureKeyError(f"no fixture entry for prompt digest {digest}")
        return record

    def _complete(self, prompt: str) -> ProviderResponse:
        record = self._record_for(prompt)
        return ProviderResponse(
            text=record.get("text", ""),
            yes_probability=record.get("yes"),
            no_probability=record.get("no"),
        )

    def _yes_no(self, prompt: str) -> tuple[float, float]:
        record = self._record_for(prompt)
        yes, no = record.get("yes"), record.get("no")
        if yes is None or no is None:
            raise CapabilityError(
                f"fixture record for digest {prompt_digest(prompt)} lacks yes/no probabilities"
            )
        return float(yes), float(no)

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        vectors = []
        for text in texts:
            record = self._records.get(prompt_digest(text))
            if record is None or "embedding" not in record:
                raise MissingFixtureKeyError(
                    f"no fixture embedding for text digest {prompt_digest(text)}"
                )
            vectors.append(np.asarray(record["embedding"], dtype=np.float64))
        return vectors


def _first_token_mass(top_logprobs: list[dict], wanted: str) -> float:
    """Sum the probability of first-token alternatives matching `wanted`.

    Matching ignores leading whitespace and case; absent tokens contribute 0.
    """
    mass = 0.0
    for alt in top_logprobs:
        token = str(alt.get("token", ""))
        if token.lstrip().casefold() == wanted.casefold():
            mass += math.exp(float(alt["logprob"]))
    return min(mass, 1.0)


class HttpProvider(Provider):
    """Client for completion-API style HTTP model servers.

    POSTs JSON to ``{base_url}/chat/completions`` and ``{base_url}/embeddings``
    with a bearer token read from the configured environment variable.
    Requests are pure reads, so bounded retries are safe.
    """

    def __init__(self, config: ProviderConfig) -> None:
        super().__init__()
        self.config = config
        self._semaphore = threading.Semaphore(config.max_in_flight)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env_name or DEFAULT_API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        import requests

        url = self.config.base_url.rstrip("/") + path
        timeout = self.config.timeout_ms / 1000.0
        last_error: Exception | None = None
        for _ in range(self.config.max_retries + 1):
            try:
                with self._semaphore:
                    response = requests.post(url, json=body, headers=self._headers(), timeout=timeout)
                response.raise_for_status()
                return response.json()
            except requests.RequestException as exc:
                last_error = exc
        raise ProviderError(f"request to {url} failed after retries: {last_error}") from last_error

    def _chat(self, prompt: str, want_logprobs: bool) -> dict:
        body = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        if want_logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = 20
            body["max_tokens"] = 4
        return self._post("/chat/completions", body)

    def _complete(self, prompt: str) -> ProviderResponse:
        payload = self._chat(prompt, want_logprobs=False)
        try:
            text = payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected completion payload shape: {exc}") from exc
        return ProviderResponse(text=text)

    def _yes_no(self, prompt: str) -> tuple[float, float]:
        payload = self._chat(prompt, want_logprobs=True)
        try:
            content = payload["choices"][0]["logprobs"]["content"]
            first = content[0]
            alternatives = list(first.get("top_logprobs", []))
            if "token" in first and "logprob" in first:
                alternatives.append({"token": first["token"], "logprob": first["logprob"]})
        except (KeyError, IndexError, TypeError) as exc:
            raise CapabilityError(
                f"provider response lacks first-token log-probabilities: {exc}"
            ) from exc
        # The chosen token may duplicate one of the alternatives; dedupe by token.
        seen: dict[str, float] = {}
        for alt in alternatives:
            seen.setdefault(str(alt.get("token", "")), float(alt["logprob"]))
        deduped = [{"token": tok, "logprob": lp} for tok, lp in seen.items()]
        return _first_token_mass(deduped, "yes"), _first_token_mass(deduped, "no")

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        payload = self._post("/embeddings", {"model": self.config.model_name, "input": texts})
        try:
            data = sorted(payload["data"], key=lambda item: item["index"])
            vectors = [np.asarray(item["embedding"], dtype=np.float64) for item in data]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"unexpected embeddings payload shape: {exc}") from exc
        if len(vectors) != len(texts):
            raise ProviderError(f"expected {len(texts)} embeddings, got {len(vectors)}")
        return vectors


def make_provider(config: ProviderConfig) -> Provider:
    """Instantiate the provider selected by the config."""
    if config.kind == "scripted":
        return ScriptedProvider(config.fixture_path)
    if config.kind == "http":
        return HttpProvider(config)
    from .oracle import OracleProvider, OracleWorldParams

    params = OracleWorldParams.from_dict(config.world or {})
    return OracleProvider(seed=config.seed, params=params)
