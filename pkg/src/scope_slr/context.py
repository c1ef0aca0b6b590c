"""Sentence embeddings, dialogue context windows, translation prompts and the
chat-completion client.

Remote services use OpenAI-style JSON bodies behind :class:`OpenAIAdapter`.
The API key is read from the environment variable named in the config
(``SCOPE_API_KEY`` by default).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ServiceError

logger = logging.getLogger(__name__)

CONTEXT_SLOTS = 3
DEFAULT_DIM = 1536
_WORD = re.compile(r"\w+", re.UNICODE)


def text_hash(text: str) -> str:
    return hashlib.sha256(unicodedata.normalize("NFC", text).encode("utf-8")).hexdigest()


@dataclass
class SentenceEmbedding:
    vector: np.ndarray
    source: str  # remote | cache | mock
    text_hash: str


@dataclass
class EmbeddingConfig:
    kind: str = "mock"              # mock | mock-bow | remote
    dim: int = DEFAULT_DIM
    seed: int = 0
    cache_dir: str | None = None
    endpoint: str = "https://api.openai.com/v1/embeddings"
    model: str = "text-embedding-ada-002"
    api_key_env: str = "SCOPE_API_KEY"
    timeout: float = 30.0
    attempts: int = 3
    backoff: float = 0.5


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def mock_vector(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit vector from a seeded expansion of the text's SHA-256 digest."""
    digest = hashlib.sha256(unicodedata.normalize("NFC", text).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
    rng = np.random.default_rng([seed, dim, *words])
    return _unit(rng.standard_normal(dim))


def mock_bow_vector(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit-normalised sum of per-word mock vectors, so texts sharing words
    get correlated embeddings. Falls back to :func:`mock_vector` for texts
    without word characters."""
    words = _WORD.findall(unicodedata.normalize("NFC", text).lower())
    if not words:
        return mock_vector(text, dim, seed)
    total = np.zeros(dim)
    for w in words:
        total += mock_vector(w, dim, seed)
    if np.linalg.norm(total) == 0.0:
        return mock_vector(text, dim, seed)
    return _unit(total)


class OpenAIAdapter:
    """Request/response shapes for OpenAI-compatible endpoints."""

    @staticmethod
    def embedding_request(model: str, text: str) -> dict:
        return {"model": model, "input": [text]}

    @staticmethod
    def embedding_response(body: dict) -> list[float]:
        try:
            return body["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceError(f"malformed embedding response: {exc!r}") from exc

    @staticmethod
    def chat_request(model: str, system: str, user: str, temperature: float) -> dict:
        return {"model": model, "temperature": temperature,
                "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}]}

    @staticmethod
    def chat_response(body: dict) -> str:
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceError(f"malformed chat response: {exc!r}") from exc


def post_with_retries(url: str, payload: dict, headers: dict, timeout: float, attempts: int,
                      backoff: float, transport=None, sleep: Callable[[float], None] = time.sleep) -> dict:
    """POST JSON with exponential backoff; raises :class:`ServiceError` after
    the last failed attempt, chaining the HTTP-level cause."""
    import httpx

    last: Exception | None = None
    for attempt in range(attempts):
        try:
            with httpx.Client(timeout=timeout, transport=transport) as client:
                resp = client.post(url, json=payload, headers=headers)
                resp.raise_for_status()
                return resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            last = exc
            logger.warning("request to %s failed (attempt %d/%d): %s", url, attempt + 1, attempts, exc)
            if attempt + 1 < attempts:
                sleep(backoff * (2 ** attempt))
    raise ServiceError(f"request to {url} failed after {attempts} attempts: {last!r}") from last


class EmbeddingProvider:
    """Embeds sentences with a content-addressed cache in front.

    Cache entries live in ``cache_dir`` as ``<key>.json`` with fields
    ``text_hash``, ``dim`` and ``vector``; the key folds in the provider kind,
    model, dimension and seed, so mock vectors never answer a remote lookup.
    """

    def __init__(self, config: EmbeddingConfig | None = None, transport=None):
        self.config = config or EmbeddingConfig()
        if self.config.kind not in ("mock", "mock-bow", "remote"):
            raise ConfigError(f"unknown embedding provider kind {self.config.kind!r}")
        if self.config.dim < 1:
            raise ConfigError("embedding dim must be positive")
        self.transport = transport
        self._memory: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.remote_calls = 0

    @property
    def dim(self) -> int:
        return self.config.dim

    def cache_key(self, text: str) -> str:
        c = self.config
        ident = f"{c.kind}|{c.model if c.kind == 'remote' else ''}|{c.dim}|{c.seed}|{text_hash(text)}"
        return hashlib.sha256(ident.encode("utf-8")).hexdigest()

    def _cache_path(self, key: str) -> Path | None:
        return Path(self.config.cache_dir) / f"{key}.json" if self.config.cache_dir else None

    def _lookup(self, key: str) -> np.ndarray | None:
        if key in self._memory:
            return self._memory[key]
        path = self._cache_path(key)
        if path is not None and path.is_file():
            doc = json.loads(path.read_text(encoding="utf-8"))
            vec = np.asarray(doc["vector"], dtype=np.float64)
            if doc.get("dim") != self.dim or vec.shape != (self.dim,):
                raise ServiceError(f"cache entry {path} has dimension {doc.get('dim')}, expected {self.dim}")
            self._memory[key] = vec
            return vec
        return None

    def _store(self, key: str, h: str, vec: np.ndarray) -> None:
        with self._lock:
            self._memory[key] = vec
            path = self._cache_path(key)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(json.dumps({"text_hash": h, "dim": self.dim, "vector": vec.tolist()}), encoding="utf-8")
                tmp.replace(path)

    def evict(self, text: str) -> None:
        key = self.cache_key(text)
        with self._lock:
            self._memory.pop(key, None)
            path = self._cache_path(key)
            if path is not None and path.exists():
                path.unlink()

    def _remote(self, text: str) -> np.ndarray:
        c = self.config
        key = os.environ.get(c.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        body = post_with_retries(c.endpoint, OpenAIAdapter.embedding_request(c.model, text), headers,
                                 c.timeout, c.attempts, c.backoff, self.transport)
        self.remote_calls += 1
        vec = np.asarray(OpenAIAdapter.embedding_response(body), dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ServiceError(f"remote embedding has dimension {vec.shape}, expected {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise ServiceError("remote embedding contains non-finite values")
        return vec

    def embed(self, text: str) -> SentenceEmbedding:
        if not text or not text.strip():
            raise ValueError("cannot embed an empty sentence")
        h = text_hash(text)
        key = self.cache_key(text)
        cached = self._lookup(key)
        if cached is not None:
            return SentenceEmbedding(cached.copy(), "cache", h)
        if self.config.kind == "mock":
            vec, source = mock_vector(text, self.dim, self.config.seed), "mock"
        elif self.config.kind == "mock-bow":
            vec, source = mock_bow_vector(text, self.dim, self.config.seed), "mock"
        else:
            vec, source = self._remote(text), "remote"
        self._store(key, h, vec)
        return SentenceEmbedding(vec.copy(), source, h)


def embed_sentence(text: str, provider: EmbeddingProvider) -> SentenceEmbedding:
    return provider.embed(text)


@dataclass
class ContextWindow:
    slots: np.ndarray   # (CONTEXT_SLOTS, d_e), zero rows where masked
    mask: np.ndarray    # (CONTEXT_SLOTS,) bool, True = valid
    source_texts: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls, dim: int, slots: int = CONTEXT_SLOTS) -> ContextWindow:
        return cls(np.zeros((slots, dim)), np.zeros(slots, dtype=bool), [])

    @property
    def dim(self) -> int:
        return self.slots.shape[1]

    def with_noise(self, rng: np.random.Generator) -> ContextWindow:
        """Masked slots filled with Gaussian noise; valid slots untouched."""
        slots = self.slots.copy()
        hidden = ~self.mask
        slots[hidden] = rng.standard_normal((int(hidden.sum()), self.dim))
        return ContextWindow(slots, self.mask.copy(), list(self.source_texts))


def build_context(previous_texts: Sequence[str], provider: EmbeddingProvider,
                  slots: int = CONTEXT_SLOTS) -> ContextWindow:
    """Embed the last ``slots`` texts into the trailing slots; earlier slots stay zero and masked."""
    window = ContextWindow.empty(provider.dim, slots)
    recent = list(previous_texts)[-slots:] if slots else []
    offset = slots - len(recent)
    for i, text in enumerate(recent):
        window.slots[offset + i] = provider.embed(text).vector
        window.mask[offset + i] = True
    window.source_texts = recent
    return window


# prompts

PERSONA = "Sign language translator"
NO_CONTEXT_MARKER = "(no prior context)"
CONTEXT_INSTRUCTION = ("Summarize the three candidate gloss sequences into one natural sentence. "
                       "Guess the correct words to use by checking the previous texts.")
CONTEXT_FREE_INSTRUCTION = "Summarizing the sentence using top 3 glosses only."

# Placeholder demonstrations, not taken from any published prompt.
DEFAULT_FEW_SHOT = (
    {"context": ["Where does it hurt?"],
     "glosses": [["I", "HEAD", "PAIN"], ["I", "HEAD", "HURT"], ["HEAD", "PAIN"]],
     "answer": "My head hurts."},
    {"context": [],
     "glosses": [["YOU", "NAME", "WHAT"], ["YOU", "NAME"], ["NAME", "WHAT"]],
     "answer": "What is your name?"},
)


@dataclass
class PromptTemplate:
    persona: str = PERSONA
    few_shot: tuple = DEFAULT_FEW_SHOT
    instruction: str = CONTEXT_INSTRUCTION
    context_free_instruction: str = CONTEXT_FREE_INSTRUCTION
    token_budget: int = 1024
    use_context: bool = True


@dataclass
class TranslationPrompt:
    system: str
    user: str
    gloss_sequences: list[list[str]]
    context_texts: list[str]

    @property
    def top1(self) -> list[str]:
        return self.gloss_sequences[0]

    def render(self) -> str:
        return f"[system]\n{self.system}\n[user]\n{self.user}"


def count_tokens(text: str) -> int:
    """Rough budget measure: CJK characters count one each, other words one each."""
    from .metrics import tokenize
    return len(tokenize(text, "auto"))


def _render_user(template: PromptTemplate, context_texts: list[str], glosses: list[list[str]]) -> str:
    lines = []
    for i, ex in enumerate(template.few_shot, 1):
        lines.append(f"Example {i}:")
        if template.use_context:
            ctx = " | ".join(ex["context"]) if ex["context"] else NO_CONTEXT_MARKER
            lines.append(f"  Previous texts: {ctx}")
        for j, g in enumerate(ex["glosses"], 1):
            lines.append(f"  Glosses {j}: {' '.join(g)}")
        lines.append(f"  Translation: {ex['answer']}")
    lines.append("Task:")
    if template.use_context:
        if context_texts:
            lines.append("  Previous texts:")
            lines.extend(f"    - {t}" for t in context_texts)
        else:
            lines.append(f"  Previous texts: {NO_CONTEXT_MARKER}")
    for j, g in enumerate(glosses, 1):
        lines.append(f"  Glosses {j}: {' '.join(g)}")
    lines.append(template.instruction if template.use_context else template.context_free_instruction)
    return "\n".join(lines)


def build_prompt(gloss_sequences: Sequence[Sequence[str]], context_texts: Sequence[str],
                 template: PromptTemplate | None = None) -> TranslationPrompt:
    """Deterministic prompt from the N-best glosses (top first) and prior texts.

    Fewer than three sequences are padded by repeating the top one. Context
    texts are dropped oldest-first until the prompt fits the token budget.
    """
    template = template or PromptTemplate()
    if not gloss_sequences:
        raise ValueError("build_prompt needs at least one gloss sequence")
    glosses = [list(g) for g in gloss_sequences[:3]]
    while len(glosses) < 3:
        glosses.append(list(glosses[0]))
    texts = list(context_texts) if template.use_context else []
    system = f"You are a {template.persona}."
    while True:
        user = _render_user(template, texts, glosses)
        if count_tokens(system) + count_tokens(user) <= template.token_budget:
            break
        if not texts:
            raise ConfigError(f"prompt exceeds the token budget of {template.token_budget} even without context")
        texts = texts[1:]
    return TranslationPrompt(system, user, glosses, texts)


@dataclass
class ClientConfig:
    mode: str = "stub"  # stub | remote
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "qwen2-7b-instruct"
    api_key_env: str = "SCOPE_API_KEY"
    temperature: float = 0.0
    timeout: float = 60.0
    attempts: int = 3
    backoff: float = 0.5


class TranslationClient:
    def __init__(self, config: ClientConfig | None = None, transport=None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config or ClientConfig()
        if self.config.mode not in ("stub", "remote"):
            raise ConfigError(f"unknown translation client mode {self.config.mode!r}")
        self.transport = transport
        self.sleep = sleep

    def translate(self, prompt: TranslationPrompt) -> str:
        if self.config.mode == "stub":
            return " ".join(prompt.top1)
        c = self.config
        key = os.environ.get(c.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        body = post_with_retries(c.endpoint, OpenAIAdapter.chat_request(c.model, prompt.system, prompt.user, c.temperature),
                                 headers, c.timeout, c.attempts, c.backoff, self.transport, self.sleep)
        return OpenAIAdapter.chat_response(body).strip()


def translate(prompt: TranslationPrompt, client: TranslationClient) -> str:
    return client.translate(prompt)
