"""Friction-from-vision pipeline: embedding cache, top-K retrieval, prompt
assembly, a pluggable LLM client (live HTTP or scripted mock), friction
parsing, and the k-fold evaluation harness.

The cache file is line-oriented UTF-8 JSON: a header object, then one record
object per line::

    {"version": 1, "dimension": D, "encoder": "...", "counts": {"image": N, "text": M}, ...}
    {"id": "...", "kind": "image", "vector": [...], "payload": {"path": "...", "cof": 0.5}}
    {"id": "...", "kind": "text", "vector": [...], "payload": {"material": "...",
     "against": "...", "cof": 0.44}}

The encoder never runs inside this package; query embeddings are supplied by
the caller or looked up in the cache (see the companion embedding tool).
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field

import numpy as np

from .env import MU_MAX

DEFAULT_K = 5
CACHE_VERSION = 1


class FfvError(Exception):
    pass


class ZeroVector(FfvError):
    pass


class EmptyCache(FfvError):
    pass


class NoMatch(FfvError):
    """The response text contains no parseable friction value."""


class ClientTimeout(FfvError):
    pass


class ClientError(FfvError):
    def __init__(self, status: int, message: str = ""):
        super().__init__(f"LLM endpoint returned status {status}: {message}")
        self.status = status


class TooFewSamples(FfvError):
    pass


class CacheFormatError(FfvError):
    """The cache file violates the schema; the message names the record."""


# ---------------------------------------------------------------------------
# Cache


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    kind: str                  # "image" | "text"
    vector: np.ndarray
    payload: dict

    def describe(self) -> str:
        """One-line rendering used in prompts."""
        if self.kind == "text":
            return (f"{self.payload.get('material', '?')} and "
                    f"{self.payload.get('against', '?')}: "
                    f"{_fmt(self.payload.get('cof'))}")
        desc = self.payload.get("path", self.id)
        label = self.payload.get("label")
        cof = self.payload.get("cof")
        parts = [f"surface image {desc}"]
        if label is not None:
            parts.append(f"({label})")
        if cof is not None:
            parts.append(f"known CoF {_fmt(cof)}")
        return " ".join(parts)


def _fmt(x) -> str:
    if x is None:
        return "unknown"
    return repr(float(x))


class EmbeddingCache:
    """Immutable-after-load collection of image and text embedding records."""

    def __init__(self, dimension: int, records: list[EmbeddingRecord], meta: dict | None = None):
        self.dimension = int(dimension)
        self.records = list(records)
        self.meta = dict(meta or {})
        self.by_id = {}
        for rec in self.records:
            if rec.kind not in ("image", "text"):
                raise CacheFormatError(f"record {rec.id!r}: unknown kind {rec.kind!r}")
            if rec.id in self.by_id:
                raise CacheFormatError(f"duplicate record id {rec.id!r}")
            if rec.vector.shape != (self.dimension,):
                raise CacheFormatError(
                    f"record {rec.id!r}: vector length {rec.vector.shape[0]} != "
                    f"cache dimension {self.dimension}")
            if not np.linalg.norm(rec.vector) > 0:
                raise CacheFormatError(f"record {rec.id!r}: zero-norm vector")
            self.by_id[rec.id] = rec
        self.image_records = [r for r in self.records if r.kind == "image"]
        self.text_records = [r for r in self.records if r.kind == "text"]
        self._image_matrix = (np.stack([r.vector for r in self.image_records])
                              if self.image_records else np.zeros((0, self.dimension)))
        self._text_matrix = (np.stack([r.vector for r in self.text_records])
                             if self.text_records else np.zeros((0, self.dimension)))

    @property
    def n_image(self) -> int:
        return len(self.image_records)

    @property
    def n_text(self) -> int:
        return len(self.text_records)

    def matrix(self, kind: str) -> np.ndarray:
        return self._image_matrix if kind == "image" else self._text_matrix

    def save(self, path) -> None:
        header = {
            "version": CACHE_VERSION,
            "dimension": self.dimension,
            "encoder": self.meta.get("encoder", "unknown"),
            "counts": {"image": self.n_image, "text": self.n_text},
            **{k: v for k, v in self.meta.items() if k != "encoder"},
        }
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                f.write(json.dumps({
                    "id": rec.id, "kind": rec.kind,
                    "vector": [float(v) for v in rec.vector],
                    "payload": rec.payload,
                }, sort_keys=True) + "\n")


def load_cache(path) -> tuple[EmbeddingCache, list[str]]:
    """Parse and validate a cache file; returns (cache, warnings).

    Schema violations raise CacheFormatError naming the offending record;
    recoverable oddities (unknown keys, out-of-range friction values) are
    returned as warnings.
    """
    warnings: list[str] = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
    except OSError as e:
        raise CacheFormatError(f"cannot read cache {path}: {e}") from e
    if not lines:
        raise CacheFormatError(f"{path}: empty cache file")
    try:
        header = json.loads(lines[0])
    except ValueError as e:
        raise CacheFormatError(f"{path}: malformed header line") from e
    if header.get("version") != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {header.get('version')}")
    dim = header.get("dimension")
    if not isinstance(dim, int) or dim <= 0:
        raise CacheFormatError(f"{path}: bad dimension {dim!r}")

    records: list[EmbeddingRecord] = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except ValueError as e:
            raise CacheFormatError(f"{path}:{i}: malformed record line") from e
        missing = {"id", "kind", "vector", "payload"} - obj.keys()
        if missing:
            raise CacheFormatError(f"{path}:{i}: record missing fields {sorted(missing)}")
        extra = obj.keys() - {"id", "kind", "vector", "payload"}
        if extra:
            warnings.append(f"record {obj['id']!r}: unknown keys {sorted(extra)}")
        vec = np.asarray(obj["vector"], dtype=np.float64)
        if vec.ndim != 1 or vec.shape[0] != dim:
            raise CacheFormatError(
                f"record {obj['id']!r}: vector length {vec.size} != dimension {dim}")
        payload = obj["payload"]
        cof = payload.get("cof")
        if cof is not None and not 0.0 <= float(cof) <= MU_MAX:
            warnings.append(f"record {obj['id']!r}: CoF {cof} outside [0, {MU_MAX}]")
        records.append(EmbeddingRecord(str(obj["id"]), str(obj["kind"]), vec, payload))

    cache = EmbeddingCache(dim, records, meta={k: v for k, v in header.items()
                                               if k not in ("version", "dimension", "counts")})
    counts = header.get("counts")
    if counts and (counts.get("image") != cache.n_image or counts.get("text") != cache.n_text):
        raise CacheFormatError(
            f"{path}: header counts {counts} do not match records "
            f"(image={cache.n_image}, text={cache.n_text})")
    return cache, warnings


# ---------------------------------------------------------------------------
# Retrieval


def cosine_similarity(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Cosine score of the query against every row."""
    query = np.asarray(query, dtype=np.float64)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if query.shape[-1] != matrix.shape[-1]:
        raise FfvError(f"dimension mismatch: query {query.shape} vs rows {matrix.shape}")
    qn = np.linalg.norm(query)
    rn = np.linalg.norm(matrix, axis=1)
    if qn == 0.0 or np.any(rn == 0.0):
        raise ZeroVector("cosine similarity is undefined for zero vectors")
    return (matrix @ query) / (qn * rn)


@dataclass(frozen=True)
class RetrievalHit:
    id: str
    kind: str
    score: float
    payload: dict
    record: EmbeddingRecord = field(repr=False, compare=False, default=None)


def _topk_of_kind(cache: EmbeddingCache, kind: str, query: np.ndarray, k: int):
    records = cache.image_records if kind == "image" else cache.text_records
    if not records:
        return []
    scores = cosine_similarity(query, cache.matrix(kind))
    order = sorted(range(len(records)), key=lambda i: (-scores[i], records[i].id))
    return [RetrievalHit(records[i].id, kind, float(scores[i]), records[i].payload, records[i])
            for i in order[:k]]


def retrieve_topk(cache: EmbeddingCache, query: np.ndarray, k: int = DEFAULT_K):
    """Top-K hits per kind (independently), ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if cache.n_image == 0 and cache.n_text == 0:
        raise EmptyCache("cache holds no records")
    return _topk_of_kind(cache, "image", query, k), _topk_of_kind(cache, "text", query, k)


# ---------------------------------------------------------------------------
# Prompting and parsing


SYSTEM_PROMPT = (
    "You are a materials and tribology assistant. Given reference knowledge "
    "about surfaces and friction, estimate the coefficient of friction (CoF) "
    "between a rubber robot wheel and the ground surface in question."
)

ANSWER_INSTRUCTION = (
    "After your reasoning, answer on a final line formatted exactly as:\n"
    "CoF: <decimal>"
)


def build_prompt(image_hits, text_hits, query_context: str = "") -> str:
    """Deterministic prompt: retrieved knowledge blocks plus the answer contract."""
    if not image_hits and not text_hits:
        raise ValueError("build_prompt needs at least one retrieval hit")
    lines = ["Estimate the coefficient of friction of the ground surface."]
    if query_context:
        lines.append(f"Query context: {query_context}")
    if image_hits:
        lines.append("Most similar reference surfaces:")
        for h in image_hits:
            lines.append(f"- {h.record.describe()} (similarity {h.score:.6f})")
    if text_hits:
        lines.append("Most similar friction table entries (material pairs and static CoF):")
        for h in text_hits:
            lines.append(f"- {h.record.describe()} (similarity {h.score:.6f})")
    lines.append(ANSWER_INSTRUCTION)
    return "\n".join(lines)


COF_PATTERN = re.compile(r"CoF:\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+))")


def parse_cof(text: str, mu_max: float = MU_MAX) -> float:
    """First `CoF: <decimal>` occurrence, clamped to [0, mu_max]."""
    m = COF_PATTERN.search(text)
    if m is None:
        raise NoMatch(f"no 'CoF: <decimal>' line in response: {text[:80]!r}")
    return float(np.clip(float(m.group(1)), 0.0, mu_max))


# ---------------------------------------------------------------------------
# Clients


class MockClient:
    """Scripted responses for tests and offline runs.

    `script` entries are response strings, or Exception instances to raise
    (simulating timeouts/HTTP errors).  A single-string script repeats
    forever.  Every call is logged.
    """

    def __init__(self, script):
        if isinstance(script, str):
            self._script = None
            self._single = script
        else:
            self._script = list(script)
            self._single = None
        self.calls: list[dict] = []

    @classmethod
    def from_fixture(cls, path) -> "MockClient":
        """Load a script: JSON array of responses, or plain text = one response."""
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read()
        try:
            data = json.loads(raw)
        except ValueError:
            return cls(raw)
        if isinstance(data, list):
            script = []
            for entry in data:
                if isinstance(entry, dict) and "status" in entry:
                    script.append(ClientError(int(entry["status"]), entry.get("message", "")))
                elif entry == "TIMEOUT":
                    script.append(ClientTimeout("scripted timeout"))
                else:
                    script.append(str(entry))
            return cls(script)
        return cls(str(data))

    def complete(self, system: str, prompt: str, image_path=None) -> str:
        self.calls.append({"system": system, "prompt": prompt, "image": image_path})
        if self._single is not None:
            return self._single
        if not self._script:
            raise ClientError(500, "mock script exhausted")
        item = self._script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


class HttpClient:
    """Minimal chat-completions client (OpenAI-style wire format).

    Endpoint and model come from configuration; the API key is read from the
    FFV_API_KEY environment variable.  The query image, when provided, is
    attached as a base64 data URL.
    """

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 timeout_s: float = 20.0, session=None):
        self.endpoint = endpoint
        self.model = model
        key = api_key if api_key is not None else os.environ.get("FFV_API_KEY")
        if not key:
            raise FfvError("live client requires the FFV_API_KEY environment variable")
        self.api_key = key
        self.timeout_s = timeout_s
        if session is None:
            import requests
            session = requests.Session()
        self.session = session

    def complete(self, system: str, prompt: str, image_path=None) -> str:
        import requests

        content: list | str = prompt
        if image_path is not None:
            import base64
            with open(image_path, "rb") as f:
                b64 = base64.b64encode(f.read()).decode()
            content = [
                {"type": "text", "text": prompt},
                {"type": "image_url",
                 "image_url": {"url": f"data:image/jpeg;base64,{b64}"}},
            ]
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": content},
            ],
        }
        try:
            resp = self.session.post(
                self.endpoint, json=body, timeout=self.timeout_s,
                headers={"Authorization": f"Bearer {self.api_key}"})
        except requests.Timeout as e:
            raise ClientTimeout(f"no response within {self.timeout_s}s") from e
        except requests.RequestException as e:
            raise ClientError(0, str(e)) from e
        if resp.status_code != 200:
            raise ClientError(resp.status_code, resp.text[:200])
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as e:
            raise ClientError(resp.status_code, "malformed completion payload") from e


# ---------------------------------------------------------------------------
# Estimation


@dataclass
class FrictionEstimate:
    mu_hat: float
    response_text: str
    image_hits: list
    text_hits: list
    latency_s: float
    retries: int


def estimate(query, cache: EmbeddingCache, k: int = DEFAULT_K, client=None,
             query_context: str = "", image_path=None, attempts: int = 3,
             backoff_s: float = 0.5, mu_max: float = MU_MAX,
             sleep=time.sleep) -> FrictionEstimate:
    """Retrieve, prompt, call the client (with bounded retries), parse.

    `query` is either a D-vector or the id of a cached record (whose embedding
    is then used; useful when the query image was encoded offline).
    """
    if isinstance(query, str):
        if query not in cache.by_id:
            raise FfvError(f"no cached embedding with id {query!r}")
        query_vec = cache.by_id[query].vector
    else:
        query_vec = np.asarray(query, dtype=np.float64)
    if client is None:
        raise FfvError("estimate requires a configured client")

    image_hits, text_hits = retrieve_topk(cache, query_vec, k)
    prompt = build_prompt(image_hits, text_hits, query_context)

    start = time.monotonic()
    last_error: Exception | None = None
    for attempt in range(attempts):
        if attempt and backoff_s:
            sleep(backoff_s * 2 ** (attempt - 1))
        try:
            text = client.complete(SYSTEM_PROMPT, prompt, image_path)
            mu_hat = parse_cof(text, mu_max)
            return FrictionEstimate(
                mu_hat=mu_hat, response_text=text,
                image_hits=image_hits, text_hits=text_hits,
                latency_s=time.monotonic() - start, retries=attempt)
        except (ClientTimeout, ClientError, NoMatch) as e:
            last_error = e
    raise last_error


# ---------------------------------------------------------------------------
# k-fold evaluation harness


@dataclass(frozen=True)
class FoldReport:
    per_fold: tuple[float, ...]
    mean: float
    std: float
    fold_sizes: tuple[int, ...]


def kfold_rmse(pairs, k: int, seed: int = 0) -> FoldReport:
    """Per-fold RMSE over a labeled-estimate dataset.

    `pairs` is a sequence of (predicted, truth).  The fold split is a seeded
    permutation chopped into k contiguous chunks, so every sample is held out
    exactly once.
    """
    pairs = list(pairs)
    n = len(pairs)
    if n < k:
        raise TooFewSamples(f"{n} samples cannot form {k} folds")
    if k < 2:
        raise ValueError("k must be >= 2")
    pred = np.array([float(p) for p, _ in pairs])
    truth = np.array([float(t) for _, t in pairs])
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    rmses = tuple(float(np.sqrt(np.mean((pred[f] - truth[f]) ** 2))) for f in folds)
    return FoldReport(per_fold=rmses, mean=float(np.mean(rmses)),
                      std=float(np.std(rmses)), fold_sizes=tuple(len(f) for f in folds))
