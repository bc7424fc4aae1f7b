"""Dense retrieval over historical issues and wiki pages, with a time filter and reranking."""

from __future__ import annotations

import hashlib
import logging
import os
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx
import numpy as np

from .errors import DimensionMismatch, EmbedderError, LeakageError, RerankerError
from .models import BugReport, ContextItem, RetrievedContext, format_timestamp, parse_timestamp
from .storage import iter_jsonl, read_json, write_json, write_jsonl

log = logging.getLogger(__name__)

EMBED_KEY_ENV = "EMBED_API_KEY"
EMBED_BASE_ENV = "EMBED_API_BASE"
INDEX_FORMAT_VERSION = 1
# Scores are rounded before ranking so float noise cannot reorder exact ties.
SCORE_DECIMALS = 12


class Corpus(str, Enum):
    HISTORICAL_ISSUES = "historical_issues"
    WIKI_DOCS = "wiki_docs"


@dataclass(frozen=True)
class CorpusDoc:
    doc_id: str
    corpus: Corpus
    text: str
    created_at: datetime | None = None
    closed_at: datetime | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "corpus", Corpus(self.corpus))
        if self.corpus is Corpus.HISTORICAL_ISSUES and self.created_at is None:
            raise ValueError(f"historical doc {self.doc_id} needs created_at")

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "corpus": self.corpus.value,
            "text": self.text,
            "created_at": format_timestamp(self.created_at),
            "closed_at": format_timestamp(self.closed_at),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CorpusDoc":
        return cls(
            doc_id=str(d["doc_id"]),
            corpus=Corpus(d["corpus"]),
            text=d.get("text") or "",
            created_at=parse_timestamp(d["created_at"]) if d.get("created_at") else None,
            closed_at=parse_timestamp(d["closed_at"]) if d.get("closed_at") else None,
            metadata=dict(d.get("metadata") or {}),
        )


def query_text(report: BugReport) -> str:
    return f"{report.title}\n\n{report.body}"


def report_to_doc(report: BugReport) -> CorpusDoc:
    """A resolved issue as retrieval evidence: title, body and discussion thread."""
    parts = [report.title, report.body] + [c.body for c in report.comments]
    return CorpusDoc(
        doc_id=str(report.id),
        corpus=Corpus.HISTORICAL_ISSUES,
        text="\n\n".join(p for p in parts if p),
        created_at=report.created_at,
        closed_at=report.closed_at,
        metadata={"url": report.url, "labels": sorted(report.labels)},
    )


_HEADING = re.compile(r"^#{1,6}\s", re.MULTILINE)


def chunk_markdown(text: str, max_chars: int = 4000, overlap: int = 200) -> list[str]:
    """Split on heading boundaries, merging small sections and windowing oversized ones."""
    if max_chars <= overlap:
        raise ValueError("max_chars must exceed overlap")
    starts = [m.start() for m in _HEADING.finditer(text)]
    if not starts or starts[0] != 0:
        starts.insert(0, 0)
    sections = [text[a:b] for a, b in zip(starts, starts[1:] + [len(text)])]
    chunks: list[str] = []
    current = ""
    for sec in sections:
        if len(current) + len(sec) <= max_chars:
            current += sec
            continue
        if current.strip():
            chunks.append(current.strip())
        current = ""
        if len(sec) <= max_chars:
            current = sec
            continue
        step = max_chars - overlap
        for i in range(0, len(sec), step):
            piece = sec[i : i + max_chars]
            if piece.strip():
                chunks.append(piece.strip())
            if i + max_chars >= len(sec):
                break
    if current.strip():
        chunks.append(current.strip())
    return chunks


def wiki_docs(pages: dict[str, str], max_chars: int = 4000, overlap: int = 200) -> list[CorpusDoc]:
    """Wiki pages (title -> markdown) as timeless chunked docs."""
    docs = []
    for title in sorted(pages):
        for i, chunk in enumerate(chunk_markdown(pages[title], max_chars, overlap)):
            docs.append(CorpusDoc(f"{title}#{i}", Corpus.WIKI_DOCS, chunk, metadata={"page": title, "chunk": i}))
    return docs


# --- embedders ---------------------------------------------------------------


class Embedder(Protocol):
    name: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an array of shape (len(texts), dimension)."""


_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _bucket(token: str, dimension: int) -> tuple[int, float]:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(h, "big")
    return value % dimension, 1.0 if (value >> 63) & 1 else -1.0


class HashingEmbedder:
    """Offline bag-of-words embedder using signed feature hashing (unigrams + bigrams)."""

    def __init__(self, dimension: int = 512):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.name = f"hashing-{dimension}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            toks = tokenize(text)
            for feat in toks + [f"{a} {b}" for a, b in zip(toks, toks[1:])]:
                idx, sign = _bucket(feat, self.dimension)
                out[row, idx] += sign
        return out


class HttpEmbedder:
    """OpenAI-style ``/embeddings`` endpoint."""

    def __init__(
        self,
        model: str,
        dimension: int,
        base_url: str | None = None,
        api_key: str | None = None,
        http: httpx.Client | None = None,
        batch_size: int = 64,
    ):
        self.model = model
        self.dimension = dimension
        self.base_url = (base_url or os.environ.get(EMBED_BASE_ENV) or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(EMBED_KEY_ENV)
        self.http = http or httpx.Client(timeout=60.0)
        self.batch_size = batch_size
        self.name = f"http:{model}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows: list[list[float]] = []
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        for i in range(0, len(texts), self.batch_size):
            batch = list(texts[i : i + self.batch_size])
            try:
                r = self.http.post(f"{self.base_url}/embeddings", json={"model": self.model, "input": batch}, headers=headers)
                r.raise_for_status()
                data = sorted(r.json()["data"], key=lambda d: d["index"])
                rows.extend(d["embedding"] for d in data)
            except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
                raise EmbedderError(f"embedding request failed: {exc}") from exc
        return np.asarray(rows, dtype=np.float64).reshape(len(texts), -1)


def _normalize(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


# --- index -------------------------------------------------------------------


class VectorIndex:
    """Exact cosine-similarity index over one corpus."""

    def __init__(
        self,
        corpus: Corpus,
        docs: list[CorpusDoc],
        vectors: np.ndarray,
        embedder_name: str = "",
        *,
        normalized: bool = False,
    ):
        if vectors.ndim != 2 or vectors.shape[0] != len(docs):
            raise DimensionMismatch(f"{vectors.shape} vectors for {len(docs)} docs")
        self.corpus = Corpus(corpus)
        self.docs = docs
        vectors = np.asarray(vectors, dtype=np.float64)
        # Stored vectors are already unit length; normalizing again would drift in the last bit.
        self.vectors = vectors if normalized else _normalize(vectors)
        self.embedder_name = embedder_name

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.docs)

    def search(
        self,
        query_vector: np.ndarray,
        k: int,
        predicate: Callable[[CorpusDoc], bool] | None = None,
    ) -> list[tuple[CorpusDoc, float]]:
        q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dimension:
            raise DimensionMismatch(f"query dimension {q.shape[0]} != index dimension {self.dimension}")
        norm = np.linalg.norm(q)
        q = q / norm if norm > 0 else q
        scores = self.vectors @ q
        eligible = [i for i, d in enumerate(self.docs) if predicate is None or predicate(d)]
        eligible.sort(key=lambda i: (-round(float(scores[i]), SCORE_DECIMALS), i))
        return [(self.docs[i], float(scores[i])) for i in eligible[:k]]

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "vectors.npy", self.vectors)
        write_jsonl(d / "docs.jsonl", (doc.to_dict() for doc in self.docs))
        write_json(
            d / "header.json",
            {
                "format_version": INDEX_FORMAT_VERSION,
                "corpus": self.corpus.value,
                "dimension": self.dimension,
                "count": len(self.docs),
                "embedder": self.embedder_name,
            },
        )

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "VectorIndex":
        d = Path(directory)
        header = read_json(d / "header.json")
        if header.get("format_version") != INDEX_FORMAT_VERSION:
            raise ValueError(f"unsupported index format {header.get('format_version')}")
        docs = [CorpusDoc.from_dict(obj) for _, obj in iter_jsonl(d / "docs.jsonl")]
        vectors = np.load(d / "vectors.npy")
        if vectors.shape != (header["count"], header["dimension"]):
            raise DimensionMismatch(f"stored vectors {vectors.shape} disagree with header")
        return cls(Corpus(header["corpus"]), docs, vectors, header.get("embedder", ""), normalized=True)


def index_corpus(docs: Sequence[CorpusDoc], embedder: Embedder) -> VectorIndex:
    if not docs:
        raise ValueError("cannot index an empty corpus")
    corpora = {d.corpus for d in docs}
    if len(corpora) != 1:
        raise ValueError(f"one index per corpus, got {sorted(c.value for c in corpora)}")
    vectors = embedder.embed([d.text for d in docs])
    if vectors.shape != (len(docs), embedder.dimension):
        raise DimensionMismatch(f"embedder returned {vectors.shape}, expected ({len(docs)}, {embedder.dimension})")
    if not np.all(np.isfinite(vectors)):
        raise EmbedderError("embedder returned non-finite values")
    return VectorIndex(corpora.pop(), list(docs), vectors, embedder.name)


# --- retrieval ---------------------------------------------------------------


def eligible_for(query: BugReport) -> Callable[[CorpusDoc], bool]:
    """Chronological filter: only issues opened (and closed) before the query was filed."""
    own_id = str(query.id)

    def ok(doc: CorpusDoc) -> bool:
        if doc.doc_id == own_id and doc.corpus is Corpus.HISTORICAL_ISSUES:
            return False
        if doc.corpus is not Corpus.HISTORICAL_ISSUES:
            return True
        if doc.created_at is None or doc.created_at >= query.created_at:
            return False
        return doc.closed_at is None or doc.closed_at < query.created_at

    return ok


def _to_item(doc: CorpusDoc, score: float) -> ContextItem:
    return ContextItem(doc_id=doc.doc_id, corpus=doc.corpus.value, text=doc.text, score=score, created_at=doc.created_at)


def retrieve(query: BugReport, indexes: Iterable[VectorIndex], embedder: Embedder, k: int = 20) -> list[ContextItem]:
    """Top ``k`` eligible candidates from each index, grouped by index, best first."""
    qv = embedder.embed([query_text(query)])[0]
    predicate = eligible_for(query)
    out: list[ContextItem] = []
    for index in indexes:
        hits = index.search(qv, k, predicate)
        if not hits:
            log.info("report %s: no eligible %s documents", query.id, index.corpus.value)
        out.extend(_to_item(doc, score) for doc, score in hits)
    return out


class Reranker(Protocol):
    name: str

    def score(self, query: str, candidates: Sequence[ContextItem]) -> list[float]:
        ...


class IdentityReranker:
    """Keeps the first-stage similarity as the rerank score."""

    name = "identity"

    def score(self, query: str, candidates: Sequence[ContextItem]) -> list[float]:
        return [c.score for c in candidates]


class LexicalOverlapReranker:
    """Offline pairwise scorer: share of query terms present in the candidate, length-damped."""

    name = "lexical-overlap"

    def score(self, query: str, candidates: Sequence[ContextItem]) -> list[float]:
        q = set(tokenize(query))
        if not q:
            return [0.0] * len(candidates)
        out = []
        for c in candidates:
            toks = tokenize(c.text)
            hit = len(q & set(toks)) / len(q)
            out.append(hit / (1.0 + np.log1p(len(toks)) / 10.0))
        return out


class HttpReranker:
    """Cross-encoder behind a ``/rerank`` endpoint (``{"results": [{"index", "relevance_score"}]}``)."""

    def __init__(self, model: str, base_url: str | None = None, api_key: str | None = None, http: httpx.Client | None = None):
        self.model = model
        self.base_url = (base_url or os.environ.get(EMBED_BASE_ENV) or "https://api.cohere.com/v2").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(EMBED_KEY_ENV)
        self.http = http or httpx.Client(timeout=60.0)
        self.name = f"http:{model}"

    def score(self, query: str, candidates: Sequence[ContextItem]) -> list[float]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = {"model": self.model, "query": query, "documents": [c.text for c in candidates]}
        try:
            r = self.http.post(f"{self.base_url}/rerank", json=body, headers=headers)
            r.raise_for_status()
            scores = [0.0] * len(candidates)
            for res in r.json()["results"]:
                scores[int(res["index"])] = float(res["relevance_score"])
        except (httpx.HTTPError, KeyError, ValueError, TypeError, IndexError) as exc:
            raise RerankerError(f"rerank request failed: {exc}") from exc
        return scores


def _top(candidates: list[ContextItem], scores: Sequence[float], k: int) -> list[ContextItem]:
    order = sorted(range(len(candidates)), key=lambda i: (-round(scores[i], SCORE_DECIMALS), i))
    return [
        ContextItem(candidates[i].doc_id, candidates[i].corpus, candidates[i].text, float(scores[i]), candidates[i].created_at)
        for i in order[:k]
    ]


def rerank(
    query: str,
    candidates: Sequence[ContextItem],
    reranker: Reranker,
    k: int = 5,
    *,
    query_report_id: int = 0,
    per_corpus: bool = False,
) -> RetrievedContext:
    """Rescore candidates pairwise and keep the best ``k`` (pooled across corpora by default).

    With ``per_corpus`` each corpus keeps its own top ``k``.
    """
    candidates = list(candidates)
    meta: dict[str, Any] = {"reranker": reranker.name, "candidates": len(candidates), "per_corpus": per_corpus}
    if not candidates:
        return RetrievedContext(query_report_id, (), meta)
    try:
        scores = reranker.score(query, candidates)
        if len(scores) != len(candidates):
            raise RerankerError(f"{len(scores)} scores for {len(candidates)} candidates")
    except RerankerError as exc:
        log.warning("reranker failed, keeping first-stage order: %s", exc)
        meta["reranker_fallback"] = str(exc)
        scores = [c.score for c in candidates]
    if not per_corpus:
        return RetrievedContext(query_report_id, tuple(_top(candidates, scores, k)), meta)
    groups: dict[str, list[int]] = {}
    for i, c in enumerate(candidates):
        groups.setdefault(c.corpus, []).append(i)
    picked: list[ContextItem] = []
    for idxs in groups.values():
        picked.extend(_top([candidates[i] for i in idxs], [scores[i] for i in idxs], k))
    picked.sort(key=lambda c: -round(c.score, SCORE_DECIMALS))
    return RetrievedContext(query_report_id, tuple(picked), meta)


def assert_no_leakage(query: BugReport, context: RetrievedContext, docs_by_id: dict[tuple[str, str], CorpusDoc]) -> None:
    ok = eligible_for(query)
    for item in context.items:
        doc = docs_by_id.get((item.corpus, item.doc_id))
        if doc is None or not ok(doc):
            raise LeakageError(f"report {query.id}: context item {item.corpus}:{item.doc_id} violates the time filter")


class RagRetriever:
    """retrieve -> rerank with the leakage invariant checked on the final context."""

    def __init__(
        self,
        indexes: Sequence[VectorIndex],
        embedder: Embedder,
        reranker: Reranker,
        k_retrieve: int = 20,
        k_rerank: int = 5,
        per_corpus: bool = False,
    ):
        if not 1 <= k_rerank <= k_retrieve:
            raise ValueError("need 1 <= k_rerank <= k_retrieve")
        for index in indexes:
            if index.dimension != embedder.dimension:
                raise DimensionMismatch(f"{index.corpus.value} index has dimension {index.dimension}, embedder {embedder.dimension}")
        self.indexes = list(indexes)
        self.embedder = embedder
        self.reranker = reranker
        self.k_retrieve = k_retrieve
        self.k_rerank = k_rerank
        self.per_corpus = per_corpus
        self._docs = {(d.corpus.value, d.doc_id): d for ix in self.indexes for d in ix.docs}

    def context_for(self, report: BugReport) -> RetrievedContext:
        candidates = retrieve(report, self.indexes, self.embedder, self.k_retrieve)
        ctx = rerank(
            query_text(report), candidates, self.reranker, self.k_rerank, query_report_id=report.id, per_corpus=self.per_corpus
        )
        assert_no_leakage(report, ctx, self._docs)
        return ctx


def load_docs(path: str | os.PathLike) -> list[CorpusDoc]:
    return [CorpusDoc.from_dict(obj) for _, obj in iter_jsonl(Path(path))]
