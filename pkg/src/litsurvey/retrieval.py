"""Stage 1: seed search, judge filtering, bidirectional citation-graph
expansion and two-stage hybrid filtering.

The output is the evidence paper set: structurally connected through the
citation graph yet kept on-topic by a coarse embedding filter followed by
judge re-ranking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import JudgeError, RetrievalError, SurveyError
from .gateway import Gateway, cosine, request_validated, retry_preamble
from .model import ErrorMemory, PaperRecord
from .runlog import RunLog
from .sources import PaperSource


@dataclass
class RetrievalConfig:
    max_seed_papers: int = 15
    expansion_depth: int = 1
    per_seed_cap: int = 20
    coarse_similarity_threshold: float = 0.35  # recall-biased on purpose
    judge_batch_size: int = 20
    judge_max_retries: int = 3
    query_variants: int = 0  # extra judge-generated queries; extension point

    def __post_init__(self):
        if self.max_seed_papers <= 0 or self.per_seed_cap <= 0:
            raise ValueError("retrieval caps must be positive")
        if self.expansion_depth < 0:
            raise ValueError("expansion depth must be >= 0")


def _dedup(records: list[PaperRecord]) -> list[PaperRecord]:
    seen: set[str] = set()
    out = []
    for record in records:
        if record.id.canonical not in seen:
            seen.add(record.id.canonical)
            out.append(record)
    return out


def search_seeds(
    topic: str,
    cfg: RetrievalConfig,
    source: PaperSource,
    fallback: Optional[PaperSource] = None,
    gateway: Optional[Gateway] = None,
    runlog: Optional[RunLog] = None,
) -> list[PaperRecord]:
    """Collect at most ``max_seed_papers`` deduplicated seeds for a topic.

    When the primary source fails or returns nothing, the preprint-archive
    fallback supplements the pool (flagged in the log). Optional judge-made
    query variants widen the net by one extra query round.
    """
    if not topic:
        raise RetrievalError("topic must be non-empty")
    runlog = runlog or RunLog()
    queries = [topic]
    if cfg.query_variants > 0 and gateway is not None:
        queries += _query_variants(topic, cfg.query_variants, gateway)

    hits: list[PaperRecord] = []
    primary_error: Optional[Exception] = None
    for query in queries:
        try:
            hits.extend(source.search(query, cfg.max_seed_papers))
        except SurveyError as exc:
            primary_error = exc
            runlog.add("source_failure", query=query, error=str(exc))
            break

    if not hits:
        if fallback is None:
            raise RetrievalError(
                f"seed search failed for '{topic}': {primary_error or 'no hits'}"
            )
        try:
            hits = fallback.search(topic, cfg.max_seed_papers)
        except SurveyError as exc:
            raise RetrievalError(
                f"seed search failed on primary and fallback: {exc}"
            ) from exc
        runlog.add("fallback_source_used", topic=topic, hits=len(hits))

    return _dedup(hits)[: cfg.max_seed_papers]


def _query_variants(topic: str, count: int, gateway: Gateway) -> list[str]:
    def build(memory: ErrorMemory, attempt: int) -> str:
        return (
            retry_preamble(memory, attempt)
            + f"Propose {count} alternative search queries for the research topic "
            f"'{topic}'. Reply with a JSON list of strings only."
        )

    def parse(reply: str) -> list[str]:
        from .gateway import extract_json_payload

        payload = extract_json_payload(reply)
        if not isinstance(payload, list) or not all(isinstance(q, str) for q in payload):
            raise ValueError("expected a JSON list of query strings")
        return payload[:count]

    variants, _, _ = request_validated(
        gateway, build, parse, tag="retrieval.query_variants", error_factory=JudgeError
    )
    return variants


def _judge_verdicts(
    papers: list[PaperRecord],
    topic: str,
    gateway: Gateway,
    cfg: RetrievalConfig,
    purpose: str,
    runlog: RunLog,
) -> dict[str, tuple[bool, str]]:
    """Batched topical-alignment verdicts keyed by canonical id.

    The judge must answer for every paper in the batch in strict JSON;
    malformed replies are retried with error memory.
    """
    from .gateway import extract_json_payload

    verdicts: dict[str, tuple[bool, str]] = {}
    memory = ErrorMemory()
    for start in range(0, len(papers), cfg.judge_batch_size):
        batch = papers[start : start + cfg.judge_batch_size]
        ids = [p.id.canonical for p in batch]
        listing = "\n".join(
            f"- id: {p.id.canonical} | title: {p.title} | summary: {(p.abstract or p.tldr)[:400]}"
            for p in batch
        )

        def build(memory: ErrorMemory, attempt: int, listing=listing) -> str:
            return (
                retry_preamble(memory, attempt)
                + f"Judge topical alignment with the research topic '{topic}' ({purpose}).\n"
                f"Papers:\n{listing}\n\n"
                "Reply with a JSON list, one object per paper, covering every id above:\n"
                '[{"paper_id": "...", "relevant": true, "note": "why"}]'
            )

        def parse(reply: str, ids=ids) -> dict[str, tuple[bool, str]]:
            payload = extract_json_payload(reply)
            if not isinstance(payload, list):
                raise ValueError("judge verdict must be a JSON list")
            got: dict[str, tuple[bool, str]] = {}
            for item in payload:
                if not isinstance(item, dict) or "paper_id" not in item or "relevant" not in item:
                    raise ValueError("verdict items need paper_id and relevant fields")
                got[str(item["paper_id"])] = (bool(item["relevant"]), str(item.get("note", "")))
            missing = [i for i in ids if i not in got]
            if missing:
                raise ValueError(f"judge verdict missing ids: {missing}")
            return got

        batch_verdicts, memory, _ = request_validated(
            gateway,
            build,
            parse,
            tag=f"retrieval.{purpose}",
            memory=memory,
            max_retries=cfg.judge_max_retries,
            error_factory=JudgeError,
        )
        verdicts.update(batch_verdicts)
    return verdicts


def judge_filter(
    candidates: list[PaperRecord],
    topic: str,
    gateway: Gateway,
    cfg: Optional[RetrievalConfig] = None,
    runlog: Optional[RunLog] = None,
) -> list[PaperRecord]:
    """Keep candidates the judge marks topically aligned; order preserved."""
    if not candidates:
        return []
    cfg = cfg or RetrievalConfig()
    runlog = runlog or RunLog()
    verdicts = _judge_verdicts(candidates, topic, gateway, cfg, "seed_filter", runlog)
    kept = [p for p in candidates if verdicts[p.id.canonical][0]]
    for paper in candidates:
        relevant, note = verdicts[paper.id.canonical]
        if not relevant:
            runlog.add("seed_rejected", paper=paper.id.canonical, note=note)
    return kept


def neighbor_priority(record: PaperRecord) -> tuple[int, str]:
    """Deterministic truncation order: citation count desc, then id asc."""
    return (-record.citation_count, record.id.canonical)


def expand_graph(
    seeds: list[PaperRecord],
    cfg: RetrievalConfig,
    source: PaperSource,
    runlog: Optional[RunLog] = None,
) -> list[PaperRecord]:
    """Breadth-first bidirectional expansion to ``expansion_depth``.

    Per expanded paper at most ``per_seed_cap`` neighbors are retained,
    ranked by :func:`neighbor_priority`. New papers are appended in sorted
    id order so the merge is deterministic.
    """
    runlog = runlog or RunLog()
    collected = {p.id.canonical: p for p in seeds}
    result = list(seeds)
    frontier = list(seeds)
    for _depth in range(cfg.expansion_depth):
        discovered: dict[str, PaperRecord] = {}
        for paper in frontier:
            try:
                neighbors = source.citations(paper.id, cfg.per_seed_cap * 2) + source.references(
                    paper.id, cfg.per_seed_cap * 2
                )
            except SurveyError as exc:
                runlog.add("neighbor_unreachable", paper=paper.id.canonical, error=str(exc))
                continue
            unique: dict[str, PaperRecord] = {}
            for n in neighbors:
                unique.setdefault(n.id.canonical, n)
            ranked = sorted(unique.values(), key=neighbor_priority)[: cfg.per_seed_cap]
            for n in ranked:
                if n.id.canonical not in collected:
                    discovered.setdefault(n.id.canonical, n)
        frontier = [discovered[k] for k in sorted(discovered)]
        collected.update(discovered)
        result.extend(frontier)
    return result


def coarse_filter(
    papers: list[PaperRecord],
    topic: str,
    cfg: RetrievalConfig,
    gateway: Gateway,
) -> list[PaperRecord]:
    """High-recall semantic gate: cosine(title+abstract, topic) >= threshold."""
    if not papers:
        return []
    topic_vec = gateway.embed([topic])[0]
    vectors = gateway.embed([p.search_text() for p in papers])
    return [
        p
        for p, v in zip(papers, vectors)
        if cosine(v, topic_vec) >= cfg.coarse_similarity_threshold
    ]


def llm_rerank_filter(
    papers: list[PaperRecord],
    topic: str,
    gateway: Gateway,
    cfg: Optional[RetrievalConfig] = None,
    runlog: Optional[RunLog] = None,
) -> list[PaperRecord]:
    """Fine-grained judge pass removing topically irrelevant papers; every
    retained paper gets its relevance note logged."""
    if not papers:
        return []
    cfg = cfg or RetrievalConfig()
    runlog = runlog or RunLog()
    verdicts = _judge_verdicts(papers, topic, gateway, cfg, "rerank", runlog)
    kept = []
    for paper in papers:
        relevant, note = verdicts[paper.id.canonical]
        if relevant:
            kept.append(paper)
            runlog.add("rerank_retained", paper=paper.id.canonical, note=note)
        else:
            runlog.add("rerank_dropped", paper=paper.id.canonical, note=note)
    return kept


def run_retrieval(
    topic: str,
    cfg: RetrievalConfig,
    source: PaperSource,
    gateway: Gateway,
    fallback: Optional[PaperSource] = None,
    runlog: Optional[RunLog] = None,
) -> list[PaperRecord]:
    """Full Stage-1 pass; deterministic for a fixed source and judge."""
    runlog = runlog or RunLog()
    seeds = search_seeds(topic, cfg, source, fallback, gateway, runlog)
    seeds = judge_filter(seeds, topic, gateway, cfg, runlog)
    expanded = expand_graph(seeds, cfg, source, runlog)
    passed = coarse_filter(expanded, topic, cfg, gateway)
    return llm_rerank_filter(passed, topic, gateway, cfg, runlog)
