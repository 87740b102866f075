"""Stage 3: cluster theme design, paper partitioning with verification and
repair, intra-cluster relation graphs / comparison tables / guided Q&A, and
inter-cluster synthesis.

Every artifact is source-attributed; the attribution monitor drops and
logs any reference to a paper outside the owning cluster or substrate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import InvalidInputError, MalformedOutputError
from .gateway import (
    Gateway,
    cosine,
    extract_json_payload,
    request_validated,
    retry_preamble,
)
from .marks import extract_mark_keys, resolve_key, build_resolver
from .model import (
    Cluster,
    ClusterAnalysis,
    CitationStyle,
    ComparisonTable,
    ErrorMemory,
    Keynote,
    PaperRecord,
    QaItem,
    RelationEdge,
    TableRow,
)
from .runlog import RunLog


@dataclass
class AnalysisConfig:
    design_batch_size: int = 20
    verify_max_rounds: int = 3
    questions_per_cluster: int = 1
    max_retries: int = 3


@dataclass
class ClusterProposal:
    clusters: list[dict] = field(default_factory=list)  # {"name", "summary"}

    def names(self) -> list[str]:
        return [c["name"] for c in self.clusters]

    def is_empty(self) -> bool:
        return not self.clusters


@dataclass
class AssignmentVerdict:
    missing: set[str] = field(default_factory=set)
    hallucinated: set[str] = field(default_factory=set)

    def clean(self) -> bool:
        return not self.missing and not self.hallucinated


def _keynote_digest(keynote: Keynote, limit: int = 500) -> str:
    return keynote.tldr[:limit]


def _batched(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def _parse_proposal(reply: str) -> ClusterProposal:
    payload = extract_json_payload(reply)
    if not isinstance(payload, list) or not payload:
        raise ValueError("cluster proposal must be a non-empty JSON list")
    clusters = []
    for item in payload:
        if not isinstance(item, dict):
            raise ValueError("cluster entries must be objects")
        name = str(item.get("cluster_name") or item.get("name") or "").strip()
        summary = str(item.get("summary", "")).strip()
        if not name:
            raise ValueError("cluster entry without a name")
        if not summary:
            raise ValueError(f"cluster '{name}' has an empty summary")
        clusters.append({"name": name, "summary": summary})
    names = [c["name"] for c in clusters]
    if len(names) != len(set(names)):
        raise ValueError("duplicate cluster names in proposal")
    return ClusterProposal(clusters)


def design_clusters(
    keynotes: dict[str, Keynote],
    gateway: Gateway,
    cfg: Optional[AnalysisConfig] = None,
    prior: Optional[ClusterProposal] = None,
    runlog: Optional[RunLog] = None,
) -> ClusterProposal:
    """Fold keynote batches into an evolving cluster proposal.

    Batches of 20 keynotes in paper-id order; the agent may merge, split or
    add clusters at each step. Starting from an empty prior means creating
    the proposal from scratch.
    """
    cfg = cfg or AnalysisConfig()
    proposal = prior or ClusterProposal()
    ordered = [keynotes[k] for k in sorted(keynotes)]
    memory = ErrorMemory()
    for batch in _batched(ordered, cfg.design_batch_size):
        listing = "\n".join(
            f"- {k.paper_id.canonical}: {_keynote_digest(k)}" for k in batch
        )
        existing = (
            "\n".join(f"- {c['name']}: {c['summary']}" for c in proposal.clusters)
            or "(none yet)"
        )

        def build(memory: ErrorMemory, attempt: int, listing=listing, existing=existing) -> str:
            return (
                retry_preamble(memory, attempt)
                + "Curate thematic clusters for a literature survey.\n"
                + f"Existing clusters:\n{existing}\n\n"
                + f"New batch of paper keynotes:\n{listing}\n\n"
                + "Update the cluster list (merge, split or add as needed; create "
                + "from scratch when none exist) so every new paper fits at least "
                + "one theme. A paper may sit in several clusters. Reply strictly "
                + 'as a JSON list: [{"cluster_name": "...", "summary": "..."}]. '
                + "Do not mention specific papers."
            )

        proposal, memory, _ = request_validated(
            gateway,
            build,
            _parse_proposal,
            tag="analysis.design",
            memory=memory,
            max_retries=cfg.max_retries,
        )
    return proposal


def _parse_assignment(reply: str, valid_names: list[str]) -> dict[str, list[str]]:
    payload = extract_json_payload(reply)
    if not isinstance(payload, list):
        raise ValueError("assignment must be a JSON list")
    out: dict[str, list[str]] = {}
    for item in payload:
        if not isinstance(item, dict) or "paper_id" not in item:
            raise ValueError("assignment entries need a paper_id")
        names = item.get("clusters")
        if not isinstance(names, list) or not names:
            raise ValueError(f"paper {item['paper_id']} assigned to no cluster")
        unknown = [n for n in names if n not in valid_names]
        if unknown:
            raise ValueError(f"unknown cluster names {unknown}")
        out[str(item["paper_id"])] = [str(n) for n in names]
    return out


def assign_papers(
    proposal: ClusterProposal,
    keynotes: dict[str, Keynote],
    gateway: Gateway,
    cfg: Optional[AnalysisConfig] = None,
    runlog: Optional[RunLog] = None,
    prompt_note: str = "",
) -> tuple[list[Cluster], AssignmentVerdict]:
    """Partition papers over the proposed clusters (multi-membership is
    fine). Defects never raise: omitted papers land in verdict.missing and
    fabricated ids in verdict.hallucinated."""
    cfg = cfg or AnalysisConfig()
    runlog = runlog or RunLog()
    if proposal.is_empty():
        raise InvalidInputError("cannot assign papers without a cluster proposal")
    names = proposal.names()
    listing = "\n".join(
        f"- {k}: {_keynote_digest(keynotes[k])}" for k in sorted(keynotes)
    )
    themes = "\n".join(f"- {c['name']}: {c['summary']}" for c in proposal.clusters)

    def build(memory: ErrorMemory, attempt: int) -> str:
        return (
            retry_preamble(memory, attempt)
            + f"Assign every paper to one or more clusters. {prompt_note}\n"
            + f"Clusters:\n{themes}\n\nPapers:\n{listing}\n\n"
            + 'Reply strictly as JSON: [{"paper_id": "...", "clusters": ["name"]}]'
        )

    raw, _, _ = request_validated(
        gateway,
        build,
        lambda reply: _parse_assignment(reply, names),
        tag="analysis.assign",
        max_retries=cfg.max_retries,
    )

    clusters = [
        Cluster(cluster_id=i + 1, name=c["name"], summary=c["summary"])
        for i, c in enumerate(proposal.clusters)
    ]
    by_name = {c.name: c for c in clusters}
    verdict = AssignmentVerdict()
    for paper_key, cluster_names in raw.items():
        if paper_key not in keynotes:
            verdict.hallucinated.add(paper_key)
            runlog.attribution_event("analysis.assign", "assignment", paper_key)
            continue
        for name in cluster_names:
            by_name[name].members.add(keynotes[paper_key].paper_id)
    assigned = {p for c in clusters for p in c.member_keys()}
    verdict.missing = set(keynotes) - assigned
    return clusters, verdict


def compute_verdict(clusters: list[Cluster], keynotes: dict[str, Keynote]) -> AssignmentVerdict:
    known = set(keynotes)
    members = {p for c in clusters for p in c.member_keys()}
    return AssignmentVerdict(missing=known - members, hallucinated=members - known)


def verify_and_repair(
    clusters: list[Cluster],
    keynotes: dict[str, Keynote],
    gateway: Gateway,
    cfg: Optional[AnalysisConfig] = None,
    max_rounds: Optional[int] = None,
    runlog: Optional[RunLog] = None,
) -> list[Cluster]:
    """Correct missing and hallucinated assignments.

    Hallucinated ids are removed outright; missing papers are re-offered to
    the partitioning agent each round. Papers still missing after
    ``max_rounds`` attach to the cluster whose summary is nearest to their
    keynote by embedding cosine (ties to the lower cluster id), logged.
    """
    cfg = cfg or AnalysisConfig()
    rounds = max_rounds if max_rounds is not None else cfg.verify_max_rounds
    if rounds < 1:
        raise InvalidInputError("verification needs at least one round")
    runlog = runlog or RunLog()

    for round_no in range(1, rounds + 1):
        verdict = compute_verdict(clusters, keynotes)
        for ghost in sorted(verdict.hallucinated):
            for cluster in clusters:
                cluster.members = {p for p in cluster.members if p.canonical != ghost}
            runlog.attribution_event("analysis.verify", "cluster membership", ghost)
        if not verdict.missing:
            return clusters
        proposal = ClusterProposal(
            [{"name": c.name, "summary": c.summary} for c in clusters]
        )
        subset = {k: keynotes[k] for k in sorted(verdict.missing)}
        runlog.add("repair_round", round=round_no, missing=sorted(verdict.missing))
        try:
            repaired, _ = assign_papers(
                proposal, subset, gateway, cfg, runlog,
                prompt_note=f"(repair round {round_no})",
            )
        except MalformedOutputError:
            continue
        by_name = {c.name: c for c in clusters}
        for rc in repaired:
            by_name[rc.name].members |= rc.members

    verdict = compute_verdict(clusters, keynotes)
    if verdict.missing:
        summaries = [c.summary for c in clusters]
        summary_vecs = gateway.embed(summaries)
        for paper_key in sorted(verdict.missing):
            keynote = keynotes[paper_key]
            vec = gateway.embed([keynote.tldr])[0]
            scores = [cosine(vec, sv) for sv in summary_vecs]
            best = max(range(len(clusters)), key=lambda i: (scores[i], -clusters[i].cluster_id))
            clusters[best].members.add(keynote.paper_id)
            runlog.add(
                "fallback_attachment",
                paper=paper_key,
                cluster=clusters[best].cluster_id,
                similarity=scores[best],
            )
    return clusters


def _member_records(
    cluster: Cluster, papers: dict[str, PaperRecord]
) -> list[PaperRecord]:
    return [papers[k] for k in sorted(cluster.member_keys())]


def build_relation_graph(
    cluster: Cluster,
    keynotes: dict[str, Keynote],
    papers: dict[str, PaperRecord],
    gateway: Gateway,
    cfg: Optional[AnalysisConfig] = None,
    runlog: Optional[RunLog] = None,
) -> list[RelationEdge]:
    """Typed lineage edges between cluster members; edges naming
    non-members are dropped with a monitor event."""
    if not cluster.members:
        raise InvalidInputError("cluster has no members")
    cfg = cfg or AnalysisConfig()
    runlog = runlog or RunLog()
    if len(cluster.members) < 2:
        return []
    member_keys = cluster.member_keys()
    listing = "\n".join(
        f"- {k}: {_keynote_digest(keynotes[k])}" for k in sorted(member_keys) if k in keynotes
    )

    def build(memory: ErrorMemory, attempt: int) -> str:
        return (
            retry_preamble(memory, attempt)
            + f"Map the technical lineage inside cluster '{cluster.name}'.\n"
            + f"Members:\n{listing}\n\n"
            + "Emit directed edges typed as foundation, extension or substitution "
            + "(other labels allowed) with a one-line description each. Reply "
            + 'strictly as JSON: [{"from": id, "to": id, "relation": "...", "description": "..."}]'
        )

    def parse(reply: str) -> list[dict]:
        payload = extract_json_payload(reply)
        if not isinstance(payload, list):
            raise ValueError("relation graph must be a JSON list")
        for item in payload:
            if not isinstance(item, dict) or "from" not in item or "to" not in item:
                raise ValueError("edges need from/to fields")
        return payload

    raw, _, _ = request_validated(
        gateway, build, parse, tag="analysis.graph", max_retries=cfg.max_retries
    )
    edges: list[RelationEdge] = []
    for item in raw:
        src, dst = str(item["from"]), str(item["to"])
        if src not in member_keys or dst not in member_keys:
            outside = src if src not in member_keys else dst
            runlog.attribution_event(
                "analysis.graph", f"cluster {cluster.cluster_id} edge", outside
            )
            continue
        if src == dst:
            continue
        edges.append(
            RelationEdge(
                src=papers[src].id,
                dst=papers[dst].id,
                kind=str(item.get("relation", "other")),
                description=str(item.get("description", "")),
            )
        )
    return edges


def build_comparison_table(
    cluster: Cluster,
    keynotes: dict[str, Keynote],
    papers: dict[str, PaperRecord],
    gateway: Gateway,
    cfg: Optional[AnalysisConfig] = None,
    runlog: Optional[RunLog] = None,
) -> ComparisonTable:
    """Structured cross-paper comparison: one row per member, a model-chosen
    schema of at least three dimensions; rows for non-members are dropped."""
    if len(cluster.members) < 2:
        raise InvalidInputError("comparison tables need at least two members")
    cfg = cfg or AnalysisConfig()
    runlog = runlog or RunLog()
    member_keys = cluster.member_keys()
    listing = "\n".join(
        f"- {k}: {_keynote_digest(keynotes[k])}" for k in sorted(member_keys) if k in keynotes
    )

    def build(memory: ErrorMemory, attempt: int) -> str:
        return (
            retry_preamble(memory, attempt)
            + f"Compare the papers of cluster '{cluster.name}' along the key "
            + "dimensions you judge most informative (at least three columns).\n"
            + f"Members:\n{listing}\n\n"
            + 'Reply strictly as JSON: {"columns": [...], '
            + '"rows": [{"paper_id": "...", "cells": {"column": "text"}}]}'
        )

    def parse(reply: str) -> dict:
        payload = extract_json_payload(reply)
        if not isinstance(payload, dict) or "columns" not in payload or "rows" not in payload:
            raise ValueError("table needs columns and rows")
        if len(payload["columns"]) < 3:
            raise ValueError("table schema needs at least three dimensions")
        return payload

    raw, _, _ = request_validated(
        gateway, build, parse, tag="analysis.table", max_retries=cfg.max_retries
    )
    table = ComparisonTable(columns=[str(c) for c in raw["columns"]])
    for row in raw["rows"]:
        key = str(row.get("paper_id", ""))
        if key not in member_keys:
            runlog.attribution_event(
                "analysis.table", f"cluster {cluster.cluster_id} row", key
            )
            continue
        table.rows.append(
            TableRow(paper=papers[key].id, cells={str(k): str(v) for k, v in row.get("cells", {}).items()})
        )
    return table


def guided_qa(
    cluster: Cluster,
    keynotes: dict[str, Keynote],
    papers: dict[str, PaperRecord],
    gateway: Gateway,
    n_questions: int = 1,
    cfg: Optional[AnalysisConfig] = None,
    runlog: Optional[RunLog] = None,
) -> list[QaItem]:
    """Cross-paper questions answered strictly from member papers.

    An answer citing a non-member is regenerated once with error memory and
    dropped (with a monitor event) if it still violates attribution.
    """
    if n_questions < 1:
        raise InvalidInputError("need at least one question")
    cfg = cfg or AnalysisConfig()
    runlog = runlog or RunLog()
    member_keys = cluster.member_keys()
    member_records = _member_records(cluster, papers)
    resolver = build_resolver(member_records, CitationStyle.TITLE)
    id_resolver = build_resolver(member_records, CitationStyle.ID)
    listing = "\n".join(
        f"- {k} | {papers[k].title}: {_keynote_digest(keynotes[k])}"
        for k in sorted(member_keys)
        if k in keynotes
    )

    def build(memory: ErrorMemory, attempt: int) -> str:
        return (
            retry_preamble(memory, attempt)
            + f"Pose {n_questions} high-value question(s) that cut across at least "
            + f"two papers of cluster '{cluster.name}' and answer them from the "
            + "member papers only, citing with <paper title> or <paper id> marks.\n"
            + f"Members:\n{listing}\n\n"
            + 'Reply strictly as JSON: [{"question": "...", "related": [paper ids], "answer": "..."}]'
        )

    def parse(reply: str) -> list[QaItem]:
        payload = extract_json_payload(reply)
        if not isinstance(payload, list) or len(payload) != n_questions:
            raise ValueError(f"expected exactly {n_questions} QA item(s)")
        items: list[QaItem] = []
        for entry in payload:
            related = [str(r) for r in entry.get("related", [])]
            if len(related) < 2:
                raise ValueError("each question must relate at least two papers")
            unknown_related = [r for r in related if r not in member_keys]
            if unknown_related:
                raise ValueError(f"related papers outside the cluster: {unknown_related}")
            answer = str(entry.get("answer", ""))
            for key in extract_mark_keys(answer):
                if resolve_key(key, resolver, CitationStyle.TITLE) is None and resolve_key(
                    key, id_resolver, CitationStyle.ID
                ) is None:
                    raise ValueError(f"answer cites non-member '{key}'")
            items.append(
                QaItem(
                    question=str(entry.get("question", "")),
                    related=[papers[r].id for r in related],
                    answer=answer,
                )
            )
        return items

    try:
        items, _, _ = request_validated(
            gateway, build, parse, tag="analysis.qa", max_retries=1
        )
        return items
    except MalformedOutputError as exc:
        runlog.attribution_event(
            "analysis.qa", f"cluster {cluster.cluster_id} answer", str(exc)
        )
        return []


def inter_cluster_analysis(
    clusters: list[Cluster],
    analyses: list[ClusterAnalysis],
    papers: dict[str, PaperRecord],
    gateway: Gateway,
    cfg: Optional[AnalysisConfig] = None,
    runlog: Optional[RunLog] = None,
) -> str:
    """Synthesis of cross-cluster differences, citing only substrate papers.

    Marks that stay unresolvable after one retry are stripped with a
    monitor event rather than failing the stage.
    """
    if len(clusters) < 2:
        raise InvalidInputError("inter-cluster analysis needs at least two clusters")
    cfg = cfg or AnalysisConfig()
    runlog = runlog or RunLog()
    records = [papers[k] for k in sorted(papers)]
    resolver = build_resolver(records, CitationStyle.TITLE)
    id_resolver = build_resolver(records, CitationStyle.ID)
    overview = "\n".join(f"- {c.name}: {c.summary} ({len(c.members)} papers)" for c in clusters)

    def build(memory: ErrorMemory, attempt: int) -> str:
        return (
            retry_preamble(memory, attempt)
            + "Contrast the clusters below: shared assumptions, diverging methods, "
            + "open tensions. Cite evidence with <paper title> or <paper id> marks, "
            + "using only papers from this collection.\n"
            + f"Clusters:\n{overview}"
        )

    def parse(reply: str) -> str:
        if not reply.strip():
            raise ValueError("empty synthesis")
        for key in extract_mark_keys(reply):
            if resolve_key(key, resolver, CitationStyle.TITLE) is None and resolve_key(
                key, id_resolver, CitationStyle.ID
            ) is None:
                raise ValueError(f"synthesis cites unknown paper '{key}'")
        return reply

    try:
        text, _, _ = request_validated(
            gateway, build, parse, tag="analysis.inter_cluster", max_retries=1
        )
        return text
    except MalformedOutputError:
        # Retry exhausted: strip the offending marks and keep the synthesis.
        reply = gateway.complete_text(build(ErrorMemory(), 2), tag="analysis.inter_cluster")
        for key in extract_mark_keys(reply):
            if resolve_key(key, resolver, CitationStyle.TITLE) is None and resolve_key(
                key, id_resolver, CitationStyle.ID
            ) is None:
                runlog.attribution_event("analysis.inter_cluster", "synthesis", key)
                reply = reply.replace(f"<{key}>", "")
        return reply


def analyze_cluster(
    cluster: Cluster,
    keynotes: dict[str, Keynote],
    papers: dict[str, PaperRecord],
    gateway: Gateway,
    cfg: Optional[AnalysisConfig] = None,
    runlog: Optional[RunLog] = None,
) -> ClusterAnalysis:
    """All three per-cluster views plus the attribution record."""
    cfg = cfg or AnalysisConfig()
    runlog = runlog or RunLog()
    edges = build_relation_graph(cluster, keynotes, papers, gateway, cfg, runlog)
    table = (
        build_comparison_table(cluster, keynotes, papers, gateway, cfg, runlog)
        if len(cluster.members) >= 2
        else None
    )
    qa = guided_qa(cluster, keynotes, papers, gateway, cfg.questions_per_cluster, cfg, runlog)
    attributions: dict[str, list] = {}
    for i, item in enumerate(qa):
        attributions[f"qa:{i}"] = list(item.related)
    if table is not None:
        attributions["table"] = [row.paper for row in table.rows]
    if edges:
        endpoint_keys = sorted({e.src.canonical for e in edges} | {e.dst.canonical for e in edges})
        attributions["graph"] = [papers[k].id for k in endpoint_keys]
    return ClusterAnalysis(
        cluster_id=cluster.cluster_id,
        relation_graph=edges,
        comparison_table=table,
        qa_items=qa,
        source_attributions=attributions,
    )
