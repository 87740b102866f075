from __future__ import annotations

import pytest

from litsurvey.gateway import BackendProfile, Gateway
from litsurvey.model import (
    IdSource,
    Keynote,
    KnowledgeSubstrate,
    PaperId,
    PaperRecord,
    Provenance,
)
from litsurvey.scripted import FixtureEmbedder, ScriptedTransport


def make_paper(
    key: str,
    title: str | None = None,
    abstract: str | None = None,
    tldr: str = "",
    in_cits: list[str] = (),
    out_cits: list[str] = (),
    full_text_ref: str | None = None,
    source: IdSource = IdSource.PREPRINT,
    repo_urls: list[str] = (),
) -> PaperRecord:
    return PaperRecord(
        id=PaperId(key, source),
        title=title if title is not None else f"Study {key.upper()}",
        abstract=abstract if abstract is not None else f"Abstract of study {key}.",
        tldr=tldr,
        full_text_ref=full_text_ref,
        in_citations=[PaperId(k, source) for k in in_cits],
        out_citations=[PaperId(k, source) for k in out_cits],
        repo_urls=list(repo_urls),
    )


def make_keynote(record: PaperRecord, **sections) -> Keynote:
    base = {
        "contributions": f"contributions of {record.id.canonical}",
        "methodology": f"methodology of {record.id.canonical}",
        "experiments": f"experiments of {record.id.canonical}",
        "limitations": f"limitations of {record.id.canonical}",
        "critical_reflections": f"reflections on {record.id.canonical}",
        "tldr": record.abstract or f"tldr of {record.id.canonical}",
    }
    base.update(sections)
    return Keynote(paper_id=record.id, sections=base, provenance=Provenance.FULL_TEXT)


@pytest.fixture
def papers() -> dict[str, PaperRecord]:
    """Small citation graph: p1 cites p3/p4; p2 cites p4; p5, p6 cite p1."""
    records = [
        make_paper("p1", title="Alpha Methods", in_cits=["p5", "p6"], out_cits=["p3", "p4"]),
        make_paper("p2", title="Beta Systems", out_cits=["p4"]),
        make_paper("p3", title="Gamma Analysis", in_cits=["p1"]),
        make_paper("p4", title="Delta Benchmarks", in_cits=["p1", "p2"]),
        make_paper("p5", title="Epsilon Survey", out_cits=["p1"]),
        make_paper("p6", title="Zeta Review", out_cits=["p1"]),
    ]
    return {r.id.canonical: r for r in records}


@pytest.fixture
def keynotes(papers) -> dict[str, Keynote]:
    return {key: make_keynote(record) for key, record in papers.items()}


def scripted_gateway(
    transport: ScriptedTransport | None = None,
    embedder=None,
    profile: BackendProfile | None = None,
    **kwargs,
) -> Gateway:
    """Gateway wired for hermetic tests: scripted transport, fixture
    embedder and a no-op sleeper."""
    return Gateway(
        transport if transport is not None else ScriptedTransport(default="ok"),
        embedder=embedder or FixtureEmbedder(),
        profile=profile,
        sleeper=lambda _s: None,
        **kwargs,
    )


def build_substrate(papers, keynotes=None) -> KnowledgeSubstrate:
    substrate = KnowledgeSubstrate(papers=dict(papers))
    if keynotes:
        substrate.keynotes = dict(keynotes)
    return substrate
