"""Paper-source clients: search, citation links, and record lookup.

Three implementations share one interface: the academic-graph HTTP API,
the preprint-archive API (fallback), and a fixture-file source for
hermetic runs.
"""

from __future__ import annotations

import json
import time
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Optional, Protocol, Sequence

import requests

from .errors import RetrievalError
from .model import IdSource, PaperId, PaperRecord, unify_paper_id


class PaperSource(Protocol):
    def search(self, query: str, limit: int) -> list[PaperRecord]: ...

    def citations(self, paper_id: PaperId, limit: int) -> list[PaperRecord]: ...

    def references(self, paper_id: PaperId, limit: int) -> list[PaperRecord]: ...

    def lookup(self, paper_id: PaperId) -> Optional[PaperRecord]: ...


class FixtureSource:
    """In-memory source built from a closed set of records.

    Citation links resolve against the fixture set; ids without a record
    are simply unreachable (mirroring dead links in the real graph).
    """

    def __init__(
        self,
        records: Sequence[PaperRecord],
        search_results: Optional[dict[str, list[str]]] = None,
        fail: bool = False,
    ):
        self.records = {r.id.canonical: r for r in records}
        self.search_results = search_results or {}
        self.fail = fail
        self.search_calls = 0

    def search(self, query: str, limit: int) -> list[PaperRecord]:
        self.search_calls += 1
        if self.fail:
            raise RetrievalError("scripted source failure")
        if query in self.search_results:
            keys = self.search_results[query]
        else:
            keys = sorted(self.records)
        hits = [self.records[k] for k in keys if k in self.records]
        return hits[:limit]

    def citations(self, paper_id: PaperId, limit: int) -> list[PaperRecord]:
        record = self.records.get(paper_id.canonical)
        if record is None:
            return []
        found = [self.records[p.canonical] for p in record.in_citations if p.canonical in self.records]
        return found[:limit]

    def references(self, paper_id: PaperId, limit: int) -> list[PaperRecord]:
        record = self.records.get(paper_id.canonical)
        if record is None:
            return []
        found = [self.records[p.canonical] for p in record.out_citations if p.canonical in self.records]
        return found[:limit]

    def lookup(self, paper_id: PaperId) -> Optional[PaperRecord]:
        return self.records.get(paper_id.canonical)

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureSource":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        records = [PaperRecord.from_dict(r) for r in doc["papers"]]
        return cls(records, search_results=doc.get("search_results"))


_GRAPH_FIELDS = (
    "externalIds,title,abstract,tldr,openAccessPdf,citationCount"
)


def parse_graph_record(item: dict) -> PaperRecord:
    """Map one academic-graph API item onto a PaperRecord."""
    external = item.get("externalIds") or {}
    pid = unify_paper_id(external.get("ArXiv"), item.get("paperId"))
    tldr = item.get("tldr") or {}
    pdf = item.get("openAccessPdf") or {}
    return PaperRecord(
        id=pid,
        title=item.get("title") or "(untitled)",
        abstract=item.get("abstract") or "",
        tldr=tldr.get("text", "") if isinstance(tldr, dict) else str(tldr),
        full_text_ref=pdf.get("url"),
        in_citations=[],
        out_citations=[],
        repo_urls=[],
        metadata={
            "graph_id": item.get("paperId") or "",
            "year": str(item.get("year") or ""),
            "venue": item.get("venue") or "",
            "citation_count": str(item.get("citationCount") or 0),
        },
    )


class AcademicGraphSource:
    """Thin client for a Semantic-Scholar-style graph API."""

    def __init__(
        self,
        base_url: str = "https://api.semanticscholar.org/graph/v1",
        api_key: str = "",
        timeout: float = 30.0,
        max_attempts: int = 5,
        sleeper=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.sleeper = sleeper

    def _get(self, path: str, params: dict) -> dict:
        headers = {"x-api-key": self.api_key} if self.api_key else {}
        delay = 1.0
        last = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = requests.get(
                    f"{self.base_url}/{path}", params=params, headers=headers, timeout=self.timeout
                )
                if resp.status_code == 200:
                    return resp.json()
                last = f"status {resp.status_code}"
                if resp.status_code not in (408, 429, 500, 502, 503, 504):
                    break
            except requests.RequestException as exc:
                last = str(exc)
            if attempt < self.max_attempts:
                self.sleeper(delay)
                delay = min(delay * 2, 300.0)
        raise RetrievalError(f"graph API {path} failed: {last}")

    def search(self, query: str, limit: int) -> list[PaperRecord]:
        doc = self._get("paper/search", {"query": query, "limit": limit, "fields": _GRAPH_FIELDS})
        return [parse_graph_record(item) for item in doc.get("data", [])]

    def citations(self, paper_id: PaperId, limit: int) -> list[PaperRecord]:
        doc = self._get(
            f"paper/{self._api_id(paper_id)}/citations",
            {"limit": limit, "fields": _GRAPH_FIELDS},
        )
        return [parse_graph_record(e["citingPaper"]) for e in doc.get("data", []) if e.get("citingPaper")]

    def references(self, paper_id: PaperId, limit: int) -> list[PaperRecord]:
        doc = self._get(
            f"paper/{self._api_id(paper_id)}/references",
            {"limit": limit, "fields": _GRAPH_FIELDS},
        )
        return [parse_graph_record(e["citedPaper"]) for e in doc.get("data", []) if e.get("citedPaper")]

    def lookup(self, paper_id: PaperId) -> Optional[PaperRecord]:
        try:
            doc = self._get(f"paper/{self._api_id(paper_id)}", {"fields": _GRAPH_FIELDS})
        except RetrievalError:
            return None
        return parse_graph_record(doc)

    @staticmethod
    def _api_id(paper_id: PaperId) -> str:
        if paper_id.source is IdSource.PREPRINT:
            return f"arXiv:{paper_id.canonical}"
        return paper_id.canonical


_ATOM_NS = {"atom": "http://www.w3.org/2005/Atom"}


def parse_preprint_feed(xml_text: str) -> list[PaperRecord]:
    """Parse a preprint-archive Atom feed into records."""
    records = []
    root = ET.fromstring(xml_text)
    for entry in root.findall("atom:entry", _ATOM_NS):
        raw_id = entry.findtext("atom:id", default="", namespaces=_ATOM_NS)
        short = raw_id.rsplit("/", 1)[-1].split("v")[0] if raw_id else ""
        if not short:
            continue
        title = " ".join((entry.findtext("atom:title", default="", namespaces=_ATOM_NS)).split())
        summary = " ".join((entry.findtext("atom:summary", default="", namespaces=_ATOM_NS)).split())
        records.append(
            PaperRecord(
                id=PaperId(short, IdSource.PREPRINT),
                title=title or "(untitled)",
                abstract=summary,
                full_text_ref=f"https://arxiv.org/pdf/{short}",
            )
        )
    return records


class PreprintSource:
    """Preprint-archive search used to supplement the evidence pool when
    the primary source fails or comes back empty. The archive API has no
    citation graph, so link expansion returns nothing here."""

    def __init__(
        self,
        base_url: str = "http://export.arxiv.org/api/query",
        timeout: float = 30.0,
    ):
        self.base_url = base_url
        self.timeout = timeout

    def search(self, query: str, limit: int) -> list[PaperRecord]:
        try:
            resp = requests.get(
                self.base_url,
                params={"search_query": f"all:{query}", "max_results": limit},
                timeout=self.timeout,
            )
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise RetrievalError(f"preprint archive search failed: {exc}") from exc
        return parse_preprint_feed(resp.text)

    def citations(self, paper_id: PaperId, limit: int) -> list[PaperRecord]:
        return []

    def references(self, paper_id: PaperId, limit: int) -> list[PaperRecord]:
        return []

    def lookup(self, paper_id: PaperId) -> Optional[PaperRecord]:
        return None
