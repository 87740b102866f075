"""Stage 2: turn parsed full-text documents into structured keynotes.

The external PDF parser produces one Markdown file per paper; this stage
reads it (chunked if needed), asks the model for a strict-JSON digest and
falls back to the abstract or TLDR when no full text exists.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import InvalidInputError, KeynoteError, PaperSkipped
from .gateway import (
    BackendProfile,
    Gateway,
    extract_json_payload,
    map_bounded,
    request_validated,
    retry_preamble,
)
from .model import (
    MANDATORY_KEYNOTE_SECTIONS,
    ErrorMemory,
    Keynote,
    PaperId,
    PaperRecord,
    Provenance,
)
from .runlog import RunLog
from .tokens import compress_context, estimate_tokens

#: Model output may use this alternative name for the contributions field.
_SECTION_ALIASES = {"key_contributions": "contributions", "methods": "methodology"}

_HEADING_RE = re.compile(r"^# ", re.M)


@dataclass
class ParsedDocument:
    paper_id: PaperId
    markdown: str
    source_path: str = ""

    def __post_init__(self):
        if not self.markdown:
            raise InvalidInputError("parsed document must carry markdown text")


def _normalize_section(value) -> str:
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, list):
        return "\n".join(_normalize_section(v) for v in value).strip()
    return json.dumps(value, ensure_ascii=False, sort_keys=True)


def parse_keynote_payload(reply: str, paper_id: PaperId) -> Keynote:
    """Strict keynote parse: mandatory fields must be present and non-empty;
    extra fields ride along verbatim in the model's order."""
    payload = extract_json_payload(reply)
    if not isinstance(payload, dict):
        raise ValueError("keynote must be a JSON object")
    sections: dict[str, str] = {}
    for raw_key, value in payload.items():
        key = _SECTION_ALIASES.get(raw_key, raw_key)
        sections[key] = _normalize_section(value)
    missing = [k for k in MANDATORY_KEYNOTE_SECTIONS if not sections.get(k)]
    if missing:
        raise ValueError(f"keynote missing mandatory fields: {missing}")
    return Keynote(paper_id=paper_id, sections=sections, provenance=Provenance.FULL_TEXT)


def split_document(markdown: str, chunk_budget: int) -> list[str]:
    """Split on top-level headings, packing blocks greedily into chunks that
    fit the budget; an oversize block is hard-split by characters."""
    if estimate_tokens(markdown) <= chunk_budget:
        return [markdown]
    starts = [m.start() for m in _HEADING_RE.finditer(markdown)]
    if not starts or starts[0] != 0:
        starts.insert(0, 0)
    blocks = [markdown[a:b] for a, b in zip(starts, starts[1:] + [len(markdown)])]
    chunks: list[str] = []
    current = ""
    for block in blocks:
        while estimate_tokens(block) > chunk_budget:
            if current:
                chunks.append(current)
                current = ""
            cut = chunk_budget * 4
            chunks.append(block[:cut])
            block = block[cut:]
        if not block:
            continue
        if current and estimate_tokens(current + block) > chunk_budget:
            chunks.append(current)
            current = block
        else:
            current += block
    if current:
        chunks.append(current)
    return chunks


_KEYNOTE_SCHEMA = (
    "Reply with a JSON object holding at least these non-empty fields: "
    + ", ".join(MANDATORY_KEYNOTE_SECTIONS)
    + ". Add further fields freely when the paper calls for them."
)


def extract_keynote(
    doc: ParsedDocument,
    gateway: Gateway,
    profile: Optional[BackendProfile] = None,
    runlog: Optional[RunLog] = None,
    max_retries: int = 3,
) -> Keynote:
    """Digest one parsed paper into a keynote (provenance=full_text).

    Long documents are chunk-summarized first and merged by one
    consolidation call; missing mandatory fields trigger a retry with
    error memory before giving up.
    """
    runlog = runlog or RunLog()
    profile = profile or gateway.profile
    overhead = 600  # instructions, memory preamble, ids
    chunk_budget = max(256, profile.context_window - overhead)
    chunks = split_document(doc.markdown, chunk_budget)

    if len(chunks) == 1:
        body = chunks[0]
    else:
        digests = []
        for index, chunk in enumerate(chunks):
            reply = gateway.complete_text(
                f"Condense this part ({index + 1}/{len(chunks)}) of paper "
                f"{doc.paper_id.canonical} into the facts a survey writer needs "
                f"(contributions, methods, experiments, limitations):\n\n{chunk}",
                tag="understanding.chunk",
                profile=profile,
            )
            digests.append(reply)
        runlog.add("document_chunked", paper=doc.paper_id.canonical, chunks=len(chunks))
        body = "\n\n".join(digests)

    def build(memory: ErrorMemory, attempt: int) -> str:
        core = (
            retry_preamble(memory, attempt)
            + f"Produce the structured keynote for paper id {doc.paper_id.canonical}.\n"
            + _KEYNOTE_SCHEMA
            + "\n\nPaper text:\n"
        )
        return compress_context(core, body, profile.context_window)

    keynote, _, calls = request_validated(
        gateway,
        build,
        lambda reply: parse_keynote_payload(reply, doc.paper_id),
        tag="understanding.keynote",
        max_retries=max_retries,
        profile=profile,
        error_factory=KeynoteError,
    )
    runlog.add("keynote_extracted", paper=doc.paper_id.canonical, calls=calls)
    return keynote


def fallback_keynote(record: PaperRecord) -> Keynote:
    """Lightweight substitute when no full text exists: abstract first,
    TLDR second, otherwise the paper leaves the evidence set."""
    if record.abstract:
        provenance, text = Provenance.ABSTRACT_FALLBACK, record.abstract
    elif record.tldr:
        provenance, text = Provenance.TLDR_FALLBACK, record.tldr
    else:
        raise PaperSkipped(record.id.canonical, "no abstract and no TLDR")
    sections = {name: "" for name in MANDATORY_KEYNOTE_SECTIONS}
    sections["tldr"] = text
    return Keynote(paper_id=record.id, sections=sections, provenance=provenance)


def validate_pdf(path: str | Path) -> bool:
    """True iff the file looks like a structurally complete PDF.

    Invalid files are deleted so the downloader re-fetches them.
    """
    p = Path(path)
    if not p.exists():
        raise OSError(f"no such file: {p}")
    data = p.read_bytes()
    ok = data.startswith(b"%PDF-") and b"%%EOF" in data[-1024:]
    if not ok:
        p.unlink()
    return ok


def run_understanding(
    papers: dict[str, PaperRecord],
    docs: dict[str, ParsedDocument],
    gateway: Gateway,
    runlog: Optional[RunLog] = None,
    profile: Optional[BackendProfile] = None,
    workers: int = 1,
) -> dict[str, Keynote]:
    """Every evidence paper ends with exactly one keynote or one logged
    skip event; a missing parsed document demotes the paper to fallback.
    Distinct papers digest in bounded parallel workers; the merge keeps
    paper-id order."""
    runlog = runlog or RunLog()

    def one(canonical: str) -> tuple[str, Optional[Keynote]]:
        record = papers[canonical]
        doc = docs.get(canonical)
        try:
            if doc is not None:
                return canonical, extract_keynote(doc, gateway, profile, runlog)
            if record.full_text_ref:
                runlog.add("full_text_unavailable", paper=canonical)
            return canonical, fallback_keynote(record)
        except PaperSkipped as skip:
            runlog.add("paper_skipped", paper=canonical, reason=skip.reason)
            return canonical, None

    results = map_bounded(one, sorted(papers), workers)
    return {canonical: keynote for canonical, keynote in results if keynote is not None}
