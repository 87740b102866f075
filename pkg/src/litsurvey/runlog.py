"""Structured event sink shared by pipeline stages.

Collects attribution-monitor events, fallbacks, compression events and
retries so tests and the run manifest can inspect exactly what happened.
"""

from __future__ import annotations

import logging
from typing import Any

logger = logging.getLogger("litsurvey")


class RunLog:
    def __init__(self):
        self.events: list[dict] = []

    def add(self, kind: str, **detail: Any) -> dict:
        event = {"kind": kind, **detail}
        self.events.append(event)
        logger.debug("%s %s", kind, detail)
        return event

    def attribution_event(self, stage: str, artifact: str, offending: str) -> dict:
        """Record one hallucinated/out-of-set paper reference."""
        return self.add(
            "attribution", stage=stage, artifact=artifact, offending=offending
        )

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def attribution_events(self) -> list[dict]:
        return self.of_kind("attribution")
