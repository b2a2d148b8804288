"""Report ingestion, caption decomposition, and lexicon filtering.

Reports come in as line-delimited JSON. Each report's findings text is
decomposed into short organ-level captions, either by a deterministic
rule-based splitter or by an external language-model endpoint, then filtered
by contiguous-substring matching against a flat lexicon of anatomy terms.
"""

from __future__ import annotations

import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

log = logging.getLogger(__name__)

__all__ = [
    "CorpusError",
    "DecompositionError",
    "ReportRecord",
    "GranularCaption",
    "LexiconIndex",
    "CaptionStats",
    "normalize_text",
    "load_reports",
    "rule_based_decompose",
    "llm_decompose",
    "HttpDecompositionClient",
    "load_exemplars",
    "build_lexicon",
    "filter_captions",
    "caption_stats",
    "write_captions",
    "read_captions",
]

# Instruction sent to the decomposition endpoint, word for word.
DECOMPOSITION_SYSTEM_PROMPT = (
    "You are a medical expert. You will read radiology reports from various "
    "physicians on CT images. Given the following radiology report, generate "
    "shorter captions describing each organ or disease."
)

_CLAUSE_SPLIT = re.compile(r"[.;\n]")
_WS_RUN = re.compile(r"\s+")
MIN_CLAUSE_CHARS = 3


class CorpusError(ValueError):
    """Unrecoverable corpus input problem (bad file, duplicate id, ...)."""


class DecompositionError(RuntimeError):
    """External decomposition endpoint failed; caller may fall back."""


@dataclass
class ReportRecord:
    id: str
    findings: str
    impressions: str = ""
    meta: dict = field(default_factory=dict)


@dataclass
class GranularCaption:
    report_id: str
    text: str
    matched_terms: list = field(default_factory=list)


@dataclass
class LexiconIndex:
    entries: frozenset

    def __post_init__(self):
        if not self.entries:
            raise CorpusError("lexicon is empty; filtering would discard everything")
        if any(not e for e in self.entries):
            raise CorpusError("lexicon contains an empty entry")


@dataclass
class CaptionStats:
    caption_counts: dict
    term_counts: dict
    totals: dict
    top_captions: list
    top_terms: list


def normalize_text(s: str) -> str:
    """Lowercase, collapse whitespace runs to single spaces, strip. Idempotent."""
    return _WS_RUN.sub(" ", s.lower()).strip()


def load_reports(path) -> list[ReportRecord]:
    """Parse line-delimited report records in file order.

    Malformed lines are skipped with a logged warning carrying the 1-based
    line number. A duplicate id is fatal: it would silently merge reports.
    """
    records: list[ReportRecord] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not an object")
                rid = obj["id"]
                findings = obj["findings"]
                if not isinstance(rid, str) or not rid:
                    raise ValueError("id must be a non-empty string")
                if not isinstance(findings, str) or not findings:
                    raise ValueError("findings must be a non-empty string")
                record = ReportRecord(
                    id=rid,
                    findings=findings,
                    impressions=str(obj.get("impressions") or ""),
                    meta=dict(obj.get("meta") or {}),
                )
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("skipping malformed report line %d: %s", lineno, exc)
                continue
            if record.id in seen_ids:
                raise CorpusError(f"duplicate report id {record.id!r} at line {lineno}")
            seen_ids.add(record.id)
            records.append(record)
    return records


def rule_based_decompose(record: ReportRecord) -> list[GranularCaption]:
    """Split findings into clauses at sentence terminators (. ; newline).

    Clauses are normalized; anything shorter than 3 characters is punctuation
    debris and is dropped. Output follows text order.
    """
    captions = []
    for clause in _CLAUSE_SPLIT.split(record.findings):
        text = normalize_text(clause)
        if len(text) >= MIN_CLAUSE_CHARS:
            captions.append(GranularCaption(report_id=record.id, text=text))
    return captions


def load_exemplars():
    """Few-shot decomposition examples bundled with the package."""
    raw = resources.files("promptseg").joinpath("data/exemplars.jsonl").read_text("utf-8")
    return [json.loads(line) for line in raw.splitlines() if line.strip()]


class HttpDecompositionClient:
    """Talks to a completion endpoint over HTTP.

    Endpoint and credential come from PROMPTSEG_LLM_ENDPOINT and
    PROMPTSEG_LLM_API_KEY. The response body is treated as plain text,
    one caption per line.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 timeout: float = 30.0):
        self.endpoint = endpoint or os.environ.get("PROMPTSEG_LLM_ENDPOINT")
        self.api_key = api_key or os.environ.get("PROMPTSEG_LLM_API_KEY")
        self.timeout = timeout
        if not self.endpoint:
            raise DecompositionError(
                "no decomposition endpoint configured (set PROMPTSEG_LLM_ENDPOINT)")

    def complete(self, system_prompt: str, exemplars: list, findings: str) -> str:
        import requests  # deferred so offline use never needs it

        payload = {
            "system": system_prompt,
            "exemplars": exemplars,
            "findings": findings,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(self.endpoint, json=payload, headers=headers,
                                 timeout=self.timeout)
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise DecompositionError(f"decomposition endpoint failed: {exc}") from exc
        return resp.text


def llm_decompose(record: ReportRecord, client, exemplars: list | None = None) -> list[GranularCaption]:
    """Decompose findings via an external model; normalize like the rule-based path.

    ``client`` needs a ``complete(system_prompt, exemplars, findings) -> str``
    method. Endpoint failures surface as DecompositionError so the caller can
    fall back to rule_based_decompose.
    """
    if exemplars is None:
        exemplars = load_exemplars()
    body = client.complete(DECOMPOSITION_SYSTEM_PROMPT, exemplars, record.findings)
    captions = []
    for line in body.splitlines():
        text = normalize_text(line)
        if len(text) >= MIN_CLAUSE_CHARS:
            captions.append(GranularCaption(report_id=record.id, text=text))
    if not captions:
        log.warning("decomposition returned no captions for report %s", record.id)
    return captions


def build_lexicon(path) -> LexiconIndex:
    """One term per line; '#' lines are comments; terms are normalized."""
    entries = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.lstrip().startswith("#"):
                continue
            term = normalize_text(line)
            if term:
                entries.add(term)
    return LexiconIndex(entries=frozenset(entries))


def filter_captions(captions, lexicon: LexiconIndex) -> list[GranularCaption]:
    """Keep captions containing at least one lexicon entry as a substring.

    Matching is contiguous-substring with no word boundaries ("liver" matches
    "deliver"); that false-positive mode is accepted for recall. Matched
    entries are recorded sorted, order of kept captions is preserved, and the
    operation is idempotent.
    """
    kept = []
    for cap in captions:
        matched = sorted(e for e in lexicon.entries if e in cap.text)
        if matched:
            kept.append(GranularCaption(report_id=cap.report_id, text=cap.text,
                                        matched_terms=matched))
    return kept


def caption_stats(captions, top_k: int, total_records: int | None = None,
                  captions_before: int | None = None) -> CaptionStats:
    """Count exact caption texts and matched lexicon terms.

    ``captions`` must already be filtered. Pipeline-level totals (records
    seen, captions before filtering) are not derivable here and are passed
    in by the caller when known. Top lists break count ties lexicographically.
    """
    caption_counts = Counter(c.text for c in captions)
    term_counts = Counter(t for c in captions for t in c.matched_terms)

    def top(counter):
        return sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]

    totals = {
        "records": total_records,
        "captions_before_filter": captions_before,
        "captions_after_filter": len(captions),
    }
    return CaptionStats(
        caption_counts=dict(caption_counts),
        term_counts=dict(term_counts),
        totals=totals,
        top_captions=top(caption_counts),
        top_terms=top(term_counts),
    )


def write_captions(path, captions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cap in captions:
            fh.write(json.dumps({
                "report_id": cap.report_id,
                "text": cap.text,
                "matched_terms": list(cap.matched_terms),
            }) + "\n")


def read_captions(path) -> list[GranularCaption]:
    captions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            captions.append(GranularCaption(
                report_id=obj["report_id"],
                text=obj["text"],
                matched_terms=list(obj.get("matched_terms") or []),
            ))
    return captions
