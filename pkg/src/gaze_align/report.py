"""Region-grounded report prompts, text generation with retries, and the
keyword filtering plumbing around the external generator."""

from __future__ import annotations

import json
import logging
import re
import string
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional, Protocol, Sequence

from .regions import RegionActivation, RegionAtlas, display_name

logger = logging.getLogger(__name__)

GATE_THRESHOLD = 0.60
KEYWORD_BATCH_SIZE = 30
REPORT_PARAMS = {"temperature": 0.3, "top_k": 1}
EXTRACTION_PARAMS = {"temperature": 0.1, "top_k": 1}
PROHIBITED_TERMS = ("attention map", "saliency", "heatmap")
NORMAL_STUDY_PHRASE = "No focal consolidation, pleural effusion, or pneumothorax."

TEMPLATE_STYLES = {
    "standard": ("professional chest X-ray report", ("FINDINGS", "IMPRESSION"),
                 "Moderate (2-4 sentences per section)"),
    "detailed": ("comprehensive radiological analysis",
                 ("FINDINGS", "IMPRESSION", "RECOMMENDATIONS"),
                 "Extensive (4-6 sentences per section)"),
    "concise": ("brief clinical summary", ("FINDINGS", "IMPRESSION"),
                "Brief (1-2 sentences per section)"),
}
TIER_SIGNIFICANCE = {"definitive": "HIGH", "qualified": "MODERATE", "hedged": "LOW"}
TIER_INSTRUCTION = {
    "definitive": "report definitively",
    "qualified": "use qualified language",
    "hedged": "hedge or omit",
}


class ClientError(RuntimeError):
    """The text generator failed to return a usable response."""


class TextGenClient(Protocol):
    def generate(self, request: dict) -> str:
        """Return generated text for ``request``; raise on failure."""


# --- domain types ------------------------------------------------------------

@dataclass(frozen=True)
class ConditionPrediction:
    condition: str
    probability: float
    keywords: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "keywords",
                           tuple((str(t), float(c)) for t, c in self.keywords))
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"{self.condition}: probability outside [0, 1]")
        for term, conf in self.keywords:
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"{self.condition}: keyword {term!r} confidence outside [0, 1]")

    @classmethod
    def from_json(cls, d: dict) -> "ConditionPrediction":
        kws = []
        for k in d.get("keywords", []):
            if isinstance(k, dict):
                kws.append((k["term"], k.get("confidence", 1.0)))
            else:
                kws.append((k[0], k[1]))
        return cls(d["condition"], float(d["probability"]), tuple(kws))


@dataclass(frozen=True)
class PromptBundle:
    system_instruction: str
    clinical_data_section: str
    task_section: str
    template_style: str
    generation_params: dict = field(default_factory=lambda: dict(REPORT_PARAMS))
    conditions: tuple[ConditionPrediction, ...] = ()
    region_indices: tuple[int, ...] = ()
    region_names: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        return "\n\n".join((self.system_instruction, self.clinical_data_section,
                            self.task_section))

    def request(self, timeout: Optional[float] = None) -> dict:
        req = {"prompt": self.text, **self.generation_params}
        if timeout is not None:
            req["timeout"] = timeout
        return req


@dataclass
class GeneratedReport:
    findings: str
    impression: str
    provenance: dict
    fallback_used: bool
    attempts: int = 0
    delays: list = field(default_factory=list)

    def to_text(self) -> str:
        return f"FINDINGS:\n{self.findings}\n\nIMPRESSION:\n{self.impression}\n"

    def to_json(self) -> dict:
        return {"findings": self.findings, "impression": self.impression,
                "provenance": self.provenance, "fallback_used": self.fallback_used}


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 5
    base_delay: float = 3.0
    growth: float = 3.0
    timeout: float = 120.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.base_delay <= 0:
            raise ValueError("base_delay must be positive")

    def delay(self, retry_index: int) -> float:
        return self.base_delay * self.growth ** retry_index


# --- gating and prompt assembly ----------------------------------------------

def gate_conditions(preds: Sequence[ConditionPrediction],
                    threshold: float = GATE_THRESHOLD) -> list[ConditionPrediction]:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return [p for p in preds if p.probability > threshold]


def confidence_tier(p: float) -> str:
    if p > 0.70:
        return "definitive"
    if p >= 0.50:
        return "qualified"
    return "hedged"


def keyword_band(conf: float) -> Optional[str]:
    if conf > 0.80:
        return "High Confidence (>80%)"
    if conf >= 0.60:
        return "Moderate Confidence (60-80%)"
    if conf >= 0.40:
        return "Lower Confidence (40-60%)"
    return None


def contains_prohibited(text: str) -> bool:
    low = text.lower()
    return any(term in low for term in PROHIBITED_TERMS)


def _load_template() -> dict[str, str]:
    raw = resources.files("gaze_align").joinpath("assets/prompt_template.txt").read_text()
    sections: dict[str, list[str]] = {}
    current = None
    for line in raw.splitlines():
        if line.startswith("%% "):
            current = line[3:].strip()
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    return {k: "\n".join(v).strip("\n") for k, v in sections.items()}


def _clean_keywords(pred: ConditionPrediction) -> list[tuple[str, float]]:
    kept = []
    for term, conf in pred.keywords:
        if contains_prohibited(term):
            logger.warning("dropping prohibited keyword %r for %s", term, pred.condition)
            continue
        kept.append((term, conf))
    return kept


def _region_lines(gated, activation, atlas) -> tuple[list[str], list[str], list[int]]:
    primary: dict[str, list[str]] = {}
    secondary: dict[str, list[str]] = {}
    for pred in gated:
        try:
            _, entry = atlas.condition(pred.condition)
        except KeyError:
            continue
        for rid in entry.primary_regions:
            primary.setdefault(rid, []).append(pred.condition)
        for rid in entry.secondary_regions:
            secondary.setdefault(rid, []).append(pred.condition)
    active = activation.active_indices() if activation is not None else []
    for idx in active:
        rid = atlas.regions[idx].region_id
        if rid not in primary:
            primary[rid] = secondary.pop(rid, None) or ["keyword match"]
    for rid in primary:
        secondary.pop(rid, None)

    order = {rid: i for i, rid in enumerate(atlas.region_ids)}
    prim = sorted(primary, key=order.__getitem__)
    sec = sorted(secondary, key=order.__getitem__)
    lines_p = [f"- {display_name(r)}: {', '.join(primary[r])}" for r in prim]
    lines_s = [f"- {display_name(r)}: {', '.join(secondary[r])}" for r in sec]
    indices = sorted(set(active) | {order[r] for r in prim})
    return lines_p, lines_s, indices


def assemble_prompt(gated: Sequence[ConditionPrediction],
                    activation: Optional[RegionActivation], atlas: RegionAtlas,
                    style: str = "standard") -> PromptBundle:
    """Fill the report template with gated predictions, keywords and regions."""
    if style not in TEMPLATE_STYLES:
        raise ValueError(f"unknown template style {style!r}")
    template = _load_template()
    style_name, sections, length = TEMPLATE_STYLES[style]

    system = string.Template(template["system"]).substitute(
        reporting_style=f"{style_name}; length: {length}")

    clinical = ["=== CLINICAL ANALYSIS DATA ===", "",
                "   MODEL PREDICTIONS (Clinical Decision Basis):"]
    keyword_lines = ["   CLINICAL KEYWORDS (Condition-Based):"]
    case_lines = []
    for pred in gated:
        tier = confidence_tier(pred.probability)
        kws = _clean_keywords(pred)
        clinical += [
            f"Condition: {pred.condition}",
            f"- Confidence: {pred.probability * 100:.1f}%",
            f"- Clinical Significance: {TIER_SIGNIFICANCE[tier]}",
            f"- Keywords: {', '.join(t for t, _ in kws) if kws else 'none'}",
        ]
        bands: dict[str, list[str]] = {}
        for term, conf in kws:
            band = keyword_band(conf)
            if band is not None:
                bands.setdefault(band, []).append(term)
        if bands:
            keyword_lines.append(f"{pred.condition}:")
            for band in ("High Confidence (>80%)", "Moderate Confidence (60-80%)",
                         "Lower Confidence (40-60%)"):
                if band in bands:
                    keyword_lines += [band, "- " + ", ".join(bands[band])]
        case_lines.append(f"- {pred.condition} ({pred.probability * 100:.1f}%): "
                          f"{TIER_INSTRUCTION[tier]}")
    if not gated:
        clinical.append("No condition exceeds the reporting threshold.")
        keyword_lines.append("- none")
        case_lines.append("- Normal study with high confidence: use definitive phrases, "
                          f"e.g. \"{NORMAL_STUDY_PHRASE}\"")

    prim, sec, indices = _region_lines(gated, activation, atlas)
    clinical += ["", *keyword_lines, "", "RELEVANT ANATOMICAL REGIONS (Condition-Based):", ""]
    clinical += ["Primary Focus Areas:", *(prim or ["- none"])]
    if sec:
        clinical += ["", "Secondary Areas:", *sec]

    structure = "\n\n".join(f"{s}:\n[continuous paragraph]" for s in sections)
    task = string.Template(template["task"]).substitute(
        template_style=style_name, sections=", ".join(sections),
        case_instructions="\n".join(case_lines), structure=structure)

    return PromptBundle(
        system_instruction=system,
        clinical_data_section="\n".join(clinical),
        task_section=task,
        template_style=style,
        conditions=tuple(gated),
        region_indices=tuple(indices),
        region_names=tuple(atlas.regions[i].region_id for i in indices),
    )


# --- generation --------------------------------------------------------------

_HEADER = r"(?im)^[ \t]*[*#]*[ \t]*{name}[ \t]*[*]*[ \t]*:[ \t]*[*]*"


def parse_report(text: str) -> Optional[tuple[str, str]]:
    """Split generated text into (findings, impression); None if a header is missing."""
    f = re.search(_HEADER.format(name="findings"), text)
    if f is None:
        return None
    i = re.search(_HEADER.format(name="impression"), text[f.end():])
    if i is None:
        return None
    findings = text[f.end():f.end() + i.start()].strip()
    impression = text[f.end() + i.end():].strip()
    return findings, impression


def provenance_for(bundle: PromptBundle) -> dict:
    return {
        "conditions": {p.condition: p.probability for p in bundle.conditions},
        "keyword_sources": {p.condition: [t for t, _ in p.keywords]
                            for p in bundle.conditions},
        "region_indices": list(bundle.region_indices),
        "regions": list(bundle.region_names),
    }


def fallback_report(bundle: PromptBundle) -> tuple[str, str]:
    """Deterministic local paragraph used when the generator is unavailable."""
    regions = [display_name(r) for r in bundle.region_names]
    where = f" Regions of interest: {', '.join(regions)}." if regions else ""
    if not bundle.conditions:
        return NORMAL_STUDY_PHRASE, "No acute cardiopulmonary process."
    sentences, impressions = [], []
    for p in bundle.conditions:
        name = p.condition.lower()
        tier = confidence_tier(p.probability)
        if tier == "definitive":
            sentences.append(f"Findings consistent with {name}.")
            impressions.append(p.condition)
        elif tier == "qualified":
            sentences.append(f"Findings likely representing {name}.")
            impressions.append(f"probable {name}")
        else:
            sentences.append(f"Possible {name} cannot be excluded.")
            impressions.append(f"possible {name}")
    return " ".join(sentences) + where, "; ".join(impressions).capitalize() + "."


def generate(bundle: PromptBundle, client: TextGenClient,
             policy: RetryPolicy = RetryPolicy(),
             sleep: Callable[[float], None] = time.sleep) -> GeneratedReport:
    """Call the client with exponential backoff and parse FINDINGS / IMPRESSION.

    One initial call plus up to ``policy.max_retries`` retries; the k-th retry
    waits ``base_delay * growth**k`` seconds. Output missing either header
    counts as a failed attempt. After the last failure the deterministic
    fallback paragraph is returned.
    """
    request = bundle.request(timeout=policy.timeout)
    delays: list[float] = []
    attempts = 0
    while True:
        attempts += 1
        try:
            parsed = parse_report(client.generate(request))
            if parsed is None:
                raise ClientError("response lacks FINDINGS/IMPRESSION headers")
            findings, impression = parsed
            return GeneratedReport(findings, impression, provenance_for(bundle),
                                   False, attempts, delays)
        except Exception as exc:  # any client failure is retryable
            logger.warning("generation attempt %d failed: %s", attempts, exc)
        retry = attempts - 1
        if retry >= policy.max_retries:
            break
        d = policy.delay(retry)
        delays.append(d)
        sleep(d)
    findings, impression = fallback_report(bundle)
    return GeneratedReport(findings, impression, provenance_for(bundle), True,
                           attempts, delays)


def generate_many(bundles: Sequence[PromptBundle], client_factory: Callable[[], TextGenClient],
                  policy: RetryPolicy = RetryPolicy(), max_in_flight: int = 4,
                  sleep: Callable[[float], None] = time.sleep) -> list[GeneratedReport]:
    """Generate reports for several studies, at most ``max_in_flight`` at once."""
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        return list(pool.map(lambda b: generate(b, client_factory(), policy, sleep), bundles))


# --- clients -----------------------------------------------------------------

class StubClient:
    """Deterministic offline generator.

    With ``responses`` it replays them in order (cycling); otherwise it writes
    a short report from the predictions listed in the prompt. ``fail_times``
    makes the first n calls raise.
    """

    def __init__(self, responses: Optional[Sequence[str]] = None, fail_times: int = 0):
        self.responses = list(responses) if responses else None
        self.fail_times = fail_times
        self.calls = 0
        self.requests: list[dict] = []

    def generate(self, request: dict) -> str:
        self.calls += 1
        self.requests.append(request)
        if self.calls <= self.fail_times:
            raise ClientError(f"stub failure {self.calls}")
        if self.responses is not None:
            return self.responses[(self.calls - 1) % len(self.responses)]
        found = re.findall(r"^Condition: (.+)\n- Confidence: ([0-9.]+)%",
                           request["prompt"], flags=re.M)
        if not found:
            return (f"FINDINGS:\n{NORMAL_STUDY_PHRASE} The cardiac silhouette is within "
                    "normal limits.\n\nIMPRESSION:\nNo acute cardiopulmonary process.")
        parts = []
        for name, conf in found:
            tier = confidence_tier(float(conf) / 100.0)
            prefix = {"definitive": "There is", "qualified": "There is likely",
                      "hedged": "There is possible"}[tier]
            parts.append(f"{prefix} {name.lower()}.")
        names = ", ".join(n for n, _ in found)
        return f"FINDINGS:\n{' '.join(parts)}\n\nIMPRESSION:\n{names}."


class HttpClient:
    """POSTs the request JSON to an endpoint that answers ``{"text": ...}``."""

    def __init__(self, endpoint: str, timeout: float = 120.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def generate(self, request: dict) -> str:
        body = json.dumps({k: v for k, v in request.items() if k != "timeout"}).encode()
        req = urllib.request.Request(self.endpoint, data=body,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=request.get("timeout", self.timeout)) as resp:
                payload = json.loads(resp.read().decode())
        except (OSError, ValueError) as exc:
            raise ClientError(str(exc)) from exc
        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise ClientError("endpoint response has no 'text' field")
        return text


# --- keyword filtering -------------------------------------------------------

def keyword_filter_batches(items: Sequence, batch_size: int = KEYWORD_BATCH_SIZE) -> list[list]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    items = list(items)
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]


def filter_keywords(candidates: Sequence[tuple[str, str]],
                    verdicts: dict[str, str]) -> list[tuple[str, str]]:
    """Keep (condition, term) pairs whose term got a YES verdict."""
    kept = []
    for cond, term in candidates:
        if term not in verdicts:
            raise KeyError(f"no verdict for keyword {term!r}")
        if verdicts[term].strip().upper() == "YES":
            kept.append((cond, term))
    return kept


def request_verdicts(candidates: Sequence[tuple[str, str]], client: TextGenClient,
                     policy: RetryPolicy = RetryPolicy(),
                     batch_size: int = KEYWORD_BATCH_SIZE,
                     sleep: Callable[[float], None] = time.sleep) -> dict[str, str]:
    """Ask the generator for a YES/NO verdict per keyword, one batch per request.

    Expects one ``term: YES|NO`` line per keyword. Terms missing from every
    reply get NO.
    """
    verdicts: dict[str, str] = {}
    batches = keyword_filter_batches(candidates, batch_size)
    for n, batch in enumerate(batches, start=1):
        listing = "\n".join(f"- [{cond}] {term}" for cond, term in batch)
        request = {"prompt": "Answer YES or NO for each keyword, one 'term: YES|NO' "
                             f"line each.\n{listing}", **EXTRACTION_PARAMS,
                   "timeout": policy.timeout}
        reply = ""
        for retry in range(policy.max_retries + 1):
            try:
                reply = client.generate(request)
                break
            except Exception as exc:
                logger.warning("verdict batch %d attempt %d failed: %s", n, retry + 1, exc)
                if retry < policy.max_retries:
                    sleep(policy.delay(retry))
        for line in reply.splitlines():
            term, sep, verdict = line.strip().lstrip("-").rpartition(":")
            if sep and verdict.strip().upper() in ("YES", "NO"):
                verdicts[term.strip()] = verdict.strip().upper()
        logger.info("keyword filter: batch %d/%d done", n, len(batches))
    for _, term in candidates:
        verdicts.setdefault(term, "NO")
    return verdicts
