"""Thoracic region atlas: bounds aggregation, keyword matching, mask rendering."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional, Sequence

import numpy as np

from .saliency import AttentionMap

N_REGIONS = 17
TAU_BOX = 0.01
EPS = 1e-8
FUZZY_THRESHOLD = 0.85
SECONDARY_FACTOR = 0.5
ANNOTATION_COLUMNS = ("patient", "region", "x1", "y1", "x2", "y2", "width", "height",
                      "confidence")


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    region_id: str
    bounds: tuple[float, float, float, float]
    aliases: tuple[str, ...]
    clinical_significance: str = ""
    provisional: bool = False


@dataclass(frozen=True)
class ConditionEntry:
    primary_regions: tuple[str, ...]
    secondary_regions: tuple[str, ...]
    attention_weight: float
    rationale: str = ""


@dataclass(frozen=True)
class RegionAtlas:
    regions: tuple[Region, ...]
    condition_matrix: dict
    version: str = ""

    def __post_init__(self):
        ids = [r.region_id for r in self.regions]
        if len(ids) != N_REGIONS:
            raise AtlasError(f"atlas must hold {N_REGIONS} regions, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise AtlasError("duplicate region ids in atlas")
        for r in self.regions:
            if not valid_box(r.bounds):
                raise AtlasError(f"region {r.region_id} has invalid bounds {r.bounds}")
        known = set(ids)
        for cond, entry in self.condition_matrix.items():
            missing = [rid for rid in entry.primary_regions + entry.secondary_regions
                       if rid not in known]
            if missing:
                raise AtlasError(f"condition {cond!r} references unknown regions {missing}")
            if not 0.0 <= entry.attention_weight <= 1.0:
                raise AtlasError(f"condition {cond!r} weight outside [0, 1]")

    @property
    def region_ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    def index_of(self, region_id: str) -> int:
        return self.region_ids.index(region_id)

    def region(self, region_id: str) -> Region:
        return self.regions[self.index_of(region_id)]

    def condition(self, name: str) -> tuple[str, ConditionEntry]:
        key = name.strip().lower()
        for cond, entry in self.condition_matrix.items():
            if cond.lower() == key:
                return cond, entry
        raise KeyError(f"unknown condition {name!r}")

    @classmethod
    def from_dict(cls, payload: dict) -> "RegionAtlas":
        regions = tuple(
            Region(r["id"], tuple(float(v) for v in r["bounds"]), tuple(r["aliases"]),
                   r.get("significance", ""), bool(r.get("provisional", False)))
            for r in payload["regions"])
        matrix = {
            name: ConditionEntry(tuple(c["primary"]), tuple(c.get("secondary", [])),
                                 float(c["weight"]), c.get("rationale", ""))
            for name, c in payload["conditions"].items()}
        return cls(regions, matrix, payload.get("version", ""))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "regions": [{"id": r.region_id, "bounds": list(r.bounds),
                         "aliases": list(r.aliases), "significance": r.clinical_significance,
                         "provisional": r.provisional} for r in self.regions],
            "conditions": {name: {"primary": list(e.primary_regions),
                                  "secondary": list(e.secondary_regions),
                                  "weight": e.attention_weight, "rationale": e.rationale}
                           for name, e in self.condition_matrix.items()},
        }


def load_atlas(path=None) -> RegionAtlas:
    """Load an atlas JSON; the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("gaze_align").joinpath("assets/atlas.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AtlasError(f"atlas is not valid JSON: {exc}") from exc
    try:
        return RegionAtlas.from_dict(payload)
    except (KeyError, TypeError) as exc:
        raise AtlasError(f"atlas schema error: {exc}") from exc


def valid_box(b) -> bool:
    x1, y1, x2, y2 = b
    return 0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0


# --- bounds aggregation ------------------------------------------------------

@dataclass(frozen=True)
class Annotation:
    patient: str
    region: str
    x1: float
    y1: float
    x2: float
    y2: float
    width: Optional[float]
    height: Optional[float]
    confidence: Optional[float] = None


@dataclass
class AggregationResult:
    bounds: dict
    branch: dict
    n_valid: int = 0
    n_invalid: int = 0
    dropped_regions: list = field(default_factory=list)


def aggregate_bounds(annotations: Iterable[Annotation], region_ids: Sequence[str],
                     tau_box: float = TAU_BOX, eps: float = EPS) -> AggregationResult:
    """Robust per-region bounds from pixel-space box annotations.

    Boxes are normalized by their image size and gated on
    ``0 <= x1 < x2 <= 1`` (same for y). Each region takes the element-wise
    median of its valid boxes; when the median's width or height is at most
    ``tau_box`` the confidence-weighted mean is used instead. A region whose
    weighted mean is itself not a valid box (all confidences zero) is dropped.
    """
    known = set(region_ids)
    collected: dict[str, list] = {r: [] for r in region_ids}
    n_valid = n_invalid = 0
    for a in annotations:
        ok = (a.region in known and a.width is not None and a.height is not None
              and a.width > 0 and a.height > 0)
        conf = 1.0 if a.confidence is None else a.confidence
        if ok and not (math.isfinite(conf) and 0.0 <= conf <= 1.0):
            ok = False
        if ok:
            box = (a.x1 / a.width, a.y1 / a.height, a.x2 / a.width, a.y2 / a.height)
            ok = all(math.isfinite(v) for v in box) and valid_box(box)
        if not ok:
            n_invalid += 1
            continue
        collected[a.region].append((box, conf))
        n_valid += 1

    result = AggregationResult({}, {}, n_valid, n_invalid)
    for region in region_ids:
        entries = collected[region]
        if not entries:
            continue
        boxes = np.array([b for b, _ in entries])
        confs = np.array([c for _, c in entries])
        med = np.median(boxes, axis=0)
        if med[2] - med[0] <= tau_box or med[3] - med[1] <= tau_box:
            out = (confs[:, None] * boxes).sum(axis=0) / (confs.sum() + eps)
            branch = "weighted"
        else:
            out = med
            branch = "median"
        out = tuple(float(v) for v in out)
        if not valid_box(out):
            result.dropped_regions.append(region)
            continue
        result.bounds[region] = out
        result.branch[region] = branch
    return result


def read_annotations_csv(path) -> list[Annotation]:
    def num(cell):
        cell = (cell or "").strip()
        return None if cell == "" else float(cell)

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in ANNOTATION_COLUMNS if c != "confidence" and c not in header]
        if missing:
            raise AtlasError(f"{path}: missing annotation columns {missing}")
        reader.fieldnames = header
        out = []
        for line, rec in enumerate(reader, start=2):
            try:
                vals = {c: num(rec.get(c)) for c in ANNOTATION_COLUMNS[2:]}
            except ValueError:
                raise ValueError(f"{path} line {line}: non-numeric annotation cell") from None
            if any(vals[c] is None for c in ("x1", "y1", "x2", "y2")):
                raise ValueError(f"{path} line {line}: empty box coordinate")
            out.append(Annotation(rec["patient"], (rec["region"] or "").strip(), **vals))
        return out


# --- keyword matching --------------------------------------------------------

@dataclass
class RegionActivation:
    flags: list[bool]
    matched: list[tuple[str, str, float]] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)

    def active_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.flags) if f]

    def to_json(self) -> dict:
        return {"flags": self.flags,
                "matched": [{"keyword": k, "region": r, "similarity": s}
                            for k, r, s in self.matched],
                "unmatched": self.unmatched}


def normalize_term(text: str) -> str:
    return " ".join(re.sub(r"[^0-9a-z]+", " ", text.lower()).split())


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def similarity(a: str, b: str) -> float:
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def match_keyword(keyword: str, atlas: RegionAtlas,
                  threshold: float = FUZZY_THRESHOLD) -> Optional[tuple[str, float]]:
    kw = normalize_term(keyword)
    if not kw:
        return None
    padded = f" {kw} "
    best_contained = None  # (alias length, region index)
    for idx, region in enumerate(atlas.regions):
        for alias in region.aliases:
            al = normalize_term(alias)
            if al and f" {al} " in padded:
                if best_contained is None or len(al) > best_contained[0]:
                    best_contained = (len(al), idx)
    if best_contained is not None:
        return atlas.regions[best_contained[1]].region_id, 1.0

    best = None  # (similarity, region index)
    for idx, region in enumerate(atlas.regions):
        for alias in region.aliases:
            s = similarity(kw, normalize_term(alias))
            if best is None or s > best[0]:
                best = (s, idx)
    if best is not None and best[0] >= threshold:
        return atlas.regions[best[1]].region_id, best[0]
    return None


def match_keywords(keywords: Iterable[str], atlas: RegionAtlas,
                   threshold: float = FUZZY_THRESHOLD) -> RegionActivation:
    """Activate regions whose aliases match the keywords.

    A keyword containing an alias (as whole words) matches at similarity 1.0,
    longest alias first. Otherwise the closest alias by normalized Levenshtein
    similarity wins if it reaches ``threshold``. Ties go to the earlier region.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    act = RegionActivation([False] * len(atlas.regions))
    for kw in keywords:
        hit = match_keyword(kw, atlas, threshold)
        if hit is None:
            act.unmatched.append(kw)
            continue
        region_id, sim = hit
        act.flags[atlas.index_of(region_id)] = True
        act.matched.append((kw, region_id, sim))
    return act


# --- masks and condition lookup ----------------------------------------------

def box_mask(bounds, size: tuple[int, int] = (512, 512)) -> np.ndarray:
    h, w = size
    x1, y1, x2, y2 = bounds
    mask = np.zeros((h, w))
    c0, c1 = max(0, math.floor(x1 * w)), min(w, math.ceil(x2 * w))
    r0, r1 = max(0, math.floor(y1 * h)), min(h, math.ceil(y2 * h))
    mask[r0:r1, c0:c1] = 1.0
    return mask


def render_mask(activation: RegionActivation, atlas: RegionAtlas,
                size: tuple[int, int] = (512, 512)) -> AttentionMap:
    mask = np.zeros(size)
    for idx in activation.active_indices():
        np.maximum(mask, box_mask(atlas.regions[idx].bounds, size), out=mask)
    return AttentionMap(mask)


def regions_for_conditions(conditions: Iterable[str],
                           atlas: RegionAtlas) -> list[tuple[str, float]]:
    """Weighted regions implicated by the conditions.

    Primary regions carry the condition weight, secondary ones half of it;
    duplicates keep their highest weight and first-seen position.
    """
    weights: dict[str, float] = {}
    for cond in conditions:
        _, entry = atlas.condition(cond)
        for rid in entry.primary_regions:
            weights[rid] = max(weights.get(rid, 0.0), entry.attention_weight)
        for rid in entry.secondary_regions:
            weights[rid] = max(weights.get(rid, 0.0),
                               entry.attention_weight * SECONDARY_FACTOR)
    return list(weights.items())


def display_name(region_id: str) -> str:
    return region_id.replace("_", " ")
