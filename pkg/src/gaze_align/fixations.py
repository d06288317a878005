"""Eye-tracking fixation ingest for the EyeGaze and REFLACX tables.

Both sources end up in a shared frame: gaze position in the unit square,
duration in seconds and a baseline-relative pupil area.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

# Excursion (fraction of the viewport span) tolerated before a clipped sample
# is flagged invalid.
CLIP_TOLERANCE = 0.05
BASELINE_WINDOW_S = 2.0

FIXATION_COLUMNS = (
    "source", "subject_id", "study_id", "x", "y", "t_start", "t_end",
    "duration", "lpd", "rpd", "pupil_area_norm",
)
REQUIRED_COLUMNS = ("source", "x", "y", "t_start")
HARMONIZED_COLUMNS = ("x", "y", "duration", "pupil", "t_start", "valid")


class FixationError(ValueError):
    """Rejected fixation input (bad viewport, bad value, missing viewport)."""


class FixationParseError(FixationError):
    """A cell could not be parsed as the expected type."""


class FixationSchemaError(FixationError):
    """Table structure or preconditions violated."""


class Source(str, Enum):
    EYEGAZE = "eyegaze"
    REFLACX = "reflacx"

    @classmethod
    def parse(cls, value: str) -> "Source":
        key = value.strip().lower().replace("_", "").replace("-", "")
        for member in cls:
            if key in (member.value, member.value + "schema"):
                return member
        raise FixationParseError(f"unknown fixation source {value!r}")


@dataclass(frozen=True)
class RawFixationRow:
    source: Source
    x_raw: float
    y_raw: float
    t_start: float
    t_end: Optional[float] = None
    duration: Optional[float] = None
    pupil_left_diam: Optional[float] = None
    pupil_right_diam: Optional[float] = None
    pupil_area_norm: Optional[float] = None
    subject_id: str = ""
    study_id: str = ""

    def __post_init__(self):
        if self.t_end is not None and self.t_end < self.t_start:
            raise FixationSchemaError(
                f"t_end {self.t_end} precedes t_start {self.t_start}")

    def fixation_duration(self) -> float:
        if self.source is Source.REFLACX and self.t_end is not None:
            return self.t_end - self.t_start
        if self.duration is not None:
            return self.duration
        if self.t_end is not None:
            return self.t_end - self.t_start
        return 0.0


@dataclass(frozen=True)
class ImageViewport:
    image_bounds: tuple[float, float, float, float]
    screen_bounds: Optional[tuple[float, float, float, float]] = None

    def __post_init__(self):
        for name in ("image_bounds", "screen_bounds"):
            rect = getattr(self, name)
            if rect is None:
                continue
            if len(rect) != 4:
                raise FixationSchemaError(f"{name} must have 4 values, got {len(rect)}")
            object.__setattr__(self, name, tuple(float(v) for v in rect))

    @classmethod
    def from_json(cls, path) -> "ImageViewport":
        with open(path) as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FixationParseError(f"{path}: {exc}") from exc
        if "image_bounds" not in payload:
            raise FixationSchemaError(f"{path}: missing 'image_bounds'")
        return cls(payload["image_bounds"], payload.get("screen_bounds"))


@dataclass(frozen=True)
class FixationRecord:
    x: float
    y: float
    duration: float
    pupil: float
    t_start: float
    valid: bool


@dataclass
class FixationSequence:
    records: list[FixationRecord] = field(default_factory=list)
    subject_id: str = ""
    study_id: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def n_fix(self) -> int:
        return sum(1 for r in self.records if r.valid)

    @property
    def q_score(self) -> float:
        """Fraction of records that passed the validity gate."""
        return self.n_fix / max(1, len(self.records))

    def valid_records(self) -> list[FixationRecord]:
        return [r for r in self.records if r.valid]

    def __len__(self):
        return len(self.records)


def _clip_unit(value: float) -> tuple[float, bool]:
    """Clip to [0, 1]; the flag is False when the excursion exceeds the tolerance."""
    if not math.isfinite(value):
        return 0.0, False
    ok = -CLIP_TOLERANCE - 1e-12 <= value <= 1.0 + CLIP_TOLERANCE + 1e-12
    return min(1.0, max(0.0, value)), ok


def normalize_reflacx(row: RawFixationRow, vp: ImageViewport,
                      index: Optional[int] = None) -> FixationRecord:
    """Map a REFLACX pixel fixation into the unit square of the displayed image crop."""
    xmin, ymin, xmax, ymax = vp.image_bounds
    if xmax <= xmin or ymax <= ymin:
        where = f"row {index}" if index is not None else "row"
        raise FixationSchemaError(
            f"{where}: degenerate image viewport {vp.image_bounds}")
    x, x_ok = _clip_unit((row.x_raw - xmin) / (xmax - xmin))
    y, y_ok = _clip_unit((row.y_raw - ymin) / (ymax - ymin))
    duration = row.fixation_duration()
    pupil = row.pupil_area_norm if row.pupil_area_norm is not None else 1.0
    return FixationRecord(x, y, duration, pupil, row.t_start,
                          valid=x_ok and y_ok and duration > 0)


def pupil_area(lpd: float, rpd: float) -> float:
    """Binocular pupil area from left/right diameters: (pi/2)((l/2)^2 + (r/2)^2)."""
    if lpd < 0 or rpd < 0:
        raise FixationError(f"negative pupil diameter ({lpd}, {rpd})")
    return (math.pi / 2.0) * ((lpd / 2.0) ** 2 + (rpd / 2.0) ** 2)


def baseline_scale_pupil(samples: Sequence[tuple[float, Optional[float]]],
                         window: float = BASELINE_WINDOW_S,
                         warnings: Optional[list] = None) -> list[tuple[float, float]]:
    """Divide each area by the mean area of the first ``window`` seconds.

    Samples with a missing or non-positive area do not enter the baseline and
    come back as 1.0. If no baseline can be formed every sample is 1.0 and a
    warning is appended to ``warnings``.
    """
    if not samples:
        return []
    usable = [(t, a) for t, a in samples
              if a is not None and math.isfinite(a) and a > 0]
    baseline = 0.0
    if usable:
        t0 = usable[0][0]
        window_areas = [a for t, a in usable if t - t0 <= window + 1e-12]
        if window_areas:
            baseline = sum(window_areas) / len(window_areas)
    if baseline <= 0:
        msg = "no valid pupil samples in baseline window; pupil set to 1.0"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return [(t, 1.0) for t, _ in samples]
    out = []
    for t, a in samples:
        ok = a is not None and math.isfinite(a) and a > 0
        out.append((t, a / baseline if ok else 1.0))
    return out


def _normalize_eyegaze(row: RawFixationRow) -> tuple[float, float, float, bool]:
    x, x_ok = _clip_unit(row.x_raw)
    y, y_ok = _clip_unit(row.y_raw)
    duration = row.fixation_duration()
    return x, y, duration, x_ok and y_ok and duration > 0


def harmonize(rows: Sequence[RawFixationRow],
              vp: Optional[ImageViewport] = None) -> FixationSequence:
    """Build a validated fixation sequence in the unit square, preserving row order."""
    if not rows:
        return FixationSequence()
    if vp is None and any(r.source is Source.REFLACX for r in rows):
        raise FixationSchemaError("REFLACX rows require an image viewport")

    seq = FixationSequence(subject_id=rows[0].subject_id, study_id=rows[0].study_id)
    staged: list[Optional[tuple]] = []
    eyegaze_pupil: list[tuple[float, Optional[float]]] = []
    for i, row in enumerate(rows):
        if row.source is Source.REFLACX:
            staged.append(normalize_reflacx(row, vp, index=i))
            continue
        x, y, duration, ok = _normalize_eyegaze(row)
        area = None
        if row.pupil_left_diam is not None and row.pupil_right_diam is not None:
            area = pupil_area(row.pupil_left_diam, row.pupil_right_diam)
        elif row.pupil_area_norm is not None:
            area = row.pupil_area_norm
        staged.append((x, y, duration, row.t_start, ok))
        eyegaze_pupil.append((row.t_start, area if ok else None))

    scaled = iter(baseline_scale_pupil(eyegaze_pupil, warnings=seq.warnings))
    for item in staged:
        if isinstance(item, FixationRecord):
            seq.records.append(item)
        else:
            x, y, duration, t_start, ok = item
            _, pupil = next(scaled)
            seq.records.append(FixationRecord(x, y, duration, pupil, t_start, ok))
    return seq


# --- CSV / JSON io -----------------------------------------------------------

def _opt_float(cell: Optional[str], column: str, line: int) -> Optional[float]:
    if cell is None or cell.strip() == "":
        return None
    try:
        return float(cell)
    except ValueError:
        raise FixationParseError(
            f"line {line}: column {column!r} is not numeric: {cell!r}") from None


def read_fixation_csv(path) -> list[RawFixationRow]:
    """Read the raw fixation table; unknown columns are ignored."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise FixationSchemaError(f"{path}: missing required columns {missing}")
        reader.fieldnames = header
        rows = []
        for line, rec in enumerate(reader, start=2):
            values = {c: _opt_float(rec.get(c), c, line) for c in
                      ("x", "y", "t_start", "t_end", "duration", "lpd", "rpd",
                       "pupil_area_norm")}
            for c in ("x", "y", "t_start"):
                if values[c] is None:
                    raise FixationParseError(f"line {line}: empty required cell {c!r}")
            rows.append(RawFixationRow(
                source=Source.parse(rec["source"] or ""),
                x_raw=values["x"], y_raw=values["y"], t_start=values["t_start"],
                t_end=values["t_end"], duration=values["duration"],
                pupil_left_diam=values["lpd"], pupil_right_diam=values["rpd"],
                pupil_area_norm=values["pupil_area_norm"],
                subject_id=(rec.get("subject_id") or "").strip(),
                study_id=(rec.get("study_id") or "").strip(),
            ))
        return rows


def write_fixation_csv(path, rows: Iterable[RawFixationRow]) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIXATION_COLUMNS)
        for r in rows:
            writer.writerow([
                r.source.value, r.subject_id, r.study_id, fmt(r.x_raw), fmt(r.y_raw),
                fmt(r.t_start), fmt(r.t_end), fmt(r.duration), fmt(r.pupil_left_diam),
                fmt(r.pupil_right_diam), fmt(r.pupil_area_norm),
            ])


def write_harmonized_csv(path, seq: FixationSequence) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HARMONIZED_COLUMNS)
        for r in seq.records:
            writer.writerow([repr(r.x), repr(r.y), repr(r.duration), repr(r.pupil),
                             repr(r.t_start), int(r.valid)])


def read_harmonized_csv(path) -> FixationSequence:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in HARMONIZED_COLUMNS if c not in header]
        if missing:
            raise FixationSchemaError(f"{path}: missing harmonized columns {missing}")
        reader.fieldnames = header
        seq = FixationSequence()
        for line, rec in enumerate(reader, start=2):
            vals = {c: _opt_float(rec[c], c, line) for c in HARMONIZED_COLUMNS[:-1]}
            if any(v is None for v in vals.values()):
                raise FixationParseError(f"line {line}: empty cell in harmonized row")
            flag = rec["valid"].strip().lower()
            if flag not in ("0", "1", "true", "false"):
                raise FixationParseError(f"line {line}: bad valid flag {rec['valid']!r}")
            seq.records.append(FixationRecord(valid=flag in ("1", "true"), **vals))
        return seq


def load_fixations(path, viewport: Optional[ImageViewport] = None) -> FixationSequence:
    """Load either a harmonized table or a raw table (harmonized on the fly)."""
    with open(path, newline="") as fh:
        first = fh.readline()
    header = {h.strip() for h in first.strip().split(",")}
    if "source" in header:
        return harmonize(read_fixation_csv(path), viewport)
    return read_harmonized_csv(Path(path))
