"""Synthetic study corpus and a smoke run of every CLI stage over it.

Nothing here resembles real patient data; it exists to exercise the file
formats and the command wiring end to end.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import CONDITIONS
from .demo import synthetic_sequence
from .fixations import RawFixationRow, Source, write_fixation_csv
from .regions import load_atlas
from .saliency import render_heatmap, save_atnm

IMAGE_BOUNDS = (320.0, 40.0, 1600.0, 1320.0)
SCREEN_BOUNDS = (0.0, 0.0, 1920.0, 1080.0)

REFERENCE_REPORTS = (
    "FINDINGS: The cardiac silhouette is enlarged. Small left pleural effusion. "
    "IMPRESSION: Cardiomegaly with small left pleural effusion.",
    "FINDINGS: No focal consolidation, pleural effusion, or pneumothorax. "
    "IMPRESSION: No acute cardiopulmonary process.",
    "FINDINGS: Patchy opacity in the right lower lobe. Endotracheal tube in place. "
    "IMPRESSION: Right lower lobe pneumonia. Support devices as described.",
)
KEYWORDS = {
    "Cardiomegaly": ("enlarged cardiac silhouette", "heart size"),
    "Pleural Effusion": ("left costophrenic angle blunting", "pleural effusion"),
    "Pneumonia": ("right lower lobe opacity", "consolidation"),
    "Support Devices": ("endotracheal tube", "et tube tip"),
    "Edema": ("vascular congestion", "hilar haziness"),
}


def write_study(root: Path, study_id: str, rng: np.random.Generator) -> dict:
    """Write one study's inputs under ``root/study_id`` and return its manifest entry."""
    d = root / study_id
    d.mkdir(parents=True, exist_ok=True)
    x1, y1, x2, y2 = IMAGE_BOUNDS
    rows = []
    t = 0.0
    for _ in range(int(rng.integers(6, 15))):
        u, v = rng.uniform(-0.02, 1.02, size=2)
        dur = float(rng.uniform(0.1, 0.6))
        rows.append(RawFixationRow(Source.REFLACX, x1 + u * (x2 - x1), y1 + v * (y2 - y1),
                                   t, t_end=t + dur, pupil_area_norm=float(rng.uniform(0.8, 1.2)),
                                   subject_id="synthetic", study_id=study_id))
        t += dur + 0.05
    write_fixation_csv(d / "fixations_raw.csv", rows)
    (d / "viewport.json").write_text(json.dumps({"image_bounds": list(IMAGE_BOUNDS),
                                                 "screen_bounds": list(SCREEN_BOUNDS)}))

    model_pts = [tuple(rng.uniform(0.2, 0.8, size=2)) + (1.0,) for _ in range(3)]
    save_atnm(d / "model.atnm", render_heatmap(synthetic_sequence(model_pts), (224, 224)))

    atlas = load_atlas()
    with open(d / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient", "region", "x1", "y1", "x2", "y2", "width", "height",
                    "confidence"))
        for p in range(4):
            for region in atlas.regions[:6]:
                bx1, by1, bx2, by2 = (np.array(region.bounds)
                                      + rng.normal(0, 0.01, 4)).clip(0, 1)
                w.writerow((f"p{p}", region.region_id, bx1 * 2048, by1 * 2048, bx2 * 2048,
                            by2 * 2048, 2048, 2048, round(float(rng.uniform(0.5, 1)), 3)))

    preds = []
    for cond in CONDITIONS:
        kws = [{"term": k, "confidence": round(float(rng.uniform(0.4, 1.0)), 3)}
               for k in KEYWORDS.get(cond, ())]
        preds.append({"condition": cond, "probability": round(float(rng.uniform(0, 1)), 3),
                      "keywords": kws})
    (d / "predictions.json").write_text(json.dumps({"predictions": preds}, indent=1))
    (d / "reference.txt").write_text(REFERENCE_REPORTS[int(rng.integers(len(REFERENCE_REPORTS)))])

    return {"study_id": study_id,
            "fixation_csv": f"{study_id}/fixations_raw.csv",
            "viewport_json": f"{study_id}/viewport.json",
            "model_map": f"{study_id}/model.atnm",
            "gaze_map": f"{study_id}/gaze.atnm",
            "annotations_csv": f"{study_id}/annotations.csv",
            "predictions_json": f"{study_id}/predictions.json",
            "reference_report": f"{study_id}/reference.txt"}


def make_corpus(root, n_studies: int = 5, seed: int = 0) -> Path:
    """Write ``n_studies`` synthetic studies plus ``manifest.json``; return the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = [write_study(root, f"study{i:03d}", rng) for i in range(n_studies)]
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"entries": entries}, indent=1))
    return manifest


@dataclass
class StageResult:
    stage: str
    study_id: str
    exit_code: int
    output: Path


@dataclass
class SmokeRun:
    stages: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.exit_code == 0 for s in self.stages)


def run_smoke(manifest_path, env_client: bool = False) -> SmokeRun:
    """Run normalize, heatmap, loss, metrics, regions, report gen and eval per study.

    Outputs go next to each study's inputs. Report generation uses the stub
    client unless ``env_client`` is set and the endpoint variable is present.
    """
    from . import cli

    manifest_path = Path(manifest_path)
    entries = cli.load_manifest(manifest_path)
    saved = os.environ.pop(cli.ENDPOINT_ENV, None) if not env_client else None
    run = SmokeRun()
    try:
        for e in entries:
            sid = e["study_id"]
            d = Path(e["fixation_csv"]).parent

            def stage(name, out, argv):
                run.stages.append(StageResult(name, sid, cli.run(argv), out))

            harmonized = d / "fixations.csv"
            stage("normalize", harmonized, ["normalize", e["fixation_csv"], "--viewport",
                                            e["viewport_json"], "-o", str(harmonized)])
            stage("heatmap", Path(e["gaze_map"]),
                  ["heatmap", str(harmonized), "-o", e["gaze_map"], "--pgm", str(d / "gaze.pgm")])
            stage("loss", d / "loss.json", ["loss", e["model_map"], e["gaze_map"],
                                            "--fixations", str(harmonized), "--multiscale",
                                            "-o", str(d / "loss.json")])
            stage("metrics", d / "metrics.json", ["metrics", e["model_map"], e["gaze_map"],
                                                  str(harmonized), "-o", str(d / "metrics.json")])
            stage("regions-aggregate", d / "bounds.json",
                  ["regions", "aggregate", e["annotations_csv"], "-o", str(d / "bounds.json")])
            kws = [k["term"] for p in json.loads(Path(e["predictions_json"]).read_text())
                   ["predictions"] for k in p["keywords"]]
            stage("regions-match", d / "activation.json",
                  ["regions", "match", "--keywords", *kws, "-o", str(d / "activation.json")])
            stage("regions-mask", d / "mask.atnm",
                  ["regions", "mask", "--activation", str(d / "activation.json"),
                   "--size", "128", "-o", str(d / "mask.atnm")])
            stage("report-gen", d / "report.json",
                  ["report", "gen", e["predictions_json"], "--virtual-clock",
                   "--prompt-out", str(d / "prompt.txt"), "-o", str(d / "report.json")])
            stage("report-eval", d / "scores.json",
                  ["report", "eval", "--candidate", str(d / "report.json"), "--reference",
                   e["reference_report"], "--keywords", "effusion", "cardiac",
                   "-o", str(d / "scores.json")])
        out = manifest_path.parent / "metrics_batch.json"
        run.stages.append(StageResult("metrics-batch", "*", cli.run(
            ["metrics-batch", str(manifest_path), "-o", str(out)]), out))
    finally:
        if saved is not None:
            os.environ[cli.ENDPOINT_ENV] = saved
    return run
