"""``gaze-align`` command line front end.

Exit codes: 0 ok, 2 parse error, 3 schema/precondition error, 4 shape/config
error, 5 text generator exhausted (the fallback report is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import fixations as fx
from . import losses, metrics, regions, report, saliency, text_metrics

log = logging.getLogger("gaze_align")

EXIT_OK, EXIT_PARSE, EXIT_SCHEMA, EXIT_SHAPE, EXIT_CLIENT = 0, 2, 3, 4, 5
ENDPOINT_ENV = "GAZE_ALIGN_LLM_ENDPOINT"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent.resolve(), prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _emit_json(payload, out=None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        _write_text(out, text + "\n")
    else:
        print(text)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{path}: invalid JSON ({exc})") from exc


def _load_map(path) -> saliency.AttentionMap:
    try:
        return saliency.load_atnm(path)
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from exc


def _load_fixations(path, viewport=None) -> fx.FixationSequence:
    vp = fx.ImageViewport.from_json(viewport) if viewport else None
    return fx.load_fixations(path, vp)


def _size(values) -> tuple[int, int]:
    if len(values) == 1:
        return (values[0], values[0])
    if len(values) == 2:
        return (values[0], values[1])
    raise CliError(EXIT_SHAPE, "--size takes one or two integers")


# --- commands ----------------------------------------------------------------

def cmd_normalize(args) -> int:
    rows = fx.read_fixation_csv(args.input)
    vp = fx.ImageViewport.from_json(args.viewport) if args.viewport else None
    seq = fx.harmonize(rows, vp)
    fx.write_harmonized_csv(args.output, seq)
    for w in seq.warnings:
        log.warning(w)
    log.info("%d rows, %d valid, q_score %.3f", len(seq), seq.n_fix, seq.q_score)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    seq = _load_fixations(args.fixations, args.viewport)
    try:
        amap = saliency.render_heatmap(seq, _size(args.size), args.sigma,
                                       weight=args.weight, pupil_weight=args.pupil_weight)
    except ValueError as exc:
        raise CliError(EXIT_SHAPE, str(exc)) from exc
    saliency.save_atnm(args.output, amap)
    if args.pgm:
        saliency.save_pgm16(args.pgm, amap)
    return EXIT_OK


def cmd_loss(args) -> int:
    cfg = losses.LossConfig()
    model, gaze = _load_map(args.model), _load_map(args.gaze)
    if args.fixations:
        seq = _load_fixations(args.fixations, args.viewport)
        n_fix, q_score = seq.n_fix, seq.q_score
    else:
        n_fix, q_score = args.n_fix, args.q_score
    if n_fix is None or q_score is None:
        raise CliError(EXIT_SCHEMA, "give --fixations or both --n-fix and --q-score")
    if model.shape != gaze.shape:
        raise CliError(EXIT_SHAPE, f"map shapes differ: {model.shape} vs {gaze.shape}")
    try:
        if args.multiscale:
            b = losses.gaze_loss_multiscale(saliency.multiscale(model),
                                            saliency.multiscale(gaze), n_fix, q_score)
        else:
            b = losses.gaze_loss(model, gaze, n_fix, q_score)
    except saliency.MapShapeError as exc:
        raise CliError(EXIT_SHAPE, str(exc)) from exc
    except ValueError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from exc
    payload = b.to_json()
    payload["config"] = cfg.to_json()
    payload["weighted_gaze_term"] = cfg.lambda2 * b.gaze_total
    _emit_json(payload, args.output)
    return EXIT_OK


def _study_metrics(model_path, gaze_path, fix_path, viewport=None) -> metrics.AlignmentReport:
    model, gaze = _load_map(model_path), _load_map(gaze_path)
    if model.shape != gaze.shape:
        raise CliError(EXIT_SHAPE, f"map shapes differ: {model.shape} vs {gaze.shape}")
    return metrics.alignment_report(model, gaze, _load_fixations(fix_path, viewport))


def cmd_metrics(args) -> int:
    rep = _study_metrics(args.model, args.gaze, args.fixations, args.viewport)
    _emit_json(rep.to_json(), args.output)
    return EXIT_OK


def load_manifest(path) -> list[dict]:
    payload = _read_json(path)
    entries = payload
    if isinstance(payload, dict):
        entries = payload.get("entries", payload.get("studies"))
    if not isinstance(entries, list):
        raise CliError(EXIT_SCHEMA, f"{path}: manifest must list studies")
    base = Path(path).resolve().parent
    ids = [e.get("study_id") for e in entries]
    if None in ids or len(set(ids)) != len(ids):
        raise CliError(EXIT_SCHEMA, f"{path}: study_ids missing or not unique")
    resolved = []
    for e in entries:
        r = dict(e)
        for key, value in e.items():
            if key != "study_id" and isinstance(value, str):
                r[key] = str(base / value)
        resolved.append(r)
    return resolved


def cmd_metrics_batch(args) -> int:
    entries = load_manifest(args.manifest)
    for e in entries:
        missing = [k for k in ("model_map", "gaze_map", "fixation_csv") if k not in e]
        if missing:
            raise CliError(EXIT_SCHEMA, f"study {e['study_id']}: missing {missing}")

    def one(e):
        return _study_metrics(e["model_map"], e["gaze_map"], e["fixation_csv"],
                              e.get("viewport_json"))

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        reps = list(pool.map(one, entries))
    payload = {"summary": metrics.aggregate_reports(reps),
               "studies": {e["study_id"]: r.to_json() for e, r in zip(entries, reps)}}
    _emit_json(payload, args.output)
    return EXIT_OK


def _keywords(args) -> list[str]:
    kws = list(args.keywords or [])
    if args.keywords_file:
        kws += [ln.strip() for ln in Path(args.keywords_file).read_text().splitlines()
                if ln.strip()]
    return kws


def cmd_regions(args) -> int:
    atlas = regions.load_atlas(args.atlas)
    if args.action == "aggregate":
        try:
            anns = regions.read_annotations_csv(args.annotations)
        except regions.AtlasError as exc:
            raise CliError(EXIT_SCHEMA, str(exc)) from exc
        except ValueError as exc:
            raise CliError(EXIT_PARSE, str(exc)) from exc
        res = regions.aggregate_bounds(anns, atlas.region_ids, tau_box=args.tau_box)
        _emit_json({"bounds": {k: list(v) for k, v in res.bounds.items()},
                    "branch": res.branch, "n_valid": res.n_valid,
                    "n_invalid": res.n_invalid, "dropped": res.dropped_regions},
                   args.output)
    elif args.action == "match":
        act = regions.match_keywords(_keywords(args), atlas, args.threshold)
        _emit_json(act.to_json(), args.output)
    else:
        if args.activation:
            flags = _read_json(args.activation)["flags"]
            if len(flags) != len(atlas.regions):
                raise CliError(EXIT_SCHEMA, "activation must carry one flag per region")
            act = regions.RegionActivation([bool(f) for f in flags])
        else:
            act = regions.match_keywords(_keywords(args), atlas, args.threshold)
        mask = regions.render_mask(act, atlas, _size(args.size))
        saliency.save_atnm(args.output, mask)
        if args.pgm:
            saliency.save_pgm16(args.pgm, mask)
    return EXIT_OK


def make_client():
    endpoint = os.environ.get(ENDPOINT_ENV)
    if endpoint:
        return report.HttpClient(endpoint)
    return report.StubClient()


def _read_report_text(path) -> str:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_PARSE, f"{path}: invalid JSON ({exc})") from exc
        return f"{d.get('findings', '')}\n{d.get('impression', '')}"
    return text


def cmd_report(args) -> int:
    if args.action == "gen":
        atlas = regions.load_atlas(args.atlas)
        payload = _read_json(args.predictions)
        raw = payload.get("predictions", payload) if isinstance(payload, dict) else payload
        try:
            preds = [report.ConditionPrediction.from_json(p) for p in raw]
            for p in preds:
                atlas.condition(p.condition)
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(EXIT_SCHEMA, f"bad predictions: {exc}") from exc
        gated = report.gate_conditions(preds, args.threshold)
        act = regions.match_keywords([t for p in gated for t, _ in p.keywords], atlas)
        bundle = report.assemble_prompt(gated, act, atlas, args.style)
        policy = report.RetryPolicy(max_retries=args.max_retries, base_delay=args.base_delay)
        delays = []
        sleep = delays.append if args.virtual_clock else None
        rep = report.generate(bundle, make_client(), policy,
                              **({"sleep": sleep} if sleep else {}))
        out = rep.to_json()
        out["attempts"] = rep.attempts
        out["delays"] = rep.delays
        _emit_json(out, args.output)
        if args.prompt_out:
            _write_text(args.prompt_out, bundle.text)
        return EXIT_CLIENT if rep.fallback_used else EXIT_OK

    terms = args.keywords or None
    if args.manifest:
        rows = []
        base = Path(args.manifest).resolve().parent
        for n, line in enumerate(Path(args.manifest).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(EXIT_PARSE, f"manifest line {n}: {exc}") from exc
            cand = d.get("candidate_text") or _read_report_text(base / d["candidate"])
            ref = d.get("reference_text") or _read_report_text(base / d["reference"])
            rows.append(text_metrics.score_report(cand, ref, d.get("keywords", terms)))
        _emit_json({"summary": text_metrics.aggregate_scores(rows), "reports": rows},
                   args.output)
    else:
        if not (args.candidate and args.reference):
            raise CliError(EXIT_SCHEMA, "give CANDIDATE and REFERENCE or --manifest")
        scores = text_metrics.score_report(_read_report_text(args.candidate),
                                           _read_report_text(args.reference), terms)
        _emit_json(scores, args.output)
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaze-align", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("normalize", help="harmonize a raw fixation CSV")
    s.add_argument("input")
    s.add_argument("--viewport", help="viewport JSON (required for REFLACX rows)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("heatmap", help="render a fixation heatmap to ATNM")
    s.add_argument("fixations")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--viewport")
    s.add_argument("--size", type=int, nargs="+", default=[224])
    s.add_argument("--sigma", type=float, default=None,
                   help="Gaussian sigma in pixels (default 25 px scaled to the map size)")
    s.add_argument("--weight", choices=("duration", "count"), default="duration")
    s.add_argument("--pupil-weight", action="store_true")
    s.add_argument("--pgm", help="also write a 16-bit PGM preview")
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("loss", help="gaze-attention loss between two ATNM maps")
    s.add_argument("model")
    s.add_argument("gaze")
    s.add_argument("--n-fix", type=int)
    s.add_argument("--q-score", type=float)
    s.add_argument("--fixations", help="derive n_fix and q_score from a fixation CSV")
    s.add_argument("--viewport")
    s.add_argument("--multiscale", action="store_true")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("metrics", help="alignment metrics for one study")
    s.add_argument("model")
    s.add_argument("gaze")
    s.add_argument("fixations")
    s.add_argument("--viewport")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("metrics-batch", help="alignment metrics over a manifest")
    s.add_argument("manifest")
    s.add_argument("--jobs", type=int, default=4)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_metrics_batch)

    s = sub.add_parser("regions", help="region atlas operations")
    s.add_argument("action", choices=("aggregate", "match", "mask"))
    s.add_argument("annotations", nargs="?", help="annotation CSV (aggregate)")
    s.add_argument("--atlas")
    s.add_argument("--keywords", nargs="*")
    s.add_argument("--keywords-file")
    s.add_argument("--activation", help="activation JSON (mask)")
    s.add_argument("--threshold", type=float, default=regions.FUZZY_THRESHOLD)
    s.add_argument("--tau-box", type=float, default=regions.TAU_BOX)
    s.add_argument("--size", type=int, nargs="+", default=[512])
    s.add_argument("--pgm")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_regions)

    s = sub.add_parser("report", help="generate or evaluate reports")
    s.add_argument("action", choices=("gen", "eval"))
    s.add_argument("predictions", nargs="?", help="predictions JSON (gen)")
    s.add_argument("--candidate")
    s.add_argument("--reference")
    s.add_argument("--manifest", help="JSONL of candidate/reference pairs (eval)")
    s.add_argument("--keywords", nargs="*", help="required clinical terms (eval)")
    s.add_argument("--atlas")
    s.add_argument("--style", default="standard", choices=sorted(report.TEMPLATE_STYLES))
    s.add_argument("--threshold", type=float, default=report.GATE_THRESHOLD)
    s.add_argument("--max-retries", type=int, default=5)
    s.add_argument("--base-delay", type=float, default=3.0)
    s.add_argument("--virtual-clock", action="store_true",
                   help="record backoff delays instead of sleeping")
    s.add_argument("--prompt-out")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "regions":
        if args.action == "aggregate" and not args.annotations:
            log.error("regions aggregate needs an annotation CSV")
            return EXIT_SCHEMA
        if args.action == "mask" and not args.output:
            log.error("regions mask needs -o")
            return EXIT_SCHEMA
    if args.command == "report" and args.action == "gen" and not args.predictions:
        log.error("report gen needs a predictions JSON")
        return EXIT_SCHEMA
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except fx.FixationParseError as exc:
        log.error("parse error: %s", exc)
        return EXIT_PARSE
    except (fx.FixationSchemaError, fx.FixationError, regions.AtlasError) as exc:
        log.error("schema error: %s", exc)
        return EXIT_SCHEMA
    except saliency.MapShapeError as exc:
        log.error("shape error: %s", exc)
        return EXIT_SHAPE
    except (OSError, UnicodeDecodeError) as exc:
        log.error("cannot read input: %s", exc)
        return EXIT_PARSE


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
