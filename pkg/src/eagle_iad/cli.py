"""Command-line entry point: ``eagle-iad <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .dbt import ThresholdModel
from .features import SyntheticParams, generate_synthetic_dataset
from .prompting import EndpointError

log = logging.getLogger("eagle_iad")


def _layers(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    return lo, hi


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON or TOML run configuration")
    p.add_argument("--dataset", help="dataset directory or manifest.json")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eagle-iad", description="Memory-bank anomaly detection with confidence-gated multimodal prompting.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic feature dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--n-test-normal", type=int, default=50)
    p.add_argument("--n-test-anom", type=int, default=50)
    p.add_argument("--shape", default="8,12,12", help="C,H,W")
    p.add_argument("--shift", type=float, default=10.0)

    for name, text in (
        ("build", "select the coreset memory bank"),
        ("threshold", "fit the distribution-based threshold"),
        ("score", "score a split and localise anomalies"),
        ("prompt", "build conditional prompts from scores"),
        ("run", "the whole pipeline end to end"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        if name in ("score", "prompt"):
            p.add_argument("--split", default="test", help="test | train_normal | test_normal | test_anomalous")
        if name in ("prompt", "run"):
            p.add_argument("--stub", choices=("echo", "adversarial"), help="answer with a deterministic stub model")
        if name == "prompt":
            p.add_argument("--send", action="store_true", help="also send the prompts and record answers")

    p = sub.add_parser("eval", help="metrics for a predictions file")
    p.add_argument("predictions", type=Path, help="answers.jsonl or scores_*.jsonl")
    p.add_argument("labels", type=Path, help="dataset manifest (or directory) or a JSONL with labels")
    p.add_argument("--unparseable", choices=pipeline.UNPARSEABLE_POLICIES, default="normal")
    p.add_argument("--out", type=Path, help="write eval.json and eval.csv here")

    p = sub.add_parser("caas-sim", help="attention-scaling study on the toy attention stack")
    p.add_argument("--out", type=Path, default=Path("caas_out"))
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--beta", type=float, default=-0.4)
    p.add_argument("--layers", type=_layers, default=(9, 15), metavar="LO:HI")
    p.add_argument("--renormalize", action="store_true")
    p.add_argument("--scale-text", action="store_true", help="also scale textual-prior attention by 1+beta")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--prior", choices=("correct", "misleading", "none"), default="misleading")
    p.add_argument("--n-layers", type=int, default=28)
    p.add_argument("--threshold", type=Path, help="threshold.json whose [tau, s_max] band gates the scaling")
    p.add_argument("--s-img", type=float, help="image score tested against the gate")
    return ap


def load_config(args) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig.load(args.config) if args.config else pipeline.RunConfig()
    cfg = cfg.with_env()
    updates = {}
    if args.dataset:
        updates["dataset"] = args.dataset
    if args.out:
        updates["out"] = args.out
    if getattr(args, "stub", None):
        updates["stub"] = args.stub
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not hasattr(cfg, key):
            raise pipeline.ConfigError(f"bad --set {item!r}")
        updates[key] = pipeline._coerce(value, getattr(cfg, key), key)
    return cfg.replace(**updates) if updates else cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def run(args) -> int:
    cmd = args.command
    if cmd == "synth":
        shape = tuple(int(v) for v in args.shape.split(","))
        m = generate_synthetic_dataset(args.out, args.seed, args.n_train, args.n_test_normal, args.n_test_anom, shape, args.shift, SyntheticParams())
        _print({"manifest": str(Path(args.out) / "manifest.json"), "images": len(m.entries)})
        return 0
    if cmd == "eval":
        report = pipeline.cmd_eval(pipeline.load_predictions(args.predictions), pipeline.load_labels(args.labels), args.unparseable)
        if args.out:
            pipeline.write_eval(report, args.out)
        _print(report.summary())
        return 0
    if cmd == "caas-sim":
        sim = pipeline.CaasSimConfig(
            alpha=args.alpha,
            beta=args.beta,
            layer_range=args.layers,
            renormalize=args.renormalize,
            scale_text=args.scale_text,
            seed=args.seed,
            trials=args.trials,
            prior=args.prior,
            n_layers=args.n_layers,
        )
        gate = None
        if args.threshold:
            doc = json.loads(args.threshold.read_text())
            gate = ThresholdModel.from_dict(doc.get("model", doc))
        summary = pipeline.cmd_caas_sim(sim, args.out, gate, args.s_img)
        _print({k: summary[k] for k in ("baseline_correct_rate", "sweep", "gate_open", "mean_ar_correct", "mean_ar_incorrect")})
        return 0

    cfg = load_config(args)
    if cmd == "build":
        r = pipeline.cmd_build(cfg)
        _print({"bank_size": r.bank_size, "patches": r.n_patches, "ratio": r.ratio, "config_hash": r.config_hash, "flagged": r.flagged_images})
    elif cmd == "threshold":
        _print(pipeline.cmd_threshold(cfg).to_dict())
    elif cmd == "score":
        rows = pipeline.cmd_score(cfg, args.split)
        _print({"images": len(rows), "abnormal": sum(r["verdict"] == "abnormal" for r in rows), "low_confidence": sum(r["low_confidence"] for r in rows)})
    elif cmd == "prompt":
        bundles = pipeline.cmd_prompt(cfg, args.split)
        info = {"prompts": len(bundles), "annotated": sum(bool(b.visual_boxes) for b in bundles)}
        if args.send:
            answers = pipeline.cmd_send(cfg, bundles)
            info["answers"] = len(answers)
        _print(info)
    elif cmd == "run":
        r = pipeline.cmd_run(cfg)
        _print({"expert": r.expert.summary(), "final": r.final.summary(), "out": str(r.out)})
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (pipeline.ConfigError, pipeline.ArtifactMismatchError, FileNotFoundError, EndpointError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
