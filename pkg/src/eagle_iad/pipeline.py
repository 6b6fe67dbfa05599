"""End-to-end orchestration: configuration, persisted artifacts, stages and metrics.

Output directory layout (``config.out``)::

    config.json             resolved configuration, API key redacted
    build/                  bank.eaglfeat, bank_index.json, unsampled.json
    threshold.json          fitted ThresholdModel plus training scores
    scores_<split>.jsonl    one record per image; scores_<split>.csv mirrors it
    prompts.jsonl           prompt bundles
    requests.jsonl          serialized chat requests (request log)
    answers.jsonl           raw and parsed model answers
    eval.json / eval.csv    metrics and per-image rows
    figures/*.png
    MANIFEST.json           sha256 of every file above
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import caas, plotting
from .coreset import PatchSet, ProjectionMatrix, START_RULES, build_coreset, load_trace, save_trace, unsampled_of
from .dbt import ThresholdModel, classify, fit_evt, fit_threshold, training_scores
from .features import DatasetManifest, SPLITS, aggregate_patches
from .prompting import (
    DEFECT_NO,
    DEFECT_YES,
    UNPARSEABLE,
    EndpointSettings,
    EndpointUnreachable,
    OpenAIChatClient,
    PromptBundle,
    StubClient,
    build_prompt,
    pooled_descriptor,
    send_to_model,
)
from .scoring import BoundingBox, extract_boxes, image_score, score_grid, upsample_map

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
UNPARSEABLE_POLICIES = ("normal", "abnormal")
TEST_SPLITS = ("test_normal", "test_anomalous")


class ConfigError(ValueError):
    pass


class ArtifactMismatchError(RuntimeError):
    """A persisted artifact was produced under a different configuration or schema."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    dataset: str = "data"
    out: str = "out"
    seed: int = 0
    # expert model
    target_fraction: float = 0.10
    patchsize: int = 1
    stride: int = 1
    projection: bool = True
    projection_dim: int = 128
    start_rule: str = "max_norm"
    kappa: float = 3.0
    evt_q: float | None = None
    exclude_flagged: bool = True
    map_scale: int = 8
    box_min_area: int = 1
    score_workers: int = 4
    # prompting and endpoint
    prompt_style: str = "full"
    use_template: bool = True
    endpoint_url: str | None = None
    model: str = ""
    api_key: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_s: float = 0.5
    max_in_flight: int = 4
    stub: str | None = None
    unparseable_policy: str = "normal"
    # attention scaling
    alpha: float = 0.6
    beta: float = -0.4
    layer_range: tuple[int, int] = (9, 15)
    renormalize: bool = False

    def __post_init__(self):
        self.layer_range = tuple(int(v) for v in self.layer_range)
        self.validate()

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(0.0 < self.target_fraction <= 1.0, "target_fraction must lie in (0, 1]")
        need(self.patchsize >= 1 and self.patchsize % 2 == 1, "patchsize must be a positive odd integer")
        need(self.stride >= 1, "stride must be >= 1")
        need(self.projection_dim >= 1, "projection_dim must be >= 1")
        need(self.start_rule in START_RULES, f"start_rule must be one of {START_RULES}")
        need(math.isfinite(self.kappa) and self.kappa >= 0, "kappa must be finite and non-negative")
        need(self.evt_q is None or 0.0 < self.evt_q < 1.0, "evt_q must lie in (0, 1)")
        need(self.map_scale >= 1, "map_scale must be >= 1")
        need(self.box_min_area >= 1, "box_min_area must be >= 1")
        need(self.score_workers >= 1 and self.max_in_flight >= 1, "worker counts must be >= 1")
        need(self.prompt_style in ("full", "short"), "prompt_style must be 'full' or 'short'")
        need(self.max_retries >= 0 and self.timeout_s > 0 and self.backoff_s >= 0, "invalid endpoint retry settings")
        need(self.stub in (None, "echo", "adversarial"), "stub must be 'echo', 'adversarial' or unset")
        need(self.unparseable_policy in UNPARSEABLE_POLICIES, f"unparseable_policy must be one of {UNPARSEABLE_POLICIES}")
        need(1 + self.alpha > 0 and 1 + self.beta > 0, "1+alpha and 1+beta must be positive")
        need(len(self.layer_range) == 2 and 1 <= self.layer_range[0] <= self.layer_range[1], "invalid layer_range")

    # ---- serialisation

    def to_dict(self, redact: bool = True) -> dict:
        d = dataclasses.asdict(self)
        d["layer_range"] = list(self.layer_range)
        if redact and d["api_key"]:
            d["api_key"] = "***"
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read a ``.json`` or ``.toml`` file. Nested tables are flattened one level."""
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            raw = tomllib.loads(text)
        else:
            raw = json.loads(text)
        flat: dict = {}
        for k, v in raw.items():
            if isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
        return cls.from_dict(flat)

    def with_env(self, environ: Mapping[str, str] | None = None) -> "RunConfig":
        """Apply ``EAGLE_<FIELD>`` overrides plus the endpoint variables."""
        env = os.environ if environ is None else environ
        updates: dict = {}
        for f in dataclasses.fields(self):
            key = _ENV_NAMES.get(f.name, f"EAGLE_{f.name.upper()}")
            if key in env:
                updates[f.name] = _coerce(env[key], getattr(self, f.name), f.name)
        return dataclasses.replace(self, **updates) if updates else self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # ---- hashes

    def build_hash(self, dataset_digest: str) -> str:
        keys = ("target_fraction", "patchsize", "stride", "projection", "projection_dim", "start_rule", "seed")
        return _digest({"dataset": dataset_digest, **{k: getattr(self, k) for k in keys}})

    def threshold_hash(self, build_hash: str) -> str:
        return _digest({"build": build_hash, "kappa": self.kappa, "evt_q": self.evt_q, "exclude_flagged": self.exclude_flagged})

    @property
    def endpoint(self) -> EndpointSettings:
        return EndpointSettings(self.endpoint_url, self.model, self.api_key, self.timeout_s, self.max_retries, self.backoff_s)

    @property
    def out_path(self) -> Path:
        return Path(self.out)


_ENV_NAMES = {"endpoint_url": "EAGLE_ENDPOINT", "model": "EAGLE_MODEL", "api_key": "EAGLE_API_KEY"}


def _coerce(text: str, current, name: str):
    if name == "layer_range":
        lo, hi = text.replace(",", ":").split(":")
        return (int(lo), int(hi))
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot read {name}={text!r} as a boolean")
    if text.lower() in ("", "none", "null") and (current is None or name in ("evt_q", "stub", "endpoint_url", "api_key")):
        return None
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float) or name == "evt_q":
        return float(text)
    return text


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _dump_jsonl(path: Path, rows: Iterable[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _dump_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def write_manifest(out: Path, config_hash: str = "") -> Path:
    """Hash every artifact under ``out`` into ``MANIFEST.json``."""
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "MANIFEST.json":
            files[p.relative_to(out).as_posix()] = _sha256(p)
    return _dump_json(out / "MANIFEST.json", {"schema_version": SCHEMA_VERSION, "config_hash": config_hash, "files": files})


# --------------------------------------------------------------------------- dataset helpers


def open_dataset(config: RunConfig) -> DatasetManifest:
    p = Path(config.dataset)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"dataset manifest not found: {p}")
    return DatasetManifest.load(p)


def dataset_digest(manifest: DatasetManifest) -> str:
    """Digest of the manifest text and all training feature files."""
    h = hashlib.sha256(manifest.to_json().encode())
    for e in manifest.split("train_normal"):
        h.update(_sha256(manifest.resolve(e.feature_path)).encode())
    return h.hexdigest()[:16]


def _grid(manifest: DatasetManifest, entry, config: RunConfig):
    return aggregate_patches(manifest.load_grid(entry), config.patchsize, config.stride)


# --------------------------------------------------------------------------- build


@dataclass
class BuildResult:
    bank_size: int
    n_patches: int
    config_hash: str
    flagged_images: list[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.bank_size / self.n_patches


def cmd_build(config: RunConfig) -> BuildResult:
    """Greedy coreset over every training patch; writes the bank and its trace."""
    manifest = open_dataset(config)
    train = manifest.split("train_normal")
    if not train:
        raise ValueError("dataset has no train_normal split")
    ids = [e.image_id for e in train]
    patches = PatchSet.from_grids([_grid(manifest, e, config) for e in train])
    proj = ProjectionMatrix.default(patches.dim, seed=config.seed, max_dim=config.projection_dim) if config.projection else None
    trace = build_coreset(patches, config.target_fraction, proj, config.start_rule)
    h = config.build_hash(dataset_digest(manifest))
    out = config.out_path
    save_trace(trace, out / "build", ids, config_hash=h)
    _dump_json(out / "config.json", config.to_dict())

    sampled = trace.sampled_by_image
    totals = trace.total_patches_by_image
    plotting.sampling_ratio([len(sampled[i]) for i in range(len(ids))], [totals[i] for i in range(len(ids))], out / "figures" / "sampling_ratio.png")
    flagged = [ids[i] for i, rest in unsampled_of(trace).items() if not rest]
    write_manifest(out, h)
    log.info("bank: %d of %d patches (%.4f)", len(trace), len(patches), len(trace) / len(patches))
    return BuildResult(len(trace), len(patches), h, flagged)


def _load_build(config: RunConfig, manifest: DatasetManifest):
    build = config.out_path / "build"
    if not (build / "bank_index.json").exists():
        raise FileNotFoundError(f"no memory bank under {build}; run build first")
    trace, ids, doc = load_trace(build)
    expected = config.build_hash(dataset_digest(manifest))
    if doc.get("config_hash") != expected:
        raise ArtifactMismatchError(f"bank was built with config {doc.get('config_hash')}, current config is {expected}")
    return trace, ids, expected


# --------------------------------------------------------------------------- threshold


def cmd_threshold(config: RunConfig) -> ThresholdModel:
    manifest = open_dataset(config)
    trace, ids, bh = _load_build(config, manifest)
    train = {e.image_id: e for e in manifest.split("train_normal")}
    patches = PatchSet.from_grids([_grid(manifest, train[i], config) for i in ids])
    ts = training_scores(patches, trace, unsampled_of(trace), ids)
    for name, flag in zip(ids, ts.flagged):
        if flag:
            log.warning("training image %s contributed no unsampled patches", name)
    model = fit_threshold(ts, config.kappa, config.exclude_flagged)
    if config.evt_q is not None:
        model = dataclasses.replace(model, evt=fit_evt(ts, config.evt_q, config.exclude_flagged))
    th = config.threshold_hash(bh)
    out = config.out_path
    _dump_json(
        out / "threshold.json",
        {
            "schema_version": SCHEMA_VERSION,
            "config_hash": th,
            "build_hash": bh,
            "model": model.to_dict(),
            "training_scores": {i: float(s) for i, s in zip(ids, ts.scores)},
            "flagged": [i for i, f in zip(ids, ts.flagged) if f],
        },
    )
    _dump_csv(out / "train_scores.csv", ["image_id", "score", "argmax_patch", "flagged"], ((i, repr(float(s)), a, bool(f)) for i, s, a, f in zip(ids, ts.scores, ts.argmax_patch, ts.flagged)))
    plotting.score_histogram(ts.usable(config.exclude_flagged), {}, model.tau, model.s_max, out / "figures" / "train_scores.png")
    write_manifest(out, th)
    return model


def _load_threshold(config: RunConfig, build_hash: str) -> tuple[ThresholdModel, str]:
    path = config.out_path / "threshold.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run threshold first")
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactMismatchError(f"unsupported threshold schema {doc.get('schema_version')}")
    expected = config.threshold_hash(build_hash)
    if doc.get("config_hash") != expected:
        raise ArtifactMismatchError(f"threshold was fitted with config {doc.get('config_hash')}, current config is {expected}")
    return ThresholdModel.from_dict(doc["model"]), expected


# --------------------------------------------------------------------------- score


def score_image(grid, trace, model: ThresholdModel, map_scale: int = 8, min_area: int = 1) -> dict:
    """Score one aggregated grid: verdict, confidence and boxes in pixel coordinates."""
    sg = score_grid(grid, trace)
    s = image_score(sg)
    verdict = classify(s.value, model)
    boxes: list[BoundingBox] = []
    if verdict.abnormal:
        amap = upsample_map(sg, (sg.height * map_scale, sg.width * map_scale))
        boxes = extract_boxes(amap, model.tau, min_area)
    return {
        "s_img": s.value,
        "argmax_patch": list(s.argmax_patch),
        "verdict": verdict.decision,
        "low_confidence": verdict.low_confidence,
        "boxes": [b.as_dict() for b in boxes],
    }


def _splits(split: str) -> tuple[str, ...]:
    if split == "test":
        return TEST_SPLITS
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return (split,)


def cmd_score(config: RunConfig, split: str = "test") -> list[dict]:
    manifest = open_dataset(config)
    trace, _, bh = _load_build(config, manifest)
    model, th = _load_threshold(config, bh)
    entries = [e for s in _splits(split) for e in manifest.split(s)]

    def work(entry):
        rec = score_image(_grid(manifest, entry, config), trace, model, config.map_scale, config.box_min_area)
        return {"image_id": entry.image_id, "split": entry.split, "label": entry.label, "config_hash": th, **rec}

    with ThreadPoolExecutor(max_workers=config.score_workers) as pool:
        rows = list(pool.map(work, entries))

    out = config.out_path
    _dump_jsonl(out / f"scores_{split}.jsonl", rows)
    _dump_csv(
        out / f"scores_{split}.csv",
        ["image_id", "split", "label", "s_img", "verdict", "low_confidence", "n_boxes"],
        ((r["image_id"], r["split"], r["label"], repr(r["s_img"]), r["verdict"], r["low_confidence"], len(r["boxes"])) for r in rows),
    )
    doc = json.loads((out / "threshold.json").read_text())
    by_label: dict[str, list[float]] = {"normal": [], "abnormal": []}
    for r in rows:
        by_label["abnormal" if r["label"] == "anomalous" else "normal"].append(r["s_img"])
    train_scores = [v for k, v in doc["training_scores"].items() if k not in set(doc["flagged"])]
    plotting.score_histogram(train_scores, by_label, model.tau, model.s_max, out / "figures" / f"scores_{split}.png")
    write_manifest(out, th)
    return rows


# --------------------------------------------------------------------------- prompt / send


def _box(d: dict) -> BoundingBox:
    return BoundingBox(d["x0"], d["y0"], d["x1"], d["y1"], d["peak"])


def bundles_from_scores(rows: Sequence[dict], model: ThresholdModel, style: str = "full", templates: Mapping[str, str] | None = None) -> list[PromptBundle]:
    out = []
    for r in rows:
        verdict = classify(r["s_img"], model)
        if verdict.decision != r["verdict"]:
            raise ArtifactMismatchError(f"score record for {r['image_id']} disagrees with the threshold model")
        out.append(
            build_prompt(
                verdict,
                [_box(b) for b in r["boxes"]],
                template=(templates or {}).get(r["image_id"]),
                query_image_id=r["image_id"],
                style=style,
            )
        )
    return out


def _templates(config: RunConfig, manifest: DatasetManifest, query_ids: Sequence[str]) -> dict[str, str]:
    train = manifest.split("train_normal")
    bank = np.stack([pooled_descriptor(manifest.load_grid(e)) for e in train])
    bank_norm = np.linalg.norm(bank, axis=1)
    by_id = {e.image_id: e for e in manifest.entries}
    out = {}
    for qid in query_ids:
        q = pooled_descriptor(manifest.load_grid(by_id[qid]))
        norms = bank_norm * np.linalg.norm(q)
        sims = np.divide(bank @ q, norms, out=np.zeros(len(bank)), where=norms > 0)
        out[qid] = train[int(np.argmax(sims))].image_id
    return out


def _bundle_record(b: PromptBundle) -> dict:
    return {
        "image_id": b.query_image_id,
        "prior_kind": b.prior_kind,
        "user_text": b.user_text,
        "boxes": None if b.visual_boxes is None else [x.as_dict() for x in b.visual_boxes],
        "template_image_id": b.template_image_id,
        "low_confidence": b.low_confidence,
        "warnings": list(b.warnings),
    }


def cmd_prompt(config: RunConfig, split: str = "test") -> list[PromptBundle]:
    manifest = open_dataset(config)
    _, _, bh = _load_build(config, manifest)
    model, th = _load_threshold(config, bh)
    path = config.out_path / f"scores_{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run score first")
    rows = _read_jsonl(path)
    stale = {r.get("config_hash") for r in rows} - {th}
    if stale:
        raise ArtifactMismatchError(f"scores were produced under config {sorted(stale)}, current is {th}")
    templates = _templates(config, manifest, [r["image_id"] for r in rows]) if config.use_template else None
    bundles = bundles_from_scores(rows, model, config.prompt_style, templates)
    _dump_jsonl(config.out_path / "prompts.jsonl", (_bundle_record(b) for b in bundles))
    write_manifest(config.out_path, th)
    return bundles


def make_client(config: RunConfig):
    if config.stub:
        return StubClient(config.stub)
    settings = config.endpoint
    if not settings.url:
        raise EndpointUnreachable("no chat endpoint configured and no stub selected")
    return OpenAIChatClient(settings)


def send_all(bundles: Sequence[PromptBundle], client, max_in_flight: int = 4) -> tuple[list, list[dict]]:
    """Send every bundle with a bounded worker pool; results keep input order."""

    def one(b):
        rec: list = []
        ans = send_to_model(b, client, request_log=rec)
        return ans, rec[0]

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        results = list(pool.map(one, bundles))
    return [a for a, _ in results], [r for _, r in results]


def cmd_send(config: RunConfig, bundles: Sequence[PromptBundle], client=None) -> list:
    """Send prompts to the endpoint (or stub); writes the request log and the answers."""
    out = config.out_path
    c = client if client is not None else make_client(config)
    answers, requests = send_all(bundles, c, config.max_in_flight)
    _dump_jsonl(out / "requests.jsonl", (redact(r, config.api_key) for r in requests))
    _dump_jsonl(
        out / "answers.jsonl",
        (
            {"image_id": b.query_image_id, "raw_text": a.raw_text, "parsed": a.parsed, "low_confidence": b.low_confidence}
            for a, b in zip(answers, bundles)
        ),
    )
    return answers


def redact(record: dict, secret: str | None) -> dict:
    if not secret:
        return record
    return json.loads(json.dumps(record).replace(secret, "***"))


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    rows: list[dict] = field(default_factory=list)
    n_unparseable: int = 0
    unparseable_policy: str = "normal"

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n if self.n else 0.0

    @property
    def precision_undefined(self) -> bool:
        return self.tp + self.fp == 0

    @property
    def recall_undefined(self) -> bool:
        return self.tp + self.fn == 0

    @property
    def precision(self) -> float:
        return 1.0 if self.precision_undefined else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        return 1.0 if self.recall_undefined else self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "EvalReport":
        if min(tp, fp, tn, fn) < 0:
            raise ValueError("confusion counts must be non-negative")
        return cls(int(tp), int(fp), int(tn), int(fn))

    def summary(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "n": self.n,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "precision_undefined": self.precision_undefined,
            "recall_undefined": self.recall_undefined,
            "n_unparseable": self.n_unparseable,
            "unparseable_policy": self.unparseable_policy,
        }


_POSITIVE_PREDICTIONS = {DEFECT_YES: True, DEFECT_NO: False, "abnormal": True, "normal": False}


def cmd_eval(predictions: Mapping[str, str], labels: Mapping[str, str], unparseable_policy: str = "normal") -> EvalReport:
    """Confusion counts from predictions (parsed answers or expert verdicts) and labels.

    Unparseable answers count as ``unparseable_policy`` and are flagged per row.
    """
    if unparseable_policy not in UNPARSEABLE_POLICIES:
        raise ValueError(f"unparseable_policy must be one of {UNPARSEABLE_POLICIES}")
    missing = sorted(set(predictions) - set(labels))
    if missing:
        raise ValueError(f"predictions without labels: {missing[:5]}")
    tp = fp = tn = fn = n_unp = 0
    rows = []
    for image_id in sorted(predictions):
        pred = predictions[image_id]
        flagged = pred == UNPARSEABLE
        if flagged:
            n_unp += 1
            positive = unparseable_policy == "abnormal"
        elif pred in _POSITIVE_PREDICTIONS:
            positive = _POSITIVE_PREDICTIONS[pred]
        else:
            raise ValueError(f"unknown prediction {pred!r} for {image_id}")
        label = labels[image_id]
        if label not in ("normal", "anomalous"):
            raise ValueError(f"unknown label {label!r} for {image_id}")
        truth = label == "anomalous"
        tp += positive and truth
        fp += positive and not truth
        tn += (not positive) and (not truth)
        fn += (not positive) and truth
        rows.append({"image_id": image_id, "label": label, "prediction": pred, "positive": positive, "unparseable": flagged})
    return EvalReport(tp, fp, tn, fn, rows, n_unp, unparseable_policy)


def write_eval(report: EvalReport, out: Path, stem: str = "eval") -> None:
    _dump_json(out / f"{stem}.json", {"schema_version": SCHEMA_VERSION, **report.summary()})
    _dump_csv(out / f"{stem}.csv", ["image_id", "label", "prediction", "positive", "unparseable"], ([r[k] for k in ("image_id", "label", "prediction", "positive", "unparseable")] for r in report.rows))


def load_predictions(path) -> dict[str, str]:
    """Predictions from answers.jsonl (``parsed``) or scores_*.jsonl (``verdict``)."""
    preds = {}
    for r in _read_jsonl(Path(path)):
        preds[r["image_id"]] = r["parsed"] if "parsed" in r else r["verdict"]
    return preds


def load_labels(path) -> dict[str, str]:
    path = Path(path)
    if path.suffix == ".jsonl":
        return {r["image_id"]: r["label"] for r in _read_jsonl(path)}
    manifest = DatasetManifest.load(path / "manifest.json" if path.is_dir() else path)
    return {e.image_id: e.label for e in manifest.entries}


# --------------------------------------------------------------------------- run


@dataclass
class RunResult:
    expert: EvalReport
    final: EvalReport
    out: Path


def cmd_run(config: RunConfig, client=None) -> RunResult:
    """build, threshold, score, prompt, send and eval; failures carry the stage name."""
    out = config.out_path

    def stage(name, fn, *a):
        try:
            return fn(*a)
        except Exception as exc:  # re-raised with the stage tag
            raise StageError(name, exc) from exc

    stage("build", cmd_build, config)
    model = stage("threshold", cmd_threshold, config)
    rows = stage("score", cmd_score, config, "test")
    bundles = stage("prompt", cmd_prompt, config, "test")

    answers = stage("send", cmd_send, config, bundles, client)

    def evaluate():
        labels = {r["image_id"]: r["label"] for r in rows}
        expert = cmd_eval({r["image_id"]: r["verdict"] for r in rows}, labels)
        final = cmd_eval({b.query_image_id: a.parsed for a, b in zip(answers, bundles)}, labels, config.unparseable_policy)
        write_eval(expert, out, "eval_expert")
        write_eval(final, out, "eval")
        return expert, final

    expert, final = stage("eval", evaluate)
    write_manifest(out, config.threshold_hash(config.build_hash(dataset_digest(open_dataset(config)))))
    log.info("tau=%.4f expert acc=%.4f final acc=%.4f", model.tau, expert.accuracy, final.accuracy)
    return RunResult(expert, final, out)


# --------------------------------------------------------------------------- attention-scaling simulation


@dataclass
class CaasSimConfig:
    alpha: float = 0.6
    beta: float = -0.4
    layer_range: tuple[int, int] = (9, 15)
    renormalize: bool = False
    scale_text: bool = False
    seed: int = 0
    trials: int = 100
    prior: str = "misleading"
    n_layers: int = 28
    n_heads: int = 4
    d_model: int = 16
    alphas: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def cmd_caas_sim(sim: CaasSimConfig, out, gate: ThresholdModel | None = None, s_img: float | None = None) -> dict:
    """Sweep alpha, record layer dynamics and attention ratios; CSV, JSON and figures.

    With ``gate`` (a fitted threshold model) the scaled runs only intervene
    when ``s_img`` lies in its low-confidence band; the sweep itself always
    holds the gate open.
    """
    out = Path(out)
    if sim.prior not in caas.PRIOR_BIASES:
        raise ValueError(f"prior must be one of {caas.PRIOR_BIASES}")
    if gate is not None and s_img is None:
        raise ValueError("a gated simulation needs an image score")
    layout = caas.TokenLayout.default()
    base = caas.CaasConfig(alpha=sim.alpha, beta=sim.beta, layer_range=tuple(sim.layer_range), renormalize=sim.renormalize, scale_text=sim.scale_text)
    if gate is not None:
        base = dataclasses.replace(base, tau=gate.tau, s_max=gate.s_max)
    s_eval = 0.0 if gate is None else float(s_img)
    alphas = sorted(set(sim.alphas) | {0.0, sim.alpha})
    sweep = caas.sweep_alpha(alphas, sim.trials, layout, sim.n_layers, sim.n_heads, sim.d_model, base, sim.prior, seed0=sim.seed)

    stacks = [caas.build_stack(layout, sim.n_layers, sim.n_heads, sim.d_model, s, sim.prior) for s in sweep.seeds]
    plain = [caas.forward(st) for st in stacks]
    scaled = [caas.forward(st, base, s_eval) for st in stacks]
    ar = {
        "correct": [caas.attention_ratio(r, layout) for r in plain if r.correct],
        "incorrect": [caas.attention_ratio(r, layout) for r in plain if not r.correct],
    }
    flips = sum((not a.correct) and b.correct for a, b in zip(plain, scaled))
    reverse = sum(a.correct and not b.correct for a, b in zip(plain, scaled))

    _dump_csv(out / "caas_sweep.csv", ["alpha", "correct_rate", "n_correct", "trials"], ((repr(r.alpha), repr(r.flip_rate), r.n_correct, r.trials) for r in sweep.rows))
    per_layer = []
    for li in range(sim.n_layers):
        per_layer.append(
            (
                li + 1,
                repr(float(np.mean([r.p_correct[li] for r in plain]))),
                repr(float(np.mean([r.p_correct[li] for r in scaled]))),
                repr(float(np.mean([a[li] for a in ar["correct"]]))) if ar["correct"] else "",
                repr(float(np.mean([a[li] for a in ar["incorrect"]]))) if ar["incorrect"] else "",
            )
        )
    _dump_csv(out / "caas_layers.csv", ["layer", "p_correct_baseline", "p_correct_scaled", "ar_correct", "ar_incorrect"], per_layer)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "config": {**dataclasses.asdict(sim), "layer_range": list(sim.layer_range), "alphas": alphas},
        "baseline_correct_rate": sweep.baseline,
        "sweep": [dataclasses.asdict(r) for r in sweep.rows],
        "gate_open": base.is_open(s_eval),
        "flips_to_correct": flips,
        "flips_to_incorrect": reverse,
        "mean_ar_correct": float(np.mean(ar["correct"])) if ar["correct"] else None,
        "mean_ar_incorrect": float(np.mean(ar["incorrect"])) if ar["incorrect"] else None,
    }
    _dump_json(out / "caas_summary.json", summary)
    plotting.alpha_sweep([r.alpha for r in sweep.rows], [r.flip_rate for r in sweep.rows], out / "figures" / "caas_alpha_sweep.png", sim.alpha)
    plotting.layer_dynamics(
        {"no scaling": np.mean([r.p_correct for r in plain], axis=0), f"alpha={sim.alpha:g}": np.mean([r.p_correct for r in scaled], axis=0)},
        tuple(sim.layer_range),
        out / "figures" / "caas_layer_dynamics.png",
    )
    plotting.attention_ratio({k: np.array(v) for k, v in ar.items()}, out / "figures" / "caas_attention_ratio.png")
    write_manifest(out, _digest(summary["config"]))
    return summary
