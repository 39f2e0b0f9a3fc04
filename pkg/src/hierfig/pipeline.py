"""Stage implementations behind the command-line interface.

Every stage reads its inputs from the work directory, writes new files
(never touching its inputs) and records artifact digests in
``run_manifest.json``. The LVLM-backed stages keep one cache file per
figure and skip figures whose cache matches the current stage settings.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import time
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from . import panels as panel_stage
from . import regions as region_stage
from ._io import sha256_file, write_text_atomic
from .align.losses import ObjectiveConfig
from .align.optim import OptimConfig
from .align.train import TrainConfig, TrainState, embed_level, history_csv, run_schedule
from .config import ConfigError, config_hash
from .corpus import (CorpusManifest, FigureRecord, PanelRecord, RegionRecord,
                     read_manifest, validate_hierarchy, write_manifest)
from .features import FeatureError, SynthStore, build_tables
from .geometry import center_distance
from .imaging import crop_px, load_image
from .lvlm import HttpTransport, LvlmClient, MockStore
from .postprocess import CleanupConfig, CleanupStats, cleanup
from .retrieval import bidirectional, build_eval_split, format_table
from .synth import SynthSpec, generate, write_corpus

log = logging.getLogger(__name__)

RUN_MANIFEST_VERSION = 1

# stage -> files it needs (relative to the work dir)
OUTPUTS = {
    "parse-panels": ["panels.jsonl", "stats/parse-panels.json"],
    "associate-text": ["panels_text.jsonl", "stats/associate-text.json"],
    "mine-regions": ["regions_raw.jsonl", "stats/mine-regions.json"],
    "postprocess-boxes": ["corpus.jsonl", "cleanup_stats.json"],
    "build-corpus": ["corpus/manifest.jsonl", "corpus/split.json"],
    "pretrain": ["train/checkpoint.npz", "train/loss_history.csv"],
    "eval-retrieval": ["eval/retrieval.json", "eval/retrieval.txt"],
    "report": ["report.json", "report.txt"],
}
STAGES = list(OUTPUTS)


class DataError(Exception):
    pass


class MissingPrerequisiteError(DataError):
    def __init__(self, stage: str, path: Path, producer: str):
        super().__init__(f"{stage}: missing prerequisite {path} (run '{producer}' first)")
        self.path = path


class EventLog:
    """One JSON object per line: stage, event, figure_id, timing."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path

    def emit(self, stage: str, event: str, **fields) -> None:
        rec = {"time": round(time.time(), 3), "stage": stage, "event": event, **fields}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _safe_name(record_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", record_id)


class Run:
    def __init__(self, cfg: dict, force: bool = False, keep_raw: bool = False,
                 client: Optional[LvlmClient] = None):
        self.cfg = cfg
        self.work = Path(cfg["paths"]["work_dir"])
        self.work.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.keep_raw = keep_raw
        self.events = EventLog(self.work / "logs" / "events.jsonl")
        self._client = client

    # ------------------------------------------------------------ helpers

    def path(self, rel: str) -> Path:
        return self.work / rel

    def require(self, stage: str, producer: str) -> Path:
        p = self.path(OUTPUTS[producer][0])
        if not p.exists():
            raise MissingPrerequisiteError(stage, p, producer)
        return p

    @property
    def client(self) -> LvlmClient:
        if self._client is None:
            lv = self.cfg["lvlm"]
            if lv["mode"] == "mock":
                if not lv["mock_dir"]:
                    raise ConfigError("lvlm.mock_dir: required in mock mode")
                transport = MockStore(lv["mock_dir"], strict=lv["mock_strict"])
                backoff = 0.0
            else:
                transport = HttpTransport(lv["base_url"], model=lv["model"], timeout=lv["timeout_s"])
                backoff = lv["backoff_s"]
            self._client = LvlmClient(transport, lv["retry_limit"], lv["transport_retries"], backoff,
                                      lv["max_in_flight"], sampling_overrides=lv["sampling"])
        return self._client

    def figures(self) -> list[FigureRecord]:
        src = self.cfg["paths"]["figures"]
        if not src:
            raise ConfigError("paths.figures: required for the mining stages")
        p = Path(src)
        if not p.is_file():
            raise DataError(f"figures file not found: {p}")
        out, seen = [], set()
        for no, line in enumerate(p.read_text("utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = FigureRecord.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{p}:{no}: bad figure record: {exc}") from None
            if rec.figure_id in seen:
                raise DataError(f"{p}:{no}: duplicate figure_id {rec.figure_id!r}")
            seen.add(rec.figure_id)
            out.append(rec)
        return out

    def image_root(self) -> Path:
        root = self.cfg["paths"]["image_root"]
        return Path(root) if root else Path(self.cfg["paths"]["figures"]).parent

    def figure_image(self, fig: FigureRecord):
        try:
            img = load_image(fig.image_path, self.image_root())
        except OSError as exc:
            raise DataError(f"figure {fig.figure_id}: cannot read image: {exc}") from None
        if img.size != (fig.width_px, fig.height_px):
            raise DataError(f"figure {fig.figure_id}: image is {img.size}, record says "
                            f"{(fig.width_px, fig.height_px)}")
        return img

    def stage_key(self, *sections: str) -> str:
        blob = json.dumps({s: self.cfg[s] for s in sections}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def per_figure(self, stage: str, items: list, key: str, work: Callable[[object], dict],
                   ident: Callable[[object], str]) -> list[dict]:
        """Run ``work`` per item with a JSON cache; results in input order."""
        cache_dir = self.path(f"cache/{stage}")
        cache_dir.mkdir(parents=True, exist_ok=True)

        def one(item):
            fid = ident(item)
            cpath = cache_dir / f"{_safe_name(fid)}.json"
            if not self.force and cpath.exists():
                cached = json.loads(cpath.read_text("utf-8"))
                if cached.get("stage_key") == key:
                    self.events.emit(stage, "cached", figure_id=fid)
                    return cached["result"]
            t0 = time.perf_counter()
            result = work(item)
            write_text_atomic(cpath, _dump({"stage_key": key, "result": result}))
            self.events.emit(stage, "done", figure_id=fid,
                             elapsed_ms=round(1000 * (time.perf_counter() - t0), 1))
            return result

        workers = self.cfg["workers"]
        if workers <= 1:
            return [one(i) for i in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, items))

    def write_json(self, rel: str, obj) -> None:
        write_text_atomic(self.path(rel), _dump(obj))

    def write_raw(self, stage: str, fid: str, obj) -> None:
        if self.keep_raw:
            write_text_atomic(self.path(f"raw/{stage}/{_safe_name(fid)}.json"), _dump(obj))

    def record(self, stage: str, extra: Optional[dict] = None) -> None:
        """Add this stage's artifact digests to the run manifest."""
        mpath = self.path("run_manifest.json")
        doc = json.loads(mpath.read_text("utf-8")) if mpath.exists() else {}
        doc["format_version"] = RUN_MANIFEST_VERSION
        doc["config_hash"] = config_hash(self.cfg)
        doc["seeds"] = dict(self.cfg["seeds"])
        artifacts = {}
        for rel in OUTPUTS[stage] + list((extra or {}).get("artifacts", [])):
            p = self.path(rel)
            if p.exists():
                artifacts[rel] = sha256_file(p)
        doc.setdefault("stages", {})[stage] = {"artifacts": artifacts}
        write_text_atomic(mpath, _dump(doc))


# ---------------------------------------------------------------- stages

def _manifest_stats(m: CorpusManifest) -> dict:
    return dict(m.stats)


def parse_panels(run: Run) -> dict:
    cfg = run.cfg["panels"]
    figs = run.figures()
    key = run.stage_key("panels", "seeds")

    def work(fig: FigureRecord) -> dict:
        image = run.figure_image(fig)
        rng = np.random.default_rng([run.cfg["seeds"]["panels"], zlib.crc32(fig.figure_id.encode())])
        raw: list = []
        props = panel_stage.propose_panels(fig, image, run.client, cfg["n_views"], rng,
                                           tuple(cfg["scale_range"]), raw_log=raw)
        run.write_raw("parse-panels", fig.figure_id, raw)
        panels = panel_stage.consolidate(props, fig.figure_id, fig.width_px, fig.height_px,
                                         cfg["merge_iou"], cfg["nms_iou"])
        panels = panel_stage.filter_photographic(panels)
        return {"proposals": len(props), "panels": [p.to_json() for p in panels]}

    results = run.per_figure("parse-panels", figs, key, work, lambda f: f.figure_id)
    manifest = CorpusManifest(figs, [PanelRecord.from_json(d) for r in results for d in r["panels"]])
    write_manifest(manifest, run.path("panels.jsonl"))
    stats = {
        "figures": len(figs),
        "figures_without_panels": sum(1 for r in results if not r["panels"]),
        "proposals": sum(r["proposals"] for r in results),
        "panels": len(manifest.panels),
        "non_photographic": sum(1 for p in manifest.panels if not p.is_photographic),
        "duplicate_identifier": sum(1 for p in manifest.panels if panel_stage.DUPLICATE_FLAG in p.flags),
    }
    run.write_json("stats/parse-panels.json", stats)
    return stats


def associate_text(run: Run) -> dict:
    src = read_manifest(run.require("associate-text", "parse-panels"))
    key = run.stage_key("panels")
    describe = run.cfg["panels"]["describe"]

    def work(fig: FigureRecord) -> dict:
        panels = src.panels_of(fig.figure_id)
        if not panels:
            return {"panels": [], "orphans": 0, "rerouted": 0, "describe_failures": 0}
        image = run.figure_image(fig)
        res = panel_stage.associate_text(fig, panels, image, run.client, describe=describe)
        run.write_raw("associate-text", fig.figure_id, {"orphans": res.orphans, "rerouted": res.rerouted})
        return {"panels": [p.to_json() for p in res.panels], "orphans": len(res.orphans),
                "rerouted": len(res.rerouted), "describe_failures": res.describe_failures}

    results = run.per_figure("associate-text", src.figures, key, work, lambda f: f.figure_id)
    out = CorpusManifest(src.figures, [PanelRecord.from_json(d) for r in results for d in r["panels"]])
    write_manifest(out, run.path("panels_text.jsonl"))
    stats = {k: sum(r[k] for r in results) for k in ("orphans", "rerouted", "describe_failures")}
    stats["panels_with_text"] = sum(1 for p in out.panels if p.caption)
    run.write_json("stats/associate-text.json", stats)
    return stats


def check_gating(markers, caption_boxes, audit, tau: float) -> None:
    """Post-hoc scan: kept caption boxes lie within tau of some glyph centre, discarded ones do not."""
    for i, c in enumerate(caption_boxes):
        d = min((center_distance(c.bbox, m.bbox) for m in markers), default=float("inf"))
        kept = i in audit.kept_captions
        if kept != (d <= tau):
            raise DataError(f"gating violated for caption box {i}: distance {d:.4f}, tau {tau}, kept={kept}")


def mine_regions(run: Run) -> dict:
    src = read_manifest(run.require("mine-regions", "associate-text"))
    rc = run.cfg["regions"]
    key = run.stage_key("regions")

    def work(fig: FigureRecord) -> dict:
        panels = src.panels_of(fig.figure_id)
        counts: Counter = Counter()
        regions: list[RegionRecord] = []
        raw = []
        if not any(p.is_photographic for p in panels):
            return {"regions": [], "counts": {}}
        image = run.figure_image(fig)
        for p in panels:
            if not p.is_photographic:
                counts["non_photographic_panels"] += 1
                continue
            pimg = crop_px(image, p.bbox)
            markers = region_stage.detect_markers(p, pimg, run.client, fig.article_title)
            if p.fragments:
                cboxes = region_stage.propose_caption_boxes(p, pimg, run.client)
            else:
                cboxes = []
                counts["panels_without_caption"] += 1
            audit = region_stage.FusionAudit()
            fused = region_stage.fuse(markers, cboxes, rc["tau"], p, rc["inflate_fraction"],
                                      rc["nms_iou"], audit)
            check_gating(markers, cboxes, audit, rc["tau"])
            res = region_stage.attach_texts(fused, p, pimg, run.client)
            counts["markers"] += len(markers)
            counts["caption_boxes"] += len(cboxes)
            counts["caption_boxes_discarded"] += len(audit.discarded_captions)
            counts["inflated_markers"] += len(audit.inflated_markers)
            counts["fused"] += len(fused)
            counts["dropped_no_text"] += res.dropped
            regions.extend(res.regions)
            raw.append({"panel_id": p.panel_id,
                        "markers": [[m.marker_kind, list(m.bbox.as_tuple())] for m in markers],
                        "caption_boxes": [[c.fragment_index, list(c.bbox.as_tuple())] for c in cboxes],
                        "kept": audit.kept_captions, "discarded": audit.discarded_captions})
        run.write_raw("mine-regions", fig.figure_id, raw)
        return {"regions": [r.to_json() for r in regions], "counts": dict(counts)}

    results = run.per_figure("mine-regions", src.figures, key, work, lambda f: f.figure_id)
    out = CorpusManifest(src.figures, src.panels,
                         [RegionRecord.from_json(d) for r in results for d in r["regions"]])
    write_manifest(out, run.path("regions_raw.jsonl"))
    total: Counter = Counter()
    for r in results:
        total.update(r["counts"])
    stats = {k: total[k] for k in sorted(total)}
    stats["regions"] = len(out.regions)
    run.write_json("stats/mine-regions.json", stats)
    return stats


def postprocess_boxes(run: Run) -> dict:
    src = read_manifest(run.require("postprocess-boxes", "mine-regions"))
    c = run.cfg["cleanup"]
    ccfg = CleanupConfig(c["min_area_fraction"], tuple(c["aspect_ratio_range"]), c["nms_iou"],
                         c["text_sim_threshold"])
    total = CleanupStats()
    kept: list[RegionRecord] = []
    by_panel: dict[str, list[RegionRecord]] = {}
    for r in src.regions:
        by_panel.setdefault(r.parent_panel, []).append(r)
    for p in src.panels:
        regs = by_panel.get(p.panel_id, [])
        if not regs:
            continue
        cleaned, stats = cleanup(regs, p.bbox.width, p.bbox.height, ccfg)
        total.add(stats)
        kept.extend(cleaned)
    out = CorpusManifest(src.figures, src.panels, kept)
    write_manifest(out, run.path("corpus.jsonl"))
    doc = total.to_json()
    doc["merges"] = [list(m) for m in total.merges]
    run.write_json("cleanup_stats.json", doc)
    return total.to_json()


def build_corpus(run: Run, synthetic: Optional[str] = None) -> dict:
    corpus_dir = run.path("corpus")
    corpus_dir.mkdir(parents=True, exist_ok=True)
    if synthetic:
        p = Path(synthetic)
        if not p.is_file():
            raise DataError(f"synthetic spec not found: {p}")
        try:
            spec = SynthSpec.from_dict(yaml.safe_load(p.read_text("utf-8")) or {})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{p}: {exc}") from None
        synth = generate(spec)
        write_corpus(synth, corpus_dir)
        manifest = synth.manifest
        run.write_json("corpus/synth_spec.json", spec.to_dict())
    else:
        manifest = read_manifest(run.require("build-corpus", "postprocess-boxes"))
        violations = validate_hierarchy(manifest)
        if violations:
            raise DataError(f"corpus has {len(violations)} hierarchy violations, first: {violations[0]}")
        write_manifest(manifest, corpus_dir / "manifest.jsonl")
        stale = corpus_dir / "features.npz"
        if stale.exists():
            stale.unlink()
    train, evals = build_eval_split(manifest, run.cfg["corpus"]["holdout_fraction"], run.cfg["seeds"]["split"])
    split = {"train": [f.figure_id for f in train.figures], "eval": [f.figure_id for f in evals.figures],
             "stats": {"all": manifest.stats, "train": train.stats, "eval": evals.stats}}
    run.write_json("corpus/split.json", split)
    extra = {"artifacts": ["corpus/features.npz", "corpus/synth_spec.json"]}
    run.record("build-corpus", extra)
    return split["stats"]


def _load_corpus(run: Run, stage: str):
    mpath = run.require(stage, "build-corpus")
    manifest = read_manifest(mpath)
    split = json.loads(run.path("corpus/split.json").read_text("utf-8"))
    fpath = run.path("corpus/features.npz")
    store = SynthStore.load(fpath) if fpath.exists() else None
    root = None if store is not None else run.image_root()
    return manifest, split, store, root


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    o = t["optim"]
    return TrainConfig(
        steps=t["steps"], cycle=str(t["cycle"]), batch_size=t["batch_size"], seed=cfg["seeds"]["train"],
        d=t["d"], hidden=t["hidden"],
        objective=ObjectiveConfig(t["intra_weight"], t["inter_weight"], t["fine_weight"],
                                  t["renormalize_aggregates"], t["roi_grid"]),
        optim=OptimConfig(dict(o["branch_lr"]), o["beta1"], o["beta2"], o["eps"], o["weight_decay"],
                          o["warmup_steps"], o["total_steps"] or t["steps"], o["lr_floor"]),
    )


def pretrain(run: Run) -> dict:
    manifest, split, store, root = _load_corpus(run, "pretrain")
    try:
        tables = build_tables(manifest.subset(split["train"]), image_root=root, store=store)
    except FeatureError as exc:
        raise DataError(str(exc)) from None
    tcfg = train_config(run.cfg)
    state, history = run_schedule(tables, tcfg)
    run.path("train").mkdir(parents=True, exist_ok=True)
    state.save(run.path("train/checkpoint.npz"))
    write_text_atomic(run.path("train/loss_history.csv"), history_csv(history))
    return {"steps": len(history), "final_total": history[-1].total if history else None}


def eval_retrieval(run: Run) -> dict:
    ckpt = run.path("train/checkpoint.npz")
    if not ckpt.exists():
        raise MissingPrerequisiteError("eval-retrieval", ckpt, "pretrain")
    manifest, split, store, root = _load_corpus(run, "eval-retrieval")
    state = TrainState.load(ckpt)
    tables = build_tables(manifest.subset(split["eval"]), image_root=root, store=store)
    results = []
    for level, name in (("P", "panel"), ("R", "region")):
        if tables.count(level) == 0:
            continue
        img, txt = embed_level(state.params, tables, level)
        results.extend(bidirectional(img, txt, run.cfg["eval"]["ks"], level=name))
    run.write_json("eval/retrieval.json", [r.to_json() for r in results])
    write_text_atomic(run.path("eval/retrieval.txt"), format_table(results))
    return {f"{r.level}/{r.direction}": r.to_json()["r_at"] for r in results}


def report(run: Run) -> dict:
    doc: dict = {}
    cs = run.path("cleanup_stats.json")
    if cs.exists():
        c = json.loads(cs.read_text("utf-8"))
        doc["cleanup"] = {k: c[k] for k in ("input", "removed", "output")}
    for stage in ("parse-panels", "associate-text", "mine-regions"):
        p = run.path(f"stats/{stage}.json")
        if p.exists():
            doc[stage] = json.loads(p.read_text("utf-8"))
    split = run.path("corpus/split.json")
    if split.exists():
        doc["corpus"] = json.loads(split.read_text("utf-8"))["stats"]
    hist = run.path("train/loss_history.csv")
    if hist.exists():
        rows = list(csv.DictReader(hist.read_text("utf-8").splitlines()))
        final = {}
        for r in rows:
            for k in ("intra_M", "intra_P", "intra_R", "inter_MP", "inter_PR", "fine"):
                if r[k]:
                    final[k] = float(r[k])
        doc["training"] = {"steps": len(rows), "final_losses": final}
    ret = run.path("eval/retrieval.json")
    if ret.exists():
        doc["retrieval"] = json.loads(ret.read_text("utf-8"))
    if not doc:
        raise MissingPrerequisiteError("report", run.path("eval/retrieval.json"), "eval-retrieval")
    run.write_json("report.json", doc)
    write_text_atomic(run.path("report.txt"), render_report(doc))
    return doc


def render_report(doc: dict) -> str:
    lines = []
    if "corpus" in doc:
        s = doc["corpus"]["all"]
        lines.append(f"corpus: {s['M']} figures, {s['P']} panels, {s['R']} regions")
    if "cleanup" in doc:
        c = doc["cleanup"]
        removed = ", ".join(f"{k} {v}" for k, v in c["removed"].items())
        lines.append(f"cleanup: {c['input']} -> {c['output']} regions (removed: {removed})")
    if "training" in doc:
        t = doc["training"]
        losses = "  ".join(f"{k}={v:.4f}" for k, v in t["final_losses"].items())
        lines.append(f"training: {t['steps']} steps; final losses {losses}")
    if "retrieval" in doc:
        lines.append("")
        ks = sorted({int(k) for r in doc["retrieval"] for k in r["r_at"]})
        head = ["level", "dir", "N"] + [f"R@{k}" for k in ks]
        rows = [[r["level"], r["direction"], str(r["N"])] + [f"{r['r_at'][str(k)]:.2f}" for k in ks]
                for r in doc["retrieval"]]
        widths = [max(len(x) for x in col) for col in zip(head, *rows)]
        for cells in [head] + rows:
            lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


STAGE_FUNCS = {
    "parse-panels": parse_panels,
    "associate-text": associate_text,
    "mine-regions": mine_regions,
    "postprocess-boxes": postprocess_boxes,
    "build-corpus": build_corpus,
    "pretrain": pretrain,
    "eval-retrieval": eval_retrieval,
    "report": report,
}


def run_stage(run: Run, stage: str, **kw) -> dict:
    t0 = time.perf_counter()
    run.events.emit(stage, "start")
    result = STAGE_FUNCS[stage](run, **kw)
    if stage != "build-corpus":
        run.record(stage)
    run.events.emit(stage, "finish", elapsed_ms=round(1000 * (time.perf_counter() - t0), 1))
    return result
