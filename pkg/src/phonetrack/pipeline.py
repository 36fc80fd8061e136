"""Stage functions over a shared run directory, plus the run manifest.

Each stage reads what earlier stages left under ``out`` and records the
files it wrote (with SHA-256) in ``out/run_manifest.json``. Stages are
deterministic given the config, so result CSVs are byte-stable.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import RunConfig
from .features import Scheme, encode, load_alignment, load_features, load_inventory, save_features
from .matchmismatch import (
    AccuracyRow,
    build_recording_examples,
    evaluate_accuracy,
    finetune,
    train_subject_independent,
    write_accuracy_csv,
    write_example_manifest,
)
from .nn.model import ModelConfig, init_params
from .nn.train import load_checkpoint, save_checkpoint, write_history_csv
from .seeding import derive_seed
from .signals import (
    load_timeseries,
    preprocess_recording,
    read_binary,
    save_timeseries,
    write_binary,
)
from .stats import compare_schemes
from .synth import SynthConfig, generate_corpus, verify_manifest
from .trf import (
    TrfModel,
    channel_correlation_map,
    evaluate,
    extract_trf,
    ridge_fit,
    select_lambda,
    split_design,
    trf_window_average,
    write_correlation_csv,
    write_topography_csv,
    write_trf_csv,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"


class StageError(RuntimeError):
    """A stage could not run, typically because an earlier stage's output is missing."""


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# -- run manifest -----------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    seed: int
    tool_version: str = __version__
    inputs: list | None = None
    stages: dict | None = None

    @classmethod
    def load_or_new(cls, out: Path, cfg: RunConfig) -> "RunManifest":
        path = out / MANIFEST_NAME
        if path.exists():
            raw = json.loads(path.read_text())
            if raw.get("config_hash") == cfg.hash():
                return cls(raw["config_hash"], raw["seed"], raw.get("tool_version", __version__),
                           raw.get("inputs") or [], raw.get("stages") or {})
            logger.warning("config changed since the last run in %s; starting a fresh manifest", out)
        return cls(cfg.hash(), cfg.seed, __version__, [], {})

    def record(self, out: Path, stage: str, paths: list[Path], started: str) -> None:
        entries = []
        for p in sorted(set(paths)):
            entries.append({"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p),
                            "bytes": p.stat().st_size})
        self.stages[stage] = {"started": started, "finished": _now(), "outputs": entries}

    def save(self, out: Path) -> Path:
        path = out / MANIFEST_NAME
        doc = {"tool": "phonetrack", "tool_version": self.tool_version, "config_hash": self.config_hash,
               "seed": self.seed, "inputs": self.inputs, "stages": self.stages}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def verify_run_manifest(out: str | Path) -> list[str]:
    """Re-checksum every recorded output and input; returns problems (empty when valid)."""
    out = Path(out)
    doc = json.loads((out / MANIFEST_NAME).read_text())
    problems = []
    for stage, entry in doc["stages"].items():
        for f in entry["outputs"]:
            p = out / f["path"]
            if not p.exists():
                problems.append(f"{stage}: missing {f['path']}")
            elif sha256_file(p) != f["sha256"]:
                problems.append(f"{stage}: checksum mismatch {f['path']}")
    for f in doc.get("inputs") or []:
        p = Path(f["path"])
        if not p.exists() or sha256_file(p) != f["sha256"]:
            problems.append(f"input changed or missing: {f['path']}")
    return problems


# -- context shared by the stages ---------------------------------------------------

@dataclass
class Run:
    cfg: RunConfig
    out: Path

    @property
    def corpus_dir(self) -> Path:
        m = self.cfg.dataset_manifest()
        return m.parent if m else self.out / "corpus"

    @property
    def corpus_manifest(self) -> Path:
        return self.cfg.dataset_manifest() or self.out / "corpus" / "manifest.json"

    def corpus(self) -> dict:
        if not self.corpus_manifest.exists():
            raise StageError(f"no corpus manifest at {self.corpus_manifest}; run `synth` first")
        return json.loads(self.corpus_manifest.read_text())

    def subjects(self) -> list[str]:
        return [s["id"] for s in self.corpus()["subjects"]]

    def preprocessed(self, sub: str) -> Path:
        return self.out / "preprocessed" / sub / "eeg.f32"

    def features(self, sub: str, scheme: str) -> Path:
        return self.out / "features" / sub / f"{scheme}.f32"

    def trf_model(self, scheme: str, sub: str) -> Path:
        return self.out / "trf" / "models" / scheme / f"{sub}.f32"

    @property
    def encode_schemes(self) -> list[str]:
        s = self.cfg.schemes
        mm = self.cfg.values["mm"]
        if mm["enabled"] and mm["scheme"] not in s:
            s.append(mm["scheme"])
        return s

    def need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise StageError(f"missing {path}; run `{stage}` first")
        return path


# -- stages ------------------------------------------------------------------------------

def stage_synth(run: Run) -> list[Path]:
    if "synth" not in run.cfg.values:
        raise StageError("config has no synth section; point dataset.manifest at an existing corpus instead")
    s = run.cfg.values["synth"]
    scfg = SynthConfig(seed=derive_seed(run.cfg.seed, "synth"), duration_s=s["duration_s"],
                       fs=run.cfg.values["preprocess"]["target_fs"], window_ms=run.cfg.values["trf"]["window_ms"],
                       scheme=Scheme(s["scheme"]), mixing_jitter=s["mixing_jitter"], noise=s["noise"],
                       snr_db=s["snr_db"])
    root = run.out / "corpus"
    manifest = generate_corpus(s["n_subjects"], scfg, root)
    return [root / f["path"] for f in manifest["files"]] + [root / "manifest.json"]


def stage_preprocess(run: Run) -> list[Path]:
    corpus = run.corpus()
    problems = verify_manifest(run.corpus_dir, corpus)
    if problems:
        raise StageError("corpus failed checksum verification: " + "; ".join(problems))
    p = run.cfg.values["preprocess"]
    written = []
    for s in corpus["subjects"]:
        raw = load_timeseries(run.corpus_dir / s["eeg"])
        clean = preprocess_recording(raw, highpass_hz=p["highpass_hz"], filter_order=p["filter_order"],
                                     intermediate_fs=p["intermediate_fs"], target_fs=p["target_fs"])
        path = save_timeseries(run.preprocessed(s["id"]), clean, subject=s["id"])
        written += [path, path.with_suffix(".f32.json")]
    return written


def stage_encode(run: Run) -> list[Path]:
    inv = load_inventory()
    written = []
    for s in run.corpus()["subjects"]:
        eeg_path = run.need(run.preprocessed(s["id"]), "preprocess")
        _, meta = read_binary(eeg_path)
        track = load_alignment(run.corpus_dir / s["alignment"])
        for scheme in run.encode_schemes:
            fm = encode(track, inv, scheme, meta["fs"], meta["n_samples"])
            if fm.n_collisions or fm.n_clipped:
                logger.info("%s %s: %d onset collisions, %d clipped", s["id"], scheme, fm.n_collisions,
                            fm.n_clipped)
            path = save_features(run.features(s["id"], scheme), fm)
            written += [path, path.with_suffix(".f32.json")]
    return written


def _trf_partitions(run: Run, sub: str, scheme: str):
    eeg = load_timeseries(run.need(run.preprocessed(sub), "preprocess"))
    fm = load_features(run.need(run.features(sub, scheme), "encode"))
    return split_design(fm, eeg, run.cfg.values["trf"]["window_ms"])


def _save_trf(path: Path, model: TrfModel, scores: dict[float, float]) -> list[Path]:
    write_binary(path, model.weights, model.fs, model.channel_names, lam=model.lam,
                 lag_times_ms=list(model.lag_times_ms), dim_names=list(model.dim_names),
                 validation_scores=[[k, v] for k, v in sorted(scores.items())])
    return [path, path.with_suffix(".f32.json")]


def _load_trf(path: Path) -> TrfModel:
    W, meta = read_binary(path)
    return TrfModel(W.astype(np.float64), meta["lam"], tuple(meta["lag_times_ms"]), tuple(meta["dim_names"]),
                    tuple(meta["channel_names"]), meta["fs"])


def stage_trf_fit(run: Run) -> list[Path]:
    t = run.cfg.values["trf"]
    written = []
    for scheme in run.cfg.schemes:
        for sub in run.subjects():
            parts = _trf_partitions(run, sub, scheme)
            lam, scores = select_lambda(parts["train"], parts["validation"], t["lambda_grid"],
                                        channels=t["channels"])
            model = ridge_fit(*parts["train"], lam)
            written += _save_trf(run.trf_model(scheme, sub), model, scores)
    return written


def stage_trf_eval(run: Run) -> list[Path]:
    channels = run.cfg.values["trf"]["channels"]
    reports = []
    for scheme in run.cfg.schemes:
        for sub in run.subjects():
            model = _load_trf(run.need(run.trf_model(scheme, sub), "trf fit"))
            S, R = _trf_partitions(run, sub, scheme)["test"]
            reports.append(evaluate(model, S, R, channels=channels, subject=sub, scheme=scheme))
    trf_dir = run.out / "trf"
    written = [write_correlation_csv(reports, trf_dir / "correlations.csv")]
    summary = trf_dir / "subject_means.csv"
    with summary.open("w") as fh:
        fh.write("subject,scheme,mean_rho,lambda,n_channels\n")
        for r in reports:
            fh.write(f"{r.subject},{r.scheme},{r.mean_rho!r},{r.lam!r},{len(r.subset)}\n")
    written.append(summary)
    for scheme in run.cfg.schemes:
        rs = [r for r in reports if r.scheme == scheme]
        if rs:
            written.append(write_topography_csv(channel_correlation_map(rs), rs[0].channel_names, None,
                                                trf_dir / "topography" / f"{scheme}_rho.csv"))
    return written


def stage_trf_export(run: Run) -> list[Path]:
    windows = run.cfg.values["trf"]["topo_windows_ms"]
    trf_dir = run.out / "trf"
    written = []
    for scheme in run.cfg.schemes:
        curves = []
        for sub in run.subjects():
            curve = extract_trf(_load_trf(run.need(run.trf_model(scheme, sub), "trf fit")))
            written.append(write_trf_csv(curve, trf_dir / "weights" / scheme / f"{sub}.csv"))
            curves.append(curve)
        if not curves:
            continue
        for lo, hi in windows:
            avg = np.mean([trf_window_average(c, (lo, hi)) for c in curves], axis=0)
            for d, dname in enumerate(curves[0].dim_names):
                name = f"{scheme}_{dname}_{lo:g}-{hi:g}ms.csv"
                written.append(write_topography_csv(avg[d], curves[0].channel_names, (lo, hi),
                                                    trf_dir / "topography" / name))
    return written


# -- match-mismatch ------------------------------------------------------------------------

def _mm_examples(run: Run) -> dict:
    scheme = run.cfg.values["mm"]["scheme"]
    seg = run.cfg.segmentation()
    out = {}
    for sub in run.subjects():
        eeg = load_timeseries(run.need(run.preprocessed(sub), "preprocess"))
        fm = load_features(run.need(run.features(sub, scheme), "encode"))
        out[sub] = build_recording_examples(eeg, fm, seg, recording_id=sub)
    return out


def _model_config(run: Run, examples: dict) -> ModelConfig:
    first = next(iter(examples.values()))["train"]
    eeg, speech, _, _ = first.batch(np.arange(min(1, len(first))))
    m = run.cfg.values["mm"]["model"]
    window, _, _ = run.cfg.segmentation().samples(run.cfg.values["preprocess"]["target_fs"])
    return ModelConfig(eeg_channels=eeg.shape[2], feature_dims=speech.shape[2], window_samples=window, **m)


def _mm_dir(run: Run) -> Path:
    return run.out / "mm"


def _require_mm(run: Run) -> None:
    if not run.cfg.values["mm"]["enabled"]:
        raise StageError("match-mismatch is disabled in this config (mm.enabled = false)")


def stage_mm_build(run: Run) -> list[Path]:
    _require_mm(run)
    examples = _mm_examples(run)
    fs = run.cfg.values["preprocess"]["target_fs"]
    path = _mm_dir(run) / "examples.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for sub, sets in examples.items():
            tmp = path.with_name(f".{sub}.jsonl")
            write_example_manifest(sets, fs, tmp)
            fh.write(tmp.read_text())
            tmp.unlink()
    return [path]


def stage_mm_train(run: Run) -> list[Path]:
    _require_mm(run)
    examples = _mm_examples(run)
    if not any(len(v["train"]) for v in examples.values()):
        raise StageError("no training examples; recordings are shorter than one decision window")
    mcfg = _model_config(run, examples)
    tcfg = run.cfg.train_config("train", derive_seed(run.cfg.seed, "mm-train", 0))
    init = init_params(mcfg, derive_seed(run.cfg.seed, "mm-init", 0))
    res = train_subject_independent(examples, mcfg, tcfg, init=init)
    d = _mm_dir(run)
    ck = save_checkpoint(d / "si.f32", res.params, best_epoch=res.best_epoch,
                         best_val_loss=res.best_val_loss, stopped_early=res.stopped_early)
    return [ck, ck.with_suffix(".f32.json"), write_history_csv(res.history, d / "history_si.csv")]


def stage_mm_finetune(run: Run) -> list[Path]:
    _require_mm(run)
    d = _mm_dir(run)
    si, _ = load_checkpoint(run.need(d / "si.f32", "mm train"))
    written = []
    for i, (sub, sets) in enumerate(_mm_examples(run).items()):
        if not (len(sets["train"]) and len(sets["validation"])):
            logger.warning("%s: not enough examples to fine-tune; keeping the SI model", sub)
            continue
        tcfg = run.cfg.train_config("finetune", derive_seed(run.cfg.seed, "mm-finetune", i))
        res = finetune(si, sets, tcfg)
        ck = save_checkpoint(d / "finetuned" / f"{sub}.f32", res.params, best_epoch=res.best_epoch,
                             best_val_loss=res.best_val_loss, stopped_early=res.stopped_early)
        written += [ck, ck.with_suffix(".f32.json"),
                    write_history_csv(res.history, d / "finetuned" / f"history_{sub}.csv")]
    return written


def stage_mm_eval(run: Run) -> list[Path]:
    _require_mm(run)
    d = _mm_dir(run)
    si, _ = load_checkpoint(run.need(d / "si.f32", "mm train"))
    mm = run.cfg.values["mm"]
    rows = []
    for sub, sets in _mm_examples(run).items():
        test = sets["test"]
        if not len(test):
            logger.warning("%s: no test examples", sub)
            continue
        rows.append(AccuracyRow(sub, mm["scheme"], "SI", mm["segmentation"]["window_s"],
                                evaluate_accuracy(si, test), len(test)))
        ft_path = d / "finetuned" / f"{sub}.f32"
        ft = load_checkpoint(ft_path)[0] if ft_path.exists() else si
        rows.append(AccuracyRow(sub, mm["scheme"], "finetuned", mm["segmentation"]["window_s"],
                                evaluate_accuracy(ft, test), len(test)))
    return [write_accuracy_csv(rows, d / "accuracy.csv")]


# -- statistics ------------------------------------------------------------------------------

def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def stage_stats(run: Run) -> list[Path]:
    written = []
    means = run.out / "trf" / "subject_means.csv"
    pairs = run.cfg.comparison_pairs
    if pairs:
        metrics: dict[str, dict[str, float]] = {}
        for row in _read_csv(run.need(means, "trf eval")):
            metrics.setdefault(row["scheme"], {})[row["subject"]] = float(row["mean_rho"])
        table = compare_schemes(metrics, pairs)
        written.append(table.write_csv(run.out / "stats" / "trf_comparison.csv"))
    acc = _mm_dir(run) / "accuracy.csv"
    if run.cfg.values["mm"]["enabled"] and acc.exists():
        metrics = {}
        for row in _read_csv(acc):
            metrics.setdefault(row["model_stage"], {})[row["subject"]] = float(row["accuracy"])
        if metrics:
            table = compare_schemes(metrics, [("finetuned", "SI")])
            written.append(table.write_csv(run.out / "stats" / "mm_comparison.csv"))
    return written


STAGES: dict[str, Callable[[Run], list[Path]]] = {
    "synth": stage_synth,
    "preprocess": stage_preprocess,
    "encode": stage_encode,
    "trf fit": stage_trf_fit,
    "trf eval": stage_trf_eval,
    "trf export": stage_trf_export,
    "mm build": stage_mm_build,
    "mm train": stage_mm_train,
    "mm finetune": stage_mm_finetune,
    "mm eval": stage_mm_eval,
    "stats compare": stage_stats,
}


def run_stage(cfg: RunConfig, out: str | Path, stage: str) -> list[Path]:
    """Run one stage and record its outputs in the run manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    manifest = RunManifest.load_or_new(out, cfg)
    started = _now()
    logger.info("stage %s", stage)
    written = STAGES[stage](run)
    if cfg.dataset_manifest():
        corpus = run.corpus()
        manifest.inputs = [{"path": str(run.corpus_dir / f["path"]), "sha256": f["sha256"]}
                           for f in corpus["files"]]
    manifest.record(out, stage, written, started)
    manifest.save(out)
    return written


def pipeline_stages(cfg: RunConfig) -> list[str]:
    names = ["preprocess", "encode", "trf fit", "trf eval", "trf export"]
    if "synth" in cfg.values:
        names.insert(0, "synth")
    if cfg.values["mm"]["enabled"]:
        names += ["mm build", "mm train", "mm finetune", "mm eval"]
    return names + ["stats compare"]


def run_pipeline(cfg: RunConfig, out: str | Path) -> dict[str, list[Path]]:
    """Every stage in order; returns the files written per stage."""
    return {stage: run_stage(cfg, out, stage) for stage in pipeline_stages(cfg)}


__all__ = ["RunManifest", "StageError", "STAGES", "run_stage", "run_pipeline", "pipeline_stages",
           "verify_run_manifest", "sha256_file"]
