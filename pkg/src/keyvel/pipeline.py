"""Pipeline stages behind the CLI: corpus render, separation, training runs,
and reporting, all resumable and deterministic."""

import hashlib
import json
import math
import os
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch

from .config import RunConfig, config_digest
from .dataset import assign_preset_subsets, generate_synthetic_performance
from .evaluation import (TrialResult, atomic_write_text, evaluate_trial,
                         make_report, read_results_csv, write_results_csv)
from .events import Performance
from .models import ModelConfig
from .seeding import stream_seed
from .separation import (NoteFeatures, build_template,
                         extract_note_spectrogram, init_activations, mfcc13,
                         nmf_update, stft)
from .smf import parse_smf
from .synth import (preset_by_id, read_wav, render_calibration_sequence,
                    render_performance, write_wav)
from .training import (StrategyKind, TrainPlan, checkpoint_hash, subsample,
                       train_trial)

SPLIT_CODES = {"train": 0, "validation": 1, "test": 2}


class DataError(RuntimeError):
    """Missing or corrupt input for a pipeline stage."""


class NoValidTrialsError(RuntimeError):
    """Every trial in the store is invalid; nothing to analyze."""


def configure_torch_determinism() -> None:
    """Single-threaded, deterministic-kernel torch execution."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _corpus(cfg: RunConfig) -> List[Performance]:
    """The input performances: parsed MIDI files, else synthetic walks."""
    if cfg.smf_paths:
        performances: List[Performance] = []
        for path in cfg.smf_paths:
            data = Path(path).read_bytes()
            performances.extend(parse_smf(data, source_id=Path(path).stem))
        return performances
    return [
        generate_synthetic_performance(
            stream_seed(cfg.seed, "performance", i), cfg.notes_per_performance)
        for i in range(cfg.n_performances)]


def _dataset_digest(cfg: RunConfig) -> str:
    return config_digest({
        "seed": cfg.seed,
        "n_performances": cfg.n_performances,
        "notes_per_performance": cfg.notes_per_performance,
        "smf_paths": list(cfg.smf_paths),
        "sample_rate": cfg.sample_rate,
    })


def cmd_dataset_build(cfg: RunConfig) -> Path:
    """Render the recording corpus; checksums make re-runs incremental.

    Layout: <output_dir>/dataset/<split>/preset_<k>/<performance>.wav plus
    a manifest with per-file SHA-256 sums. A re-run with an unchanged
    configuration re-renders only missing or corrupted files.
    """
    dataset_dir = Path(cfg.output_dir) / "dataset"
    dataset_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = dataset_dir / "manifest.json"

    performances = _corpus(cfg)
    by_id = {p.source_id: p for p in performances}
    if len(by_id) != len(performances):
        raise DataError("performance ids must be unique")
    assignments = assign_preset_subsets(performances, cfg.seed)

    digest = _dataset_digest(cfg)
    old_shas: Dict[str, str] = {}
    if manifest_path.exists():
        try:
            old = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            old = {}
        if old.get("config_digest") == digest:
            old_shas = {r["path"]: r["sha256"]
                        for r in old.get("recordings", [])}

    recordings = []
    for assignment in sorted(assignments,
                             key=lambda a: (SPLIT_CODES[a.split.value],
                                            a.preset_id)):
        preset = preset_by_id(assignment.preset_id)
        for pid in sorted(assignment.performance_ids):
            rel = (f"{assignment.split.value}/preset_{assignment.preset_id}"
                   f"/{pid}.wav")
            path = dataset_dir / rel
            current = _sha256_file(path) if path.exists() else None
            if current is None or old_shas.get(rel) != current:
                wave = render_performance(by_id[pid], preset, cfg.sample_rate)
                path.parent.mkdir(parents=True, exist_ok=True)
                write_wav(path, wave, cfg.sample_rate)
                current = _sha256_file(path)
            recordings.append({
                "split": assignment.split.value,
                "preset_id": assignment.preset_id,
                "performance_id": pid,
                "path": rel,
                "sha256": current,
            })

    manifest = {
        "config_digest": digest,
        "sample_rate": cfg.sample_rate,
        "performances": {pid: by_id[pid].to_dict() for pid in sorted(by_id)},
        "recordings": recordings,
    }
    _write_json_if_changed(manifest_path, manifest)
    return manifest_path


def _write_json_if_changed(path: Path, payload: dict) -> None:
    """Atomic JSON write that leaves an identical file untouched."""
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path.exists() and path.read_text() == text:
        return
    atomic_write_text(path, text)


def _load_template(dataset_dir: Path, sr: int) -> np.ndarray:
    """Cached key-template matrix from the calibration render."""
    template_path = dataset_dir / "template.npy"
    if template_path.exists():
        return np.load(template_path)
    calib_perf, calib_wave = render_calibration_sequence(sr)
    template = build_template(calib_wave, calib_perf, sr)
    tmp = template_path.with_name(template_path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, template)
    os.replace(tmp, template_path)
    return template


def cmd_separate(cfg: RunConfig) -> Path:
    """Score-informed NMF on every recording, then per-note MFCC patches.

    Writes <output_dir>/features.npz holding the stacked 13x30 patches
    with their velocities, preset ids, and split codes. Recordings whose
    factorization goes non-finite are flagged in the manifest and
    skipped.
    """
    out = Path(cfg.output_dir)
    dataset_dir = out / "dataset"
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}; "
                        f"run dataset-build first")
    manifest = json.loads(manifest_path.read_text())
    sr = int(manifest["sample_rate"])

    template = _load_template(dataset_dir, sr)

    features: List[np.ndarray] = []
    velocities: List[int] = []
    presets: List[int] = []
    splits: List[int] = []
    note_ids: List[str] = []
    diverged: List[str] = []
    split_names = {code: name for name, code in SPLIT_CODES.items()}

    recordings = sorted(
        manifest["recordings"],
        key=lambda r: (SPLIT_CODES[r["split"]], r["preset_id"],
                       r["performance_id"]))
    for rec in recordings:
        perf = Performance.from_dict(
            manifest["performances"][rec["performance_id"]])
        wav_path = dataset_dir / rec["path"]
        if not wav_path.exists():
            raise DataError(f"recording missing: {wav_path}")
        got_sr, wave = read_wav(wav_path)
        if got_sr != sr:
            raise DataError(f"{wav_path} has sample rate {got_sr}, "
                            f"manifest says {sr}")
        spec = stft(wave, sr)
        h0 = init_activations(perf, spec.n_frames, sr)
        w, h = nmf_update(spec.magnitudes, template.copy(), h0,
                          iterations=cfg.nmf_iterations)
        if not (np.isfinite(w).all() and np.isfinite(h).all()):
            diverged.append(rec["performance_id"])
            continue
        for j, note in enumerate(perf.notes):
            patch = extract_note_spectrogram(w, h, note, sr)
            features.append(mfcc13(patch, sr).astype(np.float32))
            velocities.append(note.velocity)
            presets.append(rec["preset_id"])
            splits.append(SPLIT_CODES[rec["split"]])
            note_ids.append(f"{rec['performance_id']}:{j}")

    if not features:
        raise DataError("no notes survived separation")

    features_path = out / "features.npz"
    tmp = features_path.with_name(features_path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh,
                 features=np.stack(features),
                 velocities=np.asarray(velocities, dtype=np.int64),
                 presets=np.asarray(presets, dtype=np.int64),
                 splits=np.asarray(splits, dtype=np.int64),
                 note_ids=np.asarray(note_ids))
    os.replace(tmp, features_path)

    feature_manifest = {
        "config_digest": manifest["config_digest"],
        "sample_rate": sr,
        "nmf_iterations": cfg.nmf_iterations,
        "n_notes": len(velocities),
        "diverged": sorted(diverged),
        "notes": [
            {"note_id": note_ids[i],
             "preset_id": presets[i],
             "velocity_target": velocities[i],
             "split": split_names[splits[i]]}
            for i in range(len(note_ids))],
    }
    _write_json_if_changed(out / "features_manifest.json", feature_manifest)
    return features_path


def load_features(out_dir) -> Dict[str, List[NoteFeatures]]:
    """Read features.npz back into per-split NoteFeatures lists."""
    path = Path(out_dir) / "features.npz"
    if not path.exists():
        raise DataError(f"no features at {path}; run separate first")
    data = np.load(path, allow_pickle=False)
    names = {code: name for name, code in SPLIT_CODES.items()}
    dataset: Dict[str, List[NoteFeatures]] = {n: [] for n in SPLIT_CODES}
    for i in range(len(data["velocities"])):
        note = NoteFeatures(
            mfcc=data["features"][i].astype(np.float64),
            note_id=str(data["note_ids"][i]),
            preset_id=int(data["presets"][i]),
            velocity_target=int(data["velocities"][i]))
        dataset[names[int(data["splits"][i])]].append(note)
    return dataset


_DATASET_CACHE: Dict[str, Dict[str, List[NoteFeatures]]] = {}


def _load_features_cached(out_dir: str) -> Dict[str, List[NoteFeatures]]:
    dataset = _DATASET_CACHE.get(out_dir)
    if dataset is None:
        dataset = load_features(out_dir)
        _DATASET_CACHE[out_dir] = dataset
    return dataset


def _config_payload(config: ModelConfig) -> dict:
    return {"k0_encoder": config.k0_encoder,
            "k0_performer": config.k0_performer,
            "k2_encoder": config.k2_encoder,
            "k2_performer": config.k2_performer,
            "k1": config.k1}


def trial_dir(out_root, config: ModelConfig, strategy: StrategyKind) -> Path:
    """Artifact directory of one (config, strategy) trial."""
    return Path(out_root) / config_digest(_config_payload(config)) / strategy.value


def _write_trial_artifacts(out_root: Path, outcome) -> None:
    directory = trial_dir(out_root, outcome.config, outcome.strategy)
    directory.mkdir(parents=True, exist_ok=True)

    lines = ["epoch,train_loss,val_loss,val_ema,val_velocity_l1,"
             "val_classifier_ce"]
    for rec in outcome.history:
        ce = "" if rec.val_classifier_ce is None else repr(rec.val_classifier_ce)
        lines.append(f"{rec.epoch},{rec.train_loss!r},{rec.val_loss!r},"
                     f"{rec.val_ema!r},{rec.val_velocity_l1!r},{ce}")
    atomic_write_text(directory / "history.csv", "\n".join(lines) + "\n")

    manifest = {
        "config": _config_payload(outcome.config),
        "strategy": outcome.strategy.value,
        "seed": outcome.plan.seed,
        "epoch": outcome.best_epoch,
        "validation_loss": (outcome.best_val_ema
                            if math.isfinite(outcome.best_val_ema) else None),
        "valid": outcome.valid,
        "reason": outcome.reason,
        "learning_rate": outcome.learning_rate,
        "epochs_ran": outcome.epochs_ran,
    }
    if outcome.state is not None:
        ckpt = directory / "checkpoint.bin"
        tmp = ckpt.with_name(ckpt.name + ".tmp")
        torch.save(outcome.state, tmp)
        os.replace(tmp, ckpt)
        manifest["checkpoint_sha256"] = checkpoint_hash(outcome.state)
    atomic_write_text(directory / "manifest.json",
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_one_trial(task: Tuple[str, ModelConfig, StrategyKind, TrainPlan]
                  ) -> TrialResult:
    """Train, score, and persist one trial; any failure yields an
    invalid result rather than killing the run."""
    out_dir, config, strategy, plan = task
    try:
        configure_torch_determinism()
        dataset = _load_features_cached(out_dir)
        outcome = train_trial(config, strategy, plan, dataset)
        _write_trial_artifacts(Path(out_dir), outcome)
        test = subsample({s: dataset[s] for s in SPLIT_CODES},
                         plan.subsample_fraction, plan.seed)["test"]
        return evaluate_trial(outcome, test)
    except Exception as exc:  # worker isolation: never poison the pool
        return TrialResult(config=config, strategy=strategy, mean_l1=None,
                           n_test_notes=0, valid=False, seed=plan.seed,
                           reason=f"trial failure: {exc}")


def cmd_train(cfg: RunConfig) -> Path:
    """Run the requested (config, strategy) trials and update results.csv.

    Trials already present in the store are skipped, so an interrupted
    run resumes where it stopped. KEYVEL_WORKERS overrides the
    configured worker count.
    """
    out = Path(cfg.output_dir)
    results_path = out / "results.csv"
    existing = read_results_csv(results_path) if results_path.exists() else []
    have = {(r.config, r.strategy): r for r in existing}

    todo = [(str(out), config, strategy, cfg.plan)
            for config in cfg.grid_configs()
            for strategy in cfg.strategies
            if (config, strategy) not in have]

    workers = int(os.environ.get("KEYVEL_WORKERS", cfg.workers))
    if todo:
        # fail fast on missing features before spinning anything up
        _load_features_cached(str(out))
    if workers <= 1 or len(todo) <= 1:
        configure_torch_determinism()
        fresh = []
        for task in todo:
            result = run_one_trial(task)
            fresh.append(result)
            print(f"{result.config.label} {result.strategy.value}: "
                  + (f"l1={result.mean_l1:.3f}" if result.valid
                     else f"invalid ({result.reason})"), flush=True)
    else:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(workers) as pool:
            fresh = pool.map(run_one_trial, todo)

    results = list(have.values()) + fresh
    write_results_csv(results, results_path)
    if not any(r.valid for r in results):
        raise NoValidTrialsError("every trial in the store is invalid")
    return results_path


def cmd_gridsearch(cfg: RunConfig) -> Path:
    """cmd_train over the full architecture grid."""
    return cmd_train(replace(cfg, grid="full"))


def cmd_report(cfg: RunConfig) -> Dict[str, Path]:
    """Analysis bundle (plot, win table, statistics, summary) from the store."""
    out = Path(cfg.output_dir)
    results_path = out / "results.csv"
    if not results_path.exists():
        raise DataError(f"no results at {results_path}; run train first")
    results = read_results_csv(results_path)
    if not any(r.valid for r in results):
        raise NoValidTrialsError("no valid trials in the results store")
    artifacts = make_report(results, out / "report")
    _write_json_if_changed(out / "report" / "manifest.json", {
        "results_sha256": _sha256_file(results_path),
        "n_trials": len(results),
        "n_valid": sum(r.valid for r in results),
        "strategies": sorted({r.strategy.value for r in results}),
    })
    return artifacts
