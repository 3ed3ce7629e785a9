# src/flowtsvad/pipeline.py
"""
Stage orchestration shared by the CLI and the acceptance scripts:
simulate -> train label-ae -> train flow-tsvad / baseline -> infer -> score -> ensemble.
"""
import os
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from src.flowtsvad.checkpoint import from_module, load_checkpoint, load_into, save_checkpoint
from src.flowtsvad.config import RunConfig, save_config
from src.flowtsvad.ensemble import vote_files
from src.flowtsvad.errors import ConfigError, DataError, MissingArtifactError, ShapeError
from src.flowtsvad.label_codec import BinaryLabelCodec, LabelAE, reconstruction_der, train_label_ae
from src.flowtsvad.parallel_process import process_items_parallel
from src.flowtsvad.scoring import (
    DerReport,
    DiarizationHypothesis,
    read_rttm,
    score_corpus,
    write_rttm,
)
from src.flowtsvad.simulator import SegmentDataset, make_dataset
from src.flowtsvad.tsvad_model import (
    FlowTsvad,
    TsvadConfig,
    build_model,
    diarize_batch,
    pad_enrollments,
    probabilities_to_hypothesis,
    train_baseline,
    train_flow_tsvad,
)

SUMMARY_COLUMNS = ["steps", "seed", "miss", "false_alarm", "confusion", "der"]
INFER_KEY = 0x1FE


def write_table(rows: List[dict], path: str, columns: Optional[List[str]] = None):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, sep="\t", index=False, float_format="%.6f")


def _stem(path: str) -> str:
    return os.path.splitext(path)[0]


def require(path: str, artifact: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing {artifact}: {path}")
    return path


def segment_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, INFER_KEY, index]).generate_state(1)[0])


# --------------------------
# simulate
# --------------------------
def simulate_dataset(config: RunConfig, out_dir: Optional[str] = None, num_segments: Optional[int] = None,
                     seed: Optional[int] = None) -> str:
    out_dir = out_dir or config.path("dataset")
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not config.force:
        raise DataError(f"output directory {out_dir} is not empty (pass --force true to overwrite)")
    make_dataset(out_dir, config.simulation_config(num_segments, seed))
    save_config(config, os.path.join(out_dir, "config.yaml"))
    return out_dir


def open_dataset(path: str) -> SegmentDataset:
    require(os.path.join(path, "manifest.json"), "dataset")
    return SegmentDataset(path)


# --------------------------
# train
# --------------------------
def train_label_ae_from_dataset(config: RunConfig) -> str:
    if config.binary_space:
        raise ConfigError("binary_space runs use no label auto-encoder; nothing to train")
    dataset = open_dataset(config.path("dataset"))
    train = dataset.label_sequences("train")
    if len(train) == 0:
        raise DataError(f"{dataset.path}: no training segments")
    model, curve = train_label_ae(train, config.label_ae_config())

    path = config.path("label_ae")
    save_checkpoint(
        from_module("label-ae", model, {"latent_dim": config.latent_dim}, ["label-ae"], config.seed), path
    )
    write_table(curve, f"{_stem(path)}.loss.tsv", ["stage", "epoch", "step", "loss"])
    save_config(config, f"{_stem(path)}.config.yaml")
    print(f"[train] label-ae k={config.latent_dim} saved to {path}")

    held_out = dataset.label_sequences("held_out")
    if len(held_out) and held_out.any():
        print(f"[train] held-out reconstruction DER {reconstruction_der(model, held_out, config.threshold):.3f}%")
    return path


def load_codec(config: RunConfig, binary_space: Optional[bool] = None):
    if config.binary_space if binary_space is None else binary_space:
        return BinaryLabelCodec()
    checkpoint = load_checkpoint(require(config.path("label_ae"), "label-ae checkpoint"), kind="label-ae")
    return load_into(checkpoint, LabelAE(checkpoint.hyperparameters["latent_dim"]))


def load_tsvad(path: str):
    """-> (checkpoint, model) for a flow-tsvad or baseline checkpoint."""
    checkpoint = load_checkpoint(require(path, "model checkpoint"))
    if checkpoint.kind not in ("flow-tsvad", "baseline"):
        raise ConfigError(f"{path}: expected a flow-tsvad or baseline checkpoint, found {checkpoint.kind}")
    model_config = TsvadConfig(**checkpoint.hyperparameters["model"])
    model = build_model(checkpoint.kind, model_config, checkpoint.seed)
    return checkpoint, load_into(checkpoint, model)


def train_tsvad_from_dataset(config: RunConfig, kind: str = "flow-tsvad", resume: bool = False) -> str:
    dataset = open_dataset(config.path("dataset"))
    finetune = open_dataset(config.finetune_dataset) if config.finetune_dataset else None
    path = config.path(kind)

    model, stages = None, []
    if resume and os.path.exists(path):
        checkpoint, model = load_tsvad(path)
        if checkpoint.kind != kind:
            raise ConfigError(f"cannot resume {kind} from a {checkpoint.kind} checkpoint")
        stages = list(checkpoint.stages_completed)
        print(f"[train] resuming {kind} after stages {stages}")

    if kind == "flow-tsvad":
        codec = load_codec(config)
        model_config = config.model_config(codec.latent_dim)
        result = train_flow_tsvad(dataset, finetune, codec, model_config, config.train_config(),
                                  config.flow_config(config.infer_steps[0]), model, stages)
    elif kind == "baseline":
        model_config = config.model_config(config.latent_dim if not config.binary_space else 200)
        result = train_baseline(dataset, finetune, model_config, config.train_config(), model, stages)
    else:
        raise ConfigError(f"unknown training target {kind!r}")

    hyper = {"model": asdict(model_config), "binary_space": config.binary_space}
    save_checkpoint(from_module(kind, result.model, hyper, result.stages_completed, config.seed), path)
    write_table(result.curve, f"{_stem(path)}.loss.tsv", ["stage", "epoch", "step", "loss"])
    save_config(config, f"{_stem(path)}.config.yaml")
    print(f"[train] {kind} stages {result.stages_completed} saved to {path}")
    return path


# --------------------------
# infer
# --------------------------
def split_indices(dataset: SegmentDataset, split: str) -> List[int]:
    return dataset.indices(None if split == "all" else split)


def reference_hypotheses(dataset: SegmentDataset, split: str) -> Dict[str, DiarizationHypothesis]:
    return dataset.references(None if split == "all" else split)


def _infer_chunk(item: Tuple[int, ...], dataset, model, codec, flow_config, seed, config, **kwargs):
    raw = dataset.batch(list(item))
    sets = [
        pad_enrollments(raw["enrollments"][i].numpy(), model.config.num_slots, raw["speakers"][i])
        for i in range(len(item))
    ]
    if isinstance(model, FlowTsvad):
        generators = [torch.Generator().manual_seed(segment_seed(seed, index)) for index in item]
        probs = diarize_batch(raw["features"], sets, model, codec, flow_config, generators)
    else:
        with torch.no_grad():
            e = torch.as_tensor(np.stack([s.embeddings for s in sets]))
            probs = model(raw["features"], e)
    hyps = [
        probabilities_to_hypothesis(dataset.segments[index]["id"], p, s.names, config.threshold,
                                    dataset.frame_duration, config.min_duration)
        for index, p, s in zip(item, probs, sets)
    ]
    return (probs.to(torch.float32).numpy(), hyps), [{"type": "status", "description": f"seg {item[0]}"}]


def run_inference(dataset, indices, model, codec, flow_config, seed: int, config: RunConfig):
    """-> (n × N × L probabilities, {file_id: hypothesis}); one derived generator per segment."""
    chunks = [tuple(indices[i:i + config.infer_batch]) for i in range(0, len(indices), config.infer_batch)]
    results = process_items_parallel(
        chunks, _infer_chunk, workers=config.workers, desc=f"[infer] seed {seed}",
        dataset=dataset, model=model, codec=codec, flow_config=flow_config, seed=seed, config=config,
    )
    probs = [p for chunk_probs, _ in results for p in chunk_probs]
    hyps = {h.file_id: h for _, chunk_hyps in results for h in chunk_hyps}
    return np.stack(probs) if probs else np.zeros((0,), dtype=np.float32), hyps


def evaluate(references, hypotheses, config: RunConfig) -> DerReport:
    return score_corpus(references, hypotheses, config.collar, config.mapping)


def infer_dataset(config: RunConfig, out_dir: Optional[str] = None,
                  checkpoint_path: Optional[str] = None) -> pd.DataFrame:
    """
    One RTTM and one probability dump per (steps, seed); a baseline checkpoint runs once.
    Writes summary.tsv with the DER of every run.
    """
    out_dir = out_dir or os.path.join(config.output_dir, "infer")
    checkpoint, model = load_tsvad(checkpoint_path or config.path("flow-tsvad"))
    dataset = open_dataset(config.path("dataset"))
    if model.config.feat_dim != dataset.feat_dim or model.config.label_len != dataset.label_len:
        raise ShapeError(
            f"checkpoint expects F={model.config.feat_dim}, L={model.config.label_len}; "
            f"dataset has F={dataset.feat_dim}, L={dataset.label_len}"
        )
    indices = split_indices(dataset, config.infer_split)
    references = reference_hypotheses(dataset, config.infer_split)
    os.makedirs(out_dir, exist_ok=True)

    codec = None
    if checkpoint.kind == "flow-tsvad":
        codec = load_codec(config, checkpoint.hyperparameters.get("binary_space", False))
        if codec.latent_dim != model.config.latent_dim:
            raise ShapeError(f"codec latent dim {codec.latent_dim} vs model latent dim {model.config.latent_dim}")
        runs = [(steps, seed) for steps in config.infer_steps for seed in config.inference_seeds]
    else:
        runs = [(0, config.seed)]

    rows = []
    for steps, seed in runs:
        flow_config = config.flow_config(steps) if steps else None
        probs, hyps = run_inference(dataset, indices, model, codec, flow_config, seed, config)
        name = f"steps{steps}_seed{seed}" if steps else "baseline"
        write_rttm(hyps, os.path.join(out_dir, f"{name}.rttm"))
        np.save(os.path.join(out_dir, f"{name}.probs.npy"), probs)
        report = evaluate(references, hyps, config)
        rows.append({"steps": steps, "seed": seed, "miss": report.miss, "false_alarm": report.false_alarm,
                     "confusion": report.confusion, "der": report.der})
        print(f"[infer] {name}: DER {report.der:.2f}%")

    write_rttm(references, os.path.join(out_dir, "reference.rttm"))
    summary = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    write_table(rows, os.path.join(out_dir, "summary.tsv"), SUMMARY_COLUMNS)
    save_config(config, os.path.join(out_dir, "config.yaml"))
    return summary


# --------------------------
# score / ensemble
# --------------------------
def score_files(reference_path: str, hypothesis_path: str, config: RunConfig) -> DerReport:
    references = read_rttm(require(reference_path, "reference rttm"))
    hypotheses = read_rttm(hypothesis_path) if os.path.exists(hypothesis_path) else {}
    if not os.path.exists(hypothesis_path):
        print(f"[score] hypothesis file {hypothesis_path} not found, scoring every file as missed")
    return evaluate(references, hypotheses, config)


def ensemble_files(paths: Sequence[str], out_path: str, config: RunConfig) -> Dict[str, DiarizationHypothesis]:
    hypothesis_sets = [read_rttm(require(p, "hypothesis rttm")) for p in paths]
    combined = vote_files(hypothesis_sets, config.frame_resolution, config.workers)
    write_rttm(combined, out_path)
    return combined
