"""
Longer synthetic-data experiments, run on demand:

    $ python3 experiments.py -e benefit -r 3

Each run appends one row per measurement to experiments/<id>/raw.csv (with its
wall time); the aggregate mean and standard deviation go to
experiments/<id>/results.txt.
"""

import argparse
import csv
import logging
import statistics
import time
from dataclasses import replace
from functools import wraps
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from harness import (TrainConfig, crossval, group_epochs, make_fold_plan, normalization_shift, pair_similarity,
                     plan_for_task, train_alignment, train_task)
from saliency import temporal_saliency
from signalio import Dataset, Group, SynthConfig, generate_synthetic_dataset
from tasks import get_task, task_examples

logger = logging.getLogger("experiments")

MEASUREMENT_FIELDS = ["experiment", "run", "name", "value", "time (ms)"]

# Desk-scale generator: low sampling rates keep one fused cross-validation to minutes.
DESK_SYNTH = SynthConfig(n_subjects_per_group=6, epochs_per_subject=20, fs_eeg=32.0, fs_fnirs=4.0,
                         burst_hz=8.0, noise_sd=1.5, subject_effect_sd=0.2)
DESK_TRAIN = TrainConfig(batch_size=16, lr_align=0.02, lr_fusion=0.02, epochs_align=5, epochs_task=15,
                         progress=False)


def with_measurement(proc: Callable[..., Dict[str, float]], writer: csv.DictWriter, experiment: str, run: int):
    """Times one run and writes every value it reports as a row."""
    @wraps(proc)
    def wrapped(*args, **kwargs):
        t0 = time.time()
        values = proc(*args, **kwargs)
        elapsed = (time.time() - t0) * 1000
        for name, value in values.items():
            writer.writerow({"experiment": experiment, "run": run, "name": name, "value": value,
                             "time (ms)": elapsed})
        return values
    return wrapped


def _accuracy(ds: Dataset, cfg: TrainConfig) -> float:
    report = crossval(ds, plan_for_task(ds, cfg, "kfold", 5), cfg)
    return report.mean["accuracy"]


# Fused decoding beats either modality alone when the class effect is split across them.
def experiment_benefit(seed: int) -> Dict[str, float]:
    ds = generate_synthetic_dataset(replace(DESK_SYNTH, seed=seed, class_effect_split=0.5))
    cfg = replace(DESK_TRAIN, seed=seed, task_id="hc_vs_mbt")
    values = {modality: _accuracy(ds, replace(cfg, modality=modality)) for modality in ("fused", "eeg", "fnirs")}
    values["benefit"] = values["fused"] - max(values["eeg"], values["fnirs"])
    return values


# Paired epochs of held-out subjects score above mismatched pairs after contrastive training.
def experiment_alignment(seed: int) -> Dict[str, float]:
    cfg = replace(DESK_TRAIN, seed=seed)
    ds = generate_synthetic_dataset(replace(DESK_SYNTH, seed=seed))
    n = DESK_SYNTH.n_subjects_per_group
    held_out = (n - 1, 2 * n - 1)
    model = train_alignment(ds.where(lambda e: e.subject_id not in held_out), cfg)
    diag, off = pair_similarity(model, ds.where(lambda e: e.subject_id in held_out).epochs)
    return {"diag": diag, "offdiag": off, "margin": diag - off, "final_loss": model.history["align"][-1],
            "first_loss": model.history["align"][0]}


# Saliency onset of unimodal classifiers against the injected fNIRS delay.
def experiment_onset(seed: int) -> Dict[str, float]:
    values = {}
    for delay in (2.0, 2.8, 4.0):
        synth = replace(DESK_SYNTH, seed=seed, fnirs_onset_delay=delay, noise_sd=0.5, class_effect_split=0.5,
                        subject_effect_sd=0.0, fs_fnirs=10.0, fnirs_response="ramp")
        ds = generate_synthetic_dataset(synth)
        cfg = replace(DESK_TRAIN, seed=seed, task_id="hc_vs_mbt")
        base = train_alignment(ds, cfg)
        mbt = ds.where(lambda e: e.group_label == Group.MBT)
        for modality in ("eeg", "fnirs"):
            model = train_task(ds, base, replace(cfg, modality=modality))
            result = temporal_saliency(model, mbt, f"hc_vs_mbt:{modality}", 1)
            values[f"{modality}@{delay}"] = float("nan") if result.onset_s is None else result.onset_s
        values[f"fnirs_error@{delay}"] = abs(values[f"fnirs@{delay}"] - delay)
    return values


# 34 subjects under leave-one-subject-out: fold count, leakage and rerun determinism.
def experiment_loso(seed: int) -> Dict[str, float]:
    ds = generate_synthetic_dataset(replace(DESK_SYNTH, n_subjects_per_group=17, epochs_per_subject=6, seed=seed))
    cfg = replace(DESK_TRAIN, seed=seed, task_id="hc_vs_mbt", epochs_align=1, epochs_task=2)
    sub, labels = task_examples(ds, get_task(cfg.task_id))
    plan = make_fold_plan(sub.subject_ids(), labels, "loso", seed=seed)
    plan.check_no_leakage()
    first = crossval(ds, plan, cfg)
    second = crossval(ds, plan, cfg)
    identical = all(np.array_equal(a.preds, b.preds) for a, b in zip(first.folds, second.folds))
    return {"folds": plan.n_folds, "identical_reruns": float(identical), "accuracy": first.mean["accuracy"]}


# Treatment moves MAT embeddings toward HC.
def experiment_shift(seed: int) -> Dict[str, float]:
    ds = generate_synthetic_dataset(replace(DESK_SYNTH, seed=seed, mat_shift_toward_hc=0.7, noise_sd=0.5))
    cfg = replace(DESK_TRAIN, seed=seed, task_id="hc_vs_mbt")
    model = train_task(ds, train_alignment(ds, cfg), cfg)
    report = normalization_shift(model, group_epochs(ds, Group.MBT), group_epochs(ds, Group.MAT),
                                 group_epochs(ds, Group.HC))
    return {"ratio": report.ratio, "centroid_ratio": report.centroid_ratio, "d_mbt": report.d_mbt,
            "d_mat": report.d_mat}


EXPERIMENTS = {
    "alignment": experiment_alignment,
    "benefit": experiment_benefit,
    "onset": experiment_onset,
    "loso": experiment_loso,
    "shift": experiment_shift,
}


def cmd_measure(runs: int, experiment_id: str, root: Path = Path("experiments")) -> Dict[str, List[float]]:
    directory = root / experiment_id
    directory.mkdir(parents=True, exist_ok=True)
    collected: Dict[str, List[float]] = {}
    with open(directory / "raw.csv", "w", newline="") as file:
        writer = csv.DictWriter(file, fieldnames=MEASUREMENT_FIELDS)
        writer.writeheader()
        for run in range(runs):
            logger.info("Experiment %s: run %d of %d", experiment_id, run + 1, runs)
            measured = with_measurement(EXPERIMENTS[experiment_id], writer, experiment_id, run + 1)
            for name, value in measured(run).items():
                collected.setdefault(name, []).append(float(value))
    with open(directory / "results.txt", "w") as file:
        for name, data in collected.items():
            stdev = statistics.stdev(data) if len(data) > 1 else 0.0
            file.write(f"{name} => Avg = {statistics.mean(data)}, Stdev = {stdev}\n")
    return collected


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Synthetic-data experiments")
    parser.add_argument("-r", "--runs", type=int, default=3, help="number of seeds")
    parser.add_argument("-e", "--experiment", type=str, required=True, choices=sorted(EXPERIMENTS),
                        help="experiment id")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    cmd_measure(args.runs, args.experiment)
