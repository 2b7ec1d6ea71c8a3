"""
Command-line entry point.

    $ python3 neuroclip.py synth --out data/synth
    $ python3 neuroclip.py train-align --data data/synth --out runs/align
    $ python3 neuroclip.py crossval --data data/synth --scheme loso --out runs/loso

Exit codes: 0 success, 1 other errors raised on purpose, 2 configuration error,
3 data or I/O error, 4 training divergence.
"""

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from config import RunConfig, load_run_config
from dsp import preprocess_recordings
from errors import ConfigError, DataError, NeuroclipError
from harness import (crossval, group_epochs, make_fold_plan, normalization_shift,
                     patient_specific_crossval, train_alignment, train_task)
from metrics import CrossValReport, craving_level_labels, wilcoxon_signed_rank
from model import ModelParams
from saliency import temporal_saliency, write_profile_csv, write_summary_csv
from signalio import (Group, generate_synthetic_dataset, read_dataset, read_recordings, sessions_for,
                      simulate_recording, subject_table, write_dataset, write_recordings)
from tasks import get_task, task_examples

logger = logging.getLogger("neuroclip")

IO_EXIT_CODE = 3


def _out(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_cfg(cfg: RunConfig, args) -> RunConfig:
    train = cfg.train
    if getattr(args, "task", None):
        train = replace(train, task_id=args.task)
    if getattr(args, "modality", None):
        train = replace(train, modality=args.modality)
    if args.quiet:
        train = replace(train, progress=False)
    return replace(cfg, train=train.validate())


def _write_rows(path: Path, rows: List[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as file:
        writer = csv.DictWriter(file, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _write_report(report: CrossValReport, out: Path, name: str) -> None:
    _write_rows(out / f"{name}-folds.csv", report.fold_rows())
    rows = [{"metric": metric, "mean": report.mean[metric], "sd": report.sd[metric],
             "pooled": report.pooled.as_dict()[metric]} for metric in report.mean]
    _write_rows(out / f"{name}-summary.csv", rows)
    print("\n".join(report.summary_lines()))


# Subcommands.

def cmd_synth(cfg: RunConfig, args) -> None:
    write_dataset(generate_synthetic_dataset(cfg.synth), _out(args))


def cmd_simulate_raw(cfg: RunConfig, args) -> None:
    recordings = []
    for subject_id, cohort in subject_table(cfg.synth).items():
        for group in sessions_for(cohort):
            recordings.append(simulate_recording(cfg.synth, subject_id, group, raw_factor=args.raw_factor,
                                                 channels_per_roi=args.channels_per_roi,
                                                 bad_channels=args.bad_channels))
    write_recordings(recordings, _out(args))


def cmd_preprocess(cfg: RunConfig, args) -> None:
    write_dataset(preprocess_recordings(read_recordings(args.raw), cfg.preprocess), _out(args))


def cmd_train_align(cfg: RunConfig, args) -> None:
    cfg = _train_cfg(cfg, args)
    ds = read_dataset(args.data)
    model = train_alignment(ds, cfg.train, cfg.arch(len(ds.eeg_channels), len(ds.roi_names)))
    model.save(_out(args))


def cmd_train_task(cfg: RunConfig, args) -> None:
    cfg = _train_cfg(cfg, args)
    model = train_task(read_dataset(args.data), ModelParams.load(args.base), cfg.train)
    model.save(_out(args))


def cmd_crossval(cfg: RunConfig, args) -> None:
    cfg = _train_cfg(cfg, args)
    ds = read_dataset(args.data)
    sub, labels = task_examples(ds, get_task(cfg.train.task_id))
    plan = make_fold_plan(sub.subject_ids(), labels, args.scheme, args.k, cfg.train.seed)
    base = ModelParams.load(args.base) if args.base else None
    report = crossval(ds, plan, cfg.train, cfg.arch(len(ds.eeg_channels), len(ds.roi_names)), args.workers, base)
    _write_report(report, _out(args), f"crossval-{cfg.train.head_id.replace(':', '-')}-{args.scheme}")


def cmd_patient(cfg: RunConfig, args) -> None:
    cfg = _train_cfg(cfg, args)
    report = patient_specific_crossval(read_dataset(args.data), ModelParams.load(args.base), args.subject,
                                       cfg.train, args.window_s, args.k)
    _write_report(report, _out(args), f"patient-{args.subject}")


def cmd_saliency(cfg: RunConfig, args) -> None:
    ds = read_dataset(args.data).where(lambda e: e.group_label == Group(args.group))
    model = ModelParams.load(args.model)
    out = _out(args)
    taps = args.tap or ([model.head(args.head).modality] if model.head(args.head).modality != "fused"
                        else ["eeg", "fnirs"])
    results = []
    for tap in taps:
        result = temporal_saliency(model, ds, args.head, args.class_id, tap, args.only_correct, args.threshold)
        write_profile_csv(result, out / f"saliency-{tap}.csv")
        results.append(result)
        crossing = "none" if result.onset_s is None else f"{result.onset_s:.3f} s"
        print(f"{tap}: crossing of {args.threshold} at {crossing} ({result.profile.n_samples} samples)")
    write_summary_csv(results, out / "saliency-summary.csv")


def _read_columns(path: str, columns: Sequence[str]) -> List[List[str]]:
    with open(path, newline="") as file:
        reader = csv.DictReader(file)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path} lacks columns {missing}")
        return [[row[c] for c in columns] for row in reader]


def cmd_stats(cfg: RunConfig, args) -> None:
    rows = _read_columns(args.csv, (args.pre, args.post))
    try:
        pre = [float(r[0]) for r in rows]
        post = [float(r[1]) for r in rows]
    except ValueError as exc:
        raise DataError(f"non-numeric score in {args.csv}: {exc}") from None
    result = wilcoxon_signed_rank(pre, post)
    _write_rows(_out(args) / "wilcoxon.csv", [{"W": result.statistic, "p": result.p_value,
                                                "n_effective": result.n_effective, "method": result.method}])
    print(f"W = {result.statistic:g}, p = {result.p_value:.6g} ({result.method}, n = {result.n_effective})")


def cmd_shift(cfg: RunConfig, args) -> None:
    ds = read_dataset(args.data)
    model = ModelParams.load(args.model)
    report = normalization_shift(model, group_epochs(ds, Group.MBT), group_epochs(ds, Group.MAT),
                                 group_epochs(ds, Group.HC))
    _write_rows(_out(args) / "shift.csv", [report.row()])
    print("\n".join(report.lines()))


def cmd_craving_labels(cfg: RunConfig, args) -> None:
    rows = _read_columns(args.csv, ("image_id", "score"))
    try:
        scores = [(r[0], float(r[1])) for r in rows]
    except ValueError as exc:
        raise DataError(f"non-numeric score in {args.csv}: {exc}") from None
    labels = craving_level_labels(scores, args.allow_any_multiple)
    _write_rows(_out(args) / "craving-levels.csv",
                [{"image_id": image_id, "level": level.value} for image_id, level in labels.items()])
    for image_id, level in labels.items():
        print(f"{image_id}: {level.value}")


# Argument parsing.

def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides every seed in the configuration")
    common.add_argument("--out", type=str, default="out", help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel cross-validation folds")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--quiet", action="store_true", help="no progress bars")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(description="Multimodal EEG/fNIRS contrastive learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(fn=fn)
        return p

    command("synth", cmd_synth, "generate a synthetic dataset")
    p = command("simulate-raw", cmd_simulate_raw, "simulate raw continuous sessions")
    p.add_argument("--raw-factor", type=int, default=4)
    p.add_argument("--channels-per-roi", type=int, default=2)
    p.add_argument("--bad-channels", type=int, nargs="*", default=[])
    p = command("preprocess", cmd_preprocess, "raw sessions -> epoch dataset")
    p.add_argument("--raw", required=True)
    p = command("train-align", cmd_train_align, "contrastive alignment stage")
    p.add_argument("--data", required=True)
    for name, fn, help_text in (("train-task", cmd_train_task, "decoder training stage"),
                                ("crossval", cmd_crossval, "cross-validated decoding"),
                                ("patient", cmd_patient, "per-patient MBT-vs-MAT decoding")):
        p = command(name, fn, help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--base", required=name != "crossval", help="checkpoint with trained encoders")
        p.add_argument("--modality", choices=("fused", "eeg", "fnirs"))
        if name != "patient":
            p.add_argument("--task", choices=("hc_vs_mbt", "craving", "mbt_vs_mat"))
        if name == "crossval":
            p.add_argument("--scheme", choices=("kfold", "loso"), default="kfold")
        if name != "train-task":
            p.add_argument("--k", type=int, default=5)
        if name == "patient":
            p.add_argument("--subject", type=int, required=True)
            p.add_argument("--window-s", type=float, default=2.0)
    p = command("saliency", cmd_saliency, "temporal saliency profiles and onset delays")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--class-id", type=int, default=1)
    p.add_argument("--group", choices=[g.value for g in Group], default=Group.MBT.value)
    p.add_argument("--tap", choices=("eeg", "fnirs"), action="append")
    p.add_argument("--only-correct", action="store_true")
    p.add_argument("--threshold", type=float, default=0.4)
    p = command("stats", cmd_stats, "statistical tests")
    p.add_argument("test", choices=("wilcoxon",))
    p.add_argument("--csv", required=True, help="paired scores")
    p.add_argument("--pre", default="pre")
    p.add_argument("--post", default="post")
    p = command("shift", cmd_shift, "treatment shift toward the control group")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p = command("craving-labels", cmd_craving_labels, "image ratings -> craving levels")
    p.add_argument("--csv", required=True, help="columns image_id,score")
    p.add_argument("--allow-any-multiple", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError(f"must be >= 1, got {args.workers}", field="workers")
        cfg = load_run_config(args.config).with_seed(args.seed)
        args.fn(cfg, args)
    except NeuroclipError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return IO_EXIT_CODE
    return 0


if __name__ == "__main__":
    sys.exit(main())
