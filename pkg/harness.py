"""
Progressive training (contrastive alignment, then task decoding), fold planning,
cross-validation and the treatment-shift analysis.
"""

import copy
import logging
from dataclasses import dataclass, replace
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import LeaveOneGroupOut, StratifiedKFold
from tqdm import tqdm

import diffcore as dc
from diffcore import TensorNode
from dsp import sliding_windows
from errors import ConfigError, DataError, DegenerateDataError, PlanError, TrainingDivergence
from metrics import CrossValReport, FoldResult, MetricsReport, compute_metrics
from model import (MODALITIES, Batch, ModelArch, ModelParams, aligned_embeddings, contrastive_loss, cross_entropy,
                   forward_full, gated_embedding, init_model, similarity_logits, stack_epochs)
from signalio import Dataset, Group, MultimodalEpoch, samples_for
from tasks import get_task, task_examples

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """
    Settings of both training stages.

    Learning rates may be 0 (the stage then leaves its parameters untouched).
    align_groups restricts the contrastive stage to some groups (None: all).
    """

    batch_size: int = 16
    lr_align: float = 0.05
    lr_fusion: float = 0.05
    encoder_lr_multiplier: float = 0.1
    epochs_align: int = 10
    epochs_task: int = 20
    momentum: float = 0.9
    clip_norm: Optional[float] = 5.0
    seed: int = 0
    freeze_encoders_stage2: bool = False
    task_id: str = "hc_vs_mbt"
    modality: str = "fused"
    align_groups: Optional[Tuple[str, ...]] = None
    max_steps: Optional[int] = None
    progress: bool = True

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"must be >= 1, got {self.batch_size}", field="batch_size")
        for name in ("lr_align", "lr_fusion", "encoder_lr_multiplier"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ConfigError(f"must be a finite non-negative rate, got {value}", field=name)
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"must lie in [0, 1), got {self.momentum}", field="momentum")
        if self.clip_norm is not None and not (np.isfinite(self.clip_norm) and self.clip_norm > 0):
            raise ConfigError(f"must be a finite positive norm, got {self.clip_norm}", field="clip_norm")
        for name in ("epochs_align", "epochs_task"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", field=name)
        if self.modality not in MODALITIES:
            raise ConfigError(f"must be one of {MODALITIES}, got {self.modality!r}", field="modality")
        if self.align_groups is not None:
            for group in self.align_groups:
                if group not in Group.__members__:
                    raise ConfigError(f"unknown group {group!r}", field="align_groups")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"must be >= 0, got {self.max_steps}", field="max_steps")
        return self

    @property
    def head_id(self) -> str:
        return self.task_id if self.modality == "fused" else f"{self.task_id}:{self.modality}"


class MomentumSGD:
    """
    Gradient descent with momentum over parameter groups with their own rates:
        v <- momentum * v - lr * grad
        p <- p + v
    With clip_norm, gradients are first rescaled so their global L2 norm is at most clip_norm.
    """

    def __init__(self, groups: Sequence[Tuple[Sequence[TensorNode], float]], momentum: float = 0.9,
                 clip_norm: Optional[float] = None):
        self.groups = [(list(nodes), float(lr)) for nodes, lr in groups]
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.values) for nodes, _ in self.groups
                                                for p in nodes}

    @property
    def parameters(self) -> List[TensorNode]:
        return [p for nodes, _ in self.groups for p in nodes]

    def zero_grad(self) -> None:
        dc.zero_grad(self.parameters)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(p.grad * p.grad) for p in self.parameters)))

    def step(self) -> None:
        factor = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
        for nodes, lr in self.groups:
            for p in nodes:
                v = self.momentum * self.velocity[id(p)] - lr * factor * p.grad
                self.velocity[id(p)] = v
                p.values = np.asarray(p.values + v)


def arch_for(ds: Dataset, **overrides) -> ModelArch:
    return ModelArch(eeg_channels=len(ds.eeg_channels), fnirs_channels=len(ds.roi_names), **overrides)


def _minibatches(rng: np.random.Generator, n: int, batch_size: int) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _checked_step(loss: TensorNode, opt: MomentumSGD, step: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergence(f"loss became {value}", step)
    loss.backward()
    if not all(np.all(np.isfinite(p.grad)) for p in opt.parameters):
        raise TrainingDivergence("gradient became non-finite", step)
    opt.step()
    return value


def train_alignment(ds: Dataset, cfg: TrainConfig, arch: Optional[ModelArch] = None,
                    params: Optional[ModelParams] = None) -> ModelParams:
    """
    Contrastive stage: trains both encoders and the alignment head so paired EEG
    and fNIRS epochs score higher than mismatched pairs.
    """
    cfg.validate()
    if cfg.align_groups is not None:
        ds = ds.where(lambda e: e.group_label.value in cfg.align_groups)
    if len(ds) == 0:
        raise DataError("no paired epochs to align")
    model = params if params is not None else init_model(arch or arch_for(ds), cfg.seed)
    batch = stack_epochs(ds.epochs)
    groups = ["eeg_encoder", "fnirs_encoder", "alignment"]
    opt = MomentumSGD([(model.parameters(groups), cfg.lr_align)], cfg.momentum, cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    curve = model.history.setdefault("align", [])
    step = 0
    for epoch in tqdm(range(cfg.epochs_align), desc="align", disable=not cfg.progress):
        losses = []
        for idx in _minibatches(rng, len(ds), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            opt.zero_grad()
            x_e, x_f = aligned_embeddings(model, Batch(batch.eeg[idx], batch.fnirs[idx]))
            loss = contrastive_loss(similarity_logits(x_e, x_f, model.alignment))
            losses.append(_checked_step(loss, opt, step))
            model.alignment.cap()
            logger.debug("Align: step %d loss %.6f", step, losses[-1])
            step += 1
        if losses:
            curve.append(float(np.mean(losses)))
            logger.info("Align: epoch %d loss %.6f (alpha %.3f)", epoch + 1, curve[-1], model.alignment.alpha)
    opt.zero_grad()
    return model


def pair_similarity(model: ModelParams, epochs: Sequence[MultimodalEpoch]) -> Tuple[float, float]:
    """Mean similarity logit of matched EEG/fNIRS pairs and of mismatched pairs."""
    if len(epochs) < 2:
        raise DataError(f"pair similarity needs at least two epochs, got {len(epochs)}")
    s = similarity_logits(*aligned_embeddings(model, list(epochs)), model.alignment).values
    matched = float(np.trace(s))
    return matched / s.shape[0], (float(s.sum()) - matched) / (s.size - s.shape[0])


def _task_groups(model: ModelParams, cfg: TrainConfig, head_id: str) -> List[Tuple[List[TensorNode], float]]:
    groups = [(model.parameters([f"head:{head_id}"]), cfg.lr_fusion)]
    if cfg.modality == "fused":
        groups.append((model.parameters(["integrator", "gating"]), cfg.lr_fusion))
        encoders = ["eeg_encoder", "fnirs_encoder"]
    else:
        encoders = [f"{cfg.modality}_encoder"]
    if not cfg.freeze_encoders_stage2:
        groups.append((model.parameters(encoders), cfg.lr_fusion * cfg.encoder_lr_multiplier))
    return groups


def train_task(ds: Dataset, base: ModelParams, cfg: TrainConfig) -> ModelParams:
    """
    Decoding stage on a copy of `base`: attaches the task's head (modality from
    cfg) and trains it with the fusion and gating layers by cross-entropy.
    Encoders follow at encoder_lr_multiplier x lr_fusion unless frozen.
    """
    cfg.validate()
    task = get_task(cfg.task_id)
    sub, labels = task_examples(ds, task)
    model = copy.deepcopy(base)
    head_id = cfg.head_id
    head = model.heads.get(head_id)
    if head is None or head.n_classes != task.n_classes or head.modality != cfg.modality:
        head = model.add_head(head_id, task.n_classes, cfg.modality, task.class_names, seed=cfg.seed)
    opt = MomentumSGD(_task_groups(model, cfg, head_id), cfg.momentum, cfg.clip_norm)
    # Stage-2 gradients also reach parameters outside the optimizer's groups.
    everything = model.parameters()
    batch = stack_epochs(sub.epochs)
    rng = np.random.default_rng([cfg.seed, 2])
    curve = model.history.setdefault(head_id, [])
    step = 0
    for epoch in tqdm(range(cfg.epochs_task), desc=head_id, disable=not cfg.progress):
        losses = []
        for idx in _minibatches(rng, len(sub), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            dc.zero_grad(everything)
            logits = forward_full(model, Batch(batch.eeg[idx], batch.fnirs[idx]), head_id)
            losses.append(_checked_step(cross_entropy(logits, labels[idx]), opt, step))
            step += 1
        if losses:
            curve.append(float(np.mean(losses)))
            logger.info("Task %s: epoch %d loss %.6f", head_id, epoch + 1, curve[-1])
    dc.zero_grad(everything)
    head.trained = True
    return model


def predict(model: ModelParams, ds: Dataset, head_id: str, batch_size: int = 64) -> np.ndarray:
    preds = []
    for start in range(0, len(ds), batch_size):
        chunk = stack_epochs(ds.epochs[start:start + batch_size])
        preds.append(np.argmax(forward_full(model, chunk, head_id).values, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: ModelParams, ds: Dataset, cfg: TrainConfig) -> MetricsReport:
    task = get_task(cfg.task_id)
    sub, labels = task_examples(ds, task)
    return compute_metrics(predict(model, sub, cfg.head_id), labels, task.positive_class, task.n_classes)


# Fold planning.

SCHEMES = ("kfold", "loso")


@dataclass(frozen=True)
class FoldPlan:
    """
    Attributes:
        scheme: "kfold" (stratified, shuffled) or "loso"
        assignments: test fold of every item
        subjects: subject id of every item
        units: grouping id of every item; items of one unit share a fold
        seed: shuffling seed
    """

    scheme: str
    assignments: np.ndarray
    subjects: np.ndarray
    units: np.ndarray
    seed: int = 0

    @property
    def n_folds(self) -> int:
        return int(self.assignments.max()) + 1 if self.assignments.size else 0

    def __len__(self):
        return int(self.assignments.size)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def check_no_leakage(self) -> None:
        """Raises PlanError unless the folds partition the items without subject or unit leakage."""
        if not (self.assignments.size == self.subjects.size == self.units.size):
            raise PlanError("plan arrays differ in length")
        for fold in range(self.n_folds):
            test, train = self.test_indices(fold), self.train_indices(fold)
            if test.size == 0:
                raise PlanError(f"fold {fold} has an empty test set")
            shared_units = set(self.units[test].tolist()) & set(self.units[train].tolist())
            if shared_units:
                raise PlanError(f"fold {fold} splits units {sorted(shared_units)[:5]} across train and test")
            if self.scheme == "loso":
                test_subjects = set(self.subjects[test].tolist())
                if len(test_subjects) != 1:
                    raise PlanError(f"fold {fold} tests {len(test_subjects)} subjects, expected one")
                if test_subjects & set(self.subjects[train].tolist()):
                    raise PlanError(f"subject {test_subjects.pop()} of fold {fold} also appears in training")


def make_fold_plan(subjects: Sequence[int], labels: Sequence[int], scheme: str = "kfold", k: int = 5,
                   seed: int = 0, units: Optional[Sequence[int]] = None) -> FoldPlan:
    """
    kfold: StratifiedKFold over units (shuffled with seed, stratified by each
    unit's first label); every item follows its unit, so fold sizes differ by at
    most one unit.
    loso: LeaveOneGroupOut over subjects, one fold per subject in ascending order.
    """
    subjects = np.asarray(subjects, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    units = np.arange(subjects.size) if units is None else np.asarray(units, dtype=np.int64)
    if not (subjects.size == labels.size == units.size):
        raise PlanError("subjects, labels and units differ in length")
    if subjects.size == 0:
        raise PlanError("cannot plan folds over an empty dataset")
    assignments = np.full(subjects.size, -1, dtype=np.int64)
    if scheme == "loso":
        splits = LeaveOneGroupOut().split(np.zeros((subjects.size, 1)), labels, groups=subjects)
        for fold, (_, test) in enumerate(splits):
            assignments[test] = fold
    elif scheme == "kfold":
        unique_units, first = np.unique(units, return_index=True)
        if not 2 <= k <= unique_units.size:
            raise PlanError(f"k={k} folds need 2 <= k <= {unique_units.size} units")
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
        try:
            splits = list(splitter.split(np.zeros((unique_units.size, 1)), labels[first]))
        except ValueError as exc:
            raise PlanError(f"cannot stratify {unique_units.size} units into {k} folds: {exc}") from None
        for fold, (_, test) in enumerate(splits):
            assignments[np.isin(units, unique_units[test])] = fold
    else:
        raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}", field="scheme")
    plan = FoldPlan(scheme, assignments, subjects, units, seed)
    plan.check_no_leakage()
    return plan


def plan_for_task(ds: Dataset, cfg: TrainConfig, scheme: str = "kfold", k: int = 5) -> FoldPlan:
    sub, labels = task_examples(ds, get_task(cfg.task_id))
    return make_fold_plan(sub.subject_ids(), labels, scheme, k, cfg.seed)


# Cross-validation.

@dataclass(frozen=True)
class _FoldJob:
    fold: int
    train: Dataset
    test: Dataset
    test_labels: np.ndarray
    cfg: TrainConfig
    arch: Optional[ModelArch]
    base: Optional[ModelParams]


def _fold_seed(seed: int, n_folds: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_folds)]


def _run_fold(job: _FoldJob) -> FoldResult:
    cfg = job.cfg
    if job.base is None:
        base = train_alignment(job.train, cfg, job.arch)
    else:
        base = job.base
    model = train_task(job.train, base, cfg)
    task = get_task(cfg.task_id)
    preds = predict(model, job.test, cfg.head_id)
    metrics = compute_metrics(preds, job.test_labels, task.positive_class, task.n_classes)
    subjects = tuple(sorted(set(job.test.subject_ids().tolist())))
    logger.info("Crossval: fold %d (test subjects %s) accuracy %.4f", job.fold, list(subjects), metrics.accuracy)
    return FoldResult(job.fold, subjects, preds, job.test_labels, metrics)


def crossval(ds: Dataset, plan: FoldPlan, cfg: TrainConfig, arch: Optional[ModelArch] = None, workers: int = 1,
             base: Optional[ModelParams] = None) -> CrossValReport:
    """
    Trains a fresh model per fold on the fold's training items and scores its test
    items. The plan indexes the task's epochs of ds (see plan_for_task). With
    `base`, the contrastive stage is skipped and every fold starts from a copy of it.
    """
    cfg.validate()
    task = get_task(cfg.task_id)
    sub, labels = task_examples(ds, task)
    if len(plan) != len(sub):
        raise PlanError(f"plan covers {len(plan)} items but task {task.task_id} has {len(sub)} epochs")
    if not np.array_equal(plan.subjects, sub.subject_ids()):
        raise PlanError("plan subjects do not match the dataset's epochs")
    plan.check_no_leakage()
    seeds = _fold_seed(cfg.seed, plan.n_folds)
    fold_cfg = replace(cfg, progress=False)
    jobs = [_FoldJob(f, sub.subset(plan.train_indices(f)), sub.subset(plan.test_indices(f)),
                     labels[plan.test_indices(f)], replace(fold_cfg, seed=seeds[f]), arch, base)
            for f in range(plan.n_folds)]
    if workers > 1:
        with Pool(processes=workers) as pool:
            results = list(tqdm(pool.imap(_run_fold, jobs), total=len(jobs), desc="folds", disable=not cfg.progress))
    else:
        results = [_run_fold(job) for job in tqdm(jobs, desc="folds", disable=not cfg.progress)]
    report = CrossValReport.from_folds(plan.scheme, task.task_id, results, task.positive_class, task.n_classes)
    logger.info("Crossval: %s", " | ".join(report.summary_lines()))
    return report


def window_dataset(ds: Dataset, window_s: float) -> Tuple[Dataset, np.ndarray]:
    """
    Cuts every epoch into 50%-overlap windows of window_s seconds in both
    modalities. Returns the window dataset and the source-epoch index of each window.
    """
    w_eeg, w_fnirs = samples_for(window_s, ds.fs_eeg), samples_for(window_s, ds.fs_fnirs)
    windows: List[MultimodalEpoch] = []
    sources = []
    for index, epoch in enumerate(ds.epochs):
        eeg_windows = sliding_windows(epoch.eeg, w_eeg)
        fnirs_windows = sliding_windows(epoch.fnirs, w_fnirs)
        for e, f in zip(eeg_windows, fnirs_windows):
            windows.append(MultimodalEpoch(np.array(e), np.array(f), epoch.subject_id, epoch.group_label,
                                           epoch.cue_label, epoch.craving_level, epoch.epoch_index))
            sources.append(index)
    return replace(ds, epochs=tuple(windows), epoch_seconds=window_s), np.asarray(sources, dtype=np.int64)


def patient_specific_crossval(ds: Dataset, base: ModelParams, subject_id: int, cfg: TrainConfig,
                              window_s: float = 2.0, k: int = 5) -> CrossValReport:
    """
    MBT-vs-MAT decoding within one patient: windows of the patient's sessions,
    k stratified folds grouped so windows of one epoch never straddle train and test.
    """
    cfg = replace(cfg, task_id="mbt_vs_mat").validate()
    patient = ds.where(lambda e: e.subject_id == subject_id and e.group_label in (Group.MBT, Group.MAT))
    if len(patient) == 0:
        raise DataError(f"subject {subject_id} has no MBT/MAT epochs")
    task = get_task(cfg.task_id)
    sub, _ = task_examples(patient, task)
    windows, sources = window_dataset(sub, window_s)
    _, labels = task_examples(windows, task)
    plan = make_fold_plan(windows.subject_ids(), labels, "kfold", k, cfg.seed, units=sources)
    logger.info("Patient %d: %d epochs -> %d windows of %.2f s", subject_id, len(sub), len(windows), window_s)
    return crossval(windows, plan, cfg, base=base)


# Treatment shift in the gated embedding space.

@dataclass(frozen=True)
class ShiftReport:
    """
    Attributes:
        d_mbt, d_mat: mean Euclidean distance of each group's embeddings to the HC centroid
        hc_dispersion: mean distance of HC embeddings to their own centroid
        ratio: d_mat / d_mbt (below 1 when treatment moves MAT toward HC)
        centroid_mbt, centroid_mat: distance of each group centroid to the HC centroid
        centroid_ratio: centroid_mat / centroid_mbt; within-group spread does not enter it
    """

    d_mbt: float
    d_mat: float
    hc_dispersion: float
    ratio: float
    n_mbt: int
    n_mat: int
    n_hc: int
    centroid_mbt: float = 0.0
    centroid_mat: float = 0.0
    centroid_ratio: float = float("nan")

    def lines(self) -> List[str]:
        return [f"d(MBT, HC) = {self.d_mbt:.6f}", f"d(MAT, HC) = {self.d_mat:.6f}",
                f"HC dispersion = {self.hc_dispersion:.6f}", f"ratio d(MAT)/d(MBT) = {self.ratio:.6f}",
                f"centroid ratio = {self.centroid_ratio:.6f}"]

    def row(self) -> Dict[str, float]:
        return {"d_mbt": self.d_mbt, "d_mat": self.d_mat, "hc_dispersion": self.hc_dispersion, "ratio": self.ratio,
                "centroid_mbt": self.centroid_mbt, "centroid_mat": self.centroid_mat,
                "centroid_ratio": self.centroid_ratio}


def embedding_shift(mbt: np.ndarray, mat: np.ndarray, hc: np.ndarray) -> ShiftReport:
    for name, group in (("MBT", mbt), ("MAT", mat), ("HC", hc)):
        if len(group) == 0:
            raise DataError(f"the {name} group is empty")
    mbt, mat, hc = (np.asarray(g, dtype=np.float64) for g in (mbt, mat, hc))
    centroid = hc.mean(axis=0)
    d_mbt = float(np.linalg.norm(mbt - centroid, axis=1).mean())
    d_mat = float(np.linalg.norm(mat - centroid, axis=1).mean())
    dispersion = float(np.linalg.norm(hc - centroid, axis=1).mean())
    if d_mbt == 0:
        raise DegenerateDataError("MBT embeddings coincide with the HC centroid")
    c_mbt = float(np.linalg.norm(mbt.mean(axis=0) - centroid))
    c_mat = float(np.linalg.norm(mat.mean(axis=0) - centroid))
    c_ratio = c_mat / c_mbt if c_mbt > 0 else float("nan")
    return ShiftReport(d_mbt, d_mat, dispersion, d_mat / d_mbt, len(mbt), len(mat), len(hc), c_mbt, c_mat, c_ratio)


def normalization_shift(model: ModelParams, epochs_mbt: Sequence[MultimodalEpoch],
                        epochs_mat: Sequence[MultimodalEpoch], epochs_hc: Sequence[MultimodalEpoch]) -> ShiftReport:
    for name, group in (("MBT", epochs_mbt), ("MAT", epochs_mat), ("HC", epochs_hc)):
        if len(group) == 0:
            raise DataError(f"the {name} group is empty")
    report = embedding_shift(gated_embedding(model, list(epochs_mbt)), gated_embedding(model, list(epochs_mat)),
                             gated_embedding(model, list(epochs_hc)))
    logger.info("Shift: %s", "; ".join(report.lines()))
    return report


def group_epochs(ds: Dataset, group: Group) -> List[MultimodalEpoch]:
    return [e for e in ds.epochs if e.group_label == group]
