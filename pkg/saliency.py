"""
Gradient-weighted temporal saliency at an encoder's final convolutional layer,
and the latency at which a group profile first becomes informative.

For one sample s and class c with activations A [N_K x T'] and gradients
G = dy_c/dA:
    w_k   = mean over t of G_k(t)
    S_k   = ReLU(w_k * A_k(t))
    I(t)  = mean over k of S_k(t)
Group profiles average I over samples and are scaled to a unit maximum.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

import diffcore as dc
from diffcore import TensorNode
from errors import ContractError, ShapeError, UnknownHeadError
from model import ModelParams, as_batch, forward_full
from signalio import Dataset, MultimodalEpoch

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.4
# Feature frame t' is centered at (t' + 0.5) frames.
FRAME_CENTER = 0.5


@dataclass(frozen=True)
class ActivationCapture:
    activations: np.ndarray
    gradients: np.ndarray
    class_id: int
    sample_id: int = 0

    def __post_init__(self):
        if self.activations.shape != self.gradients.shape or self.activations.ndim != 2:
            raise ShapeError(f"activations {self.activations.shape} and gradients {self.gradients.shape} "
                             f"must share one [N_K x T'] shape")


@dataclass(frozen=True)
class SaliencyProfile:
    """
    Attributes:
        profile: group-averaged saliency, max-normalized to [0, 1]
        n_samples: number of samples averaged
        fs_feature: effective sampling rate of the feature axis (Hz)
        threshold: level whose first crossing marks the onset
        frame_offset: position of each frame within its period (0 = frame start)
        degenerate: the averaged profile was identically zero
    """

    profile: np.ndarray
    n_samples: int
    fs_feature: float
    threshold: float = DEFAULT_THRESHOLD
    frame_offset: float = 0.0
    degenerate: bool = False
    normalization: str = "max_unit"

    @property
    def times(self) -> np.ndarray:
        return (np.arange(self.profile.size) + self.frame_offset) / self.fs_feature


def capture_activations(tap: TensorNode, score: TensorNode, class_id: int = 0,
                        sample_id: int = 0) -> ActivationCapture:
    """Backpropagates a scalar score and records the tap's values and gradients."""
    if score.values.size != 1:
        raise ContractError(f"saliency needs a scalar class score, got shape {score.shape}")
    tap.zero_grad()
    score.backward()
    activations = tap.values.reshape(tap.shape[-2:]).copy()
    gradients = tap.grad.reshape(tap.shape[-2:]).copy()
    return ActivationCapture(activations, gradients, class_id, sample_id)


def capture(model: ModelParams, sample: MultimodalEpoch, class_id: int, head_id: str,
            tap: Optional[str] = None, sample_id: int = 0) -> ActivationCapture:
    """
    Captures the final convolutional layer of the encoder read by `head_id`.

    For a fused head `tap` selects "eeg" or "fnirs"; single-modality heads tap their
    own encoder.
    """
    try:
        head = model.head(head_id)
    except UnknownHeadError as exc:
        raise ContractError(str(exc)) from None
    if not head.trained:
        raise ContractError(f"decoder head {head_id!r} has not been trained")
    if not 0 <= class_id < head.n_classes:
        raise ContractError(f"class {class_id} outside the {head.n_classes} classes of head {head_id!r}")
    name = tap or (head.modality if head.modality != "fused" else "eeg")
    taps = {}
    logits = forward_full(model, as_batch([sample]), head_id, capture=taps)
    if name not in taps:
        raise ContractError(f"head {head_id!r} does not read the {name} encoder")
    score = dc.slice_(logits, (0, class_id))
    result = capture_activations(taps[name], score, class_id, sample_id)
    dc.zero_grad(model.parameters())
    return result


def sample_saliency(cap: ActivationCapture) -> np.ndarray:
    weights = cap.gradients.mean(axis=1, keepdims=True)
    return np.maximum(weights * cap.activations, 0.0).mean(axis=0)


def group_profile(samples: Sequence[np.ndarray], fs_feature: float, threshold: float = DEFAULT_THRESHOLD,
                  frame_offset: float = 0.0) -> SaliencyProfile:
    if len(samples) == 0:
        raise ContractError("a group profile needs at least one sample")
    lengths = {np.asarray(s).shape for s in samples}
    if len(lengths) != 1:
        raise ShapeError(f"sample profiles differ in shape: {sorted(lengths)}")
    mean = np.mean(np.stack([np.asarray(s, dtype=np.float64) for s in samples]), axis=0)
    peak = mean.max()
    if peak <= 0:
        return SaliencyProfile(np.zeros_like(mean), len(samples), fs_feature, threshold, frame_offset, True)
    return SaliencyProfile(mean / peak, len(samples), fs_feature, threshold, frame_offset)


def onset_delay(p: SaliencyProfile) -> Optional[float]:
    """Seconds until the profile first reaches the threshold, interpolating between frames."""
    above = np.flatnonzero(p.profile >= p.threshold)
    if above.size == 0:
        return None
    i = int(above[0])
    position = float(i)
    if i > 0:
        lo, hi = p.profile[i - 1], p.profile[i]
        position = i - 1 + (p.threshold - lo) / (hi - lo)
    return (position + p.frame_offset) / p.fs_feature


@dataclass(frozen=True)
class TemporalSaliency:
    profile: SaliencyProfile
    onset_s: Optional[float]
    modality: str
    class_id: int
    n_candidates: int


def temporal_saliency(model: ModelParams, ds: Dataset, head_id: str, class_id: int, tap: Optional[str] = None,
                      only_correct: bool = False, threshold: float = DEFAULT_THRESHOLD) -> TemporalSaliency:
    """
    Group saliency of `class_id` over every epoch of ds (typically one group's
    epochs). With only_correct, epochs the head misclassifies are skipped.
    """
    head = model.head(head_id)
    modality = tap or (head.modality if head.modality != "fused" else "eeg")
    samples = []
    for sample_id, epoch in enumerate(ds.epochs):
        if only_correct:
            logits = forward_full(model, epoch, head_id).values
            if int(np.argmax(logits)) != class_id:
                continue
        samples.append(sample_saliency(capture(model, epoch, class_id, head_id, modality, sample_id)))
    if not samples:
        raise ContractError(f"no epochs left for class {class_id} saliency")
    fs, samples_in = (ds.fs_eeg, ds.eeg_samples) if modality == "eeg" else (ds.fs_fnirs, ds.fnirs_samples)
    fs_feature = fs * samples[0].size / samples_in
    profile = group_profile(samples, fs_feature, threshold, FRAME_CENTER)
    onset = onset_delay(profile)
    logger.info("Saliency: %s class %d over %d epochs, onset %s", modality, class_id, len(samples),
                "none" if onset is None else f"{onset:.3f} s")
    return TemporalSaliency(profile, onset, modality, class_id, len(ds.epochs))


def write_profile_csv(result: Union[TemporalSaliency, SaliencyProfile], path: Union[str, Path]) -> None:
    profile = result.profile if isinstance(result, TemporalSaliency) else result
    with open(path, "w", newline="") as file:
        writer = csv.DictWriter(file, fieldnames=["time_s", "saliency"])
        writer.writeheader()
        for t, value in zip(profile.times, profile.profile):
            writer.writerow({"time_s": f"{t:.6f}", "saliency": f"{value:.6f}"})


SUMMARY_FIELDS = ["modality", "class_id", "n_samples", "threshold", "crossing_s", "degenerate"]


def write_summary_csv(results: Sequence[TemporalSaliency], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as file:
        writer = csv.DictWriter(file, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for r in results:
            writer.writerow({"modality": r.modality, "class_id": r.class_id, "n_samples": r.profile.n_samples,
                             "threshold": r.profile.threshold,
                             "crossing_s": "" if r.onset_s is None else f"{r.onset_s:.6f}",
                             "degenerate": r.profile.degenerate})
