"""
Preprocessing for both modalities: zero-phase band-pass filtering, resampling,
Modified Beer-Lambert conversion, ROI mapping, epoching and z-scoring.

All operations are pure functions of their arguments.
"""

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, List, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from errors import (ConfigError, DataRangeError, DomainError, ImputationError, LengthError, ParameterError,
                    ShapeError)
from signalio import (ALL_ROI_NAMES, VISUAL_CORTEX, Dataset, Group, MultimodalEpoch, Provenance, RawRecording,
                      samples_for)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterSpec:
    """
    Maximally-flat (Butterworth) band-pass, applied forward and backward.

    low_hz == 0 gives a low-pass. `order` is the order of the complete filter.
    """

    low_hz: float
    high_hz: float
    order: int = 4
    family: str = "maximally_flat"
    zero_phase: bool = True

    def validate(self) -> "FilterSpec":
        if self.family != "maximally_flat":
            raise ConfigError(f"unsupported filter family {self.family!r}", field="family")
        if self.order < 2 or self.order % 2:
            raise ConfigError(f"must be even and >= 2, got {self.order}", field="order")
        if not 0 <= self.low_hz < self.high_hz:
            raise ConfigError(f"need 0 <= low_hz < high_hz, got {self.low_hz}..{self.high_hz}", field="low_hz")
        return self

    def validate_for(self, fs: float) -> "FilterSpec":
        self.validate()
        if self.high_hz >= fs / 2:
            raise ParameterError(f"cutoff {self.high_hz} Hz is not below the Nyquist rate {fs / 2} Hz",
                                 field="high_hz")
        return self

    def coefficients(self, fs: float) -> Tuple[np.ndarray, np.ndarray]:
        self.validate_for(fs)
        if self.low_hz == 0:
            return sps.butter(self.order, self.high_hz, btype="lowpass", fs=fs)
        # A band-pass design doubles the prototype order.
        return sps.butter(self.order // 2, [self.low_hz, self.high_hz], btype="bandpass", fs=fs)


EEG_BAND = FilterSpec(4.0, 45.0)
FNIRS_BAND = FilterSpec(0.01, 0.2)

# Molar extinction coefficients in 1/(mM*cm); rows are 760 nm and 850 nm,
# columns HbO and HbR.
DEFAULT_EXTINCTION = ((1.4866, 3.8437), (2.5264, 1.7986))
WAVELENGTHS_NM = (760, 850)


@dataclass(frozen=True)
class MbllParams:
    extinction: Tuple[Tuple[float, float], Tuple[float, float]] = DEFAULT_EXTINCTION
    dpf: Tuple[float, float] = (6.0, 6.0)
    distance_cm: float = 3.0

    def validate(self) -> "MbllParams":
        matrix = self.matrix
        if matrix.shape != (2, 2):
            raise ConfigError(f"must be 2x2, got shape {matrix.shape}", field="extinction")
        if not np.isfinite(np.linalg.cond(matrix)) or np.linalg.cond(matrix) > 1e12:
            raise ParameterError("extinction matrix is singular", field="extinction")
        if len(self.dpf) != 2 or any(d <= 0 for d in self.dpf):
            raise ConfigError(f"need two positive factors, got {self.dpf}", field="dpf")
        if not self.distance_cm > 0:
            raise ConfigError(f"must be > 0, got {self.distance_cm}", field="distance_cm")
        return self

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.extinction, dtype=np.float64)

    @property
    def pathlength(self) -> np.ndarray:
        """Effective optical pathlength per wavelength (cm)."""
        return self.distance_cm * np.asarray(self.dpf, dtype=np.float64)


@dataclass(frozen=True)
class RoiMap:
    """
    Assignment of fNIRS channels to regions of interest.

    Attributes:
        roi_names: names of all regions, indexed by channel_to_roi
        channel_to_roi: ROI index of every channel
        excluded_rois: names of regions that produce no output row
        bad_channels: channel indices replaced by their ROI's good-channel mean
    """

    channel_to_roi: Tuple[int, ...]
    roi_names: Tuple[str, ...] = ALL_ROI_NAMES
    excluded_rois: FrozenSet[str] = frozenset({VISUAL_CORTEX})
    bad_channels: FrozenSet[int] = frozenset()

    def validate(self) -> "RoiMap":
        for channel, roi in enumerate(self.channel_to_roi):
            if not 0 <= roi < len(self.roi_names):
                raise ConfigError(f"channel {channel} maps to unknown ROI index {roi}", field="channel_to_roi")
        unknown = set(self.excluded_rois) - set(self.roi_names)
        if unknown:
            raise ConfigError(f"unknown ROI names {sorted(unknown)}", field="excluded_rois")
        for channel in self.bad_channels:
            if not 0 <= channel < len(self.channel_to_roi):
                raise ConfigError(f"bad channel {channel} does not exist", field="bad_channels")
        return self

    @property
    def retained(self) -> Tuple[str, ...]:
        return tuple(name for name in self.roi_names if name not in self.excluded_rois)


# Filtering and resampling.

def bandpass_filter(x: np.ndarray, spec: FilterSpec, fs: float) -> np.ndarray:
    """
    Zero-phase band-pass of every row of x [C x T].

    Rows are reflection-padded by 3 x order samples, filtered forward and backward
    with Gustafsson initial conditions, then trimmed back to T.
    """
    x = np.asarray(x, dtype=np.float64)
    b, a = spec.coefficients(fs)
    pad = 3 * spec.order
    if x.shape[-1] <= pad:
        raise LengthError(f"signal of {x.shape[-1]} samples is too short for a filter of order {spec.order}")
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)], mode="reflect")
    if spec.zero_phase:
        y = sps.filtfilt(b, a, padded, axis=-1, method="gust")
    else:
        y = sps.lfilter(b, a, padded, axis=-1)
    return y[..., pad:-pad]


def downsample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Anti-alias low-pass at 0.4 x fs_out, then keep every (fs_in / fs_out)-th sample."""
    ratio = fs_in / fs_out
    factor = int(round(ratio))
    if fs_out <= 0 or factor < 1 or abs(ratio - factor) > 1e-9:
        raise ParameterError(f"fs_in {fs_in} Hz is not an integer multiple of fs_out {fs_out} Hz", field="fs_out")
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy()
    smoothed = bandpass_filter(x, FilterSpec(0.0, 0.4 * fs_out, order=8), fs_in)
    n_out = x.shape[-1] // factor
    return smoothed[..., ::factor][..., :n_out]


# Optical density to concentration.

def od_to_concentration(delta_od: np.ndarray, p: MbllParams) -> np.ndarray:
    """Solves extinction . dc = dOD / pathlength for [..., 2] optical densities; returns [..., 2] (HbO, HbR)."""
    p.validate()
    delta_od = np.asarray(delta_od, dtype=np.float64)
    if delta_od.shape[-1] != 2:
        raise ShapeError(f"optical densities need a trailing wavelength axis of 2, got shape {delta_od.shape}")
    scaled = delta_od / p.pathlength
    return np.linalg.solve(p.matrix, scaled.reshape(-1, 2).T).T.reshape(delta_od.shape)


def concentration_to_od(delta_c: np.ndarray, p: MbllParams) -> np.ndarray:
    """Inverse of od_to_concentration."""
    delta_c = np.asarray(delta_c, dtype=np.float64)
    return (delta_c @ p.matrix.T) * p.pathlength


def mbll_convert(intensity: np.ndarray, baseline: np.ndarray, p: MbllParams) -> np.ndarray:
    """Raw intensities [C x T x 2] and baselines [C x 2] to delta-HbO [C x T]."""
    intensity = np.asarray(intensity, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if intensity.ndim != 3 or intensity.shape[-1] != 2 or baseline.shape != (intensity.shape[0], 2):
        raise ShapeError(f"intensity {intensity.shape} and baseline {baseline.shape} do not match [C x T x 2]/[C x 2]")
    if np.any(intensity <= 0) or np.any(baseline <= 0):
        raise DomainError("intensities and baselines must be strictly positive")
    delta_od = -np.log10(intensity / baseline[:, None, :])
    return od_to_concentration(delta_od, p)[..., 0]


# Epoch-level operations.

def zscore_epoch(epoch: np.ndarray) -> np.ndarray:
    """Per-channel z-score with the n-1 standard deviation; constant channels become zeros."""
    epoch = np.asarray(epoch, dtype=np.float64)
    if epoch.shape[-1] < 2:
        raise LengthError(f"z-scoring needs at least 2 samples, got {epoch.shape[-1]}")
    out = np.zeros_like(epoch)
    for c, row in enumerate(epoch):
        if np.all(row == row[0]):
            continue
        out[c] = (row - row.mean()) / row.std(ddof=1)
    return out


def segment_epochs(continuous: np.ndarray, event_starts: Sequence[int], duration_s: float,
                   fs: float) -> List[np.ndarray]:
    n = samples_for(duration_s, fs)
    total = continuous.shape[-1]
    epochs = []
    for i, start in enumerate(event_starts):
        if start < 0 or start + n > total:
            raise DataRangeError(f"event {i} window [{start}, {start + n}) lies outside the {total}-sample signal")
        epochs.append(np.array(continuous[..., start:start + n]))
    return epochs


def sliding_windows(x: np.ndarray, window: int, overlap_fraction: float = 0.5) -> List[np.ndarray]:
    """Windows at 0, stride, 2*stride, ...; a final partial window is discarded."""
    total = x.shape[-1]
    if window < 1 or window > total:
        raise ParameterError(f"window {window} does not fit a signal of {total} samples", field="window")
    if not 0 <= overlap_fraction < 1:
        raise ParameterError(f"must lie in [0, 1), got {overlap_fraction}", field="overlap_fraction")
    stride = max(1, int(window * (1 - overlap_fraction)))
    return [x[..., start:start + window] for start in range(0, total - window + 1, stride)]


def map_rois(fnirs: np.ndarray, roi_map: RoiMap) -> np.ndarray:
    """Channel rows [C_f x T] to retained ROI rows [R x T], imputing bad channels from their ROI."""
    roi_map.validate()
    fnirs = np.asarray(fnirs, dtype=np.float64)
    if fnirs.shape[0] != len(roi_map.channel_to_roi):
        raise ShapeError(f"{fnirs.shape[0]} fNIRS channels but the ROI map covers {len(roi_map.channel_to_roi)}")
    channel_to_roi = np.asarray(roi_map.channel_to_roi)
    rows = []
    for index, name in enumerate(roi_map.roi_names):
        if name in roi_map.excluded_rois:
            continue
        channels = np.flatnonzero(channel_to_roi == index)
        good = [c for c in channels if c not in roi_map.bad_channels]
        if not good:
            raise ImputationError(f"ROI {name!r} has no good channel to impute from")
        imputed = fnirs[channels].copy()
        fill = fnirs[good].mean(axis=0)
        for i, c in enumerate(channels):
            if c in roi_map.bad_channels:
                imputed[i] = fill
        rows.append(imputed.mean(axis=0))
    return np.stack(rows) if rows else np.zeros((0, fnirs.shape[1]))


# Whole-session chain.

@dataclass(frozen=True)
class PreprocessConfig:
    eeg_band: FilterSpec = EEG_BAND
    fnirs_band: FilterSpec = FNIRS_BAND
    fs_eeg_target: float = 250.0
    epoch_seconds: float = 7.0
    mbll: MbllParams = field(default_factory=MbllParams)
    excluded_rois: FrozenSet[str] = frozenset({VISUAL_CORTEX})

    def validate(self) -> "PreprocessConfig":
        self.eeg_band.validate_for(self.fs_eeg_target)
        self.fnirs_band.validate()
        self.mbll.validate()
        if not self.epoch_seconds > 0:
            raise ConfigError(f"must be > 0, got {self.epoch_seconds}", field="epoch_seconds")
        return self


def preprocess_recording(raw: RawRecording, cfg: PreprocessConfig) -> List[MultimodalEpoch]:
    """
    EEG: band-pass, downsample, segment, z-score.
    fNIRS: MBLL, band-pass, ROI mapping with imputation, segment, z-score.
    """
    cfg.validate()
    eeg = bandpass_filter(raw.eeg, cfg.eeg_band, raw.fs_eeg)
    eeg = downsample(eeg, raw.fs_eeg, cfg.fs_eeg_target)
    hbo = mbll_convert(raw.intensity, raw.baseline, cfg.mbll)
    hbo = bandpass_filter(hbo, cfg.fnirs_band, raw.fs_fnirs)
    roi_map = RoiMap(tuple(raw.channel_to_roi), tuple(raw.roi_names), frozenset(cfg.excluded_rois),
                     frozenset(raw.bad_channels))
    rois = map_rois(hbo, roi_map)
    eeg_starts = [int(round(t * cfg.fs_eeg_target)) for t in raw.onsets_s]
    fnirs_starts = [int(round(t * raw.fs_fnirs)) for t in raw.onsets_s]
    eeg_epochs = segment_epochs(eeg, eeg_starts, cfg.epoch_seconds, cfg.fs_eeg_target)
    fnirs_epochs = segment_epochs(rois, fnirs_starts, cfg.epoch_seconds, raw.fs_fnirs)
    epochs = []
    for index, (e, f) in enumerate(zip(eeg_epochs, fnirs_epochs)):
        epochs.append(MultimodalEpoch(zscore_epoch(e).astype(np.float32), zscore_epoch(f).astype(np.float32),
                                      raw.subject_id, raw.group, raw.cues[index], raw.craving[index], index))
    logger.debug("Preprocess: subject %d (%s) -> %d epochs", raw.subject_id, raw.group.value, len(epochs))
    return epochs


def preprocess_recordings(raws: Sequence[RawRecording], cfg: PreprocessConfig) -> Dataset:
    """Runs the chain over every session and assembles an imported Dataset."""
    if not raws:
        raise ConfigError("no recordings to preprocess", field="recordings")
    first = raws[0]
    epochs = []
    subjects = {}
    for raw in raws:
        if raw.fs_fnirs != first.fs_fnirs or tuple(raw.eeg_channels) != tuple(first.eeg_channels):
            raise ShapeError(f"recording of subject {raw.subject_id} differs in layout from the first recording")
        epochs.extend(preprocess_recording(raw, cfg))
        subjects[raw.subject_id] = "HC" if raw.group == Group.HC else "MUD"
    retained = tuple(name for name in first.roi_names if name not in cfg.excluded_rois)
    logger.info("Preprocess: %d sessions -> %d epochs", len(raws), len(epochs))
    return Dataset(tuple(epochs), cfg.fs_eeg_target, first.fs_fnirs, cfg.epoch_seconds, tuple(first.eeg_channels),
                   retained, dict(sorted(subjects.items())), Provenance.IMPORTED, None)
