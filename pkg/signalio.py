"""
Paired EEG/fNIRS epochs, their on-disk format, and the synthetic generator that
stands in for private recordings.

A dataset directory holds:
    manifest.json   counts, rates, channel/ROI names, subject table, epoch records
    eeg.f32le       [epoch][channel][time] little-endian float32
    fnirs.f32le     same layout for the fNIRS rows
    checksums.txt   "<sha256>  <file>" per blob
"""

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from errors import ConfigError, CorruptDatasetError, DataError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
EEG_BLOB = "eeg.f32le"
FNIRS_BLOB = "fnirs.f32le"
CHECKSUM_FILE = "checksums.txt"

ALL_ROI_NAMES = (
    "DLPFC",
    "FEF",
    "Motor Cortex",
    "Left Broca",
    "Right Broca",
    "Left Temporal",
    "Right Temporal",
    "Visual Cortex",
)
VISUAL_CORTEX = "Visual Cortex"
MODEL_ROI_NAMES = tuple(name for name in ALL_ROI_NAMES if name != VISUAL_CORTEX)


class Group(str, Enum):
    HC = "HC"
    MBT = "MBT"
    MAT = "MAT"


class Cue(str, Enum):
    NEUTRAL = "neutral"
    METH = "meth"


class CravingLevel(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class Provenance(str, Enum):
    SYNTHETIC = "synthetic"
    IMPORTED = "imported"


CRAVING_CYCLE = (CravingLevel.HIGH, CravingLevel.MEDIUM, CravingLevel.LOW)
FNIRS_RESPONSES = ("canonical", "ramp")


@dataclass(frozen=True, eq=False)
class MultimodalEpoch:
    """
    One time-aligned pair of EEG and fNIRS epochs with its labels.

    Attributes:
        eeg: [C_e x T_e] float32 samples
        fnirs: [C_f x T_f] float32 samples (one row per retained ROI)
        subject_id: person id, shared by the MBT and MAT sessions of one patient
        group_label: HC, MBT or MAT
        cue_label: neutral or meth
        craving_level: level of the meth cue shown (None for neutral cues)
        epoch_index: trial position within the subject's session
    """

    eeg: np.ndarray
    fnirs: np.ndarray
    subject_id: int
    group_label: Group
    cue_label: Cue
    craving_level: Optional[CravingLevel]
    epoch_index: int

    def __post_init__(self):
        if self.subject_id < 0:
            raise DataError(f"subject_id must be >= 0, got {self.subject_id}")
        if self.eeg.ndim != 2 or self.fnirs.ndim != 2:
            raise DataError(f"epoch arrays must be 2-D, got {self.eeg.shape} and {self.fnirs.shape}")
        if not (np.all(np.isfinite(self.eeg)) and np.all(np.isfinite(self.fnirs))):
            raise DataError(f"epoch {self.epoch_index} of subject {self.subject_id} contains NaN/Inf")

    def __eq__(self, other):
        if not isinstance(other, MultimodalEpoch):
            return NotImplemented
        return (self.subject_id == other.subject_id
                and self.group_label == other.group_label
                and self.cue_label == other.cue_label
                and self.craving_level == other.craving_level
                and self.epoch_index == other.epoch_index
                and self.eeg.dtype == other.eeg.dtype
                and np.array_equal(self.eeg, other.eeg)
                and np.array_equal(self.fnirs, other.fnirs))

    def record(self) -> dict:
        """Manifest record (everything but the samples)."""
        return {
            "subject_id": self.subject_id,
            "group_label": self.group_label.value,
            "cue_label": self.cue_label.value,
            "craving_level": None if self.craving_level is None else self.craving_level.value,
            "epoch_index": self.epoch_index,
        }


def samples_for(seconds: float, fs: float) -> int:
    return int(round(seconds * fs))


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Ordered epochs sharing rates and channel layout.

    Attributes:
        epochs: the epochs, in manifest order
        fs_eeg, fs_fnirs: sampling rates in Hz
        epoch_seconds: epoch duration; fixes T_e and T_f
        eeg_channels: EEG channel names
        roi_names: names of the fNIRS rows
        subjects: subject index table, subject_id -> cohort ("HC" or "MUD")
        provenance: synthetic or imported
        seed: generator seed (synthetic only)
    """

    epochs: Tuple[MultimodalEpoch, ...]
    fs_eeg: float
    fs_fnirs: float
    epoch_seconds: float
    eeg_channels: Tuple[str, ...]
    roi_names: Tuple[str, ...]
    subjects: Dict[int, str]
    provenance: Provenance = Provenance.SYNTHETIC
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(self.epochs))
        expected_eeg = (len(self.eeg_channels), self.eeg_samples)
        expected_fnirs = (len(self.roi_names), self.fnirs_samples)
        for epoch in self.epochs:
            if epoch.eeg.shape != expected_eeg or epoch.fnirs.shape != expected_fnirs:
                raise DataError(f"epoch shapes {epoch.eeg.shape}/{epoch.fnirs.shape} differ from dataset "
                                f"layout {expected_eeg}/{expected_fnirs}")
            if epoch.subject_id not in self.subjects:
                raise DataError(f"subject {epoch.subject_id} missing from the subject table")

    @property
    def eeg_samples(self) -> int:
        return samples_for(self.epoch_seconds, self.fs_eeg)

    @property
    def fnirs_samples(self) -> int:
        return samples_for(self.epoch_seconds, self.fs_fnirs)

    def __len__(self):
        return len(self.epochs)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.fs_eeg == other.fs_eeg
                and self.fs_fnirs == other.fs_fnirs
                and self.epoch_seconds == other.epoch_seconds
                and self.eeg_channels == other.eeg_channels
                and self.roi_names == other.roi_names
                and self.subjects == other.subjects
                and self.provenance == other.provenance
                and self.seed == other.seed
                and len(self.epochs) == len(other.epochs)
                and all(a == b for a, b in zip(self.epochs, other.epochs)))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return replace(self, epochs=tuple(self.epochs[i] for i in indices))

    def where(self, predicate: Callable[[MultimodalEpoch], bool]) -> "Dataset":
        return replace(self, epochs=tuple(e for e in self.epochs if predicate(e)))

    def subject_ids(self) -> np.ndarray:
        return np.array([e.subject_id for e in self.epochs], dtype=np.int64)


@dataclass(frozen=True)
class SynthConfig:
    """
    Parameters of the synthetic paired-signal generator.

    class_effect_split is the share of the discriminative signal carried by EEG;
    the remainder goes to fNIRS. fnirs_response picks the fNIRS waveform: "canonical"
    convolves the burst boxcar with the double-gamma HRF, "ramp" rises over
    fnirs_rise_seconds and holds until the epoch ends.
    """

    n_subjects_per_group: int = 17
    epochs_per_subject: int = 30
    fs_eeg: float = 250.0
    fs_fnirs: float = 10.0
    epoch_seconds: float = 7.0
    fnirs_onset_delay: float = 2.8
    class_effect_split: float = 0.5
    noise_sd: float = 1.0
    subject_effect_sd: float = 0.2
    seed: int = 0
    n_eeg_channels: int = 8
    effect_amplitude: float = 1.0
    common_amplitude: float = 1.0
    burst_seconds: float = 1.0
    burst_hz: float = 10.0
    mat_shift_toward_hc: float = 0.7
    fnirs_response: str = "canonical"
    fnirs_rise_seconds: float = 0.3

    def validate(self) -> "SynthConfig":
        for name in ("n_subjects_per_group", "epochs_per_subject", "n_eeg_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", field=name)
        for name in ("fs_eeg", "fs_fnirs", "epoch_seconds", "burst_seconds", "burst_hz", "fnirs_rise_seconds"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"must be > 0, got {getattr(self, name)}", field=name)
        if not 0 <= self.fnirs_onset_delay < self.epoch_seconds:
            raise ConfigError(f"must lie in [0, epoch_seconds), got {self.fnirs_onset_delay}",
                              field="fnirs_onset_delay")
        if not 0 <= self.class_effect_split <= 1:
            raise ConfigError(f"must lie in [0, 1], got {self.class_effect_split}", field="class_effect_split")
        if not 0 <= self.mat_shift_toward_hc <= 1:
            raise ConfigError(f"must lie in [0, 1], got {self.mat_shift_toward_hc}", field="mat_shift_toward_hc")
        for name in ("noise_sd", "subject_effect_sd", "effect_amplitude", "common_amplitude"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", field=name)
        if self.burst_hz >= self.fs_eeg / 2:
            raise ConfigError(f"must be below fs_eeg/2 = {self.fs_eeg / 2}, got {self.burst_hz}", field="burst_hz")
        if self.fnirs_response not in FNIRS_RESPONSES:
            raise ConfigError(f"must be one of {FNIRS_RESPONSES}, got {self.fnirs_response!r}", field="fnirs_response")
        return self


# Signal shapes.

def burst_envelope(t: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    inside = (t >= 0) & (t < cfg.burst_seconds)
    return np.where(inside, np.sin(np.pi * np.clip(t, 0, None) / cfg.burst_seconds) ** 2, 0.0)


def burst_waveform(t: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Cue-locked oscillatory burst with a sin^2 envelope starting at t = 0."""
    return burst_envelope(t, cfg) * np.sin(2 * np.pi * cfg.burst_hz * t)


def hemodynamic_kernel(t: np.ndarray) -> np.ndarray:
    """Canonical double-gamma HRF (shapes 6 and 16, undershoot ratio 1/6); zero for t <= 0."""
    return stats.gamma.pdf(t, 6.0) - stats.gamma.pdf(t, 16.0) / 6.0


def _boxcar_response(t: np.ndarray, burst_seconds: float, delay: float) -> np.ndarray:
    steps = 64
    du = burst_seconds / steps
    u = (np.arange(steps) + 0.5) * du
    return hemodynamic_kernel(t[:, None] - delay - u[None, :]).sum(axis=1) * du


def ramp_response(t: np.ndarray, delay: float, rise: float, hold: float) -> np.ndarray:
    """Raised-cosine step from 0 at `delay` to 1 at `delay + rise`, falling back over `rise` after `hold`."""
    up = 0.5 - 0.5 * np.cos(np.pi * np.clip((t - delay) / rise, 0.0, 1.0))
    down = 0.5 + 0.5 * np.cos(np.pi * np.clip((t - hold) / rise, 0.0, 1.0))
    return up * down


def hemodynamic_response(t: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """
    Boxcar of the burst duration convolved with the HRF and shifted by the onset
    delay, scaled to unit peak; or the ramp waveform when cfg.fnirs_response is
    "ramp". Exactly zero up to the delay either way.
    """
    if cfg.fnirs_response == "ramp":
        return ramp_response(t, cfg.fnirs_onset_delay, cfg.fnirs_rise_seconds, cfg.epoch_seconds)
    reference = _boxcar_response(np.linspace(0.0, 40.0, 4001), cfg.burst_seconds, 0.0)
    return _boxcar_response(t, cfg.burst_seconds, cfg.fnirs_onset_delay) / reference.max()


def group_effect(group: Group, cfg: SynthConfig) -> float:
    """Class-effect amplitude per group; MAT moves toward HC by mat_shift_toward_hc."""
    if group == Group.HC:
        return 0.0
    if group == Group.MBT:
        return 1.0
    return 1.0 - cfg.mat_shift_toward_hc


def cue_gain(cue: Cue, craving: Optional[CravingLevel]) -> float:
    if cue == Cue.NEUTRAL:
        return 0.5
    return {CravingLevel.LOW: 0.75, CravingLevel.MEDIUM: 1.0, CravingLevel.HIGH: 1.25}[craving]


def _unit_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    pattern = rng.normal(size=size)
    return pattern / np.sqrt(np.mean(pattern ** 2))


@dataclass(frozen=True)
class SignalModel:
    """Spatial patterns and waveforms shared by every subject of one generator run."""

    eeg_common: np.ndarray
    eeg_class: np.ndarray
    fnirs_common: np.ndarray
    fnirs_class: np.ndarray

    @staticmethod
    def draw(rng: np.random.Generator, n_eeg: int, n_fnirs: int) -> "SignalModel":
        return SignalModel(_unit_pattern(rng, n_eeg), _unit_pattern(rng, n_eeg),
                           _unit_pattern(rng, n_fnirs), _unit_pattern(rng, n_fnirs))

    def clean_eeg(self, t: np.ndarray, cfg: SynthConfig, amplitude: float) -> np.ndarray:
        wave = burst_waveform(t, cfg)
        discriminative = cfg.class_effect_split * amplitude * cfg.effect_amplitude
        return (cfg.common_amplitude * self.eeg_common[:, None] + discriminative * self.eeg_class[:, None]) * wave

    def clean_fnirs(self, t: np.ndarray, cfg: SynthConfig, amplitude: float) -> np.ndarray:
        wave = hemodynamic_response(t, cfg)
        discriminative = (1.0 - cfg.class_effect_split) * amplitude * cfg.effect_amplitude
        return (cfg.common_amplitude * self.fnirs_common[:, None]
                + discriminative * self.fnirs_class[:, None]) * wave


@dataclass(frozen=True)
class SubjectEffect:
    """Per-subject channel offsets and amplitude scaling."""

    eeg_offset: np.ndarray
    fnirs_offset: np.ndarray
    gain: float

    @staticmethod
    def draw(rng: np.random.Generator, n_eeg: int, n_fnirs: int, sd: float) -> "SubjectEffect":
        eeg_offset = rng.normal(0.0, sd, size=n_eeg)
        fnirs_offset = rng.normal(0.0, sd, size=n_fnirs)
        gain = max(0.1, 1.0 + sd * rng.normal())
        return SubjectEffect(eeg_offset, fnirs_offset, gain)


def subject_table(cfg: SynthConfig) -> Dict[int, str]:
    """HC subjects take ids 0..n-1, MUD subjects n..2n-1."""
    n = cfg.n_subjects_per_group
    table = {i: "HC" for i in range(n)}
    table.update({n + i: "MUD" for i in range(n)})
    return table


def sessions_for(cohort: str) -> Tuple[Group, ...]:
    return (Group.HC,) if cohort == "HC" else (Group.MBT, Group.MAT)


def trial_labels(index: int) -> Tuple[Cue, Optional[CravingLevel]]:
    """Alternating neutral/meth cues; meth cues cycle high, medium, low."""
    if index % 2 == 0:
        return Cue.NEUTRAL, None
    return Cue.METH, CRAVING_CYCLE[(index // 2) % len(CRAVING_CYCLE)]


def eeg_channel_names(n: int) -> Tuple[str, ...]:
    return tuple(f"E{i + 1:02d}" for i in range(n))


def generate_synthetic_dataset(cfg: SynthConfig) -> Dataset:
    """Deterministic function of cfg (including cfg.seed)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_eeg = cfg.n_eeg_channels
    n_fnirs = len(MODEL_ROI_NAMES)
    model = SignalModel.draw(rng, n_eeg, n_fnirs)
    t_eeg = np.arange(samples_for(cfg.epoch_seconds, cfg.fs_eeg)) / cfg.fs_eeg
    t_fnirs = np.arange(samples_for(cfg.epoch_seconds, cfg.fs_fnirs)) / cfg.fs_fnirs
    table = subject_table(cfg)
    epochs: List[MultimodalEpoch] = []
    for subject_id, cohort in table.items():
        effect = SubjectEffect.draw(rng, n_eeg, n_fnirs, cfg.subject_effect_sd)
        for group in sessions_for(cohort):
            for index in range(cfg.epochs_per_subject):
                cue, craving = trial_labels(index)
                amplitude = group_effect(group, cfg) * cue_gain(cue, craving)
                eeg = effect.gain * model.clean_eeg(t_eeg, cfg, amplitude) + effect.eeg_offset[:, None]
                fnirs = effect.gain * model.clean_fnirs(t_fnirs, cfg, amplitude) + effect.fnirs_offset[:, None]
                eeg = eeg + rng.normal(0.0, cfg.noise_sd, size=eeg.shape)
                fnirs = fnirs + rng.normal(0.0, cfg.noise_sd, size=fnirs.shape)
                epochs.append(MultimodalEpoch(eeg.astype(np.float32), fnirs.astype(np.float32), subject_id,
                                              group, cue, craving, index))
    logger.info("Generator: %d epochs for %d subjects (seed %d)", len(epochs), len(table), cfg.seed)
    return Dataset(tuple(epochs), cfg.fs_eeg, cfg.fs_fnirs, cfg.epoch_seconds, eeg_channel_names(n_eeg),
                   MODEL_ROI_NAMES, table, Provenance.SYNTHETIC, cfg.seed)


# On-disk format.

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _blob(arrays: Sequence[np.ndarray]) -> bytes:
    if not arrays:
        return b""
    return np.ascontiguousarray(np.stack(arrays), dtype="<f4").tobytes()


def write_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "provenance": ds.provenance.value,
        "seed": ds.seed,
        "fs_eeg": ds.fs_eeg,
        "fs_fnirs": ds.fs_fnirs,
        "epoch_seconds": ds.epoch_seconds,
        "n_epochs": len(ds.epochs),
        "eeg_channels": list(ds.eeg_channels),
        "roi_names": list(ds.roi_names),
        "eeg_samples": ds.eeg_samples,
        "fnirs_samples": ds.fnirs_samples,
        "subjects": [{"subject_id": sid, "cohort": cohort} for sid, cohort in ds.subjects.items()],
        "epochs": [e.record() for e in ds.epochs],
    }
    blobs = {EEG_BLOB: _blob([e.eeg for e in ds.epochs]), FNIRS_BLOB: _blob([e.fnirs for e in ds.epochs])}
    for name, data in blobs.items():
        (path / name).write_bytes(data)
    (path / CHECKSUM_FILE).write_text("".join(f"{_sha256(data)}  {name}\n" for name, data in blobs.items()))
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    logger.info("Dataset: wrote %d epochs to %s", len(ds.epochs), path)


def _read_checksums(path: Path) -> Dict[str, str]:
    sums = {}
    for line in (path / CHECKSUM_FILE).read_text().splitlines():
        if not line.strip():
            continue
        digest, name = line.split(None, 1)
        sums[name.strip()] = digest
    return sums


def _read_blob(path: Path, name: str, sums: Dict[str, str], shape: Tuple[int, int, int]) -> np.ndarray:
    data = (path / name).read_bytes()
    if sums.get(name) != _sha256(data):
        raise CorruptDatasetError(f"checksum mismatch for {name}")
    expected = int(np.prod(shape)) * 4
    if len(data) != expected:
        raise CorruptDatasetError(f"{name} holds {len(data)} bytes, manifest implies {expected} for shape {shape}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / MANIFEST_FILE).read_text())
    sums = _read_checksums(path)
    try:
        n = manifest["n_epochs"]
        records = manifest["epochs"]
        if len(records) != n:
            raise CorruptDatasetError(f"manifest lists {len(records)} epochs but n_epochs is {n}")
        eeg_shape = (n, len(manifest["eeg_channels"]), manifest["eeg_samples"])
        fnirs_shape = (n, len(manifest["roi_names"]), manifest["fnirs_samples"])
        eeg = _read_blob(path, EEG_BLOB, sums, eeg_shape)
        fnirs = _read_blob(path, FNIRS_BLOB, sums, fnirs_shape)
        epochs = tuple(
            MultimodalEpoch(eeg[i], fnirs[i], r["subject_id"], Group(r["group_label"]), Cue(r["cue_label"]),
                            None if r["craving_level"] is None else CravingLevel(r["craving_level"]),
                            r["epoch_index"])
            for i, r in enumerate(records)
        )
        subjects = {s["subject_id"]: s["cohort"] for s in manifest["subjects"]}
        ds = Dataset(epochs, manifest["fs_eeg"], manifest["fs_fnirs"], manifest["epoch_seconds"],
                     tuple(manifest["eeg_channels"]), tuple(manifest["roi_names"]), subjects,
                     Provenance(manifest["provenance"]), manifest["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptDatasetError):
            raise
        raise CorruptDatasetError(f"malformed manifest in {path}: {exc}") from exc
    if ds.eeg_samples != manifest["eeg_samples"] or ds.fnirs_samples != manifest["fnirs_samples"]:
        raise CorruptDatasetError("sample counts disagree with epoch_seconds and sampling rates")
    logger.info("Dataset: read %d epochs from %s", len(epochs), path)
    return ds


# Raw continuous sessions.

RECORDING_INDEX = "recordings.json"


@dataclass(frozen=True, eq=False)
class RawRecording:
    """
    One continuous session before preprocessing.

    Attributes:
        eeg: [C_e x T] raw EEG at fs_eeg
        intensity: [C_f x T_f x 2] detected light at 760 and 850 nm
        baseline: [C_f x 2] reference intensities
        onsets_s: cue onset times in seconds
        channel_to_roi: ROI index (into roi_names) of every fNIRS channel
        bad_channels: fNIRS channels flagged as unusable
    """

    subject_id: int
    group: Group
    eeg: np.ndarray
    fs_eeg: float
    intensity: np.ndarray
    baseline: np.ndarray
    fs_fnirs: float
    onsets_s: np.ndarray
    cues: Tuple[Cue, ...]
    craving: Tuple[Optional[CravingLevel], ...]
    channel_to_roi: Tuple[int, ...]
    bad_channels: Tuple[int, ...]
    eeg_channels: Tuple[str, ...]
    roi_names: Tuple[str, ...] = ALL_ROI_NAMES

    def __post_init__(self):
        if len(self.onsets_s) != len(self.cues) or len(self.cues) != len(self.craving):
            raise DataError("onsets, cues and craving levels differ in length")
        if self.intensity.shape[0] != len(self.channel_to_roi):
            raise DataError(f"{self.intensity.shape[0]} fNIRS channels but {len(self.channel_to_roi)} ROI entries")

    @property
    def duration_s(self) -> float:
        return self.eeg.shape[-1] / self.fs_eeg


def _session_signal(t: np.ndarray, onsets: Sequence[float], amplitudes: Sequence[float],
                    shape_fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    out = np.zeros_like(t)
    for onset, amplitude in zip(onsets, amplitudes):
        out += amplitude * shape_fn(t - onset)
    return out


def simulate_recording(cfg: SynthConfig, subject_id: int, group: Group, raw_factor: int = 4,
                       channels_per_roi: int = 2, bad_channels: Sequence[int] = ()) -> RawRecording:
    """
    Continuous session of cfg.epochs_per_subject cue trials, one every
    2 x epoch_seconds (cue, then fixation rest).

    EEG is sampled at raw_factor x fs_eeg with slow drift and interference above
    the target Nyquist rate. fNIRS intensities come from inverting the
    Modified Beer-Lambert Law over every ROI (Visual Cortex included) with
    channels_per_roi channels each.
    """
    from dsp import MbllParams, concentration_to_od

    cfg.validate()
    if raw_factor < 1 or channels_per_roi < 1:
        raise ConfigError("raw_factor and channels_per_roi must be >= 1", field="raw_factor")
    session = 0 if group != Group.MAT else 1
    rng = np.random.default_rng([cfg.seed, subject_id, session])
    fs_raw = raw_factor * cfg.fs_eeg
    n_trials = cfg.epochs_per_subject
    lead = cfg.epoch_seconds
    onsets = lead + 2 * cfg.epoch_seconds * np.arange(n_trials)
    duration = lead + 2 * cfg.epoch_seconds * n_trials + cfg.epoch_seconds
    t_eeg = np.arange(samples_for(duration, fs_raw)) / fs_raw
    t_fnirs = np.arange(samples_for(duration, cfg.fs_fnirs)) / cfg.fs_fnirs
    labels = [trial_labels(i) for i in range(n_trials)]
    amplitudes = [group_effect(group, cfg) * cue_gain(cue, craving) for cue, craving in labels]

    model = SignalModel.draw(np.random.default_rng(cfg.seed), cfg.n_eeg_channels, len(ALL_ROI_NAMES))
    effect = SubjectEffect.draw(rng, cfg.n_eeg_channels, len(ALL_ROI_NAMES), cfg.subject_effect_sd)

    burst = _session_signal(t_eeg, onsets, np.ones(n_trials), lambda t: burst_waveform(t, cfg))
    burst_class = _session_signal(t_eeg, onsets, amplitudes, lambda t: burst_waveform(t, cfg))
    eeg = effect.gain * (cfg.common_amplitude * model.eeg_common[:, None] * burst
                         + cfg.class_effect_split * cfg.effect_amplitude * model.eeg_class[:, None] * burst_class)
    drift = 0.5 * np.sin(2 * np.pi * 0.05 * t_eeg + rng.uniform(0, 2 * np.pi, size=(cfg.n_eeg_channels, 1)))
    interference = 0.5 * np.sin(2 * np.pi * 0.45 * fs_raw * t_eeg)
    eeg = eeg + effect.eeg_offset[:, None] + drift + interference
    eeg = eeg + rng.normal(0.0, cfg.noise_sd, size=eeg.shape)

    hrf = _session_signal(t_fnirs, onsets, np.ones(n_trials), lambda t: hemodynamic_response(t, cfg))
    hrf_class = _session_signal(t_fnirs, onsets, amplitudes, lambda t: hemodynamic_response(t, cfg))
    roi_signal = effect.gain * (cfg.common_amplitude * model.fnirs_common[:, None] * hrf
                                + (1 - cfg.class_effect_split) * cfg.effect_amplitude
                                * model.fnirs_class[:, None] * hrf_class)
    roi_signal = roi_signal + 0.5 * np.sin(2 * np.pi * 0.003 * t_fnirs)
    channel_to_roi = tuple(r for r in range(len(ALL_ROI_NAMES)) for _ in range(channels_per_roi))
    hbo = roi_signal[list(channel_to_roi)]
    hbo = hbo + rng.normal(0.0, cfg.noise_sd, size=hbo.shape)
    # Model units map to micromolar; concentrations are in mM.
    delta_c = np.stack([hbo, -0.3 * hbo], axis=-1) * 1e-3
    baseline = rng.uniform(0.5, 1.5, size=(len(channel_to_roi), 2))
    intensity = baseline[:, None, :] * 10.0 ** (-concentration_to_od(delta_c, MbllParams()))
    for c in bad_channels:
        intensity[c] = baseline[c] * np.exp(rng.normal(0.0, 0.5, size=intensity[c].shape))

    return RawRecording(subject_id, group, eeg, fs_raw, intensity, baseline, cfg.fs_fnirs, onsets,
                        tuple(cue for cue, _ in labels), tuple(level for _, level in labels), channel_to_roi,
                        tuple(sorted(bad_channels)), eeg_channel_names(cfg.n_eeg_channels))


def write_recordings(recordings: Sequence[RawRecording], path: Union[str, Path]) -> None:
    """One .npz per session plus a JSON index of the metadata."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    for raw in recordings:
        name = f"{raw.subject_id:03d}-{raw.group.value}.npz"
        np.savez(path / name, eeg=raw.eeg, intensity=raw.intensity, baseline=raw.baseline, onsets_s=raw.onsets_s)
        index.append({
            "file": name,
            "subject_id": raw.subject_id,
            "group": raw.group.value,
            "fs_eeg": raw.fs_eeg,
            "fs_fnirs": raw.fs_fnirs,
            "cues": [c.value for c in raw.cues],
            "craving": [None if c is None else c.value for c in raw.craving],
            "channel_to_roi": list(raw.channel_to_roi),
            "bad_channels": list(raw.bad_channels),
            "eeg_channels": list(raw.eeg_channels),
            "roi_names": list(raw.roi_names),
        })
    (path / RECORDING_INDEX).write_text(json.dumps({"format_version": FORMAT_VERSION, "recordings": index},
                                                   indent=2))
    logger.info("Recordings: wrote %d sessions to %s", len(index), path)


def read_recordings(path: Union[str, Path]) -> List[RawRecording]:
    path = Path(path)
    index = json.loads((path / RECORDING_INDEX).read_text())
    recordings = []
    for entry in index["recordings"]:
        with np.load(path / entry["file"]) as arrays:
            recordings.append(RawRecording(
                entry["subject_id"], Group(entry["group"]), arrays["eeg"], entry["fs_eeg"], arrays["intensity"],
                arrays["baseline"], entry["fs_fnirs"], arrays["onsets_s"], tuple(Cue(c) for c in entry["cues"]),
                tuple(None if c is None else CravingLevel(c) for c in entry["craving"]),
                tuple(entry["channel_to_roi"]), tuple(entry["bad_channels"]), tuple(entry["eeg_channels"]),
                tuple(entry["roi_names"])))
    return recordings
