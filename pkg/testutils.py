from dataclasses import replace
from typing import Optional

import numpy as np

from harness import TrainConfig
from model import Batch, ModelArch, ModelParams, init_model
from signalio import Dataset, SynthConfig, generate_synthetic_dataset

# 16 Hz EEG and 4 Hz fNIRS over 7 s epochs: T_e = 112, T_f = 28.
TINY_SYNTH = SynthConfig(n_subjects_per_group=2, epochs_per_subject=6, fs_eeg=16.0, fs_fnirs=4.0, epoch_seconds=7.0,
                         burst_hz=4.0, n_eeg_channels=3, noise_sd=0.5, subject_effect_sd=0.1, seed=0)


def tiny_synth_config(**overrides) -> SynthConfig:
    """Creates a generator config small enough for unit tests."""
    return replace(TINY_SYNTH, **overrides)


def tiny_dataset(**overrides) -> Dataset:
    return generate_synthetic_dataset(tiny_synth_config(**overrides))


def tiny_arch(eeg_channels: int = 3, fnirs_channels: int = 7, **overrides) -> ModelArch:
    """Creates a narrow architecture (D=8, 2 heads) with the full block structure."""
    fields = dict(d_model=8, heads=2, stem_width=4, block_widths=(4, 6, 6))
    fields.update(overrides)
    return ModelArch(eeg_channels=eeg_channels, fnirs_channels=fnirs_channels, **fields)


def tiny_model(seed: int = 0, ds: Optional[Dataset] = None, **overrides) -> ModelParams:
    if ds is not None:
        return init_model(tiny_arch(len(ds.eeg_channels), len(ds.roi_names), **overrides), seed)
    return init_model(tiny_arch(**overrides), seed)


def tiny_train_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(batch_size=8, lr_align=0.01, lr_fusion=0.05, epochs_align=1, epochs_task=2, momentum=0.9,
                      progress=False)
    return replace(cfg, **overrides)


def random_batch(rng: np.random.Generator, size: int = 2, eeg_channels: int = 3, fnirs_channels: int = 7,
                 eeg_samples: int = 24, fnirs_samples: int = 8) -> Batch:
    """Creates a batch of Gaussian noise epochs."""
    return Batch(rng.normal(size=(size, eeg_channels, eeg_samples)),
                 rng.normal(size=(size, fnirs_channels, fnirs_samples)))
