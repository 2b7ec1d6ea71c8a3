"""
Unit tests for the dataset model, its on-disk format and the synthetic generator.
"""

import itertools
import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

import testutils
from errors import ConfigError, CorruptDatasetError, DataError
from signalio import (ALL_ROI_NAMES, MODEL_ROI_NAMES, VISUAL_CORTEX, CravingLevel, Cue, Dataset, Group,
                      MultimodalEpoch, Provenance, SynthConfig, generate_synthetic_dataset, hemodynamic_response,
                      read_dataset, read_recordings, samples_for, sessions_for, simulate_recording, subject_table,
                      trial_labels, write_dataset, write_recordings)

seeds = [0, 1, 7]


def _noiseless(**overrides):
    return testutils.tiny_synth_config(noise_sd=0.0, subject_effect_sd=0.0, **overrides)


def _class_mean(ds: Dataset, group: Group, modality: str) -> np.ndarray:
    epochs = [e for e in ds.epochs if e.group_label == group and e.cue_label == Cue.METH]
    return np.mean([getattr(e, modality) for e in epochs], axis=0)


def test_generator_is_deterministic():
    for seed in seeds:
        cfg = testutils.tiny_synth_config(seed=seed)
        assert generate_synthetic_dataset(cfg) == generate_synthetic_dataset(cfg)
    assert testutils.tiny_dataset(seed=0) != testutils.tiny_dataset(seed=1)


def test_generator_shapes_and_counts():
    ds = testutils.tiny_dataset()
    cfg = testutils.TINY_SYNTH
    # HC subjects contribute one session, MUD subjects two.
    assert len(ds) == cfg.n_subjects_per_group * cfg.epochs_per_subject * 3
    assert ds.eeg_samples == 112 and ds.fnirs_samples == 28
    assert ds.roi_names == MODEL_ROI_NAMES
    assert VISUAL_CORTEX not in ds.roi_names and len(ds.roi_names) == 7
    assert ds.provenance == Provenance.SYNTHETIC and ds.seed == cfg.seed
    for epoch in ds.epochs:
        assert epoch.eeg.shape == (3, 112) and epoch.eeg.dtype == np.float32
        assert epoch.fnirs.shape == (7, 28) and epoch.fnirs.dtype == np.float32
        assert np.all(np.isfinite(epoch.eeg)) and np.all(np.isfinite(epoch.fnirs))


def test_labels_balanced_per_subject():
    ds = generate_synthetic_dataset(testutils.tiny_synth_config(epochs_per_subject=7))
    per_session = Counter((e.subject_id, e.group_label, e.cue_label) for e in ds.epochs)
    for subject_id, cohort in ds.subjects.items():
        for group in sessions_for(cohort):
            meth, neutral = per_session[(subject_id, group, Cue.METH)], per_session[(subject_id, group, Cue.NEUTRAL)]
            assert abs(meth - neutral) <= 1
    groups = Counter(e.group_label for e in ds.epochs)
    assert groups[Group.HC] == groups[Group.MBT] == groups[Group.MAT]


def test_subject_table_and_sessions():
    table = subject_table(testutils.TINY_SYNTH)
    assert table == {0: "HC", 1: "HC", 2: "MUD", 3: "MUD"}
    assert sessions_for("HC") == (Group.HC,)
    assert sessions_for("MUD") == (Group.MBT, Group.MAT)
    ds = testutils.tiny_dataset()
    mat_subjects = {e.subject_id for e in ds.epochs if e.group_label == Group.MAT}
    mbt_subjects = {e.subject_id for e in ds.epochs if e.group_label == Group.MBT}
    assert mat_subjects == mbt_subjects == {2, 3}


def test_trial_labels_cycle():
    labels = [trial_labels(i) for i in range(8)]
    assert [cue for cue, _ in labels] == [Cue.NEUTRAL, Cue.METH] * 4
    assert [level for cue, level in labels if cue == Cue.METH] == [CravingLevel.HIGH, CravingLevel.MEDIUM,
                                                                    CravingLevel.LOW, CravingLevel.HIGH]
    assert all(level is None for cue, level in labels if cue == Cue.NEUTRAL)


def test_eeg_only_split_leaves_fnirs_identical():
    ds = generate_synthetic_dataset(_noiseless(class_effect_split=1.0))
    first = ds.epochs[0].fnirs
    for epoch in ds.epochs:
        assert np.array_equal(epoch.fnirs, first)
    hc = _class_mean(ds, Group.HC, "eeg")
    mbt = _class_mean(ds, Group.MBT, "eeg")
    assert np.max(np.abs(mbt - hc)) > 0.1


def test_fnirs_only_split_leaves_eeg_identical():
    ds = generate_synthetic_dataset(_noiseless(class_effect_split=0.0))
    first = ds.epochs[0].eeg
    for epoch in ds.epochs:
        assert np.array_equal(epoch.eeg, first)


def test_fnirs_response_starts_at_onset_delay():
    for delay, fs, response in itertools.product([1.5, 2.8, 4.0], [4.0, 10.0], ["canonical", "ramp"]):
        ds = generate_synthetic_dataset(_noiseless(fnirs_onset_delay=delay, fs_fnirs=fs, common_amplitude=0.0,
                                                   fnirs_response=response))
        diff = np.abs(_class_mean(ds, Group.MBT, "fnirs") - _class_mean(ds, Group.HC, "fnirs")).max(axis=0)
        # The canonical rise is slow, so any non-zero sample counts.
        onset = np.flatnonzero(diff > 0)[0] / fs
        print(f"test_fnirs_response_starts_at_onset_delay: {response}, delay = {delay}, fs = {fs}, onset = {onset}")
        assert delay < onset <= delay + 1.0 / fs + 1e-9


def test_eeg_burst_starts_at_zero():
    ds = generate_synthetic_dataset(_noiseless())
    diff = np.abs(_class_mean(ds, Group.MBT, "eeg") - _class_mean(ds, Group.HC, "eeg")).max(axis=0)
    assert np.flatnonzero(diff > 1e-6)[0] <= 1
    # The burst is over after burst_seconds.
    assert np.all(diff[samples_for(1.0, 16.0) + 1:] < 1e-6)


def test_mat_sits_between_hc_and_mbt():
    ds = generate_synthetic_dataset(_noiseless(mat_shift_toward_hc=0.7))
    hc, mbt, mat = (_class_mean(ds, g, "fnirs") for g in (Group.HC, Group.MBT, Group.MAT))
    assert np.linalg.norm(mat - hc) == pytest.approx(0.3 * np.linalg.norm(mbt - hc), rel=1e-4)


def test_hemodynamic_response_peak():
    cfg = SynthConfig(fnirs_onset_delay=2.0)
    t = np.linspace(0.0, 40.0, 4001)
    response = hemodynamic_response(t, cfg)
    assert response.max() == pytest.approx(1.0, abs=1e-3)
    assert np.all(response[t <= 2.0] == 0.0)
    peak_time = t[np.argmax(response)]
    assert 2.0 + 4.0 < peak_time < 2.0 + 8.0


def test_ramp_response_plateau():
    cfg = SynthConfig(fnirs_onset_delay=2.0, fnirs_response="ramp", fnirs_rise_seconds=0.5, epoch_seconds=7.0)
    t = np.linspace(0.0, 10.0, 1001)
    response = hemodynamic_response(t, cfg)
    assert np.all(response[t <= 2.0] == 0.0)
    assert hemodynamic_response(np.array([2.25]), cfg)[0] == pytest.approx(0.5)
    assert np.all(response[(t >= 2.5) & (t <= 7.0)] == 1.0)
    assert np.allclose(response[t >= 7.5], 0.0, atol=1e-12)
    assert np.all(np.diff(response[t <= 7.0]) >= 0.0)


def test_invalid_config_names_field():
    cases = {
        "fnirs_onset_delay": dict(fnirs_onset_delay=7.0),
        "class_effect_split": dict(class_effect_split=1.5),
        "n_subjects_per_group": dict(n_subjects_per_group=0),
        "epochs_per_subject": dict(epochs_per_subject=0),
        "noise_sd": dict(noise_sd=-1.0),
        "burst_hz": dict(burst_hz=8.0),
        "fnirs_response": dict(fnirs_response="boxcar"),
        "fnirs_rise_seconds": dict(fnirs_rise_seconds=0.0),
    }
    for name, overrides in cases.items():
        with pytest.raises(ConfigError) as info:
            generate_synthetic_dataset(testutils.tiny_synth_config(**overrides))
        assert info.value.field == name
        assert name in str(info.value)


def test_epoch_rejects_bad_values():
    eeg = np.zeros((3, 4), dtype=np.float32)
    fnirs = np.zeros((7, 2), dtype=np.float32)
    with pytest.raises(DataError):
        MultimodalEpoch(eeg, fnirs, -1, Group.HC, Cue.NEUTRAL, None, 0)
    bad = eeg.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataError):
        MultimodalEpoch(bad, fnirs, 0, Group.HC, Cue.NEUTRAL, None, 0)


def test_dataset_requires_subject_table_entries():
    ds = testutils.tiny_dataset()
    with pytest.raises(DataError):
        Dataset(ds.epochs, ds.fs_eeg, ds.fs_fnirs, ds.epoch_seconds, ds.eeg_channels, ds.roi_names, {0: "HC"})
    with pytest.raises(DataError):
        replace(ds, epoch_seconds=6.0)


def test_dataset_subset_and_where():
    ds = testutils.tiny_dataset()
    sub = ds.subset([0, 2, 4])
    assert len(sub) == 3 and sub.epochs[1] == ds.epochs[2]
    mat = ds.where(lambda e: e.group_label == Group.MAT)
    assert len(mat) == 12 and all(e.group_label == Group.MAT for e in mat.epochs)
    assert set(mat.subject_ids().tolist()) == {2, 3}


def test_dataset_round_trip(tmp_path):
    for seed in seeds:
        ds = testutils.tiny_dataset(seed=seed)
        write_dataset(ds, tmp_path / f"ds{seed}")
        assert read_dataset(tmp_path / f"ds{seed}") == ds
    files = sorted(p.name for p in (tmp_path / "ds0").iterdir())
    assert files == ["checksums.txt", "eeg.f32le", "fnirs.f32le", "manifest.json"]


def test_empty_dataset_round_trip(tmp_path):
    ds = testutils.tiny_dataset().subset([])
    write_dataset(ds, tmp_path / "empty")
    back = read_dataset(tmp_path / "empty")
    assert len(back) == 0
    assert back == ds


def test_edited_channel_count_is_corrupt(tmp_path):
    write_dataset(testutils.tiny_dataset(), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["eeg_channels"] = manifest["eeg_channels"][:-1]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CorruptDatasetError):
        read_dataset(tmp_path)


def test_flipped_byte_is_corrupt(tmp_path):
    write_dataset(testutils.tiny_dataset(), tmp_path)
    data = bytearray((tmp_path / "fnirs.f32le").read_bytes())
    data[10] ^= 0xFF
    (tmp_path / "fnirs.f32le").write_bytes(bytes(data))
    with pytest.raises(CorruptDatasetError):
        read_dataset(tmp_path)


def test_malformed_manifest_is_corrupt(tmp_path):
    write_dataset(testutils.tiny_dataset(), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    del manifest["roi_names"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CorruptDatasetError):
        read_dataset(tmp_path)


def test_missing_blob_is_io_error(tmp_path):
    write_dataset(testutils.tiny_dataset(), tmp_path)
    (tmp_path / "eeg.f32le").unlink()
    with pytest.raises(OSError):
        read_dataset(tmp_path)


def test_simulated_recording_layout():
    cfg = testutils.tiny_synth_config(epochs_per_subject=4)
    raw = simulate_recording(cfg, 2, Group.MBT, raw_factor=4, channels_per_roi=2, bad_channels=(3,))
    assert raw.fs_eeg == 64.0
    assert raw.eeg.shape[0] == 3
    assert raw.intensity.shape[0] == 2 * len(ALL_ROI_NAMES)
    assert raw.intensity.shape[2] == 2
    assert np.all(raw.intensity > 0) and np.all(raw.baseline > 0)
    assert raw.bad_channels == (3,)
    assert raw.onsets_s.tolist() == [7.0, 21.0, 35.0, 49.0]
    assert raw.duration_s == pytest.approx(7.0 + 14.0 * 4 + 7.0)
    assert raw.cues == (Cue.NEUTRAL, Cue.METH, Cue.NEUTRAL, Cue.METH)


def test_recordings_round_trip(tmp_path):
    cfg = testutils.tiny_synth_config(epochs_per_subject=2)
    recordings = [simulate_recording(cfg, 0, Group.HC), simulate_recording(cfg, 2, Group.MAT, bad_channels=(1,))]
    write_recordings(recordings, tmp_path)
    back = read_recordings(tmp_path)
    assert len(back) == 2
    for a, b in zip(recordings, back):
        assert a.subject_id == b.subject_id and a.group == b.group
        assert np.array_equal(a.eeg, b.eeg) and np.array_equal(a.intensity, b.intensity)
        assert a.channel_to_roi == b.channel_to_roi and a.bad_channels == b.bad_channels
        assert a.craving == b.craving
