import logging
import struct

import numpy as np
import pytest

from spineage.report_features import Region, aggregate
from spineage.synthvol import (
    BLOB_KINDS,
    MAX_AGE,
    MIN_AGE,
    VOLUME_HEADER_SIZE,
    RegionLabel,
    SynthConfig,
    SynthConfigException,
    Volume,
    VolumeFormatException,
    apply_mask,
    bracket_of,
    crop_or_pad,
    disc_intensity,
    finding_voxels,
    generate_rescan,
    generate_subject,
    load_volume,
    mask_region,
    preprocess,
    read_subjects,
    resample,
    save_volume,
    write_subjects,
)

SMALL = SynthConfig(shape=(32, 64, 4))


def block_volume(shape=(6, 6, 10), spacing=(0.9, 0.9, 3.0)):
    intensities = np.random.default_rng(0).uniform(0.1, 1.0, size=shape).astype(np.float32)
    labels = np.zeros(shape, dtype=np.uint8)
    labels[:, :3, :] = RegionLabel.LUMBAR
    return Volume(intensities=intensities, spacing=spacing, mask=np.ones(shape, dtype=np.uint8),
                  region_labels=labels)


def test_bracket_of():
    assert bracket_of(25.0) == 30
    assert bracket_of(34.9) == 30
    assert bracket_of(35.0) == 40
    assert bracket_of(84.0) == 80
    with pytest.raises(SynthConfigException):
        bracket_of(90.0)


def test_disc_intensity_decreases_with_age():
    config = SynthConfig()
    values = [disc_intensity(config, age) for age in range(25, 85)]

    assert values[0] == 1.0
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))
    assert values[-1] < values[0]


def test_generate_subject_is_deterministic():
    first_volume, first_records, first_subject = generate_subject(SMALL, 61.5, "F", seed=11)
    second_volume, second_records, second_subject = generate_subject(SMALL, 61.5, "F", seed=11)

    assert np.array_equal(first_volume.intensities, second_volume.intensities)
    assert first_records == second_records
    assert first_subject.covariates == second_subject.covariates
    assert first_subject.bracket == 60

    other_volume, _, _ = generate_subject(SMALL, 61.5, "F", seed=12)
    assert not np.array_equal(first_volume.intensities, other_volume.intensities)


def test_generated_records_are_legal():
    for seed in range(5):
        _, records, _ = generate_subject(SMALL, 80.0, "M", seed=seed)
        aggregate(records)


NEUTRAL = SynthConfig(
    shape=(32, 64, 4), biological_age_sd=0.0, disc_noise_sd=0.0, level_noise_sd=0.0, voxel_noise_sd=0.0,
    smoking_effect=0.0, moderate_work_effect=0.0, heavy_work_effect=0.0, moderate_exercise_effect=0.0,
    vigorous_exercise_effect=0.0,
)


def test_youngest_subject_without_offsets_has_bright_discs_and_no_blobs():
    for seed in range(10):
        _, records, subject = generate_subject(NEUTRAL, MIN_AGE, "F", seed=seed)

        assert subject.biological_age == MIN_AGE
        assert subject.disc_intensity == 1.0
        assert subject.findings == []
        assert not any(record.condition.kind in BLOB_KINDS for record in records)


@pytest.fixture(scope="module")
def population():
    rng = np.random.default_rng(5)
    ages = rng.uniform(MIN_AGE, MAX_AGE, 600)
    return [generate_subject(SMALL, age, "M" if index % 2 else "F", seed=index)[1:]
            for index, age in enumerate(ages)]


def test_disc_intensity_tracks_age_across_subjects(population):
    ages = [subject.chronological_age for _, subject in population]
    intensities = [subject.disc_intensity for _, subject in population]

    assert np.corrcoef(ages, intensities)[0, 1] < -0.8


def test_record_counts_grow_with_bracket(population):
    counts = {}
    for records, subject in population:
        counts.setdefault(subject.bracket, []).append(len(records))
    means = [np.mean(counts[bracket]) for bracket in sorted(counts)]

    assert len(means) == 6
    assert all(later >= earlier for earlier, later in zip(means, means[1:]))


def test_negative_spreads_are_rejected():
    with pytest.raises(SynthConfigException):
        SynthConfig(biological_age_sd=-1.0).validate()
    NEUTRAL.validate()


def test_generate_subject_rejects_age():
    with pytest.raises(SynthConfigException):
        generate_subject(SMALL, 20.0, "M", seed=0)


def test_rescan_keeps_anatomy():
    _, records, subject = generate_subject(SMALL, 50.0, "M", seed=3)
    _, rescan_records, rescan = generate_rescan(SMALL, subject, seed=3)

    assert rescan.scan == 1
    assert rescan.chronological_age == pytest.approx(51.6)
    assert rescan.covariates == subject.covariates
    assert [record for record in rescan_records if record.kind.is_structural] == \
        [record for record in records if record.kind.is_structural]


def test_resample_identity():
    volume = block_volume()
    result = resample(volume, volume.spacing)

    assert result.shape == volume.shape
    assert np.array_equal(result.intensities, volume.intensities)


def test_resample_keeps_a_constant_volume_constant():
    volume = block_volume(shape=(12, 12, 10), spacing=(0.45, 0.45, 3.0))
    volume.intensities[:] = 0.6
    result = resample(volume, (0.7, 0.9, 2.5))

    assert result.shape == (8, 6, 12)
    assert np.allclose(result.intensities, 0.6)


def test_resample_halves_fine_grid():
    volume = block_volume(shape=(12, 12, 10), spacing=(0.45, 0.45, 3.0))
    result = resample(volume, (0.9, 0.9, 3.0))

    assert result.shape == (6, 6, 10)
    assert result.spacing == (0.9, 0.9, 3.0)


def test_crop_or_pad():
    volume = block_volume()
    padded = crop_or_pad(volume, (6, 6, 14))

    assert padded.shape == (6, 6, 14)
    assert np.array_equal(padded.intensities[:, :, 2:12], volume.intensities)
    assert not padded.intensities[:, :, :2].any() and not padded.intensities[:, :, 12:].any()
    assert padded.origin[2] == pytest.approx(-6.0)

    cropped = crop_or_pad(padded, (6, 6, 10))
    assert np.array_equal(cropped.intensities, volume.intensities)


def test_apply_mask_dilates_as_a_cross():
    shape = (5, 5, 5)
    mask = np.zeros(shape, dtype=np.uint8)
    mask[2, 2, 2] = 1
    volume = Volume(intensities=np.ones(shape, dtype=np.float32), spacing=(1, 1, 1), mask=mask,
                    region_labels=np.zeros(shape, dtype=np.uint8))

    assert np.count_nonzero(apply_mask(volume, 0).intensities) == 1
    assert np.count_nonzero(apply_mask(volume, 1).intensities) == 7
    with pytest.raises(SynthConfigException):
        apply_mask(volume, -1)


def test_mask_region(caplog):
    volume = block_volume()
    lumbar = mask_region(volume, Region.LUMBAR, dilation_radius_voxels=0)

    assert np.array_equal(lumbar.intensities[:, :3], volume.intensities[:, :3])
    assert not lumbar.intensities[:, 3:].any()

    with caplog.at_level(logging.WARNING):
        cervical = mask_region(volume, "cervical")
    assert not cervical.intensities.any()
    assert "absent" in caplog.text


def test_preprocess_reaches_target_grid():
    volume, _, _ = generate_subject(SMALL, 45.0, "F", seed=1)
    result = preprocess(volume, SMALL)

    assert result.shape == SMALL.shape
    assert result.spacing == pytest.approx(SMALL.spacing)
    assert 0.0 <= result.intensities.min() and result.intensities.max() <= 1.0
    assert int(RegionLabel.LUMBAR) in np.unique(result.region_labels)


def test_findings_are_rendered():
    for seed in range(20):
        volume, _, subject = generate_subject(SMALL, 84.0, "M", seed=seed)
        if subject.findings:
            break
    else:
        pytest.fail("no findings rendered at age 84")

    voxels = finding_voxels(volume, subject.findings[0])
    assert voxels.any()
    assert volume.intensities[voxels].mean() > 0.6


def test_volume_container_round_trip(tmp_path):
    volume = block_volume()
    path = str(tmp_path / "volume.spv")
    save_volume(path, volume)
    loaded = load_volume(path)

    assert np.array_equal(loaded.intensities, volume.intensities)
    assert np.array_equal(loaded.region_labels, volume.region_labels)
    assert loaded.spacing == pytest.approx(volume.spacing)


def test_volume_container_layout(tmp_path):
    volume = block_volume()
    volume.origin = (0.1, -6.125, 1e-9)
    path = tmp_path / "volume.spv"
    save_volume(str(path), volume)
    raw = path.read_bytes()

    assert raw[:8] == b"SPVOL001"
    assert struct.unpack_from("<HH", raw, 8) == (2, 1)
    assert struct.unpack_from("<3I", raw, 12) == (6, 6, 10)
    assert struct.unpack_from("<3d", raw, 24) == (0.9, 0.9, 3.0)
    assert raw[48] == 2
    assert raw[49:VOLUME_HEADER_SIZE] == bytes(15)

    voxels = 6 * 6 * 10
    assert len(raw) == VOLUME_HEADER_SIZE + 4 * voxels + 2 * voxels + 24
    first = np.frombuffer(raw, dtype="<f4", count=2, offset=VOLUME_HEADER_SIZE)
    assert first[0] == volume.intensities[0, 0, 0] and first[1] == volume.intensities[1, 0, 0]
    assert struct.unpack_from("<3d", raw, len(raw) - 24) == (0.1, -6.125, 1e-9)
    assert load_volume(str(path)).origin == (0.1, -6.125, 1e-9)


def test_volume_container_rejects_damage(tmp_path):
    path = tmp_path / "volume.spv"
    save_volume(str(path), block_volume())
    raw = path.read_bytes()

    path.write_bytes(raw[:-5])
    with pytest.raises(VolumeFormatException):
        load_volume(str(path))

    path.write_bytes(b"NOTAVOL!" + raw[8:])
    with pytest.raises(VolumeFormatException):
        load_volume(str(path))


def test_subjects_csv_round_trip(tmp_path):
    subjects = [generate_subject(SMALL, 30.0 + 10 * index, "M", seed=index)[2] for index in range(3)]
    path = str(tmp_path / "subjects.csv")
    write_subjects(path, subjects)
    loaded = read_subjects(path)

    assert [subject.id for subject in loaded] == [subject.id for subject in subjects]
    assert [subject.bracket for subject in loaded] == [subject.bracket for subject in subjects]
    assert loaded[0].covariates["work_level"] == subjects[0].covariates["work_level"]
    assert loaded[2].chronological_age == pytest.approx(50.0)


def test_config_validation():
    with pytest.raises(SynthConfigException):
        SynthConfig(shape=(16, 64, 4)).validate()
    with pytest.raises(SynthConfigException):
        SynthConfig(vertebrae=(7, 12, 5)).validate()
    SynthConfig().validate()
    assert MIN_AGE == 25.0


if __name__ == "__main__":
    test_generate_subject_is_deterministic()
    test_crop_or_pad()
