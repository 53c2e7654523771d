import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .file_io import atomic_write
from .report_features import (
    Condition,
    ConditionKind,
    ConditionRecord,
    Region,
    ReportFeatureException,
    Severity,
    STRUCTURAL_KINDS,
    VertebraLabel,
)
from .utils import read_csv, write_csv

logger = logging.getLogger(__name__)

TARGET_SPACING = (0.9, 0.9, 3.0)
DESK_SHAPE = (96, 192, 8)
FULL_SCALE_SHAPE = (384, 793, 14)
MIN_AGE = 25.0
MAX_AGE = 84.0
BRACKETS = (30, 40, 50, 60, 70, 80)
POOLING_STAGES = 5

VOLUME_MAGIC = b"SPVOL001"
VOLUME_VERSION = 2
VOLUME_HEADER = struct.Struct('<8sHH3I3dB')
VOLUME_HEADER_SIZE = 64
# grid origin, after the last grid
VOLUME_TRAILER = struct.Struct('<3d')
DTYPE_CODES = {1: np.dtype('<f4'), 2: np.dtype('<f8')}

VERTEBRA_INTENSITY = 0.55
OTHER_INTENSITY = 0.35
BLOB_INTENSITY = 0.9
FRACTURE_INTENSITY = 0.8

DESICCATION_THRESHOLDS = (
    (0.30, Severity.NEAR_COMPLETE),
    (0.45, Severity.SEVERE),
    (0.60, Severity.MODERATE),
    (0.75, Severity.MILD),
)
BLOB_KINDS = (ConditionKind.DISC_BULGE, ConditionKind.DISC_OSTEOPHYTE_COMPLEX, ConditionKind.PROTRUSION)
BLOB_KIND_WEIGHTS = (0.5, 0.35, 0.15)

WORK_LEVELS = ("light", "moderate", "heavy")
EXERCISE_LEVELS = ("none", "moderate", "vigorous")


class VolumeFormatException(Exception):
    pass


class SynthConfigException(Exception):
    pass


class RegionLabel(IntEnum):
    BACKGROUND = 0
    CERVICAL = 1
    THORACIC = 2
    LUMBAR = 3
    OTHER = 4

    @classmethod
    def of(cls, region: Region):
        return cls[region.name]


class Sex(Enum):
    MALE = "M"
    FEMALE = "F"


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class Volume:
    intensities: np.ndarray
    spacing: Tuple[float, float, float]
    mask: np.ndarray
    region_labels: np.ndarray
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.spacing = tuple(float(value) for value in self.spacing)
        self.origin = tuple(float(value) for value in self.origin)
        if self.intensities.ndim != 3:
            raise VolumeFormatException("Volumes are 3D, got shape {}".format(self.intensities.shape))
        if self.mask.shape != self.intensities.shape or self.region_labels.shape != self.intensities.shape:
            raise VolumeFormatException("Mask and label grids must match the intensity shape")
        if min(self.spacing) <= 0:
            raise VolumeFormatException("Spacing must be positive, got {}".format(self.spacing))

    @property
    def shape(self):
        return self.intensities.shape

    def with_intensities(self, intensities):
        return replace(self, intensities=intensities)


@dataclass
class Finding:
    """A rendered blob: kind, severity, vertebra and its physical sphere."""
    kind: ConditionKind
    severity: Severity
    vertebra: VertebraLabel
    center_mm: Tuple[float, float, float]
    radius_mm: float


@dataclass
class Subject:
    id: str
    chronological_age: float
    sex: Sex
    bracket: int
    covariates: Dict[str, object]
    split: Optional[Split] = None
    biological_age: float = 0.0
    disc_intensity: float = 0.0
    scan: int = 0
    findings: List[Finding] = field(default_factory=list)


@dataclass
class SynthConfig:
    shape: Tuple[int, int, int] = DESK_SHAPE
    spacing: Tuple[float, float, float] = TARGET_SPACING
    spacing_jitter: float = 0.2
    vertebrae: Tuple[int, int, int] = (6, 12, 5)
    seed: int = 0
    intensity_slope: float = 0.011
    blob_rate_slope: float = 0.05
    disc_noise_sd: float = 0.05
    voxel_noise_sd: float = 0.02
    level_noise_sd: float = 0.03
    disc_height_fraction: float = 0.35
    disc_height_slope: float = 0.008
    dilation_radius: int = 2
    biological_age_sd: float = 2.0
    smoking_effect: float = 2.0
    moderate_work_effect: float = 0.5
    heavy_work_effect: float = 2.0
    moderate_exercise_effect: float = -0.8
    vigorous_exercise_effect: float = -2.0
    rescan_years: float = 1.6

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise SynthConfigException("Grid shape needs three positive dims, got {}".format(self.shape))
        if min(self.shape[:2]) < 2 ** POOLING_STAGES:
            raise SynthConfigException(
                "In-plane dims must be at least {} to survive pooling, got {}".format(2 ** POOLING_STAGES, self.shape)
            )
        if min(self.spacing) <= 0 or not 0 <= self.spacing_jitter < 1:
            raise SynthConfigException("Spacing must be positive and jitter in [0, 1)")
        for region, count in zip(Region, self.vertebrae):
            if count < 1:
                raise SynthConfigException("Each region needs at least one vertebra")
            try:
                VertebraLabel(region, _first_index(region) + count - 1)
            except ReportFeatureException as exc:
                raise SynthConfigException("Too many {} vertebrae: {}".format(region.value, exc))
        if self.dilation_radius < 0:
            raise SynthConfigException("Dilation radius must be nonnegative")
        spreads = (self.disc_noise_sd, self.voxel_noise_sd, self.level_noise_sd, self.biological_age_sd)
        if min(spreads) < 0:
            raise SynthConfigException("Noise and biological-age spreads must be nonnegative, got {}".format(spreads))


def _first_index(region):
    return 2 if region == Region.CERVICAL else 1


def bracket_of(age):
    if not MIN_AGE <= age < MAX_AGE + 1:
        raise SynthConfigException("Age {} outside [{}, {}]".format(age, MIN_AGE, MAX_AGE))
    return int(min(max(10 * np.floor((age + 5) / 10), BRACKETS[0]), BRACKETS[-1]))


def disc_intensity(config: SynthConfig, age, eps=0.0):
    return float(np.clip(1.0 - config.intensity_slope * (age - MIN_AGE) + eps, 0.0, 1.0))


def blob_rate(config: SynthConfig, age):
    return max(0.0, config.blob_rate_slope * (age - MIN_AGE))


def disc_height(config: SynthConfig, age):
    # fraction of each vertebral level taken by the disc below it
    return max(0.05, config.disc_height_fraction * (1.0 - config.disc_height_slope * max(0.0, age - MIN_AGE)))


def lifestyle_shift(config: SynthConfig, covariates):
    shift = config.smoking_effect * covariates["packs_per_day"]
    shift += {"light": 0.0, "moderate": config.moderate_work_effect, "heavy": config.heavy_work_effect}[
        covariates["work_level"]]
    shift += {"none": 0.0, "moderate": config.moderate_exercise_effect, "vigorous": config.vigorous_exercise_effect}[
        covariates["exercise_level"]]
    return shift


def draw_covariates(rng):
    smoker = rng.random() < 0.25
    return {
        "packs_per_day": round(float(rng.uniform(0.25, 2.0)), 2) if smoker else 0.0,
        "alcohol_days": int(rng.choice(8, p=[0.3, 0.2, 0.15, 0.1, 0.08, 0.07, 0.05, 0.05])),
        "sedentary_hours": round(float(rng.uniform(2.0, 12.0)), 1),
        "work_level": str(rng.choice(WORK_LEVELS, p=[0.6, 0.28, 0.12])),
        "exercise_level": str(rng.choice(EXERCISE_LEVELS, p=[0.35, 0.4, 0.25])),
    }


@dataclass
class _Anatomy:
    covariates: Dict[str, object]
    eps: float
    age_offset: float
    level_noise: np.ndarray
    blobs: list
    fracture_level: Optional[int]
    structural: List[ConditionKind]
    report_only: List[Tuple[int, ConditionKind, Severity]]


def _levels(config):
    levels = []
    for region, count in zip(Region, config.vertebrae):
        levels.extend(VertebraLabel(region, _first_index(region) + index) for index in range(count))
    return levels


def _draw_anatomy(config, age, rng):
    covariates = draw_covariates(rng)
    age_offset = lifestyle_shift(config, covariates) + rng.normal(0.0, config.biological_age_sd)
    biological_age = age + age_offset
    levels = _levels(config)
    years = max(0.0, biological_age - MIN_AGE)

    blobs = []
    for _ in range(rng.poisson(blob_rate(config, biological_age))):
        level = int(rng.integers(len(levels)))
        kind = BLOB_KINDS[int(rng.choice(len(BLOB_KINDS), p=BLOB_KIND_WEIGHTS))]
        radius_voxels = 1 + int(rng.random() < 0.4)
        blobs.append((level, kind, radius_voxels, float(rng.uniform(0.3, 0.7))))

    report_only = []
    for level, vertebra in enumerate(levels):
        if vertebra.region == Region.LUMBAR:
            if rng.random() < 0.004 * years:
                report_only.append((level, ConditionKind.ENDPLATE_CHANGE, Severity.PRESENT))
            if rng.random() < 0.003 * years:
                report_only.append((level, ConditionKind.ANNULAR_FISSURE, Severity.PRESENT))
            if rng.random() < 0.0008 * years:
                report_only.append((level, ConditionKind.EXTRUSION, Severity.MILD))
        if vertebra.region == Region.CERVICAL and rng.random() < 0.003 * years:
            report_only.append((level, ConditionKind.UNCOVERTEBRAL_OSTEOPHYTE, Severity.MILD))

    structural_rates = {
        ConditionKind.BONE_LESION: 0.01,
        ConditionKind.CONGENITAL_CANAL_NARROWING: 0.02,
        ConditionKind.CORD_ABNORMALITY: 0.01,
        ConditionKind.FRACTURE: 0.01 + 0.0005 * years,
        ConditionKind.SOFT_TISSUE_EDEMA: 0.01,
        ConditionKind.SPINAL_STENOSIS: 0.002 * years,
        ConditionKind.SPONDYLOLISTHESIS: 0.003 * years,
    }
    structural = [kind for kind in STRUCTURAL_KINDS if rng.random() < structural_rates[kind]]
    fracture_level = int(rng.integers(len(levels))) if ConditionKind.FRACTURE in structural else None

    return _Anatomy(
        covariates=covariates,
        eps=float(rng.normal(0.0, config.disc_noise_sd)),
        age_offset=float(age_offset),
        level_noise=rng.normal(0.0, config.level_noise_sd, size=len(levels)),
        blobs=blobs,
        fracture_level=fracture_level,
        structural=structural,
        report_only=report_only,
    )


def _render(config, anatomy, age, rng, subject):
    """Render the spine column on a jittered source grid and emit matching records."""
    biological_age = age + anatomy.age_offset
    spacing = tuple(
        base * (1.0 + config.spacing_jitter * rng.uniform(-1.0, 1.0)) for base in config.spacing
    )
    extent = [dim * base for dim, base in zip(config.shape, config.spacing)]
    shape = tuple(max(1, int(round(length / step))) for length, step in zip(extent, spacing))

    x = (np.arange(shape[0]) * spacing[0])[:, None, None]
    y = (np.arange(shape[1]) * spacing[1])[None, :, None]
    z = (np.arange(shape[2]) * spacing[2])[None, None, :]

    levels = _levels(config)
    x_center, half_width = 0.5 * extent[0], 0.12 * extent[0]
    y_top, y_bottom = 0.08 * extent[1], 0.92 * extent[1]
    z_low, z_high = 0.2 * extent[2], 0.8 * extent[2]
    if z_high - z_low < spacing[2]:
        z_low, z_high = 0.0, extent[2]

    # each region gets a third of the column; levels split their region evenly
    third = (y_bottom - y_top) / 3.0
    level_top = []
    level_height = []
    for region_index, count in enumerate(config.vertebrae):
        for index in range(count):
            level_top.append(y_top + region_index * third + index * third / count)
            level_height.append(third / count)
    level_top = np.array(level_top)
    level_height = np.array(level_height)

    in_column = (np.abs(x - x_center) <= half_width) & (y >= y_top) & (y < y_bottom) & (z >= z_low) & (z <= z_high)
    level_of_row = np.clip(np.searchsorted(level_top, y.ravel(), side='right') - 1, 0, len(levels) - 1)
    fraction_in_level = (y.ravel() - level_top[level_of_row]) / level_height[level_of_row]

    disc_fraction = disc_height(config, biological_age)
    is_disc_row = fraction_in_level >= 1.0 - disc_fraction
    base_disc = disc_intensity(config, biological_age, anatomy.eps)
    level_disc = np.clip(base_disc + anatomy.level_noise, 0.0, 1.0)

    row_intensity = np.where(is_disc_row, level_disc[level_of_row], VERTEBRA_INTENSITY)
    if anatomy.fracture_level is not None:
        fractured = (level_of_row == anatomy.fracture_level) & ~is_disc_row
        fractured &= fraction_in_level < 0.5 * (1.0 - disc_fraction)
        row_intensity = np.where(fractured, FRACTURE_INTENSITY, row_intensity)

    region_codes = np.array([int(RegionLabel.of(vertebra.region)) for vertebra in levels], dtype=np.uint8)
    row_region = region_codes[level_of_row]

    intensities = np.where(in_column, row_intensity[None, :, None], 0.0)
    mask = in_column.astype(np.uint8)
    region_labels = np.where(in_column, row_region[None, :, None], RegionLabel.BACKGROUND).astype(np.uint8)

    # non-spine tissue posterior to the column, outside the mask
    other = (x >= 0.7 * extent[0]) & (x < 0.85 * extent[0]) & (y >= y_top) & (y < y_bottom) & (z >= z_low) & (z <= z_high)
    intensities = np.where(other, OTHER_INTENSITY, intensities)
    region_labels = np.where(other, RegionLabel.OTHER, region_labels).astype(np.uint8)

    records = []
    findings = []
    for level, kind, radius_voxels, depth_fraction in anatomy.blobs:
        vertebra = levels[level]
        center = (
            x_center - half_width,
            level_top[level] + level_height[level] * (1.0 - 0.5 * disc_fraction),
            z_low + depth_fraction * (z_high - z_low),
        )
        radius_mm = radius_voxels * 1.5 * config.spacing[0]
        blob = ((x - center[0]) ** 2 + (y - center[1]) ** 2) <= radius_mm ** 2
        blob = blob & (np.abs(z - center[2]) <= max(radius_mm, 0.5 * spacing[2]))
        intensities = np.where(blob, BLOB_INTENSITY, intensities)
        mask = np.where(blob, 1, mask).astype(np.uint8)
        region_labels = np.where(blob, region_codes[level], region_labels).astype(np.uint8)

        severity = Severity.MILD if radius_voxels == 1 else Severity.MODERATE
        records.append(ConditionRecord(Condition(kind, severity), vertebra))
        findings.append(Finding(kind, severity, vertebra, center, radius_mm))

    for level, vertebra in enumerate(levels):
        for threshold, severity in DESICCATION_THRESHOLDS:
            if level_disc[level] < threshold:
                records.append(ConditionRecord(Condition(ConditionKind.DESICCATION, severity), vertebra))
                break

    for level, kind, severity in anatomy.report_only:
        records.append(ConditionRecord(Condition(kind, severity), levels[level]))
    for kind in anatomy.structural:
        records.append(ConditionRecord(Condition(kind, Severity.PRESENT)))

    if config.voxel_noise_sd > 0:
        noise = rng.normal(0.0, config.voxel_noise_sd, size=shape)
        intensities = np.where(intensities > 0, intensities + noise, 0.0)
    intensities = np.clip(intensities, 0.0, 1.0).astype(np.float32)

    subject.findings = findings
    subject.biological_age = float(biological_age)
    subject.disc_intensity = base_disc
    volume = Volume(intensities=intensities, spacing=spacing, mask=mask, region_labels=region_labels)

    return volume, records


def generate_subject(config: SynthConfig, age, sex, seed, subject_id=None):
    """Deterministic (Volume, records, Subject) for one synthetic participant."""
    if not MIN_AGE <= age <= MAX_AGE:
        raise SynthConfigException("Age {} outside [{}, {}]".format(age, MIN_AGE, MAX_AGE))

    anatomy = _draw_anatomy(config, age, np.random.default_rng([seed, 0]))
    subject = Subject(
        id=subject_id or "sub-{:08d}".format(seed),
        chronological_age=float(age),
        sex=Sex(sex) if not isinstance(sex, Sex) else sex,
        bracket=bracket_of(age),
        covariates=anatomy.covariates,
    )
    volume, records = _render(config, anatomy, age, np.random.default_rng([seed, 1]), subject)

    return volume, records, subject


def generate_rescan(config: SynthConfig, subject: Subject, seed, years=None):
    """Second scan of the same anatomy ``years`` later with fresh acquisition noise."""
    years = config.rescan_years if years is None else years
    anatomy = _draw_anatomy(config, subject.chronological_age, np.random.default_rng([seed, 0]))
    age = min(subject.chronological_age + years, MAX_AGE + 0.999)
    rescan = replace(subject, chronological_age=float(age), scan=subject.scan + 1, findings=[])
    volume, records = _render(config, anatomy, age, np.random.default_rng([seed, 2 + subject.scan]), rescan)

    return volume, records, rescan


def resample(volume: Volume, target_spacing=TARGET_SPACING) -> Volume:
    scale = []
    shape = []
    spacing = []
    for dim, source, target in zip(volume.shape, volume.spacing, target_spacing):
        if dim == 1:
            scale.append(1.0)
            shape.append(1)
            spacing.append(source)
        else:
            scale.append(target / source)
            shape.append(max(1, int(round(dim * source / target))))
            spacing.append(target)

    if tuple(shape) == volume.shape and np.allclose(scale, 1.0):
        return replace(volume, spacing=tuple(spacing))

    def transform(grid, order):
        return ndimage.affine_transform(grid, np.array(scale), output_shape=tuple(shape), order=order, mode='nearest')

    intensities = np.clip(transform(volume.intensities.astype(np.float64), 1), 0.0, 1.0)
    return Volume(
        intensities=intensities.astype(volume.intensities.dtype),
        spacing=tuple(spacing),
        mask=transform(volume.mask, 0).astype(np.uint8),
        region_labels=transform(volume.region_labels, 0).astype(np.uint8),
        origin=volume.origin,
    )


def crop_or_pad(volume: Volume, target_shape) -> Volume:
    if min(target_shape) < 1:
        raise SynthConfigException("Target dims must be at least 1, got {}".format(target_shape))

    grids = [volume.intensities, volume.mask, volume.region_labels]
    origin = list(volume.origin)

    for axis, (dim, target) in enumerate(zip(volume.shape, target_shape)):
        if dim > target:
            low = (dim - target) // 2
            grids = [np.take(grid, np.arange(low, low + target), axis=axis) for grid in grids]
            origin[axis] += low * volume.spacing[axis]
        elif dim < target:
            low = (target - dim) // 2
            widths = [(0, 0)] * 3
            widths[axis] = (low, target - dim - low)
            grids = [np.pad(grid, widths) for grid in grids]
            origin[axis] -= low * volume.spacing[axis]

    return Volume(intensities=grids[0], spacing=volume.spacing, mask=grids[1], region_labels=grids[2],
                  origin=tuple(origin))


def dilate(mask, radius):
    mask = mask.astype(bool)
    if radius == 0:
        return mask
    # scipy treats iterations=0 as "until stable", hence the guard above
    return ndimage.binary_dilation(mask, structure=ndimage.generate_binary_structure(3, 1), iterations=radius)


def apply_mask(volume: Volume, dilation_radius_voxels=2) -> Volume:
    if dilation_radius_voxels < 0:
        raise SynthConfigException("Dilation radius must be nonnegative")

    keep = dilate(volume.mask, dilation_radius_voxels)
    return volume.with_intensities(np.where(keep, volume.intensities, 0).astype(volume.intensities.dtype))


def mask_region(volume: Volume, region, dilation_radius_voxels=2) -> Volume:
    region = Region(region) if not isinstance(region, Region) else region
    selected = volume.region_labels == RegionLabel.of(region)

    if not selected.any():
        logger.warning("Region %s is absent from the label grid; returning an empty volume", region.value)
        return volume.with_intensities(np.zeros_like(volume.intensities))

    keep = dilate(selected, dilation_radius_voxels)
    return volume.with_intensities(np.where(keep, volume.intensities, 0).astype(volume.intensities.dtype))


def preprocess(volume: Volume, config: SynthConfig) -> Volume:
    """resample -> crop_or_pad -> apply_mask, the chain every stored volume goes through."""
    volume = resample(volume, config.spacing)
    volume = crop_or_pad(volume, config.shape)
    return apply_mask(volume, config.dilation_radius)


def finding_voxels(volume: Volume, finding: Finding) -> np.ndarray:
    """Boolean grid of the voxels inside a finding's sphere, in ``volume``'s frame."""
    axes = [
        volume.origin[axis] + np.arange(volume.shape[axis]) * volume.spacing[axis]
        for axis in range(3)
    ]
    x, y, z = np.meshgrid(*axes, indexing='ij', sparse=True)
    in_plane = (x - finding.center_mm[0]) ** 2 + (y - finding.center_mm[1]) ** 2 <= finding.radius_mm ** 2
    return in_plane & (np.abs(z - finding.center_mm[2]) <= max(finding.radius_mm, 0.5 * volume.spacing[2]))


def save_volume(path, volume: Volume):
    dtype = np.dtype(volume.intensities.dtype).newbyteorder('<')
    codes = {value: key for key, value in DTYPE_CODES.items()}
    if dtype not in codes:
        raise VolumeFormatException("Unsupported intensity dtype {}".format(volume.intensities.dtype))

    header = VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, codes[dtype], *volume.shape,
                                *volume.spacing, 2)
    header = header.ljust(VOLUME_HEADER_SIZE, b"\x00")

    with atomic_write(path) as file_handler:
        file_handler.write(header)
        file_handler.write(volume.intensities.astype(dtype).tobytes(order='F'))
        file_handler.write(volume.mask.astype(np.uint8).tobytes(order='F'))
        file_handler.write(volume.region_labels.astype(np.uint8).tobytes(order='F'))
        file_handler.write(VOLUME_TRAILER.pack(*volume.origin))


def load_volume(path) -> Volume:
    with open(path, 'rb') as file_handler:
        raw = file_handler.read()

    if len(raw) < VOLUME_HEADER_SIZE or raw[:8] != VOLUME_MAGIC:
        raise VolumeFormatException("{} is not a volume container".format(path))

    fields = VOLUME_HEADER.unpack(raw[:VOLUME_HEADER.size])
    _, version, dtype_code, nx, ny, nz = fields[:6]
    spacing, grid_count = fields[6:9], fields[9]
    if version != VOLUME_VERSION:
        raise VolumeFormatException("Unsupported volume version {}".format(version))
    if dtype_code not in DTYPE_CODES:
        raise VolumeFormatException("Unknown dtype code {}".format(dtype_code))

    shape = (nx, ny, nz)
    dtype = DTYPE_CODES[dtype_code]
    count = nx * ny * nz
    expected = VOLUME_HEADER_SIZE + count * dtype.itemsize + grid_count * count + VOLUME_TRAILER.size
    if len(raw) != expected:
        raise VolumeFormatException("{} is truncated: {} of {} bytes".format(path, len(raw), expected))

    offset = VOLUME_HEADER_SIZE
    intensities = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order='F')
    offset += count * dtype.itemsize
    grids = []
    for _ in range(grid_count):
        grids.append(np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset).reshape(shape, order='F'))
        offset += count
    origin = VOLUME_TRAILER.unpack_from(raw, offset)

    return Volume(
        intensities=intensities.astype(np.float32 if dtype_code == 1 else np.float64),
        spacing=spacing,
        mask=grids[0].copy(),
        region_labels=grids[1].copy(),
        origin=origin,
    )


SUBJECT_CSV_HEADER = [
    "subject_id", "age", "sex", "bracket", "packs_per_day", "alcohol_days", "sedentary_hours",
    "work_level", "exercise_level", "biological_age",
]


def write_subjects(path, subjects: List[Subject]):
    write_csv(path, SUBJECT_CSV_HEADER, (
        [subject.id, subject.chronological_age, subject.sex.value, subject.bracket,
         subject.covariates["packs_per_day"], subject.covariates["alcohol_days"],
         subject.covariates["sedentary_hours"], subject.covariates["work_level"],
         subject.covariates["exercise_level"], subject.biological_age]
        for subject in subjects
    ))


def read_subjects(path) -> List[Subject]:
    subjects = []
    for row in read_csv(path):
        subjects.append(Subject(
            id=row["subject_id"],
            chronological_age=float(row["age"]),
            sex=Sex(row["sex"]),
            bracket=int(row["bracket"]),
            covariates={
                "packs_per_day": float(row["packs_per_day"]),
                "alcohol_days": int(row["alcohol_days"]),
                "sedentary_hours": float(row["sedentary_hours"]),
                "work_level": row["work_level"],
                "exercise_level": row["exercise_level"],
            },
            biological_age=float(row["biological_age"]),
        ))
    return subjects
