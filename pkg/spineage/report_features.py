"""
Spine-condition records and the feature vectors built from them.

Sparse layout (215): 26 vertebrae (C2-C7, T1-T13, L1-L7) x 8 degenerative kinds,
occurrence counts, followed by 7 structural flags.

Dense layout (67): for region in (cervical, thoracic, lumbar), for each degenerative
kind in declaration order, for each severity legal for that kind in the order
Mild < Moderate < Severe < NearComplete < Present: one count. 20 cells per region,
60 in total, followed by the same 7 structural flags.
"""
import csv
import logging
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)


class ReportFeatureException(Exception):
    pass


class DimensionException(Exception):
    pass


class Region(Enum):
    CERVICAL = "cervical"
    THORACIC = "thoracic"
    LUMBAR = "lumbar"

    @property
    def prefix(self):
        return self.value[0].upper()


# first legal index and vertebra count per region
REGION_RANGES = {
    Region.CERVICAL: (2, 6),
    Region.THORACIC: (1, 13),
    Region.LUMBAR: (1, 7),
}
N_VERTEBRAE = sum(count for _, count in REGION_RANGES.values())


class ConditionKind(Enum):
    DISC_BULGE = "disc_bulge"
    DISC_OSTEOPHYTE_COMPLEX = "disc_osteophyte_complex"
    UNCOVERTEBRAL_OSTEOPHYTE = "uncovertebral_osteophyte"
    PROTRUSION = "protrusion"
    EXTRUSION = "extrusion"
    DESICCATION = "desiccation"
    ENDPLATE_CHANGE = "endplate_change"
    ANNULAR_FISSURE = "annular_fissure"
    BONE_LESION = "bone_lesion"
    CONGENITAL_CANAL_NARROWING = "congenital_canal_narrowing"
    CORD_ABNORMALITY = "cord_abnormality"
    FRACTURE = "fracture"
    SOFT_TISSUE_EDEMA = "soft_tissue_edema"
    SPINAL_STENOSIS = "spinal_stenosis"
    SPONDYLOLISTHESIS = "spondylolisthesis"

    @property
    def is_structural(self):
        return self in STRUCTURAL_KINDS


class Severity(Enum):
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"
    NEAR_COMPLETE = "near_complete"
    PRESENT = "present"

    @property
    def rank(self):
        return SEVERITY_ORDER.index(self)


SEVERITY_ORDER = list(Severity)
DEGENERATIVE_KINDS = list(ConditionKind)[:8]
STRUCTURAL_KINDS = list(ConditionKind)[8:]

MILD, MODERATE, SEVERE, NEAR_COMPLETE, PRESENT = SEVERITY_ORDER
LEGAL_SEVERITIES = {
    ConditionKind.DISC_BULGE: (MILD, MODERATE, SEVERE),
    ConditionKind.DISC_OSTEOPHYTE_COMPLEX: (MILD, MODERATE, SEVERE),
    ConditionKind.UNCOVERTEBRAL_OSTEOPHYTE: (MILD, MODERATE, SEVERE),
    ConditionKind.PROTRUSION: (MILD, MODERATE, SEVERE),
    ConditionKind.EXTRUSION: (MILD, MODERATE),
    ConditionKind.DESICCATION: (MILD, MODERATE, SEVERE, NEAR_COMPLETE),
    ConditionKind.ENDPLATE_CHANGE: (PRESENT,),
    ConditionKind.ANNULAR_FISSURE: (PRESENT,),
}
for _kind in STRUCTURAL_KINDS:
    LEGAL_SEVERITIES[_kind] = (PRESENT,)

SPARSE_SIZE = N_VERTEBRAE * len(DEGENERATIVE_KINDS) + len(STRUCTURAL_KINDS)

DENSE_CELLS = [
    (region, kind, severity)
    for region in Region
    for kind in DEGENERATIVE_KINDS
    for severity in LEGAL_SEVERITIES[kind]
]
DENSE_INDEX = {cell: position for position, cell in enumerate(DENSE_CELLS)}
DENSE_SIZE = len(DENSE_CELLS) + len(STRUCTURAL_KINDS)
DENSE_COLUMNS = [
    "{}_{}_{}".format(region.value, kind.value, severity.value) for region, kind, severity in DENSE_CELLS
] + [kind.value for kind in STRUCTURAL_KINDS]


@dataclass(frozen=True)
class VertebraLabel:
    region: Region
    index: int

    def __post_init__(self):
        first, count = REGION_RANGES[self.region]
        if not first <= self.index < first + count:
            raise ReportFeatureException("Illegal vertebra {}{}".format(self.region.prefix, self.index))

    @property
    def position(self):
        # 0..25 running from C2 down to L7
        offset = 0
        for region, (first, count) in REGION_RANGES.items():
            if region == self.region:
                return offset + self.index - first
            offset += count

    @property
    def name(self):
        return "{}{}".format(self.region.prefix, self.index)

    @classmethod
    def from_position(cls, position):
        for region, (first, count) in REGION_RANGES.items():
            if position < count:
                return cls(region, first + position)
            position -= count

        raise ReportFeatureException("Vertebra position out of range")

    @classmethod
    def all(cls):
        return [cls.from_position(position) for position in range(N_VERTEBRAE)]


@dataclass(frozen=True)
class Condition:
    kind: ConditionKind
    severity: Severity

    def validate(self):
        if self.severity not in LEGAL_SEVERITIES[self.kind]:
            raise ReportFeatureException(
                "Severity {} is not legal for {}".format(self.severity.value, self.kind.value)
            )


@dataclass(frozen=True)
class ConditionRecord:
    condition: Condition
    vertebra: Optional[VertebraLabel] = None

    def validate(self):
        self.condition.validate()

        if self.condition.kind.is_structural and self.vertebra is not None:
            raise ReportFeatureException(
                "Structural pathology {} must not carry a vertebra".format(self.condition.kind.value)
            )
        if not self.condition.kind.is_structural and self.vertebra is None:
            raise ReportFeatureException(
                "Degenerative condition {} needs a vertebra".format(self.condition.kind.value)
            )

    @property
    def kind(self):
        return self.condition.kind

    @property
    def severity(self):
        return self.condition.severity


def degenerative(vertebra_name, kind, severity):
    """Shorthand: degenerative("L3", ConditionKind.DISC_BULGE, Severity.MILD)."""
    return ConditionRecord(Condition(kind, severity), parse_vertebra(vertebra_name))


def structural(kind):
    return ConditionRecord(Condition(kind, Severity.PRESENT))


def parse_vertebra(name):
    prefixes = {region.prefix: region for region in Region}
    try:
        return VertebraLabel(prefixes[name[0].upper()], int(name[1:]))
    except (KeyError, ValueError, IndexError):
        raise ReportFeatureException("Unable to parse vertebra label {!r}".format(name))


class _FeatureVector:
    size = 0

    def __init__(self, values):
        values = np.asarray(values, dtype=np.int64)
        if values.shape != (self.size,):
            raise DimensionException("{} needs {} entries, got {}".format(
                type(self).__name__, self.size, values.shape))
        if np.any(values < 0):
            raise ReportFeatureException("Feature counts must be nonnegative")
        if np.any(values[-len(STRUCTURAL_KINDS):] > 1):
            raise ReportFeatureException("Structural flags must be 0 or 1")
        values.setflags(write=False)
        self.values = values

    def __eq__(self, other):
        return type(self) == type(other) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return "{}({})".format(type(self).__name__, np.flatnonzero(self.values).tolist())


class SparseFeatures(_FeatureVector):
    size = SPARSE_SIZE


class DenseFeatures(_FeatureVector):
    size = DENSE_SIZE

    @property
    def structural_flags(self):
        return self.values[len(DENSE_CELLS):]

    def region_total(self, region):
        return int(sum(self.values[DENSE_INDEX[cell]] for cell in DENSE_CELLS if cell[0] == region))


def _structural_flags(records):
    flags = np.zeros(len(STRUCTURAL_KINDS), dtype=np.int64)
    for record in records:
        if record.kind.is_structural:
            flags[STRUCTURAL_KINDS.index(record.kind)] = 1
    return flags


def encode_sparse(records: List[ConditionRecord]) -> SparseFeatures:
    counts = np.zeros(N_VERTEBRAE * len(DEGENERATIVE_KINDS), dtype=np.int64)

    for record in records:
        record.validate()
        if not record.kind.is_structural:
            counts[record.vertebra.position * len(DEGENERATIVE_KINDS) + DEGENERATIVE_KINDS.index(record.kind)] += 1

    return SparseFeatures(np.concatenate([counts, _structural_flags(records)]))


def aggregate(records: List[ConditionRecord]) -> DenseFeatures:
    counts = np.zeros(len(DENSE_CELLS), dtype=np.int64)

    for record in records:
        record.validate()
        if not record.kind.is_structural:
            counts[DENSE_INDEX[(record.vertebra.region, record.kind, record.severity)]] += 1

    return DenseFeatures(np.concatenate([counts, _structural_flags(records)]))


def _as_array(features):
    if isinstance(features, _FeatureVector):
        return features.values.astype(np.float64)
    return np.asarray(features, dtype=np.float64)


def canberra(p, q) -> float:
    p = _as_array(p)
    q = _as_array(q)
    if p.shape != q.shape:
        raise DimensionException("Canberra distance needs equal lengths, got {} and {}".format(p.shape, q.shape))

    numerator = np.abs(p - q)
    denominator = np.abs(p) + np.abs(q)
    terms = np.divide(numerator, denominator, out=np.zeros_like(numerator), where=denominator > 0)

    return float(terms.sum())


def feature_matrix(features) -> np.ndarray:
    return np.vstack([_as_array(item) for item in features]) if len(features) else np.zeros((0, DENSE_SIZE))


def pairwise_canberra(matrix) -> np.ndarray:
    # scipy's canberra treats 0/0 terms as 0, same as canberra() above
    matrix = np.asarray(matrix, dtype=np.float64)
    return cdist(matrix, matrix, metric='canberra')


def read_condition_csv(path) -> Dict[str, List[ConditionRecord]]:
    """Read subject_id, region, vertebra_index, condition_kind, severity rows."""
    records = defaultdict(list)

    with open(path, 'r', newline='') as file_handler:
        for line_number, row in enumerate(csv.DictReader(file_handler), start=2):
            try:
                kind = ConditionKind(row['condition_kind'])
                severity = Severity(row['severity'])
                vertebra = None
                if row['region']:
                    vertebra = VertebraLabel(Region(row['region']), int(row['vertebra_index']))
            except (ValueError, KeyError) as exc:
                raise ReportFeatureException("Bad condition row at line {}: {}".format(line_number, exc))

            record = ConditionRecord(Condition(kind, severity), vertebra)
            record.validate()
            records[row['subject_id']].append(record)

    return dict(records)


def condition_rows(subject_id, records):
    for record in records:
        vertebra = record.vertebra
        yield [
            subject_id,
            vertebra.region.value if vertebra else "",
            vertebra.index if vertebra else "",
            record.kind.value,
            record.severity.value,
        ]


CONDITION_CSV_HEADER = ["subject_id", "region", "vertebra_index", "condition_kind", "severity"]
