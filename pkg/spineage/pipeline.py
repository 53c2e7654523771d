"""
Stage runner: generate -> cluster -> split -> train -> evaluate -> biomarkers -> gradcam.

Every stage writes under ``<workdir>/<stage>/`` and records its input hash and
output digests in ``<workdir>/manifest.json``; a stage is skipped while its
input hash is unchanged and its outputs are still on disk.
"""
import copy
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional

import arrow
import numpy as np
import psutil

from .clustering import HdbscanConfig, Verdict, assign_normality, hdbscan, summarize_clusters, summary_text
from .config import ConfigException, PipelineConfig
from .embedding import embed
from .eval_stats import (
    COVARIATE_GROUPS,
    ICC_CSV_HEADER,
    METRIC_COLUMNS,
    ODDS_CSV_HEADER,
    RankDeficiencyException,
    StatisticsException,
    abs_error_table,
    covariate_design,
    degenerative_design,
    drop_constant_columns,
    evaluate,
    fit_bias,
    fit_sag_ols,
    heavy_work_by_age,
    icc_by_group,
    icc_summary,
    large_discrepancies,
    odds_ratios,
    structural_design,
    write_ols,
)
from .file_io import atomic_write
from .model import (
    SpineAgeNet,
    VolumeDataset,
    Sample,
    gradcam,
    load_checkpoint,
    predict,
    save_checkpoint,
    to_network_input,
    train,
    write_gradcam,
    write_training_log,
)
from .report_features import (
    CONDITION_CSV_HEADER,
    DENSE_COLUMNS,
    Region,
    aggregate,
    condition_rows,
    feature_matrix,
    read_condition_csv,
)
from .synthvol import (
    BRACKETS,
    MAX_AGE,
    MIN_AGE,
    finding_voxels,
    generate_rescan,
    generate_subject,
    load_volume,
    mask_region,
    preprocess,
    read_subjects,
    save_volume,
    write_subjects,
)
from .utils import config_digest, path_digest, read_csv, save_scatter, seed_for, write_csv

logger = logging.getLogger(__name__)

STAGES = ("generate", "cluster", "split", "train", "evaluate", "biomarkers", "gradcam")
DEPENDENCIES = {
    "generate": (),
    "cluster": ("generate",),
    "split": ("cluster",),
    "train": ("split",),
    "evaluate": ("train",),
    "biomarkers": ("evaluate",),
    "gradcam": ("train",),
}
SPLITS = ("train", "val", "test")

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"
VOLUME_CACHE_SIZE = 256

SPLIT_CSV_HEADER = ["subject_id", "bracket", "sex", "normal", "split", "stratum_rank", "stratum_train"]
PREDICTION_CSV_HEADER = ["subject_id", "split", "normal", "age", "bracket", "raw", "corrected", "sag"]
ABLATION_CSV_HEADER = ["arm", "data_fraction", "loss", "region", "n_train"] + METRIC_COLUMNS
# ICC pairs are the two SAG columns
RESCAN_CSV_HEADER = ["subject_id", "sex", "age", "rescan_age", "first", "second", "first_sag", "second_sag"]


class StageDependencyException(Exception):
    pass


class PipelineLockException(Exception):
    pass


class StageFailure(Exception):
    def __init__(self, stage, cause):
        super().__init__("stage '{}' failed: {}".format(stage, cause))
        self.stage = stage
        self.cause = cause


def worker_count():
    return psutil.cpu_count(logical=False) or 1


def subject_id(index):
    return "sub-{:05d}".format(index)


def subject_seed(master_seed, index):
    return seed_for(master_seed, "subject", index)


def subject_index(identifier):
    return int(identifier.split("-", 1)[1])


class PipelineLock:
    """One pipeline per working directory; a lock left by a dead process is reclaimed."""

    def __init__(self, workdir):
        self.path = os.path.join(workdir, LOCK_NAME)

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        while True:
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                owner = self._owner()
                if owner is not None and owner != os.getpid() and psutil.pid_exists(owner):
                    raise PipelineLockException("{} is held by running process {}".format(self.path, owner))
                logger.warning("Reclaiming stale lock %s (pid %s)", self.path, owner)
                os.unlink(self.path)
                continue
            with os.fdopen(fd, 'w') as lock_file:
                lock_file.write(str(os.getpid()))
            return self

    def _owner(self):
        try:
            with open(self.path, 'r') as lock_file:
                return int(lock_file.read().strip() or 0) or None
        except (OSError, ValueError):
            return None

    def __exit__(self, exc_type, exc_value, traceback):
        if os.path.exists(self.path):
            os.unlink(self.path)


@dataclass
class StageRecord:
    input_hash: str
    output_hash: str
    outputs: List[str]
    started: str
    finished: str


@dataclass
class RunManifest:
    stages: Dict[str, StageRecord] = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            return cls()
        with open(path, 'r') as manifest_file:
            raw = json.load(manifest_file)
        return cls({stage: StageRecord(**record) for stage, record in raw.get("stages", {}).items()})

    def save(self, path):
        with atomic_write(path, 'w') as manifest_file:
            json.dump({"stages": {stage: asdict(record) for stage, record in self.stages.items()}},
                      manifest_file, indent=2, sort_keys=True)

    def is_current(self, stage, input_hash, workdir):
        record = self.stages.get(stage)
        if record is None or record.input_hash != input_hash:
            return False
        return all(os.path.exists(os.path.join(workdir, output)) for output in record.outputs)


def ancestors(stage):
    """Every stage whose outputs reach ``stage``, in pipeline order."""
    found = set()
    pending = list(DEPENDENCIES[stage])
    while pending:
        dependency = pending.pop()
        if dependency not in found:
            found.add(dependency)
            pending.extend(DEPENDENCIES[dependency])
    return [candidate for candidate in STAGES if candidate in found]


def _output_hash(workdir, outputs):
    return config_digest([[output, path_digest(os.path.join(workdir, output))] for output in sorted(outputs)])


def stratified_split(strata, fractions, seed):
    """
    Per-stratum shuffled assignment to train/val/test. ``strata`` maps a key to the
    member ids; returns id -> (split, rank within the stratum's train share, train share size).
    """
    assignment = {}
    for key in sorted(strata):
        members = sorted(strata[key])
        order = np.random.default_rng(seed_for(seed, "split", *key)).permutation(len(members))
        n_train = int(round(fractions[0] * len(members)))
        n_val = min(int(round(fractions[1] * len(members))), len(members) - n_train)
        for position, member_index in enumerate(order):
            member = members[member_index]
            if position < n_train:
                assignment[member] = ("train", position, n_train)
            elif position < n_train + n_val:
                assignment[member] = ("val", -1, n_train)
            else:
                assignment[member] = ("test", -1, n_train)
    return assignment


def train_subset(split_rows, data_fraction):
    """Training ids kept under ``data_fraction``, taken per stratum by shuffled rank."""
    train_rows = [row for row in split_rows if row["split"] == "train"]
    kept = [row for row in train_rows
            if int(row["stratum_rank"]) < int(round(data_fraction * int(row["stratum_train"])))]
    if len(kept) < 2:
        kept = sorted(train_rows, key=lambda row: (int(row["stratum_rank"]), row["subject_id"]))[:2]
    return sorted(row["subject_id"] for row in kept)


class Pipeline:
    def __init__(self, config: PipelineConfig, force=False):
        self.config = config
        self.force = force
        self.workdir = config.workdir
        self.manifest_path = os.path.join(self.workdir, MANIFEST_NAME)
        self.manifest = RunManifest()

    def path(self, *parts):
        return os.path.join(self.workdir, *parts)

    def run(self, stages) -> List[str]:
        """Run the requested stages in dependency order; returns the stages actually executed."""
        requested = set(STAGES) if "all" in stages else set(stages)
        unknown = requested - set(STAGES)
        if unknown:
            raise ConfigException("Unknown stage(s): {}".format(", ".join(sorted(unknown))))

        executed = []
        with PipelineLock(self.workdir):
            self.manifest = RunManifest.load(self.manifest_path)
            for stage in STAGES:
                if stage in requested and self._run_stage(stage):
                    executed.append(stage)
        return executed

    def _run_stage(self, stage):
        upstream = []
        for dependency in ancestors(stage):
            record = self.manifest.stages.get(dependency)
            if record is None:
                raise StageDependencyException(
                    "stage '{}' needs the outputs of '{}'; run `spineage {}` first".format(stage, dependency, dependency))
            upstream.append(record.output_hash)

        input_hash = self.config.stage_hash(stage, upstream)
        if not self.force and self.manifest.is_current(stage, input_hash, self.workdir):
            logger.info("Skipping %s: inputs unchanged", stage)
            return False

        started = arrow.utcnow().isoformat()
        logger.info("Running %s", stage)
        try:
            outputs = getattr(self, "stage_" + stage)()
        except Exception as exc:
            logger.error("Stage %s failed: %s", stage, exc)
            raise StageFailure(stage, exc) from exc

        self.manifest.stages[stage] = StageRecord(input_hash, _output_hash(self.workdir, outputs), sorted(outputs),
                                                  started, arrow.utcnow().isoformat())
        self.manifest.save(self.manifest_path)
        return True

    def _subjects(self):
        return read_subjects(self.path("generate", "subjects.csv"))

    def stage_generate(self):
        config = self.config
        rng = np.random.default_rng([config.seed, 0])
        ages = np.round(rng.uniform(MIN_AGE, MAX_AGE, config.n_subjects), 2)
        sexes = rng.choice(["M", "F"], config.n_subjects)
        os.makedirs(self.path("generate", "volumes"), exist_ok=True)

        def make(index):
            volume, records, subject = generate_subject(config.synth, float(ages[index]), str(sexes[index]),
                                                        subject_seed(config.seed, index), subject_id(index))
            relative = os.path.join("generate", "volumes", subject.id + ".spv")
            save_volume(self.path(relative), preprocess(volume, config.synth))
            return subject, records, relative

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            results = list(pool.map(make, range(config.n_subjects)))

        subjects = [subject for subject, _, _ in results]
        write_subjects(self.path("generate", "subjects.csv"), subjects)
        write_csv(self.path("generate", "conditions.csv"), CONDITION_CSV_HEADER,
                  [row for subject, records, _ in results for row in condition_rows(subject.id, records)])
        logger.info("Generated %d subjects", len(subjects))

        return [os.path.join("generate", "subjects.csv"), os.path.join("generate", "conditions.csv")] + [
            relative for _, _, relative in results]

    def _dense(self, subjects):
        conditions = read_condition_csv(self.path("generate", "conditions.csv"))
        return feature_matrix([aggregate(conditions.get(subject.id, [])) for subject in subjects])

    def stage_cluster(self):
        config = self.config
        subjects = self._subjects()
        dense = self._dense(subjects)
        outputs = [os.path.join("cluster", "features.csv"), os.path.join("cluster", "verdicts.csv"),
                   os.path.join("cluster", "summary.txt")]
        write_csv(self.path(outputs[0]), ["subject_id"] + DENSE_COLUMNS,
                  ([subject.id] + row.astype(np.int64).tolist() for subject, row in zip(subjects, dense)))

        brackets = [bracket for bracket in BRACKETS if any(subject.bracket == bracket for subject in subjects)]

        def cluster_bracket(bracket):
            members = [index for index, subject in enumerate(subjects) if subject.bracket == bracket]
            points = dense[members]
            embedding = embed(points, config.umap)
            settings = HdbscanConfig(
                min_cluster_size=max(2, math.ceil(config.hdbscan.min_cluster_fraction * len(members))),
                min_samples=config.hdbscan.min_samples,
                cluster_selection_epsilon=float(config.hdbscan.epsilon.get(bracket, 0.0)),
            )
            labeling = assign_normality(hdbscan(embedding.coordinates, settings), len(members))
            summarize_clusters(labeling, points)
            logger.debug("bracket %d: %d subjects, %d clusters", bracket, len(members), len(labeling.cluster_ids))
            return members, embedding, labeling

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            results = list(pool.map(cluster_bracket, brackets))

        verdict_rows = []
        summaries = []
        for bracket, (members, embedding, labeling) in zip(brackets, results):
            ids = [subjects[index].id for index in members]
            name = "bracket_{}".format(bracket)
            write_csv(self.path("cluster", name + "_embedding.csv"), ["subject_id", "x", "y"],
                      ([identifier] + point.tolist() for identifier, point in zip(ids, embedding.coordinates)))
            write_csv(self.path("cluster", name + "_clusters.csv"), ["subject_id", "cluster_id", "verdict"],
                      ([identifier, int(label), verdict.value]
                       for identifier, label, verdict in zip(ids, labeling.labels, labeling.point_verdicts)))
            save_scatter(self.path("cluster", name + ".ppm"), embedding.coordinates, labeling.labels)
            outputs.extend(os.path.join("cluster", name + suffix)
                           for suffix in ("_embedding.csv", "_clusters.csv", ".ppm"))
            summaries.append(summary_text(bracket, labeling))
            verdict_rows.extend([identifier, bracket, int(label), verdict.value]
                                for identifier, label, verdict in zip(ids, labeling.labels, labeling.point_verdicts))

        verdict_rows.sort(key=lambda row: row[0])
        write_csv(self.path(outputs[1]), ["subject_id", "bracket", "cluster_id", "verdict"], verdict_rows)
        with atomic_write(self.path(outputs[2]), 'w') as summary_file:
            summary_file.write("".join(summaries))

        normal = sum(1 for row in verdict_rows if row[3] == Verdict.NORMAL.value)
        logger.info("%d of %d subjects fall in normal clusters", normal, len(verdict_rows))
        return outputs

    def stage_split(self):
        config = self.config
        sexes = {subject.id: subject.sex.value for subject in self._subjects()}
        verdicts = read_csv(self.path("cluster", "verdicts.csv"))

        strata = {}
        for row in verdicts:
            if row["verdict"] == Verdict.NORMAL.value:
                strata.setdefault((int(row["bracket"]), sexes[row["subject_id"]]), []).append(row["subject_id"])
        assignment = stratified_split(strata, config.split_fractions, config.seed)

        rows = []
        for row in verdicts:
            identifier = row["subject_id"]
            split, rank, stratum_train = assignment.get(identifier, ("test", -1, 0))
            rows.append([identifier, int(row["bracket"]), sexes[identifier], identifier in assignment,
                         split, rank, stratum_train])

        output = os.path.join("split", "split.csv")
        write_csv(self.path(output), SPLIT_CSV_HEADER, rows)
        counts = {split: sum(1 for row in rows if row[4] == split) for split in SPLITS}
        logger.info("Split: %(train)d train, %(val)d val, %(test)d test", counts)
        return [output]

    def _split_rows(self):
        return read_csv(self.path("split", "split.csv"))

    def _loader(self, region):
        @lru_cache(maxsize=VOLUME_CACHE_SIZE)
        def load(identifier):
            return self._network_input(load_volume(self.path("generate", "volumes", identifier + ".spv")), region)

        return load

    def _network_input(self, volume, region):
        if region != "whole":
            volume = mask_region(volume, Region(region), self.config.synth.dilation_radius)
        return to_network_input(volume, self.config.net.dtype)[0]

    def _train_model(self, out_dir, data_fraction, loss, region):
        config = self.config
        ages = {subject.id: subject.chronological_age for subject in self._subjects()}
        split_rows = self._split_rows()
        train_ids = train_subset(split_rows, data_fraction)
        val_ids = sorted(row["subject_id"] for row in split_rows if row["split"] == "val")

        dataset = VolumeDataset(
            train=[Sample(identifier, ages[identifier]) for identifier in train_ids],
            val=[Sample(identifier, ages[identifier]) for identifier in val_ids],
            loader=self._loader(region),
        )
        checkpoint = os.path.join(out_dir, "model.ckpt")
        net = SpineAgeNet(copy.deepcopy(config.net))
        log = train(net, dataset, loss=loss, config=config.train, checkpoint_path=self.path(checkpoint),
                    config_hash=config.stage_hash("train"))
        if not os.path.exists(self.path(checkpoint)):
            save_checkpoint(net, self.path(checkpoint), epoch=log.best_epoch, config_hash=config.stage_hash("train"))
        write_training_log(self.path(out_dir, "training_log.csv"), log)

        return net, len(train_ids), [checkpoint, os.path.join(out_dir, "training_log.csv")]

    def stage_train(self):
        config = self.config
        _, _, outputs = self._train_model("train", config.data_fraction, config.loss, config.region)
        return outputs

    def _predict_ids(self, net, identifiers, region):
        load = self._loader(region)
        return predict(net, [load(identifier) for identifier in identifiers], self.config.train.batch_size)

    def _evaluate_model(self, net, region):
        """Bias fit on validation, reports on the normal test set and on the full (mixed) test set."""
        subjects = {subject.id: subject for subject in self._subjects()}
        split_rows = self._split_rows()
        val_ids = sorted(row["subject_id"] for row in split_rows if row["split"] == "val")
        test_rows = sorted((row for row in split_rows if row["split"] == "test"), key=lambda row: row["subject_id"])
        test_ids = [row["subject_id"] for row in test_rows]

        val_raw = self._predict_ids(net, val_ids, region)
        correction = fit_bias([subjects[identifier].chronological_age for identifier in val_ids], val_raw)
        test_raw = self._predict_ids(net, test_ids, region)

        def report(identifiers, raw):
            return evaluate(identifiers, [subjects[identifier].chronological_age for identifier in identifiers],
                            [subjects[identifier].bracket for identifier in identifiers], raw, correction)

        full = report(test_ids, test_raw)
        normal_mask = [row["normal"] == "1" for row in test_rows]
        normal = report([identifier for identifier, keep in zip(test_ids, normal_mask) if keep],
                        test_raw[np.array(normal_mask, dtype=bool)])
        val = report(val_ids, val_raw)
        return correction, val, normal, full

    def stage_evaluate(self):
        config = self.config
        net = load_checkpoint(self.path("train", "model.ckpt"))
        correction, val, normal, full = self._evaluate_model(net, config.region)
        subjects = {subject.id: subject for subject in self._subjects()}
        normal_ids = {row.subject_id for row in normal.rows}

        outputs = {name: os.path.join("evaluate", name) for name in (
            "predictions.csv", "metrics.csv", "bias.csv", "abs_error.csv", "discrepancies.csv",
            "rescans.csv", "icc.csv", "icc.txt")}

        write_csv(self.path(outputs["predictions.csv"]), PREDICTION_CSV_HEADER, (
            [row.subject_id, split, row.subject_id in normal_ids or split == "val", row.age, row.bracket,
             row.raw, row.corrected, row.sag]
            for split, report in (("val", val), ("test", full)) for row in report.rows
        ))
        write_csv(self.path(outputs["metrics.csv"]), ["test_set"] + METRIC_COLUMNS,
                  [["normal"] + normal.metric_row(), ["full"] + full.metric_row()])
        write_csv(self.path(outputs["bias.csv"]), ["alpha", "beta"], [[correction.alpha, correction.beta]])
        write_csv(self.path(outputs["abs_error.csv"]), ["sex", "bracket", "n", "mean_abs_error"],
                  abs_error_table(normal, {identifier: subject.sex.value for identifier, subject in subjects.items()}))
        write_csv(self.path(outputs["discrepancies.csv"]), ["subject_id", "age", "corrected", "sag"],
                  large_discrepancies(full, config.stats.discrepancy_years))

        rescans = self._rescan_rows(net, correction, [row.subject_id for row in full.rows], subjects)
        write_csv(self.path(outputs["rescans.csv"]), RESCAN_CSV_HEADER, rescans)
        groups = []
        if len(rescans) >= 3:
            groups = icc_by_group([[row[6], row[7]] for row in rescans], [row[1] for row in rescans],
                                  [row[3] - row[2] for row in rescans], config.stats.bootstrap_reps, config.stats.seed)
        else:
            logger.warning("Only %d rescanned subjects; ICC not computed", len(rescans))
        write_csv(self.path(outputs["icc.csv"]), ICC_CSV_HEADER, [group.row() for group in groups])
        with atomic_write(self.path(outputs["icc.txt"]), 'w') as summary_file:
            summary_file.write(icc_summary(groups) if groups else "ICC not computed\n")

        return list(outputs.values())

    def _rescan_rows(self, net, correction, test_ids, subjects):
        config = self.config
        rows = []
        for identifier in test_ids[:config.n_rescan]:
            subject = subjects[identifier]
            seed = subject_seed(config.seed, subject_index(identifier))
            volume, _, rescan = generate_rescan(config.synth, subject, seed)
            second = self._network_input(preprocess(volume, config.synth), config.region)
            first = self._loader(config.region)(identifier)
            raw = predict(net, [first, second])
            first_corrected, second_corrected = (raw - correction.beta) / correction.alpha
            rows.append([identifier, subject.sex.value, subject.chronological_age, rescan.chronological_age,
                         float(first_corrected), float(second_corrected),
                         float(first_corrected) - subject.chronological_age,
                         float(second_corrected) - rescan.chronological_age])
        return rows

    def stage_biomarkers(self):
        config = self.config
        predictions = [row for row in read_csv(self.path("evaluate", "predictions.csv")) if row["split"] == "test"]
        subjects = {subject.id: subject for subject in self._subjects()}
        features = {row["subject_id"]: [int(row[column]) for column in DENSE_COLUMNS]
                    for row in read_csv(self.path("cluster", "features.csv"))}

        ids = [row["subject_id"] for row in predictions]
        sag = np.array([float(row["sag"]) for row in predictions])
        dense = np.array([features[identifier] for identifier in ids])
        covariates = [subjects[identifier].covariates for identifier in ids]
        male = np.array([subjects[identifier].sex.value == "M" for identifier in ids], dtype=np.float64)

        fits = {}
        for group in COVARIATE_GROUPS:
            design, names = drop_constant_columns(*covariate_design(group, dense, covariates), group=group)
            if not names:
                logger.warning("No varying covariates in %s; skipping", group)
                continue
            try:
                fits[group] = fit_sag_ols(sag, design, names, male, config.stats.confidence)
            except (RankDeficiencyException, StatisticsException) as exc:
                logger.warning("Skipping %s regression: %s", group, exc)

        outputs = {name: os.path.join("biomarkers", name) for name in ("ols.csv", "odds_ratios.csv", "heavy_work.csv")}
        write_ols(self.path(outputs["ols.csv"]), fits)

        odds_rows = []
        lumbar, lumbar_names = degenerative_design(dense, Region.LUMBAR)
        flags, flag_names = structural_design(dense)
        for column, name in zip(np.column_stack([lumbar, flags]).T, lumbar_names + flag_names):
            try:
                result = odds_ratios(sag, column > 0, config.stats.sag_high, config.stats.sag_low)
            except StatisticsException as exc:
                logger.warning("Odds ratios not computed: %s", exc)
                break
            odds_rows.append(result.row(name))
        write_csv(self.path(outputs["odds_ratios.csv"]), ODDS_CSV_HEADER, odds_rows)

        write_csv(self.path(outputs["heavy_work.csv"]),
                  ["age_bin", "heavy_n", "heavy_mean_sag", "other_n", "other_mean_sag"],
                  heavy_work_by_age(sag, [float(row["age"]) for row in predictions],
                                    [entry["work_level"] for entry in covariates], config.stats.age_bin_years))

        return list(outputs.values())

    def stage_gradcam(self):
        config = self.config
        net = load_checkpoint(self.path("train", "model.ckpt"))
        subjects = {subject.id: subject for subject in self._subjects()}
        test_ids = sorted(row["subject_id"] for row in self._split_rows() if row["split"] == "test")
        depth = net.config.input_shape[0]

        rows = []
        outputs = []
        for identifier in test_ids:
            if len(rows) >= config.gradcam_subjects:
                break
            subject = subjects[identifier]
            volume, _, generated = generate_subject(config.synth, subject.chronological_age, subject.sex,
                                                    subject_seed(config.seed, subject_index(identifier)), identifier)
            volume = preprocess(volume, config.synth)
            blobs = [finding_voxels(volume, finding)[:, :, depth // 2] for finding in generated.findings]
            blobs = [blob for blob in blobs if blob.any()]
            if not blobs:
                continue

            blob = max(blobs, key=lambda plane: int(plane.sum()))
            cam = gradcam(net, self._network_input(volume, config.region)[None])
            prefix = os.path.join("gradcam", identifier)
            write_gradcam(self.path(prefix), cam)
            outputs.extend([prefix + ".pgm", prefix + ".csv"])

            inside = float(cam.heatmap[blob].mean())
            outside = float(cam.heatmap[~blob].mean())
            rows.append([identifier, inside, outside, inside > outside])

        output = os.path.join("gradcam", "signal.csv")
        write_csv(self.path(output), ["subject_id", "blob_heat", "background_heat", "blob_hotter"], rows)
        logger.info("Grad-CAM: blob hotter than background in %d of %d subjects",
                    sum(1 for row in rows if row[3]), len(rows))
        return [output] + outputs


@dataclass
class Arm:
    name: str
    data_fraction: Optional[float] = None
    loss: Optional[str] = None
    region: Optional[str] = None


ARM_KEYS = {"data_size": "data_fraction", "loss": "loss", "region": "region"}


def parse_arm(text) -> Arm:
    """``name:key=value,key=value`` with keys data_size, loss and region."""
    name, _, body = text.partition(":")
    if not name or not body:
        raise ConfigException("Arm {!r} must look like name:key=value[,key=value]".format(text))
    arm = Arm(name.strip())
    for item in body.split(","):
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in ARM_KEYS:
            raise ConfigException("Unknown arm override {!r}; expected one of {}".format(key, ", ".join(ARM_KEYS)))
        try:
            setattr(arm, ARM_KEYS[key], float(value) if key == "data_size" else value.strip())
        except ValueError:
            raise ConfigException("Arm {} has a non-numeric data_size {!r}".format(arm.name, value))
    return arm


def ablation(config: PipelineConfig, arms: List[Arm], force=False):
    """Train and evaluate one model per arm on the shared split; writes ``ablation/table.csv``."""
    names = [arm.name for arm in arms]
    if len(set(names)) != len(names):
        raise ConfigException("Arm names overlap: {}".format(", ".join(sorted({n for n in names if names.count(n) > 1}))))

    arm_configs = []
    for arm in arms:
        arm_config = copy.deepcopy(config)
        arm_config.data_fraction = config.data_fraction if arm.data_fraction is None else arm.data_fraction
        arm_config.loss = arm.loss or config.loss
        arm_config.region = arm.region or config.region
        arm_config.validate()
        arm_configs.append(arm_config)

    # generate, cluster and split are shared with the main run
    Pipeline(config, force=force).run(["generate", "cluster", "split"])

    def run_arm(arm, arm_config):
        pipeline = Pipeline(arm_config)
        out_dir = os.path.join("ablation", arm.name)
        try:
            net, n_train, _ = pipeline._train_model(out_dir, arm_config.data_fraction, arm_config.loss,
                                                    arm_config.region)
            _, _, _, full = pipeline._evaluate_model(net, arm_config.region)
        except Exception as exc:
            logger.error("Arm %s failed: %s", arm.name, exc)
            raise StageFailure("ablation:" + arm.name, exc) from exc
        logger.info("Arm %s: R2 %.3f (corrected %.3f)", arm.name, full.metrics["r2"], full.metrics["r2_corrected"])
        return [arm.name, arm_config.data_fraction, arm_config.loss, arm_config.region, n_train] + full.metric_row()

    with PipelineLock(os.path.join(config.workdir, "ablation")):
        with ThreadPoolExecutor(max_workers=max(1, min(len(arms), worker_count()))) as pool:
            rows = list(pool.map(run_arm, arms, arm_configs))

    output = os.path.join(config.workdir, "ablation", "table.csv")
    write_csv(output, ABLATION_CSV_HEADER, rows)
    return output
