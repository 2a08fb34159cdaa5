import hashlib
import json
import logging
import os
import time
from typing import Any, Dict, List, Optional

from lenie.core.config import RunConfig, LenieError
from lenie.embedcore.cache import EmbeddingCache
from lenie.embedcore.encoder import EncoderError
from lenie.embedcore.matrix import EmbeddingMatrixError, load_embeddings
from lenie.evalcore.crossval import grid_search_lr
from lenie.evalcore.experiment import build_arm_texts, build_arm_features, AUGMENTED_ARMS, ARM_CONCAT
from lenie.evalcore.metrics import EvaluationError
from lenie.evalcore.report import ExperimentReport, write_report, load_report, summarize_reports, write_summary, \
    report_stem
from lenie.kgcore.graph import KnowledgeGraph, KgError, load_kg, check_expected_counts
from lenie.kgcore.labels import importance_labels
from lenie.kgcore.synth import generate_synthetic_kg, ENTITIES_FILE, RELATIONS_FILE, TRIPLETS_FILE, MANIFEST_FILE
from lenie.llmcore.augment import AugmentationStore, augment_nodes
from lenie.llmcore.prompt import LlmError
from lenie.niecore.checkpoint import save_checkpoint
from lenie.niecore.models import ModelError, NodeFeatureTable
from lenie.niecore.train import train_model
from lenie.samplecore.kmeans import SamplerError
from lenie.samplecore.sampler import SampledContext, sample_nodes, relation_coverage

logger = logging.getLogger(__name__)

INGEST = "ingest"
SAMPLE = "sample"
AUGMENT = "augment"
EMBED = "embed"
TRAIN = "train"
EVALUATE = "evaluate"
REPORT = "report"
STAGES = [INGEST, SAMPLE, AUGMENT, EMBED, TRAIN, EVALUATE, REPORT]
ALL = "all"

MANIFEST = "manifest.json"
SYNTH_DIR = "dataset"
EMBEDDING_CACHE = "embeddings-cache.jsonl"
GRAPH_SUMMARY = "graph.summary.json"
CONFIG_HASH = "config_hash"

# Manifest entry keys
ARTIFACTS = "artifacts"
DIGEST = "digest"
UPSTREAM = "upstream"
FAILED = "failed"

STAGE_ERRORS = (KgError, EncoderError, EmbeddingMatrixError, SamplerError, LlmError, ModelError, EvaluationError)


def samples_name(strategy: str) -> str:
    return f"samples-{strategy}.jsonl"


def store_name(strategy: str, backend: str) -> str:
    return f"augment-{strategy}-{backend}.jsonl"


def features_name(arm: str) -> str:
    return f"features-{arm}.lenb"


def cv_name(arm: str, model: str, seed: int) -> str:
    return f"cv-{arm}-{model}-seed{seed}.json"


def checkpoint_name(arm: str, model: str, seed: int) -> str:
    return f"model-{arm}-{model}-seed{seed}.lenm"


def predictions_name(arm: str, model: str, seed: int) -> str:
    return f"predictions-{arm}-{model}-seed{seed}.jsonl"


def summary_name(seed: int) -> str:
    return f"summary-seed{seed}"


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Pipeline:
    """
    Runs pipeline stages against output directory, skipping stages whose
    config hash, artifacts and upstream results are unchanged
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = config.output_dir
        self.manifest_path = os.path.join(self.output_dir, MANIFEST)
        self.manifest: Dict[str, Any] = {}
        self.augmentation_failures = 0
        self.generated = 0
        self.trained = 0
        self._kg: Optional[KnowledgeGraph] = None
        self._cache: Optional[EmbeddingCache] = None

    # Manifest

    def load_manifest(self) -> None:
        if not os.path.isfile(self.manifest_path):
            self.manifest = {}
            return
        try:
            with open(self.manifest_path, "r", encoding="utf-8") as fh:
                self.manifest = json.load(fh)
        except (OSError, ValueError) as e:
            raise StageError(f"Issue reading pipeline manifest '{self.manifest_path}'") from e

    def save_manifest(self) -> None:
        try:
            with open(self.manifest_path, "w", encoding="utf-8") as fh:
                json.dump(self.manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as e:
            raise StageError(f"Issue writing pipeline manifest '{self.manifest_path}'") from e

    def stage_key(self, stage: str, filtered: bool = True) -> str:
        """
        Manifest entry name. Augmentation is tracked per backend, training onwards per seed.
        Runs restricted to single arm keep separate entries
        """
        key = stage
        if stage == AUGMENT:
            key = f"{stage}@{self.config.backend_name}"
        elif stage in (TRAIN, EVALUATE, REPORT):
            key = f"{stage}@seed{self.config.seed}"
        if filtered and self.config.arm and stage != INGEST:
            key = f"{key}#{self.config.arm}"
        return key

    def stage_keys(self, stage: str) -> List[str]:
        """
        Entries that can satisfy stage. Arm restricted run also accepts results of full run
        """
        keys = [self.stage_key(stage, filtered=False)]
        own = self.stage_key(stage)
        if own not in keys:
            keys.append(own)
        return keys

    def done_key(self, stage: str) -> Optional[str]:
        """
        First entry that ran with current config, whose artifacts exist and whose upstream has not changed since
        """
        upstream = self._upstream_digest(stage)
        config_hash = self.config.stage_hash(stage)
        for key in self.stage_keys(stage):
            entry = self.manifest.get(key)
            if entry is None or entry.get(CONFIG_HASH) != config_hash:
                continue
            if any(not os.path.isfile(self._path(name)) for name in entry.get(ARTIFACTS, [])):
                continue
            if entry.get(UPSTREAM) == upstream:
                return key
        return None

    def _upstream_digest(self, stage: str) -> Optional[str]:
        index = STAGES.index(stage)
        if index == 0:
            return None
        key = self.done_key(STAGES[index - 1])
        return None if key is None else self.manifest[key].get(DIGEST)

    def is_done(self, stage: str) -> bool:
        return self.done_key(stage) is not None

    def is_complete(self, stage: str) -> bool:
        """
        Done and nothing left to retry
        """
        key = self.done_key(stage)
        return key is not None and not self.manifest[key].get(FAILED)

    def check_prerequisites(self, stage: str) -> None:
        """
        :raises StageOrderError naming earliest stage not done
        """
        for previous in STAGES[:STAGES.index(stage)]:
            if not self.is_done(previous):
                raise StageOrderError(f"Stage '{stage}' requires stage '{previous}' to run first")

    def record(self, stage: str, artifacts: List[str], failed: int = 0) -> None:
        digest = hashlib.sha256()
        for name in sorted(artifacts):
            digest.update(name.encode("utf-8"))
            digest.update(file_digest(self._path(name)).encode("utf-8"))
        self.manifest[self.stage_key(stage)] = {
            CONFIG_HASH: self.config.stage_hash(stage),
            ARTIFACTS: sorted(artifacts),
            DIGEST: digest.hexdigest(),
            UPSTREAM: self._upstream_digest(stage),
            FAILED: failed,
        }
        self.save_manifest()

    # Running

    def run(self, subcommand: str) -> None:
        """
        Runs single stage, or every stage in order for 'all'
        :raises StageOrderError, StageError, PartialAugmentationError
        """
        os.makedirs(self.output_dir, exist_ok=True)
        self.load_manifest()
        stages = STAGES if subcommand == ALL else [subcommand]
        for stage in stages:
            self.run_stage(stage)
        logger.info(f"Finished '{subcommand}': {self.generated} descriptions generated, "
                    f"{self.trained} models trained")
        if self.augmentation_failures:
            raise PartialAugmentationError(f"Augmentation failed for {self.augmentation_failures} nodes, "
                                           f"rerun 'augment' to retry them")

    def run_stage(self, stage: str) -> None:
        if stage not in STAGES:
            raise StageError(f"Unknown stage '{stage}'. Should be one of {STAGES}")
        self.check_prerequisites(stage)
        if self.is_complete(stage):
            logger.info(f"Skipping stage '{stage}', results are up to date")
            return
        logger.info(f"Running stage '{stage}'")
        started = time.time()
        try:
            getattr(self, stage)()
        except STAGE_ERRORS as e:
            raise StageError(f"Stage '{stage}' failed") from e
        logger.info(f"Stage '{stage}' finished in {time.time() - started:.1f}s")

    # Helpers

    def _path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def dataset_paths(self) -> List[str]:
        dataset = self.config.dataset
        if dataset.is_synthetic:
            directory = self._path(SYNTH_DIR)
            return [os.path.join(directory, name) for name in (ENTITIES_FILE, RELATIONS_FILE, TRIPLETS_FILE)]
        return [dataset.entities, dataset.relations, dataset.triplets]

    @property
    def kg(self) -> KnowledgeGraph:
        if self._kg is None:
            self._kg = load_kg(*self.dataset_paths())
        return self._kg

    @property
    def cache(self) -> Optional[EmbeddingCache]:
        if not (self.config.encoder.cache or self.config.sentence_encoder.cache):
            return None
        if self._cache is None:
            self._cache = EmbeddingCache(self._path(EMBEDDING_CACHE))
            self._cache.load()
        return self._cache

    def arm_strategy(self, arm: str) -> Optional[str]:
        if arm == ARM_CONCAT:
            return self.config.sampler.strategy
        return AUGMENTED_ARMS.get(arm)

    def sample_strategies(self) -> List[str]:
        strategies = {self.arm_strategy(arm) for arm in self.config.arms}
        return sorted(strategy for strategy in strategies if strategy is not None)

    def augment_strategies(self) -> List[str]:
        return sorted({AUGMENTED_ARMS[arm] for arm in self.config.arms if arm in AUGMENTED_ARMS})

    def load_contexts(self, strategy: str) -> Dict[int, SampledContext]:
        path = self._path(samples_name(strategy))
        contexts = {}
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        context = SampledContext.from_record(json.loads(line))
                        contexts[context.node] = context
        except (OSError, ValueError) as e:
            raise StageError(f"Issue reading samples '{path}'") from e
        return contexts

    def _write_jsonl(self, name: str, records: List[Dict[str, Any]]) -> None:
        try:
            with open(self._path(name), "w", encoding="utf-8") as fh:
                for record in records:
                    fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
        except OSError as e:
            raise StageError(f"Issue writing '{name}'") from e

    def _write_json(self, name: str, data: Any) -> None:
        try:
            with open(self._path(name), "w", encoding="utf-8") as fh:
                json.dump(data, fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as e:
            raise StageError(f"Issue writing '{name}'") from e

    def _touch(self, name: str) -> None:
        try:
            open(self._path(name), "a", encoding="utf-8").close()
        except OSError as e:
            raise StageError(f"Issue creating '{name}'") from e

    # Stages

    def ingest(self) -> None:
        artifacts = []
        dataset = self.config.dataset
        if dataset.is_synthetic:
            synthetic = dataset.synthetic
            generate_synthetic_kg(synthetic["nodes"], synthetic["relations"], synthetic["seed"],
                                  self._path(SYNTH_DIR), beta=synthetic["beta"])
            artifacts += [f"{SYNTH_DIR}/{name}" for name in
                          (ENTITIES_FILE, RELATIONS_FILE, TRIPLETS_FILE, MANIFEST_FILE)]
        self._kg = None
        summary = self.kg.summary()
        mismatches = check_expected_counts(self.kg, dataset.expected_counts)
        if mismatches:
            logger.warning(f"Dataset '{dataset.name}' differs from published counts: {mismatches}")
        self._write_json(GRAPH_SUMMARY, {**summary, CONFIG_HASH: self.config.stage_hash(INGEST)})
        print(json.dumps(summary, sort_keys=True))
        self.record(INGEST, artifacts + [GRAPH_SUMMARY])

    def sample(self) -> None:
        artifacts = []
        nodes = self.kg.labeled_ids()
        config_hash = self.config.stage_hash(SAMPLE)
        for strategy in self.sample_strategies():
            contexts = sample_nodes(self.kg, nodes, self.config.sentence_encoder,
                                    self.config.sampler.with_strategy(strategy),
                                    thread_count=self.config.thread_count, cache=self.cache)
            if contexts:
                coverage = [relation_coverage(self.kg, context) for context in contexts]
                ratios = [covered / available for covered, available in coverage if available]
                if ratios:
                    logger.info(f"Strategy '{strategy}' covers {sum(ratios) / len(ratios):.3f} of incident "
                                f"relation types on average")
            self._write_jsonl(samples_name(strategy),
                              [{**context.to_record(), CONFIG_HASH: config_hash} for context in contexts])
            artifacts.append(samples_name(strategy))
        self.record(SAMPLE, artifacts)

    def augment(self) -> None:
        artifacts = []
        failed = 0
        nodes = self.kg.labeled_ids()
        for strategy in self.augment_strategies():
            name = store_name(strategy, self.config.backend_name)
            contexts = self.load_contexts(strategy)
            summary = augment_nodes(self.kg, nodes, self.config.sampler.with_strategy(strategy),
                                    self.config.sentence_encoder, self.config.prompt, self.config.backend,
                                    self._path(name), contexts=[contexts[node] for node in nodes if node in contexts],
                                    thread_count=self.config.thread_count, cache=self.cache)
            # Store file exists even when nothing was generated
            self._touch(name)
            self.generated += summary.generated
            failed += len(summary.failed)
            artifacts.append(name)
        self.augmentation_failures += failed
        self.record(AUGMENT, artifacts, failed=failed)

    def embed(self) -> None:
        artifacts = []
        contexts = {strategy: self.load_contexts(strategy) for strategy in self.sample_strategies()}
        for arm in self.config.arms:
            strategy = self.arm_strategy(arm)
            store = None
            if arm in AUGMENTED_ARMS:
                store = AugmentationStore(self._path(store_name(strategy, self.config.backend_name))).load()
            texts = build_arm_texts(self.kg, arm, contexts.get(strategy), store, self.config.prompt,
                                    self.config.backend.backend_id)
            features = build_arm_features(texts, self.config.encoder, self.cache)
            features.matrix.save(self._path(features_name(arm)))
            artifacts.append(features_name(arm))
        self.record(EMBED, artifacts)

    def load_features(self, arm: str) -> NodeFeatureTable:
        matrix = load_embeddings(self._path(features_name(arm)))
        return NodeFeatureTable(list(range(matrix.rows)), matrix)

    def train(self) -> None:
        artifacts = []
        seed = self.config.seed
        labels = importance_labels(self.kg)
        config_hash = self.config.stage_hash(TRAIN)
        echo = self.config.echo(runtime=False)
        for arm in self.config.arms:
            features = self.load_features(arm)
            for model in self.config.models:
                started = time.time()
                arm_features = None if model.is_topology else features
                best_lr, report = grid_search_lr(model, self.kg, arm_features, labels,
                                                 self.config.evaluation.lr_grid,
                                                 folds=self.config.evaluation.folds, seed=seed,
                                                 k=self.config.evaluation.k,
                                                 thread_count=self.config.thread_count, arm=arm, config_echo=echo)
                grid_seconds = time.time() - started
                started = time.time()
                final = model if best_lr is None else model.with_learning_rate(best_lr)
                trained = train_model(self.kg, arm_features, labels, final)
                save_checkpoint(trained, self._path(checkpoint_name(arm, model.kind, seed)))
                self.trained += 1
                report.config_hash = config_hash
                self._write_json(cv_name(arm, model.kind, seed), {
                    CONFIG_HASH: config_hash,
                    "report": report.as_dict(),
                    "predictions": {str(node): score for node, score in sorted(report.predictions.items())},
                    "timings": {"grid_search": grid_seconds, "final_fit": time.time() - started},
                })
                artifacts += [cv_name(arm, model.kind, seed), checkpoint_name(arm, model.kind, seed)]
        self.record(TRAIN, artifacts)

    def evaluate(self) -> None:
        artifacts = []
        seed = self.config.seed
        truth = {label.node: label.value for label in importance_labels(self.kg)}
        config_hash = self.config.stage_hash(EVALUATE)
        for arm in self.config.arms:
            for model in self.config.models:
                path = self._path(cv_name(arm, model.kind, seed))
                try:
                    with open(path, "r", encoding="utf-8") as fh:
                        data = json.load(fh)
                except (OSError, ValueError) as e:
                    raise StageError(f"Issue reading cross-validation results '{path}'") from e
                report = ExperimentReport.from_dict(data["report"])
                report.config_hash = config_hash
                report.timings = data.get("timings", {})
                write_report(report, self.output_dir)
                predictions = {int(node): score for node, score in data["predictions"].items()}
                self._write_jsonl(predictions_name(arm, model.kind, seed), [
                    {"node": node, "prediction": predictions[node], "truth": truth[node], CONFIG_HASH: config_hash}
                    for node in sorted(predictions)
                ])
                stem = report_stem(arm, model.kind, seed)
                artifacts += [f"{stem}.json", f"{stem}.csv", predictions_name(arm, model.kind, seed)]
        self.record(EVALUATE, artifacts)

    def report(self) -> None:
        seed = self.config.seed
        reports = [load_report(self._path(f"{report_stem(arm, model.kind, seed)}.json"))
                   for arm in self.config.arms for model in self.config.models]
        rows = summarize_reports(reports)
        write_summary(rows, self.output_dir, summary_name(seed))
        for row in rows:
            logger.info(f"{row['arm']} / {row['model']}: spearman {row['metrics']['spearman']['mean']:.4f}, "
                        f"rmse {row['metrics']['rmse']['mean']:.4f}")
        self.record(REPORT, [f"{summary_name(seed)}.json", f"{summary_name(seed)}.csv"])


class StageError(LenieError):
    pass


class StageOrderError(StageError):
    pass


class PartialAugmentationError(LenieError):
    pass
