import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional

import yaml

from lenie.embedcore.encoder import TextEncoderConfig, configure_encoder, EncoderConfigError, ENCODER_KEYS, KIND, \
    ENCODER_KINDS
from lenie.evalcore.crossval import FoldConfigError
from lenie.evalcore.experiment import EvaluationConfig, configure_evaluation, EVALUATION_KEYS, ARMS, ARMS_KEY
from lenie.llmcore.backend import LlmBackendConfig, configure_backends, LlmBackendConfigError, BACKEND_KEYS, \
    BACKEND_KINDS, DEFAULT_BACKEND
from lenie.llmcore.prompt import PromptTemplate, configure_prompt, PromptConfigError, PROMPT_KEYS
from lenie.niecore.models import ModelConfig, configure_model, ModelConfigError, MODEL_KEYS, MODEL_KINDS, \
    AGGREGATOR, AGGREGATORS
from lenie.samplecore.kmeans import SamplerConfigError
from lenie.samplecore.sampler import SamplerConfig, configure_sampler, SAMPLER_KEYS, STRATEGY, STRATEGIES

logger = logging.getLogger(__name__)

DATASET_CONFIGS_DIR = "datasetconfigs"
SYNTH_DATASET = "SYNTH"

# Configuration file - section names
DATASET = "dataset"
SAMPLER = "sampler"
ENCODER = "encoder"
SENTENCE_ENCODER = "sentence_encoder"
PROMPT = "prompt"
LLM = "llm"
MODELS = "models"
EVALUATION = "evaluation"
SEED = "seed"
OUTPUT_DIR = "output_dir"
THREAD_COUNT = "thread_count"
TOP_LEVEL_KEYS = [DATASET, SAMPLER, ENCODER, SENTENCE_ENCODER, PROMPT, LLM, MODELS, EVALUATION, SEED, OUTPUT_DIR,
                  THREAD_COUNT]
## Dataset section
NAME = "name"
DIR = "dir"
ENTITIES = "entities"
RELATIONS = "relations"
TRIPLETS = "triplets"
SYNTHETIC = "synthetic"
DATASET_KEYS = [NAME, DIR, ENTITIES, RELATIONS, TRIPLETS, SYNTHETIC]
DATASET_FILES = {ENTITIES: "entities.tsv", RELATIONS: "relations.tsv", TRIPLETS: "triplets.tsv"}
## Synthetic generator block
SYNTH_NODES = "nodes"
SYNTH_RELATIONS = "relations"
SYNTH_SEED = "seed"
SYNTH_BETA = "beta"
SYNTHETIC_KEYS = [SYNTH_NODES, SYNTH_RELATIONS, SYNTH_SEED, SYNTH_BETA]
## Dataset defaults file
DEFAULT_K_KEY = "k"
EXPECTED_COUNTS = "expected_counts"

DEFAULT_OUTPUT_DIR = "./lenie-out"
DEFAULT_THREAD_COUNT = 3
DEFAULT_MODELS = ["gnn"]

# Config sections each stage depends on
STAGE_SECTIONS = {
    "ingest": [DATASET],
    "sample": [DATASET, SAMPLER, SENTENCE_ENCODER, EVALUATION],
    "augment": [DATASET, SAMPLER, SENTENCE_ENCODER, EVALUATION, PROMPT, LLM],
    "embed": [DATASET, SAMPLER, SENTENCE_ENCODER, EVALUATION, PROMPT, LLM, ENCODER],
    "train": [DATASET, SAMPLER, SENTENCE_ENCODER, EVALUATION, PROMPT, LLM, ENCODER, MODELS, SEED],
    "evaluate": [DATASET, SAMPLER, SENTENCE_ENCODER, EVALUATION, PROMPT, LLM, ENCODER, MODELS, SEED],
    "report": [DATASET, SAMPLER, SENTENCE_ENCODER, EVALUATION, PROMPT, LLM, ENCODER, MODELS, SEED],
}


def dataset_configs_dir() -> str:
    return os.path.abspath(f"{os.path.dirname(__file__)}/../{DATASET_CONFIGS_DIR}")


def list_dataset_defaults() -> List[str]:
    """
    :return: names of bundled dataset defaults
    """
    configs_dir = dataset_configs_dir()
    return sorted(f.split(".")[0] for f in os.listdir(configs_dir)
                  if os.path.isfile(os.path.join(configs_dir, f)) and f.endswith(".yaml"))


def dataset_defaults_path(name: str) -> str:
    return f"{dataset_configs_dir()}/{name}.yaml"


def load_dataset_defaults(name: str) -> Dict[str, Any]:
    """
    :return: bundled defaults of dataset, empty for unknown dataset names
    :raises LenieConfigError
    """
    filename = dataset_defaults_path(name)
    if not os.path.isfile(filename):
        logger.debug(f"No bundled defaults for dataset '{name}'")
        return {}
    try:
        with open(filename) as fh:
            defaults = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise LenieConfigError(f"Error in yaml file format: '{filename}'") from e
    if not isinstance(defaults, dict):
        raise LenieConfigError(f"Incorrect dataset defaults file '{filename}'")
    return defaults


class DatasetConfig:
    def __init__(self, name: str, entities: Optional[str], relations: Optional[str], triplets: Optional[str],
                 synthetic: Optional[Dict[str, Any]] = None,
                 expected_counts: Optional[Dict[str, int]] = None,
                 echo: Optional[Dict[str, Any]] = None):
        """
        :param name: dataset name, selects bundled defaults
        :param entities: resolved entities.tsv path, None for generated datasets
        :param relations: resolved relations.tsv path
        :param triplets: resolved triplets.tsv path
        :param synthetic: generator parameters of synthetic dataset
        :param expected_counts: published counts to compare with on ingest
        :param echo: section as normalized for echo and hashing
        """
        self.name = name
        self.entities = entities
        self.relations = relations
        self.triplets = triplets
        self.synthetic = synthetic
        self.expected_counts = expected_counts or {}
        self.echo = echo or {}

    @property
    def is_synthetic(self) -> bool:
        return self.synthetic is not None

    def __repr__(self):
        return f"DatasetConfig({self.name})"


class RunConfig:
    """
    Normalized run configuration
    """

    def __init__(self, dataset: DatasetConfig,
                 sampler: SamplerConfig,
                 encoder: TextEncoderConfig,
                 sentence_encoder: TextEncoderConfig,
                 prompt: PromptTemplate,
                 backends: Dict[str, LlmBackendConfig],
                 backend_name: str,
                 models: List[ModelConfig],
                 evaluation: EvaluationConfig,
                 seed: int,
                 output_dir: str,
                 thread_count: int,
                 named_backends: bool = False,
                 arm: Optional[str] = None):
        self.dataset = dataset
        self.sampler = sampler
        self.encoder = encoder
        self.sentence_encoder = sentence_encoder
        self.prompt = prompt
        self.backends = backends
        self.backend_name = backend_name
        self.models = models
        self.evaluation = evaluation
        self.seed = seed
        self.output_dir = output_dir
        self.thread_count = thread_count
        self.named_backends = named_backends
        self.arm = arm

    @property
    def backend(self) -> LlmBackendConfig:
        return self.backends[self.backend_name]

    @property
    def arms(self) -> List[str]:
        """
        Arms this run evaluates. Arm filter is not part of echo or stage hashes
        """
        return [self.arm] if self.arm else self.evaluation.arms

    def sections(self) -> Dict[str, Any]:
        if self.named_backends:
            llm = {name: backend.as_dict() for name, backend in self.backends.items()}
            llm[DEFAULT_BACKEND] = self.backend_name
        else:
            llm = self.backend.as_dict()
        return {
            DATASET: self.dataset.echo,
            SAMPLER: self.sampler.as_dict(),
            ENCODER: self.encoder.as_dict(),
            SENTENCE_ENCODER: self.sentence_encoder.as_dict(),
            PROMPT: self.prompt.as_dict(),
            LLM: llm,
            MODELS: [model.as_dict() for model in self.models],
            EVALUATION: self.evaluation.as_dict(),
            SEED: self.seed,
        }

    def echo(self, runtime: bool = True) -> Dict[str, Any]:
        """
        Normalized configuration with canonical key order
        :param runtime: include output directory and thread count
        """
        echo = self.sections()
        if runtime:
            echo[OUTPUT_DIR] = self.output_dir
            echo[THREAD_COUNT] = self.thread_count
        return json.loads(json.dumps(echo, sort_keys=True))

    def stage_hash(self, stage: str) -> str:
        """
        SHA-256 of canonical JSON of sections stage depends on. Only selected LLM backend counts
        """
        sections = self.sections()
        sections[LLM] = {"selected": self.backend.as_dict()}
        payload = {section: sections[section] for section in STAGE_SECTIONS[stage]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()

    def __repr__(self):
        return f"RunConfig(dataset={self.dataset.name}, seed={self.seed})"


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Reads YAML or JSON run config
    :raises LenieConfigError
    """
    try:
        with open(path) as fh:
            config = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise LenieConfigError(f"Error in config file format: '{path}'") from e
    except OSError as e:
        raise LenieConfigError(f"Issue opening config file '{path}'") from e
    if not config:
        raise LenieConfigError(f"Configuration file is empty: '{path}'")
    if not isinstance(config, dict):
        raise LenieConfigError(f"Incorrect configuration type in '{path}'. Should be dict, is {type(config)}")
    return config


def validate_config(path: str, seed: Optional[int] = None, arm: Optional[str] = None,
                    backend: Optional[str] = None) -> RunConfig:
    """
    Loads config file, fills defaults and checks it
    :param path: config file path
    :param seed: global seed override
    :param arm: restricts evaluation to single arm
    :param backend: selects named LLM backend
    :raises LenieConfigError
    """
    config = read_config_file(path)
    if seed is not None:
        config[SEED] = seed
    return build_run_config(config, os.path.dirname(os.path.abspath(path)), arm=arm, backend=backend)


def build_run_config(config: Dict[str, Any], base_dir: str, arm: Optional[str] = None,
                     backend: Optional[str] = None) -> RunConfig:
    """
    Normalizes parsed configuration. Relative dataset paths resolve against base_dir
    :raises LenieConfigError
    """
    _check_keys(config, TOP_LEVEL_KEYS, "")
    if SEED not in config:
        raise LenieConfigError(f"Missing required field '{SEED}'")
    seed = config[SEED]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise LenieConfigError(f"Incorrect value '{seed}' in field '{SEED}'. Should be non-negative int")

    dataset_config = configure_dataset(config.get(DATASET), base_dir)
    defaults = load_dataset_defaults(dataset_config.name)
    dataset_config.expected_counts = defaults.get(EXPECTED_COUNTS) or {}

    sampler_section = _section(config, SAMPLER)
    _check_keys(sampler_section, SAMPLER_KEYS, SAMPLER)
    _check_enum(sampler_section, STRATEGY, STRATEGIES, SAMPLER)
    try:
        sampler = configure_sampler(sampler_section, defaults.get(DEFAULT_K_KEY), seed)
    except SamplerConfigError as e:
        raise LenieConfigError(f"Error in configuration field '{SAMPLER}'") from e

    encoder = _configure_encoder_section(config, ENCODER)
    if config.get(SENTENCE_ENCODER) is None:
        sentence_encoder = encoder
    else:
        sentence_encoder = _configure_encoder_section(config, SENTENCE_ENCODER)

    prompt_section = _section(config, PROMPT)
    _check_keys(prompt_section, PROMPT_KEYS, PROMPT)
    try:
        prompt = configure_prompt(prompt_section or None)
    except PromptConfigError as e:
        raise LenieConfigError(f"Error in configuration field '{PROMPT}'") from e

    llm_section = _section(config, LLM)
    named = bool(llm_section) and KIND not in llm_section
    for name, section in (llm_section.items() if named else [(None, llm_section)]):
        if name == DEFAULT_BACKEND:
            continue
        locator = LLM if name is None else f"{LLM}.{name}"
        if not isinstance(section, dict):
            raise LenieConfigError(f"Incorrect type of field '{locator}'. Should be dict, is {type(section)}")
        _check_keys(section, BACKEND_KEYS, locator)
        _check_enum(section, KIND, BACKEND_KINDS, locator)
    try:
        backends, default_backend = configure_backends(llm_section or None)
    except LlmBackendConfigError as e:
        raise LenieConfigError(f"Error in configuration field '{LLM}'") from e
    backend_name = backend or default_backend
    if backend_name not in backends:
        raise LenieConfigError(f"Unknown backend '{backend_name}' in field '{LLM}'. Should be one of {sorted(backends)}")

    models = _configure_models(config.get(MODELS, DEFAULT_MODELS), seed)

    evaluation_section = _section(config, EVALUATION)
    _check_keys(evaluation_section, EVALUATION_KEYS, EVALUATION)
    for index, name in enumerate(evaluation_section.get(ARMS_KEY) or []):
        if name not in ARMS:
            raise LenieConfigError(f"Incorrect value '{name}' in field '{EVALUATION}.{ARMS_KEY}[{index}]'. "
                                   f"Should be one of {ARMS}")
    try:
        evaluation = configure_evaluation(evaluation_section or None)
    except FoldConfigError as e:
        raise LenieConfigError(f"Error in configuration field '{EVALUATION}'") from e
    if arm is not None:
        if arm not in ARMS:
            raise LenieConfigError(f"Incorrect arm '{arm}'. Should be one of {ARMS}")

    output_dir = config.get(OUTPUT_DIR, DEFAULT_OUTPUT_DIR)
    if not isinstance(output_dir, str) or not output_dir:
        raise LenieConfigError(f"Incorrect value '{output_dir}' in field '{OUTPUT_DIR}'. Should be path")
    thread_count = config.get(THREAD_COUNT, DEFAULT_THREAD_COUNT)
    if not isinstance(thread_count, int) or isinstance(thread_count, bool) or thread_count < 1:
        raise LenieConfigError(f"Incorrect value '{thread_count}' in field '{THREAD_COUNT}'. Should be positive int")

    return RunConfig(dataset=dataset_config, sampler=sampler, encoder=encoder, sentence_encoder=sentence_encoder,
                     prompt=prompt, backends=backends, backend_name=backend_name, models=models,
                     evaluation=evaluation, seed=seed, output_dir=output_dir, thread_count=thread_count,
                     named_backends=named, arm=arm)


def configure_dataset(config: Any, base_dir: str) -> DatasetConfig:
    """
    Dataset section: bare name or mapping with name, dir and per-file paths.
    Synthetic dataset is generated on ingest and needs no files
    :raises LenieConfigError
    """
    if config is None:
        raise LenieConfigError(f"Missing required field '{DATASET}'")
    if isinstance(config, str):
        config = {NAME: config}
    if not isinstance(config, dict):
        raise LenieConfigError(f"Incorrect type of field '{DATASET}'. Should be dict or str, is {type(config)}")
    _check_keys(config, DATASET_KEYS, DATASET)
    name = config.get(NAME)
    if not isinstance(name, str) or not name:
        raise LenieConfigError(f"Missing required field '{DATASET}.{NAME}'")
    if name == SYNTH_DATASET:
        synthetic = _configure_synthetic(config.get(SYNTHETIC), load_dataset_defaults(name).get(SYNTHETIC) or {})
        return DatasetConfig(name, None, None, None, synthetic=synthetic,
                             echo={NAME: name, SYNTHETIC: synthetic})
    if SYNTHETIC in config:
        raise LenieConfigError(f"Field '{DATASET}.{SYNTHETIC}' is only valid for dataset '{SYNTH_DATASET}'")
    directory = config.get(DIR, ".")
    paths = {}
    echo = {NAME: name}
    for key, filename in DATASET_FILES.items():
        raw = config.get(key, os.path.join(directory, filename))
        if not isinstance(raw, str):
            raise LenieConfigError(f"Incorrect type of field '{DATASET}.{key}'. Should be str, is {type(raw)}")
        resolved = raw if os.path.isabs(raw) else os.path.normpath(os.path.join(base_dir, raw))
        if not os.path.isfile(resolved):
            raise LenieConfigError(f"File '{resolved}' in field '{DATASET}.{key}' doesn't exist")
        paths[key] = resolved
        echo[key] = raw
    return DatasetConfig(name, paths[ENTITIES], paths[RELATIONS], paths[TRIPLETS], echo=echo)


def _configure_synthetic(config: Any, defaults: Dict[str, Any]) -> Dict[str, Any]:
    if config is None:
        config = {}
    if not isinstance(config, dict):
        raise LenieConfigError(f"Incorrect type of field '{DATASET}.{SYNTHETIC}'. Should be dict, is {type(config)}")
    _check_keys(config, SYNTHETIC_KEYS, f"{DATASET}.{SYNTHETIC}")
    synthetic = {}
    for key in SYNTHETIC_KEYS:
        value = config.get(key, defaults.get(key))
        if value is None:
            raise LenieConfigError(f"Missing required field '{DATASET}.{SYNTHETIC}.{key}'")
        if key == SYNTH_BETA:
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
                raise LenieConfigError(f"Incorrect value '{value}' in field '{DATASET}.{SYNTHETIC}.{key}'")
            value = float(value)
        elif not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise LenieConfigError(f"Incorrect value '{value}' in field '{DATASET}.{SYNTHETIC}.{key}'")
        synthetic[key] = value
    return synthetic


def _configure_encoder_section(config: Dict[str, Any], name: str) -> TextEncoderConfig:
    section = _section(config, name)
    _check_keys(section, ENCODER_KEYS, name)
    _check_enum(section, KIND, ENCODER_KINDS, name)
    try:
        return configure_encoder(section or None)
    except EncoderConfigError as e:
        raise LenieConfigError(f"Error in configuration field '{name}'") from e


def _configure_models(config: Any, seed: int) -> List[ModelConfig]:
    if not isinstance(config, list) or not config:
        raise LenieConfigError(f"Incorrect type of field '{MODELS}'. Should be non-empty list, is {type(config)}")
    models = []
    for index, section in enumerate(config):
        locator = f"{MODELS}[{index}]"
        if isinstance(section, str):
            section = {KIND: section}
        if not isinstance(section, dict):
            raise LenieConfigError(f"Incorrect type of field '{locator}'. Should be dict or str, is {type(section)}")
        _check_keys(section, MODEL_KEYS, locator)
        _check_enum(section, KIND, MODEL_KINDS, locator)
        _check_enum(section, AGGREGATOR, AGGREGATORS, locator)
        try:
            models.append(configure_model(section, seed))
        except ModelConfigError as e:
            raise LenieConfigError(f"Error in configuration field '{locator}'") from e
    kinds = [model.kind for model in models]
    if len(set(kinds)) != len(kinds):
        raise LenieConfigError(f"Duplicate model kinds in field '{MODELS}': {kinds}")
    return models


def _section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    section = config.get(name)
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise LenieConfigError(f"Incorrect type of field '{name}'. Should be dict, is {type(section)}")
    return section


def _check_keys(section: Dict[str, Any], allowed: List[str], locator: str) -> None:
    for key in section:
        if key not in allowed:
            field = f"{locator}.{key}" if locator else key
            raise LenieConfigError(f"Unknown field '{field}'")


def _check_enum(section: Dict[str, Any], key: str, allowed: List[str], locator: str) -> None:
    if key in section and section[key] not in allowed:
        raise LenieConfigError(f"Incorrect value '{section[key]}' in field '{locator}.{key}'. "
                               f"Should be one of {allowed}")


class LenieError(Exception):
    pass


class LenieConfigError(LenieError):
    pass
