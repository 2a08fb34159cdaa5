import json
import logging
import math
from pathlib import Path
from typing import Any, Dict

import numpy as np

from lenie.kgcore.graph import KgError

logger = logging.getLogger(__name__)

ENTITIES_FILE = "entities.tsv"
RELATIONS_FILE = "relations.tsv"
TRIPLETS_FILE = "triplets.tsv"
MANIFEST_FILE = "manifest.json"

DEFAULT_BETA = 0.5
DEFAULT_MAX_SIGNAL_DEGREE = 6

RELATION_WORDS = ["genre", "studio", "country", "language", "award", "keyword", "sequel", "composer"]


def relation_name(index: int) -> str:
    """
    Readable relation name, cycling the word list with a numeric suffix once exhausted
    """
    word = RELATION_WORDS[index % len(RELATION_WORDS)]
    cycle = index // len(RELATION_WORDS)
    return word if cycle == 0 else f"{word}_{cycle}"


def generate_synthetic_kg(nodes: int, relations: int, seed: int, out_dir: str,
                          beta: float = DEFAULT_BETA,
                          max_signal_degree: int = DEFAULT_MAX_SIGNAL_DEGREE) -> Dict[str, Any]:
    """
    Writes planted-signal knowledge graph in kg-core TSV formats.
    First half of ids are labeled items, second half unlabeled attributes. Each item links to
    U{0..max_signal_degree} distinct attributes via relation 0 and to U{0..1} attributes via every
    other relation. raw_score = exp(beta * relation-0 degree) - 1, so log labels equal beta * degree.
    :param nodes: total entity count
    :param relations: relation type count
    :param seed: generator seed
    :param out_dir: output directory, created when missing
    :param beta: signal slope
    :param max_signal_degree: upper bound of relation-0 degree
    :return: manifest with generator parameters and counts
    """
    if nodes < 4:
        raise SyntheticConfigError(f"Incorrect node count {nodes}. Should be at least 4")
    if relations < 1:
        raise SyntheticConfigError(f"Incorrect relation count {relations}. Should be at least 1")
    if not math.isfinite(beta) or beta <= 0:
        raise SyntheticConfigError(f"Incorrect beta {beta}. Should be positive")
    rng = np.random.default_rng(seed)
    num_items = nodes // 2
    attribute_ids = np.arange(num_items, nodes)
    signal_cap = min(max_signal_degree, len(attribute_ids))

    triplets = []
    signal_degrees = []
    for item in range(num_items):
        degree = int(rng.integers(0, signal_cap + 1))
        signal_degrees.append(degree)
        for tail in np.sort(rng.choice(attribute_ids, size=degree, replace=False)):
            triplets.append((item, 0, int(tail)))
        for relation in range(1, relations):
            if rng.integers(0, 2):
                triplets.append((item, relation, int(rng.choice(attribute_ids))))

    directory = Path(out_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / ENTITIES_FILE, "w", encoding="utf-8") as fh:
            for item in range(num_items):
                name = f"item_{item}"
                raw_score = math.expm1(beta * signal_degrees[item])
                fh.write(f"{item}\t{name}\t{name} is an entry of the synthetic catalogue.\t{raw_score!r}\n")
            for attribute in attribute_ids:
                fh.write(f"{attribute}\tattr_{attribute}\t\t\n")
        with open(directory / RELATIONS_FILE, "w", encoding="utf-8") as fh:
            for relation in range(relations):
                fh.write(f"{relation}\t{relation_name(relation)}\n")
        with open(directory / TRIPLETS_FILE, "w", encoding="utf-8") as fh:
            for head, relation, tail in triplets:
                fh.write(f"{head}\t{relation}\t{tail}\n")
        manifest = {
            "generator": {
                "nodes": nodes,
                "relations": relations,
                "seed": seed,
                "beta": beta,
                "max_signal_degree": max_signal_degree,
            },
            "counts": {
                "entities": nodes,
                "edges": len(triplets),
                "relations": relations,
                "labeled": num_items,
            },
            "files": {
                "entities": ENTITIES_FILE,
                "relations": RELATIONS_FILE,
                "triplets": TRIPLETS_FILE,
            },
        }
        with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    except OSError as e:
        raise SyntheticConfigError(f"Issue writing synthetic dataset into '{out_dir}'") from e
    logger.info(f"Generated synthetic graph in '{out_dir}' with {nodes} entities, {len(triplets)} triplets")
    return manifest


class SyntheticConfigError(KgError):
    pass
