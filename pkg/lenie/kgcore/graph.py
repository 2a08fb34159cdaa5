import logging
import math
import operator
from typing import Dict, List, NamedTuple, Optional, Tuple

logger = logging.getLogger(__name__)

ENTITY_COLUMNS = 4
RELATION_COLUMNS = 2
TRIPLET_COLUMNS = 3

# Summary keys
SUMMARY_ENTITIES = "entities"
SUMMARY_EDGES = "edges"
SUMMARY_RELATIONS = "relations"
SUMMARY_LABELED = "labeled"


class Entity:
    """
    Knowledge graph node
    """

    def __init__(self, id: int, name: str, description: Optional[str] = None, raw_score: Optional[float] = None):
        """
        :param id: dense entity index
        :param name: entity name
        :param description: original description text, None when the dataset has none
        :param raw_score: original importance value i.e. pageviews, None for unlabeled nodes
        """
        self.id = id
        self.name = name
        self.description = description
        self.raw_score = raw_score

    @property
    def is_labeled(self) -> bool:
        return self.raw_score is not None

    def description_or_name(self) -> str:
        """
        Returns description text, falling back to entity name for datasets without descriptions
        """
        return self.description if self.description else self.name

    def __eq__(self, other):
        return self.id == other.id and \
            self.name == other.name and \
            self.description == other.description and \
            self.raw_score == other.raw_score

    def __repr__(self):
        return f"Entity({self.id}, '{self.name}', raw_score={self.raw_score})"


class Relation:
    """
    Knowledge graph edge type
    """

    def __init__(self, id: int, name: str):
        """
        :param id: dense relation index
        :param name: raw relation name i.e. /film/film/genre
        """
        self.id = id
        self.name = name

    def __eq__(self, other):
        return self.id == other.id and self.name == other.name

    def __repr__(self):
        return f"Relation({self.id}, '{self.name}')"


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


class KnowledgeGraph:
    """
    Immutable, indexed knowledge graph G = (V, R, T)
    """

    def __init__(self, entities: List[Entity], relations: List[Relation], triplets: List[Triplet]):
        """
        :param entities: entities ordered by id
        :param relations: relations ordered by id
        :param triplets: triplets in file order
        """
        self.entities = entities
        self.relations = relations
        self.triplets = triplets
        self.incidence = self.__build_incidence()

    def __build_incidence(self) -> List[List[int]]:
        incidence = [[] for _ in self.entities]
        for index, (head, _, tail) in enumerate(self.triplets):
            incidence[head].append(index)
            # Self-loop listed once for its only endpoint
            if tail != head:
                incidence[tail].append(index)
        return incidence

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def entity(self, entity_id: int) -> Entity:
        """
        :param entity_id: entity id to look up
        :raises KgLookupError
        """
        try:
            index = operator.index(entity_id)
        except TypeError:
            raise KgLookupError(f"Incorrect entity id '{entity_id}'. Should be int, is {type(entity_id)}")
        if index < 0 or index >= len(self.entities):
            raise KgLookupError(f"Unknown entity id '{entity_id}'")
        return self.entities[index]

    def labeled_ids(self) -> List[int]:
        """
        Returns ids of interested nodes V_s (entities with importance score)
        """
        return [entity.id for entity in self.entities if entity.is_labeled]

    def self_loop_count(self) -> int:
        return sum(1 for head, _, tail in self.triplets if head == tail)

    def summary(self) -> Dict[str, int]:
        """
        Counts used for dataset sanity checks
        """
        return {
            SUMMARY_ENTITIES: len(self.entities),
            SUMMARY_EDGES: len(self.triplets),
            SUMMARY_RELATIONS: len(self.relations),
            SUMMARY_LABELED: len(self.labeled_ids()),
        }


def extract_node_triplets(kg: KnowledgeGraph, v: int) -> List[Triplet]:
    """
    Collects all triplets in which node is head or tail
    :param kg: knowledge graph
    :param v: entity id
    :return: incident triplets in ascending triplet index order
    :raises KgLookupError
    """
    entity = kg.entity(v)
    return [kg.triplets[index] for index in kg.incidence[entity.id]]


def load_kg(entity_path: str, relation_path: str, triplet_path: str) -> KnowledgeGraph:
    """
    Loads knowledge graph from TSV files
    :param entity_path: id, name, description, raw_score per line
    :param relation_path: id, name per line
    :param triplet_path: head_id, relation_id, tail_id per line
    :return: indexed knowledge graph
    :raises KgParseError
    """
    logger.info(f"Loading entities from '{entity_path}'")
    entities = _load_entities(entity_path)
    logger.info(f"Loading relations from '{relation_path}'")
    relations = _load_relations(relation_path)
    logger.info(f"Loading triplets from '{triplet_path}'")
    triplets = _load_triplets(triplet_path, len(entities), len(relations))
    kg = KnowledgeGraph(entities, relations, triplets)
    summary = kg.summary()
    logger.info(f"Loaded graph with {summary[SUMMARY_ENTITIES]} entities, {summary[SUMMARY_EDGES]} edges, "
                f"{summary[SUMMARY_RELATIONS]} relations, {summary[SUMMARY_LABELED]} labeled nodes")
    return kg


def check_expected_counts(kg: KnowledgeGraph, expected: Dict[str, int]) -> List[str]:
    """
    Compares graph counts against published dataset statistics
    :param kg: loaded graph
    :param expected: expected counts keyed like KnowledgeGraph.summary()
    :return: description of every mismatch
    """
    mismatches = []
    if not expected:
        return mismatches
    summary = kg.summary()
    for key, value in expected.items():
        if key not in summary:
            logger.warning(f"Unknown expected count key '{key}'")
            continue
        if summary[key] != value:
            mismatch = f"{key}: expected {value}, loaded {summary[key]}"
            logger.warning(f"Dataset count mismatch - {mismatch}")
            mismatches.append(mismatch)
    return mismatches


def _read_rows(path: str, columns: int) -> List[Tuple[int, List[str]]]:
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_number, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line.strip():
                    continue
                fields = line.split("\t")
                if len(fields) != columns:
                    raise KgMalformedLineError(f"Expected {columns} columns, found {len(fields)}",
                                               path=path, line_number=line_number)
                rows.append((line_number, fields))
    except KgParseError:
        raise
    except Exception as e:
        raise KgParseError(f"Issue reading file", path=path) from e
    return rows


def _parse_id(value: str, path: str, line_number: int) -> int:
    try:
        parsed = int(value)
    except ValueError:
        raise KgMalformedLineError(f"Incorrect id '{value}'", path=path, line_number=line_number)
    if parsed < 0:
        raise KgMalformedLineError(f"Negative id '{value}'", path=path, line_number=line_number)
    return parsed


def _check_contiguous(ids: Dict[int, int], path: str) -> None:
    for expected_id in range(len(ids)):
        if expected_id not in ids:
            first_gap_line = min(line for id_, line in ids.items() if id_ > expected_id)
            raise KgParseError(f"Ids are not contiguous, missing id '{expected_id}'",
                               path=path, line_number=first_gap_line)


def _load_entities(path: str) -> List[Entity]:
    seen = {}
    entities = {}
    for line_number, (raw_id, name, description, raw_score) in _read_rows(path, ENTITY_COLUMNS):
        entity_id = _parse_id(raw_id, path, line_number)
        if entity_id in seen:
            raise KgDuplicateIdError(f"Duplicate entity id '{entity_id}', first defined on line {seen[entity_id]}",
                                     path=path, line_number=line_number)
        name = name.strip()
        if not name:
            raise KgMalformedLineError(f"Empty name for entity '{entity_id}'", path=path, line_number=line_number)
        score = None
        if raw_score.strip():
            try:
                score = float(raw_score)
            except ValueError:
                raise KgMalformedLineError(f"Incorrect raw_score '{raw_score}'", path=path, line_number=line_number)
            if not math.isfinite(score) or score < 0:
                raise KgMalformedLineError(f"raw_score should be finite and non-negative, is '{raw_score}'",
                                           path=path, line_number=line_number)
        seen[entity_id] = line_number
        entities[entity_id] = Entity(entity_id, name, description if description.strip() else None, score)
    _check_contiguous(seen, path)
    return [entities[i] for i in range(len(entities))]


def _load_relations(path: str) -> List[Relation]:
    seen = {}
    relations = {}
    for line_number, (raw_id, name) in _read_rows(path, RELATION_COLUMNS):
        relation_id = _parse_id(raw_id, path, line_number)
        if relation_id in seen:
            raise KgDuplicateIdError(f"Duplicate relation id '{relation_id}', first defined on line "
                                     f"{seen[relation_id]}", path=path, line_number=line_number)
        if not name.strip():
            raise KgMalformedLineError(f"Empty name for relation '{relation_id}'", path=path, line_number=line_number)
        seen[relation_id] = line_number
        relations[relation_id] = Relation(relation_id, name.strip())
    _check_contiguous(seen, path)
    return [relations[i] for i in range(len(relations))]


def _load_triplets(path: str, num_entities: int, num_relations: int) -> List[Triplet]:
    triplets = []
    for line_number, (raw_head, raw_relation, raw_tail) in _read_rows(path, TRIPLET_COLUMNS):
        head = _parse_id(raw_head, path, line_number)
        relation = _parse_id(raw_relation, path, line_number)
        tail = _parse_id(raw_tail, path, line_number)
        for kind, value, limit in (("entity", head, num_entities),
                                   ("relation", relation, num_relations),
                                   ("entity", tail, num_entities)):
            if value >= limit:
                raise KgDanglingReferenceError(f"Unknown {kind} id '{value}'", path=path, line_number=line_number)
        triplets.append(Triplet(head, relation, tail))
    return triplets


class KgError(Exception):
    pass


class KgParseError(KgError):
    def __init__(self, message: str, path: str = None, line_number: int = None):
        self.path = path
        self.line_number = line_number
        location = f"'{path}'" if line_number is None else f"'{path}' line {line_number}"
        super().__init__(f"{message} in {location}")


class KgMalformedLineError(KgParseError):
    pass


class KgDanglingReferenceError(KgParseError):
    pass


class KgDuplicateIdError(KgParseError):
    pass


class KgLookupError(KgError):
    pass
