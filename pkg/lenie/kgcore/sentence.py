import logging
import re

from lenie.kgcore.graph import KnowledgeGraph, Triplet, KgError, KgLookupError

logger = logging.getLogger(__name__)

SENTENCE_TEMPLATE = "{head}'s {relation} is {tail}."

_SEPARATORS = re.compile(r"[_.]")
_WHITESPACE = re.compile(r"\s+")


def normalize_relation_name(raw: str) -> str:
    """
    Flattens Freebase-style relation path into readable sentence fragment
    i.e. '/film/film/genre' -> 'genre', 'has_term' -> 'has term'
    :param raw: relation name as stored in dataset
    :return: normalized name, possibly empty
    """
    name = raw.split("/")[-1] if "/" in raw else raw
    name = _SEPARATORS.sub(" ", name)
    return _WHITESPACE.sub(" ", name).strip()


def triplet_to_sentence(kg: KnowledgeGraph, t: Triplet) -> str:
    """
    Converts triplet (h, r, t) into sentence "h's r is t."
    :param kg: knowledge graph the triplet belongs to
    :param t: triplet to convert
    :raises KgTemplateError
    """
    head = kg.entity(t.head).name.strip()
    tail = kg.entity(t.tail).name.strip()
    if t.relation < 0 or t.relation >= kg.num_relations:
        raise KgLookupError(f"Unknown relation id '{t.relation}'")
    relation = normalize_relation_name(kg.relations[t.relation].name)
    if not head or not tail or not relation:
        raise KgTemplateError(f"Empty name after normalization for triplet {tuple(t)}: "
                              f"head='{head}', relation='{relation}', tail='{tail}'")
    return SENTENCE_TEMPLATE.format(head=head, relation=relation, tail=tail)


class KgTemplateError(KgError):
    pass
