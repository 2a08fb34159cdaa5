import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Dict, List, Optional, Tuple

from lenie.embedcore.cache import EmbeddingCache
from lenie.embedcore.encoder import TextEncoderConfig
from lenie.kgcore.graph import KnowledgeGraph
from lenie.llmcore.backend import LlmBackendConfig, AugmentedDescription, generate_description
from lenie.llmcore.prompt import PromptTemplate, Prompt, build_prompt, LlmError
from lenie.samplecore.sampler import SamplerConfig, SampledContext, sample_nodes

logger = logging.getLogger(__name__)

# Store record keys
NODE = "node"
PROMPT_HASH = "prompt_hash"
BACKEND = "backend"
TEXT = "text"


class AugmentationStore:
    """
    Append-only JSONL store of generated descriptions keyed by (node, prompt_hash, backend_id)
    """

    def __init__(self, path: str):
        self.path = path
        self._records: Dict[Tuple[int, str, str], AugmentedDescription] = {}
        self._order: List[AugmentedDescription] = []
        self._lock = threading.Lock()
        self._loaded = False

    def load(self) -> "AugmentationStore":
        """
        Replays store file. Missing file means empty store
        :raises AugmentationStoreError
        """
        records = {}
        order = []
        try:
            with open(self.path, "r", encoding="utf-8") as fh:
                for line_number, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    description = self._parse_line(line, line_number)
                    records[(description.node, description.prompt_hash, description.backend_id)] = description
                    order.append(description)
        except FileNotFoundError:
            logger.debug(f"Augmentation store '{self.path}' not present yet")
        except OSError as e:
            raise AugmentationStoreError(f"Issue reading augmentation store '{self.path}'") from e
        with self._lock:
            self._records = records
            self._order = order
            self._loaded = True
        return self

    def _parse_line(self, line: str, line_number: int) -> AugmentedDescription:
        try:
            record = json.loads(line)
            description = AugmentedDescription(node=int(record[NODE]),
                                               text=record[TEXT],
                                               prompt_hash=record[PROMPT_HASH],
                                               backend_id=record[BACKEND])
        except (ValueError, KeyError, TypeError) as e:
            raise AugmentationStoreError(f"Corrupt augmentation record in '{self.path}' line {line_number}") from e
        if not isinstance(description.text, str) or not description.text or \
                not description.prompt_hash or not description.backend_id:
            raise AugmentationStoreError(f"Incomplete augmentation record in '{self.path}' line {line_number}")
        return description

    def _ensure_loaded(self) -> None:
        if not self._loaded:
            self.load()

    def get(self, node: int, prompt_hash: str, backend_id: str) -> Optional[AugmentedDescription]:
        self._ensure_loaded()
        return self._records.get((node, prompt_hash, backend_id))

    def append(self, description: AugmentedDescription) -> None:
        """
        :raises AugmentationStoreError
        """
        self._ensure_loaded()
        line = json.dumps({
            NODE: description.node,
            PROMPT_HASH: description.prompt_hash,
            BACKEND: description.backend_id,
            TEXT: description.text,
        }, ensure_ascii=False)
        with self._lock:
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            except OSError as e:
                raise AugmentationStoreError(f"Issue appending to augmentation store '{self.path}'") from e
            self._records[(description.node, description.prompt_hash, description.backend_id)] = description
            self._order.append(description)

    def texts_by_node(self) -> Dict[int, str]:
        """
        :return: latest stored text per node, sorted by node id
        """
        self._ensure_loaded()
        latest = {}
        for description in self._order:
            latest[description.node] = description.text
        return {node: latest[node] for node in sorted(latest)}

    def __len__(self):
        self._ensure_loaded()
        return len(self._order)


class AugmentationSummary:
    def __init__(self, generated: int = 0, skipped: int = 0, failed: Optional[Dict[int, str]] = None):
        """
        :param generated: newly generated descriptions
        :param skipped: nodes already present in store
        :param failed: failure reason per node
        """
        self.generated = generated
        self.skipped = skipped
        self.failed = failed if failed is not None else {}

    def as_dict(self) -> Dict[str, Any]:
        return {
            "generated": self.generated,
            "skipped": self.skipped,
            "failed": {str(node): reason for node, reason in sorted(self.failed.items())},
        }

    def __eq__(self, other):
        return isinstance(other, AugmentationSummary) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"AugmentationSummary(generated={self.generated}, skipped={self.skipped}, failed={len(self.failed)})"


def node_prompt(kg: KnowledgeGraph, template: PromptTemplate, context: SampledContext) -> Prompt:
    entity = kg.entity(context.node)
    return build_prompt(template, entity.name, entity.description, context)


def augment_nodes(kg: KnowledgeGraph, nodes: List[int], sampler: SamplerConfig, encoder: TextEncoderConfig,
                  template: PromptTemplate, backend: LlmBackendConfig, store_path: str,
                  contexts: Optional[List[SampledContext]] = None,
                  thread_count: int = 1,
                  cache: Optional[EmbeddingCache] = None) -> AugmentationSummary:
    """
    Samples, prompts and generates descriptions for nodes missing from store.
    Records are committed in node order so store bytes do not depend on completion order
    :param kg: knowledge graph
    :param nodes: nodes to augment
    :param sampler: sampler configuration
    :param encoder: sentence encoder for cluster sampling
    :param template: prompt template
    :param backend: LLM backend
    :param store_path: augmentation store file
    :param contexts: precomputed contexts, nodes without one get sampled
    :param thread_count: sampling threads
    :param cache: embedding cache for sentence vectors
    :return: generation counts and per-node failures
    :raises AugmentationStoreError
    """
    store = AugmentationStore(store_path).load()
    summary = AugmentationSummary()
    known = {context.node: context for context in (contexts or [])}
    missing = [node for node in nodes if node not in known]
    if missing:
        for context in sample_nodes(kg, missing, encoder, sampler, thread_count=thread_count, cache=cache):
            known[context.node] = context

    pending: List[Prompt] = []
    for node in nodes:
        try:
            prompt = node_prompt(kg, template, known[node])
        except LlmError as e:
            logger.warning(f"Cannot build prompt for node {node}\n{e}")
            summary.failed[node] = str(e)
            continue
        if store.get(node, prompt.prompt_hash, backend.backend_id) is not None:
            summary.skipped += 1
            continue
        pending.append(prompt)
    logger.info(f"Augmenting {len(pending)} nodes with backend '{backend.backend_id}', "
                f"{summary.skipped} already in store")

    finished: Dict[int, Any] = {}
    next_commit = 0
    with ThreadPoolExecutor(max_workers=backend.max_inflight) as executor:
        futures = []
        for position, prompt in enumerate(pending):
            future = executor.submit(generate_description, backend, prompt)
            future.position = position
            futures.append(future)
        for future in as_completed(futures):
            try:
                finished[future.position] = future.result()
            except LlmError as e:
                finished[future.position] = e
            while next_commit in finished:
                outcome = finished.pop(next_commit)
                node = pending[next_commit].node
                if isinstance(outcome, AugmentedDescription):
                    store.append(outcome)
                    summary.generated += 1
                else:
                    logger.warning(f"Generation failed for node {node}\n{outcome}")
                    summary.failed[node] = str(outcome)
                next_commit += 1
    logger.info(f"Augmentation finished: {summary}")
    return summary


class AugmentationStoreError(LlmError):
    pass
