import hashlib
import logging
from typing import Any, Dict, List, Optional

from lenie.samplecore.sampler import SampledContext

logger = logging.getLogger(__name__)

# Config keys
TASK_INSTRUCTION = "task_instruction"
TRIPLET_HEADER = "triplet_header"
DESCRIPTION_HEADER = "description_header"
MAX_PROMPT_CHARS = "max_prompt_chars"
PROMPT_KEYS = [TASK_INSTRUCTION, TRIPLET_HEADER, DESCRIPTION_HEADER, MAX_PROMPT_CHARS]

DEFAULT_TRIPLET_HEADER = "Facts about the entity from the knowledge graph:"
DEFAULT_DESCRIPTION_HEADER = "Existing description:"
DEFAULT_TASK_INSTRUCTION = "Using the facts and the existing description, write one accurate, comprehensive " \
                           "paragraph describing this entity. Correct any inaccurate facts. " \
                           "Output only the paragraph."
DEFAULT_MAX_PROMPT_CHARS = 8000
# Minimal room left beside task instruction
PROMPT_HEADROOM = 200


class PromptTemplate:
    """
    Fixed parts of adaptive prompt
    """

    def __init__(self, task_instruction: str = DEFAULT_TASK_INSTRUCTION,
                 triplet_header: str = DEFAULT_TRIPLET_HEADER,
                 description_header: str = DEFAULT_DESCRIPTION_HEADER,
                 max_prompt_chars: int = DEFAULT_MAX_PROMPT_CHARS):
        """
        :raises PromptConfigError
        """
        for name, value in ((TASK_INSTRUCTION, task_instruction),
                            (TRIPLET_HEADER, triplet_header),
                            (DESCRIPTION_HEADER, description_header)):
            if not isinstance(value, str):
                raise PromptConfigError(f"Incorrect '{name}' type. Should be str, is {type(value)}")
        if not task_instruction.strip():
            raise PromptConfigError(f"'{TASK_INSTRUCTION}' should not be empty")
        if not isinstance(max_prompt_chars, int) or isinstance(max_prompt_chars, bool) or \
                max_prompt_chars <= len(task_instruction) + PROMPT_HEADROOM:
            raise PromptConfigError(f"Incorrect '{MAX_PROMPT_CHARS}' value '{max_prompt_chars}'. "
                                    f"Should exceed task instruction length plus {PROMPT_HEADROOM}")
        self.task_instruction = task_instruction
        self.triplet_header = triplet_header
        self.description_header = description_header
        self.max_prompt_chars = max_prompt_chars

    def as_dict(self) -> Dict[str, Any]:
        return {
            TASK_INSTRUCTION: self.task_instruction,
            TRIPLET_HEADER: self.triplet_header,
            DESCRIPTION_HEADER: self.description_header,
            MAX_PROMPT_CHARS: self.max_prompt_chars,
        }

    def __eq__(self, other):
        return isinstance(other, PromptTemplate) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"PromptTemplate(max_prompt_chars={self.max_prompt_chars})"


class Prompt:
    def __init__(self, node: int, text: str, node_name: str, description_text: str,
                 sentences: List[str], dropped: int = 0):
        """
        :param node: entity id
        :param text: full prompt text
        :param node_name: entity name
        :param description_text: description placed in prompt, entity name when description is absent
        :param sentences: sampled sentences retained in prompt
        :param dropped: sampled sentences removed to fit budget
        """
        self.node = node
        self.text = text
        self.node_name = node_name
        self.description_text = description_text
        self.sentences = sentences
        self.dropped = dropped
        self.prompt_hash = hashlib.sha256(text.encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Prompt) and self.node == other.node and self.text == other.text

    def __repr__(self):
        return f"Prompt(node={self.node}, hash={self.prompt_hash[:12]}, dropped={self.dropped})"


def render_prompt(template: PromptTemplate, sentences: List[str], description_text: str) -> str:
    return f"{template.triplet_header}\n{' '.join(sentences)}\n\n" \
           f"{template.description_header}\n{description_text}\n\n" \
           f"{template.task_instruction}"


def build_prompt(template: PromptTemplate, node_name: str, description: Optional[str],
                 context: SampledContext) -> Prompt:
    """
    Composes triplet, description and task sections. Trailing sentences are dropped until prompt fits
    :param template: prompt template
    :param node_name: entity name
    :param description: original description, None when absent
    :param context: sampled sentences
    :raises PromptError
    """
    if not node_name or not node_name.strip():
        raise PromptError(f"Empty node name for node {context.node}")
    description_text = description if description else node_name
    sentences = list(context.sentences)
    text = render_prompt(template, sentences, description_text)
    while len(text) > template.max_prompt_chars and sentences:
        sentences.pop()
        text = render_prompt(template, sentences, description_text)
    if len(text) > template.max_prompt_chars:
        raise PromptError(f"Prompt for node {context.node} has {len(text)} chars without any sentences. "
                          f"Budget is {template.max_prompt_chars}")
    dropped = len(context.sentences) - len(sentences)
    if dropped:
        logger.info(f"Dropped {dropped} sentences from prompt of node {context.node} to fit "
                    f"{template.max_prompt_chars} chars")
    return Prompt(node=context.node,
                  text=text,
                  node_name=node_name,
                  description_text=description_text,
                  sentences=sentences,
                  dropped=dropped)


def configure_prompt(config: Optional[Dict[str, Any]]) -> PromptTemplate:
    """
    Builds prompt template from config file section, defaults for missing keys
    :raises PromptConfigError
    """
    if config is None:
        return PromptTemplate()
    if not isinstance(config, dict):
        raise PromptConfigError(f"Incorrect prompt configuration type. Should be dict, is {type(config)}")
    for key in config:
        if key not in PROMPT_KEYS:
            raise PromptConfigError(f"Unknown key '{key}' in prompt configuration")
    return PromptTemplate(task_instruction=config.get(TASK_INSTRUCTION, DEFAULT_TASK_INSTRUCTION),
                          triplet_header=config.get(TRIPLET_HEADER, DEFAULT_TRIPLET_HEADER),
                          description_header=config.get(DESCRIPTION_HEADER, DEFAULT_DESCRIPTION_HEADER),
                          max_prompt_chars=config.get(MAX_PROMPT_CHARS, DEFAULT_MAX_PROMPT_CHARS))


class LlmError(Exception):
    pass


class PromptConfigError(LlmError):
    pass


class PromptError(LlmError):
    pass
