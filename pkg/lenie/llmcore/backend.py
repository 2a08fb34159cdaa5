import logging
import math
import os
from time import sleep
from typing import Any, Dict, Optional, Tuple

import requests

from lenie.llmcore.prompt import Prompt, LlmError

logger = logging.getLogger(__name__)

# Env name for passing API key
LLM_API_KEY = "LENIE_LLM_API_KEY"

# Config keys
KIND = "kind"
ENDPOINT = "endpoint"
MODEL = "model"
TEMPERATURE = "temperature"
MAX_TOKENS = "max_tokens"
RETRIES = "retries"
MAX_INFLIGHT = "max_inflight"
BACKEND_KEYS = [KIND, ENDPOINT, MODEL, TEMPERATURE, MAX_TOKENS, RETRIES, MAX_INFLIGHT]
DEFAULT_BACKEND = "default"

KIND_MOCK = "mock"
KIND_CHAT_HTTP = "chat_http"
BACKEND_KINDS = [KIND_CHAT_HTTP, KIND_MOCK]

DEFAULT_MAX_TOKENS = 512
DEFAULT_RETRIES = 3
DEFAULT_MAX_INFLIGHT = 2

CHAT_PATH = "/v1/chat/completions"
REQUEST_TIMEOUT = 120
BACKOFF_BASE = 2
RETRYABLE_STATUS = [429, 500, 502, 503, 504]


class LlmBackendConfig:
    """
    LLM backend producing augmented descriptions
    """

    def __init__(self, kind: str = KIND_MOCK,
                 endpoint: Optional[str] = None,
                 model: Optional[str] = None,
                 temperature: float = 0.0,
                 max_tokens: int = DEFAULT_MAX_TOKENS,
                 retries: int = DEFAULT_RETRIES,
                 max_inflight: int = DEFAULT_MAX_INFLIGHT):
        """
        :param kind: chat_http or mock
        :param endpoint: chat API base URL
        :param model: chat model name
        :param temperature: sampling temperature
        :param max_tokens: completion length cap
        :param retries: retries after first failed request
        :param max_inflight: concurrent generations
        :raises LlmBackendConfigError
        """
        if kind not in BACKEND_KINDS:
            raise LlmBackendConfigError(f"Unknown backend kind '{kind}'. Should be one of {BACKEND_KINDS}")
        if kind == KIND_CHAT_HTTP and (not endpoint or not model):
            raise LlmBackendConfigError(f"Backend '{KIND_CHAT_HTTP}' requires both '{ENDPOINT}' and '{MODEL}'")
        if not isinstance(temperature, (int, float)) or isinstance(temperature, bool) or \
                not math.isfinite(temperature) or temperature < 0:
            raise LlmBackendConfigError(f"Incorrect '{TEMPERATURE}' value '{temperature}'. Should be >= 0")
        for name, value, minimum in ((MAX_TOKENS, max_tokens, 1), (RETRIES, retries, 0),
                                     (MAX_INFLIGHT, max_inflight, 1)):
            if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
                raise LlmBackendConfigError(f"Incorrect '{name}' value '{value}'. Should be integer >= {minimum}")
        self.kind = kind
        self.endpoint = endpoint.rstrip("/") if endpoint else endpoint
        self.model = model
        self.temperature = float(temperature)
        self.max_tokens = max_tokens
        self.retries = retries
        self.max_inflight = max_inflight

    @property
    def backend_id(self) -> str:
        """
        Stable identity of generation settings
        """
        if self.kind == KIND_MOCK:
            return KIND_MOCK
        return f"{self.kind}:{self.model}:t{self.temperature}:m{self.max_tokens}"

    def as_dict(self) -> Dict[str, Any]:
        return {
            KIND: self.kind,
            ENDPOINT: self.endpoint,
            MODEL: self.model,
            TEMPERATURE: self.temperature,
            MAX_TOKENS: self.max_tokens,
            RETRIES: self.retries,
            MAX_INFLIGHT: self.max_inflight,
        }

    def __eq__(self, other):
        return isinstance(other, LlmBackendConfig) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"LlmBackendConfig({self.backend_id})"


class AugmentedDescription:
    def __init__(self, node: int, text: str, prompt_hash: str, backend_id: str):
        self.node = node
        self.text = text
        self.prompt_hash = prompt_hash
        self.backend_id = backend_id

    def __eq__(self, other):
        return isinstance(other, AugmentedDescription) and \
            (self.node, self.text, self.prompt_hash, self.backend_id) == \
            (other.node, other.text, other.prompt_hash, other.backend_id)

    def __repr__(self):
        return f"AugmentedDescription(node={self.node}, backend={self.backend_id}, chars={len(self.text)})"


def mock_generate(prompt: Prompt) -> str:
    """
    Offline stand-in for LLM: restates name, description and retained facts
    """
    text = f"Summary of {prompt.node_name}: {prompt.description_text} Known facts: {' '.join(prompt.sentences)}"
    return text.rstrip()


def generate_description(backend: LlmBackendConfig, prompt: Prompt) -> AugmentedDescription:
    """
    Obtains augmented description for prompt
    :param backend: backend configuration
    :param prompt: adaptive prompt
    :raises LlmBackendError, LlmEmptyGenerationError
    """
    if backend.kind == KIND_MOCK:
        text = mock_generate(prompt)
    else:
        text = request_completion(backend, prompt.text)
    if not text or not text.strip():
        raise LlmEmptyGenerationError(f"Backend '{backend.backend_id}' returned empty text for node {prompt.node}")
    return AugmentedDescription(node=prompt.node,
                                text=text,
                                prompt_hash=prompt.prompt_hash,
                                backend_id=backend.backend_id)


def request_completion(backend: LlmBackendConfig, prompt_text: str) -> str:
    """
    Single-turn chat completion with exponential backoff on transport errors, 429 and 5xx
    :return: assistant message content
    :raises LlmBackendError
    """
    url = f"{backend.endpoint}{CHAT_PATH}"
    headers = {}
    api_key = os.getenv(LLM_API_KEY)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {
        "model": backend.model,
        "temperature": backend.temperature,
        "max_tokens": backend.max_tokens,
        "messages": [{"role": "user", "content": prompt_text}],
    }
    status = None
    for attempt in range(backend.retries + 1):
        try:
            logger.debug(f"Chat request to '{url}' with {len(prompt_text)} prompt chars, attempt {attempt + 1}")
            response = requests.post(url, json=body, headers=headers, timeout=REQUEST_TIMEOUT)
            status = response.status_code
            if status == 200:
                return _parse_completion(response.json())
            if status not in RETRYABLE_STATUS:
                raise LlmBackendError(f"Chat request to '{url}' rejected", status=status)
            logger.warning(f"Chat request to '{url}' returned status {status}")
        except requests.RequestException as e:
            logger.warning(f"Issue sending chat request to '{url}'\n{e}")
        except ValueError as e:
            raise LlmBackendError(f"Incorrect JSON in chat response from '{url}'", status=status) from e
        if attempt < backend.retries:
            sleep(BACKOFF_BASE ** (attempt + 1))
    raise LlmBackendError(f"Chat request to '{url}' failed after {backend.retries} retries", status=status)


def _parse_completion(payload: Dict[str, Any]) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as e:
        raise LlmBackendError("Chat response is missing 'choices[0].message.content'", status=200) from e
    if content is None:
        return ""
    if not isinstance(content, str):
        raise LlmBackendError(f"Incorrect completion type. Should be str, is {type(content)}", status=200)
    return content.strip()


def configure_backend(config: Optional[Dict[str, Any]]) -> LlmBackendConfig:
    """
    Builds single backend configuration
    :raises LlmBackendConfigError
    """
    if config is None:
        return LlmBackendConfig()
    if not isinstance(config, dict):
        raise LlmBackendConfigError(f"Incorrect backend configuration type. Should be dict, is {type(config)}")
    for key in config:
        if key not in BACKEND_KEYS:
            raise LlmBackendConfigError(f"Unknown key '{key}' in backend configuration")
    return LlmBackendConfig(kind=config.get(KIND, KIND_MOCK),
                            endpoint=config.get(ENDPOINT),
                            model=config.get(MODEL),
                            temperature=config.get(TEMPERATURE, 0.0),
                            max_tokens=config.get(MAX_TOKENS, DEFAULT_MAX_TOKENS),
                            retries=config.get(RETRIES, DEFAULT_RETRIES),
                            max_inflight=config.get(MAX_INFLIGHT, DEFAULT_MAX_INFLIGHT))


def configure_backends(config: Optional[Dict[str, Any]]) -> Tuple[Dict[str, LlmBackendConfig], str]:
    """
    Builds named backends. Accepts single backend mapping (named 'default') or mapping of
    name -> backend plus 'default' key naming the one used when none is selected
    :return: backends by name and default backend name
    :raises LlmBackendConfigError
    """
    if config is not None and not isinstance(config, dict):
        raise LlmBackendConfigError(f"Incorrect llm configuration type. Should be dict, is {type(config)}")
    if config is None or KIND in config:
        return {DEFAULT_BACKEND: configure_backend(config)}, DEFAULT_BACKEND
    default_name = config.get(DEFAULT_BACKEND)
    backends = {}
    for name, section in config.items():
        if name == DEFAULT_BACKEND:
            continue
        try:
            backends[name] = configure_backend(section)
        except LlmBackendConfigError as e:
            raise LlmBackendConfigError(f"Incorrect configuration of backend '{name}'") from e
    if not backends:
        raise LlmBackendConfigError("No LLM backends configured")
    if default_name is None:
        default_name = sorted(backends)[0]
    if default_name not in backends:
        raise LlmBackendConfigError(f"Default backend '{default_name}' is not configured. "
                                    f"Should be one of {sorted(backends)}")
    return backends, default_name


class LlmBackendConfigError(LlmError):
    pass


class LlmBackendError(LlmError):
    def __init__(self, message: str, status: Optional[int] = None):
        self.status = status
        super().__init__(f"{message} (HTTP status: {status})")


class LlmEmptyGenerationError(LlmError):
    pass
