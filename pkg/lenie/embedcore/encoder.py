import hashlib
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from time import sleep
from typing import Any, Dict, List, Optional

import numpy as np
import requests

from lenie.embedcore.matrix import EmbeddingMatrix

logger = logging.getLogger(__name__)

# Env name for passing API key
EMB_API_KEY = "LENIE_EMB_API_KEY"

# Config keys
KIND = "kind"
DIM = "dim"
ENDPOINT = "endpoint"
MODEL = "model"
MAX_INFLIGHT = "max_inflight"
BATCH_SIZE = "batch_size"
CACHE = "cache"
ENCODER_KEYS = [KIND, DIM, ENDPOINT, MODEL, MAX_INFLIGHT, BATCH_SIZE, CACHE]

KIND_HASH = "hash"
KIND_REMOTE = "remote"
ENCODER_KINDS = [KIND_HASH, KIND_REMOTE]

DEFAULT_DIM = 768
DEFAULT_MAX_INFLIGHT = 4
DEFAULT_BATCH_SIZE = 64
MIN_DIM = 8

EMBEDDINGS_PATH = "/v1/embeddings"
REQUEST_TIMEOUT = 30
RETRY_BACKOFF = [1, 2, 4]
RETRYABLE_STATUS = [429, 500, 502, 503, 504]

_TOKEN_SEPARATOR = re.compile(r"[\W_]+")


class TextEncoderConfig:
    """
    Text encoder selection shared by sentence clustering and node feature initialization
    """

    def __init__(self, kind: str = KIND_HASH,
                 dim: int = DEFAULT_DIM,
                 endpoint: Optional[str] = None,
                 model: Optional[str] = None,
                 max_inflight: int = DEFAULT_MAX_INFLIGHT,
                 batch_size: int = DEFAULT_BATCH_SIZE,
                 cache: Optional[bool] = None):
        """
        :param kind: hash (offline, deterministic) or remote (HTTP embeddings API)
        :param dim: output vector width
        :param endpoint: remote API base URL
        :param model: remote model name
        :param max_inflight: concurrent remote requests
        :param batch_size: texts per remote request
        :param cache: use content-addressed cache, defaults to True for remote encoders
        :raises EncoderConfigError
        """
        if kind not in ENCODER_KINDS:
            raise EncoderConfigError(f"Unknown encoder kind '{kind}'. Should be one of {ENCODER_KINDS}")
        if not _is_positive_int(dim) or dim < MIN_DIM:
            raise EncoderConfigError(f"Incorrect encoder dim '{dim}'. Should be integer >= {MIN_DIM}")
        if kind == KIND_REMOTE and (not endpoint or not model):
            raise EncoderConfigError(f"Remote encoder requires both '{ENDPOINT}' and '{MODEL}'")
        if not _is_positive_int(max_inflight):
            raise EncoderConfigError(f"Incorrect '{MAX_INFLIGHT}' value '{max_inflight}'. Should be positive int")
        if not _is_positive_int(batch_size):
            raise EncoderConfigError(f"Incorrect '{BATCH_SIZE}' value '{batch_size}'. Should be positive int")
        self.kind = kind
        self.dim = dim
        self.endpoint = endpoint.rstrip("/") if endpoint else endpoint
        self.model = model
        self.max_inflight = max_inflight
        self.batch_size = batch_size
        self.cache = (kind == KIND_REMOTE) if cache is None else bool(cache)

    @property
    def encoder_id(self) -> str:
        """
        Stable identity of encoder output space
        """
        return f"{self.kind}:{self.dim}:{self.model or '-'}"

    def as_dict(self) -> Dict[str, Any]:
        return {
            KIND: self.kind,
            DIM: self.dim,
            ENDPOINT: self.endpoint,
            MODEL: self.model,
            MAX_INFLIGHT: self.max_inflight,
            BATCH_SIZE: self.batch_size,
            CACHE: self.cache,
        }

    def __eq__(self, other):
        return isinstance(other, TextEncoderConfig) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"TextEncoderConfig({self.encoder_id})"


def hash_encode_one(dim: int, text: str) -> np.ndarray:
    """
    Feature-hashing sentence vector. Lowercased text is split on non-alphanumeric runs, each token's
    SHA-256 selects bucket (first 4 bytes big-endian mod dim) and sign (+1 when byte 4 is even)
    :param dim: vector width
    :param text: input text
    :return: unit float32 vector, e_0 when text has no tokens or all buckets cancel
    """
    if dim < MIN_DIM:
        raise EncoderConfigError(f"Incorrect encoder dim '{dim}'. Should be integer >= {MIN_DIM}")
    vector = np.zeros(dim, dtype=np.float64)
    for token in _TOKEN_SEPARATOR.split(text.lower()):
        if not token:
            continue
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:4], "big") % dim
        vector[bucket] += 1.0 if digest[4] % 2 == 0 else -1.0
    norm = np.linalg.norm(vector)
    if norm == 0:
        vector[0] = 1.0
        return vector.astype(np.float32)
    return (vector / norm).astype(np.float32)


def encode_texts(config: TextEncoderConfig, texts: List[str]) -> EmbeddingMatrix:
    """
    Encodes texts into unit vectors, row i for texts[i]
    :param config: encoder configuration
    :param texts: non-empty list of non-empty texts
    :raises EncoderError
    """
    if not texts:
        raise EncoderInputError("Nothing to encode, texts list is empty")
    for position, text in enumerate(texts):
        if not isinstance(text, str) or not text:
            raise EncoderInputError(f"Incorrect text at position {position}. Should be non-empty str")
    if config.kind == KIND_HASH:
        data = np.vstack([hash_encode_one(config.dim, text) for text in texts])
    else:
        data = _encode_remote(config, texts)
    logger.debug(f"Encoded {len(texts)} texts with encoder '{config.encoder_id}'")
    return EmbeddingMatrix(data)


def _encode_remote(config: TextEncoderConfig, texts: List[str]) -> np.ndarray:
    """
    Sends texts in batches with up to max_inflight concurrent requests and reassembles in input order
    """
    batches = [(start, texts[start:start + config.batch_size]) for start in range(0, len(texts), config.batch_size)]
    result = np.zeros((len(texts), config.dim), dtype=np.float32)
    with ThreadPoolExecutor(max_workers=config.max_inflight) as executor:
        futures = []
        for start, batch in batches:
            future = executor.submit(request_embeddings, config, batch)
            future.batch_start = start
            future.batch_size = len(batch)
            futures.append(future)
        for future in as_completed(futures):
            vectors = future.result()
            result[future.batch_start:future.batch_start + future.batch_size] = vectors
    return result


def request_embeddings(config: TextEncoderConfig, batch: List[str]) -> np.ndarray:
    """
    POSTs one batch to {endpoint}/v1/embeddings with exponential backoff on transport errors, 429 and 5xx
    :param config: remote encoder configuration
    :param batch: texts for single request
    :return: normalized vectors aligned with batch
    :raises EncoderTransportError, EncoderContractError
    """
    url = f"{config.endpoint}{EMBEDDINGS_PATH}"
    headers = {}
    api_key = os.getenv(EMB_API_KEY)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {"model": config.model, "input": batch}
    status = None
    for attempt in range(len(RETRY_BACKOFF) + 1):
        try:
            logger.debug(f"Embedding request to '{url}' with {len(batch)} texts, attempt {attempt + 1}")
            response = requests.post(url, json=body, headers=headers, timeout=REQUEST_TIMEOUT)
            status = response.status_code
            if status == 200:
                return _parse_embeddings_response(config, response.json(), len(batch))
            if status not in RETRYABLE_STATUS:
                raise EncoderTransportError(f"Embedding request to '{url}' rejected", status=status)
            logger.warning(f"Embedding request to '{url}' returned status {status}")
        except requests.RequestException as e:
            logger.warning(f"Issue sending embedding request to '{url}'\n{e}")
        except ValueError as e:
            logger.warning(f"Incorrect JSON in embedding response from '{url}'\n{e}")
        if attempt < len(RETRY_BACKOFF):
            sleep(RETRY_BACKOFF[attempt])
    raise EncoderTransportError(f"Embedding request to '{url}' failed after {len(RETRY_BACKOFF)} retries",
                                status=status)


def _parse_embeddings_response(config: TextEncoderConfig, payload: Dict[str, Any], expected: int) -> np.ndarray:
    data = payload.get("data") if isinstance(payload, dict) else None
    if not isinstance(data, list) or len(data) != expected:
        raise EncoderContractError(f"Embedding response should hold {expected} items in 'data'")
    ordered = sorted(enumerate(data), key=lambda item: item[1].get("index", item[0]))
    vectors = np.zeros((expected, config.dim), dtype=np.float64)
    for row, (_, item) in enumerate(ordered):
        embedding = np.asarray(item.get("embedding", []), dtype=np.float64)
        if embedding.shape != (config.dim,):
            raise EncoderContractError(f"Embedding dimension mismatch. Should be {config.dim}, "
                                       f"is {embedding.shape[0] if embedding.ndim == 1 else embedding.shape}")
        norm = np.linalg.norm(embedding)
        if not np.all(np.isfinite(embedding)) or norm == 0:
            raise EncoderContractError(f"Embedding at index {row} is zero or non-finite")
        vectors[row] = embedding / norm
    return vectors.astype(np.float32)


def configure_encoder(config: Optional[Dict[str, Any]]) -> TextEncoderConfig:
    """
    Builds encoder configuration from config file section
    :param config: encoder section, None for defaults
    :raises EncoderConfigError
    """
    if config is None:
        return TextEncoderConfig()
    if not isinstance(config, dict):
        raise EncoderConfigError(f"Incorrect encoder configuration type. Should be dict, is {type(config)}")
    for key in config:
        if key not in ENCODER_KEYS:
            raise EncoderConfigError(f"Unknown key '{key}' in encoder configuration")
    return TextEncoderConfig(kind=config.get(KIND, KIND_HASH),
                             dim=config.get(DIM, DEFAULT_DIM),
                             endpoint=config.get(ENDPOINT),
                             model=config.get(MODEL),
                             max_inflight=config.get(MAX_INFLIGHT, DEFAULT_MAX_INFLIGHT),
                             batch_size=config.get(BATCH_SIZE, DEFAULT_BATCH_SIZE),
                             cache=config.get(CACHE))


def _is_positive_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value > 0


class EncoderError(Exception):
    pass


class EncoderConfigError(EncoderError):
    pass


class EncoderInputError(EncoderError):
    pass


class EncoderContractError(EncoderError):
    pass


class EncoderTransportError(EncoderError):
    def __init__(self, message: str, status: Optional[int] = None):
        self.status = status
        super().__init__(f"{message} (HTTP status: {status})")
