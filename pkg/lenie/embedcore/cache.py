import hashlib
import json
import logging
import threading
from typing import Dict, List, Optional, Tuple

import numpy as np

from lenie.embedcore.encoder import TextEncoderConfig, encode_texts, EncoderError
from lenie.embedcore.matrix import EmbeddingMatrix

logger = logging.getLogger(__name__)

# JSONL record keys
ENC = "enc"
KEY = "key"
VEC = "vec"


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """
    Content-addressed, append-only vector store keyed by (encoder_id, sha256(text))
    """

    def __init__(self, path: str):
        """
        :param path: JSONL store file, created on first append
        """
        self.path = path
        self._entries: Dict[Tuple[str, str], List[float]] = {}
        self._lock = threading.Lock()
        self._loaded = False

    def load(self) -> None:
        """
        Reads store file into memory. Missing file means empty cache
        :raises EmbeddingCacheError
        """
        entries = {}
        try:
            with open(self.path, "r", encoding="utf-8") as fh:
                for line_number, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    enc, key, vec = self._parse_record(line, line_number)
                    entries[(enc, key)] = vec
        except FileNotFoundError:
            logger.debug(f"Embedding cache '{self.path}' not present yet")
        except OSError as e:
            raise EmbeddingCacheError(f"Issue reading embedding cache '{self.path}'") from e
        with self._lock:
            self._entries = entries
            self._loaded = True
        logger.info(f"Loaded {len(entries)} cached embeddings from '{self.path}'")

    def _parse_record(self, line: str, line_number: int) -> Tuple[str, str, List[float]]:
        key = None
        try:
            record = json.loads(line)
            key = record.get(KEY)
            enc = record[ENC]
            vec = record[VEC]
            if not isinstance(enc, str) or not isinstance(key, str) or not isinstance(vec, list) or not vec:
                raise ValueError("wrong field types")
            values = np.asarray(vec, dtype=np.float32)
            if not np.all(np.isfinite(values)):
                raise ValueError("non-finite values")
        except (ValueError, KeyError, TypeError, AttributeError) as e:
            raise EmbeddingCacheError(f"Corrupt embedding cache record in '{self.path}' line {line_number}",
                                      key=key) from e
        return enc, key, vec

    def get(self, encoder_id: str, text: str) -> Optional[np.ndarray]:
        if not self._loaded:
            self.load()
        with self._lock:
            vec = self._entries.get((encoder_id, text_key(text)))
        return None if vec is None else np.asarray(vec, dtype=np.float32)

    def put_many(self, encoder_id: str, texts: List[str], matrix: EmbeddingMatrix) -> None:
        """
        Appends vectors for texts, skipping keys already stored
        :raises EmbeddingCacheError
        """
        with self._lock:
            lines = []
            for row, text in enumerate(texts):
                key = text_key(text)
                if (encoder_id, key) in self._entries:
                    continue
                vec = [float(value) for value in matrix.data[row]]
                self._entries[(encoder_id, key)] = vec
                lines.append(json.dumps({ENC: encoder_id, KEY: key, VEC: vec}))
            if not lines:
                return
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write("\n".join(lines) + "\n")
            except OSError as e:
                raise EmbeddingCacheError(f"Issue appending to embedding cache '{self.path}'") from e
        logger.debug(f"Appended {len(lines)} embeddings to cache '{self.path}'")

    def __len__(self):
        return len(self._entries)


def cache_get_or_encode(cache: EmbeddingCache, config: TextEncoderConfig, texts: List[str]) -> EmbeddingMatrix:
    """
    Serves cached rows and encodes all misses with a single encode_texts call
    :param cache: embedding cache
    :param config: encoder configuration
    :param texts: texts to encode
    :return: same matrix encode_texts would produce
    :raises EmbeddingCacheError, EncoderError
    """
    if not texts:
        raise EncoderError("Nothing to encode, texts list is empty")
    rows: List[Optional[np.ndarray]] = [cache.get(config.encoder_id, text) for text in texts]
    misses = []
    seen = set()
    for text, row in zip(texts, rows):
        if row is None and text not in seen:
            seen.add(text)
            misses.append(text)
    logger.info(f"Embedding cache: {len(texts) - sum(row is None for row in rows)} hits, {len(misses)} to encode")
    if misses:
        encoded = encode_texts(config, misses)
        cache.put_many(config.encoder_id, misses, encoded)
        by_text = {text: encoded.data[index] for index, text in enumerate(misses)}
        rows = [by_text[text] if row is None else row for text, row in zip(texts, rows)]
    for row in rows:
        if row.shape[0] != config.dim:
            raise EmbeddingCacheError(f"Cached vector dim {row.shape[0]} does not match encoder dim {config.dim}",
                                      key=config.encoder_id)
    return EmbeddingMatrix(np.vstack(rows))


class EmbeddingCacheError(EncoderError):
    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{message} (key: '{key}')")
