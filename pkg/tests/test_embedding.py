import hashlib
import json
import logging
import os
import random
import re
import tempfile
import unittest
from concurrent.futures import ThreadPoolExecutor, as_completed, TimeoutError as FutureTimeout

import mock
import numpy as np
import requests

from lenie.embedcore.cache import EmbeddingCache, EmbeddingCacheError, cache_get_or_encode, text_key
from lenie.embedcore.encoder import TextEncoderConfig, EncoderConfigError, EncoderContractError, \
    EncoderInputError, EncoderTransportError, configure_encoder, encode_texts, hash_encode_one, EMB_API_KEY
from lenie.embedcore.matrix import EmbeddingMatrix, EmbeddingFileError, EmbeddingMatrixError, load_embeddings


def oracle_hash_vector(dim: int, text: str) -> np.ndarray:
    vector = np.zeros(dim)
    for token in re.split(r"[^0-9a-z]+", text.lower()):
        if not token:
            continue
        digest = hashlib.sha256(token.encode()).digest()
        index = int.from_bytes(digest[0:4], byteorder="big") % dim
        vector[index] += -1.0 if digest[4] & 1 else 1.0
    if not vector.any():
        vector[0] = 1.0
        return vector
    return vector / np.sqrt(np.sum(vector ** 2))


def fake_response(status: int, payload=None):
    response = mock.MagicMock()
    response.status_code = status
    response.json.return_value = payload
    return response


def embeddings_payload(vectors, shuffle_seed=None):
    data = [{"index": index, "embedding": list(vector)} for index, vector in enumerate(vectors)]
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(data)
    return {"data": data}


class HashEncoderTestCase(unittest.TestCase):
    def test_empty_text_is_first_basis_vector(self):
        vector = hash_encode_one(16, "")
        expected = np.zeros(16, dtype=np.float32)
        expected[0] = 1.0
        np.testing.assert_array_equal(expected, vector)

    def test_case_folding(self):
        np.testing.assert_array_equal(hash_encode_one(32, "aaa aaa"), hash_encode_one(32, "AAA aaa"))

    def test_single_token_single_bucket(self):
        vector = hash_encode_one(8, "genre")
        nonzero = np.flatnonzero(vector)
        self.assertEqual(1, len(nonzero))
        self.assertEqual(1.0, abs(float(vector[nonzero[0]])))
        digest = hashlib.sha256(b"genre").digest()
        self.assertEqual(int.from_bytes(digest[:4], "big") % 8, nonzero[0])

    def test_matches_oracle(self):
        for text in ["Dinosaur's genre is Animation.", "Gob's has term is punk.", "x", "a-b c_d  E"]:
            np.testing.assert_allclose(oracle_hash_vector(64, text), hash_encode_one(64, text), atol=1e-7)

    def test_dim_too_small(self):
        with self.assertRaises(EncoderConfigError):
            hash_encode_one(4, "text")

    def test_encode_texts_rows(self):
        config = TextEncoderConfig(dim=16)
        matrix = encode_texts(config, ["a", "a", "x"])
        self.assertEqual((3, 16), matrix.data.shape)
        np.testing.assert_array_equal(matrix.data[0], matrix.data[1])
        self.assertTrue(matrix.is_unit_norm())

    def test_encode_texts_permutation(self):
        config = TextEncoderConfig(dim=32)
        texts = [f"sentence number {i} about topic {i % 3}" for i in range(10)]
        order = list(range(10))
        random.Random(4).shuffle(order)
        direct = encode_texts(config, texts)
        permuted = encode_texts(config, [texts[i] for i in order])
        np.testing.assert_array_equal(direct.data[order], permuted.data)

    def test_encode_texts_invalid_input(self):
        config = TextEncoderConfig(dim=16)
        with self.assertRaises(EncoderInputError):
            encode_texts(config, [])
        with self.assertRaises(EncoderInputError):
            encode_texts(config, ["ok", ""])


class EncoderConfigTestCase(unittest.TestCase):
    def test_defaults(self):
        config = configure_encoder(None)
        self.assertEqual("hash", config.kind)
        self.assertEqual(768, config.dim)
        self.assertFalse(config.cache)
        self.assertEqual("hash:768:-", config.encoder_id)

    def test_remote_requires_endpoint_and_model(self):
        with self.assertRaises(EncoderConfigError):
            configure_encoder({"kind": "remote", "model": "m"})
        config = configure_encoder({"kind": "remote", "endpoint": "http://emb/", "model": "m", "dim": 8})
        self.assertTrue(config.cache)
        self.assertEqual("http://emb", config.endpoint)
        self.assertEqual("remote:8:m", config.encoder_id)

    def test_unknown_key(self):
        with self.assertRaises(EncoderConfigError) as cm:
            configure_encoder({"knd": "hash"})
        self.assertEqual("Unknown key 'knd' in encoder configuration", str(cm.exception))

    def test_incorrect_values(self):
        for section in ({"kind": "neural"}, {"dim": 7}, {"dim": True}, {"max_inflight": 0}, {"batch_size": -1}):
            with self.assertRaises(EncoderConfigError):
                configure_encoder(section)


class RemoteEncoderTestCase(unittest.TestCase):
    def setUp(self) -> None:
        logging.disable(logging.WARNING)
        self.config = TextEncoderConfig(kind="remote", dim=8, endpoint="http://emb", model="m",
                                        max_inflight=3, batch_size=2)

    def tearDown(self) -> None:
        logging.disable(logging.NOTSET)

    @mock.patch("lenie.embedcore.encoder.sleep")
    @mock.patch("lenie.embedcore.encoder.requests.post")
    def test_batches_reassembled_in_input_order(self, mock_post, mock_sleep):
        texts = [f"t{i}" for i in range(5)]
        vectors = {text: np.eye(8)[i] * (i + 2) for i, text in enumerate(texts)}

        def respond(url, json=None, headers=None, timeout=None):
            return fake_response(200, embeddings_payload([vectors[text] for text in json["input"]], shuffle_seed=1))

        mock_post.side_effect = respond
        matrix = encode_texts(self.config, texts)
        self.assertEqual(3, mock_post.call_count)
        np.testing.assert_allclose(np.eye(8)[:5], matrix.data)
        self.assertTrue(matrix.is_unit_norm())
        mock_sleep.assert_not_called()
        self.assertEqual("http://emb/v1/embeddings", mock_post.call_args[0][0])
        self.assertEqual(30, mock_post.call_args[1]["timeout"])

    @mock.patch.dict(os.environ, {EMB_API_KEY: "secret"})
    @mock.patch("lenie.embedcore.encoder.requests.post")
    def test_bearer_token(self, mock_post):
        mock_post.return_value = fake_response(200, embeddings_payload([np.ones(8)]))
        encode_texts(self.config, ["a"])
        self.assertEqual({"Authorization": "Bearer secret"}, mock_post.call_args[1]["headers"])
        self.assertEqual({"model": "m", "input": ["a"]}, mock_post.call_args[1]["json"])

    @mock.patch("lenie.embedcore.encoder.sleep")
    @mock.patch("lenie.embedcore.encoder.requests.post")
    def test_retry_then_success(self, mock_post, mock_sleep):
        mock_post.side_effect = [fake_response(503), requests.ConnectionError("down"),
                                 fake_response(200, embeddings_payload([np.ones(8)]))]
        matrix = encode_texts(self.config, ["a"])
        self.assertEqual(1, matrix.rows)
        self.assertEqual([mock.call(1), mock.call(2)], mock_sleep.call_args_list)

    @mock.patch("lenie.embedcore.encoder.sleep")
    @mock.patch("lenie.embedcore.encoder.requests.post")
    def test_retries_exhausted(self, mock_post, mock_sleep):
        mock_post.return_value = fake_response(500)
        with self.assertRaises(EncoderTransportError) as cm:
            encode_texts(self.config, ["a"])
        self.assertEqual(500, cm.exception.status)
        self.assertEqual(4, mock_post.call_count)
        self.assertEqual([mock.call(1), mock.call(2), mock.call(4)], mock_sleep.call_args_list)

    @mock.patch("lenie.embedcore.encoder.sleep")
    @mock.patch("lenie.embedcore.encoder.requests.post")
    def test_non_retryable_status(self, mock_post, mock_sleep):
        mock_post.return_value = fake_response(401)
        with self.assertRaises(EncoderTransportError) as cm:
            encode_texts(self.config, ["a"])
        self.assertEqual(401, cm.exception.status)
        self.assertEqual(1, mock_post.call_count)
        mock_sleep.assert_not_called()

    @mock.patch("lenie.embedcore.encoder.requests.post")
    def test_dimension_mismatch(self, mock_post):
        mock_post.return_value = fake_response(200, embeddings_payload([np.ones(16)]))
        with self.assertRaises(EncoderContractError):
            encode_texts(self.config, ["a"])

    @mock.patch("lenie.embedcore.encoder.requests.post")
    def test_item_count_mismatch(self, mock_post):
        mock_post.return_value = fake_response(200, embeddings_payload([np.ones(8)]))
        with self.assertRaises(EncoderContractError):
            encode_texts(self.config, ["a", "b"])


class EmbeddingMatrixTestCase(unittest.TestCase):
    def setUp(self) -> None:
        logging.disable(logging.INFO)
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "features.lenb")

    def tearDown(self) -> None:
        self.tmp.cleanup()
        logging.disable(logging.NOTSET)

    def test_lenb_layout(self):
        matrix = EmbeddingMatrix(np.array([[1.0, 0.0], [0.6, 0.8], [0.0, -1.0]]))
        matrix.save(self.path)
        with open(self.path, "rb") as fh:
            payload = fh.read()
        self.assertEqual(b"LENB", payload[:4])
        self.assertEqual(3, int.from_bytes(payload[4:8], "little"))
        self.assertEqual(2, int.from_bytes(payload[8:12], "little"))
        self.assertEqual(12 + 3 * 2 * 4, len(payload))
        self.assertEqual(matrix, load_embeddings(self.path))

    def test_bad_magic(self):
        with open(self.path, "wb") as fh:
            fh.write(b"LENX" + bytes(8))
        with self.assertRaises(EmbeddingFileError):
            load_embeddings(self.path)

    def test_truncated_payload(self):
        EmbeddingMatrix(np.ones((2, 4))).save(self.path)
        with open(self.path, "rb") as fh:
            payload = fh.read()
        with open(self.path, "wb") as fh:
            fh.write(payload[:-3])
        with self.assertRaises(EmbeddingFileError):
            load_embeddings(self.path)

    def test_non_finite_rejected(self):
        with self.assertRaises(EmbeddingMatrixError):
            EmbeddingMatrix(np.array([[1.0, float("nan")]]))

    def test_take(self):
        matrix = EmbeddingMatrix(np.arange(6).reshape(3, 2))
        np.testing.assert_array_equal(np.array([[4, 5], [0, 1]], dtype=np.float32), matrix.take([2, 0]).data)


class EmbeddingCacheTestCase(unittest.TestCase):
    def setUp(self) -> None:
        logging.disable(logging.INFO)
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "cache.jsonl")
        self.config = TextEncoderConfig(dim=16)

    def tearDown(self) -> None:
        self.tmp.cleanup()
        logging.disable(logging.NOTSET)

    def test_cold_cache_equals_direct(self):
        texts = ["one", "two", "three", "four", "five"]
        cache = EmbeddingCache(self.path)
        self.assertEqual(encode_texts(self.config, texts), cache_get_or_encode(cache, self.config, texts))
        self.assertEqual(5, len(cache))

    def test_second_call_no_encoder_invocation(self):
        cache = EmbeddingCache(self.path)
        with mock.patch("lenie.embedcore.cache.encode_texts", wraps=encode_texts) as counter:
            first = cache_get_or_encode(cache, self.config, ["a", "b", "a"])
            self.assertEqual(1, counter.call_count)
            self.assertEqual(["a", "b"], counter.call_args[0][1])
            second = cache_get_or_encode(cache, self.config, ["a", "b", "a"])
            self.assertEqual(1, counter.call_count)
        self.assertEqual(first, second)

    def test_one_cached_one_miss(self):
        cache = EmbeddingCache(self.path)
        cache_get_or_encode(cache, self.config, ["cached"])
        with mock.patch("lenie.embedcore.cache.encode_texts", wraps=encode_texts) as counter:
            cache_get_or_encode(cache, self.config, ["cached", "fresh"])
            self.assertEqual(1, counter.call_count)
            self.assertEqual(["fresh"], counter.call_args[0][1])

    def test_reload_byte_identical(self):
        texts = ["alpha beta", "gamma"]
        first = cache_get_or_encode(EmbeddingCache(self.path), self.config, texts)
        reloaded = EmbeddingCache(self.path)
        reloaded.load()
        with mock.patch("lenie.embedcore.cache.encode_texts") as encoder:
            second = cache_get_or_encode(reloaded, self.config, texts)
            encoder.assert_not_called()
        self.assertEqual(first.data.tobytes(), second.data.tobytes())

    def test_encoder_id_separates_entries(self):
        cache = EmbeddingCache(self.path)
        cache_get_or_encode(cache, self.config, ["text"])
        other = TextEncoderConfig(dim=32)
        matrix = cache_get_or_encode(cache, other, ["text"])
        self.assertEqual(32, matrix.dim)
        self.assertEqual(2, len(cache))

    def test_append_only(self):
        cache = EmbeddingCache(self.path)
        cache_get_or_encode(cache, self.config, ["a"])
        with open(self.path) as fh:
            first = fh.read()
        cache_get_or_encode(cache, self.config, ["b"])
        with open(self.path) as fh:
            second = fh.read()
        self.assertTrue(second.startswith(first))
        self.assertEqual(2, len(second.splitlines()))

    def test_corrupt_record_names_key(self):
        key = text_key("broken")
        with open(self.path, "w") as fh:
            fh.write(json.dumps({"enc": "hash:16:-", "key": key, "vec": "not a list"}) + "\n")
        cache = EmbeddingCache(self.path)
        with self.assertRaises(EmbeddingCacheError) as cm:
            cache.load()
        self.assertEqual(key, cm.exception.key)

    def test_get_waits_for_writer(self):
        cache = EmbeddingCache(self.path)
        cache.load()
        with ThreadPoolExecutor(max_workers=1) as executor:
            with cache._lock:
                future = executor.submit(cache.get, self.config.encoder_id, "late")
                with self.assertRaises(FutureTimeout):
                    future.result(timeout=0.2)
            self.assertIsNone(future.result(timeout=5))

    def test_concurrent_get_and_put(self):
        texts = [f"text {i}" for i in range(200)]
        matrix = encode_texts(self.config, texts)
        cache = EmbeddingCache(self.path)
        cache.load()

        def read_all():
            for row, text in enumerate(texts):
                vec = cache.get(self.config.encoder_id, text)
                if vec is not None:
                    np.testing.assert_array_equal(matrix.data[row], vec)

        with ThreadPoolExecutor(max_workers=4) as executor:
            futures = [executor.submit(read_all) for _ in range(3)]
            futures.append(executor.submit(cache.put_many, self.config.encoder_id, texts, matrix))
            for future in as_completed(futures):
                future.result()
        self.assertEqual(200, len(cache))

    def test_truncated_line(self):
        with open(self.path, "w") as fh:
            fh.write('{"enc": "hash:16:-", "key": "ab')
        with self.assertRaises(EmbeddingCacheError):
            EmbeddingCache(self.path).load()


if __name__ == '__main__':
    unittest.main()
