import itertools
import logging
import re
import unittest
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from types import SimpleNamespace

import mock
import numpy as np

from lenie.embedcore.encoder import TextEncoderConfig
from lenie.embedcore.matrix import EmbeddingMatrix
from lenie.kgcore.graph import KnowledgeGraph, Entity, Relation, Triplet
from lenie.samplecore.kmeans import ClusterResult, kmeans_fit, squared_distances, SamplerConfigError, \
    KMeansNumericError
from lenie.samplecore.sampler import SamplerConfig, SampledContext, sample_random, select_nearest_sentences, \
    sample_triplets, sample_nodes, relation_coverage, configure_sampler, node_sentences

STUB_DIM = 8
_RELATION = re.compile(r"'s rel(\d+) is ")


def orthogonal_stub_encoder(config, texts):
    """
    Maps every sentence to basis vector of its relation
    """
    rows = []
    for text in texts:
        vector = np.zeros(STUB_DIM)
        vector[int(_RELATION.search(text).group(1))] = 1.0
        rows.append(vector)
    return EmbeddingMatrix(np.vstack(rows))


def hub_graph(relation_counts):
    """
    Node 0 linked to a fresh tail per triplet, relation r used relation_counts[r] times
    """
    triplets = []
    tail = 1
    for relation, count in enumerate(relation_counts):
        for _ in range(count):
            triplets.append(Triplet(0, relation, tail))
            tail += 1
    entities = [Entity(0, "hub")] + [Entity(i, f"t{i}") for i in range(1, tail)]
    relations = [Relation(r, f"rel{r}") for r in range(len(relation_counts))]
    return KnowledgeGraph(entities, relations, triplets)


def sentence_relations(context):
    return [int(_RELATION.search(sentence).group(1)) for sentence in context.sentences]


class SampleRandomTestCase(unittest.TestCase):
    def test_fewer_than_k(self):
        self.assertEqual(["a", "b", "c"], sample_random(["a", "b", "c"], 10, seed=1))

    def test_deterministic_and_ordered(self):
        sentences = [f"s{i}" for i in range(30)]
        first = sample_random(sentences, 7, seed=42)
        self.assertEqual(first, sample_random(sentences, 7, seed=42))
        self.assertEqual(7, len(set(first)))
        self.assertEqual(sorted(first, key=sentences.index), first)

    def test_zero_k(self):
        with self.assertRaises(SamplerConfigError):
            sample_random(["a"], 0, seed=1)

    def test_selection_frequency_uniform(self):
        sentences = [f"s{i}" for i in range(100)]
        counts = Counter()
        trials = 10000
        for seed in range(trials):
            counts.update(sample_random(sentences, 5, seed))
        for sentence in sentences:
            self.assertAlmostEqual(0.05, counts[sentence] / trials, delta=0.015)

    def test_subset_distribution_uniform(self):
        sentences = ["a", "b", "c", "d", "e"]
        subsets = Counter(tuple(sample_random(sentences, 2, seed)) for seed in range(5000))
        self.assertEqual(set(itertools.combinations(sentences, 2)), set(subsets))
        expected = 5000 / 10
        chi_square = sum((count - expected) ** 2 / expected for count in subsets.values())
        # 9 degrees of freedom, p = 0.001
        self.assertLess(chi_square, 27.88)


class KMeansTestCase(unittest.TestCase):
    def test_single_cluster_is_mean(self):
        points = np.random.default_rng(0).normal(size=(20, 3))
        result = kmeans_fit(EmbeddingMatrix(points), 1, seed=3)
        np.testing.assert_allclose(points.astype(np.float32).astype(np.float64).mean(axis=0), result.centers[0],
                                   atol=1e-9)
        self.assertEqual(1, result.k)

    def test_separated_blobs(self):
        rng = np.random.default_rng(1)
        first = rng.normal(scale=0.1, size=(15, 4))
        second = rng.normal(scale=0.1, size=(10, 4)) + 10.0
        points = EmbeddingMatrix(np.vstack([first, second]))
        data = points.data.astype(np.float64)
        for seed in range(5):
            result = kmeans_fit(points, 2, seed=seed)
            order = np.argsort(result.centers[:, 0])
            np.testing.assert_allclose(data[:15].mean(axis=0), result.centers[order[0]], atol=1e-9)
            np.testing.assert_allclose(data[15:].mean(axis=0), result.centers[order[1]], atol=1e-9)
            self.assertEqual(1, len(set(result.assignments[:15].tolist())))
            self.assertEqual(1, len(set(result.assignments[15:].tolist())))
            self.assertNotEqual(result.assignments[0], result.assignments[15])

    def test_k_equals_rows(self):
        points = EmbeddingMatrix(np.eye(5))
        result = kmeans_fit(points, 5, seed=7)
        self.assertEqual(0.0, result.inertia)
        self.assertEqual(list(range(5)), sorted(result.assignments.tolist()))

    def test_incorrect_k(self):
        points = EmbeddingMatrix(np.eye(3))
        with self.assertRaises(SamplerConfigError):
            kmeans_fit(points, 4, seed=0)
        with self.assertRaises(SamplerConfigError):
            kmeans_fit(points, 0, seed=0)

    def test_non_finite_points(self):
        with self.assertRaises(KMeansNumericError):
            kmeans_fit(SimpleNamespace(data=np.array([[1.0, float("nan")], [0.0, 1.0]])), 1, seed=0)

    def test_inertia_non_increasing(self):
        rng = np.random.default_rng(11)
        for instance in range(100):
            points = EmbeddingMatrix(rng.normal(size=(30, 4)))
            result = kmeans_fit(points, int(rng.integers(1, 8)), seed=instance)
            for before, after in zip(result.inertia_trace, result.inertia_trace[1:]):
                self.assertLessEqual(after, before + 1e-9)
            self.assertEqual(result.inertia, result.inertia_trace[-1])

    def test_nearest_center_assignment(self):
        points = EmbeddingMatrix(np.random.default_rng(5).normal(size=(40, 3)))
        result = kmeans_fit(points, 4, seed=2)
        distances = squared_distances(points.data.astype(np.float64), result.centers)
        np.testing.assert_array_equal(np.argmin(distances, axis=1), result.assignments)

    def test_deterministic_across_threads(self):
        points = EmbeddingMatrix(np.random.default_rng(8).normal(size=(50, 6)))
        expected = kmeans_fit(points, 5, seed=123)
        with ThreadPoolExecutor(max_workers=4) as executor:
            results = list(executor.map(lambda _: kmeans_fit(points, 5, seed=123), range(8)))
        for result in results:
            self.assertEqual(expected, result)


class SelectNearestTestCase(unittest.TestCase):
    def test_all_sentences_when_k_equals_rows(self):
        sentences = ["a", "b", "c", "d"]
        embeddings = EmbeddingMatrix(np.eye(4))
        result = kmeans_fit(embeddings, 4, seed=0)
        self.assertEqual(sentences, select_nearest_sentences(sentences, embeddings, result))

    def test_tie_goes_to_lower_index(self):
        embeddings = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        result = ClusterResult(centers=np.array([[0.5, 0.5]]), assignments=np.array([0, 0]), inertia=1.0,
                               inertia_trace=[1.0], iterations=1)
        self.assertEqual(["first"], select_nearest_sentences(["first", "second"], embeddings, result))

    def test_one_sentence_per_blob(self):
        data = np.array([[1.0, 0.0], [0.9, 0.1], [0.95, 0.0], [0.0, 1.0], [0.1, 0.9], [0.0, 0.95]])
        embeddings = EmbeddingMatrix(data)
        sentences = [f"s{i}" for i in range(6)]
        result = kmeans_fit(embeddings, 2, seed=4)
        picked = select_nearest_sentences(sentences, embeddings, result)
        expected = sorted(int(np.argmin(((embeddings.data.astype(np.float64) - center) ** 2).sum(axis=1)))
                          for center in result.centers)
        self.assertEqual([sentences[i] for i in expected], picked)
        self.assertEqual(1, len([s for s in picked if int(s[1:]) < 3]))


class SampleTripletsTestCase(unittest.TestCase):
    def setUp(self) -> None:
        logging.disable(logging.INFO)
        self.encoder = TextEncoderConfig(dim=STUB_DIM)

    def tearDown(self) -> None:
        logging.disable(logging.NOTSET)

    @mock.patch("lenie.samplecore.sampler.encode_texts")
    def test_fewer_sentences_than_k_no_encoding(self, mock_encode):
        kg = hub_graph([1, 1])
        context = sample_triplets(kg, 0, self.encoder, SamplerConfig("cluster", 5, seed=1))
        self.assertEqual(["hub's rel0 is t1.", "hub's rel1 is t2."], context.sentences)
        self.assertEqual([0, 1], context.triplets)
        mock_encode.assert_not_called()

    def test_isolated_node(self):
        kg = KnowledgeGraph([Entity(0, "alone"), Entity(1, "other")], [Relation(0, "r")], [])
        for strategy in ("random", "cluster"):
            context = sample_triplets(kg, 0, self.encoder, SamplerConfig(strategy, 3, seed=1))
            self.assertEqual([], context.sentences)
            self.assertEqual(3, context.k_requested)

    def test_duplicate_triplets_deduplicated(self):
        entities = [Entity(0, "a"), Entity(1, "b")]
        kg = KnowledgeGraph(entities, [Relation(0, "r")], [Triplet(0, 0, 1), Triplet(0, 0, 1), Triplet(1, 0, 0)])
        sentences, sources = node_sentences(kg, 0)
        self.assertEqual(["a's r is b.", "b's r is a."], sentences)
        self.assertEqual([0, 2], sources)

    @mock.patch("lenie.samplecore.sampler.encode_texts", side_effect=orthogonal_stub_encoder)
    def test_cluster_picks_one_per_relation(self, _):
        kg = hub_graph([90, 10])
        context = sample_triplets(kg, 0, self.encoder, SamplerConfig("cluster", 2, seed=5))
        self.assertEqual([0, 1], sorted(sentence_relations(context)))
        self.assertEqual((2, 2), relation_coverage(kg, context))

    def test_random_mostly_dominant_relation(self):
        kg = hub_graph([90, 10])
        trials = 2000
        both_dominant = 0
        for seed in range(trials):
            context = sample_triplets(kg, 0, self.encoder, SamplerConfig("random", 2, seed=seed))
            if sentence_relations(context) == [0, 0]:
                both_dominant += 1
        # C(90, 2) / C(100, 2)
        self.assertAlmostEqual(4005 / 4950, both_dominant / trials, delta=0.035)

    @mock.patch("lenie.samplecore.sampler.encode_texts", side_effect=orthogonal_stub_encoder)
    def test_relation_coverage_skewed_nodes(self, _):
        rng = np.random.default_rng(2024)
        cluster_hits = 0
        random_failures = 0
        for trial in range(100):
            relation_count = int(rng.integers(2, 5))
            minority = [int(rng.integers(1, 10 // (relation_count - 1) + 1)) for _ in range(relation_count - 1)]
            counts = [50 - sum(minority)] + minority
            self.assertGreaterEqual(counts[0] / 50, 0.8)
            kg = hub_graph(counts)
            cluster = sample_triplets(kg, 0, self.encoder, SamplerConfig("cluster", relation_count, seed=trial))
            if sorted(sentence_relations(cluster)) == list(range(relation_count)):
                cluster_hits += 1
            random = sample_triplets(kg, 0, self.encoder, SamplerConfig("random", relation_count, seed=trial))
            if sorted(sentence_relations(random)) != list(range(relation_count)):
                random_failures += 1
        self.assertEqual(100, cluster_hits)
        self.assertGreaterEqual(random_failures, 50)

    @mock.patch("lenie.samplecore.sampler.encode_texts", side_effect=orthogonal_stub_encoder)
    def test_degenerate_clustering_topped_up(self, _):
        kg = hub_graph([6])
        context = sample_triplets(kg, 0, self.encoder, SamplerConfig("cluster", 3, seed=0))
        self.assertEqual(["hub's rel0 is t1.", "hub's rel0 is t2.", "hub's rel0 is t3."], context.sentences)

    def test_sample_nodes_thread_independent(self):
        kg = hub_graph([12, 7, 3])
        extra = [Entity(i, f"x{i}") for i in range(kg.num_entities, kg.num_entities + 3)]
        triplets = kg.triplets + [Triplet(e.id, 1, 1) for e in extra] + [Triplet(5, 2, e.id) for e in extra]
        kg = KnowledgeGraph(kg.entities + extra, kg.relations, triplets)
        nodes = list(range(kg.num_entities))
        config = SamplerConfig("cluster", 4, seed=99)
        sequential = sample_nodes(kg, nodes, self.encoder, config, thread_count=1)
        threaded = sample_nodes(kg, nodes, self.encoder, config, thread_count=4)
        self.assertEqual(sequential, threaded)
        self.assertEqual(nodes, [context.node for context in threaded])
        for context in threaded:
            self.assertEqual(min(4, len(node_sentences(kg, context.node)[0])), len(context.sentences))
            self.assertEqual(len(context.sentences), len(set(context.sentences)))


class SamplerConfigTestCase(unittest.TestCase):
    def test_defaults(self):
        config = configure_sampler(None, default_k=3, seed=11)
        self.assertEqual(SamplerConfig("cluster", 3, 11), config)
        self.assertEqual(11 ^ 4, config.node_seed(4))

    def test_explicit_values(self):
        config = configure_sampler({"strategy": "random", "k": 7, "seed": 2}, default_k=3, seed=11)
        self.assertEqual({"strategy": "random", "k": 7, "seed": 2, "kmeans_max_iters": 100, "kmeans_tol": 1e-6},
                         config.as_dict())

    def test_missing_k(self):
        with self.assertRaises(SamplerConfigError):
            configure_sampler({"strategy": "random"}, default_k=None, seed=1)

    def test_incorrect_values(self):
        for section in ({"strategy": "clutser"}, {"k": 0}, {"seed": -1}, {"seed": 1 << 64}, {"size": 3}):
            with self.assertRaises(SamplerConfigError):
                configure_sampler(section, default_k=3, seed=1)

    def test_record_round_trip(self):
        context = SampledContext(3, ["a's r is b."], "cluster", 5, triplets=[8])
        self.assertEqual({"node": 3, "strategy": "cluster", "k": 5, "sentences": ["a's r is b."], "triplets": [8]},
                         context.to_record())
        self.assertEqual(context, SampledContext.from_record(context.to_record()))
        with self.assertRaises(SamplerConfigError):
            SampledContext.from_record({"node": 3})


if __name__ == '__main__':
    unittest.main()
