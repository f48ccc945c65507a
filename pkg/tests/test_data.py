"""Synthetic generation, splitting, document pooling and ingestion (src/data.py)."""

import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from src.data import (
    CONDITION_NAMES,
    Dataset,
    GeneratorConfig,
    ModalityTokens,
    Sample,
    chunk_pool_document,
    chunk_tokens,
    class_names,
    generate_dataset,
    load_embeddings,
    save_embeddings,
    split_dataset,
)
from src.errors import ConfigError, IngestionError


def _write_lines(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


class GeneratorTests(unittest.TestCase):
    def test_mortality_prevalence(self):
        ds = generate_dataset(GeneratorConfig(n_samples=20000, seed=3,
                                              token_range={"EHR": (1, 1), "CXR": (1, 1),
                                                           "RR": (1, 1), "DN": (1, 1)},
                                              token_dim=2))
        self.assertAlmostEqual(float(ds.labels().mean()), 0.125, delta=0.01)

    def test_zero_missingness_gives_full_availability(self):
        cfg = GeneratorConfig(n_samples=200, missing={"CXR": 0.0, "RR": 0.0, "DN": 0.0})
        ds = generate_dataset(cfg)
        self.assertTrue(np.all(ds.availability() == 1))

    def test_anchor_is_never_dropped(self):
        cfg = GeneratorConfig(n_samples=300, missing={"EHR": 1.0, "CXR": 1.0})
        ds = generate_dataset(cfg)
        a = ds.availability()
        self.assertTrue(np.all(a[:, 0] == 1))
        self.assertTrue(np.all(a[:, 1] == 0))

    def test_identical_seed_gives_identical_dataset(self):
        cfg = GeneratorConfig(n_samples=50, seed=11)
        a, b = generate_dataset(cfg), generate_dataset(cfg)
        for s, t in zip(a, b):
            self.assertEqual(s.sample_id, t.sample_id)
            np.testing.assert_array_equal(s.label, t.label)
            for m in a.modalities:
                self.assertEqual(s.tokens(m).tobytes(), t.tokens(m).tobytes())

    def test_token_counts_follow_ranges(self):
        cfg = GeneratorConfig(n_samples=100, token_range={"EHR": (3, 5)},
                              missing={"CXR": 0.0, "RR": 0.0, "DN": 0.0})
        ds = generate_dataset(cfg)
        counts = {s.tokens("EHR").shape[0] for s in ds}
        self.assertTrue(counts <= {3, 4, 5})
        self.assertTrue(all(s.tokens("CXR").shape[0] == 16 for s in ds))

    def test_label_dependent_missingness(self):
        base = dict(n_samples=4000, seed=1, missing={"CXR": 0.3}, prevalence=[0.5],
                    token_range={m: (1, 1) for m in ("EHR", "CXR", "RR", "DN")}, token_dim=2)
        ds = generate_dataset(GeneratorConfig(missing_label_shift=1.0, **base))
        y = ds.labels()[:, 0]
        cxr = ds.availability()[:, 1]
        self.assertGreater(1 - cxr[y == 1].mean(), 1 - cxr[y == 0].mean() + 0.15)

    def test_invalid_fields_are_named(self):
        with self.assertRaises(ValidationError) as ctx:
            GeneratorConfig(signal={"EHR": 1.5})
        self.assertIn("signal[EHR]", str(ctx.exception))
        with self.assertRaises(ValidationError):
            GeneratorConfig(unknown_key=1)
        with self.assertRaises(ValidationError):
            GeneratorConfig(num_classes=3, prevalence=[0.1, 0.2])
        with self.assertRaises(ValidationError):
            GeneratorConfig(modalities=["CXR"], anchor="EHR")

    def test_condition_defaults(self):
        cfg = GeneratorConfig(num_classes=25)
        self.assertEqual(len(cfg.prevalence_vector()), 25)
        self.assertEqual(class_names(25), CONDITION_NAMES)
        self.assertEqual(class_names(1), ("mortality",))
        self.assertEqual(class_names(1, "conditions"), ("class_0",))
        self.assertEqual(class_names(3), ("class_0", "class_1", "class_2"))


class SplitTests(unittest.TestCase):
    def _dataset(self, n):
        return Dataset(("EHR",), 1, {"EHR": 1}, [
            Sample(f"s{i}", {"EHR": ModalityTokens.of("EHR", [[float(i)]])}, [0])
            for i in range(n)
        ])

    def test_sizes(self):
        self.assertEqual(split_dataset(self._dataset(100)).sizes(), (70, 10, 20))
        self.assertEqual(split_dataset(self._dataset(101)).sizes(), (71, 10, 20))
        self.assertEqual(split_dataset(self._dataset(0)).sizes(), (0, 0, 0))

    def test_seeded_and_disjoint(self):
        ds = self._dataset(57)
        a, b = split_dataset(ds, seed=4), split_dataset(ds, seed=4)
        self.assertEqual(a, b)
        union = set(a.train) | set(a.validation) | set(a.test)
        self.assertEqual(len(union), 57)
        self.assertNotEqual(split_dataset(ds, seed=5).train, a.train)

    def test_partition_for_every_size_and_random_ratios(self):
        full = self._dataset(1000)
        rng = np.random.default_rng(12)
        for n in range(1, 1001):
            raw = rng.random(3) + 0.05
            ratios = tuple(raw / raw.sum())
            ds = Dataset(full.modalities, 1, dict(full.token_dims), full.samples[:n])
            split = split_dataset(ds, ratios, seed=n)
            parts = (split.train, split.validation, split.test)
            self.assertEqual(sorted(split.train + split.validation + split.test), sorted(ds.ids))
            self.assertEqual(sum(len(p) for p in parts), n)
            for part, r in zip(parts, ratios):
                self.assertLess(abs(len(part) - n * r), 1.0)

    def test_ratios_must_sum_to_one(self):
        with self.assertRaises(ConfigError):
            split_dataset(self._dataset(10), ratios=(0.5, 0.2, 0.2))
        with self.assertRaises(ConfigError):
            split_dataset(self._dataset(10), ratios=(1.1, -0.05, -0.05))


class DocumentPoolingTests(unittest.TestCase):
    def test_identical_vectors(self):
        v = np.array([0.5, -1.0, 2.0])
        np.testing.assert_allclose(chunk_pool_document(np.stack([v, v, v])), v)

    def test_equal_chunks_average_of_chunk_means(self):
        rng = np.random.default_rng(0)
        tokens = rng.standard_normal((1024, 3))
        expected = (tokens[:512].mean(axis=0) + tokens[512:].mean(axis=0)) / 2
        np.testing.assert_allclose(chunk_pool_document(tokens), expected, atol=1e-12)

    def test_unequal_chunks_equal_direct_mean(self):
        tokens = np.arange(600 * 2, dtype=np.float64).reshape(600, 2)
        np.testing.assert_allclose(chunk_pool_document(tokens), tokens.mean(axis=0), atol=1e-9)

    def test_chunk_tokens_one_row_per_chunk(self):
        tokens = np.arange(10, dtype=np.float64).reshape(5, 2)
        out = chunk_tokens(tokens, chunk=2)
        np.testing.assert_allclose(out, [[1, 2], [5, 6], [8, 9]])

    def test_empty_document_is_an_error(self):
        with self.assertRaises(ValueError):
            chunk_pool_document(np.zeros((0, 4)))


class IngestionTests(unittest.TestCase):
    def test_missing_modality_from_absent_key(self):
        tok = {"tokens": [[0.1, 0.2]]}
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / "data.jsonl"
            _write_lines(path, [
                {"id": "a", "label": [1], "modalities": {"EHR": tok, "CXR": tok, "RR": tok, "DN": tok}},
                {"id": "b", "label": [0], "modalities": {"EHR": tok, "RR": tok, "DN": tok}},
            ])
            ds = load_embeddings(path)
        self.assertEqual(ds.modalities, ("EHR", "CXR", "RR", "DN"))
        np.testing.assert_array_equal(ds[0].availability, [1, 1, 1, 1])
        np.testing.assert_array_equal(ds[1].availability, [1, 0, 1, 1])
        self.assertEqual(ds[1].tokens("CXR").shape, (0, 2))

    def test_empty_file_gives_empty_dataset(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / "empty.jsonl"
            path.write_text("", encoding="utf-8")
            ds = load_embeddings(path)
        self.assertEqual(len(ds), 0)

    def test_errors_carry_line_numbers(self):
        tok = {"tokens": [[0.1, 0.2]]}
        cases = [
            ([{"id": "a", "label": [1], "modalities": {"EHR": tok}}, "not json"], 2),
            ([{"id": "a", "label": [1], "modalities": {"EHR": tok}},
              {"id": "a", "label": [0], "modalities": {"EHR": tok}}], 2),
            ([{"id": "a", "label": [1], "modalities": {"EHR": tok}},
              {"id": "b", "label": [0], "modalities": {"EHR": {"tokens": [[1.0, 2.0, 3.0]]}}}], 2),
            ([{"id": "a", "label": [1]}], 1),
        ]
        for records, line in cases:
            with tempfile.TemporaryDirectory() as tmp_dir:
                path = Path(tmp_dir) / "bad.jsonl"
                path.write_text("".join(
                    (r if isinstance(r, str) else json.dumps(r)) + "\n" for r in records
                ), encoding="utf-8")
                with self.assertRaises(IngestionError) as ctx:
                    load_embeddings(path)
            self.assertEqual(ctx.exception.line, line)

    def test_document_chunking_on_text_modalities(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / "docs.jsonl"
            _write_lines(path, [{
                "id": "a", "label": [1],
                "modalities": {"EHR": {"tokens": [[1.0]] * 5}, "RR": {"tokens": [[float(i)] for i in range(5)]}},
            }])
            ds = load_embeddings(path, document_chunk=2)
        self.assertEqual(ds[0].tokens("EHR").shape, (5, 1))
        np.testing.assert_allclose(ds[0].tokens("RR")[:, 0], [0.5, 2.5, 4.0])

    def test_save_then_load_is_bit_identical(self):
        ds = generate_dataset(GeneratorConfig(n_samples=30, seed=2))
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / "round.jsonl"
            save_embeddings(ds, path)
            back = load_embeddings(path, modalities=ds.modalities)
        self.assertEqual(back.ids, ds.ids)
        for s, t in zip(ds, back):
            np.testing.assert_array_equal(s.availability, t.availability)
            for m in ds.modalities:
                self.assertEqual(s.tokens(m).tobytes(), t.tokens(m).tobytes())

    def test_restrict_drops_and_adds_modalities(self):
        ds = generate_dataset(GeneratorConfig(n_samples=5, modalities=["EHR", "CXR"],
                                              missing={"CXR": 0.0}))
        only = ds.restrict(["EHR"])
        self.assertEqual(only.modalities, ("EHR",))
        self.assertEqual(only.availability().shape, (5, 1))


if __name__ == "__main__":
    unittest.main()
