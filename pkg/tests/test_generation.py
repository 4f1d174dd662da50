import numpy as np
import pytest

from debiaskit.captioning import CaptionRecord, TextCorpus
from debiaskit.datasets import load_manifest, validate_composition
from debiaskit.generation import (
    GenerationError,
    GeneratorDescriptor,
    OracleShapeGenerator,
    UnparsablePromptError,
    amplify,
    assemble_debiased,
    assign_label,
    class_vocab_from_manifest,
    parse_prompt_attributes,
    read_generated,
    resolve_target_count,
    write_generated,
)
from debiaskit.imaging import SHAPE_SYNONYMS, classify_shape_image
from debiaskit.textfilter import FilteredCorpus

VOCAB = {0: {"dog", "puppy"}, 1: {"cat", "kitten"}}


class TestAssignLabel:
    def test_unique_match(self):
        assert assign_label("a black dog sitting on top of a person's car", VOCAB) == 0

    def test_no_match_is_no_label(self):
        assert assign_label("a brightly lit studio photograph", VOCAB) is None

    def test_ambiguous_is_no_label(self):
        assert assign_label("a dog chasing a cat", VOCAB) is None

    def test_synonym_matches(self):
        assert assign_label("a small brown puppy", VOCAB) == 0


class TestOracleGenerator:
    def test_deterministic_bit_identical(self):
        gen = OracleShapeGenerator()
        a = gen.generate("a red circle on a plain background", 64, 7)
        b = gen.generate("a red circle on a plain background", 64, 7)
        assert np.array_equal(a, b)

    def test_renders_named_attributes(self):
        gen = OracleShapeGenerator()
        img = gen.generate("a blue circle on a plain background", 48, 3)
        shape, color = classify_shape_image(img)
        assert (shape, color) == ("circle", "blue")

    def test_synonym_prompt_parses(self):
        assert parse_prompt_attributes("a faded green disc signpost") == ("circle", "green")

    def test_missing_color_rejected(self):
        with pytest.raises(UnparsablePromptError):
            OracleShapeGenerator().generate("a circle", 32, 1)

    def test_ambiguous_shape_rejected(self):
        with pytest.raises(UnparsablePromptError):
            parse_prompt_attributes("a red circle next to a red square")


def filtered_from(texts, ids=None):
    records = [
        CaptionRecord(ids[i] if ids else f"s{i:03d}", 1, t) for i, t in enumerate(texts)
    ]
    corpus = TextCorpus(records=records, captioner_id="t", created_from="x")
    return FilteredCorpus(kept=records, dropped=[], top_f_words=[], source=corpus)


class TestAmplify:
    def test_round_robin_counts(self, small_dataset, tmp_path):
        texts = [f"a red circle variant {i}" for i in range(5)]
        filtered = filtered_from(texts)
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        samples, stats = amplify(
            filtered, OracleShapeGenerator(), vocab, target_count=12, size=32,
            seed=3, source_manifest=small_dataset, out_dir=tmp_path / "gen",
        )
        assert len(samples) == 12
        usages = sorted(stats.per_caption_usage.values())
        assert usages == [2, 2, 2, 3, 3]  # 12 over 5 captions: fair split

    def test_balance_target_resolves_to_aligned_count(self, small_dataset):
        aligned = sum(
            1 for s in small_dataset.split_samples("train") if s.group == "aligned"
        )
        assert resolve_target_count("balance", small_dataset) == aligned

    def test_no_label_captions_skipped_and_counted(self, small_dataset, tmp_path):
        texts = ["a red circle on a plain background", "a brightly lit studio photograph"]
        filtered = filtered_from(texts)
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        samples, stats = amplify(
            filtered, OracleShapeGenerator(), vocab, target_count=4, size=32,
            seed=3, source_manifest=small_dataset, out_dir=tmp_path / "gen",
        )
        assert stats.skipped_no_label == 1
        assert len(samples) == 4
        assert all(s.prompt == texts[0] for s in samples)

    def test_zero_labelable_rejected(self, small_dataset, tmp_path):
        filtered = filtered_from(["a brightly lit studio photograph"])
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        with pytest.raises(GenerationError, match="labelable"):
            amplify(filtered, OracleShapeGenerator(), vocab, target_count=2, size=32,
                    seed=3, source_manifest=small_dataset, out_dir=tmp_path / "gen")

    def test_generated_images_match_prompt_attributes(self, small_dataset, tmp_path):
        texts = ["a blue circle on a plain background", "a purple square on a plain background"]
        filtered = filtered_from(texts)
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        samples, _ = amplify(
            filtered, OracleShapeGenerator(), vocab, target_count=6, size=32,
            seed=9, source_manifest=small_dataset, out_dir=tmp_path / "gen",
        )
        from debiaskit.imaging import load_image

        for s in samples:
            shape, color = classify_shape_image(load_image(tmp_path / "gen" / s.image_path))
            expected_shape, expected_color = parse_prompt_attributes(s.prompt)
            assert (shape, color) == (expected_shape, expected_color)
            assert small_dataset.class_names[s.label] == expected_shape

    def test_labels_come_from_prompts(self, small_dataset, tmp_path):
        texts = ["a green triangle on a plain background"]
        filtered = filtered_from(texts)
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        samples, _ = amplify(
            filtered, OracleShapeGenerator(), vocab, target_count=2, size=32,
            seed=1, source_manifest=small_dataset, out_dir=tmp_path / "gen",
        )
        assert all(small_dataset.class_names[s.label] == "triangle" for s in samples)

    def test_dead_caption_rescheduled_exact_target(self, small_dataset, tmp_path):
        # one caption is labelable but unparsable (two colors): the generator
        # kills it and the survivors still fill the target exactly
        texts = [
            "a red circle on a plain background",
            "a red and blue circle on a plain background",
        ]
        filtered = filtered_from(texts)
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        samples, stats = amplify(
            filtered, OracleShapeGenerator(), vocab, target_count=6, size=32,
            seed=2, source_manifest=small_dataset, out_dir=tmp_path / "gen",
        )
        assert len(samples) == 6
        assert len(stats.failed_captions) == 1

    def test_parallel_matches_serial(self, small_dataset, tmp_path):
        texts = ["a red circle on a plain background", "a blue square on a plain background"]
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        s1, _ = amplify(filtered_from(texts), OracleShapeGenerator(), vocab, 8, 32,
                        seed=4, source_manifest=small_dataset,
                        out_dir=tmp_path / "g1", parallelism=1)
        s2, _ = amplify(filtered_from(texts), OracleShapeGenerator(), vocab, 8, 32,
                        seed=4, source_manifest=small_dataset,
                        out_dir=tmp_path / "g2", parallelism=4)
        assert [(s.id, s.prompt, s.seed, s.label) for s in s1] == [
            (s.id, s.prompt, s.seed, s.label) for s in s2
        ]
        for a, b in zip(s1, s2):
            assert (tmp_path / "g1" / a.image_path).read_bytes() == (
                tmp_path / "g2" / b.image_path
            ).read_bytes()


class TestAssemble:
    def _generated(self, small_dataset, tmp_path, n=10):
        texts = ["a blue circle on a plain background", "a red square on a plain background"]
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        return amplify(filtered_from(texts), OracleShapeGenerator(), vocab, n, 32,
                       seed=6, source_manifest=small_dataset, out_dir=tmp_path / "gen")

    def test_union_counts(self, small_dataset, tmp_path):
        samples, _ = self._generated(small_dataset, tmp_path)
        deb = assemble_debiased(small_dataset, samples, tmp_path / "gen", tmp_path / "deb")
        assert len(deb.manifest.samples) == len(small_dataset.samples) + 10
        train = deb.manifest.split_samples("train")
        gen_train = [s for s in train if s.id.startswith("gen-")]
        assert len(gen_train) == 10
        assert all(s.split == "train" for s in gen_train)

    def test_empty_generated_is_identity(self, small_dataset, tmp_path):
        deb = assemble_debiased(small_dataset, [], tmp_path / "gen", tmp_path / "deb")
        assert len(deb.manifest.samples) == len(small_dataset.samples)

    def test_reload_and_composition(self, small_dataset, tmp_path):
        samples, _ = self._generated(small_dataset, tmp_path)
        assemble_debiased(small_dataset, samples, tmp_path / "gen", tmp_path / "deb")
        loaded = load_manifest(tmp_path / "deb" / "manifest.jsonl")
        report = validate_composition(loaded)
        assert report.train_counts["unknown"] == 10

    def test_id_collision_rejected(self, small_dataset, tmp_path):
        samples, _ = self._generated(small_dataset, tmp_path, n=2)
        clash = samples[0].__class__(
            id=small_dataset.samples[0].id, image_path=samples[0].image_path,
            label=0, source=("x", 1), prompt="p", seed=1,
        )
        with pytest.raises(ValueError, match="collides"):
            assemble_debiased(small_dataset, [clash], tmp_path / "gen", tmp_path / "deb2")

    def test_label_out_of_range_rejected(self, small_dataset, tmp_path):
        samples, _ = self._generated(small_dataset, tmp_path, n=2)
        bad = samples[0].__class__(
            id="gen-xxxxx", image_path=samples[0].image_path,
            label=99, source=("x", 1), prompt="p", seed=1,
        )
        with pytest.raises(ValueError, match="range"):
            assemble_debiased(small_dataset, [bad], tmp_path / "gen", tmp_path / "deb3")

    def test_oversample_duplicates_candidates(self, small_dataset, tmp_path):
        samples, _ = self._generated(small_dataset, tmp_path, n=2)
        top_ids = [s.id for s in small_dataset.split_samples("train")[:3]]
        deb = assemble_debiased(
            small_dataset, samples, tmp_path / "gen", tmp_path / "deb4",
            oversample_candidates=top_ids,
        )
        dups = [s for s in deb.manifest.samples if s.id.startswith("dup-")]
        assert len(dups) == 3

    def test_associative_with_concatenation(self, small_dataset, tmp_path):
        samples, _ = self._generated(small_dataset, tmp_path, n=6)
        one = assemble_debiased(small_dataset, samples, tmp_path / "gen", tmp_path / "d_all")
        two = assemble_debiased(small_dataset, samples[:3] + samples[3:],
                                tmp_path / "gen", tmp_path / "d_cat")
        ids_one = [s.id for s in one.manifest.samples]
        ids_two = [s.id for s in two.manifest.samples]
        assert ids_one == ids_two


class TestGeneratedIO:
    def test_round_trip(self, small_dataset, tmp_path):
        texts = ["a blue circle on a plain background"]
        vocab = class_vocab_from_manifest(small_dataset, synonyms=SHAPE_SYNONYMS)
        samples, stats = amplify(filtered_from(texts), OracleShapeGenerator(), vocab, 3, 32,
                                 seed=8, source_manifest=small_dataset,
                                 out_dir=tmp_path / "gen")
        path = write_generated(samples, stats, tmp_path / "gen" / "generated.jsonl",
                               provenance={"corpus_sha256": "abc"})
        loaded, header = read_generated(path)
        assert [s.id for s in loaded] == [s.id for s in samples]
        assert header["provenance"]["corpus_sha256"] == "abc"
        assert header["generated"] == 3
