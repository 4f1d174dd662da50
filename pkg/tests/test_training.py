import math

import pytest
import torch

from debiaskit.datasets import SynthShapesSpec, synth_generate
from debiaskit.models import TinyConvNet, build_model, load_checkpoint, save_checkpoint
from debiaskit.training import (
    ClassifierConfig,
    TrainedModel,
    per_sample_losses,
    train,
)


def desk_config(**overrides):
    cfg = ClassifierConfig(
        architecture_id="tiny-cnn", input_size=32, epochs=3, batch_size=64,
        base_lr=0.02, loss_mode="CE", seed=1,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


class TestConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError, match="epochs"):
            desk_config(epochs=0).validate()

    def test_bad_q_rejected(self):
        with pytest.raises(ValueError, match="q"):
            desk_config(q=0.0).validate()

    def test_bad_decay_rejected(self):
        cfg = desk_config()
        cfg.lr_decay.factor = 0.0
        with pytest.raises(ValueError, match="decay"):
            cfg.validate()

    def test_unknown_augmentation_rejected(self):
        with pytest.raises(ValueError, match="augmentation"):
            desk_config(augmentations=["cutmix"]).validate()

    def test_round_trip(self):
        cfg = desk_config(loss_mode="GCE", q=0.5, augmentations=["horizontal_flip"])
        again = ClassifierConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()


class TestModels:
    def test_checkpoint_round_trip_identical_predictions(self, tmp_path):
        model = build_model("tiny-cnn", 4, seed=3)
        model.eval()
        x = torch.randn(5, 3, 32, 32)
        before = model(x)
        save_checkpoint(model, "tiny-cnn", 4, tmp_path / "m.pt", extra={"config": desk_config().to_dict()})
        loaded, payload = load_checkpoint(tmp_path / "m.pt")
        after = loaded(x)
        assert torch.equal(before, after)
        assert payload["architecture_id"] == "tiny-cnn"

    def test_unknown_architecture(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            build_model("vgg-999", 4)

    def test_features_width(self):
        model = TinyConvNet(4)
        out = model.features(torch.randn(2, 3, 32, 32))
        assert out.shape == (2, 64)

    def test_resnet18_feature_width(self):
        from debiaskit.models import ResNet18Classifier

        model = ResNet18Classifier(10, pretrained=False)
        assert model.feature_width == 512
        out = model.features(torch.randn(1, 3, 64, 64))
        assert out.shape == (1, 512)


class TestTrain:
    def test_history_matches_epochs_and_decay(self, medium_dataset, tmp_path):
        cfg = desk_config(epochs=3)
        cfg.lr_decay.factor = 0.5
        cfg.lr_decay.every_n_epochs = 2
        model = train(medium_dataset, cfg, tmp_path / "m.pt", log_path=tmp_path / "log.jsonl")
        assert len(model.history) == 3
        assert [h.lr for h in model.history] == [0.02, 0.02, 0.01]
        log_lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(log_lines) == 3

    def test_biased_training_directional(self, medium_dataset, tmp_path):
        # GCE on a 5%-conflict dataset: aligned train accuracy beats conflict
        from debiaskit.evaluation import evaluate

        cfg = desk_config(epochs=5, loss_mode="GCE", q=0.7, seed=11)
        model = train(medium_dataset, cfg, tmp_path / "b.pt", role_tag="biased")
        metrics = evaluate(model, medium_dataset, split="train")
        assert metrics.aligned_acc > metrics.conflict_acc

    def test_balanced_dataset_symmetric(self, tmp_path):
        # CE on a 50% ratio dataset: group accuracies within 5 points
        from debiaskit.evaluation import evaluate

        spec = SynthShapesSpec(train_count=400, test_count=80, conflict_ratio=0.5, seed=21)
        manifest = synth_generate(spec, tmp_path / "ds")
        cfg = desk_config(epochs=12, seed=2)
        model = train(manifest, cfg, tmp_path / "v.pt")
        metrics = evaluate(model, manifest, split="train")
        assert abs(metrics.aligned_acc - metrics.conflict_acc) <= 0.05

    def test_checkpoint_reload_reproduces_losses_bitwise(self, medium_dataset, tmp_path):
        cfg = desk_config(epochs=2)
        model = train(medium_dataset, cfg, tmp_path / "m.pt")
        reloaded = TrainedModel.from_checkpoint(tmp_path / "m.pt")
        a = per_sample_losses(model, medium_dataset)
        b = per_sample_losses(reloaded, medium_dataset)
        assert a == b

    def test_image_decode_failure_names_sample(self, tmp_path):
        from debiaskit.datasets import SynthShapesSpec, synth_generate
        from debiaskit.training import ImageDecodeError

        spec = SynthShapesSpec(train_count=16, test_count=8, conflict_ratio=0.1, seed=2)
        manifest = synth_generate(spec, tmp_path / "ds")
        victim = manifest.split_samples("train")[3]
        manifest.resolve_image(victim).write_bytes(b"not a png")
        with pytest.raises(ImageDecodeError, match=victim.id):
            train(manifest, desk_config(epochs=1), tmp_path / "m.pt")

    def test_empty_train_split_rejected(self, medium_dataset, tmp_path):
        import dataclasses

        test_only = dataclasses.replace(medium_dataset)
        test_only.samples = medium_dataset.split_samples("test")
        with pytest.raises(ValueError, match="train"):
            train(test_only, desk_config(), tmp_path / "m.pt")

    def test_deterministic_same_seed_same_weights(self, medium_dataset, tmp_path):
        cfg = desk_config(epochs=2, seed=5)
        m1 = train(medium_dataset, cfg, tmp_path / "a.pt", deterministic=True)
        m2 = train(medium_dataset, cfg, tmp_path / "b.pt", deterministic=True)
        for p1, p2 in zip(m1.module.parameters(), m2.module.parameters()):
            assert torch.equal(p1, p2)

    def test_augmentations_run(self, medium_dataset, tmp_path):
        cfg = desk_config(epochs=1, augmentations=["random_crop", "horizontal_flip"])
        model = train(medium_dataset, cfg, tmp_path / "m.pt")
        assert len(model.history) == 1


class TestPerSampleLosses:
    def test_uniform_model_ce_is_log_n(self, medium_dataset, tmp_path):
        cfg = desk_config(epochs=1)
        model = train(medium_dataset, cfg, tmp_path / "m.pt")
        # zero the head so logits are uniform regardless of input
        with torch.no_grad():
            model.module.head.weight.zero_()
            model.module.head.bias.zero_()
        losses = per_sample_losses(model, medium_dataset, loss_mode="CE")
        assert all(abs(v - math.log(4)) < 1e-6 for _, v in losses)

    def test_uniform_model_gce_oracle_value(self, medium_dataset, tmp_path):
        # frozen oracle: (1 - 0.25**0.7) / 0.7 (sympy, 30 digits)
        expected = 0.887244083389143542018835785248
        cfg = desk_config(epochs=1)
        model = train(medium_dataset, cfg, tmp_path / "m.pt")
        with torch.no_grad():
            model.module.head.weight.zero_()
            model.module.head.bias.zero_()
        losses = per_sample_losses(model, medium_dataset, loss_mode="GCE", q=0.7)
        assert all(abs(v - expected) < 1e-6 for _, v in losses)

    def test_one_entry_per_train_sample(self, medium_dataset, tmp_path):
        model = train(medium_dataset, desk_config(epochs=1), tmp_path / "m.pt")
        losses = per_sample_losses(model, medium_dataset)
        train_ids = [s.id for s in medium_dataset.split_samples("train")]
        assert [sid for sid, _ in losses] == train_ids

    def test_scoring_twice_identical(self, medium_dataset, tmp_path):
        model = train(medium_dataset, desk_config(epochs=1), tmp_path / "m.pt")
        assert per_sample_losses(model, medium_dataset) == per_sample_losses(
            model, medium_dataset
        )
