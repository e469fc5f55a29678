"""Training loop determinism, loss routing, metrics, and the ablation switch."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from autoretouch.dataforge import Manifest, Sample, SynthParams, build_dataset, synth_corpus
from autoretouch.imaging import Placement
from autoretouch.trainer import (
    MetricsReport,
    TrainConfig,
    TrainingDivergedError,
    ablate_attention,
    evaluate,
    predict_split,
    train,
)
from autoretouch.verifier import (
    CheckpointMismatchError,
    VerifierNet,
    load_checkpoint,
    save_checkpoint,
)
from conftest import tiny_train_kwargs


def tiny_cfg(**overrides):
    base = dict(
        epochs=2,
        patience=50,
        seed=3,
        batch_size=20,
        **tiny_train_kwargs(),
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestTrain:
    def test_loss_decreases_on_small_run(self, tiny_manifest, tiny_corpus):
        model, report = train(tiny_manifest, tiny_cfg(epochs=8), triples=tiny_corpus)
        assert report.rows[-1]["train_loss"] < report.first_batch_loss
        assert len(report.rows) == 8

    def test_same_seed_identical_metrics(self, tiny_manifest, tiny_corpus):
        _, a = train(tiny_manifest, tiny_cfg(), triples=tiny_corpus)
        _, b = train(tiny_manifest, tiny_cfg(), triples=tiny_corpus)
        assert a.rows == b.rows
        assert a.first_batch_loss == b.first_batch_loss
        assert a.accuracy == b.accuracy and a.rmse == b.rmse

    def test_same_seed_identical_parameters(self, tiny_manifest, tiny_corpus):
        m1, _ = train(tiny_manifest, tiny_cfg(), triples=tiny_corpus)
        m2, _ = train(tiny_manifest, tiny_cfg(), triples=tiny_corpus)
        for (n1, p1), (n2, p2) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2)

    def test_different_seed_differs(self, tiny_manifest, tiny_corpus):
        _, a = train(tiny_manifest, tiny_cfg(seed=3), triples=tiny_corpus)
        _, b = train(tiny_manifest, tiny_cfg(seed=4), triples=tiny_corpus)
        assert a.rows != b.rows

    def test_empty_train_split_rejected(self, tiny_corpus):
        manifest = build_dataset(list(tiny_corpus.values()), test_fraction=0.2, seed=1)
        only_test = Manifest(
            samples=[s for s in manifest.samples if s.split == "test"],
            seed=1,
            test_fraction=0.2,
        )
        with pytest.raises(ValueError, match="train"):
            train(only_test, tiny_cfg(), triples=tiny_corpus)

    def test_non_finite_loss_aborts(self, tiny_corpus):
        manifest = build_dataset(list(tiny_corpus.values()), seed=1)
        poisoned = []
        for s in manifest.samples:
            if s.split == "train" and not poisoned:
                poisoned.append(
                    dataclasses.replace(s, spatial_target=float("nan"))
                )
            else:
                poisoned.append(s)
        bad = Manifest(samples=poisoned, seed=1, test_fraction=0.2)
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            train(bad, tiny_cfg(batch_size=1000), triples=tiny_corpus)

    def test_training_does_not_mutate_inputs(self, tiny_manifest, tiny_corpus):
        samples_before = list(tiny_manifest.samples)
        pixel_hash_before = {
            k: (t.bg.data.copy(), t.fg.rgb.data.copy(), t.parsing.labels.copy())
            for k, t in tiny_corpus.items()
        }
        train(tiny_manifest, tiny_cfg(), triples=tiny_corpus)
        assert tiny_manifest.samples == samples_before
        for k, t in tiny_corpus.items():
            bg, fg, labels = pixel_hash_before[k]
            assert np.array_equal(t.bg.data, bg)
            assert np.array_equal(t.fg.rgb.data, fg)
            assert np.array_equal(t.parsing.labels, labels)


class TestLossRouting:
    """One optimizer step only touches parameters its loss term can reach."""

    def _initial_state(self, cfg):
        torch.manual_seed(cfg.seed)
        return VerifierNet(cfg.verifier_config()).state_dict()

    def test_spatial_only_run_freezes_content_head(self, tiny_manifest, tiny_corpus):
        cfg = tiny_cfg(epochs=1, lam=0.0)
        init = self._initial_state(cfg)
        model, _ = train(tiny_manifest, cfg, triples=tiny_corpus)
        after = model.state_dict()
        assert torch.equal(after["content_head.weight"], init["content_head.weight"])
        assert torch.equal(after["content_head.bias"], init["content_head.bias"])
        assert torch.equal(after["att_content_pair.weight"], init["att_content_pair.weight"])
        assert torch.equal(after["att_content_shared.weight"], init["att_content_shared.weight"])
        assert not torch.equal(after["spatial_head.weight"], init["spatial_head.weight"])

    def test_content_only_run_freezes_spatial_head(self, tiny_manifest, tiny_corpus):
        cfg = tiny_cfg(epochs=1, lam=1.0)
        init = self._initial_state(cfg)
        model, _ = train(tiny_manifest, cfg, triples=tiny_corpus)
        after = model.state_dict()
        assert torch.equal(after["spatial_head.weight"], init["spatial_head.weight"])
        assert torch.equal(after["spatial_head.bias"], init["spatial_head.bias"])
        assert torch.equal(after["att_spatial_pair.weight"], init["att_spatial_pair.weight"])
        assert torch.equal(after["att_spatial_shared.weight"], init["att_spatial_shared.weight"])
        assert not torch.equal(after["content_head.weight"], init["content_head.weight"])
        # encoder is reachable from the content loss and must move
        assert not torch.equal(
            after["encoder.blocks.0.weight"], init["encoder.blocks.0.weight"]
        )

    def test_content_only_rmse_stays_near_untrained(self, tiny_manifest, tiny_corpus):
        cfg = tiny_cfg(epochs=4, lam=1.0, patience=50)
        torch.manual_seed(cfg.seed)
        untrained = VerifierNet(cfg.verifier_config())
        before = evaluate(untrained, tiny_manifest, "test", triples=tiny_corpus)
        model, report = train(tiny_manifest, cfg, triples=tiny_corpus)
        # the spatial head never receives gradient; the regression barely moves
        # while the classification objective keeps improving
        assert abs(report.rmse - before.rmse) < 0.1
        assert report.rows[-1]["train_loss"] < report.first_batch_loss


class TestEvaluate:
    def test_metrics_match_scripted_recomputation(self, tiny_manifest, tiny_corpus, tiny_model):
        result = evaluate(tiny_model, tiny_manifest, "test", triples=tiny_corpus)
        yc, ys, delta, target, _ = predict_split(
            tiny_model, tiny_manifest, "test", triples=tiny_corpus
        )
        accuracy = float(np.mean((yc > 0.5) == delta.astype(bool)))
        rmse = float(np.sqrt(np.mean((ys - target) ** 2)))
        assert result.accuracy == pytest.approx(accuracy, abs=1e-12)
        assert result.rmse == pytest.approx(rmse, abs=1e-7)
        assert result.count == len(yc)

    def test_exact_half_probability_counts_as_false(self, tiny_manifest, tiny_corpus):
        torch.manual_seed(0)
        cfg = tiny_cfg()
        model = VerifierNet(cfg.verifier_config())
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        result = evaluate(model, tiny_manifest, "test", triples=tiny_corpus)
        samples = tiny_manifest.split_samples("test")
        false_fraction = sum(1 for s in samples if not s.content_label) / len(samples)
        assert result.accuracy == pytest.approx(false_fraction, abs=1e-12)

    def test_mask_excludes_content_negatives_from_rmse(self, tiny_manifest, tiny_corpus, tiny_model):
        masked = evaluate(
            tiny_model, tiny_manifest, "test", triples=tiny_corpus, mask_content_negatives=True
        )
        yc, ys, delta, target, is_cn = predict_split(
            tiny_model, tiny_manifest, "test", triples=tiny_corpus
        )
        keep = ~is_cn.astype(bool)
        rmse = float(np.sqrt(np.mean((ys[keep] - target[keep]) ** 2)))
        assert masked.rmse == pytest.approx(rmse, abs=1e-7)

    def test_unknown_split_rejected(self, tiny_manifest, tiny_corpus, tiny_model):
        with pytest.raises(ValueError):
            evaluate(tiny_model, tiny_manifest, "validation", triples=tiny_corpus)


class TestAblation:
    def test_switch_toggles_flag_only(self):
        cfg = tiny_cfg()
        ablated = ablate_attention(cfg)
        assert ablated.use_attention is False
        assert dataclasses.replace(ablated, use_attention=True) == cfg

    def test_fused_length_shrinks(self):
        cfg = ablate_attention(tiny_cfg())
        assert cfg.verifier_config().fused_length == 3 * cfg.d_flat

    def test_both_configs_train_under_same_seed(self, tiny_manifest, tiny_corpus):
        base_cfg = tiny_cfg(epochs=1)
        _, base_report = train(tiny_manifest, base_cfg, triples=tiny_corpus)
        _, ablated_report = train(
            tiny_manifest, ablate_attention(base_cfg), triples=tiny_corpus
        )
        assert math.isfinite(base_report.rows[-1]["train_loss"])
        assert math.isfinite(ablated_report.rows[-1]["train_loss"])

    def test_checkpoint_records_flag_and_refuses_mismatch(
        self, tiny_manifest, tiny_corpus, tmp_path
    ):
        cfg = ablate_attention(tiny_cfg(epochs=1))
        model, _ = train(tiny_manifest, cfg, triples=tiny_corpus)
        save_checkpoint(model, tmp_path / "ablated.ckpt", seed=cfg.seed)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(tmp_path / "ablated.ckpt", expect={"use_attention": True})
        model2, _ = load_checkpoint(tmp_path / "ablated.ckpt", expect={"use_attention": False})
        assert model2.cfg.use_attention is False


class TestMetricsReport:
    def test_csv_layout(self, tmp_path):
        report = MetricsReport(
            accuracy=0.9,
            rmse=0.1,
            first_batch_loss=1.0,
            rows=[
                {"epoch": 0, "train_loss": 1.0, "test_loss": 0.9, "accuracy": 0.5, "rmse": 0.4},
                {"epoch": 1, "train_loss": 0.8, "test_loss": 0.7, "accuracy": 0.6, "rmse": 0.3},
            ],
        )
        path = tmp_path / "metrics.csv"
        report.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,test_loss,accuracy,rmse"
        assert len(lines) == 3
        assert lines[1].startswith("0,1.0")


class TestConfigValidation:
    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lam=1.2)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
