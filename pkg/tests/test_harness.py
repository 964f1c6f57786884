import dataclasses
import json

import pytest
import torch

from diffkd.config import DiffKDConfig
from diffkd.core import LossBundle
from diffkd.data import DatasetSplit, load_dataset
from diffkd.errors import CheckpointError, ConfigError, TrainingDiverged
from diffkd.harness import (
    MetricRecord,
    check_finite,
    evaluate,
    evaluate_model,
    load_model_checkpoint,
    save_model_checkpoint,
    train,
    train_teacher,
    weights_hash,
)
from diffkd.models import build_model
from conftest import tiny_experiment_config


@pytest.fixture(scope="module")
def teacher_checkpoint(tmp_path_factory):
    """One tiny teacher shared by every harness test."""
    path = tmp_path_factory.mktemp("teacher") / "teacher.pt"
    train_teacher(tiny_experiment_config(), path)
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, teacher_checkpoint):
    cfg = tiny_experiment_config(teacher_checkpoint=teacher_checkpoint)
    run_dir = tmp_path_factory.mktemp("run")
    result = train(cfg, run_dir=run_dir)
    return cfg, result


def _read_records(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class TestTrainingLoop:
    def test_metrics_log_structure(self, tiny_run):
        _, result = tiny_run
        records = _read_records(result.metrics_path)
        assert records, "no metric records written"
        steps = [r["step"] for r in records]
        assert steps == sorted(steps)
        assert set(records[0]["losses"]) == {"task", "diff", "ae", "diffkd", "total"}

    def test_logged_total_matches_weighted_sum(self, tiny_run):
        cfg, result = tiny_run
        for rec in _read_records(result.metrics_path):
            losses = rec["losses"]
            expected = (
                losses["task"]
                + cfg.diffkd.lambda_diff * losses["diff"]
                + cfg.diffkd.lambda_ae * losses["ae"]
                + cfg.diffkd.lambda_kd * losses["diffkd"]
            )
            assert losses["total"] == pytest.approx(expected, rel=1e-6)

    def test_gamma_stats_are_logged(self, tiny_run):
        _, result = tiny_run
        records = [r for r in _read_records(result.metrics_path) if r["gamma_stats"]]
        assert records
        stats = records[0]["gamma_stats"]
        assert 0.0 < stats["min"] <= stats["mean"] <= stats["max"] < 1.0
        assert len(stats["buckets"]) == 10

    def test_final_record_has_eval(self, tiny_run):
        _, result = tiny_run
        rec = result.final_record
        assert rec.eval is not None
        assert rec.eval["top5"] >= rec.eval["top1"]

    def test_teacher_unchanged(self, tiny_run, teacher_checkpoint):
        _, result = tiny_run
        teacher, _ = load_model_checkpoint(teacher_checkpoint)
        assert weights_hash(teacher) == result.teacher_hash

    def test_checkpoint_contains_full_state(self, tiny_run):
        _, result = tiny_run
        payload = torch.load(result.checkpoint_path, weights_only=False)
        for key in ("format_version", "config", "student_state", "state_state",
                    "optimizer_state", "rng", "epoch", "step"):
            assert key in payload, key


class TestAblationIdentity:
    def test_all_zero_weights_reduce_to_plain_task_training(
        self, tmp_path, teacher_checkpoint
    ):
        zeroed = DiffKDConfig(
            lambda_diff=0.0, lambda_ae=0.0, lambda_kd=0.0,
            total_timesteps=50, initial_timestep=25, nfe=2,
        )
        with_heads = tiny_experiment_config(
            teacher_checkpoint=teacher_checkpoint, diffkd=zeroed
        )
        plain = tiny_experiment_config(heads=[], diffkd=zeroed)
        result_a = train(with_heads, run_dir=tmp_path / "with_heads")
        result_b = train(plain, run_dir=tmp_path / "plain", teacher=None)
        assert result_a.final_record.eval == result_b.final_record.eval
        losses_a = [r["losses"]["task"] for r in _read_records(result_a.metrics_path)]
        losses_b = [r["losses"]["task"] for r in _read_records(result_b.metrics_path)]
        assert losses_a == losses_b


class TestResume:
    def test_resumed_run_matches_uninterrupted_run(self, tmp_path, teacher_checkpoint):
        cfg_full = tiny_experiment_config(
            teacher_checkpoint=teacher_checkpoint, epochs=4
        )
        full = train(cfg_full, run_dir=tmp_path / "full")

        cfg_half = tiny_experiment_config(
            teacher_checkpoint=teacher_checkpoint, epochs=2
        )
        half_dir = tmp_path / "halves"
        train(cfg_half, run_dir=half_dir)
        cfg_rest = tiny_experiment_config(
            teacher_checkpoint=teacher_checkpoint, epochs=4
        )
        resumed = train(
            cfg_rest, run_dir=half_dir, resume_from=half_dir / "checkpoint.pt"
        )

        full_records = _read_records(full.metrics_path)
        stitched_records = _read_records(resumed.metrics_path)
        assert [r["losses"] for r in full_records] == [
            r["losses"] for r in stitched_records
        ]


class TestDivergenceGuard:
    def test_non_finite_loss_aborts_with_diagnostic(self, tmp_path):
        cfg = DiffKDConfig()
        nan = torch.tensor(float("nan"))
        bundle = LossBundle.build(nan, nan, nan, nan, cfg)
        log = tmp_path / "metrics.ndjson"
        with pytest.raises(TrainingDiverged, match="step 7"):
            check_finite(bundle, 7, log)
        diagnostic = json.loads(log.read_text().strip())
        assert diagnostic["diverged_at_step"] == 7


class TestEvaluate:
    def test_constant_predictor_scores_chance_on_balanced_set(self, tmp_path):
        model = build_model("tinyconv", 10)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.head.bias[0] = 1.0  # always predicts class 0
        per_class = 20
        labels = torch.arange(10).repeat_interleave(per_class)
        images = torch.randn(
            len(labels), 3, 16, 16, generator=torch.Generator().manual_seed(0)
        )
        split = DatasetSplit(images, labels, 10)
        metrics = evaluate_model(model, split)
        assert metrics["top1"] == pytest.approx(10.0)
        assert metrics["top5"] >= metrics["top1"]

    def test_reevaluation_reproduces_recorded_accuracy(self, teacher_checkpoint):
        teacher, payload = load_model_checkpoint(teacher_checkpoint)
        _, eval_split = load_dataset(tiny_experiment_config())
        again = evaluate_model(teacher, eval_split)
        assert again["top1"] == pytest.approx(payload["eval"]["top1"], abs=0.01)
        assert again["top5"] == pytest.approx(payload["eval"]["top5"], abs=0.01)

    def test_evaluate_experiment_checkpoint(self, tiny_run):
        _, result = tiny_run
        metrics = evaluate(result.checkpoint_path)
        assert metrics == result.final_record.eval

    def test_missing_checkpoint(self):
        with pytest.raises(CheckpointError, match="not found"):
            evaluate("/nonexistent/checkpoint.pt")

    def test_architecture_mismatch_detected(self, tmp_path, teacher_checkpoint):
        payload = torch.load(teacher_checkpoint, weights_only=False)
        payload["arch"] = "resnet20"
        bad = tmp_path / "bad.pt"
        torch.save(payload, bad)
        with pytest.raises(CheckpointError, match="mismatch"):
            load_model_checkpoint(bad)


class TestTeacherProvisioning:
    def test_auto_training_when_no_checkpoint_is_named(self, tmp_path):
        cfg = tiny_experiment_config(epochs=1)
        cfg.synthetic = dataclasses.replace(cfg.synthetic, train_size=64)
        result = train(cfg, run_dir=tmp_path / "auto")
        assert (tmp_path / "auto" / "teacher.pt").exists()
        assert result.teacher_hash is not None

    def test_mismatched_teacher_arch_rejected(self, tmp_path, teacher_checkpoint):
        cfg = tiny_experiment_config(
            teacher_checkpoint=teacher_checkpoint, teacher_arch="resnet20"
        )
        with pytest.raises(CheckpointError, match="does not match"):
            train(cfg, run_dir=tmp_path / "mismatch")


def test_metric_record_round_trip():
    record = MetricRecord(
        step=5, epoch=1,
        losses={"task": 1.0, "diff": 0.5, "ae": 0.0, "diffkd": 0.25, "total": 1.75},
        gamma_stats={"mean": 0.8, "min": 0.5, "max": 0.9, "buckets": [0] * 10},
        eval={"top1": 50.0, "top5": 90.0},
    )
    assert MetricRecord.from_json(record.to_json()) == record
