import pytest

from diffkd.config import ExperimentConfig, HeadConfig, config_from_dict, load_config
from diffkd.errors import ConfigError

SAMPLE_TOML = """
dataset = "synthetic"
teacher_arch = "tinyconv"
student_arch = "tinyconv"
epochs = 3
batch_size = 16
seed = 42
num_classes = 4

[optimizer]
kind = "sgd"
lr = 0.1
momentum = 0.9
weight_decay = 5e-4

[lr_schedule]
kind = "multistep"
milestones = [2]
gamma = 0.1

[diffkd]
lambda_diff = 1.0
lambda_ae = 1.0
lambda_kd = 1.0
total_timesteps = 100
initial_timestep = 50
nfe = 5

[synthetic]
classes = 4
train_size = 64
eval_size = 32

[[heads]]
feature_tap = "backbone"
distance = "mse"

[[heads]]
feature_tap = "logits"
distance = "kl"
"""


def test_load_round_trip(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(SAMPLE_TOML)
    cfg = load_config(path)
    assert cfg.seed == 42
    assert cfg.optimizer.lr == 0.1
    assert cfg.lr_schedule.milestones == [2]
    assert cfg.diffkd.nfe == 5
    assert [h.feature_tap for h in cfg.heads] == ["backbone", "logits"]
    assert cfg.heads[1].distance == "kl"


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('dataset = "synthetic"\nbogus_key = 1\n')
    with pytest.raises(ConfigError, match="bogus_key"):
        load_config(path)


def test_unknown_dataset_rejected():
    with pytest.raises(ConfigError, match="dataset"):
        config_from_dict({"dataset": "imagenet"})


def test_heads_required_when_distilling():
    with pytest.raises(ConfigError, match="heads"):
        config_from_dict({"dataset": "synthetic", "heads": []})


def test_missing_teacher_checkpoint_rejected():
    cfg = ExperimentConfig(
        teacher_checkpoint="/nonexistent/teacher.pt",
        heads=[HeadConfig(feature_tap="backbone")],
    )
    with pytest.raises(ConfigError, match="teacher_checkpoint"):
        cfg.validate()


def test_invalid_toml_reports_path(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("dataset = [unclosed")
    with pytest.raises(ConfigError, match="broken.toml"):
        load_config(path)


def test_distillation_disabled_allows_no_heads():
    cfg = config_from_dict(
        {"dataset": "synthetic", "diffkd": {"lambda_kd": 0.0}, "heads": []}
    )
    assert cfg.heads == []
