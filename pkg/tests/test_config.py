import json
from dataclasses import fields

import numpy as np
import pytest

from laviter import app_config
from laviter.app_config import (
    LAMBDA_PRESETS,
    LaviterConfig,
    LossWeights,
    RunConfig,
    ablation_profile,
    parse_config_text,
    parse_overrides,
    phase_plan,
    setting_schema,
)
from laviter.errors import ConfigError
from laviter.image_encoder import fit_to_spec
from laviter.tensor import Tensor
from laviter.tim import resize_real


def test_defaults_are_the_desk_profile():
    config = RunConfig.load()
    assert config == RunConfig()
    assert (config.d_model, config.heads, config.max_len, config.image_size) == (256, 8, 15, 64)
    assert (config.gamma1, config.gamma2, config.gamma3) == (4.0, 5.0, 10.0)


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nseed = 3\nphase1_lr = 5e-4   # faster\ngan_word_attention = yes\nout_dir = 'runs/a'\n")
    config = RunConfig.load(path, {"seed": "9"})
    assert config.seed == 9
    assert config.phase1_lr == 5e-4
    assert config.gan_word_attention is True
    assert config.out_dir == "runs/a"


def test_text_round_trip(tmp_path):
    config = RunConfig(seed=4, lambda_gan=0.5, fake_gradient_to_generator=True)
    path = tmp_path / "run.cfg"
    path.write_text(config.to_text())
    assert RunConfig.load(path) == config


def test_full_scale_profile_and_loss_preset():
    config = RunConfig.load(overrides={"profile": "full-scale", "loss_preset": "cub-best", "lambda_gan": "0.2"})
    assert config.image_size == 136
    assert config.caption_encoder_layers == 6
    assert config.lambda_m == LAMBDA_PRESETS["cub-6"]["lambda_m"] == 5.0
    assert config.lambda_gan == 0.2


@pytest.mark.parametrize(
    "overrides",
    [
        {"colour": "red"},
        {"seed": "-1"},
        {"seed": "one"},
        {"gan_word_attention": "maybe"},
        {"ablation": "half"},
        {"profile": "laptop"},
        {"loss_preset": "coco-99"},
        {"eval_pool": "3", "eval_top_k": "3"},
        {"gan_stages": "5"},
    ],
)
def test_invalid_settings(overrides):
    with pytest.raises(ConfigError):
        RunConfig.load(overrides=overrides)


def test_config_parsing_errors():
    with pytest.raises(ConfigError):
        parse_config_text("seed 3\n")
    with pytest.raises(ConfigError):
        parse_overrides(["seed"])
    assert parse_overrides(["seed=2", "profile = full-scale"]) == {"seed": "2", "profile": "full-scale"}


def test_config_hash_tracks_architecture_only():
    base = RunConfig()
    assert base.config_hash() == base.replace(seed=5, phase1_lr=1.0).config_hash()
    assert base.config_hash() != base.replace(d_model=128).config_hash()
    assert "d_model" in base.architecture() and "seed" not in base.architecture()


def test_component_configs():
    config = RunConfig(d_model=8, heads=2, gan_stages=3)
    assert config.transformer_config().head_dim == 4
    assert config.image_encoder_config().spec.size == 64
    assert config.captioner_config(20).vocab_size == 20
    assert config.gan_config().resolutions == [16, 32, 64]
    assert config.gamma.gamma3 == 10.0


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_gan=-1.0)
    weights = RunConfig().loss_weights()
    assert weights.as_dict() == {"matching": 10.0, "fake_image": 1.0, "fake_text": 1.0, "gan": 0.01, "caption": 0.1}


def test_phase_plans():
    config = RunConfig(phase1_trainability="full", caption_decay_epoch=4)
    first = phase_plan(config, "phase1")
    assert first.train_text_encoder and first.train_image_encoder and first.trainability == "full"
    assert first.requires == ()
    captioning = phase_plan(config, "phase2-itm")
    assert captioning.train_captioner and not captioning.train_text_encoder
    assert captioning.decay_epoch == 4 and captioning.requires == ("phase1",)
    assert phase_plan(config, "phase2-tim").train_gan
    with pytest.raises(ConfigError):
        phase_plan(config, "phase4")


@pytest.mark.parametrize(
    "ablation, tim, itm, trainability",
    [
        ("full", True, True, "first-k-frozen"),
        ("vta-frozen", False, False, "frozen-backbone"),
        ("vta-trainable", False, False, "first-k-frozen"),
        ("img2txt-only", False, True, "first-k-frozen"),
        ("txt2img-only", True, False, "first-k-frozen"),
    ],
)
def test_ablation_profiles(ablation, tim, itm, trainability):
    plan, weights = ablation_profile(ablation, RunConfig())
    assert (plan.use_tim, plan.use_itm, plan.trainability) == (tim, itm, trainability)
    assert (plan.train_gan, plan.train_captioner) == (tim, itm)
    assert (weights.lambda_gan > 0, weights.lambda_fake_image > 0) == (tim, tim)
    assert (weights.lambda_caption > 0, weights.lambda_fake_text > 0) == (itm, itm)
    assert weights.lambda_m == 10.0
    assert ("phase2-tim" in plan.requires, "phase2-itm" in plan.requires) == (tim, itm)
    assert plan.requires[0] == "phase1"


def test_unknown_ablation():
    with pytest.raises(ConfigError):
        ablation_profile("none", RunConfig())


def test_schema():
    schema = LaviterConfig.to_schema()
    titles = {prop["title"] for prop in schema["properties"].values()}
    assert {"Seed", "Ablation", "Feature Width", "Phase 1 Learning Rate"} <= titles
    assert {f.metadata["title"] for f in fields(RunConfig)} <= titles
    assert json.dumps(schema)
    assert callable(app_config.export)


def test_fields_take_their_rules_from_the_schema():
    assert setting_schema("ablation")["enum"] == ["full", "vta-frozen", "vta-trainable", "img2txt-only", "txt2img-only"]
    assert setting_schema("gan_stages")["maximum"] == 4
    assert setting_schema("d_model")["default"] == RunConfig().d_model == 256
    for f in fields(RunConfig):
        assert setting_schema(f.name)["default"] == f.default
    with pytest.raises(ConfigError):
        setting_schema("colour")


def test_run_hash_covers_every_setting():
    base = RunConfig()
    assert base.run_hash() == RunConfig().run_hash()
    assert base.run_hash() != base.replace(seed=5).run_hash()
    assert base.run_hash() != base.replace(phase1_lr=2e-4).run_hash()


def test_phase_one_learning_rate_per_profile():
    assert RunConfig.load().phase1_lr == 1e-3
    assert RunConfig.load(overrides={"profile": "full-scale"}).phase1_lr == 2e-4


def test_full_scale_shapes_fit_together():
    config = RunConfig.load(overrides={"profile": "full-scale"})
    spec = config.image_encoder_config().spec
    resolutions = config.gan_config().resolutions
    assert resolutions == [64, 128, 256]
    assert spec.size // 8 == 17
    generated = Tensor(np.zeros((1, 3, resolutions[-1], resolutions[-1])))
    assert fit_to_spec(generated, spec).shape == (1, *spec.shape)
    real = np.zeros((1, *spec.shape))
    for resolution in resolutions:
        assert resize_real(real, resolution).shape == (1, 3, resolution, resolution)
