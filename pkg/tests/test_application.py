import math

import numpy as np
import pytest

from laviter.app_config import LossWeights, phase_plan
from laviter.application import LaviterTrainer, LossComponents, assist_losses, multimodal_loss
from laviter.checkpoint import load_checkpoint
from laviter.data import load_dataset
from laviter.errors import OrchestrationError
from laviter.metrics import read_embeddings
from laviter.tensor import Tensor
from laviter.vta import GammaParams

from .test_vta import oracle_matching_loss, random_batch

GAMMA = GammaParams(4.0, 5.0, 10.0)


def _trainer(config, dataset, out_dir=None):
    return LaviterTrainer(config, len(dataset.vocab), out_dir)


def _run(trainer, dataset, *phases):
    return [trainer.run_phase(phase_plan(trainer.config, name), dataset) for name in phases]


def test_multimodal_loss_is_the_weighted_sum():
    components = LossComponents(Tensor(1.0), Tensor(2.0), Tensor(3.0), Tensor(4.0), Tensor(5.0))
    weights = LossWeights(10.0, 1.0, 0.5, 0.01, 0.1)
    expected = 10.0 * 1 + 1.0 * 2 + 0.5 * 3 + 0.01 * 4 + 0.1 * 5
    assert multimodal_loss(components, weights).item() == pytest.approx(expected, abs=1e-12)


def test_multimodal_loss_skips_absent_and_zero_weight_terms():
    components = LossComponents(matching=Tensor(2.0), gan=Tensor(math.nan))
    weights = LossWeights(lambda_m=3.0, lambda_gan=0.0)
    assert multimodal_loss(components, weights).item() == pytest.approx(6.0)
    assert multimodal_loss(LossComponents(), weights).item() == 0.0


def test_assisting_losses_match_brute_force():
    rng = np.random.default_rng(21)
    for _ in range(20):
        real_images, real_texts = random_batch(rng, batch=3, dim=4)
        fake_images, fake_texts = random_batch(rng, batch=3, dim=4)
        fake_image_loss, fake_text_loss = assist_losses(real_images, real_texts, fake_images, fake_texts, GAMMA)
        assert fake_image_loss.total.item() == pytest.approx(oracle_matching_loss(fake_images, real_texts, GAMMA), abs=1e-10)
        assert fake_text_loss.total.item() == pytest.approx(oracle_matching_loss(real_images, fake_texts, GAMMA), abs=1e-10)


def test_absent_fakes_give_no_assisting_loss():
    real_images, real_texts = random_batch(np.random.default_rng(0), batch=2)
    assert assist_losses(real_images, real_texts, None, None, GAMMA) == (None, None)


def test_phase_two_needs_phase_one(tiny_config, tiny_dataset):
    trainer = _trainer(tiny_config, tiny_dataset)
    with pytest.raises(OrchestrationError):
        trainer.run_phase(phase_plan(tiny_config, "phase2-itm"), tiny_dataset)


def test_full_schedule(tiny_config, tiny_dataset):
    trainer = _trainer(tiny_config, tiny_dataset)
    results = _run(trainer, tiny_dataset, "phase1", "phase2-itm", "phase2-tim", "phase3")
    for result in results:
        assert result.steps == 2
        assert result.checkpoint.exists()
        assert (trainer.out_dir / f"{result.plan.name}_trace.csv").exists()
        assert all(np.isfinite(v) for v in result.trace.last().values())
    assert sorted(results[3].restored) == ["captioner", "gan", "image_encoder", "text_encoder"]

    fresh = _trainer(tiny_config, tiny_dataset)
    assert fresh.restore_for_evaluation() == ["captioner", "gan", "image_encoder", "text_encoder"]
    assert fresh.text_encoder.checksum() == trainer.text_encoder.checksum()

    report = fresh.evaluate(tiny_dataset)
    for key in ("r_precision_image_to_text", "r_precision_text_to_image", "r_precision", "aimcos", "aimcos_permuted", "bleu_1", "bleu_4"):
        assert key in report
        assert np.isfinite(report[key])
    assert 0.0 <= report["r_precision"] <= 1.0
    assert 0.0 <= report["bleu_1"] <= 1.0
    assert fresh.write_report(report).read_text().startswith("records = ")


def test_phase_one_moves_only_the_encoders(tiny_config, tiny_dataset):
    trainer = _trainer(tiny_config, tiny_dataset)
    before = {name: module.checksum() for name, module in trainer.modules.items()}
    blocks = [block.checksum() for block in trainer.image_encoder.blocks]
    projection = trainer.image_encoder.region_projection.checksum()
    _run(trainer, tiny_dataset, "phase1")
    assert trainer.text_encoder.checksum() != before["text_encoder"]
    assert trainer.captioner.checksum() == before["captioner"]
    assert trainer.gan.checksum() == before["gan"]
    # the default phase-1 profile freezes the convolutional backbone
    assert [block.checksum() for block in trainer.image_encoder.blocks] == blocks
    assert trainer.image_encoder.region_projection.checksum() != projection


def test_captioner_phase_leaves_encoders_alone(tiny_config, tiny_dataset):
    trainer = _trainer(tiny_config, tiny_dataset)
    _run(trainer, tiny_dataset, "phase1")
    encoders = (trainer.text_encoder.checksum(), trainer.image_encoder.checksum())
    captioner = trainer.captioner.checksum()
    result = _run(trainer, tiny_dataset, "phase2-itm")[0]
    assert (trainer.text_encoder.checksum(), trainer.image_encoder.checksum()) == encoders
    assert trainer.captioner.checksum() != captioner
    assert result.trace.last()["learning_rate"] == tiny_config.caption_lr


def test_gan_phase_leaves_encoders_alone(tiny_config, tiny_dataset):
    trainer = _trainer(tiny_config, tiny_dataset)
    _run(trainer, tiny_dataset, "phase1")
    encoders = (trainer.text_encoder.checksum(), trainer.image_encoder.checksum())
    generator = trainer.gan.generator.checksum()
    discriminators = [d.checksum() for d in trainer.gan.discriminators]
    _run(trainer, tiny_dataset, "phase2-tim")
    assert (trainer.text_encoder.checksum(), trainer.image_encoder.checksum()) == encoders
    assert trainer.gan.generator.checksum() != generator
    assert [d.checksum() for d in trainer.gan.discriminators] != discriminators


@pytest.mark.parametrize(
    "ablation, untouched",
    [
        ("vta-frozen", ["captioner", "gan"]),
        ("vta-trainable", ["captioner", "gan"]),
        ("img2txt-only", ["gan"]),
        ("txt2img-only", ["captioner"]),
    ],
)
def test_ablated_modules_are_bitwise_unchanged(tiny_config, tiny_dataset, ablation, untouched):
    trainer = _trainer(tiny_config, tiny_dataset)
    _run(trainer, tiny_dataset, "phase1", "phase2-itm", "phase2-tim")
    config = tiny_config.replace(ablation=ablation)
    joint = _trainer(config, tiny_dataset)
    joint.restore_for_evaluation()
    before = {name: joint.modules[name].checksum() for name in untouched}
    blocks = [block.checksum() for block in joint.image_encoder.blocks]
    result = _run(joint, tiny_dataset, "phase3")[0]
    assert {name: joint.modules[name].checksum() for name in untouched} == before
    if ablation == "vta-frozen":
        assert [block.checksum() for block in joint.image_encoder.blocks] == blocks
    else:
        assert [block.checksum() for block in joint.image_encoder.blocks][:2] == blocks[:2]
    trace = result.trace.last()
    if "gan" in untouched:
        assert trace["gan"] == trace["fake_image"] == trace["discriminator"] == 0.0
    if "captioner" in untouched:
        assert trace["caption"] == trace["fake_text"] == 0.0


def test_training_is_deterministic(tiny_config, tiny_dataset, tmp_path):
    traces = []
    for name in ("a", "b"):
        trainer = _trainer(tiny_config, tiny_dataset, tmp_path / name)
        _run(trainer, tiny_dataset, "phase1")
        traces.append((tmp_path / name / "phase1_trace.csv").read_bytes())
        assert (tmp_path / name / "phase1.ckpt").exists()
    assert traces[0] == traces[1]
    assert (tmp_path / "a" / "phase1.ckpt").read_bytes() == (tmp_path / "b" / "phase1.ckpt").read_bytes()


def test_evaluation_is_deterministic(tiny_config, tiny_dataset):
    trainer = _trainer(tiny_config, tiny_dataset)
    _run(trainer, tiny_dataset, "phase1")
    first = trainer.evaluate(tiny_dataset, include_captions=False)
    again = _trainer(tiny_config, tiny_dataset)
    again.restore_for_evaluation()
    assert again.evaluate(tiny_dataset, include_captions=False) == first
    assert "bleu_1" not in first


def test_analysis_exports(tiny_config, tiny_dataset, tmp_path):
    trainer = _trainer(tiny_config, tiny_dataset)
    _run(trainer, tiny_dataset, "phase1")
    header, rows = read_embeddings(trainer.export_embeddings(tiny_dataset, "test", tmp_path / "emb.csv"))
    labels = sorted({r.label for r in tiny_dataset.split("test")})
    assert header["count"] == 12 + len(labels)
    assert header["dim"] == tiny_config.d_model
    assert [m for _, m, _ in rows].count("text") == len(labels)

    names, matrix = trainer.similarity_map(tiny_dataset, "test", tmp_path / "map.csv")
    assert names == labels
    assert matrix.shape == (len(labels), len(labels))
    assert (tmp_path / "map.csv").read_text().startswith("token,")


def test_caption_and_sample_exports(tiny_config, tiny_dataset, tmp_path):
    trainer = _trainer(tiny_config, tiny_dataset)
    path = trainer.export_captions(tiny_dataset, "test", tmp_path / "captions.txt")
    lines = path.read_text().splitlines()
    assert len(lines) == 12
    assert lines[0].startswith(tiny_dataset.split("test")[0].image_id + "\t")
    samples = trainer.export_samples(tiny_dataset, "test", tmp_path / "samples", count=3)
    assert len(samples) == 3 and all(p.exists() for p in samples)


def test_gan_and_encoder_sizes_need_not_divide(tiny_config, tiny_dataset):
    config = tiny_config.replace(image_size=24)
    dataset = load_dataset(config.data_dir, config.image_encoder_config().spec, config.max_len)
    trainer = _trainer(config, dataset)
    results = _run(trainer, dataset, "phase1", "phase2-itm", "phase2-tim", "phase3")
    assert trainer.gan.resolutions == [8, 16]
    for result in results:
        assert all(np.isfinite(v) for v in result.trace.last().values())


def test_checkpoints_record_both_hashes(tiny_config, tiny_dataset):
    trainer = _trainer(tiny_config, tiny_dataset)
    result = _run(trainer, tiny_dataset, "phase1")[0]
    metadata = load_checkpoint(result.checkpoint).metadata
    assert metadata["config_hash"] == tiny_config.config_hash()
    assert metadata["run_hash"] == tiny_config.run_hash()
