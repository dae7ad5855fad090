"""
Learning outcomes on the desk profile.

These train on the full 512/128 synthetic corpus with the default settings and take
a long time on one core, so they are marked ``slow`` and deselected by default.
Run them with ``uv run pytest -m slow``.
"""

import numpy as np
import pytest

from laviter.app_config import RunConfig, phase_plan
from laviter.application import LaviterTrainer
from laviter.data import CorpusSpec, gen_synthetic_corpus, load_dataset

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
ABLATION_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    config = RunConfig()
    root = tmp_path_factory.mktemp("desk-data")
    spec = CorpusSpec(
        train=config.corpus_train,
        test=config.corpus_test,
        captions_per_image=config.captions_per_image,
        max_objects=config.max_objects,
        image_size=config.image_size,
        seed=config.seed,
    )
    gen_synthetic_corpus(spec, root)
    return load_dataset(root, config.image_encoder_config().spec, config.max_len)


def _trainer(dataset, out_dir, **changes):
    config = RunConfig(out_dir=str(out_dir), **changes)
    return LaviterTrainer(config, len(dataset.vocab), out_dir)


@pytest.fixture(scope="module")
def aligned(desk_dataset, tmp_path_factory):
    """One phase-1 trainer per seed."""
    trainers = []
    for seed in SEEDS:
        trainer = _trainer(desk_dataset, tmp_path_factory.mktemp(f"vta-{seed}"), seed=seed)
        trainer.run_phase(phase_plan(trainer.config, "phase1"), desk_dataset)
        trainers.append(trainer)
    return trainers


def test_alignment_retrieves_and_matches_attributes(aligned, desk_dataset):
    reports = [trainer.evaluate(desk_dataset, include_captions=False) for trainer in aligned]
    assert all(report["records"] >= 100 for report in reports)
    assert np.mean([report["r_precision"] for report in reports]) >= 0.50
    assert np.mean([report["aimcos_gap"] for report in reports]) >= 0.10


def test_similarity_map_is_diagonal(aligned, desk_dataset):
    for trainer in aligned:
        labels, matrix = trainer.similarity_map(desk_dataset, "test")
        assert len(labels) == 12
        dominant = sum(
            all(matrix[i, i] > matrix[i, j] for j in range(len(labels)) if j != i) for i in range(len(labels))
        )
        assert dominant >= 10


def test_captioner_learns_the_templates(aligned, desk_dataset):
    trainer = aligned[0]
    trainer.run_phase(phase_plan(trainer.config, "phase2-itm"), desk_dataset)
    assert trainer.evaluate(desk_dataset)["bleu_1"] >= 0.50


def test_joint_training_keeps_up_with_the_trainable_baseline(desk_dataset, tmp_path_factory):
    scores = {"full": [], "vta-trainable": []}
    for seed in ABLATION_SEEDS:
        out_dir = tmp_path_factory.mktemp(f"joint-{seed}")
        pretrain = _trainer(desk_dataset, out_dir, seed=seed)
        for name in ("phase1", "phase2-itm", "phase2-tim"):
            pretrain.run_phase(phase_plan(pretrain.config, name), desk_dataset)
        # each ablation restores the shared pretrained checkpoints and is scored before the next overwrites phase3
        for ablation in scores:
            joint = _trainer(desk_dataset, out_dir, seed=seed, ablation=ablation)
            joint.run_phase(phase_plan(joint.config, "phase3"), desk_dataset)
            scores[ablation].append(joint.evaluate(desk_dataset, include_captions=False)["r_precision"])
    assert np.mean(scores["full"]) >= np.mean(scores["vta-trainable"]) - 0.02
