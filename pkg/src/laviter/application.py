import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .app_config import PHASES, LossWeights, PhasePlan, RunConfig, ablation_profile
from .app_tags import LossTrace
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, DatasetRecord
from .errors import OrchestrationError
from .image_encoder import EncodedImage, ImageEncoder, fit_to_spec, save_image
from .itm import Captioner
from .metrics import (
    AttributeSet,
    aimcos,
    corpus_bleu,
    export_embeddings,
    permuted_attribute_sets,
    r_precision,
    similarity_map,
    write_similarity_csv,
)
from .nn import Module, frozen
from .optim import Adam, step_decay
from .tensor import Tensor, no_grad
from .text_encoder import UNK_ID, EncodedText, TextEncoder, pad_batch, tokenize
from .tim import GanCascade, sample_noise, tim_total_loss
from .utils import atomic_write_text
from .vta import GammaParams, MatchBatch, MatchingLoss, retrieval_scores, total_matching_loss

log = logging.getLogger(__name__)

TRACE_COLUMNS = {
    "phase1": ["total", "sentence_ti", "sentence_it", "word_ti", "word_it"],
    "phase2-itm": ["caption", "learning_rate"],
    "phase2-tim": ["tim", "generator", "fake_image", "discriminator"],
    "phase3": ["total", "matching", "fake_image", "fake_text", "gan", "caption", "discriminator"],
}
PHASE_MODULES = {
    "phase1": ("text_encoder", "image_encoder"),
    "phase2-itm": ("captioner",),
    "phase2-tim": ("gan",),
}
ENCODE_CHUNK = 32


def assist_losses(
    real_images: EncodedImage,
    real_texts: EncodedText,
    fake_images: EncodedImage | None,
    fake_texts: EncodedText | None,
    gamma: GammaParams,
) -> tuple[MatchingLoss | None, MatchingLoss | None]:
    """Matching losses on (fake image, real text) and (real image, fake text) pairs."""
    fake_image_loss = None
    if fake_images is not None:
        fake_image_loss = total_matching_loss(MatchBatch(fake_images, real_texts), gamma)
    fake_text_loss = None
    if fake_texts is not None:
        fake_text_loss = total_matching_loss(MatchBatch(real_images, fake_texts), gamma)
    return fake_image_loss, fake_text_loss


@dataclass
class LossComponents:
    matching: Tensor | None = None
    fake_image: Tensor | None = None
    fake_text: Tensor | None = None
    gan: Tensor | None = None
    caption: Tensor | None = None

    def values(self) -> dict[str, float]:
        return {
            name: (term.item() if term is not None else 0.0)
            for name, term in (
                ("matching", self.matching),
                ("fake_image", self.fake_image),
                ("fake_text", self.fake_text),
                ("gan", self.gan),
                ("caption", self.caption),
            )
        }


def multimodal_loss(components: LossComponents, weights: LossWeights) -> Tensor:
    """λ_m·L_m + λ_Î·L_m^I + λ_T̂·L_m^T + λ_G·L_G + λ_C·L_C over the present terms."""
    terms = (
        (weights.lambda_m, components.matching),
        (weights.lambda_fake_image, components.fake_image),
        (weights.lambda_fake_text, components.fake_text),
        (weights.lambda_gan, components.gan),
        (weights.lambda_caption, components.caption),
    )
    total = None
    for weight, term in terms:
        if term is None or weight == 0:
            continue
        weighted = term * weight
        total = weighted if total is None else total + weighted
    return total if total is not None else Tensor(0.0)


@dataclass
class PhaseResult:
    plan: PhasePlan
    steps: int
    checkpoint: Path
    trace: LossTrace
    restored: list[str] = field(default_factory=list)


class LaviterTrainer:
    """Owns the four model components and runs training phases and evaluation over them."""

    def __init__(self, config: RunConfig, vocab_size: int, out_dir: Path | str | None = None):
        self.config = config
        self.vocab_size = vocab_size
        self.out_dir = Path(out_dir if out_dir is not None else config.out_dir)
        rng = np.random.default_rng(config.seed)
        self.text_encoder = TextEncoder(config.transformer_config(), vocab_size, rng)
        self.image_encoder = ImageEncoder(config.image_encoder_config(), rng)
        self.captioner = Captioner(config.captioner_config(vocab_size), rng)
        self.gan = GanCascade(config.gan_config(), rng)

    @property
    def modules(self) -> dict[str, Module]:
        return {
            "text_encoder": self.text_encoder,
            "image_encoder": self.image_encoder,
            "captioner": self.captioner,
            "gan": self.gan,
        }

    @property
    def gamma(self) -> GammaParams:
        return self.config.gamma

    def checkpoint_path(self, name: str) -> Path:
        return self.out_dir / f"{name}.ckpt"

    # checkpoints

    def _restore(self, name: str, module_names) -> list[str]:
        path = self.checkpoint_path(name)
        if not path.exists():
            raise OrchestrationError(f"{path} is missing; run {name} first")
        checkpoint = load_checkpoint(path)
        modules = {m: self.modules[m] for m in module_names if m in checkpoint.modules}
        checkpoint.restore(modules, config_hash=self.config.config_hash())
        log.info(f"restored {', '.join(sorted(modules))} from {path}")
        return sorted(modules)

    def _save(self, plan: PhasePlan, module_names, steps: int) -> Path:
        metadata = {
            "phase": plan.name,
            "step": steps,
            "seed": self.config.seed,
            "ablation": self.config.ablation,
            "vocab_size": self.vocab_size,
            "config_hash": self.config.config_hash(),
            "run_hash": self.config.run_hash(),
        }
        checkpoint = Checkpoint.from_modules({m: self.modules[m] for m in module_names}, metadata)
        return save_checkpoint(self.checkpoint_path(plan.name), checkpoint)

    def restore_for_evaluation(self, checkpoint: Path | str | None = None) -> list[str]:
        """Load the most complete set of trained modules; returns the restored module names."""
        if checkpoint is not None:
            loaded = load_checkpoint(checkpoint)
            modules = {m: self.modules[m] for m in loaded.modules if m in self.modules}
            loaded.restore(modules, config_hash=self.config.config_hash())
            return sorted(modules)
        if self.checkpoint_path("phase3").exists():
            return self._restore("phase3", self.modules)
        restored = self._restore("phase1", PHASE_MODULES["phase1"])
        for name in ("phase2-itm", "phase2-tim"):
            if self.checkpoint_path(name).exists():
                restored += self._restore(name, PHASE_MODULES[name])
        return sorted(restored)

    # training

    def _prepare(self, plan: PhasePlan) -> list[str]:
        restored = []
        for name in plan.requires:
            if plan.phase == 3:
                modules = PHASE_MODULES[name]
            else:
                modules = PHASE_MODULES["phase1"]
            restored += self._restore(name, modules)

        for module in self.modules.values():
            module.set_trainable(False)
        if plan.train_text_encoder:
            self.text_encoder.set_trainable(True)
        if plan.train_image_encoder:
            self.image_encoder.set_trainability(plan.trainability, plan.frozen_blocks)
        if plan.train_captioner:
            self.captioner.set_trainable(True)
        if plan.train_gan:
            self.gan.set_trainable(True)
        return restored

    def _trainable(self, *modules: Module) -> list:
        return [p for module in modules for p in module.trainable_parameters()]

    def run_phase(self, plan: PhasePlan, dataset: Dataset, seed: int | None = None) -> PhaseResult:
        """Train one phase over the dataset's train split, then write its trace and checkpoint."""
        seed = self.config.seed if seed is None else seed
        restored = self._prepare(plan)
        weights = self.config.loss_weights()
        if plan.phase == 3:
            weights = ablation_profile(self.config.ablation, self.config)[1]

        generator_modules = [self.gan.generator] if plan.train_gan else []
        trained = [self.text_encoder, self.image_encoder] if plan.phase != 2 else []
        if plan.train_captioner:
            trained.append(self.captioner)
        optimizer = Adam(
            self._trainable(*trained, *generator_modules),
            learning_rate=plan.learning_rate,
            weight_decay=self.config.weight_decay,
        )
        disc_optimizer = None
        if plan.train_gan:
            disc_params = self._trainable(*self.gan.discriminators)
            disc_optimizer = Adam(disc_params, learning_rate=plan.learning_rate, weight_decay=self.config.weight_decay)

        records = dataset.split("train")
        rng = np.random.default_rng([seed, PHASES.index(plan.name)])
        trace = LossTrace(plan.name, TRACE_COLUMNS[plan.name])
        log.info(
            f"starting {plan.name}: {len(records)} train records, batch {plan.batch_size}, "
            f"{plan.epochs} epochs, lr {plan.learning_rate}"
        )
        if len(records) < plan.batch_size:
            log.warning(f"{plan.name}: {len(records)} records cannot fill one batch of {plan.batch_size}")

        step = 0
        for epoch in range(plan.epochs):
            optimizer.learning_rate = step_decay(plan.learning_rate, epoch, plan.decay_epoch)
            for batch in dataset.batches(records, plan.batch_size, rng):
                if plan.max_steps and step >= plan.max_steps:
                    break
                if plan.name == "phase1":
                    components = self._step_vta(batch, dataset, rng, optimizer)
                elif plan.name == "phase2-itm":
                    components = self._step_captioner(batch, dataset, rng, optimizer)
                elif plan.name == "phase2-tim":
                    components = self._step_gan(batch, dataset, rng, optimizer, disc_optimizer, weights)
                else:
                    components = self._step_joint(batch, dataset, rng, optimizer, disc_optimizer, weights, plan)
                trace.record(step, components)
                log.debug(f"{plan.name} step {step}: {components}")
                if step % self.config.log_every == 0:
                    summary = ", ".join(f"{k}={v:.4f}" for k, v in components.items())
                    log.info(f"{plan.name} epoch {epoch} step {step}: {summary}")
                step += 1

        trace.write(self.out_dir)
        saved = PHASE_MODULES.get(plan.name)
        if saved is None:
            saved = ["text_encoder", "image_encoder"]
            saved += ["captioner"] if plan.use_itm else []
            saved += ["gan"] if plan.use_tim else []
        path = self._save(plan, saved, step)
        log.info(f"finished {plan.name} after {step} steps")
        return PhaseResult(plan, step, path, trace, restored)

    def _real_batch(self, batch: list[DatasetRecord], dataset: Dataset, rng: np.random.Generator):
        images = dataset.images(batch)
        texts = dataset.sample_captions(batch, rng)
        tokens, mask = dataset.encode_texts(texts)
        return images, texts, tokens, mask

    def _step_vta(self, batch, dataset, rng, optimizer) -> dict[str, float]:
        images, _, tokens, mask = self._real_batch(batch, dataset, rng)
        loss = total_matching_loss(
            MatchBatch(self.image_encoder.encode(images), self.text_encoder.encode(tokens, mask)), self.gamma
        )
        optimizer.zero_grad()
        loss.total.backward()
        optimizer.step()
        return {"total": loss.total.item(), **loss.components()}

    def _step_captioner(self, batch, dataset, rng, optimizer) -> dict[str, float]:
        images, texts, _, _ = self._real_batch(batch, dataset, rng)
        with no_grad():
            regions = self.image_encoder.encode(images).r
        loss = self.captioner.captioning_loss(regions, dataset.caption_targets(texts))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        return {"caption": loss.item(), "learning_rate": optimizer.learning_rate}

    def _generate_fakes(self, texts: EncodedText, rng: np.random.Generator) -> list[Tensor]:
        noise = sample_noise(rng, len(texts), self.gan.config.noise_dim)
        return self.gan.generate(texts.w, texts.s, noise, texts.mask)

    def _discriminator_step(self, images, fakes: list[Tensor], sentence: Tensor, optimizer: Adam) -> float:
        loss = self.gan.discriminator_loss_for(images, [f.detach() for f in fakes], sentence.detach())
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        return loss.item()

    def _step_gan(self, batch, dataset, rng, optimizer, disc_optimizer, weights: LossWeights) -> dict[str, float]:
        images, _, tokens, mask = self._real_batch(batch, dataset, rng)
        with no_grad():
            texts = self.text_encoder.encode(tokens, mask)
        fakes = self._generate_fakes(texts, rng)

        with frozen(*self.gan.discriminators):
            generator_term = self.gan.generator_loss_for(fakes, texts.s)
            fake_image_term = Tensor(0.0)
            if weights.lambda_fake_image:
                fake_encoded = self.image_encoder.encode(fit_to_spec(fakes[-1], self.image_encoder.spec))
                fake_image_term = total_matching_loss(MatchBatch(fake_encoded, texts), self.gamma).total
            loss = tim_total_loss(generator_term, fake_image_term, weights.lambda_fake_image)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        disc_term = self._discriminator_step(images, fakes, texts.s, disc_optimizer)
        return {
            "tim": loss.item(),
            "generator": generator_term.item(),
            "fake_image": fake_image_term.item(),
            "discriminator": disc_term,
        }

    def _fake_texts(self, regions: Tensor) -> tuple[np.ndarray, np.ndarray]:
        captions = self.captioner.generate_caption(regions.detach())
        # an immediate END still has to be encodable
        captions = [caption or [UNK_ID] for caption in captions]
        return pad_batch(captions, self.config.max_len)

    def _step_joint(self, batch, dataset, rng, optimizer, disc_optimizer, weights, plan) -> dict[str, float]:
        images, texts, tokens, mask = self._real_batch(batch, dataset, rng)
        real_images = self.image_encoder.encode(images)
        real_texts = self.text_encoder.encode(tokens, mask)
        components = LossComponents(matching=total_matching_loss(MatchBatch(real_images, real_texts), self.gamma).total)

        fakes, fake_images, fake_texts = None, None, None
        if plan.use_tim:
            fakes = self._generate_fakes(real_texts.detach(), rng)
            last = fakes[-1] if self.config.fake_gradient_to_generator else fakes[-1].detach()
            fake_images = self.image_encoder.encode(fit_to_spec(last, self.image_encoder.spec))
        if plan.use_itm:
            fake_tokens, fake_mask = self._fake_texts(real_images.r)
            fake_texts = self.text_encoder.encode(fake_tokens, fake_mask)

        fake_image_loss, fake_text_loss = assist_losses(real_images, real_texts, fake_images, fake_texts, self.gamma)
        if fake_image_loss is not None:
            components.fake_image = fake_image_loss.total
        if fake_text_loss is not None:
            components.fake_text = fake_text_loss.total

        with frozen(*self.gan.discriminators):
            if plan.use_tim:
                components.gan = self.gan.generator_loss_for(fakes, real_texts.s.detach())
            if plan.use_itm:
                components.caption = self.captioner.captioning_loss(
                    real_images.r.detach(), dataset.caption_targets(texts)
                )
            total = multimodal_loss(components, weights)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

        values = {"total": total.item(), **components.values(), "discriminator": 0.0}
        if plan.use_tim:
            values["discriminator"] = self._discriminator_step(images, fakes, real_texts.s, disc_optimizer)
        return values

    # evaluation

    def encode_images(self, images: np.ndarray) -> EncodedImage:
        with no_grad():
            parts = [self.image_encoder.encode(images[i : i + ENCODE_CHUNK]) for i in range(0, len(images), ENCODE_CHUNK)]
        return EncodedImage(
            r=Tensor(np.concatenate([p.r.data for p in parts])),
            v=Tensor(np.concatenate([p.v.data for p in parts])),
        )

    def encode_texts(self, dataset: Dataset, texts: list[str]) -> EncodedText:
        tokens, mask = dataset.encode_texts(texts)
        with no_grad():
            encoded = self.text_encoder.encode(tokens, mask)
        return encoded.detach()

    def generate_captions(self, regions: Tensor) -> list[list[int]]:
        captions = []
        for start in range(0, regions.shape[0], ENCODE_CHUNK):
            captions += self.captioner.generate_caption(regions[start : start + ENCODE_CHUNK])
        return captions

    def evaluate(
        self,
        dataset: Dataset,
        split: str = "test",
        top_k: int | None = None,
        pool_size: int | None = None,
        include_captions: bool = True,
    ) -> dict[str, float]:
        """Retrieval, attribute matching and (optionally) captioning metrics on one split."""
        top_k = self.config.eval_top_k if top_k is None else top_k
        pool_size = self.config.eval_pool if pool_size is None else pool_size
        records = dataset.split(split)
        images = self.encode_images(dataset.images(records))
        texts = self.encode_texts(dataset, [r.captions[0] for r in records])

        scores = retrieval_scores(images, texts, self.gamma, self.config.score_mode)
        seed = self.config.eval_seed
        report = {
            "records": float(len(records)),
            "r_precision_image_to_text": r_precision(scores, pool_size=pool_size, top_k=top_k, seed=seed),
            "r_precision_text_to_image": r_precision(scores.T, pool_size=pool_size, top_k=top_k, seed=seed),
        }
        report["r_precision"] = (report["r_precision_image_to_text"] + report["r_precision_text_to_image"]) / 2

        attribute_sets = [AttributeSet(r.image_id, tuple(r.attributes)) for r in records]

        def encode(phrases: list[str]) -> np.ndarray:
            return self.encode_texts(dataset, phrases).s.data

        true = aimcos(images.v.data, attribute_sets, encode)
        permuted = aimcos(images.v.data, permuted_attribute_sets(attribute_sets, seed), encode)
        report.update(
            {
                "aimcos": true.score,
                "aimcos_permuted": permuted.score,
                "aimcos_gap": true.score - permuted.score,
                "aimcos_skipped": float(true.skipped),
            }
        )

        if include_captions:
            generated = self.generate_captions(images.r)
            candidates = [dataset.vocab.decode(c) for c in generated]
            references = [[tokenize(c) for c in r.captions] for r in records]
            for n in range(1, 5):
                report[f"bleu_{n}"] = corpus_bleu(candidates, references, n)
        log.info(", ".join(f"{k}={v:.4f}" for k, v in report.items()))
        return report

    def write_report(self, report: dict[str, float], path: Path | str | None = None) -> Path:
        path = Path(path) if path is not None else self.out_dir / "eval_report.txt"
        atomic_write_text(path, "".join(f"{key} = {value!r}\n" for key, value in report.items()))
        return path

    def export_captions(self, dataset: Dataset, split: str, path: Path | str) -> Path:
        records = dataset.split(split)
        generated = self.generate_captions(self.encode_images(dataset.images(records)).r)
        lines = [f"{r.image_id}\t{' '.join(dataset.vocab.decode(c))}" for r, c in zip(records, generated)]
        atomic_write_text(path, "".join(line + "\n" for line in lines))
        return Path(path)

    def export_samples(self, dataset: Dataset, split: str, out_dir: Path | str, count: int = 8) -> list[Path]:
        """Write last-stage generated images for the first ``count`` captions of a split."""
        records = dataset.split(split)[:count]
        if not records:
            return []
        texts = self.encode_texts(dataset, [r.captions[0] for r in records])
        rng = np.random.default_rng(self.config.eval_seed)
        with no_grad():
            fakes = self._generate_fakes(texts, rng)[-1].data
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for record, image in zip(records, fakes):
            path = out_dir / f"{record.image_id}.png"
            save_image(path, image)
            paths.append(path)
        return paths

    def export_embeddings(self, dataset: Dataset, split: str, path: Path | str) -> Path:
        """Image global features plus one sentence feature per class label."""
        records = dataset.split(split)
        rows = []
        if records:
            features = self.encode_images(dataset.images(records)).v.data
            rows += [(r.image_id, "image", f) for r, f in zip(records, features)]
            labels = sorted({r.label for r in records})
            label_features = self.encode_texts(dataset, labels).s.data
            rows += [(label, "text", f) for label, f in zip(labels, label_features)]
        return export_embeddings(path, rows, self.config.d_model)

    def similarity_map(self, dataset: Dataset, split: str, path: Path | str | None = None) -> tuple[list[str], np.ndarray]:
        """Class-label token features against each class's image features, as a (C, C) matrix."""
        records = dataset.split(split)
        labels = sorted({r.label for r in records})
        features = self.encode_images(dataset.images(records)).v.data
        groups = [features[[i for i, r in enumerate(records) if r.label == label]] for label in labels]
        matrix = similarity_map(self.encode_texts(dataset, labels).s.data, groups)
        if path is not None:
            write_similarity_csv(path, labels, matrix)
        return labels, matrix
