import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from pydoover import config

from .errors import ConfigError
from .image_encoder import ImageEncoderConfig, Trainability
from .itm import CaptionerConfig
from .text_encoder import TransformerConfig
from .tim import GanConfig
from .vta import GammaParams

log = logging.getLogger(__name__)


class Profile(Enum):
    DESK = "desk"
    FULL_SCALE = "full-scale"

    @classmethod
    def choices(cls):
        return [choice.value for choice in cls]


class Ablation(Enum):
    FULL = "full"
    VTA_FROZEN = "vta-frozen"
    VTA_TRAINABLE = "vta-trainable"
    IMG2TXT_ONLY = "img2txt-only"
    TXT2IMG_ONLY = "txt2img-only"

    @classmethod
    def choices(cls):
        return [choice.value for choice in cls]


class ScoreMode(Enum):
    SENTENCE = "sentence"
    WORD = "word"
    COMBINED = "combined"

    @classmethod
    def choices(cls):
        return [choice.value for choice in cls]


PHASES = ("phase1", "phase2-itm", "phase2-tim", "phase3")


## Profile presets: only the values that differ from the desk defaults
PROFILES = {
    ## Minutes-scale training on one CPU core
    Profile.DESK.value: {},
    ## Shapes and schedule of the full-size model (17x17 regions, 64/128/256 GAN stages)
    Profile.FULL_SCALE.value: {
        "image_size": 136,
        "caption_encoder_layers": 6,
        "caption_decoder_layers": 6,
        "gan_stages": 3,
        "gan_first_resolution": 64,
        "phase1_batch": 96,
        "phase1_lr": 2e-4,
        "joint_lr": 1e-6,
        "captions_per_image": 10,
    },
}


## λ rows of the weight sweep: (λ_G, λ_C, λ_T̂, λ_Î, λ_m)
_LAMBDA_ROWS = {
    "coco-1": (0, 0, 0, 0, 1),
    "coco-2": (1, 1, 1, 1, 50),
    "coco-3": (0.01, 0.1, 1, 1, 50),
    "coco-4": (0.01, 0.1, 50, 1, 1),
    "coco-5": (0.01, 0.1, 1, 50, 1),
    "coco-6": (0.01, 0.1, 10, 1, 10),
    "coco-7": (0.01, 0.1, 10, 1, 1),
    "coco-8": (0.001, 0.1, 1, 0.1, 10),
    "coco-9": (0.01, 0.1, 1, 1, 10),
    "cub-1": (1, 1, 1, 1, 1),
    "cub-2": (0.01, 0.1, 1, 5, 1),
    "cub-3": (0.01, 0.1, 5, 1, 1),
    "cub-4": (0.01, 0.1, 1, 1, 1),
    "cub-5": (0.01, 0.1, 1, 1, 10),
    "cub-6": (0.01, 0.1, 1, 1, 5),
}
_LAMBDA_ROWS["coco-best"] = _LAMBDA_ROWS["coco-9"]
_LAMBDA_ROWS["cub-best"] = _LAMBDA_ROWS["cub-6"]

LAMBDA_PRESETS = {
    name: {
        "lambda_gan": float(g),
        "lambda_caption": float(c),
        "lambda_fake_text": float(t),
        "lambda_fake_image": float(i),
        "lambda_m": float(m),
    }
    for name, (g, c, t, i, m) in _LAMBDA_ROWS.items()
}


class LaviterConfig(config.Schema):
    seed = config.Integer("Seed", default=0, minimum=0, description="Seeds parameter init, batching, noise and sampling.")
    profile = config.Enum(
        "Profile",
        default=Profile.DESK.value,
        choices=Profile.choices(),
        description="Shape preset applied before the config file and overrides.",
    )
    ablation = config.Enum("Ablation", default=Ablation.FULL.value, choices=Ablation.choices())
    data_dir = config.String("Dataset Directory", default="data")
    out_dir = config.String("Output Directory", default="runs")

    d_model = config.Integer("Feature Width", default=256, minimum=2)
    heads = config.Integer("Attention Heads", default=8, minimum=1)
    text_layers = config.Integer("Text Encoder Layers", default=1, minimum=1)
    ffn_dim = config.Integer("FFN Width", default=512, minimum=1)
    max_len = config.Integer("Max Sentence Length", default=15, minimum=1)
    image_size = config.Integer("Image Size", default=64, minimum=8, description="Encoder input size, a multiple of 8.")
    conv_base_channels = config.Integer("Backbone Base Channels", default=16, minimum=1)
    caption_encoder_layers = config.Integer("Captioner Encoder Layers", default=2, minimum=1)
    caption_decoder_layers = config.Integer("Captioner Decoder Layers", default=2, minimum=1)
    gan_stages = config.Integer("GAN Stages", default=2, minimum=1, maximum=4)
    gan_first_resolution = config.Integer("GAN First Resolution", default=16, minimum=4)
    gan_noise_dim = config.Integer("Noise Length", default=32, minimum=1)
    gan_channels = config.Integer("Generator Channels", default=32, minimum=1)
    gan_disc_channels = config.Integer("Discriminator Channels", default=16, minimum=1)
    gan_cond_dim = config.Integer("Discriminator Condition Width", default=32, minimum=1)
    gan_word_attention = config.Boolean(
        "Generator Word Attention",
        default=False,
        description="Attend to word features in every generator stage after the first.",
    )

    gamma1 = config.Number("Gamma 1", default=4.0, minimum=1e-12, description="Attention sharpening.")
    gamma2 = config.Number("Gamma 2", default=5.0, minimum=1e-12, description="Word score magnification.")
    gamma3 = config.Number("Gamma 3", default=10.0, minimum=1e-12, description="Batch posterior sharpening.")

    loss_preset = config.Enum(
        "Loss Preset",
        default="none",
        choices=["none", *LAMBDA_PRESETS],
        description="Named row of joint loss weights; explicit lambda settings still win.",
    )
    lambda_m = config.Number("Lambda Matching", default=10.0, minimum=0)
    lambda_fake_image = config.Number("Lambda Fake Image", default=1.0, minimum=0)
    lambda_fake_text = config.Number("Lambda Fake Text", default=1.0, minimum=0)
    lambda_gan = config.Number("Lambda Generator", default=0.01, minimum=0)
    lambda_caption = config.Number("Lambda Captioning", default=0.1, minimum=0)
    weight_decay = config.Number("Weight Decay", default=1e-4, minimum=0)

    phase1_epochs = config.Integer("Phase 1 Epochs", default=20, minimum=0)
    phase1_batch = config.Integer("Phase 1 Batch Size", default=32, minimum=1)
    phase1_lr = config.Number(
        "Phase 1 Learning Rate",
        default=1e-3,
        minimum=0,
        description="Desk default; the full-scale profile uses 2e-4.",
    )
    phase1_trainability = config.Enum(
        "Phase 1 Backbone", default=Trainability.FROZEN_BACKBONE.value, choices=Trainability.choices()
    )
    caption_epochs = config.Integer("Captioner Epochs", default=30, minimum=0)
    caption_batch = config.Integer("Captioner Batch Size", default=32, minimum=1)
    caption_lr = config.Number("Captioner Learning Rate", default=1e-4, minimum=0)
    caption_decay_epoch = config.Integer(
        "Captioner Decay Epoch", default=20, minimum=0, description="Learning rate x0.1 from this epoch on; 0 disables."
    )
    gan_epochs = config.Integer("GAN Epochs", default=10, minimum=0)
    gan_batch = config.Integer("GAN Batch Size", default=14, minimum=1)
    gan_lr = config.Number("GAN Learning Rate", default=2e-4, minimum=0)
    joint_epochs = config.Integer("Joint Epochs", default=5, minimum=0)
    joint_batch = config.Integer("Joint Batch Size", default=8, minimum=1)
    joint_lr = config.Number("Joint Learning Rate", default=1e-5, minimum=0)
    joint_frozen_blocks = config.Integer("Joint Frozen Backbone Blocks", default=2, minimum=0, maximum=4)
    fake_gradient_to_generator = config.Boolean(
        "Fake Gradient To Generator",
        default=False,
        description="Let the joint matching loss on fake images update the generator.",
    )
    max_steps = config.Integer("Max Steps Per Phase", default=0, minimum=0, description="0 means no cap.")
    log_every = config.Integer("Log Every", default=10, minimum=1)

    eval_pool = config.Integer("Retrieval Pool Size", default=100, minimum=2)
    eval_top_k = config.Integer("Retrieval Top K", default=3, minimum=1)
    score_mode = config.Enum("Retrieval Score", default=ScoreMode.COMBINED.value, choices=ScoreMode.choices())
    eval_seed = config.Integer("Evaluation Seed", default=0, minimum=0)

    corpus_train = config.Integer("Synthetic Train Images", default=512, minimum=0)
    corpus_test = config.Integer("Synthetic Test Images", default=128, minimum=0)
    captions_per_image = config.Integer("Captions Per Image", default=3, minimum=1)
    max_objects = config.Integer("Max Objects Per Image", default=3, minimum=1, maximum=3)


## Schema properties by display name
SETTINGS = {prop["title"]: prop for prop in LaviterConfig.to_schema()["properties"].values()}


def setting(title: str, architecture: bool = False):
    """A RunConfig field whose default, bounds and choices come from the LaviterConfig element ``title``."""
    return field(default=SETTINGS[title]["default"], metadata={"title": title, "architecture": architecture})


def setting_schema(name: str) -> dict:
    """Schema property of the RunConfig field ``name``."""
    for f in fields(RunConfig):
        if f.name == name:
            return SETTINGS[f.metadata["title"]]
    raise ConfigError(f"unknown config key {name!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 1.0
    lambda_fake_image: float = 0.0
    lambda_fake_text: float = 0.0
    lambda_gan: float = 0.0
    lambda_caption: float = 0.0
    gamma: GammaParams = GammaParams()

    def __post_init__(self):
        for name in ("lambda_m", "lambda_fake_image", "lambda_fake_text", "lambda_gan", "lambda_caption"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")

    def as_dict(self) -> dict[str, float]:
        return {
            "matching": self.lambda_m,
            "fake_image": self.lambda_fake_image,
            "fake_text": self.lambda_fake_text,
            "gan": self.lambda_gan,
            "caption": self.lambda_caption,
        }


@dataclass(frozen=True)
class PhasePlan:
    name: str
    phase: int
    learning_rate: float
    epochs: int
    batch_size: int
    train_text_encoder: bool = False
    train_image_encoder: bool = False
    train_captioner: bool = False
    train_gan: bool = False
    trainability: str = Trainability.FROZEN_BACKBONE.value
    frozen_blocks: int = 0
    max_steps: int = 0
    decay_epoch: int = 0
    use_tim: bool = False
    use_itm: bool = False
    requires: tuple[str, ...] = ()

    def __post_init__(self):
        if self.name not in PHASES:
            raise ConfigError(f"unknown phase {self.name!r}; choose from {list(PHASES)}")
        if self.phase == 3 and "phase1" not in self.requires:
            raise ConfigError("phase 3 must require the phase 1 checkpoint")


@dataclass(frozen=True)
class RunConfig:
    seed: int = setting("Seed")
    profile: str = setting("Profile")
    ablation: str = setting("Ablation")
    data_dir: str = setting("Dataset Directory")
    out_dir: str = setting("Output Directory")

    d_model: int = setting("Feature Width", architecture=True)
    heads: int = setting("Attention Heads", architecture=True)
    text_layers: int = setting("Text Encoder Layers", architecture=True)
    ffn_dim: int = setting("FFN Width", architecture=True)
    max_len: int = setting("Max Sentence Length", architecture=True)
    image_size: int = setting("Image Size", architecture=True)
    conv_base_channels: int = setting("Backbone Base Channels", architecture=True)
    caption_encoder_layers: int = setting("Captioner Encoder Layers", architecture=True)
    caption_decoder_layers: int = setting("Captioner Decoder Layers", architecture=True)
    gan_stages: int = setting("GAN Stages", architecture=True)
    gan_first_resolution: int = setting("GAN First Resolution", architecture=True)
    gan_noise_dim: int = setting("Noise Length", architecture=True)
    gan_channels: int = setting("Generator Channels", architecture=True)
    gan_disc_channels: int = setting("Discriminator Channels", architecture=True)
    gan_cond_dim: int = setting("Discriminator Condition Width", architecture=True)
    gan_word_attention: bool = setting("Generator Word Attention", architecture=True)

    gamma1: float = setting("Gamma 1")
    gamma2: float = setting("Gamma 2")
    gamma3: float = setting("Gamma 3")

    loss_preset: str = setting("Loss Preset")
    lambda_m: float = setting("Lambda Matching")
    lambda_fake_image: float = setting("Lambda Fake Image")
    lambda_fake_text: float = setting("Lambda Fake Text")
    lambda_gan: float = setting("Lambda Generator")
    lambda_caption: float = setting("Lambda Captioning")
    weight_decay: float = setting("Weight Decay")

    phase1_epochs: int = setting("Phase 1 Epochs")
    phase1_batch: int = setting("Phase 1 Batch Size")
    phase1_lr: float = setting("Phase 1 Learning Rate")
    phase1_trainability: str = setting("Phase 1 Backbone")
    caption_epochs: int = setting("Captioner Epochs")
    caption_batch: int = setting("Captioner Batch Size")
    caption_lr: float = setting("Captioner Learning Rate")
    caption_decay_epoch: int = setting("Captioner Decay Epoch")
    gan_epochs: int = setting("GAN Epochs")
    gan_batch: int = setting("GAN Batch Size")
    gan_lr: float = setting("GAN Learning Rate")
    joint_epochs: int = setting("Joint Epochs")
    joint_batch: int = setting("Joint Batch Size")
    joint_lr: float = setting("Joint Learning Rate")
    joint_frozen_blocks: int = setting("Joint Frozen Backbone Blocks")
    fake_gradient_to_generator: bool = setting("Fake Gradient To Generator")
    max_steps: int = setting("Max Steps Per Phase")
    log_every: int = setting("Log Every")

    eval_pool: int = setting("Retrieval Pool Size")
    eval_top_k: int = setting("Retrieval Top K")
    score_mode: str = setting("Retrieval Score")
    eval_seed: int = setting("Evaluation Seed")

    corpus_train: int = setting("Synthetic Train Images")
    corpus_test: int = setting("Synthetic Test Images")
    captions_per_image: int = setting("Captions Per Image")
    max_objects: int = setting("Max Objects Per Image")

    def __post_init__(self):
        for f in fields(self):
            value, prop = getattr(self, f.name), SETTINGS[f.metadata["title"]]
            if prop.get("enum") is not None and value not in prop["enum"]:
                raise ConfigError(f"{f.name}={value!r} is not one of {prop['enum']}")
            if prop.get("minimum") is not None and value < prop["minimum"]:
                raise ConfigError(f"{f.name}={value} is below the minimum {prop['minimum']}")
            if prop.get("maximum") is not None and value > prop["maximum"]:
                raise ConfigError(f"{f.name}={value} is above the maximum {prop['maximum']}")
        if self.eval_pool <= self.eval_top_k:
            raise ConfigError(f"eval_pool ({self.eval_pool}) must exceed eval_top_k ({self.eval_top_k})")

    @classmethod
    def load(cls, path: Path | str | None = None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        """Defaults, then profile preset, then λ preset, then the file, then ``overrides``."""
        from_file = {}
        if path:
            try:
                from_file = parse_config_text(Path(path).read_text(encoding="utf-8"))
            except OSError as e:
                raise ConfigError(f"cannot read config file {path}: {e}") from e
        explicit = {**from_file, **(overrides or {})}
        unknown = sorted(set(explicit) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

        profile = explicit.get("profile", Profile.DESK.value)
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {Profile.choices()}")
        preset = explicit.get("loss_preset", "none")
        if preset != "none" and preset not in LAMBDA_PRESETS:
            raise ConfigError(f"unknown loss preset {preset!r}")

        values: dict[str, Any] = {**PROFILES[profile], **LAMBDA_PRESETS.get(preset, {})}
        values.update({name: _coerce(cls, name, raw) for name, raw in explicit.items()})
        return cls(**values)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def architecture(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.metadata.get("architecture")}

    def config_hash(self) -> str:
        """SHA-256 of the architecture fields; gates restoring a checkpoint into a model."""
        payload = json.dumps(self.architecture(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def run_hash(self) -> str:
        """SHA-256 of every resolved setting; recorded for audit, never checked on restore."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    # component configurations

    @property
    def gamma(self) -> GammaParams:
        return GammaParams(self.gamma1, self.gamma2, self.gamma3)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_m=self.lambda_m,
            lambda_fake_image=self.lambda_fake_image,
            lambda_fake_text=self.lambda_fake_text,
            lambda_gan=self.lambda_gan,
            lambda_caption=self.lambda_caption,
            gamma=self.gamma,
        )

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(
            d_model=self.d_model, heads=self.heads, layers=self.text_layers, ffn_dim=self.ffn_dim, max_len=self.max_len
        )

    def image_encoder_config(self) -> ImageEncoderConfig:
        return ImageEncoderConfig(image_size=self.image_size, base_channels=self.conv_base_channels, d_model=self.d_model)

    def captioner_config(self, vocab_size: int) -> CaptionerConfig:
        return CaptionerConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            heads=self.heads,
            encoder_layers=self.caption_encoder_layers,
            decoder_layers=self.caption_decoder_layers,
            ffn_dim=self.ffn_dim,
            max_len=self.max_len,
        )

    def gan_config(self) -> GanConfig:
        return GanConfig(
            stages=self.gan_stages,
            first_resolution=self.gan_first_resolution,
            noise_dim=self.gan_noise_dim,
            d_model=self.d_model,
            channels=self.gan_channels,
            disc_channels=self.gan_disc_channels,
            cond_dim=self.gan_cond_dim,
            word_attention=self.gan_word_attention,
        )


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {number}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip().strip("\"'")
    return values


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    values = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        values[key.strip()] = value.strip()
    return values


def _coerce(cls, name: str, raw) -> Any:
    kind = {f.name: f.type for f in fields(cls)}[name]
    if not isinstance(raw, str):
        return raw
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in _TRUE | _FALSE:
                raise ValueError(raw)
            return lowered in _TRUE
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name} expects a {kind.__name__}, got {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def phase_plan(config: RunConfig, name: str) -> PhasePlan:
    """The plan for one of the four phases under ``config``'s ablation."""
    if name == "phase1":
        return PhasePlan(
            name="phase1",
            phase=1,
            learning_rate=config.phase1_lr,
            epochs=config.phase1_epochs,
            batch_size=config.phase1_batch,
            train_text_encoder=True,
            train_image_encoder=True,
            trainability=config.phase1_trainability,
            frozen_blocks=config.joint_frozen_blocks,
            max_steps=config.max_steps,
        )
    if name == "phase2-itm":
        return PhasePlan(
            name="phase2-itm",
            phase=2,
            learning_rate=config.caption_lr,
            epochs=config.caption_epochs,
            batch_size=config.caption_batch,
            train_captioner=True,
            max_steps=config.max_steps,
            decay_epoch=config.caption_decay_epoch,
            use_itm=True,
            requires=("phase1",),
        )
    if name == "phase2-tim":
        return PhasePlan(
            name="phase2-tim",
            phase=2,
            learning_rate=config.gan_lr,
            epochs=config.gan_epochs,
            batch_size=config.gan_batch,
            train_gan=True,
            max_steps=config.max_steps,
            use_tim=True,
            requires=("phase1",),
        )
    if name == "phase3":
        return ablation_profile(config.ablation, config)[0]
    raise ConfigError(f"unknown phase {name!r}; choose from {list(PHASES)}")


def ablation_profile(name: str, config: RunConfig) -> tuple[PhasePlan, LossWeights]:
    """Joint-phase plan and loss weights for one ablation row."""
    try:
        ablation = Ablation(name)
    except ValueError:
        raise ConfigError(f"unknown ablation {name!r}; choose from {Ablation.choices()}") from None

    weights = config.loss_weights()
    use_tim = ablation in (Ablation.FULL, Ablation.TXT2IMG_ONLY)
    use_itm = ablation in (Ablation.FULL, Ablation.IMG2TXT_ONLY)
    if not use_tim:
        weights = dataclasses.replace(weights, lambda_fake_image=0.0, lambda_gan=0.0)
    if not use_itm:
        weights = dataclasses.replace(weights, lambda_fake_text=0.0, lambda_caption=0.0)

    trainability = Trainability.FIRST_K_FROZEN.value
    if ablation is Ablation.VTA_FROZEN:
        trainability = Trainability.FROZEN_BACKBONE.value

    requires = ("phase1",)
    if use_itm:
        requires += ("phase2-itm",)
    if use_tim:
        requires += ("phase2-tim",)

    plan = PhasePlan(
        name="phase3",
        phase=3,
        learning_rate=config.joint_lr,
        epochs=config.joint_epochs,
        batch_size=config.joint_batch,
        train_text_encoder=True,
        train_image_encoder=True,
        train_captioner=use_itm,
        train_gan=use_tim,
        trainability=trainability,
        frozen_blocks=config.joint_frozen_blocks,
        max_steps=config.max_steps,
        use_tim=use_tim,
        use_itm=use_itm,
        requires=requires,
    )
    return plan, weights


def export():
    LaviterConfig.export(
        Path(__file__).parents[2] / "doover_config.json",
        "laviter",
    )
