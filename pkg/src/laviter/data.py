"""
Datasets on disk: the synthetic shapes corpus, the annotation line format and a
COCO annotation converter.

A dataset directory holds ``images/``, ``annotations.jsonl`` (one JSON object per
image) and ``vocab.txt``.
"""

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DatasetError
from .image_encoder import ImageSpec, encode_png, load_image
from .text_encoder import END_ID, Vocabulary, pad_batch, tokenize
from .utils import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

ANNOTATIONS = "annotations.jsonl"
VOCABULARY = "vocab.txt"
IMAGES = "images"

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 200, 40),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUND = (235, 235, 235)
TEMPLATES = (
    "{objects}",
    "there is {objects}",
    "the image shows {objects}",
    "a picture of {objects}",
)


@dataclass
class DatasetRecord:
    image_id: str
    image: str
    captions: list[str]
    attributes: list[str]
    label: str
    split: str = "train"

    def validate(self, max_len: int) -> None:
        if not self.captions:
            raise DatasetError(f"record {self.image_id} has no captions")
        for caption in self.captions:
            if len(tokenize(caption)) > max_len:
                raise DatasetError(f"record {self.image_id} caption {caption!r} exceeds {max_len} tokens")
        if not self.attributes:
            raise DatasetError(f"record {self.image_id} has no attributes")

    def to_json(self) -> str:
        data = asdict(self)
        data["id"] = data.pop("image_id")
        data["class"] = data.pop("label")
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        data = json.loads(line)
        return cls(
            image_id=str(data["id"]),
            image=data["image"],
            captions=list(data["captions"]),
            attributes=list(data["attributes"]),
            label=data["class"],
            split=data.get("split", "train"),
        )


@dataclass(frozen=True)
class CorpusSpec:
    train: int = 512
    test: int = 128
    captions_per_image: int = 3
    max_objects: int = 3
    image_size: int = 64
    seed: int = 7
    colors: tuple[str, ...] = tuple(COLORS)
    shapes: tuple[str, ...] = SHAPES

    def __post_init__(self):
        if self.train <= 0 or self.test <= 0 or self.captions_per_image <= 0:
            raise ConfigError(
                f"corpus counts must be positive (train={self.train}, test={self.test}, "
                f"captions_per_image={self.captions_per_image})"
            )
        if not 1 <= self.max_objects <= 3:
            raise ConfigError(f"max_objects must lie in 1..3, got {self.max_objects}")
        unknown = set(self.colors) - set(COLORS)
        if unknown or not self.colors or not self.shapes or set(self.shapes) - set(SHAPES):
            raise ConfigError(f"unsupported attribute vocabulary {self.colors} x {self.shapes}")

    @property
    def classes(self) -> list[str]:
        return [f"{color} {shape}" for color in self.colors for shape in self.shapes]


def _draw_object(draw: ImageDraw.ImageDraw, phrase: str, box: tuple[int, int, int, int]) -> None:
    color, shape = phrase.split()
    fill = COLORS[color]
    left, top, right, bottom = box
    if shape == "circle":
        draw.ellipse(box, fill=fill)
    elif shape == "square":
        draw.rectangle(box, fill=fill)
    else:
        draw.polygon([((left + right) // 2, top), (right, bottom), (left, bottom)], fill=fill)


def _render(objects: list[str], quadrants: Iterable[int], size: int, rng: np.random.Generator) -> Image.Image:
    raster = Image.new("RGB", (size, size), BACKGROUND)
    draw = ImageDraw.Draw(raster)
    half = size // 2
    for phrase, quadrant in zip(objects, quadrants):
        x0, y0 = (quadrant % 2) * half, (quadrant // 2) * half
        margin = int(rng.integers(half // 10, half // 4 + 1))
        _draw_object(draw, phrase, (x0 + margin, y0 + margin, x0 + half - margin - 1, y0 + half - margin - 1))
    return raster


def _caption(objects: list[str], rng: np.random.Generator) -> str:
    order = rng.permutation(len(objects))
    enumeration = " and ".join(f"a {objects[i]}" for i in order)
    return TEMPLATES[int(rng.integers(len(TEMPLATES)))].format(objects=enumeration)


def gen_synthetic_corpus(spec: CorpusSpec, out_dir: Path | str) -> list[DatasetRecord]:
    """Render the shapes corpus into ``out_dir``; deterministic for a given spec."""
    out_dir = Path(out_dir)
    (out_dir / IMAGES).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    classes = spec.classes
    order = [classes[i] for i in rng.permutation(len(classes))]

    records = []
    for index in range(spec.train + spec.test):
        split = "train" if index < spec.train else "test"
        primary = order[index % len(order)]
        count = int(rng.integers(1, spec.max_objects + 1))
        others = [c for c in classes if c != primary]
        extra = [others[i] for i in rng.choice(len(others), size=count - 1, replace=False)]
        objects = [primary, *extra]

        image_id = f"{split}-{index:05d}"
        relative = f"{IMAGES}/{image_id}.png"
        raster = _render(objects, rng.permutation(4)[:count], spec.image_size, rng)
        atomic_write_bytes(out_dir / relative, encode_png(raster))

        captions = [_caption(objects, rng) for _ in range(spec.captions_per_image)]
        records.append(DatasetRecord(image_id, relative, captions, sorted(objects), primary, split))

    write_annotations(records, out_dir)
    vocab = Vocabulary.build(text for r in records for text in (*r.captions, *r.attributes, r.label))
    vocab.save(out_dir / VOCABULARY)
    log.info(f"generated {len(records)} synthetic records ({spec.train} train, {spec.test} test) in {out_dir}")
    return records


def write_annotations(records: list[DatasetRecord], out_dir: Path | str) -> Path:
    path = Path(out_dir) / ANNOTATIONS
    atomic_write_text(path, "".join(record.to_json() + "\n" for record in records))
    return path


@dataclass
class Dataset:
    root: Path
    records: list[DatasetRecord]
    vocab: Vocabulary
    spec: ImageSpec
    max_len: int = 15
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def labels(self) -> list[str]:
        return sorted({r.label for r in self.records})

    def image(self, record: DatasetRecord) -> np.ndarray:
        if record.image_id not in self._cache:
            self._cache[record.image_id] = load_image(self.root / record.image, self.spec)
        return self._cache[record.image_id]

    def images(self, records: list[DatasetRecord]) -> np.ndarray:
        return np.stack([self.image(r) for r in records]) if records else np.zeros((0, *self.spec.shape))

    def encode_texts(self, texts: list[str]) -> tuple[np.ndarray, np.ndarray]:
        return pad_batch([self.vocab.encode(t) for t in texts], self.max_len)

    def sample_captions(self, records: list[DatasetRecord], rng: np.random.Generator) -> list[str]:
        return [r.captions[int(rng.integers(len(r.captions)))] for r in records]

    def caption_targets(self, texts: list[str]) -> np.ndarray:
        """Caption ids followed by END, PAD after; width ``max_len + 1``."""
        tokens, _ = pad_batch([[*self.vocab.encode(t)[: self.max_len], END_ID] for t in texts], self.max_len + 1)
        return tokens

    def batches(self, records: list[DatasetRecord], batch_size: int, rng: np.random.Generator):
        """Shuffled full batches; the incomplete tail is dropped."""
        order = rng.permutation(len(records))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield [records[i] for i in order[start : start + batch_size]]


def load_dataset(path: Path | str, spec: ImageSpec | None = None, max_len: int = 15) -> Dataset:
    root = Path(path)
    annotations = root / ANNOTATIONS
    if not annotations.exists():
        raise DatasetError(f"no {ANNOTATIONS} in {root}")

    records = []
    for number, line in enumerate(annotations.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = DatasetRecord.from_json(line)
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetError(f"{annotations}:{number}: malformed record ({e})") from None
        record.validate(max_len)
        records.append(record)

    vocab_path = root / VOCABULARY
    if vocab_path.exists():
        vocab = Vocabulary.load(vocab_path)
    else:
        log.warning(f"{vocab_path} missing; building the vocabulary from the annotations")
        vocab = Vocabulary.build(text for r in records for text in (*r.captions, *r.attributes, r.label))
    log.info(f"loaded {len(records)} records and {len(vocab)} tokens from {root}")
    return Dataset(root, records, vocab, spec or ImageSpec(), max_len)


def convert_coco(
    captions_json: Path | str,
    instances_json: Path | str,
    out_dir: Path | str,
    image_dir: str = "images",
    split: str = "train",
    max_len: int = 15,
) -> list[DatasetRecord]:
    """Map COCO caption and instance annotation files to dataset records.

    Category names become the attribute phrases and the most frequent category is
    the class label. Captions longer than ``max_len`` tokens are dropped, and images
    left without captions or categories are skipped.
    """
    captions_data = json.loads(Path(captions_json).read_text(encoding="utf-8"))
    instances_data = json.loads(Path(instances_json).read_text(encoding="utf-8"))
    categories = {c["id"]: c["name"] for c in instances_data["categories"]}

    captions: dict[int, list[str]] = {}
    for ann in captions_data["annotations"]:
        text = " ".join(tokenize(ann["caption"]))
        if 0 < len(text.split()) <= max_len:
            captions.setdefault(ann["image_id"], []).append(text)
    objects: dict[int, Counter] = {}
    for ann in instances_data["annotations"]:
        objects.setdefault(ann["image_id"], Counter())[categories[ann["category_id"]]] += 1

    records, skipped = [], 0
    for image in captions_data["images"]:
        image_id = image["id"]
        if not captions.get(image_id) or not objects.get(image_id):
            skipped += 1
            continue
        counts = objects[image_id]
        label = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        records.append(
            DatasetRecord(
                image_id=str(image_id),
                image=f"{image_dir}/{image['file_name']}",
                captions=captions[image_id],
                attributes=sorted(counts),
                label=label,
                split=split,
            )
        )
    if skipped:
        log.warning(f"skipped {skipped} COCO images without usable captions or instance annotations")

    out_dir = Path(out_dir)
    write_annotations(records, out_dir)
    Vocabulary.build(text for r in records for text in (*r.captions, *r.attributes)).save(out_dir / VOCABULARY)
    log.info(f"converted {len(records)} COCO records into {out_dir}")
    return records
