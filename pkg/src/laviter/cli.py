import argparse
import logging
from pathlib import Path

from .app_config import RunConfig, parse_overrides, phase_plan
from .application import LaviterTrainer
from .data import CorpusSpec, Dataset, convert_coco, gen_synthetic_corpus, load_dataset
from .errors import LaviterError
from .utils import atomic_write_text

log = logging.getLogger(__name__)

TRAIN_COMMANDS = {
    "train-vta": "phase1",
    "train-itm": "phase2-itm",
    "train-tim": "phase2-tim",
    "train-joint": "phase3",
}
FLAG_KEYS = {
    "seed": "seed",
    "profile": "profile",
    "ablation": "ablation",
    "data": "data_dir",
    "out": "out_dir",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value run configuration file")
    common.add_argument("--seed", help="override the run seed")
    common.add_argument("--profile", help="desk or full-scale")
    common.add_argument("--ablation", help="joint-phase ablation row")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--out", help="run output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true", help="log every training step")

    parser = argparse.ArgumentParser(prog="laviter", description="Joint visual-textual representation learning.")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", parents=[common], help="render the synthetic shapes corpus")
    coco = commands.add_parser("convert-coco", parents=[common], help="convert COCO annotation files")
    coco.add_argument("--captions", type=Path, required=True)
    coco.add_argument("--instances", type=Path, required=True)
    coco.add_argument("--image-dir", default="images", help="image directory relative to the dataset root")
    coco.add_argument("--split", default="train")

    for name, phase in TRAIN_COMMANDS.items():
        commands.add_parser(name, parents=[common], help=f"run {phase}")

    evaluate = commands.add_parser("eval", parents=[common], help="retrieval, AIMCoS and BLEU report")
    evaluate.add_argument("--top-k", type=int)
    evaluate.add_argument("--pool", type=int)
    evaluate.add_argument("--checkpoint", type=Path, help="evaluate this checkpoint instead of the latest phases")
    evaluate.add_argument("--split", default="test")
    evaluate.add_argument("--report", type=Path, help="report path (default <out>/eval_report.txt)")
    evaluate.add_argument("--samples", type=int, default=8, help="generated images to write (0 disables)")

    embeddings = commands.add_parser("export-embeddings", parents=[common], help="write image and label features")
    embeddings.add_argument("--split", default="test")
    embeddings.add_argument("--output", type=Path)
    embeddings.add_argument("--checkpoint", type=Path)

    simmap = commands.add_parser("simmap", parents=[common], help="class similarity map as CSV")
    simmap.add_argument("--split", default="test")
    simmap.add_argument("--output", type=Path)
    simmap.add_argument("--checkpoint", type=Path)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items() if getattr(args, flag) is not None}
    overrides.update(parse_overrides(args.set))
    return RunConfig.load(args.config, overrides)


def _dataset(config: RunConfig) -> Dataset:
    return load_dataset(config.data_dir, config.image_encoder_config().spec, config.max_len)


def _trainer(config: RunConfig, dataset: Dataset) -> LaviterTrainer:
    return LaviterTrainer(config, len(dataset.vocab), config.out_dir)


def cmd_gen_data(config: RunConfig, args) -> None:
    spec = CorpusSpec(
        train=config.corpus_train,
        test=config.corpus_test,
        captions_per_image=config.captions_per_image,
        max_objects=config.max_objects,
        image_size=config.image_size,
        seed=config.seed,
    )
    gen_synthetic_corpus(spec, config.data_dir)


def cmd_convert_coco(config: RunConfig, args) -> None:
    convert_coco(args.captions, args.instances, config.data_dir, args.image_dir, args.split, config.max_len)


def cmd_train(config: RunConfig, args) -> None:
    dataset = _dataset(config)
    trainer = _trainer(config, dataset)
    plan = phase_plan(config, TRAIN_COMMANDS[args.command])
    atomic_write_text(Path(config.out_dir) / f"{plan.name}_config.txt", config.to_text())
    result = trainer.run_phase(plan, dataset)
    print(f"{plan.name}: {result.steps} steps, checkpoint {result.checkpoint}")


def cmd_eval(config: RunConfig, args) -> None:
    dataset = _dataset(config)
    trainer = _trainer(config, dataset)
    restored = trainer.restore_for_evaluation(args.checkpoint)
    report = trainer.evaluate(
        dataset,
        split=args.split,
        top_k=args.top_k,
        pool_size=args.pool,
        include_captions="captioner" in restored,
    )
    path = trainer.write_report(report, args.report)
    if "captioner" in restored:
        trainer.export_captions(dataset, args.split, Path(config.out_dir) / "captions.txt")
    if "gan" in restored and args.samples:
        trainer.export_samples(dataset, args.split, Path(config.out_dir) / "samples", args.samples)
    print(path.read_text(encoding="utf-8"), end="")


def cmd_export_embeddings(config: RunConfig, args) -> None:
    dataset = _dataset(config)
    trainer = _trainer(config, dataset)
    trainer.restore_for_evaluation(args.checkpoint)
    output = args.output or Path(config.out_dir) / "embeddings.csv"
    print(trainer.export_embeddings(dataset, args.split, output))


def cmd_simmap(config: RunConfig, args) -> None:
    dataset = _dataset(config)
    trainer = _trainer(config, dataset)
    trainer.restore_for_evaluation(args.checkpoint)
    output = args.output or Path(config.out_dir) / "similarity_map.csv"
    trainer.similarity_map(dataset, args.split, output)
    print(output.read_text(encoding="utf-8"), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "convert-coco": cmd_convert_coco,
    **{name: cmd_train for name in TRAIN_COMMANDS},
    "eval": cmd_eval,
    "export-embeddings": cmd_export_embeddings,
    "simmap": cmd_simmap,
}


def run_cli(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and run one command; returns the process exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args)
        COMMANDS[args.command](config, args)
    except LaviterError as e:
        log.error(f"{args.command} failed: {e}")
        return 1
    return 0
