"""
Basic tests for the package.

This ensures all modules are importable and that the config is valid.
"""


def test_import_app():
    from laviter.application import LaviterTrainer

    assert LaviterTrainer
    assert LaviterTrainer.run_phase is not None
    assert LaviterTrainer.evaluate is not None


def test_config():
    from laviter.app_config import LaviterConfig

    schema = LaviterConfig.to_schema()
    assert isinstance(schema, dict)
    assert len(schema["properties"]) > 0


def test_tags():
    from laviter.app_tags import LossTrace

    assert LossTrace


def test_cli():
    from laviter import main
    from laviter.cli import build_parser

    assert main
    assert build_parser().prog == "laviter"
