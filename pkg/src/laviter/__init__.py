from .cli import run_cli


def main():
    """Main entry point for the laviter command line."""
    raise SystemExit(run_cli())
