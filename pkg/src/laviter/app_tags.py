import logging
from pathlib import Path

from .utils import atomic_write_text

log = logging.getLogger(__name__)


class LossTrace:
    """Per-step loss components of one training phase.

    Every step is one comma-separated line: the step index followed by the
    component values in ``columns`` order, written with full float precision.
    """

    def __init__(self, name: str, columns: list[str]):
        self.name = name
        self.columns = list(columns)
        self.rows: list[tuple[int, tuple[float, ...]]] = []

    def __len__(self) -> int:
        return len(self.rows)

    def record(self, step: int, components: dict[str, float]) -> None:
        missing = [c for c in self.columns if c not in components]
        if missing:
            raise KeyError(f"trace {self.name} is missing components {missing}")
        self.rows.append((step, tuple(float(components[c]) for c in self.columns)))

    def last(self) -> dict[str, float]:
        if not self.rows:
            return {}
        return dict(zip(self.columns, self.rows[-1][1]))

    def to_csv(self) -> str:
        lines = [",".join(["step", *self.columns])]
        lines += [",".join([str(step), *(repr(v) for v in values)]) for step, values in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, directory: Path | str) -> Path:
        path = Path(directory) / f"{self.name}_trace.csv"
        atomic_write_text(path, self.to_csv())
        log.info(f"wrote {len(self.rows)} trace rows to {path}")
        return path
