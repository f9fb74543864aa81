"""Writing run artifacts (JSON documents, CSV tables) and persisting fitted models."""

import csv
import json
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ValidationError

from flowdense.datasets import RNG_NAME
from flowdense.estimator import DensityEstimate
from flowdense.exceptions import ArtifactError
from flowdense.flow import TimeGrid
from flowdense.kernel import make_kernel
from flowdense.models import KernelRecord, ModelDocument, RngRecord, target_spec_of

logger = logging.getLogger(__name__)


def format_float(value: float) -> str:
    """Shortest decimal that round-trips to the same double."""
    return repr(float(value))


def model_document(estimate: DensityEstimate, seed: int | None = None) -> ModelDocument:
    """Describe a fitted estimate as a model document."""
    return ModelDocument(
        kernel=KernelRecord(family=estimate.kernel.family, sigma=estimate.kernel.sigma, dim=estimate.kernel.dim),
        knots=estimate.knots.knots.tolist(),
        momenta=estimate.knots.momenta.tolist(),
        target=target_spec_of(estimate.target),
        steps=estimate.grid.steps,
        lam=estimate.lam,
        rng=RngRecord(name=RNG_NAME, seed=seed),
    )


def dump_model(document: ModelDocument) -> str:
    return document.model_dump_json(by_alias=True, indent=2) + "\n"


def load_model(path: Path | str) -> DensityEstimate:
    """Rebuild an estimate from model.json; data, trajectory and report are not stored.

    Raises:
        ArtifactError: If the file is missing or is not a valid model document.
    """
    path = Path(path)
    try:
        document = ModelDocument.model_validate_json(path.read_text())
    except (OSError, ValidationError) as e:
        raise ArtifactError(str(path), original_error=e) from e
    kernel = make_kernel(document.kernel.family, document.kernel.sigma, document.kernel.dim)
    return DensityEstimate(
        kernel=kernel,
        knots=document.knot_system(),
        target=document.target.build(),
        grid=TimeGrid(document.steps),
        lam=document.lam,
    )


class ArtifactWriter:
    """Writes the files of one run into an output directory."""

    def __init__(self, output_dir: Path | str) -> None:
        """Create the output directory if needed.

        Raises:
            ValueError: If output_dir is empty.
            ArtifactError: If the directory cannot be created.
        """
        if not str(output_dir).strip():
            raise ValueError("Output directory must not be empty")
        self.output_dir = Path(output_dir)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactError(str(self.output_dir), original_error=e) from e
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def _write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        try:
            target.write_text(text, newline="\n")
        except OSError as e:
            raise ArtifactError(str(target), original_error=e) from e
        self.written.append(target)
        logger.debug("wrote %s", target)
        return target

    def write_json(self, name: str, document: BaseModel | dict[str, Any]) -> Path:
        """Serialise a pydantic model (by alias) or a plain dict as indented JSON."""
        if isinstance(document, BaseModel):
            text = document.model_dump_json(by_alias=True, indent=2)
        else:
            text = json.dumps(document, indent=2, allow_nan=True)
        return self._write_text(name, text + "\n")

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Header plus rows; floats in round-trip precision, LF line endings."""
        target = self.path(name)
        try:
            with target.open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                for row in rows:
                    writer.writerow(
                        [format_float(v) if isinstance(v, float | np.floating) else v for v in row]
                    )
        except OSError as e:
            raise ArtifactError(str(target), original_error=e) from e
        self.written.append(target)
        logger.debug("wrote %s", target)
        return target

    def write_points(self, name: str, points: np.ndarray, extra: dict[str, np.ndarray] | None = None) -> Path:
        """(m, d) points as columns x (d=1) or x0..x{d-1}, plus optional per-row columns."""
        points = np.asarray(points, dtype=float)
        dim = points.shape[1] if points.ndim == 2 else 1
        points = points.reshape(-1, dim)
        header = ["x"] if dim == 1 else [f"x{i}" for i in range(dim)]
        extra = extra or {}
        header += list(extra)
        columns = [points[:, i] for i in range(dim)] + [np.asarray(v).reshape(-1) for v in extra.values()]
        rows = ([float(c[r]) if c.dtype.kind == "f" else c[r].item() for c in columns] for r in range(points.shape[0]))
        return self.write_csv(name, header, rows)

    def write_model(self, estimate: DensityEstimate, seed: int | None = None, name: str = "model.json") -> Path:
        return self._write_text(name, dump_model(model_document(estimate, seed)))
