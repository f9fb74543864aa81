"""Observation sources: inline arrays, CSV files and seeded generators."""

import csv
import logging
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np

from flowdense.exceptions import DataError
from flowdense.models import CsvData, GeneratorData, InlineData

logger = logging.getLogger(__name__)

RNG_NAME = "PCG64"


def _as_matrix(values, dim: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=float)
    except (TypeError, ValueError) as e:
        raise DataError("data values must be numeric", original_error=e) from e
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DataError(f"data must be a non-empty (n, d) array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DataError(f"data have dimension {arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise DataError("data contain non-finite values")
    return arr


def read_csv(path: Path | str, columns: list[str] | None = None) -> np.ndarray:
    """Read observations from a CSV file.

    A first row that does not parse as numbers is taken as the header; with a
    header, `columns` selects columns by name, otherwise every column is used.

    Raises:
        DataError: If the file is missing, unreadable or holds non-numeric cells.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    except OSError as e:
        raise DataError(f"cannot read data file {path}", original_error=e) from e
    if not rows:
        raise DataError(f"data file {path} is empty")

    header: list[str] | None = None
    try:
        [float(cell) for cell in rows[0]]
    except ValueError:
        header = [cell.strip() for cell in rows[0]]
        rows = rows[1:]

    if columns is not None:
        if header is None:
            raise DataError(f"data file {path} has no header to select columns {columns} from")
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"data file {path} lacks columns {missing}")
        index = [header.index(c) for c in columns]
        rows = [[row[i] for i in index] for row in rows]

    try:
        values = [[float(cell) for cell in row] for row in rows]
    except (ValueError, IndexError) as e:
        raise DataError(f"non-numeric or ragged rows in {path}", original_error=e) from e
    if len({len(row) for row in values}) > 1:
        raise DataError(f"ragged rows in {path}")
    return _as_matrix(values)


# ============================================================================
# Generators
# ============================================================================


def truncated_normal_mixture(
    n: int,
    rng: np.random.Generator,
    weights: Sequence[float] = (0.5, 0.5),
    means: Sequence[float] = (0.25, 0.7),
    sds: Sequence[float] = (0.1, 0.12),
    low: float = 0.0,
    high: float = 1.0,
) -> np.ndarray:
    """Normal mixture conditioned on [low, high], drawn by rejection."""
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float)
    if not (weights.shape == means.shape == sds.shape) or np.any(sds <= 0) or np.any(weights < 0):
        raise DataError("mixture weights, means and sds must align, with positive sds")
    probs = weights / weights.sum()
    out = np.empty(0)
    while out.size < n:
        batch = max(2 * (n - out.size), 16)
        comp = rng.choice(probs.size, size=batch, p=probs)
        draws = means[comp] + sds[comp] * rng.standard_normal(batch)
        out = np.concatenate([out, draws[(draws >= low) & (draws <= high)]])
    return out[:n, None]


def chi2_normal_mixture(
    n: int,
    rng: np.random.Generator,
    df: float = 20,
    mu: float = 55.0,
    sigma: float = 3.0,
    weight: float = 0.7,
) -> np.ndarray:
    """weight * chi^2_df + (1 - weight) * N(mu, sigma^2); chi^2 drawn as sums of squared normals."""
    df = int(df)
    if df < 1 or sigma <= 0 or not 0.0 <= weight <= 1.0:
        raise DataError("need df >= 1, sigma > 0 and weight in [0, 1]")
    first = rng.random(n) < weight
    chi2 = np.sum(rng.standard_normal((n, df)) ** 2, axis=1)
    normal = mu + sigma * rng.standard_normal(n)
    return np.where(first, chi2, normal)[:, None]


def gaussian(
    n: int, rng: np.random.Generator, mu: float | list[float] = 0.0, sigma: float = 1.0, dim: int = 1
) -> np.ndarray:
    mu_arr = np.broadcast_to(np.asarray(mu, dtype=float), (int(dim),))
    if sigma <= 0:
        raise DataError("sigma must be positive")
    return mu_arr + sigma * rng.standard_normal((n, int(dim)))


GENERATORS: dict[str, Callable[..., np.ndarray]] = {
    "truncated_normal_mixture": truncated_normal_mixture,
    "chi2_normal_mixture": chi2_normal_mixture,
    "gaussian": gaussian,
}


def generate(name: str, n: int, seed: int, params: dict | None = None) -> np.ndarray:
    """Seeded draw of n observations from a named generator."""
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise DataError(f"unknown generator {name!r}") from None
    rng = np.random.Generator(np.random.PCG64(seed))
    try:
        values = fn(n, rng, **(params or {}))
    except TypeError as e:
        raise DataError(f"invalid parameters for generator {name!r}: {e}", original_error=e) from e
    logger.debug("generated %d observations from %s (seed %d)", n, name, seed)
    return _as_matrix(values)


def load_data(spec: InlineData | CsvData | GeneratorData, base_dir: Path | None = None) -> np.ndarray:
    """Materialise the observations a data spec describes.

    Relative CSV paths resolve against base_dir (the config file's folder).
    """
    if isinstance(spec, InlineData):
        return _as_matrix(spec.values)
    if isinstance(spec, CsvData):
        path = spec.path if spec.path.is_absolute() or base_dir is None else base_dir / spec.path
        return read_csv(path, spec.columns)
    return generate(spec.generator, spec.n, spec.seed, spec.params)
