"""Spatio-temporal data model: gridded panel container and file I/O.

The central type is :class:`DataCube`, an immutable container holding a
response variable, one or more treatment columns and optional covariate
columns for ``n`` spatial locations observed at ``m`` regular time steps.
Missing observations are first class: every variable can be missing per cell
(stored as NaN) and estimators decide how to treat them.

Cubes are read from and written to long-format delimited text with one row
per (location, time) pair.  Estimation and test results are written as
versioned JSON documents that round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DataError, IntegrityError, LayoutError, ParseError

RESULTS_SCHEMA_VERSION = "lscm-results-1"

_TREATMENT_PATTERN = re.compile(r"^x(\d+)$")
_COVARIATE_PATTERN = re.compile(r"^w(\d+)$")


@dataclass(frozen=True)
class Location:
    """A spatial observation site: an opaque id plus planar coordinates."""

    id: str
    s1: float
    s2: float

    def __post_init__(self):
        if not self.id:
            raise DataError("location id must be a non-empty string")
        object.__setattr__(self, "s1", float(self.s1))
        object.__setattr__(self, "s2", float(self.s2))
        if not (math.isfinite(self.s1) and math.isfinite(self.s2)):
            raise DataError(f"location {self.id!r} has non-finite coordinates")

    @property
    def coords(self) -> tuple[float, float]:
        return (self.s1, self.s2)


@dataclass(frozen=True, eq=False)
class DataCube:
    """Multivariate observations on fixed locations and regular time steps.

    Parameters
    ----------
    locations : tuple of Location
        The ``n`` spatial sites, ids unique.
    response : ndarray, shape (n, m)
        Response values; NaN marks a missing cell.
    treatments : ndarray, shape (n, m, d)
        Treatment values, ``d >= 1``; NaN marks a missing cell per variable.
    covariates : ndarray, shape (n, m, q)
        Observed covariates, possibly ``q == 0``.
    time_labels : tuple of int
        Original labels of the ``m`` time steps (e.g. calendar years).  They
        must be contiguous integers; internally time is always indexed
        ``1..m`` and the labels are metadata only.
    treatment_names, covariate_names : tuple of str
        Column names used when writing the cube back to delimited text.

    The container is immutable after construction and safe to share across
    threads; all arrays are marked read-only.
    """

    locations: tuple[Location, ...]
    response: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    time_labels: tuple[int, ...]
    treatment_names: tuple[str, ...]
    covariate_names: tuple[str, ...]
    transposed_from: "DataCube | None" = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "locations", tuple(self.locations))
        resp = _as_readonly_float(self.response, "response")
        treat = _as_readonly_float(self.treatments, "treatments")
        cov = _as_readonly_float(self.covariates, "covariates")
        object.__setattr__(self, "response", resp)
        object.__setattr__(self, "treatments", treat)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "time_labels", tuple(int(t) for t in self.time_labels))
        object.__setattr__(self, "treatment_names", tuple(self.treatment_names))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        self._validate()
        ids = [loc.id for loc in self.locations]
        object.__setattr__(self, "_id_index", {i: k for k, i in enumerate(ids)})
        order = np.array(sorted(range(len(ids)), key=ids.__getitem__), dtype=np.intp)
        order.setflags(write=False)
        object.__setattr__(self, "_sorted_order", order)

    def _validate(self):
        n, m = self.response.shape if self.response.ndim == 2 else (-1, -1)
        if self.response.ndim != 2:
            raise DataError("response must be a 2-d array of shape (n, m)")
        if len(self.locations) != n:
            raise DataError(f"{len(self.locations)} locations but response has {n} rows")
        if self.treatments.ndim != 3 or self.treatments.shape[:2] != (n, m):
            raise DataError("treatments must have shape (n, m, d) matching the response")
        if self.treatments.shape[2] < 1:
            raise DataError("at least one treatment variable is required")
        if self.covariates.ndim != 3 or self.covariates.shape[:2] != (n, m):
            raise DataError("covariates must have shape (n, m, q) matching the response")
        if len(self.time_labels) != m:
            raise DataError(f"{len(self.time_labels)} time labels but response has {m} columns")
        for a, b in zip(self.time_labels[:-1], self.time_labels[1:]):
            if b != a + 1:
                raise IntegrityError(f"time labels must be contiguous; {a} is followed by {b}")
        if len(self.treatment_names) != self.treatments.shape[2]:
            raise DataError("treatment_names length must match the treatment dimension")
        if len(self.covariate_names) != self.covariates.shape[2]:
            raise DataError("covariate_names length must match the covariate dimension")
        ids = [loc.id for loc in self.locations]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise IntegrityError(f"duplicate location ids: {dup[:5]}")
        for arr, name in ((self.response, "response"), (self.treatments, "treatments"),
                          (self.covariates, "covariates")):
            if arr.size and np.isinf(arr).any():
                raise DataError(f"{name} contains infinite values; use NaN for missing cells")

    @classmethod
    def from_arrays(cls, locations, response, treatments, covariates=None, *,
                    time_labels=None, treatment_names=None, covariate_names=None,
                    ) -> "DataCube":
        """Build a cube from plain arrays, filling in defaults.

        ``treatments`` may be (n, m) for a single treatment variable;
        ``covariates`` defaults to an empty (n, m, 0) block, ``time_labels``
        to ``1..m`` and names to ``x1..`` / ``w1..``.
        """
        response = np.asarray(response, dtype=float)
        treatments = np.asarray(treatments, dtype=float)
        if treatments.ndim == 2:
            treatments = treatments[:, :, None]
        n, m = response.shape
        if covariates is None:
            covariates = np.empty((n, m, 0))
        else:
            covariates = np.asarray(covariates, dtype=float)
            if covariates.ndim == 2:
                covariates = covariates[:, :, None]
        if time_labels is None:
            time_labels = tuple(range(1, m + 1))
        if treatment_names is None:
            treatment_names = tuple(f"x{j + 1}" for j in range(treatments.shape[2]))
        if covariate_names is None:
            covariate_names = tuple(f"w{j + 1}" for j in range(covariates.shape[2]))
        return cls(tuple(locations), response, treatments, covariates,
                   tuple(time_labels), tuple(treatment_names), tuple(covariate_names))

    # -- shape accessors ---------------------------------------------------
    @property
    def n(self) -> int:
        return self.response.shape[0]

    @property
    def m(self) -> int:
        return self.response.shape[1]

    @property
    def n_treatments(self) -> int:
        return self.treatments.shape[2]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    @property
    def times(self) -> tuple[int, ...]:
        """Internal time indices, always 1..m."""
        return tuple(range(1, self.m + 1))

    @property
    def location_ids(self) -> tuple[str, ...]:
        return tuple(loc.id for loc in self.locations)

    @property
    def sorted_order(self) -> np.ndarray:
        """Location indices ordered by id; fixes every aggregation order."""
        return self._sorted_order

    def index_of(self, location_id: str) -> int:
        try:
            return self._id_index[location_id]
        except KeyError:
            raise KeyError(f"unknown location id {location_id!r}") from None

    def _with_response(self, response: np.ndarray) -> "DataCube":
        """Cheap copy sharing everything but the response array."""
        arr = np.array(response, dtype=float)
        if arr.shape != self.response.shape:
            raise DataError("replacement response has a different shape")
        arr.setflags(write=False)
        new = object.__new__(DataCube)
        for f in fields(DataCube):
            object.__setattr__(new, f.name, getattr(self, f.name))
        object.__setattr__(new, "response", arr)
        object.__setattr__(new, "_id_index", self._id_index)
        object.__setattr__(new, "_sorted_order", self._sorted_order)
        return new

    def __eq__(self, other) -> bool:
        if not isinstance(other, DataCube):
            return NotImplemented
        return (self.locations == other.locations
                and self.time_labels == other.time_labels
                and self.treatment_names == other.treatment_names
                and self.covariate_names == other.covariate_names
                and np.array_equal(self.response, other.response, equal_nan=True)
                and np.array_equal(self.treatments, other.treatments, equal_nan=True)
                and np.array_equal(self.covariates, other.covariates, equal_nan=True))

    __hash__ = None


def _as_readonly_float(arr, name: str) -> np.ndarray:
    try:
        out = np.array(arr, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{name} is not numeric: {exc}") from exc
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Regular-grid layout detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridLayout:
    """Row/column structure of locations that form a complete regular grid."""

    axis1: np.ndarray  # sorted distinct s1 values, equally spaced
    axis2: np.ndarray  # sorted distinct s2 values, equally spaced
    index: np.ndarray  # (len(axis1), len(axis2)) location indices


def grid_layout(cube: DataCube) -> GridLayout:
    """Detect the regular-grid layout of a cube's locations.

    The locations must be exactly the cross product of equally spaced s1
    values and equally spaced s2 values (either axis may be a single value).
    Raises :class:`LayoutError` otherwise.
    """
    s1 = np.array([loc.s1 for loc in cube.locations])
    s2 = np.array([loc.s2 for loc in cube.locations])
    u1 = np.unique(s1)
    u2 = np.unique(s2)
    if len(u1) * len(u2) != cube.n:
        raise LayoutError(
            f"{cube.n} locations cannot form a complete {len(u1)}x{len(u2)} grid")
    for u, name in ((u1, "s1"), (u2, "s2")):
        if len(u) > 1:
            d = np.diff(u)
            if not np.allclose(d, d[0], rtol=1e-9, atol=0.0):
                raise LayoutError(f"{name} values are not equally spaced")
    pos = {(a, b): k for k, (a, b) in enumerate(zip(s1, s2))}
    index = np.empty((len(u1), len(u2)), dtype=np.intp)
    for i, a in enumerate(u1):
        for j, b in enumerate(u2):
            try:
                index[i, j] = pos[(a, b)]
            except KeyError:
                raise LayoutError(
                    f"grid cell ({a:g}, {b:g}) has no location; layout is irregular"
                ) from None
    return GridLayout(axis1=u1, axis2=u2, index=index)


def transpose_axes(cube: DataCube) -> DataCube:
    """Exchange the roles of the temporal axis and the first spatial axis.

    Supports the model variant in which the latent confounders are constant
    across one spatial direction instead of time: each original time step
    becomes a row of "locations" and the first grid axis becomes the new time
    axis.  Requires the locations to lie on a regular grid.

    Transposing a transposed cube returns the original object, so the
    operation is an exact involution.
    """
    if cube.transposed_from is not None:
        return cube.transposed_from
    layout = grid_layout(cube)
    a, b, m = len(layout.axis1), len(layout.axis2), cube.m

    resp = cube.response[layout.index]            # (a, b, m)
    treat = cube.treatments[layout.index]         # (a, b, m, d)
    cov = cube.covariates[layout.index]
    new_resp = resp.transpose(2, 1, 0).reshape(m * b, a)
    new_treat = treat.transpose(2, 1, 0, 3).reshape(m * b, a, cube.n_treatments)
    new_cov = cov.transpose(2, 1, 0, 3).reshape(m * b, a, cube.n_covariates)

    new_locations = []
    for t in cube.time_labels:
        for j, v in enumerate(layout.axis2):
            loc_id = f"t{t}" if b == 1 else f"t{t}_r{j + 1}"
            new_locations.append(Location(loc_id, float(t), float(v)))
    return DataCube(
        locations=tuple(new_locations),
        response=new_resp,
        treatments=new_treat,
        covariates=new_cov,
        time_labels=tuple(range(1, a + 1)),
        treatment_names=cube.treatment_names,
        covariate_names=cube.covariate_names,
        transposed_from=cube,
    )


# ---------------------------------------------------------------------------
# Long-format delimited text
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CubeSchema:
    """Column mapping for long-format cube files.

    ``treatments`` and ``covariates`` may be ``None`` to pick up the default
    header names ``x1, x2, ...`` and ``w1, w2, ...`` automatically.
    """

    loc_id: str = "loc_id"
    s1: str = "s1"
    s2: str = "s2"
    time: str = "t"
    response: str = "y"
    treatments: tuple[str, ...] | None = None
    covariates: tuple[str, ...] | None = None
    delimiter: str = ","


def read_cube(path, schema: CubeSchema = CubeSchema()) -> DataCube:
    """Read a cube from long-format delimited text.

    The (location, time) grid of the returned cube is the cross product of
    the observed location ids and observed time indices; rows absent from the
    file become missing cells and empty fields become per-variable missing
    values.  Locations are ordered by id, so the result does not depend on
    the row order of the file.

    Raises
    ------
    ParseError
        Malformed header or row (reported with its line number).
    IntegrityError
        Duplicate (id, t) keys, inconsistent coordinates, or a gap in the
        observed time indices.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        col = {name: k for k, name in enumerate(header)}
        for required in (schema.loc_id, schema.s1, schema.s2, schema.time, schema.response):
            if required not in col:
                raise ParseError(f"{path}: header (line 1) is missing column {required!r}")
        x_names = schema.treatments
        if x_names is None:
            x_names = _detect_columns(header, _TREATMENT_PATTERN)
            if not x_names:
                raise ParseError(
                    f"{path}: no treatment columns found (expected x1, x2, ... or an "
                    "explicit schema)")
        w_names = schema.covariates
        if w_names is None:
            w_names = _detect_columns(header, _COVARIATE_PATTERN)
        for name in tuple(x_names) + tuple(w_names):
            if name not in col:
                raise ParseError(f"{path}: header (line 1) is missing column {name!r}")

        value_cols = [col[schema.response]] + [col[c] for c in x_names] + [col[c] for c in w_names]
        coords: dict[str, tuple[float, float]] = {}
        rows: dict[tuple[str, int], list[float]] = {}
        times_seen: set[int] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            loc_id = row[col[schema.loc_id]].strip()
            if not loc_id:
                raise ParseError(f"{path}: line {lineno}: empty location id")
            try:
                s1 = float(row[col[schema.s1]])
                s2 = float(row[col[schema.s2]])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: bad coordinate value") from None
            try:
                t = int(row[col[schema.time]])
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: time index {row[col[schema.time]]!r} "
                    "is not an integer") from None
            values = []
            for c in value_cols:
                text = row[c].strip()
                if text == "":
                    values.append(math.nan)
                else:
                    try:
                        values.append(float(text))
                    except ValueError:
                        raise ParseError(
                            f"{path}: line {lineno}: non-numeric value {text!r} in "
                            f"column {header[c]!r}") from None
            if loc_id in coords and coords[loc_id] != (s1, s2):
                raise IntegrityError(
                    f"{path}: line {lineno}: location {loc_id!r} has inconsistent "
                    f"coordinates")
            coords.setdefault(loc_id, (s1, s2))
            key = (loc_id, t)
            if key in rows:
                raise IntegrityError(
                    f"{path}: line {lineno}: duplicate row for location {loc_id!r}, t={t}")
            rows[key] = values
            times_seen.add(t)

    if not rows:
        raise ParseError(f"{path}: no data rows")
    t_sorted = sorted(times_seen)
    expected = list(range(t_sorted[0], t_sorted[-1] + 1))
    missing = sorted(set(expected) - times_seen)
    if missing:
        raise IntegrityError(f"{path}: non-contiguous time index; missing t={missing[0]}")

    ids = sorted(coords)
    n, m = len(ids), len(expected)
    d, q = len(x_names), len(w_names)
    response = np.full((n, m), math.nan)
    treatments = np.full((n, m, d), math.nan)
    covariates = np.full((n, m, q), math.nan)
    t_index = {t: k for k, t in enumerate(expected)}
    id_index = {loc_id: k for k, loc_id in enumerate(ids)}
    for (loc_id, t), values in rows.items():
        i, k = id_index[loc_id], t_index[t]
        response[i, k] = values[0]
        treatments[i, k, :] = values[1:1 + d]
        covariates[i, k, :] = values[1 + d:]

    locations = tuple(Location(i, *coords[i]) for i in ids)
    return DataCube(locations, response, treatments, covariates,
                    tuple(expected), tuple(x_names), tuple(w_names))


def _detect_columns(header, pattern) -> tuple[str, ...]:
    found = [(int(mt.group(1)), name) for name in header if (mt := pattern.match(name))]
    return tuple(name for _, name in sorted(found))


def write_cube(cube: DataCube, path, schema: CubeSchema = CubeSchema()) -> None:
    """Write a cube as long-format delimited text readable by :func:`read_cube`.

    Rows are sorted by (location id, time); cells missing every variable are
    skipped entirely and per-variable missing values become empty fields.
    """
    path = Path(path)
    header = ([schema.loc_id, schema.s1, schema.s2, schema.time, schema.response]
              + list(cube.treatment_names) + list(cube.covariate_names))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=schema.delimiter)
        writer.writerow(header)
        for i in cube.sorted_order:
            loc = cube.locations[i]
            for k, t in enumerate(cube.time_labels):
                cells = ([cube.response[i, k]] + list(cube.treatments[i, k, :])
                         + list(cube.covariates[i, k, :]))
                if all(math.isnan(v) for v in cells):
                    continue
                writer.writerow([loc.id, repr(loc.s1), repr(loc.s2), t]
                                + ["" if math.isnan(v) else repr(float(v)) for v in cells])


# ---------------------------------------------------------------------------
# Result documents
# ---------------------------------------------------------------------------

def write_results(result, path, provenance: dict | None = None) -> None:
    """Write an estimation or test result as a versioned JSON document.

    The document contains a top-level ``schema_version``, the result kind,
    every field of the result object in a stable order, and a provenance
    block (seed and scheme where applicable, plus a configuration hash).
    Callers may pass a richer ``provenance`` mapping; otherwise one is
    derived from the result itself.  Reading the file back with
    :func:`read_results` reproduces the object exactly.
    """
    kind = getattr(type(result), "document_kind", None)
    if kind is None or not hasattr(result, "to_payload"):
        raise DataError(f"cannot serialize object of type {type(result).__name__}")
    payload = result.to_payload()
    doc = {"schema_version": RESULTS_SCHEMA_VERSION, "kind": kind, "payload": payload,
           "provenance": _default_provenance(kind, payload) if provenance is None
           else provenance}
    text = json.dumps(doc, indent=2, allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def _default_provenance(kind: str, payload: dict) -> dict:
    if kind == "test_result":
        config = {"statistic": payload["statistic_name"],
                  "b_resamples": payload["b_resamples"],
                  "scheme": payload["scheme"], "seed": payload["seed"]}
        return {"seed": payload["seed"], "scheme": payload["scheme"]["kind"],
                "config_hash": config_digest(config)}
    config = {"method": payload["method"], "params": payload["params"],
              "basis_names": payload["basis_names"]}
    return {"method": payload["method"], "config_hash": config_digest(config)}


def read_results(path):
    """Read a result document written by :func:`write_results`."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not a valid result document: {exc}") from exc
    version = doc.get("schema_version")
    if version != RESULTS_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {version!r}")
    kind = doc.get("kind")
    payload = doc.get("payload")
    from .estimators import EffectEstimate
    from .resampling import TestResult
    for cls in (EffectEstimate, TestResult):
        if kind == cls.document_kind:
            return cls.from_payload(payload)
    raise DataError(f"{path}: unknown result kind {kind!r}")


def config_digest(config: dict) -> str:
    """Stable hash of a configuration mapping, for provenance blocks."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()
