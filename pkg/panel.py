"""Longitudinal panel data: units observed over T periods with binary treatments.

Column convention for CSV files: ``id, z1..zT, x{t}_{p}, y, c1..cT``.
"""
from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

from errors import DataError

logger = logging.getLogger('bao.panel')

_X_COLUMN = re.compile(r'^x(\d+)_(\d+)$')
_Z_COLUMN = re.compile(r'^z(\d+)$')
_C_COLUMN = re.compile(r'^c(\d+)$')


@dataclass(frozen=True)
class TreatmentPath:
    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise ValueError('Treatment path must have at least one period')
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f'Treatment path bits must be 0 or 1, got {bits}')
        object.__setattr__(self, 'bits', bits)

    @classmethod
    def from_label(cls, label):
        return cls(tuple(int(ch) for ch in str(label)))

    @property
    def T(self):
        return len(self.bits)

    @property
    def label(self):
        return ''.join(str(b) for b in self.bits)

    def prefix(self, t):
        return self.bits[:t]

    def __str__(self):
        return self.label


def all_paths(T):
    return [TreatmentPath(bits) for bits in itertools.product((0, 1), repeat=T)]


@dataclass(frozen=True)
class ColumnMapping:
    id: str
    z: tuple
    x: tuple
    y: str
    c: tuple | None = None

    def __post_init__(self):
        if len(self.x) != len(self.z):
            raise ValueError('Column mapping needs one covariate group per treatment period')
        if any(len(group) == 0 for group in self.x):
            raise ValueError('Every period needs at least one covariate column')
        if self.c is not None and len(self.c) != len(self.z):
            raise ValueError('Censoring columns must match the number of periods')

    @classmethod
    def default(cls, T, P, censoring=False):
        return cls(
            id='id',
            z=tuple(f'z{t}' for t in range(1, T + 1)),
            x=tuple(tuple(f'x{t}_{p}' for p in range(1, P[t - 1] + 1)) for t in range(1, T + 1)),
            y='y',
            c=tuple(f'c{t}' for t in range(1, T + 1)) if censoring else None,
        )

    @classmethod
    def infer(cls, header):
        """Read the naming convention off a CSV header."""
        z = sorted((int(m.group(1)), name) for name in header if (m := _Z_COLUMN.match(name)))
        c = sorted((int(m.group(1)), name) for name in header if (m := _C_COLUMN.match(name)))
        x = {}
        for name in header:
            m = _X_COLUMN.match(name)
            if m:
                x.setdefault(int(m.group(1)), []).append((int(m.group(2)), name))
        if not z:
            raise DataError('Header has no treatment columns z1..zT')
        T = len(z)
        if [t for t, _ in z] != list(range(1, T + 1)):
            raise DataError('Treatment columns must be z1..zT without gaps')
        if sorted(x) != list(range(1, T + 1)):
            raise DataError('Covariate columns x{t}_{p} must exist for every period')
        if c and [t for t, _ in c] != list(range(1, T + 1)):
            raise DataError('Censoring columns must be c1..cT without gaps')
        for required in ('id', 'y'):
            if required not in header:
                raise DataError(f'Header is missing the {required!r} column')
        return cls(
            id='id',
            z=tuple(name for _, name in z),
            x=tuple(tuple(name for _, name in sorted(x[t])) for t in range(1, T + 1)),
            y='y',
            c=tuple(name for _, name in c) if c else None,
        )

    @property
    def columns(self):
        cols = [self.id, *self.z]
        for group in self.x:
            cols.extend(group)
        cols.append(self.y)
        if self.c:
            cols.extend(self.c)
        return cols

    def to_dict(self):
        return {
            'id': self.id,
            'z': list(self.z),
            'x': {f't{t}': list(group) for t, group in enumerate(self.x, start=1)},
            'y': self.y,
            'c': list(self.c) if self.c else None,
        }


@dataclass(frozen=True, eq=False)
class PanelDataset:
    ids: np.ndarray
    covariates: tuple
    treatments: np.ndarray
    outcome: np.ndarray
    censoring: np.ndarray | None = None
    covariate_labels: tuple = field(default=())

    def __post_init__(self):
        ids = np.asarray(self.ids).astype(str)
        covariates = tuple(np.array(x, dtype=float, ndmin=2) for x in self.covariates)
        treatments = np.asarray(self.treatments)
        outcome = np.asarray(self.outcome, dtype=float)
        censoring = None if self.censoring is None else np.asarray(self.censoring)

        if not self.covariate_labels:
            labels = tuple(
                tuple(f'x{t}_{p}' for p in range(1, x.shape[1] + 1))
                for t, x in enumerate(covariates, start=1)
            )
        else:
            labels = tuple(tuple(group) for group in self.covariate_labels)

        object.__setattr__(self, 'ids', ids)
        object.__setattr__(self, 'covariates', covariates)
        object.__setattr__(self, 'outcome', outcome)
        object.__setattr__(self, 'covariate_labels', labels)
        self._validate(treatments, censoring)

    def _validate(self, treatments, censoring):
        n = self.ids.shape[0]
        if n < 1:
            raise DataError('Dataset must contain at least one unit')
        if treatments.ndim != 2 or treatments.shape[0] != n:
            raise DataError(f'Treatment matrix must be n x T with n={n}', field='treatments')
        T = treatments.shape[1]
        if T < 1:
            raise DataError('Dataset must contain at least one period', field='treatments')
        if len(self.covariates) != T:
            raise DataError(f'Expected {T} covariate blocks, got {len(self.covariates)}', field='covariates')
        if self.outcome.shape != (n,):
            raise DataError('Outcome must be a length-n vector', field='y')
        for t, (x, labels) in enumerate(zip(self.covariates, self.covariate_labels), start=1):
            if x.shape[0] != n or x.shape[1] < 1:
                raise DataError(f'Covariate block {t} must be n x P_t with P_t >= 1', field=f'x{t}')
            if len(labels) != x.shape[1]:
                raise DataError(f'Covariate labels for t={t} do not match the block width', field=f'x{t}')

        if censoring is not None:
            if censoring.shape != (n, T):
                raise DataError('Censoring matrix must be n x T', field='censoring')
            bad = ~np.isin(censoring, (0, 1))
            if bad.any():
                i, t = np.argwhere(bad)[0]
                raise DataError(f'censoring not binary, unit {self.ids[i]}, t={t + 1}',
                                unit=self.ids[i], field=f'c{t + 1}')
            censoring = censoring.astype(np.int8)
            drops = np.diff(censoring, axis=1) < 0
            if drops.any():
                i = int(np.argwhere(drops)[0][0])
                raise DataError(f'censoring not monotone, unit {self.ids[i]}', unit=self.ids[i], field='censoring')

        bad = ~np.isin(treatments, (0, 1))
        if bad.any():
            i, t = np.argwhere(bad)[0]
            raise DataError(f'treatment not binary, unit {self.ids[i]}, t={t + 1}',
                            unit=self.ids[i], field=f'z{t + 1}')
        object.__setattr__(self, 'treatments', treatments.astype(np.int8))
        object.__setattr__(self, 'censoring', censoring)

        for t, x in enumerate(self.covariates, start=1):
            observed = self.observed_through(t - 1)
            bad_rows = observed & ~np.isfinite(x).all(axis=1)
            if bad_rows.any():
                i = int(np.flatnonzero(bad_rows)[0])
                p = int(np.flatnonzero(~np.isfinite(x[i]))[0])
                raise DataError(
                    f'covariate not finite, unit {self.ids[i]}, t={t}, column {self.covariate_labels[t - 1][p]}',
                    unit=self.ids[i], field=self.covariate_labels[t - 1][p])

        missing = self.observed_through(T) & ~np.isfinite(self.outcome)
        if missing.any():
            i = int(np.flatnonzero(missing)[0])
            raise DataError(f'outcome missing, unit {self.ids[i]}', unit=self.ids[i], field='y')

    def __repr__(self):
        return f'<PanelDataset n={self.n} T={self.T} P={self.P} censoring={self.has_censoring}>'

    @property
    def n(self):
        return self.ids.shape[0]

    @property
    def T(self):
        return self.treatments.shape[1]

    @property
    def P(self):
        return tuple(x.shape[1] for x in self.covariates)

    @property
    def has_censoring(self):
        return self.censoring is not None

    def observed_through(self, t):
        """Units with C_t = 0 (every unit at t = 0)."""
        if t <= 0 or self.censoring is None:
            return np.ones(self.n, dtype=bool)
        return self.censoring[:, t - 1] == 0

    def path_of(self, i):
        return TreatmentPath(tuple(self.treatments[i]))

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return PanelDataset(
            ids=self.ids[indices],
            covariates=tuple(x[indices] for x in self.covariates),
            treatments=self.treatments[indices],
            outcome=self.outcome[indices],
            censoring=None if self.censoring is None else self.censoring[indices],
            covariate_labels=self.covariate_labels,
        )

    def complete_cases(self):
        """Units never censored, with the censoring matrix dropped."""
        keep = np.flatnonzero(self.observed_through(self.T))
        subset = self.take(keep)
        return PanelDataset(
            ids=subset.ids,
            covariates=subset.covariates,
            treatments=subset.treatments,
            outcome=subset.outcome,
            censoring=None,
            covariate_labels=subset.covariate_labels,
        )

    def with_outcome(self, outcome):
        return PanelDataset(
            ids=self.ids,
            covariates=self.covariates,
            treatments=self.treatments,
            outcome=outcome,
            censoring=self.censoring,
            covariate_labels=self.covariate_labels,
        )

    def with_censoring(self, censoring):
        return PanelDataset(
            ids=self.ids,
            covariates=self.covariates,
            treatments=self.treatments,
            outcome=self.outcome,
            censoring=censoring,
            covariate_labels=self.covariate_labels,
        )

    def mapping(self):
        return ColumnMapping(
            id='id',
            z=tuple(f'z{t}' for t in range(1, self.T + 1)),
            x=self.covariate_labels,
            y='y',
            c=tuple(f'c{t}' for t in range(1, self.T + 1)) if self.has_censoring else None,
        )

    def equals(self, other):
        if not isinstance(other, PanelDataset):
            return False
        same_censoring = (self.censoring is None and other.censoring is None) or (
            self.censoring is not None and other.censoring is not None
            and np.array_equal(self.censoring, other.censoring))
        return (
            np.array_equal(self.ids, other.ids)
            and self.covariate_labels == other.covariate_labels
            and all(np.array_equal(a, b, equal_nan=True) for a, b in zip(self.covariates, other.covariates))
            and np.array_equal(self.treatments, other.treatments)
            and np.array_equal(self.outcome, other.outcome, equal_nan=True)
            and same_censoring
        )


@dataclass(frozen=True, eq=False)
class PathStrata:
    T: int
    n: int
    members: dict
    counts: dict
    n_observed: int

    def get(self, prefix):
        return self.members.get(tuple(prefix), np.empty(0, dtype=np.intp))

    def level(self, t):
        return {prefix: idx for prefix, idx in self.members.items() if len(prefix) == t}

    def realized_paths(self):
        return [TreatmentPath(bits) for bits, count in sorted(self.counts.items()) if count > 0]

    def count(self, path):
        bits = path.bits if isinstance(path, TreatmentPath) else tuple(path)
        return self.counts.get(bits, 0)

    def prevalence_fraction(self, path):
        if self.n_observed == 0:
            return Fraction(0)
        return Fraction(self.count(path), self.n_observed)

    def prevalence(self, path):
        return float(self.prevalence_fraction(path))

    def prevalences(self):
        return {path: self.prevalence(path) for path in self.realized_paths()}

    def to_dict(self):
        return {
            'T': self.T,
            'n': self.n,
            'n_observed': self.n_observed,
            'counts': {''.join(map(str, bits)): count for bits, count in sorted(self.counts.items())},
        }


def build_strata(data):
    members = {(): np.arange(data.n, dtype=np.intp)}
    for t in range(1, data.T + 1):
        observed = data.observed_through(t)
        idx = np.flatnonzero(observed)
        if idx.size == 0:
            continue
        codes = data.treatments[idx, :t].astype(np.int64) @ (1 << np.arange(t - 1, -1, -1))
        for code in np.unique(codes):
            prefix = tuple(int(b) for b in format(int(code), f'0{t}b'))
            members[prefix] = idx[codes == code]

    counts = {path.bits: len(members.get(path.bits, ())) for path in all_paths(data.T)}
    n_observed = int(data.observed_through(data.T).sum())
    strata = PathStrata(T=data.T, n=data.n, members=members, counts=counts, n_observed=n_observed)

    empty = [path.label for path in all_paths(data.T) if counts[path.bits] == 0]
    if empty:
        logger.info('paths with no units: %s', ', '.join(empty))
    return strata


def _parse_cell(raw, row, column, allow_blank):
    text = raw.strip()
    if text == '':
        if allow_blank:
            return math.nan
        raise DataError(f'empty cell in row {row}, column {column}', row=row, field=column)
    try:
        return float(text)
    except ValueError:
        raise DataError(f'non-numeric value {raw!r} in row {row}, column {column}', row=row, field=column)


def _read_frame(source):
    """Every cell as a string; fully blank lines are skipped."""
    if isinstance(source, Path):
        source = str(source)
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False, encoding='utf-8-sig')
    except pd.errors.EmptyDataError:
        raise DataError('CSV source is empty')
    except pd.errors.ParserError as e:
        raise DataError(f'malformed CSV: {e}')
    frame.columns = [str(name).strip() for name in frame.columns]
    return frame


def _parse_column(frame, rows, name, allow_blank):
    allow = np.broadcast_to(np.asarray(allow_blank, dtype=bool), (len(rows),))
    values = np.empty(len(rows))
    for i, raw in enumerate(frame[name].to_numpy()):
        values[i] = _parse_cell(raw, int(rows[i]), name, bool(allow[i]))
    return values


def load_panel(source, mapping=None):
    """Parse a panel CSV (path or stream) into a validated PanelDataset.

    Row indices in parse errors count data rows from 1 (the header is row 0).
    """
    frame = _read_frame(source)
    header = list(frame.columns)
    mapping = mapping or ColumnMapping.infer(header)
    missing = [name for name in mapping.columns if name not in header]
    if missing:
        raise DataError(f'columns missing from header: {", ".join(missing)}')

    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        i = int(np.flatnonzero(short)[0])
        cells = int(frame.iloc[i].notna().sum())
        raise DataError(f'row {i + 1} has {cells} cells, expected {len(header)}', row=i + 1)

    rows = np.arange(1, len(frame) + 1)
    blank = frame.apply(lambda column: column.str.strip() == '').all(axis=1).to_numpy()
    frame, rows = frame[~blank], rows[~blank]
    if frame.empty:
        raise DataError('CSV source has no data rows')

    T = len(mapping.z)
    censoring = None
    if mapping.c:
        censoring = np.column_stack([_parse_column(frame, rows, name, False) for name in mapping.c])
    treatments = np.zeros((len(frame), T))
    for t, name in enumerate(mapping.z):
        censored = censoring[:, t] == 1 if censoring is not None else False
        values = _parse_column(frame, rows, name, censored)
        treatments[:, t] = np.where(np.isnan(values), 0.0, values)
    covariates = tuple(
        np.column_stack([_parse_column(frame, rows, name, True) for name in group]) for group in mapping.x)
    outcome = _parse_column(frame, rows, mapping.y, True)

    data = PanelDataset(
        ids=frame[mapping.id].str.strip().to_numpy(dtype=str),
        covariates=covariates,
        treatments=treatments,
        outcome=outcome,
        censoring=censoring,
        covariate_labels=mapping.x,
    )
    logger.info('loaded panel with n=%d, T=%d, P=%s', data.n, data.T, data.P)
    return data


def _format(value):
    if isinstance(value, float) and math.isnan(value):
        return ''
    return repr(float(value))


def dump_panel(data, sink=None):
    """Write a dataset in the CSV convention; returns the text when no sink is given."""
    mapping = data.mapping()
    cells = {mapping.id: data.ids.astype(str)}
    for name, z in zip(mapping.z, data.treatments.T):
        cells[name] = z.astype(int).astype(str)
    for group, x in zip(mapping.x, data.covariates):
        for name, values in zip(group, x.T):
            cells[name] = [_format(v) for v in values]
    cells[mapping.y] = [_format(v) for v in data.outcome]
    if data.has_censoring:
        for name, c in zip(mapping.c, data.censoring.T):
            cells[name] = c.astype(int).astype(str)

    text = pd.DataFrame(cells, columns=list(mapping.columns)).to_csv(index=False, lineterminator='\n')
    if sink is None:
        return text
    if isinstance(sink, (str, Path)):
        Path(sink).write_text(text, encoding='utf-8')
    else:
        sink.write(text)
    return text
