"""Count tables on disk.

Count files are delimited text with taxa as rows: the header holds an id
column name followed by sample ids, and each row starts with a taxon id.
Metadata files are CSV keyed by a ``sample`` column. The delimiter is a tab
for ``.tsv``/``.txt`` files and a comma otherwise.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd


class CountTableError(ValueError):
    pass


@dataclass
class CountTable:
    counts: np.ndarray  # D x N, int64
    taxa: list
    samples: list
    metadata: pd.DataFrame = field(default_factory=pd.DataFrame)

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2:
            raise CountTableError("counts must be a 2-d table")
        if np.any(c < 0) or np.any(c != np.round(c)):
            raise CountTableError("counts must be non-negative integers")
        self.counts = c.astype(np.int64)
        self.taxa = [str(t) for t in self.taxa]
        self.samples = [str(s) for s in self.samples]
        D, N = self.counts.shape
        if len(self.taxa) != D or len(self.samples) != N:
            raise CountTableError(f"ids ({len(self.taxa)} taxa, {len(self.samples)} samples) do not match counts {c.shape}")
        for kind, ids in (("taxon", self.taxa), ("sample", self.samples)):
            seen = set()
            for i in ids:
                if i in seen:
                    raise CountTableError(f"duplicate {kind} id '{i}'")
                seen.add(i)
        if self.metadata is None or len(self.metadata) == 0:
            self.metadata = pd.DataFrame(index=pd.Index(self.samples, name="sample"))
        else:
            md = self.metadata
            if md.index.has_duplicates:
                raise CountTableError("metadata has duplicate sample ids")
            missing = [s for s in self.samples if s not in md.index]
            if missing:
                raise CountTableError(f"metadata is missing samples: {missing[:5]}")
            self.metadata = md.loc[self.samples]

    @property
    def shape(self):
        return self.counts.shape

    def covariate(self, name):
        if name not in self.metadata.columns:
            raise CountTableError(f"metadata has no column '{name}'")
        return self.metadata[name].to_numpy()

    def subset_samples(self, idx):
        idx = np.asarray(idx)
        samples = [self.samples[i] for i in idx]
        return CountTable(self.counts[:, idx], self.taxa, samples, self.metadata.iloc[idx])


def _delimiter(path):
    return "\t" if Path(path).suffix.lower() in (".tsv", ".txt") else ","


def load_metadata(path):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CountTableError(f"{path}: empty metadata file")
    header = rows[0]
    if "sample" not in header:
        raise CountTableError(f"{path}: metadata needs a 'sample' column")
    key = header.index("sample")
    seen = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CountTableError(f"{path}, line {lineno}: expected {len(header)} fields, got {len(row)}")
        if row[key] in seen:
            raise CountTableError(f"{path}, line {lineno}: duplicate sample id '{row[key]}' (first on line {seen[row[key]]})")
        seen[row[key]] = lineno
    df = pd.read_csv(path, dtype={"sample": str})
    return df.set_index("sample")


def load_counts(path, metadata=None):
    """Read a count table (and optional metadata CSV) with cell-level errors."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter=_delimiter(path)))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise CountTableError(f"{path}: need a header and at least one taxon row")
    header = rows[0]
    samples = header[1:]
    if not samples:
        raise CountTableError(f"{path}, line 1: no sample columns")
    taxa, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CountTableError(f"{path}, line {lineno}: expected {len(header)} fields, got {len(row)}")
        vals = []
        for sample, cell in zip(samples, row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise CountTableError(
                    f"{path}, line {lineno}, taxon '{row[0]}', sample '{sample}': '{cell}' is not a number"
                ) from None
            if v < 0 or v != int(v):
                raise CountTableError(
                    f"{path}, line {lineno}, taxon '{row[0]}', sample '{sample}': "
                    f"count {cell} must be a non-negative integer"
                )
            vals.append(int(v))
        taxa.append(row[0])
        data.append(vals)
    md = load_metadata(metadata) if metadata is not None else None
    return CountTable(np.array(data, dtype=np.int64), taxa, samples, md)


def write_counts(table: CountTable, path):
    path = Path(path)
    delim = _delimiter(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delim, lineterminator="\n")
        w.writerow(["taxon"] + table.samples)
        for t, row in zip(table.taxa, table.counts):
            w.writerow([t] + [str(int(v)) for v in row])


def write_metadata(table: CountTable, path):
    table.metadata.reset_index().rename(columns={"index": "sample"}).to_csv(
        path, index=False, float_format="%.10g", lineterminator="\n"
    )
