"""Longitudinal EHR domain model: records, JSONL I/O, splits, normalization.

A dataset is a list of patients; each patient carries ordered binary
sensitive attributes, an optional vector of non-sensitive extras, and a
chronological sequence of encounters (fixed-width clinical feature vector
plus a binary label). Everything is immutable after construction and all
operations are pure, so values can be shared freely across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np


class ParseError(ValueError):
    """A dataset line is not valid JSON or is structurally wrong."""


class SchemaError(ValueError):
    """Record contents disagree with the dataset schema."""


class SplitError(ValueError):
    """Too few patients for the requested split."""


@dataclass(frozen=True)
class Schema:
    feature_dim: int
    sensitive_names: tuple[str, ...]
    label_name: str
    extra_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.feature_dim < 1:
            raise SchemaError(f"feature_dim must be >= 1, got {self.feature_dim}")
        object.__setattr__(self, "sensitive_names", tuple(self.sensitive_names))
        object.__setattr__(self, "extra_names", tuple(self.extra_names))

    def to_json(self) -> dict:
        doc = {"F": self.feature_dim,
               "sensitive_names": list(self.sensitive_names),
               "label_name": self.label_name}
        if self.extra_names:
            doc["extra_names"] = list(self.extra_names)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Schema":
        return cls(feature_dim=int(doc["F"]),
                   sensitive_names=tuple(doc["sensitive_names"]),
                   label_name=str(doc["label_name"]),
                   extra_names=tuple(doc.get("extra_names", ())))


def save_schema(schema: Schema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_json(), fh, indent=2)
        fh.write("\n")


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_json(json.load(fh))


@dataclass(frozen=True)
class Demographics:
    sensitive_bits: tuple[int, ...]
    extra: tuple[float, ...] = ()

    def __post_init__(self):
        bits = tuple(int(b) for b in self.sensitive_bits)
        if any(b not in (0, 1) for b in bits):
            raise SchemaError(f"sensitive bits must be 0/1, got {self.sensitive_bits}")
        object.__setattr__(self, "sensitive_bits", bits)
        object.__setattr__(self, "extra", tuple(float(v) for v in self.extra))


@dataclass(frozen=True)
class Encounter:
    x: tuple[float, ...]
    y: int

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        if self.y not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.y}")
        object.__setattr__(self, "y", int(self.y))


@dataclass(frozen=True)
class PatientRecord:
    id: str
    demographics: Demographics
    encounters: tuple[Encounter, ...]

    def __post_init__(self):
        object.__setattr__(self, "encounters", tuple(self.encounters))
        if not self.encounters:
            raise SchemaError(f"patient {self.id!r} has no encounters")

    @property
    def n_encounters(self) -> int:
        return len(self.encounters)

    def feature_matrix(self) -> np.ndarray:
        """All encounter features as a [T, F] array."""
        return np.array([e.x for e in self.encounters], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([e.y for e in self.encounters], dtype=np.float64)

    def demographic_vector(self) -> np.ndarray:
        """Sensitive bits followed by extra values, as one float vector."""
        return np.array(self.demographics.sensitive_bits
                        + self.demographics.extra, dtype=np.float64)


@dataclass(frozen=True)
class Dataset:
    schema: Schema
    patients: tuple[PatientRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        for p in self.patients:
            _check_patient(p, self.schema)

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def n_encounters(self) -> int:
        return sum(p.n_encounters for p in self.patients)


def _check_patient(p: PatientRecord, schema: Schema, line: int | None = None) -> None:
    where = f"line {line}: " if line is not None else f"patient {p.id!r}: "
    if len(p.demographics.sensitive_bits) != len(schema.sensitive_names):
        raise SchemaError(f"{where}{len(p.demographics.sensitive_bits)} sensitive "
                          f"bits, schema names {len(schema.sensitive_names)}")
    if len(p.demographics.extra) != len(schema.extra_names):
        raise SchemaError(f"{where}{len(p.demographics.extra)} extra values, "
                          f"schema names {len(schema.extra_names)}")
    for t, enc in enumerate(p.encounters, start=1):
        if len(enc.x) != schema.feature_dim:
            raise SchemaError(f"{where}encounter {t} has |x|={len(enc.x)}, "
                              f"schema F={schema.feature_dim}")


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------

def _patient_to_json(p: PatientRecord) -> dict:
    return {"id": p.id,
            "d": {"sensitive": list(p.demographics.sensitive_bits),
                  "extra": list(p.demographics.extra)},
            "enc": [{"x": list(e.x), "y": e.y} for e in p.encounters]}


def _patient_from_json(doc: dict) -> PatientRecord:
    d = doc["d"]
    return PatientRecord(
        id=str(doc["id"]),
        demographics=Demographics(sensitive_bits=tuple(d["sensitive"]),
                                  extra=tuple(d.get("extra", ()))),
        encounters=tuple(Encounter(x=tuple(e["x"]), y=e["y"])
                         for e in doc["enc"]))


def save_dataset(ds: Dataset, path) -> None:
    """Write one patient per line; floats keep full round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in ds.patients:
            fh.write(json.dumps(_patient_to_json(p), ensure_ascii=False,
                                separators=(",", ":")))
            fh.write("\n")


def load_dataset(path, schema: Schema) -> Dataset:
    """Read a JSONL dataset, validating every record against ``schema``."""
    patients = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                p = _patient_from_json(doc)
            except SchemaError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            _check_patient(p, schema, line=lineno)
            patients.append(p)
    return Dataset(schema=schema, patients=tuple(patients))


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_dataset(ds: Dataset, ratios: tuple[float, float, float],
                  seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Patient-level split into (train, val, test).

    Sizes are floor(ratio * n) with the remainder assigned to train, so the
    split is a partition. Deterministic in ``seed``.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise SplitError(f"ratios must be three nonnegative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    n = ds.n_patients
    nonzero = sum(1 for r in ratios if r > 0)
    if n < nonzero:
        raise SplitError(f"{n} patients cannot fill {nonzero} nonempty splits")

    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test

    order = np.random.default_rng(seed).permutation(n)
    picks = (order[:n_train], order[n_train:n_train + n_val],
             order[n_train + n_val:])
    return tuple(Dataset(schema=ds.schema,
                         patients=tuple(ds.patients[i] for i in part))
                 for part in picks)


def feature_history(p: PatientRecord, t: int) -> list[tuple[float, ...]]:
    """Feature vectors of encounters 1..t (1-based, inclusive)."""
    if not 1 <= t <= p.n_encounters:
        raise IndexError(f"encounter index {t} outside 1..{p.n_encounters}")
    return [e.x for e in p.encounters[:t]]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if any(s <= 0 for s in self.std):
            raise SchemaError("normalizer std must be positive")

    def to_json(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, doc: dict) -> "NormStats":
        return cls(mean=tuple(doc["mean"]), std=tuple(doc["std"]))


def identity_stats(feature_dim: int) -> NormStats:
    return NormStats(mean=(0.0,) * feature_dim, std=(1.0,) * feature_dim)


def fit_normalizer(train: Dataset) -> NormStats:
    """Per-feature z-score statistics over every encounter of ``train``."""
    if train.n_patients == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    rows = np.concatenate([p.feature_matrix() for p in train.patients], axis=0)
    mean = rows.mean(axis=0)
    std = np.maximum(rows.std(axis=0), STD_FLOOR)
    return NormStats(mean=tuple(mean), std=tuple(std))


def apply_normalizer(ds: Dataset, stats: NormStats) -> Dataset:
    """x <- (x - mean) / std for every encounter; labels and demographics kept."""
    mean = np.array(stats.mean)
    std = np.array(stats.std)
    if mean.shape[0] != ds.schema.feature_dim:
        raise SchemaError(f"normalizer width {mean.shape[0]} != schema "
                          f"F={ds.schema.feature_dim}")
    patients = []
    for p in ds.patients:
        encs = tuple(Encounter(x=tuple((np.array(e.x) - mean) / std), y=e.y)
                     for e in p.encounters)
        patients.append(replace(p, encounters=encs))
    return Dataset(schema=ds.schema, patients=tuple(patients))
