"""Synthetic longitudinal EHR generator with known hidden confounding.

The generative process follows a structural causal model: a per-patient
binary financial-dependency flag and sensitive demographics feed a latent
state chain, observed clinical features mix the latent state with the
confounder and demographic directions, and labels are Bernoulli draws from a
logistic function of latent state, demographics, and mean feature level:

    h0 = 0
    z_t ~ N(A @ h_{t-1}, I)
    x_t = Wx @ z_t + confounder_strength * u * (2*fin_dep - 1)
          + demographic_effect * U @ d + eps,   eps ~ N(0, X_NOISE_STD^2 I)
    y_t ~ Bernoulli(sigmoid(wz @ z_t + wd @ d + w_xbar * mean(x_t)))
    h_t = tanh(B @ [h_{t-1}; z_t])

Mixing matrices are drawn once per seed; each patient consumes an
independent RNG stream keyed by (seed, patient index), so generation is
bit-reproducible and order-independent. The financial-dependency flag is
recorded in the ground truth and, by default, also exposed as an observed
extra demographic field so experiments can later blind it.

The module also implements the three dataset-manipulation protocols used by
the experiments: semi-synthetic amplification of the confounder's effect,
random disturbance of sensitive attributes, and subgroup rebalancing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .ehr import (Dataset, Demographics, Encounter, PatientRecord, Schema,
                  SchemaError)

FIN_DEP_FIELD = "fin_dep"
X_NOISE_STD = 0.5
DEFAULT_SENSITIVE_NAMES = ("race", "gender", "insurance")


class AlignmentError(ValueError):
    """Ground truth and dataset do not describe the same encounters."""


class DataError(ValueError):
    """A protocol precondition on the data itself failed (e.g. empty group)."""


@dataclass(frozen=True)
class ScmConfig:
    num_patients: int
    feature_dim: int
    z_true_dim: int
    h_true_dim: int
    encounter_min: int
    encounter_max: int
    confounder_strength: float = 1.0
    demographic_effect: float = 1.0
    seed: int = 0
    sensitive_names: tuple[str, ...] = DEFAULT_SENSITIVE_NAMES
    observe_confounder: bool = True

    def __post_init__(self):
        if self.num_patients < 1:
            raise ValueError("num_patients must be >= 1")
        if min(self.feature_dim, self.z_true_dim, self.h_true_dim) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.encounter_min < 1 or self.encounter_max < self.encounter_min:
            raise ValueError("need 1 <= encounter_min <= encounter_max")
        for name in ("confounder_strength", "demographic_effect"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        object.__setattr__(self, "sensitive_names", tuple(self.sensitive_names))

    def to_dict(self) -> dict:
        return {"num_patients": self.num_patients,
                "feature_dim": self.feature_dim,
                "z_true_dim": self.z_true_dim,
                "h_true_dim": self.h_true_dim,
                "encounter_min": self.encounter_min,
                "encounter_max": self.encounter_max,
                "confounder_strength": self.confounder_strength,
                "demographic_effect": self.demographic_effect,
                "seed": self.seed,
                "sensitive_names": list(self.sensitive_names),
                "observe_confounder": self.observe_confounder}

    @classmethod
    def from_dict(cls, doc: dict) -> "ScmConfig":
        doc = dict(doc)
        if "sensitive_names" in doc:
            doc["sensitive_names"] = tuple(doc["sensitive_names"])
        return cls(**doc)


@dataclass(frozen=True)
class SynthesisParams:
    """Per-group affine transforms for the semi-synthetic protocol.

    m1/b1 rescale features of patients with the dependency flag set, m2/b2
    the rest; m3/b3 and m4/b4 do the same to the label's Bernoulli
    parameter.
    """

    m1: tuple[float, ...]
    m2: tuple[float, ...]
    b1: tuple[float, ...]
    b2: tuple[float, ...]
    m3: float = 1.0
    m4: float = 1.0
    b3: float = 0.2
    b4: float = -0.2

    def __post_init__(self):
        for name in ("m1", "m2", "b1", "b2"):
            vec = tuple(float(v) for v in getattr(self, name))
            if not all(np.isfinite(vec)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, vec)
        widths = {len(self.m1), len(self.m2), len(self.b1), len(self.b2)}
        if len(widths) != 1:
            raise ValueError(f"vector params must share one width, got {widths}")
        for name in ("m3", "m4", "b3", "b4"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @classmethod
    def default(cls, feature_dim: int) -> "SynthesisParams":
        one = (1.0,) * feature_dim
        half = (0.5,) * feature_dim
        return cls(m1=tuple(1.5 for _ in one), m2=half,
                   b1=half, b2=tuple(-0.5 for _ in one),
                   m3=1.0, m4=1.0, b3=0.2, b4=-0.2)

    @classmethod
    def identity(cls, feature_dim: int) -> "SynthesisParams":
        one = (1.0,) * feature_dim
        zero = (0.0,) * feature_dim
        return cls(m1=one, m2=one, b1=zero, b2=zero,
                   m3=1.0, m4=1.0, b3=0.0, b4=0.0)

    def to_dict(self) -> dict:
        return {"m1": list(self.m1), "m2": list(self.m2),
                "b1": list(self.b1), "b2": list(self.b2),
                "m3": self.m3, "m4": self.m4, "b3": self.b3, "b4": self.b4}

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthesisParams":
        return cls(m1=tuple(doc["m1"]), m2=tuple(doc["m2"]),
                   b1=tuple(doc["b1"]), b2=tuple(doc["b2"]),
                   m3=float(doc["m3"]), m4=float(doc["m4"]),
                   b3=float(doc["b3"]), b4=float(doc["b4"]))


@dataclass(frozen=True)
class PatientTruth:
    id: str
    fin_dep: int
    z_true: tuple[tuple[float, ...], ...]
    h_true: tuple[tuple[float, ...], ...]
    y_prob: tuple[float, ...]

    @property
    def n_encounters(self) -> int:
        return len(self.z_true)


@dataclass(frozen=True)
class GroundTruth:
    patients: tuple[PatientTruth, ...]

    def by_id(self) -> dict[str, PatientTruth]:
        return {p.id: p for p in self.patients}


def check_alignment(ds: Dataset, gt: GroundTruth) -> None:
    if len(ds.patients) != len(gt.patients):
        raise AlignmentError(f"dataset has {len(ds.patients)} patients, "
                             f"ground truth has {len(gt.patients)}")
    for p, t in zip(ds.patients, gt.patients):
        if p.id != t.id:
            raise AlignmentError(f"patient order mismatch: {p.id!r} vs {t.id!r}")
        if p.n_encounters != t.n_encounters:
            raise AlignmentError(f"patient {p.id!r}: {p.n_encounters} encounters "
                                 f"vs {t.n_encounters} in ground truth")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _mixing_weights(cfg: ScmConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    n_bits = len(cfg.sensitive_names)
    zd, hd, fd = cfg.z_true_dim, cfg.h_true_dim, cfg.feature_dim
    return {
        "A": rng.normal(size=(zd, hd)) / np.sqrt(hd),
        "Wx": rng.normal(size=(fd, zd)) / np.sqrt(zd),
        "u_conf": rng.normal(size=fd),
        "U_demo": rng.normal(size=(fd, n_bits)) / np.sqrt(n_bits),
        "B": rng.normal(size=(hd, hd + zd)) / np.sqrt(hd + zd),
        "wz": rng.normal(size=zd) / np.sqrt(zd),
        "wd": rng.normal(size=n_bits) / np.sqrt(n_bits),
        "w_xbar": rng.normal(),
    }


def _stable_sigmoid(v: np.ndarray | float) -> np.ndarray | float:
    v = np.asarray(v, dtype=np.float64)
    pos = v >= 0
    z = np.exp(-np.abs(v))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))


def generate_scm_dataset(cfg: ScmConfig) -> tuple[Dataset, GroundTruth]:
    """Sample a dataset plus aligned ground truth; pure function of ``cfg``."""
    w = _mixing_weights(cfg)
    n_bits = len(cfg.sensitive_names)
    extra_names = (FIN_DEP_FIELD,) if cfg.observe_confounder else ()
    schema = Schema(feature_dim=cfg.feature_dim,
                    sensitive_names=cfg.sensitive_names,
                    label_name="outcome",
                    extra_names=extra_names)
    patients = []
    truths = []
    for i in range(cfg.num_patients):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1, i)))
        bits = rng.integers(0, 2, size=n_bits)
        fin_dep = int(rng.integers(0, 2))
        n_enc = int(rng.integers(cfg.encounter_min, cfg.encounter_max + 1))
        conf_shift = cfg.confounder_strength * w["u_conf"] * (2 * fin_dep - 1)
        demo_shift = cfg.demographic_effect * (w["U_demo"] @ bits)
        wd_bits = cfg.demographic_effect * float(w["wd"] @ bits)

        h = np.zeros(cfg.h_true_dim)
        encs, zs, hs, probs = [], [], [], []
        for _t in range(n_enc):
            z = w["A"] @ h + rng.normal(size=cfg.z_true_dim)
            x = (w["Wx"] @ z + conf_shift + demo_shift
                 + rng.normal(size=cfg.feature_dim) * X_NOISE_STD)
            logit = float(w["wz"] @ z) + wd_bits + w["w_xbar"] * float(x.mean())
            p_y = float(_stable_sigmoid(logit))
            y = int(rng.random() < p_y)
            h = np.tanh(w["B"] @ np.concatenate([h, z]))
            encs.append(Encounter(x=tuple(x), y=y))
            zs.append(tuple(z))
            hs.append(tuple(h))
            probs.append(p_y)

        pid = f"p{i:06d}"
        extra = (float(fin_dep),) if cfg.observe_confounder else ()
        patients.append(PatientRecord(
            id=pid,
            demographics=Demographics(sensitive_bits=tuple(int(b) for b in bits),
                                      extra=extra),
            encounters=tuple(encs)))
        truths.append(PatientTruth(id=pid, fin_dep=fin_dep,
                                   z_true=tuple(zs), h_true=tuple(hs),
                                   y_prob=tuple(probs)))
    return (Dataset(schema=schema, patients=tuple(patients)),
            GroundTruth(patients=tuple(truths)))


# ---------------------------------------------------------------------------
# ground-truth persistence
# ---------------------------------------------------------------------------

def save_ground_truth(gt: GroundTruth, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in gt.patients:
            doc = {"id": p.id, "fin_dep": p.fin_dep,
                   "enc": [{"z": list(z), "h": list(h), "y_prob": q}
                           for z, h, q in zip(p.z_true, p.h_true, p.y_prob)]}
            fh.write(json.dumps(doc, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def load_ground_truth(path) -> GroundTruth:
    patients = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            patients.append(PatientTruth(
                id=str(doc["id"]), fin_dep=int(doc["fin_dep"]),
                z_true=tuple(tuple(e["z"]) for e in doc["enc"]),
                h_true=tuple(tuple(e["h"]) for e in doc["enc"]),
                y_prob=tuple(float(e["y_prob"]) for e in doc["enc"])))
    return GroundTruth(patients=tuple(patients))


def subset_ground_truth(gt: GroundTruth, ds: Dataset) -> GroundTruth:
    """Ground-truth rows for exactly the patients of ``ds``, in its order."""
    table = gt.by_id()
    missing = [p.id for p in ds.patients if p.id not in table]
    if missing:
        raise AlignmentError(f"no ground truth for patients {missing[:3]}")
    return GroundTruth(patients=tuple(table[p.id] for p in ds.patients))


# ---------------------------------------------------------------------------
# protocol 1: semi-synthetic amplification
# ---------------------------------------------------------------------------

def _label_rng(patient_id: str) -> np.random.Generator:
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def apply_semisynthetic(ds: Dataset, gt: GroundTruth,
                        params: SynthesisParams) -> Dataset:
    """Amplify the confounder's causal footprint on features and labels.

    Features of flagged patients become x*m1+b1 (others x*m2+b2). The label
    channel maps each encounter's Bernoulli parameter through the matching
    scalar affine, clamps to [0, 1], and redraws the label with an RNG
    derived from the patient id alone, so the protocol is deterministic and
    independent of dataset order.
    """
    check_alignment(ds, gt)
    if len(params.m1) != ds.schema.feature_dim:
        raise SchemaError(f"synthesis params width {len(params.m1)} != "
                          f"schema F={ds.schema.feature_dim}")
    m1, m2 = np.array(params.m1), np.array(params.m2)
    b1, b2 = np.array(params.b1), np.array(params.b2)
    out = []
    for p, truth in zip(ds.patients, gt.patients):
        flagged = truth.fin_dep == 1
        m, b = (m1, b1) if flagged else (m2, b2)
        lm, lb = (params.m3, params.b3) if flagged else (params.m4, params.b4)
        rng = _label_rng(p.id)
        encs = []
        for enc, prob in zip(p.encounters, truth.y_prob):
            x = np.array(enc.x) * m + b
            p_y = min(max(lm * prob + lb, 0.0), 1.0)
            y = int(rng.random() < p_y)
            encs.append(Encounter(x=tuple(x), y=y))
        out.append(replace(p, encounters=tuple(encs)))
    return Dataset(schema=ds.schema, patients=tuple(out))


# ---------------------------------------------------------------------------
# protocol helpers: hiding, disturbance, mixing, rebalancing
# ---------------------------------------------------------------------------

def hide_confounder(ds: Dataset, field: str = FIN_DEP_FIELD) -> Dataset:
    """Remove an observed extra demographic field from every patient."""
    if field not in ds.schema.extra_names:
        raise SchemaError(f"no observed extra field {field!r}; "
                          f"have {ds.schema.extra_names}")
    idx = ds.schema.extra_names.index(field)
    schema = replace(ds.schema,
                     extra_names=tuple(n for n in ds.schema.extra_names
                                       if n != field))
    patients = tuple(
        replace(p, demographics=replace(
            p.demographics,
            extra=tuple(v for j, v in enumerate(p.demographics.extra)
                        if j != idx)))
        for p in ds.patients)
    return Dataset(schema=schema, patients=patients)


def disturb_demographics(ds: Dataset, fields: list[str] | tuple[str, ...],
                         seed: int) -> Dataset:
    """Resample the listed sensitive bits Bernoulli(1/2) for every patient."""
    unknown = [f for f in fields if f not in ds.schema.sensitive_names]
    if unknown:
        raise SchemaError(f"unknown sensitive fields {unknown}; "
                          f"have {ds.schema.sensitive_names}")
    if not fields:
        return ds
    indices = [ds.schema.sensitive_names.index(f) for f in fields]
    patients = []
    for i, p in enumerate(ds.patients):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 2, i)))
        bits = list(p.demographics.sensitive_bits)
        for j in indices:
            bits[j] = int(rng.integers(0, 2))
        patients.append(replace(p, demographics=replace(
            p.demographics, sensitive_bits=tuple(bits))))
    return Dataset(schema=ds.schema, patients=tuple(patients))


def mix_training(original: Dataset, disturbed: Dataset,
                 proportion_original: float, seed: int) -> Dataset:
    """Per-index mixture: ceil(p*N) patients keep their original version."""
    if not 0.0 <= proportion_original <= 1.0:
        raise ValueError(f"proportion must lie in [0,1], got {proportion_original}")
    if original.schema != disturbed.schema:
        raise SchemaError("mixing requires identical schemas")
    n = original.n_patients
    if n != disturbed.n_patients:
        raise DataError(f"size mismatch: {n} vs {disturbed.n_patients}")
    k = int(np.ceil(proportion_original * n))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    keep = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    patients = tuple(original.patients[i] if i in keep else disturbed.patients[i]
                     for i in range(n))
    return Dataset(schema=original.schema, patients=patients)


def rebalance_by_attribute(ds: Dataset, attr: str, ratio: tuple[int, int],
                           target_size: int, seed: int) -> Dataset:
    """Resample to ``target_size`` patients with group sizes a:b on ``attr``.

    Group a is attr=1, group b is attr=0 (rounding favors group a). Sampling
    is with replacement whenever a group is too small; re-drawn duplicates
    get a ``~k`` id suffix so ids stay unique.
    """
    if attr not in ds.schema.sensitive_names:
        raise SchemaError(f"unknown sensitive attribute {attr!r}")
    a, b = ratio
    if a < 0 or b < 0 or a + b == 0:
        raise ValueError(f"ratio parts must be nonnegative and not both zero: {ratio}")
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    idx = ds.schema.sensitive_names.index(attr)
    group_a = [p for p in ds.patients if p.demographics.sensitive_bits[idx] == 1]
    group_b = [p for p in ds.patients if p.demographics.sensitive_bits[idx] == 0]
    if not group_a or not group_b:
        raise DataError(f"both {attr!r} groups must be nonempty "
                        f"({len(group_a)} vs {len(group_b)})")
    n_b = int(np.floor(target_size * b / (a + b)))
    n_a = target_size - n_b
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4)))

    def draw(pool, count):
        if count == 0:
            return []
        replacing = count > len(pool)
        picks = rng.choice(len(pool), size=count, replace=replacing)
        return [pool[i] for i in picks]

    chosen = draw(group_a, n_a) + draw(group_b, n_b)
    order = rng.permutation(len(chosen))
    seen: dict[str, int] = {}
    out = []
    for i in order:
        p = chosen[i]
        k = seen.get(p.id, 0)
        seen[p.id] = k + 1
        out.append(p if k == 0 else replace(p, id=f"{p.id}~{k}"))
    return Dataset(schema=ds.schema, patients=tuple(out))
