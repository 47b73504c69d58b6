"""Attentive outcome classifier with a counterfactual-fairness penalty.

The second training stage. Each encounter becomes one item (demographics,
posterior-mean latent, raw features, label). The three inputs are projected
into a shared width, tagged with learned slot embeddings, run through a
residual multi-head-attention stack, mean-pooled, and scored by an affine
head. Fairness pressure comes from a second cross-entropy term on the same
labels but with sensitive demographic bits flipped: pushing both forward
passes toward the same answer strips the sensitive bits' influence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .ehr import Dataset, Demographics, Schema
from .metrics import PredictionRow, auc
from .scm import AlignmentError
from .stage1 import LatentTrace

PROB_FLOOR = 1e-7
FLIP_MODES = ("all", "random")


@dataclass(frozen=True)
class Stage2Config:
    """Architecture and training knobs for the classifier stage.

    cf_weight scales the flipped-demographics loss term; weight_decay is the
    L2 coefficient inside the loss (the optimizer itself runs undecayed).
    flip_mode "all" negates every configured sensitive bit on every item;
    "random" negates each independently with probability one half.
    """

    cf_weight: float
    sensitive_fields: tuple[str, ...] = ()
    weight_decay: float = 1e-7
    lr: float = 1e-5
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    flip_mode: str = "all"

    def __post_init__(self):
        if self.cf_weight < 0:
            raise ValueError(f"cf_weight must be >= 0, got {self.cf_weight}")
        if self.weight_decay < 0:
            raise ValueError(
                f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("d_model", "n_heads", "n_layers", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by "
                             f"n_heads={self.n_heads}")
        if self.flip_mode not in FLIP_MODES:
            raise ValueError(f"flip_mode must be one of {FLIP_MODES}, "
                             f"got {self.flip_mode!r}")
        if self.cf_weight > 0 and not self.sensitive_fields:
            raise ValueError("cf_weight > 0 needs at least one entry in "
                             "sensitive_fields")
        object.__setattr__(self, "sensitive_fields",
                           tuple(self.sensitive_fields))

    def to_dict(self) -> dict:
        return {"cf_weight": self.cf_weight,
                "sensitive_fields": list(self.sensitive_fields),
                "weight_decay": self.weight_decay, "lr": self.lr,
                "d_model": self.d_model, "n_heads": self.n_heads,
                "n_layers": self.n_layers, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed,
                "flip_mode": self.flip_mode}

    @classmethod
    def from_dict(cls, payload: dict) -> "Stage2Config":
        data = dict(payload)
        if "sensitive_fields" in data:
            data["sensitive_fields"] = tuple(data["sensitive_fields"])
        return cls(**data)


@dataclass
class Stage2Params:
    """Classifier weights plus the shape facts needed to run them."""

    store: K.ParamStore
    d_dim: int
    z_dim: int
    x_dim: int
    d_model: int
    n_heads: int
    n_layers: int

    def attention_weights(self, layer: int) -> K.AttentionWeights:
        s = self.store
        return K.AttentionWeights(
            wq=s[f"attn.{layer}.wq"], bq=s[f"attn.{layer}.bq"],
            wk=s[f"attn.{layer}.wk"], bk=s[f"attn.{layer}.bk"],
            wv=s[f"attn.{layer}.wv"], bv=s[f"attn.{layer}.bv"],
            wo=s[f"attn.{layer}.wo"], bo=s[f"attn.{layer}.bo"])


def init_stage2_params(cfg: Stage2Config, schema: Schema,
                       z_dim: int) -> Stage2Params:
    if z_dim < 1:
        raise ValueError(f"z_dim must be >= 1, got {z_dim}")
    d_dim = len(schema.sensitive_names) + len(schema.extra_names)
    x_dim = schema.feature_dim
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 20)))
    store = K.ParamStore()
    e = cfg.d_model
    for name, width in (("proj_d", d_dim), ("proj_z", z_dim),
                        ("proj_x", x_dim)):
        store.add(f"{name}.w", K.glorot(rng, width, e))
        store.add(f"{name}.b", np.zeros(e))
    store.add("slots", rng.normal(size=(3, e)) * 0.02)
    for layer in range(cfg.n_layers):
        for part in ("wq", "wk", "wv", "wo"):
            store.add(f"attn.{layer}.{part}", K.glorot(rng, e, e))
        for part in ("bq", "bk", "bv", "bo"):
            store.add(f"attn.{layer}.{part}", np.zeros(e))
    store.add("head.w", K.glorot(rng, e, 1))
    store.add("head.b", np.zeros(1))
    return Stage2Params(store=store, d_dim=d_dim, z_dim=z_dim, x_dim=x_dim,
                        d_model=cfg.d_model, n_heads=cfg.n_heads,
                        n_layers=cfg.n_layers)


# ---------------------------------------------------------------------------
# items
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionBatch:
    """Encounter-level items: one row per (patient, t), arrays aligned."""

    patient_ids: tuple[str, ...]
    ts: tuple[int, ...]
    d: np.ndarray   # [B, d_dim]
    z: np.ndarray   # [B, z_dim]
    x: np.ndarray   # [B, x_dim]
    y: np.ndarray   # [B]
    sensitive_bits: tuple[tuple[int, ...], ...]
    flip_indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.patient_ids)


def _resolve_flip_indices(schema: Schema,
                          sensitive_fields: tuple[str, ...]) -> tuple[int, ...]:
    indices = []
    for field in sensitive_fields:
        if field not in schema.sensitive_names:
            raise ValueError(f"unknown sensitive field {field!r}; schema has "
                             f"{schema.sensitive_names}")
        indices.append(schema.sensitive_names.index(field))
    return tuple(indices)


def build_batch(ds: Dataset, trace: LatentTrace,
                sensitive_fields: tuple[str, ...] = ()) -> PredictionBatch:
    """Flatten every encounter of ``ds`` into one aligned item table."""
    if not ds.patients:
        raise ValueError("cannot build a batch from an empty dataset")
    flip = _resolve_flip_indices(ds.schema, sensitive_fields)
    index = trace.index()
    ids, ts, d_rows, z_rows, x_rows, ys, bits = [], [], [], [], [], [], []
    for p in ds.patients:
        vec = p.demographic_vector()
        for t in range(1, p.n_encounters + 1):
            row = index.get((p.id, t))
            if row is None:
                raise AlignmentError(f"no latent for patient {p.id!r} "
                                     f"encounter {t}")
            ids.append(p.id)
            ts.append(t)
            d_rows.append(vec)
            z_rows.append(row.z)
            x_rows.append(p.encounters[t - 1].x)
            ys.append(p.encounters[t - 1].y)
            bits.append(p.demographics.sensitive_bits)
    return PredictionBatch(
        patient_ids=tuple(ids), ts=tuple(ts),
        d=np.array(d_rows, dtype=np.float64),
        z=np.array(z_rows, dtype=np.float64),
        x=np.array(x_rows, dtype=np.float64),
        y=np.array(ys, dtype=np.float64),
        sensitive_bits=tuple(bits), flip_indices=flip)


def _slice_batch(batch: PredictionBatch, idx: np.ndarray) -> PredictionBatch:
    return PredictionBatch(
        patient_ids=tuple(batch.patient_ids[i] for i in idx),
        ts=tuple(batch.ts[i] for i in idx),
        d=batch.d[idx], z=batch.z[idx], x=batch.x[idx], y=batch.y[idx],
        sensitive_bits=tuple(batch.sensitive_bits[i] for i in idx),
        flip_indices=batch.flip_indices)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def build_tokens(d, z, x, params: Stage2Params) -> K.Tensor:
    """Project (d, z, x) to model width and tag each with its slot embedding.

    1-D inputs give [3, d_model]; matching 2-D batches give [B, 3, d_model].
    """
    d_arr = np.asarray(d, dtype=np.float64) if not isinstance(d, K.Tensor) else d.data
    single = d_arr.ndim == 1
    parts = []
    for slot, (inp, name) in enumerate(((d, "proj_d"), (z, "proj_z"),
                                        (x, "proj_x"))):
        t = K.as_tensor(inp)
        if t.ndim == 1:
            t = K.reshape(t, (1, t.shape[0]))
        proj = K.affine(t, params.store[f"{name}.w"], params.store[f"{name}.b"])
        proj = proj + K.narrow(params.store["slots"], 0, slot, 1)
        parts.append(K.reshape(proj, (proj.shape[0], 1, params.d_model)))
    tokens = K.concat(parts, axis=1)
    if single:
        return K.reshape(tokens, (3, params.d_model))
    return tokens


def score_tokens(tokens, params: Stage2Params) -> K.Tensor:
    """Residual attention stack, mean-pool, affine head; returns logits."""
    h = K.as_tensor(tokens)
    single = h.ndim == 2
    if single:
        h = K.reshape(h, (1,) + h.shape)
    for layer in range(params.n_layers):
        h = h + K.multi_head_attention(h, params.attention_weights(layer),
                                       params.n_heads)
    pooled = K.mean_(h, axis=1)
    logits = K.affine(pooled, params.store["head.w"], params.store["head.b"])
    logits = K.reshape(logits, (logits.shape[0],))
    if single:
        return K.reshape(logits, (1,))
    return logits


def _logits(d, z, x, params: Stage2Params) -> K.Tensor:
    return score_tokens(build_tokens(d, z, x, params), params)


def _squash(logits: np.ndarray) -> np.ndarray:
    probs = np.where(logits >= 0, 1.0 / (1.0 + np.exp(-logits)),
                     np.exp(logits) / (1.0 + np.exp(logits)))
    return np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)


def predict(d, z, x, params: Stage2Params) -> float:
    """Outcome probability for one encounter, clamped away from 0 and 1."""
    logit = _logits(np.asarray(d, dtype=np.float64),
                    np.asarray(z, dtype=np.float64),
                    np.asarray(x, dtype=np.float64), params)
    return float(_squash(logit.data)[0])


def predict_probs(batch: PredictionBatch, params: Stage2Params,
                  chunk: int = 1024) -> np.ndarray:
    """Clamped probabilities for every item, computed in bounded chunks."""
    out = np.empty(len(batch))
    for start in range(0, len(batch), chunk):
        stop = min(start + chunk, len(batch))
        logits = _logits(batch.d[start:stop], batch.z[start:stop],
                         batch.x[start:stop], params)
        out[start:stop] = _squash(logits.data)
    return out


# ---------------------------------------------------------------------------
# counterfactuals
# ---------------------------------------------------------------------------

def counterfactual_demographics(d: Demographics,
                                sensitive_fields: tuple[str, ...],
                                sensitive_names: tuple[str, ...]
                                ) -> Demographics:
    """Negate the named sensitive bits, leaving everything else alone."""
    bits = list(d.sensitive_bits)
    for field in sensitive_fields:
        if field not in sensitive_names:
            raise ValueError(f"unknown sensitive field {field!r}")
        i = sensitive_names.index(field)
        bits[i] = 1 - bits[i]
    return Demographics(sensitive_bits=tuple(bits), extra=d.extra)


def _flip_columns(d: np.ndarray, flip_indices: tuple[int, ...], mode: str,
                  rng: np.random.Generator | None) -> np.ndarray:
    flipped = d.copy()
    if not flip_indices:
        return flipped
    cols = list(flip_indices)
    if mode == "all":
        flipped[:, cols] = 1.0 - flipped[:, cols]
        return flipped
    if rng is None:
        raise ValueError("flip_mode 'random' needs an rng")
    mask = rng.integers(0, 2, size=(d.shape[0], len(cols))).astype(bool)
    block = flipped[:, cols]
    block[mask] = 1.0 - block[mask]
    flipped[:, cols] = block
    return flipped


# ---------------------------------------------------------------------------
# loss / training
# ---------------------------------------------------------------------------

def stage2_loss(batch: PredictionBatch, params: Stage2Params,
                cfg: Stage2Config,
                rng: np.random.Generator | None = None) -> K.Tensor:
    """Factual cross-entropy + cf_weight * flipped cross-entropy + L2."""
    if len(batch) == 0:
        raise ValueError("stage2_loss needs a nonempty batch")
    loss = K.cross_entropy(_logits(batch.d, batch.z, batch.x, params),
                           batch.y)
    if cfg.cf_weight > 0:
        d_cf = _flip_columns(batch.d, batch.flip_indices, cfg.flip_mode, rng)
        cf = K.cross_entropy(_logits(d_cf, batch.z, batch.x, params), batch.y)
        loss = loss + cf * cfg.cf_weight
    return loss + params.store.l2() * cfg.weight_decay


@dataclass(frozen=True)
class Stage2History:
    epoch_losses: tuple[float, ...]
    val_aucs: tuple[float, ...]
    best_epoch: int  # index into the tuples above


def train_stage2(train: Dataset, val: Dataset, trace: LatentTrace,
                 cfg: Stage2Config,
                 params: Stage2Params | None = None
                 ) -> tuple[Stage2Params, Stage2History]:
    """Adam over every training encounter; returns the best-val-AUC weights.

    The latent trace must cover every encounter of both splits. The returned
    parameters are the snapshot from the epoch with the highest validation
    AUC (earliest epoch on ties).
    """
    train_batch = build_batch(train, trace, cfg.sensitive_fields)
    val_batch = build_batch(val, trace, cfg.sensitive_fields)
    if train_batch.z.shape[1] != val_batch.z.shape[1]:
        raise AlignmentError("train and val latents disagree on width")
    if params is None:
        params = init_stage2_params(cfg, train.schema, train_batch.z.shape[1])
    opt = K.Adam(params.store, lr=cfg.lr, weight_decay=0.0)
    n = len(train_batch)
    losses, val_aucs = [], []
    best_auc, best_epoch, best_values = -np.inf, 0, None
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 21, epoch)))
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            sub = _slice_batch(train_batch, idx)
            params.store.zero_grads()
            try:
                loss = stage2_loss(sub, params, cfg, rng)
                K.backward(loss)
                opt.step()
            except K.NumericError as err:
                raise K.NumericError(
                    f"stage-2 epoch {epoch}, batch {start // cfg.batch_size}:"
                    f" {err}") from err
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
        score = auc(predict_probs(val_batch, params), val_batch.y.astype(int))
        val_aucs.append(score)
        if score > best_auc:
            best_auc, best_epoch = score, epoch
            best_values = params.store.copy_values()
    params.store.load_values(best_values)
    return params, Stage2History(epoch_losses=tuple(losses),
                                 val_aucs=tuple(val_aucs),
                                 best_epoch=best_epoch)


def cf_gap(ds: Dataset, trace: LatentTrace, params: Stage2Params,
           cfg: Stage2Config) -> float:
    """Mean |p(d) - p(d flipped)| over all encounters, flip-all convention."""
    batch = build_batch(ds, trace, cfg.sensitive_fields)
    factual = predict_probs(batch, params)
    flipped = PredictionBatch(
        patient_ids=batch.patient_ids, ts=batch.ts,
        d=_flip_columns(batch.d, batch.flip_indices, "all", None),
        z=batch.z, x=batch.x, y=batch.y,
        sensitive_bits=batch.sensitive_bits, flip_indices=batch.flip_indices)
    counterfactual = predict_probs(flipped, params)
    return float(np.mean(np.abs(factual - counterfactual)))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def predict_dataset(ds: Dataset, trace: LatentTrace,
                    params: Stage2Params) -> tuple[PredictionRow, ...]:
    """Score every encounter; rows keep dataset order, t ascending."""
    batch = build_batch(ds, trace)
    probs = predict_probs(batch, params)
    return tuple(
        PredictionRow(patient_id=batch.patient_ids[i], encounter_index=batch.ts[i],
                      score=float(probs[i]), label=int(batch.y[i]),
                      sensitive_bits=batch.sensitive_bits[i])
        for i in range(len(batch)))


def save_predictions_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "t", "prob", "y", "group_bits"])
        for row in rows:
            writer.writerow([row.patient_id, row.encounter_index,
                             repr(row.score), row.label,
                             "".join(str(b) for b in row.sensitive_bits)])


def save_stage2(params: Stage2Params, path, opt: K.Adam | None = None) -> None:
    params.store.save(path, opt=opt)


def load_stage2(path, cfg: Stage2Config, schema: Schema,
                z_dim: int) -> tuple[Stage2Params, dict | None]:
    params = init_stage2_params(cfg, schema, z_dim)
    loaded, opt_state = K.ParamStore.load(path)
    if loaded.names() != params.store.names():
        raise ValueError("checkpoint parameter names do not match config")
    params.store.load_values(loaded.copy_values())
    return params, opt_state
