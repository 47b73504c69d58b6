"""Stage 1: variational recurrent latent-factor model over encounter history.

The model maintains a per-patient recurrent state and, before each encounter,
infers a diagonal-Gaussian posterior over a latent factor from the previous
state, the previous encounter's features, and demographics:

    [mu; logvar] = encoder([h_prev; x_prev; d]),  sigma = exp(logvar / 2)
    z ~ N(mu, diag sigma^2)
    x_hat_j = decoder_j([z; d])      (one parameter-disjoint MLP per feature)
    (h, c) = lstm([z; x], h_prev, c_prev)

Training minimizes, per patient with T >= 2 encounters,

    sum_{t=0}^{T-2} [ KL(q(z_{t+1}) || N(0,I))
                      - (1/L) sum_l log p(x_{t+1} | z_{t+1,l}, d) ] / (T-1)

plus an L2 penalty on all parameters, where the t=0 encoder input is a
trainable (x0, h0) pair. Reconstruction targets are therefore encounters
1..T-1; single-encounter patients have no target and are skipped by the
loss (they still get latents from extract_latents). Gaussian features use a
unit-variance Gaussian log-likelihood including its log-normalizer constant;
bernoulli features use binary cross-entropy on a sigmoid output.

Everything downstream consumes the posterior MEAN (never a sample), so
extraction and Stage 2 are deterministic given parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from . import metrics
from .ehr import Dataset, PatientRecord, Schema
from .scm import AlignmentError, GroundTruth

HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class Stage1Config:
    z_dim: int = 256
    h_dim: int = 128
    phi_hidden: int = 512
    chi_hidden: int = 16
    mc_samples: int = 1
    lr: float = 1e-5
    weight_decay: float = 1e-7
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    feature_likelihoods: tuple[str, ...] | None = None

    def __post_init__(self):
        if min(self.z_dim, self.h_dim, self.phi_hidden, self.chi_hidden) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.feature_likelihoods is not None:
            kinds = tuple(self.feature_likelihoods)
            if any(k not in (GAUSSIAN, BERNOULLI) for k in kinds):
                raise ValueError(f"unknown likelihood in {kinds}")
            object.__setattr__(self, "feature_likelihoods", kinds)

    def likelihoods_for(self, feature_dim: int) -> tuple[str, ...]:
        if self.feature_likelihoods is None:
            return (GAUSSIAN,) * feature_dim
        if len(self.feature_likelihoods) != feature_dim:
            raise ValueError(f"{len(self.feature_likelihoods)} likelihoods for "
                             f"{feature_dim} features")
        return self.feature_likelihoods

    def to_dict(self) -> dict:
        doc = {"z_dim": self.z_dim, "h_dim": self.h_dim,
               "phi_hidden": self.phi_hidden, "chi_hidden": self.chi_hidden,
               "mc_samples": self.mc_samples, "lr": self.lr,
               "weight_decay": self.weight_decay, "epochs": self.epochs,
               "batch_size": self.batch_size, "seed": self.seed}
        if self.feature_likelihoods is not None:
            doc["feature_likelihoods"] = list(self.feature_likelihoods)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Stage1Config":
        doc = dict(doc)
        if "feature_likelihoods" in doc and doc["feature_likelihoods"] is not None:
            doc["feature_likelihoods"] = tuple(doc["feature_likelihoods"])
        return cls(**doc)


@dataclass
class Stage1Params:
    """Parameter store plus the dimensions needed to drive it."""

    store: K.ParamStore
    z_dim: int
    h_dim: int
    feature_dim: int
    d_dim: int
    likelihoods: tuple[str, ...]

    def lstm_weights(self) -> K.LstmWeights:
        return K.LstmWeights(self.store["psi.w_ih"], self.store["psi.w_hh"],
                             self.store["psi.b"])


def init_stage1_params(cfg: Stage1Config, schema: Schema,
                       seed: int | None = None) -> Stage1Params:
    """Fresh parameters for ``schema``: Glorot weights, zero biases.

    The trainable x0/h0 start at small random values rather than zero so the
    recurrent weights see a nonzero state from step one.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed if seed is None else seed, 10)))
    feature_dim = schema.feature_dim
    d_dim = len(schema.sensitive_names) + len(schema.extra_names)
    store = K.ParamStore()

    enc_in = cfg.h_dim + feature_dim + d_dim
    store.add("phi.w0", K.glorot(rng, enc_in, cfg.phi_hidden))
    store.add("phi.b0", np.zeros(cfg.phi_hidden))
    store.add("phi.w1", K.glorot(rng, cfg.phi_hidden, cfg.phi_hidden))
    store.add("phi.b1", np.zeros(cfg.phi_hidden))
    store.add("phi.w2", K.glorot(rng, cfg.phi_hidden, 2 * cfg.z_dim))
    store.add("phi.b2", np.zeros(2 * cfg.z_dim))

    dec_in = cfg.z_dim + d_dim
    for j in range(feature_dim):
        store.add(f"chi.{j}.w0", K.glorot(rng, dec_in, cfg.chi_hidden))
        store.add(f"chi.{j}.b0", np.zeros(cfg.chi_hidden))
        store.add(f"chi.{j}.w1", K.glorot(rng, cfg.chi_hidden, 1))
        store.add(f"chi.{j}.b1", np.zeros(1))

    lstm_in = cfg.z_dim + feature_dim
    store.add("psi.w_ih", K.glorot(rng, lstm_in, 4 * cfg.h_dim,
                                   shape=(lstm_in, 4 * cfg.h_dim)))
    store.add("psi.w_hh", K.glorot(rng, cfg.h_dim, 4 * cfg.h_dim,
                                   shape=(cfg.h_dim, 4 * cfg.h_dim)))
    store.add("psi.b", np.zeros(4 * cfg.h_dim))

    store.add("x0", rng.normal(size=feature_dim) * 0.01)
    store.add("h0", rng.normal(size=cfg.h_dim) * 0.01)

    return Stage1Params(store=store, z_dim=cfg.z_dim, h_dim=cfg.h_dim,
                        feature_dim=feature_dim, d_dim=d_dim,
                        likelihoods=cfg.likelihoods_for(feature_dim))


# ---------------------------------------------------------------------------
# model pieces
# ---------------------------------------------------------------------------

def _rows(t: K.Tensor | np.ndarray, batch: int) -> K.Tensor:
    """Broadcast a parameter vector to [batch, len] as a graph op."""
    t = K.as_tensor(t)
    return K.reshape(t, (1, t.shape[-1])) + K.Tensor(np.zeros((batch, 1)))


def encode(h_prev, x_prev, d, params: Stage1Params) -> tuple[K.Tensor, K.Tensor]:
    """Posterior (mu, sigma) from [h_prev; x_prev; d] through the encoder MLP."""
    h_prev, x_prev, d = K.as_tensor(h_prev), K.as_tensor(x_prev), K.as_tensor(d)
    single = h_prev.ndim == 1
    if single:
        h_prev = K.reshape(h_prev, (1,) + h_prev.shape)
        x_prev = K.reshape(x_prev, (1,) + x_prev.shape)
        d = K.reshape(d, (1,) + d.shape)
    s = params.store
    inp = K.concat([h_prev, x_prev, d], axis=1)
    hid = K.tanh(K.affine(inp, s["phi.w0"], s["phi.b0"]))
    hid = K.tanh(K.affine(hid, s["phi.w1"], s["phi.b1"]))
    out = K.affine(hid, s["phi.w2"], s["phi.b2"])
    mu = K.narrow(out, 1, 0, params.z_dim)
    logvar = K.narrow(out, 1, params.z_dim, params.z_dim)
    sigma = K.exp(logvar * 0.5)
    if single:
        mu = K.reshape(mu, (params.z_dim,))
        sigma = K.reshape(sigma, (params.z_dim,))
    return mu, sigma


def sample_latent(mu: K.Tensor, sigma: K.Tensor,
                  rng: np.random.Generator) -> K.Tensor:
    eps = rng.normal(size=mu.shape)
    return K.reparameterize(mu, sigma, eps)


def decode(z, d, params: Stage1Params) -> K.Tensor:
    """Per-feature reconstructions from parameter-disjoint decoders.

    Bernoulli-typed features come out as sigmoid probabilities, gaussian
    features as raw values.
    """
    z, d = K.as_tensor(z), K.as_tensor(d)
    single = z.ndim == 1
    if single:
        z = K.reshape(z, (1,) + z.shape)
        d = K.reshape(d, (1,) + d.shape)
    s = params.store
    inp = K.concat([z, d], axis=1)
    cols = []
    for j in range(params.feature_dim):
        hid = K.tanh(K.affine(inp, s[f"chi.{j}.w0"], s[f"chi.{j}.b0"]))
        col = K.affine(hid, s[f"chi.{j}.w1"], s[f"chi.{j}.b1"])
        if params.likelihoods[j] == BERNOULLI:
            col = K.sigmoid(col)
        cols.append(col)
    out = K.concat(cols, axis=1)
    if single:
        out = K.reshape(out, (params.feature_dim,))
    return out


def recur(z, x, h_prev, c_prev, params: Stage1Params) -> tuple[K.Tensor, K.Tensor]:
    """One LSTM step with input [z; x]."""
    z, x = K.as_tensor(z), K.as_tensor(x)
    inp = K.concat([z, x], axis=z.ndim - 1)
    return K.lstm_cell(inp, h_prev, c_prev, params.lstm_weights())


def _nll(x_hat: K.Tensor, x_target: np.ndarray,
         likelihoods: tuple[str, ...]) -> K.Tensor:
    """Summed negative log-likelihood of a [B, F] reconstruction."""
    gauss = [j for j, k in enumerate(likelihoods) if k == GAUSSIAN]
    bern = [j for j, k in enumerate(likelihoods) if k == BERNOULLI]
    batch = x_target.shape[0]
    total = None

    def accumulate(term):
        nonlocal total
        total = term if total is None else total + term

    if gauss:
        cols = _take_columns(x_hat, gauss)
        target = x_target[:, gauss]
        diff = cols - K.Tensor(target)
        accumulate(K.sum_(diff * diff) * 0.5
                   + float(len(gauss) * batch * HALF_LOG_2PI))
    if bern:
        cols = K.clip(_take_columns(x_hat, bern), K.PROB_EPS, 1.0 - K.PROB_EPS)
        target = x_target[:, bern]
        accumulate(K.neg(K.sum_(K.Tensor(target) * K.log(cols)
                                + K.Tensor(1.0 - target) * K.log(1.0 - cols))))
    return total


def _take_columns(t: K.Tensor, indices: list[int]) -> K.Tensor:
    if indices == list(range(t.shape[1])):
        return t
    parts = [K.narrow(t, 1, j, 1) for j in indices]
    return parts[0] if len(parts) == 1 else K.concat(parts, axis=1)


def _sequence_loss(xs: np.ndarray, d: np.ndarray, eps: np.ndarray,
                   params: Stage1Params) -> K.Tensor:
    """Mean per-patient loss for a same-length batch, without the L2 term.

    xs is [B, T, F], d is [B, D], eps is [B, T-1, L, z_dim]. The first
    encoder call consumes the trainable (x0, h0); sample l=1 drives the
    recurrence.
    """
    batch, n_enc, _ = xs.shape
    n_targets = n_enc - 1
    if n_targets < 1:
        raise ValueError("sequence loss needs at least 2 encounters")
    mc = eps.shape[2]
    s = params.store
    d_node = K.Tensor(d)
    h = _rows(s["h0"], batch)
    c = K.Tensor(np.zeros((batch, params.h_dim)))
    x_prev = _rows(s["x0"], batch)
    total = None
    for t in range(n_targets):
        mu, sigma = encode(h, x_prev, d_node, params)
        term = K.gaussian_kl(mu, sigma)
        z_first = None
        for sample in range(mc):
            z = K.reparameterize(mu, sigma, eps[:, t, sample, :])
            if sample == 0:
                z_first = z
            x_hat = decode(z, d_node, params)
            term = term + _nll(x_hat, xs[:, t, :], params.likelihoods) * (1.0 / mc)
        total = term if total is None else total + term
        x_now = K.Tensor(xs[:, t, :])
        h, c = recur(z_first, x_now, h, c, params)
        x_prev = x_now
    return total * (1.0 / (n_targets * batch))


def stage1_loss(p: PatientRecord, params: Stage1Params, cfg: Stage1Config,
                rng: np.random.Generator) -> K.Tensor:
    """Full training objective for one patient (see module docstring)."""
    if p.n_encounters < 2:
        raise ValueError(f"patient {p.id!r} has a single encounter; "
                         "no reconstruction target")
    xs = p.feature_matrix()[None, :, :]
    d = p.demographic_vector()[None, :]
    eps = rng.normal(size=(1, p.n_encounters - 1, cfg.mc_samples, cfg.z_dim))
    data_term = _sequence_loss(xs, d, eps, params)
    return data_term + params.store.l2() * cfg.weight_decay


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingHistory:
    epoch_losses: tuple[float, ...]


def _buckets_by_length(ds: Dataset, min_len: int = 2) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, p in enumerate(ds.patients):
        if p.n_encounters >= min_len:
            buckets.setdefault(p.n_encounters, []).append(i)
    return buckets


def train_stage1(ds: Dataset, cfg: Stage1Config,
                 params: Stage1Params | None = None
                 ) -> tuple[Stage1Params, TrainingHistory]:
    """Mini-batch Adam on the mean stage-1 loss; deterministic under cfg.seed.

    Patients are bucketed by encounter count so batches stack rectangularly;
    the L2 term lives inside the loss, so the optimizer itself runs without
    weight decay.
    """
    if ds.n_patients == 0:
        raise ValueError("cannot train on an empty dataset")
    buckets = _buckets_by_length(ds)
    if not buckets:
        raise ValueError("no patient has >= 2 encounters; nothing to train on")
    if params is None:
        params = init_stage1_params(cfg, ds.schema)
    opt = K.Adam(params.store, lr=cfg.lr, weight_decay=0.0)

    features = {i: ds.patients[i].feature_matrix()
                for idxs in buckets.values() for i in idxs}
    demo = {i: ds.patients[i].demographic_vector()
            for idxs in buckets.values() for i in idxs}

    losses = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 11, epoch)))
        batches: list[list[int]] = []
        for length in sorted(buckets):
            idxs = np.array(buckets[length])
            idxs = idxs[rng.permutation(len(idxs))]
            for start in range(0, len(idxs), cfg.batch_size):
                batches.append(idxs[start:start + cfg.batch_size].tolist())
        order = rng.permutation(len(batches))

        epoch_total = 0.0
        epoch_count = 0
        for b in order:
            batch = batches[b]
            xs = np.stack([features[i] for i in batch])
            d = np.stack([demo[i] for i in batch])
            eps = rng.normal(size=(len(batch), xs.shape[1] - 1,
                                   cfg.mc_samples, cfg.z_dim))
            params.store.zero_grads()
            try:
                loss = (_sequence_loss(xs, d, eps, params)
                        + params.store.l2() * cfg.weight_decay)
                K.backward(loss)
                opt.step()
            except K.NumericError as exc:
                raise K.NumericError(
                    f"stage-1 epoch {epoch}, batch {b}: {exc}") from exc
            epoch_total += loss.item() * len(batch)
            epoch_count += len(batch)
        losses.append(epoch_total / epoch_count)
    return params, TrainingHistory(epoch_losses=tuple(losses))


def reconstruction_mse(ds: Dataset, params: Stage1Params) -> float:
    """Mean squared reconstruction error over the loss targets, using z = mu."""
    total = 0.0
    count = 0
    for p in ds.patients:
        if p.n_encounters < 2:
            continue
        xs = p.feature_matrix()
        d = p.demographic_vector()
        h = K.as_tensor(params.store["h0"].data)
        c = K.Tensor(np.zeros(params.h_dim))
        x_prev = K.as_tensor(params.store["x0"].data)
        d_node = K.Tensor(d)
        for t in range(p.n_encounters - 1):
            mu, _sigma = encode(h, x_prev, d_node, params)
            x_hat = decode(mu, d_node, params)
            total += float(((x_hat.data - xs[t]) ** 2).sum())
            count += params.feature_dim
            x_now = K.Tensor(xs[t])
            h, c = recur(mu, x_now, h, c, params)
            x_prev = x_now
    if count == 0:
        raise ValueError("no reconstruction targets in dataset")
    return total / count


# ---------------------------------------------------------------------------
# latent extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRow:
    patient_id: str
    t: int
    z: tuple[float, ...]
    h: tuple[float, ...]


@dataclass(frozen=True)
class LatentTrace:
    rows: tuple[TraceRow, ...]

    def index(self) -> dict[tuple[str, int], TraceRow]:
        return {(r.patient_id, r.t): r for r in self.rows}

    def by_patient(self) -> dict[str, list[TraceRow]]:
        out: dict[str, list[TraceRow]] = {}
        for r in self.rows:
            out.setdefault(r.patient_id, []).append(r)
        for rows in out.values():
            rows.sort(key=lambda r: r.t)
        return out


def extract_latents(ds: Dataset, params: Stage1Params) -> LatentTrace:
    """Deterministic posterior-mean latents and states for every encounter."""
    if ds.schema.feature_dim != params.feature_dim:
        raise ValueError(f"dataset F={ds.schema.feature_dim} but params were "
                         f"built for F={params.feature_dim}")
    d_width = len(ds.schema.sensitive_names) + len(ds.schema.extra_names)
    if d_width != params.d_dim:
        raise ValueError(f"dataset demographic width {d_width} but params "
                         f"were built for {params.d_dim}")
    buckets: dict[int, list[int]] = {}
    for i, p in enumerate(ds.patients):
        buckets.setdefault(p.n_encounters, []).append(i)

    per_patient: dict[int, list[TraceRow]] = {}
    for length, idxs in sorted(buckets.items()):
        xs = np.stack([ds.patients[i].feature_matrix() for i in idxs])
        d = np.stack([ds.patients[i].demographic_vector() for i in idxs])
        batch = len(idxs)
        d_node = K.Tensor(d)
        h = _rows(params.store["h0"], batch)
        c = K.Tensor(np.zeros((batch, params.h_dim)))
        x_prev = _rows(params.store["x0"], batch)
        for t in range(length):
            mu, _sigma = encode(h, x_prev, d_node, params)
            x_now = K.Tensor(xs[:, t, :])
            h, c = recur(mu, x_now, h, c, params)
            for row, i in enumerate(idxs):
                per_patient.setdefault(i, []).append(TraceRow(
                    patient_id=ds.patients[i].id, t=t + 1,
                    z=tuple(mu.data[row]), h=tuple(h.data[row])))
            x_prev = x_now
    rows = [r for i in range(ds.n_patients) for r in per_patient[i]]
    return LatentTrace(rows=tuple(rows))


def save_latents(trace: LatentTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace.rows:
            fh.write(json.dumps({"id": r.patient_id, "t": r.t,
                                 "z": list(r.z), "h": list(r.h)},
                                ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def load_latents(path) -> LatentTrace:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            rows.append(TraceRow(patient_id=str(doc["id"]), t=int(doc["t"]),
                                 z=tuple(doc["z"]), h=tuple(doc["h"])))
    return LatentTrace(rows=tuple(rows))


# ---------------------------------------------------------------------------
# confounder probe
# ---------------------------------------------------------------------------

PROBE_LR = 0.05
PROBE_STEPS = 400


def probe_confounder(trace: LatentTrace, gt: GroundTruth, seed: int) -> float:
    """Held-out AUC of a linear probe reading the hidden flag from mean z.

    The probe is deliberately the weakest reader (single affine + sigmoid on
    standardized per-patient mean latents) so the score measures information
    carried by z rather than probe capacity.
    """
    by_patient = trace.by_patient()
    truth = gt.by_id()
    ids = [pid for pid in by_patient if pid in truth]
    if len(ids) != len(by_patient):
        missing = sorted(set(by_patient) - set(truth))
        raise AlignmentError(f"no ground truth for patients {missing[:3]}")
    ids.sort()
    feats = np.stack([np.mean([r.z for r in by_patient[pid]], axis=0)
                      for pid in ids])
    labels = np.array([truth[pid].fin_dep for pid in ids], dtype=np.float64)

    rng = np.random.default_rng(np.random.SeedSequence((seed, 12)))
    order = rng.permutation(len(ids))
    n_train = int(np.floor(0.7 * len(ids)))
    train_idx, test_idx = order[:n_train], order[n_train:]

    mean = feats[train_idx].mean(axis=0)
    std = np.maximum(feats[train_idx].std(axis=0), 1e-6)
    feats = (feats - mean) / std

    store = K.ParamStore()
    w = store.add("w", np.zeros((feats.shape[1], 1)))
    b = store.add("b", np.zeros(1))
    opt = K.Adam(store, lr=PROBE_LR)
    x_train = K.Tensor(feats[train_idx])
    y_train = labels[train_idx].reshape(-1, 1)
    for _ in range(PROBE_STEPS):
        store.zero_grads()
        logits = K.affine(x_train, w, b)
        K.backward(K.cross_entropy(logits, y_train))
        opt.step()

    scores = feats[test_idx] @ w.data[:, 0] + b.data[0]
    return metrics.auc(scores, labels[test_idx])


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_stage1(params: Stage1Params, path, opt: K.Adam | None = None) -> None:
    params.store.save(path, opt)


def load_stage1(path, cfg: Stage1Config, schema: Schema
                ) -> tuple[Stage1Params, dict | None]:
    """Rebuild structured parameters from a checkpoint, shape-checked."""
    params = init_stage1_params(cfg, schema)
    loaded, opt_state = K.ParamStore.load(path)
    if loaded.names() != params.store.names():
        raise ValueError("checkpoint parameter names do not match config")
    params.store.load_values(loaded.copy_values())
    return params, opt_state
