"""Experiment orchestration: data generation, the two-stage pipeline, and
the three sweep protocols (demographic disturbance, group imbalance, latent
capacity), each emitting per-seed rows plus deterministic aggregate tables.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import ehr, stage1 as s1mod, stage2 as s2mod
from .ehr import Dataset
from .metrics import FairnessReport, fairness_report
from .scm import (GroundTruth, ScmConfig, SynthesisParams, apply_semisynthetic,
                  disturb_demographics, generate_scm_dataset, hide_confounder,
                  load_ground_truth, mix_training, rebalance_by_attribute,
                  save_ground_truth, subset_ground_truth)
from .stage1 import LatentTrace, Stage1Config
from .stage2 import Stage2Config

DATA_FILES = ("dataset.jsonl", "schema.json", "ground_truth.jsonl")
SUMMARY_HEADER = "experiment,sweep,metric,mean,std,n"
ROW_METRICS = ("auc", "hd", "cf_gap", "probe_auc")

DESK_SCM = ScmConfig(num_patients=500, feature_dim=16, z_true_dim=8,
                     h_true_dim=8, encounter_min=2, encounter_max=6)
DESK_STAGE1 = Stage1Config(z_dim=16, h_dim=16, phi_hidden=64, chi_hidden=8,
                           lr=1e-3, epochs=30, batch_size=64)
DESK_STAGE2 = Stage2Config(cf_weight=1.0, sensitive_fields=("race",),
                           lr=1e-3, d_model=32, n_heads=4, n_layers=2,
                           epochs=30, batch_size=128)


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit stream seed from the master seed and a label tuple."""
    text = json.dumps([master, *parts], sort_keys=True)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs: sub-configs, grids, output root."""

    scm: ScmConfig
    stage1: Stage1Config
    stage2: Stage2Config
    synth: SynthesisParams
    proportions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    ratios: tuple[tuple[int, int], ...] = ((1, 1), (1, 2), (1, 4))
    z_dims: tuple[int, ...] = (4, 8, 16, 32)
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    attribute: str = "race"
    n_seeds: int = 3
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "proportions", tuple(self.proportions))
        object.__setattr__(self, "ratios",
                           tuple(tuple(r) for r in self.ratios))
        object.__setattr__(self, "z_dims", tuple(self.z_dims))
        object.__setattr__(self, "split", tuple(self.split))
        for name in ("proportions", "ratios", "z_dims"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be a nonempty list")
        if any(not 0.0 <= p <= 1.0 for p in self.proportions):
            raise ValueError(f"proportions must lie in [0,1], "
                             f"got {self.proportions}")
        for ratio in self.ratios:
            if len(ratio) != 2 or any(int(v) < 1 for v in ratio):
                raise ValueError(f"ratios must be pairs of positive "
                                 f"integers, got {ratio}")
        if any(int(z) < 1 for z in self.z_dims):
            raise ValueError(f"z_dims must be >= 1, got {self.z_dims}")
        if len(self.split) != 3 or any(r < 0 for r in self.split) \
                or not 0.999 <= sum(self.split) <= 1.001:
            raise ValueError(f"split must be three fractions summing to 1, "
                             f"got {self.split}")
        if self.attribute not in self.scm.sensitive_names:
            raise ValueError(f"attribute {self.attribute!r} not among "
                             f"sensitive names {self.scm.sensitive_names}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        unknown = [f for f in self.stage2.sensitive_fields
                   if f not in self.scm.sensitive_names]
        if unknown:
            raise ValueError(f"stage2 sensitive_fields {unknown} not among "
                             f"{self.scm.sensitive_names}")

    def to_dict(self) -> dict:
        return {"scm": self.scm.to_dict(), "stage1": self.stage1.to_dict(),
                "stage2": self.stage2.to_dict(), "synth": self.synth.to_dict(),
                "proportions": list(self.proportions),
                "ratios": [list(r) for r in self.ratios],
                "z_dims": list(self.z_dims), "split": list(self.split),
                "attribute": self.attribute, "n_seeds": self.n_seeds,
                "seed": self.seed, "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        data = dict(payload)
        known = {"scm", "stage1", "stage2", "synth", "proportions", "ratios",
                 "z_dims", "split", "attribute", "n_seeds", "seed", "out_dir"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        scm_cfg = (ScmConfig.from_dict(data.pop("scm"))
                   if "scm" in data else DESK_SCM)
        stage1_cfg = (Stage1Config.from_dict(data.pop("stage1"))
                      if "stage1" in data else DESK_STAGE1)
        stage2_cfg = (Stage2Config.from_dict(data.pop("stage2"))
                      if "stage2" in data else DESK_STAGE2)
        synth = (SynthesisParams.from_dict(data.pop("synth"))
                 if "synth" in data
                 else SynthesisParams.default(scm_cfg.feature_dim))
        return cls(scm=scm_cfg, stage1=stage1_cfg, stage2=stage2_cfg,
                   synth=synth, **data)


def load_config(path) -> ExperimentConfig:
    """Read TOML or JSON; a relative out_dir is anchored at the file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        payload = json.loads(text)
    elif path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        payload = tomllib.loads(text)
    else:
        raise ValueError(f"config must be .toml or .json, got {path.name}")
    cfg = ExperimentConfig.from_dict(payload)
    out = Path(cfg.out_dir)
    if not out.is_absolute():
        cfg = replace(cfg, out_dir=str(path.resolve().parent / out))
    return cfg


# ---------------------------------------------------------------------------
# rows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    """One sweep point under one seed, plus run bookkeeping."""

    experiment: str
    sweep: str
    seed: int
    auc: float
    hd: float
    cf_gap: float
    probe_auc: float | None
    wall_clock_s: float
    test_hash: str

    def to_json(self) -> dict:
        return {"experiment": self.experiment, "sweep": self.sweep,
                "seed": self.seed, "auc": self.auc, "hd": self.hd,
                "cf_gap": self.cf_gap, "probe_auc": self.probe_auc,
                "wall_clock_s": self.wall_clock_s,
                "test_hash": self.test_hash}

    @classmethod
    def from_json(cls, doc: dict) -> "ReportRow":
        return cls(**doc)


def save_rows(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_json(), ensure_ascii=False,
                                separators=(",", ":")))
            fh.write("\n")


def load_rows(path) -> tuple[ReportRow, ...]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(ReportRow.from_json(json.loads(line)))
    return tuple(rows)


def dataset_hash(ds: Dataset) -> str:
    """Content hash over patients in order: ids, demographics, features,
    and labels all contribute, so any edit changes the digest."""
    doc = [[p.id, list(p.demographics.sensitive_bits),
            list(p.demographics.extra),
            [[list(e.x), e.y] for e in p.encounters]]
           for p in ds.patients]
    text = json.dumps(doc, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# shared pipeline core
# ---------------------------------------------------------------------------

@dataclass
class PipelineOutcome:
    report: FairnessReport
    stage1_params: s1mod.Stage1Params
    stage2_params: s2mod.Stage2Params
    stage1_history: s1mod.TrainingHistory
    stage2_history: s2mod.Stage2History
    trace: LatentTrace
    predictions: tuple


def run_pipeline(train: Dataset, val: Dataset, test: Dataset,
                 stage1_cfg: Stage1Config, stage2_cfg: Stage2Config,
                 attribute: str,
                 stage1_params: s1mod.Stage1Params | None = None
                 ) -> PipelineOutcome:
    """Normalize, fit both stages, and evaluate fairness on the test split.

    Normalization statistics come from the training split alone. Passing
    ``stage1_params`` skips Stage-1 training, which lets ablations share one
    checkpoint.
    """
    stats = ehr.fit_normalizer(train)
    train_n = ehr.apply_normalizer(train, stats)
    val_n = ehr.apply_normalizer(val, stats)
    test_n = ehr.apply_normalizer(test, stats)
    if stage1_params is None:
        stage1_params, s1_hist = s1mod.train_stage1(train_n, stage1_cfg)
    else:
        s1_hist = s1mod.TrainingHistory(epoch_losses=())
    trace = LatentTrace(rows=(
        s1mod.extract_latents(train_n, stage1_params).rows
        + s1mod.extract_latents(val_n, stage1_params).rows
        + s1mod.extract_latents(test_n, stage1_params).rows))
    stage2_params, s2_hist = s2mod.train_stage2(train_n, val_n, trace,
                                                stage2_cfg)
    predictions = s2mod.predict_dataset(test_n, trace, stage2_params)
    gap = s2mod.cf_gap(test_n, trace, stage2_params, stage2_cfg)
    report = fairness_report(predictions, test.schema.sensitive_names,
                             attribute, cf_gap=gap)
    return PipelineOutcome(report=report, stage1_params=stage1_params,
                           stage2_params=stage2_params,
                           stage1_history=s1_hist, stage2_history=s2_hist,
                           trace=trace, predictions=predictions)


def _stage_cfgs(cfg: ExperimentConfig, label: str, *point
                ) -> tuple[Stage1Config, Stage2Config]:
    s1 = replace(cfg.stage1, seed=derive_seed(cfg.seed, label, "stage1",
                                              *point))
    s2 = replace(cfg.stage2, seed=derive_seed(cfg.seed, label, "stage2",
                                              *point))
    return s1, s2


def _splits(cfg: ExperimentConfig, ds: Dataset
            ) -> tuple[Dataset, Dataset, Dataset]:
    return ehr.split_dataset(ds, cfg.split, derive_seed(cfg.seed, "split"))


# ---------------------------------------------------------------------------
# data files
# ---------------------------------------------------------------------------

def ensure_data(cfg: ExperimentConfig) -> tuple[Dataset, GroundTruth]:
    """Load the experiment's dataset files, generating them on first use."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in DATA_FILES]
    if all(p.exists() for p in paths):
        schema = ehr.load_schema(paths[1])
        ds = ehr.load_dataset(paths[0], schema)
        return ds, load_ground_truth(paths[2])
    ds, gt = generate_scm_dataset(cfg.scm)
    ehr.save_dataset(ds, paths[0])
    ehr.save_schema(ds.schema, paths[1])
    save_ground_truth(gt, paths[2])
    return ds, gt


def cmd_generate(cfg: ExperimentConfig) -> tuple[Dataset, GroundTruth]:
    """Write dataset, schema, and ground truth, overwriting stale copies."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, gt = generate_scm_dataset(cfg.scm)
    ehr.save_dataset(ds, out / DATA_FILES[0])
    ehr.save_schema(ds.schema, out / DATA_FILES[1])
    save_ground_truth(gt, out / DATA_FILES[2])
    return ds, gt


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def aggregate_rows(rows) -> list[tuple[str, str, str, float, float, int]]:
    """Per (experiment, sweep, metric): mean, sample std (ddof=1), count."""
    groups: dict[tuple[str, str], list[ReportRow]] = {}
    for row in rows:
        groups.setdefault((row.experiment, row.sweep), []).append(row)
    table = []
    for (experiment, sweep), members in groups.items():
        for metric in ROW_METRICS:
            values = [getattr(r, metric) for r in members]
            if any(v is None for v in values):
                continue
            n = len(values)
            mean = float(np.mean(values))
            std = float(np.std(values, ddof=1)) if n > 1 else 0.0
            table.append((experiment, sweep, metric, mean, std, n))
    return table


def write_summary(table, path) -> None:
    lines = [SUMMARY_HEADER]
    for experiment, sweep, metric, mean, std, n in table:
        lines.append(f"{experiment},{sweep},{metric},{mean!r},{std!r},{n}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_plotdata(table, path) -> None:
    data: dict = {}
    for experiment, sweep, metric, mean, std, n in table:
        exp = data.setdefault(experiment, {"x": [], "metrics": {}})
        if sweep not in exp["x"]:
            exp["x"].append(sweep)
        series = exp["metrics"].setdefault(metric,
                                           {"mean": [], "std": [], "n": []})
        series["mean"].append(mean)
        series["std"].append(std)
        series["n"].append(n)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _write_experiment(rows, exp_dir: Path) -> None:
    exp_dir.mkdir(parents=True, exist_ok=True)
    save_rows(rows, exp_dir / "rows.jsonl")
    table = aggregate_rows(rows)
    write_summary(table, exp_dir / "summary.csv")
    write_plotdata(table, exp_dir / "plotdata.json")


def cmd_report(out_dir) -> list[tuple[str, str, str, float, float, int]]:
    """Aggregate every rows.jsonl under ``out_dir`` into one summary pair."""
    out = Path(out_dir)
    row_files = sorted(out.glob("*/rows.jsonl"))
    rows = []
    for path in row_files:
        rows.extend(load_rows(path))
    if not rows:
        raise FileNotFoundError(f"no rows.jsonl files under {out}")
    table = aggregate_rows(rows)
    write_summary(table, out / "summary.csv")
    write_plotdata(table, out / "plotdata.json")
    return table


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pipeline(cfg: ExperimentConfig) -> FairnessReport:
    """One end-to-end run on the untouched dataset; writes checkpoints."""
    ds, _ = ensure_data(cfg)
    train, val, test = _splits(cfg, ds)
    s1_cfg, s2_cfg = _stage_cfgs(cfg, "point", 0)
    started = time.perf_counter()
    outcome = run_pipeline(train, val, test, s1_cfg, s2_cfg, cfg.attribute)
    elapsed = time.perf_counter() - started
    exp_dir = Path(cfg.out_dir) / "pipeline"
    exp_dir.mkdir(parents=True, exist_ok=True)
    s1mod.save_stage1(outcome.stage1_params, exp_dir / "stage1.json")
    s2mod.save_stage2(outcome.stage2_params, exp_dir / "stage2.json")
    with open(exp_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(outcome.report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(exp_dir / "history.json", "w", encoding="utf-8") as fh:
        json.dump({"stage1_losses": list(outcome.stage1_history.epoch_losses),
                   "stage2_losses": list(outcome.stage2_history.epoch_losses),
                   "stage2_val_aucs": list(outcome.stage2_history.val_aucs),
                   "best_epoch": outcome.stage2_history.best_epoch},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    s2mod.save_predictions_csv(outcome.predictions,
                               exp_dir / "predictions.csv")
    row = ReportRow(experiment="pipeline", sweep="-", seed=0,
                    auc=outcome.report.auc_overall,
                    hd=outcome.report.hd_binary,
                    cf_gap=outcome.report.cf_gap, probe_auc=None,
                    wall_clock_s=elapsed, test_hash=dataset_hash(test))
    _write_experiment([row], exp_dir)
    return outcome.report


def _point_q2_disturb(cfg: ExperimentConfig, ds: Dataset, gt: GroundTruth,
                      point) -> ReportRow:
    proportion, k = point
    train, val, test = _splits(cfg, ds)
    disturbed = disturb_demographics(train, cfg.scm.sensitive_names,
                                     derive_seed(cfg.seed, "disturb"))
    mixed = mix_training(train, disturbed, proportion,
                         derive_seed(cfg.seed, "mix", proportion, k))
    s1_cfg, s2_cfg = _stage_cfgs(cfg, "point", k)
    started = time.perf_counter()
    outcome = run_pipeline(mixed, val, test, s1_cfg, s2_cfg, cfg.attribute)
    elapsed = time.perf_counter() - started
    return ReportRow(experiment="q2_disturb", sweep=repr(float(proportion)),
                     seed=k, auc=outcome.report.auc_overall,
                     hd=outcome.report.hd_binary,
                     cf_gap=outcome.report.cf_gap, probe_auc=None,
                     wall_clock_s=elapsed, test_hash=dataset_hash(test))


def _point_q2_imbalance(cfg: ExperimentConfig, ds: Dataset, gt: GroundTruth,
                        point) -> ReportRow:
    ratio, k = point
    train, val, test = _splits(cfg, ds)
    rebalanced = rebalance_by_attribute(
        train, cfg.attribute, ratio, train.n_patients,
        derive_seed(cfg.seed, "rebalance", list(ratio), k))
    s1_cfg, s2_cfg = _stage_cfgs(cfg, "point", k)
    started = time.perf_counter()
    outcome = run_pipeline(rebalanced, val, test, s1_cfg, s2_cfg,
                           cfg.attribute)
    elapsed = time.perf_counter() - started
    return ReportRow(experiment="q2_imbalance",
                     sweep=f"{ratio[0]}:{ratio[1]}", seed=k,
                     auc=outcome.report.auc_overall,
                     hd=outcome.report.hd_binary,
                     cf_gap=outcome.report.cf_gap, probe_auc=None,
                     wall_clock_s=elapsed, test_hash=dataset_hash(test))


def _point_q3_sweep(cfg: ExperimentConfig, ds: Dataset, gt: GroundTruth,
                    point) -> ReportRow:
    z_dim, k = point
    semi = apply_semisynthetic(ds, gt, cfg.synth)
    hidden = hide_confounder(semi)
    train, val, test = _splits(cfg, hidden)
    s1_cfg, s2_cfg = _stage_cfgs(cfg, "point", k)
    s1_cfg = replace(s1_cfg, z_dim=int(z_dim))
    started = time.perf_counter()
    outcome = run_pipeline(train, val, test, s1_cfg, s2_cfg, cfg.attribute)
    train_ids = {p.id for p in train.patients}
    train_rows = tuple(r for r in outcome.trace.rows
                       if r.patient_id in train_ids)
    probe = s1mod.probe_confounder(LatentTrace(rows=train_rows),
                                   subset_ground_truth(gt, train),
                                   derive_seed(cfg.seed, "probe", z_dim, k))
    elapsed = time.perf_counter() - started
    return ReportRow(experiment="q3_sweep", sweep=str(int(z_dim)), seed=k,
                     auc=outcome.report.auc_overall,
                     hd=outcome.report.hd_binary,
                     cf_gap=outcome.report.cf_gap, probe_auc=probe,
                     wall_clock_s=elapsed, test_hash=dataset_hash(test))


_POINT_RUNNERS = {"q2_disturb": _point_q2_disturb,
                  "q2_imbalance": _point_q2_imbalance,
                  "q3_sweep": _point_q3_sweep}


def _worker(args: tuple) -> dict:
    cfg_dict, experiment, point = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ds, gt = ensure_data(cfg)
    return _POINT_RUNNERS[experiment](cfg, ds, gt, point).to_json()


def _run_sweep(cfg: ExperimentConfig, experiment: str, grid,
               jobs: int = 1) -> tuple[ReportRow, ...]:
    ds, gt = ensure_data(cfg)
    points = [(value, k) for value in grid for k in range(cfg.n_seeds)]
    if jobs > 1:
        args = [(cfg.to_dict(), experiment, point) for point in points]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = tuple(ReportRow.from_json(doc)
                         for doc in pool.map(_worker, args))
    else:
        runner = _POINT_RUNNERS[experiment]
        rows = tuple(runner(cfg, ds, gt, point) for point in points)
    _write_experiment(rows, Path(cfg.out_dir) / experiment)
    return rows


def cmd_q2_disturb(cfg: ExperimentConfig, jobs: int = 1
                   ) -> tuple[ReportRow, ...]:
    """Train on original/disturbed mixtures; evaluate on the fixed test set."""
    return _run_sweep(cfg, "q2_disturb", cfg.proportions, jobs)


def cmd_q2_imbalance(cfg: ExperimentConfig, jobs: int = 1
                     ) -> tuple[ReportRow, ...]:
    """Rebalance the training split along one attribute; fixed test set."""
    return _run_sweep(cfg, "q2_imbalance", cfg.ratios, jobs)


def cmd_q3_sweep(cfg: ExperimentConfig, jobs: int = 1
                 ) -> tuple[ReportRow, ...]:
    """Hide the amplified confounder, sweep latent width, probe and predict."""
    if not cfg.scm.observe_confounder:
        raise ValueError("q3 sweep needs scm.observe_confounder=true so the "
                         "confounder exists before being hidden")
    return _run_sweep(cfg, "q3_sweep", [int(z) for z in cfg.z_dims], jobs)
