"""Command-line runner: ``fedmac fed``, ``fedmac theory`` and ``fedmac compare``.

Configs are INI files; every value is read as JSON when it parses and as a
bare string otherwise. See ``configs/FORMAT.md`` for the full grammar.

Exit codes: 0 success, 2 configuration or input error, 3 divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen, theorylab
from .fedcore import DivergenceError, HyperParams, Strategy, StrategyKind, run_experiment
from .metrics import CSV_SCHEMA_VERSION, MetricsRecord, best_summary
from .models import Batch, ModelSpec
from .sparsity import DEFAULT_ZERO_TOL

SUMMARY_SCHEMA_VERSION = 1
THEORY_COLUMNS = ["prior", "zeta", "N_D", "success_rate", "mean_error", "v_zeta", "eta_sq_estimate"]

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class ConfigError(Exception):
    """Invalid configuration; the message names the file, line and field."""


# ---------------------------------------------------------------- config parsing


class RawConfig:
    """INI sections with JSON-decoded values and the source line of every key."""

    _section_re = re.compile(r"^\s*\[([^\]]+)\]")
    _key_re = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")

    def __init__(self, path):
        self.path = Path(path)
        try:
            text = self.path.read_text()
        except OSError as err:
            raise ConfigError(f"{path}: cannot read config ({err.strerror})") from None
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"),
                                           default_section="__defaults__")
        parser.optionxform = str
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        self.lines: dict[tuple[str, str], int] = {}
        self.section_lines: dict[str, int] = {}
        section = None
        for no, line in enumerate(text.splitlines(), 1):
            if m := self._section_re.match(line):
                section = m.group(1).strip()
                self.section_lines[section] = no
            elif section and not line.strip().startswith(("#", ";")) and (m := self._key_re.match(line)):
                self.lines.setdefault((section, m.group(1).strip()), no)
        self.sections: dict[str, dict] = {}
        for name in parser.sections():
            self.sections[name] = {k: self._decode(v) for k, v in parser[name].items()}

    @staticmethod
    def _decode(raw: str):
        try:
            return json.loads(raw)
        except ValueError:
            return raw.strip()

    def where(self, section: str, key: str | None = None) -> str:
        if key is not None and (section, key) in self.lines:
            return f"{self.path}:{self.lines[section, key]}: [{section}] {key}"
        if section in self.section_lines:
            return f"{self.path}:{self.section_lines[section]}: [{section}]" + (f" {key}" if key else "")
        return f"{self.path}: [{section}]" + (f" {key}" if key else "")

    def fail(self, section, key, msg):
        raise ConfigError(f"{self.where(section, key)}: {msg}")

    def section(self, name: str, required: bool = True) -> dict:
        if name not in self.sections:
            if required:
                raise ConfigError(f"{self.path}: missing section [{name}]")
            return {}
        return self.sections[name]


def _take(raw: RawConfig, sec: str, values: dict, key: str, kind, default=dataclasses.MISSING):
    if key not in values:
        if default is dataclasses.MISSING:
            raise ConfigError(f"{raw.where(sec)}: missing required field '{key}'")
        return default
    v = values[key]
    try:
        if kind is bool:
            if not isinstance(v, bool):
                raise TypeError
            return v
        if kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                raise TypeError
            return v
        if kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeError
            return float(v)
        if kind is str:
            if not isinstance(v, str):
                raise TypeError
            return v
        if kind == "int_list":
            if not isinstance(v, list) or not v or any(isinstance(x, bool) or not isinstance(x, int) for x in v):
                raise TypeError
            return [int(x) for x in v]
        if kind == "float_list":
            if not isinstance(v, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
                raise TypeError
            return [float(x) for x in v]
        if kind == "str_list":
            if not isinstance(v, list) or not v or any(not isinstance(x, str) for x in v):
                raise TypeError
            return list(v)
    except TypeError:
        name = {"int_list": "nonempty list of integers", "float_list": "list of numbers",
                "str_list": "nonempty list of strings"}.get(kind, getattr(kind, "__name__", str(kind)))
        raw.fail(sec, key, f"expected {name}, got {json.dumps(v)}")
    raise AssertionError(kind)


def _reject_unknown(raw: RawConfig, sec: str, values: dict, allowed):
    for key in values:
        if key not in allowed:
            raw.fail(sec, key, f"unknown field (allowed: {', '.join(sorted(allowed))})")


@dataclass
class DatasetConfig:
    source: str
    params: dict
    files: dict = field(default_factory=dict)


@dataclass
class StrategyRun:
    label: str
    strategy: Strategy
    hp: HyperParams


@dataclass
class FedConfig:
    path: Path
    dataset: DatasetConfig
    model: ModelSpec
    runs: list[StrategyRun]
    seeds: list[int]
    out_dir: Path
    zero_tol: float = DEFAULT_ZERO_TOL
    weighted: bool = False
    pm_mode: str = "last"


HP_FIELDS = {f.name: f.type for f in dataclasses.fields(HyperParams)}
HP_KINDS = {"T": int, "R": int, "S": int, "batch_size": int, "inner_steps": int, "nu_max_iters": int,
            "compute_only_sampled": bool}
STRATEGY_KEYS = {"kind", "mu", "K", "alpha", "beta_ml"}

DATASET_FIELDS = {
    "synthetic": {"n_clients": int, "alpha_bar": float, "beta_bar": float, "input_dim": int, "num_classes": int,
                  "samples_min": int, "samples_max": int, "seed": int},
    "shards": {"images": str, "labels": str, "n_clients": int, "labels_per_client": int, "seed": int},
    "dirichlet": {"images": str, "labels": str, "n_clients": int, "alpha": float, "seed": int},
    "idx": {"images": str, "labels": str, "n_clients": int, "seed": int},
}
DATASET_REQUIRED = {
    "synthetic": {"n_clients", "alpha_bar", "beta_bar"},
    "shards": {"images", "labels", "n_clients", "labels_per_client"},
    "dirichlet": {"images", "labels", "n_clients", "alpha"},
    "idx": {"images", "labels", "n_clients"},
}


def _parse_dataset(raw: RawConfig) -> DatasetConfig:
    sec = "dataset"
    values = raw.section(sec)
    source = _take(raw, sec, values, "source", str)
    if source not in DATASET_FIELDS:
        raw.fail(sec, "source", f"unknown source '{source}' (expected one of {', '.join(DATASET_FIELDS)})")
    spec = DATASET_FIELDS[source]
    _reject_unknown(raw, sec, values, set(spec) | {"source"})
    params = {}
    for key, kind in spec.items():
        if key in values:
            params[key] = _take(raw, sec, values, key, kind)
        elif key in DATASET_REQUIRED[source]:
            raise ConfigError(f"{raw.where(sec)}: missing required field '{key}' for source '{source}'")
    files = {}
    for key in ("images", "labels"):
        if key in params:
            p = Path(params[key])
            if not p.is_absolute():
                p = raw.path.parent / p
            if not p.is_file():
                raw.fail(sec, key, f"file not found: {p}")
            files[key] = p
    return DatasetConfig(source, params, files)


def _parse_model(raw: RawConfig) -> ModelSpec:
    sec = "model"
    values = raw.section(sec)
    _reject_unknown(raw, sec, values, {"kind", "input_dim", "hidden_dim", "num_classes"})
    kind = _take(raw, sec, values, "kind", str)
    if kind not in ("MLR", "MLP2"):
        raw.fail(sec, "kind", f"unknown model kind '{kind}' (expected MLR or MLP2)")
    try:
        return ModelSpec(kind, _take(raw, sec, values, "input_dim", int), _take(raw, sec, values, "num_classes", int),
                         _take(raw, sec, values, "hidden_dim", int, 0))
    except ValueError as err:
        raise ConfigError(f"{raw.where(sec)}: {err}") from None


def _hp_values(raw: RawConfig, sec: str, values: dict) -> dict:
    out = {}
    for key in values:
        if key in HP_FIELDS:
            out[key] = _take(raw, sec, values, key, HP_KINDS.get(key, float))
    return out


def _parse_runs(raw: RawConfig) -> list[StrategyRun]:
    base_sec = "train"
    base = raw.section(base_sec)
    _reject_unknown(raw, base_sec, base, set(HP_FIELDS))
    base_hp = _hp_values(raw, base_sec, base)
    labels = [name.split(".", 1)[1] for name in raw.sections if name.startswith("strategy.")]
    if not labels:
        raise ConfigError(f"{raw.path}: no [strategy.<name>] sections")
    runs = []
    for label in labels:
        sec = f"strategy.{label}"
        values = raw.section(sec)
        _reject_unknown(raw, sec, values, set(HP_FIELDS) | STRATEGY_KEYS)
        kind_name = _take(raw, sec, values, "kind", str, label)
        try:
            kind = StrategyKind(kind_name)
        except ValueError:
            raw.fail(sec, "kind" if "kind" in values else None,
                     f"unknown strategy '{kind_name}' (expected one of {', '.join(k.value for k in StrategyKind)})")
        hp_kw = dict(base_hp)
        hp_kw.update(_hp_values(raw, sec, values))
        st_kw = {}
        for key in ("mu", "alpha", "beta_ml"):
            if key in values:
                st_kw[key] = _take(raw, sec, values, key, float)
        if "K" in values:
            st_kw["K"] = _take(raw, sec, values, "K", int)
        if kind is StrategyKind.PFEDME and "lam" in values:
            st_kw["lam"] = hp_kw["lam"]
        for key in ("T", "R", "S"):
            if key not in hp_kw:
                raise ConfigError(f"{raw.where(sec)}: missing required field '{key}' (set it in [train] or here)")
        try:
            hp = HyperParams(**hp_kw)
        except ValueError as err:
            raise ConfigError(f"{raw.where(sec)}: {err}") from None
        try:
            strategy = Strategy(kind, **st_kw)
        except ValueError as err:
            raise ConfigError(f"{raw.where(sec)}: {err}") from None
        runs.append(StrategyRun(label, strategy, hp))
    return runs


def _parse_seeds(raw: RawConfig, values: dict, override: list[int] | None) -> list[int]:
    seeds = override if override is not None else _take(raw, "run", values, "seeds", "int_list", [0])
    if not seeds:
        raise ConfigError(f"{raw.where('run', 'seeds')}: seeds must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"{raw.where('run', 'seeds')}: duplicate seeds")
    return seeds


def _out_dir(raw: RawConfig, values: dict, override) -> Path:
    if override is not None:
        return Path(override)
    p = Path(_take(raw, "run", values, "out_dir", str, "results"))
    return p if p.is_absolute() else raw.path.parent / p


def load_fed_config(path, seeds: list[int] | None = None, out_dir=None) -> FedConfig:
    raw = RawConfig(path)
    run = raw.section("run", required=False)
    _reject_unknown(raw, "run", run, {"seeds", "out_dir", "zero_tol", "weighted", "pm_mode"})
    dataset = _parse_dataset(raw)
    model = _parse_model(raw)
    runs = _parse_runs(raw)
    zero_tol = _take(raw, "run", run, "zero_tol", float, DEFAULT_ZERO_TOL)
    if zero_tol < 0:
        raw.fail("run", "zero_tol", "must be nonnegative")
    pm_mode = _take(raw, "run", run, "pm_mode", str, "last")
    if pm_mode not in ("last", "fresh"):
        raw.fail("run", "pm_mode", "expected 'last' or 'fresh'")
    n_clients = dataset.params["n_clients"]
    for r in runs:
        if r.hp.S > n_clients:
            raise ConfigError(f"{raw.where('strategy.' + r.label, 'S')}: S={r.hp.S} exceeds n_clients={n_clients}")
    if dataset.source == "synthetic":
        if dataset.params.get("input_dim", 60) != model.input_dim:
            raise ConfigError(f"{raw.where('model', 'input_dim')}: does not match the synthetic input_dim")
        if dataset.params.get("num_classes", 10) != model.num_classes:
            raise ConfigError(f"{raw.where('model', 'num_classes')}: does not match the synthetic num_classes")
    return FedConfig(Path(path), dataset, model, runs, _parse_seeds(raw, run, seeds), _out_dir(raw, run, out_dir),
                     zero_tol, _take(raw, "run", run, "weighted", bool, False), pm_mode)


def build_dataset(cfg: DatasetConfig, num_classes: int, seed: int) -> datagen.FederatedDataset:
    """Dataset for one run; ``seed`` is used unless the config pins ``seed``."""
    p = cfg.params
    dseed = p.get("seed", seed)
    if cfg.source == "synthetic":
        lo, hi = p.get("samples_min", 50), p.get("samples_max", 500)
        return datagen.gen_synthetic(datagen.SyntheticConfig(
            p["n_clients"], p["alpha_bar"], p["beta_bar"], p.get("input_dim", 60), p.get("num_classes", 10),
            (lo, hi), dseed))
    pool = datagen.load_idx(cfg.files["images"], cfg.files["labels"])
    if cfg.source == "shards":
        return datagen.shard_partition(pool, p["n_clients"], p["labels_per_client"], dseed, num_classes)
    if cfg.source == "dirichlet":
        return datagen.dirichlet_partition(pool, p["n_clients"], p["alpha"], dseed, num_classes)
    return iid_partition(pool, p["n_clients"], dseed, num_classes)


def iid_partition(data: Batch, n_clients: int, seed: int, num_classes: int) -> datagen.FederatedDataset:
    """Uniformly shuffled, near-equal split (the ``idx`` source)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    parts = np.array_split(rng.permutation(len(data)), n_clients)
    clients = []
    srng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    for idx in parts:
        idx = np.sort(idx)
        tr, te = datagen.stratified_split(data.labels[idx], srng)
        clients.append(datagen.ClientData(data.take(idx[tr]), data.take(idx[te]), idx[tr], idx[te]))
    return datagen.FederatedDataset(clients, num_classes, f"iid(n_clients={n_clients}, seed={seed})")


# ---------------------------------------------------------------- fed runs


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def history_csv(history: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(MetricsRecord.columns())
    for rec in history:
        out.writerow(rec.to_row())
    return buf.getvalue()


def _run_one(cfg: FedConfig, run: StrategyRun, seed: int):
    data = build_dataset(cfg.dataset, cfg.model.num_classes, seed)
    return run_experiment(data, cfg.model, run.hp, run.strategy, seed, zero_tol=cfg.zero_tol,
                          weighted=cfg.weighted, pm_mode=cfg.pm_mode)


def _job(args):
    cfg, run, seed = args
    try:
        return ("ok", _run_one(cfg, run, seed))
    except DivergenceError as err:
        return ("diverged", (str(err), err.round, err.strategy))


def _stat(values):
    vals = [v for v in values if v is not None]
    if len(vals) != len(values) or not vals:
        return None
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def summarize(run: StrategyRun, seeds: list[int], histories: list[list[MetricsRecord]], cfg: FedConfig) -> dict:
    per_seed = []
    for seed, h in zip(seeds, histories):
        b = best_summary(h)
        last = h[-1]
        per_seed.append({
            "seed": seed, "best_gm": b.best_gm, "best_pm": b.best_pm, "gm_round": b.gm_round, "pm_round": b.pm_round,
            "final_gm_sparsity": last.gm_sparsity, "final_pm_sparsity": last.mean_pm_sparsity,
            "final_cum_comm_bits": last.cum_comm_bits,
        })
    return {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "label": run.label,
        "strategy": run.strategy.name,
        "hyperparams": dataclasses.asdict(run.hp),
        "strategy_params": {k: v for k, v in dataclasses.asdict(run.strategy).items() if k != "kind"},
        "zero_tol": cfg.zero_tol,
        "seeds": seeds,
        "best_gm": _stat([p["best_gm"] for p in per_seed]),
        "best_pm": _stat([p["best_pm"] for p in per_seed]),
        "final_sparsity": _stat([p["final_gm_sparsity"] for p in per_seed]),
        "final_pm_sparsity": _stat([p["final_pm_sparsity"] for p in per_seed]),
        "comm_bits": _stat([p["final_cum_comm_bits"] for p in per_seed]),
        "per_seed": per_seed,
    }


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def run_fed(config_path, seeds=None, out_dir=None, threads: int = 1, log=None) -> int:
    log = sys.stderr if log is None else log
    try:
        cfg = load_fed_config(config_path, seeds, out_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=log)
        return EXIT_CONFIG
    try:
        for seed in cfg.seeds[:1]:
            build_dataset(cfg.dataset, cfg.model.num_classes, seed)
    except (ValueError, OSError) as err:
        print(f"config error: dataset [{cfg.dataset.source}]: {err}", file=log)
        return EXIT_CONFIG
    jobs = [(cfg, run, seed) for run in cfg.runs for seed in cfg.seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    for status, payload in results:
        if status == "diverged":
            msg, rnd, strat = payload
            print(f"diverged: {msg}", file=log)
            return EXIT_DIVERGED
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    it = iter(results)
    for run in cfg.runs:
        histories = []
        for seed in cfg.seeds:
            history = next(it)[1]
            histories.append(history)
            (cfg.out_dir / f"{run.label}_seed{seed}.csv").write_text(history_csv(history))
        summary = summarize(run, cfg.seeds, histories, cfg)
        (cfg.out_dir / f"{run.label}_summary.json").write_text(_dump_json(summary))
        gm = summary["best_gm"]
        print(f"{run.label}: best GM {gm['mean']:.4f} +- {gm['std']:.4f} over {len(cfg.seeds)} seed(s)", file=log)
    return EXIT_OK


# ---------------------------------------------------------------- theory runs


@dataclass
class TheoryConfig:
    path: Path
    N_I: int
    s: int
    side: theorylab.SideModel
    priors: list[str]
    zeta_grid: list[float]
    N_D_grid: list[int]
    trials: int
    success_tol: float
    gamma: float | None
    mode: str
    mc_samples: int
    iters: int
    tol: float
    seeds: list[int]
    out_dir: Path


def load_theory_config(path, seeds=None, out_dir=None) -> TheoryConfig:
    raw = RawConfig(path)
    run = raw.section("run", required=False)
    _reject_unknown(raw, "run", run, {"seeds", "out_dir"})
    sec = "theory"
    t = raw.section(sec)
    _reject_unknown(raw, sec, t, {"N_I", "s", "side_model", "sigma_w", "k", "priors", "zeta_grid", "N_D_grid",
                                  "trials", "success_tol", "gamma", "mode", "mc_samples", "iters", "tol"})
    N_I = _take(raw, sec, t, "N_I", int)
    s = _take(raw, sec, t, "s", int)
    if not 0 <= s <= N_I:
        raw.fail(sec, "s", f"need 0 <= s <= N_I, got s={s}, N_I={N_I}")
    try:
        side = theorylab.SideModel(_take(raw, sec, t, "side_model", str, "exact"),
                                   _take(raw, sec, t, "sigma_w", float, 0.0), _take(raw, sec, t, "k", int, 0))
    except ValueError as err:
        raise ConfigError(f"{raw.where(sec, 'side_model')}: {err}") from None
    priors = _take(raw, sec, t, "priors", "str_list", ["F1_MaxCorr", "F2_L2Dist"])
    for p in priors:
        if p not in {k.value for k in theorylab.PriorKind}:
            raw.fail(sec, "priors", f"unknown prior '{p}'")
    if "zeta_grid" in t and t["zeta_grid"] == "default":
        zeta_grid = list(theorylab.DEFAULT_ZETA_GRID)
    else:
        zeta_grid = _take(raw, sec, t, "zeta_grid", "float_list", list(theorylab.DEFAULT_ZETA_GRID))
    if not zeta_grid or any(z < 0 for z in zeta_grid):
        raw.fail(sec, "zeta_grid", "must be a nonempty list of nonnegative numbers")
    if "N_D_grid" not in t:
        raise ConfigError(f"{raw.where(sec)}: missing required field 'N_D_grid'")
    if t["N_D_grid"] == []:
        raw.fail(sec, "N_D_grid", "empty N_D grid")
    grid = _take(raw, sec, t, "N_D_grid", "int_list")
    if grid[0] < 1 or any(b <= a for a, b in zip(grid, grid[1:])):
        raw.fail(sec, "N_D_grid", "must be positive and strictly ascending")
    trials = _take(raw, sec, t, "trials", int, 50)
    if trials < 10:
        raw.fail(sec, "trials", "must be >= 10")
    gamma = t.get("gamma")
    if gamma is not None:
        gamma = _take(raw, sec, t, "gamma", float)
        if gamma <= 0:
            raw.fail(sec, "gamma", "must be positive (or null for 0.1/sqrt(N_D))")
    mode = _take(raw, sec, t, "mode", str, "optimal")
    if mode not in ("optimal", "matched"):
        raw.fail(sec, "mode", "expected 'optimal' or 'matched'")
    mc = _take(raw, sec, t, "mc_samples", int, 0)
    if 0 < mc < 100:
        raw.fail(sec, "mc_samples", "must be 0 (off) or >= 100")
    return TheoryConfig(Path(path), N_I, s, side, priors, zeta_grid, grid, trials,
                        _take(raw, sec, t, "success_tol", float, 1e-2), gamma, mode, mc,
                        _take(raw, sec, t, "iters", int, 4000), _take(raw, sec, t, "tol", float, 1e-7),
                        _parse_seeds(raw, run, seeds), _out_dir(raw, run, out_dir))


def _theory_seed(cfg: TheoryConfig, seed: int):
    rows, thresholds = [], []
    for prior in cfg.priors:
        kind = theorylab.PriorKind(prior)
        if cfg.mode == "optimal":
            res = theorylab.best_zeta_threshold(cfg.N_I, cfg.s, cfg.side, kind, cfg.zeta_grid, cfg.N_D_grid,
                                                cfg.trials, cfg.success_tol, seed, gamma=cfg.gamma, iters=cfg.iters,
                                                tol=cfg.tol, mc_samples=cfg.mc_samples)
            rows.extend(res.rows)
            thresholds.append({"prior": prior, "zeta": res.zeta, "threshold": res.threshold})
        else:
            bank = theorylab.TrialBank(cfg.N_I, cfg.s, cfg.side, cfg.trials, cfg.N_D_grid[-1], seed)
            for z in cfg.zeta_grid:
                res = theorylab.phase_transition(cfg.N_I, cfg.s, cfg.side, theorylab.PriorConfig(kind, cfg.gamma, z),
                                                 cfg.N_D_grid, cfg.trials, cfg.success_tol, seed, iters=cfg.iters,
                                                 tol=cfg.tol, mc_samples=cfg.mc_samples, bank=bank)
                rows.extend(res.rows)
                thresholds.append({"prior": prior, "zeta": z, "threshold": res.threshold})
    return rows, thresholds


def theory_csv(rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(THEORY_COLUMNS)
    for r in rows:
        out.writerow([r.prior, repr(r.zeta), r.n_d, repr(r.success_rate), repr(r.mean_error), repr(r.v_zeta),
                      "" if math.isnan(r.eta_sq_estimate) else repr(r.eta_sq_estimate)])
    return buf.getvalue()


def _theory_job(args):
    cfg, seed = args
    return _theory_seed(cfg, seed)


def run_theory(config_path, seeds=None, out_dir=None, threads: int = 1, log=None) -> int:
    log = sys.stderr if log is None else log
    try:
        cfg = load_theory_config(config_path, seeds, out_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=log)
        return EXIT_CONFIG
    jobs = [(cfg, seed) for seed in cfg.seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_theory_job, jobs))
    else:
        results = [_theory_job(j) for j in jobs]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for seed, (rows, thresholds) in zip(cfg.seeds, results):
        (cfg.out_dir / f"theory_sweep_seed{seed}.csv").write_text(theory_csv(rows))
        doc = {"schema_version": SUMMARY_SCHEMA_VERSION, "seed": seed, "mode": cfg.mode, "N_I": cfg.N_I, "s": cfg.s,
               "side_model": dataclasses.asdict(cfg.side), "trials": cfg.trials, "success_tol": cfg.success_tol,
               "thresholds": thresholds}
        (cfg.out_dir / f"theory_thresholds_seed{seed}.json").write_text(_dump_json(doc))
        for th in thresholds:
            print(f"seed {seed} {th['prior']} zeta={th['zeta']}: N_D threshold {th['threshold']}", file=log)
    return EXIT_OK


# ---------------------------------------------------------------- compare


class ReportError(Exception):
    pass


def _cell(stat, scale=1.0, digits=2) -> str:
    if stat is None:
        return "–"
    return f"{stat['mean'] * scale:.{digits}f} ± {stat['std'] * scale:.{digits}f}"


def compare_table(paths) -> str:
    if not paths:
        raise ReportError("no reports given")
    rows = []
    for p in paths:
        try:
            doc = json.loads(Path(p).read_text())
        except (OSError, ValueError) as err:
            raise ReportError(f"{p}: cannot read report ({err})") from None
        version = doc.get("schema_version") if isinstance(doc, dict) else None
        if version != SUMMARY_SCHEMA_VERSION:
            raise ReportError(f"{p}: schema version {version!r} does not match expected {SUMMARY_SCHEMA_VERSION}")
        for key in ("label", "best_gm", "final_sparsity", "comm_bits"):
            if key not in doc:
                raise ReportError(f"{p}: missing field '{key}'")
        rows.append("| " + " | ".join([
            str(doc["label"]), _cell(doc["best_gm"], 100), _cell(doc.get("best_pm"), 100),
            _cell(doc["final_sparsity"], 100), _cell(doc["comm_bits"], 1.0, 0),
        ]) + " |")
    head = "| Strategy | GM acc (%) | PM acc (%) | Sparsity (%) | Comm bits |\n|---|---|---|---|---|\n"
    return head + "\n".join(rows) + "\n"


def run_compare(paths, out=None, log=None) -> int:
    out = sys.stdout if out is None else out
    log = sys.stderr if log is None else log
    try:
        out.write(compare_table(paths))
    except ReportError as err:
        print(f"report error: {err}", file=log)
        return EXIT_CONFIG
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedmac", description="Sparse personalized federated learning simulator.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("fed", "run federated experiments"), ("theory", "run sparse-recovery sweeps")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="INI experiment file")
        p.add_argument("--out-dir", default=None, help="output directory (overrides [run] out_dir)")
        p.add_argument("--seeds", type=_seed_list, default=None, help="comma-separated seeds (overrides [run] seeds)")
        p.add_argument("--threads", type=int, default=1, help="worker processes")
    p = sub.add_parser("compare", help="render summary JSON files as a markdown table")
    p.add_argument("reports", nargs="+", help="*_summary.json files")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "compare":
        return run_compare(args.reports)
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    runner = run_fed if args.command == "fed" else run_theory
    return runner(args.config, args.seeds, args.out_dir, args.threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
