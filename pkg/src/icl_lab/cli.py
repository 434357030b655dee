"""Command line entry point: ``icl-lab train|table|profile|theory --config FILE``.

Exit codes: 0 success, 1 a check failed or an artifact is missing, 2 usage or
configuration error. ``ICL_LAB_OUT`` overrides the output root (``--out`` wins
over both it and the config's ``output`` key).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .baselines import BaselineSpec, tune_const_rr, tune_tuned_rr
from .model import ModelParams
from .tasks import NoiseDistribution, compute_stats, make_eval_set, sample_task, substream
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("icl_lab")

ENV_OUT = "ICL_LAB_OUT"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line."""


class MissingArtifact(FileNotFoundError):
    pass


# Configuration -------------------------------------------------------------

_TRAIN_KEYS = ({f.name for f in fields(TrainConfig)} - {"seed"}) | {"seeds"}
SCHEMA = {
    "experiment": None,
    "output": None,
    "train": _TRAIN_KEYS,
    "eval": {"seed", "size", "select_seed", "select_size", "tune_seed", "tune_size"},
    "baselines": None,
    "table": {"noise_models", "models"},
    "profile": {"noise", "points", "n_eval", "seed", "models"},
    "theory": {"seed", "trials", "reconstruction_models", "max_layers", "gdpp_tasks",
               "probe_trials", "adaptive_trials"},
}
NOISE_KEYS = {"kind", "sigma", "sigma_max", "levels"}
MODEL_KEYS = {"variant", "layers", "heads", "noise"}


def _where(node, path):
    return f"{path}: line {node.start_mark.line + 1}"


def _check_mapping(node, allowed, path):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(node, path)}: expected a mapping")
    for key, value in node.value:
        if key.value not in allowed:
            raise ConfigError(f"{_where(key, path)}: unknown key {key.value!r}")


def _check_noise(node, path):
    if isinstance(node, yaml.SequenceNode):
        for item in node.value:
            _check_noise(item, path)
        return
    _check_mapping(node, NOISE_KEYS, path)


def _validate_tree(root):
    _check_mapping(root, SCHEMA.keys(), "config")
    for key, value in root.value:
        section = key.value
        allowed = SCHEMA[section]
        if allowed is None:
            continue
        _check_mapping(value, allowed, section)
        for k, v in value.value:
            if k.value == "noise":
                _check_noise(v, f"{section}.noise")
            elif k.value == "noise_models":
                _check_noise(v, f"{section}.noise_models")
            elif k.value == "models" and isinstance(v, yaml.SequenceNode):
                for item in v.value:
                    _check_mapping(item, MODEL_KEYS, f"{section}.models")


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


@dataclass
class ExperimentConfig:
    experiment: str
    output: str = "runs"
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    baselines: list = field(default_factory=lambda: ["oracle", "ada_rr", "const_rr", "tuned_rr"])
    table: dict = field(default_factory=dict)
    profile: dict = field(default_factory=dict)
    theory: dict = field(default_factory=dict)
    raw_hash: str = ""

    EVAL_DEFAULTS = {"seed": 1000, "size": 100_000, "select_seed": 2000, "select_size": 10_000,
                     "tune_seed": 3000, "tune_size": 20_000}

    def __post_init__(self):
        self.eval = {**self.EVAL_DEFAULTS, **(self.eval or {})}
        self.train = dict(self.train or {})
        self.train.setdefault("seeds", [0])
        for kind in self.baselines:
            BaselineSpec(kind)          # raises on unknown names
        roles = [*map(int, _as_list(self.train["seeds"])), self.eval["seed"],
                 self.eval["select_seed"], self.eval["tune_seed"]]
        if "seed" in self.profile:
            roles.append(self.profile["seed"])
        if len(set(roles)) != len(roles):
            raise ConfigError("train, eval, selection, tuning and profile seeds must be distinct")

    def train_configs(self):
        """One TrainConfig per (variant, layers, noise) combination, without a seed."""
        opts = {k: v for k, v in self.train.items() if k != "seeds"}
        variants = _as_list(opts.pop("variant", "diag"))
        layers = _as_list(opts.pop("layers", 3))
        noises = _as_list(opts.pop("noise", {"kind": "uniform", "sigma_max": 5.0}))
        out = []
        for variant, L, noise in itertools.product(variants, layers, noises):
            out.append(dict(opts, variant=variant, layers=int(L),
                            noise=NoiseDistribution.from_dict(noise)))
        return out

    @property
    def seeds(self):
        return [int(s) for s in _as_list(self.train["seeds"])]


def load_config(path, seed=None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if root is None:
        raise ConfigError(f"{path}: empty config")
    _validate_tree(root)
    data = yaml.safe_load(text)
    if "experiment" not in data:
        raise ConfigError("config: missing required key 'experiment'")
    if seed is not None:
        data.setdefault("train", {})["seeds"] = [int(seed)]
    try:
        cfg = ExperimentConfig(**data, raw_hash=hashlib.sha256(text.encode()).hexdigest()[:16])
        for tc in cfg.train_configs():
            TrainConfig(**tc, seed=0)
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    if seed is not None:
        cfg.raw_hash = hashlib.sha256(f"{text}\nseed={seed}".encode()).hexdigest()[:16]
    return cfg


# Provenance and output ----------------------------------------------------

def source_revision():
    """Git commit of the working tree, or a hash of the package sources."""
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    h = hashlib.sha256()
    for f in sorted(here.glob("*.py")):
        h.update(f.read_bytes())
    return "src-" + h.hexdigest()[:12]


def provenance(cfg: ExperimentConfig, seed):
    return {"config_hash": cfg.raw_hash, "revision": source_revision(), "seed": seed}


def output_root(cfg: ExperimentConfig, out=None) -> Path:
    root = out or os.environ.get(ENV_OUT) or cfg.output
    return Path(root) / cfg.experiment


def write_csv(path, header, rows, prov):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*header, "config_hash", "revision", "seed"])
        for row in rows:
            writer.writerow([*row, prov["config_hash"], prov["revision"], prov["seed"]])


def write_json(path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def run_id(variant, layers, noise: NoiseDistribution, heads=1):
    head = f"-H{heads}" if heads != 1 else ""
    return f"{variant}-L{layers}{head}-{noise.label}"


def load_best(root: Path, variant, layers, noise, heads=1) -> ModelParams:
    rid = run_id(variant, layers, noise, heads)
    pointer = root / "train" / rid / "best.json"
    if not pointer.exists():
        raise MissingArtifact(f"no trained checkpoint for {rid} (expected {pointer})")
    best = json.loads(pointer.read_text())
    ckpt = pointer.parent / best["checkpoint"]
    if not ckpt.exists():
        raise MissingArtifact(f"best.json points at missing checkpoint {ckpt}")
    return ModelParams.load(ckpt)


def _fmt(x):
    return repr(float(x))


# Subcommands ---------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out=None):
    """Train every configured model for every seed; pick the best on a held-out set."""
    root = output_root(cfg, out)
    ev = cfg.eval
    failures = 0
    for base in cfg.train_configs():
        select = make_eval_set(ev["select_seed"], ev["select_size"], base.get("d", 10),
                               base.get("n", 20), base["noise"])
        rid = run_id(base["variant"], base["layers"], base["noise"], base.get("heads", 1))
        run_dir = root / "train" / rid
        results = []
        for seed in cfg.seeds:
            tc = TrainConfig(**base, seed=seed)
            prov = provenance(cfg, seed)
            log.info("training %s seed %d (%d iterations)", rid, seed, tc.iterations)
            try:
                report = train(tc)
            except TrainingDiverged as exc:
                log.error("%s seed %d diverged: %s", rid, seed, exc)
                results.append({"seed": seed, "status": "diverged", "error": str(exc)})
                continue
            ckpt = run_dir / f"seed{seed}" / "params.json"
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            report.params.save(ckpt, **prov, train_config=tc.to_dict())
            write_csv(ckpt.parent / "train_log.csv", ["iteration", "train_loss", "lr", "grad_norm"],
                      [(r[0], _fmt(r[1]), _fmt(r[2]), _fmt(r[3])) for r in report.curve], prov)
            loss, sem = analysis.adjusted_loss_sem(report.params, select)
            results.append({"seed": seed, "status": "ok", "checkpoint": f"seed{seed}/params.json",
                            "adjusted_loss": loss, "sem": sem, "divergences": report.divergences,
                            "digest": report.params.digest()})
            log.info("%s seed %d: selection adjusted loss %.4f", rid, seed, loss)
        ok = [r for r in results if r["status"] == "ok"]
        summary = {"run": rid, "results": results, "select_seed": ev["select_seed"],
                   "select_size": ev["select_size"], **provenance(cfg, cfg.seeds)}
        if ok:
            best = min(ok, key=lambda r: (r["adjusted_loss"], r["seed"]))
            summary.update(checkpoint=best["checkpoint"], best_seed=best["seed"],
                           adjusted_loss=best["adjusted_loss"])
            write_json(run_dir / "best.json", summary)
        else:
            failures += 1
            write_json(run_dir / "failed.json", summary)
    return 1 if failures else 0


def _tuned_baselines(cfg, noise, d, n):
    """BaselineSpecs for the configured kinds, tuned on the tuning stream."""
    ev = cfg.eval
    specs = []
    tune = None
    for kind in cfg.baselines:
        if kind in ("const_rr", "tuned_rr") and tune is None:
            tune = make_eval_set(ev["tune_seed"], ev["tune_size"], d, n, noise)
        if kind == "const_rr":
            specs.append(BaselineSpec(kind, sigma2=tune_const_rr(tune, noise.upper)))
        elif kind == "tuned_rr":
            t, m = tune_tuned_rr(tune, noise.upper)
            specs.append(BaselineSpec(kind, threshold=t, multiplier=m))
        else:
            specs.append(BaselineSpec(kind))
    return specs


def _model_entries(section, default_noise=None):
    out = []
    for m in section.get("models", []) or []:
        out.append((m["variant"], int(m["layers"]), int(m.get("heads", 1)),
                    NoiseDistribution.from_dict(m["noise"]) if "noise" in m else default_noise))
    return out


def cmd_table(cfg: ExperimentConfig, out=None):
    """Adjusted losses (with SEM) for baselines and trained models per noise model."""
    root = output_root(cfg, out)
    ev = cfg.eval
    d, n = cfg.train.get("d", 10), cfg.train.get("n", 20)
    noise_models = [NoiseDistribution.from_dict(x) for x in
                    cfg.table.get("noise_models") or _as_list(cfg.train.get(
                        "noise", {"kind": "uniform", "sigma_max": 5.0}))]
    models = _model_entries(cfg.table)
    # fail early, before any expensive evaluation
    for noise in noise_models:
        for variant, L, heads, _ in models:
            load_best(root, variant, L, noise, heads)
    prov = provenance(cfg, ev["seed"])
    rows, base_rows = [], []
    for noise in noise_models:
        eval_set = make_eval_set(ev["seed"], ev["size"], d, n, noise)
        oracle = BaselineSpec("oracle").predict(eval_set)
        for spec in _tuned_baselines(cfg, noise, d, n):
            loss, sem = analysis.adjusted_loss_sem(spec, eval_set, oracle)
            tuned = json.dumps(spec.tuned_params(), sort_keys=True)
            rows.append((spec.name, "baseline", "", "", noise.label, _fmt(loss), _fmt(sem)))
            base_rows.append((spec.name, noise.label, _fmt(loss), tuned, ev["seed"], ev["size"]))
        for variant, L, heads, _ in models:
            params = load_best(root, variant, L, noise, heads)
            loss, sem = analysis.adjusted_loss_sem(params, eval_set, oracle)
            rows.append((f"{variant}-L{L}", "model", variant, L, noise.label, _fmt(loss), _fmt(sem)))
    write_csv(root / "table.csv",
              ["predictor", "kind", "variant", "layers", "noise_model", "adjusted_loss", "sem"],
              rows, prov)
    write_csv(root / "baselines.csv",
              ["baseline", "noise_model", "adjusted_loss", "tuned_params_json", "eval_seed",
               "n_eval"], base_rows, prov)
    (root / "table.md").write_text(render_markdown(rows, [nm.label for nm in noise_models], prov))
    return 0


def render_markdown(rows, columns, prov):
    cells = {}
    order = []
    for name, _, _, _, noise, loss, sem in rows:
        if name not in cells:
            cells[name] = {}
            order.append(name)
        cells[name][noise] = f"{float(loss):.3f} ± {float(sem):.3f}"
    lines = [f"<!-- config {prov['config_hash']} revision {prov['revision']} seed {prov['seed']} -->",
             "| predictor | " + " | ".join(columns) + " |",
             "|---" * (len(columns) + 1) + "|"]
    for name in order:
        lines.append(f"| {name} | " + " | ".join(cells[name].get(c, "") for c in columns) + " |")
    return "\n".join(lines) + "\n"


def cmd_profile(cfg: ExperimentConfig, out=None):
    """Per-variance profiles for baselines and trained models."""
    root = output_root(cfg, out)
    prof = cfg.profile
    d, n = cfg.train.get("d", 10), cfg.train.get("n", 20)
    noise = NoiseDistribution.from_dict(
        prof.get("noise") or _as_list(cfg.train.get("noise", {"kind": "uniform",
                                                              "sigma_max": 5.0}))[0])
    seed = int(prof.get("seed", 4000))
    grid = analysis.default_sigma_grid(noise.upper, int(prof.get("points", 21)))
    n_eval = int(prof.get("n_eval", 10_000))
    predictors = [(spec.name, spec) for spec in _tuned_baselines(cfg, noise, d, n)]
    for variant, L, heads, mnoise in _model_entries(prof, noise):
        predictors.append((f"{variant}-L{L}", load_best(root, variant, L, mnoise, heads)))
    rows = []
    for name, pred in predictors:
        for p in analysis.per_variance_profile(pred, grid, n_eval, seed, d, n):
            rows.append((name, _fmt(p.sigma), _fmt(p.adjusted_loss), _fmt(p.sem),
                         int(noise.contains(p.sigma))))
    write_csv(root / f"profile-{noise.label}.csv",
              ["predictor_id", "sigma", "adjusted_loss", "sem", "in_distribution"], rows,
              provenance(cfg, seed))
    return 0


# Theory suite ------------------------------------------------------------

def theory_checks(opts, seed=0):
    """Yield ``(name, passed, detail)`` for each randomized invariant check."""
    trials = int(opts.get("reconstruction_models", 50))
    max_L = int(opts.get("max_layers", 7))
    rng = substream(seed, 0)
    worst = 0.0
    for t in range(trials):
        p, seq = analysis.random_instance(rng, ("full", "diag", "gdpp")[t % 3], max_L)
        worst = max(worst, analysis.reconstruction_error(p, seq))
    yield "implicit representation", worst <= 1e-8, f"max relative error {worst:.2e}"

    worst = 0.0
    for _ in range(trials):
        p, seq = analysis.random_instance(rng, "diag", max_L)
        worst = max(worst, analysis.diag_implicit_update_check(p, seq))
    yield "diagonal recursion", worst <= 1e-8, f"max deviation {worst:.2e}"

    kappas = np.geomspace(1.1, 1e6, 200)
    factor = analysis.condition_ratio_after(kappas) / kappas
    bound = (4 / 9) / (1 - 1 / 3.3) ** 2
    eps = np.linspace(1e-4, 0.1, 200)
    near = analysis.condition_ratio_after(1 + eps) <= 1 + 2 * eps ** 2
    yield ("condition map", bool(np.all(factor <= bound * (1 + 1e-12)) and np.all(near)),
           f"max factor {factor.max():.4f} (bound {bound:.4f})")

    fails = 0
    for t in range(int(opts.get("gdpp_tasks", 50))):
        seq = sample_task(substream(seed, 1, t), 10, 20, NoiseDistribution.fixed(1.0))
        st = compute_stats(seq)
        lo, hi = np.linalg.eigvalsh(st.Sigma)[[0, -1]]
        pred, steps = analysis.run_gdpp_solver(seq, 1e-8)
        err = abs(pred - st.w_star @ seq.x_t)
        ok = (err <= 1e-8 * np.linalg.norm(seq.x_t) * np.linalg.norm(st.w_star)
              and steps <= analysis.gdpp_step_bound(hi / lo, 1e-8))
        fails += not ok
    yield "second-order solver", fails == 0, f"{fails} failures"

    cos = analysis.quadratic_probe(ModelParams.init("full", 10, 3, rng, 0.01), 2000, 10,
                                   int(opts.get("probe_trials", 40)), seed)
    frac = float(np.mean(cos.max(axis=1) <= 0.1))
    yield "quadratic probe", frac >= 0.95, f"{frac:.0%} of trials below 0.1"

    at = int(opts.get("adaptive_trials", 20))
    errs = [analysis.adaptive_scaling_error(1.0, n, trials=at, seed=seed) for n in (100, 1000, 10_000)]
    yield ("adaptive rescaling (sigma=1)", errs[0] > errs[1] > errs[2] and errs[2] <= 0.05,
           ", ".join(f"{e:.3f}" for e in errs))


def cmd_theory(cfg: ExperimentConfig, out=None):
    opts = cfg.theory
    seed = int(opts.get("seed", 0))
    root = output_root(cfg, out)
    rows = []
    status = 0
    for name, passed, detail in theory_checks(opts, seed):
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        rows.append((name, "pass" if passed else "fail", detail))
        status |= not passed
    write_csv(root / "theory.csv", ["check", "result", "detail"], rows, provenance(cfg, seed))
    return int(status)


COMMANDS = {"train": cmd_train, "table": cmd_table, "profile": cmd_profile, "theory": cmd_theory}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="icl-lab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the training seeds with a single seed")
    parser.add_argument("--out", default=None, help="output root (default: $ICL_LAB_OUT or config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](cfg, args.out)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
