"""Leave-one-domain-out experiment orchestration.

For every held-out test domain, the remaining domains are re-numbered and
split; training, group re-labeling, relevance scoring and checkpoint
selection only ever see those training domains. The held-out domain's
samples are touched exactly once, to score the selected checkpoint.
Everything is keyed off the config and seed list, so a repeated run
reproduces the result table byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models
from .datagen import Dataset, generate_latent_group_blobs, generate_rotated_moons, split_domain
from .dreame import DreameConfig, ensemble_predict, train_dreame
from .dro import DROConfig, ERMConfig, default_spec, train_erm, train_groupdro
from .seeding import child_seed
from .selection import SELECTORS, select_overall_avg, select_overall_ens

METHODS = ("erm", "groupdro", "groupdro_pp", "dreame")

_GENERATORS = {
    "rotated_moons": generate_rotated_moons,
    "latent_group_blobs": generate_latent_group_blobs,
}


def build_dataset(dataset_cfg: dict) -> Dataset:
    cfg = dict(dataset_cfg)
    name = cfg.pop("generator", None)
    if name not in _GENERATORS:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(_GENERATORS)}")
    return _GENERATORS[name](**cfg)


def _method_config(method: str, overrides: dict):
    cls = {"erm": ERMConfig, "groupdro": DROConfig, "groupdro_pp": DROConfig, "dreame": DreameConfig}[method]
    overrides = dict(overrides or {})
    if method == "groupdro":
        overrides.setdefault("mode", "vanilla")
    if method == "groupdro_pp":
        overrides.setdefault("mode", "groupdro_pp")
    if method == "dreame" and "aug_spec" in overrides:
        overrides["aug_spec"] = tuple(
            (e[0], tuple(e[1]) if isinstance(e[1], (list, tuple)) else e[1]) for e in overrides["aug_spec"]
        )
    try:
        return cls(**overrides)
    except TypeError as exc:
        raise ValueError(f"bad {method} config: {exc}") from None


@dataclass
class ExperimentConfig:
    dataset: dict
    methods: dict = field(default_factory=lambda: {"erm": {}})
    seeds: tuple = (0,)
    test_domain: object = "all"  # int or "all"
    selection: str = "overall_avg"
    model: dict = field(default_factory=dict)
    out_dir: str = "results"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        self.seeds = tuple(int(s) for s in self.seeds)
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
        if self.selection not in SELECTORS:
            raise ValueError(f"unknown selection strategy {self.selection!r}")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        allowed = {"dataset", "methods", "seeds", "test_domain", "selection", "model", "out_dir"}
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)} in {path}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "methods": self.methods,
            "seeds": list(self.seeds),
            "test_domain": self.test_domain,
            "selection": self.selection,
            "model": self.model,
            "out_dir": self.out_dir,
        }


def default_experiment_config() -> ExperimentConfig:
    """Desk-scale rotated-moons benchmark over all four methods."""
    return ExperimentConfig(
        dataset={
            "generator": "rotated_moons",
            "K": 4,
            "angles_deg": [0, 30, 60, 90],
            "n_per_domain": 300,
            "noise_sd": 0.15,
            "seed": 7,
        },
        methods={"erm": {}, "groupdro": {}, "groupdro_pp": {}, "dreame": {}},
        seeds=(0, 1, 2),
        test_domain="all",
        selection="overall_avg",
    )


def _model_spec(view, model_cfg: dict) -> models.MLPSpec:
    if not model_cfg:
        return default_spec(view)
    return models.MLPSpec(
        view.X.shape[1],
        tuple(model_cfg.get("hidden_dims", (32, 16))),
        view.num_classes,
        model_cfg.get("activation", "relu"),
    )


def run_single(cfg: ExperimentConfig, method: str, fold: int, seed: int) -> dict:
    """Train one (method, fold, seed) cell and score it on the held-out domain."""
    dataset = build_dataset(cfg.dataset)
    K = dataset.num_domains
    if K < 2:
        raise ValueError("need at least two domains for leave-one-out")
    if not 0 <= fold < K:
        raise ValueError(f"test domain {fold} out of range [0, {K})")
    train_domains = [d for d in range(K) if d != fold]
    trainset = dataset.restrict_to_domains(train_domains)
    assert trainset.n == dataset.n - len(dataset.domain_indices(fold))
    split = split_domain(trainset, child_seed(seed, "split"))
    view = trainset.train_view()
    spec = _model_spec(view, cfg.model)

    overrides = dict(cfg.methods.get(method, {}))
    if method == "groupdro":
        overrides["M_groups"] = len(train_domains)
    mcfg = _method_config(method, overrides)

    if method == "erm":
        result = train_erm(view, split, mcfg, seed, spec)
    elif method in ("groupdro", "groupdro_pp"):
        result = train_groupdro(view, split, mcfg, seed, spec)
    else:
        result = train_dreame(view, split, mcfg, seed, spec)

    test_idx = dataset.domain_indices(fold)
    X_test, y_test = dataset.X[test_idx], dataset.y[test_idx]
    selected, test_acc = {}, {}
    for name, selector in (("overall_avg", select_overall_avg), ("overall_ens", select_overall_ens)):
        ci = selector(result.checkpoints)
        snapshot = result.checkpoints[ci].snapshot
        if method == "dreame":
            pred = ensemble_predict(snapshot, X_test, mcfg.predict_averaging)[1]
        else:
            pred = models.predict_labels(snapshot, X_test)
        selected[name] = ci
        test_acc[name] = float(np.mean(pred == y_test))

    return {
        "method": method,
        "test_domain": fold,
        "seed": seed,
        "selection": cfg.selection,
        "selected_checkpoint": selected,
        "test_accuracy": test_acc,
        "heldout_history": [
            {
                "iteration": c.iteration,
                "member_domain_acc": c.member_domain_acc.tolist(),
                "ensemble_domain_acc": c.ensemble_domain_acc.tolist(),
            }
            for c in result.checkpoints
        ],
        "train_record": result.record,
        "config_echo": cfg.to_dict(),
        "method_config": asdict(mcfg),
    }


@dataclass
class ResultTable:
    rows: list  # {"method", "test_domain", "mean", "std", "values", "selection"}
    selection: str

    def cell(self, method: str, test_domain: int) -> dict:
        for r in self.rows:
            if r["method"] == method and r["test_domain"] == test_domain:
                return r
        raise KeyError((method, test_domain))

    def method_average(self, method: str):
        vals = [r["mean"] for r in self.rows if r["method"] == method and r["mean"] is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv(self, path_or_buf) -> None:
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            fh = open(path_or_buf, "w", newline="", encoding="utf-8")
            close = True
        else:
            fh = path_or_buf
        try:
            writer = csv.writer(fh)
            writer.writerow(["method", "test_domain", "mean", "std"])
            for r in self.rows:
                writer.writerow(
                    [
                        r["method"],
                        r["test_domain"],
                        "" if r["mean"] is None else f"{r['mean']:.6f}",
                        "" if r["std"] is None else f"{r['std']:.6f}",
                    ]
                )
        finally:
            if close:
                fh.close()

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()

    def render_text(self) -> str:
        methods = sorted({r["method"] for r in self.rows}, key=lambda m: METHODS.index(m))
        domains = sorted({r["test_domain"] for r in self.rows})
        header = ["method"] + [f"D{d}" for d in domains] + ["Average"]
        lines = [header]
        for m in methods:
            row = [m]
            for d in domains:
                try:
                    cell = self.cell(m, d)
                except KeyError:
                    row.append("-")
                    continue
                if cell["mean"] is None:
                    row.append("-")
                elif cell["std"] is None:
                    row.append(f"{100 * cell['mean']:.2f}")
                else:
                    row.append(f"{100 * cell['mean']:.2f}±{100 * cell['std']:.2f}")
            avg = self.method_average(m)
            row.append("-" if avg is None else f"{100 * avg:.2f}")
            lines.append(row)
        widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in lines)


def aggregate_results(runs, selection: str = "overall_avg") -> ResultTable:
    """Mean and sample std (n-1) of test accuracy per (method, test domain).

    Failed runs (dicts carrying an "error" key) leave their cell absent
    rather than contributing a made-up value.
    """
    cells = {}
    for run in runs:
        key = (run["method"], run["test_domain"])
        cells.setdefault(key, []).append(run)
    rows = []
    for (method, fold) in sorted(cells, key=lambda k: (k[1], METHODS.index(k[0]))):
        good = [r for r in cells[(method, fold)] if "error" not in r]
        values = [r["test_accuracy"][selection] for r in good]
        rows.append(
            {
                "method": method,
                "test_domain": fold,
                "mean": float(np.mean(values)) if values else None,
                "std": float(np.std(values, ddof=1)) if len(values) >= 2 else None,
                "values": values,
                "errors": [r["error"] for r in cells[(method, fold)] if "error" in r],
                "selection": selection,
            }
        )
    return ResultTable(rows, selection)


def run_leave_one_out(cfg: ExperimentConfig, methods=None, progress=None):
    """Full grid: every requested method x test domain x seed.

    Single-run failures are recorded per cell and the sweep continues.
    Returns (ResultTable, run dicts).
    """
    dataset = build_dataset(cfg.dataset)
    if dataset.num_domains < 2:
        raise ValueError("need at least two domains")
    folds = list(range(dataset.num_domains)) if cfg.test_domain == "all" else [int(cfg.test_domain)]
    methods = list(methods or cfg.methods)
    runs = []
    for method in methods:
        for fold in folds:
            for seed in cfg.seeds:
                try:
                    run = run_single(cfg, method, fold, seed)
                except Exception as exc:  # recorded, never imputed
                    run = {"method": method, "test_domain": fold, "seed": seed, "error": str(exc)}
                runs.append(run)
                if progress:
                    progress(run)
    return aggregate_results(runs, cfg.selection), runs


# ---------------------------------------------------------------------------
# Ablation sweeps (meta-loss weight and ensemble size)
# ---------------------------------------------------------------------------


@dataclass
class AblationTable:
    parameter: str
    rows: list  # {"value", "selection", "per_domain": {fold: mean}, "average"}
    note: str = ""

    def render_text(self) -> str:
        domains = sorted({d for r in self.rows for d in r["per_domain"]})
        header = [self.parameter, "selection"] + [f"D{d}" for d in domains] + ["Avg"]
        lines = [header]
        for r in self.rows:
            cells = [str(r["value"]), r["selection"]]
            for d in domains:
                v = r["per_domain"].get(d)
                cells.append("-" if v is None else f"{100 * v:.2f}")
            cells.append("-" if r["average"] is None else f"{100 * r['average']:.2f}")
            lines.append(cells)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        out = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in lines)
        return out + (f"\n{self.note}" if self.note else "")

    def to_csv(self, path) -> None:
        domains = sorted({d for r in self.rows for d in r["per_domain"]})
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.parameter, "selection"] + [f"D{d}" for d in domains] + ["avg"])
            for r in self.rows:
                writer.writerow(
                    [r["value"], r["selection"]]
                    + [r["per_domain"].get(d, "") for d in domains]
                    + [r["average"]]
                )


def _dreame_sweep_rows(cfg: ExperimentConfig, override_key: str, values):
    rows = []
    means_by_value = {}
    for value in values:
        overrides = dict(cfg.methods.get("dreame", {}))
        overrides[override_key] = value
        sweep_cfg = ExperimentConfig(
            dataset=cfg.dataset,
            methods={"dreame": overrides},
            seeds=cfg.seeds,
            test_domain=cfg.test_domain,
            selection=cfg.selection,
            model=cfg.model,
            out_dir=cfg.out_dir,
        )
        _, runs = run_leave_one_out(sweep_cfg, methods=["dreame"])
        for sel_name, label in (("overall_avg", "Avg"), ("overall_ens", "Ens")):
            table = aggregate_results(runs, sel_name)
            per_domain = {r["test_domain"]: r["mean"] for r in table.rows}
            avg = table.method_average("dreame")
            rows.append({"value": value, "selection": label, "per_domain": per_domain, "average": avg})
            means_by_value.setdefault(value, {})[label] = avg
    return rows, means_by_value


def run_eta_ablation(cfg: ExperimentConfig, etas=(0.2, 0.4, 0.6, 0.8, 1.0)) -> AblationTable:
    rows, _ = _dreame_sweep_rows(cfg, "eta", list(etas))
    return AblationTable("eta", rows)


def run_ensemble_size_ablation(cfg: ExperimentConfig, sizes=(2, 3, 4)) -> AblationTable:
    rows, means = _dreame_sweep_rows(cfg, "M", list(sizes))
    note = ""
    if 3 in means and 4 in means and means[3]["Avg"] is not None and means[4]["Avg"] is not None:
        gain = means[4]["Avg"] - means[3]["Avg"]
        verdict = "observed" if gain < 0.01 else "not observed"
        note = f"no significant improvement beyond M=3: {verdict} (M=4 minus M=3 = {100 * gain:+.2f} points)"
    return AblationTable("M", rows, note)


def to_jsonable(obj):
    """Recursively convert numpy containers for json.dump."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
