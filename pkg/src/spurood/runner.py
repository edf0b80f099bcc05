"""Experiment harness: data, training, scoring and metrics over an ExperimentPlan.

A *unit* is one (r, objective, seed) triple. It trains one model and yields a
result row for every (scorer, OOD set). Each unit draws its randomness from
streams keyed by its identity, so a worker pool gives the same bytes as a
serial run.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import colormnist as cm
from . import gauss_world as gw
from .config import ExperimentPlan
from .metrics import auroc, fpr_at_tpr
from .numerics import Rng
from .scores import compute_scores, fit_calibration, hidden_of
from .storage import save_scores
from .train import TrainConfig, TrainData, predict, save_model, train

RESULT_HEADER = ("dataset", "r", "objective", "score_fn", "ood_type", "ood_set", "seed", "fpr95", "auroc")
SUMMARY_HEADER = (
    "dataset", "r", "objective", "score_fn", "ood_type", "ood_set",
    "n_seeds", "fpr95_mean", "fpr95_std", "auroc_mean", "auroc_std",
)  # fmt: skip
ACCURACY_HEADER = ("dataset", "r", "objective", "seed", "n_test", "accuracy")


def fmt_r(r: float) -> str:
    return f"{r:g}"


def unit_stem(dataset: str, r: float, objective: str, seed: int) -> str:
    return f"{dataset}_r{fmt_r(r)}_{objective}_s{seed}"


@dataclass
class Splits:
    """Feature matrices for one unit."""

    train: TrainData
    X_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    X_val_ood: np.ndarray  # only used to pick the ODIN perturbation size
    ood: dict[str, np.ndarray]


# ---------------------------------------------------------------- colormnist


def colormnist_splits(plan: ExperimentPlan, idx: cm.IdxImages, r: float, rng: Rng) -> Splits:
    ds = cm.compose(idx, cm.CorrelationSpec(r), plan.palette, rng.child("compose"))
    tr, va, te = cm.split_id(ds, rng.child("split"), plan.test_fraction, plan.val_fraction)
    spurious, nonspurious = cm.ood_splits(idx, plan.palette, rng.child("ood"), plan.n_ood)
    sets = {"spurious": spurious, **cm.nonspurious_sets(nonspurious)}
    # a separate draw of non-spurious images, disjoint in randomness from the test sets
    _, val_ood = cm.ood_splits(idx, plan.palette, rng.child("ood-val"), max(1, plan.n_ood // 5))
    return Splits(
        TrainData.from_colored(tr),
        va.features(),
        te.features(),
        te.labels.astype(np.int64),
        val_ood.features(),
        {name: sets[name].features() for name in plan.ood_sets},
    )


# ---------------------------------------------------------------- gaussian


def gaussian_world(plan: ExperimentPlan, r: float) -> gw.GaussWorld:
    """Unit-variance world whose environmental means have length ``r * gauss_env_scale``.

    Directions depend only on the plan dimensions, so sweeping r changes only
    the strength of the environmental signal.
    """
    rng = Rng(0).child(f"gauss-world/{plan.gauss_s}/{plan.gauss_d_e}/{plan.gauss_envs}")

    def unit(k):
        v = rng.normal(k)
        return v / np.linalg.norm(v)

    inv = gw.InvSpec(unit(plan.gauss_s), 1.0)
    scale = r * plan.gauss_env_scale
    envs = [gw.EnvSpec(scale * unit(plan.gauss_d_e), 1.0) for _ in range(plan.gauss_envs)]
    return gw.GaussWorld(inv, envs, plan.gauss_eta)


def _latent_id(world: gw.GaussWorld, n: int, rng: Rng) -> list[gw.LatentBatch]:
    E = len(world.envs)
    sizes = [n // E + (1 if e < n % E else 0) for e in range(E)]
    return [gw.sample(world, e, sizes[e], rng.child(f"env-{e}")) for e in range(E) if sizes[e] > 0]


def _no_invariant(world: gw.GaussWorld, n: int, rng: Rng) -> np.ndarray:
    """Invariant block with the mu_inv component removed."""
    z = math.sqrt(world.inv.sigma_inv_sq) * rng.normal((n, world.s))
    u = world.inv.mu_inv / np.linalg.norm(world.inv.mu_inv)
    return z - np.outer(z @ u, u)


def gaussian_ood(world: gw.GaussWorld, kind: str, n: int, rng: Rng) -> np.ndarray:
    z_inv = _no_invariant(world, n, rng.child("inv"))
    if kind == "spurious":
        # environmental block drawn exactly as for ID data
        z_e = np.vstack([b.z_e for b in _latent_id(world, n, rng.child("env"))])
    else:
        sigma = math.sqrt(world.envs[0].sigma_e_sq)
        z_e = sigma * rng.child("env").normal((n, world.d_e))
    return np.hstack([z_inv, z_e])


def gaussian_splits(plan: ExperimentPlan, r: float, rng: Rng) -> Splits:
    world = gaussian_world(plan, r)
    tr = TrainData.from_latent(_latent_id(world, plan.gauss_n_train, rng.child("train")))
    va = TrainData.from_latent(_latent_id(world, plan.n_ood, rng.child("val")))
    te = TrainData.from_latent(_latent_id(world, plan.n_ood, rng.child("test")))
    ood = {name: gaussian_ood(world, name, plan.n_ood, rng.child(f"ood-{name}")) for name in plan.ood_sets}
    val_ood = gaussian_ood(world, "nonspurious", max(1, plan.n_ood // 5), rng.child("ood-val"))
    return Splits(tr, va.X, te.X, te.y, val_ood, ood)


# ---------------------------------------------------------------- units


def _pca_rows(features: dict[str, np.ndarray]) -> list[str]:
    stacked = np.vstack(list(features.values()))
    center = stacked.mean(axis=0)
    _, _, vt = np.linalg.svd(stacked - center, full_matrices=False)
    basis = vt[:2].T
    # fix the sign of each axis so reruns agree
    signs = np.sign(basis[np.abs(basis).argmax(axis=0), range(basis.shape[1])])
    basis = basis * np.where(signs == 0, 1.0, signs)
    rows = []
    for name, F in features.items():
        P = (F - center) @ basis
        for x in P:
            rows.append(f"{name}," + ",".join(f"{v:.10g}" for v in x))
    return rows


def run_unit(plan: ExperimentPlan, r: float, objective: str, seed: int, out_dir: Path, idx=None):
    """Train and evaluate one unit. Returns (result rows, accuracy row)."""
    data_rng = Rng(seed).child(f"{plan.dataset}/r={fmt_r(r)}")
    if plan.dataset == "colormnist":
        splits = colormnist_splits(plan, idx, r, data_rng)
    else:
        splits = gaussian_splits(plan, r, data_rng)
    train_seed = data_rng.child(f"train/{objective}").seed
    cfg = TrainConfig(
        objective=objective,
        learning_rate=plan.learning_rate,
        l2_penalty=plan.l2_penalty,
        penalty_weight=plan.penalty_weight,
        gdro_step=plan.gdro_step,
        epochs=plan.epochs,
        batch_size=plan.batch_size,
        seed=train_seed,
        hidden=tuple(plan.hidden),
    )
    model, log = train(splits.train, cfg)
    stem = unit_stem(plan.dataset, r, objective, seed)
    models = out_dir / "models"
    save_model(models / f"{stem}.mlp", model)
    log.write_csv(models / f"{stem}_trainlog.csv")

    acc = float(np.mean(predict(model, splits.X_test) == splits.y_test))
    acc_row = (plan.dataset, fmt_r(r), objective, str(seed), str(len(splits.y_test)), f"{acc:.6f}")

    cal = fit_calibration(
        model,
        splits.train.X,
        splits.train.y,
        splits.X_val,
        splits.X_val_ood,
        odin_temperature=plan.odin_temperature,
        odin_grid=plan.odin_epsilons,
        gram_orders=tuple(range(1, plan.gram_orders + 1)),
        score_fns=plan.scorers,
    )
    cal.save(models / f"{stem}.cal")

    types = plan.ood_types()
    rows = []
    for score_fn in plan.scorers:
        id_scores = compute_scores(score_fn, model, cal, splits.X_test)
        for ood_set, X_ood in splits.ood.items():
            ood_scores = compute_scores(score_fn, model, cal, X_ood)
            save_scores(out_dir / "scores" / f"{stem}_{score_fn}_{ood_set}.scr", id_scores, ood_scores)
            fpr, _ = fpr_at_tpr(id_scores, ood_scores, 0.95)
            au = auroc(id_scores, ood_scores)
            rows.append(
                (plan.dataset, fmt_r(r), objective, score_fn, types[ood_set], ood_set, str(seed), f"{fpr:.6f}", f"{au:.6f}")
            )

    if plan.emit_projections:
        feats = {"id": hidden_of(model, splits.X_test)[-1]}
        feats.update({name: hidden_of(model, X)[-1] for name, X in splits.ood.items()})
        lines = ["set,pc1,pc2", *_pca_rows(feats)]
        (out_dir / "projections" / f"{stem}.csv").write_text("\n".join(lines) + "\n")
    return rows, acc_row


# ---------------------------------------------------------------- tables


def _write_csv(path: Path, header, rows) -> None:
    text = ",".join(header) + "\n" + "".join(",".join(row) + "\n" for row in rows)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def summarize(rows) -> list[tuple[str, ...]]:
    """Mean and population std over seeds, from the rounded per-seed values."""
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault(tuple(row[:6]), []).append((float(row[7]), float(row[8])))
    out = []
    for key in sorted(groups):
        vals = np.array(groups[key])
        mean, std = vals.mean(axis=0), vals.std(axis=0)
        out.append((*key, str(len(vals)), f"{mean[0]:.6f}", f"{std[0]:.6f}", f"{mean[1]:.6f}", f"{std[1]:.6f}"))
    return out


def read_results(path) -> list[tuple[str, ...]]:
    lines = Path(path).read_text().splitlines()
    return [tuple(line.split(",")) for line in lines[1:] if line]


def _unit_job(args):
    plan, r, objective, seed, out_dir, idx = args
    return run_unit(plan, r, objective, seed, Path(out_dir), idx)


def run(plan: ExperimentPlan, out_dir) -> Path:
    """Execute every unit of ``plan`` and write results.csv, summary.csv and accuracy.csv."""
    out_dir = Path(out_dir)
    for sub in ("", "models", "scores") + (("projections",) if plan.emit_projections else ()):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    idx = None
    if plan.dataset == "colormnist":
        idx = cm.load_idx(*cm.find_idx_pair(plan.mnist_path))
    units = [(r, o, s) for r in plan.r for o in plan.objectives for s in plan.seeds]
    jobs = [(plan, r, o, s, str(out_dir), idx) for r, o, s in units]

    rows: list = []
    acc_rows: list = []

    def collect(result):
        unit_rows, acc_row = result
        rows.extend(unit_rows)
        acc_rows.append(acc_row)
        # flush what is done so far; an interrupted run keeps completed units
        _write_csv(out_dir / "results.csv", RESULT_HEADER, sorted(rows))
        _write_csv(out_dir / "accuracy.csv", ACCURACY_HEADER, sorted(acc_rows))

    if plan.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            for result in pool.map(_unit_job, jobs):
                collect(result)
    else:
        for job in jobs:
            collect(_unit_job(job))

    _write_csv(out_dir / "summary.csv", SUMMARY_HEADER, summarize(sorted(rows)))
    return out_dir / "results.csv"


def histogram(id_scores, ood_scores, bins: int = 50):
    """Counts of ID and OOD scores over ``bins`` uniform bins spanning both arrays."""
    both = np.concatenate([np.ravel(id_scores), np.ravel(ood_scores)])
    lo, hi = float(both.min()), float(both.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    id_counts, _ = np.histogram(id_scores, edges)
    ood_counts, _ = np.histogram(ood_scores, edges)
    return edges, id_counts, ood_counts


def write_histogram(path, id_scores, ood_scores, bins: int = 50) -> None:
    edges, a, b = histogram(id_scores, ood_scores, bins)
    lines = ["bin_lo,bin_hi,id_count,ood_count"]
    lines += [f"{edges[i]:.10g},{edges[i + 1]:.10g},{a[i]},{b[i]}" for i in range(bins)]
    Path(path).write_text("\n".join(lines) + "\n")
