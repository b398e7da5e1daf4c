"""Config-driven experiment runners behind the CLI.

Each experiment takes a config dict (defaults from ``preset_config``, deep-
merged with the user's YAML), runs one sampler per seed, and writes a
structured output directory:

    record.json            config hash, per-seed metrics, aggregates
    metrics.csv            one row per (variant, seed)
    .../particles_<seed>.csv   final particles (step, particle, coords)
    plot_*.svg             static figures

Seeds run in forked worker processes unless ``deterministic`` is set; rows
are sorted by (variant, seed) before writing, so outputs are byte-identical
either way. Wall time lives only in record.json, never in the CSVs.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import multiprocessing
import os
import time

import numpy as np

from . import _accel
from .ensemble import GaussianState, ancestral_sample, bw_flow_step, run_rsd, run_svgd, run_wgf, UpdateRule
from .inverse import DecoderMap, ForwardOperator, InverseTask, calibrated_lambda, rsd_inverse_solve
from .kernels import FeatureMap, KernelSpec
from .metrics import assign_modes, diversity, energy_distance
from .priors import GaussianMixture, gaussian_posterior_oracle, ring_mixture, toy_bimodal
from .schedule import DiffusionSchedule, WeightingSpec

__all__ = ["preset_config", "merge_config", "config_hash", "run_experiment", "EXPERIMENTS"]


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

_PRESETS = {
    "toy_bimodal": {
        "experiment": "toy_bimodal",
        "output_dir": "runs/toy_bimodal",
        "seeds": {"base": 0, "count": 200},
        "deterministic": False,
        "schedule": {"beta_min": 0.1, "beta_max": 20.0, "t_final": 1.0, "num_steps": 1000},
        "prior": {"preset": "toy_bimodal"},
        "kernel": {"gamma_schedule": "sigma_scaled", "bandwidth": "median", "form": "log_sum", "feature_map": "identity"},
        "rule": {"kind": "rsd_distill", "steps": 2000, "optimizer": "adaptive_moments", "lr": 0.03, "t_order": "descending"},
        "weighting": {"lambda": 1.0, "mode": "inverse_snr"},
        "init": {"kind": "random_gaussian", "mean": 0.0, "std": 1.0},
        "particles": 2,
        "gammas": [0.0, 1.0, 2000.0],
    },
    "gamma_sweep": {
        "experiment": "gamma_sweep",
        "output_dir": "runs/gamma_sweep",
        "seeds": {"base": 0, "count": 20},
        "deterministic": False,
        "schedule": {"beta_min": 0.1, "beta_max": 20.0, "t_final": 1.0, "num_steps": 1000},
        "prior": {"preset": "ring", "modes": 8, "radius": 3.0, "var": 0.05},
        "kernel": {"gamma_schedule": "sigma_scaled", "bandwidth": "median", "form": "log_sum", "feature_map": "identity"},
        "rule": {"kind": "rsd_distill", "steps": 1000, "optimizer": "adaptive_moments", "lr": 0.03, "t_order": "descending"},
        "weighting": {"lambda": 5.0, "mode": "inverse_snr"},
        "init": {"kind": "random_gaussian", "mean": 0.0, "std": 1.0},
        "particles": 4,
        "gammas": [0.0, 10.0, 20.0, 30.0, 40.0],
    },
    # conjugate-Gaussian task: the analytic-posterior check
    "inverse_task": {
        "experiment": "inverse_task",
        "output_dir": "runs/inverse",
        "seeds": {"base": 0, "count": 16},
        "deterministic": False,
        "schedule": {"beta_min": 0.1, "beta_max": 20.0, "t_final": 1.0, "num_steps": 1000},
        "prior": {"weights": [1.0], "means": [[0.0, 0.0]], "covariances": [1.0]},
        "kernel": {"gamma": 0.0, "gamma_schedule": "sigma_scaled", "bandwidth": "median", "form": "log_sum", "feature_map": "identity"},
        "init": {"kind": "random_gaussian", "mean": 0.0, "std": 1.0},
        "task": {
            "operator": "identity",
            "y": [40.0, 20.0],
            "sigma_v": 1.0,
            "decoder": "identity",
            "rho": 0.1,
            "lambda": "auto",
            "n_particles": 4,
            "lr_x": 0.06,
            "lr_z": 0.12,
            "optimizer": "adaptive_moments",
            "steps": 3000,
            "t_order": "uniform_random",
        },
        "tail_fraction": 0.25,
        "oracle_samples": 64,
        "oracle_seed": 99,
    },
    "sampler_compare": {
        "experiment": "sampler_compare",
        "output_dir": "runs/compare",
        "seeds": {"base": 0, "count": 50},
        "deterministic": False,
        "schedule": {"beta_min": 0.1, "beta_max": 20.0, "t_final": 1.0, "num_steps": 1000},
        "prior": {"preset": "toy_bimodal"},
        "kernel": {"gamma": 30.0, "gamma_schedule": "constant", "bandwidth": "median", "form": "log_sum", "feature_map": "identity"},
        "init": {"kind": "clustered", "point": [1.0, 0.0], "std": 0.1},
        "particles": 8,
        "steps": 800,
        "dt": 0.01,
        "t_anneal_from": 0.15,
        "ancestral_steps": 1000,
        "reference_samples": 4000,
        "reference_seed": 1234,
    },
    "bw_flow": {
        "experiment": "bw_flow",
        "output_dir": "runs/bw_flow",
        "seeds": {"base": 0, "count": 1},
        "deterministic": False,
        "gaussian": {
            "mean": [2.0, -1.0],
            "cov": [[1.5, 0.3], [0.3, 0.8]],
            "dt": 0.05,
            "steps": 2000,
            "mc_samples": 256,
        },
        "bimodal": {"dt": 0.002, "steps": 8000, "mc_samples": 256},
    },
}

# criterion-specific variants of the inverse experiment
_PRESETS["inverse_coverage"] = merge = copy.deepcopy(_PRESETS["inverse_task"])
merge.update(
    {
        "experiment": "inverse_coverage",
        "output_dir": "runs/inverse_coverage",
        "seeds": {"base": 0, "count": 50},
        "schedule": {"beta_min": 0.1, "beta_max": 20.0, "t_final": 0.3, "num_steps": 800},
        "prior": {"preset": "toy_bimodal"},
        "init": {"kind": "clustered", "point": [0.8, 0.0], "std": 0.02},
        "gammas": [0.0, 10.0],
    }
)
merge["task"] = dict(
    merge["task"],
    operator={"kind": "mask", "keep": [False, True]},
    y=[0.0],
    sigma_v=0.1,
    rho=0.1,
    n_particles=8,
    lr_x=0.004,
    lr_z=0.004,
    optimizer="plain",
    steps=800,
    t_order="descending",
)
merge["task"]["lambda"] = 0.1
del merge

_PRESETS["inverse_rho_sweep"] = merge = copy.deepcopy(_PRESETS["inverse_task"])
merge.update(
    {
        "experiment": "inverse_rho_sweep",
        "output_dir": "runs/inverse_rho",
        "seeds": {"base": 0, "count": 4},
    }
)
merge["task"] = dict(merge["task"], y=[2.0, 1.0], rho=[1.0, 0.1, 0.01], lr_x=0.01, lr_z=0.02, steps=2000)
del merge


def preset_config(name: str) -> dict:
    if name not in _PRESETS:
        raise ValueError(f"unknown experiment preset {name!r}; choose from {sorted(_PRESETS)}")
    return copy.deepcopy(_PRESETS[name])


def merge_config(base: dict, override: dict | None) -> dict:
    """Deep merge: override wins, dicts recurse, everything else replaces."""
    if not override:
        return copy.deepcopy(base)
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


_NON_SEMANTIC = ("output_dir", "deterministic")


def config_hash(config: dict) -> str:
    semantic = {k: v for k, v in config.items() if k not in _NON_SEMANTIC}
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _seed_list(config: dict) -> list[int]:
    seeds = config["seeds"]
    if isinstance(seeds, dict):
        seeds = [int(seeds.get("base", 0)) + i for i in range(int(seeds["count"]))]
    if not seeds:
        raise ValueError("seed list must be non-empty")
    return [int(s) for s in seeds]


def _build_schedule(config: dict) -> DiffusionSchedule:
    s = config.get("schedule", {})
    return DiffusionSchedule(
        beta_min=s.get("beta_min", 0.1),
        beta_max=s.get("beta_max", 20.0),
        t_final=s.get("t_final", 1.0),
        num_steps=s.get("num_steps", 1000),
    )


def _build_prior(block: dict) -> GaussianMixture:
    preset = block.get("preset")
    if preset == "toy_bimodal":
        return toy_bimodal()
    if preset == "ring":
        return ring_mixture(block.get("modes", 8), block.get("radius", 3.0), block.get("var", 0.05))
    if preset is not None:
        raise ValueError(f"unknown prior preset {preset!r}")
    return GaussianMixture(block["weights"], block["means"], block["covariances"])


def _build_feature_map(value) -> FeatureMap:
    if value in (None, "identity"):
        return FeatureMap.identity()
    return FeatureMap.linear(value)


def _build_kernel(block: dict, gamma: float | None = None) -> KernelSpec:
    bw = block.get("bandwidth", "median")
    return KernelSpec(
        gamma=block.get("gamma", 0.0) if gamma is None else gamma,
        gamma_schedule=block.get("gamma_schedule", "constant"),
        bandwidth="median" if bw == "median" else float(bw),
        form=block.get("form", "log_sum"),
        sign=block.get("sign", "repulsive"),
        features=_build_feature_map(block.get("feature_map")),
    )


def _build_operator(value, dim: int) -> ForwardOperator:
    if value in (None, "identity"):
        return ForwardOperator.identity()
    kind = value.get("kind")
    if kind == "identity":
        return ForwardOperator.identity()
    if kind == "mask":
        return ForwardOperator.mask(value["keep"])
    if kind == "matrix":
        return ForwardOperator.dense(value["A"])
    if kind == "box_mask":
        return ForwardOperator.box_mask(value["shape"], value["rows"], value["cols"])
    raise ValueError(f"unknown operator spec {value!r}")


def _build_decoder(value) -> DecoderMap:
    if value in (None, "identity"):
        return DecoderMap.identity()
    return DecoderMap.linear(value["W"])


def _load_measurement(value) -> np.ndarray:
    if isinstance(value, dict) and "csv" in value:
        return np.loadtxt(value["csv"], delimiter=",", ndmin=1)
    return np.asarray(value, dtype=float)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_particles(path: str, positions: np.ndarray, step: int) -> None:
    header = ["step", "particle"] + [f"x{i}" for i in range(positions.shape[1])]
    rows = [[step, i] + list(positions[i]) for i in range(positions.shape[0])]
    _write_csv(path, header, rows)


def _write_trajectory(path: str, snapshots: list) -> None:
    if not snapshots:
        return
    dim = snapshots[0][1].shape[1]
    header = ["step", "particle"] + [f"x{i}" for i in range(dim)]
    rows = [[step, i] + list(pos[i]) for step, pos in snapshots for i in range(pos.shape[0])]
    _write_csv(path, header, rows)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _write_record(out_dir: str, record: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "record.json"), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _run_jobs(worker, jobs: list[tuple], deterministic: bool) -> list:
    """Evaluate worker(job) for every job, in forked processes unless
    deterministic (results come back in job order either way)."""
    workers = min(len(jobs), os.cpu_count() or 1)
    if deterministic or workers < 2 or not hasattr(os, "fork"):
        return [worker(job) for job in jobs]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=workers) as pool:
        return pool.map(worker, jobs, chunksize=max(1, len(jobs) // (4 * workers)))


def _spearman(a, b) -> float:
    ra = np.argsort(np.argsort(np.asarray(a, dtype=float)))
    rb = np.argsort(np.argsort(np.asarray(b, dtype=float)))
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return float("nan")
    return float((ra * rb).sum() / denom)


def _plot(fig, out_dir: str, name: str) -> None:
    fig.savefig(os.path.join(out_dir, name), format="svg")
    import matplotlib.pyplot as plt

    plt.close(fig)


def _new_figure():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt.figure(figsize=(6, 4.5))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _distill_seed(job) -> dict:
    """One distillation run; used by the toy and sweep experiments."""
    config, gamma, seed = job
    schedule = _build_schedule(config)
    prior = _build_prior(config["prior"])
    weighting = WeightingSpec(config["weighting"]["lambda"], config["weighting"].get("mode", "inverse_snr"))
    rule_cfg = config["rule"]
    rule = UpdateRule(kind="rsd_distill", step_size=rule_cfg["lr"], optimizer=rule_cfg["optimizer"])
    spec = _build_kernel(config["kernel"], gamma)
    try:
        pos, info = run_rsd(
            prior, spec, schedule, weighting,
            n_particles=config["particles"], steps=rule_cfg["steps"], seed=seed,
            init=config["init"], rule=rule, t_order=rule_cfg.get("t_order", "descending"),
            snapshot_every=int(config.get("snapshot_every", 0)),
        )
    except Exception as exc:  # divergence is recorded, not fatal to the sweep
        return {"seed": seed, "failed": str(exc)}
    am = assign_modes(pos, prior)
    dists = np.linalg.norm(pos[:, None, :] - prior.means[None, :, :], axis=2).min(axis=1)
    return {
        "seed": seed,
        "collapsed": bool(am.collapsed),
        "distinct_modes": am.distinct_mode_count,
        "mean_dist_to_mode": float(dists.mean()),
        "diversity": diversity(pos),
        "loglik": float(np.mean(prior.log_pdf(pos))),
        "degenerate_steps": info.degenerate_steps,
        "positions": pos,
        "snapshots": info.snapshots,
    }


def run_toy_bimodal(config: dict) -> dict:
    """Repulsion-vs-collapse study on the two-mode target, N=2 particles."""
    t_start = time.time()
    out_dir = config["output_dir"]
    rule_cfg = config["rule"]
    seeds = _seed_list(config)
    mode_centers = _build_prior(config["prior"]).means

    per_gamma = {}
    for gamma in config["gammas"]:
        results = _run_jobs(_distill_seed, [(config, gamma, s) for s in seeds], config["deterministic"])
        per_gamma[gamma] = dict(zip(seeds, results))

    rows, collapse_rows, per_seed = [], [], []
    for gamma in config["gammas"]:
        results = per_gamma[gamma]
        ok = [r for _, r in sorted(results.items()) if "failed" not in r]
        for seed in seeds:
            r = results[seed]
            if "failed" in r:
                rows.append([gamma, seed, "", "", "", "", r["failed"]])
                continue
            rows.append([gamma, seed, r["collapsed"], r["distinct_modes"], r["mean_dist_to_mode"], r["diversity"], ""])
            _write_particles(
                os.path.join(out_dir, f"gamma_{gamma:g}", f"particles_{seed}.csv"),
                r["positions"], rule_cfg["steps"],
            )
            _write_trajectory(os.path.join(out_dir, f"gamma_{gamma:g}", f"trajectory_{seed}.csv"), r["snapshots"])
            per_seed.append({"gamma": gamma, "seed": seed, "collapsed": r["collapsed"], "distinct_modes": r["distinct_modes"]})
        collapse_rows.append([gamma, sum(r["collapsed"] for r in ok), len(ok), float(np.mean([r["mean_dist_to_mode"] for r in ok]))])

    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ["gamma", "seed", "collapsed", "distinct_modes", "mean_dist_to_mode", "diversity", "error"], rows)
    _write_csv(os.path.join(out_dir, "collapse_vs_gamma.csv"),
               ["gamma", "collapse_count", "n_seeds", "mean_dist_to_mode"], collapse_rows)

    fig = _new_figure()
    ax = fig.add_subplot(111)
    ax.bar([str(g) for g, *_ in collapse_rows], [c for _, c, *_ in collapse_rows])
    ax.set_xlabel("repulsion weight")
    ax.set_ylabel(f"collapsed runs (of {len(seeds)})")
    _plot(fig, out_dir, "plot_collapse_vs_gamma.svg")
    for gamma in config["gammas"]:
        fig = _new_figure()
        ax = fig.add_subplot(111)
        pts = np.vstack([r["positions"] for _, r in sorted(per_gamma[gamma].items()) if "failed" not in r])
        ax.scatter(pts[:, 0], pts[:, 1], s=6, alpha=0.4)
        ax.scatter(mode_centers[:, 0], mode_centers[:, 1], marker="x", c="red")
        ax.set_title(f"final particles, gamma={gamma:g}")
        _plot(fig, out_dir, f"plot_scatter_gamma_{gamma:g}.svg")

    aggregate = {
        "collapse_counts": {str(g): int(c) for g, c, *_ in collapse_rows},
        "mean_dist_to_mode": {str(g): float(d) for g, _, _, d in collapse_rows},
    }
    record = {
        "experiment": "toy_bimodal",
        "config": config,
        "config_hash": config_hash(config),
        "backend": _accel.backend(),
        "per_seed": per_seed,
        "aggregate": aggregate,
        "wall_time_s": time.time() - t_start,
    }
    _write_record(out_dir, record)
    return record


def run_gamma_sweep(config: dict) -> dict:
    """Diversity/quality trade-off across repulsion weights."""
    t_start = time.time()
    out_dir = config["output_dir"]
    rule_cfg = config["rule"]
    seeds = _seed_list(config)

    rows, per_seed = [], []
    agg_rows = []
    for gamma in config["gammas"]:
        results = dict(zip(seeds, _run_jobs(_distill_seed, [(config, gamma, s) for s in seeds], config["deterministic"])))
        divs = [results[s]["diversity"] for s in seeds if "failed" not in results[s]]
        lls = [results[s]["loglik"] for s in seeds if "failed" not in results[s]]
        for seed in seeds:
            r = results[seed]
            if "failed" in r:
                rows.append([gamma, seed, "", "", r["failed"]])
                continue
            rows.append([gamma, seed, r["diversity"], r["loglik"], ""])
            per_seed.append({"gamma": gamma, "seed": seed, "diversity": r["diversity"], "loglik": r["loglik"]})
            _write_particles(
                os.path.join(out_dir, f"gamma_{gamma:g}", f"particles_{seed}.csv"),
                r["positions"], rule_cfg["steps"],
            )
        agg_rows.append([gamma, float(np.mean(divs)), float(np.std(divs)), float(np.mean(lls)), float(np.std(lls))])

    _write_csv(os.path.join(out_dir, "metrics.csv"), ["gamma", "seed", "diversity", "loglik", "error"], rows)
    _write_csv(os.path.join(out_dir, "sweep.csv"),
               ["gamma", "mean_diversity", "std_diversity", "mean_loglik", "std_loglik"], agg_rows)

    fig = _new_figure()
    ax = fig.add_subplot(111)
    ax.errorbar([r[1] for r in agg_rows], [r[3] for r in agg_rows],
                yerr=[r[4] for r in agg_rows], marker="o")
    for row in agg_rows:
        ax.annotate(f"{row[0]:g}", (row[1], row[3]))
    ax.set_xlabel("diversity")
    ax.set_ylabel("mean prior log-likelihood")
    _plot(fig, out_dir, "plot_tradeoff.svg")

    gammas = [r[0] for r in agg_rows]
    aggregate = {
        "gammas": gammas,
        "mean_diversity": [r[1] for r in agg_rows],
        "mean_loglik": [r[3] for r in agg_rows],
        "std_loglik": [r[4] for r in agg_rows],
        "pooled_std_loglik": float(np.sqrt(np.mean(np.array([r[4] for r in agg_rows]) ** 2))),
        "spearman_diversity_gamma": _spearman([r[1] for r in agg_rows], gammas),
    }
    record = {
        "experiment": "gamma_sweep",
        "config": config,
        "config_hash": config_hash(config),
        "backend": _accel.backend(),
        "per_seed": per_seed,
        "aggregate": aggregate,
        "wall_time_s": time.time() - t_start,
    }
    _write_record(out_dir, record)
    return record


def _build_task(config: dict, prior: GaussianMixture, schedule: DiffusionSchedule,
                gamma: float | None = None, rho: float | None = None) -> InverseTask:
    t = config["task"]
    rho_val = float(t["rho"]) if rho is None else rho
    lam = t.get("lambda", 1.0)
    if lam == "auto":
        lam = calibrated_lambda(schedule, int(t["steps"]), rho_val)
    weighting = WeightingSpec(float(lam), t.get("weighting_mode", "inverse_snr"),
                              sigma_v=float(t["sigma_v"]), rho=rho_val)
    decoder = _build_decoder(t.get("decoder"))
    x_dim = prior.dim if decoder.is_identity else decoder.matrix.shape[0]
    return InverseTask(
        operator=_build_operator(t.get("operator"), x_dim),
        y=_load_measurement(t["y"]),
        sigma_v=float(t["sigma_v"]),
        prior=prior,
        decoder=decoder,
        rho=rho_val,
        weighting=weighting,
        kernel=_build_kernel(config["kernel"], gamma),
        n_particles=int(t["n_particles"]),
        lr_x=float(t["lr_x"]),
        lr_z=float(t["lr_z"]),
        optimizer=t.get("optimizer", "adaptive_moments"),
    )


def _inverse_seed(job) -> dict:
    config, gamma, rho, seed = job
    schedule = _build_schedule(config)
    prior = _build_prior(config["prior"])
    t_cfg = config["task"]
    steps = int(t_cfg["steps"])
    tail = max(1, int(config.get("tail_fraction", 0.25) * steps))
    task = _build_task(config, prior, schedule, gamma=gamma, rho=rho)
    x, z, diag = rsd_inverse_solve(
        task, steps, seed, schedule=schedule, init=config["init"],
        t_order=t_cfg.get("t_order", "descending"),
    )
    am = assign_modes(x if task.decoder.is_identity else z, prior)
    return {
        "x": x,
        "z": z,
        "coupling_tail": float(np.mean(diag["coupling_residual"][-tail:])),
        "data_final": float(diag["data_residual"][-1]),
        "diversity": float(diag["diversity"][-1]),
        "distinct_modes": am.distinct_mode_count,
        "degenerate_steps": diag["degenerate_steps"],
        "diag": diag,
    }


def run_inverse(config: dict) -> dict:
    """Constrained solve; sweeps gamma and/or rho lists when present.

    Records per-seed residuals (coupling tail-averaged), diversity, mode
    coverage against the exact posterior, and the solver-vs-oracle mean
    error when the task is the identity-decoder case.
    """
    t_start = time.time()
    out_dir = config["output_dir"]
    schedule = _build_schedule(config)
    prior = _build_prior(config["prior"])
    t_cfg = config["task"]
    seeds = _seed_list(config)
    steps = int(t_cfg["steps"])
    gammas = config.get("gammas", [config["kernel"].get("gamma", 0.0)])
    rhos = t_cfg["rho"] if isinstance(t_cfg["rho"], list) else [t_cfg["rho"]]

    rows, per_seed = [], []
    aggregate = {"variants": []}
    oracle_cache = {}
    for gamma in gammas:
        for rho in rhos:
            results = dict(zip(seeds, _run_jobs(
                _inverse_seed, [(config, gamma, rho, s) for s in seeds], config["deterministic"])))
            all_x = np.vstack([results[s]["x"] for s in seeds])
            variant = {"gamma": gamma, "rho": rho}
            variant["coupling_tail_mean"] = float(np.mean([results[s]["coupling_tail"] for s in seeds]))
            variant["mean_distinct_modes"] = float(np.mean([results[s]["distinct_modes"] for s in seeds]))
            variant["both_modes_fraction"] = float(np.mean([results[s]["distinct_modes"] >= min(t_cfg["n_particles"], prior.n_components) for s in seeds]))
            task0 = _build_task(config, prior, schedule, gamma=gamma, rho=rho)
            if task0.decoder.is_identity:
                key = rho
                if key not in oracle_cache:
                    oracle_cache[key] = gaussian_posterior_oracle(
                        prior, task0.operator.as_matrix(task0.x_dim), task0.y, task0.sigma_v
                    )
                oracle = oracle_cache[key]
                post_mean = oracle.means.T @ oracle.weights
                variant["solver_mean"] = all_x.mean(axis=0).tolist()
                variant["oracle_mean"] = post_mean.tolist()
                variant["mean_rel_err"] = float(
                    np.linalg.norm(all_x.mean(axis=0) - post_mean) / max(np.linalg.norm(post_mean), 1e-300)
                )
                n_oracle = int(config.get("oracle_samples", 64))
                oracle_draws = oracle.sample(max(n_oracle, all_x.shape[0]), np.random.default_rng(config.get("oracle_seed", 99)))
                variant["energy_to_oracle"] = energy_distance(all_x, oracle_draws[: all_x.shape[0]])
            aggregate["variants"].append(variant)
            for seed in seeds:
                r = results[seed]
                rows.append([gamma, rho, seed, r["coupling_tail"], r["data_final"], r["diversity"], r["distinct_modes"]])
                per_seed.append({"gamma": gamma, "rho": rho, "seed": seed,
                                 "coupling_tail": r["coupling_tail"], "distinct_modes": r["distinct_modes"]})
                tag = f"gamma_{gamma:g}_rho_{rho:g}"
                _write_particles(os.path.join(out_dir, tag, f"particles_{seed}.csv"), r["x"], steps)
            # diagnostics time series for the first seed of each variant
            diag = results[seeds[0]]["diag"]
            _write_csv(
                os.path.join(out_dir, f"gamma_{gamma:g}_rho_{rho:g}", "diagnostics.csv"),
                ["step", "data_residual", "coupling_residual", "diversity"],
                [[int(diag["step"][i]), diag["data_residual"][i], diag["coupling_residual"][i], diag["diversity"][i]]
                 for i in range(len(diag["step"]))],
            )

    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ["gamma", "rho", "seed", "coupling_tail", "data_final", "diversity", "distinct_modes"], rows)

    if len(rhos) > 1:
        aggregate["rho_trend"] = {
            "rhos": rhos,
            "coupling_tail_means": [v["coupling_tail_mean"] for v in aggregate["variants"]],
        }

    fig = _new_figure()
    ax = fig.add_subplot(111)
    for variant, (gamma, rho) in zip(aggregate["variants"], [(g, r) for g in gammas for r in rhos]):
        diag_path = os.path.join(out_dir, f"gamma_{gamma:g}_rho_{rho:g}", "diagnostics.csv")
        data = np.genfromtxt(diag_path, delimiter=",", names=True)
        ax.semilogy(data["step"], np.maximum(data["coupling_residual"], 1e-300), label=f"g={gamma:g}, rho={rho:g}")
    ax.set_xlabel("step")
    ax.set_ylabel("coupling residual")
    ax.legend(fontsize=7)
    _plot(fig, out_dir, "plot_coupling_residual.svg")

    record = {
        "experiment": config["experiment"],
        "config": config,
        "config_hash": config_hash(config),
        "backend": _accel.backend(),
        "per_seed": per_seed,
        "aggregate": aggregate,
        "wall_time_s": time.time() - t_start,
    }
    _write_record(out_dir, record)
    return record


def _compare_seed(job) -> dict:
    config, rule, seed, reference = job
    schedule = _build_schedule(config)
    prior = _build_prior(config["prior"])
    spec = _build_kernel(config["kernel"])
    steps = int(config["steps"])
    dt = float(config["dt"])
    n = int(config["particles"])
    anneal = np.linspace(float(config["t_anneal_from"]), 0.0, steps)
    if rule == "wgf_repulsive":
        pos, _ = run_wgf(prior, spec, schedule, n, steps, dt, seed, init=config["init"], t_anneal=anneal)
    elif rule == "svgd":
        pos, _ = run_svgd(prior, spec, schedule, n, steps, dt, seed, init=config["init"], t_anneal=anneal)
    elif rule == "ancestral":
        pos = ancestral_sample(prior, schedule, int(config["ancestral_steps"]), n, seed)
    else:
        raise ValueError(rule)
    return {
        "distinct_modes": assign_modes(pos, prior).distinct_mode_count,
        "energy_to_reference": energy_distance(pos, reference),
        "positions": pos,
    }


def run_sampler_compare(config: dict) -> dict:
    """Repulsive flow vs SVGD vs the reverse-SDE reference on one target."""
    t_start = time.time()
    out_dir = config["output_dir"]
    schedule = _build_schedule(config)
    prior = _build_prior(config["prior"])
    seeds = _seed_list(config)
    steps = int(config["steps"])
    reference = ancestral_sample(prior, schedule, int(config["ancestral_steps"]),
                                 int(config["reference_samples"]), int(config["reference_seed"]))

    rows, per_seed = [], []
    aggregate = {}
    for rule in ("wgf_repulsive", "svgd", "ancestral"):
        results = dict(zip(seeds, _run_jobs(
            _compare_seed, [(config, rule, s, reference) for s in seeds], config["deterministic"])))
        modes = [results[s]["distinct_modes"] for s in seeds]
        eds = [results[s]["energy_to_reference"] for s in seeds]
        aggregate[rule] = {"mean_distinct_modes": float(np.mean(modes)), "mean_energy": float(np.mean(eds))}
        for seed in seeds:
            r = results[seed]
            rows.append([rule, seed, r["distinct_modes"], r["energy_to_reference"]])
            per_seed.append({"rule": rule, "seed": seed, "distinct_modes": r["distinct_modes"]})
            _write_particles(os.path.join(out_dir, rule, f"particles_{seed}.csv"), r["positions"], steps)

    _write_csv(os.path.join(out_dir, "metrics.csv"), ["rule", "seed", "distinct_modes", "energy_to_reference"], rows)

    fig = _new_figure()
    ax = fig.add_subplot(111)
    names = list(aggregate)
    ax.bar(names, [aggregate[r]["mean_distinct_modes"] for r in names])
    ax.set_ylabel("mean distinct modes")
    _plot(fig, out_dir, "plot_mode_coverage.svg")

    record = {
        "experiment": "sampler_compare",
        "config": config,
        "config_hash": config_hash(config),
        "backend": _accel.backend(),
        "per_seed": per_seed,
        "aggregate": aggregate,
        "wall_time_s": time.time() - t_start,
    }
    _write_record(out_dir, record)
    return record


def _bw_seed(job) -> dict:
    config, seed = job
    g = config["gaussian"]
    b = config["bimodal"]
    target_g = GaussianMixture([1.0], [g["mean"]], [np.asarray(g["cov"], dtype=float)])
    toy = toy_bimodal()
    rng = np.random.default_rng(seed)
    state = GaussianState(np.zeros(2), np.eye(2))
    for _ in range(int(g["steps"])):
        state = bw_flow_step(state, target_g, float(g["dt"]), int(g["mc_samples"]), rng)
    mean_err = float(np.linalg.norm(state.mean - np.asarray(g["mean"], dtype=float)))
    cov_err = float(np.linalg.norm(state.cov - np.asarray(g["cov"], dtype=float)))
    state2 = GaussianState(np.zeros(2), np.eye(2))
    for _ in range(int(b["steps"])):
        state2 = bw_flow_step(state2, toy, float(b["dt"]), int(b["mc_samples"]), rng)
    return {
        "gaussian_mean_err": mean_err,
        "gaussian_cov_err": cov_err,
        "bimodal_trace": float(np.trace(state2.cov)),
        "bimodal_mean": state2.mean.tolist(),
        "repaired": bool(state2.repaired),
    }


def run_bw_flow(config: dict) -> dict:
    """Gaussian-family flow: exact convergence on a Gaussian target and
    mode-seeking collapse on the bimodal one."""
    t_start = time.time()
    out_dir = config["output_dir"]
    seeds = _seed_list(config)

    results = dict(zip(seeds, _run_jobs(_bw_seed, [(config, s) for s in seeds], config["deterministic"])))
    rows = [[s, results[s]["gaussian_mean_err"], results[s]["gaussian_cov_err"],
             results[s]["bimodal_trace"], results[s]["repaired"]] for s in seeds]
    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ["seed", "gaussian_mean_err", "gaussian_cov_err", "bimodal_trace", "spd_repaired"], rows)

    aggregate = {
        "max_gaussian_mean_err": float(max(results[s]["gaussian_mean_err"] for s in seeds)),
        "max_bimodal_trace": float(max(results[s]["bimodal_trace"] for s in seeds)),
        "bimodal_means": [results[s]["bimodal_mean"] for s in seeds],
    }
    record = {
        "experiment": "bw_flow",
        "config": config,
        "config_hash": config_hash(config),
        "backend": _accel.backend(),
        "per_seed": [{"seed": s, **{k: v for k, v in results[s].items() if k != "bimodal_mean"}} for s in seeds],
        "aggregate": aggregate,
        "wall_time_s": time.time() - t_start,
    }
    _write_record(out_dir, record)
    return record


EXPERIMENTS = {
    "toy_bimodal": run_toy_bimodal,
    "gamma_sweep": run_gamma_sweep,
    "inverse_task": run_inverse,
    "inverse_coverage": run_inverse,
    "inverse_rho_sweep": run_inverse,
    "sampler_compare": run_sampler_compare,
    "bw_flow": run_bw_flow,
}


def run_experiment(config: dict) -> dict:
    name = config["experiment"]
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}")
    return EXPERIMENTS[name](config)
