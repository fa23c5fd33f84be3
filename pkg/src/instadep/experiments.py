"""Experiment runners: each maps a validated config to CSV/JSON files.

Every runner is a pure function of its configuration: all randomness is
drawn from streams derived from the configured seeds, and floats are
written with 17 significant digits, so re-running reproduces the files
byte for byte.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, ExperimentConfig
from .core import RngStream, split_rng
from .envs import (CartPoleLite, CartPoleParams, DrivingEnv, DrivingParams, LinearGaussianSpec, NoiseInjectConfig,
                   NoisyEnv, RewardAugmentConfig, aggregated_noise_cov, calibrate_family_bounds,
                   calibrate_norm_bounds, random_policy_states, reward_family, simulate_compound_noise,
                   subsampled_noise_cov)
from .models import likelihood_loss_batch, marginal_losses
from .planning import (Grid, TrainConfig, driving_region, driving_region_mdp, laggedize, policy_map, region_cells,
                       run_episodes, train_loop, value_iteration, write_policy_map_csv, TabularPolicy)

MODES = ("lagged", "instantaneous")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])
    return path


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def _outdir(cfg: ExperimentConfig, output_dir=None) -> Path:
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def mean_std(x) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    x = np.asarray(x, dtype=np.float64)
    return float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------


def driving_params(cfg: ExperimentConfig) -> DrivingParams:
    d = dict(cfg.env["driving"])
    d["dv"] = tuple(d["dv"])
    return DrivingParams(**d)


def _pairs(raw, default) -> tuple:
    return tuple(tuple(p) for p in raw) if raw is not None else default


def build_env(cfg: ExperimentConfig, family: Optional[str] = None):
    """Environment described by ``cfg.env``.

    Driving gets noise injection on (p, v) and, when ``r_reward`` is
    nonzero, reward augmentation whose Norm bounds are either given or
    calibrated from a random-policy rollout.  CartPoleLite takes its
    reward family from ``family``; augmentation applies only when
    ``augment.pairs`` is set explicitly.
    """
    e = cfg.env
    nz, aug = e["noise"], e["augment"]
    cal_rng = RngStream(e["calibration_seed"])
    if e["name"] == "driving":
        pairs = _pairs(nz["pairs"], ((0, 1),))
        base = NoisyEnv(DrivingEnv(driving_params(cfg)), NoiseInjectConfig(nz["r_noise"], nz["pair_corr"], pairs))
        aug_pairs = _pairs(aug["pairs"], pairs)
    else:
        pairs = _pairs(nz["pairs"], ((2, 3),))
        c = e["cartpole"]
        fam = reward_family(family or "Original", dep=pairs[0])
        params = CartPoleParams(max_steps=c["max_steps"], discount=c["discount"])
        env = CartPoleLite(fam, NoiseInjectConfig(nz["r_noise"], nz["pair_corr"], pairs), params,
                           start_bound=c["start_bound"])
        bounds = calibrate_family_bounds(env, split_rng(cal_rng, "family"), e["calibration_steps"])
        base = NoisyEnv(CartPoleLite(fam, env.noise, params, bounds, c["start_bound"]))
        if aug["pairs"] is None:
            return base
        aug_pairs = _pairs(aug["pairs"], ())
    if aug["r_reward"] == 0 or not aug_pairs:
        return base
    if aug["norm_bounds"] is not None:
        bounds = tuple(tuple(b) for b in aug["norm_bounds"])
        if len(bounds) != len(aug_pairs):
            raise ConfigError([f"env.augment.norm_bounds needs {len(aug_pairs)} entries, one per pair"])
    else:
        bounds = calibrate_norm_bounds(base, aug_pairs, split_rng(cal_rng, "augment"), e["calibration_steps"])
    return NoisyEnv(base.base, base.noise, RewardAugmentConfig(aug["r_reward"], aug_pairs, bounds))


def default_grid(env_name: str) -> Grid:
    if env_name == "driving":
        return Grid.uniform(-4.0, 4.0, 24, 2)
    return Grid((-2.4, -2.0, -0.21, -2.0), (2.4, 2.0, 0.21, 2.0), (3, 3, 6, 6))


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    loop = dict(cfg.loop)
    g = loop.pop("grid")
    loop.pop("final_episodes")
    grid = default_grid(cfg.env["name"]) if g["lows"] is None else Grid(g["lows"], g["highs"], g["n_cells"])
    m = cfg.model
    return TrainConfig(grid=grid, mean_kind=m["mean_kind"], feature_map=m["feature_map"],
                       scale_kind=m["scale_kind"], window=m["window"], shrink=m["shrink"], **loop)


def final_evaluation(env, policy, n: int, seed: int):
    """Greedy-policy episodes on a stream shared by both modes of a seed."""
    return run_episodes(env, policy, n, env.gamma, split_rng(RngStream(seed), "final"))


def train_both(env, tcfg: TrainConfig, seed: int, final_episodes: int) -> dict:
    """Train lagged and instantaneous learners from the same seed."""
    out = {}
    for mode in MODES:
        res = train_loop(env, tcfg, mode, RngStream(seed))
        out[mode] = (res, final_evaluation(env, res.policy, final_episodes, seed))
    return out


# --------------------------------------------------------------------------
# Divergence band on 1-D Driving
# --------------------------------------------------------------------------


def region_planning(params: DrivingParams, grid: Grid, n_mc: int, seed: int) -> dict:
    """Exact plans under the discretized true and lagged single-step MDPs."""
    mdp = driving_region_mdp(params, grid, n_mc, RngStream(seed))
    lag = laggedize(mdp)
    pt, pl = value_iteration(mdp), value_iteration(lag)
    bounds = driving_region(params)
    inside, near = region_cells(grid, bounds, params.dt)
    mt, ml = policy_map(pt.policy, grid), policy_map(pl.policy, grid)
    diff = mt != ml
    return {"true": mt, "lagged": ml, "diff": diff, "inside": inside, "near": near,
            "mismatch_far": int(np.sum((diff != inside) & ~near)), "n_diff": int(diff.sum()),
            "n_inside": int(inside.sum())}


def run_visual_region(cfg: ExperimentConfig, output_dir=None) -> dict:
    out = _outdir(cfg, output_dir)
    params = driving_params(cfg)
    pl = cfg.planning
    grid = Grid(pl["lows"], pl["highs"], pl["n_cells"])
    bounds = driving_region(params)
    env = DrivingEnv(params)
    files, rows, per_seed = [], [], {}
    for seed in cfg.seeds:
        plan = region_planning(params, grid, pl["n_mc"], seed)
        per_seed[seed] = plan
        for mode, key in (("true", "true"), ("lagged", "lagged")):
            path = out / f"policy_map_{mode}_seed{seed}.csv"
            write_policy_map_csv(path, plan[key], grid)
            files.append(path)
        for mode in ("true", "lagged"):
            pol = TabularPolicy(plan[mode].reshape(-1), grid)
            st = run_episodes(env, pol, pl["eval_episodes"], env.gamma, split_rng(RngStream(seed), "metrics"))
            dist = np.linalg.norm(st.final_states, axis=1)
            rows.append([seed, mode, *mean_std(st.returns), *mean_std(dist), *mean_std(st.lengths)])
    agg = []
    for mode in ("true", "lagged"):
        sel = [r for r in rows if r[1] == mode]
        agg.append(["all", mode, *mean_std([r[2] for r in sel]), *mean_std([r[4] for r in sel]),
                    *mean_std([r[6] for r in sel])])
    header = ["seed", "mode", "return_mean", "return_std", "distance_mean", "distance_std",
              "length_mean", "length_std"]
    files.append(write_csv(out / "metrics.csv", header, rows + agg))
    region_doc = {**bounds.to_dict(), "dt": params.dt,
                  "seeds": {str(s): {"differing_cells": p["n_diff"], "band_cells": p["n_inside"],
                                     "mismatches_away_from_edges": p["mismatch_far"]}
                            for s, p in per_seed.items()}}
    files.append(write_json(out / "region.json", region_doc))
    return {"bounds": bounds, "plans": per_seed, "metrics": rows + agg, "files": files}


# --------------------------------------------------------------------------
# Learning experiments
# --------------------------------------------------------------------------


def heldout_losses(env, models: dict, seed: int, n: int = 5000) -> dict:
    """Mean joint and per-dimension likelihood losses on shared random-policy data."""
    rng = split_rng(RngStream(seed), "heldout")
    S = random_policy_states(env, n + 1, rng)[:-1]
    a = rng.integers(0, env.n_actions, size=n)
    X = env.transition_batch(S, a, rng)
    keep = np.all(np.isfinite(X), axis=1)
    S, a, X = S[keep], a[keep], X[keep]
    out = {}
    for mode, model in models.items():
        mu, sc = model.predict_batch(S, a)
        joint, _ = likelihood_loss_batch(mu, sc, model.corr, X)
        out[mode] = {"loss": float(joint.mean()), "marginal": marginal_losses(mu, sc, X).mean(axis=0)}
    return out


def run_model_compare(cfg: ExperimentConfig, output_dir=None) -> dict:
    out = _outdir(cfg, output_dir)
    env = build_env(cfg, family=cfg.env["families"][-1])
    tcfg = train_config(cfg)
    curves, losses, corrs, summary, results = [], [], [], [], {}
    iu = np.triu_indices(env.dim, 1)
    for seed in cfg.seeds:
        pair = train_both(env, tcfg, seed, cfg.loop["final_episodes"])
        held = heldout_losses(env, {m: pair[m][0].model for m in MODES}, seed)
        results[seed] = {m: {"train": pair[m][0], "final": pair[m][1], "heldout": held[m]} for m in MODES}
        for mode in MODES:
            res, fin = pair[mode]
            for row in res.curve:
                curves.append([seed, mode, int(row[0]), row[1], row[2]])
            for epoch, (loss, G) in enumerate(zip(res.loss_history, res.corr_history)):
                losses.append([seed, mode, epoch, loss])
                corrs.append([seed, mode, epoch, *G[iu]])
            summary.append([seed, mode, fin.mean, fin.std, held[mode]["loss"], *held[mode]["marginal"]])
    files = [
        write_csv(out / "learning_curve.csv", ["seed", "mode", "epoch", "return_mean", "return_std"], curves),
        write_csv(out / "likelihood_loss.csv", ["seed", "mode", "epoch", "loss"], losses),
        write_csv(out / "correlation.csv", ["seed", "mode", "epoch"] + [f"corr_{i}_{j}" for i, j in zip(*iu)],
                  corrs),
        write_csv(out / "summary.csv", ["seed", "mode", "final_return", "final_std", "heldout_loss"]
                  + [f"marginal_loss_{d}" for d in range(env.dim)], summary),
    ]
    return {"results": results, "files": files}


def run_reward_families(cfg: ExperimentConfig, output_dir=None) -> dict:
    out = _outdir(cfg, output_dir)
    tcfg = train_config(cfg)
    rows, gaps, by_family = [], [], {}
    for tag in cfg.env["families"]:
        env = build_env(cfg, family=tag)
        per_seed = []
        for seed in cfg.seeds:
            pair = train_both(env, tcfg, seed, cfg.loop["final_episodes"])
            lag, ins = pair["lagged"][1].mean, pair["instantaneous"][1].mean
            rows.append([tag, seed, lag, ins, ins - lag])
            per_seed.append((lag, ins))
        arr = np.array(per_seed)
        by_family[tag] = arr
        gaps.append([tag, arr[:, 0].mean(), arr[:, 1].mean(), *mean_std(arr[:, 1] - arr[:, 0])])
    files = [
        write_csv(out / "family_returns.csv", ["family", "seed", "lagged", "instantaneous", "gap"], rows),
        write_csv(out / "family_gaps.csv", ["family", "lagged_mean", "instantaneous_mean", "gap_mean", "gap_std"],
                  gaps),
    ]
    return {"returns": by_family, "gaps": {g[0]: g[3] for g in gaps}, "files": files}


def advantage(ins: float, lag: float) -> float:
    """(INS - LAG) / |LAG|; the magnitude keeps the sign meaningful for negative returns."""
    return (ins - lag) / abs(lag) if lag != 0 else 0.0


def sweep_override(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    d = cfg.to_dict()
    if axis == "r_reward":
        d["env"]["augment"]["r_reward"] = value
    else:
        d["env"]["noise"][axis] = value
    return ExperimentConfig(source=cfg.source, **d)


def run_sweep(cfg: ExperimentConfig, output_dir=None) -> dict:
    out = _outdir(cfg, output_dir)
    axis, values = cfg.sweep["axis"], cfg.sweep["values"]
    tcfg = train_config(cfg)
    rows, seed_rows = [], []
    for value in values:
        sub = sweep_override(cfg, axis, value)
        env = build_env(sub, family=sub.env["families"][-1])
        lags, inss = [], []
        for seed in cfg.seeds:
            pair = train_both(env, tcfg, seed, cfg.loop["final_episodes"])
            lag, ins = pair["lagged"][1].mean, pair["instantaneous"][1].mean
            seed_rows.append([axis, value, seed, lag, ins])
            lags.append(lag)
            inss.append(ins)
        lag_m, ins_m = float(np.mean(lags)), float(np.mean(inss))
        rows.append([axis, value, lag_m, ins_m, advantage(ins_m, lag_m)])
    files = [
        write_csv(out / "sweep.csv", ["axis", "value", "lagged_mean", "instantaneous_mean", "advantage"], rows),
        write_csv(out / "sweep_seeds.csv", ["axis", "value", "seed", "lagged", "instantaneous"], seed_rows),
    ]
    return {"rows": rows, "files": files}


# --------------------------------------------------------------------------
# Theory checks
# --------------------------------------------------------------------------


def theory_report(n_mc: int = 1_000_000, rho: float = 0.9, seed: int = 0) -> dict:
    """Run every numerical identity check; each entry carries its values and a pass flag."""
    from . import theorylab as tl
    from .models import likelihood_loss
    from .core import GaussianPrediction, CorrelationMatrix
    from .planning import consistency_check, evaluate_policy

    rng = RngStream(seed)
    checks = {}

    b1 = driving_region(DrivingParams())
    b2 = driving_region(DrivingParams(g_ratio=1.0))
    checks["driving_region"] = {
        "table_params": b1.to_dict(), "widened": b2.to_dict(),
        "pass": abs(b1.upper + 1.1) <= 1e-12 and abs(b1.lower - (-1.1 - 0.0099 / 0.9)) <= 1e-12
        and abs(b2.lower + 2.2) <= 1e-12 and abs(b2.upper + 1.1) <= 1e-12}

    suite = tl.corollary_suite(rho=rho, n_mc=n_mc, rng=split_rng(rng, "corollary"))
    checks["integral_gaps"] = {**suite, "pass": all(v["pass"] for v in suite.values())
                               and suite["dependent_cross"]["closed_form_pass"]}

    cov = np.array([[1.0, rho], [rho, 1.0]])
    F = tl.QuadraticFunction(np.array([[1.0, -1.5], [-1.5, 2.0]]), np.array([0.3, -0.2]), 1.0)
    P = tl.GaussianSampler(np.array([0.5, -0.5]), cov)
    gv = tl.theorem_gv_check(P, P.lagged(), F, tl.DepStructure([(0, 1)], 2), min(n_mc, 200_000),
                             split_rng(rng, "gv"))
    checks["dependent_part_gap"] = {"lhs": gv.lhs.estimate, "rhs": gv.rhs.estimate, "closed_lhs": gv.closed_lhs,
                                    "closed_rhs": gv.closed_rhs, "pass": bool(gv.agree and gv.closed_agree)}

    q = tl.gaussian_quadratic_expectation(np.ones(2), cov, np.array([[0.0, 1.0], [1.0, 0.0]]))
    checks["gaussian_quadratic_expectation"] = {"value": q, "expected": 2 + 2 * rho,
                                                "pass": abs(q - (2 + 2 * rho)) <= 1e-12}

    mdp = tl.two_bit_mdp(0.6)
    lag = laggedize(mdp)
    ab = tl.alpha_beta(mdp, lag, 0, 0, 1)
    oracle = tl.enumerate_two_bit(0.6, mdp.next_reward)
    o_alpha = oracle[("true", 0)] - oracle[("true", 1)]
    o_beta = oracle[("lagged", 0)] - oracle[("lagged", 1)] - o_alpha
    checks["alpha_beta"] = {"alpha": ab.alpha, "beta": ab.beta, "oracle_alpha": o_alpha, "oracle_beta": o_beta,
                            "pass": abs(ab.alpha - o_alpha) <= 1e-12 and abs(ab.beta - o_beta) <= 1e-12}

    sym = tl.beta_symmetry_check(mdp, lag, 0, 0, 1, rng=split_rng(rng, "symmetry"))
    checks["beta_symmetry"] = sym

    dr = tl.construct_dr_reward(mdp, lag, 0, 0, 1)
    mt, ml = mdp.with_reward(next_reward=dr.next_reward), lag.with_reward(next_reward=dr.next_reward)
    wit = consistency_check(mt, ml, [0])
    pt, pl = value_iteration(mt), value_iteration(ml)
    gap = float(evaluate_policy(mt, pt.policy)[0] - evaluate_policy(mt, pl.policy)[0])
    checks["misranking_reward"] = {"x": dr.x, "interval": dr.interval, "alpha": dr.ab.alpha, "beta": dr.ab.beta,
                                   "witnesses": wit, "return_gap": gap,
                                   "pass": dr.ab.in_dr() and wit == [(0, 0, 1)]
                                   and abs(gap - dr.ab.alpha) <= 1e-12}

    fm = tl.factored_mdp(rng=split_rng(rng, "factored"))
    shape = fm.next_shape()
    sep = tl.verify_beta_zero(fm.with_reward(next_reward=tl.separable_reward(shape, lambda x: x ** 2, lambda y: y)))
    crs = tl.verify_beta_zero(fm.with_reward(next_reward=tl.cross_reward(shape)))
    checks["factored_beta_zero"] = {"separable_max_beta": sep.max_abs_beta, "cross_max_beta": crs.max_abs_beta,
                                    "pass": sep.max_abs_beta < 1e-5 and crs.max_abs_beta > 0.01}

    L = likelihood_loss(GaussianPrediction(np.zeros(2), np.ones(2), CorrelationMatrix(cov)), np.ones(2))
    expect = np.log(1 - rho ** 2) + 2 / (1 + rho) + 2 * np.log(2 * np.pi)
    checks["likelihood_loss"] = {"value": L, "expected": float(expect), "pass": abs(L - expect) <= 1e-12}

    spec = LinearGaussianSpec(np.array([[0.5, 0.3], [0.0, 0.8]]), np.array([[1.0, 0.2], [0.2, 0.5]]), 3)
    comp = {}
    for mode, fn in (("subsample", subsampled_noise_cov), ("aggregate", aggregated_noise_cov)):
        X = simulate_compound_noise(spec, mode, 100_000, split_rng(rng, mode))
        emp = np.cov(X.T)
        exact = fn(spec)
        se = np.sqrt((exact ** 2 + np.outer(np.diag(exact), np.diag(exact))) / len(X))
        comp[mode] = {"exact": exact, "empirical": emp, "pass": bool(np.all(np.abs(emp - exact) <= 5 * se))}
    checks["compound_noise"] = {**comp, "pass": all(v["pass"] for v in comp.values())}

    return {"checks": checks, "all_pass": all(bool(c["pass"]) for c in checks.values()),
            "settings": {"n_mc": n_mc, "rho": rho, "seed": seed}}


def run_theory_report(cfg: ExperimentConfig, output_dir=None) -> dict:
    out = _outdir(cfg, output_dir)
    rep = theory_report(cfg.theory["n_mc"], cfg.theory["rho"], cfg.seeds[0])
    rep["files"] = [write_json(out / "theory_report.json", rep)]
    return rep


RUNNERS = {
    "visual_region": run_visual_region,
    "reward_families": run_reward_families,
    "model_compare": run_model_compare,
    "sweep": run_sweep,
    "theory_report": run_theory_report,
}


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> dict:
    return RUNNERS[cfg.experiment](cfg, output_dir)
