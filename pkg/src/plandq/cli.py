"""Command-line entry point: gen-data / train / eval / analyze.

Configs are TOML; flags override config values and the resolved config is
echoed into the output directory.  Exit codes: 0 ok, 2 config error,
3 numeric divergence, 4 missing artifact.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import analysis, conductor as cond_mod, performer as perf_mod
from .data import load_dataset, save_dataset
from .envs import env_from_config, scripted_collect
from .orchestrator import (FlatDiffuserAgent, FlatQAgent, build_agent,
                           compute_reference_scores, evaluate)

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4

KNOWN_TABLES = {
    "env": {"kind", "bounds", "walls", "goal", "goal_radius", "max_speed",
            "episode_len", "reward_mode"},
    "dataset": {"path", "policy", "episodes", "seed", "exclusion_radius"},
    "conductor": {"kind", "K", "H", "M", "omega", "augmented", "steps",
                  "batch_size", "hidden", "lr", "gamma", "alpha", "eta",
                  "M_policy"},
    "performer": {"kind", "K", "M", "alpha", "gamma", "M_policy", "eta",
                  "reward_mode", "steps", "batch_size", "hidden", "lr",
                  "p_geom", "goal_mode"},
    "orchestrator": {"variant", "replan_every", "episodes", "goal_inpaint"},
    "run": {"seeds", "out"},
}


class ConfigError(Exception):
    pass


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        cfg = tomllib.load(f)
    unknown = set(cfg) - set(KNOWN_TABLES)
    if unknown:
        raise ConfigError(f"unknown config tables: {sorted(unknown)}")
    for table, keys in cfg.items():
        bad = set(keys) - KNOWN_TABLES[table]
        if bad:
            raise ConfigError(f"unknown keys in [{table}]: {sorted(bad)}")
    return cfg


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)


def write_loss_csv(history, path):
    with open(path, "w", newline="") as f:
        if history:
            w = csv.DictWriter(f, fieldnames=list(history[0].keys()))
            w.writeheader()
            w.writerows(history)


def cmd_gen_data(args):
    cfg = load_config(args.config)
    ds = dict(cfg.get("dataset", {}))
    if args.episodes is not None:
        ds["episodes"] = args.episodes
    if args.seed is not None:
        ds["seed"] = args.seed
    episodes = ds.get("episodes", 0)
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    env = env_from_config(cfg.get("env", {}))
    policy = ds.get("policy", "random_goal_avoider")
    seed = ds.get("seed", 0)
    excl = ds.get("exclusion_radius", 2.0)
    trajs = scripted_collect(env, policy, episodes, seed,
                             exclusion_radius=excl)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, ds.get("path", "dataset.bin"))
    save_dataset(trajs, path)
    sidecar = {"policy": policy, "episodes": episodes, "seed": seed,
               "exclusion_radius": excl, "env": cfg.get("env", {})}
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    echo_config(cfg, args.out)
    print(f"wrote {path} ({len(trajs)} episodes)")
    return 0


def _dataset_path(cfg, args):
    ds = cfg.get("dataset", {})
    path = args.dataset or os.path.join(args.out, ds.get("path", "dataset.bin"))
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    return path


def cmd_train(args):
    cfg = load_config(args.config)
    dataset = load_dataset(_dataset_path(cfg, args))
    seed = args.seed if args.seed is not None else 0
    os.makedirs(args.out, exist_ok=True)
    echo_config(cfg, args.out)
    wrote = []
    if args.component in ("conductor", "both"):
        ccfg = dict(cfg.get("conductor", {}))
        kind = ccfg.pop("kind", "dconductor")
        if kind == "dconductor":
            model, hist = cond_mod.train_dconductor(dataset, ccfg, seed=seed)
            path = os.path.join(args.out, f"conductor_seed{seed}.ckpt")
            cond_mod.save_dconductor(model, path)
        elif kind == "qconductor":
            model, hist = cond_mod.train_qconductor(dataset, ccfg, seed=seed)
            path = os.path.join(args.out, f"conductor_seed{seed}.ckpt")
            cond_mod.save_qconductor(model, path)
        else:
            raise ConfigError(f"unknown conductor kind {kind!r}")
        write_loss_csv(hist, os.path.join(args.out, f"conductor_loss_seed{seed}.csv"))
        wrote.append(path)
    if args.component in ("performer", "both"):
        pcfg = dict(cfg.get("performer", {}))
        kind = pcfg.pop("kind", "qperformer")
        if kind == "qperformer":
            model, hist = perf_mod.train_qperformer(dataset, pcfg, seed=seed)
            path = os.path.join(args.out, f"performer_seed{seed}.ckpt")
            perf_mod.save_qperformer(model, path)
        elif kind == "dperformer":
            model, hist = perf_mod.train_dperformer(dataset, pcfg, seed=seed)
            path = os.path.join(args.out, f"performer_seed{seed}.ckpt")
            perf_mod.save_dperformer(model, path)
        else:
            raise ConfigError(f"unknown performer kind {kind!r}")
        write_loss_csv(hist, os.path.join(args.out, f"performer_loss_seed{seed}.csv"))
        wrote.append(path)
    for p in wrote:
        print(f"wrote {p}")
    return 0


def _load_conductor(path):
    from .nets import load_arrays
    meta, _ = load_arrays(path)
    if meta["kind"] == "dconductor":
        return cond_mod.load_dconductor(path)
    if meta["kind"] == "qconductor":
        return cond_mod.load_qconductor(path)
    raise ValueError(f"not a conductor checkpoint: {path}")


def _load_performer(path):
    from .nets import load_arrays
    meta, _ = load_arrays(path)
    if meta["kind"] == "qperformer":
        return perf_mod.load_qperformer(path)
    if meta["kind"] == "dperformer":
        return perf_mod.load_dperformer(path)
    raise ValueError(f"not a performer checkpoint: {path}")


def cmd_eval(args):
    cfg = load_config(args.config)
    env = env_from_config(cfg.get("env", {}))
    orch = cfg.get("orchestrator", {})
    variant = args.variant or orch.get("variant", "PlanDQ")
    episodes = args.episodes or orch.get("episodes", 20)
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else cfg.get("run", {}).get("seeds", [0]))
    os.makedirs(args.out, exist_ok=True)
    echo_config(cfg, args.out)
    refs = compute_reference_scores(env, seed=12345)
    summaries = []
    for seed in seeds:
        cpath = os.path.join(args.out, f"conductor_seed{seed}.ckpt")
        ppath = os.path.join(args.out, f"performer_seed{seed}.ckpt")
        for p in (cpath, ppath):
            if not os.path.exists(p):
                raise FileNotFoundError(f"missing checkpoint: {p}")
        conductor = _load_conductor(cpath)
        performer = _load_performer(ppath)
        goal = env.goal_state if orch.get("goal_inpaint", False) else None
        agent = build_agent(variant, conductor, performer,
                            replan_every=orch.get("replan_every"),
                            goal_state=goal)
        report = evaluate(agent, env, episodes, seed, refs=refs)
        report.write_csv(os.path.join(args.out, f"eval_{variant}_seed{seed}.csv"))
        summaries.append({"seed": seed, **report.summary()})
    agg = {
        "variant": variant,
        "per_seed": summaries,
        "mean_normalized_score": float(np.mean(
            [s["normalized_score"] for s in summaries])),
        "mean_success_rate": float(np.mean(
            [s["success_rate"] for s in summaries])),
    }
    with open(os.path.join(args.out, f"eval_{variant}_aggregate.json"), "w") as f:
        json.dump(agg, f, indent=2)
    print(json.dumps(agg["per_seed"], indent=2))
    print(f"mean normalized score: {agg['mean_normalized_score']:.2f}")
    return 0


def cmd_analyze(args):
    os.makedirs(args.out, exist_ok=True)
    if args.mode == "example1":
        return _analyze_example1(args)
    cfg = load_config(args.config) if args.config else {}
    if args.mode == "valuemap":
        return _analyze_valuemap(args, cfg)
    if args.mode == "ablate-rewards":
        return _analyze_sweep(args, cfg, "reward_mode",
                              ["both", "intr_only", "ext_only"])
    if args.mode == "ablate-k":
        return _analyze_sweep(args, cfg, "K", [2, 4, 8])
    if args.mode == "ablate-variants":
        return _analyze_variants(args, cfg)
    raise ConfigError(f"unknown analyze mode {args.mode!r}")


def _analyze_example1(args):
    rows = []
    ratios = np.linspace(0.5, 4.0, 5)
    for n1 in range(1, 21):
        for n2 in range(1, 21):
            for g1 in ratios:
                for g2 in ratios:
                    inst = analysis.Example1Instance(n1, n2, g1, g2)
                    p1, p2 = analysis.example1_diffuser_policy(inst)
                    rows.append({
                        "n1": n1, "n2": n2, "g1": g1, "g2": g2,
                        "diffuser_argmax": "b1" if p1 > p2 else "b2",
                        "predicted_argmax":
                            "b1" if n1 * g1 > n2 * g2 else "b2",
                        "q_action": analysis.example1_q_policy(inst),
                        "flip_threshold":
                            analysis.example1_flip_threshold(g1, g2),
                    })
    files = analysis.emit_report({"example1_grid": rows}, args.out)
    mismatches = sum(r["diffuser_argmax"] != r["predicted_argmax"]
                     for r in rows)
    print(f"wrote {files}; argmax mismatches: {mismatches}/{len(rows)}")
    return 0


def _analyze_valuemap(args, cfg):
    env = env_from_config(cfg.get("env", {}))
    if not (args.qperformer and args.diffuser):
        raise FileNotFoundError("valuemap needs --qperformer and --diffuser "
                                "checkpoints")
    qp = perf_mod.load_qperformer(args.qperformer)
    dc = cond_mod.load_dconductor(args.diffuser)
    res = args.resolution
    oracle = analysis.extract_value_grid("optimal_oracle", env, res)
    qgrid = analysis.extract_value_grid("q_critic", env, res, model=qp)
    ggrid = analysis.extract_value_grid("diffuser_guidance", env, res, model=dc)
    stats = [{
        "q_critic_spearman": analysis.spearman(qgrid.values, oracle.values),
        "diffuser_spearman": analysis.spearman(ggrid.values, oracle.values),
    }]
    files = analysis.emit_report({
        "valuemap_oracle": oracle, "valuemap_q_critic": qgrid,
        "valuemap_diffuser_guidance": ggrid, "valuemap_spearman": stats,
    }, args.out)
    print(f"wrote {files}\n{json.dumps(stats[0], indent=2)}")
    return 0


def _analyze_sweep(args, cfg, key, values):
    env = env_from_config(cfg.get("env", {}))
    dataset = load_dataset(_dataset_path(cfg, args))
    orch = cfg.get("orchestrator", {})
    refs = compute_reference_scores(env, seed=12345)
    seeds = cfg.get("run", {}).get("seeds", [0])
    rows = []
    for value in values:
        for seed in seeds:
            ccfg = dict(cfg.get("conductor", {}))
            pcfg = dict(cfg.get("performer", {}))
            ccfg.pop("kind", None)
            pcfg.pop("kind", None)
            if key == "K":
                ccfg["K"] = pcfg["K"] = value
            else:
                pcfg[key] = value
            dc, _ = cond_mod.train_dconductor(dataset, ccfg, seed=seed)
            qp, _ = perf_mod.train_qperformer(dataset, pcfg, seed=seed)
            goal = env.goal_state if orch.get("goal_inpaint", False) else None
            agent = build_agent("PlanDQ", dc, qp,
                                replan_every=orch.get("replan_every"),
                                goal_state=goal)
            rep = evaluate(agent, env, orch.get("episodes", 10), seed,
                           refs=refs)
            rows.append({key: value, "seed": seed,
                         "normalized_score": rep.normalized_score,
                         "success_rate": rep.success_rate})
    files = analysis.emit_report({f"ablate_{key}": rows}, args.out)
    print(f"wrote {files}")
    return 0


def _analyze_variants(args, cfg):
    env = env_from_config(cfg.get("env", {}))
    dataset = load_dataset(_dataset_path(cfg, args))
    orch = cfg.get("orchestrator", {})
    refs = compute_reference_scores(env, seed=12345)
    seeds = cfg.get("run", {}).get("seeds", [0])
    rows = []
    for seed in seeds:
        ccfg = dict(cfg.get("conductor", {}))
        pcfg = dict(cfg.get("performer", {}))
        ccfg.pop("kind", None)
        pcfg.pop("kind", None)
        dc, _ = cond_mod.train_dconductor(dataset, ccfg, seed=seed)
        qc, _ = cond_mod.train_qconductor(dataset, ccfg, seed=seed)
        qp, _ = perf_mod.train_qperformer(dataset, pcfg, seed=seed)
        dp, _ = perf_mod.train_dperformer(dataset, pcfg, seed=seed)
        pairs = {"PlanDQ": (dc, qp), "PlanDD": (dc, dp),
                 "PlanQD": (qc, dp), "PlanQQ": (qc, qp)}
        goal = env.goal_state if orch.get("goal_inpaint", False) else None
        for variant, (c, p) in pairs.items():
            agent = build_agent(variant, c, p,
                                replan_every=orch.get("replan_every"),
                                goal_state=goal if variant.startswith("PlanD")
                                else None)
            rep = evaluate(agent, env, orch.get("episodes", 10), seed,
                           refs=refs)
            rows.append({"variant": variant, "seed": seed,
                         "normalized_score": rep.normalized_score,
                         "success_rate": rep.success_rate})
    files = analysis.emit_report({"ablate_variants": rows}, args.out)
    print(f"wrote {files}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="plandq")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train conductor and/or performer")
    t.add_argument("--config", required=True)
    t.add_argument("--component", choices=["conductor", "performer", "both"],
                   default="both")
    t.add_argument("--dataset")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a hierarchical agent")
    e.add_argument("--config", required=True)
    e.add_argument("--variant")
    e.add_argument("--episodes", type=int)
    e.add_argument("--seeds")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="run an analysis sweep")
    a.add_argument("--mode", required=True,
                   choices=["example1", "valuemap", "ablate-rewards",
                            "ablate-k", "ablate-variants"])
    a.add_argument("--config")
    a.add_argument("--dataset")
    a.add_argument("--qperformer")
    a.add_argument("--diffuser")
    a.add_argument("--resolution", type=int, default=20)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
