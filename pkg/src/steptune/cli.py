"""Command-line entry point: ``steptune <command> [options]``.

Commands: gen-data, pretrain, train-reward, finetune, analyze, compare.
Options may also come from a YAML file (``--config``); keys are the long
option names with dashes or underscores, and explicit flags win over file
values. Every command writes a ``run.json`` manifest echoing its full
effective configuration and derived seeds. Relative output paths resolve
under ``$STEPTUNE_OUT`` when it is set.

Exit status: 0 on success, 1 on a runtime or input error, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import zlib

import numpy as np
import yaml

from . import __version__
from . import autodiff as ad
from .diffusion import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, make_schedule, sample
from .finetune import FineTuner, RecordWriter, StrategyConfig, run_finetune
from .instrument import affine_fit, jacobian_profile, memory_sweep, write_jacobian_csv
from .kernels import BACKEND
from .models import (CheckpointError, Denoiser, LRSchedule, RewardModel, load_checkpoint,
                     save_checkpoint)
from .spl import eval_retrieval, spl_train
from .toymotion import (generate_dataset, load_dataset, nearest_prototype_classify,
                        pretrain_diffusion, pretrain_retrieval, save_dataset)

log = logging.getLogger("steptune")

OUT_ENV = "STEPTUNE_OUT"
MANIFEST = "run.json"
MANIFEST_VERSION = 1

STRATEGY_FLAGS = {
    "easytune": "easytune",
    "easytune-chain": "easytune_chain",
    "full": "full_backprop",
    "draft-k": "draft_k",
    "drtune": "drtune",
    "refl": "refl",
}

DEFAULTS = {
    "gen-data": dict(out="data", classes=8, per_class=256, frames=16, dims=2, noise_scale=0.05,
                     hard_negative=None, hard_negative_gap=0.03, seed=0),
    "pretrain": dict(data="data", out="pretrain", T=DEFAULT_T, beta_start=DEFAULT_BETA_START,
                     beta_end=DEFAULT_BETA_END, hidden=128, time_dim=16, cond_dim=8,
                     steps=10000, lr=1e-3, batch=64, seed=0),
    "train-reward": dict(data="data", out="reward", T=DEFAULT_T, beta_start=DEFAULT_BETA_START,
                         beta_end=DEFAULT_BETA_END, hidden=64, embed_dim=16, time_dim=16,
                         steps=1500, lr=1e-3, batch=32, spl_epochs=0, spl_lr=1e-4,
                         pool="batch", k=10, seed=0),
    "finetune": dict(denoiser="pretrain/denoiser.npz", reward="reward/reward.npz",
                     out="finetune", strategy="easytune", reward_mode="noise_aware",
                     kl_weight=0.0, step_weighting="uniform", weighting_k=20, K=None,
                     random_k=False, step_fraction=1.0, stochastic=False, T=None,
                     updates=200, lr=1e-4, lr_schedule="constant", batch=16, eval_every=10,
                     eval_per_class=8, seed=0),
    "analyze": dict(run=None, T_values="10,25,50", strategies=None, profile_conditions=4,
                    seed=0),
    "compare": dict(runs=None, out="compare", threshold_fraction=0.5),
}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# plumbing

def derive_seed(root, name):
    """Stable 32-bit sub-seed for component ``name`` under ``root``."""
    ss = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])


def out_path(path):
    root = os.environ.get(OUT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config, seeds, inputs=None, outputs=None, metrics=None):
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "steptune_version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {k: {"path": v, "sha256": file_digest(v)} for k, v in (inputs or {}).items()},
        "outputs": sorted(outputs or []),
        "metrics": metrics or {},
    }
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(run_dir):
    path = os.path.join(run_dir, MANIFEST)
    if not os.path.isfile(path):
        raise CliError(f"{run_dir}: missing {MANIFEST} (not a steptune run directory)")
    with open(path) as fh:
        return json.load(fh)


def load_config_file(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise CliError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(f"config {path} must be a mapping of option names to values")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(command, args):
    """Defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        file_cfg = load_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise CliError(f"unknown option(s) in {args.config}: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS[command]:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _require(path, what):
    if not os.path.exists(path):
        raise CliError(f"missing {what}: {path}")
    return path


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _schedule_from(cfg):
    return make_schedule(int(cfg["T"]), float(cfg["beta_start"]), float(cfg["beta_end"]))


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg):
    out = out_path(cfg["out"])
    hn = cfg["hard_negative"]
    if isinstance(hn, str):
        hn = [int(v) for v in hn.split(",")]
    seeds = {"data": derive_seed(cfg["seed"], "data")}
    ds = generate_dataset(C=int(cfg["classes"]), per_class=int(cfg["per_class"]),
                          L=int(cfg["frames"]), d=int(cfg["dims"]),
                          noise_scale=float(cfg["noise_scale"]), seed=seeds["data"],
                          hard_negative=tuple(hn) if hn else None,
                          hard_negative_gap=float(cfg["hard_negative_gap"]))
    save_dataset(ds, out)
    files = ["train.csv", "val.csv", "test.csv", "manifest.json"]
    write_manifest(out, "gen-data", cfg, seeds, outputs=files,
                   metrics={k: len(v) for k, v in ds.splits.items()})
    return out


def cmd_pretrain(cfg):
    data = _require(out_path(cfg["data"]), "dataset directory")
    out = out_path(cfg["out"])
    os.makedirs(out, exist_ok=True)
    ds = load_dataset(data)
    sch = _schedule_from(cfg)
    seeds = {k: derive_seed(cfg["seed"], k) for k in ("denoiser_init", "pretrain", "eval")}
    den = Denoiser(ds.motion_dim, ds.n_conditions, hidden=int(cfg["hidden"]),
                   time_dim=int(cfg["time_dim"]), cond_dim=int(cfg["cond_dim"]),
                   seed=seeds["denoiser_init"])
    trace = pretrain_diffusion(den, ds, sch, steps=int(cfg["steps"]), seed=seeds["pretrain"],
                               batch=int(cfg["batch"]), lr=float(cfg["lr"]))
    schedule = dict(T=int(cfg["T"]), beta_start=float(cfg["beta_start"]),
                    beta_end=float(cfg["beta_end"]))
    save_checkpoint(os.path.join(out, "denoiser.npz"), den, extra={"schedule": schedule})
    _write_rows(os.path.join(out, "metrics.csv"), ("step", "loss"),
                [(k, repr(v)) for k, v in trace])
    conds = np.repeat(np.arange(ds.n_conditions), 16)
    x0 = sample(den, conds, sch, seed=seeds["eval"])
    acc = float(np.mean(nearest_prototype_classify(ds, x0) == conds))
    write_manifest(out, "pretrain", cfg, seeds, inputs={"data": os.path.join(data, "manifest.json")},
                   outputs=["denoiser.npz", "metrics.csv"],
                   metrics={"final_loss": trace[-1][1], "sample_class_accuracy": acc})
    return out


def cmd_train_reward(cfg):
    data = _require(out_path(cfg["data"]), "dataset directory")
    out = out_path(cfg["out"])
    os.makedirs(out, exist_ok=True)
    ds = load_dataset(data)
    sch = _schedule_from(cfg)
    seeds = {k: derive_seed(cfg["seed"], k) for k in ("reward_init", "reward_train", "spl", "eval")}
    model = RewardModel(ds.motion_dim, ds.n_conditions, hidden=int(cfg["hidden"]),
                        embed_dim=int(cfg["embed_dim"]), time_dim=int(cfg["time_dim"]),
                        seed=seeds["reward_init"])
    trace = pretrain_retrieval(model, ds, steps=int(cfg["steps"]), seed=seeds["reward_train"],
                               batch=int(cfg["batch"]), lr=float(cfg["lr"]), schedule=sch)
    rows = [(s, repr(l), r["t2m"][1], r["t2m"][2], r["t2m"][3]) for s, l, r in trace]
    _write_rows(os.path.join(out, "metrics.csv"), ("step", "loss", "R@1", "R@2", "R@3"), rows)
    outputs = ["reward.npz", "metrics.csv"]
    eval_batch = min(32, len(ds.val))
    before = eval_retrieval(model, ds.val.X, ds.val.y, batch_size=eval_batch, seed=seeds["eval"])
    metrics = {"val_R@1_contrastive": before["t2m"][1]}
    if int(cfg["spl_epochs"]) > 0:
        hist = spl_train(model, ds, pool_policy=cfg["pool"], k=int(cfg["k"]),
                         epochs=int(cfg["spl_epochs"]), seed=seeds["spl"], lr=float(cfg["spl_lr"]),
                         schedule=sch, eval_batch=eval_batch)
        keys = ("epoch", "failure_ratio", "mean_spl_loss", "R@1", "R@2", "R@3")
        _write_rows(os.path.join(out, "spl.csv"), keys, [[h[k] for k in keys] for h in hist])
        outputs.append("spl.csv")
        after = eval_retrieval(model, ds.val.X, ds.val.y, batch_size=eval_batch,
                               seed=seeds["eval"])
        metrics["val_R@1_spl"] = after["t2m"][1]
    save_checkpoint(os.path.join(out, "reward.npz"), model,
                    extra={"schedule": dict(T=int(cfg["T"]), beta_start=float(cfg["beta_start"]),
                                            beta_end=float(cfg["beta_end"]))})
    write_manifest(out, "train-reward", cfg, seeds,
                   inputs={"data": os.path.join(data, "manifest.json")}, outputs=outputs,
                   metrics=metrics)
    return out


def _load_models(cfg):
    den_path = _require(out_path(cfg["denoiser"]), "denoiser checkpoint")
    rew_path = _require(out_path(cfg["reward"]), "reward checkpoint")
    den, den_meta = load_checkpoint(den_path, expect_kind="denoiser")
    rew, _ = load_checkpoint(rew_path, expect_kind="reward",
                             expect_config={"motion_dim": den.motion_dim,
                                            "n_conditions": den.n_conditions})
    return den, den_meta, rew, den_path, rew_path


def _finetune_schedule(cfg, den_meta):
    sched = dict(den_meta.get("extra", {}).get("schedule") or
                 dict(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END))
    if cfg.get("T") is not None and int(cfg["T"]) != sched["T"]:
        log.warning("overriding the checkpoint's T=%d with T=%d", sched["T"], int(cfg["T"]))
        sched["T"] = int(cfg["T"])
    return sched


def cmd_finetune(cfg):
    out = out_path(cfg["out"])
    den, den_meta, rew, den_path, rew_path = _load_models(cfg)
    sched = _finetune_schedule(cfg, den_meta)
    sch = _schedule_from(sched)
    kind = STRATEGY_FLAGS.get(cfg["strategy"], cfg["strategy"])
    scfg = StrategyConfig(kind=kind, reward_mode=cfg["reward_mode"],
                          kl_weight=float(cfg["kl_weight"]), step_weighting=cfg["step_weighting"],
                          weighting_k=int(cfg["weighting_k"]),
                          K=None if cfg["K"] is None else int(cfg["K"]),
                          random_k=bool(cfg["random_k"]), step_fraction=float(cfg["step_fraction"]),
                          stochastic=bool(cfg["stochastic"]))
    os.makedirs(out, exist_ok=True)
    seeds = {k: derive_seed(cfg["seed"], k) for k in ("finetune", "eval")}
    lr = LRSchedule(cfg["lr_schedule"], float(cfg["lr"]))
    tuner = FineTuner(den, rew, sch, scfg, lr=lr, batch=int(cfg["batch"]))
    eval_conds = np.repeat(np.arange(den.n_conditions), int(cfg["eval_per_class"]))
    n = int(cfg["updates"])
    half = n // 2
    saved_mid = []

    def keep_mid(rec):
        if n >= 2 and rec.iteration == half - 1:
            save_checkpoint(os.path.join(out, "denoiser_mid.npz"), den,
                            extra={"schedule": sched, "iteration": half})
            saved_mid.append(True)

    with RecordWriter(os.path.join(out, "updates.csv")) as writer:
        records, trace = run_finetune(tuner, n, seed=seeds["finetune"], eval_conds=eval_conds,
                                      eval_seed=seeds["eval"], eval_every=int(cfg["eval_every"]),
                                      writer=writer, callback=keep_mid)
    save_checkpoint(os.path.join(out, "denoiser.npz"), den,
                    extra={"schedule": sched, "iteration": n})
    _write_rows(os.path.join(out, "eval.csv"), ("update", "optimizer_millis", "reward"),
                [(i, f"{ms:.3f}", repr(r)) for i, ms, r in trace])
    outputs = ["denoiser.npz", "updates.csv", "eval.csv"] + (["denoiser_mid.npz"] if saved_mid else [])
    flagged = sum(r.flagged for r in records)
    metrics = {
        "baseline_reward": trace[0][2],
        "final_reward": trace[-1][2],
        "peak_retained_nodes": max((r.peak.retained_nodes for r in records), default=0),
        "peak_retained_elements": max((r.peak.retained_elements for r in records), default=0),
        "optimizer_steps": sum(r.optimizer_steps for r in records),
        "flagged_updates": flagged,
    }
    write_manifest(out, "finetune", dict(cfg, strategy=kind, schedule=sched), seeds,
                   inputs={"denoiser": den_path, "reward": rew_path}, outputs=outputs,
                   metrics=metrics)
    return out


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_analyze(cfg):
    if cfg["run"] is None:
        raise CliError("analyze needs --run")
    run = out_path(cfg["run"])
    if not os.path.isdir(run):
        raise CliError(f"run directory not found: {run}")
    problems = [f"{run}: missing {f}" for f in (MANIFEST, "updates.csv", "denoiser.npz")
                if not os.path.isfile(os.path.join(run, f))]
    if problems:
        raise CliError("\n".join(problems))
    manifest = read_manifest(run)
    if manifest.get("command") != "finetune":
        raise CliError(f"{run}: analyze expects a finetune run, found {manifest.get('command')!r}")
    rcfg = manifest["config"]
    for key in ("denoiser", "reward"):
        _require(manifest["inputs"][key]["path"], f"{key} checkpoint referenced by {run}")
    pre, _ = load_checkpoint(manifest["inputs"]["denoiser"]["path"], expect_kind="denoiser")
    rew, _ = load_checkpoint(manifest["inputs"]["reward"]["path"], expect_kind="reward")
    sch = _schedule_from(rcfg["schedule"])
    T_values = [int(v) for v in str(cfg["T_values"]).split(",")]
    strategies = cfg["strategies"]
    if strategies is None:
        label = rcfg["strategy"]
        if label == "draft_k":
            label = f"draft_k:{rcfg['K']}"
        strategies = [label]
    elif isinstance(strategies, str):
        strategies = [STRATEGY_FLAGS.get(s, s) for s in strategies.split(",")]
    sweep = memory_sweep(strategies, T_values, pre, rew, seed=derive_seed(cfg["seed"], "memory"))
    sweep.write_csv(os.path.join(run, "memory.csv"))
    laws = {}
    for label in strategies:
        nodes = sweep.nodes(STRATEGY_FLAGS.get(label, label) if ":" not in label else label)
        if not nodes:
            continue
        Ts = sorted(nodes)
        vals = [nodes[T] for T in Ts]
        entry = {"nodes": {str(T): nodes[T] for T in Ts}, "constant": len(set(vals)) == 1}
        if len(Ts) >= 2:
            a, b, r2 = affine_fit(Ts, vals)
            entry.update(intercept=a, slope=b, r2=r2)
        laws[label] = entry
    # Jacobian profiles at 0%, 50% and 100% of fine-tuning
    checkpoints = [(0, pre)]
    mid = os.path.join(run, "denoiser_mid.npz")
    if os.path.isfile(mid):
        m, meta = load_checkpoint(mid, expect_kind="denoiser")
        checkpoints.append((meta["extra"]["iteration"], m))
    fin, meta = load_checkpoint(os.path.join(run, "denoiser.npz"), expect_kind="denoiser")
    checkpoints.append((meta["extra"]["iteration"], fin))
    n_prof = int(cfg["profile_conditions"])
    reports, jac_summary = [], {}
    for it, model in checkpoints:
        reps = [jacobian_profile(model, [c % model.n_conditions], sch,
                                 seed=derive_seed(cfg["seed"], f"profile{c}"), iteration=it)
                for c in range(n_prof)]
        reports.extend(reps)
        cum = np.mean([r.cumulative_norms for r in reps], axis=0)
        jac_summary[str(it)] = {"cumulative_t1": float(cum[0]),
                                "cumulative_tTminus1": float(cum[-2] if len(cum) > 1 else cum[0])}
    write_jacobian_csv(os.path.join(run, "jacobian.csv"), reports)
    # descent trace from the logged updates
    rows = [r for r in _read_csv(os.path.join(run, "updates.csv")) if r["t"] == "final"]
    lr = LRSchedule(rcfg["lr_schedule"], float(rcfg["lr"]))
    desc = [(int(r["iter"]), lr(int(r["iter"])), float(r["loss"]), float(r["grad_norm"]))
            for r in rows]
    _write_rows(os.path.join(run, "descent.csv"), ("iter", "eta", "loss", "grad_norm"),
                [(i, repr(e), repr(l), repr(g)) for i, e, l, g in desc])
    verdict = None
    if len(desc) >= 4:
        q = len(desc) // 4
        L = np.array([d[2] for d in desc])
        G = np.array([d[3] for d in desc])
        verdict = {"loss_nonincreasing": bool(L[-q:].mean() <= L[:q].mean()),
                   "grad_min_nonincreasing": bool(G[-q:].min() <= G[:q].min())}
    analysis = {"memory": laws, "jacobian": jac_summary, "descent": verdict,
                "config": cfg, "run": run}
    with open(os.path.join(run, "analysis.json"), "w") as fh:
        json.dump(analysis, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run


def cmd_compare(cfg):
    runs = cfg["runs"]
    if not runs:
        raise CliError("compare needs at least one --runs directory")
    if isinstance(runs, str):
        runs = runs.split(",")
    runs = [out_path(r) for r in runs]
    problems = []
    for r in runs:
        for f in (MANIFEST, "eval.csv"):
            if not os.path.isfile(os.path.join(r, f)):
                problems.append(f"{r}: missing {f}")
    if problems:
        raise CliError("\n".join(problems))
    entries = []
    for r in runs:
        man = read_manifest(r)
        ev = _read_csv(os.path.join(r, "eval.csv"))
        if not ev:
            raise CliError(f"{r}: eval.csv is empty")
        entries.append({
            "run": r,
            "strategy": man["config"]["strategy"],
            "updates": [int(e["update"]) for e in ev],
            "millis": [float(e["optimizer_millis"]) for e in ev],
            "reward": [float(e["reward"]) for e in ev],
            "peak_nodes": man["metrics"].get("peak_retained_nodes"),
        })
    baseline = float(np.mean([e["reward"][0] for e in entries]))
    ref = [e for e in entries if e["strategy"] == "full_backprop"]
    gains = [e["reward"][-1] - e["reward"][0] for e in (ref or entries)]
    threshold = baseline + float(cfg["threshold_fraction"]) * max(gains)
    rows = []
    for e in entries:
        hit = next((i for i, r in enumerate(e["reward"]) if r >= threshold), None)
        rows.append({
            "strategy": e["strategy"],
            "run": e["run"],
            "baseline_reward": e["reward"][0],
            "final_reward": e["reward"][-1],
            "improvement": e["reward"][-1] - e["reward"][0],
            "updates_to_threshold": None if hit is None else e["updates"][hit],
            "millis_to_threshold": None if hit is None else e["millis"][hit],
            "peak_nodes": e["peak_nodes"],
        })
    out = out_path(cfg["out"])
    os.makedirs(out, exist_ok=True)
    cols = list(rows[0])
    _write_rows(os.path.join(out, "compare.csv"), cols,
                [["" if row[c] is None else row[c] for c in cols] for row in rows])
    with open(os.path.join(out, "compare.json"), "w") as fh:
        json.dump({"threshold": threshold, "baseline": baseline, "rows": rows}, fh, indent=2)
        fh.write("\n")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-reward": cmd_train_reward,
    "finetune": cmd_finetune,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------------------
# argument parsing

def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="steptune", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"steptune {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the toy motion dataset")
    _flag(p, "out", help="dataset directory (created if missing)")
    _flag(p, "classes", type=int)
    _flag(p, "per_class", type=int)
    _flag(p, "frames", type=int)
    _flag(p, "dims", type=int)
    _flag(p, "noise_scale", type=float)
    _flag(p, "hard_negative", help="'a,b': class b becomes a near copy of class a")
    _flag(p, "hard_negative_gap", type=float)

    p = sub.add_parser("pretrain", help="train the denoiser")
    _flag(p, "data")
    _flag(p, "out")
    for n in ("T", "hidden", "time_dim", "cond_dim", "steps", "batch"):
        _flag(p, n, type=int)
    for n in ("beta_start", "beta_end", "lr"):
        _flag(p, n, type=float)

    p = sub.add_parser("train-reward", help="contrastive reward pretraining, optional SPL")
    _flag(p, "data")
    _flag(p, "out")
    for n in ("T", "hidden", "embed_dim", "time_dim", "steps", "batch", "spl_epochs", "k"):
        _flag(p, n, type=int)
    for n in ("beta_start", "beta_end", "lr", "spl_lr"):
        _flag(p, n, type=float)
    _flag(p, "pool", choices=("batch", "full", "fixed"))

    p = sub.add_parser("finetune", help="reward fine-tuning of a pretrained denoiser")
    _flag(p, "denoiser")
    _flag(p, "reward")
    _flag(p, "out")
    _flag(p, "strategy", choices=sorted(STRATEGY_FLAGS))
    _flag(p, "reward_mode", choices=("noise_aware", "one_step"))
    _flag(p, "kl_weight", type=float)
    _flag(p, "step_weighting", choices=("uniform", "last_k", "first_k", "linear_increasing",
                                        "linear_decreasing"))
    _flag(p, "weighting_k", type=int)
    p.add_argument("--K", dest="K", type=int, default=None, help="draft-k truncation depth")
    p.add_argument("--random-k", dest="random_k", action="store_const", const=True, default=None)
    p.add_argument("--stochastic", dest="stochastic", action="store_const", const=True,
                   default=None)
    _flag(p, "step_fraction", type=float)
    for n in ("T", "updates", "batch", "eval_every", "eval_per_class"):
        _flag(p, n, type=int)
    _flag(p, "lr", type=float)
    _flag(p, "lr_schedule", choices=("constant", "inverse"))

    p = sub.add_parser("analyze", help="memory sweep, Jacobian profile, descent trace")
    _flag(p, "run")
    _flag(p, "T_values", help="comma-separated T values for the memory sweep")
    _flag(p, "strategies", help="comma-separated strategies to sweep (default: the run's)")
    _flag(p, "profile_conditions", type=int)

    p = sub.add_parser("compare", help="cross-run comparison table")
    p.add_argument("--runs", dest="runs", nargs="+", default=None)
    _flag(p, "out")
    _flag(p, "threshold_fraction", type=float)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", default=None, help="YAML file of option values")
        if "seed" in DEFAULTS[name]:
            _flag(sp, "seed", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernel backend: %s", BACKEND)
    try:
        cfg = resolve(args.command, args)
        out = COMMANDS[args.command](cfg)
    except (CliError, CheckpointError, ad.NonFiniteError, OSError, ValueError,
            RuntimeError) as exc:
        print(f"steptune {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
