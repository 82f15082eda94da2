"""Command-line experiment runner.

Every command reads one :class:`ExperimentConfig` (JSON file, ``--set``
overrides and a few named flags, applied in that order) and writes its
outputs plus the fully resolved config under ``output_dir``::

    data/       train.npz, holdout.npz, manifest.json
    cache/      per-chunk WMMSE reference cache
    train/      checkpoint.npz, state.npz, history.csv
    eval/       metrics.json, sweep_<axis>.csv, wmmse_traces.csv
    pf/         metrics.json, cdf_<policy>.csv, traces_<policy>.csv
    oracle/     structure.json
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from eqprecoder.config import ConfigError, ExperimentConfig, load_config, version_stamp
from eqprecoder.dataset import (
    generate_dataset, load_npz, save_jsonl, save_npz, wmmse_references,
)
from eqprecoder.net import init_params, load_checkpoint, save_checkpoint
from eqprecoder.oracle import ConstraintFamily, structure_report
from eqprecoder.pf import (
    SWEEP_AXES, _ratio_stats, cdf_percentile, generalization_sweep, make_policy, policy_wsr, rate_cdf,
    run_pf_episodes, write_cdf_csv, write_traces_csv,
)
from eqprecoder.training import (
    TrainingDiverged, finite_difference_check, load_train_state, save_train_state, train,
)
from eqprecoder.wmmse import wmmse_solve, write_trace_csv

log = logging.getLogger("eqprecoder")

EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


# --------------------------------------------------------------------------
# plumbing


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_dir(cfg: ExperimentConfig, name: str) -> str:
    path = os.path.join(cfg.output_dir, name)
    os.makedirs(path, exist_ok=True)
    _write_json(os.path.join(path, "config.resolved.json"), {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seeds": {w: cfg.seed_for(w) for w in ("train", "holdout", "test", "pf", "oracle")} | {"init": cfg.train.seed},
        "version": version_stamp(),
    })
    return path


def _file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _data_key(cfg: ExperimentConfig) -> str:
    parts = {
        "seed": cfg.seed,
        "geometry": dataclasses.asdict(cfg.geometry),
        "scenario": dataclasses.asdict(cfg.scenario),
        "train_samples": cfg.train.num_samples,
        "holdout_samples": cfg.data.holdout_samples,
        "weight_sampling": cfg.train.weight_sampling,
        "write_jsonl": cfg.data.write_jsonl,
    }
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def _make_set(cfg: ExperimentConfig, seed: int, size: int, n=None, k=None, snr=None):
    sc = cfg.scenario
    return generate_dataset(
        seed, size, sc.n if n is None else n, sc.k if k is None else k, cfg.geometry,
        sc.snr_edge_db if snr is None else snr, sc.power_budget, cfg.train.weight_sampling,
    )


def _references(cfg: ExperimentConfig, ds):
    return wmmse_references(ds, cfg.wmmse, os.path.join(cfg.output_dir, "cache", "wmmse"),
                            cfg.data.chunk_size, cfg.jobs)


def ensure_data(cfg: ExperimentConfig):
    """Generate train/holdout sets unless an identical generation is on disk;
    always make sure the holdout references are cached. Returns
    (train, holdout, holdout_references)."""
    folder = os.path.join(cfg.output_dir, "data")
    os.makedirs(folder, exist_ok=True)
    manifest_path = os.path.join(folder, "manifest.json")
    key = _data_key(cfg)
    paths = {"train": os.path.join(folder, "train.npz"), "holdout": os.path.join(folder, "holdout.npz")}
    manifest = None
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    fresh = (manifest is not None and manifest.get("data_key") == key
             and all(os.path.exists(p) and _file_sha256(p) == manifest["datasets"][n]["sha256"]
                     for n, p in paths.items()))
    if fresh:
        log.info("datasets up to date (data key %s)", key)
        sets = {n: load_npz(p) for n, p in paths.items()}
    else:
        t0 = time.perf_counter()
        sets = {
            "train": _make_set(cfg, cfg.seed_for("train"), cfg.train.num_samples),
            "holdout": _make_set(cfg, cfg.seed_for("holdout"), cfg.data.holdout_samples),
        }
        for n, ds in sets.items():
            save_npz(ds, paths[n])
            if cfg.data.write_jsonl:
                save_jsonl(ds, paths[n][:-4] + ".jsonl")
        log.info("generated datasets in %.2fs", time.perf_counter() - t0)
    refs = _references(cfg, sets["holdout"])
    log.info("holdout references: %d chunks computed, %d from cache", refs.computed_chunks, refs.cached_chunks)
    _write_json(manifest_path, {
        "data_key": key,
        "datasets": {
            n: {"file": os.path.basename(paths[n]), "samples": ds.size, "n": ds.n, "k": ds.k,
                "seed": ds.seed, "sha256": _file_sha256(paths[n]), "fingerprint": ds.fingerprint()}
            for n, ds in sets.items()
        },
        "references": {"holdout": {"samples": int(refs.wsr.size), "wmmse": cfg.wmmse.to_dict()}},
    })
    return sets["train"], sets["holdout"], refs


def _load_params(cfg: ExperimentConfig, checkpoint):
    path = checkpoint or os.path.join(cfg.output_dir, "train", "checkpoint.npz")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} not found; run 'train' first or pass --checkpoint")
    params, _ = load_checkpoint(path)
    return params, path


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    _run_dir(cfg, "data")
    train_set, holdout, refs = ensure_data(cfg)
    print(f"train: {train_set.size} samples, holdout: {holdout.size} samples "
          f"(N={train_set.n}, K={train_set.k}); references cached for {refs.wsr.size} samples")
    return 0


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "normalized_wsr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["mean_loss"]), repr(row["normalized_wsr"])])


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _run_dir(cfg, "train")
    train_set, holdout, refs = ensure_data(cfg)
    state_path = os.path.join(out, "state.npz")
    ckpt_path = os.path.join(out, "checkpoint.npz")
    hist_path = os.path.join(out, "history.csv")
    state = None
    if args.resume and os.path.exists(state_path):
        state, meta = load_train_state(state_path)
        if meta.get("config_hash") != cfg.digest():
            raise ConfigError("saved training state was produced by a different config; drop --resume")
        log.info("resuming at epoch %d", state.epoch)
    elif args.resume:
        log.info("no saved state at %s; starting fresh", state_path)

    def checkpoint(st):
        extra = {"config_hash": cfg.digest(), "epoch": st.epoch}
        save_train_state(state_path, st, extra)
        save_checkpoint(ckpt_path, st.params, extra)
        _write_history(hist_path, st.history)

    try:
        state = train(train_set, cfg.train, cfg.net, holdout, refs.wsr, state=state,
                      stop_after=args.stop_after, on_epoch=checkpoint)
    except TrainingDiverged as exc:
        save_checkpoint(os.path.join(out, "last_good.npz"), exc.last_good, {"config_hash": cfg.digest()})
        print(f"training diverged: {exc}; last finite parameters in last_good.npz", file=sys.stderr)
        return EXIT_DIVERGED
    last = state.history[-1] if state.history else None
    if last:
        print(f"epoch {last['epoch']}/{cfg.train.epochs}: mean loss {last['mean_loss']:.6f}, "
              f"held-out normalized WSR {last['normalized_wsr']:.4f}")
    return 0


def _sweep_seed(cfg, axis, value) -> int:
    code = SWEEP_AXES.index(axis)
    return int(np.random.SeedSequence([cfg.seed_for("test"), code, int(round(float(value) * 1000))])
               .generate_state(1)[0])


def _sweep_set(cfg, axis, value):
    size = cfg.data.test_samples
    seed = _sweep_seed(cfg, axis, value)
    if axis == "num_ues":
        return _make_set(cfg, seed, size, k=int(value))
    if axis == "num_antennas":
        return _make_set(cfg, seed, size, n=int(value))
    if axis == "snr":
        return _make_set(cfg, seed, size, snr=float(value))
    raise ConfigError(f"sweep axis {axis!r} needs retraining per point and is not run by eval")


def evaluate(cfg: ExperimentConfig, params, ckpt_path=None) -> dict:
    out = _run_dir(cfg, "eval")
    test = _make_set(cfg, cfg.seed_for("test"), cfg.data.test_samples)
    refs = _references(cfg, test)
    metrics = {
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "version": version_stamp(),
        "checkpoint_sha256": _file_sha256(ckpt_path) if ckpt_path else None,
        "param_count": None if params is None else int(params.flat.size),
        "test": {"samples": test.size, "n": test.n, "k": test.k, "normalized_wsr": {}},
        "sweeps": {},
        "notes": [],
    }
    for name in cfg.eval.policies:
        if name == "network" and params is None:
            metrics["notes"].append("network skipped: no checkpoint")
            continue
        if name.startswith("zf") and test.k > test.n:
            metrics["notes"].append("zf skipped: K > N")
            continue
        ratios = policy_wsr(make_policy(name, params, cfg.wmmse), test) / refs.wsr
        mean, ci = _ratio_stats(ratios)
        metrics["test"]["normalized_wsr"][name] = {"mean": mean, "ci95": ci}
    if cfg.eval.export_wmmse_traces > 0:
        m = min(cfg.eval.export_wmmse_traces, test.size)
        traces = [wmmse_solve(test.H[i], test.alpha[i], test.noise_power[i], test.power_budget[i],
                              cfg.wmmse).objective_trace for i in range(m)]
        write_trace_csv(traces, os.path.join(out, "wmmse_traces.csv"))
    if params is not None:
        for spec in cfg.eval.sweeps:
            res = generalization_sweep(params, spec.axis, spec.values, lambda a, v: _sweep_set(cfg, a, v),
                                       lambda ds: _references(cfg, ds))
            res.write_csv(os.path.join(out, f"sweep_{spec.axis}.csv"))
            metrics["sweeps"][spec.axis] = [
                {"value": v, "mean": mu, "ci95": ci,
                 "baselines": {b: res.baselines[b][i] for b in sorted(res.baselines)}}
                for i, (v, mu, ci) in enumerate(res.points)
            ]
            metrics["notes"].extend(res.notes)
    if cfg.eval.include_pf:
        metrics["pf"] = run_pf(cfg, params)
    _write_json(os.path.join(out, "metrics.json"), metrics)
    return metrics


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    params, path = None, None
    if "network" in cfg.eval.policies or cfg.eval.sweeps:
        params, path = _load_params(cfg, args.checkpoint)
    metrics = evaluate(cfg, params, path)
    for name, val in metrics["test"]["normalized_wsr"].items():
        print(f"{name:>10s}: normalized WSR {val['mean']:.4f} +/- {val['ci95']:.4f}")
    for axis, rows in metrics["sweeps"].items():
        print(f"sweep {axis}: " + ", ".join(f"{r['value']}={r['mean']:.3f}" for r in rows))
    for note in metrics["notes"]:
        print(f"note: {note}")
    return 0


def run_pf(cfg: ExperimentConfig, params) -> dict:
    out = _run_dir(cfg, "pf")
    pc = cfg.pf
    policies = {}
    for name in pc.policies:
        if name.startswith("network") and params is None:
            raise ConfigError("the network policy needs a checkpoint")
        policies[name] = make_policy(name, params, cfg.wmmse)
    t0 = time.perf_counter()
    traces = run_pf_episodes(cfg.seed_for("pf"), pc.episodes, cfg.scenario.n, cfg.scenario.k, policies,
                             cfg.geometry, cfg.scenario.snr_edge_db, cfg.scenario.power_budget,
                             pc.slots, pc.rho, pc.weight_cap)
    log.info("%d PF episodes in %.1fs", pc.episodes, time.perf_counter() - t0)
    summary = {"episodes": pc.episodes, "slots": pc.slots, "rho": pc.rho,
               "cdf_pooling": "per-UE average rates pooled over UEs and episodes", "policies": {}}
    for name, trs in traces.items():
        cdf = rate_cdf(trs)
        write_cdf_csv(cdf, os.path.join(out, f"cdf_{name}.csv"))
        if pc.write_traces:
            write_traces_csv(trs, os.path.join(out, f"traces_{name}.csv"))
        summary["policies"][name] = {
            "p5": cdf_percentile(cdf, 5), "median": cdf_percentile(cdf, 50),
            "mean": float(cdf[:, 0].mean()), "capped_weights": sum(len(t.capped) for t in trs),
        }
    s = summary["policies"]
    if "wmmse" in s and "wmmse_srm" in s:
        summary["p5_wsrm_over_srm"] = s["wmmse"]["p5"] > s["wmmse_srm"]["p5"]
    if "wmmse" in s and "network" in s:
        summary["network_median_offset"] = abs(s["network"]["median"] - s["wmmse"]["median"]) / s["wmmse"]["median"]
    _write_json(os.path.join(out, "metrics.json"), {"config_hash": cfg.digest(), "seed": cfg.seed,
                                                    "version": version_stamp(), **summary})
    return summary


def cmd_pf(cfg: ExperimentConfig, args) -> int:
    params = None
    if any(p.startswith("network") for p in cfg.pf.policies):
        params, _ = _load_params(cfg, args.checkpoint)
    summary = run_pf(cfg, params)
    for name, row in summary["policies"].items():
        print(f"{name:>12s}: p5 {row['p5']:.4f}  median {row['median']:.4f}  mean {row['mean']:.4f}")
    if "p5_wsrm_over_srm" in summary:
        print(f"5th percentile WSRM > SRM: {summary['p5_wsrm_over_srm']}")
    if "network_median_offset" in summary:
        print(f"network median offset vs WSRM-WMMSE: {summary['network_median_offset']:.2%}")
    return 0


def cmd_oracle(cfg: ExperimentConfig, args) -> int:
    out = _run_dir(cfg, "oracle")
    fams = [ConstraintFamily(f.kind, n=f.n, k=f.k, num_group_samples=cfg.oracle.num_group_samples)
            for f in cfg.oracle.families]
    t0 = time.perf_counter()
    rows = structure_report(fams, np.random.default_rng(cfg.seed_for("oracle")))
    log.info("oracle finished in %.2fs", time.perf_counter() - t0)
    _write_json(os.path.join(out, "structure.json"), rows)
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'family':<16s}{'size':<12s}{'dimension':>10s}{'residual':>12s}")
        for r in rows:
            print(f"{r['family']:<16s}{r['size']:<12s}{r['dimension']:>10d}{r['residual']:>12.2e}")
    return 0 if all(r["residual"] < 1e-8 for r in rows) else EXIT_FAILED


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    from eqprecoder.channel import sample_channel

    net_cfg = dataclasses.replace(cfg.net, hidden_channels=args.channels)
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    for point in range(args.points):
        params = init_params(net_cfg, rng)
        params.flat[:] += 0.1 * rng.standard_normal(params.flat.size)
        chans = [sample_channel(rng, args.n, args.k, cfg.geometry, cfg.scenario.snr_edge_db) for _ in range(2)]
        H = np.stack([c.H for c in chans])
        noise = np.array([c.noise_power for c in chans])
        alpha = args.k * rng.dirichlet(np.ones(args.k), size=2)
        rep = finite_difference_check(H, alpha, noise, 1.0, params, step=args.step)
        worst = max(worst, rep.max_rel_err)
        print(f"point {point}: {params.flat.size} parameters, max relative error {rep.max_rel_err:.3e}")
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else EXIT_FAILED


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="JSON experiment config; unknown keys are rejected")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry (value parsed as JSON), repeatable")
    g.add_argument("--out", help="output directory (config: output_dir)")
    g.add_argument("--seed", type=int, help="master seed (config: seed)")
    g.add_argument("--jobs", type=int, help="worker processes for WMMSE batches (default 1, deterministic)")
    g.add_argument("--wmmse-max-iters", type=int, help="WMMSE outer iteration cap")
    g.add_argument("--wmmse-rel-tol", type=float, help="WMMSE relative objective tolerance")
    g.add_argument("--wmmse-bisect-tol", type=float, help="relative power tolerance of the multiplier search")
    g.add_argument("--wmmse-mu-growth", type=float, help="bracket growth factor of the multiplier search")
    g.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")

    p = argparse.ArgumentParser(prog="eqprecoder", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate datasets and cached WMMSE references")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", parents=[common], help="train the network; writes checkpoint and history")
    s.add_argument("--resume", action="store_true", help="continue from train/state.npz if present")
    s.add_argument("--stop-after", type=int, metavar="EPOCHS", help="stop after this many epochs in this call")
    s.add_argument("--epochs", type=int, help="total epochs (config: train.epochs)")
    s.add_argument("--lr", type=float, help="learning rate (config: train.learning_rate)")
    s.add_argument("--batch-size", type=int, help="minibatch size (config: train.batch_size)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="normalized WSR on a test set plus generalization sweeps")
    s.add_argument("--checkpoint", help="checkpoint path (default: <out>/train/checkpoint.npz)")
    s.add_argument("--export-wmmse-traces", type=int, metavar="COUNT",
                   help="write objective traces of the first COUNT test instances")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pf", parents=[common], help="proportional-fairness episodes and rate CDFs")
    s.add_argument("--checkpoint", help="checkpoint path for the network policy")
    s.add_argument("--episodes", type=int, help="number of episodes (config: pf.episodes)")
    s.add_argument("--write-traces", action="store_true", help="also write per-slot traces")
    s.set_defaults(func=cmd_pf)

    s = sub.add_parser("oracle", parents=[common], help="null-space dimensions of the layer constraints")
    s.add_argument("--json", action="store_true", help="print the report as JSON")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the network gradient")
    s.add_argument("--points", type=int, default=3, help="random parameter points")
    s.add_argument("--n", type=int, default=4, help="antennas")
    s.add_argument("--k", type=int, default=3, help="UEs")
    s.add_argument("--channels", type=int, default=2, help="hidden channels of the test model")
    s.add_argument("--step", type=float, default=1e-6, help="central-difference step")
    s.add_argument("--tol", type=float, default=1e-4, help="maximum allowed relative error")
    s.set_defaults(func=cmd_gradcheck)
    return p


_FLAG_KEYS = {
    "out": "output_dir", "seed": "seed", "jobs": "jobs",
    "wmmse_max_iters": "wmmse.max_iters", "wmmse_rel_tol": "wmmse.rel_tol",
    "wmmse_bisect_tol": "wmmse.bisect_tol", "wmmse_mu_growth": "wmmse.mu_growth",
    "epochs": "train.epochs", "lr": "train.learning_rate", "batch_size": "train.batch_size",
    "episodes": "pf.episodes", "export_wmmse_traces": "eval.export_wmmse_traces",
}


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.set)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if getattr(args, "write_traces", False):
        overrides.append("pf.write_traces=true")
    cfg = load_config(args.config, overrides)
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
