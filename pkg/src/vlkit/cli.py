"""Command-line entry point: ``vlkit <command> [flags]``.

Every command reads ``key = value`` config (``--config``), lets matching flags
override it, writes ``metrics.jsonl``, ``summary.txt`` and checkpoints under
``--out`` and exits 0 iff its assertions hold.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checkpoint, datapipe, experiments, gradsuite, muon, niah, rl_mirror, training

GRAD_TOL = 1e-3

DEFAULTS = {
    "gradcheck": {"seeds": 1, "eps": 1e-3, "max_coords": 6},
    "train-vit": {"steps": 500, "n_examples": 64, "d": 64, "n_blocks": 2, "lr": 0.01, "fallback_lr": 0.02,
                  "target_ratio": 0.2},
    "train-vlm": {"steps": 120, "n_examples": 32, "stage1_lr": (0.01, 0.001), "stage2_lr": (0.005, 0.0005),
                  "stage1_fraction": 0.5, "decay": "linear", "fallback_scale": 2.0, "batch": 8},
    "extend-ctx": {"base_steps": 300, "sub_steps": 240, "eval_trials": 20, "lr": 0.01, "fallback_lr": 0.02,
                   "min_recall": 0.9, "control_max": 0.5},
    "niah": {"model": "oracle", "trials": 20, "modality": "text"},
    "rl": {"tau": 0.1, "control_tau": 1e6, "n_seeds": 20, "iterations": 100, "group": 16, "batch_prompts": 8,
           "strategy": "uniform", "target": 0.9, "control_band": 0.05},
    "muon-bench": {"lr": 0.3, "mu": 0.95, "wd": 0.0, "ns_steps": 5, "shard_workers": 4, "n_matrices": 100,
                   "equiv_steps": 50},
    "pipe-verify": {"n_examples": 10000, "checkpoint_step": 1234, "n_checks": 20, "weights": (0.75, 0.25),
                    "mix_draws": 100000, "buffer_size": 1024},
}


class Run:
    def __init__(self, out, timestamps):
        os.makedirs(out, exist_ok=True)
        self.out = out
        self.timestamps = timestamps
        self.log = training.MetricsLogger(os.path.join(out, "metrics.jsonl"), timestamps)
        self.rows = []
        self.ok = True

    def check(self, name, value, passed):
        self.rows.append((name, value, passed))
        self.ok &= bool(passed)

    def info(self, name, value):
        self.rows.append((name, value, None))

    def path(self, name):
        return os.path.join(self.out, name)

    def save_params(self, name, params):
        checkpoint.save(self.path(name), {k: v.data for k, v in params.items()})

    def finish(self, title, extra=""):
        width = max([len(r[0]) for r in self.rows] + [5])
        lines = [title, "=" * len(title)]
        for name, value, passed in self.rows:
            v = f"{value:.6g}" if isinstance(value, float) else str(value)
            tag = "info" if passed is None else ("PASS" if passed else "FAIL")
            lines.append(f"{name.ljust(width)}  {v:>14}  {tag}")
        lines.append(f"overall: {'PASS' if self.ok else 'FAIL'}")
        text = "\n".join(lines) + "\n" + extra
        with open(self.path("summary.txt"), "w") as fh:
            fh.write(text)
        print(text, end="")
        return 0 if self.ok else 1


# ---------------------------------------------------------------- commands

def cmd_gradcheck(cfg, seed, run, args):
    worst = {}
    for s in range(seed, seed + cfg["seeds"]):
        for op, err in gradsuite.run_suite(s, eps=cfg["eps"], max_coords=cfg["max_coords"]).items():
            run.log.log(seed=s, op=op, max_rel_error=err)
            worst[op] = max(worst.get(op, 0.0), err)
    for op, err in worst.items():
        run.check(op, err, err < GRAD_TOL)
    return run.finish(f"gradcheck (eps={cfg['eps']}, seeds {seed}..{seed + cfg['seeds'] - 1})")


def cmd_train_vit(cfg, seed, run, args):
    res = experiments.vit_overfit(cfg["steps"], seed, cfg["n_examples"], cfg["d"], cfg["n_blocks"], cfg["lr"],
                                  cfg["fallback_lr"], log=run.log)
    run.save_params("vit.ckpt", res["params"])
    run.check("initial_loss", res["initial"], True)
    run.check("final_loss", res["final"], True)
    run.check("final/initial", res["ratio"], res["ratio"] < cfg["target_ratio"])
    return run.finish("train-vit: dual-loss overfit on captioned shapes")


def cmd_train_vlm(cfg, seed, run, args):
    sched = training.SftSchedule(stage1_lr=cfg["stage1_lr"], stage2_lr=cfg["stage2_lr"],
                                 stage1_fraction=cfg["stage1_fraction"], decay=cfg["decay"])
    res = experiments.vlm_sft(cfg["steps"], seed, cfg["n_examples"], sched, cfg["fallback_scale"], cfg["batch"],
                              log=run.log)
    run.save_params("vlm.ckpt", res["params"])
    run.check("initial_loss", res["initial"], True)
    run.check("final_loss", res["final"], res["final"] < res["initial"])
    return run.finish("train-vlm: ViT -> projector -> MoE decoder, answer-only SFT")


def cmd_extend_ctx(cfg, seed, run, args):
    buckets = niah.PRESETS[args.preset or "desk"]
    res = experiments.context_extension(seed, cfg["base_steps"], cfg["sub_steps"], cfg["eval_trials"], cfg["lr"],
                                        cfg["fallback_lr"], buckets=buckets, log=run.log)
    res["extended"].write(run.path("niah_extended.jsonl"), run.path("niah_extended.txt"))
    res["control"].write(run.path("niah_control.jsonl"), run.path("niah_control.txt"))
    run.save_params("extended.ckpt", res["params"])
    for b in res["extended"].buckets:
        run.check(f"extended ({b.lo},{b.hi}]", b.recall, b.recall >= cfg["min_recall"])
    last = res["control"].buckets[-1]
    run.check(f"control ({last.lo},{last.hi}]", last.recall, last.recall < cfg["control_max"])
    for k, counts in enumerate(res["mix_counts"]):
        frac = counts["long"] / max(1, counts["long"] + counts["replay"])
        run.check(f"sub-stage {k} long fraction", frac, True)
    extra = "\nextended\n" + res["extended"].to_table() + "\ncontrol\n" + res["control"].to_table()
    return run.finish("extend-ctx: 256 -> 1024 -> 4096", extra)


def cmd_niah(cfg, seed, run, args):
    buckets = niah.PRESETS[args.preset or "desk"]
    rng = np.random.default_rng(seed)
    specs = niah.random_specs(cfg["trials"], buckets, rng, cfg["modality"])
    if cfg["model"] == "oracle":
        model = niah.oracle_retriever
    elif cfg["model"] == "random":
        model = niah.random_guesser(np.random.default_rng(seed + 1))
    else:
        raise training.ConfigError(f"config key 'model': unknown model {cfg['model']!r}")
    report = niah.evaluate_recall(model, specs, buckets, seed=seed)
    report.write(run.path("niah_report.jsonl"), run.path("niah_table.txt"))
    for b in report.buckets:
        run.log.log(range=[b.lo, b.hi], n_trials=b.n_trials, recall=b.recall)
        ok = 0.0 <= b.recall <= 1.0 and (cfg["model"] != "oracle" or b.recall == 1.0)
        run.check(f"({b.lo},{b.hi}]", b.recall, ok)
    return run.finish(f"niah ({args.preset or 'desk'} buckets, {cfg['model']} model)", "\n" + report.to_table())


def cmd_rl(cfg, seed, run, args):
    seeds = range(seed, seed + cfg["n_seeds"])
    kw = dict(group=cfg["group"], batch_prompts=cfg["batch_prompts"], strategy=cfg["strategy"])
    curves = np.stack([rl_mirror.run_mirror_descent(cfg["tau"], s, cfg["iterations"], **kw) for s in seeds])
    ctrl = np.stack([rl_mirror.run_mirror_descent(cfg["control_tau"], s, cfg["iterations"], **kw) for s in seeds])
    med, cmed = np.median(curves, axis=0), np.median(ctrl, axis=0)
    for i in range(len(med)):
        run.log.log(iteration=i, median_reward=med[i], control_median=cmed[i])
    run.check("initial median reward", float(med[0]), True)
    run.check(f"final median reward (tau={cfg['tau']})", float(med[-1]), med[-1] >= cfg["target"])
    drift = float(np.abs(ctrl[:, -1] - ctrl[:, 0]).max())
    run.check(f"control drift (tau={cfg['control_tau']})", drift, drift <= cfg["control_band"])
    return run.finish("rl: policy mirror descent on the two-step task")


def ns_scalar_image(sigma, steps):
    """The NS polynomial acts on each normalised singular value independently."""
    a, b, c = muon.NS_COEFFS
    x = np.asarray(sigma, dtype=np.float64)
    for _ in range(steps):
        x = a * x + b * x ** 3 + c * x ** 5
    return x


def cmd_muon_bench(cfg, seed, run, args):
    rng = np.random.default_rng(seed)
    lo, hi, worst = np.inf, 0.0, 0.0
    t0 = time.perf_counter()
    for _ in range(cfg["n_matrices"]):
        m, n = (int(x) for x in rng.integers(1, 65, size=2))
        G = rng.normal(size=(m, n))
        sv = np.linalg.svd(muon.newton_schulz_orthogonalize(G, cfg["ns_steps"]), compute_uv=False)
        s0 = np.linalg.svd(G, compute_uv=False)
        want = ns_scalar_image(s0 / np.sqrt((s0 ** 2).sum()), cfg["ns_steps"])
        worst = max(worst, float(np.abs(np.sort(sv) - np.sort(want)).max()))
        lo, hi = min(lo, sv.min()), max(hi, sv.max())
    ns_time = time.perf_counter() - t0
    run.log.log(ns_min_sv=float(lo), ns_max_sv=float(hi), ns_oracle_err=worst)
    run.check("NS vs scalar-polynomial oracle", worst, worst < 1e-3)
    run.info("NS min singular value", float(lo))
    run.info("NS max singular value", float(hi))
    eq = experiments.sharded_equivalence(sorted({1, 2, cfg["shard_workers"]}), cfg["equiv_steps"], seed)
    for n, r in eq.items():
        run.log.log(workers=n, bitwise=r["bitwise"], max_abs=r["max_abs"])
        run.check(f"ZeRO-1 {n} workers bitwise", r["max_abs"], r["bitwise"])
    ratio = experiments.muon_quadratic(seed, cfg["lr"], cfg["mu"], cfg["wd"], cfg["ns_steps"])
    run.log.log(quadratic_ratio=ratio)
    run.check("quadratic loss ratio (200 steps)", ratio, ratio < 1e-2)
    extra = f"\nNS time for {cfg['n_matrices']} matrices: {ns_time:.3f}s\n" if run.timestamps else ""
    return run.finish("muon-bench", extra)


def cmd_pipe_verify(cfg, seed, run, args):
    mix = datapipe.MixSpec([("a", cfg["weights"][0]), ("b", cfg["weights"][1])])
    catalog = {"a": [f"a{i}" for i in range(5000)], "b": [f"b{i}" for i in range(3000)]}
    n = cfg["n_examples"]
    full = [x[:2] for x in datapipe.build_stream(mix, seed, catalog, cfg["buffer_size"]).take(n)]
    rng = np.random.default_rng(seed)
    steps = [cfg["checkpoint_step"]] + [int(s) for s in rng.integers(0, n, size=max(0, cfg["n_checks"] - 1))]
    all_ok = True
    for k in steps:
        if not 0 <= k <= n:
            raise training.ConfigError(f"config key 'checkpoint_step': {k} outside [0, {n}]")
        s = datapipe.build_stream(mix, seed, catalog, cfg["buffer_size"])
        prefix = [x[:2] for x in s.take(k)]
        path = run.path(f"stream_{k}.ckpt")
        s.state().save(path)
        resumed = datapipe.checkpoint_resume(path, mix, catalog)
        ok = prefix + [x[:2] for x in resumed.take(n - k)] == full
        run.log.log(checkpoint_step=k, identical=ok)
        all_ok &= ok
    run.check(f"resume determinism ({len(steps)} steps)", all_ok, all_ok)
    s = datapipe.build_stream(mix, seed + 1, catalog, cfg["buffer_size"])
    draws = cfg["mix_draws"]
    freq = sum(1 for _ in range(draws) if next(s)[0] == "a") / draws
    dev = abs(freq - mix.weights[0])
    run.check("mix frequency deviation", dev, dev <= 0.01)
    return run.finish("pipe-verify")


COMMANDS = {
    "gradcheck": cmd_gradcheck, "train-vit": cmd_train_vit, "train-vlm": cmd_train_vlm, "extend-ctx": cmd_extend_ctx,
    "niah": cmd_niah, "rl": cmd_rl, "muon-bench": cmd_muon_bench, "pipe-verify": cmd_pipe_verify,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vlkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory (default runs/<command>)")
        p.add_argument("--preset", choices=sorted(niah.PRESETS), default=None)
        p.add_argument("--no-timestamps", action="store_true")
        for key, val in defaults.items():
            p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=None,
                           help=f"default {','.join(map(str, val)) if isinstance(val, tuple) else val}")
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] not in COMMANDS:
        parser.print_usage(sys.stderr)
        if argv and not argv[0].startswith("-"):
            print(f"vlkit: unknown command {argv[0]!r}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.seed < 0:
        parser.error("--seed must be >= 0")
    cfg = dict(DEFAULTS[args.command])
    try:
        if args.config:
            if not os.path.exists(args.config):
                parser.error(f"config file {args.config!r} does not exist")
            cfg = training.load_config(args.config, cfg)
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
        cfg = training.apply_overrides(cfg, overrides)
        run = Run(args.out or os.path.join("runs", args.command), not args.no_timestamps)
        with open(run.path("config.json"), "w") as fh:
            json.dump({"command": args.command, "seed": args.seed, "preset": args.preset, **cfg}, fh, indent=1,
                      sort_keys=True)
        return COMMANDS[args.command](cfg, args.seed, run, args)
    except training.ConfigError as e:
        print(f"vlkit: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
