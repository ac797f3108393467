"""Command-line entry point: train, evaluate, sample, check, bench."""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checks
from . import estimators as est
from .config import add_config_arguments, config_from_args, thread_count
from .data import load_dataset
from .oracle import TARGETS, bench_estimator, make_problem
from .train import (load_data, load_model, train, train_runs, evaluate, write_eval_csv,
                    write_samples, image_shape)

log = logging.getLogger("latent_dnf")


ARTIFACT_SUITES = ("unbiasedness", "variance", "ste", "learning", "greedy")


def _threads():
    n = thread_count()
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def cmd_train(args):
    cfg = config_from_args(args)
    if cfg.runs > 1:
        best, results = train_runs(cfg)
        for i, (seed, nll, greedy) in enumerate(results):
            mark = " *" if i == best else ""
            print(f"run {i} seed {seed}: IS NLL {nll:.4f} greedy {greedy}{mark}")
        return 0
    state = train(cfg, resume=args.resume)
    print(f"trained to step {state.step}; checkpoint in {Path(cfg.out_dir) / 'checkpoint.ckpt'}")
    return 0


def _eval_bits(cfg, dataset, split):
    if dataset:
        return load_dataset(dataset).bits
    data = load_data(cfg)
    return (data.test if split == "test" else data.train).bits


def cmd_evaluate(args):
    model, cfg = load_model(args.checkpoint)
    bits = _eval_bits(cfg, args.dataset, args.split)
    if args.limit:
        bits = bits[:args.limit]
    K = args.K or cfg.eval_samples
    rep = evaluate(model, bits, K, args.seed, greedy=not args.no_greedy, rows=cfg.eval_rows)
    print(f"examples {len(bits)}  IS-{K} NLL {rep.mean_is_nll:.4f} nats", end="")
    if rep.greedy_nll is not None:
        print(f"  greedy NLL {rep.mean_greedy_nll:.4f} nats", end="")
    print()
    if args.out:
        write_eval_csv(args.out, rep, cfg.hash, cfg.seed)
    return 0


def cmd_sample(args):
    model, cfg = load_model(args.checkpoint)
    h, w = (args.height, args.width) if args.height else image_shape(model.D)
    comment = f"config_hash {cfg.hash} seed {cfg.seed} sample_seed {args.seed}"
    write_samples(args.out, model, args.n, args.seed, (h, w), comment)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _suite_runs(name, seeds, out):
    """(label suffix, kwargs) for each invocation of a suite."""
    artifacts = {"out_dir": out} if out and name in ARTIFACT_SUITES else {}
    if name in ("unbiasedness", "variance"):
        return [("", dict(seeds=tuple(seeds), **artifacts))]
    runs = []
    for seed in seeds:
        kwargs = dict(artifacts)
        if name == "learning":
            kwargs["cfg"] = checks.desk_config(seed=seed)
            if out:
                kwargs["out_dir"] = Path(out) / f"seed{seed}"
        else:
            if out and name in ARTIFACT_SUITES:
                kwargs["out_dir"] = Path(out) / f"seed{seed}"
                kwargs["out_dir"].mkdir(parents=True, exist_ok=True)
            kwargs["seed"] = seed
        runs.append((f" (seed {seed})", kwargs))
    return runs


def cmd_check(args):
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    names = args.suite or list(checks.SUITES)
    failed = total = 0
    for name in names:
        for suffix, kwargs in _suite_runs(name, args.seeds, out):
            res = checks.SUITES[name](**kwargs)
            print(res.line().replace(f"{res.name}:", f"{res.name}{suffix}:", 1), flush=True)
            failed += not res.passed
            total += 1
    print(f"{total} runs over {len(names)} suites, {failed} failed")
    return 1 if failed else 0


def cmd_bench(args):
    cfg = est.EstimatorConfig(kind=args.estimator, self_critic=args.self_critic,
                              baseline=args.baseline, credit=args.credit,
                              gamma_prefix=args.gamma_prefix, gamma_kl=args.gamma_kl)
    problem = make_problem(args.seed, D=args.D, L=args.L, hidden=args.hidden,
                           special=args.estimator == "sfe-special", scale=args.scale)
    rep = bench_estimator(cfg, problem, args.n, args.target, seed=args.seed)
    text = rep.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"# max |z| {rep.max_abs_z:.3f}, mean variance {rep.mean_var:.6g}", file=sys.stderr)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="latent-dnf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; writes checkpoint and metrics CSV")
    add_config_arguments(t)
    t.add_argument("--resume", help="continue from this checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="importance-sampled and greedy NLL")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", help="BDS1 dataset file (default: the run's test data)")
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.add_argument("-K", type=int, default=None, help="importance samples (default from config)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--no-greedy", action="store_true")
    e.add_argument("--out", help="per-example CSV")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sample", help="draw samples into a PGM grid")
    s.add_argument("checkpoint")
    s.add_argument("-n", type=int, default=100)
    s.add_argument("--out", default="samples.pgm")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=0)
    s.add_argument("--width", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("check", help="run the acceptance suites")
    c.add_argument("--suite", action="append", choices=list(checks.SUITES))
    c.add_argument("--seeds", type=lambda v: [int(s) for s in v.split(",")], default=[0, 1, 2],
                   help="comma-separated seeds (default 0,1,2)")
    c.add_argument("--out", help="directory for CSV artifacts")
    c.set_defaults(func=cmd_check)

    b = sub.add_parser("bench", help="estimator bias/variance against enumeration")
    b.add_argument("--estimator", choices=est.KINDS[:2], default="sfe-full")
    b.add_argument("--target", choices=TARGETS, default="recon")
    b.add_argument("--self-critic", choices=est.CRITICS, default="none")
    b.add_argument("--baseline", choices=est.BASELINES, default="none")
    b.add_argument("--credit", choices=est.CREDITS, default="per_dim")
    b.add_argument("--gamma-prefix", type=float, default=0.0)
    b.add_argument("--gamma-kl", type=float, default=1.0)
    b.add_argument("-D", type=int, default=4)
    b.add_argument("-L", type=int, default=1)
    b.add_argument("--hidden", type=int, default=8)
    b.add_argument("--scale", type=float, default=0.5)
    b.add_argument("-n", type=int, default=200_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    with _threads():
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
