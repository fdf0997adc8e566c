"""Command line entry point: ``spritz {train,attack,report,gradcheck,synth}``.

Failures print a one-line JSON object (``{"error": ..., "message": ...}``)
to stderr and exit with status 1.
"""
import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .dataio import load_checkpoint, synth_dataset
from .experiment import ExperimentConfig, load_bundle, run_scenario1, run_scenario2, run_train, strip_times
from .metrics import REPORT_COLUMNS
from .models import EnsembleModel, build_autoencoder, build_cnn2c, build_combiner
from .tensor import grad_check

SEED_ENV = "SPRITZ_SEED"


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def resolve_seed(cli_seed, config_seed=0):
    """``--seed`` wins, then ``$SPRITZ_SEED``, then the config file."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return config_seed


def build_config(args):
    raw = {}
    if args.config:
        raw = ExperimentConfig.load(args.config).as_dict()
    raw["seed"] = resolve_seed(args.seed, raw.get("seed", 0))
    if args.out:
        raw["out"] = args.out
    if getattr(args, "dataset", None):
        if args.dataset == "synthetic":
            raw["dataset"] = {**raw.get("dataset", {}), "kind": "synthetic"}
        else:
            raw["dataset"] = {"kind": "manifest", "path": args.dataset}
    if getattr(args, "limit", None) is not None:
        raw["limit"] = args.limit
    if getattr(args, "scenario", None) is not None:
        raw["scenario"] = args.scenario
    return ExperimentConfig.from_dict(raw)


def cmd_train(args):
    cfg = build_config(args)
    doc = run_train(cfg, log=_log)
    print(json.dumps({"out": str(cfg.out_dir), "accuracy": {r["classifier"]: r["accuracy"] for r in doc["rows"]}}))
    return 0


def cmd_attack(args):
    cfg = build_config(args)
    run = run_scenario1 if cfg.scenario == 1 else run_scenario2
    bundle = run(cfg, log=_log)
    summary = {r["attack"]: ("Fails" if r["failed"] else r["asr"]) for r in bundle["rows"]}
    print(json.dumps({"scenario": cfg.scenario, "asr": summary}))
    return 0


def cmd_report(args):
    path = Path(args.bundle)
    if path.is_dir():
        path = path / "table.json"
    bundle = load_bundle(path)
    if args.json:
        doc = strip_times(bundle) if args.no_time else bundle
        print(json.dumps(doc, indent=1, sort_keys=True))
        return 0
    cols = REPORT_COLUMNS[:-1] if args.no_time else REPORT_COLUMNS
    print(",".join(cols))
    for r in bundle["rows"]:
        cells = {"attack": r["attack"], "time": f"{r['time']:.6f}"}
        for k in ("psnr", "l1", "max", "asr"):
            v = r[k]
            cells[k] = "Fails" if r["failed"] else (v if isinstance(v, str) else f"{v:.6f}")
        print(",".join(cells[c] for c in cols))
    return 0


def gradcheck_models(checkpoint=None, seed=0, coords=None):
    """Gradient checks for the 2C, both auto-encoders and the ensemble."""
    if checkpoint:
        ens = load_checkpoint(checkpoint)
    else:
        # freshly initialised auto-encoders are poorly conditioned for finite
        # differences (see the README); trained checkpoints are the real test
        ens = EnsembleModel(build_cnn2c(seed), build_autoencoder(seed + 1, "leg"),
                            build_autoencoder(seed + 2, "mal"), build_combiner(seed + 3), 1.0, 1.0, True)
    x = synth_dataset(1, 0.0, seed).x[0]
    # nudge off the clip boundary; constant clipped patches make max-pool ties
    x = 0.9 * x + 12.0 + np.random.default_rng(seed).uniform(-0.5, 0.5, size=x.shape)
    picks = None
    if coords is not None:
        picks = np.sort(np.random.default_rng(seed).choice(x.size, size=min(coords, x.size), replace=False))
    reports = {}
    for name, graph in (("2C", ens.cnn2c), ("1C-Leg", ens.leg), ("1C-Mal", ens.mal), ("SPRITZ-1.5C", ens)):
        # h is taken on the 0..1 grid scale; see grad_check
        reports[name] = grad_check(graph, x, input_coords=picks, seed=seed, input_scale=255.0)
    return reports


def cmd_gradcheck(args):
    reports = gradcheck_models(args.checkpoint, resolve_seed(args.seed), args.coords)
    print(json.dumps({k: r.as_dict() for k, r in reports.items()}, indent=1, sort_keys=True))
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_synth(args):
    ds = synth_dataset(args.n_per_class, args.difficulty, resolve_seed(args.seed))
    out = Path(args.out or "synthetic.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    print(json.dumps({"out": str(out), "n": len(ds)}))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="spritz", description="SPRITZ-1.5C training and evasion attack campaigns")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False, limit=False):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, default=None, help=f"overrides the config seed and ${SEED_ENV}")
        sp.add_argument("--out", help="output directory")
        if dataset:
            sp.add_argument("--dataset", help="'synthetic' or a CSV manifest JSON")
        if limit:
            sp.add_argument("--limit", type=int, default=None, help="attack batch size (desk default 100)")

    sp = sub.add_parser("train", help="train the ensemble and report clean accuracy")
    common(sp, dataset=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="run an attack campaign")
    common(sp, limit=True)
    sp.add_argument("--scenario", type=int, choices=(1, 2), default=None)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("report", help="print a campaign table from its JSON bundle")
    sp.add_argument("bundle", help="table.json or the scenario directory holding it")
    sp.add_argument("--no-time", action="store_true", help="drop wall-time fields")
    sp.add_argument("--json", action="store_true", help="print the whole bundle")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gradcheck", help="check backprop against finite differences")
    sp.add_argument("--checkpoint", help="ensemble checkpoint to check (recommended; fresh weights if omitted)")
    sp.add_argument("--coords", type=int, default=None, help="check this many random input cells")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write a synthetic dataset (.npz)")
    sp.add_argument("--n-per-class", type=int, default=100)
    sp.add_argument("--difficulty", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # reported as JSON for callers that parse stderr
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
