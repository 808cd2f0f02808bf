"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import experiments as E
from .data import DataFormatError
from .gradcheck import grad_check


def _load_config(args, kind):
    cfg = {"kind": kind}
    if args.config:
        with open(args.config) as fh:
            cfg.update(json.load(fh))
        cfg["kind"] = kind
    if args.seed is not None:
        cfg["seed"] = args.seed
    E.apply_overrides(cfg, args.override or [])
    return cfg


def _add_common(p, need_out=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    if need_out:
        p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted-path config override (JSON-parsed value)")
    p.add_argument("--force", action="store_true",
                   help="retrain even if a matching completed run exists")


def cmd_approx(args):
    cfg = _load_config(args, "approx")
    summary = E.run_approx(cfg, args.out, force=args.force)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_classify(args):
    cfg = _load_config(args, "classify")
    summary = E.run_classify(cfg, args.out, force=args.force)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_analyze_locations(args):
    data_cfg = {}
    if args.config:
        with open(args.config) as fh:
            data_cfg = json.load(fh).get("data", {})
    if args.data_root:
        data_cfg["root"] = args.data_root
    summary = E.analyze_locations(args.checkpoint, data_cfg, args.out,
                                  n_patches=args.patches,
                                  seed=args.seed if args.seed is not None else 0)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_analyze_response(args):
    if args.unit_params:
        with open(args.unit_params) as fh:
            params = json.load(fh)
        source = {"params": params, "length": args.length, "psi": args.psi,
                  "psi_alpha": args.psi_alpha}
    elif args.checkpoint:
        source = args.checkpoint
    else:
        print("analyze-response needs --checkpoint or --unit-params", file=sys.stderr)
        return 2
    summary = E.analyze_response(source, args.out, n=args.samples,
                                 fixed_max=args.fixed_max,
                                 seed=args.seed if args.seed is not None else 0)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_gradcheck(args):
    """Finite-difference spot check of the end-to-end training graph."""
    from .layers import build_network, conv_preset, loss_xent

    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    model = build_network(conv_preset(4, pool_kind="lstm"), seed=seed,
                          dtype=np.float64)  # FD needs f64 headroom
    x = rng.normal(0.0, 0.5, size=(2, 3, 32, 32))
    labels = rng.integers(0, 10, size=2)
    def loss_at():
        return loss_xent(model.forward(x, train_mode=False), labels)

    model.zero_grad()
    loss_at().backward()
    worst_name, worst_err, ok = "", 0.0, True
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        g = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        picks = rng.choice(flat.size, size=min(args.coords, flat.size), replace=False)
        for j in picks:
            h = 1e-5 * max(0.1, abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_at().item()
            flat[j] = orig - h
            fm = loss_at().item()
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            err = abs(fd - g[j]) / max(abs(fd), abs(g[j]), 1e-6)
            if err > worst_err:
                worst_err, worst_name = err, name
            if err > args.rtol:
                ok = False
    status = "PASS" if ok else "FAIL"
    print(f"gradcheck {status}: worst rel error {worst_err:.3e} "
          f"({worst_name}), rtol {args.rtol}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lstmpool",
                                     description="LSTM-pooling experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("approx", help="train a unit to approximate max/avg pooling")
    _add_common(p)
    p.set_defaults(func=cmd_approx)

    p = sub.add_parser("classify", help="train an image classifier")
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("analyze-locations",
                       help="argmax-location histogram for a max-pool checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--patches", type=int, default=5000)
    p.set_defaults(func=cmd_analyze_locations)

    p = sub.add_parser("analyze-response",
                       help="pooled response vs region statistics")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--unit-params", default=None,
                   help="JSON file of unit parameters (approx run output)")
    p.add_argument("--length", type=int, default=9)
    p.add_argument("--psi", default="relu")
    p.add_argument("--psi-alpha", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--fixed-max", type=float, default=1.5)
    p.set_defaults(func=cmd_analyze_response)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full graph")
    _add_common(p, need_out=False)
    p.add_argument("--coords", type=int, default=3,
                   help="coordinates sampled per parameter")
    p.add_argument("--rtol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except E.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except E.DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(json.dumps(exc.snapshot, indent=2), file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
