"""``anode`` command line: one subcommand per experiment, JSON configs in, CSV/JSON/PGM out.

Every run writes ``resolved_config.json`` (all defaults filled in) next to
its outputs.  Exit status: 0 success, 1 a checked tolerance failed, 2 usage,
configuration or runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
import time

import numpy as np

from . import checkpoint, diagnostics
from .adjoint_grad import otd_gradient_stored, dto_gradient
from .core_math import Rng, gaussian_tensor
from .dynamics import Dense, field_from_spec
from .solvers import as_scheme
from .train import TrainConfig, build_for, load_dataset, save_params, train

COMMANDS = ("reversibility", "gradcheck", "otd-vs-dto", "checkpoint-bench", "train", "demo-image")


class ConfigError(ValueError):
    pass


COMPOSITE_2 = {"kind": "residual_composite", "parts": [
    {"kind": "dense", "n": 2, "act": "relu", "bias": True, "std": 1.0},
    {"kind": "dense", "n": 2, "act": "identity", "std": 1.0}]}
COMPOSITE_4 = {"kind": "residual_composite", "parts": [
    {"kind": "dense", "n": 4, "act": "relu", "bias": True, "std": 0.8},
    {"kind": "dense", "n": 4, "act": "identity", "std": 0.8}]}

DEFAULTS = {
    "reversibility": {
        "field": {"kind": "scalar_linear", "lam": -1.0}, "z0": None, "horizon": 1.0,
        "scheme": "euler", "step_counts": [100], "precision": "double",
        "min_steps": [], "min_steps_bounds": [1, 1000000], "adaptive_tolerances": [],
        "matrix_relu": [], "seed": 0,
    },
    "gradcheck": {
        "field": COMPOSITE_2, "z0": None, "horizon": 1.0, "scheme": "euler", "nsteps": 8,
        "h": 1e-5, "tolerance": 1e-6, "samples": 5, "seed": 0, "corrupt_vjp": False,
        "precision": "double",
    },
    "otd-vs-dto": {
        "field": COMPOSITE_4, "z0": None, "horizon": 1.0, "scheme": "euler",
        "dts": [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125], "seed": 11, "precision": "double",
    },
    "checkpoint-bench": {
        "policy": "anode_block", "L": 2, "Nt": 5, "m": None, "scheme": "euler", "compare": [],
        "seed": 0, "timing": False, "precision": "double",
    },
    "train": {**TrainConfig().to_dict(), "pipelines": ["dto"], "precision": "double"},
    "demo-image": {
        "image": None, "size": 28, "activations": ["relu"], "kernel_std": 10.0, "seed": 0,
        "scheme": {"kind": "rk45_dormand_prince", "abs_tol": 1e-6, "rel_tol": 1e-3, "max_steps": 20000},
        "horizon": 1.0, "controls": False, "control_nsteps": 100, "precision": "double",
    },
}

PRESETS = {
    "linear-lambda-100": ("reversibility", {
        "field": {"kind": "scalar_linear", "lam": -100.0}, "z0": [1.0], "scheme": "euler",
        "step_counts": [100, 1000, 10000, 100000, 200000, 1000000],
        "min_steps": [0.01], "min_steps_bounds": [100, 1000000],
    }),
    "relu-10x": ("reversibility", {
        "field": {"kind": "scalar_relu", "a": -1.0, "b": 10.0}, "z0": [1.0],
        "scheme": "rk45_dormand_prince", "step_counts": [8, 11, 16, 32, 64, 100, 211, 1000],
        "min_steps": [0.01, diagnostics.EPS32], "min_steps_bounds": [8, 100000],
        "adaptive_tolerances": [[1e-6, 1e-3], [1e-8, 1e-5], [1e-10, 1e-8], [1e-11, 1e-11]],
    }),
    "gaussian-relu-n100": ("reversibility", {
        "field": None, "scheme": "euler", "step_counts": [],
        "matrix_relu": [{"n": 100, "normalize": False, "nsteps": 1000},
                        {"n": 100, "normalize": True, "nsteps": 1000},
                        {"n": 100, "normalize": False, "nsteps": 10000},
                        {"n": 100, "normalize": True, "nsteps": 10000}],
    }),
    "fig6-checkpoint": ("checkpoint-bench", {
        "policy": "anode_block", "L": 2, "Nt": 5,
        "compare": [{"policy": "store_all"}, {"policy": "uniform", "m": 2},
                    {"policy": "binomial", "m": 2}],
    }),
    "spirals-train": ("train", {
        "dataset": {"synthetic": "spirals", "n": 400, "noise": 0.0, "seed": 2},
        "seed": 2, "epochs": 100, "lr": 0.1, "batch_size": 32, "scheme": "euler", "nsteps": 4,
        "width": 8, "n_blocks": 2, "pipelines": ["dto", "otd_stored", "otd_reverse"],
    }),
    "fig1-demo": ("demo-image", {
        "activations": ["identity", "relu", "leaky_relu", "softplus"], "controls": True,
    }),
}


# ---------------------------------------------------------------------------
# config resolution


def _merge(base: dict, over: dict, command: str) -> dict:
    unknown = set(over) - set(base) - {"command"}
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    out = copy.deepcopy(base)
    out.update(copy.deepcopy({k: v for k, v in over.items() if k != "command"}))
    return out


def _field_arg(text: str):
    text = text.strip()
    if text.startswith("{"):
        return json.loads(text)
    return {"kind": text}


def resolve(command: str, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        pcmd, pcfg = PRESETS[args.preset]
        if pcmd != command:
            raise ConfigError(f"preset {args.preset} belongs to '{pcmd}', not '{command}'")
        cfg = _merge(cfg, pcfg, command)
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        if user.get("command", command) != command:
            raise ConfigError(f"config is for '{user['command']}', not '{command}'")
        cfg = _merge(cfg, user, command)
    if args.seed is not None:
        cfg["seed"] = args.seed
        if command == "train":
            cfg["dataset"] = {**cfg["dataset"], "seed": args.seed}
    if args.precision is not None:
        cfg["precision"] = args.precision
    if args.field is not None:
        if "field" not in cfg:
            raise ConfigError(f"--field does not apply to {command}")
        try:
            cfg["field"] = _field_arg(args.field)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad --field: {exc}") from None
    if cfg.get("precision") not in ("double", "single"):
        raise ConfigError("precision must be 'double' or 'single'")
    if cfg["precision"] == "single" and command != "reversibility":
        raise ConfigError("single precision is only available for reversibility")
    cfg["threads"] = args.threads
    cfg["command"] = command
    return cfg


def out_dir(command: str, args) -> str:
    if args.out:
        return args.out
    root = os.environ.get("ANODE_OUT") or "anode_out"
    return os.path.join(root, command)


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def _clean(x):
    """JSON has no inf/nan: encode them as strings."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)) and not math.isfinite(float(x)):
        return str(float(x))
    if isinstance(x, np.floating):
        return float(x)
    return x


def _z0_for(field, cfg, rng):
    if cfg.get("z0") is not None:
        return np.asarray(cfg["z0"], dtype=np.float64)
    n = getattr(field, "n_in", None)
    if n is None and hasattr(field, "parts"):
        n = getattr(field.parts[0], "n_in", None)
    if n is None:
        return np.array([1.0])
    return gaussian_tensor(rng, (n,))


# ---------------------------------------------------------------------------
# commands


def cmd_reversibility(cfg, out):
    rows, summary = [], {"min_steps": [], "adaptive": [], "matrix_relu": []}
    rng = Rng(cfg["seed"])
    if cfg["field"] is not None:
        field = field_from_spec(cfg["field"], rng)
        z0 = _z0_for(field, cfg, rng)
        kind = cfg["field"]["kind"]
        if cfg["step_counts"]:
            scan = diagnostics.reversibility_scan(field, None, z0, cfg["horizon"], cfg["scheme"],
                                                  cfg["step_counts"], cfg["precision"])
            rows += scan.rows()
            summary["violations"] = scan.violations
        lo, hi = cfg["min_steps_bounds"]
        for target in cfg["min_steps"]:
            ms = diagnostics.min_steps_for_rho(field, None, z0, cfg["horizon"], cfg["scheme"], target,
                                               lo=lo, hi=hi, precision=cfg["precision"])
            summary["min_steps"].append({"target": target, "nsteps": ms.nsteps, "rho": ms.rho,
                                         "reached": ms.reached})
        if cfg["adaptive_tolerances"]:
            summary["adaptive"] = diagnostics.adaptive_sweep(field, None, z0, cfg["horizon"],
                                                             cfg["adaptive_tolerances"], cfg["precision"])
            for rep in summary["adaptive"]:
                rows.append((f"{kind}_adaptive_atol{rep['abs_tol']:g}_rtol{rep['rel_tol']:g}",
                             "rk45_dormand_prince", rep["forward_steps"], rep["rho"]))
    for spec in cfg["matrix_relu"]:
        n, norm, nsteps = int(spec["n"]), bool(spec.get("normalize", False)), int(spec["nsteps"])
        scheme = spec.get("scheme", cfg["scheme"])
        r = diagnostics.matrix_relu_reversibility(n, norm, scheme, nsteps, spec.get("seed", cfg["seed"]),
                                                  precision=cfg["precision"])
        label = f"matrix_relu_n{n}_{'normalized' if norm else 'unnormalized'}"
        rows.append((label, as_scheme(scheme).kind, nsteps, r))
        summary["matrix_relu"].append({"n": n, "normalize": norm, "nsteps": nsteps, "rho": r})
    diagnostics._write_csv(os.path.join(out, "reversibility.csv"), ("field", "scheme", "N", "rho"), rows)
    _dump(os.path.join(out, "summary.json"), _clean(summary))
    return 0


class _CorruptVjp:
    """Test hook: wraps a field and scales its state VJP by 1.01."""

    def __init__(self, field):
        self.__class__ = type("Corrupt" + type(field).__name__, (type(field),), {
            "_vjp_z": lambda s, z, th, v: 1.01 * type(field)._vjp_z(s, z, th, v),
            "vjp": lambda s, z, th, v: (s.vjp_z(z, th, v), s.vjp_theta(z, th, v)),
        })
        self.__dict__.update(field.__dict__)


def cmd_gradcheck(cfg, out):
    rng = Rng(cfg["seed"])
    reports, worst = [], 0.0
    for k in range(int(cfg["samples"])):
        field = field_from_spec(cfg["field"], rng)
        z0 = _z0_for(field, cfg, rng)
        redrawn = 0
        # a draw whose relu units are all off at z0 tests nothing; redraw (bounded)
        while field.kind != "zero" and not np.any(field(z0)) and redrawn < 50:
            field = field_from_spec(cfg["field"], rng)
            z0 = _z0_for(field, cfg, rng)
            redrawn += 1
        if cfg["corrupt_vjp"]:
            field = _CorruptVjp(field)
        rep = diagnostics.gradient_check(field, None, z0, cfg["horizon"], cfg["scheme"], cfg["nsteps"],
                                         h=cfg["h"], seed=cfg["seed"] + k)
        rep["field_redrawn"] = redrawn
        reports.append(rep)
        worst = max(worst, rep["dto"])
    ok = worst <= cfg["tolerance"]
    _dump(os.path.join(out, "gradcheck.json"),
          _clean({"samples": reports, "dto_worst": worst, "tolerance": cfg["tolerance"], "pass": ok}))
    return 0 if ok else 1


def cmd_otd_vs_dto(cfg, out):
    rng = Rng(cfg["seed"])
    field = field_from_spec(cfg["field"], rng)
    z0 = _z0_for(field, cfg, rng)
    gbar = gaussian_tensor(rng, z0.shape)
    scan = diagnostics.otd_dto_scan(field, None, z0, cfg["horizon"], cfg["dts"], cfg["scheme"], gbar)
    scan.to_csv(os.path.join(out, "discrepancy.csv"))
    from .dynamics import Quadratic

    q = Quadratic(1.0)
    a = dto_gradient(q, None, np.array(1.0), 1.0, "euler", 1, np.array(1.0)).grad_z0
    b = otd_gradient_stored(q, None, np.array(1.0), 1.0, "euler", 1, np.array(1.0)).grad_z0
    _dump(os.path.join(out, "summary.json"), _clean({
        "slope": scan.slope, "local_orders": scan.orders, "richardson_residual": scan.richardson,
        "quadratic_one_step": {"dto": float(a), "otd": float(b)}}))
    return 0


def cmd_checkpoint_bench(cfg, out):
    runs = [{"policy": cfg["policy"], "m": cfg["m"]}] + list(cfg["compare"])
    results = []
    for r in runs:
        stats = checkpoint.bench(r["policy"], int(cfg["L"]), int(cfg["Nt"]), r.get("m"),
                                 scheme=cfg["scheme"], seed=cfg["seed"])
        if not cfg["timing"]:
            stats["wall_time"] = None
        results.append(stats)
    main = dict(results[0])
    if len(results) > 1:
        main["compare"] = results[1:]
    _dump(os.path.join(out, "checkpoint.json"), _clean(main))
    return 0


def cmd_train(cfg, out):
    pipelines = cfg["pipelines"]
    fields = {k: v for k, v in cfg.items() if k in TrainConfig.__dataclass_fields__}
    summary = {}
    data = None
    for p in pipelines:
        tc = TrainConfig(**{**fields, "pipeline": p})
        data = data or load_dataset(tc.dataset)
        net = build_for(tc, data)
        res = train(net, tc, data)
        res.curve_csv(os.path.join(out, f"curve_{p}.csv"))
        net.theta = res.theta
        save_params(os.path.join(out, f"params_{p}.bin"), net, {"pipeline": p})
        summary[p] = res.summary()
    finals = {p: (s["final_train_loss"] if isinstance(s["final_train_loss"], float) else math.inf)
              for p, s in summary.items()}
    doc = {"runs": summary, "lowest_final_loss": min(finals, key=finals.get)}
    if "dto" in finals and "otd_reverse" in finals:
        doc["dto_lower_than_otd_reverse"] = finals["dto"] < finals["otd_reverse"]
    _dump(os.path.join(out, "summary.json"), _clean(doc))
    return 0


def cmd_demo_image(cfg, out):
    if cfg["image"]:
        img = diagnostics.read_pgm(cfg["image"])
        if not (28 <= min(img.shape) and max(img.shape) <= 256):
            raise ConfigError("demo images must be between 28x28 and 256x256")
    else:
        img = diagnostics.ring_pattern(int(cfg["size"]))
    rows = {}
    for act in cfg["activations"]:
        spec = diagnostics.conv_spec(act, cfg["kernel_std"], cfg["seed"])
        res = diagnostics.image_roundtrip_demo(img, spec, cfg["scheme"], cfg["horizon"], out_dir=out,
                                               prefix=act)
        rows[act] = {k: res.get(k) for k in ("rho", "blowup", "forward_steps", "backward_steps", "error")}
    if cfg["controls"]:
        spec = diagnostics.conv_spec("relu", cfg["kernel_std"], cfg["seed"], normalize=True,
                                     size=img.shape[0])
        res = diagnostics.image_roundtrip_demo(img, spec, "rk4", cfg["horizon"], cfg["control_nsteps"],
                                               out_dir=out, prefix="control_normalized_relu")
        rows["control_normalized_relu"] = {"rho": res["rho"], "blowup": res["blowup"]}
        from .dynamics import Conv2dBlock

        skew = Conv2dBlock(diagnostics.skew_kernel(Rng(cfg["seed"]), 1, 1.0), "identity")
        res = diagnostics.image_roundtrip_demo(img, skew, "rk4", cfg["horizon"], cfg["control_nsteps"],
                                               out_dir=out, prefix="control_skew_identity")
        rows["control_skew_identity"] = {"rho": res["rho"], "blowup": res["blowup"]}
    _dump(os.path.join(out, "demo.json"), _clean(rows))
    return 0


HANDLERS = {
    "reversibility": cmd_reversibility,
    "gradcheck": cmd_gradcheck,
    "otd-vs-dto": cmd_otd_vs_dto,
    "checkpoint-bench": cmd_checkpoint_bench,
    "train": cmd_train,
    "demo-image": cmd_demo_image,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anode", description="Neural-ODE gradient experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--preset", help=f"named configuration: {', '.join(sorted(PRESETS))}")
        s.add_argument("--out", help="output directory (default $ANODE_OUT/<command> or anode_out/<command>)")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--precision", choices=("double", "single"))
        s.add_argument("--field", help="field kind or a JSON field spec")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = resolve(args.command, args)
        out = out_dir(args.command, args)
        os.makedirs(out, exist_ok=True)
        _dump(os.path.join(out, "resolved_config.json"), _clean(cfg))
        t0 = time.perf_counter()
        code = HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"anode: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module errors surface as exit 2 with the diagnostic
        print(f"anode: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"anode {args.command}: wrote {out} ({time.perf_counter() - t0:.1f}s)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
