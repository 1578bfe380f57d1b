"""Command-line entry point: config files in, CSV/PGM/checkpoint files out.

Config documents are strict JSON: every key must be known, so a typo'd
field fails the run instead of silently training with a default.  Flags
override config values, and LIPREG_OUT_DIR overrides the output
directory from the environment.  Exit codes: 0 success, 2 bad config or
input, 3 divergence, 4 failed internal check.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import nn
from . import oracle
from . import penalty as pen
from . import tape as T
from . import train
from .perturb import EpsilonDist

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECK = 4

OUT_DIR_ENV = "LIPREG_OUT_DIR"


class ConfigError(Exception):
    pass


_DY_ALIASES = {"kl": "kl-divergence", "msq-logit": "mean-squared-logit",
               "kl-divergence": "kl-divergence",
               "mean-squared-logit": "mean-squared-logit"}

_ALR_KEYS = ("K", "lam", "xi", "k", "eps", "sided", "form",
             "fix_reference", "square_expectation")
_EPS_KEYS = ("kind", "lo", "hi")
_MODEL_KEYS = ("in_dim", "hidden", "out_dim", "activation", "batchnorm")
_GRID_KEYS = ("bounds", "resolution")
_TOP_KEYS = ("iterations", "batch_size", "reg_batch_size", "critic_steps",
             "lr", "beta1", "beta2", "seed", "penalty", "alr", "dY",
             "ent_weight", "log_every", "grid_every", "model", "gen_model",
             "grid", "sampler", "out_dir")


def _check_keys(doc: dict, allowed, where: str):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {where}")


def _eps_from(doc: dict) -> EpsilonDist:
    _check_keys(doc, _EPS_KEYS, "alr.eps")
    kind = doc.get("kind", "uniform")
    if kind == "fixed":
        if "hi" in doc:
            raise ConfigError("alr.eps: fixed kind takes 'lo' only")
        return EpsilonDist.fixed(float(doc.get("lo", 1.0)))
    if kind == "uniform":
        return EpsilonDist.uniform(float(doc.get("lo", 0.1)),
                                   float(doc.get("hi", 10.0)))
    raise ConfigError(f"alr.eps: unknown kind {kind!r}")


def _alr_from(doc: dict, defaults: pen.AlrConfig) -> pen.AlrConfig:
    _check_keys(doc, _ALR_KEYS, "alr")
    kw = {f: getattr(defaults, f) for f in _ALR_KEYS}
    for key, val in doc.items():
        kw[key] = _eps_from(val) if key == "eps" else val
    try:
        return pen.AlrConfig(**kw)
    except ValueError as e:
        raise ConfigError(f"alr: {e}")


def _model_from(doc: dict, where: str) -> nn.MlpSpec:
    _check_keys(doc, _MODEL_KEYS, where)
    try:
        return nn.MlpSpec(
            int(doc.get("in_dim", 2)),
            tuple(int(h) for h in doc.get("hidden", ())),
            int(doc.get("out_dim", 1)),
            activation=doc.get("activation", "relu"),
            batchnorm=(tuple(bool(b) for b in doc["batchnorm"])
                       if doc.get("batchnorm") is not None else None))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}")


def _grid_from(doc: dict) -> oracle.GridSpec:
    _check_keys(doc, _GRID_KEYS, "grid")
    try:
        kw = {}
        if "bounds" in doc:
            kw["bounds"] = tuple((float(lo), float(hi)) for lo, hi in doc["bounds"])
        if "resolution" in doc:
            kw["resolution"] = tuple(int(r) for r in doc["resolution"])
        return oracle.GridSpec(**kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"grid: {e}")


def load_run_config(path: str | None, base: dict) -> dict:
    """Merge a JSON config file over the command's base document."""
    doc = dict(base)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _check_keys(user, _TOP_KEYS, "config")
        doc.update(user)
    return doc


def build_run(doc: dict, defaults_alr: pen.AlrConfig, sampler: str | None = None):
    """Turn a merged config document into harness inputs."""
    _check_keys(doc, _TOP_KEYS, "config")
    if sampler is not None and doc.get("sampler", sampler) != sampler:
        raise ConfigError(f"this command trains on {sampler!r}, "
                          f"config says {doc['sampler']!r}")
    alr = doc.get("alr", {})
    if not isinstance(alr, pen.AlrConfig):
        alr = _alr_from(alr, defaults_alr)
    try:
        cfg = train.TrainConfig(
            iterations=int(doc["iterations"]),
            batch_size=int(doc.get("batch_size", 64)),
            reg_batch_size=int(doc.get("reg_batch_size", 1024)),
            critic_steps=int(doc.get("critic_steps", 5)),
            lr=float(doc.get("lr", 2e-4)),
            beta1=float(doc.get("beta1", 0.0)),
            beta2=float(doc.get("beta2", 0.9)),
            seed=int(doc.get("seed", 0)),
            penalty=doc.get("penalty", "alp"),
            alr=alr,
            dY=doc.get("dY", "mean-squared-logit"),
            ent_weight=float(doc.get("ent_weight", 0.0)),
            log_every=int(doc.get("log_every", 64)),
            grid_every=int(doc.get("grid_every", 512)))
    except ValueError as e:
        raise ConfigError(str(e))
    model = _model_from(doc.get("model", {}), "model") if "model" in doc else None
    gen_model = (_model_from(doc["gen_model"], "gen_model")
                 if "gen_model" in doc else None)
    grid = _grid_from(doc.get("grid", {})) if "grid" in doc else oracle.GridSpec()
    return cfg, model, gen_model, grid


def resolve_out_dir(doc: dict, flag_value: str | None) -> str:
    out = doc.get("out_dir", "runs")
    if flag_value is not None:
        out = flag_value
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        out = env
    os.makedirs(out, exist_ok=True)
    return out


def write_pgm(path: str, cells: np.ndarray):
    """P5 image of a grid cell array, black at 0 and white at 1.

    Cell axis 0 is the first coordinate and axis 1 the second, both
    increasing with index; image row 0 is the top of the domain, so the
    array comes out transposed and flipped.
    """
    img = np.asarray(cells, dtype=np.float64).T[::-1]
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(px.tobytes())


def write_points_csv(path: str, pts: np.ndarray):
    lines = ["x,y"] + [f"{repr(float(a))},{repr(float(b))}" for a, b in pts]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _apply_common_overrides(doc: dict, args):
    for name in ("iterations", "seed", "lr", "log_every", "grid_every",
                 "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            doc[name] = v
    if getattr(args, "penalty", None) is not None:
        doc["penalty"] = args.penalty
    alr = dict(doc.get("alr", {}))
    lam = getattr(args, "lam", None)
    if lam is not None:
        if lam == 0:
            doc["penalty"] = "none"
        else:
            alr["lam"] = lam
    for flag, key in (("K", "K"), ("k", "k"), ("xi", "xi")):
        v = getattr(args, flag, None)
        if v is not None:
            alr[key] = v
    if getattr(args, "eps_fixed", None) is not None:
        alr["eps"] = {"kind": "fixed", "lo": args.eps_fixed}
    if getattr(args, "eps_uniform", None) is not None:
        lo, hi = args.eps_uniform
        alr["eps"] = {"kind": "uniform", "lo": lo, "hi": hi}
    if getattr(args, "two_sided", False):
        alr["sided"] = "two"
        alr.setdefault("form", "squared")
    if alr:
        doc["alr"] = alr
    if getattr(args, "dy", None) is not None:
        if args.dy not in _DY_ALIASES:
            raise ConfigError(f"unknown output metric {args.dy!r}")
        doc["dY"] = _DY_ALIASES[args.dy]
    if getattr(args, "ent_weight", None) is not None:
        doc["ent_weight"] = args.ent_weight


def _seed_list(args) -> list:
    if getattr(args, "seeds", None):
        text = args.seeds
        try:
            a, b = text.split("..")
            lo, hi = int(a), int(b)
        except ValueError:
            raise ConfigError(f"--seeds wants 'a..b', got {text!r}")
        if hi < lo:
            raise ConfigError(f"--seeds range is empty: {text!r}")
        return list(range(lo, hi + 1))
    return []


_TOY_BASE = {
    "iterations": 2 ** 14, "batch_size": 64, "reg_batch_size": 1024,
    "lr": 2e-4, "seed": 0, "penalty": "alp", "sampler": "toy-A4",
    "log_every": 64, "grid_every": 1024,
}
_TOY_ALR = pen.AlrConfig(K=1.0, lam=1.0, xi=10.0, k=1,
                         eps=EpsilonDist.uniform(0.1, 10.0), form="squared")

_WGAN_BASE = {
    "iterations": 3000, "batch_size": 64, "critic_steps": 5,
    "lr": 2e-4, "seed": 0, "penalty": "alp", "sampler": "eight-gaussians",
    "log_every": 50, "grid_every": 250,
}
_WGAN_ALR = pen.AlrConfig(K=1.0, lam=100.0, xi=10.0, k=1,
                          eps=EpsilonDist.uniform(0.1, 10.0), form="squared")

_SEMISUP_BASE = {
    "iterations": 2000, "batch_size": 32, "lr": 2e-3, "seed": 0,
    "penalty": "alp", "sampler": "two-moons", "dY": "mean-squared-logit",
    "ent_weight": 0.0, "log_every": 100, "grid_every": 2000,
}
_SEMISUP_ALR = pen.AlrConfig(K=0.0, lam=1.0, xi=10.0, k=1,
                             eps=EpsilonDist.uniform(1.0, 10.0),
                             form="linear", fix_reference=True)


def _run_one_toy(doc: dict, out_dir: str) -> int:
    cfg, model, _, grid = build_run(doc, _TOY_ALR, sampler="toy-A4")
    res = train.train_toy(cfg, spec=model, grid=grid)
    train.write_metrics_csv(res.rows, os.path.join(out_dir, "metrics.csv"))
    nn.save_checkpoint(os.path.join(out_dir, "checkpoint.json"),
                       res.spec, res.params, cfg.seed)
    write_pgm(os.path.join(out_dir, "gradnorm.pgm"), res.grad_grid)
    tgt = train.f_target(grid.points()).reshape(grid.resolution)
    write_pgm(os.path.join(out_dir, "target.pgm"), tgt)
    _, fopt_cells = oracle.grid_lipschitz(train.f_opt, grid,
                                          mode="pairwise-quotient")
    write_pgm(os.path.join(out_dir, "fopt.pgm"), fopt_cells)
    print(f"toy seed={cfg.seed} mse={res.final_mse:.6f} "
          f"grid_lip={res.grid_lip:.4f} out={out_dir}")
    if res.diverged:
        print("run diverged; metrics are partial", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_toy(args) -> int:
    doc = load_run_config(args.config, _TOY_BASE)
    _apply_common_overrides(doc, args)
    seeds = _seed_list(args)
    out_root = resolve_out_dir(doc, args.out)
    if not seeds:
        return _run_one_toy(doc, out_root)
    worst = EXIT_OK
    for s in seeds:
        sub = os.path.join(out_root, f"seed_{s}")
        os.makedirs(sub, exist_ok=True)
        code = _run_one_toy({**doc, "seed": s}, sub)
        worst = max(worst, code)
    return worst


def _run_one_wgan(doc: dict, out_dir: str) -> int:
    cfg, model, gen_model, grid = build_run(doc, _WGAN_ALR,
                                            sampler="eight-gaussians")
    res = train.train_wgan2d(cfg, critic_spec=model, gen_spec=gen_model,
                             grid=grid)
    train.write_metrics_csv(res.rows, os.path.join(out_dir, "metrics.csv"))
    for it, pts in res.samples:
        write_points_csv(os.path.join(out_dir, f"samples_{it}.csv"), pts)
    write_pgm(os.path.join(out_dir, "critic_gradnorm.pgm"), _critic_cells(res, grid))
    nn.save_checkpoint(os.path.join(out_dir, "checkpoint_critic.json"),
                       res.critic_spec, res.params_c, cfg.seed)
    nn.save_checkpoint(os.path.join(out_dir, "checkpoint_gen.json"),
                       res.gen_spec, res.params_g, cfg.seed)
    print(f"wgan2d seed={cfg.seed} modes={res.modes} "
          f"grid_lip={res.grid_lip:.4f} out={out_dir}")
    if res.diverged:
        print("run diverged; metrics are partial", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _critic_cells(res, grid) -> np.ndarray:
    _, cells = oracle.grid_lipschitz(
        nn.net_fn(res.critic_spec, res.params_c), grid, mode="grad-norm",
        grad_fn=nn.net_grad_fn(res.critic_spec, res.params_c))
    return cells


def cmd_wgan2d(args) -> int:
    doc = load_run_config(args.config, _WGAN_BASE)
    _apply_common_overrides(doc, args)
    seeds = _seed_list(args)
    out_root = resolve_out_dir(doc, args.out)
    if not seeds:
        return _run_one_wgan(doc, out_root)
    worst = EXIT_OK
    for s in seeds:
        sub = os.path.join(out_root, f"seed_{s}")
        os.makedirs(sub, exist_ok=True)
        worst = max(worst, _run_one_wgan({**doc, "seed": s}, sub))
    return worst


def cmd_semisup(args) -> int:
    doc = load_run_config(args.config, _SEMISUP_BASE)
    _apply_common_overrides(doc, args)
    out_dir = resolve_out_dir(doc, args.out)
    cfg, model, _, _ = build_run(doc, _SEMISUP_ALR, sampler="two-moons")
    try:
        res = train.train_semisup2d(cfg, spec=model)
    except ValueError as e:
        raise ConfigError(str(e))
    train.write_metrics_csv(res.rows, os.path.join(out_dir, "metrics.csv"))
    nn.save_checkpoint(os.path.join(out_dir, "checkpoint.json"),
                       res.spec, res.params, cfg.seed)
    print(f"semisup seed={cfg.seed} test_acc={res.test_acc:.4f} out={out_dir}")
    if res.diverged:
        print("run diverged; metrics are partial", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_lipest(args) -> int:
    try:
        spec, params, _ = nn.load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load checkpoint: {e}")
    if spec.out_dim != 1:
        raise ConfigError("Lipschitz estimation wants a scalar-output net")
    grid = oracle.GridSpec(
        bounds=((args.lo, args.hi), (args.lo, args.hi)),
        resolution=(args.resolution, args.resolution))
    grad_fn = nn.net_grad_fn(spec, params) if args.mode == "grad-norm" else None
    gmax, cells = oracle.grid_lipschitz(nn.net_fn(spec, params), grid,
                                        mode=args.mode, grad_fn=grad_fn)
    out_dir = args.out if args.out else "."
    os.makedirs(out_dir, exist_ok=True)
    np.save(os.path.join(out_dir, "lipgrid.npy"), cells)
    write_pgm(os.path.join(out_dir, "lipgrid.pgm"), cells)
    print(f"grid_lip {gmax!r} mode {args.mode} resolution {args.resolution}")
    return EXIT_OK


def _gradcheck_cases(rng: T.Rng):
    """Named scalar-valued builds exercising every differentiable op."""
    a3 = rng.normal((3,))
    m23 = rng.normal((2, 3))
    m32 = rng.normal((3, 2))
    pos = rng.uniform((2, 3), 0.5, 2.0)
    # keep relu/abs/clip inputs away from their kinks
    off = rng.uniform((2, 3), 0.2, 1.0) * np.where(rng.uniform((2, 3)) < 0.5, -1, 1)

    def case(builder, x0):
        return builder, np.asarray(x0, dtype=np.float64)

    cases = {
        "add": case(lambda tp, x: T.sum_(T.add(x, tp.const(a3))), a3 * 0.5),
        "sub": case(lambda tp, x: T.sum_(T.sub(tp.const(a3), x)), a3 * 0.3),
        "neg": case(lambda tp, x: T.sum_(T.mul(T.neg(x), tp.const(m23))), m23),
        "sum": case(lambda tp, x: T.square(T.sum_(x)), m23),
        "mul": case(lambda tp, x: T.sum_(T.mul(x, tp.const(m23))), m23),
        "div": case(lambda tp, x: T.sum_(T.div(tp.const(m23), x)), pos),
        "matmul": case(lambda tp, x: T.sum_(T.matmul(x, tp.const(m32))), m23),
        "transpose": case(lambda tp, x: T.sum_(T.matmul(T.transpose(x), tp.const(m23))), m23),
        "relu": case(lambda tp, x: T.sum_(T.relu(x)), off),
        "abs": case(lambda tp, x: T.sum_(T.absval(x)), off),
        "exp": case(lambda tp, x: T.sum_(T.exp(x)), m23 * 0.1),
        "log": case(lambda tp, x: T.sum_(T.log(x)), pos),
        "square": case(lambda tp, x: T.sum_(T.square(x)), m23),
        "sqrt": case(lambda tp, x: T.sum_(T.sqrt(x)), pos),
        "mean": case(lambda tp, x: T.mean(T.mul(x, x)), m23),
        "l2norm": case(lambda tp, x: T.sum_(T.l2norm(x, axis=-1)), m23),
        "log_softmax": case(lambda tp, x: T.sum_(T.mul(T.log_softmax(x), tp.const(m23))), m23),
        "softmax": case(lambda tp, x: T.sum_(T.mul(T.softmax(x), tp.const(m23))), m23),
        "affine": case(lambda tp, x: T.sum_(T.affine(x, tp.const(m32), tp.const(np.zeros(2)))), m23),
        "concat": case(lambda tp, x: T.sum_(T.square(T.concat([x, tp.const(m23)], axis=0))), m23),
        "slice": case(lambda tp, x: T.sum_(T.square(
            T.slice_(x, (slice(None), slice(0, 2))))), m23),
        "reshape": case(lambda tp, x: T.sum_(T.mul(T.reshape(x, (3, 2)), tp.const(m32))), m23),
        "broadcast": case(lambda tp, x: T.sum_(T.mul(T.broadcast_to(x, (2, 3)), tp.const(m23))), a3),
        "clip": case(lambda tp, x: T.sum_(T.clip(x, -0.9, 0.9)), off),
        "batchnorm": case(
            lambda tp, x: T.sum_(T.square(T.batchnorm_train(
                x, tp.const(np.full(3, 1.5)), tp.const(np.full(3, 0.25)))[0])),
            rng.normal((6, 3))),
        "mlp": case(_mlp_case_builder(rng), rng.normal((4, 2))),
    }
    return cases


def _mlp_case_builder(rng: T.Rng):
    w1 = rng.normal((2, 8))
    b1 = rng.uniform((8,), 0.1, 0.5)
    w2 = rng.normal((8, 1))

    def build(tp, x):
        h = T.relu(T.affine(x, tp.const(w1), tp.const(b1)))
        return T.sum_(T.matmul(h, tp.const(w2)))
    return build


def _second_order_case(rng: T.Rng):
    """Gradient-of-gradient-norm check, the double-backprop surface."""
    x0 = rng.normal((2, 3))
    w0 = rng.normal((3, 3))

    def value(wa: np.ndarray) -> float:
        tp = T.Tape()
        x = tp.const(x0)
        y = T.sum_(T.square(T.matmul(x, tp.leaf(wa))))
        g = T.grad(y, x, create_graph=True)
        return T.sum_(T.square(g)).item()

    def analytic(wa: np.ndarray) -> np.ndarray:
        tp = T.Tape()
        x = tp.const(x0)
        wn = tp.leaf(wa)
        y = T.sum_(T.square(T.matmul(x, wn)))
        g = T.grad(y, x, create_graph=True)
        return T.grad(T.sum_(T.square(g)), wn).a

    return value, analytic, w0


def cmd_gradcheck(args) -> int:
    rng = T.Rng(args.seed)
    tol, tol2 = 1e-5, 1e-4
    failed = False
    print(f"{'op':<12} {'max_rel_err':>12}  status")
    for name, (builder, x0) in _gradcheck_cases(rng).items():
        tp = T.Tape()
        xn = tp.leaf(x0)
        analytic = T.grad(builder(tp, xn), xn).a

        def value(xa, _b=builder):
            t2 = T.Tape()
            return _b(t2, t2.const(xa)).item()

        numeric = oracle.fd_gradient(value, x0)
        denom = max(float(np.abs(numeric).max()), 1.0)
        rel = float(np.abs(analytic - numeric).max()) / denom
        ok = rel < tol
        failed |= not ok
        print(f"{name:<12} {rel:>12.3e}  {'PASS' if ok else 'FAIL'}")

    value, analytic_fn, w0 = _second_order_case(rng)
    numeric = oracle.fd_gradient(value, w0)
    denom = max(float(np.abs(numeric).max()), 1.0)
    rel = float(np.abs(analytic_fn(w0) - numeric).max()) / denom
    ok = rel < tol2
    failed |= not ok
    print(f"{'grad-of-grad':<12} {rel:>12.3e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_CHECK if failed else EXIT_OK


def _add_run_flags(p, with_reg_batch=True):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="inclusive range a..b, one run per seed")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--grid-every", dest="grid_every", type=int)
    p.add_argument("--penalty",
                   choices=("alp", "lp", "gp", "explicit-random", "none"))
    p.add_argument("--lambda", dest="lam", type=float,
                   help="penalty multiplier; 0 turns the penalty off")
    p.add_argument("--K", type=float, help="target Lipschitz constant")
    p.add_argument("--k", type=int, help="power iterations for the direction")
    p.add_argument("--xi", type=float)
    p.add_argument("--eps-fixed", dest="eps_fixed", type=float)
    p.add_argument("--eps-uniform", dest="eps_uniform", type=float, nargs=2,
                   metavar=("LO", "HI"))
    p.add_argument("--two-sided", dest="two_sided", action="store_true",
                   help="penalize deviation on both sides of K")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lipreg",
        description="Lipschitz-regularized training harnesses and estimators")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="annulus regression on [-4,4]^2")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_toy)

    p = sub.add_parser("wgan2d", help="WGAN on the eight-Gaussian ring")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_wgan2d)

    p = sub.add_parser("semisup", help="two-moons with 8 labels")
    _add_run_flags(p)
    p.add_argument("--dy", choices=sorted(_DY_ALIASES),
                   help="output-space metric")
    p.add_argument("--ent-weight", dest="ent_weight", type=float)
    p.set_defaults(fn=cmd_semisup)

    p = sub.add_parser("lipest", help="grid Lipschitz estimate of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=("grad-norm", "pairwise-quotient"),
                   default="grad-norm")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--lo", type=float, default=-4.0)
    p.add_argument("--hi", type=float, default=4.0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_lipest)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the tape")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
