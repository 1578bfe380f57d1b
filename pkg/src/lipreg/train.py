"""Training harnesses for the 2-D testbeds.

Three desk-scale setups share the machinery here: a regression toy on
[-4, 4]^2 whose optimal fit is 1-Lipschitz, a WGAN on a ring of eight
Gaussians, and a semi-supervised two-moons classifier.  They all log
the same metrics row layout so the CSV plumbing stays uniform, and all
randomness runs through seeded counter streams so a rerun with the same
seed reproduces every row.
"""

import dataclasses
import time

import numpy as np

from . import nn
from . import oracle
from . import penalty as pen
from . import tape as T
from .metrics import MetricPair

PENALTY_KINDS = ("alp", "lp", "gp", "explicit-random", "none")

# eight-gaussians layout: a ring of radius 2, one component every 45
# degrees, tight std so mode dropping is visible
MODE_RADIUS = 2.0
MODE_STD = 0.02
_ANGLES = 2.0 * np.pi * np.arange(8) / 8.0
MODE_CENTERS = MODE_RADIUS * np.stack([np.cos(_ANGLES), np.sin(_ANGLES)], axis=1)

MOON_NOISE = 0.1

CSV_COLUMNS = ("iter", "critic_loss", "gen_loss", "penalty", "violations",
               "mean_q", "max_q", "grid_lip", "wall_ms")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Shared knobs for the training loops.

    ``alr`` carries the quotient-penalty settings; its ``lam`` and ``K``
    double as the multiplier and target for the lp/gp/explicit paths so
    there is a single lambda knob.  ``dY`` and ``ent_weight`` only
    matter to the semi-supervised harness (the toy and the critic
    compare scalar outputs by absolute difference).
    """

    iterations: int
    batch_size: int = 64
    reg_batch_size: int = 1024
    critic_steps: int = 5
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    seed: int = 0
    penalty: str = "alp"
    alr: pen.AlrConfig = dataclasses.field(default_factory=pen.AlrConfig)
    dY: str = "mean-squared-logit"
    ent_weight: float = 0.0
    log_every: int = 64
    grid_every: int = 512

    def __post_init__(self):
        for name in ("iterations", "batch_size", "reg_batch_size",
                     "critic_steps", "log_every", "grid_every"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr!r}")
        if self.penalty not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty {self.penalty!r}, "
                             f"expected one of {PENALTY_KINDS}")
        if self.ent_weight < 0:
            raise ValueError("ent_weight must be nonnegative")


@dataclasses.dataclass(frozen=True)
class DataSampler:
    """2-D sample source: uniform square, Gaussian ring, or two moons."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("toy-A4", "eight-gaussians", "two-moons"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")

    def sample(self, rng: T.Rng, n: int) -> np.ndarray:
        if self.kind == "toy-A4":
            return rng.uniform((n, 2), -4.0, 4.0)
        if self.kind == "eight-gaussians":
            idx = rng.integers(0, 8, (n,))
            return MODE_CENTERS[idx] + MODE_STD * rng.normal((n, 2))
        return self.sample_labeled(rng, n)[0]

    def sample_labeled(self, rng: T.Rng, n: int):
        """Points plus 0/1 class labels; only the moons are labeled."""
        if self.kind != "two-moons":
            raise ValueError(f"{self.kind!r} has no labels")
        t = rng.uniform((n,), 0.0, np.pi)
        cls = rng.integers(0, 2, (n,))
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.where(cls[:, None] == 1, lower, upper)
        x = x + MOON_NOISE * rng.normal((n, 2))
        return x, cls


def f_target(x):
    """Indicator-style target on [-4, 4]^2: 0 on the annulus 1<=r<=2, 1 off it."""
    return _radial(x, lambda r: np.where((r >= 1.0) & (r <= 2.0), 0.0, 1.0))


def f_opt(x):
    """Least-squares optimal fit of the annulus target; 1-Lipschitz cone walls."""
    def v(r):
        return np.select(
            [r <= 0.5, r <= 1.5, r <= 2.5],
            [np.ones_like(r), 1.5 - r, r - 1.5],
            default=1.0)
    return _radial(x, v)


def _radial(x, fn):
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected 2-D points, got shape {pts.shape}")
    if np.any(np.abs(pts) > 4.0 + 1e-12):
        raise ValueError("point outside the [-4, 4]^2 domain")
    out = fn(np.linalg.norm(pts, axis=1))
    return float(out[0]) if single else out


@dataclasses.dataclass(frozen=True)
class MetricsRow:
    """One logged training step; ``extra`` holds appended CSV columns."""

    iteration: int
    critic_loss: float
    gen_loss: float
    penalty: float
    violations: int
    mean_q: float
    max_q: float
    grid_lip: float
    wall_ms: float
    extra: tuple = ()


def write_metrics_csv(rows, fh, zero_wall: bool = True):
    """Write rows in the fixed column layout.

    ``fh`` is a path or an open text file.  ``zero_wall`` writes the
    wall-time column as 0 so reruns of the same seed produce the same
    bytes; pass False to keep the measured times.
    """
    rows = list(rows)
    extra_names = tuple(name for name, _ in rows[0].extra) if rows else ()
    header = ",".join(CSV_COLUMNS + extra_names)
    lines = [header]
    for r in rows:
        if tuple(name for name, _ in r.extra) != extra_names:
            raise ValueError("rows disagree on extra column names")
        wall = 0.0 if zero_wall else r.wall_ms
        cells = [str(r.iteration), repr(float(r.critic_loss)),
                 repr(float(r.gen_loss)), repr(float(r.penalty)),
                 str(r.violations), repr(float(r.mean_q)),
                 repr(float(r.max_q)), repr(float(r.grid_lip)),
                 repr(float(wall))]
        cells += [repr(float(v)) for _, v in r.extra]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if hasattr(fh, "write"):
        fh.write(text)
    else:
        with open(fh, "w") as out:
            out.write(text)


def lr_at(step: int, total: int, lr0: float) -> float:
    """Linear decay, lr0 at step 0 down to exactly 0 at step == total."""
    return lr0 * (1.0 - step / total)


def _bound_flat(bp: nn.BoundParams) -> list:
    """Bound parameter nodes in the same order as ParamSet.flat()."""
    out = []
    for i in range(len(bp.weights)):
        out.append(bp.weights[i])
        out.append(bp.biases[i])
        if bp.gammas[i] is not None:
            out.append(bp.gammas[i])
            out.append(bp.betas[i])
    return out


def _input_grad_norms(f, x: np.ndarray) -> np.ndarray:
    """Per-sample input-gradient norms of a scalar-output closure."""
    tp = T.Tape()
    xn = tp.leaf(np.asarray(x, dtype=np.float64))
    g = T.grad(T.sum_(f(tp, xn)), xn)
    return np.linalg.norm(g.a, axis=1)


def _zero_report() -> pen.PenaltyReport:
    return pen.PenaltyReport(0.0, 0, 0.0, 0.0, 0)


def _penalty_term(tp, cfg: TrainConfig, f, x, rng: T.Rng, pair: MetricPair,
                  x2=None, want_report: bool = True):
    """Build the configured penalty node at the given points.

    Returns (node, report); the report is None when not requested (the
    lp/gp monitors cost an extra backward pass, so the loops only ask on
    logging iterations).  For those paths the monitored quotient is the
    per-sample gradient norm, which is what their penalties hinge on.
    """
    a = cfg.alr
    if cfg.penalty == "none":
        return tp.const(0.0), _zero_report()
    if cfg.penalty == "alp":
        return pen.alp(tp, f, x, pair, a, rng)
    if cfg.penalty == "explicit-random":
        if x2 is None:
            raise ValueError("explicit-random needs a second batch of points")
        return pen.explicit_random_pair(tp, f, x, x2, a.lam, K=a.K)
    if cfg.penalty == "lp":
        loss = pen.lp(tp, f, x, a.lam, K=a.K)
        target = a.K
    else:
        loss = pen.gp(tp, f, x, a.lam)
        target = 1.0
    if not want_report:
        return loss, None
    norms = _input_grad_norms(f, x)
    report = pen.PenaltyReport(loss.item(), int((norms > target).sum()),
                               float(norms.mean()), float(norms.max()), 0)
    return loss, report


def _grid_estimate(spec: nn.MlpSpec, params: nn.ParamSet,
                   grid: oracle.GridSpec) -> float:
    gmax, _ = oracle.grid_lipschitz(nn.net_fn(spec, params), grid,
                                    mode="grad-norm",
                                    grad_fn=nn.net_grad_fn(spec, params))
    return gmax


def _finite(*vals) -> bool:
    return all(np.isfinite(v) for v in vals)


@dataclasses.dataclass
class ToyResult:
    spec: nn.MlpSpec
    params: nn.ParamSet
    rows: list
    final_mse: float
    grid_lip: float
    grad_grid: np.ndarray
    diverged: bool


def train_toy(cfg: TrainConfig, spec: nn.MlpSpec | None = None,
              grid: oracle.GridSpec | None = None) -> ToyResult:
    """MSE regression to the annulus target with the chosen regularizer.

    The loss batch and the (larger) regularization batch are drawn
    independently each iteration.  A non-finite loss aborts the run and
    returns whatever rows were logged, flagged as diverged.
    """
    spec = spec if spec is not None else nn.MlpSpec(2, (20, 40, 20), 1)
    grid = grid if grid is not None else oracle.GridSpec()
    rng = T.Rng(cfg.seed)
    rng_init, rng_data, rng_pen, rng_eval = (rng.spawn(1), rng.spawn(2),
                                             rng.spawn(3), rng.spawn(4))
    params = nn.init_params(spec, rng_init)
    opt = nn.AdamState(params, cfg.beta1, cfg.beta2)
    sampler = DataSampler("toy-A4")
    pair = MetricPair("euclidean", "abs-diff")

    def fc(tape, xn):
        return nn.forward(tape, spec, params, xn, mode="train")

    rows = []
    diverged = False
    last_grid = float("nan")
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        lr = lr_at(it, cfg.iterations, cfg.lr)
        x = sampler.sample(rng_data, cfg.batch_size)
        y = f_target(x)
        xr = sampler.sample(rng_data, cfg.reg_batch_size)
        xr2 = (sampler.sample(rng_data, cfg.reg_batch_size)
               if cfg.penalty == "explicit-random" else None)
        logging = (it + 1) % cfg.log_every == 0 or it == cfg.iterations - 1

        tp = T.Tape()
        out = nn.forward(tp, spec, params, tp.leaf(x), mode="train",
                         update_running=True)
        mse = T.mean(T.square(T.sub(out, tp.const(y[:, None]))))
        ploss, report = _penalty_term(tp, cfg, fc, xr, rng_pen, pair,
                                      x2=xr2, want_report=logging)
        loss = T.add(mse, ploss)
        if not _finite(loss.item()):
            diverged = True
            break
        leaves = _bound_flat(nn.bind(tp, params))
        try:
            grads = T.grad(loss, leaves)
            params = nn.adam_step(opt, params, grads, lr)
        except nn.NonFiniteGradient:
            diverged = True
            break

        if logging:
            if (it + 1) % cfg.grid_every == 0 or it == cfg.iterations - 1:
                last_grid = _grid_estimate(spec, params, grid)
            wall = (time.perf_counter() - t0) * 1e3
            rows.append(MetricsRow(it, mse.item(), 0.0, report.penalty_value,
                                   report.violations, report.mean_quotient,
                                   report.max_quotient, last_grid, wall))

    xe = sampler.sample(rng_eval, 8192)
    fe = nn.net_fn(spec, params)
    final_mse = float(np.mean((fe(xe)[:, 0] - f_target(xe)) ** 2))
    gmax, cells = oracle.grid_lipschitz(fe, grid, mode="grad-norm",
                                        grad_fn=nn.net_grad_fn(spec, params))
    return ToyResult(spec, params, rows, final_mse, gmax, cells, diverged)


def wgan_losses(tp, cfg: TrainConfig, critic, gen, xr: np.ndarray,
                z: np.ndarray, rng: T.Rng, want_report: bool = True):
    """Critic and generator loss nodes for one real/latent batch pair.

    The critic loss sees the fake batch detached, so optimizing it
    leaves the generator parameters alone; the generator loss flows
    through.  The quotient penalty runs on the concatenated real and
    generated points, lp/gp instead on their random interpolates, and
    the explicit pair path on (real, fake) couples.
    """
    xr = np.asarray(xr, dtype=np.float64)
    fake = gen(tp, tp.const(np.asarray(z, dtype=np.float64)))
    fake_v = fake.val
    f_real = critic(tp, tp.const(xr))
    f_fake = critic(tp, T.stop_gradient(fake))
    wass = T.sub(T.mean(f_fake), T.mean(f_real))

    pair = MetricPair("euclidean", "abs-diff")
    if cfg.penalty in ("lp", "gp"):
        pts = pen.interpolate_pairs(xr, fake_v, rng)
        ploss, report = _penalty_term(tp, cfg, critic, pts, rng, pair,
                                      want_report=want_report)
    elif cfg.penalty == "explicit-random":
        ploss, report = _penalty_term(tp, cfg, critic, xr, rng, pair,
                                      x2=fake_v, want_report=want_report)
    else:
        pts = np.concatenate([xr, fake_v], axis=0)
        ploss, report = _penalty_term(tp, cfg, critic, pts, rng, pair,
                                      want_report=want_report)
    critic_loss = T.add(wass, ploss)
    gen_loss = T.neg(T.mean(critic(tp, fake)))
    return critic_loss, gen_loss, report


def mode_coverage(gen_fn, rng: T.Rng, n: int = 10000) -> int:
    """Covered modes: centers with at least 1% of samples within 3 std.

    ``gen_fn`` maps a (n, 2) latent batch to 2-D points.
    """
    z = rng.normal((n, 2))
    pts = np.asarray(gen_fn(z), dtype=np.float64)
    d = np.linalg.norm(pts[:, None, :] - MODE_CENTERS[None, :, :], axis=2)
    counts = (d <= 3.0 * MODE_STD).sum(axis=0)
    return int((counts >= n // 100).sum())


@dataclasses.dataclass
class WganResult:
    critic_spec: nn.MlpSpec
    gen_spec: nn.MlpSpec
    params_c: nn.ParamSet
    params_g: nn.ParamSet
    rows: list
    modes: int
    grid_lip: float
    diverged: bool
    samples: list = dataclasses.field(default_factory=list)


def train_wgan2d(cfg: TrainConfig, critic_spec: nn.MlpSpec | None = None,
                 gen_spec: nn.MlpSpec | None = None,
                 grid: oracle.GridSpec | None = None) -> WganResult:
    """Alternating WGAN training on the Gaussian ring.

    Each iteration runs ``critic_steps`` critic updates on fresh batches
    and one generator update on a doubled batch.  The logged critic loss
    and quotient report come from the last critic step of the iteration;
    the grid estimate, mode coverage, and a 1024-point generator sample
    dump refresh every ``grid_every`` iterations and carry forward (the
    dumps accumulate on the result) in between.
    """
    critic_spec = critic_spec if critic_spec is not None else nn.MlpSpec(2, (64, 64), 1)
    gen_spec = gen_spec if gen_spec is not None else nn.MlpSpec(2, (64, 64), 2)
    grid = grid if grid is not None else oracle.GridSpec()
    rng = T.Rng(cfg.seed)
    rng_ci, rng_gi, rng_data, rng_z, rng_pen, rng_cov, rng_dump = (
        rng.spawn(1), rng.spawn(2), rng.spawn(3), rng.spawn(4),
        rng.spawn(5), rng.spawn(6), rng.spawn(7))
    params_c = nn.init_params(critic_spec, rng_ci)
    params_g = nn.init_params(gen_spec, rng_gi)
    opt_c = nn.AdamState(params_c, cfg.beta1, cfg.beta2)
    opt_g = nn.AdamState(params_g, cfg.beta1, cfg.beta2)
    sampler = DataSampler("eight-gaussians")

    def critic(tape, xn):
        return nn.forward(tape, critic_spec, params_c, xn, mode="train")

    def gen(tape, zn):
        return nn.forward(tape, gen_spec, params_g, zn, mode="train")

    rows = []
    samples = []
    diverged = False
    last_grid = float("nan")
    last_modes = float("nan")
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        lr = lr_at(it, cfg.iterations, cfg.lr)
        logging = (it + 1) % cfg.log_every == 0 or it == cfg.iterations - 1
        c_val = g_val = 0.0
        report = _zero_report()
        try:
            for step in range(cfg.critic_steps):
                xr = sampler.sample(rng_data, cfg.batch_size)
                z = rng_z.normal((cfg.batch_size, gen_spec.in_dim))
                tp = T.Tape()
                want = logging and step == cfg.critic_steps - 1
                c_loss, _, rep = wgan_losses(tp, cfg, critic, gen, xr, z,
                                             rng_pen, want_report=want)
                c_val = c_loss.item()
                if not _finite(c_val):
                    raise nn.NonFiniteGradient("non-finite critic loss")
                if rep is not None:
                    report = rep
                leaves = _bound_flat(nn.bind(tp, params_c))
                grads = T.grad(c_loss, leaves)
                params_c = nn.adam_step(opt_c, params_c, grads, lr)

            z = rng_z.normal((2 * cfg.batch_size, gen_spec.in_dim))
            tp = T.Tape()
            g_loss = T.neg(T.mean(critic(tp, gen(tp, tp.const(z)))))
            g_val = g_loss.item()
            if not _finite(g_val):
                raise nn.NonFiniteGradient("non-finite generator loss")
            leaves = _bound_flat(nn.bind(tp, params_g))
            grads = T.grad(g_loss, leaves)
            params_g = nn.adam_step(opt_g, params_g, grads, lr)
        except nn.NonFiniteGradient:
            diverged = True
            break

        if logging:
            if (it + 1) % cfg.grid_every == 0 or it == cfg.iterations - 1:
                last_grid = _grid_estimate(critic_spec, params_c, grid)
                last_modes = float(mode_coverage(nn.net_fn(gen_spec, params_g),
                                                 rng_cov))
                zd = rng_dump.normal((1024, gen_spec.in_dim))
                samples.append((it, nn.net_fn(gen_spec, params_g)(zd)))
            wall = (time.perf_counter() - t0) * 1e3
            rows.append(MetricsRow(it, c_val, g_val, report.penalty_value,
                                   report.violations, report.mean_quotient,
                                   report.max_quotient, last_grid, wall,
                                   extra=(("modes_covered", last_modes),)))

    modes = mode_coverage(nn.net_fn(gen_spec, params_g), rng_cov)
    grid_lip = _grid_estimate(critic_spec, params_c, grid)
    return WganResult(critic_spec, gen_spec, params_c, params_g, rows, modes,
                      grid_lip, diverged, samples)


@dataclasses.dataclass
class SemisupResult:
    spec: nn.MlpSpec
    params: nn.ParamSet
    rows: list
    test_acc: float
    diverged: bool


def _accuracy(spec, params, x, y) -> float:
    logits = nn.net_fn(spec, params)(x)
    return float((np.argmax(logits, axis=1) == y).mean())


def train_semisup2d(cfg: TrainConfig, spec: nn.MlpSpec | None = None) -> SemisupResult:
    """Two-moons classification from 8 labels plus an unlabeled pool.

    Cross-entropy on the labeled points, the quotient penalty (reference
    held fixed) on unlabeled batches, and optionally entropy
    minimization.  A kl-divergence metric with fixed epsilon runs
    through the distributional-smoothness path, so that configuration is
    the virtual adversarial baseline, bit for bit.
    """
    if cfg.penalty not in ("alp", "none"):
        raise ValueError("semi-supervised training takes penalty 'alp' or 'none'")
    a = cfg.alr
    if cfg.penalty == "alp":
        if not a.fix_reference:
            raise ValueError("semi-supervised smoothing needs fix_reference on")
        if cfg.dY not in ("kl-divergence", "mean-squared-logit"):
            raise ValueError(f"unsupported output metric {cfg.dY!r} for "
                             "semi-supervised training")
    spec = spec if spec is not None else nn.MlpSpec(2, (32, 32), 2)
    rng = T.Rng(cfg.seed)
    rng_init, rng_datagen, rng_batch, rng_pen = (rng.spawn(1), rng.spawn(2),
                                                 rng.spawn(3), rng.spawn(4))
    sampler = DataSampler("two-moons")
    x_pool, y_pool = sampler.sample_labeled(rng_datagen, 1000)
    x_test, y_test = sampler.sample_labeled(rng_datagen, 200)
    lab_idx = np.concatenate([np.nonzero(y_pool == c)[0][:4] for c in (0, 1)])
    x_lab, y_lab = x_pool[lab_idx], y_pool[lab_idx]
    unl_mask = np.ones(len(x_pool), dtype=bool)
    unl_mask[lab_idx] = False
    x_unl = x_pool[unl_mask]

    params = nn.init_params(spec, rng_init)
    opt = nn.AdamState(params, cfg.beta1, cfg.beta2)
    onehot = np.eye(2)[y_lab]
    vat_route = (cfg.penalty == "alp" and cfg.dY == "kl-divergence"
                 and a.eps.kind == "fixed")
    pair = MetricPair("euclidean", cfg.dY) if cfg.penalty == "alp" else None

    def fc(tape, xn):
        return nn.forward(tape, spec, params, xn, mode="train")

    def fprob(tape, xn):
        return T.softmax(fc(tape, xn))

    freg = fprob if cfg.dY == "kl-divergence" else fc

    rows = []
    diverged = False
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        lr = lr_at(it, cfg.iterations, cfg.lr)
        bi = rng_batch.integers(0, len(x_unl), (cfg.batch_size,))
        xu = x_unl[bi]
        logging = (it + 1) % cfg.log_every == 0 or it == cfg.iterations - 1

        tp = T.Tape()
        ls = T.log_softmax(nn.forward(tp, spec, params, tp.leaf(x_lab),
                                      mode="train", update_running=True))
        ce = T.neg(T.mean(T.sum_(T.mul(ls, tp.const(onehot)), axis=-1)))
        report = _zero_report()
        if cfg.penalty == "alp":
            if vat_route:
                lds = pen.lds_vat(tp, fc, xu, pair, a.eps, a.xi, a.k, rng_pen)
                ploss = T.mul(tp.const(a.lam), lds)
                report = pen.PenaltyReport(ploss.item(), 0, 0.0, 0.0, 0)
            else:
                ploss, report = pen.alp(tp, freg, xu, pair, a, rng_pen)
        else:
            ploss = tp.const(0.0)
        loss = T.add(ce, ploss)
        if cfg.ent_weight > 0:
            loss = T.add(loss, T.mul(tp.const(cfg.ent_weight),
                                     pen.entropy_min(tp, fc, xu)))
        if not _finite(loss.item()):
            diverged = True
            break
        leaves = _bound_flat(nn.bind(tp, params))
        try:
            grads = T.grad(loss, leaves)
            params = nn.adam_step(opt, params, grads, lr)
        except nn.NonFiniteGradient:
            diverged = True
            break

        if logging:
            acc = _accuracy(spec, params, x_test, y_test)
            wall = (time.perf_counter() - t0) * 1e3
            rows.append(MetricsRow(it, ce.item(), 0.0, report.penalty_value,
                                   report.violations, report.mean_quotient,
                                   report.max_quotient, float("nan"), wall,
                                   extra=(("test_acc", acc),)))

    test_acc = _accuracy(spec, params, x_test, y_test)
    return SemisupResult(spec, params, rows, test_acc, diverged)
