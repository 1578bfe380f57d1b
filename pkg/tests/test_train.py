import io

import numpy as np
import pytest

from lipreg import nn as N
from lipreg import oracle as O
from lipreg import penalty as PN
from lipreg import tape as T
from lipreg import train as TR

from lipreg.perturb import EpsilonDist

pytestmark = pytest.mark.examples


def tiny_toy_cfg(**kw):
    base = dict(iterations=40, batch_size=16, reg_batch_size=32,
                penalty="none", log_every=10, grid_every=20, seed=0)
    base.update(kw)
    return TR.TrainConfig(**base)


def csv_bytes(rows):
    buf = io.StringIO()
    TR.write_metrics_csv(rows, buf)
    return buf.getvalue()


class TestTrainConfig:
    def test_defaults(self):
        cfg = TR.TrainConfig(iterations=100)
        assert cfg.batch_size == 64
        assert cfg.reg_batch_size == 1024
        assert cfg.critic_steps == 5
        assert cfg.lr == 2e-4
        assert (cfg.beta1, cfg.beta2) == (0.0, 0.9)

    def test_rejects_bad_counts(self):
        for field in ("iterations", "batch_size", "reg_batch_size",
                      "critic_steps", "log_every", "grid_every"):
            with pytest.raises(ValueError):
                TR.TrainConfig(**{**dict(iterations=10), field: 0})

    def test_rejects_bad_lr_and_penalty(self):
        with pytest.raises(ValueError):
            TR.TrainConfig(iterations=10, lr=0.0)
        with pytest.raises(ValueError):
            TR.TrainConfig(iterations=10, penalty="dropout")
        with pytest.raises(ValueError):
            TR.TrainConfig(iterations=10, ent_weight=-1.0)


class TestDataSampler:
    def test_toy_support(self):
        x = TR.DataSampler("toy-A4").sample(T.Rng(0), 5000)
        assert x.shape == (5000, 2)
        assert np.all(np.abs(x) <= 4.0)
        assert abs(x.mean()) < 0.1

    def test_eight_gaussians_near_centers(self):
        x = TR.DataSampler("eight-gaussians").sample(T.Rng(1), 2000)
        d = np.linalg.norm(x[:, None, :] - TR.MODE_CENTERS[None], axis=2)
        nearest = d.min(axis=1)
        assert nearest.max() < 10 * TR.MODE_STD
        # each of the eight components drawn at this sample size
        assert len(np.unique(d.argmin(axis=1))) == 8

    def test_mode_centers_layout(self):
        r = np.linalg.norm(TR.MODE_CENTERS, axis=1)
        assert np.allclose(r, TR.MODE_RADIUS)
        assert TR.MODE_CENTERS.shape == (8, 2)

    def test_two_moons_labeled(self):
        x, y = TR.DataSampler("two-moons").sample_labeled(T.Rng(2), 4000)
        assert set(np.unique(y)) == {0, 1}
        assert 0.4 < y.mean() < 0.6
        # class 0 rides the upper arc, class 1 the shifted lower arc
        assert x[y == 0, 1].mean() > 0.3
        assert x[y == 1, 1].mean() < 0.2
        assert np.all(x[:, 0] > -1.6) and np.all(x[:, 0] < 2.6)

    def test_sample_drops_labels(self):
        x = TR.DataSampler("two-moons").sample(T.Rng(2), 16)
        assert x.shape == (16, 2)

    def test_invalid_kinds(self):
        with pytest.raises(ValueError):
            TR.DataSampler("mnist")
        with pytest.raises(ValueError):
            TR.DataSampler("toy-A4").sample_labeled(T.Rng(0), 4)


class TestTargets:
    def test_target_values(self):
        assert TR.f_target((1.5, 0.0)) == 0.0
        assert TR.f_target((0.0, 0.0)) == 1.0
        assert TR.f_target((3.0, 3.0)) == 1.0

    def test_target_annulus_edges(self):
        assert TR.f_target((1.0, 0.0)) == 0.0
        assert TR.f_target((0.0, 2.0)) == 0.0
        assert TR.f_target((0.99, 0.0)) == 1.0

    def test_opt_values(self):
        assert TR.f_opt((0.0, 0.0)) == 1.0
        assert TR.f_opt((1.5, 0.0)) == 0.0
        assert TR.f_opt((2.5, 0.0)) == 1.0
        assert TR.f_opt((0.5, 0.0)) == 1.0
        assert abs(TR.f_opt((2.0, 0.0)) - 0.5) < 1e-15

    def test_batched_matches_scalar(self):
        pts = np.array([[0.3, 0.4], [1.2, -0.5], [-3.0, 1.0]])
        batched = TR.f_opt(pts)
        for p, v in zip(pts, batched):
            assert TR.f_opt(tuple(p)) == v

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            TR.f_target((5.0, 0.0))
        with pytest.raises(ValueError):
            TR.f_opt(np.array([[0.0, 0.0], [0.0, 4.5]]))

    def test_opt_gradient_grid_is_one_lipschitz(self):
        # kink circles included: every difference quotient of the cone
        # profile is at most 1, so the finite-difference grid is too
        grid = O.GridSpec(bounds=((-3.99, 3.99), (-3.99, 3.99)),
                          resolution=(128, 128))
        gmax, cells = O.grid_lipschitz(TR.f_opt, grid, mode="grad-norm")
        assert cells.shape == (128, 128)
        assert gmax <= 1.0 + 1e-9


class TestMetricsCsv:
    def rows(self):
        return [TR.MetricsRow(9, 0.5, -0.25, 0.125, 3, 1.5, 2.0, 4.0, 17.2),
                TR.MetricsRow(19, 0.25, 0.0, 0.0625, 1, 1.25, 1.5, 3.5, 16.9)]

    def test_header_and_layout(self):
        text = csv_bytes(self.rows())
        lines = text.splitlines()
        assert lines[0] == ("iter,critic_loss,gen_loss,penalty,violations,"
                            "mean_q,max_q,grid_lip,wall_ms")
        assert lines[1].split(",")[0] == "9"
        assert lines[1].split(",")[4] == "3"
        assert len(lines) == 3

    def test_wall_zeroed_by_default(self):
        text = csv_bytes(self.rows())
        assert text.splitlines()[1].endswith(",0.0")
        buf = io.StringIO()
        TR.write_metrics_csv(self.rows(), buf, zero_wall=False)
        assert buf.getvalue().splitlines()[1].endswith(",17.2")

    def test_extra_columns(self):
        rows = [TR.MetricsRow(0, 0.0, 0.0, 0.0, 0, 0.0, 0.0, 1.0, 0.0,
                              extra=(("modes_covered", 7.0),))]
        text = csv_bytes(rows)
        assert text.splitlines()[0].endswith(",modes_covered")
        assert text.splitlines()[1].endswith(",7.0")

    def test_mismatched_extras_rejected(self):
        rows = [TR.MetricsRow(0, 0, 0, 0, 0, 0, 0, 0, 0,
                              extra=(("a", 1.0),)),
                TR.MetricsRow(1, 0, 0, 0, 0, 0, 0, 0, 0,
                              extra=(("b", 1.0),))]
        with pytest.raises(ValueError):
            csv_bytes(rows)

    def test_path_target(self, tmp_path):
        p = tmp_path / "m.csv"
        TR.write_metrics_csv(self.rows(), p)
        assert p.read_text().startswith("iter,")


class TestLrSchedule:
    def test_endpoints_exact(self):
        assert TR.lr_at(0, 100, 2e-4) == 2e-4
        assert TR.lr_at(100, 100, 2e-4) == 0.0

    def test_linear(self):
        assert TR.lr_at(50, 100, 2e-4) == pytest.approx(1e-4)
        vals = [TR.lr_at(t, 10, 1.0) for t in range(11)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert np.allclose(np.diff(vals), -0.1)


class TestTrainToy:
    def test_smoke_rows_and_fields(self):
        res = TR.train_toy(tiny_toy_cfg())
        assert [r.iteration for r in res.rows] == [9, 19, 29, 39]
        assert not res.diverged
        assert np.isfinite(res.final_mse)
        assert res.grad_grid.shape == (256, 256)
        assert res.grid_lip == pytest.approx(res.grad_grid.max())
        for r in res.rows:
            assert np.isfinite(r.critic_loss)
            assert r.gen_loss == 0.0
        # grid refreshed on cadence: nan before iteration 19, set after
        assert np.isfinite(res.rows[1].grid_lip)

    def test_same_seed_same_csv(self):
        a = TR.train_toy(tiny_toy_cfg(seed=5))
        b = TR.train_toy(tiny_toy_cfg(seed=5))
        assert csv_bytes(a.rows) == csv_bytes(b.rows)
        c = TR.train_toy(tiny_toy_cfg(seed=6))
        assert csv_bytes(a.rows) != csv_bytes(c.rows)

    def test_alp_reports_bounded_violations(self):
        cfg = tiny_toy_cfg(penalty="alp",
                           alr=PN.AlrConfig(lam=1.0, k=1, form="squared"))
        res = TR.train_toy(cfg)
        for r in res.rows:
            assert 0 <= r.violations <= cfg.reg_batch_size
            assert r.max_q >= r.mean_q >= 0.0

    def test_lp_monitor_uses_grad_norms(self):
        cfg = tiny_toy_cfg(penalty="lp", alr=PN.AlrConfig(lam=10.0))
        res = TR.train_toy(cfg)
        assert not res.diverged
        for r in res.rows:
            assert 0 <= r.violations <= cfg.reg_batch_size
            assert r.penalty >= 0.0

    def test_gp_and_explicit_paths_run(self):
        for kind in ("gp", "explicit-random"):
            res = TR.train_toy(tiny_toy_cfg(iterations=10, log_every=5,
                                            grid_every=10, penalty=kind))
            assert not res.diverged and len(res.rows) == 2

    def test_batchnorm_variant_updates_running_stats(self):
        spec = N.MlpSpec(2, (8, 8), 1, batchnorm=(True, True))
        res = TR.train_toy(tiny_toy_cfg(iterations=10, log_every=5,
                                        grid_every=10), spec=spec)
        assert not res.diverged
        assert np.any(res.params.run_mean[0] != 0.0)

    def test_divergence_detected(self):
        with np.errstate(all="ignore"):
            res = TR.train_toy(tiny_toy_cfg(lr=1e80))
        assert res.diverged
        assert len(res.rows) < 4

    def test_mse_decreases(self):
        cfg = tiny_toy_cfg(iterations=600, batch_size=64, lr=1e-3,
                           log_every=100, grid_every=600, seed=3)
        res = TR.train_toy(cfg)
        assert res.rows[-1].critic_loss < res.rows[0].critic_loss
        assert res.final_mse < 0.2


class ZeroCritic:
    def __call__(self, tp, xn):
        n = xn.shape[0]
        return T.mul(T.sum_(xn, axis=-1, keepdims=True), tp.const(0.0))


def linear_critic(w):
    wa = np.asarray(w, dtype=np.float64)[:, None]

    def f(tp, xn):
        return T.matmul(xn, tp.const(wa))
    return f


def identity_gen(tp, zn):
    return T.add(zn, tp.const(np.zeros(2)))


class TestWganLosses:
    def test_zero_critic_all_zero(self):
        cfg = TR.TrainConfig(iterations=1, penalty="alp")
        tp = T.Tape()
        rng = T.Rng(0)
        xr = np.array([[1.0, 2.0], [3.0, 4.0]])
        z = np.array([[0.5, 0.5], [-0.5, -0.5]])
        c, g, rep = TR.wgan_losses(tp, cfg, ZeroCritic(), identity_gen,
                                   xr, z, rng)
        assert c.item() == 0.0
        assert g.item() == 0.0
        assert rep.penalty_value == 0.0

    def test_linear_critic_hand_value(self):
        w = np.array([2.0, -1.0])
        xr = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 3.0]])
        z = np.array([[1.0, 1.0], [0.0, 0.0], [-2.0, 1.0], [3.0, -1.0]])
        cfg = TR.TrainConfig(iterations=1, penalty="none")
        tp = T.Tape()
        c, g, _ = TR.wgan_losses(tp, cfg, linear_critic(w), identity_gen,
                                 xr, z, T.Rng(0))
        want = (z @ w).mean() - (xr @ w).mean()
        assert c.item() == pytest.approx(want, abs=1e-15)
        assert g.item() == pytest.approx(-(z @ w).mean(), abs=1e-15)

    def test_critic_loss_detached_from_generator(self):
        gen_spec = N.MlpSpec(2, (4,), 2)
        critic_spec = N.MlpSpec(2, (4,), 1)
        rng = T.Rng(7)
        pg = N.init_params(gen_spec, rng.spawn(1))
        pc = N.init_params(critic_spec, rng.spawn(2))

        def gen(tp, zn):
            return N.forward(tp, gen_spec, pg, zn, mode="train")

        def critic(tp, xn):
            return N.forward(tp, critic_spec, pc, xn, mode="train")

        cfg = TR.TrainConfig(iterations=1, penalty="alp")
        tp = T.Tape()
        xr = rng.normal((8, 2))
        z = rng.normal((8, 2))
        c_loss, g_loss, _ = TR.wgan_losses(tp, cfg, critic, gen, xr, z,
                                           T.Rng(1))
        gen_leaves = TR._bound_flat(N.bind(tp, pg))
        critic_leaves = TR._bound_flat(N.bind(tp, pc))
        for gr in T.grad(c_loss, gen_leaves):
            assert np.all(gr.a == 0.0)
        assert any(np.any(gr.a != 0.0) for gr in T.grad(g_loss, gen_leaves))
        assert any(np.any(gr.a != 0.0) for gr in T.grad(c_loss, critic_leaves))

    def test_penalty_adds_on_top_of_wasserstein(self):
        w = np.array([3.0, 4.0])
        xr = np.array([[1.0, 0.0], [0.0, 1.0]])
        z = np.array([[0.5, 0.5], [1.0, -1.0]])
        base_cfg = TR.TrainConfig(iterations=1, penalty="none")
        alp_cfg = TR.TrainConfig(iterations=1, penalty="alp",
                                 alr=PN.AlrConfig(lam=10.0, form="squared"))
        tp = T.Tape()
        c0, _, _ = TR.wgan_losses(tp, base_cfg, linear_critic(w),
                                  identity_gen, xr, z, T.Rng(3))
        tp = T.Tape()
        c1, _, rep = TR.wgan_losses(tp, alp_cfg, linear_critic(w),
                                    identity_gen, xr, z, T.Rng(3))
        # gradient norm 5 everywhere, quotient 5, hinge (5-1)^2 * 10
        assert rep.max_quotient == pytest.approx(5.0, rel=1e-9)
        assert c1.item() - c0.item() == pytest.approx(160.0, rel=1e-9)


class TestModeCoverage:
    def test_round_robin_covers_all(self):
        gen = lambda z: TR.MODE_CENTERS[np.arange(len(z)) % 8]
        assert TR.mode_coverage(gen, T.Rng(0)) == 8

    def test_collapsed_covers_one(self):
        gen = lambda z: np.tile(TR.MODE_CENTERS[2], (len(z), 1))
        assert TR.mode_coverage(gen, T.Rng(0)) == 1

    def test_off_mode_covers_none(self):
        gen = lambda z: np.zeros((len(z), 2))
        assert TR.mode_coverage(gen, T.Rng(0)) == 0

    def test_one_percent_threshold(self):
        def gen(z):
            pts = np.tile(TR.MODE_CENTERS[0], (len(z), 1))
            pts[100:] = 0.0  # exactly 1% stays on the mode
            return pts
        assert TR.mode_coverage(gen, T.Rng(0), n=10000) == 1

        def gen_less(z):
            pts = np.tile(TR.MODE_CENTERS[0], (len(z), 1))
            pts[99:] = 0.0
            return pts
        assert TR.mode_coverage(gen_less, T.Rng(0), n=10000) == 0


def tiny_wgan_cfg(**kw):
    base = dict(iterations=8, batch_size=16, critic_steps=2,
                penalty="alp", alr=PN.AlrConfig(lam=100.0, form="squared"),
                log_every=4, grid_every=4, seed=0)
    base.update(kw)
    return TR.TrainConfig(**base)


_TINY_CRITIC = N.MlpSpec(2, (8, 8), 1)
_TINY_GEN = N.MlpSpec(2, (8, 8), 2)
_TINY_GRID = O.GridSpec(resolution=(32, 32))


class TestTrainWgan:
    def run(self, **kw):
        return TR.train_wgan2d(tiny_wgan_cfg(**kw), critic_spec=_TINY_CRITIC,
                               gen_spec=_TINY_GEN, grid=_TINY_GRID)

    def test_smoke(self):
        res = self.run()
        assert not res.diverged
        assert [r.iteration for r in res.rows] == [3, 7]
        assert 0 <= res.modes <= 8
        assert np.isfinite(res.grid_lip)
        assert res.rows[-1].extra[0][0] == "modes_covered"
        for r in res.rows:
            assert 0 <= r.violations <= 2 * 16
        assert [it for it, _ in res.samples] == [3, 7]
        assert res.samples[0][1].shape == (1024, 2)

    def test_same_seed_same_csv(self):
        a = self.run(seed=4)
        b = self.run(seed=4)
        assert csv_bytes(a.rows) == csv_bytes(b.rows)

    def test_divergence_detected(self):
        with np.errstate(all="ignore"):
            res = self.run(lr=1e80)
        assert res.diverged

    def test_lp_and_gp_paths_run(self):
        for kind in ("lp", "gp", "explicit-random"):
            res = self.run(penalty=kind,
                           alr=PN.AlrConfig(lam=0.1))
            assert not res.diverged and len(res.rows) == 2


def semisup_cfg(**kw):
    base = dict(iterations=30, batch_size=32, penalty="alp",
                alr=PN.AlrConfig(K=0.0, lam=1.0, form="linear",
                                 eps=EpsilonDist.uniform(1.0, 10.0),
                                 fix_reference=True),
                dY="mean-squared-logit", ent_weight=1.0,
                log_every=10, seed=0)
    base.update(kw)
    return TR.TrainConfig(**base)


_TINY_CLS = N.MlpSpec(2, (8, 8), 2)


class TestTrainSemisup:
    def test_validation(self):
        with pytest.raises(ValueError):
            TR.train_semisup2d(semisup_cfg(penalty="lp"))
        with pytest.raises(ValueError):
            TR.train_semisup2d(semisup_cfg(
                alr=PN.AlrConfig(K=0.0, form="linear", fix_reference=False)))
        with pytest.raises(ValueError):
            TR.train_semisup2d(semisup_cfg(dY="abs-diff"))

    def test_smoke(self):
        res = TR.train_semisup2d(semisup_cfg(), spec=_TINY_CLS)
        assert not res.diverged
        assert 0.0 <= res.test_acc <= 1.0
        assert res.rows[-1].extra[0][0] == "test_acc"
        assert [r.iteration for r in res.rows] == [9, 19, 29]

    def test_same_seed_same_csv(self):
        a = TR.train_semisup2d(semisup_cfg(seed=2), spec=_TINY_CLS)
        b = TR.train_semisup2d(semisup_cfg(seed=2), spec=_TINY_CLS)
        assert csv_bytes(a.rows) == csv_bytes(b.rows)

    def test_supervised_baseline_ignores_regularizer_config(self):
        # with the penalty off, the quotient settings must have no effect
        a = TR.train_semisup2d(semisup_cfg(penalty="none", ent_weight=0.0),
                               spec=_TINY_CLS)
        b = TR.train_semisup2d(semisup_cfg(penalty="none", ent_weight=0.0,
                                           alr=PN.AlrConfig(K=5.0, lam=1e9,
                                                            k=7)),
                               spec=_TINY_CLS)
        assert csv_bytes(a.rows) == csv_bytes(b.rows)
        for row in a.rows:
            assert row.penalty == 0.0 and row.violations == 0

    def test_vat_route_matches_lds_term(self):
        # replay the first iteration by hand: a kl metric with fixed
        # epsilon must charge exactly lambda times the smoothness term
        from lipreg import penalty as P
        from lipreg.metrics import MetricPair

        cfg = semisup_cfg(iterations=1, log_every=1, dY="kl-divergence",
                          alr=PN.AlrConfig(K=0.0, lam=1.0, form="linear",
                                           eps=EpsilonDist.fixed(0.5),
                                           fix_reference=True))
        res = TR.train_semisup2d(cfg, spec=_TINY_CLS)

        rng = T.Rng(cfg.seed)
        rng_init, rng_datagen, rng_batch, rng_pen = (
            rng.spawn(1), rng.spawn(2), rng.spawn(3), rng.spawn(4))
        sampler = TR.DataSampler("two-moons")
        x_pool, y_pool = sampler.sample_labeled(rng_datagen, 1000)
        sampler.sample_labeled(rng_datagen, 200)
        lab_idx = np.concatenate([np.nonzero(y_pool == c)[0][:4]
                                  for c in (0, 1)])
        unl_mask = np.ones(len(x_pool), dtype=bool)
        unl_mask[lab_idx] = False
        x_unl = x_pool[unl_mask]
        params = N.init_params(_TINY_CLS, rng_init)
        bi = rng_batch.integers(0, len(x_unl), (cfg.batch_size,))
        xu = x_unl[bi]

        def fc(tape, xn):
            return N.forward(tape, _TINY_CLS, params, xn, mode="train")

        tp = T.Tape()
        lds = P.lds_vat(tp, fc, xu, MetricPair("euclidean", "kl-divergence"),
                        cfg.alr.eps, cfg.alr.xi, cfg.alr.k, rng_pen)
        assert res.rows[0].penalty == cfg.alr.lam * lds.item()

    def test_divergence_detected(self):
        with np.errstate(all="ignore"):
            res = TR.train_semisup2d(semisup_cfg(lr=1e80), spec=_TINY_CLS)
        assert res.diverged

    @pytest.mark.slow
    def test_regularization_beats_supervised_only(self):
        # smoothing radius sized to the moons (the data spans a few
        # units, so a fixed half-unit epsilon, not image-scale values)
        base_acc, reg_acc = [], []
        for seed in range(5):
            base = TR.train_semisup2d(
                semisup_cfg(iterations=2000, batch_size=32, penalty="none",
                            ent_weight=0.0, lr=2e-3, log_every=2000,
                            seed=seed))
            reg = TR.train_semisup2d(
                semisup_cfg(iterations=2000, batch_size=32, lr=2e-3,
                            log_every=2000, seed=seed,
                            dY="kl-divergence",
                            alr=PN.AlrConfig(K=0.0, lam=1.0, form="linear",
                                             eps=EpsilonDist.fixed(0.5),
                                             fix_reference=True)))
            base_acc.append(base.test_acc)
            reg_acc.append(reg.test_acc)
        assert np.median(reg_acc) > np.median(base_acc)
