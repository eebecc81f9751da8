//! One training iteration per regime.

use indexmap::IndexMap;

use super::config::Regime;
use super::state::TrainState;
use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::losses::{da_energy, da_l1_grad, da_l2_grad, gan_loss_grad, generator_loss_grad, GeneratorLoss, LossReport};
use crate::nets::{role, Mode, Model};
use crate::optim::{Direction, Optimizer};
use crate::tensor::Tensor;

/// Loss reports of one step and the optimizers that wrote parameters, in
/// write order.
#[derive(Clone, Debug, Default)]
pub struct StepOutcome {
    pub reports: Vec<LossReport>,
    pub writes: Vec<&'static str>,
}

fn column(v: Vec<f32>) -> Tensor<f32> {
    let n = v.len();
    Tensor::from_vec(&[n, 1], v)
}

fn finite(report: &LossReport, iteration: u64) -> Result<()> {
    if report.value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iteration,
            what: format!("{} = {}", report.name, report.value),
        })
    }
}

fn same_batch(parts: &[&Tensor<f32>]) -> Result<usize> {
    let n = parts[0].batch();
    if parts.iter().any(|t| t.batch() != n) {
        let sizes: Vec<usize> = parts.iter().map(|t| t.batch()).collect();
        return Err(Error::Invalid(format!("batch sizes differ: {sizes:?}")));
    }
    Ok(n)
}

fn require_regime(state: &TrainState, allowed: &[Regime], op: &str) -> Result<()> {
    if allowed.contains(&state.config.regime) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{op} does not apply to the {} regime", state.config.regime)))
    }
}

struct Ctx<'a> {
    model: &'a mut Model<f32>,
    opts: &'a mut IndexMap<String, Optimizer>,
    lr: f64,
    kind: GeneratorLoss,
    t: u64,
}

impl Ctx<'_> {
    fn step(&mut self, name: &str, grads: &crate::nets::Grads<f32>, dir: Direction) {
        self.opts
            .get_mut(name)
            .unwrap_or_else(|| panic!("no {name} optimizer"))
            .step(&mut self.model.params, grads, self.lr, dir);
    }
}

/// Discriminator ascent then generator descent for one generator /
/// discriminator pair.
fn adversarial(ctx: &mut Ctx<'_>, g: &str, d: &str, real: &Tensor<f32>, z: &Tensor<f32>) -> Result<[LossReport; 2]> {
    let m = &mut *ctx.model;
    let g_fwd = m.forward(g, z, Mode::Train)?;
    let fake = g_fwd.output().clone();

    let d_real = m.forward(d, real, Mode::Train)?;
    let d_fake = m.forward(d, &fake, Mode::Train)?;
    let (l, gr, gf) = gan_loss_grad(d_real.output().data(), d_fake.output().data())?;
    finite(&l, ctx.t)?;
    let mut grads = m.grads_for(&[d]);
    m.backward(d, &d_real, column(gr), &mut grads, false);
    m.backward(d, &d_fake, column(gf), &mut grads, false);
    ctx.step("disc", &grads, Direction::Ascend);
    let m = &mut *ctx.model;
    m.commit_running_stats(d, &d_real);
    m.commit_running_stats(d, &d_fake);

    let d_fake = m.forward(d, &fake, Mode::Train)?;
    let (gl, gg) = generator_loss_grad(d_fake.output().data(), ctx.kind)?;
    finite(&gl, ctx.t)?;
    let mut grads = m.grads_for(&[g]);
    let dx = m
        .backward(d, &d_fake, column(gg), &mut grads, true)
        .expect("input gradient requested");
    m.backward(g, &g_fwd, dx, &mut grads, false);
    ctx.step("gen", &grads, Direction::Descend);
    let m = &mut *ctx.model;
    m.commit_running_stats(d, &d_fake);
    m.commit_running_stats(g, &g_fwd);
    Ok([l, gl])
}

/// One discriminator-ascent, generator-descent update of the `g`/`d`
/// pair using the optimizers named "disc" and "gen" in `opts`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adversarial_update(
    model: &mut Model<f32>,
    opts: &mut IndexMap<String, Optimizer>,
    lr: f64,
    kind: GeneratorLoss,
    t: u64,
    (g, d): (&str, &str),
    real: &Tensor<f32>,
    z: &Tensor<f32>,
) -> Result<[LossReport; 2]> {
    let mut ctx = Ctx { model, opts, lr, kind, t };
    adversarial(&mut ctx, g, d, real, z)
}

fn finish(state: &mut TrainState, t: u64, outcome: &StepOutcome) {
    for r in &outcome.reports {
        state.history.push(r.log_line(t));
    }
    state.iteration = t + 1;
}

fn ctx(state: &mut TrainState) -> Ctx<'_> {
    Ctx {
        lr: state.config.learning_rate,
        kind: state.config.generator_loss,
        t: state.iteration,
        model: &mut state.model,
        opts: &mut state.optimizers,
    }
}

/// Single-domain or combined-dataset step: discriminator ascent on L with
/// the generator frozen, then generator descent against the updated
/// discriminator.
pub fn gan_step(state: &mut TrainState, real: &Tensor<f32>, z: &Tensor<f32>) -> Result<StepOutcome> {
    require_regime(state, &[Regime::Single, Regime::Combined], "gan_step")?;
    same_batch(&[real, z])?;
    let t = state.iteration;
    let reports = adversarial(&mut ctx(state), role::G, role::D, real, z)?;
    let outcome = StepOutcome {
        reports: reports.to_vec(),
        writes: vec!["disc", "gen"],
    };
    finish(state, t, &outcome);
    Ok(outcome)
}

/// Coupled step. Tied blocks are shared slots, so their gradients are the
/// sum of both domains' contributions.
pub fn cogan_step(
    state: &mut TrainState,
    real_s: &Tensor<f32>,
    real_l: &Tensor<f32>,
    z_s: &Tensor<f32>,
    z_l: &Tensor<f32>,
) -> Result<StepOutcome> {
    require_regime(state, &[Regime::Cogan], "cogan_step")?;
    same_batch(&[real_s, real_l, z_s, z_l])?;
    let t = state.iteration;
    let mut c = ctx(state);
    let m = &mut *c.model;
    let pairs = [(role::GS, role::DS, real_s, z_s, "_s"), (role::GL, role::DL, real_l, z_l, "_l")];

    let mut g_fwds = Vec::new();
    let mut d_fwds = Vec::new();
    let mut reports = Vec::new();
    let mut grads = m.grads_for(&[role::DS, role::DL]);
    for &(g, d, real, z, suffix) in &pairs {
        let g_fwd = m.forward(g, z, Mode::Train)?;
        let d_real = m.forward(d, real, Mode::Train)?;
        let d_fake = m.forward(d, g_fwd.output(), Mode::Train)?;
        let (l, gr, gf) = gan_loss_grad(d_real.output().data(), d_fake.output().data())?;
        finite(&l, t)?;
        m.backward(d, &d_real, column(gr), &mut grads, false);
        m.backward(d, &d_fake, column(gf), &mut grads, false);
        reports.push(l.with_suffix(suffix));
        g_fwds.push(g_fwd);
        d_fwds.push((d, d_real, d_fake));
    }
    c.step("disc", &grads, Direction::Ascend);
    let m = &mut *c.model;
    for (d, d_real, d_fake) in &d_fwds {
        m.commit_running_stats(d, d_real);
        m.commit_running_stats(d, d_fake);
    }

    let mut grads = m.grads_for(&[role::GS, role::GL]);
    let mut fresh = Vec::new();
    for (&(g, d, _, _, suffix), g_fwd) in pairs.iter().zip(&g_fwds) {
        let d_fake = m.forward(d, g_fwd.output(), Mode::Train)?;
        let (gl, gg) = generator_loss_grad(d_fake.output().data(), c.kind)?;
        finite(&gl, t)?;
        let dx = m
            .backward(d, &d_fake, column(gg), &mut grads, true)
            .expect("input gradient requested");
        m.backward(g, g_fwd, dx, &mut grads, false);
        reports.push(gl.with_suffix(suffix));
        fresh.push((d, d_fake));
    }
    c.step("gen", &grads, Direction::Descend);
    let m = &mut *c.model;
    for (d, d_fake) in &fresh {
        m.commit_running_stats(d, d_fake);
    }
    for (&(g, ..), g_fwd) in pairs.iter().zip(&g_fwds) {
        m.commit_running_stats(g, g_fwd);
    }

    let outcome = StepOutcome {
        reports,
        writes: vec!["disc", "gen"],
    };
    finish(state, t, &outcome);
    Ok(outcome)
}

/// Trunk plus realness head on `x`; returns both forwards.
fn realness(m: &Model<f32>, x: &Tensor<f32>) -> Result<(crate::nets::Forward<f32>, crate::nets::Forward<f32>)> {
    let a = m.forward(role::TRUNK, x, Mode::Train)?;
    let f = m.forward(role::REALNESS, a.output(), Mode::Train)?;
    Ok((a, f))
}

/// Backpropagates a realness-score gradient through head and trunk.
fn realness_backward(
    m: &Model<f32>,
    fwd: &(crate::nets::Forward<f32>, crate::nets::Forward<f32>),
    grad: Vec<f32>,
    grads: &mut crate::nets::Grads<f32>,
    need_input: bool,
) -> Option<Tensor<f32>> {
    let da = m
        .backward(role::REALNESS, &fwd.1, column(grad), grads, true)
        .expect("input gradient requested");
    m.backward(role::TRUNK, &fwd.0, da, grads, need_input)
}

/// One descent step of the classifier (trunk plus classifier head) under
/// the softmax loss on `x` with the given domain labels.
fn classifier_step(ctx: &mut Ctx<'_>, x: &Tensor<f32>, y: &[usize], suffix: &str) -> Result<LossReport> {
    let m = &mut *ctx.model;
    let a = m.forward(role::TRUNK, x, Mode::Train)?;
    let c = m.forward(role::CLASSIFIER, a.output(), Mode::Train)?;
    let (l2, g) = da_l2_grad(c.output(), y)?;
    finite(&l2, ctx.t)?;
    let mut grads = m.grads_for(&[role::TRUNK, role::CLASSIFIER]);
    let da = m
        .backward(role::CLASSIFIER, &c, g, &mut grads, true)
        .expect("input gradient requested");
    m.backward(role::TRUNK, &a, da, &mut grads, false);
    ctx.step("cls", &grads, Direction::Descend);
    let m = &mut *ctx.model;
    m.commit_running_stats(role::TRUNK, &a);
    m.commit_running_stats(role::CLASSIFIER, &c);
    Ok(l2.with_suffix(suffix))
}

/// Classifier steps 5 (real images) and 6 (generated images), each gated
/// by the variant flags; step 6 also waits for the lazy start iteration.
/// Does not advance the iteration counter.
pub fn classifier_phase(
    state: &mut TrainState,
    real: (&Tensor<f32>, &[Domain]),
    fake: (&Tensor<f32>, &[Domain]),
) -> Result<StepOutcome> {
    require_regime(state, &[Regime::Dann], "classifier_phase")?;
    let (train_real, train_fake, lazy) = state.config.variant.triple(state.iterations_per_epoch);
    let t = state.iteration;
    let mut c = ctx(state);
    let mut out = StepOutcome::default();
    if train_real {
        let y: Vec<usize> = real.1.iter().map(|d| d.index()).collect();
        out.reports.push(classifier_step(&mut c, real.0, &y, "_real")?);
        out.writes.push("cls_real");
    }
    if train_fake && t >= lazy {
        let y: Vec<usize> = fake.1.iter().map(|d| d.index()).collect();
        out.reports.push(classifier_step(&mut c, fake.0, &y, "_fake")?);
        out.writes.push("cls_fake");
    }
    Ok(out)
}

/// Domain-adaptation iteration: (3) ascent on trunk and realness head
/// under L1, (4) descent on each generator with its images labelled real,
/// (5) classifier descent on real images, (6) classifier descent on the
/// images generated in step 3.
pub fn dann_step(
    state: &mut TrainState,
    real_s: &Tensor<f32>,
    real_l: &Tensor<f32>,
    z_s: &Tensor<f32>,
    z_l: &Tensor<f32>,
) -> Result<StepOutcome> {
    require_regime(state, &[Regime::Dann], "dann_step")?;
    let n = same_batch(&[real_s, real_l, z_s, z_l])?;
    let t = state.iteration;
    let mut out = StepOutcome::default();
    let mut c = ctx(state);

    // Both domains share each forward so batch statistics see both.
    let m = &mut *c.model;
    let gs = m.forward(role::GS, z_s, Mode::Train)?;
    let gl = m.forward(role::GL, z_l, Mode::Train)?;
    let reals = Tensor::concat_batch(&[real_s, real_l]);
    let fakes = Tensor::concat_batch(&[gs.output(), gl.output()]);

    // Step 3.
    let on_real = realness(m, &reals)?;
    let on_fake = realness(m, &fakes)?;
    let (rs, rl) = on_real.1.output().data().split_at(n);
    let (fs, fl) = on_fake.1.output().data().split_at(n);
    let (l1, [g_rs, g_rl, g_fs, g_fl]) = da_l1_grad(rs, rl, fs, fl)?;
    finite(&l1, t)?;
    let mut grads = m.grads_for(&[role::TRUNK, role::REALNESS]);
    realness_backward(m, &on_real, [g_rs, g_rl].concat(), &mut grads, false);
    realness_backward(m, &on_fake, [g_fs, g_fl].concat(), &mut grads, false);
    c.step("disc", &grads, Direction::Ascend);
    out.writes.push("disc");
    let m = &mut *c.model;
    for fwd in [&on_real, &on_fake] {
        m.commit_running_stats(role::TRUNK, &fwd.0);
        m.commit_running_stats(role::REALNESS, &fwd.1);
    }

    // Step 4, against the discriminator updated in step 3.
    let on_fake = realness(m, &fakes)?;
    let (fs, fl) = on_fake.1.output().data().split_at(n);
    let (g_s, dg_s) = generator_loss_grad(fs, c.kind)?;
    let (g_l, dg_l) = generator_loss_grad(fl, c.kind)?;
    finite(&g_s, t)?;
    finite(&g_l, t)?;
    let mut grads = m.grads_for(&[role::GS, role::GL]);
    let dx = realness_backward(m, &on_fake, [dg_s, dg_l].concat(), &mut grads, true)
        .expect("input gradient requested");
    m.backward(role::GS, &gs, dx.slice_batch(0, n), &mut grads, false);
    m.backward(role::GL, &gl, dx.slice_batch(n, 2 * n), &mut grads, false);
    c.step("gen_s", &grads, Direction::Descend);
    c.step("gen_l", &grads, Direction::Descend);
    out.writes.extend(["gen_s", "gen_l"]);
    let m = &mut *c.model;
    m.commit_running_stats(role::TRUNK, &on_fake.0);
    m.commit_running_stats(role::REALNESS, &on_fake.1);
    m.commit_running_stats(role::GS, &gs);
    m.commit_running_stats(role::GL, &gl);
    out.reports.extend([l1.clone(), g_s.with_suffix("_s"), g_l.with_suffix("_l")]);

    // Steps 5 and 6.
    let domains: Vec<Domain> = std::iter::repeat_n(Domain::S, n).chain(std::iter::repeat_n(Domain::L, n)).collect();
    let cls = classifier_phase(state, (&reals, &domains), (&fakes, &domains))?;
    out.reports.extend(cls.reports.iter().cloned());
    if let Some(l2) = cls.reports.first() {
        out.reports.push(da_energy(&l1, l2)?);
    }
    out.writes.extend(cls.writes);
    finish(state, t, &out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use crate::train::config::{variant_of, TrainConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            resolution: 16,
            z_dim: 8,
            base_channels: 4,
            classifier_width: 8,
            batch_size: 4,
            sample_count: 4,
            ..TrainConfig::default()
        }
    }

    fn images(seed: u64, n: usize, shift: f32) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = crate::train::state::sample_z(&mut rng, n, 3 * 16 * 16);
        z.map(|v| (0.5 * v + shift).clamp(-1.0, 1.0)).reshape(&[n, 3, 16, 16])
    }

    fn slots_of(state: &TrainState, roles: &[&str]) -> Vec<Tensor<f32>> {
        state.model.union(roles).iter().map(|&s| state.model.params.get(s).clone()).collect()
    }

    #[test]
    fn gan_step_changes_both_networks_and_logs_two_lines() {
        let mut s = TrainState::new(tiny(Regime::Single)).unwrap();
        let (g0, d0) = (slots_of(&s, &[role::G]), slots_of(&s, &[role::D]));
        let z = s.next_z(4);
        let out = gan_step(&mut s, &images(1, 4, 0.0), &z).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert_ne!(slots_of(&s, &[role::G]), g0);
        assert_ne!(slots_of(&s, &[role::D]), d0);
        assert_eq!(s.iteration, 1);
        assert_eq!(s.history.len(), 2);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise() {
        for regime in [Regime::Single, Regime::Cogan, Regime::Dann] {
            let mut cfg = tiny(regime);
            cfg.learning_rate = 0.0;
            let mut s = TrainState::new(cfg).unwrap();
            let trainable: Vec<usize> = (0..s.model.params.len()).filter(|&i| s.model.params.is_trainable(i)).collect();
            let before: Vec<_> = trainable.iter().map(|&i| s.model.params.get(i).clone()).collect();
            let (zs, zl) = (s.next_z(4), s.next_z(4));
            let (a, b) = (images(2, 4, 0.3), images(3, 4, -0.3));
            match regime {
                Regime::Single => gan_step(&mut s, &a, &zs).map(|_| ()),
                Regime::Cogan => cogan_step(&mut s, &a, &b, &zs, &zl).map(|_| ()),
                _ => dann_step(&mut s, &a, &b, &zs, &zl).map(|_| ()),
            }
            .unwrap();
            let after: Vec<_> = trainable.iter().map(|&i| s.model.params.get(i).clone()).collect();
            assert_eq!(before, after, "{regime}");
        }
    }

    #[test]
    fn dann_write_order_follows_the_algorithm() {
        let mut s = TrainState::new(tiny(Regime::Dann)).unwrap();
        let (zs, zl) = (s.next_z(4), s.next_z(4));
        let out = dann_step(&mut s, &images(4, 4, 0.4), &images(5, 4, -0.4), &zs, &zl).unwrap();
        assert_eq!(out.writes, ["disc", "gen_s", "gen_l", "cls_real", "cls_fake"]);
        let names: Vec<String> = out.reports.iter().map(|r| r.name.to_string()).collect();
        assert_eq!(names, ["L1", "G", "G", "L2", "L2", "E"]);
    }

    #[test]
    fn variant_flags_gate_classifier_steps() {
        let cases = [
            (Variant::NoClassifierTraining, vec!["disc", "gen_s", "gen_l"]),
            (Variant::NoFakeClassifierTraining, vec!["disc", "gen_s", "gen_l", "cls_real"]),
            (Variant::NoRealClassifierTraining, vec!["disc", "gen_s", "gen_l", "cls_fake"]),
        ];
        for (v, want) in cases {
            let mut cfg = tiny(Regime::Dann);
            cfg.variant = variant_of(v);
            let mut s = TrainState::new(cfg).unwrap();
            let (zs, zl) = (s.next_z(4), s.next_z(4));
            let out = dann_step(&mut s, &images(4, 4, 0.4), &images(5, 4, -0.4), &zs, &zl).unwrap();
            assert_eq!(out.writes, want, "{v:?}");
        }
    }

    #[test]
    fn cogan_tied_update_is_sum_of_domain_gradients() {
        let mut cfg = tiny(Regime::Cogan);
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.learning_rate = 0.05;
        let mut s = TrainState::new(cfg).unwrap();
        let (zs, zl) = (s.next_z(4), s.next_z(4));
        let (a, b) = (images(6, 4, 0.2), images(7, 4, -0.2));

        // Manual generator gradients, one domain at a time, against the
        // discriminators after their own update.
        let mut probe = s.clone();
        let mut disc_only = probe.clone();
        disc_only.config.learning_rate = 0.05;
        let tied = s.model.net(role::GS).binding["seed.w"];
        assert_eq!(tied, s.model.net(role::GL).binding["seed.w"]);
        cogan_step(&mut probe, &a, &b, &zs, &zl).unwrap();

        // Replay the discriminator half by hand.
        let m = &mut disc_only.model;
        let mut grads = m.grads_for(&[role::DS, role::DL]);
        let mut fwds = Vec::new();
        for (g, d, real, z) in [(role::GS, role::DS, &a, &zs), (role::GL, role::DL, &b, &zl)] {
            let gf = m.forward(g, z, Mode::Train).unwrap();
            let dr = m.forward(d, real, Mode::Train).unwrap();
            let df = m.forward(d, gf.output(), Mode::Train).unwrap();
            let (_, gr, gfk) = gan_loss_grad(dr.output().data(), df.output().data()).unwrap();
            m.backward(d, &dr, column(gr), &mut grads, false);
            m.backward(d, &df, column(gfk), &mut grads, false);
            fwds.push(gf);
        }
        disc_only.optimizers["disc"].step(&mut disc_only.model.params, &grads, 0.05, Direction::Ascend);
        let m = &disc_only.model;
        let mut total = Tensor::<f32>::zeros(m.params.get(tied).shape());
        for ((g, d), gf) in [(role::GS, role::DS), (role::GL, role::DL)].into_iter().zip(&fwds) {
            let mut grads = m.grads_for(&[g]);
            let df = m.forward(d, gf.output(), Mode::Train).unwrap();
            let (_, gg) = generator_loss_grad(df.output().data(), GeneratorLoss::NonSaturating).unwrap();
            let dx = m.backward(d, &df, column(gg), &mut grads, true).unwrap();
            m.backward(g, gf, dx, &mut grads, false);
            for (t, v) in total.data_mut().iter_mut().zip(grads.get(tied).unwrap().data()) {
                *t += v;
            }
        }
        let before = s.model.params.get(tied);
        let after = probe.model.params.get(tied);
        for ((b, a), g) in before.data().iter().zip(after.data()).zip(total.data()) {
            let want: f32 = b - 0.05 * g;
            assert!((a - want).abs() <= 1e-6 * (1.0 + want.abs()), "{a} vs {want}");
        }
    }

    #[test]
    fn regime_mismatch_is_rejected() {
        let mut s = TrainState::new(tiny(Regime::Single)).unwrap();
        let z = s.next_z(4);
        let x = images(1, 4, 0.0);
        assert!(cogan_step(&mut s, &x, &x, &z, &z).is_err());
        assert!(dann_step(&mut s, &x, &x, &z, &z).is_err());
        let z3 = s.next_z(3);
        assert!(gan_step(&mut s, &x, &z3).is_err());
    }
}
