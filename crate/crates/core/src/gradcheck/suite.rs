//! The full gradient-check suite: every primitive op, the three
//! enhancement blocks, a network with micro widths and the losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, check_with_params, random_projection, GradCheckConfig, GradCheckReport};
use crate::autograd::{batch_norm, concat, Conv2dGeom, RunningStats, Tape, Var};
use crate::blocks::{MiniAspp, MiniAsppSpec, Psa, PsaSpec, Sppm, SppmSpec};
use crate::error::Result;
use crate::labels::{LabelMap, IGNORE};
use crate::loss::{combined_loss, dice_loss, focal_loss, update_class_weights, LossConfig};
use crate::network::{Model, NetworkConfig};
use crate::nn::{Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub report: GradCheckReport,
}

struct Runner {
    seed: u64,
    cfg: GradCheckConfig,
    rows: Vec<SuiteRow>,
}

impl Runner {
    fn next_seed(&mut self) -> u64 {
        self.seed += 1;
        self.seed
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor<f64> {
        let seed = self.next_seed();
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed)).expect("nonzero extents")
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.randn(shape).map(|v| v.abs() + 0.5)
    }

    /// Checks `f` composed with a fixed random projection.
    fn op<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let seed = self.next_seed();
        let report = check_gradients(|_, v| random_projection(f(v)?, seed), inputs, &self.cfg)?;
        self.push(name, report);
        Ok(())
    }

    fn scalar<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let report = check_gradients(f, inputs, &self.cfg)?;
        self.push(name, report);
        Ok(())
    }

    fn push(&mut self, name: &str, report: GradCheckReport) {
        log::debug!("{name}: {report:?}");
        self.rows.push(SuiteRow { name: name.to_string(), report });
    }
}

fn labels(seed: u64, n: usize, k: usize, h: usize, w: usize) -> Result<LabelMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data =
        (0..n * h * w).map(|_| if rng.random::<f64>() < 0.1 { IGNORE } else { rng.random_range(0..k as u8) }).collect();
    LabelMap::new([n, h, w], data)
}

/// Runs every check at micro shapes in f64. Rows come back in a fixed
/// order, and identical seeds give identical reports.
pub fn run_suite(seed: u64, tol: f64) -> Result<Vec<SuiteRow>> {
    let cfg = GradCheckConfig { tol, seed, ..GradCheckConfig::default() };
    let mut r = Runner { seed: seed.wrapping_mul(1_000_003), cfg, rows: Vec::new() };

    let a = r.randn(&[2, 3, 4]);
    let b = r.randn(&[2, 1, 4]);
    let p = r.positive(&[2, 1, 4]);
    r.op("add (broadcast)", &[a.clone(), b.clone()], |v| v[0].add(v[1]))?;
    r.op("sub (broadcast)", &[a.clone(), b.clone()], |v| v[0].sub(v[1]))?;
    r.op("mul (broadcast)", &[a.clone(), b.clone()], |v| v[0].mul(v[1]))?;
    r.op("div (broadcast)", &[a.clone(), p.clone()], |v| v[0].div(v[1]))?;
    r.op("add_scalar/mul_scalar/neg", std::slice::from_ref(&a), |v| Ok(v[0].mul_scalar(-1.5).add_scalar(2.0).neg()))?;
    r.op("exp", std::slice::from_ref(&a), |v| Ok(v[0].exp()))?;
    r.op("log", std::slice::from_ref(&p), |v| Ok(v[0].log()))?;
    r.op("sqrt", std::slice::from_ref(&p), |v| Ok(v[0].sqrt()))?;
    r.op("powf", std::slice::from_ref(&p), |v| Ok(v[0].powf(2.5)))?;
    r.op("relu", std::slice::from_ref(&a), |v| Ok(v[0].relu()))?;
    r.op("sigmoid", std::slice::from_ref(&a), |v| Ok(v[0].sigmoid()))?;

    let x4 = r.randn(&[2, 3, 4, 5]);
    r.op("softmax", std::slice::from_ref(&x4), |v| v[0].softmax(1))?;
    r.op("log_softmax", std::slice::from_ref(&x4), |v| v[0].log_softmax(3))?;
    r.op("sum_axes", std::slice::from_ref(&x4), |v| v[0].sum_axes(&[0, 2], true))?;
    r.op("mean_axes", std::slice::from_ref(&x4), |v| v[0].mean_axes(&[1, 3], false))?;
    r.scalar("sum_all", std::slice::from_ref(&x4), |_, v| Ok(v[0].sum_all()))?;
    r.scalar("mean_all", std::slice::from_ref(&x4), |_, v| Ok(v[0].mean_all()))?;
    r.op("reshape", std::slice::from_ref(&x4), |v| v[0].reshape(&[6, 20]))?;
    r.op("permute", std::slice::from_ref(&x4), |v| v[0].permute(&[2, 0, 3, 1]))?;
    r.op("transpose", std::slice::from_ref(&x4), |v| v[0].transpose(1, 2))?;
    let y4 = r.randn(&[2, 2, 4, 5]);
    r.op("concat", &[x4, y4], |v| concat(&[v[0], v[1]], 1))?;
    let m1 = r.randn(&[2, 5, 3]);
    let m2 = r.randn(&[2, 3, 4]);
    r.op("matmul", &[m1, m2], |v| v[0].matmul(v[1]))?;

    let img = r.randn(&[2, 3, 8, 7]);
    for (name, geom) in [
        ("conv2d 3x3", Conv2dGeom::new(1, 1, 1)),
        ("conv2d 3x3 stride 2", Conv2dGeom::new(2, 1, 1)),
        ("conv2d 3x3 dilation 2", Conv2dGeom::new(1, 2, 2)),
    ] {
        let w = r.randn(&[4, 3, 3, 3]);
        let bias = r.randn(&[4]);
        r.op(name, &[img.clone(), w, bias], move |v| v[0].conv2d(v[1], Some(v[2]), geom))?;
    }
    let w1 = r.randn(&[5, 3, 1, 1]);
    r.op("conv2d 1x1 no bias", &[img.clone(), w1], |v| v[0].conv2d(v[1], None, Conv2dGeom::default()))?;
    r.op("max_pool2d", std::slice::from_ref(&img), |v| v[0].max_pool2d(2, 2))?;
    r.op("adaptive_avg_pool2d", std::slice::from_ref(&img), |v| v[0].adaptive_avg_pool2d(3, 2))?;
    r.op("adaptive_avg_pool2d strip", std::slice::from_ref(&img), |v| v[0].adaptive_avg_pool2d(8, 1))?;
    r.op("upsample_bilinear up", std::slice::from_ref(&img), |v| v[0].upsample_bilinear(16, 11))?;
    r.op("upsample_bilinear down", std::slice::from_ref(&img), |v| v[0].upsample_bilinear(5, 3))?;

    let bn_x = r.randn(&[2, 3, 4, 4]);
    let gamma = r.randn(&[3]);
    let beta = r.randn(&[3]);
    let running = RunningStats { mean: r.randn(&[3]), var: r.positive(&[3]) };
    for (name, training) in [("batch_norm train", true), ("batch_norm eval", false)] {
        let running = running.clone();
        r.op(name, &[bn_x.clone(), gamma.clone(), beta.clone()], move |v| {
            batch_norm(v[0], v[1], v[2], &mut running.clone(), training, 1e-5, 0.1)
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(r.next_seed());
    let mut store = ParamStore::<f64>::new();
    let aspp = MiniAspp::new(
        &mut store,
        &mut rng,
        "aspp",
        MiniAsppSpec { in_channels: 8, branch_channels: 4, out_channels: 8 },
    )?;
    let x = r.randn(&[2, 8, 16, 16]);
    let proj = r.next_seed();
    let report = check_with_params(&store, Mode::Train, &[x], &r.cfg, |fwd, v| {
        random_projection(aspp.forward(fwd, v[0])?, proj)
    })?;
    r.push("Mini-ASPP", report);

    let mut store = ParamStore::<f64>::new();
    let psa = Psa::new(&mut store, &mut rng, "psa", PsaSpec::new(8))?;
    let x = r.randn(&[2, 8, 16, 16]);
    let proj = r.next_seed();
    let report = check_with_params(&store, Mode::Train, &[x], &r.cfg, |fwd, v| {
        random_projection(psa.forward(fwd, v[0])?, proj)
    })?;
    r.push("PSA", report);

    let mut store = ParamStore::<f64>::new();
    let sppm = Sppm::new(&mut store, &mut rng, "sppm", SppmSpec::new(8, 2, 8))?;
    let x = r.randn(&[2, 8, 16, 16]);
    let proj = r.next_seed();
    let report = check_with_params(&store, Mode::Train, &[x], &r.cfg, |fwd, v| {
        random_projection(sppm.forward(fwd, v[0])?, proj)
    })?;
    r.push("SPPM", report);

    // micro widths; a 16x16 input leaves a 1x1 map at stride 16, so the
    // pyramid is a single global bin
    let mut config = NetworkConfig::micro(3);
    config.sppm.pyramid_sizes = vec![1];
    let mut model = Model::<f64>::new(&config, r.next_seed())?;
    let calibration = r.randn(&[4, 3, 16, 16]);
    model.calibrate_batch_norm(&calibration)?;
    let x = r.randn(&[2, 3, 16, 16]);
    let proj = r.next_seed();
    let net_cfg = GradCheckConfig { max_coords: Some(3), ..r.cfg.clone() };
    let report = check_with_params(&model.store, Mode::Eval, &[x], &net_cfg, |fwd, v| {
        let outs = model.net.forward_deep(fwd, v[0])?;
        let mut total = random_projection(outs[0], proj)?;
        for (i, o) in outs[1..].iter().enumerate() {
            total = total.add(random_projection(*o, proj + 1 + i as u64)?)?;
        }
        Ok(total)
    })?;
    r.push("network (micro widths, eval statistics)", report);

    let logits = r.randn(&[2, 4, 6, 6]);
    let target = labels(r.next_seed(), 2, 4, 6, 6)?;
    let weights = [0.1, 0.2, 0.3, 0.4];
    r.scalar("focal loss", std::slice::from_ref(&logits), |_, v| focal_loss(v[0], &target, &weights, 2.0))?;
    r.scalar("dice loss", std::slice::from_ref(&logits), |_, v| dice_loss(v[0], &target, &weights, 1.0, false))?;
    r.scalar("dice loss (squared)", &[logits], |_, v| dice_loss(v[0], &target, &weights, 1.0, true))?;
    let levels = [r.randn(&[2, 4, 6, 6]), r.randn(&[2, 4, 6, 6]), r.randn(&[2, 4, 6, 6])];
    let state = update_class_weights(&[0.1, 0.5, 0.8, 0.3], 0.1)?;
    let loss_cfg = LossConfig::default();
    r.scalar("combined loss", &levels, |_, v| combined_loss(v, &target, &state, &loss_cfg))?;

    Ok(r.rows)
}

/// Fixed-width table of the suite results.
pub fn format_table(rows: &[SuiteRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:width$}  {:>7}  {:>6}  {:>12}  {}\n", "check", "coords", "kinks", "max rel err", "result");
    for row in rows {
        let r = &row.report;
        s.push_str(&format!(
            "{:width$}  {:>7}  {:>6}  {:>12.3e}  {}\n",
            row.name,
            r.checked,
            r.nonsmooth,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
