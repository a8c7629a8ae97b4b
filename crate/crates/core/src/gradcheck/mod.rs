//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Forward, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// zero up to round-off compare on an absolute scale.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Per-tensor denominator floor as a fraction of the largest analytic
    /// gradient entry of that tensor. Round-off in f limits the resolvable
    /// gradient to roughly |f|·1e-16/eps, so entries that cancel to near
    /// zero are compared on the tensor's own scale.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, floor: 1e-6, max_coords: None, seed: 0, scale_floor: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps probe straddles a kink (a ReLU or max-pool
    /// switch): the one-sided slopes jump by at least the observed error.
    /// They are excluded from `max_rel_error`; a check with more than a
    /// fifth of its coordinates non-smooth fails.
    pub nonsmooth: usize,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    /// False if two evaluations at the same point disagreed; the comparison
    /// is unreliable in that case.
    pub deterministic: bool,
    pub passed: bool,
}

/// Checks `f` (scalar valued) against central differences at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let cfg = GradCheckConfig { eps, tol, ..GradCheckConfig::default() };
    check_gradients(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), &cfg)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.value().item()
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    if loss.value().numel() != 1 {
        return Err(Error::Contract("finite_diff_check needs a scalar-valued function".into()));
    }
    let base = loss.value().item()?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape()).expect("valid shape")))
        .collect();

    let again = evaluate(&f, inputs)?;
    let deterministic = again.to_bits() == base.to_bits();
    if !deterministic {
        log::warn!("gradient check: function is not deterministic ({base} vs {again}); results are unreliable");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        nonsmooth: 0,
        worst: None,
        deterministic,
        passed: false,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let scale = analytic[which].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = cfg.floor.max(cfg.scale_floor * scale);
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for coord in coords {
            let original = input.data()[coord];
            probe[which].data_mut()[coord] = original + cfg.eps;
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[coord] = original - cfg.eps;
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[coord] = original;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[which].data()[coord];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            let jump = ((plus - base) - (base - minus)).abs() / cfg.eps;
            if rel > cfg.tol && abs <= 0.75 * jump {
                report.nonsmooth += 1;
                continue;
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            let worse = rel.is_nan() || rel > report.max_rel_error;
            if worse && !report.max_rel_error.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((which, coord));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol && report.nonsmooth * 5 <= report.checked;
    Ok(report)
}

/// Checks `f` with respect to `inputs` and every trainable parameter of
/// `store`. Buffer updates made during the passes are discarded.
pub fn check_with_params<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&Forward<'t, 's, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut all = inputs.to_vec();
    all.extend(ids.iter().map(|&id| store.value(id).clone()));
    let k = inputs.len();
    check_gradients(
        |tape, vars| {
            let fwd = Forward::new(tape, store, mode);
            for (&id, &v) in ids.iter().zip(&vars[k..]) {
                fwd.bind(id, v);
            }
            f(&fwd, &vars[..k])
        },
        &all,
        cfg,
    )
}

/// Contracts `y` with a fixed pseudo-random direction, turning any tensor
/// output into a scalar whose gradient exercises every element.
pub fn random_projection<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = Tensor::randn(&y.shape(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    y.mul(y.tape().constant(w)).map(Var::sum_all)
}

pub mod suite;
