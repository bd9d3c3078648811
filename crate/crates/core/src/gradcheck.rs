//! Central finite differences: the independent oracle for every analytic
//! gradient in the crate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Step reductions, each by a factor of 10, tried when a perturbation
/// crosses a kink.
pub const KINK_RETRIES: usize = 2;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
///
/// `f` is evaluated twice at `x` first; differing results mean `f` is not
/// deterministic and the oracle refuses to run.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(TensorError::Oracle(format!(
            "step must be positive, got {h}"
        )));
    }
    let first = f(x)?;
    let second = f(x)?;
    if first != second {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }
    let two_h = h + h;
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / two_h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen elements of each input;
    /// `None` checks every element.
    pub samples_per_input: Option<usize>,
    /// Check this fraction of each input's elements (rounded up, at least
    /// one). Combined with `samples_per_input`, the smaller count wins.
    pub sample_fraction: Option<f64>,
    pub seed: u64,
    /// Combine central differences at `h` and `h / 2` as
    /// `(4 D(h/2) - D(h)) / 3`, cancelling the `h^2` truncation term. Lets a
    /// larger step keep rounding error down on large graphs.
    pub richardson: bool,
    /// Injects a backward fault into the named op of the analytic graph.
    pub fault: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            samples_per_input: None,
            sample_fraction: None,
            seed: 0,
            richardson: false,
            fault: None,
        }
    }
}

/// Worst-case comparison between analytic and numeric gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Entries re-evaluated at a smaller step after a kink was crossed.
    pub kink_retries: usize,
    /// Entries left unchecked because even the smallest step crossed a
    /// kink.
    pub skipped: usize,
}

impl CheckReport {
    pub fn merge(&mut self, other: &CheckReport) {
        self.checked += other.checked;
        self.kink_retries += other.kink_retries;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst.or(self.worst);
        }
    }
}

/// Compares backward-mode gradients of a scalar-valued graph against
/// central differences.
///
/// `build` receives one leaf per input and must return a scalar. The
/// analytic pass marks every input as differentiable; the numeric passes
/// rebuild the graph from perturbed copies of the inputs. A perturbation
/// that changes [`Graph::kink_signature`] straddles a non-differentiable
/// point, where central differences are meaningless; such entries are
/// re-measured with a step ten times smaller, up to [`KINK_RETRIES`] times,
/// and skipped if the kink persists.
pub fn check_gradients<T, F>(
    build: F,
    inputs: &[Tensor<T>],
    opts: &CheckOptions,
) -> Result<CheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(op) = &opts.fault {
        g.inject_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("leaf gradient populated"))
        .collect();

    let eval = |inputs: &[Tensor<T>]| -> Result<(T, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        Ok((v.item(), g.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport::default();
    let h = T::lit(opts.step);
    let mut probe = inputs.to_vec();
    let (_, base_sig) = eval(&probe)?;
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let by_fraction = opts
            .sample_fraction
            .map(|f| ((f * n as f64).ceil() as usize).max(1));
        let limit = match (opts.samples_per_input, by_fraction) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let indices: Vec<usize> = match limit {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in indices {
            let a = analytic[ii].data()[j].as_f64();
            let mut step = h;
            let mut numeric = None;
            for attempt in 0..=KINK_RETRIES {
                let mut central = |step: T| -> Result<Option<f64>> {
                    let orig = probe[ii].data()[j];
                    probe[ii].data_mut()[j] = orig + step;
                    let (plus, sig_plus) = eval(&probe)?;
                    probe[ii].data_mut()[j] = orig - step;
                    let (minus, sig_minus) = eval(&probe)?;
                    probe[ii].data_mut()[j] = orig;
                    Ok((sig_plus == base_sig && sig_minus == base_sig)
                        .then(|| ((plus - minus) / (step + step)).as_f64()))
                };
                let estimate = match central(step)? {
                    Some(d) if opts.richardson => {
                        central(step / T::lit(2.0))?.map(|d_half| (4.0 * d_half - d) / 3.0)
                    }
                    other => other,
                };
                if estimate.is_some() {
                    numeric = estimate;
                    break;
                }
                if attempt < KINK_RETRIES {
                    report.kink_retries += 1;
                }
                step = step / T::lit(10.0);
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ii, j, a, numeric));
            }
        }
    }
    Ok(report)
}
