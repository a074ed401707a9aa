//! Central finite-difference checks of analytic gradients.
//!
//! The checker only ever calls the scalar function being differentiated;
//! it never looks at backward rules, so it is an independent oracle for them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BatchNormConfig, Graph, Mode, RunningStats, Var};
use crate::tensor::Tensor;

/// Outcome of checking one input tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    /// Disagreement beyond f32 rounding of the function values, over
    /// `max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Norm of the per-coordinate disagreement beyond the rounding allowance.
    pub error_norm: f64,
    /// `max(‖analytic‖₂, ‖numeric‖₂)` over the checked coordinates.
    pub scale_norm: f64,
    /// Probed coordinates left out because the function has a kink there.
    pub skipped: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// Norm-wise relative error of several reports taken as one vector.
pub fn combined_error(reports: &[GradReport]) -> f64 {
    let err = reports.iter().map(|r| r.error_norm * r.error_norm).sum::<f64>().sqrt();
    let scale = reports.iter().map(|r| r.scale_norm * r.scale_norm).sum::<f64>().sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        err / scale
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let max_abs = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let scale = norm(analytic).max(norm(numeric));
    let rel = if scale < 1e-12 { 0.0 } else { norm(&diff) / scale };
    (rel, max_abs)
}

/// Builds a fresh graph from `inputs` and returns its scalar output.
pub trait ScalarFn {
    fn eval(&mut self, g: &mut Graph, inputs: &[Var]) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    fn eval(&mut self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        self(g, inputs)
    }
}

fn run<F: ScalarFn>(f: &mut F, inputs: &[Tensor], fault: Option<&str>, with_grad: bool) -> Result<(f64, Graph, Vec<Var>)> {
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_backward_fault(op);
    }
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(with_grad && t.requires_grad())))
        .collect();
    let out = f.eval(&mut g, &vars)?;
    let value = g.value(out).item() as f64;
    if with_grad {
        g.backward(out)?;
    }
    Ok((value, g, vars))
}

/// Compares backward gradients of `f` against central differences with
/// step `h` for every input that has `requires_grad` set. `max_entries`
/// caps how many coordinates per tensor are perturbed (evenly strided).
pub fn check_gradients<F: ScalarFn>(
    names: &[&str],
    inputs: &[Tensor],
    mut f: F,
    h: f32,
    max_entries: usize,
    fault: Option<&str>,
) -> Result<Vec<GradReport>> {
    let (center, g, vars) = run(&mut f, inputs, fault, true)?;
    let mut reports = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic_full = g.grad(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let stride = input.numel().div_ceil(max_entries.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut allowance = Vec::new();
        let mut skipped = 0;
        for idx in (0..input.numel()).step_by(stride) {
            let mut probe = inputs.to_vec();
            let orig = input.data()[idx];
            probe[k].data_mut()[idx] = orig + h;
            let plus = run(&mut f, &probe, None, false)?.0;
            probe[k].data_mut()[idx] = orig - h;
            let minus = run(&mut f, &probe, None, false)?.0;
            // use the perturbation actually representable in f32
            let up = ((orig + h) as f64) - orig as f64;
            let down = orig as f64 - ((orig - h) as f64);
            let (right, left) = ((plus - center) / up, (center - minus) / down);
            let slack = rounding_allowance(plus, minus, up + down);
            if is_kink(left, right, slack) {
                skipped += 1;
                continue;
            }
            numeric.push((plus - minus) / (up + down));
            analytic.push(analytic_full[idx] as f64);
            allowance.push(slack);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .zip(&allowance)
            .map(|((a, n), s)| ((a - n).abs() - s).max(0.0))
            .collect();
        let max_abs_error = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = norm(&analytic).max(norm(&numeric));
        let rel_error = if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale };
        reports.push(GradReport {
            name: names.get(k).map_or_else(|| format!("input{k}"), |s| s.to_string()),
            rel_error,
            max_abs_error,
            checked: analytic.len(),
            error_norm: norm(&diff),
            scale_norm: norm(&analytic).max(norm(&numeric)),
            skipped,
        });
    }
    Ok(reports)
}

/// Error a central difference inherits from the f32 rounding of the two
/// function values; disagreement below it is not evidence of anything.
fn rounding_allowance(plus: f64, minus: f64, span: f64) -> f64 {
    8.0 * f32::EPSILON as f64 * plus.abs().max(minus.abs()).max(1.0) / span
}

/// One-sided slopes that disagree by more than curvature and rounding can
/// explain mark a ReLU crossing or a pooling switch inside the stencil,
/// where a central difference measures no derivative at all.
fn is_kink(left: f64, right: f64, slack: f64) -> bool {
    (right - left).abs() > KINK_ABS.max(4.0 * slack) + KINK_REL * left.abs().max(right.abs())
}

const KINK_ABS: f64 = 2e-3;
const KINK_REL: f64 = 0.1;

/// Finite-difference step used by the standard suites.
pub const FD_STEP: f32 = 1e-3;
/// Per-operation relative-error budget.
pub const OP_TOLERANCE: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, grad: bool) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng).with_requires_grad(grad)
}

/// Distinct values spaced well beyond the FD step, so pooling never flips
/// its argmax under perturbation and no value sits on the ReLU kink.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 + 0.5) * 0.1 - n as f32 * 0.05).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("sized").with_requires_grad(true)
}

/// Projects an operation's output onto fixed random weights, giving a
/// scalar whose gradient exercises every output element.
fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.leaf(weights.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Gradient checks for every differentiable graph operation on random
/// `1×4×4`-sized inputs. `fault` corrupts one backward rule (test hook).
pub fn op_suite(seed: u64, fault: Option<&str>) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut reports = Vec::new();
    let mut push = |op: &str, rs: Vec<GradReport>| {
        for mut r in rs {
            r.name = format!("{op}/{}", r.name);
            reports.push(r);
        }
    };

    for dilation in [1usize, 2] {
        let inputs = [random(&[1, 4, 4], rng, true), random(&[2, 1, 3, 3], rng, true), random(&[2], rng, true)];
        let proj = random(&[2, 4, 4], rng, false);
        let f = |g: &mut Graph, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], v[2], dilation)?;
            project(g, y, &proj)
        };
        push(&format!("conv2d_d{dilation}"), check_gradients(&["input", "weights", "bias"], &inputs, f, FD_STEP, 64, fault)?);
    }

    let x = separated(&[1, 4, 4], rng);
    let proj = random(&[1, 2, 2], rng, false);
    let f = |g: &mut Graph, v: &[Var]| {
        let (y, _) = g.max_pool2d(v[0])?;
        project(g, y, &proj)
    };
    push("max_pool2d", check_gradients(&["input"], &[x], f, FD_STEP, 64, fault)?);

    let indices = {
        let mut g = Graph::new();
        let src = g.leaf(separated(&[1, 4, 4], rng));
        g.max_pool2d(src)?.1
    };
    let x = random(&[1, 2, 2], rng, true);
    let proj = random(&[1, 4, 4], rng, false);
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.unpool2d(v[0], &indices)?;
        project(g, y, &proj)
    };
    push("unpool2d", check_gradients(&["input"], &[x], f, FD_STEP, 64, fault)?);

    let x = random(&[1, 4, 4], rng, true);
    let proj = random(&[1, 8, 8], rng, false);
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.bilinear_upsample2x(v[0])?;
        project(g, y, &proj)
    };
    push("bilinear_upsample2x", check_gradients(&["input"], &[x], f, FD_STEP, 64, fault)?);

    let x = random(&[1, 4, 4], rng, true);
    let proj = random(&[1, 2, 2], rng, false);
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.area_downsample(v[0], 2)?;
        project(g, y, &proj)
    };
    push("area_downsample", check_gradients(&["input"], &[x], f, FD_STEP, 64, fault)?);

    for mode in [Mode::Train, Mode::Eval] {
        let inputs = [random(&[1, 4, 4], rng, true), random(&[1], rng, true), random(&[1], rng, true)];
        let proj = random(&[1, 4, 4], rng, false);
        let f = |g: &mut Graph, v: &[Var]| {
            let mut stats = RunningStats { mean: vec![0.2], var: vec![0.7] };
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode, BatchNormConfig::default())?;
            project(g, y, &proj)
        };
        let label = if mode == Mode::Train { "batch_norm_train" } else { "batch_norm_eval" };
        push(label, check_gradients(&["input", "gamma", "beta"], &inputs, f, FD_STEP, 64, fault)?);
    }

    let x = separated(&[1, 4, 4], rng);
    let proj = random(&[1, 4, 4], rng, false);
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.relu(v[0])?;
        project(g, y, &proj)
    };
    push("relu", check_gradients(&["input"], &[x], f, FD_STEP, 64, fault)?);

    let inputs = [random(&[1, 4, 4], rng, true), random(&[2, 4, 4], rng, true)];
    let proj = random(&[3, 4, 4], rng, false);
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.concat_channels(v[0], v[1])?;
        project(g, y, &proj)
    };
    push("concat_channels", check_gradients(&["a", "b"], &inputs, f, FD_STEP, 64, fault)?);

    let inputs = [random(&[1, 4, 4], rng, true), random(&[1, 4, 4], rng, true)];
    let f = |g: &mut Graph, v: &[Var]| {
        let s = g.add(v[0], v[1])?;
        let p = g.mul(s, v[1])?;
        let p = g.scale(p, 0.7)?;
        let a = g.sum(p)?;
        let b = g.sum(v[0])?;
        g.weighted_sum(&[(a, 1.5), (b, -0.5)])
    };
    push("elementwise", check_gradients(&["a", "b"], &inputs, f, FD_STEP, 64, fault)?);

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_corrupted_rule() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().with_requires_grad(true);
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        };
        let ok = check_gradients(&["x"], std::slice::from_ref(&x), f, 1e-3, 16, None).unwrap();
        assert!(ok[0].passes(1e-3), "{ok:?}");
        let bad = check_gradients(&["x"], &[x], f, 1e-3, 16, Some("mul")).unwrap();
        assert!(!bad[0].passes(1e-3));
    }

    #[test]
    fn kinks_are_skipped_not_scored() {
        let x = Tensor::new(vec![3], vec![0.0, 0.5, -0.7]).unwrap().with_requires_grad(true);
        let f = |g: &mut Graph, v: &[Var]| {
            let r = g.relu(v[0])?;
            g.sum(r)
        };
        let r = check_gradients(&["x"], &[x], f, 1e-3, 16, None).unwrap();
        assert_eq!((r[0].checked, r[0].skipped), (2, 1));
        assert!(r[0].passes(1e-6));
    }

    #[test]
    fn op_suite_has_no_kinks() {
        let r = op_suite(0, None).unwrap();
        assert!(r.iter().all(|r| r.skipped == 0 && r.passes(OP_TOLERANCE)), "{r:?}");
    }
}
