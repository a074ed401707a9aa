use std::collections::BTreeMap;

use dsse_tensor::gradcheck::{check_gradients, combined_error, op_suite, GradReport, FD_STEP, OP_TOLERANCE};
use dsse_tensor::{Graph, Mode, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{classification_loss, consistency_loss, reconstruction_loss, ClassWeights, ConsistencyBackward};
use crate::model::{ArchitectureConfig, ForwardOptions, Mfcn};
use crate::page::{PixelBox, IGNORE_LABEL};

/// Relative error allowed on the whole-network check, where f32 rounding
/// accumulates through many layers.
pub const MODEL_TOLERANCE: f64 = 1e-2;
/// Largest share of probed coordinates that may sit on kinks before a run
/// counts as failed; beyond it too little of the gradient was compared.
pub const MAX_SKIPPED: f64 = 0.25;

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// The whole-network check, scored on the full parameter gradient. Some
/// small tensors have gradients near the f32 resolution of the loss, so
/// their own ratios are diagnostics only.
#[derive(Debug, Clone, Serialize)]
pub struct ModelCheck {
    pub rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
    pub tensors: Vec<CheckLine>,
}

impl ModelCheck {
    pub fn from_reports(reports: Vec<GradReport>) -> Self {
        let rel_error = combined_error(&reports);
        let checked = reports.iter().map(|r| r.checked).sum();
        let skipped: usize = reports.iter().map(|r| r.skipped).sum();
        let passed = rel_error <= MODEL_TOLERANCE && skipped as f64 <= MAX_SKIPPED * (checked + skipped) as f64;
        let tensors = lines("model/", reports, MODEL_TOLERANCE).collect();
        Self { rel_error, tolerance: MODEL_TOLERANCE, checked, skipped, passed, tensors }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    /// Operations and losses, each held to its own tolerance.
    pub checks: Vec<CheckLine>,
    pub model: ModelCheck,
    pub passed: bool,
}

fn lines(prefix: &str, reports: Vec<GradReport>, tolerance: f64) -> impl Iterator<Item = CheckLine> + '_ {
    reports.into_iter().map(move |r| CheckLine {
        passed: r.passes(tolerance),
        name: format!("{prefix}{}", r.name),
        rel_error: r.rel_error,
        max_abs_error: r.max_abs_error,
        checked: r.checked,
        skipped: r.skipped,
        tolerance,
    })
}

/// Carries a loss or model error through the tensor-level checker.
fn lift<T>(r: Result<T>) -> dsse_tensor::Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng).with_requires_grad(true)
}

fn random_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| if rng.gen_bool(0.1) { IGNORE_LABEL } else { rng.gen_range(0..classes) as u8 }).collect()
}

/// The three loss operations on random inputs.
pub fn loss_suite(seed: u64, fault: Option<&str>) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |op: &str, rs: Vec<GradReport>| {
        out.extend(rs.into_iter().map(|mut r| {
            r.name = format!("{op}/{}", r.name);
            r
        }))
    };

    // few pixels keep each logit's share of the mean loss well above the
    // f32 resolution of the loss value
    let logits = uniform(&[2, 3, 2, 2], &mut rng);
    let labels = random_labels(8, 3, &mut rng);
    let weights = ClassWeights(vec![0.5, 1.0, 2.0]);
    let f = |g: &mut Graph, v: &[Var]| lift(classification_loss(g, v[0], &labels, &weights));
    push("classification_loss", check_gradients(&["logits"], &[logits], f, FD_STEP, 64, fault)?);

    let inputs = [uniform(&[1, 2, 3, 3], &mut rng), uniform(&[1, 2, 3, 3], &mut rng)];
    let valid: Vec<bool> = (0..9).map(|i| i % 4 != 0).collect();
    let f = |g: &mut Graph, v: &[Var]| lift(reconstruction_loss(g, v[0], v[1], Some(&valid)));
    push("reconstruction_loss", check_gradients(&["target", "recon"], &inputs, f, FD_STEP, 64, fault)?);

    let feats = uniform(&[2, 2, 6, 6], &mut rng);
    let boxes = vec![
        vec![PixelBox::new(0, 0, 3, 2), PixelBox::new(1, 1, 4, 4)],
        vec![PixelBox::new(2, 3, 4, 3)],
    ];
    let f = |g: &mut Graph, v: &[Var]| Ok(lift(consistency_loss(g, v[0], &boxes, ConsistencyBackward::Exact))?.0);
    push("consistency_loss", check_gradients(&["features"], &[feats], f, FD_STEP, 64, fault)?);
    Ok(out)
}

/// Small configuration for the whole-network check.
pub fn tiny_model() -> ArchitectureConfig {
    ArchitectureConfig { classes: 3, channels: vec![4, 4], embedding_dim: 4, ..Default::default() }
}

/// Gradient of the full training objective with respect to every
/// parameter of a tiny model, a few coordinates per tensor.
pub fn model_check(cfg: ArchitectureConfig, seed: u64, fault: Option<&str>) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut model = Mfcn::new(cfg.clone(), seed)?;
    let (h, w) = (16usize, 16usize);
    let input = Tensor::uniform(vec![1, cfg.input_channels, h, w], -1.0, 1.0, &mut rng);
    let embedding = (cfg.embedding_dim > 0).then(|| Tensor::uniform(vec![1, cfg.embedding_dim, h, w], -1.0, 1.0, &mut rng));
    let labels = random_labels(h * w, cfg.classes, &mut rng);
    let boxes = vec![vec![PixelBox::new(1, 2, 6, 5), PixelBox::new(8, 8, 7, 6)]];
    let weights = ClassWeights::uniform(cfg.classes);
    let opts = ForwardOptions { bn_mode: Mode::Eval, trainable: true, auxiliary: true, ..ForwardOptions::train() };

    let (names, tensors): (Vec<String>, Vec<Tensor>) =
        model.state().params.iter().map(|(n, t)| (n.clone(), t.clone().with_requires_grad(true))).unzip();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let f = |g: &mut Graph, v: &[Var]| {
        let bound: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
        let art = lift(model.forward_bound(g, &input, embedding.as_ref(), opts, bound))?;
        let mut terms = vec![(lift(classification_loss(g, art.logits, &labels, &weights))?, 1.0)];
        for (&a, &r) in art.encoded.activations.iter().zip(&art.reconstructions) {
            terms.push((lift(reconstruction_loss(g, a, r, None))?, 1.0));
        }
        terms.push((lift(consistency_loss(g, art.features, &boxes, ConsistencyBackward::Exact))?.0, 1.0));
        g.weighted_sum(&terms)
    };
    Ok(check_gradients(&refs, &tensors, f, FD_STEP, 6, fault)?)
}

/// Every check: graph operations, losses, and the whole network.
/// `fault` corrupts one backward rule by name, which must make the run fail.
pub fn run_gradcheck(seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    let mut checks: Vec<CheckLine> = lines("op/", op_suite(seed, fault)?, OP_TOLERANCE).collect();
    checks.extend(lines("loss/", loss_suite(seed, fault)?, OP_TOLERANCE));
    let model = ModelCheck::from_reports(model_check(tiny_model(), seed, fault)?);
    let passed = checks.iter().all(|c| c.passed) && model.passed;
    Ok(GradcheckReport { checks, model, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_pass_and_faults_are_caught() {
        let ok = loss_suite(3, None).unwrap();
        assert!(ok.iter().all(|r| r.passes(OP_TOLERANCE)), "{ok:?}");
        let bad = loss_suite(3, Some("consistency_loss")).unwrap();
        assert!(bad.iter().any(|r| !r.passes(OP_TOLERANCE)));
    }

    #[test]
    fn whole_model_gradients_match() {
        let m = ModelCheck::from_reports(model_check(tiny_model(), 0, None).unwrap());
        assert!(m.passed, "error {} skipped {} of {}", m.rel_error, m.skipped, m.checked + m.skipped);
    }

    #[test]
    fn a_corrupted_convolution_fails_the_model_check() {
        let m = ModelCheck::from_reports(model_check(tiny_model(), 0, Some("conv2d")).unwrap());
        assert!(!m.passed, "{}", m.rel_error);
    }
}
