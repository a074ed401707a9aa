//! Training objectives: class-weighted pixel cross-entropy, per-level
//! reconstruction error and intra-box feature consistency.
//!
//! Consistency for one box `b` of `n = H_b·W_b` pixels with feature
//! vectors `p_ij`:
//!
//! ```text
//! p̄     = (1/n) Σ p_ij
//! L_b   = (1/n) Σ ‖p_ij − p̄‖²
//! ∂L_b/∂p_ij = (2/n²)·[(p_ij − p̄)(n − 1) + Σ_{(u,v)≠(i,j)} (p̄ − p_uv)]   (exact)
//!            ≈ (2/n)·(p_ij − p̄)                                        (fast path)
//! ```
//!
//! Since the deviations from the mean sum to zero, `Σ_{(u,v)≠(i,j)} (p̄ − p_uv)`
//! equals `p_ij − p̄` and the two expressions coincide in exact arithmetic;
//! they differ only by rounding.

use dsse_tensor::{CustomOp, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::page::{PixelBox, IGNORE_LABEL};

/// Per-class multipliers for the classification loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f32>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub const WEIGHT_FLOOR: f64 = 0.1;
pub const WEIGHT_CAP: f64 = 10.0;

/// Inverse-frequency weights `total / count_c`, normalized to mean 1 over
/// the classes that occur. Absent classes get the largest computed weight;
/// everything is then clipped to `[0.1, 10]`. Ignore-labelled pixels are
/// skipped.
pub fn compute_class_weights<'a, I>(masks: I, classes: usize) -> Result<ClassWeights>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut counts = vec![0u64; classes];
    for mask in masks {
        for &l in mask {
            if l == IGNORE_LABEL {
                continue;
            }
            let slot = counts
                .get_mut(l as usize)
                .ok_or_else(|| input!("label {l} out of range for {classes} classes"))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(input!("cannot weight classes of an empty dataset"));
    }
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| total as f64 / c as f64))
        .collect();
    let present: Vec<f64> = raw.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let top = present.iter().fold(0.0f64, |m, v| m.max(v / mean));
    let weights = raw
        .iter()
        .map(|r| (r.map_or(top, |v| v / mean)).clamp(WEIGHT_FLOOR, WEIGHT_CAP) as f32)
        .collect();
    Ok(ClassWeights(weights))
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(contract!("expected a C×H×W or N×C×H×W tensor, got {shape:?}")),
    }
}

#[derive(Debug)]
struct CrossEntropyRule {
    labels: Vec<u8>,
    weights: Vec<f32>,
    probs: Vec<f32>,
    valid: usize,
}

impl CustomOp for CrossEntropyRule {
    fn name(&self) -> &'static str {
        "classification_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (n, c, h, w) = image_dims(inputs[0].shape()).expect("checked in forward");
        let hw = h * w;
        let mut d = vec![0.0f32; n * c * hw];
        if self.valid > 0 {
            let scale = grad_output[0] / self.valid as f32;
            for i in 0..n {
                for px in 0..hw {
                    let l = self.labels[i * hw + px];
                    if l == IGNORE_LABEL {
                        continue;
                    }
                    let wl = self.weights[l as usize] * scale;
                    for k in 0..c {
                        let at = (i * c + k) * hw + px;
                        let onehot = if k == l as usize { 1.0 } else { 0.0 };
                        d[at] = wl * (self.probs[at] - onehot);
                    }
                }
            }
        }
        vec![Some(d)]
    }
}

/// Mean over non-ignored pixels of `weight[label]·(−log softmax(logits)[label])`.
/// `labels` holds one entry per pixel (batch-major); [`IGNORE_LABEL`]
/// marks padding. With no valid pixels the loss is 0.
pub fn classification_loss(g: &mut Graph, logits: Var, labels: &[u8], weights: &ClassWeights) -> Result<Var> {
    let x = g.value(logits);
    let (n, c, h, w) = image_dims(x.shape())?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(contract!("{} labels for {} pixels", labels.len(), n * hw));
    }
    if weights.len() != c {
        return Err(contract!("{} class weights for {c} classes", weights.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= c) {
        return Err(input!("label {l} out of range for {c} classes"));
    }
    let data = x.data();
    let mut probs = vec![0.0f32; data.len()];
    let mut total = 0.0f64;
    let mut valid = 0usize;
    for i in 0..n {
        for px in 0..hw {
            let at = |k: usize| (i * c + k) * hw + px;
            let max = (0..c).map(|k| data[at(k)]).fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = (0..c).map(|k| ((data[at(k)] - max) as f64).exp()).sum();
            for k in 0..c {
                probs[at(k)] = (((data[at(k)] - max) as f64).exp() / z) as f32;
            }
            let l = labels[i * hw + px];
            if l == IGNORE_LABEL {
                continue;
            }
            let logp = (data[at(l as usize)] - max) as f64 - z.ln();
            total -= weights.0[l as usize] as f64 * logp;
            valid += 1;
        }
    }
    let value = if valid == 0 { 0.0 } else { total / valid as f64 };
    let rule = CrossEntropyRule { labels: labels.to_vec(), weights: weights.0.clone(), probs, valid };
    Ok(g.custom(&[logits], Tensor::scalar(value as f32), Box::new(rule))?)
}

#[derive(Debug)]
struct MseRule {
    mask: Option<Vec<bool>>,
    denom: f64,
}

impl CustomOp for MseRule {
    fn name(&self) -> &'static str {
        "reconstruction_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (a, r) = (inputs[0].data(), inputs[1].data());
        let (n, c, h, w) = image_dims(inputs[0].shape()).expect("checked in forward");
        let hw = h * w;
        let s = if self.denom > 0.0 { (2.0 / self.denom) as f32 * grad_output[0] } else { 0.0 };
        let mut da = vec![0.0f32; a.len()];
        for i in 0..n {
            for k in 0..c {
                for px in 0..hw {
                    if self.mask.as_ref().is_some_and(|m| !m[i * hw + px]) {
                        continue;
                    }
                    let at = (i * c + k) * hw + px;
                    da[at] = s * (a[at] - r[at]);
                }
            }
        }
        let dr = da.iter().map(|v| -v).collect();
        vec![Some(da), Some(dr)]
    }
}

/// `‖a − ã‖² / (C·H·W)` summed over the batch and divided by the batch
/// size. With `valid` (one flag per pixel, batch-major) only flagged pixels
/// count and the denominator becomes `C·(flagged pixels)`.
pub fn reconstruction_loss(g: &mut Graph, target: Var, recon: Var, valid: Option<&[bool]>) -> Result<Var> {
    let (a, r) = (g.value(target), g.value(recon));
    if a.shape() != r.shape() {
        return Err(contract!("reconstruction shape {:?} does not match target {:?}", r.shape(), a.shape()));
    }
    let (n, c, h, w) = image_dims(a.shape())?;
    let hw = h * w;
    if let Some(m) = valid {
        if m.len() != n * hw {
            return Err(contract!("{} mask entries for {} pixels", m.len(), n * hw));
        }
    }
    let counted = valid.map_or(n * hw, |m| m.iter().filter(|v| **v).count());
    let denom = (c * counted) as f64;
    let mut total = 0.0f64;
    for i in 0..n {
        for k in 0..c {
            for px in 0..hw {
                if valid.is_some_and(|m| !m[i * hw + px]) {
                    continue;
                }
                let at = (i * c + k) * hw + px;
                let d = (a.data()[at] - r.data()[at]) as f64;
                total += d * d;
            }
        }
    }
    let value = if denom > 0.0 { total / denom } else { 0.0 };
    let rule = MseRule { mask: valid.map(<[bool]>::to_vec), denom };
    Ok(g.custom(&[target, recon], Tensor::scalar(value as f32), Box::new(rule))?)
}

/// Which backward rule the consistency loss uses inside the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyBackward {
    /// Full derivative of the per-box loss (differentiates through the mean).
    #[default]
    Exact,
    /// `(2/n)(p − p̄)`, treating the box mean as a constant.
    Approximate,
}

fn check_box(b: &PixelBox, h: usize, w: usize) -> Result<()> {
    if b.is_empty() {
        return Err(input!("empty consistency box {b:?}"));
    }
    if !b.fits_in(w, h) {
        return Err(input!("box {b:?} exceeds the {h}×{w} feature map"));
    }
    Ok(())
}

/// Per-channel mean of a box, and its pixel count, in f64.
fn box_mean(data: &[f32], c: usize, h: usize, w: usize, b: &PixelBox) -> (Vec<f64>, f64) {
    let n = b.area() as f64;
    let mean = (0..c)
        .map(|k| {
            let plane = &data[k * h * w..(k + 1) * h * w];
            let mut s = 0.0f64;
            for y in b.y..b.bottom() {
                s += plane[y * w + b.x..y * w + b.right()].iter().map(|v| *v as f64).sum::<f64>();
            }
            s / n
        })
        .collect();
    (mean, n)
}

/// Loss of one box on a `C×H×W` map.
pub fn box_consistency(features: &Tensor, b: &PixelBox) -> Result<f64> {
    let (n, c, h, w) = image_dims(features.shape())?;
    if n != 1 {
        return Err(contract!("box_consistency takes a single feature map"));
    }
    check_box(b, h, w)?;
    let data = features.data();
    let (mean, count) = box_mean(data, c, h, w, b);
    let mut s = 0.0f64;
    for (k, m) in mean.iter().enumerate() {
        for y in b.y..b.bottom() {
            for x in b.x..b.right() {
                let d = data[k * h * w + y * w + x] as f64 - m;
                s += d * d;
            }
        }
    }
    Ok(s / count)
}

/// Mean box loss over all boxes of a `C×H×W` map; `None` for no boxes.
pub fn consistency_value(features: &Tensor, boxes: &[PixelBox]) -> Result<Option<f64>> {
    if boxes.is_empty() {
        return Ok(None);
    }
    let mut s = 0.0;
    for b in boxes {
        s += box_consistency(features, b)?;
    }
    Ok(Some(s / boxes.len() as f64))
}

/// Gradient of one box's loss, term by term as in the exact formula.
pub fn consistency_grad_exact(features: &Tensor, b: &PixelBox) -> Result<Tensor> {
    box_gradient(features, b, ConsistencyBackward::Exact)
}

/// Fast-path gradient `(2/n)(p − p̄)` of one box's loss.
pub fn consistency_grad_approx(features: &Tensor, b: &PixelBox) -> Result<Tensor> {
    box_gradient(features, b, ConsistencyBackward::Approximate)
}

fn box_gradient(features: &Tensor, b: &PixelBox, rule: ConsistencyBackward) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(features.shape())?;
    if n != 1 {
        return Err(contract!("box gradients take a single feature map"));
    }
    check_box(b, h, w)?;
    let mut grad = vec![0.0f32; features.numel()];
    accumulate_box_gradient(features.data(), c, h, w, b, rule, 1.0, &mut grad);
    Ok(Tensor::new(features.shape().to_vec(), grad)?)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_box_gradient(
    data: &[f32],
    c: usize,
    h: usize,
    w: usize,
    b: &PixelBox,
    rule: ConsistencyBackward,
    scale: f64,
    out: &mut [f32],
) {
    let (mean, n) = box_mean(data, c, h, w, b);
    for (k, m) in mean.iter().enumerate() {
        let plane = k * h * w;
        // Σ over the whole box of (p̄ − p); the exact rule subtracts the own term
        let total: f64 = if rule == ConsistencyBackward::Exact {
            let mut s = 0.0;
            for y in b.y..b.bottom() {
                for x in b.x..b.right() {
                    s += m - data[plane + y * w + x] as f64;
                }
            }
            s
        } else {
            0.0
        };
        for y in b.y..b.bottom() {
            for x in b.x..b.right() {
                let p = data[plane + y * w + x] as f64;
                let g = match rule {
                    ConsistencyBackward::Exact => {
                        let others = total - (m - p);
                        2.0 / (n * n) * ((p - m) * (n - 1.0) + others)
                    }
                    ConsistencyBackward::Approximate => 2.0 / n * (p - m),
                };
                out[plane + y * w + x] += (scale * g) as f32;
            }
        }
    }
}

#[derive(Debug)]
struct ConsistencyRule {
    boxes: Vec<Vec<PixelBox>>,
    rule: ConsistencyBackward,
    count: usize,
}

impl CustomOp for ConsistencyRule {
    fn name(&self) -> &'static str {
        "consistency_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f32]) -> Vec<Option<Vec<f32>>> {
        let x = inputs[0];
        let (_, c, h, w) = image_dims(x.shape()).expect("checked in forward");
        let chw = c * h * w;
        let mut d = vec![0.0f32; x.numel()];
        if self.count > 0 {
            let scale = grad_output[0] as f64 / self.count as f64;
            for (i, boxes) in self.boxes.iter().enumerate() {
                let (src, dst) = (&x.data()[i * chw..(i + 1) * chw], &mut d[i * chw..(i + 1) * chw]);
                for b in boxes {
                    accumulate_box_gradient(src, c, h, w, b, self.rule, scale, dst);
                }
            }
        }
        vec![Some(d)]
    }
}

/// Mean box loss over every box of every batch item. `boxes[i]` lists the
/// boxes of item `i`. Returns the loss node and whether any box existed;
/// with none the loss is a constant 0.
pub fn consistency_loss(
    g: &mut Graph,
    features: Var,
    boxes: &[Vec<PixelBox>],
    rule: ConsistencyBackward,
) -> Result<(Var, bool)> {
    let x = g.value(features);
    let (n, c, h, w) = image_dims(x.shape())?;
    if boxes.len() != n {
        return Err(contract!("box lists for {} items, batch has {n}", boxes.len()));
    }
    let chw = c * h * w;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, item) in boxes.iter().enumerate() {
        let plane = Tensor::new(vec![c, h, w], x.data()[i * chw..(i + 1) * chw].to_vec())?;
        for b in item {
            total += box_consistency(&plane, b)?;
            count += 1;
        }
    }
    let value = if count == 0 { 0.0 } else { total / count as f64 };
    let op = ConsistencyRule { boxes: boxes.to_vec(), rule, count };
    Ok((g.custom(&[features], Tensor::scalar(value as f32), Box::new(op))?, count > 0))
}

/// Mixing weights of the three objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f32,
    pub rec: f32,
    pub cons: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, rec: 1.0, cons: 1.0 }
    }
}

/// How per-level reconstruction losses combine into one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelReduction {
    #[default]
    Mean,
    Sum,
}

impl LevelReduction {
    pub fn coefficient(self, levels: usize) -> f32 {
        match self {
            LevelReduction::Mean if levels > 0 => 1.0 / levels as f32,
            _ => 1.0,
        }
    }
}

/// Loss values of one step. Absent terms were inactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cls: Option<f32>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub l_rec: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_rec_total: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cons: Option<f32>,
    pub total: f32,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn loss_of(g: &mut Graph, logits: Tensor, labels: &[u8], w: &ClassWeights) -> f64 {
        let v = g.leaf(logits);
        let l = classification_loss(g, v, labels, w).unwrap();
        g.value(l).item() as f64
    }

    #[test]
    fn uniform_two_class_is_ln2() {
        let mut g = Graph::new();
        let l = loss_of(&mut g, Tensor::zeros(vec![2, 2, 3]), &[0, 1, 1, 0, 0, 1], &ClassWeights::uniform(2));
        assert!((l - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_oracle() {
        let logits: Vec<f32> = (0..48).map(|i| ((i * 37 % 17) as f32 - 8.0) * 0.3).collect();
        let labels: Vec<u8> = (0..16).map(|i| (i * 7 % 3) as u8).collect();
        let weights = ClassWeights(vec![0.5, 2.0, 1.25]);
        let mut oracle = 0.0f64;
        for px in 0..16 {
            let z: Vec<f64> = (0..3).map(|k| logits[k * 16 + px] as f64).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            let l = labels[px] as usize;
            oracle += weights.0[l] as f64 * (lse - z[l]);
        }
        oracle /= 16.0;
        let mut g = Graph::new();
        let got = loss_of(&mut g, t(&[3, 4, 4], logits.clone()), &labels, &weights);
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        let k = 3.0f32;
        let scaled = ClassWeights(vec![k; 3]);
        let plain = loss_of(&mut g, t(&[3, 4, 4], logits.clone()), &labels, &ClassWeights::uniform(3));
        let times_k = loss_of(&mut g, t(&[3, 4, 4], logits), &labels, &scaled);
        assert!((times_k - k as f64 * plain).abs() < 1e-5);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let mut g = Graph::new();
        let w = ClassWeights::uniform(2);
        let logits = t(&[2, 1, 2], vec![3.0, -1.0, 0.0, 0.0]);
        let l = loss_of(&mut g, logits, &[1, IGNORE_LABEL], &w);
        let expect = -((0.0f64).exp() / ((0.0f64).exp() + (3.0f64).exp())).ln();
        assert!((l - expect).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::zeros(vec![2, 1, 1]));
        assert!(matches!(
            classification_loss(&mut g, v, &[2], &ClassWeights::uniform(2)),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn reconstruction_normalization() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3, 3]));
        let r = g.leaf(Tensor::full(vec![2, 3, 3], 1.0));
        let l = reconstruction_loss(&mut g, a, r, None).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let same = reconstruction_loss(&mut g, a, a, None).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let bad = g.leaf(Tensor::zeros(vec![3, 3, 2]));
        assert!(matches!(reconstruction_loss(&mut g, a, bad, None), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn masked_reconstruction_averages_flagged_pixels() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 1, 2], vec![0.0, 0.0]));
        let r = g.leaf(t(&[1, 1, 2], vec![2.0, 100.0]));
        let l = reconstruction_loss(&mut g, a, r, Some(&[true, false])).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
    }

    #[test]
    fn two_pixel_box_hand_case() {
        let f = t(&[1, 1, 2], vec![0.0, 2.0]);
        let b = PixelBox::new(0, 0, 2, 1);
        assert_eq!(box_consistency(&f, &b).unwrap(), 1.0);
        let exact = consistency_grad_exact(&f, &b).unwrap();
        let approx = consistency_grad_approx(&f, &b).unwrap();
        assert_eq!(exact.data()[0], -1.0);
        assert_eq!(approx.data()[0], -1.0);
        assert_eq!(exact.data()[1], 1.0);
    }

    #[test]
    fn constant_boxes_are_free() {
        let f = Tensor::full(vec![2, 3, 4], 0.7);
        let b = PixelBox::new(1, 0, 3, 3);
        assert_eq!(box_consistency(&f, &b).unwrap(), 0.0);
        assert!(consistency_grad_exact(&f, &b).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(consistency_grad_approx(&f, &b).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_box_list_is_flagged() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![1, 2, 2], 1.0).with_requires_grad(true));
        let (l, any) = consistency_loss(&mut g, x, &[vec![]], ConsistencyBackward::Exact).unwrap();
        assert!(!any);
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let f = Tensor::zeros(vec![1, 2, 2]);
        assert!(box_consistency(&f, &PixelBox::new(1, 1, 2, 1)).is_err());
        assert!(box_consistency(&f, &PixelBox::new(0, 0, 0, 1)).is_err());
    }

    #[test]
    fn class_weight_hand_cases() {
        let balanced = [0u8, 1, 0, 1];
        let w = compute_class_weights([&balanced[..]], 2).unwrap();
        assert_eq!(w.0, vec![1.0, 1.0]);
        let skewed = [0u8, 0, 0, 1];
        let w = compute_class_weights([&skewed[..]], 2).unwrap();
        assert!((w.0[0] - 0.5).abs() < 1e-6 && (w.0[1] - 1.5).abs() < 1e-6);
        let single = [3u8; 5];
        let w = compute_class_weights([&single[..]], 4).unwrap();
        assert_eq!(w.0, vec![1.0; 4]);
        assert!(compute_class_weights(std::iter::empty::<&[u8]>(), 3).is_err());
        assert!(compute_class_weights([&[IGNORE_LABEL][..]], 3).is_err());
    }

    #[test]
    fn extreme_weights_are_clipped() {
        let mut mask = vec![0u8; 10_000];
        mask[0] = 1;
        // raw (10000/9999, 10000) with mean ≈ 5000.5 → (≈0.0002, ≈2.0)
        let w = compute_class_weights([&mask[..]], 3).unwrap();
        assert_eq!(w.0[0], WEIGHT_FLOOR as f32);
        assert!((w.0[1] - 2.0).abs() < 1e-3);
        assert_eq!(w.0[2], w.0[1]);
        let mut many = vec![0u8; 100_000];
        for (i, l) in many.iter_mut().enumerate().take(40) {
            *l = 1 + (i % 2) as u8 * (1 + (i % 4 == 1) as u8);
        }
        let w = compute_class_weights([&many[..]], 4).unwrap();
        assert!(w.0.iter().all(|v| (WEIGHT_FLOOR as f32..=WEIGHT_CAP as f32).contains(v)));
    }
}
