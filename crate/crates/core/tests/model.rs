use dsse_core::model::{ArchitectureConfig, Dilation, ForwardOptions, Mfcn, Upsampling, Variant};
use dsse_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 64;
const SHIFT: usize = 4;
/// Rows and columns this close to an edge may see the padding.
const BAND: usize = 24;

fn logits(model: &mut Mfcn, input: &Tensor) -> Vec<f32> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, input, None, ForwardOptions::inference()).unwrap();
    g.value(out.logits).data().to_vec()
}

/// Shifting the input by one pooling period shifts the logits by the same
/// amount away from the borders.
fn check_covariance(variant: Variant) {
    let base = ArchitectureConfig { classes: 3, channels: vec![4, 4], embedding_dim: 0, ..Default::default() };
    let cfg = ArchitectureConfig::variant(&base, variant);
    assert_eq!(1 << cfg.stages(), SHIFT);
    let mut model = Mfcn::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let big = Tensor::uniform(vec![3, SIZE + SHIFT, SIZE + SHIFT], -1.0, 1.0, &mut rng);
    let crop = |oy: usize, ox: usize| {
        let d = big.data();
        let s = SIZE + SHIFT;
        let mut v = Vec::with_capacity(3 * SIZE * SIZE);
        for c in 0..3 {
            for y in 0..SIZE {
                v.extend_from_slice(&d[(c * s + y + oy) * s + ox..(c * s + y + oy) * s + ox + SIZE]);
            }
        }
        Tensor::new(vec![3, SIZE, SIZE], v).unwrap()
    };
    // `moved` sees the page SHIFT pixels further down and right
    let (a, b) = (logits(&mut model, &crop(SHIFT, SHIFT)), logits(&mut model, &crop(0, 0)));
    let mut worst = 0.0f32;
    for c in 0..3 {
        for y in BAND..SIZE - BAND - SHIFT {
            for x in BAND..SIZE - BAND - SHIFT {
                let p = a[(c * SIZE + y) * SIZE + x];
                let q = b[(c * SIZE + y + SHIFT) * SIZE + x + SHIFT];
                worst = worst.max((p - q).abs());
            }
        }
    }
    assert!(worst <= 1e-4, "{variant:?}: {worst}");
}

#[test]
fn logits_follow_a_one_period_shift_with_unpooling() {
    check_covariance(Variant::Model3);
}

#[test]
fn logits_follow_a_one_period_shift_with_bilinear_upsampling() {
    check_covariance(Variant::Model1);
}

#[test]
fn identical_seeds_give_bitwise_identical_logits() {
    let cfg = ArchitectureConfig { classes: 4, channels: vec![4, 6], embedding_dim: 3, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(vec![3, 32, 32], -1.0, 1.0, &mut rng);
    let e = Tensor::uniform(vec![3, 32, 32], -1.0, 1.0, &mut rng);
    let run = || {
        let mut m = Mfcn::new(cfg.clone(), 21).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &x, Some(&e), ForwardOptions::inference()).unwrap();
        g.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn dilated_variants_keep_parameter_counts_close() {
    let base = ArchitectureConfig { channels: vec![16, 32, 64], ..Default::default() };
    let single = ArchitectureConfig::variant(&base, Variant::Model4).parameter_count(false) as f64;
    let block = ArchitectureConfig::variant(&base, Variant::Model5);
    assert_eq!(block.dilation, Dilation::Block);
    assert_eq!(block.upsampling, Upsampling::Unpooling);
    let ratio = block.parameter_count(false) as f64 / single;
    assert!((ratio - 1.0).abs() <= 0.05, "{ratio}");
}
