use dsse_core::embedding::{build_embedding_map, EmbeddingTable};
use dsse_core::losses::{box_consistency, classification_loss, consistency_grad_exact, reconstruction_loss, ClassWeights};
use dsse_core::page::SentenceRecord;
use dsse_core::postprocess::{refine, BoxTree, ProbabilityMap};
use dsse_core::segeval::{iou, remap_binary, Confusion, RemapScheme};
use dsse_core::PixelBox;
use dsse_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn features(c: usize, h: usize, w: usize, data: &[f32]) -> Tensor {
    Tensor::new(vec![1, c, h, w], data[..c * h * w].to_vec()).unwrap()
}

fn boxed(h: usize, w: usize) -> impl Strategy<Value = PixelBox> {
    (1..=w, 1..=h).prop_flat_map(move |(bw, bh)| (0..=w - bw, 0..=h - bh).prop_map(move |(x, y)| PixelBox::new(x, y, bw, bh)))
}

fn map_and_box() -> impl Strategy<Value = (usize, usize, usize, Vec<f32>, PixelBox)> {
    (1..=3usize, 2..=8usize, 2..=8usize).prop_flat_map(|(c, h, w)| {
        (Just(c), Just(h), Just(w), prop::collection::vec(-4.0f32..4.0, c * h * w), boxed(h, w))
    })
}

/// Probability map from raw positive weights, normalized per pixel.
fn probabilities(classes: usize, h: usize, w: usize, raw: &[f32]) -> ProbabilityMap {
    let hw = h * w;
    let mut d = vec![0.0f32; classes * hw];
    for i in 0..hw {
        let z: f32 = (0..classes).map(|c| raw[c * hw + i]).sum();
        for c in 0..classes {
            d[c * hw + i] = raw[c * hw + i] / z;
        }
    }
    ProbabilityMap::new(classes, h, w, d).unwrap()
}

/// Disjoint sibling boxes from a grid of cells, each holding one child
/// strictly inside it.
fn sibling_boxes(cells: &[(usize, usize)]) -> Vec<PixelBox> {
    let mut v = Vec::new();
    for &(i, j) in cells {
        let outer = PixelBox::new(j * 6, i * 6, 6, 6);
        v.push(outer);
        v.push(PixelBox::new(outer.x + 1 + (i + j) % 2, outer.y + 1, 3, 2 + (i * 3 + j) % 3));
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn consistency_ignores_a_per_channel_shift((c, h, w, data, b) in map_and_box(), shift in prop::collection::vec(-3.0f32..3.0, 3)) {
        let f = features(c, h, w, &data);
        let mut moved = f.clone();
        let hw = h * w;
        for (i, v) in moved.data_mut().iter_mut().enumerate() {
            *v += shift[i / hw];
        }
        let (a, s) = (box_consistency(&f, &b).unwrap(), box_consistency(&moved, &b).unwrap());
        prop_assert!((a - s).abs() <= 1e-6 * (1.0 + a), "{a} vs {s}");
    }

    #[test]
    fn consistency_scales_quadratically((c, h, w, data, b) in map_and_box(), s in -3.0f32..3.0) {
        let f = features(c, h, w, &data);
        let mut scaled = f.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= s);
        let (a, q) = (box_consistency(&f, &b).unwrap(), box_consistency(&scaled, &b).unwrap());
        let want = (s as f64).powi(2) * a;
        prop_assert!((q - want).abs() <= 1e-6 * (1.0 + want), "{q} vs {want}");
    }

    #[test]
    fn a_small_descent_step_lowers_the_consistency_loss((c, h, w, data, b) in map_and_box()) {
        let f = features(c, h, w, &data);
        let before = box_consistency(&f, &b).unwrap();
        prop_assume!(before > 1e-3);
        let g = consistency_grad_exact(&f, &b).unwrap();
        let mut stepped = f.clone();
        for (v, d) in stepped.data_mut().iter_mut().zip(g.data()) {
            *v -= 0.05 * d;
        }
        prop_assert!(box_consistency(&stepped, &b).unwrap() < before);
    }

    #[test]
    fn losses_are_nonnegative(data in prop::collection::vec(-4.0f32..4.0, 2 * 3 * 4), labels in prop::collection::vec(0u8..3, 4)) {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 3, 2, 2], data[..12].to_vec()).unwrap());
        let l = classification_loss(&mut g, logits, &labels, &ClassWeights::uniform(3)).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
        let a = g.leaf(Tensor::new(vec![1, 3, 2, 2], data[..12].to_vec()).unwrap());
        let r = g.leaf(Tensor::new(vec![1, 3, 2, 2], data[12..].to_vec()).unwrap());
        let l = reconstruction_loss(&mut g, a, r, None).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
        let same = reconstruction_loss(&mut g, a, a, None).unwrap();
        prop_assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn softmax_is_positive_and_normalized(v in 2..12usize, dim in 1..6usize, seed in prop::collection::vec(-2.0f32..2.0, 2 * 12 * 6)) {
        let vocab = (0..v).map(|i| format!("w{i}")).collect();
        let table = EmbeddingTable::new(vocab, dim, seed[..v * dim].to_vec(), seed[72..72 + v * dim].to_vec()).unwrap();
        for i in 0..v {
            let d = table.distribution(i);
            prop_assert!(d.iter().all(|p| *p > 0.0));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn embedding_maps_have_one_vector_per_sentence(order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(), rows in prop::collection::vec(1..3usize, 5)) {
        let words = ["alpha", "beta", "gamma", "delta", "omega"];
        let vocab: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        let input: Vec<f32> = (0..15).map(|i| (i as f32 * 0.37).sin()).collect();
        let table = EmbeddingTable::new(vocab, 3, input, vec![0.0; 15]).unwrap();
        // sentence i owns a band of rows starting at 3i
        let sentences: Vec<SentenceRecord> = (0..5)
            .map(|i| SentenceRecord { text: words[i].into(), boxes: vec![PixelBox::new(1, 3 * i, 6, rows[i])], element: None })
            .collect();
        let shuffled: Vec<SentenceRecord> = order.iter().map(|&i| sentences[i].clone()).collect();
        let a = build_embedding_map(&sentences, &table, 16, 8).unwrap();
        let b = build_embedding_map(&shuffled, &table, 16, 8).unwrap();
        prop_assert_eq!(&a, &b);
        let mut distinct: Vec<Vec<u32>> = (0..16)
            .flat_map(|y| (0..8).map(move |x| (y, x)))
            .map(|(y, x)| a.pixel(y, x).iter().map(|v| v.to_bits()).collect())
            .collect();
        distinct.sort();
        distinct.dedup();
        prop_assert!(distinct.len() <= sentences.len() + 1);
    }

    #[test]
    fn iou_follows_a_class_permutation(
        pred in prop::collection::vec(0u8..4, 60),
        gt in prop::collection::vec(0u8..4, 60),
        perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let a = iou(&pred, &gt, None, 4).unwrap();
        let map = |m: &[u8]| m.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
        let b = iou(&map(&pred), &map(&gt), None, 4).unwrap();
        for c in 0..4 {
            prop_assert_eq!(a.per_class[c], b.per_class[perm[c] as usize]);
        }
        prop_assert!((a.mean.unwrap() - b.mean.unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn mean_iou_lies_between_the_extremes(pred in prop::collection::vec(0u8..5, 1..80), seed in any::<u64>()) {
        let gt: Vec<u8> = pred.iter().enumerate().map(|(i, &p)| if (seed >> (i % 64)) & 1 == 1 { p } else { (p + 1) % 5 }).collect();
        let r = iou(&pred, &gt, None, 5).unwrap();
        let present: Vec<f64> = r.per_class.iter().flatten().copied().collect();
        let mean = r.mean.unwrap();
        prop_assert!(mean <= present.iter().cloned().fold(f64::MIN, f64::max) + 1e-12);
        prop_assert!(mean >= present.iter().cloned().fold(f64::MAX, f64::min) - 1e-12);
    }

    #[test]
    fn confusion_counts_add_up(pred in prop::collection::vec(0u8..3, 2..100), gt in prop::collection::vec(0u8..3, 100), cut in 1..99usize) {
        let n = pred.len();
        let cut = cut % n;
        let gt = &gt[..n];
        let mut whole = Confusion::new(3);
        whole.add(&pred, gt, None).unwrap();
        let (mut a, mut b) = (Confusion::new(3), Confusion::new(3));
        a.add(&pred[..cut], &gt[..cut], None).unwrap();
        b.add(&pred[cut..], &gt[cut..], None).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(a, whole);
    }

    #[test]
    fn remapping_twice_changes_nothing(mask in prop::collection::vec(prop_oneof![0u8..7, Just(255u8)], 0..50)) {
        let once = remap_binary(&mask, RemapScheme::ThreeClass);
        prop_assert_eq!(remap_binary(&once, RemapScheme::ThreeClass), once);
    }

    #[test]
    fn refine_ignores_sibling_order(
        raw in prop::collection::vec(0.05f32..1.0, 4 * 12 * 18),
        order in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let p = probabilities(4, 12, 18, &raw);
        let cells: Vec<(usize, usize)> = (0..2).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        let boxes = sibling_boxes(&cells);
        let shuffled: Vec<(usize, usize)> = order.iter().map(|&k| cells[k]).collect();
        let a = refine(&p, &BoxTree::from_boxes(&boxes)).unwrap();
        let b = refine(&p, &BoxTree::from_boxes(&sibling_boxes(&shuffled))).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn refine_leaves_uncovered_pixels_background_and_leaf_boxes_uniform(
        raw in prop::collection::vec(0.05f32..1.0, 4 * 12 * 18),
        cells in prop::sample::subsequence((0..6usize).collect::<Vec<_>>(), 0..=6),
    ) {
        let p = probabilities(4, 12, 18, &raw);
        let cells: Vec<(usize, usize)> = cells.iter().map(|k| (k / 3, k % 3)).collect();
        let boxes = sibling_boxes(&cells);
        let labels = refine(&p, &BoxTree::from_boxes(&boxes)).unwrap();
        for y in 0..12 {
            for x in 0..18 {
                if !boxes.iter().any(|b| b.contains_point(x, y)) {
                    prop_assert_eq!(labels[y * 18 + x], 0);
                }
            }
        }
        for leaf in boxes.iter().skip(1).step_by(2) {
            let first = labels[leaf.y * 18 + leaf.x];
            for y in leaf.y..leaf.bottom() {
                for x in leaf.x..leaf.right() {
                    prop_assert_eq!(labels[y * 18 + x], first);
                }
            }
        }
    }
}

#[test]
fn parent_first_order_matters() {
    // the child alone prefers class 2, the parent as a whole class 1
    let (h, w) = (4, 4);
    let mut raw = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let child = y < 2 && x < 2;
            raw[i] = 0.1;
            raw[h * w + i] = if child { 0.1 } else { 0.8 };
            raw[2 * h * w + i] = if child { 0.8 } else { 0.1 };
        }
    }
    let p = probabilities(3, h, w, &raw);
    let (parent, child) = (PixelBox::new(0, 0, 4, 4), PixelBox::new(0, 0, 2, 2));
    let nested = refine(&p, &BoxTree::from_boxes(&[parent, child])).unwrap();
    assert!(nested.iter().all(|&l| l == 1));
    // visiting the child first lets it keep its own label
    let flat = dsse_core::postprocess::BoxNode { bbox: child, parent: None };
    let root = dsse_core::postprocess::BoxNode { bbox: parent, parent: None };
    let reversed = refine(&p, &BoxTree::new(vec![flat, root]).unwrap()).unwrap();
    assert_eq!(reversed[0], 2);
    assert_ne!(nested, reversed);
}
