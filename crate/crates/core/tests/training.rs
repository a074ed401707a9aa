use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dsse_core::model::{ArchitectureConfig, PreprocessConfig};
use dsse_core::pipeline::{
    load_model, read_metrics, segment_dataset, BatchKind, SegmentOptions, Segmenter, TrainConfig, Trainer, METRICS,
};
use dsse_core::synth::{Generator, SynthConfig};
use dsse_core::Error;
use dsse_tensor::Checkpoint;

fn pages(root: &Path, seed: u64, n: usize) -> PathBuf {
    let v = Generator::new(SynthConfig::default()).unwrap().write_dataset(root, seed, n).unwrap();
    assert!(v.is_empty());
    root.to_path_buf()
}

fn config(synthetic: Option<PathBuf>, real: Option<PathBuf>) -> TrainConfig {
    TrainConfig {
        synthetic,
        real,
        model: ArchitectureConfig { channels: vec![4, 4], embedding_dim: 0, ..Default::default() },
        preprocess: PreprocessConfig { max_side: 64, ..Default::default() },
        batch_size: 2,
        max_steps: 6,
        ..Default::default()
    }
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(root.join("pages")).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.clone(), fs::read(&p).unwrap());
    }
    out
}

#[test]
fn synthetic_only_runs_score_classification_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let syn = pages(&dir.path().join("syn"), 1, 3);
    let mut t = Trainer::new(config(Some(syn), None), &dir.path().join("run"), None, false).unwrap();
    t.run(4, |_| {}).unwrap();
    let log = read_metrics(&dir.path().join("run").join(METRICS)).unwrap();
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|r| r.kind == BatchKind::Synthetic && r.l_cls.is_some() && r.l_cons.is_some()));
    assert!(log.iter().all(|r| r.l_rec.len() == 3 && r.total.is_finite()));
}

#[test]
fn mixed_runs_alternate_and_score_classification_on_half_the_steps() {
    let dir = tempfile::tempdir().unwrap();
    let syn = pages(&dir.path().join("syn"), 1, 3);
    let real = pages(&dir.path().join("real"), 2, 3);
    let before = (snapshot(&syn), snapshot(&real));
    let mut t = Trainer::new(config(Some(syn.clone()), Some(real.clone())), &dir.path().join("run"), None, false).unwrap();
    t.run(10, |_| {}).unwrap();
    let log = read_metrics(&dir.path().join("run").join(METRICS)).unwrap();
    assert_eq!(log.iter().filter(|r| r.l_cls.is_some()).count(), 5);
    for w in log.windows(2) {
        assert_ne!(w[0].kind, w[1].kind);
    }
    assert!(log.iter().filter(|r| r.kind == BatchKind::Real).all(|r| r.l_cls.is_none() && r.pixel_accuracy.is_none()));
    // inputs are read only
    assert!(before == (snapshot(&syn), snapshot(&real)));
}

#[test]
fn resuming_matches_an_uninterrupted_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let syn = pages(&dir.path().join("syn"), 3, 3);
    let real = pages(&dir.path().join("real"), 4, 2);
    let cfg = config(Some(syn), Some(real));

    let straight = dir.path().join("straight");
    Trainer::new(cfg.clone(), &straight, None, false).unwrap().run(6, |_| {}).unwrap();

    let split = dir.path().join("split");
    Trainer::new(cfg.clone(), &split, None, false).unwrap().run(3, |_| {}).unwrap();
    let mut resumed = Trainer::new(cfg, &split, None, true).unwrap();
    assert_eq!(resumed.step(), 3);
    resumed.run(6, |_| {}).unwrap();

    let a = Checkpoint::load(straight.join("model.ckpt")).unwrap();
    let b = Checkpoint::load(split.join("model.ckpt")).unwrap();
    assert_eq!(a.step, 6);
    assert_eq!(a.tensors.keys().collect::<Vec<_>>(), b.tensors.keys().collect::<Vec<_>>());
    for (name, t) in &a.tensors {
        let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t.data()), bits(b.tensors[name].data()), "{name}");
    }
    let la = read_metrics(&straight.join(METRICS)).unwrap();
    let lb = read_metrics(&split.join(METRICS)).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn resuming_under_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let syn = pages(&dir.path().join("syn"), 5, 2);
    let cfg = config(Some(syn), None);
    let run = dir.path().join("run");
    Trainer::new(cfg.clone(), &run, None, false).unwrap().run(1, |_| {}).unwrap();
    let other = TrainConfig { seed: 9, ..cfg.clone() };
    assert!(matches!(Trainer::new(other, &run, None, true), Err(Error::Config(_))));
    // a longer budget is the same run
    let longer = TrainConfig { max_steps: 50, ..cfg };
    assert_eq!(Trainer::new(longer, &run, None, true).unwrap().step(), 1);
}

#[test]
fn segmenting_twice_writes_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let syn = pages(&dir.path().join("syn"), 6, 2);
    let cfg = config(Some(syn.clone()), None);
    let run = dir.path().join("run");
    Trainer::new(cfg.clone(), &run, None, false).unwrap().run(2, |_| {}).unwrap();
    let opts = SegmentOptions { postprocess: true, visualize: true, probabilities: true };
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let model = load_model(&cfg.model, &run.join("model.ckpt")).unwrap();
        let mut seg = Segmenter::new(model, cfg.preprocess.clone(), None).unwrap();
        let out = dir.path().join(name);
        let stems = segment_dataset(&mut seg, &syn, &out, opts).unwrap();
        assert_eq!(stems.len(), 2);
        outputs.push(snapshot(&out).into_values().collect::<Vec<_>>());
    }
    assert!(!outputs[0].is_empty());
    assert!(outputs[0] == outputs[1]);
}
