use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dsse_tensor::adadelta::Accumulators;
use dsse_tensor::{AdadeltaState, Checkpoint, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dataset::{Batch, Dataset};
use crate::embedding::EmbeddingTable;
use crate::error::{contract, input, Error, Result};
use crate::losses::{classification_loss, compute_class_weights, consistency_loss, reconstruction_loss, ClassWeights};
use crate::model::{ForwardOptions, Mfcn};
use crate::page::IGNORE_LABEL;
use crate::postprocess::argmax_by;
use crate::segeval::Confusion;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const LATEST: &str = "model.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Synthetic,
    Real,
}

/// Which kind of batch a step uses: strict alternation starting with
/// synthetic when both datasets exist.
pub fn schedule(step: u64, synthetic: bool, real: bool) -> Option<BatchKind> {
    match (synthetic, real) {
        (true, true) if step % 2 == 0 => Some(BatchKind::Synthetic),
        (true, true) => Some(BatchKind::Real),
        (true, false) => Some(BatchKind::Synthetic),
        (false, true) => Some(BatchKind::Real),
        (false, false) => None,
    }
}

/// How many earlier steps used the same kind of batch.
fn ordinal(step: u64, both: bool) -> u64 {
    if both {
        step / 2
    } else {
        step
    }
}

/// Dataset indices of the `k`-th batch of one kind. Each pass over the
/// data follows its own seeded permutation, so the choice depends only on
/// `(seed, kind, k)`.
pub fn batch_indices(seed: u64, kind: BatchKind, k: u64, batch: usize, len: usize) -> Vec<usize> {
    let tag = match kind {
        BatchKind::Synthetic => 0x5157,
        BatchKind::Real => 0x7EA1,
    };
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let p = k * batch as u64 + j;
            let (epoch, pos) = (p / len as u64, (p % len as u64) as usize);
            if cached.as_ref().map_or(true, |c| c.0 != epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos]
        })
        .collect()
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub kind: BatchKind,
    pub pages: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cls: Option<f32>,
    pub l_rec: Vec<f32>,
    pub l_rec_total: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cons: Option<f32>,
    pub total: f32,
    /// Training-pixel accuracy of the batch, labeled batches only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixel_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub code_version: String,
    pub seed: u64,
    pub started: u64,
    pub metrics: String,
    pub checkpoints: Vec<String>,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Mfcn,
    opt: AdadeltaState,
    step: u64,
    synthetic: Option<Dataset>,
    real: Option<Dataset>,
    weights: ClassWeights,
    out: PathBuf,
    manifest: RunManifest,
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

impl Trainer {
    /// Starts a run in `out`, or continues the one already there when
    /// `resume` is set. Relative dataset paths resolve against `base`.
    pub fn new(cfg: TrainConfig, out: &Path, base: Option<&Path>, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let table = match &cfg.embeddings {
            Some(p) if cfg.model.embedding_dim > 0 => {
                let t = EmbeddingTable::load(resolve(base, p))?;
                if t.dim() != cfg.model.embedding_dim {
                    return Err(Error::Config(format!(
                        "embedding table has dimension {}, model expects {}",
                        t.dim(),
                        cfg.model.embedding_dim
                    )));
                }
                Some(t)
            }
            _ => None,
        };
        let stages = cfg.model.stages();
        let load = |p: &Option<PathBuf>, labeled| {
            p.as_ref()
                .map(|p| Dataset::load(&resolve(base, p), &cfg.preprocess, stages, table.as_ref(), labeled))
                .transpose()
        };
        let synthetic = load(&cfg.synthetic, true)?;
        let real = load(&cfg.real, false)?;
        Self::with_datasets(cfg, synthetic, real, out, resume)
    }

    /// Like [`Trainer::new`] with datasets already in memory.
    pub fn with_datasets(
        cfg: TrainConfig,
        synthetic: Option<Dataset>,
        real: Option<Dataset>,
        out: &Path,
        resume: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let classes = cfg.model.classes;
        let weights = match &synthetic {
            Some(d) if cfg.class_weights => {
                compute_class_weights(d.samples.iter().filter_map(|s| s.labels.as_deref()), classes)?
            }
            _ => ClassWeights::uniform(classes),
        };
        fs::create_dir_all(out)?;
        let digest = cfg.digest();
        let manifest_path = out.join(MANIFEST);
        let mut model = Mfcn::new(cfg.model.clone(), cfg.seed)?;
        let mut opt = AdadeltaState::new(cfg.optimizer.into());
        let mut step = 0;
        let manifest = if resume && manifest_path.exists() {
            let m: RunManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
            if m.config_digest != digest {
                return Err(Error::Config(format!(
                    "refusing to resume: run in {} was started with config digest {}, current config has {}",
                    out.display(),
                    m.config_digest,
                    digest
                )));
            }
            let ck = Checkpoint::load(out.join(LATEST))?;
            model = Mfcn::from_checkpoint(cfg.model.clone(), &ck)?;
            for (name, t) in &ck.tensors {
                if let Some(p) = name.strip_prefix("opt.sq_grad.") {
                    let upd = ck
                        .tensors
                        .get(&format!("opt.sq_update.{p}"))
                        .ok_or_else(|| contract!("checkpoint lacks opt.sq_update.{p}"))?;
                    opt.insert_slot(p, Accumulators { sq_grad: t.data().to_vec(), sq_update: upd.data().to_vec() });
                }
            }
            step = ck.step;
            truncate_metrics(&out.join(METRICS), step)?;
            m
        } else {
            if out.join(METRICS).exists() {
                fs::remove_file(out.join(METRICS))?;
            }
            let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            RunManifest {
                config_digest: digest,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: cfg.seed,
                started,
                metrics: METRICS.to_string(),
                checkpoints: Vec::new(),
            }
        };
        let t = Self { cfg, model, opt, step, synthetic, real, weights, out: out.to_path_buf(), manifest };
        t.write_manifest()?;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &Mfcn {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Mfcn {
        &mut self.model
    }

    pub fn class_weights(&self) -> &ClassWeights {
        &self.weights
    }

    pub fn synthetic(&self) -> Option<&Dataset> {
        self.synthetic.as_ref()
    }

    fn write_manifest(&self) -> Result<()> {
        fs::write(self.out.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    /// Model, batch-norm statistics and optimizer slots.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.step);
        for (name, acc) in self.opt.slots() {
            let n = acc.sq_grad.len();
            let t = |v: &Vec<f32>| Tensor::new(vec![n], v.clone()).expect("sized");
            ck.tensors.insert(format!("opt.sq_grad.{name}"), t(&acc.sq_grad));
            ck.tensors.insert(format!("opt.sq_update.{name}"), t(&acc.sq_update));
        }
        ck
    }

    pub fn save(&mut self, snapshot: bool) -> Result<()> {
        let ck = self.checkpoint();
        ck.save(self.out.join(LATEST))?;
        if snapshot {
            let name = format!("step-{:08}.ckpt", self.step);
            ck.save(self.out.join(&name))?;
            if !self.manifest.checkpoints.contains(&name) {
                self.manifest.checkpoints.push(name);
            }
        }
        self.write_manifest()
    }

    /// Runs one optimization step and appends it to the metrics log.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let both = self.synthetic.is_some() && self.real.is_some();
        let kind = schedule(self.step, self.synthetic.is_some(), self.real.is_some())
            .ok_or_else(|| contract!("no dataset to train on"))?;
        let data = match kind {
            BatchKind::Synthetic => self.synthetic.as_ref(),
            BatchKind::Real => self.real.as_ref(),
        }
        .expect("scheduled kinds exist");
        let k = ordinal(self.step, both);
        let idx = batch_indices(self.cfg.seed, kind, k, self.cfg.batch_size, data.len());
        let samples: Vec<_> = idx.iter().map(|&i| &data.samples[i]).collect();
        let pages = samples.iter().map(|s| s.stem.clone()).collect();
        let batch = Batch::new(&samples)?;

        let mut g = Graph::new();
        let emb = if self.cfg.model.embedding_dim > 0 { batch.embedding.as_ref() } else { None };
        let art = self.model.forward(&mut g, &batch.input, emb, ForwardOptions::train())?;
        let lw = self.cfg.loss;
        let mut terms = Vec::new();
        let mut l_cls = None;
        let mut pixel_accuracy = None;
        if kind == BatchKind::Synthetic {
            let labels = batch.labels.as_ref().ok_or_else(|| contract!("synthetic batch without labels"))?;
            let l = classification_loss(&mut g, art.logits, labels, &self.weights)?;
            l_cls = Some(g.value(l).item());
            pixel_accuracy = accuracy(g.value(art.logits), labels);
            terms.push((l, lw.cls));
        }
        let levels = art.reconstructions.len();
        let coef = self.cfg.level_reduction.coefficient(levels);
        let mut l_rec = Vec::with_capacity(levels);
        let mut rec_total = 0.0f32;
        for (l, (&a, &r)) in art.encoded.activations.iter().zip(&art.reconstructions).enumerate() {
            let valid = batch.valid(1 << l);
            let v = reconstruction_loss(&mut g, a, r, Some(&valid))?;
            let x = g.value(v).item();
            l_rec.push(x);
            rec_total += coef * x;
            terms.push((v, lw.rec * coef));
        }
        let (cons, any) = consistency_loss(&mut g, art.features, &batch.boxes, self.cfg.consistency)?;
        let l_cons = any.then(|| g.value(cons).item());
        if any {
            terms.push((cons, lw.cons));
        }
        let total = g.weighted_sum(&terms)?;
        let total_value = g.value(total).item();
        g.backward(total)?;
        for (name, var) in &art.params {
            let Some(grad) = g.grad(*var) else { continue };
            let grad = grad.to_vec();
            let p = self.model.state_mut().params.get_mut(name).ok_or_else(|| contract!("unknown parameter {name}"))?;
            self.opt.step(name, p.data_mut(), &grad)?;
        }
        let rec = StepRecord {
            step: self.step,
            kind,
            pages,
            l_cls,
            l_rec,
            l_rec_total: rec_total,
            l_cons,
            total: total_value,
            pixel_accuracy,
        };
        let mut f = OpenOptions::new().create(true).append(true).open(self.out.join(METRICS))?;
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        self.step += 1;
        Ok(rec)
    }

    /// Trains until `max_steps`, snapshotting at the configured cadence
    /// and saving the latest state at the end.
    pub fn run(&mut self, max_steps: u64, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let every = self.cfg.checkpoint_every;
        while self.step < max_steps {
            let rec = self.train_step()?;
            on_step(&rec);
            if every > 0 && self.step % every == 0 {
                self.save(true)?;
            }
        }
        self.save(false)
    }
}

/// Inference-mode confusion counts of `model` over the labeled samples of
/// `data`, on the preprocessed grid with padding ignored.
pub fn dataset_confusion(model: &mut Mfcn, data: &Dataset) -> Result<Confusion> {
    let classes = model.config().classes;
    let mut c = Confusion::new(classes);
    for s in &data.samples {
        let labels = s.labels.as_ref().ok_or_else(|| input!("sample {} has no labels", s.stem))?;
        let mut g = Graph::new();
        let emb = if model.config().embedding_dim > 0 { s.embedding.as_ref() } else { None };
        let art = model.forward(&mut g, &s.pre.tensor, emb, ForwardOptions::inference())?;
        let logits = g.value(art.logits);
        let hw = labels.len();
        let d = logits.data();
        let pred: Vec<u8> = (0..hw).map(|px| argmax_by(classes, |k| d[k * hw + px]) as u8).collect();
        c.add(&pred, labels, None)?;
    }
    Ok(c)
}

/// Argmax accuracy over labeled pixels of `N×C×H×W` logits.
pub fn accuracy(logits: &Tensor, labels: &[u8]) -> Option<f64> {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let (mut right, mut total) = (0usize, 0usize);
    for i in 0..n {
        for px in 0..hw {
            let l = labels[i * hw + px];
            if l == IGNORE_LABEL {
                continue;
            }
            total += 1;
            if argmax_by(c, |k| d[(i * c + k) * hw + px]) == l as usize {
                right += 1;
            }
        }
    }
    (total > 0).then(|| right as f64 / total as f64)
}

/// Drops metric records at or after `step` so a resumed run rewrites them.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|l| serde_json::from_str::<StepRecord>(l).is_ok_and(|r| r.step < step))
        .collect();
    let mut f = File::create(path)?;
    for l in keep {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternation_is_strict() {
        let kinds: Vec<_> = (0..6).map(|s| schedule(s, true, true).unwrap()).collect();
        assert_eq!(kinds.iter().filter(|k| **k == BatchKind::Synthetic).count(), 3);
        assert!(kinds.windows(2).all(|w| w[0] != w[1]));
        assert_eq!(schedule(3, true, false), Some(BatchKind::Synthetic));
        assert_eq!(schedule(3, false, false), None);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let len = 7;
        let picks: Vec<usize> = (0..7).flat_map(|k| batch_indices(3, BatchKind::Synthetic, k, 2, len)).collect();
        for e in 0..2 {
            let mut seen: Vec<usize> = picks[e * len..(e + 1) * len].to_vec();
            seen.sort();
            assert_eq!(seen, (0..len).collect::<Vec<_>>());
        }
        assert_eq!(batch_indices(3, BatchKind::Synthetic, 5, 2, len), batch_indices(3, BatchKind::Synthetic, 5, 2, len));
    }
}
