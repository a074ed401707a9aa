//! Skip-gram word embeddings with a full softmax, sentence averaging and
//! per-pixel text embedding maps.
//!
//! ```text
//! P(w_o | w_i) = exp(v'_{w_o} · v_{w_i}) / Σ_w exp(v'_w · v_{w_i})
//! objective    = (1/T) Σ_t Σ_{−C≤j≤C, j≠0} log P(w_{t+j} | w_t)
//! ```
//!
//! Out-of-vocabulary words fall back to the mean of hashed character
//! 3-gram bucket vectors. Each bucket holds the mean input vector of the
//! vocabulary words containing one of its 3-grams, so buckets are a pure
//! function of the trained table and need no storage of their own.
//!
//! Table file layout (little-endian): `"DSKE"`, u32 version, u32 V, u32 N,
//! V × (u32 byte length, UTF-8 token), then the V×N input and V×N output
//! matrices as f32.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dsse_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Error, Result};
use crate::page::SentenceRecord;

pub const MAGIC: &[u8; 4] = b"DSKE";
pub const VERSION: u32 = 1;
pub const BUCKETS: usize = 4096;

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// One tokenized sentence per non-empty line.
pub fn tokenize_corpus(text: &str) -> Vec<Vec<String>> {
    text.lines().map(tokenize).filter(|s| !s.is_empty()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            window: 5,
            epochs: 5,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    input: Vec<f32>,
    output: Vec<f32>,
    buckets: Vec<Option<Vec<f32>>>,
}

fn bucket_of(gram: &[char]) -> usize {
    // FNV-1a over the UTF-8 bytes
    let mut h: u32 = 0x811c_9dc5;
    let mut buf = [0u8; 4];
    for c in gram {
        for b in c.encode_utf8(&mut buf).bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
    }
    h as usize % BUCKETS
}

fn trigram_buckets(word: &str) -> Vec<usize> {
    let chars: Vec<char> = std::iter::once('<').chain(word.chars()).chain(std::iter::once('>')).collect();
    let mut out: Vec<usize> = chars.windows(3).map(bucket_of).collect();
    out.sort_unstable();
    out.dedup();
    out
}

impl EmbeddingTable {
    pub fn new(vocab: Vec<String>, dim: usize, input: Vec<f32>, output: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(input!("embedding dimension must be at least 1"));
        }
        if input.len() != vocab.len() * dim || output.len() != input.len() {
            return Err(contract!("matrices do not match a {}×{dim} table", vocab.len()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(input!("duplicate vocabulary entry {w:?}"));
            }
        }
        let mut table = Self { vocab, index, dim, input, output, buckets: Vec::new() };
        table.buckets = table.derive_buckets();
        Ok(table)
    }

    fn derive_buckets(&self) -> Vec<Option<Vec<f32>>> {
        let mut sums = vec![vec![0.0f64; self.dim]; BUCKETS];
        let mut counts = vec![0usize; BUCKETS];
        for (i, w) in self.vocab.iter().enumerate() {
            for b in trigram_buckets(w) {
                counts[b] += 1;
                for (s, v) in sums[b].iter_mut().zip(self.input_vector(i)) {
                    *s += *v as f64;
                }
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.iter().map(|v| (v / c as f64) as f32).collect()))
            .collect()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn input_vector(&self, i: usize) -> &[f32] {
        &self.input[i * self.dim..(i + 1) * self.dim]
    }

    pub fn output_vector(&self, i: usize) -> &[f32] {
        &self.output[i * self.dim..(i + 1) * self.dim]
    }

    /// `P(· | w_i)` over the whole vocabulary.
    pub fn distribution(&self, center: usize) -> Vec<f64> {
        let h = self.input_vector(center);
        let scores: Vec<f64> = (0..self.len()).map(|w| dot(self.output_vector(w), h)).collect();
        softmax(&scores)
    }

    pub fn softmax_probability(&self, wi: &str, wo: &str) -> Result<f64> {
        let i = self.index_of(wi).ok_or_else(|| input!("out-of-vocabulary token {wi:?}"))?;
        let o = self.index_of(wo).ok_or_else(|| input!("out-of-vocabulary token {wo:?}"))?;
        Ok(self.distribution(i)[o])
    }

    /// Fallback vector for a token outside the vocabulary, if any of its
    /// 3-grams occurs in a known word.
    pub fn oov_vector(&self, token: &str) -> Option<Vec<f32>> {
        let hits: Vec<&Vec<f32>> = trigram_buckets(token).into_iter().filter_map(|b| self.buckets[b].as_ref()).collect();
        if hits.is_empty() {
            return None;
        }
        let mut v = vec![0.0f64; self.dim];
        for h in &hits {
            for (a, b) in v.iter_mut().zip(h.iter()) {
                *a += *b as f64;
            }
        }
        Some(v.iter().map(|a| (a / hits.len() as f64) as f32).collect())
    }

    /// Mean input vector of the tokens; unknown tokens use their 3-gram
    /// fallback or are dropped. No usable token gives the zero vector.
    pub fn sentence_embedding<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f32> {
        let mut sum = vec![0.0f64; self.dim];
        let mut n = 0usize;
        for t in tokens {
            let t = t.as_ref();
            let owned;
            let v: &[f32] = match self.index_of(t) {
                Some(i) => self.input_vector(i),
                None => match self.oov_vector(t) {
                    Some(v) => {
                        owned = v;
                        &owned
                    }
                    None => continue,
                },
            };
            for (s, x) in sum.iter_mut().zip(v) {
                *s += *x as f64;
            }
            n += 1;
        }
        if n == 0 {
            return vec![0.0; self.dim];
        }
        sum.iter().map(|s| (s / n as f64) as f32).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.len() as u32, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &self.vocab {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            w.write_all(t.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.input.len() * 8);
        for v in self.input.iter().chain(&self.output) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(input!("not an embedding table (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(input!("unsupported embedding table version {version}"));
        }
        let (v, n) = (read_u32(r)? as usize, read_u32(r)? as usize);
        let mut vocab = Vec::with_capacity(v);
        for _ in 0..v {
            let len = read_u32(r)? as usize;
            let mut raw = vec![0u8; len];
            r.read_exact(&mut raw)?;
            vocab.push(String::from_utf8(raw).map_err(|_| input!("token is not UTF-8"))?);
        }
        let mut raw = vec![0u8; v * n * 8];
        r.read_exact(&mut raw)?;
        let mut floats: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let output = floats.split_off(v * n);
        Self::new(vocab, n, floats, output)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Vocabulary in order of first appearance.
fn build_vocab(corpus: &[Vec<String>]) -> Vec<String> {
    let mut seen = HashMap::new();
    let mut vocab = Vec::new();
    for w in corpus.iter().flatten() {
        if !seen.contains_key(w) {
            seen.insert(w.clone(), vocab.len());
            vocab.push(w.clone());
        }
    }
    vocab
}

/// The average log-probability objective of `table` on `corpus`.
pub fn objective(corpus: &[Vec<String>], table: &EmbeddingTable, window: usize) -> Result<f64> {
    let mut total = 0.0f64;
    let mut positions = 0usize;
    for sentence in corpus {
        let ids = sentence
            .iter()
            .map(|w| table.index_of(w).ok_or_else(|| input!("out-of-vocabulary token {w:?}")))
            .collect::<Result<Vec<_>>>()?;
        for (t, &center) in ids.iter().enumerate() {
            positions += 1;
            let dist = table.distribution(center);
            for (j, &ctx) in ids.iter().enumerate() {
                if j != t && j.abs_diff(t) <= window {
                    total += dist[ctx].ln();
                }
            }
        }
    }
    if positions == 0 {
        return Err(input!("empty corpus"));
    }
    Ok(total / positions as f64)
}

/// Initial table: input vectors uniform in `±0.5/N`, output vectors zero.
pub fn initial_table(corpus: &[Vec<String>], cfg: &SkipGramConfig) -> Result<EmbeddingTable> {
    validate(corpus, cfg)?;
    let vocab = build_vocab(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 0.5 / cfg.dim as f32;
    let input = (0..vocab.len() * cfg.dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let output = vec![0.0; vocab.len() * cfg.dim];
    EmbeddingTable::new(vocab, cfg.dim, input, output)
}

fn validate(corpus: &[Vec<String>], cfg: &SkipGramConfig) -> Result<()> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(input!("empty corpus"));
    }
    if cfg.dim == 0 || cfg.window == 0 {
        return Err(input!("embedding dimension and window must be at least 1"));
    }
    Ok(())
}

/// Stochastic gradient ascent on the objective, one (center, context)
/// pair at a time, with a linearly decaying learning rate. Sentence order
/// is reshuffled every epoch from `cfg.seed`.
pub fn train_skipgram(corpus: &[Vec<String>], cfg: &SkipGramConfig) -> Result<EmbeddingTable> {
    let table = initial_table(corpus, cfg)?;
    let EmbeddingTable { vocab, dim, mut input, mut output, .. } = table;
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let ids: Vec<Vec<usize>> = corpus.iter().map(|s| s.iter().map(|w| index[w.as_str()]).collect()).collect();
    let pairs_per_epoch: usize = ids
        .iter()
        .map(|s| (0..s.len()).map(|t| (t.saturating_sub(cfg.window)..(t + cfg.window + 1).min(s.len())).len() - 1).sum::<usize>())
        .sum();
    let total_pairs = (pairs_per_epoch * cfg.epochs).max(1);
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut scores = vec![0.0f64; v];
    let mut dh = vec![0.0f32; dim];
    let mut done = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &s in &order {
            let sent = &ids[s];
            for (t, &center) in sent.iter().enumerate() {
                let lo = t.saturating_sub(cfg.window);
                let hi = (t + cfg.window + 1).min(sent.len());
                for (j, &ctx) in sent.iter().enumerate().take(hi).skip(lo) {
                    if j == t {
                        continue;
                    }
                    let lr = cfg.learning_rate * (1.0 - done as f32 / total_pairs as f32).max(1e-4);
                    done += 1;
                    let h = &input[center * dim..(center + 1) * dim];
                    for (w, sc) in scores.iter_mut().enumerate() {
                        *sc = dot(&output[w * dim..(w + 1) * dim], h);
                    }
                    let p = softmax(&scores);
                    dh.iter_mut().for_each(|x| *x = 0.0);
                    for w in 0..v {
                        // d(log P)/d(score_w) = 1[w = ctx] − p_w
                        let e = (if w == ctx { 1.0 } else { 0.0 } - p[w]) as f32;
                        if e == 0.0 {
                            continue;
                        }
                        let out = &mut output[w * dim..(w + 1) * dim];
                        for k in 0..dim {
                            dh[k] += e * out[k];
                            out[k] += lr * e * input[center * dim + k];
                        }
                    }
                    for (x, d) in input[center * dim..(center + 1) * dim].iter_mut().zip(&dh) {
                        *x += lr * d;
                    }
                }
            }
        }
    }
    EmbeddingTable::new(vocab, dim, input, output)
}

/// Per-pixel sentence embeddings, `N×H×W`, zero outside sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMap {
    pub fn zeros(dim: usize, height: usize, width: usize) -> Self {
        Self { dim, height, width, data: vec![0.0; dim * height * width] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        let hw = self.height * self.width;
        (0..self.dim).map(|k| self.data[k * hw + y * self.width + x]).collect()
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::new(vec![self.dim, self.height, self.width], self.data).expect("sized by construction")
    }
}

/// Rasterizes sentence regions into an embedding map. Regions must lie
/// inside `h×w` and distinct sentences must not share pixels.
pub fn build_embedding_map(sentences: &[SentenceRecord], table: &EmbeddingTable, h: usize, w: usize) -> Result<EmbeddingMap> {
    let mut map = EmbeddingMap::zeros(table.dim(), h, w);
    let mut owner = vec![usize::MAX; h * w];
    let hw = h * w;
    for (si, s) in sentences.iter().enumerate() {
        if let Some(b) = s.boxes.iter().find(|b| !b.fits_in(w, h)) {
            return Err(input!("sentence box {b:?} exceeds the {h}×{w} map"));
        }
        let emb = table.sentence_embedding(&tokenize(&s.text));
        for b in &s.boxes {
            for y in b.y..b.bottom() {
                for x in b.x..b.right() {
                    let at = y * w + x;
                    if owner[at] != usize::MAX && owner[at] != si {
                        return Err(input!("sentences {} and {si} overlap at ({x}, {y})", owner[at]));
                    }
                    owner[at] = si;
                    for (k, v) in emb.iter().enumerate() {
                        map.data[k * hw + at] = *v;
                    }
                }
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::page::PixelBox;

    fn table(vocab: &[&str], dim: usize, input: Vec<f32>, output: Vec<f32>) -> EmbeddingTable {
        EmbeddingTable::new(vocab.iter().map(|s| s.to_string()).collect(), dim, input, output).unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Hello, World! it's 2nd-rate"), vec!["hello", "world", "it", "s", "2nd", "rate"]);
        assert!(tokenize(" ..; ").is_empty());
    }

    #[test]
    fn zero_table_is_uniform() {
        let t = table(&["a", "b", "c"], 2, vec![0.0; 6], vec![0.0; 6]);
        for w in ["a", "b", "c"] {
            assert!((t.softmax_probability("a", w).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(t.softmax_probability("a", "zzz").is_err());
    }

    #[test]
    fn hand_softmax() {
        // v_a = (1), v'_a = ln 3, v'_b = 0 → logits (ln 3, 0)
        let t = table(&["a", "b"], 1, vec![1.0, 0.0], vec![3f32.ln(), 0.0]);
        assert!((t.softmax_probability("a", "a").unwrap() - 0.75).abs() < 1e-6);
        assert!((t.softmax_probability("a", "b").unwrap() - 0.25).abs() < 1e-6);
    }

    #[test]
    fn sentence_embedding_averages() {
        let t = table(&["u", "v", "w"], 2, vec![1.0, 2.0, -1.0, -2.0, 4.0, 0.5], vec![0.0; 6]);
        assert_eq!(t.sentence_embedding(&["u"]), vec![1.0, 2.0]);
        assert_eq!(t.sentence_embedding(&["u", "v"]), vec![0.0, 0.0]);
        let m = t.sentence_embedding(&["u", "v", "w"]);
        assert!((m[0] - 4.0 / 3.0).abs() < 1e-6 && (m[1] - 0.5 / 3.0).abs() < 1e-6);
        assert_eq!(t.sentence_embedding::<&str>(&[]), vec![0.0, 0.0]);
    }

    #[test]
    fn oov_words_use_shared_trigrams() {
        let t = table(&["paper", "zebra"], 1, vec![2.0, -4.0], vec![0.0; 2]);
        // "papers" shares "<pa", "pap", "ape", "per" with "paper" only
        assert_eq!(t.oov_vector("papers"), Some(vec![2.0]));
        assert_eq!(t.sentence_embedding(&["papers", "qqqq"]), vec![2.0]);
        assert_eq!(t.oov_vector("qqqq"), None);
    }

    #[test]
    fn table_file_round_trip() {
        let t = table(&["α", "b"], 2, vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.25, 8.0]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DSKE");
        assert_eq!(EmbeddingTable::read_from(&mut &buf[..]).unwrap(), t);
        assert!(EmbeddingTable::read_from(&mut &buf[..buf.len() - 2]).is_err());
    }

    #[test]
    fn degenerate_corpora() {
        let cfg = SkipGramConfig { dim: 4, epochs: 3, ..Default::default() };
        assert!(train_skipgram(&[], &cfg).is_err());
        assert!(train_skipgram(&[vec![]], &cfg).is_err());
        let single = vec![vec!["x".to_string(); 6]];
        let before = objective(&single, &initial_table(&single, &cfg).unwrap(), cfg.window).unwrap();
        let trained = train_skipgram(&single, &cfg).unwrap();
        assert_eq!(before, 0.0);
        assert_eq!(objective(&single, &trained, cfg.window).unwrap(), 0.0);
    }

    #[test]
    fn training_improves_the_objective_and_is_reproducible() {
        let corpus = tokenize_corpus("the cat sat on the mat\nthe dog sat on the log\na cat and a dog\n");
        let cfg = SkipGramConfig { dim: 8, window: 2, epochs: 20, learning_rate: 0.1, seed: 3 };
        let before = objective(&corpus, &initial_table(&corpus, &cfg).unwrap(), 2).unwrap();
        let a = train_skipgram(&corpus, &cfg).unwrap();
        let after = objective(&corpus, &a, 2).unwrap();
        assert!(after > before, "{after} <= {before}");
        assert_eq!(a, train_skipgram(&corpus, &cfg).unwrap());
    }

    #[test]
    fn maps_follow_sentence_regions() {
        let t = table(&["x", "y"], 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 4]);
        let rec = |text: &str, b: PixelBox| SentenceRecord { text: text.into(), boxes: vec![b], element: None };
        assert!(build_embedding_map(&[], &t, 3, 4).unwrap().data.iter().all(|v| *v == 0.0));
        let full = build_embedding_map(&[rec("x", PixelBox::new(0, 0, 4, 3))], &t, 3, 4).unwrap();
        assert!((0..3).all(|y| (0..4).all(|x| full.pixel(y, x) == vec![1.0, 0.0])));
        let sents = [rec("x", PixelBox::new(0, 0, 2, 2)), rec("y", PixelBox::new(2, 1, 2, 2))];
        let m = build_embedding_map(&sents, &t, 3, 4).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let expect = if x < 2 && y < 2 {
                    vec![1.0, 0.0]
                } else if x >= 2 && y >= 1 {
                    vec![0.0, 1.0]
                } else {
                    vec![0.0, 0.0]
                };
                assert_eq!(m.pixel(y, x), expect);
            }
        }
        let overlap = [rec("x", PixelBox::new(0, 0, 2, 2)), rec("y", PixelBox::new(1, 1, 2, 2))];
        assert!(build_embedding_map(&overlap, &t, 3, 4).is_err());
        assert!(build_embedding_map(&[rec("x", PixelBox::new(3, 0, 2, 1))], &t, 3, 4).is_err());
    }
}
