use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{input, Result};

const DOCUMENTS: &str = include_str!("../../data/corpus.txt");
const HEADINGS: &str = include_str!("../../data/headings.txt");
const CAPTIONS: &str = include_str!("../../data/captions.txt");

/// Text sources for page content. Documents are runs of consecutive
/// sentences; headings and captions are flat pools.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<String>>,
    pub headings: Vec<String>,
    pub captions: Vec<String>,
}

/// Which pool a text element draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Documents,
    Headings,
    Captions,
}

impl Corpus {
    pub fn bundled() -> Self {
        Self::parse(DOCUMENTS, HEADINGS, CAPTIONS).expect("bundled corpus is well formed")
    }

    /// Reads `corpus.txt`, `headings.txt` and `captions.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| input!("corpus file {}: {e}", p.display()))
        };
        Self::parse(&read("corpus.txt")?, &read("headings.txt")?, &read("captions.txt")?)
    }

    /// Documents are separated by blank lines, one sentence per line.
    pub fn parse(documents: &str, headings: &str, captions: &str) -> Result<Self> {
        let mut docs = Vec::new();
        let mut cur = Vec::new();
        for line in documents.lines().map(str::trim) {
            if line.is_empty() {
                if !cur.is_empty() {
                    docs.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(line.to_string());
            }
        }
        if !cur.is_empty() {
            docs.push(cur);
        }
        let pool = |s: &str| s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect::<Vec<_>>();
        let c = Self { documents: docs, headings: pool(headings), captions: pool(captions) };
        if c.documents.is_empty() || c.headings.is_empty() || c.captions.is_empty() {
            return Err(input!("corpus needs at least one document, heading and caption"));
        }
        Ok(c)
    }

    /// Every line of every source, for embedding training.
    pub fn all_sentences(&self) -> Vec<String> {
        self.documents.iter().flatten().chain(&self.headings).chain(&self.captions).cloned().collect()
    }

    /// `n` sentences: consecutive ones from a single document, or
    /// independent draws from a flat pool.
    pub fn sample<R: Rng>(&self, source: TextSource, n: usize, rng: &mut R) -> Vec<String> {
        match source {
            TextSource::Documents => {
                let doc = self.documents.choose(rng).expect("non-empty");
                let n = n.min(doc.len());
                let start = rng.gen_range(0..=doc.len() - n);
                doc[start..start + n].to_vec()
            }
            TextSource::Headings => (0..n).map(|_| self.headings.choose(rng).unwrap().clone()).collect(),
            TextSource::Captions => (0..n).map(|_| self.captions.choose(rng).unwrap().clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bundled_corpus_parses() {
        let c = Corpus::bundled();
        assert!(c.documents.len() >= 20);
        assert!(c.documents.iter().all(|d| d.len() >= 5));
        assert!(c.headings.len() >= 40);
    }

    #[test]
    fn document_samples_are_consecutive() {
        let c = Corpus::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = c.sample(TextSource::Documents, 3, &mut rng);
            let doc = c.documents.iter().find(|d| d.contains(&s[0])).unwrap();
            let i = doc.iter().position(|x| *x == s[0]).unwrap();
            assert_eq!(&doc[i..i + 3], &s[..]);
        }
    }

    #[test]
    fn missing_directory_is_an_input_error() {
        let e = Corpus::from_dir(Path::new("/nonexistent/corpus")).unwrap_err();
        assert!(matches!(e, crate::Error::Input(_)));
        assert!(Corpus::parse("", "a", "b").is_err());
    }
}
