use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Branch dilations of the dilated block.
pub const BLOCK_DILATIONS: [usize; 5] = [1, 2, 4, 8, 16];

/// Encoder convolution: one dilated 3×3 conv, or five parallel branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DilationRepr", into = "DilationRepr")]
pub enum Dilation {
    Single(usize),
    Block,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DilationRepr {
    Rate(usize),
    Name(String),
}

impl TryFrom<DilationRepr> for Dilation {
    type Error = String;

    fn try_from(r: DilationRepr) -> std::result::Result<Self, String> {
        match r {
            DilationRepr::Rate(0) => Err("dilation must be at least 1".into()),
            DilationRepr::Rate(d) => Ok(Dilation::Single(d)),
            DilationRepr::Name(s) if s == "block" => Ok(Dilation::Block),
            DilationRepr::Name(s) => Err(format!("dilation must be a positive integer or \"block\", got {s:?}")),
        }
    }
}

impl From<Dilation> for DilationRepr {
    fn from(d: Dilation) -> Self {
        match d {
            Dilation::Single(r) => DilationRepr::Rate(r),
            Dilation::Block => DilationRepr::Name("block".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    Unpooling,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub classes: usize,
    pub input_channels: usize,
    /// Width of each encoder stage; its length is the stage count.
    pub channels: Vec<usize>,
    pub dilation: Dilation,
    /// Per-stage branch width of dilated blocks; empty means `⌈c/4⌉`.
    pub branch_channels: Vec<usize>,
    pub upsampling: Upsampling,
    pub skip: bool,
    /// Text embedding dimension; 0 builds a vision-only model.
    pub embedding_dim: usize,
    /// Encoder level whose output is merged with the embedding map
    /// (0 is the input image); defaults to the last stage.
    pub bridge_stage: Option<usize>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            classes: 7,
            input_channels: 3,
            channels: vec![16, 32, 64, 128],
            dilation: Dilation::Block,
            branch_channels: Vec::new(),
            upsampling: Upsampling::Unpooling,
            skip: true,
            embedding_dim: 128,
            bridge_stage: None,
        }
    }
}

/// The five ablation topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// dilation 1, bilinear upsampling, no skips
    Model1,
    /// dilation 1, bilinear upsampling, skips
    Model2,
    /// dilation 1, unpooling, skips
    Model3,
    /// dilation 8, unpooling, skips
    Model4,
    /// dilated block, unpooling, skips
    Model5,
}

impl ArchitectureConfig {
    /// `base` with the topology switches of `variant`. Model5 gets branch
    /// widths balanced against the single-dilation parameter count.
    pub fn variant(base: &ArchitectureConfig, variant: Variant) -> Self {
        let mut c = base.clone();
        c.branch_channels.clear();
        let (dilation, upsampling, skip) = match variant {
            Variant::Model1 => (Dilation::Single(1), Upsampling::Bilinear, false),
            Variant::Model2 => (Dilation::Single(1), Upsampling::Bilinear, true),
            Variant::Model3 => (Dilation::Single(1), Upsampling::Unpooling, true),
            Variant::Model4 => (Dilation::Single(8), Upsampling::Unpooling, true),
            Variant::Model5 => (Dilation::Block, Upsampling::Unpooling, true),
        };
        c.dilation = dilation;
        c.upsampling = upsampling;
        c.skip = skip;
        if variant == Variant::Model5 {
            c.branch_channels = balanced_branch_channels(&c);
        }
        c
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn bridge(&self) -> usize {
        self.bridge_stage.unwrap_or(self.stages())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages() < 2 {
            return bad(format!("need at least 2 encoder stages, got {}", self.stages()));
        }
        if self.channels.contains(&0) || self.classes == 0 || self.input_channels == 0 {
            return bad("channel and class counts must be positive".into());
        }
        if !self.branch_channels.is_empty() && self.branch_channels.len() != self.stages() {
            return bad("branch_channels needs one entry per stage".into());
        }
        if self.branch_channels.contains(&0) {
            return bad("branch widths must be positive".into());
        }
        if self.bridge() > self.stages() {
            return bad(format!("bridge stage {} is past the last stage", self.bridge()));
        }
        Ok(())
    }

    /// Branch width of stage `l` (1-based) in block mode.
    pub fn branch_width(&self, l: usize) -> usize {
        self.branch_channels
            .get(l - 1)
            .copied()
            .unwrap_or_else(|| self.channels[l - 1].div_ceil(4))
    }

    /// Channels of the encoder output `f_l` (and of `a_l`), 1-based.
    pub fn encoder_width(&self, l: usize) -> usize {
        match self.dilation {
            Dilation::Single(_) => self.channels[l - 1],
            Dilation::Block => BLOCK_DILATIONS.len() * self.branch_width(l),
        }
    }

    /// Channels of `a_l` for `l = 0..=L`.
    pub fn activation_width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_channels
        } else {
            self.encoder_width(l)
        }
    }

    /// Every learnable tensor with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.conv.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.conv.bias"), vec![cout]));
        };
        let cbr = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize| {
            conv(out, name, cin, cout, 3);
            out.push((format!("{name}.bn.gamma"), vec![cout]));
            out.push((format!("{name}.bn.beta"), vec![cout]));
        };
        let n = self.embedding_dim;
        let bridge = self.bridge();
        let big_l = self.stages();
        let mut cin = self.input_channels + if bridge == 0 { n } else { 0 };
        for l in 1..=big_l {
            match self.dilation {
                Dilation::Single(_) => cbr(&mut out, &format!("enc{l}"), cin, self.channels[l - 1]),
                Dilation::Block => {
                    for d in BLOCK_DILATIONS {
                        cbr(&mut out, &format!("enc{l}.d{d}"), cin, self.branch_width(l));
                    }
                }
            }
            cin = self.encoder_width(l) + if bridge == l && l < big_l { n } else { 0 };
        }
        let bottleneck = self.encoder_width(big_l) + if bridge == big_l { n } else { 0 };
        // decoders widen back to the pooled width before unpooling, since
        // pool indices are per channel
        let mut x = bottleneck;
        for l in (1..=big_l).rev() {
            let (c, u) = (self.channels[l - 1], self.encoder_width(l));
            cbr(&mut out, &format!("dec{l}.reduce"), x, u);
            if self.skip {
                cbr(&mut out, &format!("dec{l}.fuse"), 2 * u, c);
            } else {
                cbr(&mut out, &format!("dec{l}.refine"), u, c);
            }
            x = c;
        }
        conv(&mut out, "head", x, self.classes, 1);
        conv(&mut out, &format!("rec{big_l}"), bottleneck, self.activation_width(big_l), 3);
        let mut y = bottleneck;
        for l in (1..=big_l).rev() {
            let (c, u) = (self.channels[l - 1], self.encoder_width(l));
            cbr(&mut out, &format!("aux{l}.reduce"), y, u);
            cbr(&mut out, &format!("aux{l}.refine"), u, c);
            conv(&mut out, &format!("rec{}", l - 1), c, self.activation_width(l - 1), 3);
            y = c;
        }
        out
    }

    /// Names of the batch-norm layers, whose running statistics are state.
    pub fn batch_norm_layers(&self) -> Vec<(String, usize)> {
        self.parameter_shapes()
            .into_iter()
            .filter_map(|(name, shape)| name.strip_suffix(".gamma").map(|p| (p.to_string(), shape[0])))
            .collect()
    }

    /// Learnable scalars, optionally excluding the auxiliary decoder.
    pub fn parameter_count(&self, with_auxiliary: bool) -> usize {
        self.parameter_shapes()
            .iter()
            .filter(|(name, _)| with_auxiliary || !is_auxiliary(name))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn digest(&self) -> [u8; 32] {
        digest_of(self)
    }
}

pub fn is_auxiliary(name: &str) -> bool {
    name.starts_with("aux") || name.starts_with("rec")
}

/// SHA-256 of the canonical (field-ordered, compact) JSON encoding.
pub fn digest_of<T: Serialize>(value: &T) -> [u8; 32] {
    let json = serde_json::to_vec(value).expect("config types serialize");
    Sha256::digest(&json).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Block branch widths, proportional to the stage widths, that bring the
/// segmentation network's parameter count closest to the same topology
/// with a single convolution per stage.
pub fn balanced_branch_channels(cfg: &ArchitectureConfig) -> Vec<usize> {
    let mut single = cfg.clone();
    single.dilation = Dilation::Single(1);
    single.branch_channels.clear();
    let target = single.parameter_count(false) as f64;
    let gap = |widths: &[usize]| {
        let mut trial = cfg.clone();
        trial.dilation = Dilation::Block;
        trial.branch_channels = widths.to_vec();
        ((trial.parameter_count(false) as f64 - target) / target).abs()
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    for step in 1..=400 {
        let r = step as f64 * 0.0025;
        let widths: Vec<usize> = cfg.channels.iter().map(|&c| ((c as f64 * r).round() as usize).max(1)).collect();
        let g = gap(&widths);
        if best.as_ref().map_or(true, |(b, _)| g < *b) {
            best = Some((g, widths));
        }
    }
    let (mut best_gap, mut widths) = best.expect("nonempty search");
    // rounding can leave a gap on narrow models; nudge single stages
    loop {
        let mut improved = false;
        for i in 0..widths.len() {
            for delta in [-1isize, 1] {
                let mut trial = widths.clone();
                let w = trial[i] as isize + delta;
                if w < 1 {
                    continue;
                }
                trial[i] = w as usize;
                let g = gap(&trial);
                if g < best_gap {
                    (best_gap, widths, improved) = (g, trial, true);
                }
            }
        }
        if !improved {
            return widths;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ArchitectureConfig { dilation: Dilation::Single(8), bridge_stage: Some(2), ..Default::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("dilation = 8"));
        assert_eq!(toml::from_str::<ArchitectureConfig>(&text).unwrap(), cfg);
        let block: ArchitectureConfig = toml::from_str("dilation = \"block\"\nchannels = [4, 8]").unwrap();
        assert_eq!(block.dilation, Dilation::Block);
        assert!(toml::from_str::<ArchitectureConfig>("dilation = 0").is_err());
        assert!(toml::from_str::<ArchitectureConfig>("dilation = \"wide\"").is_err());
        assert!(toml::from_str::<ArchitectureConfig>("colour = 1").is_err());
    }

    #[test]
    fn validation() {
        assert!(ArchitectureConfig::default().validate().is_ok());
        let short = ArchitectureConfig { channels: vec![8], ..Default::default() };
        assert!(short.validate().is_err());
        let far = ArchitectureConfig { bridge_stage: Some(9), ..Default::default() };
        assert!(far.validate().is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ArchitectureConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.skip = false;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn default_branch_width_rounds_up() {
        let cfg = ArchitectureConfig { channels: vec![16, 30], ..Default::default() };
        assert_eq!(cfg.branch_width(1), 4);
        assert_eq!(cfg.branch_width(2), 8);
        assert_eq!(cfg.encoder_width(2), 40);
    }

    #[test]
    fn block_and_single_parameter_counts_match() {
        for channels in [vec![16, 32, 64, 128], vec![8, 16, 32], vec![8, 16]] {
            let base = ArchitectureConfig { channels, ..Default::default() };
            let single = ArchitectureConfig::variant(&base, Variant::Model3).parameter_count(false) as f64;
            let block = ArchitectureConfig::variant(&base, Variant::Model5).parameter_count(false) as f64;
            assert!(((block - single) / single).abs() <= 0.05, "{block} vs {single}");
        }
    }

    #[test]
    fn variants_differ_in_the_expected_parameters() {
        let base = ArchitectureConfig { channels: vec![8, 16], embedding_dim: 4, ..Default::default() };
        let names = |v| -> Vec<String> {
            ArchitectureConfig::variant(&base, v).parameter_shapes().into_iter().map(|p| p.0).collect()
        };
        let (m1, m2, m3, m4, m5) =
            (names(Variant::Model1), names(Variant::Model2), names(Variant::Model3), names(Variant::Model4), names(Variant::Model5));
        assert!(m1.iter().any(|n| n.contains(".refine")) && !m1.iter().any(|n| n.starts_with("dec") && n.contains(".fuse")));
        assert!(m2.iter().any(|n| n.starts_with("dec1.fuse")));
        assert_eq!(m2, m3);
        assert_eq!(m3, m4);
        assert!(m5.iter().any(|n| n == "enc1.d16.conv.weight") && !m5.iter().any(|n| n == "enc1.conv.weight"));
        let mut sorted = m5.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), m5.len());
    }
}
