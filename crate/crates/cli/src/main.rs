use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsse_core::embedding::{tokenize_corpus, train_skipgram, EmbeddingTable, SkipGramConfig};
use dsse_core::page::{page_stem, write_page};
use dsse_core::pipeline::{
    check_distinct, evaluate, load_model, run_gradcheck, segment_dataset, EvalOptions, SegmentOptions, Segmenter,
    TrainConfig, Trainer,
};
use dsse_core::postprocess::{colorize, visualize};
use dsse_core::segeval::RemapScheme;
use dsse_core::synth::{audit, page_seed, Corpus, Generator, SynthConfig, TemplateLayout};
use dsse_core::{DocClass, DocumentPage, Error, Result, Sidecar};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "dsse", version, about = "Document semantic structure extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Train skip-gram word vectors.
    Embed(EmbedArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Label the pages of a dataset, or a single image.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pages: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Element classes to draw from, comma separated (e.g. `paragraph,figure`).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Generator settings in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fill a fixed layout instead of sampling one: `article`, `report`,
    /// `poster`, or a JSON file.
    #[arg(long)]
    template: Option<String>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Text with one sentence per line; the bundled corpus when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Skip-gram settings in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue the run already in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Print every step's losses.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct SegmentArgs {
    /// Training config that describes the model and its inputs.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// A dataset directory, or a single page image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clean up labels inside the sidecar's element boxes.
    #[arg(long)]
    postprocess: bool,
    /// Write probability-weighted color renderings.
    #[arg(long)]
    visualize: bool,
    /// Keep class probability maps (needed by `eval --lines`).
    #[arg(long)]
    probabilities: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Collapse classes before scoring; `3class` is background/figure/text.
    #[arg(long)]
    remap: Option<RemapScheme>,
    /// Score text lines from saved probability maps.
    #[arg(long)]
    lines: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the backward rule of this operation; the run must then fail.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// List every check, not only failures and the summary.
    #[arg(long)]
    verbose: bool,
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parse_class(name: &str) -> Result<DocClass> {
    DocClass::ELEMENTS
        .into_iter()
        .find(|c| c.name() == name.trim())
        .ok_or_else(|| Error::Config(format!("unknown element class {name:?}")))
}

fn synth(a: SynthArgs) -> Result<bool> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => SynthConfig::default(),
    };
    if !a.classes.is_empty() {
        cfg.classes = a.classes.iter().map(|c| parse_class(c)).collect::<Result<_>>()?;
    }
    if let (Some(dir), Some(p)) = (&mut cfg.corpus_dir, &a.config) {
        if dir.is_relative() {
            *dir = p.parent().unwrap_or(Path::new(".")).join(&*dir);
        }
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let generator = Generator::new(cfg)?;
    let violations = match &a.template {
        None => generator.write_dataset(&a.out, a.seed, a.pages)?,
        Some(t) => {
            let layout = match TemplateLayout::bundled().into_iter().find(|(n, _)| n == t) {
                Some((_, l)) => l,
                None => TemplateLayout::load(Path::new(t))?,
            };
            let mut violations = Vec::new();
            for i in 0..a.pages {
                let stem = page_stem(i);
                let page = generator.from_template(&layout, page_seed(a.seed, i), &stem)?;
                violations.extend(audit(&page).into_iter().map(|v| format!("{stem}: {v}")));
                write_page(&a.out, &stem, &page)?;
            }
            violations
        }
    };
    for v in &violations {
        eprintln!("violation: {v}");
    }
    println!("{} pages written to {}; audit: {} violations", a.pages, a.out.display(), violations.len());
    Ok(violations.is_empty())
}

fn embed(a: EmbedArgs) -> Result<bool> {
    let mut cfg: SkipGramConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => SkipGramConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.dim {
        cfg.dim = d;
    }
    let sentences = match &a.corpus {
        Some(p) => tokenize_corpus(&fs::read_to_string(p)?),
        None => tokenize_corpus(&Corpus::bundled().all_sentences().join("\n")),
    };
    let table = train_skipgram(&sentences, &cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    table.save(&a.out)?;
    println!("{} words, dimension {}, written to {}", table.len(), table.dim(), a.out.display());
    Ok(true)
}

fn train(a: TrainArgs) -> Result<bool> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.max_steps {
        cfg.max_steps = m;
    }
    let base = a.config.parent().map(Path::to_path_buf);
    let max = cfg.max_steps;
    let mut trainer = Trainer::new(cfg, &a.out, base.as_deref(), a.resume)?;
    let start = trainer.step();
    let verbose = a.verbose;
    trainer.run(max, |r| {
        if verbose {
            println!("{}", serde_json::to_string(r).expect("record serializes"));
        }
    })?;
    println!("trained steps {start}..{}; checkpoint in {}", trainer.step(), a.out.display());
    Ok(true)
}

fn segment(a: SegmentArgs) -> Result<bool> {
    let cfg = TrainConfig::load(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let table = match &cfg.embeddings {
        Some(p) if cfg.model.embedding_dim > 0 => {
            let p = if p.is_relative() { base.join(p) } else { p.clone() };
            Some(EmbeddingTable::load(p)?)
        }
        _ => None,
    };
    let model = load_model(&cfg.model, &a.checkpoint)?;
    let mut seg = Segmenter::new(model, cfg.preprocess.clone(), table)?;
    let opts = SegmentOptions { postprocess: a.postprocess, visualize: a.visualize, probabilities: a.probabilities };
    if a.input.is_file() {
        let image = image::open(&a.input)?.to_rgb8();
        let (w, h) = image.dimensions();
        let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("page").to_string();
        let page = DocumentPage { image, mask: None, sidecar: Sidecar::new(stem.clone(), w as usize, h as usize) };
        let s = seg.segment(&page, false)?;
        fs::create_dir_all(&a.out)?;
        image::GrayImage::from_raw(w, h, s.labels.clone())
            .expect("sized")
            .save(a.out.join(format!("{stem}.mask.png")))?;
        colorize(&s.labels, w as usize, h as usize).save(a.out.join(format!("{stem}.color.png")))?;
        if a.visualize {
            visualize(&s.probabilities).save(a.out.join(format!("{stem}.vis.png")))?;
        }
        println!("segmented {} into {}", a.input.display(), a.out.display());
        return Ok(true);
    }
    check_distinct(&a.input, &a.out)?;
    let stems = segment_dataset(&mut seg, &a.input, &a.out, opts)?;
    println!("segmented {} pages into {}", stems.len(), a.out.display());
    Ok(true)
}

fn eval(a: EvalArgs) -> Result<bool> {
    let report = evaluate(&a.pred, &a.gt, EvalOptions { remap: a.remap, lines: a.lines })?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        fs::write(p, json.clone() + "\n")?;
    }
    println!("{json}");
    Ok(true)
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let report = run_gradcheck(a.seed, a.inject_fault.as_deref())?;
    for c in &report.checks {
        if a.verbose || !c.passed {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            println!("{mark} {:<48} rel {:.2e} (tol {:.0e}, {} probed, {} on kinks)", c.name, c.rel_error, c.tolerance, c.checked, c.skipped);
        }
    }
    let m = &report.model;
    if a.verbose {
        for t in &m.tensors {
            println!("     {:<48} rel {:.2e} ({} probed, {} on kinks)", t.name, t.rel_error, t.checked, t.skipped);
        }
    }
    let ops = report.checks.iter().filter(|c| c.passed).count();
    println!("ops and losses: {ops}/{} within tolerance", report.checks.len());
    println!(
        "model: rel {:.2e} (tol {:.0e}) over {} coordinates, {} on kinks: {}",
        m.rel_error,
        m.tolerance,
        m.checked,
        m.skipped,
        if m.passed { "ok" } else { "FAIL" }
    );
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report.passed)
}

/// 1 for broken contracts and failed checks, 2 for the environment and
/// bad input data.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) => 1,
        Error::Input(_) | Error::Config(_) | Error::Io(_) | Error::Image(_) | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Embed(a) => embed(a),
        Command::Train(a) => train(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
