//! Benchmark harness: CLIP score against the edited prompt and perceptual
//! distance to the source image, per prompt-generation method.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edit::{build_edited_prompt, run_edit, BackendRegistry, EditJob, SamplerConfig};
use crate::error::{Error, Result};
use crate::gateway::{clip_score, Gateway};
use crate::image::Image;
use crate::injector::{inject, InjectConfig};
use crate::optimizer::{optimize, OptimizerConfig};
use crate::token_filter::{filter, protect_words};
use crate::types::{AttributePair, Prompt, PromptLevel};
use crate::vocab::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Real,
    Synthetic,
}

/// One manifest line as stored on disk. `image` is relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub source: String,
    pub target: String,
    pub one_noun: String,
    pub full_nouns: String,
    pub full_description: String,
    #[serde(default)]
    pub provenance: Provenance,
    /// Prompts produced by other tools, evaluated as `external:<name>`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSample {
    pub id: String,
    pub image: Image,
    pub attribute_pair: AttributePair,
    pub reference_prompts: BTreeMap<PromptLevel, Prompt>,
    pub external_prompts: BTreeMap<String, Prompt>,
    pub provenance: Provenance,
}

impl BenchmarkSample {
    fn from_entry(entry: &ManifestEntry, image: Image, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let attribute_pair = AttributePair::new(&entry.source, &entry.target)
            .map_err(|e| Error::Config(format!("sample `{}`: {e}", entry.id)))?;
        let mut reference_prompts = BTreeMap::new();
        for (level, text) in [
            (PromptLevel::OneNoun, &entry.one_noun),
            (PromptLevel::FullNouns, &entry.full_nouns),
            (PromptLevel::FullDescription, &entry.full_description),
        ] {
            let p = tokenizer.tokenize(text)?;
            if crate::types::occurrences(&p.words(), &attribute_pair.source).is_empty() {
                return Err(Error::Config(format!(
                    "sample `{}`: {} prompt `{text}` lacks the source attribute",
                    entry.id, level
                )));
            }
            reference_prompts.insert(level, p);
        }
        let external_prompts = entry
            .external
            .iter()
            .map(|(k, v)| Ok((k.clone(), tokenizer.tokenize(v)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            id: entry.id.clone(),
            image,
            attribute_pair,
            reference_prompts,
            external_prompts,
            provenance: entry.provenance,
        })
    }
}

/// Loads and validates a manifest; prompts are tokenized with the encoder's
/// tokenizer.
pub fn load_manifest(path: impl AsRef<Path>, gw: &Gateway) -> Result<Vec<BenchmarkSample>> {
    let path = path.as_ref();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let tokenizer = gw.encoder.tokenizer();
    let mut seen = std::collections::BTreeSet::new();
    manifest
        .samples
        .iter()
        .map(|e| {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Config(format!("duplicate sample id `{}`", e.id)));
            }
            let image = Image::load(base.join(&e.image))?;
            BenchmarkSample::from_entry(e, image, tokenizer)
        })
        .collect()
}

/// Where a sample's source prompt comes from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Reference(PromptLevel),
    Caption,
    CaptionFiltered,
    Optimized,
    OptimizedFiltered,
    External(String),
}

impl Method {
    pub fn id(&self) -> String {
        match self {
            Method::Reference(l) => l.as_str().to_string(),
            Method::Caption => "caption".into(),
            Method::CaptionFiltered => "caption_filtered".into(),
            Method::Optimized => "optimized".into(),
            Method::OptimizedFiltered => "optimized_filtered".into(),
            Method::External(name) => format!("external:{name}"),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "one_noun" => Method::Reference(PromptLevel::OneNoun),
            "full_nouns" => Method::Reference(PromptLevel::FullNouns),
            "full_description" => Method::Reference(PromptLevel::FullDescription),
            "caption" => Method::Caption,
            "caption_filtered" => Method::CaptionFiltered,
            "optimized" => Method::Optimized,
            "optimized_filtered" => Method::OptimizedFiltered,
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => Method::External(name.to_string()),
                _ => return Err(Error::Config(format!("unknown method `{other}`"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seed: u64,
    pub backend: String,
    pub inject: InjectConfig,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
    /// Worker threads for per-sample evaluation; 0 picks the core count.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backend: "mock_blend".into(),
            inject: InjectConfig::default(),
            optimizer: OptimizerConfig::default(),
            sampler: SamplerConfig::default(),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub source_prompt: Option<String>,
    pub edited_prompt: Option<String>,
    pub clip_score: Option<f64>,
    pub lpips: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method_id: String,
    pub backend_id: String,
    /// Mean over successful samples; `None` if every sample failed.
    pub clip_score_mean: Option<f64>,
    pub lpips_mean: Option<f64>,
    pub samples: usize,
    pub failures: usize,
    /// One row per sample, sorted by sample id.
    pub per_sample: Vec<SampleRow>,
}

impl MetricReport {
    fn from_rows(method_id: String, backend_id: String, mut rows: Vec<SampleRow>) -> Self {
        rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let ok: Vec<&SampleRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let mean = |f: fn(&SampleRow) -> Option<f64>| {
            let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Self {
            method_id,
            backend_id,
            clip_score_mean: mean(|r| r.clip_score),
            lpips_mean: mean(|r| r.lpips),
            samples: rows.len(),
            failures: rows.len() - ok.len(),
            per_sample: rows,
        }
    }
}

/// Seed for everything random about one sample, independent of its
/// position in the dataset.
pub fn sample_seed(run_seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// The source prompt a method produces for one sample.
pub fn source_prompt(method: &Method, sample: &BenchmarkSample, gw: &Gateway, cfg: &EvalConfig) -> Result<Prompt> {
    let src = &sample.attribute_pair.source;
    let filtered = |p: &Prompt| -> Result<Prompt> {
        let p = crate::vocab::retokenize(p, gw.encoder.tokenizer())?;
        if p.words().len() < 2 {
            return Ok(p);
        }
        Ok(filter(&p, &sample.image, gw, &protect_words(&p, src))?.prompt)
    };
    let optimized = || -> Result<Prompt> {
        let oc = OptimizerConfig {
            seed: sample_seed(cfg.seed, &sample.id),
            ..cfg.optimizer.clone()
        };
        Ok(optimize(&sample.image, src, &oc, gw)?.prompt)
    };
    match method {
        Method::Reference(level) => Ok(sample.reference_prompts[level].clone()),
        Method::Caption => Ok(inject(&sample.image, src, gw, &cfg.inject)?.chosen),
        Method::CaptionFiltered => filtered(&inject(&sample.image, src, gw, &cfg.inject)?.chosen),
        Method::Optimized => optimized(),
        Method::OptimizedFiltered => filtered(&optimized()?),
        Method::External(name) => sample
            .external_prompts
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("sample `{}` has no external prompt `{name}`", sample.id))),
    }
}

fn evaluate_sample(
    method: &Method,
    sample: &BenchmarkSample,
    registry: &BackendRegistry,
    gw: &Gateway,
    cfg: &EvalConfig,
) -> SampleRow {
    let mut row = SampleRow {
        sample_id: sample.id.clone(),
        source_prompt: None,
        edited_prompt: None,
        clip_score: None,
        lpips: None,
        error: None,
    };
    let result = (|| -> Result<()> {
        let source = source_prompt(method, sample, gw, cfg)?;
        row.source_prompt = Some(source.text.clone());
        let edited = build_edited_prompt(&source, &sample.attribute_pair, gw.tokenizer_for(&source))?;
        row.edited_prompt = Some(edited.text.clone());
        let job = EditJob::new(sample.image.clone(), source, edited, &cfg.backend, cfg.sampler.clone());
        let result = run_edit(&job, registry, gw)?;
        let out = &result.output_image;
        let reference = sample.image.resized(out.width(), out.height());
        let score = clip_score(&gw.encode_prompt(&job.edited_prompt)?, &gw.encoder.encode_image(out)?)?;
        row.clip_score = Some(score);
        row.lpips = Some(gw.metric.distance(&reference, out)?);
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
    }
    row
}

/// Runs `method` over the dataset. Sample failures are recorded in their
/// row and excluded from the means.
pub fn evaluate_method(
    method: &Method,
    dataset: &[BenchmarkSample],
    registry: &BackendRegistry,
    gw: &Gateway,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    if registry.get(&cfg.backend).is_none() {
        return Err(Error::Capability(format!("editing backend `{}` is not registered", cfg.backend)));
    }
    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(dataset.len());
    let chunk = dataset.len().div_ceil(workers);
    let rows: Vec<SampleRow> = std::thread::scope(|s| {
        let handles: Vec<_> = dataset
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|sample| evaluate_sample(method, sample, registry, gw, cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    Ok(MetricReport::from_rows(method.id(), cfg.backend.clone(), rows))
}

/// Writes the per-sample table of every report as one CSV.
pub fn write_csv<W: std::io::Write>(reports: &[MetricReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method_id",
        "backend_id",
        "sample_id",
        "source_prompt",
        "edited_prompt",
        "clip_score",
        "lpips",
        "error",
    ])
    .map_err(csv_err)?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        for s in &r.per_sample {
            w.write_record([
                r.method_id.as_str(),
                r.backend_id.as_str(),
                s.sample_id.as_str(),
                s.source_prompt.as_deref().unwrap_or(""),
                s.edited_prompt.as_deref().unwrap_or(""),
                &num(s.clip_score),
                &num(s.lpips),
                s.error.as_deref().unwrap_or(""),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method_id: String,
    pub clip_score_mean: Option<f64>,
    pub lpips_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub points: Vec<CurvePoint>,
    pub data_path: PathBuf,
    pub csv_path: PathBuf,
    pub plot_path: PathBuf,
}

/// Writes `tradeoff.json`, `tradeoff.csv` and `tradeoff.svg` into `out_dir`.
/// Points are sorted by method id.
pub fn tradeoff_curve(reports: &[MetricReport], out_dir: impl AsRef<Path>) -> Result<TradeoffCurve> {
    if reports.len() < 2 {
        return Err(Error::contract("a trade-off curve needs at least two reports"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut points: Vec<CurvePoint> = reports
        .iter()
        .map(|r| CurvePoint {
            method_id: r.method_id.clone(),
            clip_score_mean: r.clip_score_mean,
            lpips_mean: r.lpips_mean,
        })
        .collect();
    points.sort_by(|a, b| a.method_id.cmp(&b.method_id));

    let data_path = out_dir.join("tradeoff.json");
    std::fs::write(&data_path, serde_json::to_string_pretty(&points)? + "\n")?;

    let csv_path = out_dir.join("tradeoff.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for p in &points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;

    let plot_path = out_dir.join("tradeoff.svg");
    std::fs::write(&plot_path, render_svg(&points))?;
    Ok(TradeoffCurve {
        points,
        data_path,
        csv_path,
        plot_path,
    })
}

/// Scatter plot with LPIPS on x and CLIP score on y.
pub fn render_svg(points: &[CurvePoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const PAD: f64 = 60.0;
    let pts: Vec<(&str, f64, f64)> = points
        .iter()
        .filter_map(|p| Some((p.method_id.as_str(), p.lpips_mean?, p.clip_score_mean?)))
        .collect();
    let range = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let m = (hi - lo) * 0.1;
            (lo - m, hi + m)
        }
    };
    let (x0, x1) = range(pts.iter().map(|p| p.1).collect());
    let (y0, y1) = range(pts.iter().map(|p| p.2).collect());
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{lx}\" text-anchor=\"middle\">LPIPS (lower is better)</text>\n\
         <text x=\"15\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {cy})\">CLIP score (higher is better)</text>\n",
        b = H - PAD,
        r = W - PAD,
        cx = W / 2.0,
        lx = H - 15.0,
        cy = H / 2.0,
    );
    for (label, v, pos) in [(x0, "start", sx(x0)), (x1, "end", sx(x1))].map(|(v, a, p)| (a, v, p)) {
        svg += &format!(
            "<text x=\"{pos:.1}\" y=\"{:.1}\" text-anchor=\"{label}\">{v:.4}</text>\n",
            H - PAD + 16.0
        );
    }
    for (v, pos) in [(y0, sy(y0)), (y1, sy(y1))] {
        svg += &format!("<text x=\"{:.1}\" y=\"{pos:.1}\" text-anchor=\"end\">{v:.2}</text>\n", PAD - 4.0);
    }
    for (name, x, y) in &pts {
        let (px, py) = (sx(*x), sy(*y));
        svg += &format!(
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"4\" fill=\"steelblue\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            px + 6.0,
            py - 6.0,
            escape(name)
        );
    }
    svg += "</svg>\n";
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
