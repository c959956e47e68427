//! Command-line front end. Every subcommand prints one JSON document on
//! stdout and leaves a run record under `<out-dir>/runs/`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::edit::{build_edited_prompt, run_edit, EditJob};
use crate::error::{Error, Result};
use crate::eval::{evaluate_method, load_manifest, tradeoff_curve, write_csv, Method};
use crate::gateway::{clip_score, GatewayBackend};
use crate::image::{hex, Image};
use crate::injector::inject;
use crate::optimizer::{optimize, write_trace_jsonl, InjectionLocation};
use crate::token_filter::{filter, protect_words};
use crate::types::{split_words, AttributePair, Candidate};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "promptsmith", version, about = "Grounded prompt generation for text-driven image editing")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model gateway: mock, clip_blip or custom.
    #[arg(long, global = true)]
    pub gateway: Option<GatewayBackend>,
    /// Model server URL for non-mock gateways.
    #[arg(long, global = true, value_name = "URL")]
    pub gateway_url: Option<String>,
    /// Extra configuration override, e.g. `--set sampler.guidance=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory for run records and produced files.
    #[arg(long, global = true, value_name = "DIR", default_value = "promptsmith-out")]
    pub out_dir: PathBuf,
    /// Print compact single-line JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Caption an image.
    Caption(CaptionArgs),
    /// Inject the source attribute into a generated caption.
    Inject(InjectArgs),
    /// Optimize a hard prompt that keeps the source attribute.
    Optimize(OptimizeArgs),
    /// Drop words whose removal raises the image-text score.
    Filter(FilterArgs),
    /// Run an editing backend on a source/edited prompt pair.
    Edit(EditArgs),
    /// Evaluate prompt methods over a benchmark manifest.
    Bench(BenchArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Caption(_) => "caption",
            Command::Inject(_) => "inject",
            Command::Optimize(_) => "optimize",
            Command::Filter(_) => "filter",
            Command::Edit(_) => "edit",
            Command::Bench(_) => "bench",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Source attribute; quote multi-word attributes.
    #[arg(long)]
    pub source_word: String,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Force the synonym window to start at this word index.
    #[arg(long)]
    pub synonym_index: Option<usize>,
    /// Force a candidate: truncated or append.
    #[arg(long, value_parser = parse_candidate)]
    pub candidate: Option<Candidate>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub source_word: String,
    #[arg(long)]
    pub num_tokens: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub location: Option<InjectionLocation>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Source attribute; its words are never removed.
    #[arg(long)]
    pub source_word: Option<String>,
    /// Further words to keep.
    #[arg(long)]
    pub protect: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub source_word: String,
    #[arg(long)]
    pub target_word: String,
    /// Source prompt; generated by injection when omitted.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub backend: Option<String>,
    /// Noise strength in (0, 1] or `auto`.
    #[arg(long)]
    pub sdedit_t: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated method ids.
    #[arg(long, value_delimiter = ',', default_value = "one_noun,full_nouns,full_description,caption")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub queue_depth: Option<usize>,
}

fn parse_candidate(s: &str) -> std::result::Result<Candidate, String> {
    match s {
        "truncated" => Ok(Candidate::Truncated),
        "append" => Ok(Candidate::Append),
        other => Err(format!("`{other}` is not truncated or append")),
    }
}

/// Overrides implied by flags, applied after `--set`.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.set.clone();
    let q = |s: &str| Value::String(s.to_string()).to_string();
    if let Some(seed) = cli.seed {
        o.push(format!("seed={seed}"));
    }
    if let Some(g) = cli.gateway {
        o.push(format!("gateway.backend={}", q(&g.to_string())));
    }
    if let Some(u) = &cli.gateway_url {
        o.push(format!("gateway.url={}", q(u)));
    }
    match &cli.command {
        Command::Caption(a) => o.extend(a.max_tokens.map(|n| format!("caption.max_tokens={n}"))),
        Command::Inject(a) => o.extend(a.max_tokens.map(|n| format!("caption.max_tokens={n}"))),
        Command::Optimize(a) => {
            o.extend(a.num_tokens.map(|n| format!("optimizer.num_tokens={n}")));
            o.extend(a.steps.map(|n| format!("optimizer.steps={n}")));
            o.extend(a.learning_rate.map(|n| format!("optimizer.learning_rate={n:?}")));
            o.extend(a.location.map(|l| format!("optimizer.injection_location={}", q(location_str(l)))));
        }
        Command::Edit(a) => {
            o.extend(a.backend.as_ref().map(|b| format!("edit.backend={}", q(b))));
            o.extend(a.sdedit_t.as_ref().map(|t| match t.as_str() {
                "auto" => format!("sampler.sdedit_t={}", q("auto")),
                t => format!("sampler.sdedit_t={t}"),
            }));
        }
        Command::Bench(a) => {
            o.extend(a.backend.as_ref().map(|b| format!("edit.backend={}", q(b))));
            o.extend(a.workers.map(|n| format!("bench.workers={n}")));
        }
        Command::Serve(a) => {
            o.extend(a.host.as_ref().map(|h| format!("service.host={}", q(h))));
            o.extend(a.port.map(|p| format!("service.port={p}")));
            o.extend(
                a.data_dir
                    .as_ref()
                    .map(|d| format!("service.data_dir={}", q(&d.to_string_lossy()))),
            );
            o.extend(a.queue_depth.map(|n| format!("service.queue_depth={n}")));
        }
        Command::Filter(_) => {}
    }
    o
}

fn location_str(l: InjectionLocation) -> &'static str {
    match l {
        InjectionLocation::Start => "start",
        InjectionLocation::Middle => "middle",
        InjectionLocation::End => "end",
    }
}

/// Provenance of one invocation, written to `<out-dir>/runs/`.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<Config>,
    pub inputs_digest: String,
    pub outputs: Vec<PathBuf>,
    pub started_at: f64,
    pub wall_time: f64,
    pub tool_version: String,
    pub exit_code: i32,
    pub error: Option<Value>,
}

struct Run {
    inputs: Vec<(String, String)>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn input_file(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.inputs
            .push((path.display().to_string(), hex(&Sha256::digest(&bytes))));
        Ok(bytes)
    }

    fn image(&mut self, path: &Path) -> Result<Image> {
        let bytes = self.input_file(path)?;
        Image::from_png_bytes(&bytes).or_else(|_| {
            let img = image::load_from_memory(&bytes)?;
            Ok(Image::new(img.to_rgb8()))
        })
    }

    fn digest(&self, argv: &[String]) -> String {
        let mut h = Sha256::new();
        for a in argv {
            h.update(a.as_bytes());
            h.update([0]);
        }
        for (p, d) in &self.inputs {
            h.update(p.as_bytes());
            h.update(d.as_bytes());
        }
        hex(&h.finalize())
    }
}

/// Parses `argv`, runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I, env: Vec<(String, String)>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();

    let started = Instant::now();
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let mut run = Run {
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let (config, result) = match Config::load(cli.config.as_deref(), env, &flag_overrides(&cli)) {
        Ok(cfg) => {
            let r = execute(&cli, &cfg, &mut run);
            (Some(cfg), r)
        }
        Err(e) => (None, Err(e)),
    };

    let code = match &result {
        Ok(v) => {
            let text = if cli.json {
                serde_json::to_string(v)
            } else {
                serde_json::to_string_pretty(v)
            }
            .expect("JSON values serialize");
            let _ = writeln!(out, "{text}");
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DOMAIN
        }
    };
    let record = RunRecord {
        command: cli.command.name().to_string(),
        inputs_digest: run.digest(&argv),
        argv,
        config,
        outputs: run.outputs,
        started_at,
        wall_time: started.elapsed().as_secs_f64(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        exit_code: code,
        error: result
            .err()
            .map(|e| json!({"kind": e.kind(), "message": e.to_string()})),
    };
    if let Err(e) = write_record(&cli.out_dir, &record) {
        let _ = writeln!(err, "warning: run record not written: {e}");
    }
    code
}

fn write_record(out_dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    let dir = out_dir.join("runs");
    std::fs::create_dir_all(&dir)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let path = dir.join(format!("{}-{}-{}.json", record.started_at as u64, record.command, &id[..8]));
    std::fs::write(&path, serde_json::to_string_pretty(record)? + "\n")?;
    Ok(path)
}

fn pair_words(s: &str) -> Result<Vec<String>> {
    let w = split_words(s);
    if w.is_empty() {
        return Err(Error::contract("source attribute is empty"));
    }
    Ok(w)
}

fn execute(cli: &Cli, cfg: &Config, run: &mut Run) -> Result<Value> {
    if let Command::Serve(_) = &cli.command {
        let gw = cfg.gateway()?;
        let registry = cfg.registry(&gw)?;
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(crate::service::serve(cfg.clone(), gw, registry))?;
        return Ok(json!({"status": "stopped"}));
    }
    let gw = cfg.gateway()?;
    match &cli.command {
        Command::Caption(a) => {
            let image = run.image(&a.image)?;
            let caption = gw.captioner.generate(&image, cfg.caption.max_tokens)?;
            Ok(json!({ "caption": caption }))
        }
        Command::Inject(a) => {
            let image = run.image(&a.image)?;
            let ic = crate::injector::InjectConfig {
                synonym_override: a.synonym_index,
                candidate_override: a.candidate,
                ..cfg.inject()
            };
            Ok(serde_json::to_value(inject(&image, &pair_words(&a.source_word)?, &gw, &ic)?)?)
        }
        Command::Optimize(a) => {
            let image = run.image(&a.image)?;
            let oc = cfg.optimizer(cfg.seed);
            let result = optimize(&image, &pair_words(&a.source_word)?, &oc, &gw);
            std::fs::create_dir_all(&cli.out_dir)?;
            let trace_path = cli
                .out_dir
                .join(format!("optimize-{}-s{}.jsonl", &image.digest()[..12], oc.seed));
            let trace = match &result {
                Ok(o) => &o.trace,
                Err(e) => &e.trace,
            };
            write_trace_jsonl(trace, std::io::BufWriter::new(std::fs::File::create(&trace_path)?))?;
            run.outputs.push(trace_path.clone());
            let o = result?;
            Ok(json!({
                "prompt": o.prompt,
                "best_score": o.best_score,
                "best_step": o.best_step,
                "steps": o.trace.len(),
                "config": oc,
                "trace": trace_path,
            }))
        }
        Command::Filter(a) => {
            let image = run.image(&a.image)?;
            let prompt = gw.encoder.tokenizer().tokenize(&a.prompt)?;
            let mut protected = match &a.source_word {
                Some(s) => protect_words(&prompt, &pair_words(s)?),
                None => Default::default(),
            };
            for w in &a.protect {
                protected.extend(protect_words(&prompt, &split_words(w)));
            }
            Ok(serde_json::to_value(filter(&prompt, &image, &gw, &protected)?)?)
        }
        Command::Edit(a) => {
            let image = run.image(&a.image)?;
            let pair = AttributePair::new(&a.source_word, &a.target_word)?;
            let registry = cfg.registry(&gw)?;
            let (prompt, injection) = match &a.prompt {
                Some(p) => (gw.encoder.tokenizer().tokenize(p)?, None),
                None => {
                    let report = inject(&image, &pair.source, &gw, &cfg.inject())?;
                    (report.chosen.clone(), Some(report))
                }
            };
            let edited = build_edited_prompt(&prompt, &pair, gw.tokenizer_for(&prompt))?;
            let job = EditJob::new(image, prompt, edited, cfg.edit.backend.clone(), cfg.sampler.clone());
            let result = run_edit(&job, &registry, &gw)?;
            let out = &result.output_image;
            let score = clip_score(&gw.encode_prompt(&job.edited_prompt)?, &gw.encoder.encode_image(out)?)?;
            let lpips = gw.metric.distance(&job.image.resized(out.width(), out.height()), out)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let path = cli.out_dir.join(format!("edit-{}.png", job.id));
            out.save_png(&path)?;
            run.outputs.push(path.clone());
            Ok(json!({
                "job_id": job.id,
                "backend_id": job.backend_id,
                "source_prompt": job.source_prompt,
                "edited_prompt": job.edited_prompt,
                "sampler_config": job.sampler_config,
                "injection": injection,
                "output": path,
                "clip_score": score,
                "lpips": lpips,
                "backend_metadata": result.backend_metadata,
                "wall_time": result.wall_time,
            }))
        }
        Command::Bench(a) => {
            run.input_file(&a.manifest)?;
            let dataset = load_manifest(&a.manifest, &gw)?;
            let methods: Vec<Method> = a.methods.iter().map(|m| m.trim().parse()).collect::<Result<_>>()?;
            let registry = cfg.registry(&gw)?;
            let ec = cfg.eval();
            let reports = methods
                .iter()
                .map(|m| evaluate_method(m, &dataset, &registry, &gw, &ec))
                .collect::<Result<Vec<_>>>()?;
            let dir = cli.out_dir.join("bench");
            std::fs::create_dir_all(&dir)?;
            let reports_path = dir.join("reports.json");
            std::fs::write(&reports_path, serde_json::to_string_pretty(&reports)? + "\n")?;
            let csv_path = dir.join("per_sample.csv");
            write_csv(&reports, std::fs::File::create(&csv_path)?)?;
            run.outputs.extend([reports_path, csv_path]);
            let curve = if reports.len() >= 2 {
                let c = tradeoff_curve(&reports, &dir)?;
                run.outputs
                    .extend([c.data_path.clone(), c.csv_path.clone(), c.plot_path.clone()]);
                Some(c)
            } else {
                None
            };
            Ok(json!({ "reports": reports, "tradeoff": curve }))
        }
        Command::Serve(_) => unreachable!("handled above"),
    }
}
