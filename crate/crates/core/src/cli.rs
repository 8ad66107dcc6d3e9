//! `loco` command line: `generate`, `bench` and `gradcheck`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::evaluate::{
    decode_labels, detect_regions, layout_metrics, load_layout, load_suite, run_benchmark, BenchReport,
    BenchSpec, Detection, LabelMap, LayoutMetrics, DEFAULT_TAU,
};
use crate::gradcheck;
use crate::guidance::{guided_sample, object_attention, GuidanceConfig, LossBreakdown};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "loco", version, about = "Layout guidance over cross-attention of a toy denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one guided generation and write its artifacts.
    Generate(GenerateArgs),
    /// Run the ablation benchmark over a suite of layouts.
    Bench(BenchArgs),
    /// Compare the analytic loss gradient with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GuidanceFlags {
    /// JSON file with guidance fields and optional `backbone` / `tau` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "guided-steps")]
    pub guided_steps: Option<usize>,
    #[arg(long = "iters")]
    pub iterations: Option<usize>,
    #[arg(long = "detach-norms")]
    pub detach_norms: bool,
    #[arg(long, env = "LOCO_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub layout: PathBuf,
    #[command(flatten)]
    pub flags: GuidanceFlags,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Suite directory of layout files, or a single layout file.
    #[arg(long)]
    pub layout: PathBuf,
    /// Comma-separated γ values for the loss-scale sweep.
    #[arg(long = "gamma-sweep", value_delimiter = ',')]
    pub gamma_sweep: Option<Vec<f64>>,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[command(flatten)]
    pub flags: GuidanceFlags,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, env = "LOCO_SEED", default_value_t = 7)]
    pub seed: u64,
    /// Side of the latent grid.
    #[arg(long, default_value_t = 8)]
    pub res: usize,
    /// Token count including start and end tokens.
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    pub instances: u64,
    #[arg(long = "detach-norms")]
    pub detach_norms: bool,
    #[arg(long = "corrupt-gradient", hide = true)]
    pub corrupt_gradient: bool,
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layout: PathBuf,
    pub guidance: GuidanceConfig,
    pub backbone: BackboneConfig,
    pub tau: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    /// File values first, then flag overrides, then validation.
    pub fn resolve(layout: &Path, flags: &GuidanceFlags) -> Result<Self, Error> {
        let (mut guidance, backbone, tau) = match &flags.config {
            Some(path) => read_config(path)?,
            None => (GuidanceConfig::default(), BackboneConfig::default(), DEFAULT_TAU),
        };
        if let Some(v) = flags.gamma {
            guidance.gamma = v;
        }
        if let Some(v) = flags.alpha {
            guidance.alpha = v;
        }
        if let Some(v) = flags.beta {
            guidance.beta = v;
        }
        if let Some(v) = flags.guided_steps {
            guidance.guided_steps = v;
        }
        if let Some(v) = flags.iterations {
            guidance.iterations_per_step = v;
        }
        if flags.detach_norms {
            guidance.detach_norms = true;
        }
        backbone.validate()?;
        guidance.validate(backbone.total_steps)?;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0,1), got {tau}")));
        }
        if !layout.exists() {
            return Err(Error::Config(format!("{} does not exist", layout.display())));
        }
        Ok(Self {
            layout: layout.to_path_buf(),
            guidance,
            backbone,
            tau,
            seed: flags.seed,
            out: flags.out.clone(),
        })
    }
}

fn read_config(path: &Path) -> Result<(GuidanceConfig, BackboneConfig, f64), Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let in_file = |e: Error| Error::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    };
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| in_file(e.into()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| in_file(Error::Config("config must be a JSON object".into())))?;
    let backbone = match obj.remove("backbone") {
        Some(v) => serde_json::from_value(v).map_err(|e| in_file(e.into()))?,
        None => BackboneConfig::default(),
    };
    let tau = match obj.remove("tau") {
        Some(v) => serde_json::from_value(v).map_err(|e| in_file(e.into()))?,
        None => DEFAULT_TAU,
    };
    let guidance = serde_json::from_value(value).map_err(|e| in_file(e.into()))?;
    Ok((guidance, backbone, tau))
}

/// Plain ("P2") graymap with values scaled so the map maximum is 255.
pub fn to_pgm(map: &[f64], resolution: usize) -> String {
    let max = map.iter().copied().fold(0.0_f64, f64::max);
    let mut out = format!("P2\n{resolution} {resolution}\n255\n");
    for r in 0..resolution {
        let row: Vec<String> = map[r * resolution..(r + 1) * resolution]
            .iter()
            .map(|&v| {
                let g = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
                (g.clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn slug(text: &str) -> String {
    let s: String = text
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub guidance: GuidanceConfig,
    pub backbone: BackboneConfig,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub prompt: String,
    pub seed: u64,
    pub guidance_enabled: bool,
    pub latent_updates: usize,
    pub config: ConfigEcho,
    pub final_loss: LossBreakdown,
    pub metrics: LayoutMetrics,
    pub detections: Vec<Detection>,
    pub labels: LabelMap,
    pub heatmaps: Vec<String>,
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(run: &RunConfig) -> Result<GenerateSummary, Error> {
    let (_, layout) = load_layout(&run.layout)?;
    let traj = guided_sample(&layout, &run.guidance, &run.backbone, run.seed)?;
    let attn = &traj.final_attention;
    let labels = decode_labels(attn, &layout, run.tau)?;
    let detections = detect_regions(&labels);
    let metrics = layout_metrics(&detections, &layout, attn)?;

    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;

    let k = layout.k();
    let mut csv = String::from("step,iteration,lambda,lac,ptc,total");
    for i in 0..k {
        let _ = write!(csv, ",inbox_{i}");
    }
    csv.push('\n');
    for it in traj.iterations() {
        let _ = write!(
            csv,
            "{},{},{},{},{},{}",
            it.step, it.iteration, it.lambda, it.loss.lac, it.loss.ptc, it.loss.total
        );
        for f in &it.loss.per_object_inbox_fraction {
            let _ = write!(csv, ",{f}");
        }
        csv.push('\n');
    }
    write(&run.out.join("losses.csv"), &csv)?;
    write(&run.out.join("labels.txt"), &labels.to_text())?;

    let res = attn.resolution;
    let n = attn.n_tokens();
    let mut maps: Vec<(String, Vec<f64>)> = vec![("sot".into(), attn.token_map(0))];
    for (i, o) in layout.objects.iter().enumerate() {
        maps.push((format!("obj{}_{}", i + 1, slug(&o.phrase.text)), object_attention(attn, &o.phrase)?));
    }
    maps.push(("eot".into(), attn.token_map(n - 1)));
    let mut heatmaps = Vec::new();
    for (i, (name, map)) in maps.iter().enumerate() {
        let file = format!("heatmap_{i:02}_{name}.pgm");
        write(&run.out.join(&file), &to_pgm(map, res))?;
        heatmaps.push(file);
    }

    let summary = GenerateSummary {
        prompt: layout.prompt.clone(),
        seed: run.seed,
        guidance_enabled: run.guidance.guidance_enabled(),
        latent_updates: traj.update_count(),
        config: ConfigEcho {
            guidance: run.guidance.clone(),
            backbone: run.backbone.clone(),
            tau: run.tau,
        },
        final_loss: traj.final_loss.clone(),
        metrics,
        detections,
        labels,
        heatmaps,
    };
    write(&run.out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn cmd_bench(run: &RunConfig, gamma_sweep: Option<Vec<f64>>, seeds: u64, threads: usize) -> Result<BenchReport, Error> {
    let suite = if run.layout.is_dir() {
        load_suite(&run.layout)?
    } else {
        vec![load_layout(&run.layout)?]
    };
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut spec = BenchSpec::new(
        run.backbone.clone(),
        run.guidance.clone(),
        (run.seed..run.seed + seeds).collect(),
    );
    spec.tau = run.tau;
    spec.gamma_sweep = gamma_sweep;
    spec.threads = threads;
    let report = run_benchmark(&suite, &spec)?;
    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    write(&run.out.join("bench_report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<gradcheck::GradcheckReport>, Error> {
    (args.seed..args.seed + args.instances.max(1))
        .map(|s| gradcheck::check(s, args.res, args.tokens, args.detach_norms, args.corrupt_gradient))
        .collect()
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Generate(args) => {
            let run = RunConfig::resolve(&args.layout, &args.flags)?;
            let s = cmd_generate(&run)?;
            println!(
                "guidance {}: {} latent updates, lac {:.6}, ptc {:.6}, all objects correct: {}",
                if s.guidance_enabled { "enabled" } else { "disabled" },
                s.latent_updates,
                s.final_loss.lac,
                s.final_loss.ptc,
                s.metrics.all_correct
            );
            println!("artifacts written to {}", run.out.display());
            Ok(0)
        }
        Command::Bench(args) => {
            let run = RunConfig::resolve(&args.layout, &args.flags)?;
            let report = cmd_bench(&run, args.gamma_sweep.clone(), args.seeds, args.threads)?;
            print!("{}", report.to_table());
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("report written to {}", run.out.join("bench_report.json").display());
            Ok(0)
        }
        Command::Gradcheck(args) => {
            let reports = cmd_gradcheck(&args)?;
            let mut status = 0;
            for r in &reports {
                println!(
                    "seed {} grid {}x{} tokens {} detach_norms {}: max relative error {:.3e}",
                    r.seed, r.resolution, r.resolution, r.tokens, r.detach_norms, r.max_rel_error
                );
                if !r.passed() {
                    println!(
                        "  FAIL at pixel {} channel {}: analytic {:.6e} numeric {:.6e} (tolerance {:.0e})",
                        r.worst.0, r.worst.1, r.worst_analytic, r.worst_numeric, r.tolerance
                    );
                    status = 1;
                }
            }
            Ok(status)
        }
    }
}
