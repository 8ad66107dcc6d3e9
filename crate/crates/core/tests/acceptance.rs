//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use loco::backbone::{AttentionMaps, BackboneConfig};
use loco::cli::{cmd_generate, RunConfig};
use loco::diffmath::DenseMatrix;
use loco::evaluate::{load_suite, run_benchmark, Arm, BenchReport, BenchSpec, DEFAULT_TAU};
use loco::gradcheck::{check, random_instance};
use loco::guidance::{lac_loss, loco_gradient, loco_loss, loco_value, ptc_maps, update_latent, GuidanceConfig};
use loco::layout::Layout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn suite_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../suite")
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, u64, usize, bool) = (0.0, 0, 0, false);
    let mut count = 0;
    for seed in 0..20u64 {
        let tokens = 4 + (seed % 5) as usize;
        for detach in [false, true] {
            let r = check(seed, 8, tokens, detach, false).map_err(|e| e.to_string())?;
            count += 1;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, seed, tokens, detach);
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{count} checks, worst rel err {:.2e} (seed {}, {} tokens, detach {}), {:.1}s",
        worst.0,
        worst.1,
        worst.2,
        worst.3,
        elapsed.as_secs_f64()
    );
    ensure(worst.0 <= 1e-4 && elapsed < Duration::from_secs(30), detail)
}

/// Cells whose centres fall inside `[x0,x1)×[y0,y1)` on a 16×16 grid.
fn cell_count(b: [f64; 4]) -> usize {
    let centre = |i: usize| (i as f64 + 0.5) / 16.0;
    let cols = (0..16).filter(|&c| centre(c) >= b[0] && centre(c) < b[2]).count();
    let rows = (0..16).filter(|&r| centre(r) >= b[1] && centre(r) < b[3]).count();
    rows * cols
}

fn closed_form_losses() -> Outcome {
    let boxes = [[0.0, 0.0, 0.5, 0.5], [0.0, 0.0, 0.5, 1.0], [0.25, 0.25, 0.75, 0.5], [0.1, 0.3, 0.9, 0.95]];
    let mut worst = 0.0f64;
    for b in boxes {
        let layout = Layout::new("a cat", &[("cat", b)], vec![]).map_err(|e| e.to_string())?;
        let attn = AttentionMaps { a: DenseMatrix::filled(256, 4, 0.25), resolution: 16 };
        let got = lac_loss(&attn, &layout, &layout.masks(16), true).map_err(|e| e.to_string())?;
        let p = cell_count(b) as f64 / 256.0;
        worst = worst.max((got - (1.0 - p).powi(2)).abs());
    }
    let quarter = {
        let layout = Layout::new("a cat", &[("cat", [0.0, 0.0, 0.5, 0.5])], vec![]).unwrap();
        let attn = AttentionMaps { a: DenseMatrix::filled(256, 4, 0.25), resolution: 16 };
        lac_loss(&attn, &layout, &layout.masks(16), true).unwrap()
    };

    let layout = Layout::new(
        "a cat and a dog",
        &[("cat", [0.0, 0.0, 0.5, 0.5]), ("dog", [0.5, 0.25, 1.0, 0.75])],
        vec![],
    )
    .unwrap();
    let masks = layout.masks(16);
    let mut a = DenseMatrix::zeros(256, layout.token_count);
    for r in 0..256 {
        let cat = if masks[0].cells()[r] { 0.3 + 0.001 * r as f64 } else { 0.0 };
        let dog = if masks[1].cells()[r] { 0.6 } else { 0.0 };
        a.set(r, 2, cat);
        a.set(r, 5, dog);
        a.set(r, 0, 1.0 - cat - dog);
    }
    let inside = lac_loss(&AttentionMaps { a, resolution: 16 }, &layout, &masks, true).unwrap();
    let detail = format!("max |lac − (1−p)²| = {worst:.1e}, 64/256 case {quarter}, in-box case {inside:.1e}");
    ensure(worst <= 1e-12 && (quarter - 0.5625).abs() <= 1e-12 && inside <= 1e-9, detail)
}

fn descent_property() -> Outcome {
    let cfg = GuidanceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut decreased = 0;
    for seed in 0..100u64 {
        let inst = random_instance(seed, 16, 4 + (seed % 5) as usize).map_err(|e| e.to_string())?;
        let masks = inst.layout.masks(16);
        let gamma_lambda = 0.1 * (1.0 - rng.random::<f64>());
        let (before, grad) = loco_gradient(&inst.backbone, &inst.latent, &inst.layout, &masks, &cfg).unwrap();
        let moved = update_latent(&inst.latent, &grad, gamma_lambda, 1.0).unwrap();
        let after = loco_value(&inst.backbone, &moved.z, &inst.layout, &masks, &cfg, None).unwrap();
        if after.total < before.total {
            decreased += 1;
        }
    }
    ensure(decreased >= 95, format!("{decreased}/100 trials decreased the loss"))
}

struct ArmRun {
    report: BenchReport,
    elapsed: Duration,
}

fn arm_run() -> &'static Result<ArmRun, String> {
    static RUN: OnceLock<Result<ArmRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let suite = load_suite(&suite_dir()).map_err(|e| e.to_string())?;
        let spec = BenchSpec {
            arms: vec![Arm::None, Arm::Lac, Arm::LacPtc],
            threads: 1,
            ..BenchSpec::new(BackboneConfig::default(), GuidanceConfig::default(), (0..5).collect())
        };
        let start = Instant::now();
        let report = run_benchmark(&suite, &spec).map_err(|e| e.to_string())?;
        Ok(ArmRun { report, elapsed: start.elapsed() })
    })
}

fn sweep_run() -> &'static Result<BenchReport, String> {
    static RUN: OnceLock<Result<BenchReport, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let suite = load_suite(&suite_dir()).map_err(|e| e.to_string())?;
        let spec = BenchSpec {
            arms: vec![],
            gamma_sweep: Some(vec![1.0, 5.0, 30.0, 300.0]),
            ..BenchSpec::new(BackboneConfig::default(), GuidanceConfig::default(), (0..5).collect())
        };
        run_benchmark(&suite, &spec).map_err(|e| e.to_string())
    })
}

fn guidance_efficacy() -> Outcome {
    let run = arm_run().as_ref().map_err(Clone::clone)?;
    let acc = |arm| run.report.arm(arm).map(|s| s.accuracy_pct).unwrap_or(f64::NAN);
    let (none, lac, both) = (acc(Arm::None), acc(Arm::Lac), acc(Arm::LacPtc));
    let layouts = run.report.layouts.len();
    let detail = format!(
        "{layouts} layouts x 5 seeds: accuracy lac+ptc {both:.2}% / lac {lac:.2}% / none {none:.2}%, {:.1}s single-threaded",
        run.elapsed.as_secs_f64()
    );
    let ok = layouts == 24 && both >= lac && lac >= none && both - none >= 30.0 && run.elapsed < Duration::from_secs(300);
    ensure(ok, detail)
}

fn fusion_prevention() -> Outcome {
    let run = arm_run().as_ref().map_err(Clone::clone)?;
    let mut without: BTreeMap<(&str, u64), f64> = BTreeMap::new();
    for r in run.report.records.iter().filter(|r| r.arm == Arm::Lac) {
        if let Some(m) = r.metrics.cross_box_mass {
            without.insert((r.layout.as_str(), r.seed), m);
        }
    }
    let (mut lower, mut pairs) = (0, 0);
    for r in run.report.records.iter().filter(|r| r.arm == Arm::LacPtc) {
        if let (Some(with), Some(&base)) = (r.metrics.cross_box_mass, without.get(&(r.layout.as_str(), r.seed))) {
            pairs += 1;
            if with < base {
                lower += 1;
            }
        }
    }
    let frac = lower as f64 / pairs.max(1) as f64;
    let detail = format!("cross-box attention lower with PTC in {lower}/{pairs} adjacent (layout, seed) pairs ({:.1}%)", 100.0 * frac);
    ensure(pairs > 0 && frac >= 0.8, detail)
}

fn gamma_sweep_shape() -> Outcome {
    let report = sweep_run().as_ref().map_err(Clone::clone)?;
    let ious: Vec<(f64, f64)> = report.gamma_sweep.iter().map(|s| (s.gamma, s.mean_iou)).collect();
    let detail = ious.iter().map(|(g, v)| format!("γ={g}: {v:.4}")).collect::<Vec<_>>().join(", ");
    if ious.len() != 4 {
        return Err(format!("expected 4 sweep entries, got {}", ious.len()));
    }
    let best = (0..4).fold(0, |b, i| if ious[i].1 > ious[b].1 { i } else { b });
    ensure(best != 0 && best != 3, format!("mean IoU {detail}"))
}

fn generate_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let cfg = RunConfig {
            layout: suite_dir().join("02_fused_horse_cow.json"),
            guidance: GuidanceConfig::default(),
            backbone: BackboneConfig::default(),
            tau: DEFAULT_TAU,
            seed: 17,
            out: tmp.path().join(run),
        };
        cmd_generate(&cfg).map_err(|e| e.to_string())?;
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&cfg.out).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            files.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        outputs.push(files);
    }
    let pgm = outputs[0].keys().filter(|k| k.ends_with(".pgm")).count();
    let detail = format!("{} files ({pgm} heatmaps) compared byte for byte", outputs[0].len());
    ensure(outputs[0] == outputs[1] && pgm == 4, detail)
}

fn weighting_endpoints() -> Outcome {
    let suite = load_suite(&suite_dir()).map_err(|e| e.to_string())?;
    let mut checks = 0;
    for (i, (_, layout)) in suite.iter().enumerate().step_by(4) {
        let inst = loco::Backbone::new(&BackboneConfig::default(), &layout.prompt).unwrap();
        let attn = inst.cross_attention(&inst.initial_latent(i as u64)).unwrap();
        let masks = layout.masks(16);
        let cfg = GuidanceConfig { alpha: 0.0, ..GuidanceConfig::default() };
        let b = loco_loss(&attn, layout, &masks, &cfg).unwrap();
        if b.total != b.lac {
            return Err(format!("alpha = 0 total {} differs from lac {}", b.total, b.lac));
        }

        let n = attn.n_tokens();
        for (beta, unused) in [(1.0, n - 1), (0.0, 0)] {
            let base = ptc_maps(&attn, beta).unwrap();
            let mut perturbed = attn.clone();
            for r in 0..256 {
                let v = perturbed.a.get(r, unused);
                perturbed.a.set(r, unused, v * 0.5 + 0.1 * (r % 7) as f64);
            }
            if ptc_maps(&perturbed, beta).unwrap() != base {
                return Err(format!("beta = {beta}: padding map changed when the unused map was perturbed"));
            }
            checks += 1;
        }
    }
    Ok(format!("alpha = 0 exact on 6 layouts, {checks} beta endpoint perturbations left the map unchanged"))
}

fn invariants() -> Outcome {
    let arms = &arm_run().as_ref().map_err(Clone::clone)?.report;
    let sweep = sweep_run().as_ref().map_err(Clone::clone)?;
    let records: Vec<_> = arms.records.iter().chain(&sweep.records).collect();
    let worst_row = records.iter().map(|r| r.max_row_sum_error).fold(0.0, f64::max);
    let iterations: usize = records.iter().map(|r| r.lac_curve.len()).sum();
    let out_of_range = records
        .iter()
        .flat_map(|r| r.lac_curve.iter())
        .filter(|l| !(0.0..=1.0).contains(*l))
        .count();
    let detail = format!(
        "{} runs: max |row sum − 1| = {worst_row:.1e}, {out_of_range} of {iterations} recorded lac values outside [0,1]",
        records.len()
    );
    ensure(worst_row <= 1e-12 && out_of_range == 0, detail)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 closed-form loss values", closed_form_losses),
        ("3 descent property", descent_property),
        ("4 guidance efficacy", guidance_efficacy),
        ("5 fusion prevention", fusion_prevention),
        ("6 gamma sweep shape", gamma_sweep_shape),
        ("7 generate determinism", generate_determinism),
        ("8 weighting endpoints", weighting_endpoints),
        ("9 invariant suite", invariants),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
