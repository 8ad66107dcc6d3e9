//! Scoring of generated attention against the requested layout.
//!
//! Final attention is decoded into a label map, every object is "detected"
//! as its largest 4-connected region, and detections are compared with the
//! layout boxes and declared relations.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMaps, Backbone, BackboneConfig};
use crate::guidance::{guided_sample_with, object_attention, GuidanceConfig};
use crate::layout::{is_degenerate, parse_layout, BoundingBox, Layout, Mask, RelationKind};
use crate::Error;

pub const DEFAULT_TAU: f64 = 0.3;
pub const IOU_THRESHOLD: f64 = 0.5;

/// Per-cell object index; 0 is background, `i + 1` is layout object `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub resolution: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn get(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.resolution + c]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.resolution {
            let row: Vec<String> = (0..self.resolution).map(|c| self.get(r, c).to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Zero-based layout object index.
    pub object: usize,
    pub bbox: BoundingBox,
    pub area: usize,
    pub centroid: (f64, f64),
}

/// Object maps each divided by their own maximum.
fn normalized_object_maps(attn: &AttentionMaps, layout: &Layout) -> Result<Vec<Vec<f64>>, Error> {
    layout
        .objects
        .iter()
        .map(|o| {
            let m = object_attention(attn, &o.phrase)?;
            let max = m.iter().copied().fold(0.0_f64, f64::max).max(crate::diffmath::DENOM_EPS);
            Ok(m.into_iter().map(|v| v / max).collect())
        })
        .collect()
}

pub fn decode_labels(attn: &AttentionMaps, layout: &Layout, tau: f64) -> Result<LabelMap, Error> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Contract(format!("threshold {tau} outside (0,1)")));
    }
    let maps = normalized_object_maps(attn, layout)?;
    let cells = attn.resolution * attn.resolution;
    let labels = (0..cells)
        .map(|p| {
            let mut best = 0;
            for i in 1..maps.len() {
                if maps[i][p] > maps[best][p] {
                    best = i;
                }
            }
            if maps[best][p] < tau {
                0
            } else {
                best + 1
            }
        })
        .collect();
    Ok(LabelMap {
        resolution: attn.resolution,
        labels,
    })
}

/// Largest 4-connected component per object, in object order.
pub fn detect_regions(labels: &LabelMap) -> Vec<Detection> {
    let res = labels.resolution;
    let max_label = labels.labels.iter().copied().max().unwrap_or(0);
    let mut seen = vec![false; res * res];
    let mut best: Vec<Option<Vec<usize>>> = vec![None; max_label + 1];

    for start in 0..res * res {
        let label = labels.labels[start];
        if label == 0 || seen[start] {
            continue;
        }
        let mut component = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (r, c) = (p / res, p % res);
            let mut visit = |q: usize| {
                if !seen[q] && labels.labels[q] == label {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - res);
            }
            if r + 1 < res {
                visit(p + res);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < res {
                visit(p + 1);
            }
        }
        let slot = &mut best[label];
        if slot.as_ref().is_none_or(|b| component.len() > b.len()) {
            *slot = Some(component);
        }
    }

    let scale = res as f64;
    best.into_iter()
        .enumerate()
        .skip(1)
        .filter_map(|(label, comp)| {
            let comp = comp?;
            let rows = comp.iter().map(|p| p / res);
            let cols = comp.iter().map(|p| p % res);
            let (r0, r1) = (rows.clone().min()?, rows.max()?);
            let (c0, c1) = (cols.clone().min()?, cols.max()?);
            let n = comp.len() as f64;
            let cx = comp.iter().map(|p| (p % res) as f64 + 0.5).sum::<f64>() / (n * scale);
            let cy = comp.iter().map(|p| (p / res) as f64 + 0.5).sum::<f64>() / (n * scale);
            Some(Detection {
                object: label - 1,
                bbox: BoundingBox {
                    x0: c0 as f64 / scale,
                    y0: r0 as f64 / scale,
                    x1: (c1 + 1) as f64 / scale,
                    y1: (r1 + 1) as f64 / scale,
                },
                area: comp.len(),
                centroid: (cx, cy),
            })
        })
        .collect()
}

/// Whether `kind(a, b)` holds on two detections' centroids.
pub fn relation_holds(kind: RelationKind, a: &Detection, b: &Detection) -> bool {
    match kind {
        RelationKind::Left => a.centroid.0 < b.centroid.0,
        RelationKind::Right => a.centroid.0 > b.centroid.0,
        RelationKind::Above => a.centroid.1 < b.centroid.1,
        RelationKind::Below => a.centroid.1 > b.centroid.1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub detected: bool,
    pub iou: f64,
    pub inbox_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutMetrics {
    pub objects: Vec<ObjectMetrics>,
    /// Every object detected with IoU at or above the threshold.
    pub all_correct: bool,
    pub relations_correct: usize,
    pub relations_total: usize,
    /// Mean attention of an object over the cells of an adjacent object's
    /// box (outside its own), averaged over adjacent ordered pairs; absent
    /// without adjacent pairs.
    pub cross_box_mass: Option<f64>,
}

impl LayoutMetrics {
    pub fn mean_iou(&self) -> f64 {
        mean(self.objects.iter().map(|o| o.iou))
    }

    pub fn mean_inbox(&self) -> f64 {
        mean(self.objects.iter().map(|o| o.inbox_fraction))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Gap under which two boxes count as adjacent: one grid cell.
pub fn adjacency_gap(resolution: usize) -> f64 {
    1.0 / resolution as f64
}

pub fn adjacent_pairs(layout: &Layout, resolution: usize) -> Vec<(usize, usize)> {
    let gap = adjacency_gap(resolution);
    let mut out = Vec::new();
    for a in 0..layout.k() {
        for b in 0..layout.k() {
            if a != b && layout.objects[a].bbox.is_adjacent(&layout.objects[b].bbox, gap) {
                out.push((a, b));
            }
        }
    }
    out
}

fn mass_in(map: &[f64], mask: &Mask) -> f64 {
    let all: f64 = map.iter().sum();
    let inside: f64 = map.iter().zip(mask.cells()).filter(|(_, &c)| c).map(|(v, _)| v).sum();
    if all > 0.0 {
        inside / all
    } else {
        0.0
    }
}

/// Mean of `map` over the cells of `mask`; zero for an empty mask.
fn mean_over(map: &[f64], mask: &Mask) -> f64 {
    let n = mask.count();
    if n == 0 {
        return 0.0;
    }
    map.iter().zip(mask.cells()).filter(|(_, &c)| c).map(|(v, _)| v).sum::<f64>() / n as f64
}

pub fn layout_metrics(dets: &[Detection], layout: &Layout, attn: &AttentionMaps) -> Result<LayoutMetrics, Error> {
    let masks = layout.masks(attn.resolution);
    let maps = layout
        .objects
        .iter()
        .map(|o| object_attention(attn, &o.phrase))
        .collect::<Result<Vec<_>, _>>()?;
    let det_for = |i: usize| dets.iter().find(|d| d.object == i);

    let objects: Vec<ObjectMetrics> = (0..layout.k())
        .map(|i| {
            let det = det_for(i);
            ObjectMetrics {
                detected: det.is_some(),
                iou: det.map_or(0.0, |d| d.bbox.iou(&layout.objects[i].bbox)),
                inbox_fraction: mass_in(&maps[i], &masks[i]),
            }
        })
        .collect();
    let all_correct = objects.iter().all(|o| o.detected && o.iou >= IOU_THRESHOLD);

    let relations_correct = layout
        .relations
        .iter()
        .filter(|r| match (det_for(r.a), det_for(r.b)) {
            (Some(a), Some(b)) => relation_holds(r.kind, a, b),
            _ => false,
        })
        .count();

    let pairs = adjacent_pairs(layout, attn.resolution);
    let cross_box_mass = (!pairs.is_empty()).then(|| {
        mean(pairs.iter().map(|&(a, b)| {
            let region = masks[b].and_not(&masks[a]);
            mean_over(&maps[a], &region)
        }))
    });

    Ok(LayoutMetrics {
        objects,
        all_correct,
        relations_correct,
        relations_total: layout.relations.len(),
        cross_box_mass,
    })
}

/// Ablation arms of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    None,
    LacWithoutNorm,
    Lac,
    LacPtc,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::None, Arm::LacWithoutNorm, Arm::Lac, Arm::LacPtc];

    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::LacWithoutNorm => "lac_without_norm",
            Arm::Lac => "lac",
            Arm::LacPtc => "lac_ptc",
        }
    }

    /// Guidance settings of this arm derived from the base configuration.
    pub fn configure(self, base: &GuidanceConfig) -> GuidanceConfig {
        match self {
            Arm::None => GuidanceConfig {
                guided_steps: 0,
                ..base.clone()
            },
            Arm::LacWithoutNorm => GuidanceConfig {
                alpha: 0.0,
                lac_normalize: false,
                ..base.clone()
            },
            Arm::Lac => GuidanceConfig {
                alpha: 0.0,
                lac_normalize: true,
                ..base.clone()
            },
            Arm::LacPtc => GuidanceConfig {
                lac_normalize: true,
                ..base.clone()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub layout: String,
    pub seed: u64,
    pub arm: Arm,
    pub gamma: f64,
    /// Whether the record belongs to the γ sweep rather than the arm table.
    pub sweep: bool,
    pub total_curve: Vec<f64>,
    pub lac_curve: Vec<f64>,
    pub ptc_curve: Vec<f64>,
    pub max_row_sum_error: f64,
    pub metrics: LayoutMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub gamma: f64,
    pub runs: usize,
    pub accuracy_pct: f64,
    pub mean_iou: f64,
    pub mean_inbox_mass: f64,
    pub relation_accuracy_pct: Option<f64>,
    pub mean_cross_box_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfigEcho {
    pub backbone: BackboneConfig,
    pub guidance: GuidanceConfig,
    pub tau: f64,
    pub iou_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfigEcho,
    pub seeds: Vec<u64>,
    pub layouts: Vec<String>,
    pub warnings: Vec<String>,
    pub records: Vec<BenchRecord>,
    pub arms: Vec<ArmSummary>,
    pub gamma_sweep: Vec<ArmSummary>,
}

fn summarize(arm: Arm, gamma: f64, records: &[&BenchRecord]) -> ArmSummary {
    let runs = records.len();
    let correct = records.iter().filter(|r| r.metrics.all_correct).count();
    let (rc, rt) = records.iter().fold((0, 0), |(c, t), r| {
        (c + r.metrics.relations_correct, t + r.metrics.relations_total)
    });
    let cross: Vec<f64> = records.iter().filter_map(|r| r.metrics.cross_box_mass).collect();
    ArmSummary {
        arm,
        gamma,
        runs,
        accuracy_pct: if runs == 0 { 0.0 } else { 100.0 * correct as f64 / runs as f64 },
        mean_iou: mean(records.iter().map(|r| r.metrics.mean_iou())),
        mean_inbox_mass: mean(records.iter().map(|r| r.metrics.mean_inbox())),
        relation_accuracy_pct: (rt > 0).then(|| 100.0 * rc as f64 / rt as f64),
        mean_cross_box_mass: (!cross.is_empty()).then(|| mean(cross.iter().copied())),
    }
}

impl BenchReport {
    /// Arm table and γ sweep recomputed from the per-run records.
    pub fn recompute_aggregates(records: &[BenchRecord]) -> (Vec<ArmSummary>, Vec<ArmSummary>) {
        let arms = Arm::ALL
            .iter()
            .filter_map(|&arm| {
                let rs: Vec<&BenchRecord> = records.iter().filter(|r| !r.sweep && r.arm == arm).collect();
                (!rs.is_empty()).then(|| summarize(arm, rs[0].gamma, &rs))
            })
            .collect();
        let mut gammas: Vec<f64> = Vec::new();
        for r in records.iter().filter(|r| r.sweep) {
            if !gammas.contains(&r.gamma) {
                gammas.push(r.gamma);
            }
        }
        let sweep = gammas
            .into_iter()
            .map(|g| {
                let rs: Vec<&BenchRecord> = records.iter().filter(|r| r.sweep && r.gamma == g).collect();
                summarize(Arm::LacPtc, g, &rs)
            })
            .collect();
        (arms, sweep)
    }

    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>7} {:>5} {:>10} {:>9} {:>10} {:>10}\n",
            "arm", "gamma", "runs", "accuracy%", "mean_iou", "in_box", "relation%"
        ));
        let row = |s: &ArmSummary, label: &str| {
            format!(
                "{:<18} {:>7.2} {:>5} {:>10.2} {:>9.4} {:>10.4} {:>10}\n",
                label,
                s.gamma,
                s.runs,
                s.accuracy_pct,
                s.mean_iou,
                s.mean_inbox_mass,
                s.relation_accuracy_pct.map_or("-".to_string(), |v| format!("{v:.2}"))
            )
        };
        for s in &self.arms {
            out.push_str(&row(s, s.arm.name()));
        }
        for s in &self.gamma_sweep {
            out.push_str(&row(s, "gamma_sweep"));
        }
        out
    }
}

/// Benchmark inputs.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub backbone: BackboneConfig,
    pub guidance: GuidanceConfig,
    pub tau: f64,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub gamma_sweep: Option<Vec<f64>>,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
}

impl BenchSpec {
    pub fn new(backbone: BackboneConfig, guidance: GuidanceConfig, seeds: Vec<u64>) -> Self {
        Self {
            backbone,
            guidance,
            tau: DEFAULT_TAU,
            seeds,
            arms: Arm::ALL.to_vec(),
            gamma_sweep: None,
            threads: 0,
        }
    }
}

/// Reads every `*.json` layout in `dir`, sorted by file name.
pub fn load_suite(dir: &Path) -> Result<Vec<(String, Layout)>, Error> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no layout files in {}", dir.display())));
    }
    paths.iter().map(|p| load_layout(p)).collect()
}

pub fn load_layout(path: &Path) -> Result<(String, Layout), Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let layout = parse_layout(&text).map_err(|e| Error::InFile {
        path: path.to_path_buf(),
        source: Box::new(e.into()),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((name, layout))
}

struct Job<'a> {
    name: &'a str,
    layout: &'a Layout,
    backbone: &'a Backbone,
    seed: u64,
    arm: Arm,
    cfg: GuidanceConfig,
    sweep: bool,
}

fn run_job(job: &Job<'_>, tau: f64) -> Result<BenchRecord, Error> {
    let traj = guided_sample_with(job.backbone, job.layout, &job.cfg, job.seed)?;
    let labels = decode_labels(&traj.final_attention, job.layout, tau)?;
    let dets = detect_regions(&labels);
    let metrics = layout_metrics(&dets, job.layout, &traj.final_attention)?;
    let iters: Vec<_> = traj.iterations().collect();
    Ok(BenchRecord {
        layout: job.name.to_string(),
        seed: job.seed,
        arm: job.arm,
        gamma: job.cfg.gamma,
        sweep: job.sweep,
        total_curve: iters.iter().map(|i| i.loss.total).collect(),
        lac_curve: iters.iter().map(|i| i.loss.lac).collect(),
        ptc_curve: iters.iter().map(|i| i.loss.ptc).collect(),
        max_row_sum_error: traj.max_row_sum_error(),
        metrics,
    })
}

pub fn run_benchmark(suite: &[(String, Layout)], spec: &BenchSpec) -> Result<BenchReport, Error> {
    if suite.is_empty() {
        return Err(Error::Config("benchmark suite is empty".into()));
    }
    if spec.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one seed".into()));
    }
    spec.backbone.validate()?;
    spec.guidance.validate(spec.backbone.total_steps)?;

    let mut warnings = Vec::new();
    let backbones = suite
        .iter()
        .map(|(name, layout)| {
            for (i, o) in layout.objects.iter().enumerate() {
                if is_degenerate(&o.bbox, spec.backbone.resolution) {
                    warnings.push(format!("{name}: object {i} box snapped to a single cell"));
                }
            }
            Backbone::new(&spec.backbone, &layout.prompt)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut jobs = Vec::new();
    for ((name, layout), backbone) in suite.iter().zip(&backbones) {
        for &seed in &spec.seeds {
            for &arm in &spec.arms {
                jobs.push(Job { name, layout, backbone, seed, arm, cfg: arm.configure(&spec.guidance), sweep: false });
            }
            for &gamma in spec.gamma_sweep.iter().flatten() {
                let cfg = GuidanceConfig { gamma, ..Arm::LacPtc.configure(&spec.guidance) };
                jobs.push(Job { name, layout, backbone, seed, arm: Arm::LacPtc, cfg, sweep: true });
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_job(job, spec.tau))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let (arms, gamma_sweep) = BenchReport::recompute_aggregates(&records);
    Ok(BenchReport {
        config: BenchConfigEcho {
            backbone: spec.backbone.clone(),
            guidance: spec.guidance.clone(),
            tau: spec.tau,
            iou_threshold: IOU_THRESHOLD,
        },
        seeds: spec.seeds.clone(),
        layouts: suite.iter().map(|(n, _)| n.clone()).collect(),
        warnings,
        records,
        arms,
        gamma_sweep,
    })
}
