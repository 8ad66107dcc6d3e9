//! Central-difference check of the combined loss gradient on small random
//! instances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{derive_seed, Backbone, BackboneConfig};
use crate::guidance::{loco_gradient_detached, loco_value, GuidanceConfig};
use crate::layout::Layout;
use crate::Error;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

const WORDS: &[&str] = &[
    "cat", "dog", "apple", "chair", "lamp", "boat", "tree", "horse", "clock", "vase", "bench", "kite",
];

#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub layout: Layout,
    pub backbone: Backbone,
    pub latent: crate::backbone::LatentState,
}

/// Random layout and latent on a `resolution²` grid with `n_tokens` tokens
/// including the start and end tokens.
pub fn random_instance(seed: u64, resolution: usize, n_tokens: usize) -> Result<GradcheckInstance, Error> {
    if n_tokens < 3 || n_tokens - 2 > WORDS.len() {
        return Err(Error::Config(format!(
            "token count must lie in [3, {}], got {n_tokens}",
            WORDS.len() + 2
        )));
    }
    if resolution == 0 || resolution > 16 {
        return Err(Error::Config(format!("gradcheck grid must be at most 16x16, got {resolution}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6c0c));
    let content = n_tokens - 2;
    let mut words: Vec<&str> = WORDS.to_vec();
    words.shuffle(&mut rng);
    words.truncate(content);
    let prompt = words.join(" ");

    let k = content.min(3);
    let mut objects: Vec<(String, [f64; 4])> = Vec::new();
    for i in 0..k {
        // With room to spare the first phrase spans two tokens.
        let phrase = if i == 0 && content >= 4 {
            format!("{} {}", words[content - 2], words[content - 1])
        } else {
            words[i].to_string()
        };
        let w = rng.random_range(0.25..0.5);
        let h = rng.random_range(0.25..0.5);
        let x0 = rng.random_range(0.0..1.0 - w);
        let y0 = rng.random_range(0.0..1.0 - h);
        objects.push((phrase, [x0, y0, x0 + w, y0 + h]));
    }
    let refs: Vec<(&str, [f64; 4])> = objects.iter().map(|(p, b)| (p.as_str(), *b)).collect();
    let layout = Layout::new(&prompt, &refs, vec![])?;

    let cfg = BackboneConfig {
        resolution,
        ..BackboneConfig::default()
    };
    let backbone = Backbone::new(&cfg, &prompt)?;
    let latent = backbone.initial_latent(seed);
    Ok(GradcheckInstance {
        layout,
        backbone,
        latent,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub resolution: usize,
    pub tokens: usize,
    pub detach_norms: bool,
    pub max_rel_error: f64,
    /// `(pixel, channel)` of the worst coordinate.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative error with a floor of 1e-3 times the largest numeric gradient
/// entry, so coordinates with negligible gradient compare on absolute scale.
pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> Vec<f64> {
    let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

pub fn check(
    seed: u64,
    resolution: usize,
    n_tokens: usize,
    detach_norms: bool,
    corrupt: bool,
) -> Result<GradcheckReport, Error> {
    let inst = random_instance(seed, resolution, n_tokens)?;
    let cfg = GuidanceConfig {
        detach_norms,
        ..GuidanceConfig::default()
    };
    let masks = inst.layout.masks(resolution);
    // Quantities the update treats as constants stay frozen at the base point.
    let (_, grad, frozen) = loco_gradient_detached(&inst.backbone, &inst.latent, &inst.layout, &masks, &cfg)?;
    let mut analytic = grad.data.into_data();
    if corrupt {
        let worst = analytic
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if v.abs() > analytic[b].abs() { i } else { b });
        analytic[worst] *= 1.5;
    }

    let h = DEFAULT_STEP;
    let z = &inst.latent.z;
    let mut numeric = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let mut plus = z.clone();
        plus.data_mut()[i] += h;
        let mut minus = z.clone();
        minus.data_mut()[i] -= h;
        let fp = loco_value(&inst.backbone, &plus, &inst.layout, &masks, &cfg, Some(&frozen))?.total;
        let fm = loco_value(&inst.backbone, &minus, &inst.layout, &masks, &cfg, Some(&frozen))?.total;
        numeric.push((fp - fm) / (2.0 * h));
    }

    let errs = relative_errors(&analytic, &numeric);
    let (worst, max_rel_error) = errs
        .iter()
        .enumerate()
        .fold((0, 0.0), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let cols = z.cols();
    Ok(GradcheckReport {
        seed,
        resolution,
        tokens: n_tokens,
        detach_norms,
        max_rel_error,
        worst: (worst / cols, worst % cols),
        worst_analytic: analytic[worst],
        worst_numeric: numeric[worst],
        tolerance: DEFAULT_TOLERANCE,
    })
}
