//! Layout losses over cross-attention and the gradient update that steers
//! the latent during the first denoising steps.
//!
//! * localized attention loss: `[1 − Σᵢ sum(Aᵢ⊙Mᵢ/‖Aᵢ‖∞) / Σᵢ sum(Aᵢ/‖Aᵢ‖∞)]²`
//! * padding-token loss: mean BCE between `sigmoid(A_PT)` and the foreground
//!   target `maxᵢ(Aᵢ⊙Mᵢ)`, with
//!   `A_PT = β(1−A_sot)/‖1−A_sot‖∞ + (1−β)A_eot/‖A_eot‖∞`
//! * total: `lac + α·ptc`; update `z ← z − γ·λ·∇z total`

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMaps, Backbone, BackboneConfig, LatentState};
use crate::diffmath::{DenseMatrix, Gradient, MathError, NodeId, Tape, DENOM_EPS};
use crate::layout::{Layout, Mask, Phrase};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `(S − i) / S`
    Linear,
    /// `0.5^i`
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtcTarget {
    /// Elementwise max of the masked object maps.
    Foreground,
    /// Binary union of the object masks.
    UnionMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub guided_steps: usize,
    pub iterations_per_step: usize,
    /// Treat the ∞-norm denominators as constants when differentiating.
    pub detach_norms: bool,
    pub schedule_kind: ScheduleKind,
    /// Divide each object map by its ∞-norm inside the localized loss.
    pub lac_normalize: bool,
    pub ptc_target: PtcTarget,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 30.0,
            alpha: 0.2,
            beta: 0.8,
            guided_steps: 10,
            iterations_per_step: 5,
            detach_norms: false,
            schedule_kind: ScheduleKind::Linear,
            lac_normalize: true,
            ptc_target: PtcTarget::Foreground,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, total_steps: usize) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0,1], got {}", self.beta));
        }
        if self.guided_steps > total_steps {
            return bad(format!(
                "guided_steps {} exceeds the {total_steps} denoising steps",
                self.guided_steps
            ));
        }
        if self.iterations_per_step == 0 {
            return bad("iterations_per_step must be at least 1".into());
        }
        Ok(())
    }

    pub fn guidance_enabled(&self) -> bool {
        self.guided_steps > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lac: f64,
    pub ptc: f64,
    pub total: f64,
    pub per_object_inbox_fraction: Vec<f64>,
}

/// Per-object target maps, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub objects: Vec<Vec<f64>>,
    pub foreground: Vec<f64>,
    pub union: Mask,
}

/// Tape nodes of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub lac: NodeId,
    pub ptc: NodeId,
    pub total: NodeId,
}

/// Mean of the span's token maps as a `q x 1` node.
pub fn object_attention_node(tape: &mut Tape, a: NodeId, phrase: &Phrase) -> Result<NodeId, MathError> {
    let n = tape.value(a).cols();
    let (first, rest) = phrase
        .span
        .split_first()
        .ok_or_else(|| MathError::Contract(format!("phrase \"{}\" has an empty span", phrase.text)))?;
    if let Some(bad) = phrase.span.iter().find(|&&i| i >= n) {
        return Err(MathError::Contract(format!(
            "token {bad} of \"{}\" outside {n} attention maps",
            phrase.text
        )));
    }
    let mut acc = tape.column(a, *first)?;
    for &i in rest {
        let col = tape.column(a, i)?;
        acc = tape.add(acc, col)?;
    }
    if rest.is_empty() {
        Ok(acc)
    } else {
        Ok(tape.scale(acc, 1.0 / phrase.span.len() as f64))
    }
}

/// Spatial attention of one phrase; span maps are averaged.
pub fn object_attention(attn: &AttentionMaps, phrase: &Phrase) -> Result<Vec<f64>, Error> {
    let mut tape = Tape::new();
    let a = tape.constant(attn.a.clone());
    let node = object_attention_node(&mut tape, a, phrase)?;
    Ok(tape.value(node).data().to_vec())
}

/// Values that enter the loss as constants: the ∞-norms when they are
/// detached, and the padding-token target.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetachedValues {
    pub norms: Vec<f64>,
    pub target: Vec<f64>,
}

/// Detached norms seen so far, optionally replayed from an earlier capture.
#[derive(Debug, Default)]
pub struct NormSlots<'a> {
    frozen: Option<&'a [f64]>,
    seen: Vec<f64>,
}

impl<'a> NormSlots<'a> {
    pub fn replay(frozen: &'a [f64]) -> Self {
        Self {
            frozen: Some(frozen),
            seen: Vec::new(),
        }
    }
}

fn norm_node(tape: &mut Tape, map: NodeId, detach: bool, slots: &mut NormSlots<'_>) -> Result<NodeId, MathError> {
    let live = tape.guarded_max_norm(map)?;
    if !detach {
        return Ok(live);
    }
    let v = match slots.frozen {
        Some(f) => *f.get(slots.seen.len()).ok_or_else(|| {
            MathError::Contract("fewer frozen norms than normalized maps".into())
        })?,
        None => tape.scalar(live),
    };
    slots.seen.push(v);
    Ok(tape.constant(DenseMatrix::scalar(v)))
}

/// Records the localized attention loss.
pub fn lac_node(
    tape: &mut Tape,
    object_maps: &[NodeId],
    masks: &[NodeId],
    normalize: bool,
    detach_norms: bool,
    slots: &mut NormSlots<'_>,
) -> Result<NodeId, MathError> {
    if object_maps.is_empty() {
        return Err(MathError::Contract("localized loss needs at least one object".into()));
    }
    if object_maps.len() != masks.len() {
        return Err(MathError::Contract(format!(
            "{} object maps but {} masks",
            object_maps.len(),
            masks.len()
        )));
    }
    let mut inside: Option<NodeId> = None;
    let mut total: Option<NodeId> = None;
    for (&map, &mask) in object_maps.iter().zip(masks) {
        let masked = tape.mul(map, mask)?;
        let mut s_in = tape.sum(masked);
        let mut s_all = tape.sum(map);
        if normalize {
            let norm = norm_node(tape, map, detach_norms, slots)?;
            s_in = tape.div(s_in, norm)?;
            s_all = tape.div(s_all, norm)?;
        }
        inside = Some(match inside {
            Some(acc) => tape.add(acc, s_in)?,
            None => s_in,
        });
        total = Some(match total {
            Some(acc) => tape.add(acc, s_all)?,
            None => s_all,
        });
    }
    let (inside, total) = (inside.unwrap(), total.unwrap());
    let total = tape.clamp(total, DENOM_EPS, f64::INFINITY);
    let ratio = tape.div(inside, total)?;
    let gap = tape.rsub_scalar(1.0, ratio);
    Ok(tape.square(gap))
}

/// Records the β-mixed padding-token map.
pub fn ptc_map_node(
    tape: &mut Tape,
    a: NodeId,
    beta: f64,
    detach_norms: bool,
    slots: &mut NormSlots<'_>,
) -> Result<NodeId, MathError> {
    let n = tape.value(a).cols();
    if n < 2 {
        return Err(MathError::Contract("padding-token map needs start and end tokens".into()));
    }
    let sot = tape.column(a, 0)?;
    let eot = tape.column(a, n - 1)?;
    let inv = tape.rsub_scalar(1.0, sot);
    let inv_norm = norm_node(tape, inv, detach_norms, slots)?;
    let inv = tape.div_scalar(inv, inv_norm)?;
    let eot_norm = norm_node(tape, eot, detach_norms, slots)?;
    let eot = tape.div_scalar(eot, eot_norm)?;
    let left = tape.scale(inv, beta);
    let right = tape.scale(eot, 1.0 - beta);
    tape.add(left, right)
}

pub fn masked_maps(maps: &[Vec<f64>], masks: &[Mask]) -> Vec<Vec<f64>> {
    maps.iter()
        .zip(masks)
        .map(|(m, mask)| {
            m.iter()
                .zip(mask.cells())
                .map(|(&v, &c)| if c { v } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn target_maps(maps: &[Vec<f64>], masks: &[Mask]) -> Result<TargetMaps, Error> {
    let union = crate::layout::union_mask(masks)?;
    let objects = masked_maps(maps, masks);
    let mut foreground = vec![0.0; union.cells().len()];
    for obj in &objects {
        for (f, &v) in foreground.iter_mut().zip(obj) {
            *f = f64::max(*f, v);
        }
    }
    Ok(TargetMaps {
        objects,
        foreground,
        union,
    })
}

/// Records the full combined loss on `tape` for attention node `a`.
///
/// With `frozen` set, detached quantities are taken from that capture
/// instead of the current attention; the values actually used are returned.
pub fn loco_nodes(
    tape: &mut Tape,
    a: NodeId,
    layout: &Layout,
    masks: &[Mask],
    cfg: &GuidanceConfig,
    frozen: Option<&DetachedValues>,
) -> Result<(LossNodes, Vec<NodeId>, DetachedValues), Error> {
    if masks.len() != layout.k() {
        return Err(Error::Contract(format!(
            "{} masks for {} layout objects",
            masks.len(),
            layout.k()
        )));
    }
    let mut slots = match frozen {
        Some(f) => NormSlots::replay(&f.norms),
        None => NormSlots::default(),
    };
    let maps = layout
        .objects
        .iter()
        .map(|o| object_attention_node(tape, a, &o.phrase))
        .collect::<Result<Vec<_>, _>>()?;
    let mask_nodes: Vec<NodeId> = masks.iter().map(|m| tape.constant(m.to_column())).collect();
    let lac = lac_node(tape, &maps, &mask_nodes, cfg.lac_normalize, cfg.detach_norms, &mut slots)?;

    let target = match (frozen, cfg.ptc_target) {
        (Some(f), _) => f.target.clone(),
        (None, PtcTarget::Foreground) => {
            let values: Vec<Vec<f64>> = maps.iter().map(|&m| tape.value(m).data().to_vec()).collect();
            target_maps(&values, masks)?.foreground
        }
        (None, PtcTarget::UnionMask) => crate::layout::union_mask(masks)?
            .cells()
            .iter()
            .map(|&c| if c { 1.0 } else { 0.0 })
            .collect(),
    };
    let target_node = tape.constant(DenseMatrix::column_vector(target.clone()));
    let pt = ptc_map_node(tape, a, cfg.beta, cfg.detach_norms, &mut slots)?;
    let ptc = tape.bce_with_sigmoid(pt, target_node)?;
    let weighted = tape.scale(ptc, cfg.alpha);
    let total = tape.add(lac, weighted)?;
    let detached = DetachedValues {
        norms: slots.seen,
        target,
    };
    Ok((LossNodes { lac, ptc, total }, maps, detached))
}

fn inbox_fractions(tape: &Tape, maps: &[NodeId], masks: &[Mask]) -> Vec<f64> {
    maps.iter()
        .zip(masks)
        .map(|(&m, mask)| {
            let v = tape.value(m).data();
            let all: f64 = v.iter().sum();
            let inside: f64 = v.iter().zip(mask.cells()).filter(|(_, &c)| c).map(|(x, _)| x).sum();
            if all > 0.0 {
                inside / all
            } else {
                0.0
            }
        })
        .collect()
}

fn breakdown(tape: &Tape, nodes: LossNodes, maps: &[NodeId], masks: &[Mask]) -> LossBreakdown {
    LossBreakdown {
        lac: tape.scalar(nodes.lac),
        ptc: tape.scalar(nodes.ptc),
        total: tape.scalar(nodes.total),
        per_object_inbox_fraction: inbox_fractions(tape, maps, masks),
    }
}

/// Localized attention loss evaluated on fixed attention maps.
pub fn lac_loss(attn: &AttentionMaps, layout: &Layout, masks: &[Mask], normalize: bool) -> Result<f64, Error> {
    if layout.k() == 0 {
        return Err(Error::Contract("layout has no objects".into()));
    }
    if masks.len() != layout.k() {
        return Err(Error::Contract(format!("{} masks for {} objects", masks.len(), layout.k())));
    }
    let mut tape = Tape::new();
    let a = tape.constant(attn.a.clone());
    let maps = layout
        .objects
        .iter()
        .map(|o| object_attention_node(&mut tape, a, &o.phrase))
        .collect::<Result<Vec<_>, _>>()?;
    let mask_nodes: Vec<NodeId> = masks.iter().map(|m| tape.constant(m.to_column())).collect();
    let lac = lac_node(&mut tape, &maps, &mask_nodes, normalize, false, &mut NormSlots::default())?;
    Ok(tape.scalar(lac))
}

/// β-mixed padding-token map, row-major over the grid.
pub fn ptc_maps(attn: &AttentionMaps, beta: f64) -> Result<Vec<f64>, Error> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Contract(format!("beta {beta} outside [0,1]")));
    }
    let mut tape = Tape::new();
    let a = tape.constant(attn.a.clone());
    let pt = ptc_map_node(&mut tape, a, beta, false, &mut NormSlots::default())?;
    Ok(tape.value(pt).data().to_vec())
}

/// Mean BCE of `sigmoid(pt)` against a fixed target.
pub fn ptc_loss(pt: &[f64], target: &[f64]) -> Result<f64, Error> {
    if pt.len() != target.len() {
        return Err(MathError::Shape {
            op: "ptc_loss",
            detail: format!("{} vs {}", pt.len(), target.len()),
        }
        .into());
    }
    let mut tape = Tape::new();
    let p = tape.constant(DenseMatrix::column_vector(pt.to_vec()));
    let y = tape.constant(DenseMatrix::column_vector(target.to_vec()));
    let l = tape.bce_with_sigmoid(p, y)?;
    Ok(tape.scalar(l))
}

/// Combined loss on fixed attention maps.
pub fn loco_loss(
    attn: &AttentionMaps,
    layout: &Layout,
    masks: &[Mask],
    cfg: &GuidanceConfig,
) -> Result<LossBreakdown, Error> {
    let mut tape = Tape::new();
    let a = tape.constant(attn.a.clone());
    let (nodes, maps, _) = loco_nodes(&mut tape, a, layout, masks, cfg, None)?;
    Ok(breakdown(&tape, nodes, &maps, masks))
}

/// Loss at latent `z` and its gradient with respect to `z`.
pub fn loco_gradient(
    backbone: &Backbone,
    z: &LatentState,
    layout: &Layout,
    masks: &[Mask],
    cfg: &GuidanceConfig,
) -> Result<(LossBreakdown, Gradient), Error> {
    let (loss, grad, _) = loco_gradient_detached(backbone, z, layout, masks, cfg)?;
    Ok((loss, grad))
}

/// Like [`loco_gradient`], also returning the values that were held constant.
pub fn loco_gradient_detached(
    backbone: &Backbone,
    z: &LatentState,
    layout: &Layout,
    masks: &[Mask],
    cfg: &GuidanceConfig,
) -> Result<(LossBreakdown, Gradient, DetachedValues), Error> {
    let mut tape = Tape::new();
    let zn = tape.variable(z.z.clone());
    let a = backbone.attention_on_tape(&mut tape, zn)?;
    let (nodes, maps, detached) = loco_nodes(&mut tape, a, layout, masks, cfg, None)?;
    let grads = tape.backward(nodes.total)?;
    Ok((breakdown(&tape, nodes, &maps, masks), grads.get(zn), detached))
}

/// Loss value at latent `z` without recording gradients. `frozen` replays
/// detached quantities captured elsewhere.
pub fn loco_value(
    backbone: &Backbone,
    z: &DenseMatrix,
    layout: &Layout,
    masks: &[Mask],
    cfg: &GuidanceConfig,
    frozen: Option<&DetachedValues>,
) -> Result<LossBreakdown, Error> {
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let a = backbone.attention_on_tape(&mut tape, zn)?;
    let (nodes, maps, _) = loco_nodes(&mut tape, a, layout, masks, cfg, frozen)?;
    Ok(breakdown(&tape, nodes, &maps, masks))
}

/// Step size multiplier for guided step `step_index`.
pub fn schedule(step_index: usize, cfg: &GuidanceConfig) -> Result<f64, Error> {
    if step_index >= cfg.guided_steps {
        return Err(Error::Contract(format!(
            "schedule index {step_index} outside {} guided steps",
            cfg.guided_steps
        )));
    }
    Ok(match cfg.schedule_kind {
        ScheduleKind::Linear => {
            let s = cfg.guided_steps as f64;
            (s - step_index as f64) / s
        }
        ScheduleKind::Exponential => 0.5f64.powi(step_index as i32),
    })
}

/// `ẑ = z − γ·λ·∇`; the timestep is left alone.
pub fn update_latent(z: &LatentState, grad: &Gradient, gamma: f64, lambda: f64) -> Result<LatentState, Error> {
    if grad.data.shape() != z.z.shape() {
        return Err(MathError::Shape {
            op: "update_latent",
            detail: format!("gradient {:?} vs latent {:?}", grad.data.shape(), z.z.shape()),
        }
        .into());
    }
    let step = gamma * lambda;
    Ok(LatentState {
        z: z.z.zip_map(&grad.data, |v, g| v - step * g),
        ..z.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub step: usize,
    pub iteration: usize,
    pub lambda: f64,
    /// Loss before this iteration's update.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Timestep at which this step's attention was read.
    pub t: usize,
    pub iterations: Vec<IterationRecord>,
    /// Latent fed to the denoiser (after any guidance).
    pub latent: LatentState,
    pub attention: AttentionMaps,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub final_state: LatentState,
    pub final_attention: AttentionMaps,
    pub final_loss: LossBreakdown,
}

impl Trajectory {
    pub fn iterations(&self) -> impl Iterator<Item = &IterationRecord> {
        self.steps.iter().flat_map(|s| s.iterations.iter())
    }

    pub fn update_count(&self) -> usize {
        self.iterations().count()
    }

    /// Largest deviation of any attention row sum from 1 along the run.
    pub fn max_row_sum_error(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.attention.max_row_sum_error())
            .fold(self.final_attention.max_row_sum_error(), f64::max)
    }
}

/// Runs the full denoising trajectory, applying the guidance loop for the
/// first `guided_steps` timesteps.
pub fn guided_sample(
    layout: &Layout,
    cfg: &GuidanceConfig,
    backbone_cfg: &BackboneConfig,
    seed: u64,
) -> Result<Trajectory, Error> {
    let backbone = Backbone::new(backbone_cfg, &layout.prompt)?;
    guided_sample_with(&backbone, layout, cfg, seed)
}

pub fn guided_sample_with(
    backbone: &Backbone,
    layout: &Layout,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Trajectory, Error> {
    let bcfg = &backbone.config;
    cfg.validate(bcfg.total_steps)?;
    if backbone.tokens.n() != layout.token_count {
        return Err(Error::Contract(format!(
            "layout expects {} tokens, backbone produced {}",
            layout.token_count,
            backbone.tokens.n()
        )));
    }
    let masks = layout.masks(bcfg.resolution);
    let mut state = backbone.initial_latent(seed);
    let mut steps = Vec::with_capacity(bcfg.total_steps);

    for step in 0..bcfg.total_steps {
        let mut iterations = Vec::new();
        if step < cfg.guided_steps {
            let lambda = schedule(step, cfg)?;
            for iteration in 0..cfg.iterations_per_step {
                let (loss, grad) = loco_gradient(backbone, &state, layout, &masks, cfg)?;
                iterations.push(IterationRecord {
                    step,
                    iteration,
                    lambda,
                    loss,
                });
                state = update_latent(&state, &grad, cfg.gamma, lambda)?;
            }
        }
        let attention = backbone.cross_attention(&state)?;
        let next = backbone.denoise(&state, &attention)?;
        steps.push(StepRecord {
            t: state.t,
            iterations,
            latent: state,
            attention,
        });
        state = next;
    }

    let final_attention = backbone.cross_attention(&state)?;
    let final_loss = loco_loss(&final_attention, layout, &masks, cfg)?;
    Ok(Trajectory {
        steps,
        final_state: state,
        final_attention,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Layout;

    fn uniform_attention(n: usize) -> AttentionMaps {
        AttentionMaps {
            a: DenseMatrix::filled(256, n, 1.0 / n as f64),
            resolution: 16,
        }
    }

    fn cat_dog() -> Layout {
        Layout::new(
            "a cat and a dog",
            &[("cat", [0.0, 0.0, 0.5, 0.5]), ("dog", [0.5, 0.5, 1.0, 1.0])],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn object_attention_averages_span() {
        let mut a = DenseMatrix::zeros(4, 4);
        for r in 0..4 {
            a.set(r, 1, r as f64 * 0.1);
            a.set(r, 2, 0.05 + r as f64 * 0.2);
        }
        let attn = AttentionMaps { a: a.clone(), resolution: 2 };
        let single = Phrase { text: "x".into(), span: vec![1] };
        assert_eq!(object_attention(&attn, &single).unwrap(), a.column(1));

        let pair = Phrase { text: "x y".into(), span: vec![1, 2] };
        let got = object_attention(&attn, &pair).unwrap();
        for r in 0..4 {
            let expect = (a.get(r, 1) + a.get(r, 2)) / 2.0;
            assert!((got[r] - expect).abs() < 1e-15);
        }
        let twice = Phrase { text: "x x".into(), span: vec![1, 1] };
        assert_eq!(object_attention(&attn, &twice).unwrap(), a.column(1));

        let bad = Phrase { text: "x".into(), span: vec![9] };
        assert!(object_attention(&attn, &bad).is_err());
    }

    #[test]
    fn lac_closed_form_cases() {
        // One object, uniform map, 64-cell mask: ratio 64/256.
        let layout = Layout::new("a cat", &[("cat", [0.0, 0.0, 0.5, 0.5])], vec![]).unwrap();
        let attn = uniform_attention(4);
        let l = lac_loss(&attn, &layout, &layout.masks(16), true).unwrap();
        assert!((l - 0.5625).abs() < 1e-12);

        let two = cat_dog();
        let l = lac_loss(&uniform_attention(7), &two, &two.masks(16), true).unwrap();
        assert!((l - 0.5625).abs() < 1e-12);

        // All object mass inside the mask.
        let mask = &layout.masks(16)[0];
        let mut a = DenseMatrix::filled(256, 4, 0.0);
        for r in 0..256 {
            let cat = if mask.cells()[r] { 0.4 } else { 0.0 };
            a.set(r, 2, cat);
            a.set(r, 0, 1.0 - cat);
        }
        let l = lac_loss(&AttentionMaps { a, resolution: 16 }, &layout, &layout.masks(16), true).unwrap();
        assert!(l <= 1e-9);
    }

    #[test]
    fn ptc_map_endpoints() {
        let mut a = DenseMatrix::zeros(256, 3);
        for r in 0..256 {
            a.set(r, 0, 1.0);
        }
        let attn = AttentionMaps { a, resolution: 16 };
        let pt = ptc_maps(&attn, 0.8).unwrap();
        assert!(pt.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ptc_loss_values() {
        let zeros = vec![0.0; 256];
        let ones = vec![1.0; 256];
        assert!((ptc_loss(&zeros, &zeros).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((ptc_loss(&zeros, &ones).unwrap() - 2f64.ln()).abs() < 1e-12);

        let pt: Vec<f64> = (0..256).map(|i| (i as f64) / 255.0).collect();
        let y: Vec<f64> = pt.iter().map(|&v| crate::diffmath::sigmoid(v)).collect();
        let entropy: f64 = y.iter().map(|&p| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())).sum::<f64>() / 256.0;
        assert!((ptc_loss(&pt, &y).unwrap() - entropy).abs() < 1e-12);
        assert!(ptc_loss(&pt, &y[..3]).is_err());
    }

    #[test]
    fn loco_total_composition() {
        let layout = cat_dog();
        let bb = Backbone::new(&BackboneConfig::default(), &layout.prompt).unwrap();
        let attn = bb.cross_attention(&bb.initial_latent(2)).unwrap();
        let masks = layout.masks(16);
        let cfg = GuidanceConfig::default();
        let b = loco_loss(&attn, &layout, &masks, &cfg).unwrap();
        assert_eq!(b.total, b.lac + 0.2 * b.ptc);
        let zero = GuidanceConfig { alpha: 0.0, ..cfg.clone() };
        let b0 = loco_loss(&attn, &layout, &masks, &zero).unwrap();
        assert_eq!(b0.total, b0.lac);
        let detached = GuidanceConfig { detach_norms: true, ..zero };
        assert_eq!(loco_loss(&attn, &layout, &masks, &detached).unwrap().lac, b0.lac);
        assert_eq!(b.per_object_inbox_fraction.len(), 2);
    }

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let cfg = GuidanceConfig::default();
        assert_eq!((cfg.gamma, cfg.alpha, cfg.beta), (30.0, 0.2, 0.8));
        assert_eq!((cfg.guided_steps, cfg.iterations_per_step), (10, 5));
        let parsed: GuidanceConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn linear_schedule() {
        let cfg = GuidanceConfig::default();
        assert_eq!(schedule(0, &cfg).unwrap(), 1.0);
        assert!((schedule(9, &cfg).unwrap() - 0.1).abs() < 1e-15);
        let seq: Vec<f64> = (0..10).map(|i| schedule(i, &cfg).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[1] < w[0]));
        assert!(schedule(10, &cfg).is_err());
        let exp = GuidanceConfig { schedule_kind: ScheduleKind::Exponential, ..cfg };
        assert_eq!(schedule(3, &exp).unwrap(), 0.125);
    }

    #[test]
    fn update_arithmetic() {
        let z = LatentState { z: DenseMatrix::zeros(2, 3), t: 5, total_steps: 51, rng_seed: 0 };
        let g = Gradient {
            target: {
                let mut t = Tape::new();
                t.variable(DenseMatrix::zeros(1, 1))
            },
            data: DenseMatrix::from_rows(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, -1.0]]),
        };
        let out = update_latent(&z, &g, 30.0, 1.0).unwrap();
        assert_eq!(out.z, g.data.map(|v| -30.0 * v));
        assert_eq!(out.t, 5);
        assert_eq!(update_latent(&z, &g, 60.0, 0.5).unwrap(), out);
        let zero = Gradient { data: DenseMatrix::zeros(2, 3), ..g.clone() };
        assert_eq!(update_latent(&z, &zero, 30.0, 1.0).unwrap().z, z.z);
        let wrong = Gradient { data: DenseMatrix::zeros(3, 2), ..g };
        assert!(update_latent(&z, &wrong, 30.0, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = GuidanceConfig::default();
        assert!(ok.validate(51).is_ok());
        assert!(GuidanceConfig { gamma: 0.0, ..ok.clone() }.validate(51).is_err());
        assert!(GuidanceConfig { beta: 1.5, ..ok.clone() }.validate(51).is_err());
        assert!(GuidanceConfig { alpha: -1.0, ..ok.clone() }.validate(51).is_err());
        assert!(GuidanceConfig { guided_steps: 60, ..ok.clone() }.validate(51).is_err());
        assert!(GuidanceConfig { iterations_per_step: 0, ..ok }.validate(51).is_err());
    }

    #[test]
    fn no_guided_steps_reproduces_unguided_run() {
        let layout = cat_dog();
        let bcfg = BackboneConfig::default();
        let cfg = GuidanceConfig { guided_steps: 0, ..GuidanceConfig::default() };
        let traj = guided_sample(&layout, &cfg, &bcfg, 4).unwrap();
        assert_eq!(traj.update_count(), 0);

        let bb = Backbone::new(&bcfg, &layout.prompt).unwrap();
        let mut z = bb.initial_latent(4);
        for rec in &traj.steps {
            assert_eq!(rec.latent, z);
            z = bb.denoise(&z, &bb.cross_attention(&z).unwrap()).unwrap();
        }
        assert_eq!(traj.final_state, z);
    }

    #[test]
    fn default_run_applies_fifty_updates() {
        let layout = cat_dog();
        let traj = guided_sample(&layout, &GuidanceConfig::default(), &BackboneConfig::default(), 1).unwrap();
        assert_eq!(traj.update_count(), 50);
        assert_eq!(traj.steps.len(), 51);
        assert!(traj.steps[..10].iter().all(|s| s.iterations.len() == 5));
        assert!(traj.steps[10..].iter().all(|s| s.iterations.is_empty()));
        assert_eq!(traj.final_state.t, 0);
        assert!(traj.max_row_sum_error() <= 1e-12);
    }

    #[test]
    fn inbox_fraction_mostly_rises_within_a_step() {
        let layouts = [
            cat_dog(),
            Layout::new(
                "a horse next to a cow",
                &[("horse", [0.1, 0.25, 0.5, 0.75]), ("cow", [0.5, 0.25, 0.9, 0.75])],
                vec![],
            )
            .unwrap(),
        ];
        let (mut up, mut n) = (0, 0);
        for seed in 0..20 {
            let layout = &layouts[seed as usize % 2];
            let traj = guided_sample(layout, &GuidanceConfig::default(), &BackboneConfig::default(), seed).unwrap();
            for step in &traj.steps {
                for w in step.iterations.windows(2) {
                    let (a, b) = (&w[0].loss.per_object_inbox_fraction, &w[1].loss.per_object_inbox_fraction);
                    up += a.iter().zip(b).filter(|(x, y)| y >= x).count();
                    n += a.len();
                }
            }
        }
        assert!(up as f64 >= 0.8 * n as f64, "{up}/{n}");
    }

    #[test]
    fn frozen_values_reproduce_the_loss() {
        let layout = cat_dog();
        let bb = Backbone::new(&BackboneConfig::default(), &layout.prompt).unwrap();
        let z = bb.initial_latent(6);
        let masks = layout.masks(16);
        for detach_norms in [false, true] {
            let cfg = GuidanceConfig { detach_norms, ..GuidanceConfig::default() };
            let (loss, _, frozen) = loco_gradient_detached(&bb, &z, &layout, &masks, &cfg).unwrap();
            assert_eq!(frozen.norms.len(), if detach_norms { 4 } else { 0 });
            assert_eq!(frozen.target.len(), 256);
            let replayed = loco_value(&bb, &z.z, &layout, &masks, &cfg, Some(&frozen)).unwrap();
            assert_eq!(replayed, loss);
        }
        let short = DetachedValues { norms: vec![1.0], target: vec![0.0; 256] };
        let cfg = GuidanceConfig { detach_norms: true, ..GuidanceConfig::default() };
        assert!(loco_value(&bb, &z.z, &layout, &masks, &cfg, Some(&short)).is_err());
    }

    mod props {
        use super::*;
        use crate::gradcheck::random_instance;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn small_step_descends(seed in 0u64..10_000, tokens in 4usize..9, step in 1e-4f64..0.1) {
                let inst = random_instance(seed, 16, tokens).unwrap();
                let masks = inst.layout.masks(16);
                let cfg = GuidanceConfig::default();
                let (before, grad) = loco_gradient(&inst.backbone, &inst.latent, &inst.layout, &masks, &cfg).unwrap();
                let moved = update_latent(&inst.latent, &grad, step, 1.0).unwrap();
                let after = loco_value(&inst.backbone, &moved.z, &inst.layout, &masks, &cfg, None).unwrap();
                prop_assert!(after.total < before.total, "{} -> {}", before.total, after.total);
            }

            #[test]
            fn lac_stays_in_unit_interval(seed in 0u64..10_000, tokens in 3usize..9, normalize in any::<bool>()) {
                let inst = random_instance(seed, 16, tokens).unwrap();
                let attn = inst.backbone.cross_attention(&inst.latent).unwrap();
                let l = lac_loss(&attn, &inst.layout, &inst.layout.masks(16), normalize).unwrap();
                prop_assert!((0.0..=1.0).contains(&l));
            }

            #[test]
            fn schedule_in_unit_interval(steps in 1usize..40, kind in prop_oneof![Just(ScheduleKind::Linear), Just(ScheduleKind::Exponential)]) {
                let cfg = GuidanceConfig { guided_steps: steps, schedule_kind: kind, ..GuidanceConfig::default() };
                let seq: Vec<f64> = (0..steps).map(|i| schedule(i, &cfg).unwrap()).collect();
                prop_assert_eq!(seq[0], 1.0);
                prop_assert!(seq.iter().all(|&l| l > 0.0 && l <= 1.0));
                prop_assert!(seq.windows(2).all(|w| w[1] < w[0]));
            }
        }
    }
}
