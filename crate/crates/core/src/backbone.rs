//! Frozen toy text-conditioned denoiser with a single cross-attention site.
//!
//! Tokens get hashed embeddings, projections are seeded, and the denoise
//! step pulls every latent pixel toward the attention-weighted mix of the
//! token value vectors. Pixels that already attend to a token drift toward
//! it, so decisions taken in the first few steps persist to the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{DenseMatrix, MathError, NodeId, Tape};
use crate::Error;

const SOT_KEY: &str = "\u{0}<|startoftext|>";
const EOT_KEY: &str = "\u{0}<|endoftext|>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Side of the square attention grid.
    pub resolution: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub latent_dim: usize,
    pub total_steps: usize,
    /// Pull strength of the denoise step.
    pub rho: f64,
    /// Noise scale at the first denoise step; decays linearly to zero.
    pub sigma_max: f64,
    /// Diagonal gain of the query projection.
    pub query_gain: f64,
    /// Std of the off-diagonal query perturbation.
    pub query_noise: f64,
    /// Box-blur radius (cells) applied to the initial latent noise.
    pub init_blur: usize,
    /// Per-entry std of the initial latent; the value vectors share this scale.
    pub latent_std: f64,
    pub vocab_seed: u64,
    pub proj_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            embed_dim: 32,
            head_dim: 32,
            latent_dim: 32,
            total_steps: 51,
            rho: 0.15,
            sigma_max: 0.1 / 15.0,
            query_gain: 24.0,
            query_noise: 0.2,
            init_blur: 2,
            latent_std: 1.0 / 15.0,
            vocab_seed: 1234,
            proj_seed: 5678,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.resolution == 0 || self.embed_dim == 0 || self.head_dim == 0 || self.latent_dim == 0 {
            return bad("backbone dimensions must be positive".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0,1), got {}", self.rho));
        }
        if !(self.latent_std > 0.0 && self.latent_std.is_finite()) {
            return bad(format!("latent_std must be positive, got {}", self.latent_std));
        }
        if self.sigma_max < 0.0 || self.query_gain <= 0.0 || self.query_noise < 0.0 {
            return bad("noise scales must be non-negative and query_gain positive".into());
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Noise level used by the denoise step that leaves timestep `t`.
    pub fn sigma_at(&self, t: usize) -> f64 {
        if self.total_steps <= 1 {
            return 0.0;
        }
        self.sigma_max * (t.saturating_sub(1)) as f64 / (self.total_steps - 1) as f64
    }
}

/// Lowercased words with punctuation split into separate tokens.
pub fn tokenize(prompt: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in prompt.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed derived from a base seed and a stream label.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub words: Vec<String>,
    /// `n x embed_dim`; row 0 is the start token, row `n-1` the end token.
    pub embeddings: DenseMatrix,
}

impl TokenSet {
    pub fn n(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn sot_index(&self) -> usize {
        0
    }

    pub fn eot_index(&self) -> usize {
        self.n() - 1
    }
}

fn embed_key(key: &str, vocab_seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(vocab_seed, fnv1a(key.as_bytes())));
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

pub fn embed_tokens(prompt: &str, vocab_seed: u64, embed_dim: usize) -> Result<TokenSet, Error> {
    let content = tokenize(prompt);
    if content.is_empty() {
        return Err(Error::Contract("empty prompt".into()));
    }
    let mut words = Vec::with_capacity(content.len() + 2);
    words.push("<sot>".to_string());
    words.extend(content);
    words.push("<eot>".to_string());
    let n = words.len();
    let mut data = Vec::with_capacity(n * embed_dim);
    for (i, w) in words.iter().enumerate() {
        let key = if i == 0 {
            SOT_KEY
        } else if i == n - 1 {
            EOT_KEY
        } else {
            w.as_str()
        };
        data.extend(embed_key(key, vocab_seed, embed_dim));
    }
    Ok(TokenSet {
        words,
        embeddings: DenseMatrix::new(n, embed_dim, data)?,
    })
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseMatrix::new(rows, cols, data).expect("sized")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    /// `latent_dim x head_dim`
    pub w_q: DenseMatrix,
    /// `embed_dim x head_dim`
    pub w_k: DenseMatrix,
    pub head_dim: usize,
    pub seed: u64,
}

impl ProjectionSet {
    /// `W_Q = gain·I + N(0, noise²/latent_dim)`, `W_K ~ N(0, 3/embed_dim)`
    /// so that keys of `[-1,1]` embeddings have unit variance.
    pub fn new(cfg: &BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.proj_seed, 1));
        let mut w_q = gaussian_matrix(
            cfg.latent_dim,
            cfg.head_dim,
            cfg.query_noise / (cfg.latent_dim as f64).sqrt(),
            &mut rng,
        );
        for i in 0..cfg.latent_dim.min(cfg.head_dim) {
            let v = w_q.get(i, i) + cfg.query_gain;
            w_q.set(i, i, v);
        }
        let w_k = gaussian_matrix(
            cfg.embed_dim,
            cfg.head_dim,
            (3.0 / cfg.embed_dim as f64).sqrt(),
            &mut rng,
        );
        Self {
            w_q,
            w_k,
            head_dim: cfg.head_dim,
            seed: cfg.proj_seed,
        }
    }

    pub fn keys(&self, tokens: &TokenSet) -> Result<DenseMatrix, MathError> {
        tokens.embeddings.matmul(&self.w_k)
    }

    /// Keys padded with zeros or truncated to `latent_dim` columns.
    pub fn values(&self, tokens: &TokenSet, latent_dim: usize) -> Result<DenseMatrix, MathError> {
        let k = self.keys(tokens)?;
        let mut out = DenseMatrix::zeros(k.rows(), latent_dim);
        for r in 0..k.rows() {
            for c in 0..latent_dim.min(k.cols()) {
                out.set(r, c, k.get(r, c));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `pixels x latent_dim`
    pub z: DenseMatrix,
    /// Counts down from `total_steps` to 0.
    pub t: usize,
    pub total_steps: usize,
    pub rng_seed: u64,
}

impl LatentState {
    /// Spatially smoothed Gaussian noise with per-entry std `latent_std`.
    pub fn initial(cfg: &BackboneConfig, rng_seed: u64) -> Self {
        let res = cfg.resolution;
        let dz = cfg.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, 0x1a7e));
        let raw = gaussian_matrix(res * res, dz, cfg.latent_std, &mut rng);
        let z = if cfg.init_blur == 0 {
            raw
        } else {
            let rad = cfg.init_blur as isize;
            let mut out = DenseMatrix::zeros(res * res, dz);
            // Sum of (2r+1)² iid unit normals has variance (2r+1)²; wrap-around
            // keeps that count constant at the borders.
            let norm = 1.0 / (2 * rad + 1) as f64;
            for r in 0..res as isize {
                for c in 0..res as isize {
                    let dst = (r * res as isize + c) as usize;
                    for dr in -rad..=rad {
                        for dc in -rad..=rad {
                            let rr = (r + dr).rem_euclid(res as isize);
                            let cc = (c + dc).rem_euclid(res as isize);
                            let src = (rr * res as isize + cc) as usize;
                            for k in 0..dz {
                                let v = out.get(dst, k) + norm * raw.get(src, k);
                                out.set(dst, k, v);
                            }
                        }
                    }
                }
            }
            out
        };
        Self {
            z,
            t: cfg.total_steps,
            total_steps: cfg.total_steps,
            rng_seed,
        }
    }
}

/// Row-stochastic `pixels x n` attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub a: DenseMatrix,
    pub resolution: usize,
}

impl AttentionMaps {
    pub fn n_tokens(&self) -> usize {
        self.a.cols()
    }

    /// Spatial map of one token, row-major over the grid.
    pub fn token_map(&self, i: usize) -> Vec<f64> {
        self.a.column(i)
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.a.rows())
            .map(|r| (self.a.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the most attended token per pixel.
    pub fn argmax_tokens(&self) -> Vec<usize> {
        (0..self.a.rows())
            .map(|r| {
                let row = self.a.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Frozen backbone bound to one prompt.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tokens: TokenSet,
    pub projections: ProjectionSet,
    keys: DenseMatrix,
    values: DenseMatrix,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, prompt: &str) -> Result<Self, Error> {
        config.validate()?;
        let tokens = embed_tokens(prompt, config.vocab_seed, config.embed_dim)?;
        let projections = ProjectionSet::new(config);
        let keys = projections.keys(&tokens)?;
        let values = projections
            .values(&tokens, config.latent_dim)?
            .map(|v| v * config.latent_std);
        Ok(Self {
            config: config.clone(),
            tokens,
            projections,
            keys,
            values,
        })
    }

    pub fn keys(&self) -> &DenseMatrix {
        &self.keys
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn initial_latent(&self, rng_seed: u64) -> LatentState {
        LatentState::initial(&self.config, rng_seed)
    }

    fn scale(&self) -> f64 {
        (self.projections.head_dim as f64).sqrt()
    }

    pub fn cross_attention(&self, z: &LatentState) -> Result<AttentionMaps, Error> {
        cross_attention(z, &self.tokens, &self.projections)
    }

    /// Records `softmax(z·W_Q·Kᵀ/√d)` on `tape` with gradients flowing to
    /// `z_node`.
    pub fn attention_on_tape(&self, tape: &mut Tape, z_node: NodeId) -> Result<NodeId, MathError> {
        let w_q = tape.constant(self.projections.w_q.clone());
        let k_t = tape.constant(self.keys.transpose());
        let q = tape.matmul(z_node, w_q)?;
        let logits = tape.matmul(q, k_t)?;
        tape.row_softmax(logits, self.scale())
    }

    pub fn denoise(&self, z: &LatentState, attention: &AttentionMaps) -> Result<LatentState, Error> {
        let sigma = self.config.sigma_at(z.t);
        denoise_step(z, attention, &self.values, self.config.rho, sigma)
    }
}

pub fn cross_attention(
    z: &LatentState,
    tokens: &TokenSet,
    proj: &ProjectionSet,
) -> Result<AttentionMaps, Error> {
    let q = z.z.matmul(&proj.w_q)?;
    let k = proj.keys(tokens)?;
    let logits = q.matmul_nt(&k)?;
    let res = (z.z.rows() as f64).sqrt().round() as usize;
    if res * res != z.z.rows() {
        return Err(MathError::Shape {
            op: "cross_attention",
            detail: format!("{} latent pixels is not a square grid", z.z.rows()),
        }
        .into());
    }
    Ok(AttentionMaps {
        a: logits.row_softmax((proj.head_dim as f64).sqrt()),
        resolution: res,
    })
}

/// `z ← (1−ρ)·z + ρ·A·V + σ·η`, then `t ← t−1`. The noise stream is keyed
/// by `(rng_seed, t)`.
pub fn denoise_step(
    z: &LatentState,
    attention: &AttentionMaps,
    values: &DenseMatrix,
    rho: f64,
    sigma: f64,
) -> Result<LatentState, Error> {
    if z.t == 0 {
        return Err(Error::Contract("denoise_step called at t = 0".into()));
    }
    if !(0.0..1.0).contains(&rho) && rho != 1.0 {
        return Err(Error::Contract(format!("rho {rho} outside [0,1]")));
    }
    if sigma < 0.0 {
        return Err(Error::Contract(format!("negative sigma {sigma}")));
    }
    let pulled = attention.a.matmul(values)?;
    if pulled.shape() != z.z.shape() {
        return Err(MathError::Shape {
            op: "denoise_step",
            detail: format!("{:?} vs latent {:?}", pulled.shape(), z.z.shape()),
        }
        .into());
    }
    let mut next = z.z.zip_map(&pulled, |a, b| (1.0 - rho) * a + rho * b);
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(z.rng_seed, z.t as u64));
        for v in next.data_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(LatentState {
        z: next,
        t: z.t - 1,
        total_steps: z.total_steps,
        rng_seed: z.rng_seed,
    })
}
