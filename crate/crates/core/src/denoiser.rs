//! A small class-conditional DiT-style denoiser with addressable module
//! output sites.
//!
//! Each block is `h ← h + Attn(LN(h)); h ← h + Mlp(LN(h))`. The attention and
//! MLP outputs (before the residual addition) are the tappable *sites*. Every
//! site goes through a hook during the forward pass, so callers can replace
//! the fresh computation with a cached or calibrated value.
//!
//! The noise prediction is `ε = sqrt(1 − ᾱ_t)·x_t + LN(h_L)·W_out`: the
//! posterior-mean predictor for unit-Gaussian data plus a learned-style
//! correction read from the final residual stream. Without the first term
//! an untrained projection drives DDIM trajectories to magnitudes in the
//! thousands.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleKind {
    Attention,
    Mlp,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 2] = [ModuleKind::Attention, ModuleKind::Mlp];

    pub fn code(self) -> u32 {
        match self {
            ModuleKind::Attention => 0,
            ModuleKind::Mlp => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ModuleKind::Attention),
            1 => Some(ModuleKind::Mlp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Attention => "attention",
            ModuleKind::Mlp => "mlp",
        }
    }
}

/// One module-output location: reverse step index, block, module kind.
///
/// Ordering is (step descending is *not* implied) plain lexicographic on
/// `(step_index, layer, module)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub step_index: usize,
    pub layer: usize,
    pub module: ModuleKind,
}

impl SiteId {
    pub fn new(step_index: usize, layer: usize, module: ModuleKind) -> Self {
        Self {
            step_index,
            layer,
            module,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(step {}, layer {}, {})",
            self.step_index,
            self.layer,
            self.module.name()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_tokens: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub n_conditions: usize,
    pub weight_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 6,
            n_tokens: 16,
            n_heads: 4,
            d_mlp: 64,
            n_conditions: 8,
            weight_seed: 0x7cc0_5eed,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model.d_model", self.d_model),
            ("model.n_layers", self.n_layers),
            ("model.n_tokens", self.n_tokens),
            ("model.n_heads", self.n_heads),
            ("model.d_mlp", self.d_mlp),
            ("model.n_conditions", self.n_conditions),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: "must be at least 1".into(),
                });
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig {
                key: "model.n_heads".into(),
                reason: format!("d_model {} not divisible by {}", self.d_model, self.n_heads),
            });
        }
        Ok(())
    }

    /// All sites of one step, in forward order.
    pub fn sites_at(&self, step_index: usize) -> Vec<SiteId> {
        (0..self.n_layers)
            .flat_map(|l| ModuleKind::ALL.map(|m| SiteId::new(step_index, l, m)))
            .collect()
    }
}

/// Where in the schedule a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub step_index: usize,
    /// Training timestep fed to the sinusoidal embedding.
    pub timestep: usize,
    pub alpha_bar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Matrix,
    pub condition_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteTap {
    pub site: SiteId,
    pub value: Matrix,
}

#[derive(Debug, Clone)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time_proj: Matrix,
    class_embed: Matrix,
    blocks: Vec<Block>,
    out_proj: Matrix,
}

/// Draws every weight uniformly from `[-1/sqrt(d_model), 1/sqrt(d_model))` in
/// the order: timestep projection, class table, then per block
/// `Wq, Wk, Wv, Wo, W1, W2`, then the output projection. Each matrix is
/// filled row-major.
pub fn build_denoiser(cfg: &DenoiserConfig) -> Result<Denoiser> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.weight_seed);
    let bound = 1.0 / (cfg.d_model as f64).sqrt();
    let mut draw = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.uniform(-bound, bound)).collect();
        Matrix::from_vec(r, c, data).expect("length matches shape")
    };
    let d = cfg.d_model;
    let time_proj = draw(d, d);
    let class_embed = draw(cfg.n_conditions, d);
    let blocks = (0..cfg.n_layers)
        .map(|_| Block {
            wq: draw(d, d),
            wk: draw(d, d),
            wv: draw(d, d),
            wo: draw(d, d),
            w1: draw(d, cfg.d_mlp),
            w2: draw(cfg.d_mlp, d),
        })
        .collect();
    let out_proj = draw(d, d);
    Ok(Denoiser {
        cfg: cfg.clone(),
        time_proj,
        class_embed,
        blocks,
        out_proj,
    })
}

/// A site as seen by a forward hook: the residual stream entering the module
/// and the ability to run the module on it.
pub struct SiteInput<'a> {
    pub site: SiteId,
    pub incoming: &'a Matrix,
    denoiser: &'a Denoiser,
}

impl SiteInput<'_> {
    pub fn compute_fresh(&self) -> Matrix {
        let all = vec![true; self.incoming.rows()];
        self.compute_tokens(&all)
    }

    /// Runs the module for the selected token rows only; other rows are zero.
    /// A selected row is bitwise equal to the same row of [`compute_fresh`].
    ///
    /// [`compute_fresh`]: SiteInput::compute_fresh
    pub fn compute_tokens(&self, mask: &[bool]) -> Matrix {
        let block = &self.denoiser.blocks[self.site.layer];
        match self.site.module {
            ModuleKind::Attention => self.denoiser.attention(block, self.incoming, mask),
            ModuleKind::Mlp => self.denoiser.mlp(block, self.incoming, mask),
        }
    }
}

impl Denoiser {
    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Plain forward pass with optional per-site replacement values.
    ///
    /// Taps report the value actually consumed at each requested site, in
    /// forward order.
    pub fn forward(
        &self,
        state: &LatentState,
        ctx: StepContext,
        overrides: &BTreeMap<SiteId, Matrix>,
        tap_request: &[SiteId],
    ) -> Result<(Matrix, Vec<SiteTap>)> {
        if let Some(site) = overrides.keys().find(|s| s.step_index != ctx.step_index) {
            return Err(Error::SiteStepMismatch {
                site: *site,
                step: ctx.step_index,
            });
        }
        self.forward_with(state, ctx, tap_request, &mut |input| {
            Ok(match overrides.get(&input.site) {
                Some(v) => v.clone(),
                None => input.compute_fresh(),
            })
        })
    }

    /// Forward pass where `hook` supplies the value consumed at every site.
    pub fn forward_with(
        &self,
        state: &LatentState,
        ctx: StepContext,
        tap_request: &[SiteId],
        hook: &mut dyn FnMut(&SiteInput<'_>) -> Result<Matrix>,
    ) -> Result<(Matrix, Vec<SiteTap>)> {
        let cfg = &self.cfg;
        if state.x.shape() != (cfg.n_tokens, cfg.d_model) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: state.x.shape(),
                right: (cfg.n_tokens, cfg.d_model),
            });
        }
        if state.condition_id >= cfg.n_conditions {
            return Err(Error::InvalidConfig {
                key: "condition_id".into(),
                reason: format!("{} out of range 0..{}", state.condition_id, cfg.n_conditions),
            });
        }
        state.x.ensure_finite()?;

        let cond = self.conditioning(ctx.timestep, state.condition_id);
        let mut h = state.x.clone();
        for i in 0..h.rows() {
            for (x, c) in h.row_mut(i).iter_mut().zip(&cond) {
                *x += c;
            }
        }

        let mut taps = Vec::with_capacity(tap_request.len());
        for layer in 0..cfg.n_layers {
            for module in ModuleKind::ALL {
                let site = SiteId::new(ctx.step_index, layer, module);
                let input = SiteInput {
                    site,
                    incoming: &h,
                    denoiser: self,
                };
                let value = hook(&input)?;
                if value.shape() != h.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "site value",
                        left: value.shape(),
                        right: h.shape(),
                    });
                }
                if tap_request.contains(&site) {
                    taps.push(SiteTap {
                        site,
                        value: value.clone(),
                    });
                }
                h.add_assign(&value)?;
            }
        }
        let mut eps = layer_norm(&h).matmul(&self.out_proj)?;
        let prior = (1.0 - ctx.alpha_bar).sqrt();
        for (e, x) in eps.data_mut().iter_mut().zip(state.x.data()) {
            *e += prior * x;
        }
        Ok((eps, taps))
    }

    fn conditioning(&self, timestep: usize, condition_id: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let sin = sinusoidal_embedding(timestep as f64, d);
        let mut out = row_times(&sin, &self.time_proj);
        for (o, c) in out.iter_mut().zip(self.class_embed.row(condition_id)) {
            *o += c;
        }
        out
    }

    fn attention(&self, block: &Block, incoming: &Matrix, mask: &[bool]) -> Matrix {
        let (t, d) = incoming.shape();
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let xn = layer_norm(incoming);
        let keys = xn.matmul(&block.wk).expect("d×d weights");
        let values = xn.matmul(&block.wv).expect("d×d weights");

        let mut out = Matrix::zeros(t, d);
        let mut scores = vec![0.0; t];
        for i in (0..t).filter(|&i| mask[i]) {
            let q = row_times(xn.row(i), &block.wq);
            let mut mixed = vec![0.0; d];
            for hd in 0..heads {
                let span = hd * dh..(hd + 1) * dh;
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys.row(j)[span.clone()];
                    *s = q[span.clone()].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let p = s / denom;
                    for (m, v) in mixed[span.clone()].iter_mut().zip(&values.row(j)[span.clone()]) {
                        *m += p * v;
                    }
                }
            }
            out.row_mut(i).copy_from_slice(&row_times(&mixed, &block.wo));
        }
        out
    }

    fn mlp(&self, block: &Block, incoming: &Matrix, mask: &[bool]) -> Matrix {
        let (t, d) = incoming.shape();
        let mut out = Matrix::zeros(t, d);
        for i in (0..t).filter(|&i| mask[i]) {
            let xn = normalize_row(incoming.row(i));
            let mut hidden = row_times(&xn, &block.w1);
            for v in &mut hidden {
                *v = gelu(*v);
            }
            out.row_mut(i).copy_from_slice(&row_times(&hidden, &block.w2));
        }
        out
    }
}

/// `row · w`, accumulated in the same order as [`Matrix::matmul`].
fn row_times(row: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (k, a) in row.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(w.row(k)) {
            *o += a * b;
        }
    }
    out
}

fn normalize_row(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    row.iter().map(|v| (v - mean) * inv).collect()
}

fn layer_norm(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = normalize_row(m.row(i));
        out.row_mut(i).copy_from_slice(&n);
    }
    out
}

/// tanh approximation of GELU.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// `[sin(t·f_0), …, sin(t·f_{h-1}), cos(t·f_0), …, cos(t·f_{h-1})]` with
/// `h = d/2` and `f_i = 10000^(-i/h)`; an odd trailing channel is zero.
pub fn sinusoidal_embedding(t: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        out[i] = (t * freq).sin();
        out[i + half] = (t * freq).cos();
    }
    out
}
