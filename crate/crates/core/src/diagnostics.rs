//! Run comparison, analytical FLOPs accounting and the within-label
//! dispersion diagnostic.

use std::collections::BTreeMap;

use crate::cache::{plan_step, CacheKind, CachePolicy};
use crate::denoiser::{DenoiserConfig, ModuleKind, SiteId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::trajectory::{CalibrationPack, RunRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SiteDeviation {
    pub sample: usize,
    pub site: SiteId,
    pub mismatch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    /// `sqrt(Σ_i ‖x_i − x_i^full‖² / Σ_i ‖x_i^full‖²)` over the samples.
    pub endpoint_rel_dev: f64,
    /// `(step_index, relative deviation)` after each step, when both runs
    /// recorded latents.
    pub per_step: Vec<(usize, f64)>,
    /// Direct mismatch at every site both runs logged.
    pub per_site: Vec<SiteDeviation>,
}

fn relative_gap(method: &[Matrix], full: &[Matrix]) -> Result<f64> {
    if method.len() != full.len() {
        return Err(Error::RunMismatch(format!(
            "{} samples vs {} in the full run",
            method.len(),
            full.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (m, f) in method.iter().zip(full) {
        num += m.sub(f)?.frobenius_norm().powi(2);
        den += f.frobenius_norm().powi(2);
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

pub fn deviation(full: &RunRecord, method: &RunRecord) -> Result<DeviationReport> {
    let endpoint_rel_dev = relative_gap(&method.endpoints, &full.endpoints)?;

    let mut per_step = Vec::new();
    if !full.latents.is_empty() && !method.latents.is_empty() {
        if full.latents.len() != method.latents.len() || full.steps.len() != method.steps.len() {
            return Err(Error::RunMismatch("runs cover different numbers of steps".into()));
        }
        for ((m, f), log) in method.latents.iter().zip(&full.latents).zip(&method.steps) {
            per_step.push((log.step_index, relative_gap(m, f)?));
        }
    }

    let mut per_site = Vec::new();
    for (i, (m, f)) in method.site_values.iter().zip(&full.site_values).enumerate() {
        for (site, value) in m {
            if let Some(reference) = f.get(site) {
                per_site.push(SiteDeviation {
                    sample: i,
                    site: *site,
                    mismatch: value.sub(reference)?.frobenius_norm(),
                });
            }
        }
    }

    Ok(DeviationReport {
        endpoint_rel_dev,
        per_step,
        per_site,
    })
}

/// Per-trajectory cost under the analytical model. Multiply-adds count as two
/// FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsReport {
    pub fresh_steps: u64,
    pub cached_steps: u64,
    /// Modules computed in full.
    pub fresh_module_flops: u64,
    /// Work done at cached sites: zero for output reuse, the partial
    /// recomputation for token-level reuse.
    pub cached_module_flops: u64,
    pub calibration_applications: u64,
    pub calibration_flops: u64,
    pub total_flops: u64,
    /// Cost of the same schedule with every module fresh.
    pub full_flops: u64,
}

impl FlopsReport {
    /// Module FLOPs relative to full computation, calibration excluded.
    pub fn module_ratio(&self) -> f64 {
        (self.fresh_module_flops + self.cached_module_flops) as f64 / self.full_flops as f64
    }

    pub fn total_ratio(&self) -> f64 {
        self.total_flops as f64 / self.full_flops as f64
    }
}

/// `8·T·d² + 4·T²·d` multiply-adds: Q/K/V/output projections plus scores and
/// weighted sum.
pub fn attention_macs(cfg: &DenoiserConfig) -> u64 {
    let (t, d) = (cfg.n_tokens as u64, cfg.d_model as u64);
    8 * t * d * d + 4 * t * t * d
}

pub fn mlp_macs(cfg: &DenoiserConfig) -> u64 {
    4 * cfg.n_tokens as u64 * cfg.d_model as u64 * cfg.d_mlp as u64
}

/// Recomputing `k` of `T` token rows of attention: K and V for every token,
/// Q and the output projection for `k` rows, scores and weighted sum for `k`
/// queries.
pub fn partial_attention_macs(cfg: &DenoiserConfig, k: u64) -> u64 {
    let (t, d) = (cfg.n_tokens as u64, cfg.d_model as u64);
    2 * t * d * d + 2 * k * d * d + 2 * k * t * d
}

pub fn partial_mlp_macs(cfg: &DenoiserConfig, k: u64) -> u64 {
    2 * k * cfg.d_model as u64 * cfg.d_mlp as u64
}

/// `T·(d² + 2d)`: the rotation matmul and two mean shifts over every row.
pub fn calibration_macs(cfg: &DenoiserConfig) -> u64 {
    let d = cfg.d_model as u64;
    cfg.n_tokens as u64 * (d * d + 2 * d)
}

/// Operators of `pack` count only at steps the policy caches, since those are
/// the only places they are applied.
pub fn count_flops(cfg: &DenoiserConfig, n_steps: usize, policy: &CachePolicy, pack: Option<&CalibrationPack>) -> FlopsReport {
    let layers = cfg.n_layers as u64;
    let per_step = layers * (attention_macs(cfg) + mlp_macs(cfg));
    let cached_step_macs = match policy.kind {
        CacheKind::None | CacheKind::ModuleInterval => 0,
        CacheKind::TokenLevel => {
            let k = policy.fresh_token_count(cfg.n_tokens) as u64;
            layers * (partial_attention_macs(cfg, k) + partial_mlp_macs(cfg, k))
        }
        // the synthetic policy evaluates the module before distorting it
        CacheKind::Distortion => per_step,
    };

    let mut fresh_steps = 0;
    let mut applications = 0;
    for step in 0..n_steps {
        if plan_step(policy, step, n_steps).fresh {
            fresh_steps += 1;
        } else if let Some(pack) = pack {
            applications += pack.operators.keys().filter(|s| s.step_index == step).count() as u64;
        }
    }
    let cached_steps = n_steps as u64 - fresh_steps;

    let fresh_module_flops = 2 * fresh_steps * per_step;
    let cached_module_flops = 2 * cached_steps * cached_step_macs;
    let calibration_flops = 2 * applications * calibration_macs(cfg);
    FlopsReport {
        fresh_steps,
        cached_steps,
        fresh_module_flops,
        cached_module_flops,
        calibration_applications: applications,
        calibration_flops,
        total_flops: fresh_module_flops + cached_module_flops + calibration_flops,
        full_flops: 2 * n_steps as u64 * per_step,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteDispersion {
    pub condition: usize,
    pub site: SiteId,
    /// RMS over (token, channel) of the across-sample standard deviation.
    pub within_std_rms: f64,
    /// RMS over (token, channel) of the across-sample mean.
    pub class_mean_rms: f64,
    /// `within / mean`; `+∞` when the mean vanishes but the spread does not,
    /// `0` when both vanish.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDispersion {
    pub condition: usize,
    pub step_index: usize,
    /// Share of layers whose ratio exceeds 1, per module and over both.
    pub attention_fraction: f64,
    pub mlp_fraction: f64,
    pub combined_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DispersionReport {
    pub sites: Vec<SiteDispersion>,
    pub steps: Vec<StepDispersion>,
}

pub fn dispersion_ratio(within: f64, mean: f64) -> f64 {
    if mean > 0.0 {
        within / mean
    } else if within > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

fn site_dispersion(values: &[&Matrix]) -> Result<(f64, f64)> {
    let shape = values[0].shape();
    if let Some(bad) = values.iter().find(|v| v.shape() != shape) {
        return Err(Error::ShapeMismatch {
            op: "within_label_dispersion",
            left: shape,
            right: bad.shape(),
        });
    }
    let n = values.len() as f64;
    let len = values[0].data().len();
    let (mut var_sum, mut mean_sum) = (0.0, 0.0);
    // offsets from the first sample keep identical samples at exactly zero
    for j in 0..len {
        let origin = values[0].data()[j];
        let offset = values.iter().map(|v| v.data()[j] - origin).sum::<f64>() / n;
        let var = values.iter().map(|v| (v.data()[j] - origin - offset).powi(2)).sum::<f64>() / n;
        let mean = origin + offset;
        var_sum += var;
        mean_sum += mean * mean;
    }
    Ok(((var_sum / len as f64).sqrt(), (mean_sum / len as f64).sqrt()))
}

/// Dispersion of site values within each condition. `samples` pairs each
/// sample's condition with its logged site values; only sites logged by every
/// sample of a group are reported. Standard deviations divide by the sample
/// count.
pub fn within_label_dispersion(samples: &[(usize, &BTreeMap<SiteId, Matrix>)]) -> Result<DispersionReport> {
    if samples.is_empty() {
        return Err(Error::EmptyGroup("no samples".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&BTreeMap<SiteId, Matrix>>> = BTreeMap::new();
    for (c, values) in samples {
        groups.entry(*c).or_default().push(values);
    }

    let mut report = DispersionReport::default();
    for (&condition, members) in &groups {
        if members.len() < 2 {
            return Err(Error::DispersionUndefined { condition });
        }
        let mut per_step: BTreeMap<usize, [(usize, usize); 2]> = BTreeMap::new();
        for site in members[0].keys() {
            let values: Option<Vec<&Matrix>> = members.iter().map(|m| m.get(site)).collect();
            let Some(values) = values else { continue };
            let (within, mean) = site_dispersion(&values)?;
            let ratio = dispersion_ratio(within, mean);
            let counts = &mut per_step.entry(site.step_index).or_default()[site.module.code() as usize];
            counts.1 += 1;
            if ratio > 1.0 {
                counts.0 += 1;
            }
            report.sites.push(SiteDispersion {
                condition,
                site: *site,
                within_std_rms: within,
                class_mean_rms: mean,
                ratio,
            });
        }
        for (step_index, [attn, mlp]) in per_step.into_iter().rev() {
            let frac = |(above, total): (usize, usize)| if total == 0 { 0.0 } else { above as f64 / total as f64 };
            report.steps.push(StepDispersion {
                condition,
                step_index,
                attention_fraction: frac(attn),
                mlp_fraction: frac(mlp),
                combined_fraction: frac((attn.0 + mlp.0, attn.1 + mlp.1)),
            });
        }
    }
    Ok(report)
}

/// Layer-averaged RMS curves for one condition: `(step_index, module,
/// mean within-std RMS, mean class-mean RMS)` in reverse step order.
pub fn layer_averages(report: &DispersionReport, condition: usize) -> Vec<(usize, ModuleKind, f64, f64)> {
    let mut acc: BTreeMap<(usize, ModuleKind), (f64, f64, usize)> = BTreeMap::new();
    for s in report.sites.iter().filter(|s| s.condition == condition) {
        let e = acc.entry((s.site.step_index, s.site.module)).or_default();
        e.0 += s.within_std_rms;
        e.1 += s.class_mean_rms;
        e.2 += 1;
    }
    acc.into_iter()
        .rev()
        .map(|((step, module), (w, m, n))| (step, module, w / n as f64, m / n as f64))
        .collect()
}
