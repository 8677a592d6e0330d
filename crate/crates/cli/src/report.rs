//! CSV writers. Floats use Rust's shortest round-trip formatting, so equal
//! runs produce byte-identical files.

use std::path::Path;

use tcc_lab::config::RunConfig;
use tcc_lab::diagnostics::{DeviationReport, DispersionReport, FlopsReport};
use tcc_lab::linalg::Matrix;
use tcc_lab::trajectory::{CalibrationPack, SampleSpec, StepLog};

type Result<T> = std::result::Result<T, csv::Error>;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path)
}

pub fn write_latents(path: &Path, samples: &[SampleSpec], endpoints: &[Matrix]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["sample", "seed", "condition", "token", "channel", "value"])?;
    for (i, (spec, x)) in samples.iter().zip(endpoints).enumerate() {
        for t in 0..x.rows() {
            for (c, v) in x.row(t).iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    spec.seed.to_string(),
                    spec.condition.to_string(),
                    t.to_string(),
                    c.to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_steps(path: &Path, steps: &[StepLog]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step_index", "fresh", "calibrated_sites"])?;
    for s in steps {
        w.write_record([s.step_index.to_string(), s.fresh.to_string(), s.calibrated_sites.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_deviation_summary(path: &Path, cfg: &RunConfig, calibrated: bool, r: &DeviationReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["cache_kind", "calibrated", "n_samples", "endpoint_rel_dev"])?;
    w.write_record([
        cfg.cache.kind.name().to_string(),
        calibrated.to_string(),
        cfg.run.n_samples.to_string(),
        r.endpoint_rel_dev.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn write_deviation_steps(path: &Path, r: &DeviationReport, calibrated_steps: &[usize]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step_index", "calibrated", "latent_rel_dev"])?;
    for (step, dev) in &r.per_step {
        w.write_record([step.to_string(), calibrated_steps.contains(step).to_string(), dev.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_site_mismatch(path: &Path, r: &DeviationReport, pack: Option<&CalibrationPack>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["sample", "step_index", "layer", "module", "calibrated", "mismatch"])?;
    for s in &r.per_site {
        let calibrated = pack.is_some_and(|p| p.operators.contains_key(&s.site));
        w.write_record([
            s.sample.to_string(),
            s.site.step_index.to_string(),
            s.site.layer.to_string(),
            s.site.module.name().to_string(),
            calibrated.to_string(),
            s.mismatch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_flops(path: &Path, cfg: &RunConfig, r: &FlopsReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "cache_kind",
        "n_steps",
        "fresh_steps",
        "cached_steps",
        "fresh_module_flops",
        "cached_module_flops",
        "calibration_applications",
        "calibration_flops",
        "total_flops",
        "full_flops",
        "module_ratio",
        "total_ratio",
    ])?;
    w.write_record([
        cfg.cache.kind.name().to_string(),
        cfg.schedule.n_steps.to_string(),
        r.fresh_steps.to_string(),
        r.cached_steps.to_string(),
        r.fresh_module_flops.to_string(),
        r.cached_module_flops.to_string(),
        r.calibration_applications.to_string(),
        r.calibration_flops.to_string(),
        r.total_flops.to_string(),
        r.full_flops.to_string(),
        r.module_ratio().to_string(),
        r.total_ratio().to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn write_dispersion_sites(path: &Path, r: &DispersionReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["condition", "step_index", "layer", "module", "within_std_rms", "class_mean_rms", "ratio"])?;
    for s in &r.sites {
        w.write_record([
            s.condition.to_string(),
            s.site.step_index.to_string(),
            s.site.layer.to_string(),
            s.site.module.name().to_string(),
            s.within_std_rms.to_string(),
            s.class_mean_rms.to_string(),
            s.ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dispersion_steps(path: &Path, r: &DispersionReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["condition", "step_index", "attention_fraction", "mlp_fraction", "combined_fraction"])?;
    for s in &r.steps {
        w.write_record([
            s.condition.to_string(),
            s.step_index.to_string(),
            s.attention_fraction.to_string(),
            s.mlp_fraction.to_string(),
            s.combined_fraction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct SweepRow {
    pub alpha: f64,
    pub tcc: f64,
    pub oneshot: f64,
    pub cache: f64,
    pub operators: usize,
    pub first_step_identical: bool,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "alpha",
        "tcc_endpoint_rel_dev",
        "oneshot_endpoint_rel_dev",
        "cache_endpoint_rel_dev",
        "operators",
        "first_step_identical",
    ])?;
    for r in rows {
        w.write_record([
            r.alpha.to_string(),
            r.tcc.to_string(),
            r.oneshot.to_string(),
            r.cache.to_string(),
            r.operators.to_string(),
            r.first_step_identical.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
