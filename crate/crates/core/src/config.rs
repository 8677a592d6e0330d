//! Run configuration.
//!
//! The text format is one `section.key = value` assignment per line. Blank
//! lines and anything after `#` are ignored. Every key is optional and falls
//! back to [`RunConfig::default`]; unknown or repeated keys are errors.
//!
//! ```text
//! model.d_model = 32
//! cache.kind = module-interval     # none | module-interval | token-level | distortion
//! calibration.window = 19..12      # reverse step indices, or `none`
//! run.conditions = 0,1,2,3
//! ```
//!
//! [`RunConfig::render`] writes every key in a fixed order; parsing the
//! rendering gives back an equal config.

use std::fmt::Write as _;
use std::path::PathBuf;

use fnv::FnvHasher;
use std::hash::Hasher;

use crate::cache::{CacheKind, CachePolicy, Distortion};
use crate::calibration::{FitParams, PoolingMode, Variant, DEFAULT_EPSILON};
use crate::denoiser::{DenoiserConfig, ModuleKind};
use crate::error::{Error, Result};
use crate::schedule::{build_schedule, NoiseSchedule};
use crate::trajectory::{sample_specs, CalibrationWindow, EstimateOptions, SampleSpec, SiteFilter};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            n_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub window: Option<CalibrationWindow>,
    pub alpha: f64,
    pub variant: Variant,
    pub pooling: PoolingMode,
    pub sites: SiteFilter,
    pub epsilon: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            window: Some(CalibrationWindow { first: 19, last: 12 }),
            alpha: 1.0,
            variant: Variant::Full,
            pooling: PoolingMode::TokenPool,
            sites: SiteFilter::default(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    /// Sample `i` uses seed `seed + i`.
    pub seed: u64,
    pub n_samples: usize,
    /// Sample `i` uses `conditions[i % len]`.
    pub conditions: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 16,
            conditions: (0..8).collect(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub cache: CachePolicy,
    pub calibration: CalibrationConfig,
    pub run: RunSettings,
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        message: message.into(),
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.into(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| syntax(line, format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num(line, key, s.trim()))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(line_no, "expected `section.key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !key.contains('.') {
                return Err(syntax(line_no, format!("key `{key}` lacks a section")));
            }
            if !seen.insert(key.to_string()) {
                return Err(syntax(line_no, format!("duplicate key `{key}`")));
            }
            cfg.set(line_no, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let c = &mut self.cache;
        let k = &mut self.calibration;
        match key {
            "model.d_model" => m.d_model = parse_num(line, key, v)?,
            "model.n_layers" => m.n_layers = parse_num(line, key, v)?,
            "model.n_tokens" => m.n_tokens = parse_num(line, key, v)?,
            "model.n_heads" => m.n_heads = parse_num(line, key, v)?,
            "model.d_mlp" => m.d_mlp = parse_num(line, key, v)?,
            "model.n_conditions" => m.n_conditions = parse_num(line, key, v)?,
            "model.weight_seed" => m.weight_seed = parse_num(line, key, v)?,
            "schedule.t_train" => self.schedule.t_train = parse_num(line, key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse_num(line, key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse_num(line, key, v)?,
            "schedule.n_steps" => self.schedule.n_steps = parse_num(line, key, v)?,
            "cache.kind" => {
                c.kind = CacheKind::parse(v).ok_or_else(|| syntax(line, format!("`{key}`: unknown kind `{v}`")))?
            }
            "cache.interval_n" => c.interval_n = parse_num(line, key, v)?,
            "cache.token_reuse_ratio" => c.token_reuse_ratio = parse_num(line, key, v)?,
            "cache.distortion_scale" => c.distortion.scale = parse_num(line, key, v)?,
            "cache.distortion_angle" => c.distortion.angle = parse_num(line, key, v)?,
            "cache.distortion_shift" => c.distortion.shift = parse_num(line, key, v)?,
            "cache.distortion_growth" => c.distortion.growth = parse_num(line, key, v)?,
            "calibration.window" => {
                k.window = if v == "none" {
                    None
                } else {
                    let (a, b) = v
                        .split_once("..")
                        .ok_or_else(|| syntax(line, format!("`{key}`: expected `first..last` or `none`")))?;
                    Some(CalibrationWindow {
                        first: parse_num(line, key, a.trim())?,
                        last: parse_num(line, key, b.trim())?,
                    })
                }
            }
            "calibration.alpha" => k.alpha = parse_num(line, key, v)?,
            "calibration.variant" => {
                k.variant = Variant::parse(v).ok_or_else(|| syntax(line, format!("`{key}`: unknown variant `{v}`")))?
            }
            "calibration.pooling" => {
                k.pooling =
                    PoolingMode::parse(v).ok_or_else(|| syntax(line, format!("`{key}`: unknown pooling `{v}`")))?
            }
            "calibration.modules" => {
                k.sites.modules = v
                    .split(',')
                    .map(|s| match s.trim() {
                        "attention" => Ok(ModuleKind::Attention),
                        "mlp" => Ok(ModuleKind::Mlp),
                        other => Err(syntax(line, format!("`{key}`: unknown module `{other}`"))),
                    })
                    .collect::<Result<_>>()?
            }
            "calibration.layers" => {
                k.sites.layers = if v == "all" {
                    None
                } else {
                    Some(parse_list(line, key, v)?)
                }
            }
            "calibration.epsilon" => k.epsilon = parse_num(line, key, v)?,
            "run.seed" => self.run.seed = parse_num(line, key, v)?,
            "run.n_samples" => self.run.n_samples = parse_num(line, key, v)?,
            "run.conditions" => self.run.conditions = parse_list(line, key, v)?,
            "run.output_dir" => self.run.output_dir = PathBuf::from(v),
            _ => return Err(syntax(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let schedule = self.build_schedule()?;
        self.cache.validate()?;
        let k = &self.calibration;
        if !(k.alpha >= 0.0 && k.alpha.is_finite()) {
            return Err(invalid("calibration.alpha", format!("must be finite and >= 0, got {}", k.alpha)));
        }
        if !(k.epsilon > 0.0 && k.epsilon.is_finite()) {
            return Err(invalid("calibration.epsilon", format!("must be > 0, got {}", k.epsilon)));
        }
        if let Some(w) = k.window {
            if w.first < w.last || w.first >= schedule.n_steps() {
                return Err(invalid(
                    "calibration.window",
                    format!("{}..{} not within steps {}..0", w.first, w.last, schedule.n_steps() - 1),
                ));
            }
        }
        if k.sites.modules.is_empty() {
            return Err(invalid("calibration.modules", "no modules selected"));
        }
        if let Some(layers) = &k.sites.layers {
            if layers.is_empty() || layers.iter().any(|&l| l >= self.model.n_layers) {
                return Err(invalid(
                    "calibration.layers",
                    format!("layers must be non-empty and below {}", self.model.n_layers),
                ));
            }
        }
        if self.run.n_samples == 0 {
            return Err(invalid("run.n_samples", "must be at least 1"));
        }
        if self.run.conditions.is_empty() || self.run.conditions.iter().any(|&c| c >= self.model.n_conditions) {
            return Err(invalid(
                "run.conditions",
                format!("must be non-empty and below {}", self.model.n_conditions),
            ));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        build_schedule(s.t_train, s.beta_start, s.beta_end, s.n_steps)
    }

    pub fn samples(&self) -> Vec<SampleSpec> {
        sample_specs(self.run.seed, self.run.n_samples, &self.run.conditions)
    }

    pub fn fit_params(&self) -> FitParams {
        FitParams {
            alpha: self.calibration.alpha,
            variant: self.calibration.variant,
            epsilon: self.calibration.epsilon,
        }
    }

    pub fn estimate_options(&self) -> EstimateOptions {
        EstimateOptions {
            window: self.calibration.window,
            sites: self.calibration.sites.clone(),
            fit: self.fit_params(),
            pooling: self.calibration.pooling,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_text(&render_policy_sections(&self.model, &self.schedule, &self.cache))
    }

    pub fn render(&self) -> String {
        let mut out = render_policy_sections(&self.model, &self.schedule, &self.cache);
        let k = &self.calibration;
        let window = match k.window {
            Some(w) => format!("{}..{}", w.first, w.last),
            None => "none".into(),
        };
        let modules: Vec<&str> = k.sites.modules.iter().map(|m| m.name()).collect();
        let layers = match &k.sites.layers {
            Some(l) => join(l),
            None => "all".into(),
        };
        let lines = [
            ("calibration.window", window),
            ("calibration.alpha", k.alpha.to_string()),
            ("calibration.variant", k.variant.name().into()),
            ("calibration.pooling", k.pooling.name().into()),
            ("calibration.modules", modules.join(",")),
            ("calibration.layers", layers),
            ("calibration.epsilon", k.epsilon.to_string()),
            ("run.seed", self.run.seed.to_string()),
            ("run.n_samples", self.run.n_samples.to_string()),
            ("run.conditions", join(&self.run.conditions)),
            ("run.output_dir", self.run.output_dir.display().to_string()),
        ];
        for (key, value) in lines {
            writeln!(out, "{key} = {value}").unwrap();
        }
        out
    }
}

/// Canonical text of the parts of a config a calibration pack depends on.
fn render_policy_sections(model: &DenoiserConfig, schedule: &ScheduleConfig, cache: &CachePolicy) -> String {
    let Distortion {
        scale,
        angle,
        shift,
        growth,
    } = cache.distortion;
    let lines = [
        ("model.d_model", model.d_model.to_string()),
        ("model.n_layers", model.n_layers.to_string()),
        ("model.n_tokens", model.n_tokens.to_string()),
        ("model.n_heads", model.n_heads.to_string()),
        ("model.d_mlp", model.d_mlp.to_string()),
        ("model.n_conditions", model.n_conditions.to_string()),
        ("model.weight_seed", model.weight_seed.to_string()),
        ("schedule.t_train", schedule.t_train.to_string()),
        ("schedule.beta_start", schedule.beta_start.to_string()),
        ("schedule.beta_end", schedule.beta_end.to_string()),
        ("schedule.n_steps", schedule.n_steps.to_string()),
        ("cache.kind", cache.kind.name().into()),
        ("cache.interval_n", cache.interval_n.to_string()),
        ("cache.token_reuse_ratio", cache.token_reuse_ratio.to_string()),
        ("cache.distortion_scale", scale.to_string()),
        ("cache.distortion_angle", angle.to_string()),
        ("cache.distortion_shift", shift.to_string()),
        ("cache.distortion_growth", growth.to_string()),
    ];
    let mut out = String::new();
    for (key, value) in lines {
        writeln!(out, "{key} = {value}").unwrap();
    }
    out
}

/// 64-bit FNV-1a.
fn fingerprint_text(text: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(text.as_bytes());
    h.finish()
}

/// Fingerprint of (model, schedule, cache policy).
pub fn policy_fingerprint(model: &DenoiserConfig, schedule: &NoiseSchedule, cache: &CachePolicy) -> u64 {
    let schedule = ScheduleConfig {
        t_train: schedule.t_train,
        beta_start: schedule.beta_start,
        beta_end: schedule.beta_end,
        n_steps: schedule.n_steps(),
    };
    fingerprint_text(&render_policy_sections(model, &schedule, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn minimal_document() {
        let cfg = RunConfig::parse("cache.kind = none\nrun.seed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.cache.kind, CacheKind::None);
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.model, DenoiserConfig::default());
    }

    #[test]
    fn negative_alpha_names_key() {
        let err = RunConfig::parse("calibration.alpha = -1").unwrap_err();
        match err {
            Error::InvalidConfig { key, .. } => assert_eq!(key, "calibration.alpha"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = RunConfig::parse("model.d_model = 32\nbogus line\n").unwrap_err();
        assert!(matches!(err, Error::Syntax { line: 2, .. }));
        let err = RunConfig::parse("\n\nmodel.colour = red").unwrap_err();
        assert!(matches!(err, Error::Syntax { line: 3, .. }));
        assert!(err.to_string().contains("unknown key"));
        let err = RunConfig::parse("model.d_model = 32\nmodel.d_model = 16").unwrap_err();
        assert!(matches!(err, Error::Syntax { line: 2, .. }));
        let err = RunConfig::parse("model.d_model = many").unwrap_err();
        assert!(matches!(err, Error::Syntax { line: 1, .. }));
    }

    #[test]
    fn range_violations() {
        for (doc, key) in [
            ("calibration.window = 25..12", "calibration.window"),
            ("calibration.window = 10..12", "calibration.window"),
            ("cache.interval_n = 1", "cache.interval_n"),
            ("run.conditions = 0,9", "run.conditions"),
            ("calibration.layers = 6", "calibration.layers"),
            ("model.n_heads = 5", "model.n_heads"),
            ("schedule.n_steps = 2000", "schedule.n_steps"),
            ("calibration.epsilon = 0", "calibration.epsilon"),
        ] {
            match RunConfig::parse(doc).unwrap_err() {
                Error::InvalidConfig { key: k, .. } => assert_eq!(k, key, "{doc}"),
                other => panic!("{doc}: {other}"),
            }
        }
    }

    #[test]
    fn render_round_trips_default() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn fingerprint_tracks_policy_only() {
        let base = RunConfig::default();
        let mut other = base.clone();
        other.calibration.alpha = 0.5;
        other.run.seed = 4;
        assert_eq!(base.fingerprint(), other.fingerprint());
        other.cache.interval_n = 3;
        assert_ne!(base.fingerprint(), other.fingerprint());
        let schedule = base.build_schedule().unwrap();
        assert_eq!(base.fingerprint(), policy_fingerprint(&base.model, &schedule, &base.cache));
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            alpha in 0.0f64..4.0,
            seed in any::<u64>(),
            n in 1usize..40,
            interval in 2usize..6,
            kind in 0usize..4,
            ratio in 0.01f64..0.99,
            beta_start in 1e-5f64..1e-3,
            window in prop::option::of((0usize..20, 0usize..20)),
            layers in prop::option::of(prop::collection::vec(0usize..6, 1..4)),
            eps in 1e-12f64..1e-3,
        ) {
            let mut cfg = RunConfig::default();
            cfg.calibration.alpha = alpha;
            cfg.calibration.epsilon = eps;
            cfg.run.seed = seed;
            cfg.run.n_samples = n;
            cfg.cache.interval_n = interval;
            cfg.cache.kind = [CacheKind::None, CacheKind::ModuleInterval, CacheKind::TokenLevel, CacheKind::Distortion][kind];
            cfg.cache.token_reuse_ratio = ratio;
            cfg.schedule.beta_start = beta_start;
            cfg.calibration.window = window.map(|(a, b)| CalibrationWindow { first: a.max(b), last: a.min(b) });
            cfg.calibration.sites.layers = layers;
            cfg.calibration.pooling = PoolingMode::Mixed;
            cfg.calibration.variant = Variant::ScaleShift;
            prop_assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
        }
    }
}
