//! Trajectory histories and the offline prior-estimation loop.
//!
//! Three histories advance in lockstep over a batch of representative
//! samples:
//!
//! * **full**: every module freshly computed;
//! * **cache-side**: the cache policy alone, no calibration;
//! * **corrected**: the cache policy with fitted operators applied at
//!   consumption time.
//!
//! [`Runner::estimate_priors`] walks the schedule once. At each step that has
//! calibration sites it records full-computation values, probes the
//! corrected history without committing, fits one operator per site, and
//! only then commits a calibrated advance. Later operators are therefore
//! fitted on exactly the history they will see at inference, which is what
//! makes [`Runner::run_calibrated_inference`] on the estimation samples
//! reproduce the corrected endpoints bit for bit.
//!
//! Operators for all sites of a step are fitted from a single probe pass; an
//! operator is never applied to later sites of its own step during probing.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::cache::{cache_side_value_traced, encode_matrix, plan_step, CacheKind, CachePolicy, CacheStore};
use crate::calibration::{apply, fit, CalibrationOperator, FitParams, PairedBatch, PoolInput, PoolingMode, Variant};
use crate::config::policy_fingerprint;
use crate::denoiser::{Denoiser, LatentState, ModuleKind, SiteId, SiteTap};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;
use crate::schedule::{ddim_step, init_latent, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryMode {
    Full,
    CacheSide,
    Corrected,
}

impl HistoryMode {
    fn name(self) -> &'static str {
        match self {
            HistoryMode::Full => "full",
            HistoryMode::CacheSide => "cache-side",
            HistoryMode::Corrected => "corrected",
        }
    }
}

/// One representative sample: the seed of its initial noise and its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpec {
    pub seed: u64,
    pub condition: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleState {
    pub latent: LatentState,
    pub store: Option<CacheStore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryHistory {
    mode: HistoryMode,
    remaining: usize,
    samples: Vec<SampleState>,
}

impl TrajectoryHistory {
    pub fn init(mode: HistoryMode, samples: &[SampleSpec], denoiser: &Denoiser, schedule: &NoiseSchedule) -> Result<Self> {
        let cfg = denoiser.config();
        let samples = samples
            .iter()
            .map(|s| {
                let latent = init_latent(&mut SeededRng::new(s.seed), cfg, s.condition)?;
                let store = match mode {
                    HistoryMode::Full => None,
                    _ => Some(CacheStore::new(cfg.n_layers)),
                };
                Ok(SampleState { latent, store })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            remaining: schedule.n_steps(),
            samples,
        })
    }

    pub fn mode(&self) -> HistoryMode {
        self.mode
    }

    /// Reverse index of the next step to run, `None` once exhausted.
    pub fn cursor(&self) -> Option<usize> {
        self.remaining.checked_sub(1)
    }

    pub fn samples(&self) -> &[SampleState] {
        &self.samples
    }

    pub fn latents(&self) -> Vec<Matrix> {
        self.samples.iter().map(|s| s.latent.x.clone()).collect()
    }

    /// Canonical byte encoding of the whole history.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(self.mode as u8);
        out.extend_from_slice(&(self.remaining as u32).to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.latent.condition_id as u32).to_le_bytes());
            encode_matrix(&s.latent.x, &mut out);
            match &s.store {
                None => out.push(0),
                Some(store) => {
                    out.push(1);
                    store.encode(&mut out);
                }
            }
        }
        out
    }

    fn expect_mode(&self, allowed: &[HistoryMode], expected: &'static str) -> Result<()> {
        if allowed.contains(&self.mode) {
            Ok(())
        } else {
            Err(Error::WrongMode {
                expected,
                found: self.mode.name(),
            })
        }
    }
}

/// Inclusive range of reverse step indices, `first >= last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationWindow {
    pub first: usize,
    pub last: usize,
}

impl CalibrationWindow {
    pub fn contains(&self, step_index: usize) -> bool {
        step_index <= self.first && step_index >= self.last
    }
}

/// Which (layer, module) sites of a calibrated step receive operators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteFilter {
    pub modules: Vec<ModuleKind>,
    /// `None` selects every layer.
    pub layers: Option<Vec<usize>>,
}

impl Default for SiteFilter {
    fn default() -> Self {
        Self {
            modules: ModuleKind::ALL.to_vec(),
            layers: None,
        }
    }
}

impl SiteFilter {
    pub fn accepts(&self, site: &SiteId) -> bool {
        self.modules.contains(&site.module) && self.layers.as_ref().is_none_or(|l| l.contains(&site.layer))
    }
}

/// Fitted operators plus the configuration they are valid for.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPack {
    pub fingerprint: u64,
    pub window: Option<CalibrationWindow>,
    pub pooling: PoolingMode,
    pub alpha: f64,
    pub variant: Variant,
    pub operators: BTreeMap<SiteId, CalibrationOperator>,
}

impl CalibrationPack {
    pub fn empty(fingerprint: u64, window: Option<CalibrationWindow>, pooling: PoolingMode, params: &FitParams) -> Self {
        Self {
            fingerprint,
            window,
            pooling,
            alpha: params.alpha,
            variant: params.variant,
            operators: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.operators.values().next().map(CalibrationOperator::dim)
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    fn has_step(&self, step_index: usize) -> bool {
        self.operators
            .range(SiteId::new(step_index, 0, ModuleKind::Attention)..)
            .next()
            .is_some_and(|(s, _)| s.step_index == step_index)
    }

    /// Same operators with a different strength.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.alpha = alpha;
        for op in out.operators.values_mut() {
            op.alpha = alpha;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub window: Option<CalibrationWindow>,
    pub sites: SiteFilter,
    pub fit: FitParams,
    pub pooling: PoolingMode,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            window: Some(CalibrationWindow { first: 19, last: 12 }),
            sites: SiteFilter::default(),
            fit: FitParams::default(),
            pooling: PoolingMode::TokenPool,
        }
    }
}

/// Result of prior estimation: the pack and the endpoints of the histories
/// advanced while fitting it.
#[derive(Debug, Clone)]
pub struct PriorEstimate {
    pub pack: CalibrationPack,
    pub full_endpoints: Vec<Matrix>,
    /// Corrected history endpoints for TCC, uncorrected cache-side endpoints
    /// for the one-shot baseline.
    pub cache_endpoints: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RecordOptions {
    pub latents: bool,
    pub site_values: bool,
    /// Advance a full-computation history alongside and log per-site
    /// mismatches against it.
    pub mismatch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteMismatch {
    pub sample: usize,
    pub site: SiteId,
    pub calibrated: bool,
    pub mismatch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step_index: usize,
    pub fresh: bool,
    pub calibrated_sites: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub endpoints: Vec<Matrix>,
    /// `latents[k][i]`: sample `i` after the `k`-th executed step.
    pub latents: Vec<Vec<Matrix>>,
    /// Per sample, consumed value at every site.
    pub site_values: Vec<BTreeMap<SiteId, Matrix>>,
    pub steps: Vec<StepLog>,
    pub mismatch: Vec<SiteMismatch>,
    /// Operator applications per sample.
    pub calibrated_applications: usize,
}

/// Bundles the model, schedule and cache policy a set of histories runs
/// under.
pub struct Runner<'a> {
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub policy: &'a CachePolicy,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl<'a> Runner<'a> {
    /// `threads == 0` runs samples sequentially on the calling thread.
    pub fn new(denoiser: &'a Denoiser, schedule: &'a NoiseSchedule, policy: &'a CachePolicy, threads: usize) -> Result<Self> {
        policy.validate()?;
        let pool = if threads == 0 {
            None
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidConfig {
                    key: "TCC_LAB_THREADS".into(),
                    reason: e.to_string(),
                })?;
            Some(Arc::new(pool))
        };
        Ok(Self {
            denoiser,
            schedule,
            policy,
            pool,
        })
    }

    pub fn fingerprint(&self) -> u64 {
        policy_fingerprint(self.denoiser.config(), self.schedule, self.policy)
    }

    /// Per-sample map; results are returned in sample order regardless of
    /// thread count.
    fn for_each_sample<T, F>(&self, samples: &mut [SampleState], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut SampleState) -> Result<T> + Sync,
    {
        match &self.pool {
            None => samples.iter_mut().map(f).collect(),
            Some(pool) => pool.install(|| samples.par_iter_mut().map(&f).collect()),
        }
    }

    /// Calibration sites of a step: cached steps inside the window, filtered.
    pub fn calibration_sites(&self, step_index: usize, opts: &EstimateOptions) -> Vec<SiteId> {
        let in_window = opts.window.is_some_and(|w| w.contains(step_index));
        if !in_window || self.policy.kind == CacheKind::None || plan_step(self.policy, step_index, self.schedule.n_steps()).fresh {
            return Vec::new();
        }
        self.denoiser
            .config()
            .sites_at(step_index)
            .into_iter()
            .filter(|s| opts.sites.accepts(s))
            .collect()
    }

    fn ensure_fingerprint(&self, pack: &CalibrationPack) -> Result<()> {
        let expected = self.fingerprint();
        if pack.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: pack.fingerprint,
            });
        }
        Ok(())
    }

    fn step_sample_full(&self, sample: &mut SampleState, step_index: usize, taps: &[SiteId]) -> Result<Vec<SiteTap>> {
        let ctx = self.schedule.context(step_index);
        let (eps, taps) = self.denoiser.forward(&sample.latent, ctx, &BTreeMap::new(), taps)?;
        let (abar_t, abar_prev) = self.schedule.alphas(step_index);
        sample.latent.x = ddim_step(&sample.latent.x, &eps, abar_t, abar_prev)?;
        Ok(taps)
    }

    /// One cache-side step for one sample. Operators in `ops` for this step
    /// are applied to cached values at consumption; the store keeps the raw
    /// cache-side values. Returns the taps and the number of operator
    /// applications.
    fn step_sample_cached(
        &self,
        sample: &mut SampleState,
        step_index: usize,
        ops: Option<&BTreeMap<SiteId, CalibrationOperator>>,
        taps: &[SiteId],
    ) -> Result<(Vec<SiteTap>, usize)> {
        let plan = plan_step(self.policy, step_index, self.schedule.n_steps());
        let ctx = self.schedule.context(step_index);
        let store = sample.store.as_mut().ok_or(Error::WrongMode {
            expected: "cache-side or corrected",
            found: "full",
        })?;
        let mut applied = 0;
        let (eps, taps) = self.denoiser.forward_with(&sample.latent, ctx, taps, &mut |input| {
            if plan.fresh {
                let v = input.compute_fresh();
                store.record_fresh(&input.site, input.incoming, &v);
                return Ok(v);
            }
            let (raw, reference) = cache_side_value_traced(self.policy, store, input)?;
            let consumed = match ops.and_then(|o| o.get(&input.site)) {
                Some(op) => {
                    applied += 1;
                    apply(op, &raw)?
                }
                None => raw,
            };
            if let Some(reference) = reference {
                store.record_consumed_shift(&consumed, &reference)?;
            }
            Ok(consumed)
        })?;
        store.finish_step();
        let (abar_t, abar_prev) = self.schedule.alphas(step_index);
        sample.latent.x = ddim_step(&sample.latent.x, &eps, abar_t, abar_prev)?;
        Ok((taps, applied))
    }

    /// One fresh step of the full-computation history, returning per-sample
    /// taps at `tap_sites`.
    pub fn advance_full(&self, hist: &mut TrajectoryHistory, tap_sites: &[SiteId]) -> Result<Vec<Vec<SiteTap>>> {
        hist.expect_mode(&[HistoryMode::Full], "full")?;
        let step = hist.cursor().ok_or(Error::CursorExhausted)?;
        let taps = self.for_each_sample(&mut hist.samples, |s| self.step_sample_full(s, step, tap_sites))?;
        hist.remaining -= 1;
        Ok(taps)
    }

    /// Runs the cache-side step from a copy of `hist` and reports the values
    /// consumed at `tap_sites`. `hist` itself is not modified.
    pub fn probe_advance(
        &self,
        hist: &TrajectoryHistory,
        pack_so_far: &CalibrationPack,
        tap_sites: &[SiteId],
    ) -> Result<Vec<Vec<SiteTap>>> {
        hist.expect_mode(&[HistoryMode::Corrected, HistoryMode::CacheSide], "corrected")?;
        self.ensure_fingerprint(pack_so_far)?;
        let step = hist.cursor().ok_or(Error::CursorExhausted)?;
        let mut scratch = hist.samples.clone();
        let out = self.for_each_sample(&mut scratch, |s| {
            self.step_sample_cached(s, step, Some(&pack_so_far.operators), tap_sites)
                .map(|(t, _)| t)
        })?;
        Ok(out)
    }

    /// Commits one cache-side step, applying the pack's operators for this
    /// step. Returns per-sample taps and the per-sample application count.
    pub fn calibrated_advance(
        &self,
        hist: &mut TrajectoryHistory,
        pack: &CalibrationPack,
        tap_sites: &[SiteId],
    ) -> Result<(Vec<Vec<SiteTap>>, usize)> {
        hist.expect_mode(&[HistoryMode::Corrected, HistoryMode::CacheSide], "corrected")?;
        let step = hist.cursor().ok_or(Error::CursorExhausted)?;
        let cached = self.policy.kind != CacheKind::None && !plan_step(self.policy, step, self.schedule.n_steps()).fresh;
        if cached && pack.window.is_some_and(|w| w.contains(step)) && !pack.has_step(step) {
            return Err(Error::MissingOperator(SiteId::new(step, 0, ModuleKind::Attention)));
        }
        let results = self.for_each_sample(&mut hist.samples, |s| {
            self.step_sample_cached(s, step, Some(&pack.operators), tap_sites)
        })?;
        hist.remaining -= 1;
        let applied = results.first().map_or(0, |r| r.1);
        Ok((results.into_iter().map(|r| r.0).collect(), applied))
    }

    fn fit_step(
        &self,
        sites: &[SiteId],
        samples: &[SampleSpec],
        full_taps: &[Vec<SiteTap>],
        cache_taps: &[Vec<SiteTap>],
        opts: &EstimateOptions,
    ) -> Result<Vec<CalibrationOperator>> {
        sites
            .iter()
            .enumerate()
            .map(|(k, site)| {
                fn collect<'t>(taps: &'t [Vec<SiteTap>], samples: &[SampleSpec], k: usize) -> Vec<PoolInput<'t>> {
                    taps.iter()
                        .zip(samples)
                        .map(|(t, spec)| PoolInput {
                            condition: spec.condition,
                            value: &t[k].value,
                        })
                        .collect()
                }
                let batch = PairedBatch::from_samples(
                    &collect(full_taps, samples, k),
                    &collect(cache_taps, samples, k),
                    opts.pooling,
                )?;
                fit(*site, &batch.a, &batch.b, &opts.fit)
            })
            .collect()
    }

    /// Offline trajectory-consistent prior estimation.
    pub fn estimate_priors(&self, samples: &[SampleSpec], opts: &EstimateOptions) -> Result<PriorEstimate> {
        self.validate_window(opts)?;
        let mut full = TrajectoryHistory::init(HistoryMode::Full, samples, self.denoiser, self.schedule)?;
        let mut corr = TrajectoryHistory::init(HistoryMode::Corrected, samples, self.denoiser, self.schedule)?;
        let mut pack = CalibrationPack::empty(self.fingerprint(), opts.window, opts.pooling, &opts.fit);

        while let Some(step) = corr.cursor() {
            let sites = self.calibration_sites(step, opts);
            if sites.is_empty() {
                self.advance_full(&mut full, &[])?;
                self.calibrated_advance(&mut corr, &pack, &[])?;
                continue;
            }
            let a = self.advance_full(&mut full, &sites)?;
            let b = self.probe_advance(&corr, &pack, &sites)?;
            for op in self.fit_step(&sites, samples, &a, &b, opts)? {
                pack.operators.insert(op.site, op);
            }
            self.calibrated_advance(&mut corr, &pack, &[])?;
        }

        Ok(PriorEstimate {
            pack,
            full_endpoints: full.latents(),
            cache_endpoints: corr.latents(),
        })
    }

    /// One-shot baseline: every operator is fitted against the uncalibrated
    /// cache-side history.
    pub fn estimate_priors_oneshot(&self, samples: &[SampleSpec], opts: &EstimateOptions) -> Result<PriorEstimate> {
        self.validate_window(opts)?;
        let mut full = TrajectoryHistory::init(HistoryMode::Full, samples, self.denoiser, self.schedule)?;
        let mut cache = TrajectoryHistory::init(HistoryMode::CacheSide, samples, self.denoiser, self.schedule)?;
        let mut pack = CalibrationPack::empty(self.fingerprint(), opts.window, opts.pooling, &opts.fit);
        let uncalibrated = CalibrationPack::empty(pack.fingerprint, None, opts.pooling, &opts.fit);

        while let Some(step) = cache.cursor() {
            let sites = self.calibration_sites(step, opts);
            let a = self.advance_full(&mut full, &sites)?;
            let (b, _) = self.calibrated_advance(&mut cache, &uncalibrated, &sites)?;
            if !sites.is_empty() {
                for op in self.fit_step(&sites, samples, &a, &b, opts)? {
                    pack.operators.insert(op.site, op);
                }
            }
        }

        Ok(PriorEstimate {
            pack,
            full_endpoints: full.latents(),
            cache_endpoints: cache.latents(),
        })
    }

    fn validate_window(&self, opts: &EstimateOptions) -> Result<()> {
        if let Some(w) = opts.window {
            if w.first < w.last || w.first >= self.schedule.n_steps() {
                return Err(Error::InvalidConfig {
                    key: "calibration.window".into(),
                    reason: format!("{}..{} outside schedule of {} steps", w.first, w.last, self.schedule.n_steps()),
                });
            }
        }
        Ok(())
    }

    /// Full-computation sampling.
    pub fn run_full(&self, samples: &[SampleSpec], rec: RecordOptions) -> Result<RunRecord> {
        let mut hist = TrajectoryHistory::init(HistoryMode::Full, samples, self.denoiser, self.schedule)?;
        let mut record = RunRecord {
            site_values: vec![BTreeMap::new(); samples.len()],
            ..RunRecord::default()
        };
        while let Some(step) = hist.cursor() {
            let sites = if rec.site_values {
                self.denoiser.config().sites_at(step)
            } else {
                Vec::new()
            };
            let taps = self.advance_full(&mut hist, &sites)?;
            store_taps(&mut record.site_values, taps);
            record.steps.push(StepLog {
                step_index: step,
                fresh: true,
                calibrated_sites: 0,
            });
            if rec.latents {
                record.latents.push(hist.latents());
            }
        }
        record.endpoints = hist.latents();
        Ok(record)
    }

    /// Cache-accelerated sampling with the pack applied at its sites.
    pub fn run_calibrated_inference(&self, samples: &[SampleSpec], pack: &CalibrationPack, rec: RecordOptions) -> Result<RunRecord> {
        self.ensure_fingerprint(pack)?;
        let mut corr = TrajectoryHistory::init(HistoryMode::Corrected, samples, self.denoiser, self.schedule)?;
        let mut full = if rec.mismatch {
            Some(TrajectoryHistory::init(HistoryMode::Full, samples, self.denoiser, self.schedule)?)
        } else {
            None
        };
        let mut record = RunRecord {
            site_values: vec![BTreeMap::new(); samples.len()],
            ..RunRecord::default()
        };

        while let Some(step) = corr.cursor() {
            let all_sites = self.denoiser.config().sites_at(step);
            let want_taps = rec.site_values || rec.mismatch;
            let tap_sites: &[SiteId] = if want_taps { &all_sites } else { &[] };
            let (taps, applied) = self.calibrated_advance(&mut corr, pack, tap_sites)?;
            record.calibrated_applications += applied;
            record.steps.push(StepLog {
                step_index: step,
                fresh: plan_step(self.policy, step, self.schedule.n_steps()).fresh,
                calibrated_sites: applied,
            });
            if let Some(full) = full.as_mut() {
                let reference = self.advance_full(full, &all_sites)?;
                for (i, (ours, theirs)) in taps.iter().zip(&reference).enumerate() {
                    for (o, t) in ours.iter().zip(theirs) {
                        record.mismatch.push(SiteMismatch {
                            sample: i,
                            site: o.site,
                            calibrated: pack.operators.contains_key(&o.site),
                            mismatch: o.value.sub(&t.value)?.frobenius_norm(),
                        });
                    }
                }
            }
            if rec.site_values {
                store_taps(&mut record.site_values, taps);
            }
            if rec.latents {
                record.latents.push(corr.latents());
            }
        }
        record.endpoints = corr.latents();
        Ok(record)
    }

    /// Cache-accelerated sampling without calibration.
    pub fn run_cached(&self, samples: &[SampleSpec], rec: RecordOptions) -> Result<RunRecord> {
        let pack = CalibrationPack::empty(self.fingerprint(), None, PoolingMode::TokenPool, &FitParams::default());
        self.run_calibrated_inference(samples, &pack, rec)
    }
}

fn store_taps(dest: &mut [BTreeMap<SiteId, Matrix>], taps: Vec<Vec<SiteTap>>) {
    for (d, t) in dest.iter_mut().zip(taps) {
        for tap in t {
            d.insert(tap.site, tap.value);
        }
    }
}

/// `n` samples with seeds `base, base+1, …` and conditions cycled from
/// `conditions`.
pub fn sample_specs(base_seed: u64, n: usize, conditions: &[usize]) -> Vec<SampleSpec> {
    (0..n)
        .map(|i| SampleSpec {
            seed: base_seed.wrapping_add(i as u64),
            condition: conditions[i % conditions.len()],
        })
        .collect()
}
