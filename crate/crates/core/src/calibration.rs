//! Closed-form calibration operators.
//!
//! Given paired full-computation rows `A` and cache-side rows `B`, both are
//! centered by their row means, the cross-covariance `B_cᵀ A_c = U Σ Vᵀ` is
//! decomposed, and
//!
//! ```text
//! R = U Vᵀ
//! s = <A_c, B_c R> / (‖B_c R‖²_F + ε)
//! T(h) = μ_A + s (h − μ_B) R
//! C(h) = h + α (T(h) − h)
//! ```
//!
//! `ScaleShift` fixes `R = I`; `ShiftOnly` additionally fixes `s = 1`.

use std::collections::BTreeMap;

use crate::denoiser::SiteId;
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    ScaleShift,
    ShiftOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ScaleShift => "scale-shift",
            Variant::ShiftOnly => "shift-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Variant::Full),
            "scale-shift" => Some(Variant::ScaleShift),
            "shift-only" => Some(Variant::ShiftOnly),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::ScaleShift => 1,
            Variant::ShiftOnly => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Variant::Full),
            1 => Some(Variant::ScaleShift),
            2 => Some(Variant::ShiftOnly),
            _ => None,
        }
    }
}

/// How per-sample site values are reduced to representative rows.
///
/// * `TokenPool`: one row per (condition, token position), averaged over the
///   samples of that condition.
/// * `ClassPool`: one row per condition, the token average of the
///   token-pooled rows.
/// * `Mixed`: the token-pooled rows followed by the class-pooled rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    ClassPool,
    TokenPool,
    Mixed,
}

impl PoolingMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolingMode::ClassPool => "class-pool",
            PoolingMode::TokenPool => "token-pool",
            PoolingMode::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "class-pool" => Some(PoolingMode::ClassPool),
            "token-pool" => Some(PoolingMode::TokenPool),
            "mixed" => Some(PoolingMode::Mixed),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            PoolingMode::ClassPool => 0,
            PoolingMode::TokenPool => 1,
            PoolingMode::Mixed => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PoolingMode::ClassPool),
            1 => Some(PoolingMode::TokenPool),
            2 => Some(PoolingMode::Mixed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    pub alpha: f64,
    pub variant: Variant,
    pub epsilon: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            variant: Variant::Full,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOperator {
    pub site: SiteId,
    pub mu_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub rotation: Matrix,
    pub scale: f64,
    pub alpha: f64,
    pub variant: Variant,
}

impl CalibrationOperator {
    pub fn dim(&self) -> usize {
        self.mu_a.len()
    }

    /// The full transform `T(h) = μ_A + s (h − μ_B) R`, row by row.
    pub fn transform(&self, h: &Matrix) -> Result<Matrix> {
        let d = self.dim();
        if h.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "calibration apply",
                left: h.shape(),
                right: (h.rows(), d),
            });
        }
        let centered = h.sub_row_vector(&self.mu_b);
        let mut out = match self.variant {
            Variant::Full => centered.matmul(&self.rotation)?,
            Variant::ScaleShift | Variant::ShiftOnly => centered,
        };
        for i in 0..out.rows() {
            for (x, m) in out.row_mut(i).iter_mut().zip(&self.mu_a) {
                *x = m + self.scale * *x;
            }
        }
        Ok(out)
    }
}

/// Fits a calibration operator mapping rows of `b` toward rows of `a`.
///
/// A zero cross-covariance (including a single row, or constant `b`) yields
/// `R = I`. The scale is clamped at zero.
pub fn fit(site: SiteId, a: &Matrix, b: &Matrix, params: &FitParams) -> Result<CalibrationOperator> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "fit",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::EmptyGroup("fit needs at least one row".into()));
    }
    a.ensure_finite()?;
    b.ensure_finite()?;
    if !(params.epsilon > 0.0) || !params.alpha.is_finite() {
        return Err(Error::InvalidConfig {
            key: "calibration.epsilon".into(),
            reason: "epsilon must be positive and alpha finite".into(),
        });
    }

    let d = a.cols();
    let mu_a = a.row_mean();
    let mu_b = b.row_mean();
    let a_c = a.sub_row_vector(&mu_a);
    let b_c = b.sub_row_vector(&mu_b);

    let (rotation, scale) = match params.variant {
        Variant::ShiftOnly => (Matrix::identity(d), 1.0),
        Variant::ScaleShift => {
            let s = a_c.inner_product(&b_c)? / (b_c.inner_product(&b_c)? + params.epsilon);
            (Matrix::identity(d), s.max(0.0))
        }
        Variant::Full => {
            let cross = b_c.transpose().matmul(&a_c)?;
            let rotation = if cross.data().iter().all(|&v| v == 0.0) {
                Matrix::identity(d)
            } else {
                let f = svd(&cross)?;
                f.u.matmul(&f.v.transpose())?
            };
            let rotated = b_c.matmul(&rotation)?;
            let s = a_c.inner_product(&rotated)? / (rotated.inner_product(&rotated)? + params.epsilon);
            (rotation, s.max(0.0))
        }
    };

    Ok(CalibrationOperator {
        site,
        mu_a,
        mu_b,
        rotation,
        scale,
        alpha: params.alpha,
        variant: params.variant,
    })
}

/// `C(h) = h + α (T(h) − h)`; `α = 0` returns `h` unchanged, bit for bit.
pub fn apply(op: &CalibrationOperator, h: &Matrix) -> Result<Matrix> {
    if op.alpha == 0.0 {
        if h.cols() != op.dim() {
            return Err(Error::ShapeMismatch {
                op: "calibration apply",
                left: h.shape(),
                right: (h.rows(), op.dim()),
            });
        }
        return Ok(h.clone());
    }
    let t = op.transform(h)?;
    let mut out = h.clone();
    for (o, t) in out.data_mut().iter_mut().zip(t.data()) {
        *o += op.alpha * (t - *o);
    }
    Ok(out)
}

/// `‖A − T(B)‖_F`, the fit residual at full strength.
pub fn residual(op: &CalibrationOperator, a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(&op.transform(b)?)?.frobenius_norm())
}

/// Provenance of a pooled row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLabel {
    pub condition: usize,
    /// `None` for a class-pooled row.
    pub token: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolInput<'a> {
    pub condition: usize,
    pub value: &'a Matrix,
}

/// Reduces per-sample site values to representative rows, grouped by
/// condition in ascending order.
pub fn pool(samples: &[PoolInput<'_>], mode: PoolingMode) -> Result<(Matrix, Vec<RowLabel>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyGroup("no samples to pool".into()))?;
    let (t, d) = first.value.shape();
    let mut groups: BTreeMap<usize, Vec<&Matrix>> = BTreeMap::new();
    for s in samples {
        if s.value.shape() != (t, d) {
            return Err(Error::ShapeMismatch {
                op: "pool",
                left: s.value.shape(),
                right: (t, d),
            });
        }
        groups.entry(s.condition).or_default().push(s.value);
    }

    let mut token_rows = Vec::new();
    let mut class_rows = Vec::new();
    for (&condition, members) in &groups {
        let mut sum = Matrix::zeros(t, d);
        for m in members {
            sum.add_assign(m)?;
        }
        let per_token = sum.scale(1.0 / members.len() as f64);
        let class_mean = per_token.row_mean();
        for tok in 0..t {
            token_rows.push((
                RowLabel {
                    condition,
                    token: Some(tok),
                },
                per_token.row(tok).to_vec(),
            ));
        }
        class_rows.push((
            RowLabel {
                condition,
                token: None,
            },
            class_mean,
        ));
    }

    let rows: Vec<(RowLabel, Vec<f64>)> = match mode {
        PoolingMode::TokenPool => token_rows,
        PoolingMode::ClassPool => class_rows,
        PoolingMode::Mixed => token_rows.into_iter().chain(class_rows).collect(),
    };
    let labels = rows.iter().map(|(l, _)| *l).collect();
    let data: Vec<Vec<f64>> = rows.into_iter().map(|(_, r)| r).collect();
    Ok((Matrix::from_rows(&data), labels))
}

/// Pooled full-computation rows `a` and cache-side rows `b`, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub a: Matrix,
    pub b: Matrix,
    pub labels: Vec<RowLabel>,
}

impl PairedBatch {
    pub fn from_samples(full: &[PoolInput<'_>], cache_side: &[PoolInput<'_>], mode: PoolingMode) -> Result<Self> {
        let (a, labels) = pool(full, mode)?;
        let (b, labels_b) = pool(cache_side, mode)?;
        if labels != labels_b || a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "paired batch",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(Self { a, b, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModuleKind;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn site() -> SiteId {
        SiteId::new(3, 1, ModuleKind::Attention)
    }

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    fn params(variant: Variant) -> FitParams {
        FitParams {
            variant,
            ..FitParams::default()
        }
    }

    fn block_rotation(d: usize, theta: f64) -> Matrix {
        let mut r = Matrix::identity(d);
        let (s, c) = theta.sin_cos();
        for p in 0..d / 2 {
            let (i, j) = (2 * p, 2 * p + 1);
            r.set(i, i, c);
            r.set(i, j, s);
            r.set(j, i, -s);
            r.set(j, j, c);
        }
        r
    }

    #[test]
    fn self_alignment_is_identity() {
        let mut rng = SeededRng::new(21);
        let b = random(&mut rng, 30, 4);
        let op = fit(site(), &b, &b, &params(Variant::Full)).unwrap();
        assert!(op.rotation.sub(&Matrix::identity(4)).unwrap().frobenius_norm() < 1e-10);
        assert!((op.scale - 1.0).abs() < 1e-9);
        assert_eq!(op.mu_a, op.mu_b);
        let h = random(&mut rng, 5, 4);
        for alpha in [0.0, 0.3, 1.0] {
            let op = CalibrationOperator { alpha, ..op.clone() };
            assert!(apply(&op, &h).unwrap().sub(&h).unwrap().frobenius_norm() < 1e-8);
        }
    }

    #[test]
    fn recovers_constructed_similarity() {
        let mut rng = SeededRng::new(30);
        let b = random(&mut rng, 50, 4);
        let b_c = b.sub_row_vector(&b.row_mean());
        let r30 = block_rotation(4, std::f64::consts::PI / 6.0);
        let mu_star = [1.0, -1.0, 0.0, 2.0];
        let mut a = b_c.matmul(&r30).unwrap().scale(2.0);
        for i in 0..a.rows() {
            for (x, m) in a.row_mut(i).iter_mut().zip(&mu_star) {
                *x += m;
            }
        }
        let op = fit(site(), &a, &b, &params(Variant::Full)).unwrap();
        assert!(op.scale <= 2.0 && op.scale >= 2.0 * (1.0 - 1e-6), "scale {}", op.scale);
        assert!(op.rotation.sub(&r30).unwrap().frobenius_norm() < 1e-6);
        let a_c = a.sub_row_vector(&op.mu_a);
        let fitted = b_c.matmul(&op.rotation).unwrap().scale(op.scale);
        assert!(a_c.sub(&fitted).unwrap().frobenius_norm() < 1e-8 * a_c.frobenius_norm());
        assert!(residual(&op, &a, &b).unwrap() < 1e-8 * a_c.frobenius_norm());
        for (m, want) in op.mu_a.iter().zip(mu_star) {
            assert!((m - want).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_constant_cache_rows() {
        let mut rng = SeededRng::new(2);
        let a = random(&mut rng, 6, 3);
        let b = Matrix::broadcast_row(&[0.5, -1.0, 2.0], 6);
        let op = fit(site(), &a, &b, &params(Variant::Full)).unwrap();
        assert_eq!(op.rotation, Matrix::identity(3));
        assert_eq!(op.scale, 0.0);
        let h = random(&mut rng, 4, 3);
        let t = op.transform(&h).unwrap();
        for i in 0..4 {
            assert_eq!(t.row(i), &op.mu_a[..]);
        }
        // a single row is the same degenerate case
        let one = fit(site(), &a.sub(&a).unwrap(), &b, &params(Variant::Full));
        assert!(one.is_ok());
        let single = Matrix::from_rows(&[[1.0, 2.0]]);
        let op = fit(site(), &single, &single.scale(3.0), &params(Variant::Full)).unwrap();
        assert_eq!(op.scale, 0.0);
        assert_eq!(op.rotation, Matrix::identity(2));
    }

    #[test]
    fn apply_examples() {
        let op = CalibrationOperator {
            site: site(),
            mu_a: vec![0.0, 0.0],
            mu_b: vec![0.0, 0.0],
            rotation: Matrix::identity(2),
            scale: 3.0,
            alpha: 0.5,
            variant: Variant::ScaleShift,
        };
        let h = Matrix::from_rows(&[[2.0, 0.0]]);
        assert_eq!(apply(&op, &h).unwrap(), Matrix::from_rows(&[[4.0, 0.0]]));

        let full = CalibrationOperator { alpha: 1.0, ..op.clone() };
        assert_eq!(apply(&full, &h).unwrap(), full.transform(&h).unwrap());

        let off = CalibrationOperator { alpha: 0.0, ..op.clone() };
        let weird = Matrix::from_rows(&[[-0.0, 1e300]]);
        assert!(apply(&off, &weird).unwrap().bitwise_eq(&weird));
        assert!(apply(&op, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let a = Matrix::from_rows(&[[1.0, f64::NAN]]);
        let b = Matrix::from_rows(&[[1.0, 2.0]]);
        assert!(fit(site(), &a, &b, &FitParams::default()).is_err());
        assert!(fit(site(), &b, &Matrix::zeros(2, 2), &FitParams::default()).is_err());
    }

    /// Best residual over a rotation/reflection grid with the closed-form
    /// non-negative scale for each candidate.
    fn grid_minimum(a_c: &Matrix, b_c: &Matrix) -> f64 {
        let mut best = f64::INFINITY;
        let steps = (std::f64::consts::TAU / 1e-3).ceil() as usize;
        for k in 0..=steps {
            let (s, c) = (k as f64 * 1e-3).sin_cos();
            for reflect in [false, true] {
                let r = if reflect {
                    Matrix::from_rows(&[[c, s], [s, -c]])
                } else {
                    Matrix::from_rows(&[[c, s], [-s, c]])
                };
                let br = b_c.matmul(&r).unwrap();
                let scale = (a_c.inner_product(&br).unwrap() / br.inner_product(&br).unwrap()).max(0.0);
                let res = a_c.sub(&br.scale(scale)).unwrap().frobenius_norm();
                best = best.min(res);
            }
        }
        best
    }

    #[test]
    fn procrustes_matches_grid_oracle_2d() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(1000 + seed);
            let a = random(&mut rng, 20, 2);
            let b = random(&mut rng, 20, 2);
            let a = a.scale(1.0 / a.sub_row_vector(&a.row_mean()).frobenius_norm());
            let op = fit(site(), &a, &b, &params(Variant::Full)).unwrap();
            let a_c = a.sub_row_vector(&op.mu_a);
            let b_c = b.sub_row_vector(&op.mu_b);
            let ours = a_c
                .sub(&b_c.matmul(&op.rotation).unwrap().scale(op.scale))
                .unwrap()
                .frobenius_norm();
            let grid = grid_minimum(&a_c, &b_c);
            assert!(ours <= grid + 1e-6, "seed {seed}: {ours} vs {grid}");
            assert!((ours - grid).abs() <= 1e-6);
        }
    }

    #[test]
    fn token_pool_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]]);
        let (rows, labels) = pool(&[PoolInput { condition: 2, value: &x }], PoolingMode::TokenPool).unwrap();
        assert_eq!(rows, x);
        assert_eq!(labels[1], RowLabel { condition: 2, token: Some(1) });

        let (rows, labels) = pool(
            &[PoolInput { condition: 0, value: &x }, PoolInput { condition: 0, value: &x }],
            PoolingMode::ClassPool,
        )
        .unwrap();
        assert_eq!(rows.row(0), &x.row_mean()[..]);
        assert_eq!(labels, vec![RowLabel { condition: 0, token: None }]);

        let (rows, _) = pool(&[PoolInput { condition: 0, value: &x }], PoolingMode::Mixed).unwrap();
        assert_eq!(rows.rows(), 4);
        assert!(pool(&[], PoolingMode::TokenPool).is_err());
    }

    #[test]
    fn token_pool_matches_oracle() {
        let mut rng = SeededRng::new(77);
        let samples: Vec<Matrix> = (0..3).map(|_| random(&mut rng, 4, 5)).collect();
        let inputs: Vec<PoolInput> = samples.iter().map(|m| PoolInput { condition: 1, value: m }).collect();
        let (rows, _) = pool(&inputs, PoolingMode::TokenPool).unwrap();
        assert_eq!(rows.shape(), (4, 5));
        for t in 0..4 {
            for c in 0..5 {
                let oracle = samples.iter().map(|m| m.get(t, c)).sum::<f64>() / 3.0;
                assert!((rows.get(t, c) - oracle).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pools_group_by_condition() {
        let mut rng = SeededRng::new(5);
        let s: Vec<Matrix> = (0..4).map(|_| random(&mut rng, 3, 2)).collect();
        let inputs = vec![
            PoolInput { condition: 4, value: &s[0] },
            PoolInput { condition: 1, value: &s[1] },
            PoolInput { condition: 4, value: &s[2] },
            PoolInput { condition: 1, value: &s[3] },
        ];
        let (rows, labels) = pool(&inputs, PoolingMode::ClassPool).unwrap();
        assert_eq!(rows.rows(), 2);
        assert_eq!(labels[0].condition, 1);
        assert_eq!(labels[1].condition, 4);
        let (rows, _) = pool(&inputs, PoolingMode::TokenPool).unwrap();
        assert_eq!(rows.rows(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residuals_are_nested(seed in any::<u64>(), n in 2usize..30, d in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let a = random(&mut rng, n, d);
            let b = random(&mut rng, n, d);
            let r = |v| residual(&fit(site(), &a, &b, &params(v)).unwrap(), &a, &b).unwrap();
            let (full, ss, shift) = (r(Variant::Full), r(Variant::ScaleShift), r(Variant::ShiftOnly));
            prop_assert!(full <= ss + 1e-12, "{} > {}", full, ss);
            prop_assert!(ss <= shift + 1e-12, "{} > {}", ss, shift);
        }

        #[test]
        fn fitted_rotation_is_orthogonal(seed in any::<u64>(), n in 1usize..30, d in 1usize..8) {
            let mut rng = SeededRng::new(seed);
            let a = random(&mut rng, n, d);
            let b = random(&mut rng, n, d);
            let op = fit(site(), &a, &b, &params(Variant::Full)).unwrap();
            let rtr = op.rotation.transpose().matmul(&op.rotation).unwrap();
            prop_assert!(rtr.sub(&Matrix::identity(d)).unwrap().frobenius_norm() < 1e-10);
            prop_assert!(op.scale >= 0.0);
        }

        #[test]
        fn alpha_interpolates(seed in any::<u64>(), lambda in 0.0f64..2.0) {
            let mut rng = SeededRng::new(seed);
            let a = random(&mut rng, 12, 3);
            let b = random(&mut rng, 12, 3);
            let h = random(&mut rng, 5, 3);
            let op = fit(site(), &a, &b, &FitParams { alpha: lambda, ..FitParams::default() }).unwrap();
            let full = apply(&CalibrationOperator { alpha: 1.0, ..op.clone() }, &h).unwrap();
            let got = apply(&op, &h).unwrap();
            for i in 0..h.data().len() {
                let want = (1.0 - lambda) * h.data()[i] + lambda * full.data()[i];
                prop_assert!((got.data()[i] - want).abs() < 1e-12);
            }
            let off = apply(&CalibrationOperator { alpha: 0.0, ..op }, &h).unwrap();
            prop_assert!(off.bitwise_eq(&h));
        }
    }
}
