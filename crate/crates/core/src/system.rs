//! Entire solutions of the singular SU(n+1) Toda system built from their
//! classification data.
//!
//! The first tau function is `F_1 = |z|^{-2γ¹}(λ_0 + Σ λ_i |P_i|²)`. Higher
//! levels are Gram determinants of the derivative curve of
//! `f = (√λ_0, √λ_1 P_1, …, √λ_n P_n)` and satisfy the bilinear ladder
//! `4(F_i ∂∂̄F_i − ∂F_i ∂̄F_i) = F_{i−1} F_{i+1}` with `F_0 = F_{n+1} = 1`.
//! The upper components are `u^i = −log F_i`.

use std::f64::consts::PI;

use num_complex::Complex64;
use num_rational::Rational64;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracpoly::{is_natural, ratio_to_f64, rational_to_string, CompiledPoly, GenPoly};

/// Relative tolerance of the product constraint on the λ's.
pub const CONSTRAINT_TOL: f64 = 1e-12;
/// Relative tolerance of the bilinear ladder on the diagnostic grid.
pub const LADDER_TOL: f64 = 1e-8;

/// Relative size below which a symbolically cancelled coefficient is dropped.
const CANCELLATION_TOL: f64 = 1e-12;

/// Below `|log r|` of this size the tau levels are evaluated directly.
const SAFE_LN_R: f64 = 10.0;

pub fn cartan(n: usize) -> Vec<Vec<i64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match i.abs_diff(j) {
                    0 => 2,
                    1 => -1,
                    _ => 0,
                })
                .collect()
        })
        .collect()
}

/// `a^{ij} = min(i, j) − ij/(n+1)` with 1-based indices.
pub fn inverse_cartan(n: usize) -> Vec<Vec<Rational64>> {
    let n1 = n as i64 + 1;
    (1..=n as i64)
        .map(|i| {
            (1..=n as i64)
                .map(|j| Rational64::from_integer(i.min(j)) - Rational64::new(i * j, n1))
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingularWeights {
    gamma: Vec<Rational64>,
}

impl SingularWeights {
    pub fn new(gamma: Vec<Rational64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::EmptyWeights);
        }
        for (idx, g) in gamma.iter().enumerate() {
            if *g <= Rational64::from_integer(-1) {
                return Err(Error::WeightOutOfRange {
                    index: idx + 1,
                    value: rational_to_string(*g),
                });
            }
        }
        Ok(SingularWeights { gamma })
    }

    pub fn from_pairs(pairs: &[(i64, i64)]) -> Result<Self> {
        let mut gamma = Vec::with_capacity(pairs.len());
        for (idx, &(num, den)) in pairs.iter().enumerate() {
            if den == 0 {
                return Err(Error::config(format!("gamma[{idx}]"), "zero denominator"));
            }
            gamma.push(Rational64::new(num, den));
        }
        SingularWeights::new(gamma)
    }

    pub fn regular(n: usize) -> Self {
        SingularWeights {
            gamma: vec![Rational64::zero(); n],
        }
    }

    pub fn n(&self) -> usize {
        self.gamma.len()
    }

    /// `γ_i`, 1-based.
    pub fn gamma(&self, i: usize) -> Rational64 {
        self.gamma[i - 1]
    }

    pub fn gammas(&self) -> &[Rational64] {
        &self.gamma
    }

    pub fn gamma_f64(&self, i: usize) -> f64 {
        ratio_to_f64(self.gamma(i))
    }

    /// `μ_i = 1 + γ_i`, 1-based.
    pub fn mu(&self, i: usize) -> Rational64 {
        Rational64::one() + self.gamma(i)
    }

    /// `γ^i = Σ_j a^{ij} γ_j`, 1-based; `γ^0 = γ^{n+1} = 0`.
    pub fn gamma_upper(&self, i: usize) -> Rational64 {
        let n = self.n();
        if i == 0 || i > n {
            return Rational64::zero();
        }
        let inv = inverse_cartan(n);
        (1..=n).map(|j| inv[i - 1][j - 1] * self.gamma(j)).sum()
    }

    /// Partial sums `a_0 = 0, a_i = μ_1 + … + μ_i`.
    pub fn ladder(&self) -> Vec<Rational64> {
        let mut a = vec![Rational64::zero()];
        for i in 1..=self.n() {
            let prev = a[i - 1];
            a.push(prev + self.mu(i));
        }
        a
    }

    /// `μ_{j+1} + … + μ_i` for `j < i`.
    pub fn gap(&self, j: usize, i: usize) -> Rational64 {
        (j + 1..=i).map(|k| self.mu(k)).sum()
    }

    /// Whether the slot `c_ij` (equivalently `m_ji`) may carry a nonzero value.
    pub fn resonant(&self, j: usize, i: usize) -> bool {
        j < i && is_natural(self.gap(j, i))
    }

    /// Right-hand side of the λ product constraint.
    pub fn constraint_constant(&self) -> f64 {
        let n = self.n();
        let mut log_prod = -((n * (n + 1)) as f64) * 2f64.ln();
        for i in 1..=n {
            for j in i..=n {
                log_prod -= 2.0 * ratio_to_f64(self.gap(i - 1, j)).ln();
            }
        }
        log_prod.exp()
    }

    /// Slope constant `2 + γ_i + γ_{n+1−i}` of the far-field logarithm.
    pub fn far_field_weight(&self, i: usize) -> Rational64 {
        Rational64::from_integer(2) + self.gamma(i) + self.gamma(self.n() + 1 - i)
    }

    pub fn min_gamma(&self) -> Rational64 {
        *self.gamma.iter().min().expect("nonempty")
    }
}

/// Lower-triangular complex coefficients `c_ij`, `1 ≤ i ≤ n`, `0 ≤ j < i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffTable {
    n: usize,
    values: Vec<Complex64>,
}

impl CoeffTable {
    pub fn zeros(n: usize) -> Self {
        CoeffTable {
            n,
            values: vec![Complex64::zero(); n * (n + 1) / 2],
        }
    }

    fn index(&self, i: usize, j: usize) -> Result<usize> {
        if i == 0 || i > self.n || j >= i {
            return Err(Error::InvalidSlot { i, j, n: self.n });
        }
        Ok(i * (i - 1) / 2 + j)
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.index(i, j).map(|k| self.values[k]).unwrap_or_default()
    }

    pub fn set(&mut self, i: usize, j: usize, value: Complex64) -> Result<()> {
        let k = self.index(i, j)?;
        self.values[k] = value;
        Ok(())
    }

    pub fn slots(n: usize) -> impl Iterator<Item = (usize, usize)> {
        (1..=n).flat_map(|i| (0..i).map(move |j| (i, j)))
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TodaParams {
    pub weights: SingularWeights,
    /// `λ_0, …, λ_n`.
    pub lambda: Vec<f64>,
    pub c: CoeffTable,
}

impl TodaParams {
    /// Fixes `λ_0` from the product constraint given `λ_1..λ_n`.
    pub fn make(weights: SingularWeights, lambda_free: &[f64], c: CoeffTable) -> Result<Self> {
        let n = weights.n();
        if lambda_free.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: lambda_free.len(),
            });
        }
        check_positive(lambda_free, 1)?;
        let prod: f64 = lambda_free.iter().product();
        let mut lambda = vec![weights.constraint_constant() / prod];
        lambda.extend_from_slice(lambda_free);
        check_positive(&lambda, 0)?;
        let params = TodaParams { weights, lambda, c };
        params.check_resonance()?;
        Ok(params)
    }

    /// Fixes `λ_n` from the product constraint given `λ_0..λ_{n−1}`.
    pub fn make_last_dependent(
        weights: SingularWeights,
        lambda_head: &[f64],
        c: CoeffTable,
    ) -> Result<Self> {
        let n = weights.n();
        if lambda_head.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: lambda_head.len(),
            });
        }
        check_positive(lambda_head, 0)?;
        let prod: f64 = lambda_head.iter().product();
        let mut lambda = lambda_head.to_vec();
        lambda.push(weights.constraint_constant() / prod);
        check_positive(&lambda, 0)?;
        let params = TodaParams { weights, lambda, c };
        params.check_resonance()?;
        Ok(params)
    }

    /// Takes all `n+1` λ's and validates the product constraint.
    pub fn from_full(weights: SingularWeights, lambda: Vec<f64>, c: CoeffTable) -> Result<Self> {
        let params = TodaParams::from_full_unchecked(weights, lambda, c)?;
        let defect = params.constraint_defect();
        if defect > CONSTRAINT_TOL {
            return Err(Error::ConstraintViolated(defect));
        }
        Ok(params)
    }

    /// Like [`TodaParams::from_full`] without the product constraint; used for
    /// perturbation probes.
    pub fn from_full_unchecked(
        weights: SingularWeights,
        lambda: Vec<f64>,
        c: CoeffTable,
    ) -> Result<Self> {
        let n = weights.n();
        if lambda.len() != n + 1 {
            return Err(Error::LengthMismatch {
                expected: n + 1,
                got: lambda.len(),
            });
        }
        if c.n() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: c.n(),
            });
        }
        check_positive(&lambda, 0)?;
        let params = TodaParams { weights, lambda, c };
        params.check_resonance()?;
        Ok(params)
    }

    fn check_resonance(&self) -> Result<()> {
        for (i, j) in CoeffTable::slots(self.n()) {
            if self.c.get(i, j) != Complex64::zero() && !self.weights.resonant(j, i) {
                return Err(Error::NonResonantCoefficient { i, j });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.weights.n()
    }

    pub fn constraint_defect(&self) -> f64 {
        let prod: f64 = self.lambda.iter().product();
        (prod / self.weights.constraint_constant() - 1.0).abs()
    }

    /// The same solution seen through `y ↦ τ y`:
    /// `ṽ_i(τ y) + 2(1+γ_i) log τ`.
    pub fn rescaled(&self, tau: f64) -> TodaParams {
        let a = self.weights.ladder();
        let n = self.n();
        let shift = 2.0 * ratio_to_f64(self.weights.gamma_upper(1)) + n as f64;
        let lambda = (0..=n)
            .map(|i| self.lambda[i] * tau.powf(2.0 * ratio_to_f64(a[i]) - shift))
            .collect();
        let mut c = self.c.clone();
        for (i, j) in CoeffTable::slots(n) {
            let v = self.c.get(i, j) * tau.powf(ratio_to_f64(a[j] - a[i]));
            c.set(i, j, v).expect("valid slot");
        }
        TodaParams {
            weights: self.weights.clone(),
            lambda,
            c,
        }
    }

    /// λ's spread log-uniformly by a factor 2 around the constraint's
    /// geometric mean; `|c_ij| ≤ c_max` at resonant slots.
    pub fn random_admissible<R: Rng>(weights: &SingularWeights, c_max: f64, rng: &mut R) -> Self {
        let n = weights.n();
        let g = weights.constraint_constant().powf(1.0 / (n as f64 + 1.0));
        let free: Vec<f64> = (0..n)
            .map(|_| g * rng.gen_range(-1.0f64..1.0).mul_add(2f64.ln(), 0.0).exp())
            .collect();
        let mut c = CoeffTable::zeros(n);
        for (i, j) in CoeffTable::slots(n) {
            if weights.resonant(j, i) && c_max > 0.0 {
                let r = c_max * rng.gen_range(0.0f64..1.0).sqrt();
                let phase = rng.gen_range(0.0..2.0 * PI);
                c.set(i, j, Complex64::from_polar(r, phase)).expect("valid slot");
            }
        }
        TodaParams::make(weights.clone(), &free, c).expect("admissible by construction")
    }
}

fn check_positive(lambda: &[f64], offset: usize) -> Result<()> {
    for (k, &l) in lambda.iter().enumerate() {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::NonpositiveLambda {
                index: k + offset,
                value: l,
            });
        }
    }
    Ok(())
}

/// Which component to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    /// `u_i`
    Lower,
    /// `ũ_i = u_i − 2γ_i log r`
    LowerRegular,
    /// `u^i = −log F_i`
    Upper,
    /// `ũ^i = u^i − 2γ^i log r`
    UpperRegular,
}

/// One level of the tau ladder with the derivatives needed for Laplacians.
#[derive(Clone, Debug)]
pub struct TauLevel {
    pub f: GenPoly,
    /// `F ∂∂̄F − ∂F ∂̄F`; `Δ log F = 4 N / F²`.
    pub log_numerator: GenPoly,
    f_c: CompiledPoly,
    n_c: CompiledPoly,
}

impl TauLevel {
    fn new(f: GenPoly) -> Self {
        let fz = f.d_z();
        let fzb = f.d_zbar();
        let fzzb = fz.d_zbar();
        let raw = f.mul(&fzzb).sub(&fz.mul(&fzb));
        // Leading terms cancel exactly in theory; drop the rounding residue,
        // which large radii would otherwise amplify.
        let abs = |p: &GenPoly| GenPoly::from_terms(p.terms().map(|(k, c)| (*k, Complex64::new(c.norm(), 0.0))));
        let scale = abs(&f).mul(&abs(&fzzb)).add(&abs(&fz).mul(&abs(&fzb)));
        let log_numerator = GenPoly::from_terms(
            raw.terms()
                .filter(|(k, c)| c.norm() > CANCELLATION_TOL * scale.coefficient(k).re)
                .map(|(k, c)| (*k, *c)),
        );
        TauLevel {
            f_c: f.compile(),
            n_c: log_numerator.compile(),
            f,
            log_numerator,
        }
    }
}

/// Values of the tau ladder at a single point.
#[derive(Clone, Debug)]
pub struct LadderPoint {
    pub r: f64,
    /// `F_0 = 1, F_1, …, F_n, F_{n+1} = 1`.
    pub f: Vec<f64>,
    /// `Δ log F_i` for `i = 0..=n+1` (zero at both ends).
    pub lap_log: Vec<f64>,
}

impl LadderPoint {
    pub fn n(&self) -> usize {
        self.f.len() - 2
    }

    pub fn upper(&self, i: usize) -> f64 {
        -self.f[i].ln()
    }

    pub fn lower(&self, i: usize) -> f64 {
        self.f[i - 1].ln() + self.f[i + 1].ln() - 2.0 * self.f[i].ln()
    }

    /// `e^{u_i} = F_{i−1} F_{i+1} / F_i²`.
    pub fn exp_lower(&self, i: usize) -> f64 {
        self.f[i - 1] * self.f[i + 1] / (self.f[i] * self.f[i])
    }

    /// `Δu_i + Σ_j a_ij e^{u_j}` away from the origin.
    pub fn residual(&self, i: usize) -> f64 {
        let n = self.n();
        let mut res = 0.0;
        for j in i.saturating_sub(1).max(1)..=(i + 1).min(n) {
            let a = if j == i { 2.0 } else { -1.0 };
            res += a * (-self.lap_log[j] + self.exp_lower(j));
        }
        res
    }
}

#[derive(Clone, Debug)]
pub struct TodaSolution {
    pub params: TodaParams,
    /// `P_1..P_n`.
    pub curve: Vec<GenPoly>,
    /// `λ_0 + Σ λ_i |P_i|²`, so that `ũ^1 = −log D`.
    pub denominator: GenPoly,
    denominator_c: CompiledPoly,
    /// `F_1..F_n`.
    pub tau: Vec<TauLevel>,
    /// Gram-determinant value of `F_{n+1}`; equals 1 under the constraint.
    pub closure: GenPoly,
    /// Ladder normalization `F_k = norm_k · |z|^{−2kγ¹} · Gram_k`, `k = 1..=n+1`.
    pub normalization: Vec<f64>,
}

/// Geometric radii 1e-3..1e3 (25 values) times 16 equispaced angles.
pub fn diagnostic_grid() -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(25 * 16);
    for a in 0..25 {
        let r = 10f64.powf(-3.0 + 6.0 * a as f64 / 24.0);
        for b in 0..16 {
            pts.push((r, 2.0 * PI * b as f64 / 16.0));
        }
    }
    pts
}

/// Real `c` minimizing the coefficient-wise distance `|target − c·base|`.
fn coefficient_ratio(target: &GenPoly, base: &GenPoly, level: usize) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (key, b) in base.terms() {
        num += (b.conj() * target.coefficient(key)).re;
        den += b.norm_sqr();
    }
    let c = num / den;
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::LadderClosureFailure { level, defect: f64::NAN });
    }
    Ok(c)
}

/// `det` of a square matrix of polynomials by cofactor expansion.
fn poly_det(m: &[Vec<GenPoly>]) -> GenPoly {
    let k = m.len();
    match k {
        0 => GenPoly::one(),
        1 => m[0][0].clone(),
        _ => {
            let mut acc = GenPoly::zero();
            for col in 0..k {
                if m[0][col].is_empty() {
                    continue;
                }
                let minor: Vec<Vec<GenPoly>> = m[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|(c, _)| *c != col)
                            .map(|(_, p)| p.clone())
                            .collect()
                    })
                    .collect();
                let term = m[0][col].mul(&poly_det(&minor));
                acc = if col % 2 == 0 { acc.add(&term) } else { acc.sub(&term) };
            }
            acc
        }
    }
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

impl TodaSolution {
    /// Builds the ladder and certifies it on the diagnostic grid.
    pub fn build(params: &TodaParams) -> Result<Self> {
        let sol = TodaSolution::build_unverified(params)?;
        sol.verify_ladder(&diagnostic_grid())?;
        Ok(sol)
    }

    /// Builds the ladder without the grid certificate.
    pub fn build_unverified(params: &TodaParams) -> Result<Self> {
        let n = params.n();
        let w = &params.weights;
        let a = w.ladder();

        let curve: Vec<GenPoly> = (1..=n)
            .map(|i| {
                let mut p = GenPoly::z_pow(a[i]);
                for j in 0..i {
                    let c = params.c.get(i, j);
                    if c != Complex64::zero() {
                        p = p.add(&GenPoly::z_pow(a[j]).scale(c));
                    }
                }
                p
            })
            .collect();

        let mut denominator = GenPoly::real(params.lambda[0]);
        for (i, p) in curve.iter().enumerate() {
            denominator = denominator.add(&p.norm_sqr().scale_real(params.lambda[i + 1]));
        }

        // derivative table ∂^b f_j of the weighted curve
        let mut comps = vec![GenPoly::real(params.lambda[0].sqrt())];
        for (i, p) in curve.iter().enumerate() {
            comps.push(p.scale_real(params.lambda[i + 1].sqrt()));
        }
        let mut derivs: Vec<Vec<GenPoly>> = comps.into_iter().map(|f| vec![f]).collect();
        for row in derivs.iter_mut() {
            for b in 1..=n {
                let next = row[b - 1].d_z();
                row.push(next);
            }
        }

        // Gram determinants by Cauchy–Binet over holomorphic minors
        let gamma1 = w.gamma_upper(1);
        let gram_level = |k: usize| -> GenPoly {
            let mut g = GenPoly::zero();
            for s in subsets(n + 1, k) {
                let m: Vec<Vec<GenPoly>> = s
                    .iter()
                    .map(|&j| (0..k).map(|b| derivs[j][b].clone()).collect())
                    .collect();
                let wdet = poly_det(&m);
                g = g.add(&wdet.norm_sqr());
            }
            let prefactor = GenPoly::abs_pow(-gamma1 * Rational64::from_integer(2 * k as i64));
            g.mul(&prefactor)
        };

        let mut normalization = vec![1.0];
        let mut tau: Vec<TauLevel> = vec![TauLevel::new(gram_level(1))];
        let mut closure = GenPoly::zero();
        for k in 1..=n {
            let raw = gram_level(k + 1);
            let level = &tau[k - 1];
            let target = level.log_numerator.scale_real(4.0);
            let base = if k == 1 { raw.clone() } else { tau[k - 2].f.mul(&raw) };
            let norm = coefficient_ratio(&target, &base, k + 1)?;
            normalization.push(norm);
            let f_next = raw.scale_real(norm);
            if k < n {
                tau.push(TauLevel::new(f_next));
            } else {
                closure = f_next;
            }
        }

        Ok(TodaSolution {
            params: params.clone(),
            curve,
            denominator_c: denominator.compile(),
            denominator,
            tau,
            closure,
            normalization,
        })
    }

    pub fn n(&self) -> usize {
        self.params.n()
    }

    pub fn weights(&self) -> &SingularWeights {
        &self.params.weights
    }

    /// Checks positivity, the bilinear ladder and `F_{n+1} = 1` at `points`.
    pub fn verify_ladder(&self, points: &[(f64, f64)]) -> Result<f64> {
        let n = self.n();
        let closure = self.closure.compile();
        let mut worst: f64 = 0.0;
        for &(r, theta) in points {
            let lp = self.ladder_point(r, theta)?;
            for level in 1..=n {
                let four_n = 4.0 * self.tau[level - 1].n_c.eval(r, theta)?.re;
                let rhs = lp.f[level - 1] * lp.f[level + 1];
                let defect = (four_n - rhs).abs() / rhs.abs();
                worst = worst.max(defect);
                if defect.is_nan() || defect > LADDER_TOL {
                    return Err(Error::LadderClosureFailure { level, defect });
                }
            }
            let top = closure.eval(r, theta)?.re;
            let defect = (top - 1.0).abs();
            worst = worst.max(defect);
            if defect.is_nan() || defect > LADDER_TOL {
                return Err(Error::LadderClosureFailure {
                    level: n + 1,
                    defect,
                });
            }
        }
        Ok(worst)
    }

    pub fn ladder_point(&self, r: f64, theta: f64) -> Result<LadderPoint> {
        if r.is_nan() || r <= 0.0 {
            return Err(Error::NonpositiveRadius(r));
        }
        let ln_r = r.ln();
        let n = self.n();
        let mut f = vec![1.0; n + 2];
        let mut lap_log = vec![0.0; n + 2];
        for (idx, level) in self.tau.iter().enumerate() {
            let val = level.f_c.eval_ln(ln_r, theta).re;
            if !(val > 0.0) {
                return Err(Error::NonpositiveTau {
                    level: idx + 1,
                    value: val,
                    r,
                    theta,
                });
            }
            f[idx + 1] = val;
            lap_log[idx + 1] = 4.0 * level.n_c.eval_ln(ln_r, theta).re / (val * val);
        }
        Ok(LadderPoint { r, f, lap_log })
    }

    pub fn eval_component(&self, which: Component, i: usize, r: f64, theta: f64) -> Result<f64> {
        self.check_index(i)?;
        let lp = self.ladder_point(r, theta)?;
        Ok(self.component_from(&lp, which, i))
    }

    pub fn component_from(&self, lp: &LadderPoint, which: Component, i: usize) -> f64 {
        let ln_r = lp.r.ln();
        let w = self.weights();
        match which {
            Component::Upper => lp.upper(i),
            Component::UpperRegular => {
                lp.upper(i) - 2.0 * ratio_to_f64(w.gamma_upper(i)) * ln_r
            }
            Component::Lower => lp.lower(i),
            Component::LowerRegular => lp.lower(i) - 2.0 * w.gamma_f64(i) * ln_r,
        }
    }

    /// `ũ^1 = −log(λ_0 + Σ λ_i |P_i|²)`.
    pub fn first_regular(&self, r: f64, theta: f64) -> Result<f64> {
        let d = self.denominator_c.eval(r, theta)?.re;
        if !(d > 0.0) {
            return Err(Error::NonpositiveTau {
                level: 1,
                value: d,
                r,
                theta,
            });
        }
        Ok(-d.ln())
    }

    pub fn denominator_at(&self, r: f64, theta: f64) -> Result<f64> {
        Ok(self.denominator_c.eval(r, theta)?.re)
    }

    /// PDE defect `Δu_i + Σ_j a_ij e^{u_j}` at a point away from the origin.
    pub fn residual(&self, i: usize, r: f64, theta: f64) -> Result<f64> {
        self.check_index(i)?;
        Ok(self.ladder_point(r, theta)?.residual(i))
    }

    /// Largest absolute PDE defect over all components and the given points.
    pub fn residual_sup(&self, points: &[(f64, f64)]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for &(r, t) in points {
            let lp = self.ladder_point(r, t)?;
            for i in 1..=self.n() {
                let v = lp.residual(i);
                if v.is_nan() {
                    return Ok(f64::INFINITY);
                }
                worst = worst.max(v.abs());
            }
        }
        Ok(worst)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n() {
            return Err(Error::InvalidComponent {
                index: i,
                n: self.n(),
            });
        }
        Ok(())
    }

    fn is_radial(&self) -> bool {
        self.tau.iter().all(|t| t.f_c.max_abs_winding() == 0.0)
    }

    /// Decay exponent `4 + 2γ_{n+1−i}` of `e^{u_i}`.
    pub fn decay_exponent(&self, i: usize) -> f64 {
        4.0 + 2.0 * self.weights().gamma_f64(self.n() + 1 - i)
    }

    /// `(ũ_i(2r) − ũ_i(r)) / log 2`, averaged over 8 angles.
    pub fn asymptotic_slope(&self, i: usize, r: f64) -> Result<f64> {
        self.check_index(i)?;
        let mut acc = 0.0;
        for b in 0..8 {
            let t = 2.0 * PI * b as f64 / 8.0;
            let outer = self.eval_component(Component::LowerRegular, i, 2.0 * r, t)?;
            let inner = self.eval_component(Component::LowerRegular, i, r, t)?;
            acc += (outer - inner) / 2f64.ln();
        }
        Ok(acc / 8.0)
    }

    /// `log e^{u_i}` from log-magnitudes of the tau levels; finite far
    /// beyond the radius where the levels themselves overflow.
    pub fn log_density(&self, i: usize, ln_r: f64, theta: f64) -> Result<f64> {
        self.check_index(i)?;
        let mut log_f = vec![0.0; self.n() + 2];
        for (idx, level) in self.tau.iter().enumerate().take(self.n()) {
            let (l, sign) = if ln_r.abs() < SAFE_LN_R {
                let v = level.f_c.eval_ln(ln_r, theta).re;
                (v.abs().ln(), v.signum())
            } else {
                level.f_c.eval_ln_log(ln_r, theta)
            };
            if !(sign > 0.0) {
                return Err(Error::NonpositiveTau {
                    level: idx + 1,
                    value: sign * l.exp(),
                    r: ln_r.exp(),
                    theta,
                });
            }
            log_f[idx + 1] = l;
        }
        Ok(log_f[i - 1] + log_f[i + 1] - 2.0 * log_f[i])
    }

    /// `m_i = (1/2π) ∫ e^{u_i}` with default quadrature settings.
    pub fn mass(&self, i: usize) -> Result<f64> {
        self.mass_with(i, &MassQuadrature::default())
    }

    pub fn mass_with(&self, i: usize, q: &MassQuadrature) -> Result<f64> {
        self.check_index(i)?;
        let radial = self.is_radial();
        // periodic trapezoid, doubled through the interleaved midpoints
        let angular_mean = |t: f64| -> Result<f64> {
            if radial {
                return Ok(self.log_density(i, t, 0.0)?.exp());
            }
            let mut n = q.angles.max(2);
            let mut sum = 0.0;
            for b in 0..n {
                sum += self.log_density(i, t, 2.0 * PI * b as f64 / n as f64)?.exp();
            }
            let mut mean = sum / n as f64;
            while n < q.max_angles {
                for b in 0..n {
                    sum += self.log_density(i, t, PI * (2 * b + 1) as f64 / n as f64)?.exp();
                }
                n *= 2;
                let next = sum / n as f64;
                let done = (next - mean).abs() <= 1e-12 * next.abs();
                mean = next;
                if done {
                    break;
                }
            }
            Ok(mean)
        };
        let integrand = |t: f64| -> Result<f64> { Ok(angular_mean(t)? * (2.0 * t).exp()) };

        let alpha = self.decay_exponent(i);
        // push the outer radius until the bare power tail is below the target
        let r_max = q
            .r_max
            .max(q.tail_target.powf(1.0 / (2.0 - alpha)))
            .min(q.r_cap.max(q.r_max));
        let (t0, t1) = (q.r_min.ln(), r_max.ln());
        let mut steps = ((t1 - t0) / q.log_step).ceil() as usize;
        if steps % 2 == 1 {
            steps += 1;
        }
        let h = (t1 - t0) / steps as f64;
        let vals: Vec<f64> = (0..=steps).map(|s| integrand(t0 + h * s as f64)).collect::<Result<_>>()?;
        let coarse: f64 = (0..steps / 2)
            .map(|p| h / 3.0 * (vals[2 * p] + 4.0 * vals[2 * p + 1] + vals[2 * p + 2]))
            .sum();
        let panel_tol = q.body_tolerance * coarse.abs() / (steps / 2) as f64;
        let mut body = 0.0;
        for p in 0..steps / 2 {
            let a = t0 + h * (2 * p) as f64;
            let (fa, fm, fb) = (vals[2 * p], vals[2 * p + 1], vals[2 * p + 2]);
            let whole = h / 3.0 * (fa + 4.0 * fm + fb);
            body += adaptive_simpson(&integrand, a, a + 2.0 * h, [fa, fm, fb], whole, panel_tol, 16)?;
        }

        // amplitudes a·r^α at R, R/4 and R/16 for the tail extrapolation
        let amp_at = |t: f64| -> Result<f64> { Ok(angular_mean(t)? * (alpha * t).exp()) };
        let amp = [amp_at(t1)?, amp_at(t1 - 4f64.ln())?, amp_at(t1 - 16f64.ln())?];
        let head_val = vals[0] * (-2.0 * t0).exp();
        let gamma_i = self.weights().gamma_f64(i);
        let head = head_val * q.r_min * q.r_min / (2.0 * gamma_i + 2.0);
        let power_tail = r_max.powf(2.0 - alpha);
        let pure = amp[0] * power_tail / (alpha - 2.0);
        // Aitken on A(r) = C + E (r/R)^{−δ}
        let ratio = (amp[0] - amp[1]) / (amp[1] - amp[2]);
        let (tail, tail_spread) = if ratio > 0.0 && ratio < 1.0 {
            let delta = -ratio.ln() / (4f64).ln();
            let e = (amp[0] - amp[1]) * ratio / (ratio - 1.0);
            let c = amp[0] - e;
            let corrected = c * power_tail / (alpha - 2.0) + e * power_tail / (alpha + delta - 2.0);
            (corrected, (corrected - pure).abs() * ratio)
        } else {
            (pure, pure * ((amp[0] - amp[1]) / amp[0]).abs())
        };
        let total = body + head + tail;
        if !total.is_finite() || tail_spread > q.tail_tolerance * total.abs() {
            return Err(Error::QuadratureNonconvergent(format!(
                "tail uncertainty {tail_spread:e} against mass {total:e}"
            )));
        }
        Ok(total)
    }
}

/// Settings for the radial-angular mass quadrature.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MassQuadrature {
    pub r_min: f64,
    /// Smallest outer radius; slowly decaying densities go further.
    pub r_max: f64,
    /// Size of `R^{2−α}` at which the outer radius stops growing.
    pub tail_target: f64,
    pub r_cap: f64,
    /// Base Simpson step in `log r`; panels refine adaptively.
    pub log_step: f64,
    /// Relative accuracy asked of the radial body integral.
    pub body_tolerance: f64,
    /// Starting angle count, doubled on each ring while the angular mean moves.
    pub angles: usize,
    pub max_angles: usize,
    /// Allowed relative disagreement between two tail extrapolations.
    pub tail_tolerance: f64,
}

impl Default for MassQuadrature {
    fn default() -> Self {
        MassQuadrature {
            r_min: 1e-6,
            r_max: 1e4,
            tail_target: 1e-10,
            r_cap: 1e12,
            log_step: 0.1,
            body_tolerance: 1e-9,
            angles: 16,
            max_angles: 4096,
            tail_tolerance: 1e-7,
        }
    }
}

/// Simpson on `[a, b]` refined until the two halves agree with the whole to
/// `15 tol`, with the Richardson correction applied.
fn adaptive_simpson(
    f: &dyn Fn(f64) -> Result<f64>,
    a: f64,
    b: f64,
    [fa, fm, fb]: [f64; 3],
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (fl, fr) = (f(0.5 * (a + m))?, f(0.5 * (m + b))?);
    let left = (m - a) / 6.0 * (fa + 4.0 * fl + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * fr + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return Ok(left + right + diff / 15.0);
    }
    Ok(adaptive_simpson(f, a, m, [fa, fl, fm], left, 0.5 * tol, depth - 1)?
        + adaptive_simpson(f, m, b, [fm, fr, fb], right, 0.5 * tol, depth - 1)?)
}

/// Right-hand side `4 + 2γ_i + 2γ_{n+1−i}` of the mass identity.
pub fn mass_identity_rhs(weights: &SingularWeights, i: usize) -> f64 {
    2.0 * ratio_to_f64(weights.far_field_weight(i))
}

/// `Σ_j a_ij m_j` from a vector of masses.
pub fn cartan_apply(masses: &[f64]) -> Vec<f64> {
    let n = masses.len();
    (0..n)
        .map(|i| {
            let mut v = 2.0 * masses[i];
            if i > 0 {
                v -= masses[i - 1];
            }
            if i + 1 < n {
                v -= masses[i + 1];
            }
            v
        })
        .collect()
}

/// Convenience for tests and configs: rational from a pair.
pub fn q(num: i64, den: i64) -> Rational64 {
    Rational64::new(num, den)
}

pub fn gamma_is_negative(weights: &SingularWeights) -> bool {
    weights.gammas().iter().any(|g| g.is_negative())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cartan_examples() {
        assert_eq!(cartan(2), vec![vec![2, -1], vec![-1, 2]]);
        assert_eq!(inverse_cartan(1), vec![vec![q(1, 2)]]);
        assert_eq!(
            inverse_cartan(2),
            vec![vec![q(2, 3), q(1, 3)], vec![q(1, 3), q(2, 3)]]
        );
    }

    #[test]
    fn cartan_times_inverse_is_identity() {
        for n in 1..=6 {
            let a = cartan(n);
            let inv = inverse_cartan(n);
            for i in 0..n {
                for j in 0..n {
                    let v: Rational64 = (0..n).map(|k| inv[k][j] * a[i][k]).sum();
                    let expect = if i == j { Rational64::one() } else { Rational64::zero() };
                    assert_eq!(v, expect);
                }
            }
        }
    }

    #[test]
    fn lambda_zero_from_constraint() {
        let p = TodaParams::make(SingularWeights::regular(1), &[0.5], CoeffTable::zeros(1)).unwrap();
        assert!((p.lambda[0] - 0.5).abs() < 1e-15);
        let p = TodaParams::make(SingularWeights::regular(2), &[1.0, 1.0], CoeffTable::zeros(2))
            .unwrap();
        assert!((p.lambda[0] - 1.0 / 256.0).abs() < 1e-17);
    }

    #[test]
    fn resonance_rule_rejects_fractional_gap() {
        let w = SingularWeights::new(vec![q(1, 2)]).unwrap();
        let mut c = CoeffTable::zeros(1);
        c.set(1, 0, Complex64::new(0.1, 0.0)).unwrap();
        assert_eq!(
            TodaParams::make(w, &[0.5], c),
            Err(Error::NonResonantCoefficient { i: 1, j: 0 })
        );
    }

    #[test]
    fn weights_validation() {
        assert!(SingularWeights::new(vec![q(-1, 1)]).is_err());
        assert!(SingularWeights::new(vec![]).is_err());
        assert!(TodaParams::make(SingularWeights::regular(1), &[-1.0], CoeffTable::zeros(1)).is_err());
    }

    #[test]
    fn liouville_bubble_closed_form() {
        let p = TodaParams::make(SingularWeights::regular(1), &[0.5], CoeffTable::zeros(1)).unwrap();
        let sol = TodaSolution::build(&p).unwrap();
        let e_u = sol.eval_component(Component::Lower, 1, 1.0, 0.4).unwrap().exp();
        assert!((e_u - 1.0).abs() < 1e-13);
        assert!(sol.eval_component(Component::UpperRegular, 1, 1.0, 0.0).unwrap().abs() < 1e-14);
        let u0 = sol.eval_component(Component::Lower, 1, 1e-7, 0.0).unwrap();
        assert!((u0 - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalization_matches_powers_of_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = SingularWeights::new(vec![q(1, 2), q(0, 1), q(-1, 2)]).unwrap();
        let p = TodaParams::random_admissible(&w, 0.4, &mut rng);
        let sol = TodaSolution::build(&p).unwrap();
        for (k, c) in sol.normalization.iter().enumerate() {
            let expect = 4f64.powi((k * (k + 1) / 2) as i32);
            assert!((c / expect - 1.0).abs() < 1e-9, "level {} {c}", k + 1);
        }
    }

    #[test]
    fn regular_part_offsets_by_log() {
        let w = SingularWeights::new(vec![q(1, 2), q(1, 1)]).unwrap();
        let p = TodaParams::random_admissible(&w, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        let sol = TodaSolution::build(&p).unwrap();
        for r in [0.01, 0.7, 13.0] {
            let u = sol.eval_component(Component::Upper, 1, r, 0.2).unwrap();
            let ut = sol.eval_component(Component::UpperRegular, 1, r, 0.2).unwrap();
            let g1 = ratio_to_f64(w.gamma_upper(1));
            assert!((ut - u + 2.0 * g1 * r.ln()).abs() < 1e-12);
            let direct = sol.first_regular(r, 0.2).unwrap();
            assert!((direct - ut).abs() < 1e-10);
        }
    }

    #[test]
    fn su3_second_tau_closed_form() {
        // Gram minors of (√λ0, √λ1 z, √λ2 z²): λ0λ1 + 4λ0λ2 r² + λ1λ2 r⁴
        let p = TodaParams::make(SingularWeights::regular(2), &[0.7, 1.3], CoeffTable::zeros(2))
            .unwrap();
        let l = &p.lambda;
        let sol = TodaSolution::build(&p).unwrap();
        for (r, t) in diagnostic_grid() {
            let r2 = r * r;
            let f1 = l[0] + l[1] * r2 + l[2] * r2 * r2;
            let f2 = 4.0 * (l[0] * l[1] + 4.0 * l[0] * l[2] * r2 + l[1] * l[2] * r2 * r2);
            let lp = sol.ladder_point(r, t).unwrap();
            assert!((lp.f[1] / f1 - 1.0).abs() < 1e-12);
            assert!((lp.f[2] / f2 - 1.0).abs() < 1e-12);
        }
        assert!(sol.residual_sup(&diagnostic_grid()).unwrap() < 1e-8);
    }

    #[test]
    fn bubble_residual_vanishes() {
        let p = TodaParams::make(SingularWeights::regular(1), &[0.5], CoeffTable::zeros(1)).unwrap();
        let sol = TodaSolution::build(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let r = 10f64.powf(rng.gen_range(-3.0..3.0));
            let t = rng.gen_range(0.0..2.0 * PI);
            assert!(sol.residual(1, r, t).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn broken_constraint_is_detected() {
        let w = SingularWeights::new(vec![q(0, 1), q(1, 2)]).unwrap();
        let good = TodaParams::random_admissible(&w, 0.3, &mut ChaCha8Rng::seed_from_u64(7));
        let mut lambda = good.lambda.clone();
        lambda[0] *= 1.01;
        let bad = TodaParams::from_full_unchecked(w.clone(), lambda.clone(), good.c.clone()).unwrap();
        assert!(matches!(
            TodaParams::from_full(w, lambda, good.c.clone()),
            Err(Error::ConstraintViolated(_))
        ));
        assert!(matches!(
            TodaSolution::build(&bad),
            Err(Error::LadderClosureFailure { .. })
        ));
        let sol = TodaSolution::build_unverified(&bad).unwrap();
        assert!(sol.residual_sup(&diagnostic_grid()).unwrap() > 1e-4);
    }

    #[test]
    fn bubble_mass_is_two() {
        let p = TodaParams::make(SingularWeights::regular(1), &[0.5], CoeffTable::zeros(1)).unwrap();
        let sol = TodaSolution::build(&p).unwrap();
        let m = sol.mass(1).unwrap();
        assert!((m - 2.0).abs() < 1e-8, "{m}");
    }

    #[test]
    fn su3_masses_are_four() {
        let p = TodaParams::make(SingularWeights::regular(2), &[1.0, 1.0], CoeffTable::zeros(2))
            .unwrap();
        let sol = TodaSolution::build(&p).unwrap();
        for i in 1..=2 {
            let m = sol.mass(i).unwrap();
            assert!((m - 4.0).abs() < 4e-6, "{m}");
        }
    }

    #[test]
    fn slope_approaches_far_field_weight() {
        let w = SingularWeights::new(vec![q(1, 2), q(-1, 2)]).unwrap();
        let p = TodaParams::random_admissible(&w, 0.3, &mut ChaCha8Rng::seed_from_u64(8));
        let sol = TodaSolution::build(&p).unwrap();
        for i in 1..=2 {
            let slope = sol.asymptotic_slope(i, 1e4).unwrap();
            let expect = -2.0 * ratio_to_f64(w.far_field_weight(i));
            assert!((slope - expect).abs() < 1e-2, "{slope} vs {expect}");
        }
    }

    #[test]
    fn rescaling_preserves_constraint_and_shape() {
        let w = SingularWeights::new(vec![q(0, 1), q(1, 1)]).unwrap();
        let p = TodaParams::random_admissible(&w, 0.3, &mut ChaCha8Rng::seed_from_u64(10));
        let tau = 1.7;
        let ps = p.rescaled(tau);
        assert!(ps.constraint_defect() < 1e-12);
        let s0 = TodaSolution::build(&p).unwrap();
        let s1 = TodaSolution::build(&ps).unwrap();
        for i in 1..=2 {
            let lhs = s1.eval_component(Component::LowerRegular, i, 0.8, 0.3).unwrap();
            let rhs = s0.eval_component(Component::LowerRegular, i, 0.8 * tau, 0.3).unwrap()
                + 2.0 * (1.0 + w.gamma_f64(i)) * tau.ln();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
