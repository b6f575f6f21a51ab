//! Finite sums of monomials `c · z^p · z̄^q` with rational exponents.
//!
//! A term is keyed by its total degree `s = p + q` and winding `k = p - q`, so
//! that `z^p z̄^q = r^s e^{ikθ}` in polar coordinates. Real-valued quantities
//! (moduli, tau functions) only ever carry integral windings; holomorphic
//! intermediates such as `z^{3/2}` carry fractional ones and are evaluated on
//! the branch selected by the supplied angle.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use num_rational::Rational64;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative magnitude below which coefficients are dropped after arithmetic.
pub const PRUNE_RELATIVE: f64 = 1e-14;

pub fn ratio_to_f64(q: Rational64) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonomialKey {
    /// Total degree `p + q`.
    pub s: Rational64,
    /// Winding `p - q`.
    pub k: Rational64,
}

impl MonomialKey {
    pub fn new(s: Rational64, k: Rational64) -> Self {
        MonomialKey { s, k }
    }

    pub fn from_exponents(p: Rational64, q: Rational64) -> Self {
        MonomialKey { s: p + q, k: p - q }
    }

    pub fn p(&self) -> Rational64 {
        (self.s + self.k) / 2
    }

    pub fn q(&self) -> Rational64 {
        (self.s - self.k) / 2
    }

    pub fn is_single_valued(&self) -> bool {
        self.k.is_integer()
    }

    fn add(self, other: MonomialKey) -> MonomialKey {
        MonomialKey {
            s: self.s + other.s,
            k: self.k + other.k,
        }
    }
}

/// Serialized term of a [`GenPoly`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub s_num: i64,
    pub s_den: i64,
    pub k: i64,
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenPoly {
    terms: BTreeMap<MonomialKey, Complex64>,
}

impl GenPoly {
    pub fn zero() -> Self {
        GenPoly::default()
    }

    pub fn one() -> Self {
        GenPoly::constant(Complex64::one())
    }

    pub fn constant(c: Complex64) -> Self {
        GenPoly::monomial(Rational64::zero(), Rational64::zero(), c)
    }

    pub fn real(c: f64) -> Self {
        GenPoly::constant(Complex64::new(c, 0.0))
    }

    /// `c · z^p · z̄^q`.
    pub fn monomial(p: Rational64, q: Rational64, c: Complex64) -> Self {
        let mut terms = BTreeMap::new();
        if c != Complex64::zero() {
            terms.insert(MonomialKey::from_exponents(p, q), c);
        }
        GenPoly { terms }
    }

    /// `z^p`.
    pub fn z_pow(p: Rational64) -> Self {
        GenPoly::monomial(p, Rational64::zero(), Complex64::one())
    }

    /// `|z|^s`.
    pub fn abs_pow(s: Rational64) -> Self {
        GenPoly::monomial(s / 2, s / 2, Complex64::one())
    }

    pub fn from_terms(iter: impl IntoIterator<Item = (MonomialKey, Complex64)>) -> Self {
        let mut terms: BTreeMap<MonomialKey, Complex64> = BTreeMap::new();
        for (key, c) in iter {
            *terms.entry(key).or_insert_with(Complex64::zero) += c;
        }
        GenPoly::pruned(terms)
    }

    fn pruned(mut terms: BTreeMap<MonomialKey, Complex64>) -> Self {
        let max = terms.values().map(|c| c.norm()).fold(0.0, f64::max);
        let cutoff = PRUNE_RELATIVE * max;
        terms.retain(|_, c| c.norm() > cutoff && c.norm() > 0.0);
        GenPoly { terms }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MonomialKey, &Complex64)> {
        self.terms.iter()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, key: &MonomialKey) -> Complex64 {
        self.terms.get(key).copied().unwrap_or_else(Complex64::zero)
    }

    pub fn max_degree(&self) -> Option<Rational64> {
        self.terms.keys().map(|k| k.s).max()
    }

    pub fn min_degree(&self) -> Option<Rational64> {
        self.terms.keys().map(|k| k.s).min()
    }

    /// Terms of the highest total degree.
    pub fn leading_part(&self) -> GenPoly {
        match self.max_degree() {
            None => GenPoly::zero(),
            Some(top) => GenPoly {
                terms: self
                    .terms
                    .iter()
                    .filter(|(k, _)| k.s == top)
                    .map(|(k, c)| (*k, *c))
                    .collect(),
            },
        }
    }

    pub fn is_single_valued(&self) -> bool {
        self.terms.keys().all(MonomialKey::is_single_valued)
    }

    pub fn add(&self, other: &GenPoly) -> GenPoly {
        let mut terms = self.terms.clone();
        for (k, c) in &other.terms {
            *terms.entry(*k).or_insert_with(Complex64::zero) += c;
        }
        GenPoly::pruned(terms)
    }

    pub fn sub(&self, other: &GenPoly) -> GenPoly {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> GenPoly {
        GenPoly::pruned(self.terms.iter().map(|(k, v)| (*k, v * c)).collect())
    }

    pub fn scale_real(&self, c: f64) -> GenPoly {
        self.scale(Complex64::new(c, 0.0))
    }

    pub fn mul(&self, other: &GenPoly) -> GenPoly {
        let mut terms: BTreeMap<MonomialKey, Complex64> = BTreeMap::new();
        for (ka, ca) in &self.terms {
            for (kb, cb) in &other.terms {
                *terms.entry(ka.add(*kb)).or_insert_with(Complex64::zero) += ca * cb;
            }
        }
        GenPoly::pruned(terms)
    }

    pub fn conj(&self) -> GenPoly {
        GenPoly {
            terms: self
                .terms
                .iter()
                .map(|(k, c)| (MonomialKey::new(k.s, -k.k), c.conj()))
                .collect(),
        }
    }

    /// `|a|^2 = a · conj(a)`.
    pub fn norm_sqr(&self) -> GenPoly {
        self.mul(&self.conj())
    }

    /// Real part `(a + conj a) / 2`.
    pub fn re(&self) -> GenPoly {
        self.add(&self.conj()).scale_real(0.5)
    }

    /// Imaginary part `(a - conj a) / 2i`.
    pub fn im(&self) -> GenPoly {
        self.sub(&self.conj()).scale(Complex64::new(0.0, -0.5))
    }

    pub fn d_z(&self) -> GenPoly {
        self.differentiate(1)
    }

    pub fn d_zbar(&self) -> GenPoly {
        self.differentiate(-1)
    }

    fn differentiate(&self, sign: i64) -> GenPoly {
        let shift = Rational64::from_integer(sign);
        let terms = self.terms.iter().filter_map(|(key, c)| {
            // p for d_z, q for d_zbar
            let factor = (key.s + shift * key.k) / 2;
            if factor.is_zero() {
                None
            } else {
                Some((
                    MonomialKey::new(key.s - 1, key.k - shift),
                    c * ratio_to_f64(factor),
                ))
            }
        });
        GenPoly::pruned(terms.collect())
    }

    /// Euclidean Laplacian `4 ∂_z ∂_z̄`.
    pub fn laplacian(&self) -> GenPoly {
        self.d_z().d_zbar().scale_real(4.0)
    }

    pub fn eval(&self, r: f64, theta: f64) -> Result<Complex64> {
        if r.is_nan() || r <= 0.0 {
            return Err(Error::NonpositiveRadius(r));
        }
        let ln_r = r.ln();
        Ok(self
            .terms
            .iter()
            .map(|(key, c)| {
                let radial = (ratio_to_f64(key.s) * ln_r).exp();
                c * Complex64::from_polar(radial, ratio_to_f64(key.k) * theta)
            })
            .sum())
    }

    pub fn eval_real(&self, r: f64, theta: f64) -> Result<f64> {
        Ok(self.eval(r, theta)?.re)
    }

    pub fn compile(&self) -> CompiledPoly {
        CompiledPoly::new(self)
    }

    pub fn to_records(&self) -> Result<Vec<TermRecord>> {
        self.terms
            .iter()
            .map(|(key, c)| {
                if !key.k.is_integer() {
                    return Err(Error::MultiValued(key.k.to_string()));
                }
                Ok(TermRecord {
                    s_num: *key.s.numer(),
                    s_den: *key.s.denom(),
                    k: key.k.to_integer(),
                    re: c.re,
                    im: c.im,
                })
            })
            .collect()
    }

    pub fn from_records(records: &[TermRecord]) -> Result<GenPoly> {
        let mut terms = Vec::with_capacity(records.len());
        for rec in records {
            if rec.s_den == 0 {
                return Err(Error::config("s_den", "denominator must be nonzero"));
            }
            terms.push((
                MonomialKey::new(
                    Rational64::new(rec.s_num, rec.s_den),
                    Rational64::from_integer(rec.k),
                ),
                Complex64::new(rec.re, rec.im),
            ));
        }
        Ok(GenPoly::from_terms(terms))
    }
}

impl fmt::Display for GenPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (key, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "({:.6e}{:+.6e}i)·z^({})·z̄^({})", c.re, c.im, key.p(), key.q())?;
        }
        Ok(())
    }
}

/// Evaluation-ready form of a [`GenPoly`]: terms grouped by winding with
/// exponents converted to floating point once.
#[derive(Clone, Debug, Default)]
pub struct CompiledPoly {
    groups: Vec<(f64, Vec<(f64, Complex64)>)>,
}

impl CompiledPoly {
    pub fn new(poly: &GenPoly) -> Self {
        let mut by_winding: BTreeMap<Rational64, Vec<(f64, Complex64)>> = BTreeMap::new();
        for (key, c) in poly.terms() {
            by_winding
                .entry(key.k)
                .or_default()
                .push((ratio_to_f64(key.s), *c));
        }
        CompiledPoly {
            groups: by_winding
                .into_iter()
                .map(|(k, v)| (ratio_to_f64(k), v))
                .collect(),
        }
    }

    /// Evaluates at a point whose logarithmic radius is already known.
    #[inline]
    pub fn eval_ln(&self, ln_r: f64, theta: f64) -> Complex64 {
        let mut acc = Complex64::zero();
        for (k, terms) in &self.groups {
            let radial: Complex64 = terms.iter().map(|(s, c)| c * (s * ln_r).exp()).sum();
            acc += radial * Complex64::from_polar(1.0, k * theta);
        }
        acc
    }

    pub fn eval(&self, r: f64, theta: f64) -> Result<Complex64> {
        if r.is_nan() || r <= 0.0 {
            return Err(Error::NonpositiveRadius(r));
        }
        Ok(self.eval_ln(r.ln(), theta))
    }

    /// Radial profile of each Fourier mode at `ln r`: pairs `(winding, value)`.
    pub fn modes_ln(&self, ln_r: f64) -> Vec<(f64, Complex64)> {
        self.groups
            .iter()
            .map(|(k, terms)| (*k, terms.iter().map(|(s, c)| c * (s * ln_r).exp()).sum()))
            .collect()
    }

    /// Real part at `ln r` as `(log |value|, sign)`, safe for radii far outside
    /// the floating point range.
    pub fn eval_ln_log(&self, ln_r: f64, theta: f64) -> (f64, f64) {
        let shift = self
            .groups
            .iter()
            .flat_map(|(_, terms)| terms.iter().map(|(s, c)| s * ln_r + c.norm().ln()))
            .fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, 0.0);
        }
        let mut acc = Complex64::zero();
        for (k, terms) in &self.groups {
            let radial: Complex64 = terms.iter().map(|(s, c)| c * (s * ln_r - shift).exp()).sum();
            acc += radial * Complex64::from_polar(1.0, k * theta);
        }
        (shift + acc.re.abs().ln(), acc.re.signum())
    }

    pub fn max_abs_winding(&self) -> f64 {
        self.groups.iter().map(|(k, _)| k.abs()).fold(0.0, f64::max)
    }
}

/// Is a rational an integer (possibly negative)?
pub fn is_integral(q: Rational64) -> bool {
    q.is_integer()
}

/// Is a rational a positive integer?
pub fn is_natural(q: Rational64) -> bool {
    q.is_integer() && q.is_positive()
}

pub fn rational_to_string(q: Rational64) -> String {
    if q.is_integer() {
        q.to_integer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

pub fn ratio_f64_checked(q: Rational64) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn rel_close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol * a.norm().max(b.norm()).max(1e-300)
    }

    fn random_poly(rng: &mut ChaCha8Rng, terms: usize) -> GenPoly {
        GenPoly::from_terms((0..terms).map(|_| {
            let p = q(rng.gen_range(-4..8), rng.gen_range(1..4));
            let shift = rng.gen_range(-2..3);
            let key = MonomialKey::from_exponents(p, p - shift);
            (key, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        }))
    }

    #[test]
    fn product_of_z_and_zbar_is_modulus_squared() {
        let z = GenPoly::z_pow(q(1, 1));
        let zb = z.conj();
        let prod = z.mul(&zb);
        assert_eq!(prod, GenPoly::abs_pow(q(2, 1)));
        assert_eq!(
            prod.coefficient(&MonomialKey::new(q(2, 1), q(0, 1))),
            c(1.0)
        );
    }

    #[test]
    fn one_is_multiplicative_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_poly(&mut rng, 6);
        assert_eq!(GenPoly::one().mul(&a), a);
    }

    #[test]
    fn fractional_product_lands_on_z_squared() {
        // keys (0, 1) and (2, 1) add to (2, 2), i.e. z^2
        let a = GenPoly::monomial(q(1, 2), q(-1, 2), c(1.0));
        let b = GenPoly::monomial(q(3, 2), q(1, 2), c(1.0));
        let prod = a.mul(&b);
        assert_eq!(prod, GenPoly::z_pow(q(2, 1)));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let r = rng.gen_range(0.1..5.0);
            let t = rng.gen_range(-3.0..3.0);
            let lhs = prod.eval(r, t).unwrap();
            let rhs = a.eval(r, t).unwrap() * b.eval(r, t).unwrap();
            assert!(rel_close(lhs, rhs, 1e-13));
        }
        let at = prod.eval(2.0, std::f64::consts::FRAC_PI_3).unwrap();
        assert!(rel_close(at, Complex64::from_polar(4.0, 2.0 * std::f64::consts::FRAC_PI_3), 1e-14));
    }

    #[test]
    fn derivative_rules() {
        let z = GenPoly::z_pow(q(1, 1));
        assert_eq!(z.d_z(), GenPoly::one());
        assert!(z.conj().d_z().is_empty());
        assert_eq!(GenPoly::abs_pow(q(2, 1)).d_z().d_zbar(), GenPoly::one());
        assert_eq!(GenPoly::abs_pow(q(2, 1)).laplacian(), GenPoly::real(4.0));
    }

    #[test]
    fn holomorphic_powers_are_harmonic() {
        for m in 1..8 {
            assert!(GenPoly::z_pow(q(m, 1)).laplacian().is_empty());
        }
    }

    #[test]
    fn evaluation_examples() {
        let p = GenPoly::monomial(q(2, 1), q(1, 1), c(1.0));
        assert!((p.eval(2.0, 0.0).unwrap() - c(8.0)).norm() < 1e-14);
        let m = GenPoly::abs_pow(q(2, 1));
        for t in [0.0, 0.7, -2.1] {
            assert!((m.eval(3.0, t).unwrap() - c(9.0)).norm() < 1e-13);
        }
        assert_eq!(m.eval(0.0, 0.0), Err(Error::NonpositiveRadius(0.0)));
        assert!(m.eval(-1.0, 0.0).is_err());
    }

    #[test]
    fn d_z_matches_finite_differences() {
        // d/dz = (d/dx - i d/dy) / 2
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let f = random_poly(&mut rng, 5);
            let df = f.d_z();
            let r = rng.gen_range(0.5..2.0);
            let t: f64 = rng.gen_range(-1.0..1.0);
            let (x, y) = (r * t.cos(), r * t.sin());
            let h = 1e-5;
            let at = |x: f64, y: f64| f.eval(x.hypot(y), y.atan2(x)).unwrap();
            let dx = (at(x + h, y) - at(x - h, y)) / (2.0 * h);
            let dy = (at(x, y + h) - at(x, y - h)) / (2.0 * h);
            let fd = (dx - Complex64::i() * dy) * 0.5;
            let exact = df.eval(r, t).unwrap();
            let scale = exact.norm().max(1e-3);
            assert!((fd - exact).norm() / scale < 1e-6, "{fd} vs {exact}");
        }
    }

    #[test]
    fn conjugation_examples() {
        let z = GenPoly::z_pow(q(1, 1));
        assert_eq!(z.conj(), GenPoly::monomial(q(0, 1), q(1, 1), c(1.0)));
        assert_eq!(GenPoly::abs_pow(q(2, 1)).conj(), GenPoly::abs_pow(q(2, 1)));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random_poly(&mut rng, 4);
            let b = random_poly(&mut rng, 4);
            let lhs = a.mul(&b).conj();
            let rhs = a.conj().mul(&b.conj());
            let (r, t) = (rng.gen_range(0.2..3.0), rng.gen_range(-1.0..1.0));
            assert!(rel_close(lhs.eval(r, t).unwrap(), rhs.eval(r, t).unwrap(), 1e-12));
            assert!(rel_close(
                a.conj().eval(r, t).unwrap(),
                a.eval(r, t).unwrap().conj(),
                1e-13
            ));
        }
    }

    #[test]
    fn pruning_drops_relative_noise() {
        let p = GenPoly::from_terms([
            (MonomialKey::new(q(0, 1), q(0, 1)), c(1.0)),
            (MonomialKey::new(q(2, 1), q(0, 1)), c(1e-16)),
        ]);
        assert_eq!(p.len(), 1);
        let cancel = GenPoly::abs_pow(q(2, 1)).sub(&GenPoly::abs_pow(q(2, 1)));
        assert!(cancel.is_empty());
    }

    #[test]
    fn records_round_trip_and_reject_branches() {
        let p = GenPoly::abs_pow(q(3, 2)).add(&GenPoly::z_pow(q(2, 1)).scale(Complex64::new(0.5, -1.0)));
        let recs = p.to_records().unwrap();
        assert_eq!(GenPoly::from_records(&recs).unwrap(), p);
        assert!(GenPoly::z_pow(q(1, 2)).to_records().is_err());
    }

    #[test]
    fn compiled_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_poly(&mut rng, 8);
        let cp = p.compile();
        for _ in 0..10 {
            let (r, t) = (rng.gen_range(0.01..10.0), rng.gen_range(-3.0..3.0));
            assert!(rel_close(cp.eval(r, t).unwrap(), p.eval(r, t).unwrap(), 1e-12));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_poly() -> impl Strategy<Value = GenPoly> {
            prop::collection::vec(
                (-4i64..8, 1i64..4, -2i64..3, -1.0f64..1.0, -1.0f64..1.0),
                1..6,
            )
            .prop_map(|v| {
                GenPoly::from_terms(v.into_iter().map(|(pn, pd, w, re, im)| {
                    let p = Rational64::new(pn, pd);
                    (MonomialKey::from_exponents(p, p - w), Complex64::new(re, im))
                }))
            })
        }

        fn close(a: Complex64, b: Complex64, scale: f64, tol: f64) -> bool {
            (a - b).norm() <= tol * scale.max(1e-12)
        }

        fn abs_eval(p: &GenPoly, r: f64, _t: f64) -> f64 {
            p.terms()
                .map(|(k, c)| c.norm() * r.powf(ratio_to_f64(k.s)))
                .sum()
        }

        proptest! {
            #[test]
            fn ring_axioms(a in arb_poly(), b in arb_poly(), c in arb_poly(),
                           r in 0.2f64..4.0, t in -3.0f64..3.0) {
                let scale = abs_eval(&a, r, t) * (abs_eval(&b, r, t) + abs_eval(&c, r, t));
                let lhs = a.mul(&b.add(&c)).eval(r, t).unwrap();
                let rhs = a.mul(&b).add(&a.mul(&c)).eval(r, t).unwrap();
                prop_assert!(close(lhs, rhs, scale, 1e-12));
                let s3 = abs_eval(&a, r, t) * abs_eval(&b, r, t) * abs_eval(&c, r, t);
                let l = a.mul(&b).mul(&c).eval(r, t).unwrap();
                let rr = a.mul(&b.mul(&c)).eval(r, t).unwrap();
                prop_assert!(close(l, rr, s3, 1e-12));
            }

            #[test]
            fn leibniz(a in arb_poly(), b in arb_poly(), r in 0.2f64..4.0, t in -3.0f64..3.0) {
                let lhs = a.mul(&b).d_z().eval(r, t).unwrap();
                let rhs = a.d_z().mul(&b).add(&a.mul(&b.d_z())).eval(r, t).unwrap();
                let scale = abs_eval(&a.d_z(), r, t) * abs_eval(&b, r, t)
                    + abs_eval(&a, r, t) * abs_eval(&b.d_z(), r, t);
                prop_assert!(close(lhs, rhs, scale, 1e-10));
            }

            #[test]
            fn self_conjugate_is_real(a in arb_poly(), r in 0.2f64..4.0, t in -3.0f64..3.0) {
                let h = a.add(&a.conj());
                let v = h.eval(r, t).unwrap();
                prop_assert!(v.im.abs() <= 1e-12 * abs_eval(&h, r, t).max(1e-300));
            }
        }
    }
}
