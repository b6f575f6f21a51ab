//! Dirichlet Green's function of a disk, the three-region comparison bound
//! and the Poisson-integral harmonic corrector.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskGreen {
    pub radius: f64,
}

impl DiskGreen {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config("radius", "must be positive and finite"));
        }
        Ok(DiskGreen { radius })
    }

    fn inside(&self, p: Complex64) -> bool {
        p.norm() <= self.radius * (1.0 + 1e-12)
    }

    /// `G(y, η) = (1/2π)[log|y − η| − log|R − y η̄ / R|]`, the image form of
    /// `log((|η|/R)|y − R²η/|η|²|)` that stays finite at `η = 0`.
    pub fn green(&self, y: Complex64, eta: Complex64) -> Result<f64> {
        if !self.inside(y) || !self.inside(eta) {
            return Err(Error::PointOutsideDisk);
        }
        if y == eta {
            return Err(Error::CoincidentPoints);
        }
        let r = self.radius;
        Ok(((y - eta).norm().ln() - (r - y * eta.conj() / r).norm().ln()) / (2.0 * PI))
    }

    /// `∫_{B_R} G(y, η) f(η) dη` in polar coordinates about `y`, with
    /// `ρ = ρ_max(φ) t²` to smooth the logarithm.
    pub fn integrate(&self, y: Complex64, f: impl Fn(Complex64) -> f64, angles: usize, nodes: usize) -> Result<f64> {
        if y.norm() >= self.radius {
            return Err(Error::PointOutsideDisk);
        }
        let gl = GaussLegendre::new(NonZeroUsize::new(nodes).ok_or(Error::config("nodes", "must be positive"))?);
        let r = self.radius;
        let mut total = 0.0;
        for a in 0..angles {
            let phi = 2.0 * PI * (a as f64 + 0.5) / angles as f64;
            let e = Complex64::from_polar(1.0, phi);
            // |y + ρ e| = R
            let b = (y.conj() * e).re;
            let rho_max = -b + (b * b + r * r - y.norm_sqr()).sqrt();
            total += gl.integrate(0.0, 1.0, |t| {
                if t == 0.0 {
                    return 0.0;
                }
                let rho = rho_max * t * t;
                let eta = y + e * rho;
                let g = ((rho).ln() - (r - y * eta.conj() / r).norm().ln()) / (2.0 * PI);
                g * f(eta) * rho * 2.0 * rho_max * t
            });
        }
        Ok(total * 2.0 * PI / angles as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// `|η| < |y|/2`
    Inner,
    /// `|y − η| < |y|/2`
    Near,
    Outer,
}

impl Region {
    pub fn classify(y: Complex64, eta: Complex64) -> Region {
        let half = y.norm() / 2.0;
        if eta.norm() < half {
            Region::Inner
        } else if (y - eta).norm() < half {
            Region::Near
        } else {
            Region::Outer
        }
    }

    pub fn bound(self, y: Complex64, eta: Complex64) -> f64 {
        let ly = y.norm().ln();
        match self {
            Region::Inner => ly + eta.norm().ln().abs(),
            Region::Near => ly + (y - eta).norm().ln().abs(),
            Region::Outer => y.norm() / eta.norm(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Inner => "sigma1",
            Region::Near => "sigma2",
            Region::Outer => "sigma3",
        }
    }

    pub const ALL: [Region; 3] = [Region::Inner, Region::Near, Region::Outer];
}

/// Relative width of the band around a region boundary inside which both
/// neighbouring bounds are evaluated.
const BOUNDARY_BAND: f64 = 1e-9;

/// `|G(y,η) − G(0,η)| / bound`, and the region it is charged to. Points on a
/// region boundary take the larger of the adjacent ratios.
pub fn region_ratio(g: &DiskGreen, y: Complex64, eta: Complex64) -> Result<(Region, f64)> {
    let diff = (g.green(y, eta)? - g.green(Complex64::new(0.0, 0.0), eta)?).abs();
    let own = Region::classify(y, eta);
    let mut best = (own, diff / own.bound(y, eta));
    let half = y.norm() / 2.0;
    let near_inner = (eta.norm() - half).abs() <= BOUNDARY_BAND * half;
    let near_near = ((y - eta).norm() - half).abs() <= BOUNDARY_BAND * half;
    for (flag, other) in [(near_inner, Region::Inner), (near_near, Region::Near)] {
        if flag && other != own {
            let ratio = diff / other.bound(y, eta);
            if ratio > best.1 {
                best = (own, ratio);
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStat {
    pub name: String,
    #[serde(rename = "empirical_C")]
    pub empirical_c: f64,
    pub samples: usize,
}

/// Random `y` with `2 < |y| < R` and `η` uniform in the disk; batches are
/// seeded independently so the result does not depend on scheduling.
pub fn region_constants(g: &DiskGreen, samples: usize, seed: u64) -> Result<Vec<RegionStat>> {
    const BATCH: usize = 1024;
    let r = g.radius;
    if r <= 2.0 {
        return Err(Error::config("radius", "region bound needs R > 2"));
    }
    let batches = samples.div_ceil(BATCH);
    let partial: Vec<Result<[(f64, usize); 3]>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut acc = [(0.0f64, 0usize); 3];
            let count = BATCH.min(samples - b * BATCH);
            for _ in 0..count {
                let ry = rng.gen_range(2.0..r);
                let y = Complex64::from_polar(ry.min(r * (1.0 - 1e-9)), rng.gen_range(0.0..2.0 * PI));
                let eta = Complex64::from_polar(r * rng.gen::<f64>().sqrt(), rng.gen_range(0.0..2.0 * PI));
                if eta == y || eta.norm() == 0.0 {
                    continue;
                }
                let (region, ratio) = region_ratio(g, y, eta)?;
                let slot = &mut acc[region as usize];
                slot.0 = slot.0.max(ratio);
                slot.1 += 1;
            }
            Ok(acc)
        })
        .collect();
    let mut total = [(0.0f64, 0usize); 3];
    for p in partial {
        for (t, a) in total.iter_mut().zip(p?) {
            t.0 = t.0.max(a.0);
            t.1 += a.1;
        }
    }
    Ok(Region::ALL
        .iter()
        .zip(total)
        .map(|(reg, (c, k))| RegionStat {
            name: reg.name().to_string(),
            empirical_c: c,
            samples: k,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBound {
    pub radius: f64,
    pub regions: Vec<RegionStat>,
    /// Same scan with twice the samples.
    pub doubled_samples: Vec<RegionStat>,
    /// Same sample count on a disk of twice the radius.
    pub doubled_radius: Vec<RegionStat>,
    pub pass: bool,
}

impl RegionBound {
    /// Whether every empirical constant is at most `c`.
    pub fn within(&self, c: f64) -> bool {
        self.regions
            .iter()
            .chain(&self.doubled_samples)
            .chain(&self.doubled_radius)
            .all(|s| s.empirical_c.is_finite() && s.empirical_c <= c)
    }
}

/// Largest change factor tolerated between a scan and its doubled version.
pub const STABILITY_FACTOR: f64 = 2.0;

pub fn verify_region_bound(g: &DiskGreen, samples: usize, seed: u64) -> Result<RegionBound> {
    let regions = region_constants(g, samples, seed)?;
    let doubled_samples = region_constants(g, 2 * samples, seed)?;
    let doubled_radius = region_constants(&DiskGreen::new(2.0 * g.radius)?, samples, seed)?;
    let stable = |a: &[RegionStat], b: &[RegionStat]| {
        a.iter().zip(b).all(|(x, y)| {
            x.empirical_c.is_finite()
                && y.empirical_c.is_finite()
                && y.empirical_c <= STABILITY_FACTOR * x.empirical_c
                && x.empirical_c <= STABILITY_FACTOR * y.empirical_c
        })
    };
    let pass = stable(&regions, &doubled_samples) && stable(&regions, &doubled_radius);
    Ok(RegionBound {
        radius: g.radius,
        regions,
        doubled_samples,
        doubled_radius,
        pass,
    })
}

/// Harmonic extension of mean-zero boundary data on `|y| = R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicCorrector {
    pub radius: f64,
    /// Boundary values on a uniform grid with the mean removed.
    pub data: Vec<f64>,
}

pub const POISSON_NODES: usize = 2048;

impl HarmonicCorrector {
    pub fn new(radius: f64, boundary: &[f64]) -> Result<Self> {
        if boundary.is_empty() {
            return Err(Error::config("boundary", "no boundary values"));
        }
        DiskGreen::new(radius)?;
        let mean = boundary.iter().sum::<f64>() / boundary.len() as f64;
        Ok(HarmonicCorrector {
            radius,
            data: boundary.iter().map(|v| v - mean).collect(),
        })
    }

    /// Samples `f(θ)` at [`POISSON_NODES`] angles.
    pub fn from_fn(radius: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = (0..POISSON_NODES)
            .map(|j| f(2.0 * PI * j as f64 / POISSON_NODES as f64))
            .collect();
        Self::new(radius, &values)
    }

    /// Poisson integral by the trapezoid rule.
    pub fn eval(&self, y: Complex64) -> f64 {
        let m = self.data.len();
        let (r, big) = (y.norm(), self.radius);
        let theta = y.arg();
        let num = big * big - r * r;
        self.data
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let phi = 2.0 * PI * j as f64 / m as f64;
                f * num / (big * big - 2.0 * big * r * (theta - phi).cos() + r * r)
            })
            .sum::<f64>()
            / m as f64
    }

    pub fn oscillation(&self) -> f64 {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        hi - lo
    }

    /// `sup |ψ(y)|/|y|` and `sup |ψ|` over radii in `(0, 0.99R]` and 64 angles.
    pub fn scan(&self) -> CorrectorScan {
        let (mut growth, mut sup): (f64, f64) = (0.0, 0.0);
        for a in 1..=99 {
            let r = self.radius * a as f64 / 100.0;
            for b in 0..64 {
                let v = self.eval(Complex64::from_polar(r, 2.0 * PI * b as f64 / 64.0)).abs();
                growth = growth.max(v / r);
                sup = sup.max(v);
            }
        }
        let boundary_sup = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let osc = self.oscillation();
        CorrectorScan {
            growth,
            normalized: if osc > 0.0 { growth * self.radius / osc } else { 0.0 },
            interior_sup: sup,
            boundary_sup,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorScan {
    /// `sup |ψ(y)| / |y|`.
    pub growth: f64,
    /// `growth · R / oscillation`.
    pub normalized: f64,
    pub interior_sup: f64,
    pub boundary_sup: f64,
}

impl CorrectorScan {
    pub fn maximum_principle(&self) -> bool {
        self.interior_sup <= self.boundary_sup * (1.0 + 1e-12) + 1e-14
    }
}

/// Mean-zero trigonometric polynomial of degree at most 8 with random
/// coefficients in `[−1, 1]`.
pub fn random_trig_data(rng: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 {
    let degree = rng.gen_range(1..=8);
    let coeffs: Vec<(f64, f64)> = (0..degree)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    move |t| {
        coeffs
            .iter()
            .enumerate()
            .map(|(m, (a, b))| {
                let k = (m + 1) as f64;
                a * (k * t).cos() + b * (k * t).sin()
            })
            .sum()
    }
}

/// Functions vanishing on `|x| = R` paired with their Laplacians.
pub fn manufactured(radius: f64) -> Vec<(&'static str, Box<dyn Fn(Complex64) -> f64 + Send + Sync>, Box<dyn Fn(Complex64) -> f64 + Send + Sync>)> {
    let r2 = radius * radius;
    let a = PI / r2;
    vec![
        (
            "paraboloid",
            Box::new(move |x: Complex64| r2 - x.norm_sqr()),
            Box::new(|_| -4.0),
        ),
        (
            "tilted",
            Box::new(move |x: Complex64| (r2 - x.norm_sqr()) * x.re),
            Box::new(|x: Complex64| -8.0 * x.re),
        ),
        (
            "sine",
            Box::new(move |x: Complex64| (a * x.norm_sqr()).sin()),
            Box::new(move |x: Complex64| {
                let s = x.norm_sqr();
                4.0 * a * (a * s).cos() - 4.0 * a * a * s * (a * s).sin()
            }),
        ),
    ]
}

/// Worst absolute error of `u(y) = ∫ G(y,η) Δu(η) dη` over a few interior points.
pub fn representation_error(g: &DiskGreen) -> Result<Vec<(String, f64)>> {
    let pts = [0.0, 0.3, 0.6, 0.9];
    manufactured(g.radius)
        .into_iter()
        .map(|(name, u, lap)| {
            let mut worst: f64 = 0.0;
            for (k, s) in pts.iter().enumerate() {
                let y = Complex64::from_polar(s * g.radius, 0.7 * k as f64);
                let approx = g.integrate(y, &lap, 256, 64)?;
                worst = worst.max((approx - u(y)).abs());
            }
            Ok((name.to_string(), worst))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn hand_value() {
        let g = DiskGreen::new(1.0).unwrap();
        let v = g.green(c(0.5, 0.0), c(-0.5, 0.0)).unwrap();
        assert!((v + 1.25f64.ln() / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn origin_limit() {
        let g = DiskGreen::new(3.0).unwrap();
        let y = c(1.0, 0.5);
        let v = g.green(y, c(0.0, 0.0)).unwrap();
        assert!((v - (y.norm().ln() - 3f64.ln()) / (2.0 * PI)).abs() < 1e-15);
        // original form with the image point
        let eta = c(1e-7, -2e-7);
        let img = eta * 9.0 / eta.norm_sqr();
        let direct = ((y - eta).norm().ln() - (eta.norm() / 3.0 * (y - img).norm()).ln()) / (2.0 * PI);
        assert!((g.green(y, eta).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn symmetric_and_vanishing_on_boundary() {
        let g = DiskGreen::new(2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let y = Complex64::from_polar(2.5 * rng.gen::<f64>(), rng.gen_range(0.0..7.0));
            let e = Complex64::from_polar(2.5 * rng.gen::<f64>(), rng.gen_range(0.0..7.0));
            assert!((g.green(y, e).unwrap() - g.green(e, y).unwrap()).abs() < 1e-12);
            let b = Complex64::from_polar(2.5, rng.gen_range(0.0..7.0));
            assert!(g.green(b, e).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let g = DiskGreen::new(1.0).unwrap();
        assert_eq!(g.green(c(0.2, 0.0), c(0.2, 0.0)), Err(Error::CoincidentPoints));
        assert_eq!(g.green(c(1.5, 0.0), c(0.2, 0.0)), Err(Error::PointOutsideDisk));
    }

    #[test]
    fn representation_reproduces_manufactured_solutions() {
        for r in [1.0, 7.0] {
            let g = DiskGreen::new(r).unwrap();
            for (name, err) in representation_error(&g).unwrap() {
                assert!(err < 1e-6, "{name} R={r}: {err:e}");
            }
        }
    }

    #[test]
    fn deep_outer_region_ratio_is_small() {
        let g = DiskGreen::new(100.0).unwrap();
        let (reg, ratio) = region_ratio(&g, c(3.0, 0.0), c(0.0, 50.0)).unwrap();
        assert_eq!(reg, Region::Outer);
        assert!(ratio < 0.1, "{ratio}");
    }

    #[test]
    fn boundary_points_take_the_larger_ratio() {
        let g = DiskGreen::new(100.0).unwrap();
        let y = c(8.0, 0.0);
        let eta = c(0.0, 4.0);
        let (_, on) = region_ratio(&g, y, eta).unwrap();
        let diff = (g.green(y, eta).unwrap() - g.green(c(0.0, 0.0), eta).unwrap()).abs();
        let expect = (diff / Region::Inner.bound(y, eta)).max(diff / Region::Outer.bound(y, eta));
        assert_eq!(on, expect);
    }

    #[test]
    fn region_constants_are_stable() {
        let g = DiskGreen::new(100.0).unwrap();
        let b = verify_region_bound(&g, 10_000, 3).unwrap();
        assert!(b.pass, "{b:?}");
        assert!(b.regions.iter().all(|s| s.samples > 0));
        let c_max = b
            .regions
            .iter()
            .chain(&b.doubled_samples)
            .chain(&b.doubled_radius)
            .map(|s| s.empirical_c)
            .fold(0.0, f64::max);
        assert!(b.within(c_max) && b.within(2.0 * c_max) && !b.within(0.5 * c_max));
    }

    #[test]
    fn corrector_cosine_is_exact() {
        let h = HarmonicCorrector::from_fn(1.0, f64::cos).unwrap();
        let y = Complex64::from_polar(0.4, 0.9);
        assert!((h.eval(y) - 0.4 * 0.9f64.cos()).abs() < 1e-13);
        let s = h.scan();
        assert!((s.growth - 1.0).abs() < 1e-8, "{}", s.growth);
    }

    #[test]
    fn constant_data_gives_zero() {
        let h = HarmonicCorrector::from_fn(4.0, |_| 3.5).unwrap();
        assert!(h.eval(c(1.0, 2.0)).abs() < 1e-14);
    }

    #[test]
    fn random_trig_growth_and_maximum_principle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 0..10 {
            let r = [1.0, 10.0, 100.0][k % 3];
            let h = HarmonicCorrector::from_fn(r, random_trig_data(&mut rng)).unwrap();
            let s = h.scan();
            assert!(s.normalized <= 2.0, "{s:?}");
            assert!(s.maximum_principle(), "{s:?}");
        }
    }
}
