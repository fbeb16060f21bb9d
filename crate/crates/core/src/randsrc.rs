//! Seeded sampling of independent mean-0, variance-1 sub-Gaussian coordinates.
//!
//! Three families are supported. Each carries its exact moments and the
//! value of its ψ₂ norm `sup_{r≥1} r^{-1/2} (E|ζ|^r)^{1/r}`, which for all
//! three is attained at `r = 1`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LawFamily {
    Gaussian,
    Rademacher,
    /// Uniform on `[-√3, √3]`.
    UniformScaled,
}

/// Raw moments `E ζ^k` for k = 3, 4, 6, 8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu3: f64,
    pub mu4: f64,
    pub mu6: f64,
    pub mu8: f64,
}

impl Moments {
    pub fn excess_kurtosis(&self) -> f64 {
        self.mu4 - 3.0
    }
}

/// A mean-0, variance-1 coordinate law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubGaussianLaw {
    pub family: LawFamily,
}

impl SubGaussianLaw {
    pub const GAUSSIAN: SubGaussianLaw = SubGaussianLaw { family: LawFamily::Gaussian };
    pub const RADEMACHER: SubGaussianLaw = SubGaussianLaw { family: LawFamily::Rademacher };
    pub const UNIFORM: SubGaussianLaw = SubGaussianLaw { family: LawFamily::UniformScaled };

    pub const ALL: [SubGaussianLaw; 3] = [Self::GAUSSIAN, Self::RADEMACHER, Self::UNIFORM];

    pub fn name(&self) -> &'static str {
        match self.family {
            LawFamily::Gaussian => "gaussian",
            LawFamily::Rademacher => "rademacher",
            LawFamily::UniformScaled => "uniform",
        }
    }

    /// ψ₂ norm of the law, used as the sub-Gaussian proxy γ.
    pub fn gamma(&self) -> f64 {
        match self.family {
            LawFamily::Gaussian => (2.0 / std::f64::consts::PI).sqrt(),
            LawFamily::Rademacher => 1.0,
            LawFamily::UniformScaled => SQRT3 / 2.0,
        }
    }

    pub fn moments(&self) -> Moments {
        law_moments(*self)
    }

    pub fn excess_kurtosis(&self) -> f64 {
        self.moments().excess_kurtosis()
    }

    /// Absolute moment `E|ζ|^r` for real `r > 0`.
    pub fn abs_moment(&self, r: f64) -> f64 {
        match self.family {
            LawFamily::Gaussian => {
                2f64.powf(r / 2.0) * statrs::function::gamma::gamma((r + 1.0) / 2.0)
                    / std::f64::consts::PI.sqrt()
            }
            LawFamily::Rademacher => 1.0,
            LawFamily::UniformScaled => 3f64.powf(r / 2.0) / (r + 1.0),
        }
    }

    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            LawFamily::Gaussian => rng.sample(StandardNormal),
            LawFamily::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            LawFamily::UniformScaled => rng.random_range(-SQRT3..=SQRT3),
        }
    }

    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.draw(rng);
        }
    }
}

impl fmt::Display for SubGaussianLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SubGaussianLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Self::GAUSSIAN),
            "rademacher" => Ok(Self::RADEMACHER),
            "uniform" => Ok(Self::UNIFORM),
            other => Err(Error::UnsupportedLaw(format!(
                "unknown law '{other}' (expected gaussian | rademacher | uniform)"
            ))),
        }
    }
}

impl Serialize for SubGaussianLaw {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SubGaussianLaw {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Exact closed-form moments of a supported law.
pub fn law_moments(law: SubGaussianLaw) -> Moments {
    match law.family {
        LawFamily::Gaussian => Moments { mu3: 0.0, mu4: 3.0, mu6: 15.0, mu8: 105.0 },
        LawFamily::Rademacher => Moments { mu3: 0.0, mu4: 1.0, mu6: 1.0, mu8: 1.0 },
        // E x^k = 3^{k/2} / (k + 1) on [-√3, √3]
        LawFamily::UniformScaled => Moments {
            mu3: 0.0,
            mu4: 9.0 / 5.0,
            mu6: 27.0 / 7.0,
            mu8: 9.0,
        },
    }
}

/// Identifies one reproducible random stream: `(master_seed, stream_id)`.
///
/// Streams are ChaCha20 keyed by the master seed with the 64-bit stream
/// selector set to `stream_id`, so replicate `r` draws the same numbers no
/// matter which worker runs it or in what order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        SeedSpec { master_seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// A derived stream, e.g. for the β and ε draws of one replicate.
    pub fn child(&self, tag: u64) -> SeedSpec {
        SeedSpec {
            master_seed: self.master_seed,
            stream_id: splitmix64(splitmix64(self.stream_id) ^ tag.rotate_left(32) ^ 0xA5A5_5A5A),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `d` independent draws from `law`, a pure function of `seed`.
pub fn sample_vector(law: SubGaussianLaw, d: usize, seed: SeedSpec) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::EmptyVector);
    }
    let mut rng = seed.rng();
    let mut out = vec![0.0; d];
    law.fill(&mut rng, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empirical_moment(x: &[f64], k: i32) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().map(|v| v.powi(k)).sum::<f64>() / n;
        let m2 = x.iter().map(|v| v.powi(2 * k)).sum::<f64>() / n;
        (m, ((m2 - m * m) / n).sqrt())
    }

    #[test]
    fn rademacher_support() {
        let v = sample_vector(SubGaussianLaw::RADEMACHER, 4, SeedSpec::new(7, 0)).unwrap();
        assert!(v.iter().all(|&x| x == 1.0 || x == -1.0));
    }

    #[test]
    fn uniform_support() {
        for s in 0..200 {
            let v = sample_vector(SubGaussianLaw::UNIFORM, 1, SeedSpec::new(s, s)).unwrap();
            assert!(v[0].abs() <= SQRT3);
        }
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(
            sample_vector(SubGaussianLaw::GAUSSIAN, 0, SeedSpec::new(1, 1)),
            Err(Error::EmptyVector)
        ));
    }

    #[test]
    fn closed_form_moments() {
        assert_eq!(
            law_moments(SubGaussianLaw::GAUSSIAN),
            Moments { mu3: 0.0, mu4: 3.0, mu6: 15.0, mu8: 105.0 }
        );
        assert_eq!(
            law_moments(SubGaussianLaw::RADEMACHER),
            Moments { mu3: 0.0, mu4: 1.0, mu6: 1.0, mu8: 1.0 }
        );
        let u = law_moments(SubGaussianLaw::UNIFORM);
        assert_eq!((u.mu3, u.mu4, u.mu6, u.mu8), (0.0, 9.0 / 5.0, 27.0 / 7.0, 9.0));
    }

    #[test]
    fn uniform_moments_by_quadrature() {
        // midpoint rule on x^k / (2√3) over [-√3, √3]
        let m = 200_000;
        let h = 2.0 * SQRT3 / m as f64;
        let mom = |k: i32| {
            (0..m)
                .map(|i| (-SQRT3 + (i as f64 + 0.5) * h).powi(k))
                .sum::<f64>()
                * h
                / (2.0 * SQRT3)
        };
        let u = law_moments(SubGaussianLaw::UNIFORM);
        assert!((mom(4) - u.mu4).abs() < 1e-8);
        assert!((mom(6) - u.mu6).abs() < 1e-8);
        assert!((mom(8) - u.mu8).abs() < 1e-7);
    }

    #[test]
    fn kurtosis_ordering() {
        for law in SubGaussianLaw::ALL {
            let m = law.moments();
            assert!(m.mu4 >= 1.0);
            assert!(m.excess_kurtosis() >= -2.0);
            if law != SubGaussianLaw::RADEMACHER {
                assert!(m.excess_kurtosis() > -2.0);
            }
        }
    }

    #[test]
    fn gamma_is_psi2_norm() {
        for law in SubGaussianLaw::ALL {
            let mut sup: f64 = 0.0;
            for i in 0..4000 {
                let r = 1.0 + i as f64 * 0.01;
                sup = sup.max(law.abs_moment(r).powf(1.0 / r) / r.sqrt());
            }
            assert!((sup - law.gamma()).abs() < 1e-12, "{law}: {sup}");
        }
    }

    #[test]
    fn gaussian_fourth_moment_mc() {
        let v = sample_vector(SubGaussianLaw::GAUSSIAN, 1_000_000, SeedSpec::new(2024, 3)).unwrap();
        let (m4, se) = empirical_moment(&v, 4);
        assert!((m4 - 3.0).abs() < 3.0 * se, "m4={m4} se={se}");
    }

    #[test]
    fn moments_within_five_stderr_all_laws() {
        for (i, law) in SubGaussianLaw::ALL.into_iter().enumerate() {
            let v = sample_vector(law, 1_000_000, SeedSpec::new(99, i as u64)).unwrap();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 5.0 / n.sqrt());
            let (m2, se2) = empirical_moment(&v, 2);
            assert!((m2 - 1.0).abs() <= 5.0 * se2.max(1e-15), "{law} var {var}");
            let m = law.moments();
            for (k, target) in [(3, m.mu3), (4, m.mu4), (6, m.mu6), (8, m.mu8)] {
                let (est, se) = empirical_moment(&v, k);
                assert!(
                    (est - target).abs() <= 5.0 * se.max(1e-15),
                    "{law} k={k}: {est} vs {target} (se {se})"
                );
            }
        }
    }

    #[test]
    fn streams_are_deterministic_and_decorrelated() {
        let n = 100_000;
        let a = sample_vector(SubGaussianLaw::GAUSSIAN, n, SeedSpec::new(5, 1)).unwrap();
        let a2 = sample_vector(SubGaussianLaw::GAUSSIAN, n, SeedSpec::new(5, 1)).unwrap();
        let b = sample_vector(SubGaussianLaw::GAUSSIAN, n, SeedSpec::new(5, 2)).unwrap();
        assert_eq!(a, a2);
        let rho = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(rho.abs() < 5.0 / (n as f64).sqrt());
        let c = SeedSpec::new(5, 1).child(1);
        assert_ne!(c, SeedSpec::new(5, 1).child(2));
    }

    #[test]
    fn law_names_round_trip() {
        for law in SubGaussianLaw::ALL {
            assert_eq!(law.name().parse::<SubGaussianLaw>().unwrap(), law);
        }
        assert!("cauchy".parse::<SubGaussianLaw>().is_err());
    }
}
