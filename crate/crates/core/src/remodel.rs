//! Data generation for the random-effects model `y = Xβ + ε` with
//! `Var(βⱼ) = σ₀²η₀²/p`, `Var(εᵢ) = σ₀²`, and for the dependent-effects
//! variant `ỹ = Xβ̃ + ε` in which β̃ is coupled to an independent β.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matio;
use crate::randsrc::{SeedSpec, SubGaussianLaw};

const STREAM_DESIGN_LEFT: u64 = 1;
const STREAM_DESIGN_RIGHT: u64 = 2;
const STREAM_BETA: u64 = 11;
const STREAM_EPS: u64 = 12;
const STREAM_PERTURB: u64 = 13;
const STREAM_SPARSE: u64 = 14;

/// The variance components `θ₀ = (σ₀², η₀²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub sigma0_sq: f64,
    pub eta0_sq: f64,
}

impl ModelParams {
    pub fn new(sigma0_sq: f64, eta0_sq: f64) -> Result<Self> {
        if !(sigma0_sq.is_finite() && sigma0_sq > 0.0) {
            return Err(Error::InvalidParameter(format!("σ₀² must be finite and > 0, got {sigma0_sq}")));
        }
        if !(eta0_sq.is_finite() && eta0_sq >= 0.0) {
            return Err(Error::InvalidParameter(format!("η₀² must be finite and ≥ 0, got {eta0_sq}")));
        }
        Ok(ModelParams { sigma0_sq, eta0_sq })
    }

    /// `τ₀² = σ₀²η₀²`, so that `Var(βⱼ) = τ₀²/p`.
    pub fn tau0_sq(&self) -> f64 {
        self.sigma0_sq * self.eta0_sq
    }

    pub fn beta_variance(&self, p: usize) -> f64 {
        self.tau0_sq() / p as f64
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.sigma0_sq, self.eta0_sq]
    }
}

/// How the design matrix is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "lambdas")]
pub enum Design {
    /// iid standard normal entries.
    GaussianIid,
    /// `√p` times the rectangular identity.
    Identity,
    /// `p⁻¹XXᵀ` has exactly these eigenvalues (length n).
    FixedSpectrum(Vec<f64>),
}

/// Uniformly distributed `d×k` matrix with orthonormal columns (`k ≤ d`).
pub fn haar_frame(d: usize, k: usize, seed: SeedSpec) -> DMatrix<f64> {
    let mut rng = seed.rng();
    let g = DMatrix::<f64>::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let r_diag: Vec<f64> = qr.r().diagonal().iter().copied().collect();
    let mut q = qr.q();
    // sign fix so the distribution is Haar rather than QR-biased
    for (j, r) in r_diag.iter().enumerate() {
        if *r < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn gen_design(n: usize, p: usize, design: &Design, seed: SeedSpec) -> Result<DMatrix<f64>> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidParameter(format!("design needs n, p ≥ 1, got n={n}, p={p}")));
    }
    match design {
        Design::GaussianIid => {
            let mut rng = seed.child(STREAM_DESIGN_LEFT).rng();
            // fill row by row so X is independent of storage order
            let mut x = DMatrix::zeros(n, p);
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = StandardNormal.sample(&mut rng);
                }
            }
            Ok(x)
        }
        Design::Identity => {
            let s = (p as f64).sqrt();
            Ok(DMatrix::from_fn(n, p, |i, j| if i == j { s } else { 0.0 }))
        }
        Design::FixedSpectrum(lambdas) => {
            if lambdas.len() != n {
                return Err(Error::DimensionMismatch(format!("{} eigenvalues for n = {n}", lambdas.len())));
            }
            if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
                return Err(Error::InvalidParameter(format!("eigenvalue {bad} is negative or non-finite")));
            }
            let k = n.min(p);
            if lambdas[k..].iter().any(|&l| l > 0.0) {
                return Err(Error::InvalidParameter(format!("at most p = {p} eigenvalues can be positive")));
            }
            let u = haar_frame(n, n, seed.child(STREAM_DESIGN_LEFT));
            let w = haar_frame(p, k, seed.child(STREAM_DESIGN_RIGHT));
            let pf = p as f64;
            let mut us = u.columns(0, k).into_owned();
            for (j, l) in lambdas[..k].iter().enumerate() {
                us.column_mut(j).scale_mut((pf * l).sqrt());
            }
            Ok(us * w.transpose())
        }
    }
}

/// Relationship between the effects that generate `y` and an independent
/// coupling partner β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CouplingScheme {
    None,
    /// `β̃ = β + δξ` with ξ an independent copy of β.
    AdditivePerturb { delta: f64 },
    /// `β̃` is β with a random `⌊s·p⌋` subset of coordinates set to zero.
    SparseZero { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub scheme: CouplingScheme,
    pub beta_tilde: Vec<f64>,
    /// `‖β̃ − β‖`.
    pub coupling_distance: f64,
    /// `‖ξ‖` for additive perturbations.
    pub perturbation_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub beta_true: Vec<f64>,
    pub eps_true: Vec<f64>,
    pub params: ModelParams,
    pub beta_law: SubGaussianLaw,
    pub eps_law: SubGaussianLaw,
    pub coupling: Option<Coupling>,
    pub seed: SeedSpec,
}

#[derive(Serialize)]
struct Truth<'a> {
    params: &'a ModelParams,
    beta_law: SubGaussianLaw,
    eps_law: SubGaussianLaw,
    seed: SeedSpec,
    n: usize,
    p: usize,
    coupling: Option<&'a Coupling>,
    beta: &'a [f64],
    eps: &'a [f64],
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// The effects that actually generated `y`.
    pub fn effective_beta(&self) -> &[f64] {
        match &self.coupling {
            Some(c) => &c.beta_tilde,
            None => &self.beta_true,
        }
    }

    /// Write `X.csv`, `y.csv` and `truth.json` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        matio::save_matrix_csv(&self.x, &dir.join("X.csv"))?;
        matio::save_vector_csv(&self.y, &dir.join("y.csv"))?;
        let truth = Truth {
            params: &self.params,
            beta_law: self.beta_law,
            eps_law: self.eps_law,
            seed: self.seed,
            n: self.n(),
            p: self.p(),
            coupling: self.coupling.as_ref(),
            beta: &self.beta_true,
            eps: &self.eps_true,
        };
        fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&truth)? + "\n")?;
        Ok(())
    }
}

fn draw_effects(
    p: usize,
    n: usize,
    params: &ModelParams,
    beta_law: SubGaussianLaw,
    eps_law: SubGaussianLaw,
    seed: SeedSpec,
) -> (Vec<f64>, Vec<f64>) {
    let beta_sd = params.beta_variance(p).sqrt();
    let eps_sd = params.sigma0_sq.sqrt();
    let mut beta = vec![0.0; p];
    beta_law.fill(&mut seed.child(STREAM_BETA).rng(), &mut beta);
    beta.iter_mut().for_each(|b| *b *= beta_sd);
    let mut eps = vec![0.0; n];
    eps_law.fill(&mut seed.child(STREAM_EPS).rng(), &mut eps);
    eps.iter_mut().for_each(|e| *e *= eps_sd);
    (beta, eps)
}

fn response(x: &DMatrix<f64>, beta: &[f64], eps: &[f64]) -> Vec<f64> {
    let xb = x * DVector::from_column_slice(beta);
    xb.iter().zip(eps).map(|(a, e)| a + e).collect()
}

/// Effects, errors and response for one draw; the design is borrowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub y: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: Vec<f64>,
    pub coupling: Option<Coupling>,
}

fn check_nonempty(x: &DMatrix<f64>) -> Result<(usize, usize)> {
    let (n, p) = x.shape();
    if n == 0 || p == 0 {
        return Err(Error::InvalidParameter("empty design".into()));
    }
    Ok((n, p))
}

/// Draw `(β, ε)` and form `y = Xβ + ε`.
pub fn draw_independent(
    x: &DMatrix<f64>,
    params: ModelParams,
    beta_law: SubGaussianLaw,
    eps_law: SubGaussianLaw,
    seed: SeedSpec,
) -> Result<Response> {
    let (n, p) = check_nonempty(x)?;
    let (beta, eps) = draw_effects(p, n, &params, beta_law, eps_law, seed);
    let y = response(x, &beta, &eps);
    Ok(Response { y, beta, eps, coupling: None })
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Same `(β, ε)` as [`draw_independent`] with the same seed, but `y` is
/// generated from the coupled effects β̃.
pub fn draw_coupled(
    x: &DMatrix<f64>,
    params: ModelParams,
    beta_law: SubGaussianLaw,
    eps_law: SubGaussianLaw,
    scheme: CouplingScheme,
    seed: SeedSpec,
) -> Result<Response> {
    let (n, p) = check_nonempty(x)?;
    let (beta, eps) = draw_effects(p, n, &params, beta_law, eps_law, seed);
    let mut perturbation_norm = None;
    let beta_tilde = match scheme {
        CouplingScheme::None => beta.clone(),
        CouplingScheme::AdditivePerturb { delta } => {
            if !(delta.is_finite() && delta >= 0.0) {
                return Err(Error::InvalidParameter(format!("perturbation size must be ≥ 0, got {delta}")));
            }
            let mut xi = vec![0.0; p];
            beta_law.fill(&mut seed.child(STREAM_PERTURB).rng(), &mut xi);
            let sd = params.beta_variance(p).sqrt();
            xi.iter_mut().for_each(|v| *v *= sd);
            perturbation_norm = Some(xi.iter().map(|v| v * v).sum::<f64>().sqrt());
            if delta == 0.0 {
                beta.clone()
            } else {
                beta.iter().zip(&xi).map(|(b, v)| b + delta * v).collect()
            }
        }
        CouplingScheme::SparseZero { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::InvalidParameter(format!("sparse fraction must lie in [0, 1], got {fraction}")));
            }
            let zeroed = ((fraction * p as f64).floor() as usize).min(p);
            let mut bt = beta.clone();
            for j in index::sample(&mut seed.child(STREAM_SPARSE).rng(), p, zeroed) {
                bt[j] = 0.0;
            }
            bt
        }
    };
    let y = response(x, &beta_tilde, &eps);
    let coupling_distance = l2_dist(&beta_tilde, &beta);
    Ok(Response {
        y,
        beta,
        eps,
        coupling: Some(Coupling { scheme, beta_tilde, coupling_distance, perturbation_norm }),
    })
}

fn into_dataset(
    x: &DMatrix<f64>,
    r: Response,
    params: ModelParams,
    beta_law: SubGaussianLaw,
    eps_law: SubGaussianLaw,
    seed: SeedSpec,
) -> Dataset {
    Dataset {
        x: x.clone(),
        y: r.y,
        beta_true: r.beta,
        eps_true: r.eps,
        params,
        beta_law,
        eps_law,
        coupling: r.coupling,
        seed,
    }
}

pub fn gen_independent(
    x: &DMatrix<f64>,
    params: ModelParams,
    beta_law: SubGaussianLaw,
    eps_law: SubGaussianLaw,
    seed: SeedSpec,
) -> Result<Dataset> {
    let r = draw_independent(x, params, beta_law, eps_law, seed)?;
    Ok(into_dataset(x, r, params, beta_law, eps_law, seed))
}

/// Like [`gen_independent`] with the same seed, but `y` is generated from
/// the coupled effects β̃. The independent β is kept as `beta_true`.
pub fn gen_coupled(
    x: &DMatrix<f64>,
    params: ModelParams,
    beta_law: SubGaussianLaw,
    eps_law: SubGaussianLaw,
    scheme: CouplingScheme,
    seed: SeedSpec,
) -> Result<Dataset> {
    let r = draw_coupled(x, params, beta_law, eps_law, scheme, seed)?;
    Ok(into_dataset(x, r, params, beta_law, eps_law, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::decompose_gram;

    fn params(s: f64, e: f64) -> ModelParams {
        ModelParams::new(s, e).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(0.0, 1.0).is_err());
        assert!(ModelParams::new(1.0, -0.1).is_err());
        assert!(ModelParams::new(f64::NAN, 1.0).is_err());
        let p = params(2.0, 0.5);
        assert_eq!(p.beta_variance(4), 0.25);
    }

    #[test]
    fn identity_design_has_unit_spectrum() {
        let x = gen_design(5, 5, &Design::Identity, SeedSpec::new(0, 0)).unwrap();
        let spec = decompose_gram(&x).unwrap();
        assert!(spec.lambdas().iter().all(|l| (l - 1.0).abs() < 1e-12));
    }

    #[test]
    fn fixed_spectrum_round_trip() {
        let x = gen_design(2, 3, &Design::FixedSpectrum(vec![2.0, 0.0]), SeedSpec::new(4, 0)).unwrap();
        let spec = decompose_gram(&x).unwrap();
        assert!((spec.lambdas()[0] - 2.0).abs() < 1e-8);
        assert!(spec.lambdas()[1].abs() < 1e-8);

        let lambdas = vec![3.0, 1.5, 1.0, 0.25, 0.0, 0.0];
        for p in [4usize, 6, 20] {
            let x = gen_design(6, p, &Design::FixedSpectrum(lambdas.clone()), SeedSpec::new(5, p as u64)).unwrap();
            let spec = decompose_gram(&x).unwrap();
            for (a, b) in spec.lambdas().iter().zip(&lambdas) {
                assert!((a - b).abs() < 1e-8, "p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fixed_spectrum_rejects_bad_input() {
        let s = SeedSpec::new(0, 0);
        assert!(gen_design(2, 3, &Design::FixedSpectrum(vec![1.0, -1.0]), s).is_err());
        assert!(gen_design(3, 2, &Design::FixedSpectrum(vec![1.0, 1.0, 1.0]), s).is_err());
        assert!(gen_design(3, 2, &Design::FixedSpectrum(vec![1.0, 1.0]), s).is_err());
    }

    #[test]
    fn gaussian_design_full_rank() {
        let x = gen_design(100, 200, &Design::GaussianIid, SeedSpec::new(1, 2)).unwrap();
        let spec = decompose_gram(&x).unwrap();
        assert!(spec.lambda_max().is_finite());
        assert_eq!(spec.n0(), 100);
    }

    #[test]
    fn haar_frame_is_orthonormal() {
        let q = haar_frame(7, 4, SeedSpec::new(3, 3));
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn zero_signal_gives_pure_noise() {
        let x = gen_design(4, 6, &Design::GaussianIid, SeedSpec::new(1, 1)).unwrap();
        let d = gen_independent(&x, params(1.5, 0.0), SubGaussianLaw::GAUSSIAN, SubGaussianLaw::UNIFORM, SeedSpec::new(2, 2))
            .unwrap();
        assert!(d.beta_true.iter().all(|&b| b == 0.0));
        assert_eq!(d.y, d.eps_true);
    }

    #[test]
    fn response_identity_and_determinism() {
        let x = gen_design(8, 5, &Design::GaussianIid, SeedSpec::new(1, 1)).unwrap();
        let s = SeedSpec::new(9, 3);
        let a = gen_independent(&x, params(1.0, 2.0), SubGaussianLaw::RADEMACHER, SubGaussianLaw::GAUSSIAN, s).unwrap();
        let b = gen_independent(&x, params(1.0, 2.0), SubGaussianLaw::RADEMACHER, SubGaussianLaw::GAUSSIAN, s).unwrap();
        assert_eq!(a, b);
        let direct = &x * DVector::from_column_slice(&a.beta_true) + DVector::from_column_slice(&a.eps_true);
        let scale = direct.amax().max(1.0);
        for (u, v) in a.y.iter().zip(direct.iter()) {
            assert!((u - v).abs() <= 1e-10 * scale);
        }
        // Rademacher β has |βⱼ| = √(σ²η²/p) exactly
        let sd = (2.0f64 / 5.0).sqrt();
        assert!(a.beta_true.iter().all(|b| (b.abs() - sd).abs() < 1e-15));
    }

    #[test]
    fn marginal_variance_of_y() {
        let p = 9;
        let x = gen_design(9, p, &Design::Identity, SeedSpec::new(0, 0)).unwrap();
        let reps = 10_000;
        let ys: Vec<f64> = (0..reps)
            .map(|r| {
                gen_independent(&x, params(1.0, 1.0), SubGaussianLaw::GAUSSIAN, SubGaussianLaw::GAUSSIAN, SeedSpec::new(6, r))
                    .unwrap()
                    .y[0]
            })
            .collect();
        let mean = ys.iter().sum::<f64>() / reps as f64;
        let sq: Vec<f64> = ys.iter().map(|y| (y - mean).powi(2)).collect();
        let var = sq.iter().sum::<f64>() / (reps as f64 - 1.0);
        // Var(y²) for N(0, 2) is 8, so se of the variance is √(8/reps)
        let se = (8.0 / reps as f64).sqrt();
        assert!((var - 2.0).abs() <= 5.0 * se, "{var}");
    }

    #[test]
    fn coupling_none_matches_independent() {
        let x = gen_design(6, 10, &Design::GaussianIid, SeedSpec::new(1, 1)).unwrap();
        let s = SeedSpec::new(3, 4);
        let (pr, g) = (params(1.0, 1.0), SubGaussianLaw::GAUSSIAN);
        let ind = gen_independent(&x, pr, g, g, s).unwrap();
        let cpl = gen_coupled(&x, pr, g, g, CouplingScheme::None, s).unwrap();
        assert_eq!(ind.y, cpl.y);
        assert_eq!(cpl.coupling.unwrap().coupling_distance, 0.0);
        let zero = gen_coupled(&x, pr, g, g, CouplingScheme::AdditivePerturb { delta: 0.0 }, s).unwrap();
        assert_eq!(ind.y, zero.y);
    }

    #[test]
    fn sparse_zero_all() {
        let x = gen_design(6, 10, &Design::GaussianIid, SeedSpec::new(1, 1)).unwrap();
        let g = SubGaussianLaw::GAUSSIAN;
        let d = gen_coupled(&x, params(1.0, 1.0), g, g, CouplingScheme::SparseZero { fraction: 1.0 }, SeedSpec::new(2, 2))
            .unwrap();
        assert!(d.effective_beta().iter().all(|&b| b == 0.0));
        assert_eq!(d.y, d.eps_true);
        let half = gen_coupled(&x, params(1.0, 1.0), g, g, CouplingScheme::SparseZero { fraction: 0.5 }, SeedSpec::new(2, 2))
            .unwrap();
        assert_eq!(half.effective_beta().iter().filter(|&&b| b == 0.0).count(), 5);
        assert!(gen_coupled(&x, params(1.0, 1.0), g, g, CouplingScheme::SparseZero { fraction: 1.5 }, SeedSpec::new(2, 2))
            .is_err());
    }

    #[test]
    fn additive_perturb_distance() {
        let x = gen_design(6, 12, &Design::GaussianIid, SeedSpec::new(1, 1)).unwrap();
        let g = SubGaussianLaw::UNIFORM;
        let mut prev = -1.0;
        for delta in [0.0, 0.01, 0.1, 0.5, 2.0] {
            let d = gen_coupled(&x, params(1.0, 2.0), g, g, CouplingScheme::AdditivePerturb { delta }, SeedSpec::new(5, 5))
                .unwrap();
            let c = d.coupling.as_ref().unwrap();
            let external = l2_dist(&c.beta_tilde, &d.beta_true);
            assert!((c.coupling_distance - external).abs() <= 1e-12);
            assert!(c.coupling_distance <= delta * c.perturbation_norm.unwrap() * (1.0 + 1e-12) + 1e-15);
            assert!(c.coupling_distance >= prev);
            prev = c.coupling_distance;
        }
    }

    #[test]
    fn save_dir_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let x = gen_design(3, 4, &Design::GaussianIid, SeedSpec::new(1, 1)).unwrap();
        let g = SubGaussianLaw::GAUSSIAN;
        let d = gen_independent(&x, params(1.0, 1.0), g, g, SeedSpec::new(1, 2)).unwrap();
        d.save_dir(dir.path()).unwrap();
        assert_eq!(matio::load_matrix(&dir.path().join("X.csv")).unwrap(), x);
        assert_eq!(matio::load_vector(&dir.path().join("y.csv")).unwrap(), d.y);
        let truth: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
        assert_eq!(truth["params"]["sigma0_sq"], 1.0);
        assert_eq!(truth["beta_law"], "gaussian");
    }
}
