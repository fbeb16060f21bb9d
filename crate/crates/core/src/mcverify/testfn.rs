//! Smooth bounded test functions `f ∈ C_b³` with known derivative bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sup |tanh^{(k)}|` for k = 0..3.
const TANH_DERIV_SUP: [f64; 4] = [1.0, 1.0, 0.769_800_358_919_501, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFnKind {
    /// `Π_{j∈coords} tanh(x_j/a_j)`.
    TanhProduct,
    /// `f ≡ value`.
    Constant,
}

/// Serializable description of a test function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFnSpec {
    pub kind: TestFnKind,
    /// Coordinates the product runs over (0-based).
    #[serde(default)]
    pub coords: Vec<usize>,
    /// One scale `a_j` per coordinate.
    #[serde(default)]
    pub scales: Vec<f64>,
    #[serde(default)]
    pub value: f64,
}

impl TestFnSpec {
    pub fn tanh_product(coords: Vec<usize>, scales: Vec<f64>) -> Self {
        TestFnSpec { kind: TestFnKind::TanhProduct, coords, scales, value: 0.0 }
    }

    pub fn constant(value: f64) -> Self {
        TestFnSpec { kind: TestFnKind::Constant, coords: Vec::new(), scales: Vec::new(), value }
    }
}

/// A test function together with `|f|₀, …, |f|₃`, where `|f|_j` bounds
/// every mixed partial derivative of order j.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothTestFn {
    pub name: String,
    spec: TestFnSpec,
    pub norms: [f64; 4],
}

impl SmoothTestFn {
    pub fn new(spec: TestFnSpec) -> Result<Self> {
        match spec.kind {
            TestFnKind::Constant => {
                if !spec.value.is_finite() {
                    return Err(Error::InvalidParameter("constant test function must be finite".into()));
                }
                Ok(SmoothTestFn {
                    name: format!("const({})", spec.value),
                    norms: [spec.value.abs(), 0.0, 0.0, 0.0],
                    spec,
                })
            }
            TestFnKind::TanhProduct => {
                if spec.coords.is_empty() || spec.coords.len() != spec.scales.len() {
                    return Err(Error::InvalidParameter("tanh product needs one scale per coordinate".into()));
                }
                if spec.scales.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                    return Err(Error::InvalidParameter("tanh scales must be positive".into()));
                }
                let mut dedup = spec.coords.clone();
                dedup.sort_unstable();
                dedup.dedup();
                if dedup.len() != spec.coords.len() {
                    return Err(Error::InvalidParameter("tanh product coordinates must be distinct".into()));
                }
                let norms = [0, 1, 2, 3].map(|j| tanh_product_norm(&spec.scales, j));
                let name = spec
                    .coords
                    .iter()
                    .zip(&spec.scales)
                    .map(|(c, a)| format!("tanh(x{}/{a})", c + 1))
                    .collect::<Vec<_>>()
                    .join("*");
                Ok(SmoothTestFn { name, norms, spec })
            }
        }
    }

    pub fn spec(&self) -> &TestFnSpec {
        &self.spec
    }

    /// Smallest input dimension the function accepts.
    pub fn min_dim(&self) -> usize {
        self.spec.coords.iter().map(|c| c + 1).max().unwrap_or(0)
    }

    /// Coordinates `f` actually depends on.
    pub fn support(&self) -> &[usize] {
        &self.spec.coords
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.spec.kind {
            TestFnKind::Constant => self.spec.value,
            TestFnKind::TanhProduct => {
                self.spec.coords.iter().zip(&self.spec.scales).map(|(&c, a)| (x[c] / a).tanh()).product()
            }
        }
    }

    /// Evaluate on the restriction to `support()`, i.e. `x[k]` is the value
    /// of coordinate `support()[k]`.
    pub fn eval_on_support(&self, x: &[f64]) -> f64 {
        match self.spec.kind {
            TestFnKind::Constant => self.spec.value,
            TestFnKind::TanhProduct => x.iter().zip(&self.spec.scales).map(|(v, a)| (v / a).tanh()).product(),
        }
    }
}

/// Largest mixed partial of order `j` for `Π tanh(x_k/a_k)`: distribute the
/// j derivatives over the factors and take the worst product.
fn tanh_product_norm(scales: &[f64], j: usize) -> f64 {
    fn go(scales: &[f64], left: usize) -> f64 {
        match scales.split_first() {
            None => {
                if left == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Some((a, rest)) => (0..=left.min(3))
                .map(|k| TANH_DERIV_SUP[k] / a.powi(k as i32) * go(rest, left - k))
                .fold(0.0, f64::max),
        }
    }
    go(scales, j)
}
