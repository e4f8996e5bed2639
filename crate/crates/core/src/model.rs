//! Plant and cost data, structural checks, and closed-loop construction.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SofError};
use crate::linalg::{self, Mat};

/// A gain is stabilizing only if `rho(A_K) < 1 - STABILITY_TOLERANCE`.
pub const STABILITY_TOLERANCE: f64 = 1e-9;

/// Discrete-time plant `x+ = Ax + Bu, y = Cx` with quadratic cost weights
/// and the initial-state second moment `X0 = E[x0 x0^T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: Mat,
    b: Mat,
    c: Mat,
    q: Mat,
    r: Mat,
    x0: Mat,
}

fn expect_shape(field: &'static str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(SofError::Dimension {
            field,
            expected_rows: rows,
            expected_cols: cols,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

impl LtiSystem {
    /// Dimensions are inferred from `A` (n), `B` (m) and `C` (d); every other
    /// matrix must agree with them.
    pub fn new(a: Mat, b: Mat, c: Mat, q: Mat, r: Mat, x0: Mat) -> Result<Self> {
        let n = a.nrows();
        expect_shape("A", &a, n, n)?;
        let m = b.ncols();
        expect_shape("B", &b, n, m)?;
        let d = c.nrows();
        expect_shape("C", &c, d, n)?;
        expect_shape("Q", &q, n, n)?;
        expect_shape("R", &r, m, m)?;
        expect_shape("X0", &x0, n, n)?;
        if n == 0 || m == 0 || d == 0 {
            return Err(SofError::Malformed {
                field: "A",
                reason: "dimensions must be positive".into(),
            });
        }
        for (field, mat) in [
            ("A", &a),
            ("B", &b),
            ("C", &c),
            ("Q", &q),
            ("R", &r),
            ("X0", &x0),
        ] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(SofError::Malformed {
                    field,
                    reason: "non-finite entry".into(),
                });
            }
        }
        Ok(Self { a, b, c, q, r, x0 })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    pub fn q(&self) -> &Mat {
        &self.q
    }
    pub fn r(&self) -> &Mat {
        &self.r
    }
    pub fn x0(&self) -> &Mat {
        &self.x0
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    /// Output dimension.
    pub fn d(&self) -> usize {
        self.c.nrows()
    }

    /// Same plant with a different output map (e.g. `C = I` for the
    /// state-feedback variant).
    pub fn with_c(&self, c: Mat) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            c,
            self.q.clone(),
            self.r.clone(),
            self.x0.clone(),
        )
    }

    pub fn with_x0(&self, x0: Mat) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.c.clone(),
            self.q.clone(),
            self.r.clone(),
            x0,
        )
    }

    pub fn with_weights(&self, q: Mat, r: Mat) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.c.clone(),
            q,
            r,
            self.x0.clone(),
        )
    }

    /// `mu = sigma_min(X0)`.
    pub fn mu(&self) -> f64 {
        linalg::sigma_min(&self.x0)
    }

    pub fn from_file(file: &SystemFile) -> Result<Self> {
        Self::new(
            linalg::from_rows("A", &file.a)?,
            linalg::from_rows("B", &file.b)?,
            linalg::from_rows("C", &file.c)?,
            linalg::from_rows("Q", &file.q)?,
            linalg::from_rows("R", &file.r)?,
            linalg::from_rows("X0", &file.x0)?,
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: SystemFile = serde_json::from_str(s).map_err(|e| SofError::Malformed {
            field: "system",
            reason: e.to_string(),
        })?;
        Self::from_file(&file)
    }

    pub fn to_file(&self) -> SystemFile {
        SystemFile {
            a: linalg::to_rows(&self.a),
            b: linalg::to_rows(&self.b),
            c: linalg::to_rows(&self.c),
            q: linalg::to_rows(&self.q),
            r: linalg::to_rows(&self.r),
            x0: linalg::to_rows(&self.x0),
        }
    }
}

/// On-disk system description: row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "X0")]
    pub x0: Vec<Vec<f64>>,
}

/// Static output feedback gain `K` (m x d), control law `u = -K y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gain(Mat);

impl Gain {
    pub fn new(k: Mat) -> Result<Self> {
        if k.iter().any(|v| !v.is_finite()) {
            return Err(SofError::NonFiniteGain);
        }
        Ok(Self(k))
    }

    pub fn scalar(k: f64) -> Result<Self> {
        Self::new(Mat::from_element(1, 1, k))
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        Self(Mat::zeros(m, d))
    }

    pub fn from_row_slice(m: usize, d: usize, data: &[f64]) -> Result<Self> {
        Self::new(Mat::from_row_slice(m, d, data))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_matrix(self) -> Mat {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    /// `K - eta * direction`.
    pub fn step(&self, direction: &Mat, eta: f64) -> Result<Self> {
        Self::new(&self.0 - direction * eta)
    }

    pub fn distance(&self, other: &Gain) -> f64 {
        (&self.0 - &other.0).norm()
    }
}

fn check_gain_shape(sys: &LtiSystem, k: &Gain) -> Result<()> {
    expect_shape("K", k.matrix(), sys.m(), sys.d())
}

/// `A_K = A - B K C`.
pub fn closed_loop(sys: &LtiSystem, k: &Gain) -> Result<Mat> {
    check_gain_shape(sys, k)?;
    Ok(&sys.a - &sys.b * k.matrix() * &sys.c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub spectral_radius: f64,
    pub stabilizing: bool,
    /// `1 - rho(A_K)`.
    pub margin: f64,
}

impl StabilityReport {
    pub fn from_radius(spectral_radius: f64) -> Self {
        Self {
            spectral_radius,
            stabilizing: spectral_radius < 1.0 - STABILITY_TOLERANCE,
            margin: 1.0 - spectral_radius,
        }
    }
}

pub fn stability(sys: &LtiSystem, k: &Gain) -> Result<StabilityReport> {
    let acl = closed_loop(sys, k)?;
    Ok(StabilityReport::from_radius(linalg::spectral_radius(&acl)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    /// Violates the standing assumptions but evaluation can still proceed.
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Smallest eigenvalue for definiteness checks, rank for rank checks.
    pub witness: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_matrix(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = Mat::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        out.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

/// `[C; CA; ...; CA^{n-1}]`.
pub fn observability_matrix(c: &Mat, a: &Mat) -> Mat {
    controllability_matrix(&a.transpose(), &c.transpose()).transpose()
}

fn asymmetry(m: &Mat) -> f64 {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    (m - m.transpose()).norm() / scale
}

fn definiteness_check(name: &'static str, m: &Mat) -> Check {
    let lo = linalg::sym_min_eig(m);
    let status = if asymmetry(m) <= 1e-12 && linalg::is_positive_definite(m) {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Check {
        name,
        status,
        witness: lo,
        detail: format!("minimal eigenvalue {lo:e}"),
    }
}

fn rank_check(name: &'static str, m: &Mat, required: usize) -> Check {
    let rank = linalg::numerical_rank(m);
    Check {
        name,
        status: if rank == required {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        witness: rank as f64,
        detail: format!("rank {rank}, required {required}"),
    }
}

/// Checks the standing assumptions on the plant and weights.
///
/// A singular state weight is downgraded to a warning when `Q` is positive
/// semidefinite, nonzero, and `(Q, A)` is observable: the cost is still
/// well defined and positive on every stabilizing gain, but constants that
/// divide by `sigma_min(Q)` are unavailable.
pub fn validate_system(sys: &LtiSystem) -> ValidationReport {
    let n = sys.n();
    let mut checks = Vec::new();
    let mut warnings = Vec::new();

    let mut q_check = definiteness_check("Q positive definite", &sys.q);
    if q_check.status == CheckStatus::Fail && asymmetry(&sys.q) <= 1e-12 {
        let qmax = linalg::sym_max_eig(&sys.q);
        let psd = qmax > 0.0 && q_check.witness >= -linalg::RANK_RTOL * qmax;
        let detectable = linalg::numerical_rank(&observability_matrix(&sys.q, &sys.a)) == n;
        if psd && detectable {
            q_check.status = CheckStatus::Warn;
            q_check.detail.push_str("; singular but (Q, A) observable");
            warnings.push(
                "Q is singular: deviates from the positive definite state weight assumption; \
                 evaluation proceeds but landscape constants depending on sigma_min(Q) are unavailable"
                    .to_string(),
            );
        }
    }
    checks.push(q_check);
    checks.push(definiteness_check("R positive definite", &sys.r));
    checks.push(definiteness_check("X0 positive definite", &sys.x0));
    checks.push(rank_check("C full row rank", &sys.c, sys.d()));
    checks.push(rank_check(
        "(A,B) controllable",
        &controllability_matrix(&sys.a, &sys.b),
        n,
    ));
    checks.push(rank_check(
        "(C,A) observable",
        &observability_matrix(&sys.c, &sys.a),
        n,
    ));

    let passed = checks.iter().all(|c| c.status != CheckStatus::Fail);
    ValidationReport {
        n,
        m: sys.m(),
        d: sys.d(),
        checks,
        warnings,
        passed,
    }
}
