//! Isometries of 3-space and correspondence-based rigid registration.
//!
//! The registration solver minimizes `sum ||y_i - (O x_i + t)||^2` over all
//! orthogonal `O`, reflections included: no determinant correction is made,
//! since the misalignments studied here include rotoreflections.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Array;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Tolerance on `||O^T O - I||_max` accepted by [`Isometry::new`].
pub const ORTHOGONALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("matrix is not orthogonal (max |O^T O - I| = {0:e})")]
    NotOrthogonal(f64),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("registration needs at least 3 corresponding points, got {0}")]
    TooFewPoints(usize),
    #[error("point clouds differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("iteration count must be at least 1")]
    ZeroIterations,
    #[error("isometry text must hold 12 numbers: {0}")]
    BadText(String),
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Stacks points into an `N x 3` array.
pub fn points_to_array(points: &[Vec3]) -> Array {
    Array::matrix(points.len(), 3, points.iter().flatten().copied().collect()).expect("N x 3 shape")
}

/// Rows of an `N x 3` array as points.
pub fn array_to_points(a: &Array) -> Vec<Vec3> {
    assert_eq!(a.cols(), 3, "coordinate arrays have 3 columns");
    (0..a.rows())
        .map(|r| {
            let row = a.row(r);
            [row[0], row[1], row[2]]
        })
        .collect()
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn determinant(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// `max |A^T A - I|`.
pub fn orthogonality_error(a: &Mat3) -> f64 {
    let ata = mat_mul(&transpose(a), a);
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((ata[i][j] - IDENTITY[i][j]).abs());
        }
    }
    worst
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

fn set_column(m: &mut Mat3, j: usize, v: &Vec3) {
    for i in 0..3 {
        m[i][j] = v[i];
    }
}

/// Orthogonal 3x3 matrix plus translation: `x -> O x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Isometry {
    rotation: Mat3,
    translation: Vec3,
}

impl Isometry {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        if rotation
            .iter()
            .flatten()
            .chain(&translation)
            .any(|v| !v.is_finite())
        {
            return Err(GeometryError::NonFinite);
        }
        let err = orthogonality_error(&rotation);
        if err >= ORTHOGONALITY_TOL {
            return Err(GeometryError::NotOrthogonal(err));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self {
            rotation: IDENTITY,
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn determinant(&self) -> f64 {
        determinant(&self.rotation)
    }

    pub fn is_reflection(&self) -> bool {
        self.determinant() < 0.0
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn apply(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply_point(p)).collect()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Isometry) -> Isometry {
        Isometry {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply_point(&other.translation),
        }
    }

    pub fn inverse(&self) -> Isometry {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        Isometry {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Largest absolute entry difference over rotation and translation.
    pub fn max_abs_diff(&self, other: &Isometry) -> f64 {
        self.rotation
            .iter()
            .flatten()
            .chain(&self.translation)
            .zip(other.rotation.iter().flatten().chain(&other.translation))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Twelve whitespace-separated numbers: row-major rotation, then
    /// translation. Values are printed in shortest round-trip form.
    pub fn to_text(&self) -> String {
        self.rotation
            .iter()
            .flatten()
            .chain(&self.translation)
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_text(text: &str) -> Result<Self, GeometryError> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::BadText(e.to_string()))?;
        if values.len() != 12 {
            return Err(GeometryError::BadText(format!(
                "found {} numbers",
                values.len()
            )));
        }
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            rotation[i].copy_from_slice(&values[3 * i..3 * i + 3]);
        }
        Isometry::new(rotation, [values[9], values[10], values[11]])
    }
}

/// Draws a Haar-uniform element of O(3) and a translation with i.i.d.
/// components uniform on `[-bound, bound]`.
pub fn sample_isometry<R: Rng + ?Sized>(rng: &mut R, translation_bound: f64) -> Isometry {
    let mut rotation = sample_rotation(rng);
    if rng.random_bool(0.5) {
        for row in &mut rotation {
            row[2] = -row[2];
        }
    }
    let mut translation = [0.0; 3];
    for t in &mut translation {
        *t = rng.random_range(-translation_bound..=translation_bound);
    }
    Isometry {
        rotation,
        translation,
    }
}

/// Haar-uniform rotation (det +1) from Gram-Schmidt on a Gaussian matrix.
fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let mut g = [[0.0; 3]; 3];
        for v in g.iter_mut().flatten() {
            *v = StandardNormal.sample(rng);
        }
        let mut q = [[0.0; 3]; 3];
        let mut ok = true;
        for j in 0..3 {
            let mut v = column(&g, j);
            // two passes keep the columns orthogonal to machine precision
            for _ in 0..2 {
                for k in 0..j {
                    let qk = column(&q, k);
                    let p = dot(&v, &qk);
                    for i in 0..3 {
                        v[i] -= p * qk[i];
                    }
                }
            }
            let n = norm(&v);
            if n < 1e-6 {
                ok = false;
                break;
            }
            set_column(&mut q, j, &[v[0] / n, v[1] / n, v[2] / n]);
        }
        if !ok {
            continue;
        }
        if determinant(&q) < 0.0 {
            for row in &mut q {
                row[2] = -row[2];
            }
        }
        return q;
    }
}

/// `W = U diag(singular_values) V^T`, singular values descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub singular_values: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        let mut us = self.u;
        for row in &mut us {
            for (j, s) in self.singular_values.iter().enumerate() {
                row[j] *= s;
            }
        }
        mat_mul(&us, &transpose(&self.v))
    }
}

/// SVD of a 3x3 matrix by one-sided (Hestenes) cyclic Jacobi.
///
/// Plane rotations are applied to the columns of `W` until they are mutually
/// orthogonal, which diagonalizes `W^T W` implicitly; the accumulated
/// rotations give `V`, the column norms give the singular values and the
/// normalized columns give `U`. Columns belonging to (numerically) zero
/// singular values are completed to an orthonormal basis.
pub fn svd3(w: &Mat3) -> Result<Svd3, GeometryError> {
    if w.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let mut a = *w;
    let mut v = IDENTITY;
    for _sweep in 0..64 {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let ap = column(&a, p);
            let aq = column(&a, q);
            let alpha = dot(&ap, &ap);
            let beta = dot(&aq, &aq);
            let gamma = dot(&ap, &aq);
            if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut a, &mut v] {
                for row in m.iter_mut() {
                    let (xp, xq) = (row[p], row[q]);
                    row[p] = c * xp - s * xq;
                    row[q] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms = [
        norm(&column(&a, 0)),
        norm(&column(&a, 1)),
        norm(&column(&a, 2)),
    ];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    let mut sigma = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        set_column(&mut vs, dst, &column(&v, src));
        set_column(&mut u, dst, &column(&a, src));
    }

    let cutoff = 1e-13 * sigma[0].max(f64::MIN_POSITIVE);
    let rank = sigma.iter().filter(|&&s| s > cutoff).count();
    for j in 0..rank {
        let c = column(&u, j);
        let n = sigma[j];
        set_column(&mut u, j, &[c[0] / n, c[1] / n, c[2] / n]);
    }
    match rank {
        0 => u = IDENTITY,
        1 => {
            let u0 = column(&u, 0);
            // any unit vector orthogonal to u0
            let pick = if u0[0].abs() < 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            let mut u1 = cross(&u0, &pick);
            let n = norm(&u1);
            u1 = [u1[0] / n, u1[1] / n, u1[2] / n];
            set_column(&mut u, 1, &u1);
            set_column(&mut u, 2, &cross(&u0, &u1));
        }
        2 => {
            let u2 = cross(&column(&u, 0), &column(&u, 1));
            let n = norm(&u2);
            set_column(&mut u, 2, &[u2[0] / n, u2[1] / n, u2[2] / n]);
        }
        _ => {}
    }
    for s in sigma.iter_mut().skip(rank) {
        *s = 0.0;
    }
    Ok(Svd3 {
        u,
        singular_values: sigma,
        v: vs,
    })
}

fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in points {
        for i in 0..3 {
            c[i] += p[i];
        }
    }
    let n = points.len() as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Root-mean-square of `||target_i - iso(source_i)||`.
pub fn rms_residual(iso: &Isometry, source: &[Vec3], target: &[Vec3]) -> f64 {
    let total: f64 = source
        .iter()
        .zip(target)
        .map(|(s, t)| {
            let m = iso.apply_point(s);
            (0..3).map(|i| (m[i] - t[i]).powi(2)).sum::<f64>()
        })
        .sum();
    (total / source.len().max(1) as f64).sqrt()
}

/// Outcome of a single closed-form registration.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub isometry: Isometry,
    pub rms: f64,
    pub singular_values: Vec3,
    /// Set when the cross-covariance has rank < 2 (collinear or coincident
    /// points), in which case the optimum is not unique.
    pub ill_conditioned: bool,
}

/// Closed-form least-squares isometry mapping `source` onto `target`, rows
/// in correspondence.
pub fn register_arun(source: &[Vec3], target: &[Vec3]) -> Result<Registration, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::SizeMismatch(source.len(), target.len()));
    }
    if source.len() < 3 {
        return Err(GeometryError::TooFewPoints(source.len()));
    }
    let mu = centroid(source);
    let mu_t = centroid(target);
    let mut w = [[0.0; 3]; 3];
    for (s, t) in source.iter().zip(target) {
        let a = [s[0] - mu[0], s[1] - mu[1], s[2] - mu[2]];
        let b = [t[0] - mu_t[0], t[1] - mu_t[1], t[2] - mu_t[2]];
        for i in 0..3 {
            for j in 0..3 {
                w[i][j] += a[i] * b[j];
            }
        }
    }
    let svd = svd3(&w)?;
    // W = U S V^T maps the source frame to the target frame via O = V U^T.
    let rotation = mat_mul(&svd.v, &transpose(&svd.u));
    let om = mat_vec(&rotation, &mu);
    let isometry = Isometry {
        rotation,
        translation: [mu_t[0] - om[0], mu_t[1] - om[1], mu_t[2] - om[2]],
    };
    let sigma = svd.singular_values;
    let ill_conditioned = sigma[1] <= 1e-10 * sigma[0].max(f64::MIN_POSITIVE);
    Ok(Registration {
        rms: rms_residual(&isometry, source, target),
        isometry,
        singular_values: sigma,
        ill_conditioned,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeRegistration {
    pub isometry: Isometry,
    /// RMS residual before any refinement (identity transform).
    pub initial_rms: f64,
    /// RMS residual after each refinement.
    pub residuals: Vec<f64>,
    pub ill_conditioned: bool,
}

/// Repeats [`register_arun`] on the progressively aligned source,
/// composing the refinements.
pub fn register_iterative(
    source: &[Vec3],
    target: &[Vec3],
    iters: usize,
) -> Result<IterativeRegistration, GeometryError> {
    if iters == 0 {
        return Err(GeometryError::ZeroIterations);
    }
    let mut g = Isometry::identity();
    let initial_rms = {
        if source.len() != target.len() {
            return Err(GeometryError::SizeMismatch(source.len(), target.len()));
        }
        rms_residual(&g, source, target)
    };
    let mut residuals = Vec::with_capacity(iters);
    let mut ill_conditioned = false;
    for _ in 0..iters {
        let moved = g.apply(source);
        let step = register_arun(&moved, target)?;
        ill_conditioned |= step.ill_conditioned;
        g = step.isometry.compose(&g);
        residuals.push(rms_residual(&g, source, target));
    }
    Ok(IterativeRegistration {
        isometry: g,
        initial_rms,
        residuals,
        ill_conditioned,
    })
}
