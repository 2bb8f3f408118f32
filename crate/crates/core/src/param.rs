//! Dense parameter vectors and the geometric primitives the ZOPrO sampler is
//! built from: seeded Gaussian noise, orthogonal projection and the
//! norm-matched blend of the previous policy update with fresh noise.
//!
//! All reductions run in index order so results are bit-reproducible.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Norms below this are treated as zero when dividing.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// A flat vector of finite `f64` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDimension("parameter vector must have dim >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry {} at index {i}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    /// Skips the finiteness scan. Callers must uphold the invariant.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::dim_mismatch(self.dim(), other.dim()));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(dot_slices(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot_slices(&self.values, &self.values).sqrt()
    }

    /// `self <- self + a * x`
    pub fn axpy(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_dim(x)?;
        for (y, xi) in self.values.iter_mut().zip(&x.values) {
            *y += a * xi;
        }
        Ok(())
    }

    /// `self + a * x` as a new vector.
    pub fn offset(&self, a: f64, x: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.axpy(a, x)?;
        Ok(out)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(Self::from_vec_unchecked(
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        Self::from_vec_unchecked(self.values.iter().map(|v| a * v).collect())
    }

    /// Cosine similarity; zero if either vector is degenerate.
    pub fn cosine(&self, other: &ParamVector) -> Result<f64> {
        let d = self.dot(other)?;
        let n = self.norm() * other.norm();
        if n < DEGENERACY_EPS {
            return Ok(0.0);
        }
        Ok((d / n).clamp(-1.0, 1.0))
    }

    /// Concatenate two vectors (used for reward trunk + head).
    pub fn concat(&self, other: &ParamVector) -> ParamVector {
        let mut v = self.values.clone();
        v.extend_from_slice(&other.values);
        Self::from_vec_unchecked(v)
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<ParamVector> {
        if range.end > self.dim() || range.is_empty() {
            return Err(Error::InvalidDimension(format!(
                "slice {range:?} out of bounds for dim {}",
                self.dim()
            )));
        }
        Ok(Self::from_vec_unchecked(self.values[range].to_vec()))
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    x.dot(y)
}

pub fn norm(x: &ParamVector) -> f64 {
    x.norm()
}

/// `y <- y + a * x`
pub fn axpy(a: f64, x: &ParamVector, y: &mut ParamVector) -> Result<()> {
    y.axpy(a, x)
}

/// Identifies a reproducible Gaussian draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseSpec {
    pub seed: u64,
    pub dim: usize,
}

impl NoiseSpec {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

/// Draws `dim` i.i.d. standard normals from a ChaCha8 stream seeded by `seed`.
pub fn sample_gaussian(spec: NoiseSpec) -> Result<ParamVector> {
    if spec.dim == 0 {
        return Err(Error::InvalidDimension("noise dimension must be >= 1".into()));
    }
    let mut rng = seed::rng(spec.seed);
    let values = (0..spec.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(ParamVector::from_vec_unchecked(values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Applied,
    /// The reference direction was degenerate; the input was returned as is.
    Skipped,
}

/// Removes the component of `v` along `r`.
pub fn project_orthogonal(v: &ParamVector, r: &ParamVector) -> Result<(ParamVector, Projection)> {
    v.check_dim(r)?;
    let rr = dot_slices(&r.values, &r.values);
    if rr.sqrt() < DEGENERACY_EPS {
        return Ok((v.clone(), Projection::Skipped));
    }
    let coef = dot_slices(&v.values, &r.values) / rr;
    let out = v.offset(-coef, r)?;
    Ok((out, Projection::Applied))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composition {
    Blended,
    /// No previous policy update was available; the noise was returned unscaled.
    ColdStart,
}

/// `alpha * delta_pi + sqrt(1 - alpha^2) * (u / |u|) * |delta_pi|`
///
/// The noise is rescaled to the length of the previous policy update so that
/// neither term drowns out the other.
pub fn compose_perturbation(
    delta_pi: &ParamVector,
    u: &ParamVector,
    alpha: f64,
) -> Result<(ParamVector, Composition)> {
    delta_pi.check_dim(u)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let dp_norm = delta_pi.norm();
    if dp_norm < DEGENERACY_EPS {
        return Ok((u.clone(), Composition::ColdStart));
    }
    if alpha == 1.0 {
        return Ok((delta_pi.clone(), Composition::Blended));
    }
    let u_norm = u.norm();
    if u_norm < DEGENERACY_EPS {
        return Err(Error::InvalidNoise(format!(
            "noise norm {u_norm:e} is degenerate with alpha = {alpha}"
        )));
    }
    let noise_coef = (1.0 - alpha * alpha).sqrt() * dp_norm / u_norm;
    let values = delta_pi
        .values
        .iter()
        .zip(&u.values)
        .map(|(d, n)| alpha * d + noise_coef * n)
        .collect();
    Ok((ParamVector::from_vec_unchecked(values), Composition::Blended))
}
