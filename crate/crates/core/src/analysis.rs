//! Trajectory analytics over paired policy and reward checkpoint series.

use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{dot_slices, ParamVector, DEGENERACY_EPS};

/// Ordered snapshots of one model's parameters, tagged by iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSeries {
    label: String,
    tags: Vec<usize>,
    snapshots: Vec<ParamVector>,
}

impl CheckpointSeries {
    pub fn new(label: impl Into<String>, tags: Vec<usize>, snapshots: Vec<ParamVector>) -> Result<Self> {
        if tags.len() != snapshots.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tags for {} snapshots",
                tags.len(),
                snapshots.len()
            )));
        }
        if snapshots.is_empty() {
            return Err(Error::InvalidArgument("empty checkpoint series".into()));
        }
        let dim = snapshots[0].dim();
        if let Some(bad) = snapshots.iter().find(|s| s.dim() != dim) {
            return Err(Error::dim_mismatch(bad.dim(), dim));
        }
        if tags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("tags must be strictly increasing".into()));
        }
        Ok(Self {
            label: label.into(),
            tags,
            snapshots,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn tags(&self) -> &[usize] {
        &self.tags
    }

    pub fn snapshots(&self) -> &[ParamVector] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].dim()
    }

    /// First `n` snapshots.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.label.clone(), self.tags[..n].to_vec(), self.snapshots[..n].to_vec())
    }

    /// `snapshot[i] - snapshot[i - 1]`.
    pub fn delta(&self, i: usize) -> Result<ParamVector> {
        if i == 0 || i >= self.len() {
            return Err(Error::InvalidArgument(format!("no delta at position {i}")));
        }
        self.snapshots[i].sub(&self.snapshots[i - 1])
    }

    /// Position of `tag`.
    pub fn position(&self, tag: usize) -> Option<usize> {
        self.tags.iter().position(|&t| t == tag)
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.snapshots[i].as_slice()[j])
    }
}

/// Why an analytic returned a placeholder value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flag {
    Degenerate,
    ConstantSeries,
    InsufficientIterations,
    ZeroVarianceDelta,
    UndefinedAngle,
    RankDeficient,
}

impl Flag {
    pub fn label(&self) -> &'static str {
        match self {
            Flag::Degenerate => "degenerate",
            Flag::ConstantSeries => "constant-series",
            Flag::InsufficientIterations => "insufficient-iterations",
            Flag::ZeroVarianceDelta => "zero-variance-delta",
            Flag::UndefinedAngle => "undefined-angle",
            Flag::RankDeficient => "rank-deficient",
        }
    }
}

/// A value with an optional flag explaining a fallback.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<Flag>,
}

impl Measured {
    fn ok(value: f64) -> Self {
        Self { value, flag: None }
    }

    fn flagged(value: f64, flag: Flag) -> Self {
        Self { value, flag: Some(flag) }
    }
}

fn check_pair(x: &CheckpointSeries, y: &CheckpointSeries) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "series `{}` has {} snapshots, `{}` has {}",
            x.label,
            x.len(),
            y.label,
            y.len()
        )));
    }
    if x.tags != y.tags {
        return Err(Error::InvalidArgument(format!(
            "series `{}` and `{}` have mismatched tags",
            x.label, y.label
        )));
    }
    Ok(())
}

fn centre_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Procrustes disparity between the snapshot matrices of two series.
///
/// Both matrices are column-centred and scaled to unit Frobenius norm; the
/// disparity is the residual sum of squares after the best rotation and
/// scaling of `y` onto `x`, i.e. `1 - nuclear(y^T x)^2`.
pub fn procrustes_disparity(x: &CheckpointSeries, y: &CheckpointSeries) -> Result<Measured> {
    check_pair(x, y)?;
    if x.dim() != y.dim() {
        return Err(Error::dim_mismatch(y.dim(), x.dim()));
    }
    let mut a = x.matrix();
    let mut b = y.matrix();
    centre_columns(&mut a);
    centre_columns(&mut b);
    let (na, nb) = (a.norm(), b.norm());
    if na < DEGENERACY_EPS || nb < DEGENERACY_EPS {
        return Ok(Measured::flagged(0.0, Flag::Degenerate));
    }
    a /= na;
    b /= nb;
    // singular values of b^T a equal those of S_b U_b^T a, which is only n x d
    let svd = b.svd(true, false);
    let u = svd.u.expect("requested U");
    let reduced = DMatrix::from_diagonal(&svd.singular_values) * u.transpose() * &a;
    let nuclear: f64 = reduced.singular_values().iter().sum();
    Ok(Measured::ok((1.0 - nuclear * nuclear).max(0.0)))
}

fn double_centred_distances(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut d = DMatrix::from_fn(n, n, |i, j| (m.row(i) - m.row(j)).norm());
    let row_means: Vec<f64> = (0..n).map(|i| d.row(i).mean()).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            // the distance matrix is symmetric, so column means equal row means
            d[(i, j)] += grand - row_means[i] - row_means[j];
        }
    }
    d
}

/// Sample distance correlation between two series, snapshots as samples.
pub fn distance_correlation(x: &CheckpointSeries, y: &CheckpointSeries) -> Result<Measured> {
    check_pair(x, y)?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument("distance correlation needs at least 2 snapshots".into()));
    }
    let a = double_centred_distances(&x.matrix());
    let b = double_centred_distances(&y.matrix());
    let n2 = (x.len() * x.len()) as f64;
    let dcov = a.component_mul(&b).sum() / n2;
    let dvar_x = a.norm_squared() / n2;
    let dvar_y = b.norm_squared() / n2;
    let denom = (dvar_x * dvar_y).sqrt();
    if denom < DEGENERACY_EPS * DEGENERACY_EPS {
        return Ok(Measured::flagged(0.0, Flag::ConstantSeries));
    }
    Ok(Measured::ok((dcov.max(0.0) / denom).sqrt().min(1.0)))
}

/// Angle between two vectors in degrees.
pub fn relative_angle(v1: &ParamVector, v2: &ParamVector) -> Result<f64> {
    angle_slices(v1.as_slice(), v2.as_slice())
}

fn angle_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim_mismatch(a.len(), b.len()));
    }
    let na = dot_slices(a, a).sqrt();
    let nb = dot_slices(b, b).sqrt();
    if na < DEGENERACY_EPS || nb < DEGENERACY_EPS {
        return Err(Error::UndefinedAngle(format!("norms {na:.3e} and {nb:.3e}")));
    }
    let (diff, sum) = unit_chords(a, b, na, nb);
    Ok(chord_angle(diff, sum))
}

/// Squared norms of `a/|a| - b/|b|` and `a/|a| + b/|b|`.
fn unit_chords(a: &[f64], b: &[f64], na: f64, nb: f64) -> (f64, f64) {
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    (diff, sum)
}

// 2 atan2(|u - v|, |u + v|) stays accurate near 0 and 180 degrees, where acos does not
fn chord_angle(diff: f64, sum: f64) -> f64 {
    (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees()
}

/// Pearson correlation between the entries of the deltas ending at `tag`.
pub fn pearson_delta_correlation(x: &CheckpointSeries, y: &CheckpointSeries, tag: usize) -> Result<Measured> {
    check_pair(x, y)?;
    let pos = x
        .position(tag)
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("no consecutive snapshots ending at tag {tag}")))?;
    let dx = x.delta(pos)?;
    let dy = y.delta(pos)?;
    if dx.dim() != dy.dim() {
        return Err(Error::dim_mismatch(dy.dim(), dx.dim()));
    }
    Ok(pearson(dx.as_slice(), dy.as_slice()))
}

fn pearson(a: &[f64], b: &[f64]) -> Measured {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa.sqrt() < DEGENERACY_EPS || sbb.sqrt() < DEGENERACY_EPS {
        return Measured::flagged(0.0, Flag::ZeroVarianceDelta);
    }
    Measured::ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Checks that `layers` tile `[0, dim)` in order.
pub fn validate_layer_map(layers: &[Range<usize>], dim: usize) -> Result<()> {
    let mut next = 0;
    for r in layers {
        if r.start != next || r.end <= r.start {
            return Err(Error::InvalidArgument(format!("layer map does not partition [0, {dim})")));
        }
        next = r.end;
    }
    if next != dim {
        return Err(Error::InvalidArgument(format!("layer map covers [0, {next}) not [0, {dim})")));
    }
    Ok(())
}

/// One row of the layer-wise angle matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAngles {
    pub tag: usize,
    /// `None` where a block of either delta is (numerically) zero.
    pub angles: Vec<Option<f64>>,
    /// Angle on the whole vectors, recombined from the per-block partial sums.
    pub global: Option<f64>,
}

/// Angles between the two series' deltas per layer block, one row per delta.
pub fn layerwise_angles(
    policy: &CheckpointSeries,
    reward: &CheckpointSeries,
    layers: &[Range<usize>],
) -> Result<Vec<LayerAngles>> {
    check_pair(policy, reward)?;
    validate_layer_map(layers, policy.dim())?;
    if reward.dim() != policy.dim() {
        return Err(Error::dim_mismatch(reward.dim(), policy.dim()));
    }
    (1..policy.len())
        .map(|i| {
            let dp = policy.delta(i)?;
            let dr = reward.delta(i)?;
            Ok(delta_layer_angles(policy.tags[i], &dp, &dr, layers))
        })
        .collect()
}

/// Layer-wise and recombined global angles between two vectors.
pub fn delta_layer_angles(tag: usize, a: &ParamVector, b: &ParamVector, layers: &[Range<usize>]) -> LayerAngles {
    let (na, nb) = (a.norm(), b.norm());
    let whole = na >= DEGENERACY_EPS && nb >= DEGENERACY_EPS;
    let (mut diff, mut sum) = (0.0, 0.0);
    let angles = layers
        .iter()
        .map(|r| {
            let x = &a.as_slice()[r.clone()];
            let y = &b.as_slice()[r.clone()];
            if whole {
                let (d, s) = unit_chords(x, y, na, nb);
                diff += d;
                sum += s;
            }
            angle_slices(x, y).ok()
        })
        .collect();
    let global = whole.then(|| chord_angle(diff, sum));
    LayerAngles { tag, angles, global }
}

/// Principal-component coordinates of stacked snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// Components actually returned (less than requested when rank-deficient).
    pub components: usize,
    /// One row per input snapshot, in input order.
    pub coords: Vec<Vec<f64>>,
    /// Eigenvalues of the centred scatter matrix, descending, all of them.
    pub eigenvalues: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<Flag>,
}

/// Projects the snapshots of all `series` (stacked in order) onto their top
/// `dims` principal axes. Each axis is signed so that its largest-magnitude
/// coordinate is positive.
pub fn pca_project(series: &[&CheckpointSeries], dims: usize) -> Result<PcaProjection> {
    if !(2..=3).contains(&dims) {
        return Err(Error::InvalidArgument(format!("dims must be 2 or 3, got {dims}")));
    }
    let rows: Vec<&ParamVector> = series.iter().flat_map(|s| s.snapshots.iter()).collect();
    if rows.len() < dims + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} snapshots cannot support {dims} components",
            rows.len()
        )));
    }
    let d = rows[0].dim();
    if let Some(bad) = rows.iter().find(|r| r.dim() != d) {
        return Err(Error::dim_mismatch(bad.dim(), d));
    }
    let n = rows.len();
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i].as_slice()[j]);
    centre_columns(&mut m);
    let gram = &m * m.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let tol = 1e-12 * eigenvalues.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let rank = eigenvalues.iter().filter(|&&l| l > tol).count();
    let components = dims.min(rank);

    let mut coords = vec![vec![0.0; components]; n];
    for (c, &k) in order.iter().take(components).enumerate() {
        let u = eig.eigenvectors.column(k);
        // principal axis in parameter space
        let mut axis = m.transpose() * u;
        axis.normalize_mut();
        let pivot = axis.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            axis.neg_mut();
        }
        let scores = &m * axis;
        for (row, s) in coords.iter_mut().zip(scores.iter()) {
            row[c] = *s;
        }
    }
    Ok(PcaProjection {
        components,
        coords,
        eigenvalues,
        flag: (components < dims).then_some(Flag::RankDeficient),
    })
}

/// A per-tag scalar, `null` in JSON when unavailable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagValue {
    pub tag: usize,
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<Flag>,
}

impl TagValue {
    fn measured(tag: usize, m: Measured) -> Self {
        Self {
            tag,
            value: Some(m.value),
            flag: m.flag,
        }
    }
}

/// Everything `analyze` computes for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsReport {
    pub tags: Vec<usize>,
    pub dim: usize,
    pub layers: Vec<String>,
    pub flags: Vec<Flag>,
    /// Expanding window, as for `distance_correlation`; the last entry covers
    /// the whole trajectory.
    pub procrustes_disparity: Vec<TagValue>,
    /// Expanding window: snapshots up to and including each tag.
    pub distance_correlation: Vec<TagValue>,
    /// Angle between the policy and reward deltas ending at each tag.
    pub relative_angle_deg: Vec<TagValue>,
    pub pearson_delta_corr: Vec<TagValue>,
    pub layerwise_angles: Vec<LayerAngles>,
    pub pca: Option<PcaProjection>,
}

/// Runs the whole battery over a pair of aligned series.
pub fn analyze(
    policy: &CheckpointSeries,
    reward: &CheckpointSeries,
    layers: &[(String, Range<usize>)],
) -> Result<AnalyticsReport> {
    check_pair(policy, reward)?;
    if policy.dim() != reward.dim() {
        return Err(Error::dim_mismatch(reward.dim(), policy.dim()));
    }
    let ranges: Vec<Range<usize>> = layers.iter().map(|(_, r)| r.clone()).collect();
    validate_layer_map(&ranges, policy.dim())?;
    let mut report = AnalyticsReport {
        tags: policy.tags.clone(),
        dim: policy.dim(),
        layers: layers.iter().map(|(n, _)| n.clone()).collect(),
        flags: Vec::new(),
        procrustes_disparity: Vec::new(),
        distance_correlation: Vec::new(),
        relative_angle_deg: Vec::new(),
        pearson_delta_corr: Vec::new(),
        layerwise_angles: Vec::new(),
        pca: None,
    };
    if policy.len() < 2 {
        report.flags.push(Flag::InsufficientIterations);
        return Ok(report);
    }
    for i in 1..policy.len() {
        let tag = policy.tags[i];
        let (px, py) = (policy.prefix(i + 1)?, reward.prefix(i + 1)?);
        report
            .procrustes_disparity
            .push(TagValue::measured(tag, procrustes_disparity(&px, &py)?));
        let dc = distance_correlation(&px, &py)?;
        report.distance_correlation.push(TagValue::measured(tag, dc));
        let angle = match relative_angle(&policy.delta(i)?, &reward.delta(i)?) {
            Ok(a) => TagValue { tag, value: Some(a), flag: None },
            Err(Error::UndefinedAngle(_)) => TagValue {
                tag,
                value: None,
                flag: Some(Flag::UndefinedAngle),
            },
            Err(e) => return Err(e),
        };
        report.relative_angle_deg.push(angle);
        report
            .pearson_delta_corr
            .push(TagValue::measured(tag, pearson_delta_correlation(policy, reward, tag)?));
    }
    report.layerwise_angles = layerwise_angles(policy, reward, &ranges)?;
    if 2 * policy.len() >= 3 {
        let pca = pca_project(&[policy, reward], 2)?;
        report.flags.extend(pca.flag);
        report.pca = Some(pca);
    }
    for v in report
        .procrustes_disparity
        .iter()
        .chain(&report.distance_correlation)
        .chain(&report.relative_angle_deg)
        .chain(&report.pearson_delta_corr)
    {
        if let Some(f) = v.flag {
            if !report.flags.contains(&f) {
                report.flags.push(f);
            }
        }
    }
    Ok(report)
}
