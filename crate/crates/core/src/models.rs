//! Desk-scale policy and reward networks.
//!
//! Both are tanh MLPs over prompt features with a linear output layer. The
//! policy reads its output as logits over a flat response vocabulary; the
//! reward model shares the policy's architecture as its trunk and adds a small
//! value head that gates the trunk output by the response index:
//!
//! `score(x, a) = head[a] * trunk(x)[a] + head[A]`
//!
//! so the trunk has exactly the policy's parameter count and both can be
//! compared coordinate by coordinate.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::seed;

/// Layer sizes of a tanh MLP; weights are stored layer-major, each layer as a
/// row-major `out x in` weight block followed by `out` biases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpLayout {
    dims: Vec<usize>,
}

/// Post-activation values of every layer, input first, logits last.
pub(crate) struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }
}

impl MlpLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidDimension(format!(
                "layer dims must have >= 2 positive entries, got {dims:?}"
            )));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Named index ranges, one weight and one bias block per layer.
    pub fn layer_blocks(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let nw = w[0] * w[1];
            out.push((format!("layer{l}.weight"), offset..offset + nw));
            out.push((format!("layer{l}.bias"), offset + nw..offset + nw + w[1]));
            offset += nw + w[1];
        }
        out
    }

    /// One block per layer (weights and biases together).
    pub fn layers(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let n = w[0] * w[1] + w[1];
            out.push((format!("layer{l}"), offset..offset + n));
            offset += n;
        }
        out
    }

    /// Gaussian `N(0, 1/fan_in)` weights and zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        let mut values = Vec::with_capacity(self.param_count());
        for w in self.dims.windows(2) {
            let dist = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).expect("positive std");
            values.extend((0..w[0] * w[1]).map(|_| dist.sample(&mut rng)));
            values.extend(std::iter::repeat_n(0.0, w[1]));
        }
        ParamVector::from_vec_unchecked(values)
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim_mismatch(params.len(), self.param_count()));
        }
        if input.len() != self.input_dim() {
            return Err(Error::InvalidDimension(format!(
                "input has dim {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(params, input)?.activations.pop().unwrap())
    }

    pub(crate) fn trace(&self, params: &[f64], input: &[f64]) -> Result<Trace> {
        self.check(params, input)?;
        let n_layers = self.dims.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        let mut offset = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let prev = activations.last().unwrap();
            let mut next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    bias[o] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < n_layers {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(next);
            offset += n_in * n_out + n_out;
        }
        Ok(Trace { activations })
    }

    /// Accumulates `d(output . grad_out)/d(params)` into `grad`.
    pub(crate) fn backward(&self, params: &[f64], trace: &Trace, grad_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.param_count());
        let n_layers = self.dims.len() - 1;
        let offsets: Vec<usize> = self
            .dims
            .windows(2)
            .scan(0, |acc, w| {
                let o = *acc;
                *acc += w[0] * w[1] + w[1];
                Some(o)
            })
            .collect();
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let input = &trace.activations[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (p, w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                            *p += d * w;
                        }
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    fn descriptor(&self) -> String {
        self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    }

    fn parse_dims(s: &str) -> Result<Self> {
        let dims = s
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad layer dims `{s}`")))?;
        Self::new(dims)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Smallest index whose cumulative probability exceeds `u`.
pub fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Categorical policy over `A` responses.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpPolicy {
    layout: MlpLayout,
    params: ParamVector,
}

impl MlpPolicy {
    pub fn new(layout: MlpLayout, params: ParamVector) -> Result<Self> {
        if params.dim() != layout.param_count() {
            return Err(Error::dim_mismatch(params.dim(), layout.param_count()));
        }
        Ok(Self { layout, params })
    }

    pub fn init(layout: MlpLayout, seed: u64) -> Self {
        let params = layout.init(seed);
        Self { layout, params }
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn n_responses(&self) -> usize {
        self.layout.output_dim()
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.layout.clone(), params)
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.dim() != self.params.dim() {
            return Err(Error::dim_mismatch(params.dim(), self.params.dim()));
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.layout.forward(self.params.as_slice(), features)
    }

    pub fn log_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.forward(features)?))
    }

    pub fn probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(features)?))
    }

    /// Inverse-CDF draw with a single uniform from `rng_seed`.
    pub fn sample(&self, features: &[f64], rng_seed: u64) -> Result<usize> {
        let u: f64 = seed::rng(rng_seed).random();
        Ok(inverse_cdf(&self.probs(features)?, u))
    }

    /// Gradient of `log pi(response | features)` with respect to the parameters.
    pub fn grad_log_prob(&self, features: &[f64], response: usize) -> Result<ParamVector> {
        let mut grad = vec![0.0; self.params.dim()];
        self.accumulate_grad_log_prob(features, response, 1.0, &mut grad)?;
        Ok(ParamVector::from_vec_unchecked(grad))
    }

    /// `grad += weight * d log pi(response | features) / d params`
    pub(crate) fn accumulate_grad_log_prob(
        &self,
        features: &[f64],
        response: usize,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_response(response)?;
        let trace = self.layout.trace(self.params.as_slice(), features)?;
        let probs = softmax(trace.output());
        let grad_out: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| weight * (f64::from(u8::from(i == response)) - p))
            .collect();
        self.layout.backward(self.params.as_slice(), &trace, &grad_out, grad);
        Ok(())
    }

    pub(crate) fn check_response(&self, response: usize) -> Result<()> {
        if response >= self.n_responses() {
            return Err(Error::InvalidArgument(format!(
                "response {response} outside [0, {})",
                self.n_responses()
            )));
        }
        Ok(())
    }

    pub fn arch_descriptor(&self) -> String {
        format!("policy {} tanh", self.layout.descriptor())
    }

    pub fn save(&self, path: &Path, iteration: u64, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            dim: self.params.dim(),
            iteration,
            seed,
            arch: Some(self.arch_descriptor()),
        };
        checkpoint::save(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<(CheckpointHeader, Self)> {
        let (header, params) = checkpoint::load(path)?;
        let arch = header
            .arch
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("policy checkpoint lacks arch line".into()))?;
        let parts: Vec<&str> = arch.split(' ').collect();
        match parts.as_slice() {
            ["policy", dims, "tanh"] => {
                let policy = Self::new(MlpLayout::parse_dims(dims)?, params)?;
                Ok((header, policy))
            }
            _ => Err(Error::Checkpoint(format!("not a policy descriptor: `{arch}`"))),
        }
    }
}

/// Bradley-Terry scorer of (prompt, response) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    layout: MlpLayout,
    trunk: ParamVector,
    head: ParamVector,
}

impl RewardModel {
    pub fn new(layout: MlpLayout, trunk: ParamVector, head: ParamVector) -> Result<Self> {
        if trunk.dim() != layout.param_count() {
            return Err(Error::dim_mismatch(trunk.dim(), layout.param_count()));
        }
        if head.dim() != layout.output_dim() + 1 {
            return Err(Error::dim_mismatch(head.dim(), layout.output_dim() + 1));
        }
        Ok(Self { layout, trunk, head })
    }

    /// Trunk copied from `policy`, head weights one and bias zero, so the
    /// initial score is the policy's own logit.
    pub fn from_policy(policy: &MlpPolicy) -> Self {
        let a = policy.n_responses();
        let mut head = vec![1.0; a + 1];
        head[a] = 0.0;
        Self {
            layout: policy.layout.clone(),
            trunk: policy.params.clone(),
            head: ParamVector::from_vec_unchecked(head),
        }
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn trunk(&self) -> &ParamVector {
        &self.trunk
    }

    pub fn head(&self) -> &ParamVector {
        &self.head
    }

    pub fn n_responses(&self) -> usize {
        self.layout.output_dim()
    }

    /// Trunk followed by head.
    pub fn full_params(&self) -> ParamVector {
        self.trunk.concat(&self.head)
    }

    pub fn from_full_params(layout: MlpLayout, full: &ParamVector) -> Result<Self> {
        let d = layout.param_count();
        let b = layout.output_dim() + 1;
        if full.dim() != d + b {
            return Err(Error::dim_mismatch(full.dim(), d + b));
        }
        Self::new(layout, full.slice(0..d)?, full.slice(d..d + b)?)
    }

    pub(crate) fn set_params(&mut self, trunk: ParamVector, head: ParamVector) -> Result<()> {
        *self = Self::new(self.layout.clone(), trunk, head)?;
        Ok(())
    }

    fn check_response(&self, response: usize) -> Result<()> {
        if response >= self.n_responses() {
            return Err(Error::InvalidArgument(format!(
                "response {response} outside [0, {})",
                self.n_responses()
            )));
        }
        Ok(())
    }

    pub fn score(&self, features: &[f64], response: usize) -> Result<f64> {
        self.check_response(response)?;
        let h = self.layout.forward(self.trunk.as_slice(), features)?;
        Ok(self.score_from_trunk(&h, response))
    }

    /// Scores for every response, sharing one trunk pass.
    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        let h = self.layout.forward(self.trunk.as_slice(), features)?;
        Ok((0..self.n_responses()).map(|a| self.score_from_trunk(&h, a)).collect())
    }

    fn score_from_trunk(&self, h: &[f64], response: usize) -> f64 {
        let head = self.head.as_slice();
        head[response] * h[response] + head[self.n_responses()]
    }

    /// `trunk_grad += weight * d score / d trunk`, same for the head.
    pub(crate) fn accumulate_score_grad(
        &self,
        features: &[f64],
        response: usize,
        weight: f64,
        trunk_grad: &mut [f64],
        head_grad: &mut [f64],
    ) -> Result<()> {
        self.check_response(response)?;
        let trace = self.layout.trace(self.trunk.as_slice(), features)?;
        let a = self.n_responses();
        head_grad[response] += weight * trace.output()[response];
        head_grad[a] += weight;
        let mut grad_out = vec![0.0; a];
        grad_out[response] = weight * self.head.as_slice()[response];
        self.layout
            .backward(self.trunk.as_slice(), &trace, &grad_out, trunk_grad);
        Ok(())
    }

    pub fn arch_descriptor(&self) -> String {
        format!("reward {} tanh head={}", self.layout.descriptor(), self.head.dim())
    }

    pub fn save(&self, path: &Path, iteration: u64, seed: u64) -> Result<()> {
        let full = self.full_params();
        let header = CheckpointHeader {
            dim: full.dim(),
            iteration,
            seed,
            arch: Some(self.arch_descriptor()),
        };
        checkpoint::save(path, &header, &full)
    }

    pub fn load(path: &Path) -> Result<(CheckpointHeader, Self)> {
        let (header, params) = checkpoint::load(path)?;
        let arch = header
            .arch
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("reward checkpoint lacks arch line".into()))?;
        let parts: Vec<&str> = arch.split(' ').collect();
        match parts.as_slice() {
            ["reward", dims, "tanh", head] if head.starts_with("head=") => {
                let layout = MlpLayout::parse_dims(dims)?;
                let rm = Self::from_full_params(layout, &params)?;
                Ok((header, rm))
            }
            _ => Err(Error::Checkpoint(format!("not a reward descriptor: `{arch}`"))),
        }
    }
}

/// Prompt features, one row per prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBatch {
    dim: usize,
    features: Vec<f64>,
    ids: Vec<usize>,
}

impl PromptBatch {
    pub fn new(dim: usize, features: Vec<f64>, ids: Vec<usize>) -> Result<Self> {
        if dim == 0 || ids.is_empty() || features.len() != dim * ids.len() {
            return Err(Error::InvalidDimension(format!(
                "{} feature values for {} prompts of dim {dim}",
                features.len(),
                ids.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite prompt feature".into()));
        }
        Ok(Self { dim, features, ids })
    }

    /// `n` prompts with i.i.d. standard-normal features and ids `0..n`.
    pub fn gaussian(n: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let features = (0..n * dim)
            .map(|_| rand_distr::StandardNormal.sample(&mut rng))
            .collect();
        Self::new(dim, features, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features of the prompt with the given id, if present.
    pub fn features_of(&self, id: usize) -> Option<&[f64]> {
        self.ids.iter().position(|&x| x == id).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.ids.iter().copied().zip(self.features.chunks_exact(self.dim))
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(positions.len() * self.dim);
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= self.len() {
                return Err(Error::InvalidArgument(format!("prompt position {p} out of range")));
            }
            features.extend_from_slice(self.row(p));
            ids.push(self.ids[p]);
        }
        Self::new(self.dim, features, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Deterministic, non-trivial parameters shared with `tests/golden/forward_oracle.py`.
    fn golden_params(n: usize) -> ParamVector {
        ParamVector::new((0..n).map(|i| 0.5 * (0.37 * i as f64 + 0.1).sin()).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let layout = MlpLayout::new(vec![3, 5, 4]).unwrap();
        let policy = MlpPolicy::new(layout.clone(), ParamVector::zeros(layout.param_count()).unwrap()).unwrap();
        assert_eq!(policy.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 4]);
        let rm = RewardModel::new(
            layout.clone(),
            ParamVector::zeros(layout.param_count()).unwrap(),
            ParamVector::zeros(5).unwrap(),
        )
        .unwrap();
        for a in 0..4 {
            assert_eq!(rm.score(&[0.3, 0.1, 9.0], a).unwrap(), 0.0);
        }
    }

    #[test]
    fn affine_single_layer() {
        let layout = MlpLayout::new(vec![1, 1]).unwrap();
        let policy = MlpPolicy::new(layout, ParamVector::new(vec![2.5, -0.5]).unwrap()).unwrap();
        assert_eq!(policy.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn param_count_and_blocks() {
        let layout = MlpLayout::new(vec![8, 32, 32, 32]).unwrap();
        assert_eq!(layout.param_count(), 8 * 32 + 32 + 32 * 32 + 32 + 32 * 32 + 32);
        let blocks = layout.layers();
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks.last().unwrap().1.end, layout.param_count());
        assert!(MlpLayout::new(vec![3]).is_err());
        assert!(MlpLayout::new(vec![3, 0]).is_err());
    }

    #[test]
    fn dimension_errors() {
        let layout = MlpLayout::new(vec![2, 3]).unwrap();
        let policy = MlpPolicy::init(layout.clone(), 1);
        assert!(matches!(policy.forward(&[1.0]), Err(Error::InvalidDimension(_))));
        assert!(MlpPolicy::new(layout.clone(), ParamVector::zeros(2).unwrap()).is_err());
        let rm = RewardModel::from_policy(&policy);
        assert!(matches!(rm.score(&[1.0, 1.0], 3), Err(Error::InvalidArgument(_))));
    }

    // Golden values from tests/golden/forward_oracle.py (numpy matrix arithmetic).
    #[test]
    fn golden_forward_and_score() {
        let layout = MlpLayout::new(vec![3, 4, 2]).unwrap();
        let policy = MlpPolicy::new(layout.clone(), golden_params(layout.param_count())).unwrap();
        let logits = policy.forward(&[0.5, -1.0, 2.0]).unwrap();
        let expected = [GOLDEN_LOGITS[0], GOLDEN_LOGITS[1]];
        for (a, b) in logits.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        let rm = RewardModel::new(
            layout.clone(),
            golden_params(layout.param_count()),
            ParamVector::new(vec![0.7, -1.3, 0.2]).unwrap(),
        )
        .unwrap();
        let s = rm.score(&[0.5, -1.0, 2.0], 1).unwrap();
        assert!((s - GOLDEN_SCORE).abs() < 1e-14, "{s}");
    }

    const GOLDEN_LOGITS: [f64; 2] = [-0.13608397067550282, -0.2832304132324179];
    const GOLDEN_SCORE: f64 = 0.5681995372021433;

    #[test]
    fn softmax_sums_to_one() {
        let layout = MlpLayout::new(vec![8, 32, 32, 32]).unwrap();
        let policy = MlpPolicy::init(layout, 5);
        let p = policy.probs(&[0.1, -0.4, 2.0, 0.0, 1.0, -3.0, 0.5, 0.2]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sampling_frequencies() {
        let layout = MlpLayout::new(vec![1, 4]).unwrap();
        // Dominant logit at index 2.
        let mut params = vec![0.0; 8];
        params[4 + 2] = 50.0;
        let peaked = MlpPolicy::new(layout.clone(), ParamVector::new(params).unwrap()).unwrap();
        let hits = (0..10_000u64).filter(|&s| peaked.sample(&[0.0], s).unwrap() == 2).count();
        assert!(hits as f64 / 1e4 >= 0.999);

        let uniform = MlpPolicy::new(layout, ParamVector::zeros(8).unwrap()).unwrap();
        let mut counts = [0usize; 4];
        for s in 0..10_000u64 {
            counts[uniform.sample(&[1.0], s).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.25).abs() <= 0.02, "{counts:?}");
        }
        assert_eq!(uniform.sample(&[1.0], 77).unwrap(), uniform.sample(&[1.0], 77).unwrap());
    }

    #[test]
    fn uniform_output_bias_gradient() {
        // Zero weights make the output uniform over A; the final bias gradient
        // of log pi(a) is onehot(a) - 1/A.
        let layout = MlpLayout::new(vec![2, 3, 5]).unwrap();
        let policy = MlpPolicy::new(layout.clone(), ParamVector::zeros(layout.param_count()).unwrap()).unwrap();
        let g = policy.grad_log_prob(&[0.3, -0.7], 1).unwrap();
        let bias = layout.layer_blocks().last().unwrap().1.clone();
        for (i, v) in g.as_slice()[bias].iter().enumerate() {
            let want = if i == 1 { 1.0 - 1.0 / 5.0 } else { -1.0 / 5.0 };
            assert!((v - want).abs() < 1e-15);
        }
        assert_eq!(g, policy.grad_log_prob(&[0.3, -0.7], 1).unwrap());
    }

    fn central_difference<F: Fn(&ParamVector) -> f64>(f: F, p: &ParamVector, h: f64) -> Vec<f64> {
        (0..p.dim())
            .map(|i| {
                let mut plus = p.clone().into_vec();
                let mut minus = plus.clone();
                plus[i] += h;
                minus[i] -= h;
                (f(&ParamVector::new(plus).unwrap()) - f(&ParamVector::new(minus).unwrap())) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
    }

    #[test]
    fn reward_score_gradient_matches_finite_differences() {
        let layout = MlpLayout::new(vec![3, 5, 4]).unwrap();
        let policy = MlpPolicy::init(layout.clone(), 11);
        let rm = RewardModel::new(layout.clone(), policy.params().clone(), ParamVector::new(vec![0.5, -1.0, 2.0, 0.3, 0.1]).unwrap()).unwrap();
        let x = [0.2, -0.4, 1.1];
        let mut tg = vec![0.0; layout.param_count()];
        let mut hg = vec![0.0; 5];
        rm.accumulate_score_grad(&x, 2, 1.0, &mut tg, &mut hg).unwrap();
        let full = rm.full_params();
        let fd = central_difference(
            |p| RewardModel::from_full_params(layout.clone(), p).unwrap().score(&x, 2).unwrap(),
            &full,
            1e-6,
        );
        let analytic: Vec<f64> = tg.iter().chain(&hg).copied().collect();
        assert!(max_rel_err(&analytic, &fd) <= 1e-4);
    }

    #[test]
    fn checkpoints_reproduce_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let layout = MlpLayout::new(vec![4, 6, 3]).unwrap();
        let policy = MlpPolicy::init(layout.clone(), 3);
        let path = dir.path().join("p.ckpt");
        policy.save(&path, 2, 3).unwrap();
        let (h, back) = MlpPolicy::load(&path).unwrap();
        assert_eq!(h.iteration, 2);
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(policy.forward(&x).unwrap(), back.forward(&x).unwrap());

        let rm = RewardModel::from_policy(&policy);
        let rpath = dir.path().join("r.ckpt");
        rm.save(&rpath, 2, 3).unwrap();
        let (_, rback) = RewardModel::load(&rpath).unwrap();
        assert_eq!(rm, rback);
        assert!(MlpPolicy::load(&rpath).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn policy_grad_matches_finite_differences(seed in 0u64..1000, response in 0usize..4, x in prop::collection::vec(-2.0..2.0f64, 3)) {
            let layout = MlpLayout::new(vec![3, 6, 4]).unwrap();
            let policy = MlpPolicy::init(layout.clone(), seed);
            let g = policy.grad_log_prob(&x, response).unwrap();
            let fd = central_difference(
                |p| policy.with_params(p.clone()).unwrap().log_probs(&x).unwrap()[response],
                policy.params(),
                1e-6,
            );
            prop_assert!(max_rel_err(g.as_slice(), &fd) <= 1e-4);
        }
    }
}
