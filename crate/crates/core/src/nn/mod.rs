//! Small dense classifier engine: ReLU MLPs with softmax heads, hand-derived
//! backpropagation, Adam, and concrete-dropout machinery.
//!
//! Parameters live in one flat buffer laid out layer by layer as
//! `weights (out x in, row-major)` followed by `biases`. The same layout is
//! used for gradients, optimizer moments and on-disk snapshots.

mod adam;
mod dropout;

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use dropout::{
    binary_entropy, concrete_mask, kl_regularizer, sample_dropout_realization, sigmoid,
    DropoutPosterior, KlTerm, PosteriorMode, INITIAL_DROP_PROBABILITY,
};
#[cfg(test)]
pub(crate) use dropout::realization_from_mask;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    /// One softmax over the whole output layer.
    Softmax,
    /// The output layer is split into `groups` equal slices, each normalized
    /// by its own softmax (one head per user in the black-box detector).
    GroupedSoftmax { groups: usize },
}

impl OutputHead {
    pub fn groups(&self) -> usize {
        match *self {
            OutputHead::Softmax => 1,
            OutputHead::GroupedSoftmax { groups } => groups,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: OutputHead,
    data: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl NetworkParams {
    pub fn zeros(layer_sizes: &[usize], head: OutputHead) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "layer sizes must have at least two positive entries, got {layer_sizes:?}"
            )));
        }
        let out = *layer_sizes.last().unwrap();
        if out % head.groups() != 0 {
            return Err(Error::invalid(format!(
                "output size {out} not divisible into {} heads",
                head.groups()
            )));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation: Activation::Relu,
            head,
            data: vec![0.0; param_count(layer_sizes)],
        })
    }

    /// Uniform fan-based initialization in `±sqrt(6/(in+out))`, zero biases.
    pub fn init_uniform<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        head: OutputHead,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes, head)?;
        for l in 0..p.layer_count() {
            let (fan_in, fan_out) = (p.layer_sizes[l], p.layer_sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in p.weights_mut(l) {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn from_flat(layer_sizes: &[usize], head: OutputHead, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes, head)?;
        if data.len() != p.data.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        p.data = data;
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total number of hidden units (all layers except input and output).
    pub fn hidden_units(&self) -> usize {
        self.layer_sizes[1..self.layer_sizes.len() - 1].iter().sum()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn layer_offset(&self, l: usize) -> usize {
        param_count(&self.layer_sizes[..=l])
    }

    /// Offset of layer `l`'s weight block in the flat buffer.
    pub fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.layer_offset(l);
        start..start + self.layer_sizes[l + 1] * self.layer_sizes[l]
    }

    pub fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let w = self.weight_range(l);
        w.end..w.end + self.layer_sizes[l + 1]
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        &self.data[self.weight_range(l)]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.weight_range(l);
        &mut self.data[r]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        &self.data[self.bias_range(l)]
    }

    pub fn biases_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.bias_range(l);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Forward pass returning the output probability vector.
    pub fn forward(&self, features: &[f64], mask: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_input(features, mask)?;
        Ok(self.forward_cached(features, mask).probs)
    }

    fn check_input(&self, features: &[f64], mask: Option<&[f64]>) -> Result<()> {
        if features.len() != self.input_size() {
            return Err(Error::invalid(format!(
                "feature length {} != input size {}",
                features.len(),
                self.input_size()
            )));
        }
        if let Some(m) = mask {
            if m.len() != self.hidden_units() {
                return Err(Error::invalid(format!(
                    "mask length {} != hidden units {}",
                    m.len(),
                    self.hidden_units()
                )));
            }
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate needed by [`Self::backward_cached`].
    /// Inputs are assumed validated.
    pub fn forward_cached(&self, features: &[f64], mask: Option<&[f64]>) -> ForwardCache {
        let layers = self.layer_count();
        let mut inputs = Vec::with_capacity(layers);
        let mut hidden_pre_mask = Vec::with_capacity(layers.saturating_sub(1));
        let mut current = features.to_vec();
        let mut mask_offset = 0;
        let mut logits = Vec::new();
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&current).map(|(a, x)| a * x).sum::<f64>();
            }
            inputs.push(std::mem::take(&mut current));
            if l + 1 < layers {
                let act: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                let mut next = act.clone();
                if let Some(m) = mask {
                    for (a, &mv) in next.iter_mut().zip(&m[mask_offset..mask_offset + n_out]) {
                        *a *= mv;
                    }
                }
                mask_offset += n_out;
                hidden_pre_mask.push(act);
                current = next;
            } else {
                logits = z;
            }
        }
        let probs = grouped_softmax(&logits, self.head.groups());
        ForwardCache {
            inputs,
            hidden_pre_mask,
            probs,
        }
    }

    /// Accumulates gradients given `dL/dlogits` for one sample.
    ///
    /// `grad_mask` receives `dL/dmask` per hidden unit and `grad_input`
    /// receives `dL/dfeatures`; both are accumulated, not overwritten.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        mask: Option<&[f64]>,
        grad_logits: &[f64],
        grads: &mut [f64],
        mut grad_mask: Option<&mut [f64]>,
        grad_input: Option<&mut [f64]>,
    ) -> Result<()> {
        let layers = self.layer_count();
        let mut delta = grad_logits.to_vec();
        let mut mask_end = self.hidden_units();
        for l in (0..layers).rev() {
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    context: format!("backward pass, layer {l}"),
                });
            }
            let n_in = self.layer_sizes[l];
            let input = &cache.inputs[l];
            let wr = self.weight_range(l);
            let br = self.bias_range(l);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads[br.start + o] += d;
                let g_row = &mut grads[wr.start + o * n_in..wr.start + (o + 1) * n_in];
                for (g, x) in g_row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            // gradient with respect to this layer's input
            let w = &self.data[wr];
            let mut d_in = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (di, a) in d_in.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *di += d * a;
                }
            }
            if l == 0 {
                if let Some(gi) = grad_input {
                    for (g, d) in gi.iter_mut().zip(&d_in) {
                        *g += d;
                    }
                }
                break;
            }
            // input of layer l is hidden layer l-1 output: mask ⊙ relu(z)
            let act = &cache.hidden_pre_mask[l - 1];
            let mask_start = mask_end - n_in;
            let m = mask.map(|m| &m[mask_start..mask_end]);
            if let Some(gm) = grad_mask.as_deref_mut() {
                let gm = &mut gm[mask_start..mask_end];
                for ((g, d), a) in gm.iter_mut().zip(&d_in).zip(act) {
                    *g += d * a;
                }
            }
            delta = d_in
                .iter()
                .enumerate()
                .map(|(u, &d)| {
                    let mv = m.map_or(1.0, |m| m[u]);
                    if act[u] > 0.0 {
                        d * mv
                    } else {
                        0.0
                    }
                })
                .collect();
            mask_end = mask_start;
        }
        Ok(())
    }

    /// Serializes to the flat little-endian snapshot layout: a `u32` count of
    /// layer sizes, the sizes as `u32`, then all parameters as `f64` in layer
    /// order (weights row-major, then biases).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (1 + self.layer_sizes.len()) + 8 * self.data.len());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], head: OutputHead) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("malformed parameter snapshot: {m}"));
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        let n = read_u32(0)? as usize;
        let sizes = (0..n)
            .map(|i| read_u32(4 + 4 * i).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let body = &bytes[4 + 4 * n..];
        if body.len() != 8 * param_count(&sizes) {
            return Err(bad("body length does not match layer sizes"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(&sizes, head, data)
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path, head: OutputHead) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, head)
    }
}

/// A trained model with one per-step loss curve for each independently
/// optimized part.
#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub model: T,
    pub curves: Vec<Vec<f64>>,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    hidden_pre_mask: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn grouped_softmax(logits: &[f64], groups: usize) -> Vec<f64> {
    let g = logits.len() / groups;
    logits.chunks(g).flat_map(softmax).collect()
}

/// Outcome of a clipped cross-entropy evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Set when the labelled probability fell below [`PROB_FLOOR`].
    pub clipped: bool,
}

pub fn cross_entropy_loss(probs: &[f64], label: usize) -> Result<CrossEntropy> {
    let p = *probs.get(label).ok_or_else(|| {
        Error::invalid(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    let clipped = p < PROB_FLOOR;
    let value = -p.max(PROB_FLOOR).ln();
    Ok(CrossEntropy {
        value: if value == 0.0 { 0.0 } else { value },
        clipped,
    })
}

/// A supervised batch: `len` rows of features stored contiguously, and
/// `len * groups` class labels.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub labels: &'a [usize],
    pub len: usize,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [f64], labels: &'a [usize], len: usize) -> Self {
        Self {
            inputs,
            labels,
            len,
        }
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        let d = self.inputs.len() / self.len;
        &self.inputs[i * d..(i + 1) * d]
    }
}

/// Per-hidden-unit multipliers applied during a batch pass.
#[derive(Clone, Copy, Debug)]
pub enum MaskSchedule<'a> {
    None,
    /// One mask for every sample.
    Shared(&'a [f64]),
    /// `batch.len` masks stored contiguously.
    PerSample(&'a [f64]),
}

impl<'a> MaskSchedule<'a> {
    fn for_sample(&self, i: usize, hidden: usize) -> Option<&'a [f64]> {
        match *self {
            MaskSchedule::None => None,
            MaskSchedule::Shared(m) => Some(m),
            MaskSchedule::PerSample(m) => Some(&m[i * hidden..(i + 1) * hidden]),
        }
    }
}

/// Gradients of the batch-mean cross-entropy.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// Same layout as [`NetworkParams::as_slice`].
    pub params: Vec<f64>,
    /// `dL/dmask`, shaped like the mask schedule (absent without masks).
    pub mask: Option<Vec<f64>>,
    /// Number of samples whose labelled probability hit the floor.
    pub clipped: usize,
}

/// Mean cross-entropy (summed over output heads) of `batch` and its gradient.
pub fn backward(
    params: &NetworkParams,
    batch: &Batch<'_>,
    masks: MaskSchedule<'_>,
) -> Result<Gradients> {
    if batch.len == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let hidden = params.hidden_units();
    let groups = params.head().groups();
    if batch.inputs.len() != batch.len * params.input_size() {
        return Err(Error::invalid("batch feature matrix has wrong shape"));
    }
    if batch.labels.len() != batch.len * groups {
        return Err(Error::invalid("batch label count mismatch"));
    }
    let mut grad_mask = match masks {
        MaskSchedule::None => None,
        MaskSchedule::Shared(m) => {
            check_mask_len(m.len(), hidden)?;
            Some(vec![0.0; hidden])
        }
        MaskSchedule::PerSample(m) => {
            check_mask_len(m.len(), hidden * batch.len)?;
            Some(vec![0.0; hidden * batch.len])
        }
    };
    let classes = params.output_size() / groups;
    let scale = 1.0 / batch.len as f64;
    let mut grads = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut clipped = 0;
    for i in 0..batch.len {
        let mask = masks.for_sample(i, hidden);
        let cache = params.forward_cached(batch.row(i), mask);
        let mut g = cache.probs.clone();
        for (h, &label) in batch.labels[i * groups..(i + 1) * groups].iter().enumerate() {
            let head = &cache.probs[h * classes..(h + 1) * classes];
            let ce = cross_entropy_loss(head, label)?;
            loss += ce.value * scale;
            if ce.clipped {
                clipped += 1;
                // flat region of the floored loss
                g[h * classes..(h + 1) * classes].iter_mut().for_each(|v| *v = 0.0);
            } else {
                g[h * classes + label] -= 1.0;
            }
        }
        g.iter_mut().for_each(|v| *v *= scale);
        let gm = match (&mut grad_mask, masks) {
            (Some(gm), MaskSchedule::PerSample(_)) => Some(&mut gm[i * hidden..(i + 1) * hidden]),
            (Some(gm), _) => Some(gm.as_mut_slice()),
            _ => None,
        };
        params.backward_cached(&cache, mask, &g, &mut grads, gm, None)?;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence {
            context: format!("loss evaluation, layer {}", params.layer_count() - 1),
        });
    }
    Ok(Gradients {
        loss,
        params: grads,
        mask: grad_mask,
        clipped,
    })
}

fn check_mask_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(format!("mask length {got}, expected {want}")));
    }
    Ok(())
}

/// `dL/dlogits` from `dL/dprobs` through the (grouped) softmax.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], groups: usize) -> Vec<f64> {
    let g = probs.len() / groups;
    let mut out = Vec::with_capacity(probs.len());
    for (p, gp) in probs.chunks(g).zip(grad_probs.chunks(g)) {
        let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(gp).map(|(pi, gi)| pi * (gi - dot)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;

    fn hand_network() -> NetworkParams {
        // 2-4-2 network
        let w1 = [1.0, -1.0, 0.5, 2.0, -0.5, 0.0, 2.0, 1.0];
        let b1 = [0.0, 0.1, -0.2, 0.3];
        let w2 = [1.0, 0.0, -1.0, 0.5, 0.0, 1.0, 1.0, -0.5];
        let b2 = [0.1, -0.1];
        let mut data = Vec::new();
        data.extend(w1);
        data.extend(b1);
        data.extend(w2);
        data.extend(b2);
        NetworkParams::from_flat(&[2, 4, 2], OutputHead::Softmax, data).unwrap()
    }

    #[test]
    fn zero_network_is_uniform() {
        let p = NetworkParams::zeros(&[3, 5, 4], OutputHead::Softmax).unwrap();
        let out = p.forward(&[0.3, -1.0, 2.0], None).unwrap();
        for v in out {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_forward() {
        // hidden pre-activations for input (1,0): (1, 0.6, -0.7, 2.3) -> relu (1, 0.6, 0, 2.3)
        // logits: 2.25 and -0.65
        let h: [f64; 4] = [1.0, 0.6, 0.0, 2.3];
        let z0 = 0.1 + 1.0 * h[0] + 0.0 * h[1] - 1.0 * h[2] + 0.5 * h[3];
        let z1 = -0.1 + 0.0 * h[0] + 1.0 * h[1] + 1.0 * h[2] - 0.5 * h[3];
        let e0 = z0.exp();
        let e1 = z1.exp();
        let expected = [e0 / (e0 + e1), e1 / (e0 + e1)];
        assert!((z0 - 2.25f64).abs() < 1e-12 && (z1 + 0.65f64).abs() < 1e-12);
        let out = hand_network().forward(&[1.0, 0.0], None).unwrap();
        assert!((out[0] - expected[0]).abs() < 1e-12);
        assert!((out[1] - expected[1]).abs() < 1e-12);
        assert!((out[0] - 0.947_846_436_921_582).abs() < 1e-12);
    }

    #[test]
    fn unit_mask_matches_no_mask() {
        let p = hand_network();
        let a = p.forward(&[0.3, -0.7], None).unwrap();
        let b = p.forward(&[0.3, -0.7], Some(&[1.0; 4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = hand_network();
        assert!(matches!(p.forward(&[1.0], None), Err(Error::InvalidInput(_))));
        assert!(p.forward(&[1.0, 0.0], Some(&[1.0; 3])).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy_loss(&[1.0, 0.0], 0).unwrap().value, 0.0);
        let v = cross_entropy_loss(&[0.5, 0.5], 1).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let v = cross_entropy_loss(&[0.25, 0.75], 0).unwrap().value;
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let c = cross_entropy_loss(&[1.0, 0.0], 1).unwrap();
        assert!(c.clipped);
        assert!((c.value - 1e12f64.ln()).abs() < 1e-9);
        assert!(cross_entropy_loss(&[1.0], 3).is_err());
    }

    #[test]
    fn constant_network_bias_gradient_is_p_minus_y() {
        let p = NetworkParams::zeros(&[2, 3, 2], OutputHead::Softmax).unwrap();
        let inputs = [0.1, 0.2, -0.3, 0.4, 1.0, 1.0, 0.0, -2.0];
        let labels = [0, 1, 0, 1];
        let g = backward(&p, &Batch::new(&inputs, &labels, 4), MaskSchedule::None).unwrap();
        let b = p.bias_range(1);
        // p = 0.5 for both classes, y averaged = 0.5
        assert!(g.params[b.start].abs() < 1e-15);
        assert!(g.params[b.start + 1].abs() < 1e-15);
        let labels = [0, 0, 0, 1];
        let g = backward(&p, &Batch::new(&inputs, &labels, 4), MaskSchedule::None).unwrap();
        assert!((g.params[b.start] - (0.5 - 0.75)).abs() < 1e-15);
        assert!((g.params[b.start + 1] - (0.5 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_sample_has_zero_gradient() {
        // output bias drives class 0 to probability 1 in floating point
        let mut p = NetworkParams::zeros(&[1, 2, 2], OutputHead::Softmax).unwrap();
        p.biases_mut(1)[0] = 800.0;
        let g = backward(&p, &Batch::new(&[0.5], &[0], 1), MaskSchedule::None).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let p = hand_network();
        assert!(backward(&p, &Batch::new(&[], &[], 0), MaskSchedule::None).is_err());
    }

    #[test]
    fn snapshot_roundtrip_and_layout() {
        let p = hand_network();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[0..4], &3u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        let back = NetworkParams::from_bytes(&bytes, OutputHead::Softmax).unwrap();
        assert_eq!(back, p);
        assert!(NetworkParams::from_bytes(&bytes[..20], OutputHead::Softmax).is_err());
    }

    #[test]
    fn grouped_heads_normalize_separately() {
        let mut rng = rng_for(3, &[]);
        let p = NetworkParams::init_uniform(&[4, 8, 6], OutputHead::GroupedSoftmax { groups: 2 }, &mut rng)
            .unwrap();
        let out = p.forward(&[0.2, 0.1, -0.3, 1.0], None).unwrap();
        assert!((out[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((out[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-700.0f64..700.0, 1..12)) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000, x in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let mut rng = rng_for(seed, &[]);
            let p = NetworkParams::init_uniform(&[5, 16, 4], OutputHead::Softmax, &mut rng).unwrap();
            let a = p.forward(&x, Some(&[1.0; 16])).unwrap();
            let b = p.forward(&x, Some(&[1.0; 16])).unwrap();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
