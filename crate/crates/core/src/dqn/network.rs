use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HistoryWindow, OutputLayout};
use crate::error::{Error, Result};
use crate::token_bucket::BucketParams;
use crate::trace_gen::rng_for;

const CHECKPOINT_MAGIC: &[u8; 8] = b"OFFLDQN1";
const INIT_STREAM: u64 = 4;

/// MLP shape and input encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// History window length `T`; the input holds `T - 1` entries.
    pub window: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// Gaps are clipped at this value and scaled by its inverse.
    pub gap_clip: u32,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            window: 97,
            hidden_layers: 5,
            hidden_units: 64,
            gap_clip: 255,
        }
    }
}

impl Architecture {
    pub fn input_width(&self) -> usize {
        2 * (self.window - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidConfig("history window T must be >= 2".into()));
        }
        if self.hidden_units == 0 || self.gap_clip == 0 {
            return Err(Error::InvalidConfig(
                "hidden units and gap clip must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fully connected layer, `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

/// Activations kept from a forward pass for backpropagation.
pub(crate) struct ForwardCache {
    /// `activations[0]` is the input; the last entry is the linear output.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub(crate) fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty cache")
    }
}

/// The Q-network: ReLU hidden layers, linear output head over the
/// [`OutputLayout`] of its bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    arch: Architecture,
    params: BucketParams,
    layers: Vec<Dense>,
}

impl QNetwork {
    /// Uniform fan-in initialisation `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn new(arch: Architecture, params: BucketParams, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut sizes = vec![arch.input_width()];
        sizes.extend(std::iter::repeat_n(arch.hidden_units, arch.hidden_layers));
        sizes.push(OutputLayout::new(params).len());
        let mut rng = rng_for(seed, INIT_STREAM);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let mut layer = Dense::zeros(w[0], w[1]);
                layer
                    .weights
                    .mapv_inplace(|_| rng.random_range(-bound..bound));
                layer
            })
            .collect();
        Ok(Self {
            arch,
            params,
            layers,
        })
    }

    /// Builds a network from explicit layers, validating every shape.
    pub fn from_layers(arch: Architecture, params: BucketParams, layers: Vec<Dense>) -> Result<Self> {
        arch.validate()?;
        let out = OutputLayout::new(params).len();
        let first = layers.first().ok_or(Error::Empty("network layers"))?;
        if first.inputs() != arch.input_width() {
            return Err(Error::Dimension {
                expected: arch.input_width(),
                actual: first.inputs(),
            });
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Dimension {
                    expected: w[0].outputs(),
                    actual: w[1].inputs(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::Dimension {
                    expected: l.outputs(),
                    actual: l.bias.len(),
                });
            }
        }
        let last = layers.last().expect("non-empty").outputs();
        if last != out {
            return Err(Error::Dimension {
                expected: out,
                actual: last,
            });
        }
        Ok(Self {
            arch,
            params,
            layers,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> BucketParams {
        self.params
    }

    pub fn layout(&self) -> OutputLayout {
        OutputLayout::new(self.params)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.arch.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::Dimension {
                expected: self.num_parameters(),
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn encode(&self, history: &HistoryWindow) -> Result<Vec<f64>> {
        let expected = self.arch.window - 1;
        if history.len() != expected || history.metrics.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: history.len(),
            });
        }
        let mut row = vec![0.0; self.input_width()];
        history.encode_into(self.arch.gap_clip, &mut row);
        Ok(row)
    }

    /// Q-values for one history window.
    pub fn forward(&self, history: &HistoryWindow) -> Result<Vec<f64>> {
        let row = self.encode(history)?;
        let x = ArrayView2::from_shape((1, row.len()), &row).expect("row shape");
        Ok(self.forward_batch(x).row(0).to_vec())
    }

    /// Q-values for a batch of encoded inputs, one row per sample.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(inputs.ncols(), self.input_width(), "input width");
        let last = self.layers.len() - 1;
        let mut h = affine(&self.layers[0], inputs);
        if last > 0 {
            relu(&mut h);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = affine(layer, h.view());
            if i < last {
                relu(&mut h);
            }
        }
        h
    }

    pub(crate) fn forward_cached(&self, inputs: Array2<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = affine(layer, activations[i].view());
            if i < last {
                relu(&mut h);
            }
            activations.push(h);
        }
        ForwardCache { activations }
    }

    /// Gradients of `sum(d_output * output)` with respect to every parameter.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_output: Array2<f64>) -> Gradients {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_output;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let weights = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weights, bias });
            if i > 0 {
                let mut upstream = delta.dot(&layer.weights);
                Zip::from(&mut upstream)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = upstream;
            }
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    /// Binary checkpoint: magic, little-endian `u32` header
    /// `(T, N, P, M, gap_clip, layer count, layer sizes...)`, then every
    /// layer's weights (row-major) and bias as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut sizes = vec![self.input_width()];
        sizes.extend(self.layers.iter().map(Dense::outputs));
        let header = [
            self.arch.window as u64,
            self.params.fill,
            self.params.cost,
            self.params.capacity,
            self.arch.gap_clip as u64,
            sizes.len() as u64,
        ];
        for v in header.iter().copied().chain(sizes.iter().map(|&s| s as u64)) {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.parameters() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let mut pos = 8;
        let mut next_u32 = || -> Result<u32> {
            let chunk = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated header"))?;
            pos += 4;
            Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
        };
        let window = next_u32()? as usize;
        let fill = next_u32()? as u64;
        let cost = next_u32()? as u64;
        let capacity = next_u32()? as u64;
        let gap_clip = next_u32()?;
        let count = next_u32()? as usize;
        if count < 2 {
            return Err(bad("need at least two layer sizes"));
        }
        let sizes = (0..count)
            .map(|_| next_u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let params = BucketParams::new(fill, cost, capacity)?;
        let layout_len = OutputLayout::new(params).len();
        if *sizes.last().expect("count >= 2") != layout_len {
            return Err(bad(&format!(
                "output width {} does not match layout size {layout_len}",
                sizes.last().unwrap()
            )));
        }
        let hidden = &sizes[1..count - 1];
        let arch = Architecture {
            window,
            hidden_layers: hidden.len(),
            hidden_units: hidden.first().copied().unwrap_or(1),
            gap_clip,
        };
        let expected_params: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let body = &bytes[pos..];
        if body.len() != 8 * expected_params {
            return Err(bad(&format!(
                "expected {} weight bytes, found {}",
                8 * expected_params,
                body.len()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut layers: Vec<Dense> = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let mut it = values.into_iter();
        for l in &mut layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Self::from_layers(arch, params, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        Self::from_bytes(&bytes)
    }
}

fn affine(layer: &Dense, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = inputs.dot(&layer.weights.t());
    out += &layer.bias;
    out
}

fn relu(h: &mut Array2<f64>) {
    h.mapv_inplace(|v| v.max(0.0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dqn::HistoryWindow;

    fn toy() -> QNetwork {
        let arch = Architecture {
            window: 4,
            hidden_layers: 2,
            hidden_units: 5,
            gap_clip: 8,
        };
        QNetwork::new(arch, BucketParams::new(1, 2, 3).unwrap(), 42).unwrap()
    }

    #[test]
    fn shapes_follow_layout() {
        let net = toy();
        assert_eq!(net.input_width(), 6);
        assert_eq!(net.output_width(), 5);
        assert_eq!(net.layers().len(), 3);
        let default = QNetwork::new(
            Architecture::default(),
            BucketParams::from_rational(1, 10, 4, 1).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(default.output_width(), 71);
        assert_eq!(default.layers().len(), 6);
    }

    #[test]
    fn zero_output_layer_gives_zero_q() {
        let mut net = toy();
        let last = net.layers_mut().last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        let h = HistoryWindow {
            gaps: vec![3, 1, 2],
            metrics: vec![0.4, -0.2, 0.9],
        };
        assert!(net.forward(&h).unwrap().iter().all(|&q| q == 0.0));
    }

    #[test]
    fn forward_is_pure_and_checks_width() {
        let net = toy();
        let h = HistoryWindow {
            gaps: vec![1, 1, 5],
            metrics: vec![0.1, 0.2, 0.3],
        };
        assert_eq!(net.forward(&h).unwrap(), net.forward(&h).unwrap());
        let short = HistoryWindow {
            gaps: vec![1],
            metrics: vec![0.1],
        };
        assert!(matches!(net.forward(&short), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parameters_round_trip() {
        let mut net = toy();
        let p = net.parameters();
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        net.set_parameters(&shifted).unwrap();
        assert_eq!(net.parameters(), shifted);
        assert!(net.set_parameters(&p[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let net = toy();
        let bytes = net.to_bytes();
        assert_eq!(QNetwork::from_bytes(&bytes).unwrap(), net);
        assert!(QNetwork::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_m = bytes.clone();
        // M lives at header offset 8 + 3 * 4
        wrong_m[20..24].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(QNetwork::from_bytes(&wrong_m), Err(Error::Checkpoint(_))));
    }
}
