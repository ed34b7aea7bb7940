//! Small MLP/CNN models over a flat parameter vector.
//!
//! The layout records which coordinates form convolution filters, which are
//! biases, and how hidden ReLU nodes map to (incoming, bias, outgoing)
//! index sets, so loss-preserving node-wise re-scalings can be applied and
//! normalization operators built per scheme.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{ChunkedObjective, Objective};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputShape {
    /// Flat feature vector of the given width.
    Dim(usize),
    /// Image stack `[c, h, w]`.
    Image { c: usize, h: usize, w: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { out: usize },
    Conv { out_channels: usize, kernel: usize },
}

/// Layer stack with ReLU activations between layers and a softmax
/// cross-entropy head on the last (dense) layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

/// Feature shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FeatureShape {
    Flat(usize),
    Map { c: usize, h: usize, w: usize },
}

impl FeatureShape {
    fn flat_len(self) -> usize {
        match self {
            FeatureShape::Flat(d) => d,
            FeatureShape::Map { c, h, w } => c * h * w,
        }
    }
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden.iter().map(|&h| LayerSpec::Dense { out: h }).collect();
        layers.push(LayerSpec::Dense { out: classes });
        ModelSpec { input: InputShape::Dim(input_dim), layers }
    }

    /// Number of output classes (width of the final dense layer).
    pub fn n_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) => *out,
            _ => 0,
        }
    }

    /// Shape of features entering each layer, plus the final output shape.
    /// Errors on nonconforming stacks (conv after dense, conv head, kernel
    /// larger than its input, zero widths).
    fn shape_chain(&self) -> Result<Vec<FeatureShape>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::invalid("final layer must be dense"));
        }
        let mut cur = match self.input {
            InputShape::Dim(d) if d > 0 => FeatureShape::Flat(d),
            InputShape::Image { c, h, w } if c > 0 && h > 0 && w > 0 => FeatureShape::Map { c, h, w },
            _ => return Err(Error::invalid("input shape has a zero extent")),
        };
        let mut chain = vec![cur];
        let mut seen_dense = false;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(Error::invalid(format!("layer {i}: zero width")));
                    }
                    seen_dense = true;
                    FeatureShape::Flat(out)
                }
                LayerSpec::Conv { out_channels, kernel } => {
                    if seen_dense {
                        return Err(Error::invalid(format!("layer {i}: conv after dense")));
                    }
                    if out_channels == 0 || kernel == 0 {
                        return Err(Error::invalid(format!("layer {i}: zero conv extent")));
                    }
                    match cur {
                        FeatureShape::Map { c: _, h, w } => {
                            if kernel > h || kernel > w {
                                return Err(Error::invalid(format!(
                                    "layer {i}: {kernel}x{kernel} kernel exceeds {h}x{w} input"
                                )));
                            }
                            FeatureShape::Map { c: out_channels, h: h - kernel + 1, w: w - kernel + 1 }
                        }
                        FeatureShape::Flat(_) => {
                            return Err(Error::invalid(format!("layer {i}: conv requires image input")))
                        }
                    }
                }
            };
            chain.push(cur);
        }
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_chain().map(|_| ())
    }

    /// Parameter layout: per-layer offsets, filter groups, bias mask, and
    /// the hidden-node scaling map.
    pub fn layout(&self) -> Result<ParameterLayout> {
        let chain = self.shape_chain()?;
        // First pass: per-layer weight/bias offsets.
        let mut offset = 0usize;
        let mut weight_off = Vec::with_capacity(self.layers.len());
        let mut bias_off = Vec::with_capacity(self.layers.len());
        let mut filter_groups = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { out } => {
                    let fan_in = chain[i].flat_len();
                    weight_off.push(offset);
                    offset += fan_in * out;
                    bias_off.push(offset);
                    offset += out;
                }
                LayerSpec::Conv { out_channels, kernel } => {
                    let cin = match chain[i] {
                        FeatureShape::Map { c, .. } => c,
                        FeatureShape::Flat(_) => unreachable!("validated above"),
                    };
                    let per_filter = cin * kernel * kernel;
                    weight_off.push(offset);
                    for f in 0..out_channels {
                        filter_groups.push(offset + f * per_filter..offset + (f + 1) * per_filter);
                    }
                    offset += out_channels * per_filter;
                    bias_off.push(offset);
                    offset += out_channels;
                }
            }
        }
        let k = offset;
        let mut bias_mask = vec![false; k];
        for (i, layer) in self.layers.iter().enumerate() {
            let n_bias = match *layer {
                LayerSpec::Dense { out } => out,
                LayerSpec::Conv { out_channels, .. } => out_channels,
            };
            for j in 0..n_bias {
                bias_mask[bias_off[i] + j] = true;
            }
        }
        // Second pass: hidden-node map (every layer except the head).
        let mut node_map = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().take(self.layers.len() - 1) {
            let next = self.layers[i + 1];
            match *layer {
                LayerSpec::Dense { out } => {
                    let fan_in = chain[i].flat_len();
                    // Conv never follows dense, so the next layer is dense.
                    let next_out = match next {
                        LayerSpec::Dense { out } => out,
                        LayerSpec::Conv { .. } => unreachable!("validated above"),
                    };
                    for j in 0..out {
                        let incoming = (0..fan_in).map(|r| weight_off[i] + r * out + j).collect();
                        let outgoing = (0..next_out).map(|q| weight_off[i + 1] + j * next_out + q).collect();
                        node_map.push(NodeGroup { incoming, bias: bias_off[i] + j, outgoing });
                    }
                }
                LayerSpec::Conv { out_channels, kernel } => {
                    let cin = match chain[i] {
                        FeatureShape::Map { c, .. } => c,
                        FeatureShape::Flat(_) => unreachable!(),
                    };
                    let per_filter = cin * kernel * kernel;
                    let (oh, ow) = match chain[i + 1] {
                        FeatureShape::Map { h, w, .. } => (h, w),
                        FeatureShape::Flat(_) => unreachable!(),
                    };
                    for ch in 0..out_channels {
                        let incoming =
                            (weight_off[i] + ch * per_filter..weight_off[i] + (ch + 1) * per_filter).collect();
                        let outgoing = match next {
                            LayerSpec::Conv { out_channels: cout2, kernel: k2 } => {
                                let per2 = out_channels * k2 * k2;
                                let mut v = Vec::with_capacity(cout2 * k2 * k2);
                                for d in 0..cout2 {
                                    let base = weight_off[i + 1] + d * per2 + ch * k2 * k2;
                                    v.extend(base..base + k2 * k2);
                                }
                                v
                            }
                            LayerSpec::Dense { out: out2 } => {
                                // Flattening keeps [c, h, w] row-major order, so
                                // channel ch occupies rows ch·oh·ow .. (ch+1)·oh·ow.
                                let mut v = Vec::with_capacity(oh * ow * out2);
                                for r in ch * oh * ow..(ch + 1) * oh * ow {
                                    let base = weight_off[i + 1] + r * out2;
                                    v.extend(base..base + out2);
                                }
                                v
                            }
                        };
                        node_map.push(NodeGroup { incoming, bias: bias_off[i] + ch, outgoing });
                    }
                }
            }
        }
        Ok(ParameterLayout { k, filter_groups, bias_mask, node_map })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.input {
            InputShape::Dim(d) => write!(f, "input=dim:{d};layers=")?,
            InputShape::Image { c, h, w } => write!(f, "input=image:{c}x{h}x{w};layers=")?,
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            match layer {
                LayerSpec::Dense { out } => write!(f, "dense:{out}")?,
                LayerSpec::Conv { out_channels, kernel } => write!(f, "conv:{out_channels}x{kernel}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::invalid(format!("model spec `{s}`: {what}"));
        let mut input = None;
        let mut layers = None;
        for part in s.split(';') {
            let (key, value) = part.split_once('=').ok_or_else(|| bad("expected key=value parts"))?;
            match key.trim() {
                "input" => {
                    let (kind, dims) = value.trim().split_once(':').ok_or_else(|| bad("input wants kind:dims"))?;
                    input = Some(match kind {
                        "dim" => InputShape::Dim(dims.parse().map_err(|_| bad("bad input width"))?),
                        "image" => {
                            let d: Vec<usize> = dims
                                .split('x')
                                .map(|t| t.parse().map_err(|_| bad("bad image dims")))
                                .collect::<Result<_>>()?;
                            if d.len() != 3 {
                                return Err(bad("image wants CxHxW"));
                            }
                            InputShape::Image { c: d[0], h: d[1], w: d[2] }
                        }
                        _ => return Err(bad("input kind must be dim or image")),
                    });
                }
                "layers" => {
                    let mut v = Vec::new();
                    for item in value.split(',') {
                        let (kind, dims) = item.trim().split_once(':').ok_or_else(|| bad("layer wants kind:dims"))?;
                        v.push(match kind {
                            "dense" => LayerSpec::Dense { out: dims.parse().map_err(|_| bad("bad dense width"))? },
                            "conv" => {
                                let (c, k) = dims.split_once('x').ok_or_else(|| bad("conv wants OUTxK"))?;
                                LayerSpec::Conv {
                                    out_channels: c.parse().map_err(|_| bad("bad conv channels"))?,
                                    kernel: k.parse().map_err(|_| bad("bad conv kernel"))?,
                                }
                            }
                            _ => return Err(bad("layer kind must be dense or conv")),
                        });
                    }
                    layers = Some(v);
                }
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        let spec = ModelSpec {
            input: input.ok_or_else(|| bad("missing input"))?,
            layers: layers.ok_or_else(|| bad("missing layers"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Parameter layout and vector
// ---------------------------------------------------------------------------

/// Index sets of one hidden ReLU node (or conv channel): scaling its
/// incoming weights and bias by `c > 0` and its outgoing weights by `1/c`
/// leaves the network function unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeGroup {
    pub incoming: Vec<usize>,
    pub bias: usize,
    pub outgoing: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterLayout {
    /// Total parameter count.
    pub k: usize,
    /// One index range per convolution filter (bias excluded), disjoint.
    pub filter_groups: Vec<Range<usize>>,
    /// True at bias coordinates.
    pub bias_mask: Vec<bool>,
    /// Hidden ReLU nodes eligible for loss-preserving scaling.
    pub node_map: Vec<NodeGroup>,
}

/// Flat parameter values plus their shared layout.
#[derive(Clone, Debug)]
pub struct ParameterVector<S> {
    values: Vec<S>,
    layout: Arc<ParameterLayout>,
}

impl<S: Scalar> ParameterVector<S> {
    pub fn new(values: Vec<S>, layout: Arc<ParameterLayout>) -> Result<Self> {
        if values.len() != layout.k {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, layout wants {}",
                values.len(),
                layout.k
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "parameter_vector" });
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<ParameterLayout> {
        Arc::clone(&self.layout)
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<S>) -> Result<Self> {
        ParameterVector::new(values, Arc::clone(&self.layout))
    }

    /// `w + eps` as a new vector, without finiteness re-checks (callers
    /// validate the resulting loss instead).
    pub fn perturbed(&self, eps: &[S]) -> Result<Self> {
        if eps.len() != self.values.len() {
            return Err(Error::invalid("perturbation length mismatch"));
        }
        let values = self.values.iter().zip(eps).map(|(&w, &e)| w + e).collect();
        Ok(ParameterVector { values, layout: Arc::clone(&self.layout) })
    }

    pub(crate) fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }
}

/// Deterministic initialization: every weight and bias drawn uniformly from
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, layer by layer.
pub fn build_model<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParameterVector<S>> {
    let layout = Arc::new(spec.layout()?);
    let chain = spec.shape_chain()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(layout.k);
    for (i, layer) in spec.layers.iter().enumerate() {
        let (n_weights, n_bias, fan_in) = match *layer {
            LayerSpec::Dense { out } => {
                let fan_in = chain[i].flat_len();
                (fan_in * out, out, fan_in)
            }
            LayerSpec::Conv { out_channels, kernel } => {
                let cin = match chain[i] {
                    FeatureShape::Map { c, .. } => c,
                    FeatureShape::Flat(_) => unreachable!(),
                };
                let fan_in = cin * kernel * kernel;
                (out_channels * fan_in, out_channels, fan_in)
            }
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..n_weights + n_bias {
            let u: f64 = rng.random();
            values.push(cast::<S>(bound * (2.0 * u - 1.0)));
        }
    }
    ParameterVector::new(values, layout)
}

// ---------------------------------------------------------------------------
// Forward / loss / gradient
// ---------------------------------------------------------------------------

struct ForwardBuild<S> {
    graph: Graph<S>,
    logits: NodeId,
    leaf_ranges: Vec<(NodeId, Range<usize>)>,
}

/// Records the whole model forward pass for a batch on a fresh tape.
fn build_forward<S: Scalar>(spec: &ModelSpec, w: &ParameterVector<S>, features: &Tensor<S>) -> Result<ForwardBuild<S>> {
    let chain = spec.shape_chain()?;
    let n = features.shape().first().copied().unwrap_or(0);
    check_features(spec, features)?;
    let mut g: Graph<S> = Graph::new();
    let mut cur = g.input(features.clone());
    let mut cur_shape = chain[0];
    let mut leaf_ranges = Vec::new();
    let mut offset = 0usize;
    let values = w.values();
    let n_layers = spec.layers.len();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { out } => {
                let fan_in = cur_shape.flat_len();
                if matches!(cur_shape, FeatureShape::Map { .. }) {
                    cur = g.reshape(cur, vec![n, fan_in])?;
                }
                let w_range = offset..offset + fan_in * out;
                let b_range = offset + fan_in * out..offset + fan_in * out + out;
                let wl = g.leaf(Tensor::new(vec![fan_in, out], values[w_range.clone()].to_vec())?);
                let bl = g.leaf(Tensor::new(vec![out], values[b_range.clone()].to_vec())?);
                leaf_ranges.push((wl, w_range));
                leaf_ranges.push((bl, b_range.clone()));
                offset = b_range.end;
                cur = g.matmul(cur, wl)?;
                cur = g.add(cur, bl)?;
                cur_shape = FeatureShape::Flat(out);
            }
            LayerSpec::Conv { out_channels, kernel } => {
                let cin = match cur_shape {
                    FeatureShape::Map { c, .. } => c,
                    FeatureShape::Flat(_) => unreachable!("validated above"),
                };
                let per = cin * kernel * kernel;
                let w_range = offset..offset + out_channels * per;
                let b_range = w_range.end..w_range.end + out_channels;
                let wl = g.leaf(Tensor::new(
                    vec![out_channels, cin, kernel, kernel],
                    values[w_range.clone()].to_vec(),
                )?);
                let bl = g.leaf(Tensor::new(vec![out_channels], values[b_range.clone()].to_vec())?);
                leaf_ranges.push((wl, w_range));
                leaf_ranges.push((bl, b_range.clone()));
                offset = b_range.end;
                cur = g.conv2d(cur, wl)?;
                cur = g.add(cur, bl)?;
                cur_shape = chain[i + 1];
            }
        }
        if i + 1 < n_layers {
            cur = g.relu(cur)?;
        }
    }
    Ok(ForwardBuild { graph: g, logits: cur, leaf_ranges })
}

fn check_features<S: Scalar>(spec: &ModelSpec, features: &Tensor<S>) -> Result<()> {
    let shape = features.shape();
    let ok = match spec.input {
        InputShape::Dim(d) => shape.len() == 2 && shape[1] == d,
        InputShape::Image { c, h, w } => shape.len() == 4 && shape[1] == c && shape[2] == h && shape[3] == w,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: "model_forward",
            detail: format!("features {:?} do not match model input {:?}", shape, spec.input),
        })
    }
}

/// Mean batch loss and its gradient with respect to the flat parameters.
pub fn loss_and_grad<S: Scalar>(
    w: &ParameterVector<S>,
    spec: &ModelSpec,
    features: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, Vec<S>)> {
    let mut fb = build_forward(spec, w, features)?;
    let ce = fb.graph.softmax_cross_entropy(fb.logits, labels)?;
    let loss = fb.graph.mean(ce)?;
    let grads = fb.graph.backward(loss)?;
    let mut flat = vec![S::zero(); w.k()];
    for (leaf, range) in &fb.leaf_ranges {
        let g = grads.wrt(*leaf).expect("leaf gradient");
        flat[range.clone()].copy_from_slice(g.data());
    }
    Ok((fb.graph.value(loss).item()?, flat))
}

/// Mean batch loss without gradients.
pub fn loss_only<S: Scalar>(
    w: &ParameterVector<S>,
    spec: &ModelSpec,
    features: &Tensor<S>,
    labels: &[usize],
) -> Result<S> {
    let mut fb = build_forward(spec, w, features)?;
    let ce = fb.graph.softmax_cross_entropy(fb.logits, labels)?;
    let loss = fb.graph.mean(ce)?;
    fb.graph.value(loss).item()
}

/// Raw logits for a batch (used for predictions).
pub fn logits<S: Scalar>(w: &ParameterVector<S>, spec: &ModelSpec, features: &Tensor<S>) -> Result<Tensor<S>> {
    let fb = build_forward(spec, w, features)?;
    Ok(fb.graph.value(fb.logits).clone())
}

/// Mean loss and classification accuracy over a dataset.
pub fn evaluate<S: Scalar>(w: &ParameterVector<S>, spec: &ModelSpec, data: &Dataset<S>) -> Result<(S, f64)> {
    let mut fb = build_forward(spec, w, data.features())?;
    let ce = fb.graph.softmax_cross_entropy(fb.logits, data.labels())?;
    let loss = fb.graph.mean(ce)?;
    let logits = fb.graph.value(fb.logits);
    let c = spec.n_classes();
    let mut hits = 0usize;
    for (i, &y) in data.labels().iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok((fb.graph.value(loss).item()?, hits as f64 / data.len() as f64))
}

/// Forward output of the model on a feature batch (softmax inputs).
/// Thin wrapper used by invariance checks.
pub fn forward_outputs<S: Scalar>(w: &ParameterVector<S>, spec: &ModelSpec, features: &Tensor<S>) -> Result<Vec<S>> {
    Ok(logits(w, spec, features)?.data().to_vec())
}

// ---------------------------------------------------------------------------
// Node-wise scaling
// ---------------------------------------------------------------------------

/// Multiplies a hidden node's incoming weights and bias by `c` and its
/// outgoing weights by `1/c`. Requires `c > 0`; negative factors would flip
/// ReLU activations and change the network function.
pub fn apply_node_scaling<S: Scalar>(w: &ParameterVector<S>, node: usize, c: S) -> Result<ParameterVector<S>> {
    if !(c > S::zero()) || !c.is_finite() {
        return Err(Error::invalid(format!("scaling factor must be positive and finite, got {c}")));
    }
    let layout = w.layout();
    let group = layout
        .node_map
        .get(node)
        .ok_or_else(|| Error::invalid(format!("node {node} out of range ({} hidden nodes)", layout.node_map.len())))?;
    let mut values = w.values().to_vec();
    for &i in &group.incoming {
        values[i] *= c;
    }
    values[group.bias] *= c;
    let inv = S::one() / c;
    for &i in &group.outgoing {
        values[i] *= inv;
    }
    w.with_values(values)
}

// ---------------------------------------------------------------------------
// Label noise
// ---------------------------------------------------------------------------

/// Replaces each label independently, with probability `noise_rate`, by a
/// uniformly random different class. Deterministic given the seed.
pub fn corrupt_labels<S: Scalar>(data: &Dataset<S>, noise_rate: f64, seed: u64) -> Result<Dataset<S>> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::invalid(format!("noise rate {noise_rate} outside [0, 1]")));
    }
    if noise_rate > 0.0 && data.n_classes() < 2 {
        return Err(Error::invalid("label noise needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = data.n_classes();
    let labels = data
        .labels()
        .iter()
        .map(|&y| {
            if rng.random::<f64>() < noise_rate {
                let r = rng.random_range(0..n_classes - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            } else {
                y
            }
        })
        .collect();
    data.with_labels(labels)
}

// ---------------------------------------------------------------------------
// Batch objective
// ---------------------------------------------------------------------------

/// A model bound to one feature/label batch, exposed to the optimizers.
#[derive(Clone)]
pub struct BatchObjective<'a, S> {
    spec: &'a ModelSpec,
    features: Tensor<S>,
    labels: Vec<usize>,
}

impl<'a, S: Scalar> BatchObjective<'a, S> {
    pub fn new(spec: &'a ModelSpec, features: Tensor<S>, labels: Vec<usize>) -> Result<Self> {
        check_features(spec, &features)?;
        if features.shape()[0] != labels.len() {
            return Err(Error::invalid("batch features/labels length mismatch"));
        }
        Ok(BatchObjective { spec, features, labels })
    }

    pub fn from_dataset(spec: &'a ModelSpec, data: &Dataset<S>) -> Result<Self> {
        BatchObjective::new(spec, data.features().clone(), data.labels().to_vec())
    }
}

impl<S: Scalar> Objective<S> for BatchObjective<'_, S> {
    fn loss(&self, w: &ParameterVector<S>) -> Result<S> {
        loss_only(w, self.spec, &self.features, &self.labels)
    }

    fn loss_and_grad(&self, w: &ParameterVector<S>) -> Result<(S, Vec<S>)> {
        loss_and_grad(w, self.spec, &self.features, &self.labels)
    }
}

impl<'a, S: Scalar> ChunkedObjective<S> for BatchObjective<'a, S> {
    type Chunk = BatchObjective<'a, S>;

    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn chunk(&self, range: Range<usize>) -> Result<Self::Chunk> {
        let features = self.features.slice_rows(range.start, range.end)?;
        let labels = self.labels[range].to_vec();
        BatchObjective::new(self.spec, features, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::finite_difference_gradient;

    fn small_batch(spec: &ModelSpec, n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = match spec.input {
            InputShape::Dim(d) => d,
            InputShape::Image { c, h, w } => c * h * w,
        };
        let shape = match spec.input {
            InputShape::Dim(d) => vec![n, d],
            InputShape::Image { c, h, w } => vec![n, c, h, w],
        };
        let feats = Tensor::new(shape, (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..spec.n_classes())).collect();
        (feats, labels)
    }

    #[test]
    fn mlp_parameter_count() {
        // 2-3-2 MLP: 2·3+3 + 3·2+2 = 17.
        let spec = ModelSpec::mlp(2, &[3], 2);
        assert_eq!(spec.layout().unwrap().k, 17);
    }

    #[test]
    fn conv_layout_filter_groups() {
        // 1 -> 4 channels, 3x3 kernel: 4 groups of 9, biases excluded.
        let spec = ModelSpec {
            input: InputShape::Image { c: 1, h: 6, w: 6 },
            layers: vec![LayerSpec::Conv { out_channels: 4, kernel: 3 }, LayerSpec::Dense { out: 2 }],
        };
        let layout = spec.layout().unwrap();
        assert_eq!(layout.filter_groups.len(), 4);
        for g in &layout.filter_groups {
            assert_eq!(g.len(), 9);
        }
        for g in &layout.filter_groups {
            for i in g.clone() {
                assert!(!layout.bias_mask[i]);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_vectors() {
        let spec = ModelSpec::mlp(4, &[5], 3);
        let a: ParameterVector<f64> = build_model(&spec, 7).unwrap();
        let b: ParameterVector<f64> = build_model(&spec, 7).unwrap();
        assert_eq!(a.values(), b.values());
        let c: ParameterVector<f64> = build_model(&spec, 8).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let spec = ModelSpec::mlp(3, &[4], 2);
        let layout = Arc::new(spec.layout().unwrap());
        let w = ParameterVector::new(vec![0.0; layout.k], layout).unwrap();
        let (feats, labels) = small_batch(&spec, 6, 1);
        let loss = loss_only(&w, &spec, &feats, &labels).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn duplicated_sample_has_same_loss_as_single() {
        let spec = ModelSpec::mlp(3, &[4], 2);
        let w: ParameterVector<f64> = build_model(&spec, 3).unwrap();
        let (feats, labels) = small_batch(&spec, 1, 2);
        let row = feats.data().to_vec();
        let mut rep = Vec::new();
        for _ in 0..8 {
            rep.extend_from_slice(&row);
        }
        let feats8 = Tensor::new(vec![8, 3], rep).unwrap();
        let labels8 = vec![labels[0]; 8];
        let single = loss_only(&w, &spec, &feats, &labels).unwrap();
        let batch = loss_only(&w, &spec, &feats8, &labels8).unwrap();
        assert!((single - batch).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for spec in [
            ModelSpec::mlp(3, &[5, 4], 3),
            ModelSpec {
                input: InputShape::Image { c: 1, h: 5, w: 5 },
                layers: vec![LayerSpec::Conv { out_channels: 2, kernel: 3 }, LayerSpec::Dense { out: 2 }],
            },
        ] {
            let w: ParameterVector<f64> = build_model(&spec, 11).unwrap();
            let (feats, labels) = small_batch(&spec, 4, 5);
            let (_, grad) = loss_and_grad(&w, &spec, &feats, &labels).unwrap();
            let f = |v: &[f64]| {
                let wv = w.with_values(v.to_vec())?;
                loss_only(&wv, &spec, &feats, &labels)
            };
            let fd = finite_difference_gradient(f, w.values(), 1e-6).unwrap();
            for (i, (&a, &n)) in grad.iter().zip(&fd).enumerate() {
                let rel = (a - n).abs() / n.abs().max(1.0);
                assert!(rel < 1e-5, "coordinate {i}: autodiff {a} vs fd {n}");
            }
        }
    }

    #[test]
    fn node_scaling_identity_and_inverse() {
        let spec = ModelSpec::mlp(3, &[4], 2);
        let w: ParameterVector<f64> = build_model(&spec, 5).unwrap();
        let unchanged = apply_node_scaling(&w, 0, 1.0).unwrap();
        assert_eq!(w.values(), unchanged.values());
        let scaled = apply_node_scaling(&w, 2, 3.0).unwrap();
        let back = apply_node_scaling(&scaled, 2, 1.0 / 3.0).unwrap();
        for (a, b) in w.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn node_scaling_rejects_non_positive_factor() {
        let spec = ModelSpec::mlp(3, &[4], 2);
        let w: ParameterVector<f64> = build_model(&spec, 5).unwrap();
        assert!(apply_node_scaling(&w, 0, 0.0).is_err());
        assert!(apply_node_scaling(&w, 0, -2.0).is_err());
    }

    #[test]
    fn node_scaling_preserves_network_function() {
        // Dense and conv models, c across [0.1, 10].
        let specs = vec![
            ModelSpec::mlp(3, &[4, 3], 2),
            ModelSpec {
                input: InputShape::Image { c: 1, h: 6, w: 6 },
                layers: vec![
                    LayerSpec::Conv { out_channels: 3, kernel: 3 },
                    LayerSpec::Conv { out_channels: 2, kernel: 2 },
                    LayerSpec::Dense { out: 2 },
                ],
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for spec in specs {
            let w: ParameterVector<f64> = build_model(&spec, 21).unwrap();
            let n_nodes = w.layout().node_map.len();
            assert!(n_nodes > 0);
            let mut scaled = w.clone();
            for node in 0..n_nodes {
                let c = 0.1 * 100f64.powf(rng.random::<f64>()); // log-uniform in [0.1, 10]
                scaled = apply_node_scaling(&scaled, node, c).unwrap();
            }
            assert_eq!(scaled.layout(), w.layout());
            let (feats, labels) = small_batch(&spec, 20, 17);
            let before = forward_outputs(&w, &spec, &feats).unwrap();
            let after = forward_outputs(&scaled, &spec, &feats).unwrap();
            for (a, b) in before.iter().zip(&after) {
                assert!((a - b).abs() < 1e-9, "outputs differ: {a} vs {b}");
            }
            let l0 = loss_only(&w, &spec, &feats, &labels).unwrap();
            let l1 = loss_only(&scaled, &spec, &feats, &labels).unwrap();
            assert!((l0 - l1).abs() < 1e-9);
        }
    }

    #[test]
    fn corrupt_labels_edge_rates() {
        let feats = Tensor::new(vec![6, 2], vec![0.0; 12]).unwrap();
        let ds = Dataset::new(feats, vec![0, 1, 0, 1, 0, 1], 2).unwrap();
        let same = corrupt_labels(&ds, 0.0, 1).unwrap();
        assert_eq!(same.labels(), ds.labels());
        let flipped = corrupt_labels(&ds, 1.0, 1).unwrap();
        for (a, b) in ds.labels().iter().zip(flipped.labels()) {
            assert_eq!(*b, 1 - *a);
        }
        assert!(corrupt_labels(&ds, 1.5, 1).is_err());
        assert!(corrupt_labels(&ds, -0.1, 1).is_err());
    }

    #[test]
    fn corrupt_labels_rate_concentrates() {
        let n = 10_000;
        let feats = Tensor::new(vec![n, 1], vec![0.5; n]).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let ds = Dataset::new(feats, labels, 10).unwrap();
        let noisy = corrupt_labels(&ds, 0.4, 123).unwrap();
        let changed = ds.labels().iter().zip(noisy.labels()).filter(|(a, b)| a != b).count();
        let frac = changed as f64 / n as f64;
        assert!((frac - 0.4).abs() < 0.02, "changed fraction {frac}");
    }

    #[test]
    fn model_spec_text_round_trip() {
        for text in ["input=dim:4;layers=dense:16,dense:2", "input=image:1x8x8;layers=conv:4x3,dense:10"] {
            let spec: ModelSpec = text.parse().unwrap();
            assert_eq!(spec.to_string(), text);
        }
        assert!("input=dim:4".parse::<ModelSpec>().is_err());
        assert!("input=dim:4;layers=conv:2x3".parse::<ModelSpec>().is_err()); // conv on flat input
    }

    #[test]
    fn forward_works_at_f32() {
        // The stack is generic over the scalar; f32 forward values track the
        // f64 instantiation to single precision.
        let spec = ModelSpec::mlp(3, &[4], 2);
        let w64: ParameterVector<f64> = build_model(&spec, 6).unwrap();
        let w32: ParameterVector<f32> = build_model(&spec, 6).unwrap();
        let (feats64, labels) = small_batch(&spec, 4, 8);
        let feats32 = Tensor::<f32>::new(
            feats64.shape().to_vec(),
            feats64.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let l64 = loss_only(&w64, &spec, &feats64, &labels).unwrap();
        let l32 = loss_only(&w32, &spec, &feats32, &labels).unwrap();
        assert!((l64 - l32 as f64).abs() < 1e-3, "f64 {l64} vs f32 {l32}");
    }

    #[test]
    fn nonconforming_specs_are_rejected() {
        // Conv after dense.
        let spec = ModelSpec {
            input: InputShape::Image { c: 1, h: 6, w: 6 },
            layers: vec![LayerSpec::Dense { out: 4 }, LayerSpec::Conv { out_channels: 2, kernel: 2 }],
        };
        assert!(spec.validate().is_err());
        // Kernel larger than input.
        let spec = ModelSpec {
            input: InputShape::Image { c: 1, h: 2, w: 2 },
            layers: vec![LayerSpec::Conv { out_channels: 2, kernel: 3 }, LayerSpec::Dense { out: 2 }],
        };
        assert!(spec.validate().is_err());
    }
}
