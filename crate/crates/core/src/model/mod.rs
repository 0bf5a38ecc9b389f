//! Layer-level model representation.
//!
//! A [`ModelGraph`] is a DAG of [`LayerSpec`]s wired through named tensors.
//! Tensors are flat vectors; two-dimensional tensors are laid out time-major
//! (`[length, channels]`, element `t * channels + c`), which is the layout
//! windowed packet sequences arrive in.

mod io;
mod ranges;
mod reference;
mod validate;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset_csv, write_dataset_csv, Dataset};
pub use ranges::{infer_ranges, widen, Range, RangeMap, DEFAULT_MARGIN};
pub use reference::{reference_infer, reference_trace};
pub(crate) use reference::{embedding_row_value, forward_layer, sigmoid};
pub use validate::{validate_model, Violation};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Input,
    Activation,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: TensorRole,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, role: TensorRole) -> Self {
        TensorSpec {
            name: name.into(),
            dims,
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of channels when read as a `[length, channels]` sequence.
    pub fn channels(&self) -> usize {
        if self.dims.len() >= 2 {
            self.dims[1..].iter().product()
        } else {
            1
        }
    }

    /// Sequence length when read as a `[length, channels]` sequence.
    pub fn length(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }
}

/// Kind-specific layer parameters. All parameters are full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerOp {
    /// `y = W x + b`, `W` stored as `out x in` rows.
    Fc { weight: Vec<Vec<f64>>, bias: Vec<f64> },
    /// 1D convolution over a `[length, in_channels]` tensor, no padding.
    /// `kernels[o][c][j]` weights input channel `c` at offset `j` for output channel `o`.
    Conv1d {
        kernels: Vec<Vec<Vec<f64>>>,
        bias: Vec<f64>,
        stride: usize,
    },
    /// `gamma * (x - mean) / sigma + beta`, element-wise.
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        sigma: Vec<f64>,
    },
    Bias { bias: Vec<f64> },
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    AvgPool { window: usize },
    MaxPool { window: usize },
    /// Row lookup `E[x - index_min]` for every element of the input.
    Embedding { table: Vec<Vec<f64>>, index_min: i64 },
    /// Element-wise product of two tensors.
    Hadamard,
    /// `sum |a - b|` over two tensors of equal size.
    AbsDiffSum,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Fc { .. } => "fc",
            LayerOp::Conv1d { .. } => "conv1d",
            LayerOp::BatchNorm { .. } => "batchnorm",
            LayerOp::Bias { .. } => "bias",
            LayerOp::Relu => "relu",
            LayerOp::Tanh => "tanh",
            LayerOp::Sigmoid => "sigmoid",
            LayerOp::Softmax => "softmax",
            LayerOp::AvgPool { .. } => "avgpool",
            LayerOp::MaxPool { .. } => "maxpool",
            LayerOp::Embedding { .. } => "embedding",
            LayerOp::Hadamard => "hadamard",
            LayerOp::AbsDiffSum => "absdiffsum",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerOp::Hadamard | LayerOp::AbsDiffSum => 2,
            _ => 1,
        }
    }

    /// True for element-wise non-linear activations.
    pub fn is_activation(&self) -> bool {
        matches!(self, LayerOp::Relu | LayerOp::Tanh | LayerOp::Sigmoid)
    }

    /// Inclusive index domain for embedding layers.
    pub fn index_domain(&self) -> Option<(i64, i64)> {
        match self {
            LayerOp::Embedding { table, index_min } => {
                Some((*index_min, *index_min + table.len() as i64 - 1))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub op: LayerOp,
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Classifier,
    Autoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorSpec>,
    pub head: Head,
}

impl ModelGraph {
    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn input(&self) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.role == TensorRole::Input)
    }

    pub fn output(&self) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.role == TensorRole::Output)
    }

    pub fn input_len(&self) -> usize {
        self.input().map(TensorSpec::len).unwrap_or(0)
    }

    pub fn output_len(&self) -> usize {
        self.output().map(TensorSpec::len).unwrap_or(0)
    }

    /// Producer/consumer relations as `(producer layer, consumer layer)` index pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let producers: HashMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.output.as_str(), i))
            .collect();
        let mut edges = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for input in &layer.inputs {
                if let Some(&p) = producers.get(input.as_str()) {
                    edges.push((p, i));
                }
            }
        }
        edges
    }

    /// Layer indices in a deterministic topological order.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.layers.len();
        let mut indegree = vec![0usize; n];
        let mut consumers = vec![Vec::new(); n];
        for (p, c) in self.edges() {
            indegree[c] += 1;
            consumers[p].push(c);
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidModel(vec!["layer graph contains a cycle".into()]));
        }
        Ok(order)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ModelGraph> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Incremental builder for sequential models, used by tests, the DSL and the
/// model zoo.
#[derive(Debug, Clone)]
pub struct SequentialBuilder {
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorSpec>,
    current: String,
    head: Head,
}

impl SequentialBuilder {
    pub fn new(input: &str, dims: Vec<usize>) -> Self {
        SequentialBuilder {
            layers: Vec::new(),
            tensors: vec![TensorSpec::new(input, dims, TensorRole::Input)],
            current: input.to_string(),
            head: Head::Classifier,
        }
    }

    pub fn head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn current(&self) -> &str {
        &self.current
    }

    pub fn current_dims(&self) -> Vec<usize> {
        self.tensors
            .iter()
            .find(|t| t.name == self.current)
            .map(|t| t.dims.clone())
            .unwrap_or_default()
    }

    /// Appends a layer consuming the current tensor (plus `extra` inputs).
    pub fn push(mut self, name: &str, op: LayerOp, out_dims: Vec<usize>) -> Self {
        self.push_with(name, op, &[], out_dims);
        self
    }

    pub fn push_with(&mut self, name: &str, op: LayerOp, extra: &[&str], out_dims: Vec<usize>) {
        let output = format!("{name}.out");
        let mut inputs = vec![self.current.clone()];
        inputs.extend(extra.iter().map(|s| s.to_string()));
        self.layers.push(LayerSpec {
            name: name.to_string(),
            op,
            inputs,
            output: output.clone(),
        });
        self.tensors
            .push(TensorSpec::new(&output, out_dims, TensorRole::Activation));
        self.current = output;
    }

    pub fn build(mut self) -> ModelGraph {
        if let Some(t) = self.tensors.iter_mut().find(|t| t.name == self.current) {
            if t.role != TensorRole::Input {
                t.role = TensorRole::Output;
            }
        }
        ModelGraph {
            layers: self.layers,
            tensors: self.tensors,
            head: self.head,
        }
    }
}

/// Output dims produced by `op` from inputs of the given dims.
pub fn output_dims(op: &LayerOp, input: &[usize]) -> Result<Vec<usize>> {
    let len: usize = input.iter().product();
    let spec = TensorSpec::new("", input.to_vec(), TensorRole::Activation);
    let dims = match op {
        LayerOp::Fc { weight, .. } => vec![weight.len()],
        LayerOp::Conv1d {
            kernels, stride, ..
        } => {
            let k = kernels
                .first()
                .and_then(|c| c.first())
                .map(Vec::len)
                .unwrap_or(0);
            let length = spec.length();
            if k == 0 || *stride == 0 || length < k {
                return Err(Error::Argument("conv1d kernel longer than input".into()));
            }
            vec![(length - k) / stride + 1, kernels.len()]
        }
        LayerOp::AvgPool { window } | LayerOp::MaxPool { window } => {
            if *window == 0 || !spec.length().is_multiple_of(*window) {
                return Err(Error::Argument(format!(
                    "pool window {window} does not divide length {}",
                    spec.length()
                )));
            }
            vec![spec.length() / window, spec.channels()]
        }
        LayerOp::Embedding { table, .. } => {
            let d = table.first().map(Vec::len).unwrap_or(0);
            if input.len() >= 2 {
                vec![spec.length(), spec.channels() * d]
            } else {
                vec![len, d]
            }
        }
        LayerOp::AbsDiffSum => vec![1],
        _ => input.to_vec(),
    };
    Ok(dims)
}
