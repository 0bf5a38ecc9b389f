use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{output_dims, Head, LayerOp, ModelGraph, TensorRole};

/// One broken invariant, naming the offending layer or tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Checks every structural and parameter invariant. An empty list means the
/// model is valid.
pub fn validate_model(model: &ModelGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: &str, message: String| {
        out.push(Violation {
            subject: subject.to_string(),
            message,
        })
    };

    let mut names = HashSet::new();
    for t in &model.tensors {
        if !names.insert(t.name.as_str()) {
            push(&t.name, "duplicate tensor name".into());
        }
        if t.dims.is_empty() || t.dims.contains(&0) {
            push(&t.name, format!("dims {:?} must be non-empty and positive", t.dims));
        }
    }
    let inputs = model
        .tensors
        .iter()
        .filter(|t| t.role == TensorRole::Input)
        .count();
    let outputs = model
        .tensors
        .iter()
        .filter(|t| t.role == TensorRole::Output)
        .count();
    if inputs != 1 {
        push("model", format!("expected exactly one input tensor, found {inputs}"));
    }
    if outputs != 1 {
        push("model", format!("expected exactly one output tensor, found {outputs}"));
    }

    let mut producers: HashMap<&str, usize> = HashMap::new();
    for layer in &model.layers {
        *producers.entry(layer.output.as_str()).or_default() += 1;
    }
    for (name, count) in &producers {
        if *count > 1 {
            push(name, "multiple producers".into());
        }
        if let Some(t) = model.tensor(name) {
            if t.role == TensorRole::Input {
                push(name, "input tensor must not have a producer".into());
            }
        }
    }
    for t in &model.tensors {
        if t.role != TensorRole::Input && !producers.contains_key(t.name.as_str()) {
            push(&t.name, "tensor has no producer".into());
        }
    }

    let mut layer_names = HashSet::new();
    for layer in &model.layers {
        if !layer_names.insert(layer.name.as_str()) {
            push(&layer.name, "duplicate layer name".into());
        }
        if layer.inputs.len() != layer.op.arity() {
            push(
                &layer.name,
                format!(
                    "{} expects {} inputs, got {}",
                    layer.op.kind_name(),
                    layer.op.arity(),
                    layer.inputs.len()
                ),
            );
            continue;
        }
        let ins: Vec<_> = layer.inputs.iter().map(|n| model.tensor(n)).collect();
        let Some(out) = model.tensor(&layer.output) else {
            push(&layer.name, format!("unknown output tensor `{}`", layer.output));
            continue;
        };
        if ins.iter().any(Option::is_none) {
            push(&layer.name, "references an unknown input tensor".into());
            continue;
        }
        let ins: Vec<_> = ins.into_iter().flatten().collect();
        let x = ins[0];
        let n = x.len();
        match &layer.op {
            LayerOp::Fc { weight, bias } => {
                if weight.is_empty() || weight.iter().any(|r| r.len() != n) {
                    push(&layer.name, format!("weight must be out x {n}"));
                }
                if bias.len() != weight.len() {
                    push(&layer.name, "bias length must equal output size".into());
                }
            }
            LayerOp::Conv1d {
                kernels,
                bias,
                stride,
            } => {
                let c = x.channels();
                let k = kernels.first().and_then(|r| r.first()).map(Vec::len).unwrap_or(0);
                if kernels.is_empty()
                    || k == 0
                    || kernels
                        .iter()
                        .any(|o| o.len() != c || o.iter().any(|taps| taps.len() != k))
                {
                    push(&layer.name, format!("kernels must be out x {c} x k"));
                }
                if bias.len() != kernels.len() {
                    push(&layer.name, "bias length must equal output channels".into());
                }
                if *stride == 0 {
                    push(&layer.name, "stride must be at least 1".into());
                }
            }
            LayerOp::BatchNorm {
                gamma,
                beta,
                mean,
                sigma,
            } => {
                if [gamma, beta, mean, sigma].iter().any(|p| p.len() != n) {
                    push(&layer.name, format!("batchnorm parameters must have length {n}"));
                }
                if sigma.iter().any(|s| !(*s > 0.0)) {
                    push(&layer.name, "non-positive sigma".into());
                }
            }
            LayerOp::Bias { bias } => {
                if bias.len() != n {
                    push(&layer.name, format!("bias must have length {n}"));
                }
            }
            LayerOp::AvgPool { window } | LayerOp::MaxPool { window } => {
                if *window == 0 || x.length() % window != 0 {
                    push(
                        &layer.name,
                        format!("window {window} does not divide length {}", x.length()),
                    );
                }
            }
            LayerOp::Embedding { table, .. } => {
                let d = table.first().map(Vec::len).unwrap_or(0);
                if table.is_empty() || d == 0 || table.iter().any(|r| r.len() != d) {
                    push(&layer.name, "embedding table must be a non-empty rows x dim matrix".into());
                }
            }
            LayerOp::Hadamard | LayerOp::AbsDiffSum
                if ins[1].len() != n => {
                    push(&layer.name, "operands must have equal size".into());
                }
            _ => {}
        }
        if let Ok(expected) = output_dims(&layer.op, &x.dims) {
            let expected_len: usize = expected.iter().product();
            if expected_len != out.len() {
                push(
                    &layer.name,
                    format!(
                        "output `{}` has {} elements, expected {expected_len}",
                        out.name,
                        out.len()
                    ),
                );
            }
        }
    }

    if model.topo_order().is_err() {
        push("model", "layer graph contains a cycle".into());
    }

    if model.head == Head::Autoencoder {
        let in_len = model.input_len();
        let producer = model
            .output()
            .and_then(|o| model.layers.iter().find(|l| l.output == o.name));
        match producer {
            Some(l) if l.op == LayerOp::AbsDiffSum => {
                for name in &l.inputs {
                    if model.tensor(name).map(|t| t.len()) != Some(in_len) {
                        push(
                            &l.name,
                            "reconstruction operands must match the input dims".into(),
                        );
                    }
                }
            }
            _ => push(
                "model",
                "autoencoder head requires an absdiffsum layer producing the output".into(),
            ),
        }
    }
    out
}
