use std::collections::HashMap;

use super::{LayerOp, ModelGraph, TensorSpec};
use crate::error::{Error, Result};

/// Full-precision inference; the correctness oracle for every later stage.
pub fn reference_infer(model: &ModelGraph, input: &[f64]) -> Result<Vec<f64>> {
    let mut values = reference_trace(model, input)?;
    let out = model
        .output()
        .ok_or_else(|| Error::InvalidModel(vec!["no output tensor".into()]))?;
    Ok(values.remove(&out.name).unwrap_or_default())
}

/// Evaluates every tensor of the model, keyed by tensor name.
pub fn reference_trace(model: &ModelGraph, input: &[f64]) -> Result<HashMap<String, Vec<f64>>> {
    let in_spec = model
        .input()
        .ok_or_else(|| Error::InvalidModel(vec!["no input tensor".into()]))?;
    if input.len() != in_spec.len() {
        return Err(Error::Argument(format!(
            "input has {} values, model expects {}",
            input.len(),
            in_spec.len()
        )));
    }
    let mut values: HashMap<String, Vec<f64>> = HashMap::new();
    values.insert(in_spec.name.clone(), input.to_vec());
    for idx in model.topo_order()? {
        let layer = &model.layers[idx];
        let args: Vec<&[f64]> = layer
            .inputs
            .iter()
            .map(|name| {
                values.get(name).map(Vec::as_slice).ok_or_else(|| {
                    Error::InvalidModel(vec![format!("tensor `{name}` has no producer")])
                })
            })
            .collect::<Result<_>>()?;
        let spec = model.tensor(&layer.inputs[0]).ok_or_else(|| {
            Error::InvalidModel(vec![format!("unknown tensor `{}`", layer.inputs[0])])
        })?;
        let out = forward_layer(&layer.op, &args, spec)
            .map_err(|e| match e {
                Error::Domain(msg) => Error::Domain(format!("layer `{}`: {msg}", layer.name)),
                other => other,
            })?;
        values.insert(layer.output.clone(), out);
    }
    Ok(values)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Evaluates one layer. `spec` describes the first input tensor.
pub(crate) fn forward_layer(op: &LayerOp, args: &[&[f64]], spec: &TensorSpec) -> Result<Vec<f64>> {
    let x = args[0];
    let out = match op {
        LayerOp::Fc { weight, bias } => weight
            .iter()
            .zip(bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect(),
        LayerOp::Conv1d {
            kernels,
            bias,
            stride,
        } => {
            let channels = spec.channels();
            let k = kernels[0][0].len();
            let out_len = (spec.length() - k) / stride + 1;
            let mut out = Vec::with_capacity(out_len * kernels.len());
            for t in 0..out_len {
                for (o, kernel) in kernels.iter().enumerate() {
                    let mut acc = bias[o];
                    for (c, taps) in kernel.iter().enumerate().take(channels) {
                        for (j, w) in taps.iter().enumerate() {
                            acc += w * x[(t * stride + j) * channels + c];
                        }
                    }
                    out.push(acc);
                }
            }
            out
        }
        LayerOp::BatchNorm {
            gamma,
            beta,
            mean,
            sigma,
        } => x
            .iter()
            .enumerate()
            .map(|(i, v)| gamma[i] * (v - mean[i]) / sigma[i] + beta[i])
            .collect(),
        LayerOp::Bias { bias } => x.iter().zip(bias).map(|(v, b)| v + b).collect(),
        LayerOp::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        LayerOp::Tanh => x.iter().map(|v| v.tanh()).collect(),
        LayerOp::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        LayerOp::Softmax => {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        LayerOp::AvgPool { window } => pool(x, spec, *window, |w| {
            w.iter().sum::<f64>() / w.len() as f64
        }),
        LayerOp::MaxPool { window } => pool(x, spec, *window, |w| {
            w.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        }),
        LayerOp::Embedding { table, index_min } => {
            let mut out = Vec::new();
            for &v in x {
                let row = embedding_row(v, *index_min, table.len())?;
                out.extend_from_slice(&table[row]);
            }
            out
        }
        LayerOp::Hadamard => x.iter().zip(args[1]).map(|(a, b)| a * b).collect(),
        LayerOp::AbsDiffSum => vec![x.iter().zip(args[1]).map(|(a, b)| (a - b).abs()).sum()],
    };
    Ok(out)
}

/// Resolves an embedding input value to a table row.
pub(crate) fn embedding_row(value: f64, index_min: i64, rows: usize) -> Result<usize> {
    let idx = value.round();
    if !idx.is_finite() {
        return Err(Error::Domain(format!("embedding index {value} is not finite")));
    }
    let offset = idx as i64 - index_min;
    if offset < 0 || offset >= rows as i64 {
        return Err(Error::Domain(format!(
            "embedding index {idx} outside [{index_min}, {}]",
            index_min + rows as i64 - 1
        )));
    }
    Ok(offset as usize)
}

pub(crate) fn embedding_row_value(table: &[Vec<f64>], value: f64, index_min: i64) -> Result<&[f64]> {
    Ok(&table[embedding_row(value, index_min, table.len())?])
}

fn pool(x: &[f64], spec: &TensorSpec, window: usize, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let channels = spec.channels();
    let out_len = spec.length() / window;
    let mut out = Vec::with_capacity(out_len * channels);
    let mut buf = Vec::with_capacity(window);
    for t in 0..out_len {
        for c in 0..channels {
            buf.clear();
            buf.extend((0..window).map(|j| x[(t * window + j) * channels + c]));
            out.push(f(&buf));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Head, SequentialBuilder};

    fn fc(w: Vec<Vec<f64>>, b: Vec<f64>) -> LayerOp {
        LayerOp::Fc {
            weight: w,
            bias: b,
        }
    }

    #[test]
    fn identity_fc() {
        let m = SequentialBuilder::new("x", vec![2])
            .push("fc", fc(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]), vec![2])
            .build();
        assert_eq!(reference_infer(&m, &[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn tanh_and_softmax() {
        let m = SequentialBuilder::new("x", vec![1])
            .push("t", LayerOp::Tanh, vec![1])
            .build();
        assert_eq!(reference_infer(&m, &[0.0]).unwrap(), vec![0.0]);
        let m = SequentialBuilder::new("x", vec![2])
            .push("s", LayerOp::Softmax, vec![2])
            .build();
        assert_eq!(reference_infer(&m, &[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn batchnorm_then_fc_is_affine() {
        // gamma=1, beta=1, mean=0, sigma=2.5 then W=[[0.4*2.5]] gives 0.4x + 1.
        let m = SequentialBuilder::new("x", vec![1])
            .push(
                "bn",
                LayerOp::BatchNorm {
                    gamma: vec![1.0],
                    beta: vec![1.0],
                    mean: vec![0.0],
                    sigma: vec![2.5],
                },
                vec![1],
            )
            .push("fc", fc(vec![vec![0.4 * 2.5]], vec![0.0]), vec![1])
            .build();
        let y = reference_infer(&m, &[3.0]).unwrap()[0];
        // (3/2.5 + 1) * 1.0 = 2.2
        assert!((y - 2.2).abs() < 1e-12, "{y}");
    }

    #[test]
    fn conv_and_pools() {
        // length 4, 1 channel; kernel [1, 1] stride 1 -> pairwise sums.
        let m = SequentialBuilder::new("x", vec![4, 1])
            .push(
                "conv",
                LayerOp::Conv1d {
                    kernels: vec![vec![vec![1.0, 1.0]]],
                    bias: vec![0.0],
                    stride: 1,
                },
                vec![3, 1],
            )
            .build();
        assert_eq!(reference_infer(&m, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![3.0, 5.0, 7.0]);

        let m = SequentialBuilder::new("x", vec![4, 1])
            .push("p", LayerOp::AvgPool { window: 4 }, vec![1, 1])
            .build();
        assert_eq!(reference_infer(&m, &[1.0, 2.0, 3.0, 6.0]).unwrap(), vec![3.0]);
        let m = SequentialBuilder::new("x", vec![2, 1])
            .push("p", LayerOp::MaxPool { window: 2 }, vec![1, 1])
            .build();
        assert_eq!(reference_infer(&m, &[-1.0, 5.0]).unwrap(), vec![5.0]);
    }

    #[test]
    fn embedding_out_of_range_is_domain_error() {
        let m = SequentialBuilder::new("x", vec![1])
            .push(
                "emb",
                LayerOp::Embedding {
                    table: vec![vec![1.0], vec![2.0]],
                    index_min: 0,
                },
                vec![1, 1],
            )
            .head(Head::Classifier)
            .build();
        assert_eq!(reference_infer(&m, &[1.0]).unwrap(), vec![2.0]);
        assert!(matches!(reference_infer(&m, &[2.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn deterministic() {
        let m = SequentialBuilder::new("x", vec![3])
            .push("t", LayerOp::Sigmoid, vec![3])
            .push("s", LayerOp::Softmax, vec![3])
            .build();
        let a = reference_infer(&m, &[0.1, -3.0, 2.0]).unwrap();
        let b = reference_infer(&m, &[0.1, -3.0, 2.0]).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
