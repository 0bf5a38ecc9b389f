//! Small full-batch trainer for the layer set, used to give models real
//! parameters before compilation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_layer, Dataset, Head, LayerOp, ModelGraph, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.02,
            seed: 7,
        }
    }
}

/// Model with tensors resolved to indices, for fast repeated evaluation.
struct Plan {
    order: Vec<usize>,
    /// Per layer: input tensor indices and output tensor index.
    wiring: Vec<(Vec<usize>, usize)>,
    specs: Vec<TensorSpec>,
    input: usize,
    output: usize,
}

impl Plan {
    fn new(m: &ModelGraph) -> Result<Plan> {
        let idx = |name: &str| {
            m.tensors
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::InvalidModel(vec![format!("unknown tensor `{name}`")]))
        };
        let wiring = m
            .layers
            .iter()
            .map(|l| Ok((l.inputs.iter().map(|n| idx(n)).collect::<Result<Vec<_>>>()?, idx(&l.output)?)))
            .collect::<Result<Vec<_>>>()?;
        let input = idx(&m.input().ok_or_else(|| Error::InvalidModel(vec!["no input".into()]))?.name)?;
        let output = idx(&m.output().ok_or_else(|| Error::InvalidModel(vec!["no output".into()]))?.name)?;
        Ok(Plan {
            order: m.topo_order()?,
            wiring,
            specs: m.tensors.clone(),
            input,
            output,
        })
    }

    fn forward(&self, m: &ModelGraph, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut vals: Vec<Vec<f64>> = vec![Vec::new(); self.specs.len()];
        vals[self.input] = x.to_vec();
        for &l in &self.order {
            let (ins, out) = &self.wiring[l];
            let args: Vec<&[f64]> = ins.iter().map(|&i| vals[i].as_slice()).collect();
            let y = forward_layer(&m.layers[l].op, &args, &self.specs[ins[0]])?;
            vals[*out] = y;
        }
        Ok(vals)
    }
}

fn param_count(op: &LayerOp) -> usize {
    match op {
        LayerOp::Fc { weight, bias } => weight.iter().map(Vec::len).sum::<usize>() + bias.len(),
        LayerOp::Conv1d { kernels, bias, .. } => {
            kernels.iter().flatten().map(Vec::len).sum::<usize>() + bias.len()
        }
        LayerOp::Bias { bias } => bias.len(),
        LayerOp::Embedding { table, .. } => table.iter().map(Vec::len).sum(),
        _ => 0,
    }
}

fn params_mut(op: &mut LayerOp) -> Vec<&mut f64> {
    match op {
        LayerOp::Fc { weight, bias } => weight.iter_mut().flatten().chain(bias.iter_mut()).collect(),
        LayerOp::Conv1d { kernels, bias, .. } => kernels
            .iter_mut()
            .flatten()
            .flatten()
            .chain(bias.iter_mut())
            .collect(),
        LayerOp::Bias { bias } => bias.iter_mut().collect(),
        LayerOp::Embedding { table, .. } => table.iter_mut().flatten().collect(),
        _ => Vec::new(),
    }
}

/// Gradients of one layer: with respect to each input, and to its
/// parameters (in `params_mut` order, accumulated into `pgrad`).
fn backward_layer(op: &LayerOp, args: &[&[f64]], y: &[f64], g: &[f64], spec: &TensorSpec, pgrad: &mut [f64]) -> Vec<Vec<f64>> {
    let x = args[0];
    match op {
        LayerOp::Fc { weight, .. } => {
            let n = x.len();
            let mut dx = vec![0.0; n];
            for (o, row) in weight.iter().enumerate() {
                for (i, w) in row.iter().enumerate() {
                    dx[i] += w * g[o];
                    pgrad[o * n + i] += g[o] * x[i];
                }
            }
            let off = weight.len() * n;
            for (o, go) in g.iter().enumerate() {
                pgrad[off + o] += go;
            }
            vec![dx]
        }
        LayerOp::Conv1d { kernels, stride, .. } => {
            let c_in = spec.channels();
            let k = kernels[0][0].len();
            let out_ch = kernels.len();
            let steps = g.len() / out_ch;
            let mut dx = vec![0.0; x.len()];
            for t in 0..steps {
                for (o, kernel) in kernels.iter().enumerate() {
                    let go = g[t * out_ch + o];
                    for (c, taps) in kernel.iter().enumerate() {
                        for (j, w) in taps.iter().enumerate() {
                            let xi = (t * stride + j) * c_in + c;
                            dx[xi] += w * go;
                            pgrad[(o * c_in + c) * k + j] += go * x[xi];
                        }
                    }
                    pgrad[out_ch * c_in * k + o] += go;
                }
            }
            vec![dx]
        }
        LayerOp::BatchNorm { gamma, sigma, .. } => {
            vec![g.iter().enumerate().map(|(i, v)| v * gamma[i] / sigma[i]).collect()]
        }
        LayerOp::Bias { .. } => {
            for (p, v) in pgrad.iter_mut().zip(g) {
                *p += v;
            }
            vec![g.to_vec()]
        }
        LayerOp::Relu => vec![x.iter().zip(g).map(|(&a, &v)| if a > 0.0 { v } else { 0.0 }).collect()],
        LayerOp::Tanh => vec![y.iter().zip(g).map(|(a, v)| v * (1.0 - a * a)).collect()],
        LayerOp::Sigmoid => vec![y.iter().zip(g).map(|(a, v)| v * a * (1.0 - a)).collect()],
        LayerOp::Softmax => {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            vec![y.iter().zip(g).map(|(a, v)| a * (v - dot)).collect()]
        }
        LayerOp::AvgPool { window } | LayerOp::MaxPool { window } => {
            let c = spec.channels();
            let mut dx = vec![0.0; x.len()];
            for t in 0..g.len() / c {
                for ch in 0..c {
                    let idx: Vec<usize> = (0..*window).map(|j| (t * window + j) * c + ch).collect();
                    let gv = g[t * c + ch];
                    if matches!(op, LayerOp::AvgPool { .. }) {
                        for i in idx {
                            dx[i] += gv / *window as f64;
                        }
                    } else {
                        let best = idx.iter().copied().fold(idx[0], |b, i| if x[i] > x[b] { i } else { b });
                        dx[best] += gv;
                    }
                }
            }
            vec![dx]
        }
        LayerOp::Embedding { table, index_min } => {
            let d = table[0].len();
            for (i, &v) in x.iter().enumerate() {
                let row = ((v.round() as i64 - index_min).clamp(0, table.len() as i64 - 1)) as usize;
                for j in 0..d {
                    pgrad[row * d + j] += g[i * d + j];
                }
            }
            vec![vec![0.0; x.len()]]
        }
        LayerOp::Hadamard => {
            let b = args[1];
            vec![
                b.iter().zip(g).map(|(b, v)| b * v).collect(),
                x.iter().zip(g).map(|(a, v)| a * v).collect(),
            ]
        }
        LayerOp::AbsDiffSum => {
            let b = args[1];
            let s: Vec<f64> = x.iter().zip(b).map(|(a, b)| (a - b).signum() * g[0]).collect();
            let neg = s.iter().map(|v| -v).collect();
            vec![s, neg]
        }
    }
}

fn init(model: &mut ModelGraph, rng: &mut ChaCha8Rng) {
    for layer in &mut model.layers {
        match &mut layer.op {
            LayerOp::Fc { weight, bias } => {
                let a = (6.0 / (weight[0].len() + weight.len()) as f64).sqrt();
                weight.iter_mut().flatten().for_each(|w| *w = rng.random_range(-a..a));
                bias.iter_mut().for_each(|b| *b = 0.0);
            }
            LayerOp::Conv1d { kernels, bias, .. } => {
                let fan_in: usize = kernels[0].iter().map(Vec::len).sum();
                let a = (6.0 / (fan_in + kernels.len()) as f64).sqrt();
                kernels.iter_mut().flatten().flatten().for_each(|w| *w = rng.random_range(-a..a));
                bias.iter_mut().for_each(|b| *b = 0.0);
            }
            LayerOp::Embedding { table, .. } => {
                table.iter_mut().flatten().for_each(|w| *w = rng.random_range(-1.0..1.0));
            }
            _ => {}
        }
    }
}

/// Fixes every BatchNorm to standardize its input over the training rows,
/// with unit scale and zero shift.
fn freeze_batchnorm(model: &mut ModelGraph, rows: &[Vec<f64>]) -> Result<()> {
    let plan = Plan::new(model)?;
    for &l in &plan.order.clone() {
        if !matches!(model.layers[l].op, LayerOp::BatchNorm { .. }) {
            continue;
        }
        let src = plan.wiring[l].0[0];
        let n = plan.specs[src].len();
        let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
        for r in rows {
            let v = &plan.forward(model, r)?[src];
            for i in 0..n {
                sum[i] += v[i];
                sq[i] += v[i] * v[i];
            }
        }
        let count = rows.len().max(1) as f64;
        if let LayerOp::BatchNorm { gamma, beta, mean, sigma } = &mut model.layers[l].op {
            for i in 0..n {
                let m = sum[i] / count;
                mean[i] = m;
                sigma[i] = (sq[i] / count - m * m).max(0.0).sqrt().max(1e-3);
                gamma[i] = 1.0;
                beta[i] = 0.0;
            }
        }
    }
    Ok(())
}

/// Loss and output gradient for one example.
fn loss_grad(head: Head, out: &[f64], softmax_out: bool, label: Option<usize>) -> Result<(f64, Vec<f64>)> {
    match head {
        Head::Autoencoder => Ok((out[0], vec![1.0])),
        Head::Classifier => {
            let y = label.ok_or_else(|| Error::Argument("classifier training needs labels".into()))?;
            if y >= out.len() {
                return Err(Error::Argument(format!("label {y} outside {} outputs", out.len())));
            }
            let p: Vec<f64> = if softmax_out {
                out.to_vec()
            } else {
                let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = out.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            };
            let loss = -(p[y].max(1e-12)).ln();
            // Gradient with respect to the logits feeding the softmax.
            let mut g = p;
            g[y] -= 1.0;
            Ok((loss, g))
        }
    }
}

/// Trains a skeleton model with full-batch Adam. Deterministic for a seed.
pub fn fit_model(skeleton: &ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<ModelGraph> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut model = skeleton.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init(&mut model, &mut rng);
    freeze_batchnorm(&mut model, &data.rows)?;
    let plan = Plan::new(&model)?;
    let head = model.head;
    let last = *plan.order.last().ok_or_else(|| Error::InvalidModel(vec!["no layers".into()]))?;
    // A final softmax is folded into the cross-entropy gradient.
    let softmax_out = head == Head::Classifier && matches!(model.layers[last].op, LayerOp::Softmax);

    let sizes: Vec<usize> = model.layers.iter().map(|l| param_count(&l.op)).collect();
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut m2 = m1.clone();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let n = data.len() as f64;
    for epoch in 0..cfg.epochs {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut total = 0.0;
        for (r, row) in data.rows.iter().enumerate() {
            let vals = plan.forward(&model, row)?;
            let label = data.labels.as_ref().map(|l| l[r]);
            let (loss, g_out) = loss_grad(head, &vals[plan.output], softmax_out, label)?;
            total += loss;
            let mut tg: Vec<Option<Vec<f64>>> = vec![None; plan.specs.len()];
            let mut start = plan.order.len();
            if softmax_out {
                let src = plan.wiring[last].0[0];
                tg[src] = Some(g_out);
                start -= 1;
            } else {
                tg[plan.output] = Some(g_out);
            }
            for &l in plan.order[..start].iter().rev() {
                let (ins, out) = &plan.wiring[l];
                let Some(g) = tg[*out].take() else { continue };
                let args: Vec<&[f64]> = ins.iter().map(|&i| vals[i].as_slice()).collect();
                let dins = backward_layer(&model.layers[l].op, &args, &vals[*out], &g, &plan.specs[ins[0]], &mut grads[l]);
                for (&i, d) in ins.iter().zip(dins) {
                    if i == plan.input {
                        continue;
                    }
                    match &mut tg[i] {
                        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(d),
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::TrainingDiverged(format!("loss is {total} at epoch {epoch}")));
        }
        let t = (epoch + 1) as i32;
        for (l, layer) in model.layers.iter_mut().enumerate() {
            for (k, p) in params_mut(&mut layer.op).into_iter().enumerate() {
                let g = grads[l][k] / n;
                m1[l][k] = b1 * m1[l][k] + (1.0 - b1) * g;
                m2[l][k] = b2 * m2[l][k] + (1.0 - b2) * g * g;
                let mh = m1[l][k] / (1.0 - b1.powi(t));
                let vh = m2[l][k] / (1.0 - b2.powi(t));
                *p -= cfg.learning_rate * mh / (vh.sqrt() + eps);
                if !p.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "parameter of `{}` became {p} at epoch {epoch}",
                        layer.name
                    )));
                }
            }
        }
    }
    Ok(model)
}

/// Mean loss of a model over a dataset, with the training objective.
pub fn mean_loss(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    let plan = Plan::new(model)?;
    let mut total = 0.0;
    for (r, row) in data.rows.iter().enumerate() {
        let vals = plan.forward(model, row)?;
        let out = &vals[plan.output];
        let softmax_out = model
            .layers
            .iter()
            .find(|l| l.output == plan.specs[plan.output].name)
            .is_some_and(|l| matches!(l.op, LayerOp::Softmax));
        total += loss_grad(model.head, out, softmax_out, data.labels.as_ref().map(|l| l[r]))?.0;
    }
    Ok(total / data.len().max(1) as f64)
}
