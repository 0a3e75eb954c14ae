//! Small differentiable classifiers with hand-written backward passes.
//!
//! A model is a stack of dense layers `h = x W + b`, with ReLU between
//! hidden layers and a softmax cross-entropy head. Multinomial logistic
//! regression is the zero-hidden-layer case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensors::{ParamGroup, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize, init_seed: u64) -> Self {
        Self {
            kind: ModelKind::Logreg,
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            init_seed,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, init_seed: u64) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dims,
            num_classes,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        match self.kind {
            ModelKind::Logreg if !self.hidden_dims.is_empty() => Err(Error::InvalidSpec(
                "logreg takes no hidden layers".into(),
            )),
            ModelKind::Mlp if self.hidden_dims.is_empty() || self.hidden_dims.len() > 2 => Err(
                Error::InvalidSpec("mlp needs one or two hidden layers".into()),
            ),
            _ if self.hidden_dims.contains(&0) => {
                Err(Error::InvalidSpec("hidden dims must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` of each dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Minibatch of borrowed feature rows with their labels.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(rows: Vec<&'a [f64]>, labels: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if rows.len() != labels.len() {
            return Err(Error::InvalidDims(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        Ok(Self { rows, labels })
    }

    pub fn from_indices(ds: &'a LabeledDataset, indices: &[usize]) -> Result<Self> {
        let rows = indices.iter().map(|&i| ds.row(i)).collect();
        let labels = indices.iter().map(|&i| ds.labels()[i]).collect();
        Self::new(rows, labels)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Deterministic He-style uniform init: weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut groups = Vec::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let limit = (6.0 / fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        groups.push(ParamGroup::new(
            format!("layer{i}.weight"),
            vec![fan_in, fan_out],
            weights,
        )?);
        groups.push(ParamGroup::zeros(format!("layer{i}.bias"), vec![fan_out]));
    }
    ParamVector::new(groups)
}

struct Layer<'p> {
    weight: &'p [f64],
    bias: &'p [f64],
    fan_in: usize,
    fan_out: usize,
}

fn layers<'p>(spec: &ModelSpec, params: &'p ParamVector) -> Result<Vec<Layer<'p>>> {
    let dims = spec.layer_dims();
    let groups = params.groups();
    let layout_ok = groups.len() == 2 * dims.len()
        && dims.iter().enumerate().all(|(i, &(fi, fo))| {
            groups[2 * i].shape() == [fi, fo] && groups[2 * i + 1].shape() == [fo]
        });
    if !layout_ok {
        return Err(Error::IncongruentShapes(format!(
            "parameters do not match model layers {dims:?}"
        )));
    }
    Ok(dims
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out))| Layer {
            weight: groups[2 * i].values(),
            bias: groups[2 * i + 1].values(),
            fan_in,
            fan_out,
        })
        .collect())
}

/// Runs the forward pass for one sample, storing every layer's activations.
/// `acts[0]` is the input; the last entry holds the logits.
fn forward(layers: &[Layer<'_>], x: &[f64], acts: &mut Vec<Vec<f64>>) {
    acts.truncate(1);
    acts[0].clear();
    acts[0].extend_from_slice(x);
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let mut out = layer.bias.to_vec();
        let input = &acts[l];
        for (i, &xi) in input.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &layer.weight[i * layer.fan_out..(i + 1) * layer.fan_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        if l != last {
            for o in &mut out {
                *o = o.max(0.0);
            }
        }
        acts.push(out);
    }
}

/// Numerically stable `(loss, softmax)` of one logit row against `label`.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<(f64, ParamVector)> {
    let layers = layers(spec, params)?;
    for &y in &batch.labels {
        check_label(y, spec.num_classes)?;
    }
    let mut grad = params.zeros_like();
    let mut acts: Vec<Vec<f64>> = vec![Vec::new()];
    let mut total = 0.0;

    for (x, &y) in batch.rows.iter().zip(&batch.labels) {
        if x.len() != spec.input_dim {
            return Err(Error::InvalidDims(format!(
                "row has {} features, model expects {}",
                x.len(),
                spec.input_dim
            )));
        }
        forward(&layers, x, &mut acts);
        let (loss, mut delta) = softmax_xent(acts.last().unwrap(), y);
        total += loss;
        delta[y] -= 1.0;

        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let input = &acts[l];
            let groups = grad.groups_mut();
            {
                let gb = groups[2 * l + 1].values_mut();
                for (g, d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            {
                let gw = groups[2 * l].values_mut();
                for (i, &xi) in input.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * layer.fan_out..(i + 1) * layer.fan_out];
                    for (g, d) in row.iter_mut().zip(&delta) {
                        *g += xi * d;
                    }
                }
            }
            if l > 0 {
                // propagate through W, then through the ReLU of the previous layer
                let mut prev = vec![0.0; layer.fan_in];
                for (i, p) in prev.iter_mut().enumerate() {
                    if input[i] <= 0.0 {
                        continue;
                    }
                    let row = &layer.weight[i * layer.fan_out..(i + 1) * layer.fan_out];
                    *p = row.iter().zip(&delta).fold(0.0, |s, (w, d)| s + w * d);
                }
                delta = prev;
            }
        }
    }

    let n = batch.len() as f64;
    grad.scale_in_place(1.0 / n);
    Ok((total / n, grad))
}

/// Mean cross-entropy only; used by finite-difference checks and evaluation.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
    let layers = layers(spec, params)?;
    let mut acts: Vec<Vec<f64>> = vec![Vec::new()];
    let mut total = 0.0;
    for (x, &y) in batch.rows.iter().zip(&batch.labels) {
        check_label(y, spec.num_classes)?;
        forward(&layers, x, &mut acts);
        total += softmax_xent(acts.last().unwrap(), y).0;
    }
    Ok(total / batch.len() as f64)
}

/// Logits for a single feature row.
pub fn logits(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let layers = layers(spec, params)?;
    let mut acts: Vec<Vec<f64>> = vec![Vec::new()];
    forward(&layers, x, &mut acts);
    Ok(acts.pop().unwrap())
}

/// `(mean loss, accuracy)` over a whole dataset. Argmax ties go to the lowest class.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &LabeledDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layers = layers(spec, params)?;
    let mut acts: Vec<Vec<f64>> = vec![Vec::new()];
    let mut total = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let y = data.labels()[i];
        check_label(y, spec.num_classes)?;
        forward(&layers, data.row(i), &mut acts);
        let out = acts.last().unwrap();
        total += softmax_xent(out, y).0;
        let pred = out
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &z)| if z > best.1 { (c, z) } else { best })
            .0;
        if pred == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((total / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> LabeledDataset {
        LabeledDataset::new(
            vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5],
            3,
            vec![0, 1],
            2,
        )
        .unwrap()
    }

    #[test]
    fn init_shapes() {
        let p = init_params(&ModelSpec::logreg(4, 3, 0)).unwrap();
        let layout: Vec<_> = p.groups().iter().map(|g| (g.name().to_string(), g.shape().to_vec())).collect();
        assert_eq!(
            layout,
            vec![
                ("layer0.weight".to_string(), vec![4, 3]),
                ("layer0.bias".to_string(), vec![3]),
            ]
        );
        let p = init_params(&ModelSpec::mlp(4, vec![8], 3, 0)).unwrap();
        let shapes: Vec<_> = p.groups().iter().map(|g| g.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 8], vec![8], vec![8, 3], vec![3]]);
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let spec = ModelSpec::mlp(5, vec![7, 6], 3, 42);
        assert_eq!(init_params(&spec).unwrap(), init_params(&spec).unwrap());
        let other = ModelSpec { init_seed: 43, ..spec };
        assert_ne!(init_params(&other).unwrap(), init_params(&ModelSpec::mlp(5, vec![7, 6], 3, 42)).unwrap());
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(init_params(&ModelSpec::logreg(0, 3, 0)), Err(Error::InvalidSpec(_))));
        assert!(matches!(init_params(&ModelSpec::mlp(3, vec![0], 3, 0)), Err(Error::InvalidSpec(_))));
        assert!(matches!(init_params(&ModelSpec::logreg(3, 1, 0)), Err(Error::InvalidSpec(_))));
        assert!(matches!(init_params(&ModelSpec::mlp(3, vec![], 3, 0)), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let spec = ModelSpec::logreg(3, 5, 0);
        let params = init_params(&spec).unwrap().zeros_like();
        let ds = tiny_dataset();
        let batch = Batch::from_indices(&ds, &[0, 1]).unwrap();
        let (l, _) = loss_and_grad(&spec, &params, &batch).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let spec = ModelSpec::logreg(3, 2, 0);
        let params = init_params(&spec).unwrap();
        let row = [0.0, 1.0, 2.0];
        let batch = Batch::new(vec![&row], vec![2]).unwrap();
        assert!(matches!(
            loss_and_grad(&spec, &params, &batch),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn duplicated_batch_same_loss_and_grad() {
        let spec = ModelSpec::mlp(3, vec![4], 2, 7);
        let params = init_params(&spec).unwrap();
        let ds = tiny_dataset();
        let single = Batch::from_indices(&ds, &[0, 1]).unwrap();
        let doubled = Batch::from_indices(&ds, &[0, 0, 1, 1]).unwrap();
        let (l1, g1) = loss_and_grad(&spec, &params, &single).unwrap();
        let (l2, g2) = loss_and_grad(&spec, &params, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        let diff = g1.sub(&g2).unwrap().sq_norm().sqrt();
        assert!(diff < 1e-14);
    }

    #[test]
    fn logit_shift_invariance() {
        // shifting every output bias by a constant shifts each logit row uniformly
        let spec = ModelSpec::mlp(3, vec![4], 3, 3);
        let params = init_params(&spec).unwrap();
        let mut shifted = params.clone();
        for v in shifted.groups_mut()[3].values_mut() {
            *v += 123.456;
        }
        let ds = tiny_dataset();
        let batch = Batch::from_indices(&ds, &[0, 1]).unwrap();
        let a = loss(&spec, &params, &batch).unwrap();
        let b = loss(&spec, &shifted, &batch).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn evaluate_accuracy_extremes() {
        let spec = ModelSpec::logreg(3, 2, 0);
        // class 0 logit = x0, class 1 logit = x1
        let w = ParamGroup::new("layer0.weight", vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let b = ParamGroup::zeros("layer0.bias", vec![2]);
        let params = ParamVector::new(vec![w, b]).unwrap();
        let ds = LabeledDataset::new(vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0], 3, vec![0, 1], 2).unwrap();
        let (l, acc) = evaluate(&spec, &params, &ds).unwrap();
        assert_eq!(acc, 1.0);
        assert!(l >= 0.0);
        assert_eq!(evaluate(&spec, &params, &ds).unwrap(), (l, acc));

        let wrong = LabeledDataset::new(vec![2.0, 0.0, 0.0], 3, vec![1], 2).unwrap();
        assert_eq!(evaluate(&spec, &params, &wrong).unwrap().1, 0.0);
    }
}
