//! Recording the model's batched forward pass on a [`Tape`].

use std::sync::Arc;

use super::arch::{Activation, Fusion};
use super::grid::FeatureGrid;
use super::model::ExplorableModel;
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::tensor::Tensor;

/// Tape handles for every learnable tensor, in [`ExplorableModel`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub spatial: Vec<Var>,
    pub lines: Vec<Var>,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl ModelVars {
    /// Records the model tensors as leaves (differentiable) or constants.
    pub fn record(tape: &mut Tape, model: &ExplorableModel, differentiable: bool) -> Self {
        let mut put = |t: Tensor| if differentiable { tape.leaf(t) } else { tape.constant(t) };
        let grid = |g: &FeatureGrid| Tensor::from_f32(g.vertex_count(), g.channels(), g.values());
        let spatial = model.features.spatial.iter().map(|g| put(grid(g))).collect();
        let lines = model.features.lines.iter().map(|g| put(grid(g))).collect();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in &model.decoder.layers {
            weights.push(put(l.weight_tensor()));
            biases.push(put(Tensor::row_vector(l.bias_f64())));
        }
        Self { spatial, lines, weights, biases }
    }

    /// All handles in storage order: spatial, lines, then (weight, bias) per layer.
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.spatial.iter().chain(&self.lines).copied().collect();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.push(*w);
            v.push(*b);
        }
        v
    }
}

/// Batch inputs in normalized coordinates. When `coords` is set, gradients
/// also flow to the spatial (`[B×3]`) and parameter (`[B×m]`) inputs.
pub struct TapeInputs<'a> {
    pub x: &'a [[f64; 3]],
    pub p: &'a [f64],
    pub coords: Option<(Var, Var)>,
}

fn fuse(tape: &mut Tape, fusion: Fusion, parts: Vec<Var>) -> Var {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one structure");
    for v in it {
        acc = match fusion {
            Fusion::Hadamard => tape.mul(acc, v),
            Fusion::Addition => tape.add(acc, v),
        };
    }
    acc
}

/// Records `F(x, p)` for a batch and returns the `[B×1]` output.
pub fn record_forward(tape: &mut Tape, model: &ExplorableModel, vars: &ModelVars, input: &TapeInputs) -> Result<Var> {
    let b = input.x.len();
    let m = model.n_params();
    if input.p.len() != b * m {
        return Err(Error::Shape(format!("expected {} parameter values, got {}", b * m, input.p.len())));
    }
    let namer = model.axis_namer();
    let mut spatial = Vec::new();
    for (g, &store) in model.features.spatial.iter().zip(&vars.spatial) {
        let axes = g.structure().axes();
        let coords: Vec<f64> = input.x.iter().flat_map(|x| axes.iter().map(move |&a| x[a])).collect();
        let plan = Arc::new(g.gather_plan(&coords, &namer)?);
        let cv = match input.coords {
            Some((xs, _)) => Some(select_cols(tape, xs, &axes)),
            None => None,
        };
        spatial.push(tape.gather(store, cv, plan));
    }
    let mut lines = Vec::new();
    for (i, (g, &store)) in model.features.lines.iter().zip(&vars.lines).enumerate() {
        let coords: Vec<f64> = (0..b).map(|r| input.p[r * m + i]).collect();
        let plan = Arc::new(g.gather_plan(&coords, &namer)?);
        let cv = input.coords.map(|(_, ps)| tape.slice_cols(ps, i, 1));
        lines.push(tape.gather(store, cv, plan));
    }
    let s = fuse(tape, model.arch.fusion, spatial);
    let p = fuse(tape, model.arch.fusion, lines);
    let mut h = tape.concat_cols(&[s, p]);
    let last = vars.weights.len() - 1;
    for l in 0..=last {
        let z = tape.matmul_t(h, vars.weights[l]);
        h = tape.add_row(z, vars.biases[l]);
        if l < last && model.arch.activation == Activation::Relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn select_cols(tape: &mut Tape, xs: Var, axes: &[usize]) -> Var {
    if axes.len() == 3 {
        return xs;
    }
    let cols: Vec<Var> = axes.iter().map(|&a| tape.slice_cols(xs, a, 1)).collect();
    tape.concat_cols(&cols)
}

/// Mean squared error between a `[B×1]` prediction and targets.
pub fn record_mse(tape: &mut Tape, pred: Var, y: &[f64]) -> Var {
    let target = tape.constant(Tensor::from_vec(y.len(), 1, y.to_vec()));
    let d = tape.sub(pred, target);
    let sq = tape.square(d);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / y.len() as f64)
}
