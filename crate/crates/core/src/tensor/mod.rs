//! Dense fields, eager per-voxel operations and the differentiable graph.

pub mod field;
pub mod graph;
pub mod ops;

pub use field::{DenseField, LabelField};
pub use graph::{Dims, Gradients, Graph, Var};
pub use ops::{pointwise_linear, softmax, softplus_field, Linear};

use crate::error::{Error, Result};

/// Records `f` as a constant on `g`.
pub fn constant_field(g: &mut Graph, f: &DenseField) -> Var {
    let dims = Dims::new(f.batch(), f.channels(), f.spatial().to_vec());
    g.constant(dims, f.to_f64())
        .expect("field length always matches its own dims")
}

/// Reads a graph value back into `f32` storage, failing on non-finite data.
pub fn to_field(g: &Graph, v: Var) -> Result<DenseField> {
    let d = g.dims(v);
    if d.spatial.is_empty() {
        return Err(Error::Shape("value has no spatial axes".into()));
    }
    let mut shape = vec![d.batch, d.channels];
    shape.extend_from_slice(&d.spatial);
    let vals = g.value(v);
    if vals.iter().any(|x| !x.is_finite() || x.abs() > f32::MAX as f64) {
        return Err(Error::NonFinite("graph value"));
    }
    DenseField::from_f64(shape, vals)
}

/// Per-axis maximum of a set of spatial extents.
pub fn finest_grid<'a>(grids: impl IntoIterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for g in grids {
        if out.is_empty() {
            out = g.to_vec();
        } else {
            for (o, &x) in out.iter_mut().zip(g) {
                *o = (*o).max(x);
            }
        }
    }
    out
}

/// Registered graph handles of a [`Linear`].
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
    pub out_dim: usize,
}

impl LinearVars {
    pub fn register(g: &mut Graph, lin: &Linear, learnable: bool) -> Self {
        let wd = Dims::vector(lin.weight.len());
        let bd = Dims::vector(lin.bias.len());
        let (weight, bias) = if learnable {
            (
                g.param(wd, lin.weight.clone()).expect("weight length"),
                g.param(bd, lin.bias.clone()).expect("bias length"),
            )
        } else {
            (
                g.constant(wd, lin.weight.clone()).expect("weight length"),
                g.constant(bd, lin.bias.clone()).expect("bias length"),
            )
        };
        Self {
            weight,
            bias,
            out_dim: lin.out_dim,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias, self.out_dim)
    }
}
