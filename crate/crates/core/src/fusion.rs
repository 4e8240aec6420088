//! Multi-tap feature fusion.
//!
//! Each tapped feature map is projected to a shared channel width, resized to
//! the finest lattice among the taps (nearest neighbour), concatenated along
//! channels and mixed by a single per-voxel linear fuser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::UNIT_VARIANCE_GAIN;
use crate::tensor::{constant_field, finest_grid, to_field, DenseField, Graph, Linear, LinearVars, Var};

/// Default width of the fused representation.
pub const DEFAULT_FUSED_CHANNELS: usize = 32;

/// Ordered feature taps from a frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    taps: Vec<DenseField>,
    target_channels: usize,
}

impl TapSet {
    pub fn new(taps: Vec<DenseField>, target_channels: usize) -> Result<Self> {
        let Some(first) = taps.first() else {
            return Err(Error::InvalidArgument("a tap set needs at least one tap".into()));
        };
        if target_channels == 0 {
            return Err(Error::InvalidArgument("target_channels must be positive".into()));
        }
        let rank = first.spatial().len();
        for t in &taps {
            if t.batch() != first.batch() {
                return Err(Error::Shape(format!(
                    "tap batch {} differs from {}",
                    t.batch(),
                    first.batch()
                )));
            }
            if t.spatial().len() != rank {
                return Err(Error::Shape("taps differ in spatial rank".into()));
            }
        }
        Ok(Self {
            taps,
            target_channels,
        })
    }

    pub fn taps(&self) -> &[DenseField] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn target_channels(&self) -> usize {
        self.target_channels
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.taps.iter().map(DenseField::channels).collect()
    }

    /// Per-axis maximum of the tap lattices.
    pub fn finest_spatial(&self) -> Vec<usize> {
        finest_grid(self.taps.iter().map(DenseField::spatial))
    }
}

/// Per-tap projections plus the fuser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub projections: Vec<Linear>,
    pub fuser: Linear,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(tap_channels: &[usize], target: usize, rng: &mut R) -> Self {
        let projections = tap_channels
            .iter()
            .map(|&c| Linear::random(target, c, UNIT_VARIANCE_GAIN, rng))
            .collect();
        let fuser = Linear::random(target, target * tap_channels.len(), UNIT_VARIANCE_GAIN, rng);
        Self { projections, fuser }
    }

    fn check(&self, taps: &TapSet) -> Result<()> {
        if self.projections.len() != taps.len() {
            return Err(Error::InvalidArgument(format!(
                "{} projections for {} taps",
                self.projections.len(),
                taps.len()
            )));
        }
        for (p, t) in self.projections.iter().zip(taps.taps()) {
            if p.in_dim != t.channels() {
                return Err(Error::Channels {
                    expected: p.in_dim,
                    actual: t.channels(),
                });
            }
            if p.out_dim != taps.target_channels() {
                return Err(Error::Channels {
                    expected: taps.target_channels(),
                    actual: p.out_dim,
                });
            }
        }
        let want = taps.len() * taps.target_channels();
        if self.fuser.in_dim != want {
            return Err(Error::Channels {
                expected: want,
                actual: self.fuser.in_dim,
            });
        }
        Ok(())
    }
}

/// Graph handles for [`FusionParams`].
#[derive(Debug, Clone)]
pub struct FusionVars {
    pub projections: Vec<LinearVars>,
    pub fuser: LinearVars,
}

impl FusionVars {
    pub fn register(g: &mut Graph, p: &FusionParams, learnable: bool) -> Self {
        Self {
            projections: p
                .projections
                .iter()
                .map(|l| LinearVars::register(g, l, learnable))
                .collect(),
            fuser: LinearVars::register(g, &p.fuser, learnable),
        }
    }
}

/// Records the fusion of `taps` on `g`.
pub fn fuse_on_graph(g: &mut Graph, taps: &[Var], vars: &FusionVars) -> Result<Var> {
    if taps.len() != vars.projections.len() {
        return Err(Error::InvalidArgument(format!(
            "{} projections for {} taps",
            vars.projections.len(),
            taps.len()
        )));
    }
    let target = finest_grid(taps.iter().map(|&t| g.dims(t).spatial.as_slice()));
    let mut resized = Vec::with_capacity(taps.len());
    for (&t, proj) in taps.iter().zip(&vars.projections) {
        let p = proj.apply(g, t)?;
        resized.push(g.resize_nearest(p, &target)?);
    }
    let stacked = g.concat_channels(&resized)?;
    vars.fuser.apply(g, stacked)
}

/// Fuses a tap set into one representation on the finest lattice.
pub fn fuse_taps(taps: &TapSet, params: &FusionParams) -> Result<DenseField> {
    params.check(taps)?;
    let mut g = Graph::new();
    let vars = FusionVars::register(&mut g, params, false);
    let tap_vars: Vec<Var> = taps.taps().iter().map(|t| constant_field(&mut g, t)).collect();
    let out = fuse_on_graph(&mut g, &tap_vars, &vars)?;
    to_field(&g, out)
}
