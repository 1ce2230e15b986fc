//! Point generators, the seed generator and the upsample layers.

pub mod ablation;
pub mod attention;
mod layer;
mod seed;
pub mod uptrans;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use ablation::{DeconvGenerator, FoldingGenerator, GraphConvGenerator, PointwiseAttentionGenerator};
pub use attention::{AttentionMode, Neighborhood};
pub use layer::{StageState, StageVars, UpsampleLayer, OFFSET_HIDDEN};
pub use seed::{seed_provenance, SeedGenerator, SeedOrigin, SeedSet, SeedVars};
pub use uptrans::{AttentionTrace, GeneratorDims, GeneratorInputs, UpsampleTransformer};

use crate::autodiff::{ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorKind {
    UpTrans,
    Folding,
    Deconv,
    GraphConv,
    Pointwise,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 5] = [
        GeneratorKind::UpTrans,
        GeneratorKind::Folding,
        GeneratorKind::Deconv,
        GeneratorKind::GraphConv,
        GeneratorKind::Pointwise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GeneratorKind::UpTrans => "uptrans",
            GeneratorKind::Folding => "folding",
            GeneratorKind::Deconv => "deconv",
            GeneratorKind::GraphConv => "graphconv",
            GeneratorKind::Pointwise => "pointwise",
        }
    }

    /// Whether the attention mode changes this generator's output.
    pub fn uses_attention(&self) -> bool {
        matches!(self, GeneratorKind::UpTrans | GeneratorKind::Pointwise)
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneratorKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown generator {s:?}")))
    }
}

/// Any point generator usable inside an upsample layer.
#[derive(Clone, Debug)]
pub enum Generator {
    UpTrans(UpsampleTransformer),
    Folding(FoldingGenerator),
    Deconv(DeconvGenerator),
    GraphConv(GraphConvGenerator),
    Pointwise(PointwiseAttentionGenerator),
}

impl Generator {
    pub fn new<T: Scalar, R: Rng>(
        kind: GeneratorKind,
        store: &mut ParamStore<T>,
        name: &str,
        dims: GeneratorDims,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            GeneratorKind::UpTrans => Generator::UpTrans(UpsampleTransformer::new(store, name, dims, rng)?),
            GeneratorKind::Folding => Generator::Folding(FoldingGenerator::new(store, name, dims, rng)?),
            GeneratorKind::Deconv => Generator::Deconv(DeconvGenerator::new(store, name, dims, rng)?),
            GeneratorKind::GraphConv => Generator::GraphConv(GraphConvGenerator::new(store, name, dims, rng)?),
            GeneratorKind::Pointwise => {
                Generator::Pointwise(PointwiseAttentionGenerator::new(store, name, dims, rng)?)
            }
        })
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::UpTrans(_) => GeneratorKind::UpTrans,
            Generator::Folding(_) => GeneratorKind::Folding,
            Generator::Deconv(_) => GeneratorKind::Deconv,
            Generator::GraphConv(_) => GeneratorKind::GraphConv,
            Generator::Pointwise(_) => GeneratorKind::Pointwise,
        }
    }

    /// `[rate * N, C]` features, row `i * rate + m` from replica `m` of
    /// point `i`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &GeneratorInputs,
        k: usize,
        mode: AttentionMode,
    ) -> Result<Var> {
        match self {
            Generator::UpTrans(g) => g.forward(tape, store, inputs, k, mode),
            Generator::Folding(g) => g.forward(tape, store, inputs),
            Generator::Deconv(g) => g.forward(tape, store, inputs),
            Generator::GraphConv(g) => g.forward(tape, store, inputs, k),
            Generator::Pointwise(g) => g.forward_traced(tape, store, inputs, k, mode).map(|(h, _)| h),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Generator::UpTrans(g) => g.num_params(),
            Generator::Folding(g) => g.num_params(),
            Generator::Deconv(g) => g.num_params(),
            Generator::GraphConv(g) => g.num_params(),
            Generator::Pointwise(g) => g.num_params(),
        }
    }
}
