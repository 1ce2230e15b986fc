use rand::Rng;

use super::attention::{repeat_rows, AttentionMode};
use super::seed::SeedVars;
use super::uptrans::{GeneratorDims, GeneratorInputs};
use super::{Generator, GeneratorKind};
use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{interpolate_seed_features, PointCloud};
use crate::nn::Mlp;

/// Hidden width of the offset map.
pub const OFFSET_HIDDEN: usize = 64;

/// Per-stage tape variables: positions `[N, 3]`, carried features
/// `[N, C]` and interpolated seed features `[N, C_s]`.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub positions: Var,
    pub features: Var,
    pub seed_features: Var,
}

/// Values of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageState<T> {
    pub cloud: PointCloud,
    pub features: Tensor<T>,
    /// Upsampling rate of the layer that produced this stage (1 for `P_0`).
    pub rate: usize,
    pub interpolated_seed_features: Tensor<T>,
}

impl StageVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>, rate: usize) -> Result<StageState<T>> {
        Ok(StageState {
            cloud: PointCloud::from_tensor(tape.value(self.positions))?,
            features: tape.value(self.features).clone(),
            rate,
            interpolated_seed_features: tape.value(self.seed_features).clone(),
        })
    }
}

/// Queries from `[features, seed features]`, keys from the carried
/// features, a generator for `rate` new feature rows per point and an
/// offset map that displaces duplicated points.
#[derive(Clone, Debug)]
pub struct UpsampleLayer {
    pub rate: usize,
    pub query_map: Mlp,
    pub generator: Generator,
    pub offset_map: Mlp,
}

impl UpsampleLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: GeneratorKind,
        channels: usize,
        seed_channels: usize,
        rate: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let dims = GeneratorDims {
            query: c,
            key: c,
            seed: Some(seed_channels),
            channels: c,
            rate,
        };
        Ok(UpsampleLayer {
            rate,
            query_map: Mlp::two_layer(store, &format!("{name}.query"), c + seed_channels, c, c, rng)?,
            generator: Generator::new(kind, store, &format!("{name}.gen"), dims, rng)?,
            offset_map: Mlp::two_layer_zero_out(store, &format!("{name}.offset"), c, OFFSET_HIDDEN, 3, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        state: &StageVars,
        seeds: &SeedVars,
        k_attention: usize,
        k_interp: usize,
        mode: AttentionMode,
    ) -> Result<StageVars> {
        let n = tape.shape(state.positions)[0];
        let qin = tape.concat(&[state.features, state.seed_features], 1)?;
        let queries = self.query_map.forward(tape, store, qin)?;
        let inputs = GeneratorInputs {
            queries,
            keys: state.features,
            positions: state.positions,
            seed_features: Some(state.seed_features),
        };
        let h = self.generator.forward(tape, store, &inputs, k_attention, mode)?;
        let offsets = self.offset_map.forward(tape, store, h)?;
        let dup = tape.gather_rows(state.positions, repeat_rows(n, self.rate))?;
        let positions = tape.add(dup, offsets)?;
        let seed_features = interpolate_seed_features(tape, positions, seeds.coords, seeds.features, k_interp)?;
        Ok(StageVars {
            positions,
            features: h,
            seed_features,
        })
    }

    pub fn num_params(&self) -> usize {
        self.query_map.num_params() + self.generator.num_params() + self.offset_map.num_params()
    }
}
