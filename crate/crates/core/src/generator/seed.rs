use rand::Rng;

use super::attention::{repeat_rows, AttentionMode};
use super::uptrans::{GeneratorDims, GeneratorInputs, UpsampleTransformer};
use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::geometry::PointCloud;
use crate::nn::{Linear, Mlp};

/// Seed coordinates and features as values.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSet<T> {
    pub coords: PointCloud,
    pub features: Tensor<T>,
}

/// Seed coordinates `[N_s, 3]` and features `[N_s, C_s]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SeedVars {
    pub coords: Var,
    pub features: Var,
}

impl SeedVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> Result<SeedSet<T>> {
        Ok(SeedSet {
            coords: PointCloud::from_tensor(tape.value(self.coords))?,
            features: tape.value(self.features).clone(),
        })
    }
}

/// Which patch and kernel produced a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedOrigin {
    pub seed: usize,
    pub patch: usize,
    pub kernel: usize,
}

/// Seed `i * rate + m` comes from patch `i` through kernel `m`.
pub fn seed_provenance(patches: usize, rate: usize) -> Vec<SeedOrigin> {
    (0..patches * rate)
        .map(|s| SeedOrigin {
            seed: s,
            patch: s / rate,
            kernel: s % rate,
        })
        .collect()
}

/// Maps patch centers and features to `rate` seeds per patch.
///
/// Seed coordinates are predicted as displacements from the source patch
/// center.
#[derive(Clone, Debug)]
pub struct SeedGenerator {
    pub patch_channels: usize,
    pub seed_channels: usize,
    pub rate: usize,
    pub query_proj: Linear,
    pub key_proj: Linear,
    pub transformer: UpsampleTransformer,
    pub coord_map: Mlp,
}

impl SeedGenerator {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        patch_channels: usize,
        seed_channels: usize,
        rate: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cs = seed_channels;
        let dims = GeneratorDims {
            query: cs,
            key: cs,
            seed: None,
            channels: cs,
            rate,
        };
        Ok(SeedGenerator {
            patch_channels,
            seed_channels,
            rate,
            query_proj: Linear::new(store, &format!("{name}.query"), patch_channels, cs, rng)?,
            key_proj: Linear::new(store, &format!("{name}.key"), patch_channels, cs, rng)?,
            transformer: UpsampleTransformer::new(store, &format!("{name}.uptrans"), dims, rng)?,
            coord_map: Mlp::two_layer(store, &format!("{name}.coords"), cs + patch_channels, cs, 3, rng)?,
        })
    }

    /// `centers` is `[N_p, 3]`, `features` is `[N_p, C_p]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        centers: Var,
        features: Var,
        k: usize,
        mode: AttentionMode,
    ) -> Result<SeedVars> {
        let fs = tape.shape(features).to_vec();
        if fs.len() != 2 || fs[1] != self.patch_channels {
            return Err(shape_err!("patch features {:?} need {} channels", fs, self.patch_channels));
        }
        let np = fs[0];
        let q = self.query_proj.forward(tape, store, features)?;
        let kk = self.key_proj.forward(tape, store, features)?;
        let inputs = GeneratorInputs {
            queries: q,
            keys: kk,
            positions: centers,
            seed_features: None,
        };
        let f = self.transformer.forward(tape, store, &inputs, k, mode)?;

        let ns = np * self.rate;
        let pooled = tape.max_axis(features, 0)?;
        let pooled = tape.reshape(pooled, vec![1, self.patch_channels])?;
        let pooled = tape.gather_rows(pooled, vec![0; ns])?;
        let x = tape.concat(&[f, pooled], 1)?;
        let offsets = self.coord_map.forward(tape, store, x)?;
        let anchors = tape.gather_rows(centers, repeat_rows(np, self.rate))?;
        let coords = tape.add(anchors, offsets)?;
        Ok(SeedVars { coords, features: f })
    }

    pub fn num_params(&self) -> usize {
        self.query_proj.num_params()
            + self.key_proj.num_params()
            + self.transformer.num_params()
            + self.coord_map.num_params()
    }
}
