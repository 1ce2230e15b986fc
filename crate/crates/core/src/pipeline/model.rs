use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{ParamStore, Scalar, Tape};
use crate::encoder::{Encoder, PatchFeatures, PatchVars};
use crate::error::{contract_err, Result};
use crate::generator::{
    seed_provenance, SeedGenerator, SeedOrigin, SeedSet, SeedVars, StageState, StageVars, UpsampleLayer,
};
use crate::geometry::{fuse_indices, interpolate_seed_features, PointCloud};
use crate::nn::Mlp;

/// Every intermediate of a forward pass as tape variables.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub patches: PatchVars,
    pub seeds: SeedVars,
    /// `P_0` with its first-layer features.
    pub coarse: StageVars,
    /// `P_1 .. P_L`.
    pub stages: Vec<StageVars>,
}

impl ForwardVars {
    pub fn final_positions(&self) -> crate::autodiff::Var {
        self.stages.last().map_or(self.coarse.positions, |s| s.positions)
    }
}

/// Values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub patches: PatchFeatures<T>,
    pub seeds: SeedSet<T>,
    pub provenance: Vec<SeedOrigin>,
    pub coarse: StageState<T>,
    pub stages: Vec<StageState<T>>,
}

impl<T> ForwardOutput<T> {
    pub fn final_cloud(&self) -> &PointCloud {
        self.stages.last().map_or(&self.coarse.cloud, |s| &s.cloud)
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        std::iter::once(&self.coarse)
            .chain(&self.stages)
            .map(|s| s.cloud.len())
            .collect()
    }
}

/// The complete model: encoder, seed generator and upsample layers.
///
/// First-layer features for `P_0` come from a stem map over the seed
/// features interpolated at `P_0`.
#[derive(Clone, Debug)]
pub struct SeedFormer<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub seed_generator: SeedGenerator,
    pub stem: Mlp,
    pub layers: Vec<UpsampleLayer>,
}

impl<T: Scalar> SeedFormer<T> {
    /// Builds and initializes the model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = Encoder::new(&mut store, "encoder", c.encoder_dims(), &mut rng)?;
        let seed_generator = SeedGenerator::new(
            &mut store,
            "seed",
            c.patch_channels,
            c.seed_channels,
            c.seed_rate(),
            &mut rng,
        )?;
        let stem = Mlp::two_layer(&mut store, "stem", c.seed_channels, c.channels, c.channels, &mut rng)?;
        let layers = c
            .rates
            .iter()
            .enumerate()
            .map(|(l, &r)| {
                UpsampleLayer::new(
                    &mut store,
                    &format!("up{l}"),
                    c.generator,
                    c.channels,
                    c.seed_channels,
                    r,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(SeedFormer {
            config,
            store,
            encoder,
            seed_generator,
            stem,
            layers,
        })
    }

    /// Exact number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Runs the model on `tape` using parameters from `store` (normally
    /// `self.store`; a perturbed copy for gradient checks).
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        partial: &PointCloud,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        if partial.len() < c.sa1_points {
            return Err(contract_err!(
                "model needs at least {} input points, got {}",
                c.sa1_points,
                partial.len()
            ));
        }
        let patches = self.encoder.encode(tape, store, partial)?;
        let seeds = self.seed_generator.forward(
            tape,
            store,
            patches.centers,
            patches.features,
            c.k_attention,
            c.seed_attention,
        )?;

        let seed_cloud = PointCloud::from_tensor(tape.value(seeds.coords))?;
        let idx = fuse_indices(&seed_cloud, partial, c.coarse_points)?;
        let partial_var = tape.constant(partial.to_tensor());
        let merged = tape.concat(&[seeds.coords, partial_var], 0)?;
        let positions = tape.gather_rows(merged, idx)?;
        let seed_features = interpolate_seed_features(tape, positions, seeds.coords, seeds.features, c.k_interp)?;
        let features = self.stem.forward(tape, store, seed_features)?;
        let coarse = StageVars {
            positions,
            features,
            seed_features,
        };

        let mut stages = Vec::with_capacity(self.layers.len());
        let mut state = coarse;
        for layer in &self.layers {
            state = layer.forward(
                tape,
                store,
                &state,
                &seeds,
                c.k_attention,
                c.k_interp,
                c.layer_attention,
            )?;
            stages.push(state);
        }
        Ok(ForwardVars {
            patches,
            seeds,
            coarse,
            stages,
        })
    }

    pub fn forward_on_tape(&self, tape: &mut Tape<T>, partial: &PointCloud) -> Result<ForwardVars> {
        self.forward_with(tape, &self.store, partial)
    }

    pub fn forward(&self, partial: &PointCloud) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, partial)?;
        Ok(ForwardOutput {
            patches: vars.patches.values(&tape),
            seeds: vars.seeds.values(&tape)?,
            provenance: seed_provenance(self.config.patch_points, self.config.seed_rate()),
            coarse: vars.coarse.values(&tape, 1)?,
            stages: vars
                .stages
                .iter()
                .zip(&self.config.rates)
                .map(|(s, &r)| s.values(&tape, r))
                .collect::<Result<_>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorKind;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn stage_sizes_and_duplicated_start() {
        let m = SeedFormer::<f64>::new(ModelConfig::tiny()).unwrap();
        let out = m.forward(&cloud(48, 1)).unwrap();
        assert_eq!(out.stage_sizes(), vec![16, 16, 32]);
        assert_eq!(out.seeds.coords.len(), 16);
        let p0 = out.coarse.cloud.points();
        let p2 = out.final_cloud().points();
        for (i, p) in p2.iter().enumerate() {
            assert_eq!(p, &p0[i / 2]);
        }
    }

    #[test]
    fn parameter_count_matches_parts_and_grows_with_width() {
        let m = SeedFormer::<f32>::new(ModelConfig::tiny()).unwrap();
        let parts = m.encoder.num_params()
            + m.seed_generator.num_params()
            + m.stem.num_params()
            + m.layers.iter().map(UpsampleLayer::num_params).sum::<usize>();
        assert_eq!(m.parameter_count(), parts);
        let wide = SeedFormer::<f32>::new(ModelConfig {
            channels: 12,
            ..ModelConfig::tiny()
        })
        .unwrap();
        assert!(wide.parameter_count() > m.parameter_count());
        assert_eq!(ParamStore::<f32>::new().num_scalars(), 0);
    }

    #[test]
    fn every_generator_kind_runs() {
        for kind in GeneratorKind::ALL {
            let m = SeedFormer::<f32>::new(ModelConfig {
                generator: kind,
                ..ModelConfig::tiny()
            })
            .unwrap();
            let out = m.forward(&cloud(48, 2)).unwrap();
            assert_eq!(out.final_cloud().len(), 32, "{kind}");
        }
    }

    #[test]
    fn rejects_short_input() {
        let m = SeedFormer::<f32>::new(ModelConfig::tiny()).unwrap();
        assert!(m.forward(&cloud(10, 3)).is_err());
    }
}
