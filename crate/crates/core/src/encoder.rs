//! Partial-input feature extractor: set abstraction, point transformer,
//! set abstraction, point transformer.

use rand::Rng;

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::generator::{AttentionMode, GeneratorDims, GeneratorInputs, UpsampleTransformer};
use crate::geometry::{canonical_start, farthest_point_sample, knn, PointCloud};
use crate::nn::{Linear, Mlp};

/// Patch centers and features as values.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<T> {
    pub centers: PointCloud,
    pub features: Tensor<T>,
}

/// Patch centers `[N_p, 3]` and features `[N_p, C_p]` on a tape.
#[derive(Clone, Debug)]
pub struct PatchVars {
    pub centers: Var,
    pub cloud: PointCloud,
    pub features: Var,
}

impl PatchVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> PatchFeatures<T> {
        PatchFeatures {
            centers: self.cloud.clone(),
            features: tape.value(self.features).clone(),
        }
    }
}

/// Downsamples by farthest point sampling and pools a shared map over each
/// center's kNN group of relative coordinates and neighbor features.
///
/// Sampling starts at the lexicographically smallest point, so the chosen
/// centers do not depend on input order.
#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub out_points: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub map: Mlp,
}

impl SetAbstraction {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_points: usize,
        out_channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = [3 + in_channels, out_channels, out_channels];
        Ok(SetAbstraction {
            out_points,
            in_channels,
            out_channels,
            k,
            map: Mlp::new(store, &format!("{name}.map"), &dims, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cloud: &PointCloud,
        features: Option<Var>,
    ) -> Result<(PointCloud, Var)> {
        if self.out_points > cloud.len() {
            return Err(contract_err!(
                "set abstraction needs at least {} points, got {}",
                self.out_points,
                cloud.len()
            ));
        }
        let idx = farthest_point_sample(cloud, self.out_points, canonical_start(cloud))?;
        let centers = cloud.select(&idx)?;
        let nb = knn(&centers, cloud, self.k)?;

        let mut rel = Vec::with_capacity(nb.indices().len() * 3);
        for (&i, &j) in nb.query_indices().iter().zip(nb.indices()) {
            let (p, c) = (cloud.point(j), centers.point(i));
            rel.extend((0..3).map(|d| T::from_f64(p[d] - c[d])));
        }
        let rel = tape.constant(Tensor::new(vec![nb.indices().len(), 3], rel)?);
        let input = match features {
            Some(f) => {
                let fs = tape.shape(f);
                if fs != [cloud.len(), self.in_channels] {
                    return Err(shape_err!(
                        "features {:?} do not match [{}, {}]",
                        fs,
                        cloud.len(),
                        self.in_channels
                    ));
                }
                let fj = tape.gather_rows(f, nb.indices().to_vec())?;
                tape.concat(&[rel, fj], 1)?
            }
            None => rel,
        };
        let h = self.map.forward(tape, store, input)?;
        let h = tape.reshape(h, vec![self.out_points, self.k, self.out_channels])?;
        Ok((centers, tape.max_axis(h, 1)?))
    }

    pub fn num_params(&self) -> usize {
        self.map.num_params()
    }
}

/// Residual vector self-attention over kNN neighborhoods: the single-kernel,
/// softmax, seed-free case of the upsample transformer between two linear
/// projections.
#[derive(Clone, Debug)]
pub struct PointTransformerLayer {
    pub channels: usize,
    pub pre: Linear,
    pub attention: UpsampleTransformer,
    pub post: Linear,
}

impl PointTransformerLayer {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let c = channels;
        let dims = GeneratorDims {
            query: c,
            key: c,
            seed: None,
            channels: c,
            rate: 1,
        };
        Ok(PointTransformerLayer {
            channels,
            pre: Linear::new(store, &format!("{name}.pre"), c, c, rng)?,
            attention: UpsampleTransformer::new(store, &format!("{name}.attn"), dims, rng)?,
            post: Linear::new(store, &format!("{name}.post"), c, c, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        positions: Var,
        features: Var,
        k: usize,
    ) -> Result<Var> {
        let x = self.pre.forward(tape, store, features)?;
        let inputs = GeneratorInputs {
            queries: x,
            keys: x,
            positions,
            seed_features: None,
        };
        let h = self.attention.forward(tape, store, &inputs, k, AttentionMode::Softmax)?;
        let y = self.post.forward(tape, store, h)?;
        tape.add(features, y)
    }

    pub fn num_params(&self) -> usize {
        self.pre.num_params() + self.attention.num_params() + self.post.num_params()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub sa1_points: usize,
    pub sa1_channels: usize,
    pub patch_points: usize,
    pub patch_channels: usize,
    /// Group size for set abstraction.
    pub k_group: usize,
    /// Neighborhood size for the point transformer layers.
    pub k_attention: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub dims: EncoderDims,
    pub sa1: SetAbstraction,
    pub pt1: PointTransformerLayer,
    pub sa2: SetAbstraction,
    pub pt2: PointTransformerLayer,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dims: EncoderDims, rng: &mut R) -> Result<Self> {
        let d = dims;
        Ok(Encoder {
            sa1: SetAbstraction::new(store, &format!("{name}.sa1"), 0, d.sa1_points, d.sa1_channels, d.k_group, rng)?,
            pt1: PointTransformerLayer::new(store, &format!("{name}.pt1"), d.sa1_channels, rng)?,
            sa2: SetAbstraction::new(
                store,
                &format!("{name}.sa2"),
                d.sa1_channels,
                d.patch_points,
                d.patch_channels,
                d.k_group,
                rng,
            )?,
            pt2: PointTransformerLayer::new(store, &format!("{name}.pt2"), d.patch_channels, rng)?,
            dims,
        })
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, partial: &PointCloud) -> Result<PatchVars> {
        if partial.len() < self.dims.sa1_points {
            return Err(contract_err!(
                "encoder needs at least {} input points, got {}",
                self.dims.sa1_points,
                partial.len()
            ));
        }
        let k = self.dims.k_attention;
        let (c1, f1) = self.sa1.forward(tape, store, partial, None)?;
        let p1 = tape.constant(c1.to_tensor());
        let f1 = self.pt1.forward(tape, store, p1, f1, k.min(c1.len()))?;
        let (c2, f2) = self.sa2.forward(tape, store, &c1, Some(f1))?;
        let p2 = tape.constant(c2.to_tensor());
        let f2 = self.pt2.forward(tape, store, p2, f2, k.min(c2.len()))?;
        Ok(PatchVars {
            centers: p2,
            cloud: c2,
            features: f2,
        })
    }

    pub fn num_params(&self) -> usize {
        self.sa1.num_params() + self.pt1.num_params() + self.sa2.num_params() + self.pt2.num_params()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dyadic_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        // Coordinates on a 1/1024 grid so translation by small integers is exact.
        PointCloud::new(
            (0..n)
                .map(|_| [0, 1, 2].map(|_| rng.random_range(-1024i32..1024) as f64 / 1024.0))
                .collect(),
        )
        .unwrap()
    }

    const DIMS: EncoderDims = EncoderDims {
        sa1_points: 32,
        sa1_channels: 8,
        patch_points: 12,
        patch_channels: 10,
        k_group: 6,
        k_attention: 5,
    };

    #[test]
    fn shapes_and_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "enc", DIMS, &mut rng).unwrap();
        assert_eq!(enc.num_params(), store.num_scalars());
        let cloud = dyadic_cloud(&mut rng, 64);
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &cloud).unwrap();
        assert_eq!(tape.shape(out.centers), &[12, 3]);
        assert_eq!(tape.shape(out.features), &[12, 10]);
        let small = dyadic_cloud(&mut rng, 20);
        assert!(enc.encode(&mut tape, &store, &small).is_err());
    }

    #[test]
    fn translation_moves_centers_and_keeps_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "enc", DIMS, &mut rng).unwrap();
        let cloud = dyadic_cloud(&mut rng, 64);
        let moved = cloud.translated([1.0, -2.0, 3.0]);
        let mut tape = Tape::new();
        let a = enc.encode(&mut tape, &store, &cloud).unwrap();
        let b = enc.encode(&mut tape, &store, &moved).unwrap();
        assert_eq!(tape.value(a.features).data(), tape.value(b.features).data());
        assert_eq!(a.cloud.translated([1.0, -2.0, 3.0]), b.cloud);
    }

    #[test]
    fn set_abstraction_self_grouping_gives_bias_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let sa = SetAbstraction::new(&mut store, "sa", 0, 10, 4, 1, &mut rng).unwrap();
        let cloud = dyadic_cloud(&mut rng, 10);
        let mut tape = Tape::new();
        let (_, f) = sa.forward(&mut tape, &store, &cloud, None).unwrap();
        let zeros = tape.constant(Tensor::zeros(vec![1, 3]));
        let want = sa.map.forward(&mut tape, &store, zeros).unwrap();
        for row in tape.value(f).data().chunks(4) {
            assert_eq!(row, tape.value(want).data());
        }
    }

    #[test]
    fn point_transformer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let pt = PointTransformerLayer::new(&mut store, "pt", 6, &mut rng).unwrap();
        let cloud = dyadic_cloud(&mut rng, 16);
        let feats: Vec<f64> = (0..16 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm: Vec<usize> = (0..16).rev().collect();
        let pcloud = cloud.select(&perm).unwrap();
        let pfeats: Vec<f64> = perm.iter().flat_map(|&i| feats[i * 6..i * 6 + 6].to_vec()).collect();

        let mut tape = Tape::new();
        let run = |tape: &mut Tape<f64>, c: &PointCloud, f: Vec<f64>| {
            let p = tape.constant(c.to_tensor());
            let f = tape.constant(Tensor::new(vec![16, 6], f).unwrap());
            pt.forward(tape, &store, p, f, 4).unwrap()
        };
        let a = run(&mut tape, &cloud, feats);
        let b = run(&mut tape, &pcloud, pfeats);
        for (r, &i) in perm.iter().enumerate() {
            let ra = &tape.value(a).data()[i * 6..i * 6 + 6];
            let rb = &tape.value(b).data()[r * 6..r * 6 + 6];
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
