//! Alternative point generators with the same contract as the upsample
//! transformer: `N` points in, `rate * N` feature rows out.

use rand::Rng;

use super::attention::{interleave, repeat_rows, AttentionMode, Neighborhood};
use super::uptrans::{relation, GeneratorDims, GeneratorInputs};
use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{Linear, Mlp};

fn value_map<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    dims: &GeneratorDims,
    rng: &mut R,
) -> Result<Mlp> {
    let c = dims.channels;
    Mlp::two_layer(store, &format!("{name}.value"), dims.key + dims.query, c, c, rng)
}

fn point_features<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    map: &Mlp,
    inputs: &GeneratorInputs,
) -> Result<Var> {
    let kq = tape.concat(&[inputs.keys, inputs.queries], 1)?;
    map.forward(tape, store, kq)
}

/// 2D grid coordinates in `[-0.2, 0.2]^2`, one per replica.
pub fn folding_grid(rate: usize) -> Vec<[f64; 2]> {
    let side = (rate as f64).sqrt().ceil() as usize;
    let coord = |i: usize| {
        if side == 1 {
            0.0
        } else {
            -0.2 + 0.4 * i as f64 / (side - 1) as f64
        }
    };
    (0..rate).map(|m| [coord(m % side), coord(m / side)]).collect()
}

/// Duplicates each point feature and appends a fixed grid code per replica
/// before a shared map.
#[derive(Clone, Debug)]
pub struct FoldingGenerator {
    pub dims: GeneratorDims,
    pub value_map: Mlp,
    pub fold: Mlp,
}

impl FoldingGenerator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dims: GeneratorDims, rng: &mut R) -> Result<Self> {
        let c = dims.channels;
        Ok(FoldingGenerator {
            value_map: value_map(store, name, &dims, rng)?,
            fold: Mlp::two_layer(store, &format!("{name}.fold"), c + 2, c, c, rng)?,
            dims,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &GeneratorInputs) -> Result<Var> {
        let n = inputs.validate(tape, &self.dims)?.len();
        let r = self.dims.rate;
        let f = point_features(tape, store, &self.value_map, inputs)?;
        let dup = tape.gather_rows(f, repeat_rows(n, r))?;
        let grid = folding_grid(r);
        let codes: Vec<T> = (0..n * r)
            .flat_map(|row| grid[row % r].map(T::from_f64))
            .collect();
        let codes = tape.constant(Tensor::new(vec![n * r, 2], codes)?);
        let x = tape.concat(&[dup, codes], 1)?;
        self.fold.forward(tape, store, x)
    }

    pub fn num_params(&self) -> usize {
        self.value_map.num_params() + self.fold.num_params()
    }
}

/// Splits each point feature through a separate learned linear map per
/// replica.
#[derive(Clone, Debug)]
pub struct DeconvGenerator {
    pub dims: GeneratorDims,
    pub value_map: Mlp,
    pub splits: Vec<Linear>,
}

impl DeconvGenerator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dims: GeneratorDims, rng: &mut R) -> Result<Self> {
        let c = dims.channels;
        let splits = (0..dims.rate)
            .map(|m| Linear::new(store, &format!("{name}.split{m}"), c, c, rng))
            .collect::<Result<_>>()?;
        Ok(DeconvGenerator {
            value_map: value_map(store, name, &dims, rng)?,
            splits,
            dims,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &GeneratorInputs) -> Result<Var> {
        inputs.validate(tape, &self.dims)?;
        let f = point_features(tape, store, &self.value_map, inputs)?;
        let hs = self
            .splits
            .iter()
            .map(|l| l.forward(tape, store, f))
            .collect::<Result<Vec<_>>>()?;
        interleave(tape, &hs)
    }

    pub fn num_params(&self) -> usize {
        self.value_map.num_params() + self.splits.iter().map(Linear::num_params).sum::<usize>()
    }
}

/// `h_im = max_j α_m(f_j)` over each kNN neighborhood.
#[derive(Clone, Debug)]
pub struct GraphConvGenerator {
    pub dims: GeneratorDims,
    pub value_map: Mlp,
    pub alphas: Vec<Mlp>,
}

impl GraphConvGenerator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dims: GeneratorDims, rng: &mut R) -> Result<Self> {
        let c = dims.channels;
        let alphas = (0..dims.rate)
            .map(|m| Mlp::two_layer(store, &format!("{name}.alpha{m}"), c, c, c, rng))
            .collect::<Result<_>>()?;
        Ok(GraphConvGenerator {
            value_map: value_map(store, name, &dims, rng)?,
            alphas,
            dims,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &GeneratorInputs,
        k: usize,
    ) -> Result<Var> {
        let cloud = inputs.validate(tape, &self.dims)?;
        let (n, c) = (cloud.len(), self.dims.channels);
        let nb = Neighborhood::of(&cloud, k)?;
        let f = point_features(tape, store, &self.value_map, inputs)?;
        let fj = tape.gather_rows(f, nb.neighbors.clone())?;
        let mut hs = Vec::with_capacity(self.alphas.len());
        for alpha in &self.alphas {
            let mapped = alpha.forward(tape, store, fj)?;
            let grouped = tape.reshape(mapped, vec![n, k, c])?;
            hs.push(tape.max_axis(grouped, 1)?);
        }
        interleave(tape, &hs)
    }

    pub fn num_params(&self) -> usize {
        self.value_map.num_params() + self.alphas.iter().map(Mlp::num_params).sum::<usize>()
    }
}

/// The transformer's structure with one scalar weight per neighbor instead
/// of one per channel.
#[derive(Clone, Debug)]
pub struct PointwiseAttentionGenerator {
    pub dims: GeneratorDims,
    pub value_map: Mlp,
    pub beta: Mlp,
    pub gamma: Mlp,
    pub psi: Mlp,
    pub rho: Mlp,
    pub theta: Option<Mlp>,
    pub alphas: Vec<Mlp>,
}

impl PointwiseAttentionGenerator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dims: GeneratorDims, rng: &mut R) -> Result<Self> {
        let c = dims.channels;
        let theta = dims
            .seed
            .map(|s| Mlp::two_layer(store, &format!("{name}.theta"), s, c, c, rng))
            .transpose()?;
        let alphas = (0..dims.rate)
            .map(|m| Mlp::two_layer(store, &format!("{name}.alpha{m}"), c, c, 1, rng))
            .collect::<Result<_>>()?;
        Ok(PointwiseAttentionGenerator {
            value_map: value_map(store, name, &dims, rng)?,
            beta: Mlp::two_layer(store, &format!("{name}.beta"), dims.query, c, c, rng)?,
            gamma: Mlp::two_layer(store, &format!("{name}.gamma"), dims.key, c, c, rng)?,
            psi: Mlp::two_layer(store, &format!("{name}.psi"), c, c, c, rng)?,
            rho: Mlp::two_layer(store, &format!("{name}.rho"), 3, c, c, rng)?,
            theta,
            alphas,
            dims,
        })
    }

    /// Returns the output and the normalized `[N, k, 1]` weights per kernel.
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &GeneratorInputs,
        k: usize,
        mode: AttentionMode,
    ) -> Result<(Var, Vec<Var>)> {
        let cloud = inputs.validate(tape, &self.dims)?;
        let (n, c) = (cloud.len(), self.dims.channels);
        let nb = Neighborhood::of(&cloud, k)?;
        let v = point_features(tape, store, &self.value_map, inputs)?;
        let bq = self.beta.forward(tape, store, inputs.queries)?;
        let gk = self.gamma.forward(tape, store, inputs.keys)?;
        let pv = self.psi.forward(tape, store, v)?;
        let delta = relation(tape, store, &self.rho, self.theta.as_ref(), inputs, &nb)?;

        let bqi = tape.gather_rows(bq, nb.centers.clone())?;
        let gkj = tape.gather_rows(gk, nb.neighbors.clone())?;
        let pre = tape.sub(bqi, gkj)?;
        let pre = tape.add(pre, delta)?;
        let pvj = tape.gather_rows(pv, nb.neighbors.clone())?;
        let val = tape.add(pvj, delta)?;
        let val = tape.reshape(val, vec![n, k, c])?;

        let mut hs = Vec::with_capacity(self.alphas.len());
        let mut weights = Vec::with_capacity(self.alphas.len());
        for alpha in &self.alphas {
            let raw = alpha.forward(tape, store, pre)?;
            let raw = tape.reshape(raw, vec![n, k, 1])?;
            let a = mode.apply(tape, raw, 1)?;
            let wide = tape.expand_last(a, c)?;
            let weighted = tape.mul(wide, val)?;
            hs.push(tape.sum_axis(weighted, 1)?);
            weights.push(a);
        }
        Ok((interleave(tape, &hs)?, weights))
    }

    pub fn num_params(&self) -> usize {
        [&self.value_map, &self.beta, &self.gamma, &self.psi, &self.rho]
            .iter()
            .map(|m| m.num_params())
            .sum::<usize>()
            + self.theta.as_ref().map_or(0, Mlp::num_params)
            + self.alphas.iter().map(Mlp::num_params).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
        let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    const DIMS: GeneratorDims = GeneratorDims {
        query: 4,
        key: 4,
        seed: Some(3),
        channels: 5,
        rate: 2,
    };

    #[test]
    fn grid_is_distinct_per_replica() {
        let g = folding_grid(4);
        assert_eq!(g.len(), 4);
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(g[i], g[j]);
            }
        }
        assert_eq!(folding_grid(1), vec![[0.0, 0.0]]);
    }

    #[test]
    fn graphconv_with_identical_neighbors_is_alpha_of_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let g = GraphConvGenerator::new(&mut store, "g", DIMS, &mut rng).unwrap();
        let mut tape = Tape::new();
        let row = random(&mut rng, [1, 4]);
        let same: Vec<f64> = row.data().iter().cycle().take(6 * 4).copied().collect();
        let qk = Tensor::new(vec![6, 4], same).unwrap();
        let inp = GeneratorInputs {
            queries: tape.constant(qk.clone()),
            keys: tape.constant(qk),
            positions: tape.constant(random(&mut rng, [6, 3])),
            seed_features: Some(tape.constant(random(&mut rng, [6, 3]))),
        };
        let h = g.forward(&mut tape, &store, &inp, 3).unwrap();
        let f = point_features(&mut tape, &store, &g.value_map, &inp).unwrap();
        let f0 = tape.gather_rows(f, vec![0]).unwrap();
        for (m, alpha) in g.alphas.iter().enumerate() {
            let want = alpha.forward(&mut tape, &store, f0).unwrap();
            let got = &tape.value(h).data()[m * 5..(m + 1) * 5];
            assert_eq!(got, tape.value(want).data());
        }
    }

    #[test]
    fn pointwise_softmax_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let g = PointwiseAttentionGenerator::new(&mut store, "p", DIMS, &mut rng).unwrap();
        let mut tape = Tape::new();
        let inp = GeneratorInputs {
            queries: tape.constant(random(&mut rng, [8, 4])),
            keys: tape.constant(random(&mut rng, [8, 4])),
            positions: tape.constant(random(&mut rng, [8, 3])),
            seed_features: Some(tape.constant(random(&mut rng, [8, 3]))),
        };
        let (h, ws) = g.forward_traced(&mut tape, &store, &inp, 4, AttentionMode::Softmax).unwrap();
        assert_eq!(tape.shape(h), &[16, 5]);
        for w in ws {
            for row in tape.value(w).data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
