use rand::Rng;

use super::attention::{interleave, AttentionMode, Neighborhood};
use crate::autodiff::{ParamStore, Scalar, Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::geometry::PointCloud;
use crate::nn::Mlp;

/// Widths of a point generator. `seed` is the interpolated seed feature
/// width, or `None` when the generator runs without seed features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorDims {
    pub query: usize,
    pub key: usize,
    pub seed: Option<usize>,
    pub channels: usize,
    pub rate: usize,
}

/// Per-point tape inputs shared by every generator variant.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorInputs {
    pub queries: Var,
    pub keys: Var,
    /// `[N, 3]` point positions.
    pub positions: Var,
    pub seed_features: Option<Var>,
}

impl GeneratorInputs {
    /// Checks row counts against the positions and returns the cloud.
    pub(crate) fn validate<T: Scalar>(&self, tape: &Tape<T>, dims: &GeneratorDims) -> Result<PointCloud> {
        let cloud = PointCloud::from_tensor(tape.value(self.positions))?;
        let n = cloud.len();
        let check = |v: Var, width: usize, what: &str| {
            let s = tape.shape(v);
            if s.len() != 2 || s[0] != n || s[1] != width {
                Err(shape_err!("{what} {:?} does not match [{n}, {width}]", s))
            } else {
                Ok(())
            }
        };
        check(self.queries, dims.query, "queries")?;
        check(self.keys, dims.key, "keys")?;
        match (self.seed_features, dims.seed) {
            (Some(s), Some(w)) => check(s, w, "seed features")?,
            (Some(_), None) => {
                return Err(contract_err!("seed features given to a generator built without them"))
            }
            _ => {}
        }
        if dims.rate == 0 {
            return Err(contract_err!("rate must be at least 1"));
        }
        Ok(cloud)
    }
}

/// Positional (and, with seeds, regional) relation for every neighbor pair:
/// `ρ(p_i - p_j) + θ(s_i - s_j)`.
pub(crate) fn relation<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    rho: &Mlp,
    theta: Option<&Mlp>,
    inputs: &GeneratorInputs,
    nb: &Neighborhood,
) -> Result<Var> {
    let rel = nb.differences(tape, inputs.positions)?;
    let mut delta = rho.forward(tape, store, rel)?;
    if let (Some(theta), Some(s)) = (theta, inputs.seed_features) {
        let srel = nb.differences(tape, s)?;
        let enc = theta.forward(tape, store, srel)?;
        delta = tape.add(delta, enc)?;
    }
    Ok(delta)
}

/// Attention scores before and after normalization, one `[N, k, C]`
/// variable of each per kernel.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub raw: Vec<Var>,
    pub weights: Vec<Var>,
}

/// Channel-wise vector attention over kNN neighborhoods that emits `rate`
/// feature rows per input point, one per kernel.
#[derive(Clone, Debug)]
pub struct UpsampleTransformer {
    pub dims: GeneratorDims,
    pub value_map: Mlp,
    pub beta: Mlp,
    pub gamma: Mlp,
    pub psi: Mlp,
    pub rho: Mlp,
    pub theta: Option<Mlp>,
    pub alphas: Vec<Mlp>,
}

impl UpsampleTransformer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: GeneratorDims,
        rng: &mut R,
    ) -> Result<Self> {
        let c = dims.channels;
        let value_map = Mlp::two_layer(store, &format!("{name}.value"), dims.key + dims.query, c, c, rng)?;
        let beta = Mlp::two_layer(store, &format!("{name}.beta"), dims.query, c, c, rng)?;
        let gamma = Mlp::two_layer(store, &format!("{name}.gamma"), dims.key, c, c, rng)?;
        let psi = Mlp::two_layer(store, &format!("{name}.psi"), c, c, c, rng)?;
        let rho = Mlp::two_layer(store, &format!("{name}.rho"), 3, c, c, rng)?;
        let theta = dims
            .seed
            .map(|s| Mlp::two_layer(store, &format!("{name}.theta"), s, c, c, rng))
            .transpose()?;
        let alphas = (0..dims.rate)
            .map(|m| Mlp::two_layer(store, &format!("{name}.alpha{m}"), c, c, c, rng))
            .collect::<Result<_>>()?;
        Ok(UpsampleTransformer {
            dims,
            value_map,
            beta,
            gamma,
            psi,
            rho,
            theta,
            alphas,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &GeneratorInputs,
        k: usize,
        mode: AttentionMode,
    ) -> Result<Var> {
        self.forward_traced(tape, store, inputs, k, mode).map(|(h, _)| h)
    }

    /// Returns `[rate * N, C]` features where row `i * rate + m` is the
    /// output of kernel `m` at point `i`.
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &GeneratorInputs,
        k: usize,
        mode: AttentionMode,
    ) -> Result<(Var, AttentionTrace)> {
        let cloud = inputs.validate(tape, &self.dims)?;
        let (n, c) = (cloud.len(), self.dims.channels);
        let nb = Neighborhood::of(&cloud, k)?;

        let kq = tape.concat(&[inputs.keys, inputs.queries], 1)?;
        let v = self.value_map.forward(tape, store, kq)?;
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

        let mut trace = AttentionTrace::default();
        let mut hs = Vec::with_capacity(self.alphas.len());
        for alpha in &self.alphas {
            let raw = alpha.forward(tape, store, pre)?;
            let raw = tape.reshape(raw, vec![n, k, c])?;
            let a = mode.apply(tape, raw, 1)?;
            let weighted = tape.mul(a, val)?;
            hs.push(tape.sum_axis(weighted, 1)?);
            trace.raw.push(raw);
            trace.weights.push(a);
        }
        Ok((interleave(tape, &hs)?, trace))
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
    use crate::autodiff::Tensor;

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
        let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    struct Fixture {
        store: ParamStore<f64>,
        ut: UpsampleTransformer,
        q: Tensor<f64>,
        k: Tensor<f64>,
        p: Tensor<f64>,
        s: Tensor<f64>,
    }

    fn fixture(n: usize, rate: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dims = GeneratorDims {
            query: 5,
            key: 4,
            seed: Some(3),
            channels: 6,
            rate,
        };
        let mut store = ParamStore::new();
        let ut = UpsampleTransformer::new(&mut store, "ut", dims, &mut rng).unwrap();
        Fixture {
            q: random(&mut rng, [n, 5]),
            k: random(&mut rng, [n, 4]),
            p: random(&mut rng, [n, 3]),
            s: random(&mut rng, [n, 3]),
            store,
            ut,
        }
    }

    fn inputs(tape: &mut Tape<f64>, f: &Fixture) -> GeneratorInputs {
        GeneratorInputs {
            queries: tape.constant(f.q.clone()),
            keys: tape.constant(f.k.clone()),
            positions: tape.constant(f.p.clone()),
            seed_features: Some(tape.constant(f.s.clone())),
        }
    }

    #[test]
    fn output_has_rate_times_rows() {
        let f = fixture(8, 2);
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, &f);
        let h = f.ut.forward(&mut tape, &f.store, &inp, 4, AttentionMode::Softmax).unwrap();
        assert_eq!(tape.shape(h), &[16, 6]);
        assert!(f.ut.forward(&mut tape, &f.store, &inp, 9, AttentionMode::Softmax).is_err());
    }

    #[test]
    fn singleton_neighborhood_returns_value_plus_self_relation() {
        let f = fixture(5, 1);
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, &f);
        let h = f.ut.forward(&mut tape, &f.store, &inp, 1, AttentionMode::Softmax).unwrap();

        let kq = tape.concat(&[inp.keys, inp.queries], 1).unwrap();
        let v = f.ut.value_map.forward(&mut tape, &f.store, kq).unwrap();
        let pv = f.ut.psi.forward(&mut tape, &f.store, v).unwrap();
        let zeros = tape.constant(Tensor::zeros(vec![1, 3]));
        let r0 = f.ut.rho.forward(&mut tape, &f.store, zeros).unwrap();
        let t0 = f.ut.theta.as_ref().unwrap().forward(&mut tape, &f.store, zeros).unwrap();
        let d0: Vec<f64> = tape.value(r0).data().iter().zip(tape.value(t0).data()).map(|(a, b)| a + b).collect();
        for (i, row) in tape.value(h).data().chunks(6).enumerate() {
            for ch in 0..6 {
                let want = tape.value(pv).data()[i * 6 + ch] + d0[ch];
                assert!((row[ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mode_none_passes_raw_scores_and_differs_from_softmax() {
        let f = fixture(10, 2);
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, &f);
        let (hn, tn) = f.ut.forward_traced(&mut tape, &f.store, &inp, 4, AttentionMode::None).unwrap();
        for (r, w) in tn.raw.iter().zip(&tn.weights) {
            assert_eq!(tape.value(*r).data(), tape.value(*w).data());
        }
        let hs = f.ut.forward(&mut tape, &f.store, &inp, 4, AttentionMode::Softmax).unwrap();
        assert!(tape.value(hn).max_abs_diff(tape.value(hs)).unwrap() > 1e-6);
    }

    #[test]
    fn softmax_weights_are_normalized_and_scaled_one_is_identical() {
        let f = fixture(10, 3);
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, &f);
        let (hs, ts) = f.ut.forward_traced(&mut tape, &f.store, &inp, 5, AttentionMode::Softmax).unwrap();
        for w in &ts.weights {
            let t = tape.value(*w);
            for i in 0..10 {
                for ch in 0..6 {
                    let s: f64 = (0..5).map(|j| t.data()[(i * 5 + j) * 6 + ch]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        let h1 = f.ut.forward(&mut tape, &f.store, &inp, 5, AttentionMode::Scaled(1.0)).unwrap();
        assert_eq!(tape.value(hs).data(), tape.value(h1).data());
    }

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        use crate::autodiff::{grad_check, GradCheckOptions};
        let f = fixture(7, 2);
        for mode in [
            AttentionMode::Softmax,
            AttentionMode::None,
            AttentionMode::Scaled(1.7),
            AttentionMode::Log,
        ] {
            let r = grad_check(
                |t, v| {
                    let inp = GeneratorInputs {
                        queries: v[0],
                        keys: v[1],
                        positions: v[2],
                        seed_features: Some(v[3]),
                    };
                    let h = f.ut.forward(t, &f.store, &inp, 3, mode)?;
                    let sq = t.mul(h, h)?;
                    t.sum(sq)
                },
                &[f.q.clone(), f.k.clone(), f.p.clone(), f.s.clone()],
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.passed(), "{mode}: {r:?}");
        }
    }
}
