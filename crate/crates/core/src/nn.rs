//! Shared per-point maps built from autodiff primitives.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Affine map `x W + b` applied independently to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in_dim)` for weight and bias.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect()
        };
        let w = Tensor::new(vec![in_dim, out_dim], draw(in_dim * out_dim))?;
        let b = Tensor::new(vec![out_dim], draw(out_dim))?;
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
            in_dim,
            out_dim,
        })
    }

    pub fn zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(vec![in_dim, out_dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Stack of [`Linear`] layers with relu between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Apply relu after the last layer as well.
    pub final_relu: bool,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        final_relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, final_relu })
    }

    /// Two-layer map `in -> hidden -> out`.
    pub fn two_layer<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Mlp::new(store, name, &[in_dim, hidden, out_dim], false, rng)
    }

    /// Like [`Mlp::two_layer`] but with a zero-initialized last layer.
    pub fn two_layer_zero_out<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = Linear::new(store, &format!("{name}.l0"), in_dim, hidden, rng)?;
        let last = Linear::zeroed(store, &format!("{name}.l1"), hidden, out_dim)?;
        Ok(Mlp {
            layers: vec![first, last],
            final_relu: false,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < n || self.final_relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }
}
