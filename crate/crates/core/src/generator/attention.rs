use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{contract_err, Error, Result};
use crate::geometry::{knn, PointCloud};

/// How raw attention scores are normalized over a neighborhood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionMode {
    Softmax,
    /// Raw scores are used as weights.
    None,
    /// `λ · softmax`, so weights live in `(0, λ)`.
    Scaled(f64),
    Log,
}

impl AttentionMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            AttentionMode::Scaled(l) if !(l.is_finite() && *l > 0.0) => {
                Err(contract_err!("scaled attention needs a positive finite lambda, got {l}"))
            }
            _ => Ok(()),
        }
    }

    /// Normalizes `x` along `axis`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
        self.validate()?;
        match *self {
            AttentionMode::Softmax => tape.softmax(x, axis),
            AttentionMode::None => Ok(x),
            AttentionMode::Scaled(l) => {
                let s = tape.softmax(x, axis)?;
                tape.mul_scalar(s, l)
            }
            AttentionMode::Log => tape.log_softmax(x, axis),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionMode::Softmax => "softmax",
            AttentionMode::None => "none",
            AttentionMode::Scaled(_) => "scaled",
            AttentionMode::Log => "log",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionMode::Scaled(l) => write!(f, "scaled:{l}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Accepts `softmax`, `none`, `log`, `scaled` (λ = 1) and `scaled:<λ>`.
impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s.trim() {
            "softmax" => AttentionMode::Softmax,
            "none" => AttentionMode::None,
            "log" => AttentionMode::Log,
            "scaled" => AttentionMode::Scaled(1.0),
            other => match other.strip_prefix("scaled:") {
                Some(l) => AttentionMode::Scaled(
                    l.parse()
                        .map_err(|_| Error::Config(format!("bad scaled-softmax lambda {l:?}")))?,
                ),
                None => return Err(Error::Config(format!("unknown attention mode {other:?}"))),
            },
        };
        mode.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(mode)
    }
}

/// kNN neighborhoods of a cloud over itself, flattened to aligned
/// `(center, neighbor)` row index lists of length `n * k`.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    pub n: usize,
    pub k: usize,
    pub centers: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl Neighborhood {
    pub fn of(cloud: &PointCloud, k: usize) -> Result<Self> {
        let nb = knn(cloud, cloud, k)?;
        Ok(Neighborhood {
            n: cloud.len(),
            k,
            centers: nb.query_indices(),
            neighbors: nb.indices().to_vec(),
        })
    }

    /// `x_i - x_j` for every (center, neighbor) pair.
    pub fn differences<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let xi = tape.gather_rows(x, self.centers.clone())?;
        let xj = tape.gather_rows(x, self.neighbors.clone())?;
        tape.sub(xi, xj)
    }
}

/// Stacks per-kernel outputs `hs[m]` of shape `[n, c]` so that row
/// `i * r + m` holds `hs[m][i]`.
pub fn interleave<T: Scalar>(tape: &mut Tape<T>, hs: &[Var]) -> Result<Var> {
    let shape = tape.shape(hs[0]).to_vec();
    if hs.len() == 1 {
        return Ok(hs[0]);
    }
    let joined = tape.concat(hs, 1)?;
    tape.reshape(joined, vec![shape[0] * hs.len(), shape[1]])
}

/// Row indices repeating each of `n` rows `rate` times in place.
pub fn repeat_rows(n: usize, rate: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, rate)).collect()
}
