//! Chamfer-family losses and evaluation metrics.
//!
//! Plain functions evaluate on [`PointCloud`]s in f64. The `*_on_tape`
//! variants build the same quantities from tape variables so they can be
//! differentiated; nearest-neighbor assignments are taken from the forward
//! values and held fixed.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{contract_err, Result};
use crate::geometry::{farthest_point_sample, nearest_neighbors, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChamferNorm {
    /// Mean nearest-neighbor Euclidean distance.
    L1,
    /// Mean nearest-neighbor squared distance.
    L2,
}

fn directed(a: &PointCloud, b: &PointCloud, norm: ChamferNorm) -> f64 {
    let nn = nearest_neighbors(a, b);
    let total: f64 = match norm {
        ChamferNorm::L1 => nn.iter().map(|&(_, d2)| d2.sqrt()).sum(),
        ChamferNorm::L2 => nn.iter().map(|&(_, d2)| d2).sum(),
    };
    total / a.len() as f64
}

/// Symmetric Chamfer distance with a ½ prefactor on the two directed means.
pub fn chamfer(a: &PointCloud, b: &PointCloud, norm: ChamferNorm) -> f64 {
    0.5 * (directed(a, b, norm) + directed(b, a, norm))
}

/// Mean distance from each input point to its nearest predicted point.
pub fn partial_matching(input: &PointCloud, prediction: &PointCloud) -> f64 {
    directed(input, prediction, ChamferNorm::L1)
}

/// Same quantity as [`partial_matching`], under its evaluation name.
pub fn fidelity(input: &PointCloud, prediction: &PointCloud) -> f64 {
    partial_matching(input, prediction)
}

/// Harmonic mean of precision and recall at distance `threshold`.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(contract_err!("fscore threshold must be positive, got {threshold}"));
    }
    let t2 = threshold * threshold;
    let within = |a: &PointCloud, b: &PointCloud| {
        nearest_neighbors(a, b).iter().filter(|&&(_, d2)| d2 <= t2).count() as f64 / a.len() as f64
    };
    let p = within(pred, gt);
    let r = within(gt, pred);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// 1% of the bounding-box diagonal of `gt`.
pub fn default_fscore_threshold(gt: &PointCloud) -> f64 {
    0.01 * gt.bbox_diagonal()
}

/// Smallest L2 Chamfer distance from `pred` to a library entry, with the
/// entry's index (first on ties).
pub fn mmd(pred: &PointCloud, library: &[PointCloud]) -> Result<(f64, usize)> {
    if library.is_empty() {
        return Err(contract_err!("reference library is empty"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, cand) in library.iter().enumerate() {
        let d = chamfer(pred, cand, ChamferNorm::L2);
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best)
}

/// `gt` reduced to `n` points by farthest point sampling from index 0, or
/// unchanged when it has at most `n` points.
pub fn downsample_to(gt: &PointCloud, n: usize) -> Result<PointCloud> {
    if gt.len() <= n {
        return Ok(gt.clone());
    }
    gt.select(&farthest_point_sample(gt, n, 0)?)
}

/// Per-term view of the training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// CD-L1 for the seeds, then each stage output.
    pub stage_cds: Vec<f64>,
    pub partial_matching: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(stage_cds: Vec<f64>, partial_matching: f64) -> Self {
        let total = stage_cds.iter().sum::<f64>() + partial_matching;
        LossBreakdown {
            stage_cds,
            partial_matching,
            total,
        }
    }

    pub fn completion(&self) -> f64 {
        self.stage_cds.iter().sum()
    }
}

/// Sum of CD-L1 between each output (seeds first) and `gt` downsampled to
/// the output's size. Returns the sum and the per-output terms.
pub fn completion_loss(
    seeds: &PointCloud,
    stages: &[PointCloud],
    gt: &PointCloud,
) -> Result<(f64, Vec<f64>)> {
    let terms = std::iter::once(seeds)
        .chain(stages)
        .map(|out| Ok(chamfer(out, &downsample_to(gt, out.len())?, ChamferNorm::L1)))
        .collect::<Result<Vec<_>>>()?;
    Ok((terms.iter().sum(), terms))
}

pub fn training_loss(
    seeds: &PointCloud,
    stages: &[PointCloud],
    partial: &PointCloud,
    gt: &PointCloud,
) -> Result<LossBreakdown> {
    let (_, terms) = completion_loss(seeds, stages, gt)?;
    let last = stages.last().unwrap_or(seeds);
    Ok(LossBreakdown::new(terms, partial_matching(partial, last)))
}

fn cloud_of<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<PointCloud> {
    PointCloud::from_tensor(tape.value(v))
}

fn directed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    a_cloud: &PointCloud,
    b: Var,
    b_cloud: &PointCloud,
    norm: ChamferNorm,
) -> Result<Var> {
    let idx = nearest_neighbors(a_cloud, b_cloud).into_iter().map(|(j, _)| j).collect();
    let matched = tape.gather_rows(b, idx)?;
    let diff = tape.sub(a, matched)?;
    let per_point = match norm {
        ChamferNorm::L1 => tape.row_norm(diff)?,
        ChamferNorm::L2 => {
            let sq = tape.mul(diff, diff)?;
            tape.sum_axis(sq, 1)?
        }
    };
    tape.mean(per_point)
}

/// Differentiable [`chamfer`] over two `[N, 3]` variables.
pub fn chamfer_on_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, norm: ChamferNorm) -> Result<Var> {
    let ac = cloud_of(tape, a)?;
    let bc = cloud_of(tape, b)?;
    let ab = directed_on_tape(tape, a, &ac, b, &bc, norm)?;
    let ba = directed_on_tape(tape, b, &bc, a, &ac, norm)?;
    let s = tape.add(ab, ba)?;
    tape.mul_scalar(s, 0.5)
}

/// Differentiable [`partial_matching`] with a variable prediction.
pub fn partial_matching_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    input: &PointCloud,
    prediction: Var,
) -> Result<Var> {
    let pc = cloud_of(tape, prediction)?;
    let x = tape.constant(input.to_tensor());
    directed_on_tape(tape, x, input, prediction, &pc, ChamferNorm::L1)
}

/// Tape variables of every term in the training objective.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub stage_cds: Vec<Var>,
    pub partial_matching: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let get = |v: Var| tape.value(v).data()[0].as_f64();
        LossBreakdown::new(
            self.stage_cds.iter().map(|&v| get(v)).collect(),
            get(self.partial_matching),
        )
    }
}

/// Completion loss over seeds and stage outputs plus partial matching on the
/// final output.
pub fn training_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    seeds: Var,
    stages: &[Var],
    partial: &PointCloud,
    gt: &PointCloud,
) -> Result<LossVars> {
    let mut stage_cds = Vec::with_capacity(stages.len() + 1);
    for &out in std::iter::once(&seeds).chain(stages) {
        let n = tape.shape(out)[0];
        let target = tape.constant(downsample_to(gt, n)?.to_tensor());
        stage_cds.push(chamfer_on_tape(tape, out, target, ChamferNorm::L1)?);
    }
    let last = *stages.last().unwrap_or(&seeds);
    let pm = partial_matching_on_tape(tape, partial, last)?;
    let mut total = pm;
    for &c in stage_cds.iter().rev() {
        total = tape.add(c, total)?;
    }
    Ok(LossVars {
        stage_cds,
        partial_matching: pm,
        total,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions, Tensor};

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        )
        .unwrap()
    }

    fn oracle_directed(a: &PointCloud, b: &PointCloud, squared: bool) -> f64 {
        let mut s = 0.0;
        for p in a.points() {
            let mut best = f64::INFINITY;
            for q in b.points() {
                let d2: f64 = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum();
                best = best.min(if squared { d2 } else { d2.sqrt() });
            }
            s += best;
        }
        s / a.len() as f64
    }

    #[test]
    fn chamfer_single_pair_and_identity() {
        let a = cloud(&[[0.0; 3]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b, ChamferNorm::L1), 1.0);
        assert_eq!(chamfer(&a, &b, ChamferNorm::L2), 1.0);
        assert_eq!(chamfer(&b, &b, ChamferNorm::L1), 0.0);
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_cloud(&mut rng, 64);
        let b = random_cloud(&mut rng, 64);
        for (norm, sq) in [(ChamferNorm::L1, false), (ChamferNorm::L2, true)] {
            let want = 0.5 * (oracle_directed(&a, &b, sq) + oracle_directed(&b, &a, sq));
            assert!((chamfer(&a, &b, norm) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_matching_examples() {
        let x = cloud(&[[0.0; 3]]);
        let pred = cloud(&[[0.0, 0.0, 3.0], [0.0, 4.0, 0.0]]);
        assert_eq!(partial_matching(&x, &pred), 3.0);
        assert_eq!(fidelity(&x, &pred), 3.0);
        let sup = cloud(&[[0.0; 3], [1.0, 1.0, 1.0]]);
        assert_eq!(partial_matching(&x, &sup), 0.0);
    }

    #[test]
    fn fscore_examples() {
        let gt = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert_eq!(fscore(&gt, &gt, 0.01).unwrap(), 1.0);
        let far = gt.translated([100.0, 0.0, 0.0]);
        assert_eq!(fscore(&far, &gt, 0.01).unwrap(), 0.0);
        let pred = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0]]);
        assert!((fscore(&pred, &gt, 0.01).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(fscore(&pred, &gt, 0.0).is_err());
    }

    #[test]
    fn mmd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lib: Vec<_> = (0..5).map(|_| random_cloud(&mut rng, 16)).collect();
        assert_eq!(mmd(&lib[3], &lib).unwrap(), (0.0, 3));
        let probe = random_cloud(&mut rng, 16);
        let (v, i) = mmd(&probe, &lib[..1]).unwrap();
        assert_eq!((v, i), (chamfer(&probe, &lib[0], ChamferNorm::L2), 0));
        assert!(mmd(&probe, &[]).is_err());
    }

    #[test]
    fn completion_loss_examples() {
        let gt = cloud(&[[0.0; 3]]);
        let stage = gt.translated([1.0, 0.0, 0.0]);
        let (total, _) = completion_loss(&gt, &[stage], &gt).unwrap();
        assert_eq!(total, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_cloud(&mut rng, 40);
        let outs: Vec<_> = [8, 16, 32].iter().map(|&n| random_cloud(&mut rng, n)).collect();
        let seeds = random_cloud(&mut rng, 4);
        let (total, terms) = completion_loss(&seeds, &outs, &gt).unwrap();
        let mut want = chamfer(&seeds, &downsample_to(&gt, 4).unwrap(), ChamferNorm::L1);
        for o in &outs {
            want += chamfer(o, &downsample_to(&gt, o.len()).unwrap(), ChamferNorm::L1);
        }
        assert_eq!(terms.len(), 4);
        assert!((total - want).abs() < 1e-12);

        let down: Vec<_> = [4, 8].iter().map(|&n| downsample_to(&gt, n).unwrap()).collect();
        let (zero, _) = completion_loss(&down[0], &down[1..], &gt).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn tape_losses_match_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = random_cloud(&mut rng, 30);
        let partial = random_cloud(&mut rng, 10);
        let seeds = random_cloud(&mut rng, 6);
        let stage = random_cloud(&mut rng, 12);
        let want = training_loss(&seeds, &[stage.clone()], &partial, &gt).unwrap();

        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(seeds.to_tensor());
        let p = tape.leaf(stage.to_tensor());
        let vars = training_loss_on_tape(&mut tape, s, &[p], &partial, &gt).unwrap();
        let got = vars.breakdown(&tape);
        assert!((got.total - want.total).abs() < 1e-12);
        assert!((tape.value(vars.total).data()[0] - want.total).abs() < 1e-12);
    }

    #[test]
    fn chamfer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_cloud(&mut rng, 12).to_tensor::<f64>();
        let b = random_cloud(&mut rng, 9).to_tensor::<f64>();
        for norm in [ChamferNorm::L1, ChamferNorm::L2] {
            let r = grad_check(
                |t, v| chamfer_on_tape(t, v[0], v[1], norm),
                &[a.clone(), b.clone()],
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.passed(), "{norm:?} {r:?}");
        }
        let partial = random_cloud(&mut rng, 7);
        let r = grad_check(
            |t, v| partial_matching_on_tape(t, &partial, v[0]),
            &[Tensor::clone(&a)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
