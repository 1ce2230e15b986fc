//! Brute-force reference implementations shared by the oracle and
//! acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedformer::geometry::{farthest_point_sample, knn, PointCloud};
use seedformer::metrics::{chamfer, fscore, mmd, partial_matching, ChamferNorm};

pub const INSTANCES: u64 = 60;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

fn sized(rng: &mut ChaCha8Rng, max: usize) -> PointCloud {
    let n = rng.random_range(1..=max);
    cloud(rng, n)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn min_dist(p: &[f64; 3], set: &PointCloud) -> f64 {
    set.points().iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

fn fps_oracle(c: &PointCloud, k: usize, start: usize) -> Vec<usize> {
    let pts = c.points();
    let mut sel = vec![start];
    while sel.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in pts.iter().enumerate() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| dist(p, &pts[s])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

fn knn_oracle(q: &PointCloud, r: &PointCloud, k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for p in q.points() {
        let mut all: Vec<(f64, usize)> = r.points().iter().map(|x| dist(p, x)).zip(0..).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(all[..k].iter().map(|&(_, j)| j));
    }
    out
}

fn chamfer_oracle(a: &PointCloud, b: &PointCloud, squared: bool) -> f64 {
    let dir = |x: &PointCloud, y: &PointCloud| {
        x.points()
            .iter()
            .map(|p| {
                let d = min_dist(p, y);
                if squared {
                    d * d
                } else {
                    d
                }
            })
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (dir(a, b) + dir(b, a))
}

fn fscore_oracle(pred: &PointCloud, gt: &PointCloud, t: f64) -> f64 {
    let frac = |x: &PointCloud, y: &PointCloud| {
        x.points().iter().filter(|p| min_dist(p, y) <= t).count() as f64 / x.len() as f64
    };
    let (p, r) = (frac(pred, gt), frac(gt, pred));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}


macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn check_fps(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=256);
    let c = cloud(&mut rng, n);
    let k = rng.random_range(1..=n.min(64));
    let start = rng.random_range(0..n);
    ensure!(farthest_point_sample(&c, k, start).unwrap() == fps_oracle(&c, k, start), "fps seed {seed}");
    Ok(())
}

pub fn check_knn(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let m = rng.random_range(1..=256);
    let n = rng.random_range(1..=128);
    let (q, r) = (cloud(&mut rng, n), cloud(&mut rng, m));
    let k = rng.random_range(1..=m.min(16));
    let got = knn(&q, &r, k).unwrap();
    ensure!(got.indices() == knn_oracle(&q, &r, k).as_slice(), "knn indices seed {seed}");
    for qi in 0..n {
        let (idx, d) = got.row(qi);
        for (&j, &dj) in idx.iter().zip(d) {
            ensure!((dj - dist(q.point(qi), r.point(j))).abs() <= 1e-12, "knn distance seed {seed}");
        }
    }
    Ok(())
}

pub fn check_chamfer(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let a = sized(&mut rng, 256);
    let b = sized(&mut rng, 256);
    ensure!((chamfer(&a, &b, ChamferNorm::L1) - chamfer_oracle(&a, &b, false)).abs() < 1e-6, "cd-l1 seed {seed}");
    ensure!((chamfer(&a, &b, ChamferNorm::L2) - chamfer_oracle(&a, &b, true)).abs() < 1e-6, "cd-l2 seed {seed}");
    let pm: f64 = a.points().iter().map(|p| min_dist(p, &b)).sum::<f64>() / a.len() as f64;
    ensure!((partial_matching(&a, &b) - pm).abs() < 1e-6, "partial matching seed {seed}");
    Ok(())
}

pub fn check_fscore(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
    let a = sized(&mut rng, 256);
    let b = sized(&mut rng, 256);
    let t = rng.random_range(0.01..0.3);
    ensure!((fscore(&a, &b, t).unwrap() - fscore_oracle(&a, &b, t)).abs() < 1e-6, "fscore seed {seed}");
    Ok(())
}

pub fn check_mmd(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
    let pred = sized(&mut rng, 64);
    let lib: Vec<PointCloud> = (0..rng.random_range(1..6))
        .map(|_| {
            let n = rng.random_range(1..=64);
            cloud(&mut rng, n)
        })
        .collect();
    let dists: Vec<f64> = lib.iter().map(|c| chamfer_oracle(&pred, c, true)).collect();
    let best = (0..dists.len()).fold(0, |b, i| if dists[i] < dists[b] { i } else { b });
    let (d, i) = mmd(&pred, &lib).unwrap();
    ensure!(i == best, "mmd index seed {seed}");
    ensure!((d - dists[best]).abs() < 1e-6, "mmd value seed {seed}");
    Ok(())
}

pub const CHECKS: [(&str, fn(u64) -> Result<(), String>); 5] = [
    ("fps", check_fps),
    ("knn", check_knn),
    ("chamfer+pm", check_chamfer),
    ("fscore", check_fscore),
    ("mmd", check_mmd),
];
