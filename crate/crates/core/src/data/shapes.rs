//! Parametric shapes sampled uniformly by surface area, viewpoint
//! occlusion and input resampling.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::geometry::{Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    /// A flat top on four legs.
    Table,
    /// A box body with a sphere on top and a cylindrical post below.
    Composite,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Cylinder,
        ShapeFamily::Table,
        ShapeFamily::Composite,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Table => "table",
            ShapeFamily::Composite => "composite",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown shape family {s:?}")))
    }
}

/// A shape to sample.
///
/// `size` is family-specific: sphere `[radius, -, -]`, box `[x, y, z]`
/// extents, cylinder `[radius, height, -]`, table and composite
/// `[width, depth, height]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShapeSpec {
    pub family: ShapeFamily,
    pub size: [f64; 3],
    pub seed: u64,
    pub gt_points: usize,
    pub partial_points: usize,
}

impl SyntheticShapeSpec {
    /// Family-appropriate random proportions, roughly unit scale.
    pub fn random(family: ShapeFamily, seed: u64, gt_points: usize, partial_points: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a3e);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let size = match family {
            ShapeFamily::Sphere => [u(0.35, 0.5), 0.0, 0.0],
            ShapeFamily::Box => [u(0.4, 1.0), u(0.4, 1.0), u(0.4, 1.0)],
            ShapeFamily::Cylinder => [u(0.2, 0.4), u(0.5, 1.0), 0.0],
            ShapeFamily::Table | ShapeFamily::Composite => [u(0.6, 1.0), u(0.5, 0.9), u(0.5, 0.9)],
        };
        SyntheticShapeSpec {
            family,
            size,
            seed,
            gt_points,
            partial_points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gt_points >= self.partial_points && self.partial_points >= 16) {
            return Err(contract_err!(
                "need gt_points >= partial_points >= 16, got {} and {}",
                self.gt_points,
                self.partial_points
            ));
        }
        let used = match self.family {
            ShapeFamily::Sphere => 1,
            ShapeFamily::Cylinder => 2,
            _ => 3,
        };
        if self.size[..used].iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(contract_err!("shape sizes must be positive, got {:?}", self.size));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Part {
    Sphere { center: Point3, radius: f64 },
    Cuboid { center: Point3, half: [f64; 3] },
    Cylinder { center: Point3, radius: f64, half_height: f64 },
}

impl Part {
    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Part::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Part::Cuboid { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Part::Cylinder { radius, half_height, .. } => {
                2.0 * PI * radius * 2.0 * half_height + 2.0 * PI * radius * radius
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Point3 {
        use std::f64::consts::PI;
        let add = |c: Point3, d: Point3| [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
        match *self {
            Part::Sphere { center, radius } => {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).max(0.0).sqrt();
                add(center, [radius * r * phi.cos(), radius * r * phi.sin(), radius * z])
            }
            Part::Cuboid { center, half } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total = faces.iter().sum::<f64>();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (a, &f) in faces.iter().enumerate() {
                    if pick < f {
                        axis = a;
                        break;
                    }
                    pick -= f;
                }
                let mut d = [0.0; 3];
                for (k, v) in d.iter_mut().enumerate() {
                    *v = rng.random_range(-half[k]..=half[k]);
                }
                d[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
                add(center, d)
            }
            Part::Cylinder { center, radius, half_height } => {
                let side = 2.0 * half_height;
                let cap = radius / 2.0;
                let phi = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..side + 2.0 * cap) < side {
                    let z = rng.random_range(-half_height..=half_height);
                    add(center, [radius * phi.cos(), radius * phi.sin(), z])
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let z = if rng.random_bool(0.5) { half_height } else { -half_height };
                    add(center, [r * phi.cos(), r * phi.sin(), z])
                }
            }
        }
    }
}

fn parts(spec: &SyntheticShapeSpec) -> Vec<Part> {
    let [a, b, c] = spec.size;
    match spec.family {
        ShapeFamily::Sphere => vec![Part::Sphere {
            center: [0.0; 3],
            radius: a,
        }],
        ShapeFamily::Box => vec![Part::Cuboid {
            center: [0.0; 3],
            half: [a / 2.0, b / 2.0, c / 2.0],
        }],
        ShapeFamily::Cylinder => vec![Part::Cylinder {
            center: [0.0; 3],
            radius: a,
            half_height: b / 2.0,
        }],
        ShapeFamily::Table => {
            let top = 0.04 * c;
            let leg = 0.06 * a.min(b);
            let leg_h = (c - top) / 2.0;
            let mut out = vec![Part::Cuboid {
                center: [0.0, 0.0, c / 2.0 - top / 2.0],
                half: [a / 2.0, b / 2.0, top / 2.0],
            }];
            for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                out.push(Part::Cuboid {
                    center: [sx * (a / 2.0 - leg), sy * (b / 2.0 - leg), -c / 2.0 + leg_h],
                    half: [leg / 2.0, leg / 2.0, leg_h],
                });
            }
            out
        }
        ShapeFamily::Composite => {
            let body_h = 0.45 * c;
            let r = 0.25 * a.min(b);
            vec![
                Part::Cuboid {
                    center: [0.0, 0.0, 0.0],
                    half: [a / 2.0, b / 2.0, body_h / 2.0],
                },
                Part::Sphere {
                    center: [0.0, 0.0, body_h / 2.0 + r],
                    radius: r,
                },
                Part::Cylinder {
                    center: [0.0, 0.0, -body_h / 2.0 - 0.25 * c],
                    radius: 0.4 * r,
                    half_height: 0.25 * c,
                },
            ]
        }
    }
}

/// Samples `n` surface points of the shape; deterministic in `seed`.
pub fn sample_surface(spec: &SyntheticShapeSpec, n: usize, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    if n == 0 {
        return Err(contract_err!("cannot sample zero points"));
    }
    let parts = parts(spec);
    let areas: Vec<f64> = parts.iter().map(Part::area).collect();
    let total: f64 = areas.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut chosen = parts.len() - 1;
            for (i, &a) in areas.iter().enumerate() {
                if pick < a {
                    chosen = i;
                    break;
                }
                pick -= a;
            }
            parts[chosen].sample(&mut rng)
        })
        .collect();
    PointCloud::new(pts)
}

/// Ground-truth cloud of `spec.gt_points` points.
pub fn generate_shape(spec: &SyntheticShapeSpec) -> Result<PointCloud> {
    sample_surface(spec, spec.gt_points, spec.seed)
}

/// Horizontal axis directions followed by four raised diagonals.
pub const VIEWPOINTS: [Point3; 8] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0],
];

/// Keeps the `keep` points whose direction from the centroid best aligns
/// with `viewpoint`, preserving input order.
pub fn occlude_viewpoint(cloud: &PointCloud, viewpoint: Point3, keep: usize) -> Result<PointCloud> {
    let n = cloud.len();
    if keep == 0 || keep > n {
        return Err(contract_err!("keep must lie in 1..={n}, got {keep}"));
    }
    let vn = viewpoint.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(vn > 0.0 && vn.is_finite()) {
        return Err(contract_err!("viewpoint must be a nonzero finite vector"));
    }
    let c = cloud.centroid();
    let score = |p: &Point3| {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len == 0.0 {
            0.0
        } else {
            (d[0] * viewpoint[0] + d[1] * viewpoint[1] + d[2] * viewpoint[2]) / (len * vn)
        }
    };
    let mut order: Vec<(f64, usize)> = cloud.points().iter().map(score).zip(0..).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    cloud.select(&kept)
}

/// Exactly `n` points: a uniformly chosen subset (in input order) when the
/// cloud is larger, or every point plus uniformly chosen duplicates.
pub fn resample_input(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    let m = cloud.len();
    if n == 0 {
        return Err(contract_err!("cannot resample to zero points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = if n <= m {
        let mut idx = sample(&mut rng, m, n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..m).chain((m..n).map(|_| rng.random_range(0..m))).collect()
    };
    cloud.select(&idx)
}
