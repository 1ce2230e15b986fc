//! Finite-difference checks over every differentiable operation the model
//! uses, each on a small random instance in double precision.
//!
//! Cases check input coordinates and, where the operation has parameters,
//! the parameters too (a random sample of coordinates per tensor for the
//! larger cases).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::error::{contract_err, Result};
use crate::generator::{
    AttentionMode, Generator, GeneratorDims, GeneratorInputs, GeneratorKind, SeedVars, StageVars, UpsampleLayer,
};
use crate::geometry::{interpolate_seed_features, PointCloud};
use crate::metrics::{chamfer_on_tape, partial_matching_on_tape, training_loss_on_tape, ChamferNorm};
use crate::pipeline::{ModelConfig, SeedFormer};

/// Names accepted by [`run_case`], in suite order.
pub const CASES: &[&str] = &[
    "primitives",
    "interpolation",
    "uptrans-softmax",
    "uptrans-none",
    "uptrans-scaled",
    "uptrans-log",
    "folding",
    "deconv",
    "graphconv",
    "pointwise",
    "chamfer-l1",
    "chamfer-l2",
    "partial-matching",
    "upsample-layer",
    "full-forward",
];

/// Result of one case; `reports` holds the input check and, when the case
/// has parameters, the parameter check.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub reports: Vec<GradCheckReport>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(GradCheckReport::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.reports
            .iter()
            .flat_map(|r| &r.inputs)
            .map(|i| i.checked)
            .sum()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Output scale of every checked function. Central differences of an O(1)
/// function carry roundoff near 1e-11, which the 1e-8 floor of the
/// relative error would turn into 1e-3 on gradients that are exactly zero
/// (softmax shift invariance makes several such). At this scale the
/// roundoff sits well under the floor; relative error is otherwise
/// unaffected by the scale.
const OUTPUT_SCALE: f64 = 1e-3;

/// Scalarizes `x` with a fixed random projection so every coordinate of
/// the output carries a distinct weight.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, &shape, -OUTPUT_SCALE, OUTPUT_SCALE));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn primitives(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    // relu inputs are kept at least 0.1 from the kink.
    let mut x = uniform(rng, &[4, 3], 0.1, 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 3 == 1 {
            *v = -*v;
        }
    }
    let w = uniform(rng, &[3, 5], -1.0, 1.0);
    let b = uniform(rng, &[5], -0.5, 0.5);
    let y = uniform(rng, &[4, 5], 0.5, 1.5);
    let r = grad_check(
        |t, v| {
            let xr = t.relu(v[0])?;
            let xs = t.add(v[0], xr)?;
            let h = t.linear(xs, v[1], Some(v[2]))?;
            let s = t.softmax_last(h)?;
            let ls = t.log_softmax(h, 0)?;
            let sm = t.softmax(h, 0)?;
            let a = t.mul(s, v[3])?;
            let a = t.sub(a, ls)?;
            let a = t.add(a, sm)?;
            let a = t.add_scalar(a, 0.5)?;
            let a = t.mul_scalar(a, 1.5)?;
            let c = t.concat(&[a, v[3]], 1)?;
            let g = t.gather_rows(c, vec![3, 0, 0, 2])?;
            let g = t.reshape(g, vec![4, 2, 5])?;
            let m = t.max_axis(g, 1)?;
            let n = t.row_norm(m)?;
            let n = t.clamp_min(n, 1e-3)?;
            let inv = t.recip(n)?;
            let inv = t.reshape(inv, vec![4, 1])?;
            let e = t.expand_last(inv, 5)?;
            let q = t.mul(e, m)?;
            let q = t.sum_axis(q, 0)?;
            let mean = t.mean(q)?;
            let total = project(t, q, 11)?;
            t.add(total, mean)
        },
        &[x, w, b, y],
        opts,
    )?;
    Ok(vec![r])
}

fn interpolation(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let q = uniform(rng, &[10, 3], -1.0, 1.0);
    let s = uniform(rng, &[7, 3], -1.0, 1.0);
    let f = uniform(rng, &[7, 4], -1.0, 1.0);
    let r = grad_check(
        |t, v| {
            let out = interpolate_seed_features(t, v[0], v[1], v[2], 3)?;
            project(t, out, 12)
        },
        &[q, s, f],
        opts,
    )?;
    Ok(vec![r])
}

struct GeneratorFixture {
    store: ParamStore<f64>,
    generator: Generator,
    inputs: [Tensor<f64>; 4],
}

fn generator_fixture(kind: GeneratorKind, rng: &mut ChaCha8Rng) -> Result<GeneratorFixture> {
    let (n, c, cs) = (9, 5, 3);
    let dims = GeneratorDims {
        query: c,
        key: c,
        seed: Some(cs),
        channels: c,
        rate: 2,
    };
    let mut store = ParamStore::new();
    let generator = Generator::new(kind, &mut store, "g", dims, rng)?;
    let inputs = [
        uniform(rng, &[n, c], -1.0, 1.0),
        uniform(rng, &[n, c], -1.0, 1.0),
        uniform(rng, &[n, 3], -1.0, 1.0),
        uniform(rng, &[n, cs], -1.0, 1.0),
    ];
    Ok(GeneratorFixture {
        store,
        generator,
        inputs,
    })
}

fn generator_case(
    kind: GeneratorKind,
    mode: AttentionMode,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GradCheckReport>> {
    let fx = generator_fixture(kind, rng)?;
    let k = 4;
    let run = |t: &mut Tape<f64>, store: &ParamStore<f64>, v: &[Var]| {
        let inputs = GeneratorInputs {
            queries: v[0],
            keys: v[1],
            positions: v[2],
            seed_features: Some(v[3]),
        };
        let h = fx.generator.forward(t, store, &inputs, k, mode)?;
        project(t, h, 13)
    };
    let wrt_inputs = grad_check(|t, v| run(t, &fx.store, v), &fx.inputs, opts)?;
    let wrt_params = grad_check_params(
        &fx.store,
        |t, store| {
            let v: Vec<Var> = fx.inputs.iter().map(|x| t.constant(x.clone())).collect();
            run(t, store, &v)
        },
        opts,
    )?;
    Ok(vec![wrt_inputs, wrt_params])
}

fn chamfer_case(norm: ChamferNorm, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let a = uniform(rng, &[12, 3], -1.0, 1.0);
    let b = uniform(rng, &[9, 3], -1.0, 1.0);
    Ok(vec![grad_check(
        |t, v| {
            let d = chamfer_on_tape(t, v[0], v[1], norm)?;
            t.mul_scalar(d, OUTPUT_SCALE)
        },
        &[a, b],
        opts,
    )?])
}

fn partial_matching_case(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let input = PointCloud::from_tensor(&uniform(rng, &[8, 3], -1.0, 1.0))?;
    let pred = uniform(rng, &[14, 3], -1.0, 1.0);
    Ok(vec![grad_check(
        |t, v| {
            let d = partial_matching_on_tape(t, &input, v[0])?;
            t.mul_scalar(d, OUTPUT_SCALE)
        },
        &[pred],
        opts,
    )?])
}

/// Overwrites the zero-initialized offset heads so generated points are
/// distinct and neighbor sets are stable under small perturbations.
fn randomize_offsets(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.contains(".offset.") {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn upsample_layer(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let (n, c, cs, ns) = (8, 4, 3, 6);
    let mut store = ParamStore::new();
    let layer = UpsampleLayer::new(&mut store, "up", GeneratorKind::UpTrans, c, cs, 2, rng)?;
    randomize_offsets(&mut store, rng);
    let inputs = [
        uniform(rng, &[n, 3], -1.0, 1.0),
        uniform(rng, &[n, c], -1.0, 1.0),
        uniform(rng, &[n, cs], -1.0, 1.0),
        uniform(rng, &[ns, 3], -1.0, 1.0),
        uniform(rng, &[ns, cs], -1.0, 1.0),
    ];
    let run = |t: &mut Tape<f64>, store: &ParamStore<f64>, v: &[Var]| {
        let state = StageVars {
            positions: v[0],
            features: v[1],
            seed_features: v[2],
        };
        let seeds = SeedVars {
            coords: v[3],
            features: v[4],
        };
        let out = layer.forward(t, store, &state, &seeds, 4, 3, AttentionMode::Softmax)?;
        let a = project(t, out.positions, 14)?;
        let b = project(t, out.features, 15)?;
        let c = project(t, out.seed_features, 16)?;
        let ab = t.add(a, b)?;
        t.add(ab, c)
    };
    let wrt_inputs = grad_check(|t, v| run(t, &store, v), &inputs, opts)?;
    let wrt_params = grad_check_params(
        &store,
        |t, s| {
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            run(t, s, &v)
        },
        opts,
    )?;
    Ok(vec![wrt_inputs, wrt_params])
}

/// The whole model on the tiny config, scalarized by the training loss
/// against a random ground truth.
fn full_forward(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let mut model = SeedFormer::<f64>::new(ModelConfig::tiny())?;
    randomize_offsets(&mut model.store, rng);
    let n = model.config.input_points;
    let partial = PointCloud::from_tensor(&uniform(rng, &[n, 3], -1.0, 1.0))?;
    let gt = PointCloud::from_tensor(&uniform(rng, &[64, 3], -1.0, 1.0))?;
    let opts = GradCheckOptions {
        max_coords: Some(opts.max_coords.unwrap_or(8)),
        ..opts.clone()
    };
    let report = grad_check_params(
        &model.store,
        |t, store| {
            let vars = model.forward_with(t, store, &partial)?;
            let stages: Vec<Var> = vars.stages.iter().map(|s| s.positions).collect();
            let loss = training_loss_on_tape(t, vars.seeds.coords, &stages, &partial, &gt)?;
            t.mul_scalar(loss.total, OUTPUT_SCALE)
        },
        &opts,
    )?;
    Ok(vec![report])
}

/// Runs one named case. Each case draws its fixture from its own seed so
/// cases are reproducible individually.
pub fn run_case(name: &str, opts: &GradCheckOptions) -> Result<CaseResult> {
    let pos = CASES
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| contract_err!("unknown gradient check {name:?}; known: {}", CASES.join(", ")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(pos as u64 * 7919));
    let rng = &mut rng;
    let uptrans = |mode, rng: &mut ChaCha8Rng| generator_case(GeneratorKind::UpTrans, mode, opts, rng);
    let reports = match name {
        "primitives" => primitives(opts, rng)?,
        "interpolation" => interpolation(opts, rng)?,
        "uptrans-softmax" => uptrans(AttentionMode::Softmax, rng)?,
        "uptrans-none" => uptrans(AttentionMode::None, rng)?,
        "uptrans-scaled" => uptrans(AttentionMode::Scaled(1.7), rng)?,
        "uptrans-log" => uptrans(AttentionMode::Log, rng)?,
        "folding" => generator_case(GeneratorKind::Folding, AttentionMode::Softmax, opts, rng)?,
        "deconv" => generator_case(GeneratorKind::Deconv, AttentionMode::Softmax, opts, rng)?,
        "graphconv" => generator_case(GeneratorKind::GraphConv, AttentionMode::Softmax, opts, rng)?,
        "pointwise" => generator_case(GeneratorKind::Pointwise, AttentionMode::Softmax, opts, rng)?,
        "chamfer-l1" => chamfer_case(ChamferNorm::L1, opts, rng)?,
        "chamfer-l2" => chamfer_case(ChamferNorm::L2, opts, rng)?,
        "partial-matching" => partial_matching_case(opts, rng)?,
        "upsample-layer" => upsample_layer(opts, rng)?,
        "full-forward" => full_forward(opts, rng)?,
        _ => unreachable!(),
    };
    Ok(CaseResult {
        name: name.to_string(),
        reports,
    })
}

/// Runs every case, or only `only` when given.
pub fn run_suite(only: Option<&str>, opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    match only {
        Some(name) => Ok(vec![run_case(name, opts)?]),
        None => CASES.iter().map(|c| run_case(c, opts)).collect(),
    }
}
