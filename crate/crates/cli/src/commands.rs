use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use seedformer::autodiff::{GradCheckOptions, Scalar};
use seedformer::data::{load_split, read_cloud, save_split, synthesize, write_cloud, write_xyz, Sample};
use seedformer::gradsuite::{run_suite, CASES};
use seedformer::metrics::{chamfer, default_fscore_threshold, fidelity, fscore, mmd, ChamferNorm};
use seedformer::pipeline::checkpoint::{load_checkpoint, read_checkpoint};
use seedformer::pipeline::{loss_csv_header, loss_csv_row, prepare_input, save_checkpoint, Precision};
use seedformer::{AttentionMode, Error, GeneratorKind, PointCloud, RunSettings, SeedFormer, Trainer};

use crate::{AblateArgs, CompleteArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};

/// Name of the resolved-settings file written beside every output.
pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failure(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_failure(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failure(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let train = synthesize(a.train, a.gt_points, a.partial_points, a.seed)?;
    let test = synthesize(a.test, a.gt_points, a.partial_points, a.seed.wrapping_add(1))?;
    save_split(&a.out, "train", &train)?;
    save_split(&a.out, "test", &test)?;
    let echo = format!(
        "train = {}\ntest = {}\ngt_points = {}\npartial_points = {}\nseed = {}\n",
        a.train, a.test, a.gt_points, a.partial_points, a.seed
    );
    write_text(&a.out.join(RESOLVED_CONFIG), &echo)?;
    println!("wrote {} train and {} test pairs to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

/// File settings, then flag overrides, validated.
fn resolve_settings(a: &TrainArgs, extra: &[(String, String)]) -> Result<RunSettings> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| io_failure(p, e))?,
        None => String::new(),
    };
    let mut settings = RunSettings::from_text(&text)?;
    let mut set = |k: &str, v: &str| -> Result<()> {
        if k == "preset" {
            settings.model = seedformer::ModelConfig::preset(v)?;
            return Ok(());
        }
        let r = if k == "train_seed" || seedformer::TrainConfig::keys().contains(&k) {
            settings.train.set(k, v)
        } else {
            settings.model.set(k, v)
        };
        r.map_err(CliError::from)
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        set(k.trim(), v.trim())?;
    }
    for (k, v) in extra {
        set(k, v)?;
    }
    if let Some(s) = a.steps {
        set("steps", &s.to_string())?;
    }
    if let Some(s) = a.seed {
        set("seed", &s.to_string())?;
        set("train_seed", &s.to_string())?;
    }
    settings.validate()?;
    Ok(settings)
}

pub fn train(a: &TrainArgs, extra: Option<&[(String, String)]>) -> Result<()> {
    let settings = resolve_settings(a, extra.unwrap_or(&[]))?;
    let samples = load_split(&a.data, &a.split)?;
    if samples.is_empty() {
        return Err(CliError::Failure(format!(
            "no samples in {}",
            a.data.join(&a.split).display()
        )));
    }
    let min = settings.model.sa1_points;
    if let Some(s) = samples.iter().find(|s| s.partial.len() < min.min(settings.model.input_points)) {
        return Err(CliError::Failure(format!("sample {} has too few partial points", s.id)));
    }
    if let Some(r) = &a.resume {
        let ckpt = read_checkpoint(r)?;
        if ckpt.config()? != settings.model {
            return Err(CliError::Failure(format!(
                "{} was trained with a different model config",
                r.display()
            )));
        }
    }
    match settings.model.precision {
        Precision::F32 => run_training::<f32>(a, &settings, &samples),
        Precision::F64 => run_training::<f64>(a, &settings, &samples),
    }
}

fn run_training<T: Scalar>(a: &TrainArgs, settings: &RunSettings, samples: &[Sample]) -> Result<()> {
    let out_dir = parent_dir(&a.out);
    let log_path = a.log.clone().unwrap_or_else(|| out_dir.join("loss.csv"));
    let model = SeedFormer::<T>::new(settings.model.clone())?;
    let mut trainer = Trainer::new(model, settings.train.clone())?;
    if let Some(r) = &a.resume {
        let (m, opt) = load_checkpoint::<T>(r)?;
        trainer.model = m;
        if let Some(opt) = opt {
            trainer.step = opt.step as usize;
            trainer.optimizer = opt;
        }
    }

    create_dir(&out_dir)?;
    create_dir(&parent_dir(&log_path))?;
    write_text(&out_dir.join(RESOLVED_CONFIG), &settings.to_text())?;
    let mut log = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    writeln!(log, "{}", loss_csv_header(settings.model.rates.len() + 1)).map_err(|e| io_failure(&log_path, e))?;

    let pairs: Vec<(PointCloud, PointCloud)> = samples.iter().map(|s| (s.partial.clone(), s.gt.clone())).collect();
    let every = (settings.train.steps / 10).max(1);
    let mut write_err = None;
    let result = trainer.fit(&pairs, |step, loss| {
        if let Err(e) = writeln!(log, "{}", loss_csv_row(step, loss)) {
            write_err.get_or_insert(e);
        }
        if step % every == 0 || step == 1 {
            eprintln!("step {step}: total {:.6}", loss.total);
        }
    });
    if let Some(e) = write_err {
        return Err(io_failure(&log_path, e));
    }
    result?;
    save_checkpoint(&a.out, &trainer.model, Some(&trainer.optimizer))?;
    println!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let kind: GeneratorKind = a.generator.parse()?;
    let mut mode: AttentionMode = a.attention.parse()?;
    if let Some(l) = a.lambda {
        if !matches!(mode, AttentionMode::Scaled(_)) {
            return Err(CliError::Usage("--lambda only applies to --attention scaled".into()));
        }
        mode = AttentionMode::Scaled(l);
        mode.validate()?;
    }
    // The attention ablation targets the seed generator; --generator swaps
    // the point generator inside every upsample layer.
    let extra = vec![
        ("generator".to_string(), kind.to_string()),
        ("seed_attention".to_string(), mode.to_string()),
    ];
    train(&a.train, Some(&extra))
}

fn provenance_table(origins: &[seedformer::generator::SeedOrigin]) -> String {
    let mut s = String::from("seed,patch,kernel\n");
    for o in origins {
        writeln!(s, "{},{},{}", o.seed, o.patch, o.kernel).unwrap();
    }
    s
}

pub fn complete(a: &CompleteArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.ckpt)?;
    let config = ckpt.config()?;
    let input = read_cloud(&a.input)?;
    if input.len() < config.sa1_points.min(config.input_points) {
        return Err(CliError::Failure(format!(
            "input has {} points, the model needs at least {}",
            input.len(),
            config.sa1_points
        )));
    }
    let (model, _) = load_checkpoint::<f64>(&a.ckpt)?;
    let prepared = prepare_input(&input, config.input_points, 0)?;
    let out = model.forward(&prepared)?;

    create_dir(&parent_dir(&a.output))?;
    write_cloud(&a.output, out.final_cloud())?;
    if let Some(p) = &a.export_seeds {
        create_dir(&parent_dir(p))?;
        write_cloud(p, &out.seeds.coords)?;
    }
    if let Some(dir) = &a.export_stages {
        create_dir(dir)?;
        write_xyz(dir.join("seeds.xyz"), &out.seeds.coords)?;
        write_xyz(dir.join("stage0.xyz"), &out.coarse.cloud)?;
        for (l, s) in out.stages.iter().enumerate() {
            write_xyz(dir.join(format!("stage{}.xyz", l + 1)), &s.cloud)?;
        }
        write_text(&dir.join("seed_provenance.csv"), &provenance_table(&out.provenance))?;
        write_text(&dir.join(RESOLVED_CONFIG), &config.to_text())?;
    }
    println!(
        "completed {} points -> {} points ({})",
        input.len(),
        out.final_cloud().len(),
        out.stage_sizes().iter().map(usize::to_string).collect::<Vec<_>>().join(" -> ")
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Metric {
    CdL1,
    CdL2,
    FScore,
    Fidelity,
    Mmd,
}

impl Metric {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "cd-l1" => Ok(Metric::CdL1),
            "cd-l2" => Ok(Metric::CdL2),
            "fscore" => Ok(Metric::FScore),
            "fidelity" => Ok(Metric::Fidelity),
            "mmd" => Ok(Metric::Mmd),
            other => Err(CliError::Usage(format!(
                "unknown metric {other:?}; use cd-l1, cd-l2, fscore, fidelity or mmd"
            ))),
        }
    }

    /// Column header. Distances are reported multiplied by 1000.
    fn header(self) -> &'static str {
        match self {
            Metric::CdL1 => "cd_l1_x1000",
            Metric::CdL2 => "cd_l2_x1000",
            Metric::FScore => "fscore",
            Metric::Fidelity => "fidelity_x1000",
            Metric::Mmd => "mmd_x1000",
        }
    }
}

fn load_library(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_failure(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "xyz" || e == "ply"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Failure(format!("no .xyz or .ply clouds in {}", dir.display())));
    }
    paths.iter().map(|p| read_cloud(p).map_err(CliError::from)).collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let metrics = a.metrics.iter().map(|m| Metric::parse(m)).collect::<Result<Vec<_>>>()?;
    let wants_mmd = metrics.contains(&Metric::Mmd);
    if wants_mmd != a.mmd_library.is_some() {
        return Err(CliError::Usage("the mmd metric and --mmd-library go together".into()));
    }
    if let Some(t) = a.fscore_threshold {
        if !(t > 0.0) {
            return Err(CliError::Usage("--fscore-threshold must be positive".into()));
        }
    }
    let samples = load_split(&a.data, &a.split)?;
    let library = a.mmd_library.as_deref().map(load_library).transpose()?;

    let predictions: Vec<PointCloud> = match (&a.ckpt, &a.predictions) {
        (Some(ckpt), _) => {
            let (model, _) = load_checkpoint::<f64>(ckpt)?;
            let n = model.config.input_points;
            samples
                .par_iter()
                .map(|s| {
                    let input = prepare_input(&s.partial, n, 0)?;
                    Ok(model.forward(&input)?.final_cloud().clone())
                })
                .collect::<std::result::Result<_, Error>>()?
        }
        (None, Some(dir)) => samples
            .iter()
            .map(|s| read_cloud(dir.join(format!("{}.xyz", s.id))))
            .collect::<std::result::Result<_, Error>>()?,
        (None, None) => unreachable!("clap requires one source"),
    };

    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .zip(&predictions)
        .map(|(s, pred)| {
            metrics
                .iter()
                .map(|m| {
                    Ok(match m {
                        Metric::CdL1 => 1000.0 * chamfer(pred, &s.gt, ChamferNorm::L1),
                        Metric::CdL2 => 1000.0 * chamfer(pred, &s.gt, ChamferNorm::L2),
                        Metric::FScore => {
                            let t = a.fscore_threshold.unwrap_or_else(|| default_fscore_threshold(&s.gt));
                            fscore(pred, &s.gt, t)?
                        }
                        Metric::Fidelity => 1000.0 * fidelity(&s.partial, pred),
                        Metric::Mmd => 1000.0 * mmd(pred, library.as_deref().unwrap_or_default())?.0,
                    })
                })
                .collect::<std::result::Result<Vec<f64>, Error>>()
        })
        .collect::<std::result::Result<_, Error>>()?;

    let mut out = String::from("id");
    for m in &metrics {
        write!(out, ",{}", m.header()).unwrap();
    }
    out.push('\n');
    for (s, row) in samples.iter().zip(&rows) {
        out.push_str(&s.id);
        for v in row {
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out.push_str("mean");
    for j in 0..metrics.len() {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len().max(1) as f64;
        write!(out, ",{mean:.6}").unwrap();
    }
    println!("{out}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.list {
        for c in CASES {
            println!("{c}");
        }
        return Ok(());
    }
    if let Some(op) = &a.op {
        if !CASES.contains(&op.as_str()) {
            return Err(CliError::Usage(format!("unknown op {op:?}; known: {}", CASES.join(", "))));
        }
    }
    if !(a.tol > 0.0 && a.eps > 0.0) {
        return Err(CliError::Usage("--tol and --eps must be positive".into()));
    }
    let opts = GradCheckOptions {
        eps: a.eps,
        tol: a.tol,
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let results = run_suite(a.op.as_deref(), &opts)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:18} coords {:5}  max rel err {:.3e}",
            r.name,
            r.checked(),
            r.max_rel_error()
        );
        for f in r.reports.iter().flat_map(|rep| {
            rep.flagged
                .iter()
                .take(5)
                .map(move |f| (rep.inputs[f.input].name.as_str(), f))
        }) {
            println!(
                "       {}[{}]: analytic {:.6e} numeric {:.6e}",
                f.0, f.1.coord, f.1.analytic, f.1.numeric
            );
        }
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Failure(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed at tol {}", results.len(), a.tol);
    Ok(())
}
