//! `kleinvae` command line.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use kleinvae::covering::CoveringMap;
use kleinvae::data::{gen_klein_circles, raster_rows, sample_filter_cloud, ImageSet, Raster};
use kleinvae::density::{kl_gaussian_analytic, kl_numeric_base, random_planar, GridSpec, WrappedDensity};
use kleinvae::tda::{
    bottleneck_l2, klein_signature, maxmin_landmarks, rips_ph_with, DistanceMatrix, PersistenceDiagram,
    RipsOptions, DEFAULT_MAX_SIMPLICES,
};
use kleinvae::vae::{reconstruct, train, Architecture, LatentSpec, Preset, VaeModel};
use kleinvae::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::io::{config_path_for, json_line, parse_diagrams, read_input, write_config, write_output};

#[derive(Parser)]
#[command(name = "kleinvae", version, about = "Covering-map VAEs and Rips persistence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Klein-bottle disk images as a KIMG file.
    GenCircles(GenCircles),
    /// Gabor-Klein 3x3 filters as a KIMG file.
    GenFilters(GenFilters),
    /// Train a VAE on a KIMG dataset.
    Train(TrainArgs),
    /// Decode the latent means of a dataset through a trained model.
    Reconstruct(ReconstructArgs),
    /// Rips persistence of the rows of a KIMG file, one JSON diagram per field.
    Ph(PhArgs),
    /// Bottleneck distances between two diagrams.
    Bottleneck(BottleneckArgs),
    /// Two-field Klein bottle signature of a pair of diagrams.
    KleinCheck(KleinCheckArgs),
    /// Numeric base KL against the analytic cover KL for random Gaussians.
    VerifyKl(VerifyKlArgs),
    /// Projection and preimage checks for every covering map.
    VerifyCovering(VerifyCoveringArgs),
}

#[derive(Args, Serialize)]
struct GenCircles {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    size: usize,
    #[arg(long, default_value_t = 0.3)]
    radius: f64,
    #[arg(long)]
    seed: u64,
    /// Output path; stdout when absent or `-`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GenFilters {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "demo")]
    preset: String,
    /// euclidean2, euclidean3, euclidean4, torus or klein.
    #[arg(long, default_value = "klein")]
    latent: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Every n-th batch; 0 disables.
    #[arg(long)]
    spot_check_every: Option<usize>,
}

#[derive(Args, Serialize)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PhArgs {
    /// KIMG input; stdin when absent or `-`.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    field: Vec<u32>,
    #[arg(long, default_value_t = 2)]
    maxdim: usize,
    /// Defaults to the enclosing radius.
    #[arg(long)]
    threshold: Option<f64>,
    /// Max-min landmarks to keep when the input is larger; 0 keeps all.
    #[arg(long, default_value_t = 300)]
    landmarks: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_SIMPLICES)]
    max_simplices: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write `field,dim,birth,death` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BottleneckArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    dims: Vec<usize>,
    /// Compare only diagrams over this field.
    #[arg(long)]
    field: Option<u32>,
}

#[derive(Args, Serialize)]
struct KleinCheckArgs {
    /// Diagrams over Z2 and Z3 as JSON lines; stdin when absent or `-`.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    gap: f64,
}

#[derive(Args, Serialize)]
struct VerifyKlArgs {
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    grid: usize,
    /// klein or torus.
    #[arg(long, default_value = "klein")]
    map: String,
    #[arg(long, default_value_t = 0.05)]
    smin: f64,
    #[arg(long, default_value_t = 0.5)]
    smax: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args, Serialize)]
struct VerifyCoveringArgs {
    #[arg(long, default_value_t = 10_000)]
    points: usize,
    #[arg(long)]
    seed: u64,
}

/// Distinct exit statuses per error class; clap uses 2 for usage errors.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Parse { .. } | Error::Json(_) => 4,
        Error::Capacity(_) => 5,
        Error::Domain(_) | Error::Shape(_) | Error::Config(_) => 6,
        Error::NonFinite(_) => 7,
        Error::Incomparable(_) => 8,
    }
}

/// A check ran to completion and found violations.
const EXIT_CHECK_FAILED: u8 = 9;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_threads() -> Result<()> {
    match std::env::var("KLEIN_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("KLEIN_THREADS={v} is not a thread count")))?;
            kleinvae::exec::limit_threads(n)
        }
        Err(_) => Ok(()),
    }
}

/// Writes the run record next to `out`, or to stderr when `out` is stdout.
fn record(command: &Command, out: Option<&Path>) -> Result<()> {
    match config_path_for(out) {
        Some(p) => write_config(&p, command),
        None => {
            eprintln!("{}", serde_json::to_string(&json!({ "config": command }))?);
            Ok(())
        }
    }
}

fn load_images(path: Option<&Path>) -> Result<ImageSet> {
    ImageSet::new(Raster::decode(&read_input(path)?)?)
}

fn raster_bytes(r: &Raster) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(r.encoded_len());
    r.write_to(&mut buf)?;
    Ok(buf)
}

fn run(command: &Command) -> Result<u8> {
    init_threads()?;
    match command {
        Command::GenCircles(a) => {
            let (images, _) = gen_klein_circles(a.n, a.size, a.radius, a.seed)?;
            write_output(a.out.as_deref(), &raster_bytes(images.raster())?)?;
            record(command, a.out.as_deref())?;
        }
        Command::GenFilters(a) => {
            let cloud = sample_filter_cloud(a.n, a.seed)?;
            write_output(a.out.as_deref(), &raster_bytes(&cloud.to_raster()?)?)?;
            record(command, a.out.as_deref())?;
        }
        Command::Train(a) => return train_cmd(command, a),
        Command::Reconstruct(a) => {
            let model = VaeModel::load(&a.model)?;
            let images = load_images(a.data.as_deref())?;
            let out = reconstruct(&model, &images)?;
            write_output(a.out.as_deref(), &raster_bytes(out.raster())?)?;
            record(command, a.out.as_deref())?;
        }
        Command::Ph(a) => ph_cmd(command, a)?,
        Command::Bottleneck(a) => {
            let (p, q) = (read_diagrams(&a.a)?, read_diagrams(&a.b)?);
            let mut results = Vec::new();
            for dp in &p {
                if a.field.is_some_and(|f| f != dp.field_char) {
                    continue;
                }
                let dq = q.iter().find(|d| d.field_char == dp.field_char).ok_or_else(|| {
                    Error::Incomparable(format!("no diagram over Z{} in {}", dp.field_char, a.b.display()))
                })?;
                let (l2, per_dim) = bottleneck_l2(dp, dq, &a.dims)?;
                results.push(json!({ "field": dp.field_char, "dims": a.dims, "per_dim": per_dim, "l2": l2 }));
            }
            if results.is_empty() {
                return Err(Error::Incomparable("no diagrams over a common field".into()));
            }
            let mut text = String::new();
            for r in &results {
                text.push_str(&json_line(r)?);
            }
            write_output(None, text.as_bytes())?;
        }
        Command::KleinCheck(a) => {
            let diagrams = parse_diagrams(&read_input(a.input.as_deref())?)?;
            let over = |f: u32| {
                diagrams
                    .iter()
                    .find(|d| d.field_char == f)
                    .ok_or_else(|| Error::Domain(format!("no diagram over Z{f} in the input")))
            };
            let (verdict, counts) = klein_signature(over(2)?, over(3)?, a.gap);
            write_output(
                None,
                json_line(&json!({ "verdict": verdict, "gap": a.gap, "counts": counts }))?.as_bytes(),
            )?;
        }
        Command::VerifyKl(a) => return verify_kl(a),
        Command::VerifyCovering(a) => return verify_covering(a),
    }
    Ok(0)
}

fn read_diagrams(path: &Path) -> Result<Vec<PersistenceDiagram>> {
    parse_diagrams(&read_input(Some(path))?)
}

fn train_cmd(command: &Command, a: &TrainArgs) -> Result<u8> {
    let preset: Preset = a.preset.parse()?;
    let latent: LatentSpec = a.latent.parse()?;
    let mut cfg = preset.train_config(a.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.kl_weight = a.kl_weight.unwrap_or(cfg.kl_weight);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.spot_check_every = a.spot_check_every.unwrap_or(cfg.spot_check_every);
    cfg.validate()?;

    let data = load_images(Some(&a.data))?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_config(&a.out_dir.join("config.json"), command)?;

    let arch = Architecture::new(latent, data.pixels_per_image(), preset.hidden());
    let mut model = VaeModel::new(arch, cfg.kl_weight, a.seed)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(a.out_dir.join("train_log.jsonl"))?);
    let started = Instant::now();
    let report = train(&mut model, &data, &cfg, Some(&mut log))?;
    std::io::Write::flush(&mut log)?;
    model.save(a.out_dir.join("model.kvae"))?;

    let last = report.log.last().copied();
    let spot_tol = 1e-3;
    let summary = json!({
        "epochs": report.log.len().saturating_sub(1),
        "final": last,
        "lr_reductions": report.lr_reductions(),
        "spot_checks": report.spot_checks.len(),
        "spot_violations": report.spot_checks.iter().filter(|s| !s.holds(spot_tol)).count(),
        "diverged": report.diverged,
        "seconds": started.elapsed().as_secs_f64(),
    });
    write_output(None, json_line(&summary)?.as_bytes())?;
    if let Some(why) = &report.diverged {
        eprintln!("error: training diverged: {why}; kept the last finite checkpoint");
        return Ok(exit_code(&Error::NonFinite(String::new())));
    }
    Ok(0)
}

fn ph_cmd(command: &Command, a: &PhArgs) -> Result<()> {
    let raster = Raster::decode(&read_input(a.input.as_deref())?)?;
    let mut d = DistanceMatrix::from_points(&raster_rows(&raster))?;
    if a.landmarks > 0 && d.len() > a.landmarks {
        let idx = maxmin_landmarks(&d, a.landmarks, 0)?;
        d = d.restrict(&idx);
        log::info!("kept {} max-min landmarks of {}", idx.len(), raster.count);
    }
    let opts = |field| RipsOptions {
        threshold: a.threshold,
        max_simplices: a.max_simplices,
        ..RipsOptions::new(a.maxdim, field)
    };
    // One independent job per field.
    let diagrams: Vec<Result<PersistenceDiagram>> = std::thread::scope(|s| {
        let jobs: Vec<_> = a
            .field
            .iter()
            .map(|&f| {
                let d = &d;
                s.spawn(move || rips_ph_with(d, opts(f)))
            })
            .collect();
        jobs.into_iter()
            .map(|j| j.join().expect("persistence job panicked"))
            .collect()
    });
    let diagrams = diagrams.into_iter().collect::<Result<Vec<_>>>()?;

    let mut text = String::new();
    for dg in &diagrams {
        text.push_str(&dg.to_json()?);
        text.push('\n');
    }
    write_output(a.out.as_deref(), text.as_bytes())?;
    if let Some(path) = &a.csv {
        let mut csv = String::from("field,dim,birth,death\n");
        for dg in &diagrams {
            for row in dg.to_csv().lines().skip(1) {
                csv.push_str(&format!("{},{row}\n", dg.field_char));
            }
        }
        std::fs::write(path, csv)?;
    }
    record(command, a.out.as_deref())
}

fn parse_map(name: &str) -> Result<CoveringMap> {
    match name {
        "klein" => Ok(CoveringMap::KleinComposed),
        "torus" => Ok(CoveringMap::UNIT_TORUS),
        _ => Err(Error::Config(format!("unknown map `{name}` (klein|torus)"))),
    }
}

#[derive(Serialize)]
struct KlRow {
    pair: usize,
    analytic: f64,
    numeric: f64,
    gap: f64,
}

fn verify_kl(a: &VerifyKlArgs) -> Result<u8> {
    let map = parse_map(&a.map)?;
    let grid = GridSpec::new(a.grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut text = String::new();
    let (mut violations, mut min_gap) = (0usize, f64::INFINITY);
    for pair in 0..a.pairs {
        let q = random_planar(&mut rng, a.smin, a.smax)?;
        let p = random_planar(&mut rng, a.smin, a.smax)?;
        let analytic = kl_gaussian_analytic(&q, &p)?;
        let numeric =
            kl_numeric_base(&WrappedDensity::new(q, map)?, &WrappedDensity::new(p, map)?, grid)?.value;
        let gap = analytic - numeric;
        if gap < -a.tol {
            violations += 1;
        }
        min_gap = min_gap.min(gap);
        text.push_str(&json_line(&KlRow {
            pair,
            analytic,
            numeric,
            gap,
        })?);
    }
    text.push_str(&json_line(
        &json!({ "pairs": a.pairs, "violations": violations, "min_gap": min_gap, "tol": a.tol }),
    )?);
    write_output(None, text.as_bytes())?;
    Ok(if violations == 0 { 0 } else { EXIT_CHECK_FAILED })
}

/// Lattice cell holding exactly `sheets_per_cell` preimages of each point.
fn lattice_cell(map: &CoveringMap) -> Vec<(f64, f64)> {
    match *map {
        CoveringMap::Identity(d) => vec![(f64::NEG_INFINITY, f64::INFINITY); d],
        CoveringMap::KleinComposed => vec![(0.0, 2.0), (0.0, 1.0)],
        _ => map.fundamental_domain(),
    }
}

fn verify_covering(a: &VerifyCoveringArgs) -> Result<u8> {
    let maps = [
        ("identity", CoveringMap::Identity(2)),
        ("circle", CoveringMap::CircleMod { period: 1.0 }),
        ("torus", CoveringMap::Torus { periods: (1.0, 0.5) }),
        ("klein", CoveringMap::KleinComposed),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut text = String::new();
    let mut failed = false;
    for (name, map) in maps {
        let (mut not_idempotent, mut outside, mut bad_count) = (0usize, 0usize, 0usize);
        let mut roundtrip = 0.0f64;
        let cell = lattice_cell(&map);
        for _ in 0..a.points {
            let p: Vec<f64> = (0..map.dim()).map(|_| rng.random_range(-2.0..3.0)).collect();
            let base = map.project(&p)?;
            if !map.contains(&base) {
                outside += 1;
                continue;
            }
            if map.project(&base)? != base {
                not_idempotent += 1;
            }
            let (mut nearest, mut in_cell) = (f64::INFINITY, 0usize);
            map.for_each_preimage(&base, 8, |q, _| {
                let dist = q.iter().zip(&p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                nearest = nearest.min(dist);
                if q.iter().zip(&cell).all(|(v, (lo, hi))| v >= lo && v < hi) {
                    in_cell += 1;
                }
            })?;
            roundtrip = roundtrip.max(nearest);
            if in_cell != map.sheets_per_cell() {
                bad_count += 1;
            }
        }
        let ok = not_idempotent == 0 && outside == 0 && bad_count == 0 && roundtrip <= 1e-12;
        failed |= !ok;
        text.push_str(&json_line(&json!({
            "map": name,
            "points": a.points,
            "outside_domain": outside,
            "not_idempotent": not_idempotent,
            "roundtrip_max_error": roundtrip,
            "wrong_preimage_count": bad_count,
            "ok": ok,
        }))?);
    }
    write_output(None, text.as_bytes())?;
    Ok(if failed { EXIT_CHECK_FAILED } else { 0 })
}
