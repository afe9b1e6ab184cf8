//! `galign`: train, extract, match and benchmark group-aligned descriptors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use group_align::autodiff::{GradCheckOptions, Primitive};
use group_align::datagen::{detect_harris, load_corpus, load_image, HarrisParams, Homography};
use group_align::eqnn::{equivariance_suite, Backbone};
use group_align::invmap::{
    extract_descriptors, read_descriptors, write_descriptors, Descriptor, DescriptorRecord, Method, Orientation,
    NO_DELTA,
};
use group_align::matcheval::{
    build_roto_benchmark, hestimation, mma, mutual_nn_match, reprojection_error, roto_angles, run_benchmark,
    BenchConfig, MethodSpec, Protocol, RansacConfig,
};
use group_align::orientation::DEFAULT_K_MAX;
use group_align::trainer::{pipeline_grad_check, train_loop, TrainConfig, TrainState};
use group_align::Error;

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

type CliResult<T = ()> = Result<T, Failure>;

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

/// 2 config/IO, 3 runtime, 5 dimension mismatch.
fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Image { .. } | Error::Format { .. } | Error::EmptyCorpus(_) => 2,
        Error::DimMismatch { .. } => 5,
        _ => 3,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        fail(code_of(&e), e.to_string())
    }
}

trait Context<T> {
    /// Attach a path to I/O and decode errors.
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> Context<T> for group_align::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| {
            let code = code_of(&e);
            fail(code, format!("{}: {e}", path.display()))
        })
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| fail(2, format!("{}: {e}", path.display())))
    }
}

#[derive(Parser)]
#[command(name = "galign", version, about = "Rotation-equivariant local features with group-aligned descriptors")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "REQ_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised training on a directory of PGM/PPM images.
    Train(TrainArgs),
    /// Detect or read keypoints and write a descriptor file.
    Extract(ExtractArgs),
    /// Mutual nearest-neighbour matching of two descriptor files.
    Match(MatchArgs),
    /// Rotation benchmark: every image turned by 0°, 10°, …, 350°.
    BenchRoto(BenchArgs),
    /// Quarter-turn equivariance of a randomly initialized backbone.
    CheckEquivariance(EquivArgs),
    /// Finite-difference check of the full training loss.
    CheckGrad(GradArgs),
    /// Print a model or config summary.
    Info(InfoArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides both the initialization and the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report JSON; defaults to `<out>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Continue from the checkpoint at `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Align,
    Avg,
    Max,
    None,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Align => Method::Align,
            MethodArg::Avg => Method::Avg,
            MethodArg::Max => Method::Max,
            MethodArg::None => Method::None,
        }
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// `harris` or a text file with one `x y` pair per line.
    #[arg(long, default_value = "harris")]
    keypoints: String,
    /// Keypoint budget for `harris`.
    #[arg(long, default_value_t = 256)]
    num_keypoints: usize,
    #[arg(long, value_enum, default_value = "align")]
    method: MethodArg,
    /// Multi-candidate orientations with this score ratio (align only).
    #[arg(long)]
    candidates: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Ground-truth homography from A to B: 9 reals, row-major.
    #[arg(long)]
    h_gt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
    thresholds: Vec<f64>,
    /// `WIDTHxHEIGHT` of image A for the corner error; defaults to the keypoint extent.
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON; defaults to `<out>.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Gt,
    Pred,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnglesArg {
    /// 0°, 10°, …, 350°.
    All,
    /// 0°, 90°, 180°, 270°.
    Quarter,
}

#[derive(Args)]
#[group(id = "source", required = true, args = ["model", "config"])]
struct BenchArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Randomly initialize a backbone from this config instead of loading one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, value_enum, default_value = "pred")]
    protocol: ProtocolArg,
    #[arg(long, value_enum, default_value = "align")]
    method: MethodArg,
    /// Align with the ground-truth shift instead of the estimated one.
    #[arg(long)]
    gt_shift: bool,
    #[arg(long)]
    candidates: Option<f64>,
    #[arg(long, value_enum, default_value = "all")]
    angles: AnglesArg,
    #[arg(long, default_value_t = 128)]
    keypoints: usize,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
    thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EquivArgs {
    /// Backbone keys are read from this config; the desk backbone otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    inputs: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Defaults to 1e-4 for |G| = 4 and 1e-3 otherwise.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Debug: scale the adjoint of this primitive; the check must then fail.
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => {
            if !p.is_file() {
                return Err(fail(2, format!("config file {} does not exist", p.display())));
            }
            TrainConfig::load(p).at(p)
        }
        None => Ok(TrainConfig {
            backbone: group_align::eqnn::BackboneConfig::desk(),
            ..TrainConfig::desk()
        }),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).at(path)?))
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn train(a: TrainArgs, threads: usize) -> CliResult {
    let mut cfg = load_config(Some(&a.config))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.backbone.seed = s;
    }
    cfg.threads = threads.max(1);
    let corpus = load_corpus(&a.corpus)?;
    let mut state = if a.resume {
        TrainState::resume(&cfg, &a.out).at(&a.out)?
    } else {
        TrainState::new(&cfg)?
    };
    let total = cfg.epochs * cfg.iters_per_epoch;
    let every = (total / 20).max(1);
    let report = train_loop(&corpus, &cfg, &mut state, Some(&a.out), |it, l| {
        if (it + 1) % every == 0 {
            eprintln!("iter {:>6}/{total}  ori {:.4}  desc {:.4}  total {:.4}", it + 1, l.ori, l.desc, l.total);
        }
    })?;
    // wall time stays out of the file so fixed-seed runs compare equal
    let doc = json!({
        "config": cfg
            .to_kv()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), json!(v)))
            .collect::<serde_json::Map<_, _>>(),
        "start_iteration": report.start_iteration,
        "iterations": report.iterations,
        "final": report.mean(report.iterations.len().saturating_sub(every)..report.iterations.len()),
        "checkpoint": a.out,
    });
    let rp = a.report.unwrap_or_else(|| with_ext(&a.out, ".json"));
    let mut w = create(&rp)?;
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| fail(2, e.to_string()))?;
    w.flush().at(&rp)?;
    println!(
        "trained {} iterations in {:.1}s -> {}",
        report.iterations.len(),
        report.wall_seconds,
        a.out.display()
    );
    Ok(())
}

fn read_keypoint_file(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| fail(2, format!("{}:{}: {e}", path.display(), n + 1)))?;
        match v[..] {
            [x, y] => out.push((x, y)),
            _ => return Err(fail(2, format!("{}:{}: expected `x y`", path.display(), n + 1))),
        }
    }
    Ok(out)
}

fn extract(a: ExtractArgs) -> CliResult {
    let model = Backbone::load(&a.model).at(&a.model)?;
    let img = load_image(&a.image).at(&a.image)?;
    let method = Method::from(a.method);
    let kps: Vec<(f64, f64)> = if a.keypoints == "harris" {
        detect_harris(&img, a.num_keypoints, &HarrisParams::default(), None)
            .into_iter()
            .map(|k| (k.x, k.y))
            .collect()
    } else {
        read_keypoint_file(Path::new(&a.keypoints))?
    };
    if kps.is_empty() {
        return Err(fail(4, "no keypoints to describe"));
    }
    let orientation = match a.candidates {
        Some(r) if method == Method::Align => Orientation::Candidates {
            ratio: r,
            k_max: DEFAULT_K_MAX,
        },
        Some(_) => return Err(fail(2, "--candidates only applies to --method align")),
        None => Orientation::Dominant,
    };
    let f = model.forward(&img).map_err(|e| fail(4, e.to_string()))?;
    let ext = extract_descriptors(&f, &kps, method, &orientation).map_err(|e| fail(4, e.to_string()))?;
    if ext.out_of_bounds > 0 || ext.zero_vectors > 0 {
        eprintln!(
            "skipped {} out-of-bounds and {} zero-feature keypoints",
            ext.out_of_bounds, ext.zero_vectors
        );
    }
    if ext.descriptors.is_empty() {
        return Err(fail(4, "every keypoint failed extraction"));
    }
    let dim = method.dim(model.config().channels(), model.config().order);
    let records: Vec<DescriptorRecord> = ext.descriptors.iter().map(|d| DescriptorRecord::new(d, &kps)).collect();
    let mut w = create(&a.out)?;
    write_descriptors(&mut w, dim, &records).at(&a.out)?;
    w.flush().at(&a.out)?;
    println!("descriptors {} dim {dim} keypoints {}", records.len(), kps.len());
    Ok(())
}

/// Descriptors plus a keypoint table indexed by id.
fn load_descriptors(path: &Path) -> CliResult<(usize, Vec<Descriptor>, Vec<(f64, f64)>)> {
    let mut r = BufReader::new(File::open(path).at(path)?);
    let (dim, records) = read_descriptors(&mut r).at(path)?;
    let n = records.iter().map(|r| r.keypoint as usize + 1).max().unwrap_or(0);
    let mut kps = vec![(f64::NAN, f64::NAN); n];
    let descs = records
        .into_iter()
        .map(|r| {
            kps[r.keypoint as usize] = (r.x as f64, r.y as f64);
            Descriptor {
                data: r.data,
                method: Method::None,
                delta: (r.delta != NO_DELTA).then_some(r.delta as usize),
                keypoint: r.keypoint,
            }
        })
        .collect();
    Ok((dim, descs, kps))
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || fail(2, format!("--image-size expects WIDTHxHEIGHT, got `{s}`"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn do_match(a: MatchArgs) -> CliResult {
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(fail(2, "thresholds must be positive"));
    }
    let (da, descs_a, kp_a) = load_descriptors(&a.a)?;
    let (db, descs_b, kp_b) = load_descriptors(&a.b)?;
    if da != db {
        return Err(Error::DimMismatch { a: da, b: db }.into());
    }
    let matches = mutual_nn_match(&descs_a, &descs_b)?;
    let h = match &a.h_gt {
        Some(p) => Some(Homography::parse_text(&std::fs::read_to_string(p).at(p)?).at(p)?),
        None => None,
    };
    let mut w = create(&a.out)?;
    let io = |e: std::io::Error| fail(2, format!("{}: {e}", a.out.display()));
    write!(w, "a,b,similarity").map_err(io)?;
    if h.is_some() {
        write!(w, ",error").map_err(io)?;
        for t in &a.thresholds {
            write!(w, ",correct@{t}").map_err(io)?;
        }
    }
    writeln!(w).map_err(io)?;
    for m in &matches {
        write!(w, "{},{},{:.6}", m.a, m.b, m.similarity).map_err(io)?;
        if let Some(h) = &h {
            let e = reprojection_error(m, &kp_a, &kp_b, h);
            write!(w, ",{e:.4}").map_err(io)?;
            for t in &a.thresholds {
                write!(w, ",{}", (e <= *t) as u8).map_err(io)?;
            }
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let mut summary = json!({
        "descriptors_a": descs_a.len(),
        "descriptors_b": descs_b.len(),
        "dim": da,
        "matches": matches.len(),
    });
    if let Some(h) = &h {
        let r = mma(&matches, &kp_a, &kp_b, h, &a.thresholds);
        let (wd, ht) = match &a.image_size {
            Some(s) => parse_size(s)?,
            None => {
                let ext = |f: fn(&(f64, f64)) -> f64| kp_a.iter().map(f).filter(|v| v.is_finite()).fold(0.0, f64::max);
                (ext(|p| p.0) as usize + 1, ext(|p| p.1) as usize + 1)
            }
        };
        let hest = hestimation(&matches, &kp_a, &kp_b, h, wd, ht, &RansacConfig::default());
        summary["thresholds"] = json!(a.thresholds);
        summary["mma"] = json!(r.mma);
        summary["correct"] = json!(r.correct);
        summary["hestimation"] = json!(hest);
    }
    let sp = a.summary.unwrap_or_else(|| with_ext(&a.out, ".json"));
    std::fs::write(&sp, serde_json::to_string_pretty(&summary).expect("json") + "\n").at(&sp)?;
    println!("{summary}");
    Ok(())
}

fn bench(a: BenchArgs, threads: usize) -> CliResult {
    let model = match (&a.model, &a.config) {
        (Some(p), _) => Backbone::load(p).at(p)?,
        (None, Some(c)) => Backbone::new(load_config(Some(c))?.backbone)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let images = load_corpus(&a.images).at(&a.images)?;
    let angles = match a.angles {
        AnglesArg::All => roto_angles(),
        AnglesArg::Quarter => vec![0.0, 90.0, 180.0, 270.0],
    };
    let bench = build_roto_benchmark(images, &angles)?;
    let method = Method::from(a.method);
    let spec = match (method, a.gt_shift, a.candidates) {
        (Method::Align, true, None) => MethodSpec::align_gt(),
        (Method::Align, false, Some(r)) => MethodSpec::align_candidates(r, DEFAULT_K_MAX),
        (Method::Align, true, Some(_)) => return Err(fail(2, "--gt-shift and --candidates are exclusive")),
        (_, false, None) => MethodSpec::new(method),
        _ => return Err(fail(2, "--gt-shift and --candidates only apply to --method align")),
    };
    let cfg = BenchConfig {
        protocol: match a.protocol {
            ProtocolArg::Gt => Protocol::Gt,
            ProtocolArg::Pred => Protocol::Pred,
        },
        keypoints: a.keypoints,
        thresholds: a.thresholds,
        ransac: RansacConfig {
            seed: a.seed,
            ..Default::default()
        },
        threads: threads.max(1),
        ..Default::default()
    };
    let report = run_benchmark(&model, &bench, &cfg, spec)?;
    std::fs::create_dir_all(&a.out).at(&a.out)?;
    let pairs = a.out.join("pairs.csv");
    let mut w = create(&pairs)?;
    report.write_pairs_csv(&mut w).at(&pairs)?;
    w.flush().at(&pairs)?;
    let curve = a.out.join("curve.csv");
    let mut w = create(&curve)?;
    report.write_curve_csv(&mut w).at(&curve)?;
    w.flush().at(&curve)?;
    let summary = a.out.join("summary.json");
    std::fs::write(&summary, report.summary_json() + "\n").at(&summary)?;
    let s = &report.summary;
    let mmas: Vec<String> = report
        .thresholds
        .iter()
        .zip(&s.mma)
        .map(|(t, m)| format!("MMA@{t}={m:.4}"))
        .collect();
    println!(
        "{} {} pairs={} {} pred={:.1} hest={:.3}",
        report.method,
        report.protocol,
        s.pairs,
        mmas.join(" "),
        s.mean_predicted,
        s.hest_rate
    );
    Ok(())
}

fn check_equivariance(a: EquivArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?.backbone;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let tol = a.tol.unwrap_or(if cfg.order == 4 { 1e-4 } else { 1e-3 });
    let model = Backbone::new(cfg)?;
    let r = equivariance_suite(&model, a.inputs, a.size, model.config().seed)?;
    for (q, e) in r.per_turn.iter().enumerate() {
        println!("|G|={} turn {:>3}°  max error {e:.3e}", r.order, 90 * (q + 1));
    }
    let ok = r.max_error <= tol;
    println!("{} max {:.3e} tol {tol:.0e}", if ok { "PASS" } else { "FAIL" }, r.max_error);
    if ok {
        Ok(())
    } else {
        Err(fail(6, "equivariance error above tolerance"))
    }
}

fn check_grad(a: GradArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let corrupt = match &a.corrupt {
        Some(name) => Some(name.parse::<Primitive>().map_err(|e| fail(2, e.to_string()))?),
        None => None,
    };
    let model = Backbone::new(cfg.backbone.clone())?;
    let opts = GradCheckOptions {
        tol: a.tol,
        corrupt,
        ..Default::default()
    };
    let r = pipeline_grad_check(&model, &cfg.loss, a.size, a.seed, &opts)?;
    for p in &r.params {
        println!(
            "{:<16} checked {:>3}  max rel err {:.3e}  (analytic {:.6e}, numeric {:.6e})",
            p.name, p.checked, p.max_rel_err, p.analytic, p.numeric
        );
    }
    println!("{} max {:.3e} tol {:.0e}", if r.passed { "PASS" } else { "FAIL" }, r.max_rel_err, r.tol);
    if r.passed {
        Ok(())
    } else {
        Err(fail(6, "gradient error above tolerance"))
    }
}

fn info(a: InfoArgs) -> CliResult {
    let cfg = match (&a.model, &a.config) {
        (Some(p), _) => Backbone::load(p).at(p)?.config().clone(),
        (None, c) => load_config(c.as_deref())?.backbone,
    };
    let model = Backbone::new(cfg.clone())?;
    println!("galign {}", env!("CARGO_PKG_VERSION"));
    print!("{}", cfg.to_kv());
    println!("channels={}", cfg.channels());
    println!("descriptor_dim={}", cfg.descriptor_dim());
    println!("parameters={}", model.num_params());
    println!("primitives={}", Primitive::ALL.iter().map(|p| p.name()).collect::<Vec<_>>().join(","));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let res = match cli.cmd {
        Command::Train(a) => train(a, threads),
        Command::Extract(a) => extract(a),
        Command::Match(a) => do_match(a),
        Command::BenchRoto(a) => bench(a, threads),
        Command::CheckEquivariance(a) => check_equivariance(a),
        Command::CheckGrad(a) => check_grad(a),
        Command::Info(a) => info(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("galign: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
