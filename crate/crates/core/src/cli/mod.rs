//! Command-line front end. [`run`] parses arguments, resolves the
//! configuration, runs one subcommand and returns the process exit code.

mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

pub use config::*;

use crate::certify::{write_certificate_csv, CertificateRow, FeatureConvexClassifier};
use crate::class::Class;
use crate::data::{self, Dataset, Split};
use crate::error::Error;
use crate::eval::{self, radius_grid};
use crate::featuremap::{FeatureKind, FeatureMap};
use crate::icnn::IcnnSpec;
use crate::model_io;
use crate::norm::Norm;
use crate::separability::{self, points_from_tensors};
use crate::train::{self, balance_threshold};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "convexcert", version, about = "Train, certify and audit feature-convex classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel work (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $CONVEXCERT_OUT_DIR, then ./convexcert-out).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a classifier, balance its threshold and save it.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Where to write the model (default: <out-dir>/model.ccm).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write per-sample certificates to certificates.csv.
    Certify {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Certified accuracy against radius at the model threshold.
    Curve {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        radii: RadiiArgs,
    },
    /// Certified accuracy over a grid of thresholds and radii.
    Surface {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        radii: RadiiArgs,
        /// Explicit threshold shifts, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        taus: Option<Vec<f32>>,
        /// Number of logit quantiles used when --taus is absent.
        #[arg(long)]
        quantiles: Option<usize>,
    },
    /// Test whether no class-1 point lies in the convex hull of class 2.
    Separability {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        fw_tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Use at most this many points from each class.
        #[arg(long)]
        max_points: Option<usize>,
        /// Test class 2 against the hull of class 1 instead.
        #[arg(long)]
        swap: bool,
    },
    /// Tabulate the separability probability bound for random points.
    Bound {
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long)]
        d_max: Option<usize>,
        /// Monte-Carlo trials per dimension (0 skips simulation).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run PGD inside a multiple of each certified radius.
    Attack {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Budget as a multiple of the certified radius.
        #[arg(long)]
        factor: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        attack_seed: Option<u64>,
    },
    /// Train and evaluate every digit pair.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Pairs such as 3-8,1-7 (default: all 45).
        #[arg(long, value_delimiter = ',')]
        pairs: Option<Vec<String>>,
    },
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Directory with train-*/t10k-* IDX files (gzipped or not).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Labelled CSV: label (1 or 2), then features.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Use the synthetic ring (defaults, or the ring section of --config).
    #[arg(long)]
    ring: bool,
    /// Digit mapped to class 1.
    #[arg(long)]
    class_a: Option<u8>,
    /// Digit mapped to class 2.
    #[arg(long)]
    class_b: Option<u8>,
    /// train, val, test or all.
    #[arg(long)]
    split: Option<Split>,
    /// Keep only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct NetArgs {
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Drop the input passthrough connections.
    #[arg(long)]
    no_passthrough: bool,
    /// concat or identity.
    #[arg(long)]
    feature: Option<String>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    jacobian_lambda: Option<f64>,
    #[arg(long)]
    jacobian_step: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Norms, comma separated: 1, 2, inf.
    #[arg(long, value_delimiter = ',')]
    norms: Option<Vec<Norm>>,
    /// Balance the threshold on the evaluated data.
    #[arg(long)]
    balance_on_data: bool,
}

#[derive(Args, Debug, Default)]
struct RadiiArgs {
    /// Explicit radius grid, comma separated, starting at 0.
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    #[arg(long)]
    radius_max: Option<f64>,
    #[arg(long)]
    radius_count: Option<usize>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn error_line(kind: &str, message: &str, code: i32) -> String {
    json!({ "error": kind, "message": message, "exit_code": code }).to_string()
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// code. Failures print one JSON object on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            eprintln!("{}", error_line("usage", e.kind().to_string().as_str(), EXIT_USAGE));
            return EXIT_USAGE;
        }
    };
    match execute(cli, &args) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", error_line("usage", &msg, EXIT_USAGE));
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string(), EXIT_RUNTIME));
            EXIT_RUNTIME
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    } else if let Some(d) = std::env::var_os(OUT_DIR_ENV) {
        cfg.out_dir = PathBuf::from(d);
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let (name, data, net, train, eval) = match &cli.command {
        Command::Train { data, net, train, model } => {
            if model.is_some() {
                cfg.model = model.clone();
            }
            ("train", Some(data), Some(net), Some(train), None)
        }
        Command::Certify { data, eval } => ("certify", Some(data), None, None, Some(eval)),
        Command::Curve { data, eval, radii } => {
            apply_radii(&mut cfg, radii);
            ("curve", Some(data), None, None, Some(eval))
        }
        Command::Surface { data, eval, radii, taus, quantiles } => {
            apply_radii(&mut cfg, radii);
            if taus.is_some() {
                cfg.surface.taus = taus.clone();
            }
            set(&mut cfg.surface.quantiles, *quantiles);
            ("surface", Some(data), None, None, Some(eval))
        }
        Command::Separability { data, tol, fw_tol, max_iters, max_points, swap } => {
            if *swap {
                cfg.separability.swap = true;
            }
            set(&mut cfg.separability.tol, *tol);
            set(&mut cfg.separability.fw_tol, *fw_tol);
            if max_iters.is_some() {
                cfg.separability.max_iters = *max_iters;
            }
            if max_points.is_some() {
                cfg.separability.max_points = *max_points;
            }
            ("separability", Some(data), None, None, None)
        }
        Command::Bound { m, n, d_max, trials, seed } => {
            set(&mut cfg.bound.m, *m);
            set(&mut cfg.bound.n, *n);
            set(&mut cfg.bound.d_max, *d_max);
            set(&mut cfg.bound.trials, *trials);
            set(&mut cfg.bound.seed, *seed);
            ("bound", None, None, None, None)
        }
        Command::Attack { data, eval, factor, steps, restarts, step_size, attack_seed } => {
            set(&mut cfg.attack.factor, *factor);
            set(&mut cfg.attack.steps, *steps);
            set(&mut cfg.attack.restarts, *restarts);
            if step_size.is_some() {
                cfg.attack.step_size = *step_size;
            }
            set(&mut cfg.attack.seed, *attack_seed);
            ("attack", Some(data), None, None, Some(eval))
        }
        Command::Sweep { data, net, train, pairs } => {
            if let Some(pairs) = pairs {
                cfg.sweep.pairs = pairs.iter().map(|p| parse_pair(p)).collect::<CliResult<_>>()?;
            }
            ("sweep", Some(data), Some(net), Some(train), None)
        }
    };
    cfg.command = name.to_string();
    if let Some(d) = data {
        if d.data_dir.is_some() {
            cfg.data.data_dir = d.data_dir.clone();
        }
        if d.csv.is_some() {
            cfg.data.csv = d.csv.clone();
        }
        if d.ring && cfg.data.ring.is_none() {
            cfg.data.ring = Some(data::RingSpec::default());
        }
        set(&mut cfg.data.class_a, d.class_a);
        set(&mut cfg.data.class_b, d.class_b);
        if d.split.is_some() {
            cfg.data.split = d.split;
        }
        if d.limit.is_some() {
            cfg.data.limit = d.limit;
        }
    }
    if let Some(n) = net {
        if let Some(h) = &n.hidden {
            cfg.network.hidden = h.clone();
        }
        if n.no_passthrough {
            cfg.network.passthrough = false;
        }
        if let Some(f) = &n.feature {
            cfg.network.feature = match f.as_str() {
                "concat" => FeatureKind::MeanOffsetAbsConcat,
                "identity" | "id" => FeatureKind::Identity,
                other => return Err(Failure::Usage(format!("unknown feature map `{other}` (use concat or identity)"))),
            };
        }
    }
    if let Some(t) = train {
        let c = &mut cfg.train;
        set(&mut c.epochs, t.epochs);
        set(&mut c.batch_size, t.batch_size);
        set(&mut c.learning_rate, t.lr);
        set(&mut c.momentum, t.momentum);
        set(&mut c.lr_decay_gamma, t.lr_decay);
        set(&mut c.jacobian_lambda, t.jacobian_lambda);
        set(&mut c.jacobian_fd_step, t.jacobian_step);
        set(&mut c.seed, t.seed);
        set(&mut c.val_fraction, t.val_fraction);
        if t.augment {
            c.augment = true;
        }
    }
    if let Some(e) = eval {
        if e.model.is_some() {
            cfg.model = e.model.clone();
        }
        if let Some(n) = &e.norms {
            cfg.norms = n.clone();
        }
        if e.balance_on_data {
            cfg.balance_on_data = true;
        }
    }
    cfg.validate().map_err(Failure::Usage)?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_radii(cfg: &mut RunConfig, r: &RadiiArgs) {
    if r.radii.is_some() {
        cfg.radii.values = r.radii.clone();
    }
    if r.radius_max.is_some() {
        cfg.radii.max = r.radius_max;
    }
    set(&mut cfg.radii.count, r.radius_count);
}

fn parse_pair(s: &str) -> CliResult<[u8; 2]> {
    let bad = || Failure::Usage(format!("bad class pair `{s}` (expected e.g. 3-8)"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let a: u8 = a.trim().parse().map_err(|_| bad())?;
    let b: u8 = b.trim().parse().map_err(|_| bad())?;
    if a == b {
        return Err(bad());
    }
    Ok([a, b])
}

fn execute(cli: Cli, argv: &[OsString]) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::Runtime(Error::Config(format!("cannot build worker pool: {e}"))))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_json(&cfg.out_dir.join("config.json"), &cfg)?;

    let started = SystemTime::now();
    let clock = Instant::now();
    pool.install(|| match cfg.command.as_str() {
        "train" => cmd_train(&cfg),
        "certify" => cmd_certify(&cfg),
        "curve" => cmd_curve(&cfg),
        "surface" => cmd_surface(&cfg),
        "separability" => cmd_separability(&cfg),
        "bound" => cmd_bound(&cfg),
        "attack" => cmd_attack(&cfg),
        "sweep" => cmd_sweep(&cfg),
        other => Err(Failure::Usage(format!("unknown command `{other}`"))),
    })?;

    let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let meta = json!({
        "command": cfg.command,
        "argv": argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": unix(started),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
    });
    write_json(&cfg.out_dir.join("metadata.json"), &meta)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn load_dataset(cfg: &RunConfig, default_split: Split) -> CliResult<Dataset> {
    let split = cfg.split_or(default_split);
    let d = &cfg.data;
    let ds = if let Some(dir) = &d.data_dir {
        let raw = data::load_idx_dir(dir, split)?;
        data::select_pair(&raw, d.class_a, d.class_b, split)?
    } else if let Some(path) = &d.csv {
        Dataset::read_csv(path, split)?
    } else if let Some(ring) = &d.ring {
        data::make_ring(ring)?
    } else {
        return Err(Failure::Usage("no data source".into()));
    };
    Ok(match d.limit {
        Some(n) => ds.head(n),
        None => ds,
    })
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> CliResult<FeatureConvexClassifier> {
    let path = cfg.model.as_ref().ok_or_else(|| Failure::Usage("--model is required".into()))?;
    let mut clf = model_io::load_classifier(path)?;
    if clf.input_dim() != ds.dim() {
        return Err(Error::Shape {
            context: "model input vs data",
            expected: vec![clf.input_dim()],
            actual: vec![ds.dim()],
        }
        .into());
    }
    if cfg.balance_on_data {
        let logits: Vec<f32> = ds.inputs.par_iter().map(|x| clf.logit(x)).collect::<crate::Result<_>>()?;
        clf.set_tau(balance_threshold(&logits, &ds.labels)?);
    }
    Ok(clf)
}

fn build_feature_map(kind: FeatureKind, ds: &Dataset) -> crate::Result<FeatureMap> {
    match kind {
        FeatureKind::Identity => Ok(FeatureMap::identity(ds.dim())),
        FeatureKind::MeanOffsetAbsConcat => FeatureMap::concat_from_data(&ds.inputs, 1),
    }
}

fn fit(cfg: &RunConfig, ds: &Dataset) -> crate::Result<(FeatureConvexClassifier, train::TrainHistory)> {
    let fm = build_feature_map(cfg.network.feature, ds)?;
    let spec = IcnnSpec::new(fm.output_dim(), cfg.network.hidden.clone(), cfg.network.passthrough, cfg.train.seed)?;
    train::train(&spec, fm, ds, &cfg.train)
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg, Split::Train)?;
    let (clf, history) = fit(cfg, &ds)?;
    let model = cfg.model.clone().unwrap_or_else(|| cfg.out_dir.join("model.ccm"));
    model_io::save_classifier(&clf, &model)?;
    history.write_csv(cfg.out_dir.join("history.csv"))?;
    let last = history.epochs.last();
    println!(
        "trained on {} samples; tau = {}; final val balanced accuracy = {}; model = {}",
        ds.len(),
        clf.tau(),
        last.map_or(f64::NAN, |e| e.val_balanced_acc),
        model.display()
    );
    Ok(())
}

fn cmd_certify(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg, Split::Test)?;
    let clf = load_model(cfg, &ds)?;
    let certs = clf.certify_batch(&ds.inputs, &cfg.norms)?;
    let rows: Vec<CertificateRow<'_>> = certs
        .iter()
        .zip(&ds.labels)
        .enumerate()
        .map(|(index, (certificate, &true_class))| CertificateRow {
            index,
            true_class,
            certificate,
        })
        .collect();
    let path = cfg.out_dir.join("certificates.csv");
    write_certificate_csv(create(&path)?, &rows)?;
    let ones = certs.iter().filter(|c| c.predicted == Class::Sensitive).count();
    println!("certified {} samples ({} predicted class 1) -> {}", certs.len(), ones, path.display());
    Ok(())
}

fn grid_for(cfg: &RunConfig, radii: &[f64]) -> Vec<f64> {
    if let Some(v) = &cfg.radii.values {
        return v.clone();
    }
    let max = cfg.radii.max.unwrap_or_else(|| {
        radii.iter().copied().filter(|r| r.is_finite()).fold(0.0, f64::max)
    });
    radius_grid(if max > 0.0 { max } else { 1.0 }, cfg.radii.count)
}

fn cmd_curve(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg, Split::Test)?;
    let clf = load_model(cfg, &ds)?;
    let (a1, a2) = eval::clean_accuracies(&clf, &ds)?;
    println!("tau = {}; alpha1 = {a1}; alpha2 = {a2}", clf.tau());
    for &p in &cfg.norms {
        let radii = eval::sensitive_radii(&clf, &ds, p)?;
        let grid = grid_for(cfg, &radii);
        let curve = eval::certified_accuracy_curve(&clf, &ds, p, &grid)?;
        let path = cfg.out_dir.join(format!("curve_{}.csv", p.label()));
        eval::write_curve_csv(create(&path)?, &curve)?;
        println!("l{p} curve -> {}", path.display());
    }
    Ok(())
}

fn cmd_surface(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg, Split::Test)?;
    let clf = load_model(cfg, &ds)?;
    let taus = match &cfg.surface.taus {
        Some(t) => {
            let mut t = t.clone();
            t.sort_by(f32::total_cmp);
            t
        }
        None => {
            let logits: Vec<f32> = ds.inputs.par_iter().map(|x| clf.logit(x)).collect::<crate::Result<_>>()?;
            eval::tau_grid_from_quantiles(&logits, cfg.surface.quantiles)?
        }
    };
    for &p in &cfg.norms {
        let radii = eval::sensitive_radii(&clf, &ds, p)?;
        let grid = grid_for(cfg, &radii);
        let surface = eval::robustness_surface(&clf, &ds, p, &taus, &grid)?;
        let path = cfg.out_dir.join(format!("surface_{}.csv", p.label()));
        eval::write_surface_csv(create(&path)?, &surface)?;
        println!("l{p} surface ({} thresholds) -> {}", taus.len(), path.display());
    }
    Ok(())
}

fn cmd_separability(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg, Split::Train)?;
    ds.require_both_classes()?;
    let cap = cfg.separability.max_points.unwrap_or(usize::MAX);
    let take = |c: Class| {
        let xs: Vec<_> = ds.inputs_of(c).into_iter().take(cap).cloned().collect();
        points_from_tensors(&xs)
    };
    let sc = &cfg.separability;
    let (x1, x2) = if sc.swap {
        (take(Class::Other), take(Class::Sensitive))
    } else {
        (take(Class::Sensitive), take(Class::Other))
    };
    let max_iters = sc.max_iters.unwrap_or_else(|| separability::default_max_iters(x2.len()));
    let report = separability::is_convexly_separable_with(&x1, &x2, sc.tol, sc.fw_tol, max_iters)?;
    let path = cfg.out_dir.join("separability.csv");
    report.write_csv(create(&path)?)?;
    let summary = json!({
        "M": x1.len(),
        "N": x2.len(),
        "d": ds.dim(),
        "separable": report.separable,
        "min_error": report.min_error,
        "witness": report.witness,
        "slab_coordinate": separability::slab_check(&x1, &x2),
        "tol": sc.tol,
    });
    write_json(&cfg.out_dir.join("separability_summary.json"), &summary)?;
    println!(
        "separable = {}; min error = {}; {} class-1 vs {} class-2 points -> {}",
        report.separable,
        report.min_error,
        x1.len(),
        x2.len(),
        path.display()
    );
    Ok(())
}

fn cmd_bound(cfg: &RunConfig) -> CliResult<()> {
    let b = &cfg.bound;
    let path = cfg.out_dir.join("bound.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["M", "N", "d", "bound"];
    if b.trials > 0 {
        header.extend(["frequency", "trials"]);
    }
    w.write_record(&header).map_err(Error::from)?;
    println!("{}", header.join("\t"));
    let mut summaries = Vec::new();
    for d in 1..=b.d_max {
        let bound = separability::separability_bound(b.m, b.n, d)?;
        let mut row = vec![b.m.to_string(), b.n.to_string(), d.to_string(), bound.to_string()];
        if b.trials > 0 {
            let s = separability::mc_separability(b.m, b.n, d, b.trials, b.seed)?;
            row.extend([s.frequency.to_string(), s.trials.to_string()]);
            summaries.push(s);
        }
        println!("{}", row.join("\t"));
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    if b.trials > 0 {
        write_json(&cfg.out_dir.join("bound_summary.json"), &summaries)?;
    }
    Ok(())
}

fn cmd_attack(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg, Split::Test)?;
    let clf = load_model(cfg, &ds)?;
    let ac = &cfg.attack;
    let targets: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.labels[i] == Class::Sensitive)
        .collect();
    let rows = targets
        .par_iter()
        .map(|&i| {
            let x = &ds.inputs[i];
            let cert = clf.certify(x, &cfg.norms)?;
            if cert.predicted != Class::Sensitive {
                return Ok(Vec::new());
            }
            let mut out = Vec::new();
            for nc in &cert.per_norm {
                let budget = ac.factor * nc.radius;
                if !budget.is_finite() || budget <= 0.0 {
                    continue;
                }
                let res = eval::pgd_attack(&clf, x, nc.norm, budget, &ac.for_sample(i))?;
                out.push((i, nc.norm, nc.radius, budget, res));
            }
            Ok(out)
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let path = cfg.out_dir.join("attack.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["index", "norm", "radius", "budget", "success", "delta_norm", "steps"])
        .map_err(Error::from)?;
    let (mut attacked, mut successes) = (0usize, 0usize);
    for (i, p, r, budget, res) in rows.into_iter().flatten() {
        attacked += 1;
        successes += res.success as usize;
        w.write_record([
            i.to_string(),
            p.to_string(),
            r.to_string(),
            budget.to_string(),
            u8::from(res.success).to_string(),
            res.delta_norm.to_string(),
            res.steps_used.to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("attacked {attacked} (sample, norm) pairs at {}x radius; successes = {successes} -> {}", ac.factor, path.display());
    if successes > 0 && ac.factor < 1.0 {
        return Err(Error::Consistency(format!(
            "{successes} attacks succeeded inside the certified radius"
        ))
        .into());
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn cmd_sweep(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.data.data_dir.as_ref().ok_or_else(|| Failure::Usage("`sweep` needs --data-dir".into()))?;
    let raw_train = data::load_idx_dir(dir, Split::Train)?;
    let raw_test = data::load_idx_dir(dir, Split::Test)?;
    let path = cfg.out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["class_a".to_string(), "class_b".into(), "tau".into(), "alpha1".into(), "alpha2".into()];
    header.extend(cfg.norms.iter().map(|p| format!("median_radius_{}", p.label())));
    w.write_record(&header).map_err(Error::from)?;
    for &[a, b] in &cfg.sweep.pairs {
        let mut train_ds = data::select_pair(&raw_train, a, b, Split::Train)?;
        let mut test_ds = data::select_pair(&raw_test, a, b, Split::Test)?;
        if let Some(n) = cfg.data.limit {
            train_ds = train_ds.head(n);
            test_ds = test_ds.head(n);
        }
        let (clf, _) = fit(cfg, &train_ds)?;
        let (a1, a2) = eval::clean_accuracies(&clf, &test_ds)?;
        let mut row = vec![a.to_string(), b.to_string(), clf.tau().to_string(), a1.to_string(), a2.to_string()];
        for &p in &cfg.norms {
            row.push(median(eval::sensitive_radii(&clf, &test_ds, p)?).to_string());
        }
        println!("{}", row.join("\t"));
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("sweep -> {}", path.display());
    Ok(())
}
