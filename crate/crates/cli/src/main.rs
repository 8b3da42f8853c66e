use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use ctscreen::classifier::{train_from_manifest, Preprocessing, TrainConfig, TrainedModel};
use ctscreen::evalharness::{evaluate_cases, write_eval, EvalConfig, DEFAULT_GRID, DEFAULT_RESAMPLES};
use ctscreen::lung_seg::segment_lungs;
use ctscreen::phantom::{generate_dataset, write_timeline, PhantomSpec};
use ctscreen::render::{plot_scores, read_report, render_case, write_report, OverlayConfig, ReportBody, ReportDocument};
use ctscreen::scoring::{analyze_case, assemble_timeline, AnalysisConfig, Timeline, DEFAULT_TAU, DEFAULT_THRESHOLD};
use ctscreen::volume_io::{load_manifest, read_ctvol, write_ctvol_file, write_manifest, StudyManifest};
use ctscreen::CtVolume;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_ANALYSIS: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "ctscreen", version, about = "Chest CT screening: segmentation, slice classification, burden scoring")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads for per-slice and per-study work.
    #[arg(long, global = true, env = "CTSCREEN_THREADS", value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "ctscreen-out")]
    out: PathBuf,
    /// More logging on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom studies and a manifest.
    Phantom(PhantomArgs),
    /// Segment the lungs of one volume.
    Segment {
        #[arg(long)]
        volume: PathBuf,
    },
    /// Train the slice classifier; --out is the model directory.
    Train(TrainArgs),
    /// Analyse one volume and write its report.
    Analyze {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// Also render overlays and projections into this directory.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Analyse every time point of each study and plot score courses.
    Track {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Case-level ROC over first time points.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// Thresholds for the operating-point table.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
    },
    /// Render images from a report written by analyze or track.
    Render {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Number of single-time-point studies.
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    /// Burden multipliers of a timeline study; generates one timeline instead of a dataset.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    course: Option<Vec<f64>>,
    /// Day offsets matching --course.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    days: Option<Vec<i64>>,
    /// Study id of a timeline.
    #[arg(long, default_value = "timeline")]
    study: String,
    /// Diffuse opacity fraction of a timeline at multiplier 1.
    #[arg(long, default_value_t = 0.1)]
    diffuse_fraction: f64,
    /// Focal lesions of a timeline.
    #[arg(long, default_value_t = 1)]
    focal: usize,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    spacing: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Train on at most this many slices per class.
    #[arg(long)]
    slices_per_class: Option<usize>,
    #[arg(long, default_value_t = 128)]
    input_size: usize,
}

#[derive(Args, Debug)]
struct ScoringArgs {
    /// Case threshold on the positive-slice ratio.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Map binarization level for the corona score.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
}

impl ScoringArgs {
    fn config(&self) -> AnalysisConfig {
        AnalysisConfig { threshold: self.threshold, tau: self.tau, ..Default::default() }
    }
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Classify<T> {
    fn io(self) -> Result<T, Failure>;
    fn analysis(self) -> Result<T, Failure>;
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn io(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_IO, error: e.into() })
    }
    fn analysis(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_ANALYSIS, error: e.into() })
    }
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_USAGE, error: e.into() })
    }
}

type Outcome = Result<(), Failure>;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).io()?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())).io()
}

fn load_model(dir: &Path) -> Result<TrainedModel, Failure> {
    TrainedModel::load(dir).with_context(|| format!("loading model from {}", dir.display())).io()
}

fn load_volume(path: &Path) -> Result<CtVolume, Failure> {
    read_ctvol(path).with_context(|| format!("reading {}", path.display())).io()
}

fn load_labeled_manifest(path: &Path) -> Result<StudyManifest, Failure> {
    let m = load_manifest(path).with_context(|| format!("reading {}", path.display())).io()?;
    m.validate().with_context(|| format!("validating {}", path.display())).io()?;
    Ok(m)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_phantom(cli: &Cli, a: &PhantomArgs) -> Outcome {
    let mut template = PhantomSpec::default();
    if let Some(d) = &a.dims {
        template.dims = [d[0], d[1], d[2]];
    }
    if let Some(s) = &a.spacing {
        template.spacing = [s[0], s[1], s[2]];
    }
    let manifest_path = cli.out.join("manifest.csv");
    match (&a.course, &a.days) {
        (Some(course), Some(days)) => {
            let spec = PhantomSpec { seed: cli.seed, n_focal: a.focal, diffuse_fraction: a.diffuse_fraction, ..template };
            spec.validate().usage()?;
            let rows = write_timeline(&a.study, &spec, course, days, &cli.out).map_err(|e| match e {
                ctscreen::phantom::PhantomError::InvalidSpec(_) => Failure { code: EXIT_USAGE, error: e.into() },
                _ => Failure { code: EXIT_IO, error: e.into() },
            })?;
            let manifest = StudyManifest { rows, base_dir: cli.out.clone() };
            write_manifest(&manifest, &manifest_path).io()?;
        }
        (None, None) => {
            if a.count == 0 || !(0.0..=1.0).contains(&a.positive_fraction) {
                return Err(anyhow!("--count must be ≥ 1 and --positive-fraction in [0, 1]")).usage();
            }
            template.validate().usage()?;
            generate_dataset(a.count, a.positive_fraction, &template, cli.seed, &cli.out).io()?;
        }
        _ => return Err(anyhow!("--course and --days go together")).usage(),
    }
    println!("{}", manifest_path.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct SegmentSummary {
    volume: String,
    lung_volume_cm3: f64,
    lung_slices: Vec<usize>,
    per_slice_area_mm2: Vec<f64>,
}

fn cmd_segment(cli: &Cli, volume: &Path) -> Outcome {
    let v = load_volume(volume)?;
    let lungs = segment_lungs(&v).analysis()?;
    let stem = file_stem(volume);
    write_ctvol_file(&lungs.mask.to_volume(v.spacing()).io()?, cli.out.join(format!("{stem}.lung.ctvol"))).io()?;
    let summary = SegmentSummary {
        volume: volume.display().to_string(),
        lung_volume_cm3: lungs.volume_cm3(),
        lung_slices: lungs.lung_slice_set.clone(),
        per_slice_area_mm2: lungs.per_slice_area_mm2.clone(),
    };
    write_json(&cli.out.join(format!("{stem}.segment.json")), &summary)?;
    println!("lung_cm3={} lung_slices={}", summary.lung_volume_cm3, summary.lung_slices.len());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let manifest = load_labeled_manifest(&a.manifest)?;
    let mut cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        val_fraction: a.val_fraction,
        seed: cli.seed,
        preprocessing: Preprocessing { input_size: a.input_size, ..Default::default() },
        slices_per_class: a.slices_per_class,
        ..Default::default()
    };
    cfg.aug.seed = cli.seed;
    let (model, history) = train_from_manifest(&manifest, &cfg).map_err(|e| {
        use ctscreen::classifier::ClassifierError as E;
        let code = match e {
            E::InvalidConfig(_) => EXIT_USAGE,
            E::Io(_) | E::Volume(_) | E::MissingSliceLabels(_) | E::EmptyManifest => EXIT_IO,
            _ => EXIT_ANALYSIS,
        };
        Failure { code, error: e.into() }
    })?;
    model.save(&cli.out).io()?;
    write_json(&cli.out.join("history.json"), &history)?;
    let best = &history.epochs[history.best_epoch];
    println!(
        "model={} best_epoch={} val_auc={} calibration={}",
        cli.out.display(),
        best.epoch,
        best.val_auc.map_or_else(|| "none".into(), |v| v.to_string()),
        model.activation_calibration
    );
    Ok(())
}

fn cmd_analyze(cli: &Cli, volume: &Path, model: &Path, scoring: &ScoringArgs, render: Option<&Path>) -> Outcome {
    let model = load_model(model)?;
    let v = load_volume(volume)?;
    let cfg = scoring.config();
    cfg.validate().usage()?;
    let case = analyze_case(&v, &model, &cfg).analysis()?;
    let stem = file_stem(volume);
    let doc = ReportDocument::case(case, volume.display().to_string());
    write_report(&doc, &cli.out.join(format!("{stem}.report.json"))).io()?;
    let ReportBody::Case(case) = &doc.body else { unreachable!() };
    if let Some(dir) = render {
        let lungs = segment_lungs(&v).analysis()?;
        render_case(&v, &lungs.mask, case, dir, &OverlayConfig::default()).io()?;
    }
    println!("decision={} ratio={} corona_cm3={}", case.decision.as_str(), case.positive_ratio, case.corona_score_cm3);
    Ok(())
}

fn write_plots(dir: &Path, timelines: &[Timeline]) -> Outcome {
    let (img, csv) = plot_scores(timelines).io()?;
    img.write_png(&dir.join("scores.png")).io()?;
    std::fs::write(dir.join("scores.csv"), csv).io()
}

fn cmd_track(cli: &Cli, manifest: &Path, model: &Path, scoring: &ScoringArgs) -> Outcome {
    let model = load_model(model)?;
    let manifest = load_labeled_manifest(manifest)?;
    let cfg = scoring.config();
    cfg.validate().usage()?;
    let mut timelines = Vec::new();
    for (study, mut rows) in manifest.studies() {
        rows.sort_by_key(|r| (r.day_offset, r.timepoint));
        let mut points = Vec::new();
        let mut sources = Vec::new();
        for row in &rows {
            let path = manifest.resolve(row);
            let v = load_volume(&path)?;
            let mut case = analyze_case(&v, &model, &cfg).context(format!("{study} t{}", row.timepoint)).analysis()?;
            case.study_id = row.study_id.clone();
            case.timepoint = row.timepoint;
            case.day_offset = row.day_offset;
            points.push(case);
            sources.push(path.display().to_string());
        }
        let timeline = assemble_timeline(points).analysis()?;
        let rel = timeline
            .relative_scores
            .ratios()
            .map_or_else(|| "absolute-only".into(), |r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        let corona: Vec<String> = timeline.corona_scores_cm3.iter().map(|v| v.to_string()).collect();
        println!("study={study} corona_cm3={} relative={rel}", corona.join(","));
        let doc = ReportDocument::timeline(timeline, sources);
        write_report(&doc, &cli.out.join(format!("{study}.timeline.json"))).io()?;
        let ReportBody::Timeline(t) = doc.body else { unreachable!() };
        timelines.push(t);
    }
    if timelines.is_empty() {
        return Err(anyhow!("manifest has no studies")).io();
    }
    write_plots(&cli.out, &timelines)
}

fn cmd_evaluate(cli: &Cli, manifest: &Path, model: &Path, scoring: &ScoringArgs, grid: Option<&[f64]>, resamples: usize) -> Outcome {
    let model = load_model(model)?;
    let manifest = load_labeled_manifest(manifest)?;
    let cfg = EvalConfig {
        analysis: scoring.config(),
        grid: grid.map_or_else(|| DEFAULT_GRID.to_vec(), |g| g.to_vec()),
        bootstrap_resamples: resamples,
        seed: cli.seed,
    };
    cfg.analysis.validate().usage()?;
    let report = evaluate_cases(&manifest, &model, &cfg).analysis()?;
    write_eval(&report, &cli.out).io()?;
    match &report.curve {
        Some(c) => {
            let ci = c.ci95.map_or_else(|| "none".into(), |(lo, hi)| format!("{lo},{hi}"));
            println!("auc={} ci95={ci} studies={} errors={}", c.auc, report.n_evaluated, report.n_errors);
        }
        None => println!("auc=none studies={} errors={}", report.n_evaluated, report.n_errors),
    }
    Ok(())
}

/// Volume paths in a report are taken as given, then relative to the
/// report's directory.
fn locate_source(source: &str, report: &Path) -> PathBuf {
    let p = PathBuf::from(source);
    if p.exists() {
        return p;
    }
    report.parent().map_or(p.clone(), |d| d.join(&p))
}

fn cmd_render(cli: &Cli, report: &Path) -> Outcome {
    let doc = read_report(report).with_context(|| format!("reading {}", report.display())).io()?;
    if let ReportBody::Timeline(t) = &doc.body {
        write_plots(&cli.out, std::slice::from_ref(t))?;
    }
    let multi = doc.cases().len() > 1;
    for (k, case) in doc.cases().iter().enumerate() {
        let source = doc.sources.get(k).ok_or_else(|| anyhow!("report lists no volume for time point {k}")).io()?;
        let v = load_volume(&locate_source(source, report))?;
        let lungs = segment_lungs(&v).analysis()?;
        let dir = if multi { cli.out.join(format!("t{k}")) } else { cli.out.clone() };
        render_case(&v, &lungs.mask, case, &dir, &OverlayConfig::default()).io()?;
    }
    println!("{}", cli.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display())).io()?;
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(cli, a),
        Command::Segment { volume } => cmd_segment(cli, volume),
        Command::Train(a) => cmd_train(cli, a),
        Command::Analyze { volume, model, scoring, render } => cmd_analyze(cli, volume, model, scoring, render.as_deref()),
        Command::Track { manifest, model, scoring } => cmd_track(cli, manifest, model, scoring),
        Command::Evaluate { manifest, model, scoring, grid, resamples } => {
            cmd_evaluate(cli, manifest, model, scoring, grid.as_deref(), *resamples)
        }
        Command::Render { report } => cmd_render(cli, report),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
