use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use mpce::io::{self, MatrixFormat};
use mpce::pce::Regression;
use mpce::pipeline::{self, derive_seed, InputTransform, PointDensity};
use mpce::{metrics, DataMatrix, ExperimentConfig, Method, ReducerModel, ReducerParams, TrainedMpce};

#[derive(Parser)]
#[command(
    name = "mpce",
    version,
    about = "Manifold PCE surrogates: random fields, dimension reduction, polynomial chaos and PDE benchmarks",
    after_help = "Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.\nLogging: MPCE_LOG=error|warn|info|debug (default warn)."
)]
struct Cli {
    /// Seed for every random stage; overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores); 1 makes stochastic reducers byte-reproducible
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Output directory (default: current directory; `experiment run` uses <config stem>_out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Format of written matrices
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

impl From<Format> for MatrixFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => MatrixFormat::Csv,
            Format::Bin => MatrixFormat::Bin,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Random input fields
    #[command(subcommand)]
    Fields(FieldsCommand),
    /// Run the benchmark forward model on input fields
    Solve(SolveArgs),
    /// Fit a dimension reducer and write the embedding
    Reduce(ReduceArgs),
    /// Train or apply an m-PCE surrogate
    #[command(subcommand)]
    Surrogate(SurrogateCommand),
    /// Error metrics
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// End-to-end experiments
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Uncertainty propagation through a trained surrogate
    #[command(subcommand)]
    Uq(UqCommand),
}

#[derive(Subcommand)]
enum FieldsCommand {
    /// Sample input fields of a benchmark -> fields.<ext>
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Experiment config (benchmark and field settings)
    #[arg(long)]
    config: PathBuf,
    /// Number of fields (default: the config's training size)
    #[arg(long)]
    count: Option<usize>,
    /// Heat lengthscale pair LX,LY
    #[arg(long, value_parser = parse_pair)]
    lengthscales: Option<(f64, f64)>,
}

#[derive(Args)]
struct SolveArgs {
    /// Experiment config (benchmark and solver settings)
    #[arg(long)]
    config: PathBuf,
    /// Input fields, one per row (.csv or .mpce)
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct ReduceArgs {
    /// Data matrix, one sample per row
    #[arg(long)]
    input: PathBuf,
    /// Reducer parameters as JSON (same fields as the config's "reducer")
    #[arg(long)]
    params: Option<PathBuf>,
    /// Reduction method (pca, kpca, grp, srp, ica, nmf, isomap, dmaps, lle, le, tsne, ae, wae)
    #[arg(long)]
    method: Option<Method>,
    /// Target dimension
    #[arg(long)]
    d: Option<usize>,
}

#[derive(Subcommand)]
enum SurrogateCommand {
    /// Fit reducer + PCE on (X, Y) -> model.json
    Train(TrainArgs),
    /// Predict with a trained model -> predictions.<ext>
    Predict(PredictArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Input fields, one per row
    #[arg(long)]
    x: PathBuf,
    /// Outputs, one per row
    #[arg(long)]
    y: PathBuf,
    /// Take reducer, PCE and input transform from this experiment config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reduction method
    #[arg(long)]
    method: Option<Method>,
    /// Target dimension
    #[arg(long)]
    d: Option<usize>,
    /// Maximum total polynomial degree
    #[arg(long)]
    s_max: Option<usize>,
    /// Coefficient solver
    #[arg(long, value_enum)]
    regression: Option<RegressionArg>,
    /// Penalty weight for ridge or lasso
    #[arg(long)]
    lambda: Option<f64>,
    /// Map applied to X before reduction
    #[arg(long, value_enum)]
    input_transform: Option<TransformArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegressionArg {
    Ols,
    Ridge,
    Lasso,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformArg {
    Identity,
    Log,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained model (model.json)
    #[arg(long)]
    model: PathBuf,
    /// Input fields, one per row
    #[arg(long)]
    x: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Per-sample relative L2 and R2 -> metrics.csv, groups.csv
    Eval(EvalArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions, one sample per row
    #[arg(long)]
    pred: PathBuf,
    /// Reference solutions, one sample per row
    #[arg(long)]
    reference: PathBuf,
    /// Group label per row, one per line
    #[arg(long)]
    groups: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Generate, solve, reduce, fit and evaluate -> metrics.csv, groups.csv, summary.json, timings.json, model.json
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON, "schema": 1)
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum UqCommand {
    /// Pointwise mean, variance and 95% band -> moments.csv
    Moments(MomentsArgs),
    /// 50-bin output densities at points -> pdf.csv
    Pdf(PdfArgs),
}

#[derive(Args)]
struct UqShared {
    /// Trained model (model.json)
    #[arg(long)]
    model: PathBuf,
    /// Experiment config describing the input fields
    #[arg(long)]
    config: PathBuf,
    /// Monte Carlo samples
    #[arg(long, default_value_t = 10_000)]
    n_mc: usize,
    /// Heat lengthscale pair LX,LY
    #[arg(long, value_parser = parse_pair, default_value = "0.15,0.25")]
    lengthscales: (f64, f64),
    /// Also run the forward model on the same samples and write *_reference.csv
    #[arg(long)]
    reference: bool,
}

#[derive(Args)]
struct MomentsArgs {
    #[command(flatten)]
    shared: UqShared,
}

#[derive(Args)]
struct PdfArgs {
    #[command(flatten)]
    shared: UqShared,
    /// Spatial point X or X,Y (repeatable)
    #[arg(long = "point", required = true, allow_hyphen_values = true, value_parser = parse_point)]
    points: Vec<Vec<f64>>,
    /// Brusselator snapshot index (default: the last)
    #[arg(long)]
    snapshot: Option<usize>,
}

fn parse_numbers(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect()
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    match parse_numbers(s)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

fn parse_point(s: &str) -> std::result::Result<Vec<f64>, String> {
    let p = parse_numbers(s)?;
    if p.is_empty() || p.len() > 2 {
        return Err(format!("expected X or X,Y, got {s:?}"));
    }
    Ok(p)
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    mpce::Error::Invalid(msg.into()).into()
}

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: MatrixFormat,
}

impl Ctx {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn save(&self, stem: &str, m: &DataMatrix) -> Result<PathBuf> {
        let path = self.out_dir()?.join(format!("{stem}.{}", self.format.extension()));
        io::save_matrix(&path, m, self.format)?;
        Ok(path)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.out_dir()?.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn config(&self, path: &Path) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn load(path: &Path) -> Result<DataMatrix> {
    io::load_matrix(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MPCE_LOG", "warn")).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| match c.downcast_ref::<mpce::Error>() {
        Some(err) => err.is_validation(),
        None => false,
    });
    if validation {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global().context("configuring the thread pool")?;
    }
    let ctx = Ctx { seed: cli.seed, out: cli.out, format: cli.format.into() };
    match cli.command {
        Command::Fields(FieldsCommand::Generate(a)) => generate(&ctx, a),
        Command::Solve(a) => solve(&ctx, a),
        Command::Reduce(a) => reduce(&ctx, a),
        Command::Surrogate(SurrogateCommand::Train(a)) => train(&ctx, a),
        Command::Surrogate(SurrogateCommand::Predict(a)) => predict(&ctx, a),
        Command::Metrics(MetricsCommand::Eval(a)) => eval(&ctx, a),
        Command::Experiment(ExperimentCommand::Run(a)) => experiment(&ctx, a),
        Command::Uq(UqCommand::Moments(a)) => moments(&ctx, a),
        Command::Uq(UqCommand::Pdf(a)) => pdf(&ctx, a),
    }
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let cfg = ctx.config(&a.config)?;
    let n = a.count.unwrap_or_else(|| cfg.n_train());
    if n == 0 {
        return Err(invalid("--count must be positive"));
    }
    let source = pipeline::benchmark_source(&cfg, a.lengthscales)?;
    // same stream as an experiment's training set
    let x = source.sample(n, derive_seed(cfg.seed, 1))?;
    let path = ctx.save("fields", &x)?;
    println!("{} fields of size {} -> {}", x.nrows(), x.ncols(), path.display());
    Ok(())
}

fn solve(ctx: &Ctx, a: SolveArgs) -> Result<()> {
    let cfg = ctx.config(&a.config)?;
    let x = load(&a.input)?;
    let t0 = Instant::now();
    let y = pipeline::solve_rows(&cfg, &x)?;
    let path = ctx.save("solutions", &y)?;
    println!("{} solves in {:.2}s -> {}", y.nrows(), t0.elapsed().as_secs_f64(), path.display());
    Ok(())
}

fn reducer_params(params: Option<&Path>, method: Option<Method>, d: Option<usize>, seed: Option<u64>) -> Result<ReducerParams> {
    let mut p = match params {
        Some(path) => io::read_json::<ReducerParams>(path).with_context(|| format!("reducer params {}", path.display()))?,
        None => {
            let method = method.ok_or_else(|| invalid("--method is required without --params"))?;
            let d = d.ok_or_else(|| invalid("--d is required without --params"))?;
            ReducerParams::new(method, d)
        }
    };
    if let Some(m) = method {
        p.method = m;
    }
    if let Some(d) = d {
        p.d = d;
    }
    if let Some(s) = seed {
        p.seed = s;
    }
    Ok(p)
}

fn reduce(ctx: &Ctx, a: ReduceArgs) -> Result<()> {
    let params = reducer_params(a.params.as_deref(), a.method, a.d, ctx.seed)?;
    let x = load(&a.input)?;
    let t0 = Instant::now();
    let (model, z) = ReducerModel::fit(&x, &params)?;
    let secs = t0.elapsed().as_secs_f64();
    let path = ctx.save("embedding", &z)?;
    io::write_json(&ctx.out_dir()?.join("reducer.json"), &model)?;
    println!("{} {}x{} -> {}x{} in {secs:.2}s -> {}", params.method, x.nrows(), x.ncols(), z.nrows(), z.ncols(), path.display());
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let cfg = a.config.as_deref().map(|p| ctx.config(p)).transpose()?;
    let mut reducer = match &cfg {
        Some(c) => c.reducer.clone(),
        None => reducer_params(None, a.method, a.d, None)?,
    };
    if let Some(m) = a.method {
        reducer.method = m;
    }
    if let Some(d) = a.d {
        reducer.d = d;
    }
    if let Some(s) = ctx.seed {
        reducer.seed = s;
    }
    let mut pce = cfg.as_ref().map(|c| c.pce.clone()).unwrap_or_default();
    if let Some(s) = a.s_max {
        pce.s_max = s;
    }
    if let Some(r) = a.regression {
        pce.regression = match r {
            RegressionArg::Ols => Regression::Ols,
            RegressionArg::Ridge => Regression::Ridge,
            RegressionArg::Lasso => Regression::Lasso,
        };
    }
    if a.lambda.is_some() {
        pce.lambda = a.lambda;
    }
    let transform = match (a.input_transform, &cfg) {
        (Some(TransformArg::Identity), _) => InputTransform::Identity,
        (Some(TransformArg::Log), _) => InputTransform::Log,
        (None, Some(c)) => c.input_transform(),
        (None, None) => InputTransform::Identity,
    };
    let x = load(&a.x)?;
    let y = load(&a.y)?;
    let model = pipeline::mpce_train(&x, &y, transform, &reducer, &pce)?;
    let path = ctx.out_dir()?.join("model.json");
    model.save(&path)?;
    let t = &model.timings;
    println!(
        "{} d={} s_max={} terms={} (reduce {:.2}s, fit {:.2}s) -> {}",
        reducer.method,
        model.latent_dim(),
        pce.s_max,
        model.pce.mset.len(),
        t.reduce,
        t.fit,
        path.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainedMpce> {
    TrainedMpce::load(path).with_context(|| format!("model {}", path.display()))
}

fn predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let x = load(&a.x)?;
    let y = pipeline::mpce_predict(&model, &x)?;
    let path = ctx.save("predictions", &y)?;
    println!("{} predictions -> {}", y.nrows(), path.display());
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let pred = load(&a.pred)?;
    let reference = load(&a.reference)?;
    let groups = match &a.groups {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(text.lines().map(str::to_owned).collect::<Vec<_>>())
        }
        None => None,
    };
    let report = metrics::evaluate(&pred, &reference, groups.as_deref())?;
    ctx.write("metrics.csv", &report.to_samples_csv())?;
    ctx.write("groups.csv", &report.to_groups_csv())?;
    let all = report.overall();
    println!(
        "n={} rel_l2 mean={:.6e} std={:.6e} r2 mean={}",
        all.count,
        all.rel_l2_mean,
        all.rel_l2_std,
        all.r2_mean.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn experiment(ctx: &Ctx, a: RunArgs) -> Result<()> {
    let cfg = ctx.config(&a.config)?;
    let dir = ctx.out.clone().unwrap_or_else(|| pipeline::default_out_dir(&a.config));
    let result = pipeline::run_experiment(&cfg, Some(&dir))?;
    let ood = result.ood.as_ref().map(|o| format!(" ood={:.6e}", o.mean_rel_l2())).unwrap_or_default();
    println!(
        "{} {} d={} terms={}: train={:.6e} test={:.6e}{ood} in {:.2}s -> {}",
        cfg.benchmark,
        cfg.reducer.method,
        result.latent_dim,
        result.pce_terms,
        result.train_rel_l2_mean,
        result.test.mean_rel_l2(),
        result.timings.total(),
        dir.display()
    );
    Ok(())
}

fn rel_l2(a: &[f64], b: &[f64]) -> String {
    metrics::rel_l2(a, b).map(|v| format!("{v:.4e}")).unwrap_or_else(|_| "n/a".into())
}

fn moments(ctx: &Ctx, a: MomentsArgs) -> Result<()> {
    let s = &a.shared;
    let cfg = ctx.config(&s.config)?;
    let model = load_model(&s.model)?;
    let source = pipeline::benchmark_source(&cfg, Some(s.lengthscales))?;
    let seed = derive_seed(cfg.seed, 6);
    let m = pipeline::propagate_moments(&model, source.as_ref(), s.n_mc, seed)?;
    let path = ctx.write("moments.csv", &m.to_csv())?;
    print!("{} surrogate samples -> {}", m.n_mc, path.display());
    if s.reference {
        let x = source.sample(s.n_mc, seed)?;
        let r = pipeline::moments_of(&pipeline::solve_rows(&cfg, &x)?)?;
        ctx.write("moments_reference.csv", &r.to_csv())?;
        print!("; mean rel L2 {} variance rel L2 {}", rel_l2(&m.mean, &r.mean), rel_l2(&m.variance, &r.variance));
    }
    println!();
    Ok(())
}

fn pdf(ctx: &Ctx, a: PdfArgs) -> Result<()> {
    let s = &a.shared;
    let cfg = ctx.config(&s.config)?;
    let model = load_model(&s.model)?;
    let source = pipeline::benchmark_source(&cfg, Some(s.lengthscales))?;
    let (grid, snapshots) = pipeline::output_grid(&cfg);
    let snapshot = a.snapshot.unwrap_or(snapshots - 1);
    if snapshot >= snapshots {
        return Err(invalid(format!("snapshot {snapshot} out of range (0..{snapshots})")));
    }
    let offset = snapshot * grid.len();
    let seed = derive_seed(cfg.seed, 6);
    let densities = pipeline::pdf_at_points(&model, source.as_ref(), &grid, offset, &a.points, s.n_mc, seed)?;
    let path = ctx.write("pdf.csv", &PointDensity::to_csv(&densities))?;
    println!("{} points x {} samples -> {}", densities.len(), s.n_mc, path.display());
    if s.reference {
        let y = pipeline::solve_rows(&cfg, &source.sample(s.n_mc, seed)?)?;
        let reference: Vec<PointDensity> = densities
            .iter()
            .map(|d| {
                let col: Vec<f64> = y.column(d.index).iter().copied().collect();
                let (edges, density) = pipeline::histogram_on(&col, d.edges[0], d.edges[d.edges.len() - 1]);
                PointDensity { point: d.point.clone(), index: d.index, edges, density }
            })
            .collect();
        ctx.write("pdf_reference.csv", &PointDensity::to_csv(&reference))?;
        for (d, r) in densities.iter().zip(&reference) {
            let width = d.edges[1] - d.edges[0];
            let tv: f64 = 0.5 * d.density.iter().zip(&r.density).map(|(p, q)| (p - q).abs() * width).sum::<f64>();
            println!("point {:?}: total variation vs forward model {tv:.4}", d.point);
        }
    }
    Ok(())
}
