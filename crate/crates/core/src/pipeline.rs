//! End-to-end experiments: generate inputs, solve, reduce, fit the PCE,
//! evaluate, and push fresh samples through the surrogate for UQ.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::field_gen::{self, CovarianceSpec, GridSpec, KleBasis, SrmSpectrum};
use crate::io::{self, MatrixFormat};
use crate::metrics::{self, EvalReport};
use crate::pce::{self, PceParams, PceSurrogate};
use crate::reducers::{Method, ReducerModel, ReducerParams};
use crate::solvers::{self, BrusselatorParams, BrusselatorProblem, HeatProblem, PoissonProblem};
use crate::DataMatrix;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Poisson1d,
    Heat2d,
    Brusselator,
}

impl std::fmt::Display for Benchmark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Benchmark::Poisson1d => "poisson1d",
            Benchmark::Heat2d => "heat2d",
            Benchmark::Brusselator => "brusselator",
        })
    }
}

/// 1-D Poisson with a uniform-translated KLE forcing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoissonSetup {
    pub points: usize,
    pub variance: f64,
    pub lengthscale: f64,
    /// Target interval of the translated field (added to the mean forcing).
    pub uniform: (f64, f64),
    /// KLE modes; `None` keeps all of them.
    pub kle_rank: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for PoissonSetup {
    fn default() -> Self {
        PoissonSetup {
            points: 1024,
            variance: 20.0,
            lengthscale: 0.2,
            uniform: (-15.0, 15.0),
            kle_rank: None,
            n_train: 1000,
            n_test: 1000,
        }
    }
}

/// Steady diffusion with log-normal diffusivity over random lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatSetup {
    pub cells: usize,
    pub bounds: (f64, f64),
    /// Training lengthscale pairs (Latin hypercube).
    pub n_pairs: usize,
    pub samples_per_pair: usize,
    /// Rows of the shuffled pair ensemble used for training; the rest are the test set.
    pub n_train: usize,
    /// Out-of-distribution pairs on a `k x k` grid; 0 disables the OOD set.
    pub ood_grid: usize,
    pub ood_samples_per_pair: usize,
    pub kle_rank: Option<usize>,
}

impl Default for HeatSetup {
    fn default() -> Self {
        HeatSetup {
            cells: 32,
            bounds: (0.05, 1.0),
            n_pairs: 20,
            samples_per_pair: 50,
            n_train: 700,
            ood_grid: 5,
            ood_samples_per_pair: 10,
            kle_rank: None,
        }
    }
}

/// Brusselator with an SRM initial `v` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrusselatorSetup {
    pub spectrum: SrmSpectrum,
    pub solver: BrusselatorParams,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for BrusselatorSetup {
    fn default() -> Self {
        BrusselatorSetup {
            spectrum: SrmSpectrum::new(3e3, 25.0),
            solver: BrusselatorParams::default(),
            n_train: 800,
            n_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSetup {
    /// Write test-set predictions as `predictions_<set>.mpce`.
    pub save_predictions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub benchmark: Benchmark,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub poisson: PoissonSetup,
    #[serde(default)]
    pub heat: HeatSetup,
    #[serde(default)]
    pub brusselator: BrusselatorSetup,
    pub reducer: ReducerParams,
    #[serde(default)]
    pub pce: PceParams,
    #[serde(default)]
    pub output: OutputSetup,
    /// Map applied to input fields before reduction; `None` picks the benchmark default.
    #[serde(default)]
    pub input_transform: Option<InputTransform>,
    #[serde(default)]
    pub sweep: Option<SweepSetup>,
}

/// Refits on the same data over methods, dimensions and training-set sizes,
/// for error-vs-components, error-vs-time and error-vs-N curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSetup {
    /// Empty means the configured reducer only.
    pub methods: Vec<Method>,
    /// Empty means the configured `d`.
    pub d: Vec<usize>,
    /// Random subsets of the training set; empty means all of it.
    pub n_train: Vec<usize>,
    /// Subsets drawn per training size.
    pub repeats: usize,
}

impl Default for SweepSetup {
    fn default() -> Self {
        SweepSetup { methods: Vec::new(), d: Vec::new(), n_train: Vec::new(), repeats: 1 }
    }
}

impl ExperimentConfig {
    pub fn new(benchmark: Benchmark, reducer: ReducerParams, pce: PceParams) -> Self {
        ExperimentConfig {
            schema: SCHEMA_VERSION,
            name: None,
            benchmark,
            seed: 0,
            poisson: PoissonSetup::default(),
            heat: HeatSetup::default(),
            brusselator: BrusselatorSetup::default(),
            reducer,
            pce,
            output: OutputSetup::default(),
            input_transform: None,
            sweep: None,
        }
    }

    /// Heat inputs are log-normal diffusivities, reduced on the log scale.
    pub fn input_transform(&self) -> InputTransform {
        self.input_transform.unwrap_or(match self.benchmark {
            Benchmark::Heat2d => InputTransform::Log,
            _ => InputTransform::Identity,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported config schema {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        self.pce.validate()?;
        let (n_train, n_test) = match self.benchmark {
            Benchmark::Poisson1d => {
                let p = &self.poisson;
                if p.points < 3 || !(p.variance > 0.0) || !(p.lengthscale > 0.0) || !(p.uniform.1 > p.uniform.0) {
                    return Err(Error::invalid("poisson setup needs points >= 3, positive variance/lengthscale and a nonempty interval"));
                }
                (p.n_train, p.n_test)
            }
            Benchmark::Heat2d => {
                let h = &self.heat;
                if h.cells < 2 || h.n_pairs == 0 || h.samples_per_pair == 0 {
                    return Err(Error::invalid("heat setup needs cells >= 2 and at least one pair and sample"));
                }
                if h.ood_grid > 0 && h.ood_samples_per_pair == 0 {
                    return Err(Error::invalid("OOD grid needs at least one sample per pair"));
                }
                let total = h.n_pairs * h.samples_per_pair;
                (h.n_train, total.saturating_sub(h.n_train))
            }
            Benchmark::Brusselator => {
                let b = &self.brusselator;
                b.spectrum.validate()?;
                b.solver.validate()?;
                (b.n_train, b.n_test)
            }
        };
        if n_train < 1 || n_test < 1 {
            return Err(Error::invalid(format!("need N >= 1 and N* >= 1, got N={n_train}, N*={n_test}")));
        }
        if let Some(sw) = &self.sweep {
            if sw.repeats == 0 || sw.d.contains(&0) || sw.n_train.contains(&0) {
                return Err(Error::invalid("sweep needs repeats >= 1 and positive d and n_train values"));
            }
            if let Some(n) = sw.n_train.iter().find(|&&n| n > n_train) {
                return Err(Error::invalid(format!("sweep n_train {n} exceeds the {n_train} training samples")));
            }
        }
        Ok(())
    }

    /// Number of training samples.
    pub fn n_train(&self) -> usize {
        match self.benchmark {
            Benchmark::Poisson1d => self.poisson.n_train,
            Benchmark::Heat2d => self.heat.n_train,
            Benchmark::Brusselator => self.brusselator.n_train,
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub generate: f64,
    pub solve: f64,
    pub reduce: f64,
    pub fit: f64,
    pub predict: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.generate + self.solve + self.reduce + self.fit + self.predict
    }
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f();
    *slot += t0.elapsed().as_secs_f64();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputTransform {
    #[default]
    Identity,
    /// Natural log; every input value must be positive.
    Log,
}

impl InputTransform {
    pub fn apply(self, x: &DataMatrix) -> Result<std::borrow::Cow<'_, DataMatrix>> {
        match self {
            InputTransform::Identity => Ok(std::borrow::Cow::Borrowed(x)),
            InputTransform::Log => {
                if let Some(v) = x.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::invalid(format!("log input transform needs positive inputs, found {v}")));
                }
                Ok(std::borrow::Cow::Owned(x.map(f64::ln)))
            }
        }
    }
}

/// A fitted reducer followed by a PCE on its coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedMpce {
    #[serde(default)]
    pub input_transform: InputTransform,
    pub reducer: ReducerModel,
    pub pce: PceSurrogate,
    pub reducer_params: ReducerParams,
    pub pce_params: PceParams,
    pub n_train: usize,
    /// Not serialised, so that equal seeds give byte-identical model files.
    #[serde(skip)]
    pub timings: StageTimings,
}

impl TrainedMpce {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn latent_dim(&self) -> usize {
        self.pce.input_dim()
    }
}

pub fn mpce_train(
    x: &DataMatrix,
    y: &DataMatrix,
    input_transform: InputTransform,
    reducer: &ReducerParams,
    pce_params: &PceParams,
) -> Result<TrainedMpce> {
    if x.nrows() != y.nrows() {
        return Err(Error::dim(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
    }
    pce_params.validate()?;
    let x = input_transform.apply(x).stage("reduce")?;
    let x = x.as_ref();
    let mut timings = StageTimings::default();
    let (model, z) = timed(&mut timings.reduce, || {
        let (model, _) = ReducerModel::fit(x, reducer)?;
        // the PCE sees exactly what prediction will feed it
        let z = model.transform(x)?;
        Ok((model, z))
    })
    .stage("reduce")?;
    if model.output_dim() != reducer.d {
        log::warn!("{} produced {} coordinates instead of d={}", reducer.method, model.output_dim(), reducer.d);
    }
    let surrogate = timed(&mut timings.fit, || pce::pce_fit(&z, y, pce_params)).stage("fit")?;
    Ok(TrainedMpce {
        input_transform,
        reducer: model,
        pce: surrogate,
        reducer_params: reducer.clone(),
        pce_params: pce_params.clone(),
        n_train: x.nrows(),
        timings,
    })
}

pub fn mpce_predict(model: &TrainedMpce, x: &DataMatrix) -> Result<DataMatrix> {
    let x = model.input_transform.apply(x).stage("reduce")?;
    let z = model.reducer.transform(&x).stage("reduce")?;
    model.pce.predict(&z).stage("predict")
}

/// Inputs and model outputs for one experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x_train: DataMatrix,
    pub y_train: DataMatrix,
    pub x_test: DataMatrix,
    pub y_test: DataMatrix,
    pub test_groups: Option<Vec<String>>,
    pub ood: Option<(DataMatrix, DataMatrix, Vec<String>)>,
    /// Grid of the input fields.
    pub input_grid: GridSpec,
}

/// Independent seed for stream `k` of a run.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Something that can draw input field realizations.
pub trait FieldSource: Sync {
    fn grid(&self) -> &GridSpec;
    fn sample(&self, n: usize, seed: u64) -> Result<DataMatrix>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KleMarginal {
    Gaussian,
    /// Pointwise translation to `U[a, b]` around the mean.
    Uniform(f64, f64),
    /// `exp` of the Gaussian field.
    LogNormal,
}

#[derive(Debug, Clone)]
pub struct KleSource {
    pub basis: KleBasis,
    pub marginal: KleMarginal,
}

impl FieldSource for KleSource {
    fn grid(&self) -> &GridSpec {
        &self.basis.grid
    }

    fn sample(&self, n: usize, seed: u64) -> Result<DataMatrix> {
        let g = field_gen::kle_sample_gaussian(&self.basis, n, seed)?;
        Ok(match self.marginal {
            KleMarginal::Gaussian => g.values,
            KleMarginal::Uniform(a, b) => field_gen::translate_gaussian_to_uniform(&g, &self.basis, a, b)?.values,
            KleMarginal::LogNormal => field_gen::exp_field(&g).values,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SrmSource {
    pub spectrum: SrmSpectrum,
    pub grid: GridSpec,
}

impl SrmSource {
    /// `n x n` nodes spaced at the Nyquist interval `pi / kappa_upper`.
    pub fn nyquist(spectrum: SrmSpectrum, n: usize) -> Self {
        let span = (n as f64 - 1.0) * std::f64::consts::PI / spectrum.kappa_upper;
        SrmSource { grid: GridSpec::rect((0.0, span), (0.0, span), n, n), spectrum }
    }
}

impl FieldSource for SrmSource {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn sample(&self, n: usize, seed: u64) -> Result<DataMatrix> {
        Ok(field_gen::srm2d_sample(&self.spectrum, &self.grid, n, seed)?.values)
    }
}

pub fn poisson_source(setup: &PoissonSetup) -> Result<KleSource> {
    let grid = GridSpec::line(-1.0, 1.0, setup.points);
    let spec = CovarianceSpec::squared_exponential(setup.variance.sqrt(), setup.lengthscale);
    let rank = setup.kle_rank.unwrap_or(setup.points);
    let basis = field_gen::kle_from_spec(&grid, &spec, &field_gen::poisson_mean(&grid), rank)?;
    Ok(KleSource { basis, marginal: KleMarginal::Uniform(setup.uniform.0, setup.uniform.1) })
}

/// Log-normal diffusivity on `cells x cells` with lengthscales `(lx, ly)`.
pub fn heat_source(cells: usize, lx: f64, ly: f64, kle_rank: Option<usize>) -> Result<KleSource> {
    let grid = GridSpec::unit_square_cells(cells);
    let spec = CovarianceSpec::separable_exponential(lx, ly);
    let rank = kle_rank.unwrap_or(cells * cells);
    let basis = field_gen::kle_from_spec(&grid, &spec, &vec![0.0; cells * cells], rank)?;
    Ok(KleSource { basis, marginal: KleMarginal::LogNormal })
}

pub fn brusselator_source(setup: &BrusselatorSetup) -> SrmSource {
    SrmSource::nyquist(setup.spectrum.clone(), setup.solver.n)
}

/// Lengthscales used for heat UQ when none are given.
pub const HEAT_UQ_LENGTHSCALES: (f64, f64) = (0.15, 0.25);

/// Input field source for a benchmark; heat needs one lengthscale pair.
pub fn benchmark_source(config: &ExperimentConfig, lengthscales: Option<(f64, f64)>) -> Result<Box<dyn FieldSource>> {
    Ok(match config.benchmark {
        Benchmark::Poisson1d => Box::new(poisson_source(&config.poisson)?),
        Benchmark::Heat2d => {
            let (lx, ly) = lengthscales.unwrap_or(HEAT_UQ_LENGTHSCALES);
            Box::new(heat_source(config.heat.cells, lx, ly, config.heat.kle_rank)?)
        }
        Benchmark::Brusselator => Box::new(brusselator_source(&config.brusselator)),
    })
}

/// Run the benchmark's forward model on every row of `x`.
pub fn solve_rows(config: &ExperimentConfig, x: &DataMatrix) -> Result<DataMatrix> {
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let input: Vec<f64> = x.row(i).iter().copied().collect();
            match config.benchmark {
                Benchmark::Poisson1d => solvers::solve_poisson1d(&PoissonProblem { points: input.len(), forcing: input }),
                Benchmark::Heat2d => {
                    solvers::solve_heat2d(&HeatProblem { n: config.heat.cells, diffusivity: input }).map(|s| s.u)
                }
                Benchmark::Brusselator => solvers::solve_brusselator2d(&BrusselatorProblem {
                    params: config.brusselator.solver.clone(),
                    v0: input,
                }),
            }
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("sample {i}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    Ok(DataMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn stack(blocks: &[DataMatrix]) -> DataMatrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DataMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(b);
        r += b.nrows();
    }
    out
}

fn select_rows(m: &DataMatrix, idx: &[usize]) -> DataMatrix {
    DataMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

pub fn pair_label(lx: f64, ly: f64) -> String {
    format!("lx={lx:.4};ly={ly:.4}")
}

/// Fields for every lengthscale pair, stacked, with one label per row.
fn heat_pair_fields(setup: &HeatSetup, pairs: &[(f64, f64)], per_pair: usize, seed: u64) -> Result<(DataMatrix, Vec<String>)> {
    let blocks: Vec<DataMatrix> = pairs
        .par_iter()
        .enumerate()
        .map(|(p, &(lx, ly))| heat_source(setup.cells, lx, ly, setup.kle_rank)?.sample(per_pair, derive_seed(seed, p as u64)))
        .collect::<Result<_>>()?;
    let labels = pairs.iter().flat_map(|&(lx, ly)| std::iter::repeat_n(pair_label(lx, ly), per_pair)).collect();
    Ok((stack(&blocks), labels))
}

/// Generate inputs and solve the forward model for all sets of an experiment.
pub fn generate_dataset(config: &ExperimentConfig, timings: &mut StageTimings) -> Result<Dataset> {
    config.validate()?;
    let seed = config.seed;
    match config.benchmark {
        Benchmark::Poisson1d => {
            let p = &config.poisson;
            let (source, x_train, x_test) = timed(&mut timings.generate, || {
                let source = poisson_source(p)?;
                let x_train = source.sample(p.n_train, derive_seed(seed, 1))?;
                let x_test = source.sample(p.n_test, derive_seed(seed, 2))?;
                Ok((source, x_train, x_test))
            })?;
            let (y_train, y_test) = timed(&mut timings.solve, || Ok((solve_rows(config, &x_train)?, solve_rows(config, &x_test)?)))?;
            Ok(Dataset { x_train, y_train, x_test, y_test, test_groups: None, ood: None, input_grid: source.basis.grid })
        }
        Benchmark::Brusselator => {
            let b = &config.brusselator;
            let source = brusselator_source(b);
            let (x_train, x_test) = timed(&mut timings.generate, || {
                Ok((source.sample(b.n_train, derive_seed(seed, 1))?, source.sample(b.n_test, derive_seed(seed, 2))?))
            })?;
            let (y_train, y_test) = timed(&mut timings.solve, || Ok((solve_rows(config, &x_train)?, solve_rows(config, &x_test)?)))?;
            Ok(Dataset { x_train, y_train, x_test, y_test, test_groups: None, ood: None, input_grid: source.grid })
        }
        Benchmark::Heat2d => {
            let h = &config.heat;
            let (x_all, labels, ood) = timed(&mut timings.generate, || {
                let pairs = field_gen::lengthscale_design(h.n_pairs, h.bounds, derive_seed(seed, 3))?;
                let (x_all, labels) = heat_pair_fields(h, &pairs, h.samples_per_pair, derive_seed(seed, 1))?;
                let ood = if h.ood_grid > 0 {
                    let grid_pairs = field_gen::uniform_lengthscale_grid(h.ood_grid, h.bounds);
                    Some(heat_pair_fields(h, &grid_pairs, h.ood_samples_per_pair, derive_seed(seed, 2))?)
                } else {
                    None
                };
                Ok((x_all, labels, ood))
            })?;
            let (y_all, ood) = timed(&mut timings.solve, || {
                let y_all = solve_rows(config, &x_all)?;
                let ood = match ood {
                    Some((x, g)) => {
                        let y = solve_rows(config, &x)?;
                        Some((x, y, g))
                    }
                    None => None,
                };
                Ok((y_all, ood))
            })?;
            let mut order: Vec<usize> = (0..x_all.nrows()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)));
            let (train_idx, test_idx) = order.split_at(h.n_train.min(order.len()));
            Ok(Dataset {
                x_train: select_rows(&x_all, train_idx),
                y_train: select_rows(&y_all, train_idx),
                x_test: select_rows(&x_all, test_idx),
                y_test: select_rows(&y_all, test_idx),
                test_groups: Some(test_idx.iter().map(|&i| labels[i].clone()).collect()),
                ood,
                input_grid: GridSpec::unit_square_cells(h.cells),
            })
        }
    }
}

/// What `run_experiment` reports. Timings are kept out of the serialised
/// summary so that result files are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Reduced dimension actually produced.
    pub latent_dim: usize,
    pub pce_terms: usize,
    pub train_rel_l2_mean: f64,
    pub test: EvalReport,
    pub ood: Option<EvalReport>,
    #[serde(skip)]
    pub timings: StageTimings,
    #[serde(skip)]
    pub sweep: Vec<SweepPoint>,
}

impl ExperimentResult {
    /// The headline error: OOD when present, otherwise the test set.
    pub fn headline_rel_l2(&self) -> f64 {
        self.ood.as_ref().unwrap_or(&self.test).mean_rel_l2()
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("set,index,group,rel_l2,r2\n");
        let sets = std::iter::once(("test", &self.test)).chain(self.ood.as_ref().map(|r| ("ood", r)));
        for (name, report) in sets {
            for s in &report.samples {
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{}",
                    s.index,
                    s.group.as_deref().unwrap_or(""),
                    s.rel_l2,
                    s.r2.map(|v| v.to_string()).unwrap_or_default()
                );
            }
        }
        out
    }

    pub fn groups_csv(&self) -> String {
        let mut out = String::from("set,group,count,rel_l2_mean,rel_l2_std,r2_mean,r2_std\n");
        let sets = std::iter::once(("test", &self.test)).chain(self.ood.as_ref().map(|r| ("ood", r)));
        for (name, report) in sets {
            for line in report.to_groups_csv().lines().skip(1) {
                let _ = writeln!(out, "{name},{line}");
            }
        }
        out
    }

    /// Writes metrics.csv, groups.csv, summary.json and timings.json, plus
    /// sweep.csv and sweep_timings.csv when a sweep ran.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("groups.csv"), self.groups_csv())?;
        io::write_json(&dir.join("summary.json"), &Summary::from(self))?;
        io::write_json(&dir.join("timings.json"), &self.timings)?;
        if !self.sweep.is_empty() {
            std::fs::write(dir.join("sweep.csv"), SweepPoint::to_csv(&self.sweep))?;
            std::fs::write(dir.join("sweep_timings.csv"), SweepPoint::timings_csv(&self.sweep))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct GroupRow<'a> {
    set: &'a str,
    #[serde(flatten)]
    summary: &'a metrics::GroupSummary,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    latent_dim: usize,
    pce_terms: usize,
    train_rel_l2_mean: f64,
    test_rel_l2_mean: f64,
    ood_rel_l2_mean: Option<f64>,
    groups: Vec<GroupRow<'a>>,
}

impl<'a> From<&'a ExperimentResult> for Summary<'a> {
    fn from(r: &'a ExperimentResult) -> Self {
        let mut groups: Vec<GroupRow> = r.test.groups.iter().map(|g| GroupRow { set: "test", summary: g }).collect();
        if let Some(ood) = &r.ood {
            groups.extend(ood.groups.iter().map(|g| GroupRow { set: "ood", summary: g }));
        }
        Summary {
            config: &r.config,
            latent_dim: r.latent_dim,
            pce_terms: r.pce_terms,
            train_rel_l2_mean: r.train_rel_l2_mean,
            test_rel_l2_mean: r.test.mean_rel_l2(),
            ood_rel_l2_mean: r.ood.as_ref().map(|o| o.mean_rel_l2()),
            groups,
        }
    }
}

/// Train on a prepared dataset and evaluate every held-out set.
pub fn evaluate_dataset(config: &ExperimentConfig, data: &Dataset, timings: &mut StageTimings) -> Result<(TrainedMpce, ExperimentResult)> {
    let mut reducer = config.reducer.clone();
    if reducer.seed == 0 {
        reducer.seed = derive_seed(config.seed, 5);
    }
    let model = mpce_train(&data.x_train, &data.y_train, config.input_transform(), &reducer, &config.pce)?;
    timings.reduce += model.timings.reduce;
    timings.fit += model.timings.fit;
    let (train_pred, test_pred, ood_pred) = timed(&mut timings.predict, || {
        let ood = data.ood.as_ref().map(|(x, _, _)| mpce_predict(&model, x)).transpose()?;
        Ok((mpce_predict(&model, &data.x_train)?, mpce_predict(&model, &data.x_test)?, ood))
    })?;
    let train_report = metrics::evaluate(&train_pred, &data.y_train, None).stage("evaluate")?;
    let test = metrics::evaluate(&test_pred, &data.y_test, data.test_groups.as_deref()).stage("evaluate")?;
    let ood = match (&data.ood, &ood_pred) {
        (Some((_, y, g)), Some(p)) => Some(metrics::evaluate(p, y, Some(g)).stage("evaluate")?),
        _ => None,
    };
    let result = ExperimentResult {
        config: config.clone(),
        latent_dim: model.latent_dim(),
        pce_terms: model.pce.mset.len(),
        train_rel_l2_mean: train_report.mean_rel_l2(),
        test,
        ood,
        timings: *timings,
        sweep: Vec::new(),
    };
    Ok((model, result))
}

/// One refit of a sweep. A failed fit keeps its row with the error message.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub method: Method,
    pub d: usize,
    pub n_train: usize,
    pub repeat: usize,
    pub latent_dim: usize,
    pub test_rel_l2_mean: f64,
    pub test_rel_l2_std: f64,
    pub ood_rel_l2_mean: Option<f64>,
    pub error: Option<String>,
    pub timings: StageTimings,
}

impl SweepPoint {
    pub fn to_csv(points: &[SweepPoint]) -> String {
        let mut out = String::from("method,d,n_train,repeat,latent_dim,test_rel_l2_mean,test_rel_l2_std,ood_rel_l2_mean,error\n");
        for p in points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                p.method,
                p.d,
                p.n_train,
                p.repeat,
                p.latent_dim,
                p.test_rel_l2_mean,
                p.test_rel_l2_std,
                p.ood_rel_l2_mean.map(|v| v.to_string()).unwrap_or_default(),
                p.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            );
        }
        out
    }

    /// Wall-clock seconds per point, kept apart from the reproducible errors.
    pub fn timings_csv(points: &[SweepPoint]) -> String {
        let mut out = String::from("method,d,n_train,repeat,reduce_s,fit_s,predict_s,total_s\n");
        for p in points {
            let t = &p.timings;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.method,
                p.d,
                p.n_train,
                p.repeat,
                t.reduce,
                t.fit,
                t.predict,
                t.reduce + t.fit + t.predict
            );
        }
        out
    }
}

/// Refit over every (method, d, training size, repeat) of `sweep` on fixed data.
pub fn run_sweep(config: &ExperimentConfig, sweep: &SweepSetup, data: &Dataset) -> Vec<SweepPoint> {
    let methods = if sweep.methods.is_empty() { vec![config.reducer.method] } else { sweep.methods.clone() };
    let dims = if sweep.d.is_empty() { vec![config.reducer.d] } else { sweep.d.clone() };
    let total = data.x_train.nrows();
    let sizes = if sweep.n_train.is_empty() { vec![total] } else { sweep.n_train.clone() };
    let mut points = Vec::new();
    for &method in &methods {
        for &d in &dims {
            for &n in &sizes {
                for repeat in 0..sweep.repeats {
                    let mut rows: Vec<usize> = (0..total).collect();
                    if n < total {
                        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 100 + repeat as u64)));
                        rows.truncate(n);
                        rows.sort_unstable();
                    }
                    let subset = Dataset {
                        x_train: select_rows(&data.x_train, &rows),
                        y_train: select_rows(&data.y_train, &rows),
                        ..data.clone()
                    };
                    let mut cfg = config.clone();
                    cfg.reducer = ReducerParams { method, d, ..config.reducer.clone() };
                    cfg.reducer.seed = derive_seed(derive_seed(config.seed, 5), repeat as u64);
                    let mut timings = StageTimings::default();
                    let mut point = SweepPoint {
                        method,
                        d,
                        n_train: n,
                        repeat,
                        latent_dim: 0,
                        test_rel_l2_mean: f64::NAN,
                        test_rel_l2_std: f64::NAN,
                        ood_rel_l2_mean: None,
                        error: None,
                        timings: StageTimings::default(),
                    };
                    match evaluate_dataset(&cfg, &subset, &mut timings) {
                        Ok((_, r)) => {
                            point.latent_dim = r.latent_dim;
                            point.test_rel_l2_mean = r.test.overall().rel_l2_mean;
                            point.test_rel_l2_std = r.test.overall().rel_l2_std;
                            point.ood_rel_l2_mean = r.ood.as_ref().map(|o| o.mean_rel_l2());
                        }
                        Err(e) => {
                            log::warn!("sweep {method} d={d} n={n} repeat {repeat}: {e}");
                            point.error = Some(e.to_string());
                        }
                    }
                    point.timings = timings;
                    points.push(point);
                }
            }
        }
    }
    points
}

/// Run a full experiment and, when `out` is given, write its result files there.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    config.validate().stage("config")?;
    let mut timings = StageTimings::default();
    let data = generate_dataset(config, &mut timings).stage("generate")?;
    let (model, mut result) = evaluate_dataset(config, &data, &mut timings)?;
    result.timings = timings;
    if let Some(sweep) = &config.sweep {
        result.sweep = run_sweep(config, sweep, &data);
    }
    log::info!(
        "{} {}: d={} terms={} test rel L2 {:.3e}",
        config.benchmark,
        config.reducer.method,
        result.latent_dim,
        result.pce_terms,
        result.test.mean_rel_l2()
    );
    if let Some(dir) = out {
        (|| -> Result<()> {
            result.write(dir)?;
            model.save(&dir.join("model.json"))?;
            if config.output.save_predictions {
                io::save_matrix(&dir.join("predictions_test.mpce"), &mpce_predict(&model, &data.x_test)?, MatrixFormat::Bin)?;
                if let Some((x, _, _)) = &data.ood {
                    io::save_matrix(&dir.join("predictions_ood.mpce"), &mpce_predict(&model, x)?, MatrixFormat::Bin)?;
                }
            }
            Ok(())
        })()
        .stage("write")?;
    }
    Ok(result)
}

/// Pointwise statistics of the surrogate response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentFields {
    pub n_mc: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Empirical 2.5% and 97.5% percentiles.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl MomentFields {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,mean,variance,lower,upper\n");
        for i in 0..self.mean.len() {
            let _ = writeln!(out, "{i},{},{},{},{}", self.mean[i], self.variance[i], self.lower[i], self.upper[i]);
        }
        out
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn column_stats(y: &DataMatrix) -> MomentFields {
    let n = y.nrows() as f64;
    let cols: Vec<(f64, f64, f64, f64)> = (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let mut col: Vec<f64> = y.column(j).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            col.sort_by(f64::total_cmp);
            (mean, var, percentile_sorted(&col, 0.025), percentile_sorted(&col, 0.975))
        })
        .collect();
    MomentFields {
        n_mc: y.nrows(),
        mean: cols.iter().map(|c| c.0).collect(),
        variance: cols.iter().map(|c| c.1).collect(),
        lower: cols.iter().map(|c| c.2).collect(),
        upper: cols.iter().map(|c| c.3).collect(),
    }
}

/// Monte Carlo moments of the surrogate response to fresh input fields.
pub fn propagate_moments(model: &TrainedMpce, source: &dyn FieldSource, n_mc: usize, seed: u64) -> Result<MomentFields> {
    if n_mc < 100 {
        return Err(Error::invalid(format!("n_mc must be at least 100, got {n_mc}")));
    }
    let x = source.sample(n_mc, seed).stage("generate")?;
    Ok(column_stats(&mpce_predict(model, &x)?))
}

/// The same statistics computed from forward-model solves (reference MC).
pub fn moments_of(y: &DataMatrix) -> Result<MomentFields> {
    if y.nrows() < 2 {
        return Err(Error::invalid("need at least two samples for moments"));
    }
    Ok(column_stats(y))
}

pub const PDF_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDensity {
    pub point: Vec<f64>,
    /// Flat index of the nearest output grid point.
    pub index: usize,
    /// `PDF_BINS + 1` bin edges.
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

/// Normalised 50-bin histogram of `values`. A constant sample gets a unit-wide
/// range centred on the value.
pub fn histogram(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    histogram_on(values, lo, hi)
}

/// Normalised histogram on a fixed range; values outside it are dropped from
/// the counts but not from the normalisation.
pub fn histogram_on(values: &[f64], lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let width = (hi - lo) / PDF_BINS as f64;
    let edges: Vec<f64> = (0..=PDF_BINS).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0usize; PDF_BINS];
    for &v in values {
        if v >= lo && v <= hi {
            let k = (((v - lo) / width) as usize).min(PDF_BINS - 1);
            counts[k] += 1;
        }
    }
    let norm = values.len() as f64 * width;
    (edges, counts.iter().map(|&c| c as f64 / norm).collect())
}

impl PointDensity {
    pub fn to_csv(densities: &[PointDensity]) -> String {
        let mut out = String::from("point,x,y,bin_lo,bin_hi,density\n");
        for (p, d) in densities.iter().enumerate() {
            let y = d.point.get(1).map(|v| v.to_string()).unwrap_or_default();
            for k in 0..d.density.len() {
                let _ = writeln!(out, "{p},{},{y},{},{},{}", d.point[0], d.edges[k], d.edges[k + 1], d.density[k]);
            }
        }
        out
    }
}

/// Output grid of a benchmark and the number of stacked snapshots on it.
pub fn output_grid(config: &ExperimentConfig) -> (GridSpec, usize) {
    match config.benchmark {
        Benchmark::Poisson1d => (GridSpec::line(-1.0, 1.0, config.poisson.points), 1),
        Benchmark::Heat2d => (GridSpec::unit_square_cells(config.heat.cells), 1),
        Benchmark::Brusselator => {
            let s = &config.brusselator.solver;
            (GridSpec::unit_square_cells(s.n), s.snapshots.len())
        }
    }
}

/// Surrogate density of the output at each of `points`: the nearest point
/// of `grid`, shifted by `offset` columns (e.g. to pick a snapshot).
pub fn pdf_at_points(
    model: &TrainedMpce,
    source: &dyn FieldSource,
    grid: &GridSpec,
    offset: usize,
    points: &[Vec<f64>],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<PointDensity>> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be positive"));
    }
    let indices = points.iter().map(|p| grid.nearest_index(p).map(|i| i + offset)).collect::<Result<Vec<_>>>()?;
    if model.pce.output_dim() < offset + grid.len() {
        return Err(Error::dim(format!(
            "model predicts {} outputs, grid needs {}",
            model.pce.output_dim(),
            offset + grid.len()
        )));
    }
    let x = source.sample(n_mc, seed).stage("generate")?;
    let y = mpce_predict(model, &x)?;
    Ok(points
        .iter()
        .zip(indices)
        .map(|(p, index)| {
            let col: Vec<f64> = y.column(index).iter().copied().collect();
            let (edges, density) = histogram(&col);
            PointDensity { point: p.clone(), index, edges, density }
        })
        .collect())
}

/// Default output directory for a config file: `<stem>_out` next to it.
pub fn default_out_dir(config_path: &Path) -> PathBuf {
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
    config_path.with_file_name(format!("{stem}_out"))
}
