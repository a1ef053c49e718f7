//! `lscm`: simulate, estimate and test causal effects on spatio-temporal
//! data cubes.
//!
//! Exit codes: 0 on success, 1 on data or configuration errors, 2 on
//! numerical failures.

mod config;

use std::collections::hash_map::RandomState;
use std::hash::{BuildHasher, Hasher};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use lscm::datacube::{read_cube, transpose_axes, write_cube, write_results, Provenance, ResultBody, ResultDocument};
use lscm::experiments::{
    run_consistency_study, run_intervention_check, run_level_study, write_table, ConsistencyStudySpec, LevelStudySpec,
};
use lscm::gp_sim::{simulate_lscm, CovarianceModel, GridSampling, LscmSpec, StructuralForm, TreatmentKind};
use lscm::resampling::{run_test, Resamples, DEFAULT_RESAMPLES};
use lscm::{CubeSchema, DataCube, Error, EstimatorConfig, PermutationScheme, Result};

use config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "lscm", version, about = "Causal effects and permutation tests for spatio-temporal data cubes")]
struct Cli {
    /// TOML settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; a random seed is generated and reported when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output path.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset from the latent spatial confounder example model.
    Simulate(SimArgs),
    /// Estimate the average causal effect.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Permutation test of the null hypothesis of no causal effect.
    Test {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Empirical rejection rate of the permutation test on null data.
    LevelStudy {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        test: TestArgs,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Estimation error probability over a grid of (n, m) cells.
    ConsistencyStudy {
        /// Square grid side lengths (n = side^2).
        #[arg(long, value_delimiter = ',')]
        sides: Option<Vec<usize>>,
        #[arg(long = "m-values", value_delimiter = ',')]
        m_values: Option<Vec<usize>>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Error radius ("inf" disables the threshold).
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Monte Carlo check of interventional means against the analytic effect.
    InterventionCheck {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        #[arg(long)]
        draws: Option<usize>,
        /// Structural form: example or null.
        #[arg(long)]
        form: Option<String>,
    },
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    /// Grid side length (locations {1..side}^2).
    #[arg(long)]
    side: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    m: Option<usize>,
    /// Structural form: example or null.
    #[arg(long)]
    form: Option<String>,
    /// Treatment: continuous or binary.
    #[arg(long)]
    treatment: Option<String>,
    /// Threshold of the binary treatment.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Long-format CSV cube.
    #[arg(long, short)]
    input: Option<PathBuf>,
    #[arg(long)]
    delimiter: Option<char>,
    #[arg(long = "id-column")]
    id_column: Option<String>,
    #[arg(long = "s1-column")]
    s1_column: Option<String>,
    #[arg(long = "s2-column")]
    s2_column: Option<String>,
    #[arg(long = "t-column")]
    t_column: Option<String>,
    #[arg(long = "y-column")]
    y_column: Option<String>,
    #[arg(long = "x-columns", value_delimiter = ',')]
    x_columns: Option<Vec<String>>,
    #[arg(long = "w-columns", value_delimiter = ',')]
    w_columns: Option<Vec<String>>,
    /// Exchange the roles of time and the first spatial axis.
    #[arg(long)]
    transpose: bool,
}

#[derive(Args, Debug, Clone)]
struct EstimatorArgs {
    /// lscm-basis, lscm-binary, model1, model2, observed-confounder or pooled.
    #[arg(long)]
    estimator: Option<String>,
    /// Polynomial degree of the basis.
    #[arg(long)]
    degree: Option<usize>,
    /// Regress the response on the treatment this many steps earlier.
    #[arg(long)]
    lag: Option<usize>,
    /// Number of covariate quantile bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Covariate column used for stratification.
    #[arg(long)]
    covariate: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct TestArgs {
    /// time_full, time_block, spatial_block, stratified_by_quantile or fully_random.
    #[arg(long)]
    scheme: Option<String>,
    /// Number of resamples.
    #[arg(long = "B")]
    resamples: Option<usize>,
    #[arg(long = "block-length")]
    block_length: Option<usize>,
    /// Side of the spatial blocks in grid cells.
    #[arg(long = "block-cells")]
    block_cells: Option<usize>,
    /// Enumerate all time permutations instead of sampling.
    #[arg(long)]
    exhaustive: bool,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn sha256_hex<T: Serialize>(value: &T) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn fresh_seed() -> u64 {
    let mut h = RandomState::new().build_hasher();
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default(),
    );
    h.finish()
}

fn parse_form(name: &str) -> Result<StructuralForm> {
    match name {
        "example" => Ok(StructuralForm::Example),
        "null" => Ok(StructuralForm::Null),
        other => Err(Error::Config(format!("unknown structural form '{other}' (expected example or null)"))),
    }
}

struct Context {
    file: FileConfig,
    seed: Option<u64>,
    output: Option<PathBuf>,
}

impl Context {
    fn seed(&self) -> u64 {
        self.seed.or(self.file.seed).unwrap_or_else(|| {
            let seed = fresh_seed();
            eprintln!("using generated seed {seed}");
            seed
        })
    }

    fn output(&self, default: &str) -> PathBuf {
        self.output
            .clone()
            .or_else(|| self.file.output.clone())
            .unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Debug, Serialize)]
struct ResolvedData {
    input: PathBuf,
    schema: CubeSchema,
    transpose: bool,
}

fn resolve_data(args: &DataArgs, file: &FileConfig) -> Result<ResolvedData> {
    let defaults = CubeSchema::default();
    let input = args
        .input
        .clone()
        .or_else(|| file.input.clone())
        .ok_or_else(|| Error::Config("missing --input".into()))?;
    let schema = CubeSchema {
        id: pick(args.id_column.clone(), file.id_column.clone(), defaults.id),
        s1: pick(args.s1_column.clone(), file.s1_column.clone(), defaults.s1),
        s2: pick(args.s2_column.clone(), file.s2_column.clone(), defaults.s2),
        t: pick(args.t_column.clone(), file.t_column.clone(), defaults.t),
        response: pick(args.y_column.clone(), file.y_column.clone(), defaults.response),
        treatments: args.x_columns.clone().or_else(|| file.x_columns.clone()),
        covariates: args.w_columns.clone().or_else(|| file.w_columns.clone()),
        delimiter: pick(args.delimiter, file.delimiter, defaults.delimiter),
    };
    Ok(ResolvedData {
        input,
        schema,
        transpose: args.transpose || file.transpose.unwrap_or(false),
    })
}

fn load_cube(data: &ResolvedData) -> Result<DataCube> {
    let cube = read_cube(&data.input, &data.schema).map_err(|e| e.context(data.input.display().to_string()))?;
    if data.transpose {
        transpose_axes(&cube)
    } else {
        Ok(cube)
    }
}

fn covariate_index(cube: &DataCube, name: Option<&str>) -> Result<usize> {
    match name {
        Some(name) => cube
            .covariate_index(name)
            .ok_or_else(|| Error::Config(format!("covariate column '{name}' is not in the cube"))),
        None if cube.p() > 0 => Ok(0),
        None => Err(Error::Config("stratification needs a covariate (W) column".into())),
    }
}

fn resolve_estimator(args: &EstimatorArgs, file: &FileConfig, cube: &DataCube) -> Result<EstimatorConfig> {
    let name = pick(args.estimator.clone(), file.estimator.clone(), "lscm-basis".into());
    let degree = pick(args.degree, file.degree, 1);
    let lag = pick(args.lag, file.lag, 0);
    let estimator = match name.as_str() {
        "lscm-basis" => EstimatorConfig::LscmBasis { degree, lag },
        "lscm-binary" => EstimatorConfig::LscmBinary { lag },
        "model1" => EstimatorConfig::Model1,
        "model2" => EstimatorConfig::Model2 {
            n_bins: pick(args.bins, file.bins, 100),
            covariate: covariate_index(cube, args.covariate.as_deref().or(file.covariate.as_deref()))?,
        },
        "observed-confounder" => EstimatorConfig::ObservedConfounder { degree },
        "pooled" => EstimatorConfig::Pooled { degree },
        other => return Err(Error::Config(format!("unknown estimator '{other}'"))),
    };
    estimator.validate_for(cube)?;
    Ok(estimator)
}

fn resolve_scheme(
    args: &TestArgs,
    file: &FileConfig,
    covariate: Option<&str>,
    bins: usize,
    cube: Option<&DataCube>,
) -> Result<PermutationScheme> {
    let name = pick(args.scheme.clone(), file.scheme.clone(), "time_full".into());
    Ok(match name.as_str() {
        "time_full" => PermutationScheme::TimeFull,
        "time_block" => PermutationScheme::TimeBlock {
            block_length: pick(args.block_length, file.block_length, PermutationScheme::DEFAULT_BLOCK_LENGTH),
        },
        "spatial_block" => PermutationScheme::SpatialBlock {
            block_cells: args
                .block_cells
                .or(file.block_cells)
                .ok_or_else(|| Error::Config("spatial_block needs --block-cells".into()))?,
        },
        "stratified_by_quantile" => {
            let cube = cube.ok_or_else(|| Error::Config("stratified_by_quantile needs observed covariates".into()))?;
            PermutationScheme::StratifiedByQuantile {
                n_bins: bins,
                covariate: covariate_index(cube, covariate)?,
            }
        }
        "fully_random" => PermutationScheme::FullyRandom,
        other => return Err(Error::Config(format!("unknown permutation scheme '{other}'"))),
    })
}

fn resolve_sim(args: &SimArgs, file: &FileConfig, default_form: &str, default_treatment: &str, seed: u64) -> Result<LscmSpec> {
    let form = parse_form(&pick(args.form.clone(), file.form.clone(), default_form.into()))?;
    let treatment = match pick(args.treatment.clone(), file.treatment.clone(), default_treatment.into()).as_str() {
        "continuous" => TreatmentKind::Continuous,
        "binary" => TreatmentKind::Binary {
            threshold: pick(args.threshold, file.threshold, 1.0),
        },
        other => return Err(Error::Config(format!("unknown treatment '{other}' (expected continuous or binary)"))),
    };
    let spec = LscmSpec {
        grid: GridSampling::square(pick(args.side, file.side, 25)),
        m: pick(args.m, file.m, 100),
        form,
        treatment,
        covariance: CovarianceModel::default(),
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn simulate(ctx: &Context, args: &SimArgs) -> Result<String> {
    let spec = resolve_sim(args, &ctx.file, "example", "continuous", ctx.seed())?;
    let out = ctx.output("simulated_cube.csv");
    let sim = simulate_lscm(&spec)?;
    write_cube(&sim.cube, &out)?;
    Ok(format!(
        "simulated n = {}, m = {} (seed {}) -> {}",
        sim.cube.n(),
        sim.cube.m(),
        spec.seed,
        out.display()
    ))
}

fn estimate(ctx: &Context, data: &DataArgs, est: &EstimatorArgs) -> Result<String> {
    let data = resolve_data(data, &ctx.file)?;
    let cube = load_cube(&data)?;
    let estimator = resolve_estimator(est, &ctx.file, &cube)?;
    let out = ctx.output("estimate_result.json");
    let config_hash = sha256_hex(&("estimate", &data, &estimator))?;
    let estimate = estimator.estimate(&cube)?;
    let contrast = estimate.contrast().ok();
    let summary = format!(
        "{}: f(1)-f(0) = {} using {}/{} locations -> {}",
        estimate.estimator,
        contrast.map_or_else(|| "n/a".to_string(), |c| format!("{c:.6}")),
        estimate.n_used,
        estimate.n_total,
        out.display()
    );
    let doc = ResultDocument::new(
        ResultBody::EffectEstimate(estimate),
        Provenance {
            seed: None,
            scheme: None,
            config_hash,
        },
    );
    write_results(&doc, &out)?;
    Ok(summary)
}

fn test(ctx: &Context, data: &DataArgs, est: &EstimatorArgs, args: &TestArgs) -> Result<String> {
    let data = resolve_data(data, &ctx.file)?;
    let cube = load_cube(&data)?;
    let estimator = resolve_estimator(est, &ctx.file, &cube)?;
    let covariate = est.covariate.as_deref().or(ctx.file.covariate.as_deref());
    let bins = pick(est.bins, ctx.file.bins, 100);
    let scheme = resolve_scheme(args, &ctx.file, covariate, bins, Some(&cube))?;
    scheme.prepare(&cube)?;
    let resamples = if args.exhaustive || ctx.file.exhaustive.unwrap_or(false) {
        Resamples::Exhaustive
    } else {
        Resamples::Random(pick(args.resamples, ctx.file.resamples, DEFAULT_RESAMPLES))
    };
    let seed = ctx.seed();
    let out = ctx.output("test_result.json");
    let config_hash = sha256_hex(&("test", &data, &estimator, &scheme, resamples, seed))?;
    let result = run_test(&cube, &estimator, &scheme, resamples, seed)?;
    let summary = format!(
        "{} = {:.6}, p_one_sided = {}, p_two_sided = {}, B = {}, seed = {} -> {}",
        result.statistic,
        result.statistic_observed,
        result.p_one_sided,
        result.p_two_sided,
        result.b,
        seed,
        out.display()
    );
    let doc = ResultDocument::new(
        ResultBody::TestResult(result),
        Provenance {
            seed: Some(seed),
            scheme: Some(scheme),
            config_hash,
        },
    );
    write_results(&doc, &out)?;
    Ok(summary)
}

#[derive(Serialize)]
struct LevelRow {
    alpha: f64,
    resamples: usize,
    replicates: usize,
    rejections: usize,
    rejection_rate: f64,
    ci_lower: f64,
    ci_upper: f64,
    seed: u64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_table(std::fs::File::create(path)?, rows)
}

fn level_study(ctx: &Context, sim: &SimArgs, args: &TestArgs, alpha: Option<f64>, replicates: Option<usize>) -> Result<String> {
    let file = &ctx.file;
    let mut sim = sim.clone();
    sim.side = sim.side.or(file.side).or(Some(10));
    sim.m = sim.m.or(file.m).or(Some(20));
    let seed = ctx.seed();
    let data = resolve_sim(&sim, file, "null", "binary", 0)?;
    if args.exhaustive || file.exhaustive.unwrap_or(false) {
        return Err(Error::Config("level-study samples resamples; --exhaustive is not supported".into()));
    }
    let scheme = resolve_scheme(args, file, None, pick(None, file.bins, 100), None)?;
    let spec = LevelStudySpec {
        data,
        alpha: pick(alpha, file.alpha, 0.05),
        resamples: pick(args.resamples, file.resamples, 199),
        replicates: pick(replicates, file.replicates, 500),
        scheme,
        seed,
    };
    let out = ctx.output("level_study.csv");
    let r = run_level_study(&spec)?;
    write_csv(
        &out,
        &[LevelRow {
            alpha: spec.alpha,
            resamples: spec.resamples,
            replicates: r.replicates,
            rejections: r.rejections,
            rejection_rate: r.rejection_rate,
            ci_lower: r.ci_lower,
            ci_upper: r.ci_upper,
            seed,
        }],
    )?;
    Ok(format!(
        "rejection rate {} ({} of {}), 95% CI [{:.4}, {:.4}], seed = {} -> {}",
        r.rejection_rate,
        r.rejections,
        r.replicates,
        r.ci_lower,
        r.ci_upper,
        seed,
        out.display()
    ))
}

fn consistency_study(
    ctx: &Context,
    sides: &Option<Vec<usize>>,
    m_values: &Option<Vec<usize>>,
    replicates: Option<usize>,
    delta: Option<f64>,
) -> Result<String> {
    let file = &ctx.file;
    let mut spec = ConsistencyStudySpec::new(ctx.seed());
    spec.sides = pick(sides.clone(), file.sides.clone(), spec.sides);
    spec.m_values = pick(m_values.clone(), file.m_values.clone(), spec.m_values);
    spec.replicates = pick(replicates, file.replicates, spec.replicates);
    spec.delta = pick(delta, file.delta, spec.delta);
    let out = ctx.output("consistency_study.csv");
    let rows = run_consistency_study(&spec)?;
    write_csv(&out, &rows)?;
    Ok(format!("{} cells, seed = {} -> {}", rows.len(), spec.seed, out.display()))
}

fn intervention_check(ctx: &Context, x: &Option<Vec<f64>>, draws: Option<usize>, form: &Option<String>) -> Result<String> {
    let file = &ctx.file;
    let form = parse_form(&pick(form.clone(), file.form.clone(), "example".into()))?;
    let xs = pick(x.clone(), file.x.clone(), vec![-2.0, 0.0, 1.0, 2.0]);
    let draws = pick(draws, file.draws, 100_000);
    let seed = ctx.seed();
    let out = ctx.output("intervention_check.csv");
    let rows = run_intervention_check(form, &xs, draws, seed)?;
    write_csv(&out, &rows)?;
    let flagged = rows.iter().filter(|r| r.flagged).count();
    Ok(format!("{flagged} of {} values flagged, seed = {seed} -> {}", rows.len(), out.display()))
}

fn run(cli: Cli) -> Result<String> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.threads.or(file.threads) {
        if threads == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))?;
    }
    let ctx = Context {
        file,
        seed: cli.seed,
        output: cli.output,
    };
    match &cli.command {
        Command::Simulate(args) => simulate(&ctx, args),
        Command::Estimate { data, estimator } => estimate(&ctx, data, estimator),
        Command::Test { data, estimator, test: t } => test(&ctx, data, estimator, t),
        Command::LevelStudy {
            sim,
            test: t,
            alpha,
            replicates,
        } => level_study(&ctx, sim, t, *alpha, *replicates),
        Command::ConsistencyStudy {
            sides,
            m_values,
            replicates,
            delta,
        } => consistency_study(&ctx, sides, m_values, *replicates, *delta),
        Command::InterventionCheck { x, draws, form } => intervention_check(&ctx, x, *draws, form),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
