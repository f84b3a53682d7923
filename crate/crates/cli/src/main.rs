use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use h3m::h3m_em::{em_h3m_restarts, shem_h3m, AssignmentGroup};
use h3m::hierclust::{
    build_hierarchy, clustering_expected_ll, rand_index, sweep, write_sweep_csv, Method, Scenario,
    SweepConfig,
};
use h3m::io::{read_sequences, to_exact_json, write_jsonl, ModelFile};
use h3m::vhem::{vhem_reduce, VhemConfig};
use h3m::{baum_welch, Error, FitConfig, HmmInit};

/// Cluster hidden Markov models and reduce HMM mixtures.
#[derive(Parser, Debug)]
#[command(name = "h3m", version)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "H3M_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one HMM to a set of sequences with Baum-Welch.
    FitHmm(FitHmmArgs),
    /// Fit a mixture of HMMs to sequences with EM.
    FitH3m(FitH3mArgs),
    /// Reduce a mixture of HMMs to fewer components.
    Reduce(ReduceArgs),
    /// Build a multi-level clustering of the components of a mixture.
    Hierarchy(HierarchyArgs),
    /// Run the synthetic noisy-copy benchmark over a grid.
    SynthSweep(SweepArgs),
    /// Compare clusterings or score cluster centers.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Draw sequences from a model.
    Sample(SampleArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Segments,
    Quantiles,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Relative log-likelihood change that ends the fit.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Covariance floor relative to the pooled data variance.
    #[arg(long, default_value_t = 1e-6)]
    cov_floor: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Segments)]
    init: InitArg,
    /// Keep the initial state distribution uniform instead of re-estimating it.
    #[arg(long)]
    fixed_initial: bool,
}

impl FitArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            cov_floor: self.cov_floor,
            init: match self.init {
                InitArg::Segments => HmmInit::Segments,
                InitArg::Quantiles => HmmInit::Quantiles,
            },
            fixed_initial: self.fixed_initial,
            ..FitConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct FitHmmArgs {
    /// Sequences (.csv or JSONL).
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "states", short = 'S')]
    states: usize,
    #[arg(long = "mix", short = 'M', default_value_t = 1)]
    mix: usize,
    #[arg(long, short)]
    output: PathBuf,
    /// JSON report with the log-likelihood trace.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Debug)]
struct FitH3mArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "components", short = 'K')]
    components: usize,
    #[arg(long = "states", short = 'S')]
    states: usize,
    #[arg(long = "mix", short = 'M', default_value_t = 1)]
    mix: usize,
    /// Make sequences with the same "group" field share one assignment.
    #[arg(long)]
    use_groups: bool,
    /// Random initializations; the best final log-likelihood is kept.
    #[arg(long = "em-restarts", default_value_t = h3m::h3m_em::EM_RESTARTS)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Vhem,
    Shem,
}

#[derive(Args, Debug)]
struct VhemArgs {
    /// Total virtual sequences (default 10000 per base component).
    #[arg(long)]
    n_virtual: Option<usize>,
    /// Virtual sequence length.
    #[arg(long, default_value_t = 10)]
    tau: usize,
    #[arg(id = "vhem_max_iters", long = "vhem-max-iters", value_name = "VHEM_MAX_ITERS", default_value_t = 100)]
    max_iters: usize,
    /// Relative bound change that ends a run.
    #[arg(id = "vhem_tol", long = "vhem-tol", value_name = "VHEM_TOL", default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    /// Covariance floor relative to the base model's variance.
    #[arg(id = "vhem_cov_floor", long = "vhem-cov-floor", value_name = "VHEM_COV_FLOOR", default_value_t = 1e-6)]
    cov_floor: f64,
}

impl VhemArgs {
    fn config(&self, k_r: usize, seed: u64) -> VhemConfig {
        VhemConfig {
            k_r,
            n_virtual: self.n_virtual,
            tau: self.tau,
            max_iters: self.max_iters,
            tol: self.tol,
            restarts: self.restarts,
            seed,
            cov_floor: self.cov_floor,
            ..VhemConfig::new(k_r)
        }
    }
}

#[derive(Args, Debug)]
struct ReduceArgs {
    /// Base mixture model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Vhem)]
    method: MethodArg,
    /// Number of reduced components.
    #[arg(long = "k-r")]
    k_r: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: PathBuf,
    /// JSON report with assignments, trace and wall time.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    vhem: VhemArgs,
    /// Sampled sequences in total (shem).
    #[arg(long)]
    samples: Option<usize>,
    /// Length of sampled sequences (shem).
    #[arg(long, default_value_t = 10)]
    sample_len: usize,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Debug)]
struct HierarchyArgs {
    /// Mixture model file whose components are the inputs.
    #[arg(long)]
    models: PathBuf,
    /// Comma-separated, strictly decreasing level sizes, e.g. 56,8,4,2.
    #[arg(long, value_delimiter = ',', required = true)]
    levels: Vec<usize>,
    /// JSON array of ground-truth labels of the inputs, for the Rand column.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON dump of every level.
    #[arg(long, short)]
    output: PathBuf,
    /// Per-level metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    vhem: VhemArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, default_value = "means")]
    scenario: String,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "vhem,shem")]
    methods: Vec<String>,
    /// Fill the seconds column (makes the output run-dependent).
    #[arg(long)]
    timings: bool,
    /// CSV destination (default stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    vhem: VhemArgs,
    /// Sampled sequences per input HMM (shem).
    #[arg(long, default_value_t = 10)]
    shem_per_input: usize,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Rand index between two JSON label arrays.
    Rand {
        a: PathBuf,
        b: PathBuf,
    },
    /// Summed expected log-likelihood bound of inputs under their assigned centers.
    ExpectedLl {
        /// Mixture whose components are the inputs.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        centers: PathBuf,
        /// JSON array with the center of every input.
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long, default_value_t = 10)]
        tau: usize,
    },
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, short = 'n')]
    count: usize,
    #[arg(long, short = 'T')]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSONL destination (default stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 3 } else { 2 },
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 2,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

/// Loading errors are always input problems, whatever their kind.
fn load<T>(r: h3m::Result<T>, path: &Path) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Parse { .. } => usage(e.to_string()),
        _ => usage(format!("{}: {e}", path.display())),
    })
}

type CmdResult = Result<(), Failure>;

fn write_text(path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_report<T: Serialize>(path: Option<&PathBuf>, report: &T) -> CmdResult {
    if let Some(p) = path {
        let mut text = to_exact_json(report)?;
        text.push('\n');
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<usize>, Failure> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct FitReport {
    ll_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    seconds: f64,
}

fn cmd_fit_hmm(a: &FitHmmArgs) -> CmdResult {
    let cfg = a.fit.config();
    cfg.validate()?;
    let set = load(read_sequences(&a.input), &a.input)?;
    let start = Instant::now();
    let fit = baum_welch(&set.sequences, a.states, a.mix, &cfg)?;
    ModelFile::from_hmm(&fit.model).write(&a.output)?;
    write_report(
        a.report.as_ref(),
        &FitReport {
            ll_trace: fit.ll_trace,
            iterations: fit.iterations,
            converged: fit.converged,
            seconds: start.elapsed().as_secs_f64(),
        },
    )
}

#[derive(Serialize)]
struct EmReport {
    ll_trace: Vec<f64>,
    reseeds: Vec<usize>,
    iterations: usize,
    converged: bool,
    assignments: Vec<usize>,
    seconds: f64,
}

fn cmd_fit_h3m(a: &FitH3mArgs) -> CmdResult {
    let cfg = a.fit.config();
    cfg.validate()?;
    let set = load(read_sequences(&a.input), &a.input)?;
    let groups = if a.use_groups {
        let labels: Vec<String> = set
            .groups
            .iter()
            .enumerate()
            // Ungrouped sequences get a label no input can spell.
            .map(|(i, g)| g.clone().unwrap_or_else(|| format!("\u{0}{i}")))
            .collect();
        AssignmentGroup::from_labels(&labels)
    } else {
        AssignmentGroup::singletons(set.sequences.len())
    };
    let start = Instant::now();
    let fit = em_h3m_restarts(
        &set.sequences,
        &groups,
        a.components,
        a.states,
        a.mix,
        &cfg,
        a.restarts,
        a.seed,
    )?;
    ModelFile::from_h3m(&fit.model).write(&a.output)?;
    write_report(
        a.report.as_ref(),
        &EmReport {
            assignments: fit.hard_assignments(),
            ll_trace: fit.ll_trace,
            reseeds: fit.reseeds,
            iterations: fit.iterations,
            converged: fit.converged,
            seconds: start.elapsed().as_secs_f64(),
        },
    )
}

#[derive(Serialize)]
struct ReduceReport {
    method: &'static str,
    assignments: Vec<usize>,
    trace: Vec<f64>,
    reseeds: Vec<usize>,
    iterations: usize,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    zhat: Option<Vec<Vec<f64>>>,
    seconds: f64,
}

fn cmd_reduce(a: &ReduceArgs) -> CmdResult {
    let base = load(ModelFile::read(&a.model).and_then(|f| f.to_h3m()), &a.model)?;
    let start = Instant::now();
    let (model, report) = match a.method {
        MethodArg::Vhem => {
            let cfg = a.vhem.config(a.k_r, a.seed);
            cfg.validate()?;
            let out = vhem_reduce(&base, &cfg)?;
            let z = &out.state.zhat;
            let zhat = (0..z.nrows()).map(|i| z.row(i).iter().copied().collect()).collect();
            let report = ReduceReport {
                method: "vhem",
                assignments: out.result.assignments.clone(),
                trace: out.state.trace.clone(),
                reseeds: out.state.reseeds.clone(),
                iterations: out.iterations,
                converged: out.converged,
                zhat: Some(zhat),
                seconds: 0.0,
            };
            (out.result.centers, report)
        }
        MethodArg::Shem => {
            let cfg = a.fit.config();
            cfg.validate()?;
            let n = a.samples.unwrap_or(10 * base.n_components());
            let fit = shem_h3m(&base, a.k_r, n, a.sample_len, &cfg, a.seed)?;
            let report = ReduceReport {
                method: "shem",
                assignments: fit.assignments.clone(),
                trace: fit.em.ll_trace.clone(),
                reseeds: fit.em.reseeds.clone(),
                iterations: fit.em.iterations,
                converged: fit.em.converged,
                zhat: None,
                seconds: 0.0,
            };
            (fit.model, report)
        }
    };
    let report = ReduceReport {
        seconds: start.elapsed().as_secs_f64(),
        ..report
    };
    ModelFile::from_h3m(&model).write(&a.output)?;
    write_report(a.report.as_ref(), &report)
}

#[derive(Serialize)]
struct LevelDump {
    #[serde(rename = "K")]
    k: usize,
    assignments: Vec<usize>,
    input_assignments: Vec<usize>,
    bound: Option<f64>,
    model: ModelFile,
}

#[derive(Serialize)]
struct HierarchyDump {
    levels: Vec<LevelDump>,
}

fn cmd_hierarchy(a: &HierarchyArgs) -> CmdResult {
    let cfg = a.vhem.config(a.levels.last().copied().unwrap_or(1), a.seed);
    cfg.validate()?;
    let inputs = load(ModelFile::read(&a.models).and_then(|f| f.to_h3m()), &a.models)?;
    let inputs = inputs.components().to_vec();
    let labels = match &a.labels {
        Some(p) => {
            let l = read_labels(p)?;
            if l.len() != inputs.len() {
                return Err(usage(format!(
                    "{} labels for {} inputs",
                    l.len(),
                    inputs.len()
                )));
            }
            Some(l)
        }
        None => None,
    };
    let start = Instant::now();
    let hier = build_hierarchy(&inputs, &a.levels, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut dump = HierarchyDump { levels: Vec::new() };
    let mut csv = String::from("level,K,rand,expected_ll,seconds\n");
    for (l, level) in hier.levels.iter().enumerate() {
        let composed = hier.input_assignments(l);
        let k = level.model.n_components();
        let mut seen = vec![false; k];
        composed.iter().for_each(|&j| seen[j] = true);
        if seen.contains(&false) {
            return Err(Failure {
                code: 3,
                msg: format!("level {} assignment map is not surjective", l + 1),
            });
        }
        let ell = clustering_expected_ll(&inputs, &level.model, &composed, cfg.tau)?;
        let rand = match &labels {
            Some(t) => format!("{:.16e}", rand_index(&composed, t)?),
            None => String::new(),
        };
        let secs = if l + 1 == hier.levels.len() {
            format!("{seconds:.3}")
        } else {
            String::new()
        };
        csv.push_str(&format!("{},{k},{rand},{ell:.16e},{secs}\n", l + 1));
        dump.levels.push(LevelDump {
            k,
            assignments: level.assignments.clone(),
            input_assignments: composed,
            bound: level.bound,
            model: ModelFile::from_h3m(&level.model),
        });
    }
    let mut text = to_exact_json(&dump)?;
    text.push('\n');
    std::fs::write(&a.output, text)?;
    if let Some(p) = &a.metrics {
        std::fs::write(p, csv)?;
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    let scenario: Scenario = a.scenario.parse()?;
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<h3m::Result<Vec<_>>>()?;
    if a.ks.is_empty() || a.sigmas.is_empty() || a.trials == 0 || methods.is_empty() {
        return Err(usage("the grid must have at least one K, noise level, trial and method"));
    }
    let vhem = a.vhem.config(4, a.seed);
    vhem.validate()?;
    let cfg = SweepConfig {
        ks: a.ks.clone(),
        sigmas: a.sigmas.clone(),
        trials: a.trials,
        seed: a.seed,
        methods,
        vhem,
        shem_per_input: a.shem_per_input,
        ..SweepConfig::new(scenario)
    };
    for &k in &cfg.ks {
        if k == 0 {
            return Err(usage("K must be at least 1"));
        }
    }
    for &s in &cfg.sigmas {
        if !(s > 0.0) || !s.is_finite() {
            return Err(usage("noise variances must be positive"));
        }
    }
    let rows = sweep(&cfg)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf, a.timings)?;
    match &a.output {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            w.write_all(&buf)?;
            w.flush()?;
        }
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn cmd_eval(e: &EvalCommand) -> CmdResult {
    match e {
        EvalCommand::Rand { a, b } => {
            let r = rand_index(&read_labels(a)?, &read_labels(b)?)?;
            println!("{r:.16e}");
        }
        EvalCommand::ExpectedLl {
            inputs,
            centers,
            assignments,
            tau,
        } => {
            let ins = load(ModelFile::read(inputs).and_then(|f| f.to_h3m()), inputs)?;
            let cs = load(ModelFile::read(centers).and_then(|f| f.to_h3m()), centers)?;
            let assign = read_labels(assignments)?;
            let v = clustering_expected_ll(ins.components(), &cs, &assign, *tau)?;
            println!("{v:.16e}");
        }
    }
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> CmdResult {
    if a.length == 0 {
        return Err(usage("sequence length must be at least 1"));
    }
    let model = load(ModelFile::read(&a.model).and_then(|f| f.to_h3m()), &a.model)?;
    let mut rng = h3m::seed::rng_for(a.seed, &[]);
    let mut seqs = Vec::with_capacity(a.count);
    let mut groups = Vec::with_capacity(a.count);
    for n in 0..a.count {
        let (k, q) = model.sample_with_rng(a.length, format!("s{n}"), &mut rng);
        seqs.push(q);
        groups.push(format!("c{k}"));
    }
    let mut buf = Vec::new();
    write_jsonl(&seqs, Some(&groups), &mut buf)?;
    write_text(a.output.as_deref(), std::str::from_utf8(&buf).expect("JSON is UTF-8"))
}

fn run(cli: &Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match &cli.command {
        Command::FitHmm(a) => cmd_fit_hmm(a),
        Command::FitH3m(a) => cmd_fit_h3m(a),
        Command::Reduce(a) => cmd_reduce(a),
        Command::Hierarchy(a) => cmd_hierarchy(a),
        Command::SynthSweep(a) => cmd_sweep(a),
        Command::Eval(e) => cmd_eval(e),
        Command::Sample(a) => cmd_sample(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
