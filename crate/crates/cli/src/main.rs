use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sacbf::cbf_init::{synthesize_b0, CbfOption, InitOptions, QuadraticCbf};
use sacbf::dataset::{build_labeled_dataset, export_csv, load_dataset, save_dataset, GridSpec};
use sacbf::filter::{Backend, FilterSpec};
use sacbf::learner::{estimate_delta, train_model, Architecture, ModelKind, SacbfModel, TrainHyper};
use sacbf::policies::{
    learned_mpc_hyper, load_mpc_dataset, load_stub, mpc_dataset, save_mpc_dataset, state_polytope, train_learned_mpc,
    MpcConfig, Policy,
};
use sacbf::reach_gen::GeneratorConfig;
use sacbf::sim::{
    disturbance_budget, estimate_lipschitz, label_state_grid, read_traces, report_metrics, select_initial_states,
    simulate_batch, write_traces, Disturbance, SafetyFilter,
};
use sacbf::sysmodel::{pendulum_build, ConstraintFn, Polytope, PwaSystem};

#[derive(Parser, Debug)]
#[command(name = "sacbf", version, about = "State-action control barrier function toolkit")]
struct Cli {
    /// TOML file with one table per subcommand holding default flag values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// System description file; the built-in pendulum when omitted.
    #[arg(long, global = true)]
    system: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize and verify the initial quadratic barrier.
    SynthB0(SynthArgs),
    /// Label a state-input grid with B_k of the successor.
    Label(LabelArgs),
    /// Train a barrier model on labels, or a policy on an MPC dataset.
    Train(TrainArgs),
    /// Estimate the sampled approximation error of a model and store it.
    Delta(DeltaArgs),
    /// Sample states and their MPC inputs.
    MpcDataset(MpcDatasetArgs),
    /// Estimate the Lipschitz constant of B_k and the admissible disturbance.
    Lipschitz(LipschitzArgs),
    /// Run closed loops from initial states in a B_k band.
    Simulate(SimulateArgs),
    /// Summarize a trace directory.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthArgs {
    /// Barrier option: 1 plain, 2 tightened, 3 contractive.
    #[arg(long)]
    option: Option<u8>,
    /// Tightening constant; 0, 0.2 and 0.05 for options 1, 2 and 3 by default.
    #[arg(long)]
    lambda: Option<f64>,
    /// Step budget k of the option-3 backoff q = k * lambda.
    #[arg(long)]
    k: Option<usize>,
    /// Output barrier file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelArgs {
    /// Points per axis of the state-input grid.
    #[arg(long)]
    grid: Option<usize>,
    /// Horizon of the generated barrier B_k.
    #[arg(long)]
    k: Option<usize>,
    /// Barrier option used when no `--b0` file is given.
    #[arg(long)]
    option: Option<u8>,
    /// Barrier file from `synth-b0`.
    #[arg(long)]
    b0: Option<PathBuf>,
    /// Admission threshold on successor values.
    #[arg(long)]
    bbar: Option<f64>,
    /// Output dataset file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the admitted samples as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// quad, full-nn, std-cbf or policy (the latter takes an MPC dataset).
    #[arg(long)]
    kind: Option<String>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    arch: Option<String>,
    /// Seed for initialization, shuffling and the validation split.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Output model file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeltaArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Where to write the model with its error bound; the input model by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MpcDatasetArgs {
    /// MPC prediction horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Number of feasible states to keep.
    #[arg(long)]
    count: Option<usize>,
    /// Maximum number of candidate states drawn.
    #[arg(long)]
    budget: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LipschitzArgs {
    /// Labeled dataset whose generator defines B_k.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of sampled state pairs.
    #[arg(long)]
    pairs: Option<usize>,
    /// Maximum distance between paired states.
    #[arg(long)]
    radius: Option<f64>,
    /// Model with an estimated error bound, for the disturbance budget.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateArgs {
    /// lqr, mpc, learned-mpc or stub.
    #[arg(long)]
    policy: Option<String>,
    /// none, std-cbf, sacbf-quad, sacbf-nn or exact-q.
    #[arg(long)]
    filter: Option<String>,
    /// Barrier model for the learned filters.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Labeled dataset whose generator defines B_k.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Policy network for `learned-mpc`.
    #[arg(long)]
    policy_model: Option<PathBuf>,
    /// Input file for `stub`.
    #[arg(long)]
    stub: Option<PathBuf>,
    /// Open band `lo,hi` of B_k values for initial states.
    #[arg(long, allow_hyphen_values = true)]
    band: Option<String>,
    /// Number of initial states.
    #[arg(long)]
    count: Option<usize>,
    /// Points per axis of the initial-state pool grid.
    #[arg(long)]
    pool: Option<usize>,
    /// Closed-loop steps per trajectory.
    #[arg(long)]
    steps: Option<usize>,
    /// MPC horizon for the `mpc` policy.
    #[arg(long)]
    horizon: Option<usize>,
    /// Disturbance bound; no disturbance when omitted.
    #[arg(long)]
    kappa: Option<f64>,
    /// Seed for initial-state selection and disturbances.
    #[arg(long)]
    seed: Option<u64>,
    /// Trace directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportArgs {
    /// Trace directory.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// text or csv.
    #[arg(long)]
    format: Option<String>,
    /// Diagonal of the state cost weight, comma separated.
    #[arg(long)]
    q_diag: Option<String>,
    /// Input cost weight.
    #[arg(long)]
    r: Option<f64>,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Fills flags missing on the command line from the config table `section`.
fn merge<T: Serialize + DeserializeOwned>(cli: T, config: Option<&toml::Table>, section: &str) -> Result<T> {
    let Some(table) = config.and_then(|c| c.get(section)) else {
        return Ok(cli);
    };
    let mut merged = table
        .as_table()
        .ok_or_else(|| anyhow!("config entry `{section}` must be a table"))?
        .clone();
    let given = toml::Table::try_from(&cli)?;
    merged.extend(given);
    merged.try_into().with_context(|| format!("invalid config table `{section}`"))
}

fn need<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| anyhow!("missing --{flag}"))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow!("bad {what} entry `{p}`: {e}")))
        .collect()
}

struct Plant {
    sys: PwaSystem,
    cons: ConstraintFn,
    input: Polytope,
    builtin: bool,
}

fn plant(path: Option<&Path>) -> Result<Plant> {
    Ok(match path {
        Some(p) => {
            let (sys, cons, input) = PwaSystem::load(p).with_context(|| format!("loading system {}", p.display()))?;
            Plant { sys, cons, input, builtin: false }
        }
        None => {
            let (sys, cons, input) = pendulum_build();
            Plant { sys, cons, input, builtin: true }
        }
    })
}

/// State box of the labeling grid: the pendulum study box, or the state
/// constraint box widened by 10% for other systems.
fn state_box(p: &Plant) -> Result<(Vec<f64>, Vec<f64>)> {
    if p.builtin {
        return Ok((vec![-0.16, -1.1], vec![0.16, 1.1]));
    }
    let (lo, hi) = state_polytope(&p.cons)?
        .as_box()
        .ok_or_else(|| anyhow!("grids need a box-shaped state constraint set"))?;
    Ok((lo.iter().map(|v| 1.1 * v).collect(), hi.iter().map(|v| 1.1 * v).collect()))
}

fn grid_for(p: &Plant, count: usize) -> Result<GridSpec> {
    if p.builtin {
        return Ok(GridSpec::pendulum(count)?);
    }
    let (mut lo, mut hi) = state_box(p)?;
    let (ulo, uhi) = p.input.as_box().ok_or_else(|| anyhow!("grids need a box-shaped input set"))?;
    lo.extend(ulo.iter());
    hi.extend(uhi.iter());
    Ok(GridSpec::new(vec![count; lo.len()], lo, hi)?)
}

fn option_of(v: u8) -> Result<CbfOption> {
    Ok(CbfOption::try_from(v)?)
}

fn init_options(option: CbfOption, lambda: Option<f64>, k: Option<usize>) -> InitOptions {
    let mut opts = InitOptions::pendulum(option);
    if let Some(l) = lambda {
        opts.lambda = l;
    }
    if let Some(k) = k {
        opts.k = k;
    }
    opts
}

fn synth(p: &Plant, opts: &InitOptions) -> Result<QuadraticCbf> {
    let s = synthesize_b0(&p.sys, &p.cons, &p.input, opts)?;
    let min_eig = s.block_min_eigs.iter().copied().fold(f64::INFINITY, f64::min);
    eprintln!(
        "option {} lambda {} lambda_scaled {:.6}: min block eigenvalue {min_eig:.3e}, verify {} (worst {:.6e} vs target {:.6e})",
        opts.option,
        opts.lambda,
        s.cbf.lambda_scaled,
        if s.verify.pass { "passed" } else { "FAILED" },
        s.verify.worst_value,
        s.verify.target
    );
    if !s.verify.pass {
        bail!("sampled verification of the initial barrier failed");
    }
    Ok(s.cbf)
}

fn run_synth(a: SynthArgs, p: &Plant) -> Result<()> {
    let opts = init_options(option_of(need(&a.option, "option")?)?, a.lambda, a.k);
    let cbf = synth(p, &opts)?;
    println!("P = {}", cbf.p);
    match &a.out {
        Some(out) => cbf.save(out)?,
        None => print!("{}", cbf.to_text()),
    }
    Ok(())
}

fn run_label(a: LabelArgs, p: Plant) -> Result<()> {
    if let Some(j) = a.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let out = need(&a.out, "out")?;
    let b0 = match (&a.b0, a.option) {
        (Some(path), _) => QuadraticCbf::load(path)?,
        (None, Some(o)) => synth(&p, &init_options(option_of(o)?, None, a.k))?,
        (None, None) => bail!("give --b0 or --option"),
    };
    let grid = grid_for(&p, a.grid.unwrap_or(40))?;
    let cfg = GeneratorConfig::new(p.sys, p.cons, p.input, b0, a.k.unwrap_or(7))?;
    let start = std::time::Instant::now();
    let d = build_labeled_dataset(&cfg, &grid, a.bbar.unwrap_or(10.0))?;
    eprintln!(
        "admitted {} of {} samples in {:.1}s",
        d.admitted(),
        d.total,
        start.elapsed().as_secs_f64()
    );
    save_dataset(&d, &out)?;
    if let Some(c) = &a.csv {
        export_csv(&d, c)?;
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let data = need(&a.dataset, "dataset")?;
    let out = need(&a.out, "out")?;
    let kind_tag = need(&a.kind, "kind")?;
    let kind = ModelKind::parse(&kind_tag).ok_or_else(|| anyhow!("unknown model kind `{kind_tag}`"))?;
    let mut hyper = if kind == ModelKind::Policy { learned_mpc_hyper() } else { TrainHyper::default() };
    if let Some(s) = a.seed {
        hyper.seed = s;
    }
    if let Some(e) = a.epochs {
        hyper.epochs = e;
    }
    if let Some(b) = a.batch {
        hyper.batch_size = b;
    }
    if let Some(lr) = a.lr {
        hyper.learning_rate = lr;
    }
    let model = if kind == ModelKind::Policy {
        if a.arch.is_some() {
            bail!("the learned MPC architecture is fixed; drop --arch");
        }
        train_learned_mpc(&load_mpc_dataset(&data)?, &hyper)?
    } else {
        let hidden: Vec<usize> = parse_list(a.arch.as_deref().unwrap_or("16,64,8"), "--arch")?;
        train_model(&load_dataset(&data)?, kind, &Architecture::tanh(&hidden), &hyper)?
    };
    eprintln!("train mse {:.4e}, validation mse {:.4e}", model.train_mse, model.validation_mse);
    model.save(&out)?;
    Ok(())
}

fn run_delta(a: DeltaArgs) -> Result<()> {
    let path = need(&a.model, "model")?;
    let mut model = SacbfModel::load(&path)?;
    let d = load_dataset(&need(&a.dataset, "dataset")?)?;
    let delta = estimate_delta(&mut model, &d)?;
    let lambda = d.config.generator()?.b0.lambda_scaled;
    println!("delta {delta:.6e}");
    println!("lambda_scaled {lambda:.6e}");
    println!("contractive precondition delta <= lambda_scaled/2: {}", delta <= lambda / 2.0);
    model.save(a.out.as_deref().unwrap_or(&path))?;
    Ok(())
}

fn run_mpc_dataset(a: MpcDatasetArgs, p: &Plant) -> Result<()> {
    let out = need(&a.out, "out")?;
    let cfg = MpcConfig::pendulum(&p.sys, &p.cons, &p.input, a.horizon.unwrap_or(7))?;
    let count = a.count.unwrap_or(4000);
    let data = mpc_dataset(&cfg, &p.sys, &p.input, count, a.budget.unwrap_or(count * 20), a.seed.unwrap_or(0))?;
    eprintln!("{} feasible states from {} draws", data.states.len(), data.drawn);
    save_mpc_dataset(&data, &out)?;
    Ok(())
}

fn run_lipschitz(a: LipschitzArgs, p: &Plant) -> Result<()> {
    let d = load_dataset(&need(&a.dataset, "dataset")?)?;
    let cfg = d.generator()?;
    let (lo, hi) = state_box(p)?;
    let l = estimate_lipschitz(&cfg, &lo, &hi, a.pairs.unwrap_or(10_000), a.radius.unwrap_or(1e-3), a.seed.unwrap_or(0))?;
    println!("lipschitz {l:.6e}");
    if let Some(m) = &a.model {
        let delta = SacbfModel::load(m)?.delta.ok_or_else(|| anyhow!("model has no error bound; run `delta` first"))?;
        match disturbance_budget(cfg.b0.lambda_scaled, delta, l) {
            Some(k) => println!("kappa {k:.6e}"),
            None => println!("no disturbance budget: lambda_scaled <= 2 delta"),
        }
    }
    Ok(())
}

fn run_simulate(a: SimulateArgs, p: Plant) -> Result<()> {
    let out = need(&a.out, "out")?;
    let d = load_dataset(&need(&a.dataset, "dataset")?)?;
    let cfg = d.generator()?;
    let seed = a.seed.unwrap_or(0);
    let mpc = MpcConfig::pendulum(&p.sys, &p.cons, &p.input, a.horizon.unwrap_or(7))?;
    let policy_tag = a.policy.as_deref().unwrap_or("lqr");
    let policy = match policy_tag {
        "lqr" => Policy::Lqr { gain: mpc.gain.clone(), input: p.input.clone() },
        "mpc" => Policy::Mpc { cfg: mpc.clone(), sys: p.sys.clone(), input: p.input.clone() },
        "learned-mpc" => Policy::Learned(SacbfModel::load(&need(&a.policy_model, "policy-model")?)?),
        "stub" => Policy::Stub(load_stub(&need(&a.stub, "stub")?)?),
        other => bail!("unknown policy `{other}`"),
    };
    let lambda = cfg.b0.lambda_scaled;
    let learned = |backend: Backend| -> Result<SafetyFilter> {
        let model = SacbfModel::load(&need(&a.model, "model")?)?;
        if model.digest != d.digest {
            bail!("model was trained on labels from a different generator");
        }
        let spec = FilterSpec::new(model, cfg.option, lambda, p.input.clone(), backend)?.with_system(p.sys.clone());
        if spec.precondition_warning {
            eprintln!("warning: delta > lambda_scaled/2, the contractive guarantee does not apply");
        }
        Ok(SafetyFilter::Learned(spec))
    };
    let filter = match a.filter.as_deref().unwrap_or("none") {
        "none" => SafetyFilter::None,
        "sacbf-quad" => learned(Backend::QuadExact)?,
        "sacbf-nn" | "std-cbf" => learned(Backend::NlpLocal)?,
        "exact-q" => {
            let level = if cfg.option == CbfOption::Contractive { -lambda } else { 0.0 };
            SafetyFilter::Exact { cfg: Box::new(cfg.clone()), level, bisections: 40 }
        }
        other => bail!("unknown filter `{other}`"),
    };
    if let (Some(want), SafetyFilter::Learned(spec)) = (a.filter.as_deref(), &filter) {
        let kind = spec.model.kind.tag();
        let ok = matches!((want, kind), ("sacbf-quad", "quad") | ("sacbf-nn", "full-nn") | ("sacbf-nn", "quad") | ("std-cbf", "std-cbf"));
        if !ok {
            bail!("filter `{want}` cannot use a `{kind}` model");
        }
    }
    let band: Vec<f64> = parse_list(a.band.as_deref().unwrap_or("-0.1,0"), "--band")?;
    if band.len() != 2 {
        bail!("--band takes `lo,hi`");
    }
    let (lo, hi) = state_box(&p)?;
    let pool_n = a.pool.unwrap_or(40);
    let pool = label_state_grid(&cfg, &vec![pool_n; lo.len()], &lo, &hi)?;
    let x0s = select_initial_states(&pool, (band[0], band[1]), a.count.unwrap_or(200), seed)?;
    let disturbance = a.kappa.map(|kappa| Disturbance { kappa, seed });
    let traces = simulate_batch(&p.sys, &p.cons, &policy, &filter, &x0s, a.steps.unwrap_or(50), disturbance)?;
    write_traces(&out, &traces)?;
    let report = report_metrics(&traces, &mpc.q_c, &mpc.r_c);
    print!("{}", report.to_text());
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let traces = read_traces(&need(&a.traces, "traces")?)?;
    if traces.is_empty() {
        bail!("trace directory lists no traces");
    }
    let q: Vec<f64> = parse_list(a.q_diag.as_deref().unwrap_or("20,1"), "--q-diag")?;
    let q_c = DMatrix::from_diagonal(&DVector::from_vec(q));
    let r_c = DMatrix::from_element(1, 1, a.r.unwrap_or(1.0));
    let report = report_metrics(&traces, &q_c, &r_c);
    let text = match a.format.as_deref().unwrap_or("text") {
        "text" => report.to_text(),
        "csv" => report.to_csv()?,
        other => bail!("unknown format `{other}`"),
    };
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config: Option<toml::Table> = match &cli.config {
        Some(p) => Some(toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?),
        None => None,
    };
    let cfg = config.as_ref();
    let system = cli.system.clone().or_else(|| {
        cfg.and_then(|c| c.get("system")).and_then(|v| v.as_str()).map(PathBuf::from)
    });
    let p = || plant(system.as_deref());
    match cli.command {
        Command::SynthB0(a) => run_synth(merge(a, cfg, "synth-b0")?, &p()?),
        Command::Label(a) => run_label(merge(a, cfg, "label")?, p()?),
        Command::Train(a) => run_train(merge(a, cfg, "train")?),
        Command::Delta(a) => run_delta(merge(a, cfg, "delta")?),
        Command::MpcDataset(a) => run_mpc_dataset(merge(a, cfg, "mpc-dataset")?, &p()?),
        Command::Lipschitz(a) => run_lipschitz(merge(a, cfg, "lipschitz")?, &p()?),
        Command::Simulate(a) => run_simulate(merge(a, cfg, "simulate")?, p()?),
        Command::Report(a) => run_report(merge(a, cfg, "report")?),
    }
}
