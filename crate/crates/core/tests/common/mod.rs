//! Shared fixtures for the heavy integration suites. Labeled datasets are
//! cached under the cargo test temp directory, keyed by configuration digest.

#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use sacbf::cbf_init::{synthesize_b0, B0Synthesis, CbfOption, InitOptions};
use sacbf::dataset::{build_labeled_dataset, config_digest, load_dataset, save_dataset, GridSpec, LabeledDataset};
use sacbf::learner::{estimate_delta, train_model, Architecture, ModelKind, SacbfModel, TrainHyper};
use sacbf::policies::{learned_mpc_hyper, mpc_dataset, train_learned_mpc, MpcConfig};
use sacbf::reach_gen::GeneratorConfig;
use sacbf::sysmodel::pendulum_build;

pub const OPTIONS: [CbfOption; 3] = [CbfOption::Plain, CbfOption::Tightened, CbfOption::Contractive];

fn slot(option: CbfOption) -> usize {
    option as usize - 1
}

static SYNTH: [OnceLock<B0Synthesis>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
static LABELS: [OnceLock<LabeledDataset>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
static QUAD: [OnceLock<SacbfModel>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
static FULL: [OnceLock<SacbfModel>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
static POLICY: OnceLock<SacbfModel> = OnceLock::new();

pub fn synthesis(option: CbfOption) -> &'static B0Synthesis {
    SYNTH[slot(option)].get_or_init(|| {
        let (sys, cons, input) = pendulum_build();
        synthesize_b0(&sys, &cons, &input, &InitOptions::pendulum(option)).expect("initial barrier synthesis")
    })
}

/// `B_7` generator of the pendulum study for one option.
pub fn generator(option: CbfOption) -> GeneratorConfig {
    let (sys, cons, input) = pendulum_build();
    GeneratorConfig::new(sys, cons, input, synthesis(option).cbf.clone(), 7).expect("generator")
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

/// 40³ grid labels with admission threshold 10.
pub fn labels(option: CbfOption) -> &'static LabeledDataset {
    LABELS[slot(option)].get_or_init(|| {
        let cfg = generator(option);
        let digest = config_digest(&cfg).expect("digest");
        let path = cache_dir().join(format!("labels-v{}-{digest:016x}.bin", env!("CARGO_PKG_VERSION")));
        if let Ok(d) = load_dataset(&path) {
            if d.digest == digest {
                return d;
            }
        }
        let d = build_labeled_dataset(&cfg, &GridSpec::pendulum(40).expect("grid"), 10.0).expect("labeling");
        save_dataset(&d, &path).expect("cache write");
        d
    })
}

fn trained(kind: ModelKind, option: CbfOption) -> SacbfModel {
    let d = labels(option);
    let mut m = train_model(d, kind, &Architecture::tanh(&[16, 64, 8]), &TrainHyper::default()).expect("training");
    estimate_delta(&mut m, d).expect("delta");
    m
}

pub fn quadratic_model(option: CbfOption) -> &'static SacbfModel {
    QUAD[slot(option)].get_or_init(|| trained(ModelKind::Quadratic, option))
}

pub fn full_model(option: CbfOption) -> &'static SacbfModel {
    FULL[slot(option)].get_or_init(|| trained(ModelKind::FullNn, option))
}

/// Imitation of the horizon-7 MPC from 4000 feasible states.
pub fn learned_mpc() -> &'static SacbfModel {
    POLICY.get_or_init(|| {
        let (sys, cons, input) = pendulum_build();
        let cfg = MpcConfig::pendulum(&sys, &cons, &input, 7).expect("mpc config");
        let data = mpc_dataset(&cfg, &sys, &input, 4000, 40_000, 3).expect("mpc dataset");
        train_learned_mpc(&data, &learned_mpc_hyper()).expect("policy training")
    })
}

/// Writes straight to the process stdout so the line survives output capture.
pub fn verdict(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}
