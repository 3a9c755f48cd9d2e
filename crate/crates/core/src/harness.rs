//! Experiment configs, seeded runs, trace CSVs and summaries.
//!
//! Config files are line-oriented `key=value` with `#` comments. Every key
//! except `task` has a default; unknown keys are rejected and all problems
//! are reported together.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::compress::CompressorSpec;
use crate::consensus::{ccs_run, choco_gossip_run, exact_gossip_run, GossipOptions, ScalingSchedule};
use crate::error::{Error, Result};
use crate::linalg::{consensus_error, max_row_norm, Mat};
use crate::objective::{Dataset, LogisticScale, Objective, Partition};
use crate::optim::{
    cold_run, dyna_cold_run, envelope_schedule, initial_split_lyapunov, nids_run, default_decay_schedule,
    ColdConfig, LyapunovVariant, RunOptions,
};
use crate::stream_rng;
use crate::theory::{
    ccs_initial_scale, ccs_schedule, certify_values, choco_rate, cold_rate_biased, cold_rate_unbiased,
    dyna_cold_initial_constants, dyna_cold_schedule, CertMode, CertReport, RateCertificate, TheoremId,
};
use crate::topology::{build_graph, metropolis_weights, GraphKind, MixingMatrix};
use crate::trace::{Trace, TraceRecord, TRACE_COLUMNS};

/// Thresholds reported in `summary.csv`.
pub const EPSILONS: [f64; 3] = [1e-2, 1e-4, 1e-6];

const KEYS: [&str; 18] = [
    "task",
    "graph",
    "graph_seed",
    "compressor",
    "algorithm",
    "objective",
    "d",
    "init",
    "stepsizes",
    "gamma",
    "tau",
    "schedule",
    "iters",
    "seeds",
    "output",
    "lyapunov",
    "force",
    "vary",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Consensus,
    Optimize,
    Certify,
    Sweep,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consensus" => Ok(Task::Consensus),
            "optimize" => Ok(Task::Optimize),
            "certify" => Ok(Task::Certify),
            "sweep" => Ok(Task::Sweep),
            other => Err(Error::Parse(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgoName {
    Gossip,
    Choco,
    Ccs,
    Nids,
    Cold,
    DynaCold,
}

impl AlgoName {
    pub fn is_consensus(self) -> bool {
        matches!(self, AlgoName::Gossip | AlgoName::Choco | AlgoName::Ccs)
    }

    pub fn is_scaled(self) -> bool {
        matches!(self, AlgoName::Ccs | AlgoName::DynaCold)
    }

    /// Whether the algorithm transmits compressed messages.
    pub fn compresses(self) -> bool {
        !matches!(self, AlgoName::Gossip | AlgoName::Nids)
    }
}

impl FromStr for AlgoName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gossip" => Ok(AlgoName::Gossip),
            "choco" => Ok(AlgoName::Choco),
            "ccs" => Ok(AlgoName::Ccs),
            "nids" => Ok(AlgoName::Nids),
            "cold" => Ok(AlgoName::Cold),
            "dyna_cold" => Ok(AlgoName::DynaCold),
            other => Err(Error::Parse(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl fmt::Display for AlgoName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlgoName::Gossip => "gossip",
            AlgoName::Choco => "choco",
            AlgoName::Ccs => "ccs",
            AlgoName::Nids => "nids",
            AlgoName::Cold => "cold",
            AlgoName::DynaCold => "dyna_cold",
        })
    }
}

/// `kind:n`, e.g. `ring:4` or `er:20`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphSpec {
    pub kind: GraphKind,
    pub n: usize,
}

impl FromStr for GraphSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("graph must look like `ring:4`, got `{s}`")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad node count `{n}`")))?;
        if n == 0 {
            return Err(Error::Parse("graph needs at least one node".into()));
        }
        Ok(GraphSpec {
            kind: kind.trim().parse()?,
            n,
        })
    }
}

impl fmt::Display for GraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    /// `f_i(x) = ||x - x_i⁰||²`.
    Consensus,
    Quadratic { mu: f64, l: f64, seed: u64 },
    Logistic {
        samples: usize,
        ridge: f64,
        partition: Partition,
        scale: LogisticScale,
        data_seed: u64,
        file: Option<PathBuf>,
    },
}

fn parse_params(body: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for part in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected name=value, got `{part}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn take<T: FromStr>(p: &mut BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match p.remove(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Parse(format!("bad value `{v}` for `{key}`"))),
        None => Ok(default),
    }
}

impl FromStr for ObjectiveSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, body) = s.split_once(':').unwrap_or((s, ""));
        let mut p = parse_params(body)?;
        let spec = match name.trim() {
            "consensus" => ObjectiveSpec::Consensus,
            "quadratic" => ObjectiveSpec::Quadratic {
                mu: take(&mut p, "mu", 1.0)?,
                l: take(&mut p, "L", 10.0)?,
                seed: take(&mut p, "seed", 0)?,
            },
            "logistic" => {
                let partition = match p.remove("partition").as_deref() {
                    None | Some("sorted") => Partition::SortedLabel,
                    Some("random") => Partition::Random(take(&mut p, "partition_seed", 0)?),
                    Some(o) => return Err(Error::Parse(format!("unknown partition `{o}`"))),
                };
                let scale = match p.remove("scale").as_deref() {
                    None | Some("node") => LogisticScale::NodeAverage,
                    Some("global") => LogisticScale::Global,
                    Some(o) => return Err(Error::Parse(format!("unknown logistic scale `{o}`"))),
                };
                ObjectiveSpec::Logistic {
                    samples: take(&mut p, "samples", 2000)?,
                    ridge: take(&mut p, "r", 0.1)?,
                    partition,
                    scale,
                    data_seed: take(&mut p, "data_seed", 0)?,
                    file: p.remove("file").map(PathBuf::from),
                }
            }
            other => return Err(Error::Parse(format!("unknown objective `{other}`"))),
        };
        if let Some(k) = p.keys().next() {
            return Err(Error::Parse(format!("unknown objective parameter `{k}`")));
        }
        Ok(spec)
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveSpec::Consensus => f.write_str("consensus"),
            ObjectiveSpec::Quadratic { mu, l, seed } => write!(f, "quadratic:mu={mu},L={l},seed={seed}"),
            ObjectiveSpec::Logistic {
                samples,
                ridge,
                partition,
                scale,
                data_seed,
                file,
            } => {
                let part = match partition {
                    Partition::SortedLabel => "sorted".to_string(),
                    Partition::Random(s) => format!("random,partition_seed={s}"),
                };
                let sc = match scale {
                    LogisticScale::NodeAverage => "node",
                    LogisticScale::Global => "global",
                };
                write!(f, "logistic:samples={samples},r={ridge},partition={part},scale={sc},data_seed={data_seed}")?;
                if let Some(p) = file {
                    write!(f, ",file={}", p.display())?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Stepsizes from the algorithm's rate theorem.
    Theorem,
    /// `γ = 1/(2L)`, `τ = 1/(2γ(1-λₙ))`, no certificate.
    Exploration,
    /// `gamma` (and `tau`) given in the config.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    Theorem,
    /// `s^k = 3||X¹||_max · 0.99^k` (`X⁰` for consensus).
    DefaultDecay,
    Explicit { c_s: f64, beta: f64 },
}

impl FromStr for ScheduleSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorem" => Ok(ScheduleSpec::Theorem),
            "paper_default" => Ok(ScheduleSpec::DefaultDecay),
            _ => {
                let (a, b) = s.split_once(',').ok_or_else(|| {
                    Error::Parse(format!("schedule must be theorem, paper_default or `c_s,beta`, got `{s}`"))
                })?;
                let c_s = a.trim().parse().map_err(|_| Error::Parse(format!("bad c_s `{a}`")))?;
                let beta = b.trim().parse().map_err(|_| Error::Parse(format!("bad beta `{b}`")))?;
                ScalingSchedule::new(c_s, beta)?;
                Ok(ScheduleSpec::Explicit { c_s, beta })
            }
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::Theorem => f.write_str("theorem"),
            ScheduleSpec::DefaultDecay => f.write_str("paper_default"),
            ScheduleSpec::Explicit { c_s, beta } => write!(f, "{c_s},{beta}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitSpec {
    Zeros,
    /// Entries uniform in `[-1, 1)`.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapunovChoice {
    Auto,
    Off,
    Variant(LyapunovVariant),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub graph: GraphSpec,
    pub graph_seed: u64,
    pub compressor: CompressorSpec,
    pub algorithm: AlgoName,
    pub objective: Option<ObjectiveSpec>,
    pub d: usize,
    pub init: InitSpec,
    pub stepsizes: StepMode,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub schedule: Option<ScheduleSpec>,
    pub iters: usize,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub lyapunov: LyapunovChoice,
    pub force: bool,
    /// `key=v1,v2,...` for sweeps.
    pub vary: Option<(String, Vec<String>)>,
    /// Raw `key=value` pairs as read, for sweeps and trace headers.
    pub raw: BTreeMap<String, String>,
}

/// All problems found in a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<Error>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| Error::Parse(format!("bad seed range `{part}`")))?;
            let b: u64 = b.parse().map_err(|_| Error::Parse(format!("bad seed range `{part}`")))?;
            if b <= a {
                return Err(Error::Parse(format!("empty seed range `{part}`")));
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| Error::Parse(format!("bad seed `{part}`")))?);
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("seeds must list at least one seed".into()));
    }
    let mut sorted = out.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != out.len() {
        return Err(Error::Parse("seeds must be distinct".into()));
    }
    Ok(out)
}

/// Splits `key=value` lines, dropping comments and blank lines.
pub fn parse_pairs(text: &str) -> std::result::Result<BTreeMap<String, String>, ConfigErrors> {
    let mut map = BTreeMap::new();
    let mut errors = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            None => errors.push(Error::Parse(format!("line {}: expected key=value, got `{line}`", no + 1))),
            Some((k, v)) => {
                let k = k.trim().to_string();
                if !KEYS.contains(&k.as_str()) {
                    errors.push(Error::Parse(format!("line {}: unknown key `{k}`", no + 1)));
                } else if map.insert(k.clone(), v.trim().to_string()).is_some() {
                    errors.push(Error::Parse(format!("line {}: duplicate key `{k}`", no + 1)));
                }
            }
        }
    }
    if errors.is_empty() {
        Ok(map)
    } else {
        Err(ConfigErrors(errors))
    }
}

/// Contract class an algorithm needs, checked at dimension `d`.
pub fn check_contract(algo: AlgoName, q: &CompressorSpec, d: usize) -> Result<()> {
    let c = q.contract(d);
    let has = match (c.contracted.is_some(), c.absolute.is_some()) {
        (true, true) => "both the delta-contracted and the bounded-absolute contract",
        (true, false) => "only the delta-contracted (mean-square relative) contract",
        (false, true) => "only the bounded-absolute (unit-ball) contract",
        (false, false) => "neither the delta-contracted nor the bounded-absolute contract",
    };
    let need = match algo {
        AlgoName::Choco | AlgoName::Cold if c.contracted.is_none() => {
            "a delta-contracted compressor (mean-square relative contract)"
        }
        AlgoName::Ccs if c.absolute.is_none() => "a bounded-absolute compressor (unit-ball absolute contract)",
        AlgoName::DynaCold if c.contracted.is_none() && c.absolute.is_none() => {
            "a bounded-absolute or delta-contracted compressor"
        }
        _ => return Ok(()),
    };
    Err(Error::ContractMismatch(format!(
        "{algo} requires {need}; `{q}` at d={d} has {has} (use --force to run anyway)"
    )))
}

/// Parses a config; contract mismatches are errors unless `force=true`.
pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, ConfigErrors> {
    parse_config_with(text, false)
}

/// As [`parse_config`], with `force` overriding the config's own flag.
pub fn parse_config_with(text: &str, force: bool) -> std::result::Result<ExperimentConfig, ConfigErrors> {
    config_from_pairs(parse_pairs(text)?, force)
}

pub fn config_from_pairs(
    raw: BTreeMap<String, String>,
    force_override: bool,
) -> std::result::Result<ExperimentConfig, ConfigErrors> {
    let mut errors: Vec<Error> = Vec::new();
    let get = |k: &str| raw.get(k).map(String::as_str);
    fn field<T: FromStr>(errors: &mut Vec<Error>, key: &str, v: Option<&str>, default: T) -> T
    where
        T::Err: fmt::Display,
    {
        match v {
            None => default,
            Some(v) => match v.parse() {
                Ok(x) => x,
                Err(e) => {
                    errors.push(Error::Parse(format!("`{key}`: {e}")));
                    default
                }
            },
        }
    }

    let task = match get("task") {
        None => {
            errors.push(Error::InvalidInput("missing required key `task`".into()));
            None
        }
        Some(t) => match t.parse::<Task>() {
            Ok(t) => Some(t),
            Err(e) => {
                errors.push(e);
                None
            }
        },
    };
    let graph = field(&mut errors, "graph", get("graph"), GraphSpec { kind: GraphKind::Ring, n: 4 });
    let graph_seed = field(&mut errors, "graph_seed", get("graph_seed"), 0u64);
    let compressor = field(&mut errors, "compressor", get("compressor"), CompressorSpec::identity());
    let default_algo = if task == Some(Task::Consensus) {
        AlgoName::Gossip
    } else {
        AlgoName::Nids
    };
    let algorithm = field(&mut errors, "algorithm", get("algorithm"), default_algo);
    let d = field(&mut errors, "d", get("d"), 2usize);
    if d == 0 {
        errors.push(Error::InvalidInput("`d` must be positive".into()));
    }
    let init = match get("init") {
        None | Some("random") => InitSpec::Random(0),
        Some("zeros") => InitSpec::Zeros,
        Some(v) => match v.strip_prefix("random:").map(str::parse::<u64>) {
            Some(Ok(s)) => InitSpec::Random(s),
            _ => {
                errors.push(Error::Parse(format!("`init`: expected zeros, random or random:<seed>, got `{v}`")));
                InitSpec::Random(0)
            }
        },
    };
    let stepsizes = match get("stepsizes") {
        None | Some("theorem") => StepMode::Theorem,
        Some("exploration") => StepMode::Exploration,
        Some("explicit") => StepMode::Explicit,
        Some(v) => {
            errors.push(Error::Parse(format!(
                "`stepsizes`: expected theorem, exploration or explicit, got `{v}`"
            )));
            StepMode::Theorem
        }
    };
    let num = |errors: &mut Vec<Error>, k: &str| -> Option<f64> {
        get(k).and_then(|v| match v.parse::<f64>() {
            Ok(x) if x > 0.0 && x.is_finite() => Some(x),
            _ => {
                errors.push(Error::Parse(format!("`{k}` must be a positive number, got `{v}`")));
                None
            }
        })
    };
    let gamma = num(&mut errors, "gamma");
    let tau = num(&mut errors, "tau");
    let schedule = get("schedule").map(|v| field(&mut errors, "schedule", Some(v), ScheduleSpec::Theorem));
    let iters = field(&mut errors, "iters", get("iters"), 100usize);
    let seeds = match get("seeds") {
        None => vec![0],
        Some(v) => parse_seeds(v).unwrap_or_else(|e| {
            errors.push(e);
            vec![0]
        }),
    };
    let output = PathBuf::from(get("output").unwrap_or("out"));
    let lyapunov = match get("lyapunov") {
        None | Some("auto") => LyapunovChoice::Auto,
        Some("none") => LyapunovChoice::Off,
        Some(v) => match v.parse() {
            Ok(x) => LyapunovChoice::Variant(x),
            Err(e) => {
                errors.push(e);
                LyapunovChoice::Auto
            }
        },
    };
    let force = force_override || field(&mut errors, "force", get("force"), false);
    let vary = get("vary").and_then(|v| match v.split_once('=') {
        Some((k, vals)) if KEYS.contains(&k.trim()) && !vals.trim().is_empty() => Some((
            k.trim().to_string(),
            vals.split(',').map(|s| s.trim().to_string()).collect(),
        )),
        _ => {
            errors.push(Error::Parse(format!("`vary` must look like `compressor=C1,C2`, got `{v}`")));
            None
        }
    });

    // cross-field checks
    let objective = match get("objective") {
        Some(v) => Some(field(&mut errors, "objective", Some(v), ObjectiveSpec::Consensus)),
        None if algorithm.is_consensus() => None,
        None => Some(ObjectiveSpec::Quadratic {
            mu: 1.0,
            l: 10.0,
            seed: 0,
        }),
    };
    if let Some(t) = task {
        if t == Task::Consensus && !algorithm.is_consensus() {
            errors.push(Error::InvalidInput(format!("task=consensus needs gossip, choco or ccs, got {algorithm}")));
        }
        if t == Task::Optimize && algorithm.is_consensus() {
            errors.push(Error::InvalidInput(format!("task=optimize needs nids, cold or dyna_cold, got {algorithm}")));
        }
        if t == Task::Sweep && vary.is_none() && get("vary").is_none() {
            // the CLI may supply --vary; nothing to check here
        }
    }
    if algorithm.is_consensus() && get("objective").is_some() {
        errors.push(Error::InvalidInput(format!("{algorithm} does not take an objective")));
    }
    if !algorithm.compresses() && !compressor.is_identity() {
        errors.push(Error::InvalidInput(format!(
            "{algorithm} sends uncompressed messages; drop `compressor={compressor}`"
        )));
    }
    if schedule.is_some() && !algorithm.is_scaled() {
        errors.push(Error::InvalidInput(format!("`schedule` only applies to ccs and dyna_cold, not {algorithm}")));
    }
    if stepsizes != StepMode::Explicit && (get("gamma").is_some() || get("tau").is_some()) {
        errors.push(Error::InvalidInput("`gamma`/`tau` need stepsizes=explicit".into()));
    }
    let needs_tau = matches!(algorithm, AlgoName::Cold | AlgoName::DynaCold);
    if stepsizes == StepMode::Explicit {
        if get("gamma").is_none() && algorithm != AlgoName::Gossip {
            errors.push(Error::InvalidInput("stepsizes=explicit needs `gamma`".into()));
        }
        if needs_tau && get("tau").is_none() {
            errors.push(Error::InvalidInput(format!("stepsizes=explicit with {algorithm} needs `tau`")));
        }
    }
    if get("tau").is_some() && !needs_tau {
        errors.push(Error::InvalidInput(format!("{algorithm} has no `tau`")));
    }
    if stepsizes == StepMode::Exploration && algorithm.is_consensus() {
        errors.push(Error::InvalidInput(
            "stepsizes=exploration applies to nids, cold and dyna_cold".into(),
        ));
    }
    if schedule == Some(ScheduleSpec::Theorem) && stepsizes != StepMode::Theorem {
        errors.push(Error::InvalidInput("schedule=theorem needs stepsizes=theorem".into()));
    }
    let logistic_file = matches!(&objective, Some(ObjectiveSpec::Logistic { file: Some(_), .. }));
    if !force && !logistic_file && d > 0 {
        if let Err(e) = check_contract(algorithm, &compressor, d) {
            errors.push(e);
        }
    }
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    let schedule = if algorithm.is_scaled() {
        Some(schedule.unwrap_or(if stepsizes == StepMode::Theorem {
            ScheduleSpec::Theorem
        } else {
            ScheduleSpec::DefaultDecay
        }))
    } else {
        None
    };
    Ok(ExperimentConfig {
        task: task.unwrap(),
        graph,
        graph_seed,
        compressor,
        algorithm,
        objective,
        d,
        init,
        stepsizes,
        gamma,
        tau,
        schedule,
        iters,
        seeds,
        output,
        lyapunov,
        force,
        vary,
        raw,
    })
}

/// A config with every derived quantity computed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub mixing: MixingMatrix,
    pub objective: Option<Objective>,
    pub x0: Mat,
    pub gamma: f64,
    pub tau: Option<f64>,
    pub schedule: Option<ScalingSchedule>,
    pub certificate: Option<RateCertificate>,
    pub lyapunov: Option<(LyapunovVariant, f64)>,
    pub x_star: Option<Vec<f64>>,
}

fn build_objective(spec: &ObjectiveSpec, n: usize, d: usize, x0: &Mat) -> Result<Objective> {
    match spec {
        ObjectiveSpec::Consensus => Ok(Objective::quadratic_consensus(x0)),
        ObjectiveSpec::Quadratic { mu, l, seed } => Objective::synthetic_quadratic(n, d, *mu, *l, *seed),
        ObjectiveSpec::Logistic {
            samples,
            ridge,
            partition,
            scale,
            data_seed,
            file,
        } => {
            let data = match file {
                Some(p) => Dataset::load_csv(p)?,
                None => Dataset::synthetic_two_class(*samples, d, *data_seed),
            };
            Objective::logistic(&data, n, *partition, *ridge, *scale)
        }
    }
}

fn initial_point(init: InitSpec, n: usize, d: usize) -> Mat {
    match init {
        InitSpec::Zeros => Mat::zeros(n, d),
        InitSpec::Random(seed) => {
            let mut rng = stream_rng(seed, u64::MAX);
            Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
        }
    }
}

fn require_valid(cert: &RateCertificate, force: bool) -> Result<()> {
    if cert.valid || force {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "theorem {} does not certify this setting: {}",
            cert.theorem,
            cert.reasons.join("; ")
        )))
    }
}

impl ExperimentConfig {
    /// Builds the graph, objective, start point, stepsizes, schedule and
    /// certificate.
    pub fn resolve(&self) -> Result<Experiment> {
        let graph = build_graph(self.graph.kind, self.graph.n, self.graph_seed)?;
        let m = metropolis_weights(&graph)?;
        let n = m.n();
        let q = &self.compressor;
        let algo = self.algorithm;
        let theorem = self.stepsizes == StepMode::Theorem;

        let (objective, x0) = match &self.objective {
            None => (None, initial_point(self.init, n, self.d)),
            Some(spec) => {
                // the consensus objective is built on X⁰ itself
                let pre = initial_point(self.init, n, self.d);
                let obj = build_objective(spec, n, self.d, &pre)?;
                let x0 = if obj.d() == self.d { pre } else { initial_point(self.init, n, obj.d()) };
                (Some(obj), x0)
            }
        };
        let d = x0.ncols();
        if !self.force {
            check_contract(algo, q, d)?;
        }
        let contract = q.contract(d);
        let x_star = match &objective {
            Some(o) => Some(o.reference_optimum(1e-10)?),
            None => None,
        };

        let mut gamma = self.gamma.unwrap_or(1.0);
        let mut tau = None;
        let mut schedule = None;
        let mut certificate = None;
        let mut lyapunov = None;
        let no_contract = |what: &str| {
            Error::ContractMismatch(format!("theorem stepsizes for {algo} need {what}; `{q}` at d={d} has none"))
        };

        match algo {
            AlgoName::Gossip => {}
            AlgoName::Choco => {
                if let Some(delta) = contract.contracted {
                    let cert = choco_rate(delta, &m, self.gamma);
                    if theorem {
                        require_valid(&cert, self.force)?;
                        gamma = cert.gamma;
                    }
                    certificate = Some(cert);
                } else if theorem {
                    return Err(no_contract("a delta-contracted compressor"));
                }
            }
            AlgoName::Ccs => {
                let (delta, p) = contract.absolute.ok_or_else(|| no_contract("a bounded-absolute compressor"))?;
                let mut cert = ccs_schedule(delta, p, n, d, &m, self.gamma);
                if theorem {
                    require_valid(&cert, self.force)?;
                }
                gamma = cert.gamma;
                let sch = match self.schedule.unwrap_or(ScheduleSpec::Theorem) {
                    ScheduleSpec::Theorem => {
                        let c_s = ccs_initial_scale(&cert, consensus_error(&x0), max_row_norm(&x0, p));
                        cert.set("c_s", c_s);
                        ScalingSchedule::new(c_s, cert.rate)?
                    }
                    ScheduleSpec::DefaultDecay => {
                        let base = 3.0 * max_row_norm(&x0, p);
                        ScalingSchedule::new(if base > 0.0 { base } else { 1.0 }, 0.99)?
                    }
                    ScheduleSpec::Explicit { c_s, beta } => ScalingSchedule::new(c_s, beta)?,
                };
                schedule = Some(sch);
                certificate = Some(cert);
            }
            AlgoName::Nids | AlgoName::Cold | AlgoName::DynaCold => {
                let obj = objective.as_ref().expect("optimization algorithms carry an objective");
                let (mu, l) = (obj.mu(), obj.l());
                let xs = x_star.as_ref().unwrap();
                let explore = ColdConfig::exploration(obj, &m);
                match algo {
                    AlgoName::Nids => {
                        gamma = match self.stepsizes {
                            StepMode::Explicit => gamma,
                            _ => 1.0 / (2.0 * l),
                        };
                        if theorem {
                            // NIDS is COLD with exact messages and τγ = 1/2
                            certificate = Some(cold_rate_unbiased(mu, l, 0.0, &m, Some(gamma), Some(0.5 / gamma)));
                        }
                    }
                    AlgoName::Cold => {
                        let delta = contract.contracted;
                        let (g, t) = match self.stepsizes {
                            StepMode::Explicit => (gamma, self.tau.unwrap()),
                            StepMode::Exploration => (explore.gamma, explore.tau),
                            StepMode::Theorem => {
                                let delta = delta.ok_or_else(|| no_contract("a delta-contracted compressor"))?;
                                if q.is_unbiased() {
                                    let c = cold_rate_unbiased(mu, l, delta, &m, None, None);
                                    (c.gamma, c.tau.unwrap())
                                } else {
                                    // the biased theorem only caps (γ, τ); take half of each cap
                                    let g = 0.5 * (1.0 - delta) / (mu + l);
                                    (g, 0.5 * (1.0 - delta) / (2.0 * g * (1.0 - m.lambda_n)))
                                }
                            }
                        };
                        gamma = g;
                        tau = Some(t);
                        if let Some(delta) = delta {
                            let (cert, variant) = if q.is_unbiased() {
                                (cold_rate_unbiased(mu, l, delta, &m, Some(g), Some(t)), LyapunovVariant::Unbiased)
                            } else {
                                (cold_rate_biased(mu, l, delta, &m, g, t), LyapunovVariant::Biased)
                            };
                            if theorem {
                                require_valid(&cert, self.force)?;
                            }
                            if self.stepsizes != StepMode::Exploration {
                                certificate = Some(cert);
                            }
                            if self.lyapunov == LyapunovChoice::Auto && self.stepsizes != StepMode::Exploration {
                                lyapunov = Some((variant, delta));
                            }
                        }
                    }
                    _ => {
                        let (delta, p) = match (contract.absolute, contract.contracted) {
                            (Some(a), _) => a,
                            (None, Some(c)) => (c, 2.0),
                            (None, None) => (f64::NAN, 2.0),
                        };
                        let mut cert = None;
                        let (g, t) = match self.stepsizes {
                            StepMode::Explicit => (gamma, self.tau.unwrap()),
                            StepMode::Exploration => (explore.gamma, explore.tau),
                            StepMode::Theorem => {
                                let (delta, p) =
                                    contract.absolute.ok_or_else(|| no_contract("a bounded-absolute compressor"))?;
                                let c = dyna_cold_schedule(mu, l, delta, p, n, d, &m);
                                require_valid(&c, self.force)?;
                                let gt = (c.gamma, c.tau.unwrap());
                                cert = Some(c);
                                gt
                            }
                        };
                        gamma = g;
                        tau = Some(t);
                        let cfg = ColdConfig::new(g, t)?;
                        let sch = match self.schedule.unwrap_or(ScheduleSpec::DefaultDecay) {
                            ScheduleSpec::Theorem => {
                                let c = cert.as_mut().unwrap();
                                let (e1, e2) = initial_split_lyapunov(&m, obj, &cfg, &x0, p, xs)?;
                                let (ct, cc) = dyna_cold_initial_constants(c, e1, e2);
                                c.set("e1_0", e1);
                                c.set("e2_0", e2);
                                c.set("c_tilde", ct);
                                c.set("c", cc);
                                envelope_schedule(cc, c.rate)?
                            }
                            ScheduleSpec::DefaultDecay => default_decay_schedule(obj, &x0, g, p)?,
                            ScheduleSpec::Explicit { c_s, beta } => ScalingSchedule::new(c_s, beta)?,
                        };
                        schedule = Some(sch);
                        if cert.is_some() && self.lyapunov == LyapunovChoice::Auto && delta.is_finite() {
                            lyapunov = Some((LyapunovVariant::Scaled, delta));
                        }
                        certificate = cert;
                    }
                }
            }
        }
        if let LyapunovChoice::Variant(v) = self.lyapunov {
            if algo.is_consensus() {
                return Err(Error::InvalidInput(format!("{algo} has no selectable Lyapunov function")));
            }
            let delta = contract
                .contracted
                .or(contract.absolute.map(|a| a.0))
                .unwrap_or(0.0);
            lyapunov = Some((v, delta));
        }
        if self.lyapunov == LyapunovChoice::Off {
            lyapunov = None;
        }
        Ok(Experiment {
            config: self.clone(),
            mixing: m,
            objective,
            x0,
            gamma,
            tau,
            schedule,
            certificate,
            lyapunov,
            x_star,
        })
    }
}

fn tag_seed(mut t: Trace, seed: u64) -> Trace {
    for r in &mut t.records {
        r.seed = Some(seed);
    }
    t
}

impl Experiment {
    pub fn cold_config(&self) -> Option<ColdConfig> {
        let tau = self.tau?;
        Some(ColdConfig {
            gamma: self.gamma,
            tau,
            schedule: self.schedule,
        })
    }

    /// One seeded run; the seed selects the compressor's rng stream.
    pub fn run_seed(&self, seed: u64) -> Result<Trace> {
        let c = &self.config;
        let m = &self.mixing;
        let q = &c.compressor;
        let gopts = GossipOptions {
            seed,
            force: c.force,
            ..Default::default()
        };
        let ropts = RunOptions {
            seed,
            force: c.force,
            x_star: self.x_star.clone(),
            lyapunov: self.lyapunov,
            keep_iterates: false,
        };
        let t = match c.algorithm {
            AlgoName::Gossip => exact_gossip_run(m, &self.x0, c.iters),
            AlgoName::Choco => choco_gossip_run(m, &self.x0, q, self.gamma, c.iters, &gopts)?,
            AlgoName::Ccs => ccs_run(m, &self.x0, q, self.gamma, self.schedule.as_ref().unwrap(), c.iters, &gopts)?,
            AlgoName::Nids => nids_run(m, self.objective.as_ref().unwrap(), self.gamma, &self.x0, c.iters, &ropts)?,
            AlgoName::Cold => {
                let cfg = ColdConfig {
                    schedule: None,
                    ..self.cold_config().unwrap()
                };
                cold_run(m, self.objective.as_ref().unwrap(), q, &cfg, &self.x0, c.iters, &ropts)?
            }
            AlgoName::DynaCold => dyna_cold_run(
                m,
                self.objective.as_ref().unwrap(),
                q,
                &self.cold_config().unwrap(),
                &self.x0,
                c.iters,
                &ropts,
            )?,
        };
        Ok(tag_seed(t, seed))
    }

    /// Error column the summary thresholds refer to.
    pub fn primary_metric(&self) -> &'static str {
        if self.config.algorithm.is_consensus() {
            "consensus_error"
        } else {
            "optimality_gap"
        }
    }

    /// `#` header lines (without the `# ` prefix).
    pub fn metadata(&self, seed: Option<u64>) -> Vec<String> {
        let c = &self.config;
        let mut out = vec![format!("coldsim trace v{}", env!("CARGO_PKG_VERSION"))];
        out.push(format!("config.task={}", c.raw.get("task").map(String::as_str).unwrap_or("")));
        out.push(format!("config.algorithm={}", c.algorithm));
        out.push(format!("config.graph={}", c.graph));
        out.push(format!("config.graph_seed={}", c.graph_seed));
        out.push(format!("config.compressor={}", c.compressor));
        if let Some(o) = &c.objective {
            out.push(format!("config.objective={o}"));
        }
        out.push(format!("config.d={}", self.x0.ncols()));
        out.push(format!(
            "config.init={}",
            match c.init {
                InitSpec::Zeros => "zeros".to_string(),
                InitSpec::Random(s) => format!("random:{s}"),
            }
        ));
        out.push(format!(
            "config.stepsizes={}",
            match c.stepsizes {
                StepMode::Theorem => "theorem",
                StepMode::Exploration => "exploration",
                StepMode::Explicit => "explicit",
            }
        ));
        out.push(format!("config.iters={}", c.iters));
        out.push(format!(
            "config.seeds={}",
            c.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        ));
        out.push(format!("config.force={}", c.force));
        out.push(format!("gamma={:?}", self.gamma));
        if let Some(t) = self.tau {
            out.push(format!("tau={t:?}"));
        }
        if let Some(s) = &self.schedule {
            out.push(format!("schedule.c_s={:?}", s.c_s));
            out.push(format!("schedule.beta={:?}", s.beta));
        }
        if let Some((v, delta)) = self.lyapunov {
            out.push(format!("lyapunov={v:?}"));
            out.push(format!("lyapunov.delta={delta:?}"));
        }
        // overridden stepsizes or schedules leave the run outside the theorem
        let certified = self.certificate.as_ref().is_some_and(|c| c.valid)
            && c.stepsizes == StepMode::Theorem
            && matches!(c.schedule, None | Some(ScheduleSpec::Theorem));
        out.push(if certified { "certified=true".into() } else { "certified=false (uncertified)".to_string() });
        if let Some(seed) = seed {
            out.push(format!("seed={seed}"));
        }
        if let Some(cert) = &self.certificate {
            for line in cert.to_key_values().lines() {
                out.push(format!("cert.{line}"));
            }
        }
        out
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a trace CSV: `#` metadata lines, the header row, then one row per
/// iteration. Absent values are empty fields.
pub fn write_trace<W: Write>(w: W, metadata: &[String], records: &[TraceRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    for line in metadata {
        writeln!(w, "# {line}")?;
    }
    let mut cw = csv::WriterBuilder::new().from_writer(w);
    cw.write_record(TRACE_COLUMNS).map_err(|e| Error::Io(e.to_string()))?;
    for r in records {
        let opt = |v: Option<f64>| v.map(fmt_value).unwrap_or_default();
        cw.write_record([
            r.iter.to_string(),
            opt(r.consensus_error),
            opt(r.optimality_gap),
            opt(r.max_node_error),
            opt(r.lyapunov),
            opt(r.innovation_max),
            opt(r.scale_s),
            fmt_value(r.bits_cumulative),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    cw.flush()?;
    Ok(())
}

/// Metadata lines (prefix stripped) and records of a trace CSV.
pub fn read_trace(path: &Path) -> Result<(Vec<String>, Vec<TraceRecord>)> {
    let text = fs::read_to_string(path)?;
    let mut meta = Vec::new();
    let mut body = String::new();
    for line in text.lines() {
        match line.strip_prefix('#') {
            Some(m) => meta.push(m.trim_start().to_string()),
            None => {
                body.push_str(line);
                body.push('\n');
            }
        }
    }
    let mut rd = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != TRACE_COLUMNS {
        return Err(Error::Schema(format!(
            "{}: header `{}` does not match `{}`",
            path.display(),
            header.join(","),
            TRACE_COLUMNS.join(",")
        )));
    }
    let mut records = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let f = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Schema(format!("{}: row {row}: bad number `{s}`", path.display())))
            }
        };
        let int = |i: usize| -> Result<Option<u64>> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Schema(format!("{}: row {row}: bad integer `{s}`", path.display())))
            }
        };
        records.push(TraceRecord {
            iter: int(0)?.ok_or_else(|| Error::Schema(format!("{}: row {row}: missing iter", path.display())))?
                as usize,
            consensus_error: f(1)?,
            optimality_gap: f(2)?,
            max_node_error: f(3)?,
            lyapunov: f(4)?,
            innovation_max: f(5)?,
            scale_s: f(6)?,
            bits_cumulative: f(7)?.ok_or_else(|| Error::Schema(format!("{}: row {row}: missing bits", path.display())))?,
            seed: int(8)?,
        });
    }
    Ok((meta, records))
}

/// Certificate embedded in trace metadata, if any.
pub fn certificate_from_metadata(meta: &[String]) -> Option<Result<RateCertificate>> {
    let block: Vec<&str> = meta.iter().filter_map(|l| l.strip_prefix("cert.")).collect();
    if block.is_empty() {
        None
    } else {
        Some(RateCertificate::from_key_values(&block.join("\n")))
    }
}

/// Seed-mean of every float column per iteration and bits-to-ε.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub metric: String,
    /// `(iter, column means in TRACE_COLUMNS order without iter/seed, seeds present)`.
    pub rows: Vec<(usize, Vec<Option<f64>>, usize)>,
    /// `(ε, mean bits over seeds that reached ε, mean iterations, seeds reached, seeds)`.
    pub bits_to_eps: Vec<(f64, Option<f64>, Option<f64>, usize, usize)>,
}

const MEAN_COLUMNS: [&str; 7] = [
    "consensus_error",
    "optimality_gap",
    "max_node_error",
    "lyapunov",
    "innovation_max",
    "scale_s",
    "bits_cumulative",
];

/// Summarizes per-seed records; only what the per-seed CSVs contain is used.
pub fn summarize(traces: &[Vec<TraceRecord>], metric: &str) -> Summary {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(len);
    for k in 0..len {
        let present: Vec<&TraceRecord> = traces.iter().filter_map(|t| t.get(k)).collect();
        let means = MEAN_COLUMNS
            .iter()
            .map(|c| {
                let vals: Vec<f64> = present.iter().filter_map(|r| r.column(c)).collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect();
        rows.push((k, means, present.len()));
    }
    let bits_to_eps = EPSILONS
        .iter()
        .map(|&eps| {
            let hits: Vec<&TraceRecord> = traces
                .iter()
                .filter_map(|t| t.iter().find(|r| r.column(metric).is_some_and(|v| v <= eps)))
                .collect();
            let n = hits.len();
            let mean = |f: &dyn Fn(&TraceRecord) -> f64| {
                (n > 0).then(|| hits.iter().map(|r| f(r)).sum::<f64>() / n as f64)
            };
            (
                eps,
                mean(&|r| r.bits_cumulative),
                mean(&|r| r.iter as f64),
                n,
                traces.len(),
            )
        })
        .collect();
    Summary {
        metric: metric.to_string(),
        rows,
        bits_to_eps,
    }
}

pub fn write_summary<W: Write>(w: W, metadata: &[String], s: &Summary) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    for line in metadata {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "# metric={}", s.metric)?;
    for (eps, bits, iters, hit, total) in &s.bits_to_eps {
        let e = format!("{eps:e}");
        writeln!(w, "# bits_to_eps.{e}={}", bits.map(fmt_value).unwrap_or_default())?;
        writeln!(w, "# iters_to_eps.{e}={}", iters.map(fmt_value).unwrap_or_default())?;
        writeln!(w, "# reached.{e}={hit}/{total}")?;
    }
    let mut header = vec!["iter"];
    header.extend(MEAN_COLUMNS);
    header.push("seeds");
    writeln!(w, "{}", header.join(","))?;
    for (k, means, count) in &s.rows {
        let cells: Vec<String> = means.iter().map(|v| v.map(fmt_value).unwrap_or_default()).collect();
        writeln!(w, "{k},{},{count}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Output of [`run_experiment`].
#[derive(Debug)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: Option<Summary>,
    /// Seeds that failed, with their error.
    pub failures: Vec<(u64, Error)>,
    pub certificate: Option<RateCertificate>,
}

fn timestamp_line() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("timestamp_unix={secs}")
}

/// Runs every seed (in parallel) and writes `trace_seed<k>.csv` files plus
/// `summary.csv` into `out`. A `certify` task writes `certificate.txt` only.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, reproducible: bool) -> Result<RunOutcome> {
    let exp = cfg.resolve()?;
    fs::create_dir_all(out)?;
    if cfg.task == Task::Certify {
        let cert = exp
            .certificate
            .clone()
            .ok_or_else(|| Error::InvalidInput(format!("no rate theorem applies to {}", cfg.algorithm)))?;
        let path = out.join("certificate.txt");
        fs::write(&path, cert.to_key_values())?;
        return Ok(RunOutcome {
            files: vec![path],
            summary: None,
            failures: Vec::new(),
            certificate: Some(cert),
        });
    }
    let results: Vec<(u64, Result<Trace>)> = cfg.seeds.par_iter().map(|&s| (s, exp.run_seed(s))).collect();
    let mut files = Vec::new();
    let mut failures = Vec::new();
    let mut kept = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(t) => {
                let mut meta = exp.metadata(Some(seed));
                if !reproducible {
                    meta.insert(1, timestamp_line());
                }
                if !t.scaling_violations.is_empty() {
                    meta.push(format!("scaling_violations={}", t.scaling_violations.len()));
                }
                let path = out.join(format!("trace_seed{seed}.csv"));
                write_trace(fs::File::create(&path)?, &meta, &t.records)?;
                files.push(path);
                kept.push(t.records);
            }
            Err(e) => failures.push((seed, e)),
        }
    }
    let summary = summarize(&kept, exp.primary_metric());
    let mut meta = exp.metadata(None);
    if !reproducible {
        meta.insert(1, timestamp_line());
    }
    let path = out.join("summary.csv");
    write_summary(fs::File::create(&path)?, &meta, &summary)?;
    files.push(path);
    Ok(RunOutcome {
        files,
        summary: Some(summary),
        failures,
        certificate: exp.certificate,
    })
}

/// One point of a sweep.
#[derive(Debug)]
pub struct SweepPoint {
    pub value: String,
    pub outcome: Result<RunOutcome>,
}

/// Reruns `raw` with `key` set to each value, into `out/<key>=<value>/`, and
/// writes `sweep.csv` with bits-to-ε per value.
pub fn run_sweep(
    raw: &BTreeMap<String, String>,
    key: &str,
    values: &[String],
    force: bool,
    out: &Path,
    reproducible: bool,
) -> Result<Vec<SweepPoint>> {
    if !KEYS.contains(&key) || key == "vary" || key == "task" {
        return Err(Error::InvalidInput(format!("cannot vary `{key}`")));
    }
    fs::create_dir_all(out)?;
    let mut points = Vec::new();
    for v in values {
        let mut pairs = raw.clone();
        pairs.insert(key.to_string(), v.clone());
        pairs.remove("vary");
        if pairs.get("task").map(String::as_str) == Some("sweep") {
            let algo = pairs.get("algorithm").and_then(|a| a.parse::<AlgoName>().ok());
            let task = if algo.is_some_and(AlgoName::is_consensus) { "consensus" } else { "optimize" };
            pairs.insert("task".into(), task.into());
        }
        let dir = out.join(format!("{key}={}", v.replace(['/', ':', ';', ','], "_")));
        let outcome = config_from_pairs(pairs, force)
            .map_err(|e| Error::InvalidInput(e.to_string()))
            .and_then(|cfg| run_experiment(&cfg, &dir, reproducible));
        points.push(SweepPoint {
            value: v.clone(),
            outcome,
        });
    }
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("sweep.csv"))?);
    writeln!(w, "{key},eps,bits_to_eps,iters_to_eps,reached,seeds,error")?;
    for p in &points {
        match &p.outcome {
            Ok(o) => {
                for (eps, bits, iters, hit, total) in &o.summary.as_ref().unwrap().bits_to_eps {
                    writeln!(
                        w,
                        "{},{eps:e},{},{},{hit},{total},",
                        p.value,
                        bits.map(fmt_value).unwrap_or_default(),
                        iters.map(fmt_value).unwrap_or_default()
                    )?;
                }
            }
            Err(e) => writeln!(w, "{},,,,,,\"{}\"", p.value, e.to_string().replace('"', "'"))?,
        }
    }
    w.flush()?;
    Ok(points)
}

/// Checks the columns a certificate governs.
///
/// Mean-square theorems (t1-t3) fit the Lyapunov column past `burn_in` and
/// allow `fit_slack` above the certified factor. Deterministic theorems (t4,
/// t5) check per-step envelopes with relative slack `1e-12`: t4 bounds
/// `consensus_error` from its first value and `innovation_max` from `c_s`;
/// t5 bounds `lyapunov` (e₁) by `c̃β^k` and `innovation_max²` by `cβ^k`.
pub fn certify_records(
    records: &[TraceRecord],
    cert: &RateCertificate,
    burn_in: usize,
    fit_slack: f64,
) -> Result<Vec<(String, CertReport)>> {
    let col = |name: &str| -> Vec<Option<f64>> { records.iter().map(|r| r.column(name)).collect() };
    let need = |name: &str, v: &[Option<f64>]| -> Result<()> {
        if v.iter().all(Option::is_none) {
            Err(Error::Schema(format!("trace has no `{name}` values")))
        } else {
            Ok(())
        }
    };
    let beta = cert.rate;
    let mut out = Vec::new();
    match cert.theorem {
        TheoremId::T1 | TheoremId::T2 | TheoremId::T3 => {
            let v = col("lyapunov");
            need("lyapunov", &v)?;
            let r = certify_values(&v, beta, None, burn_in, fit_slack, CertMode::FittedRate)?;
            out.push(("lyapunov".to_string(), r));
        }
        TheoremId::T4 => {
            let v = col("consensus_error");
            need("consensus_error", &v)?;
            out.push((
                "consensus_error".into(),
                certify_values(&v, beta, None, 0, 1e-12, CertMode::PerStepEnvelope)?,
            ));
            let v = col("innovation_max");
            need("innovation_max", &v)?;
            let c_s = cert
                .get("c_s")
                .ok_or_else(|| Error::Schema("certificate lacks c_s".into()))?;
            out.push((
                "innovation_max".into(),
                certify_values(&v, beta, Some(c_s), 0, 1e-12, CertMode::PerStepEnvelope)?,
            ));
        }
        TheoremId::T5 => {
            let ct = cert
                .get("c_tilde")
                .ok_or_else(|| Error::Schema("certificate lacks c_tilde".into()))?;
            let c = cert.get("c").ok_or_else(|| Error::Schema("certificate lacks c".into()))?;
            let v = col("lyapunov");
            need("lyapunov", &v)?;
            out.push((
                "lyapunov".into(),
                certify_values(&v, beta, Some(ct), 0, 1e-12, CertMode::PerStepEnvelope)?,
            ));
            let v: Vec<Option<f64>> = col("innovation_max").into_iter().map(|x| x.map(|y| y * y)).collect();
            need("innovation_max", &v)?;
            out.push((
                "innovation_max^2".into(),
                certify_values(&v, beta, Some(c), 0, 1e-12, CertMode::PerStepEnvelope)?,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_consensus_config() {
        let c = parse_config("task=consensus\nalgorithm=gossip\ngraph=ring:4").unwrap();
        assert_eq!(c.task, Task::Consensus);
        assert_eq!(c.graph, GraphSpec { kind: GraphKind::Ring, n: 4 });
        assert_eq!(c.iters, 100);
        assert_eq!(c.seeds, vec![0]);
    }

    #[test]
    fn all_errors_are_reported() {
        let e = parse_config("algorithm=cold\ncompressor=binary\nbogus=1\niters=x").unwrap_err();
        let text = e.to_string();
        assert!(text.contains("bogus"), "{text}");
        let e = parse_config("algorithm=cold\ncompressor=binary\niters=x").unwrap_err();
        assert!(e.0.iter().any(|x| matches!(x, Error::ContractMismatch(_))));
        assert!(e.0.iter().any(|x| x.to_string().contains("task")));
        assert!(e.0.iter().any(|x| x.to_string().contains("iters")));
    }

    #[test]
    fn contract_message_names_both_classes() {
        let e = check_contract(AlgoName::Cold, &CompressorSpec::binary(), 2).unwrap_err();
        let s = e.to_string();
        assert!(s.contains("delta-contracted") && s.contains("bounded-absolute"), "{s}");
    }

    #[test]
    fn seeds_accept_lists_and_ranges() {
        assert_eq!(parse_seeds("0..3,7").unwrap(), vec![0, 1, 2, 7]);
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("3..3").is_err());
    }

    #[test]
    fn schedule_on_unscaled_algorithm_is_rejected() {
        let e = parse_config("task=optimize\nalgorithm=cold\ncompressor=C1\nschedule=paper_default").unwrap_err();
        assert!(e.to_string().contains("schedule"));
    }

    #[test]
    fn objective_spec_round_trips() {
        for s in ["consensus", "quadratic:mu=1,L=10,seed=3", "logistic:samples=100,r=0.1,partition=sorted,scale=node,data_seed=2"] {
            let o: ObjectiveSpec = s.parse().unwrap();
            assert_eq!(o.to_string().parse::<ObjectiveSpec>().unwrap(), o);
        }
        assert!("quadratic:mu=1,bad=2".parse::<ObjectiveSpec>().is_err());
    }
}
