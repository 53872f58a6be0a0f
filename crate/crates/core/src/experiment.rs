//! End-to-end synthetic replications: strong vs. weak training, EER against
//! data volume, the pooled-training grid, and pooling vs. adaptation under a
//! condition shift.
//!
//! Every job trains and scores on data drawn from one seed's [`World`]. Jobs
//! run in parallel on the current rayon pool and are collected in a fixed
//! order, so results do not depend on the number of threads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{adapt, cosine_scores, train_backend, Backend, TrainedBackend};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, summarize_experiment, SeedStats, Summary};
use crate::io::{write_atomic, LabeledDataset};
use crate::labeling::pool_datasets;
use crate::plda::TrainConfig;
use crate::synth::{EvalSplit, SynthConfig, SynthSet, World, CUSTOMER, SERVICE};

pub const COSINE: &str = "cosine";
pub const STRONG: &str = "strong";
pub const WEAK_CUSTOMER: &str = "weak-customer";
pub const WEAK_SERVICE: &str = "weak-service";
pub const WEAK_MIX: &str = "weak-mix";
pub const POOLED: &str = "pooled";
pub const ADAPTED: &str = "adapted";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentName {
    Table2,
    Fig2,
    Fig3,
    Fig4,
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Self::Table2),
            "fig2" => Ok(Self::Fig2),
            "fig3" => Ok(Self::Fig3),
            "fig4" => Ok(Self::Fig4),
            _ => Err(Error::Config(format!(
                "unknown experiment {s:?}; expected table2, fig2, fig3 or fig4"
            ))),
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Table2 => "table2",
            Self::Fig2 => "fig2",
            Self::Fig3 => "fig3",
            Self::Fig4 => "fig4",
        })
    }
}

/// Data axes. `strong` counts strongly labeled speakers, `weak` counts
/// weakly labeled sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub strong: Vec<usize>,
    pub weak: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSizes {
    pub speakers: usize,
    pub enroll_per_speaker: usize,
    pub test_per_speaker: usize,
}

impl Default for EvalSizes {
    fn default() -> Self {
        Self {
            speakers: 200,
            enroll_per_speaker: 1,
            test_per_speaker: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub synth: SynthConfig,
    pub grid: Grid,
    pub seeds: Vec<u64>,
    pub eval: EvalSizes,
    pub rank: usize,
    pub iterations: usize,
    pub whiten: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Desk-scale defaults for each experiment.
    pub fn new(name: ExperimentName) -> Self {
        let mut synth = SynthConfig::default();
        let grid = match name {
            ExperimentName::Table2 => Grid {
                strong: vec![2000],
                weak: vec![2000],
            },
            ExperimentName::Fig2 => {
                let sizes = vec![50, 100, 200, 500, 1000, 2000];
                Grid {
                    strong: sizes.clone(),
                    weak: sizes,
                }
            }
            ExperimentName::Fig3 => Grid {
                strong: vec![50, 100, 200, 500, 1000, 2000],
                weak: vec![0, 200, 500, 800, 1000, 2000],
            },
            ExperimentName::Fig4 => {
                synth.condition_shift = 4.5;
                Grid {
                    strong: vec![100, 500, 2000],
                    weak: vec![200, 500, 1000, 2000],
                }
            }
        };
        Self {
            name,
            synth,
            grid,
            seeds: (0..5).collect(),
            eval: EvalSizes::default(),
            rank: TrainConfig::default().rank,
            iterations: TrainConfig::default().iterations,
            whiten: false,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.grid.strong.is_empty() || self.grid.weak.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        if self.name == ExperimentName::Table2 && self.grid.weak.iter().any(|&w| w < 2) {
            return Err(Error::Config(
                "table2 needs at least 2 weak sessions for the mixed condition".into(),
            ));
        }
        if self.name == ExperimentName::Fig4 && self.grid.weak.contains(&0) {
            return Err(Error::Config("fig4 weak amounts must be positive".into()));
        }
        self.synth.validate()
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            rank: self.rank,
            iterations: self.iterations,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// EER of one condition on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub condition: String,
    pub n_strong: usize,
    pub n_weak: usize,
    pub seed: u64,
    pub eer: f64,
}

/// Seed statistics of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub n_strong: usize,
    pub n_weak: usize,
    pub eers: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

impl ConditionSummary {
    pub fn stats(&self) -> SeedStats {
        SeedStats::from_values(&self.eers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub cells: Vec<CellResult>,
}

impl ExperimentResult {
    /// Conditions in first-appearance order.
    pub fn summaries(&self) -> Vec<ConditionSummary> {
        let mut order = Vec::new();
        let mut eers: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
        for c in &self.cells {
            let key = (c.condition.clone(), c.n_strong, c.n_weak);
            if !eers.contains_key(&key) {
                order.push(key.clone());
            }
            eers.entry(key).or_default().push(c.eer);
        }
        order
            .into_iter()
            .map(|key| {
                let values = eers.remove(&key).unwrap_or_default();
                let s = SeedStats::from_values(&values);
                ConditionSummary {
                    condition: key.0,
                    n_strong: key.1,
                    n_weak: key.2,
                    eers: values,
                    mean: s.mean,
                    se: s.se,
                }
            })
            .collect()
    }

    pub fn stats(&self, condition: &str, n_strong: usize, n_weak: usize) -> Option<SeedStats> {
        let values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.condition == condition && c.n_strong == n_strong && c.n_weak == n_weak)
            .map(|c| c.eer)
            .collect();
        (!values.is_empty()).then(|| SeedStats::from_values(&values))
    }

    /// Condition with the lowest mean EER over the weak axis at fixed
    /// `n_strong`, with the weak amount that achieved it.
    pub fn best_over_weak(&self, condition: &str, n_strong: usize) -> Option<(usize, SeedStats)> {
        self.summaries()
            .into_iter()
            .filter(|s| s.condition == condition && s.n_strong == n_strong)
            .min_by(|a, b| a.mean.total_cmp(&b.mean))
            .map(|s| (s.n_weak, s.stats()))
    }

    /// Seed-mean table with display condition names, for table2.
    pub fn table(&self) -> Result<Summary> {
        let summaries = self.summaries();
        summarize_experiment(
            summaries
                .iter()
                .map(|s| (display_name(&s.condition), s.mean)),
        )
    }

    pub fn fig4_rows(&self) -> Vec<Fig4Row> {
        self.spec
            .grid
            .strong
            .iter()
            .filter_map(|&n| {
                Some(Fig4Row {
                    n_strong: n,
                    strong_only: self.stats(STRONG, n, 0)?,
                    pooled: self.best_over_weak(POOLED, n)?,
                    adapted: self.best_over_weak(ADAPTED, n)?,
                })
            })
            .collect()
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from("condition,n_strong,n_weak,seed,eer\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{:?}\n",
                c.condition, c.n_strong, c.n_weak, c.seed, c.eer
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("condition,n_strong,n_weak,n_seeds,mean_eer,se\n");
        for c in self.summaries() {
            s.push_str(&format!(
                "{},{},{},{},{:?},{:?}\n",
                c.condition,
                c.n_strong,
                c.n_weak,
                c.eers.len(),
                c.mean,
                c.se
            ));
        }
        s
    }

    pub fn manifest(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            experiment: ExperimentName,
            version: &'a str,
            spec: &'a ExperimentSpec,
            conditions: Vec<ConditionSummary>,
        }
        let m = Manifest {
            experiment: self.spec.name,
            version: env!("CARGO_PKG_VERSION"),
            spec: &self.spec,
            conditions: self.summaries(),
        };
        serde_json::to_string_pretty(&m)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `results.csv`, `summary.csv`, `manifest.json`, and for table2
    /// also `table.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            ("results.csv", self.results_csv()),
            ("summary.csv", self.summary_csv()),
            ("manifest.json", self.manifest()?),
        ];
        if self.spec.name == ExperimentName::Table2 {
            files.push(("table.txt", self.table()?.to_table()));
        }
        for (name, text) in files {
            write_atomic(&dir.join(name), |w| w.write_all(text.as_bytes()))?;
        }
        Ok(())
    }
}

fn display_name(condition: &str) -> &str {
    match condition {
        COSINE => "Cosine",
        STRONG => "STRONG",
        WEAK_CUSTOMER => "WEAK-customer",
        WEAK_SERVICE => "WEAK-service",
        WEAK_MIX => "WEAK-mix",
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fig4Row {
    pub n_strong: usize,
    pub strong_only: SeedStats,
    /// Best weak amount and its statistics.
    pub pooled: (usize, SeedStats),
    pub adapted: (usize, SeedStats),
}

/// Shared per-seed state.
struct SeedData {
    seed: u64,
    world: World,
    eval: EvalSplit,
}

impl SeedData {
    fn new(spec: &ExperimentSpec, seed: u64) -> Result<Self> {
        let world = World::new(&SynthConfig {
            seed,
            ..spec.synth.clone()
        })?;
        let e = spec.eval;
        let eval = world.eval_split(e.speakers, e.enroll_per_speaker, e.test_per_speaker)?;
        Ok(Self { seed, world, eval })
    }

    fn eer_of(&self, model: &TrainedBackend) -> Result<f64> {
        let scores =
            Backend::new(&model.model)?.score_trials(&self.eval.trials, &self.eval.vectors)?;
        Ok(compute_eer(&scores)?.eer)
    }

    fn cosine_eer(&self) -> Result<f64> {
        Ok(compute_eer(&cosine_scores(&self.eval.trials, &self.eval.vectors)?)?.eer)
    }

    fn strong(&self, n: usize) -> Result<LabeledDataset> {
        self.world.strong_set(n).true_dataset()
    }

    fn channel(set: &SynthSet, channel: &str) -> SynthSet {
        set.filter(|r| r.local_speaker_id == channel)
    }

    fn weak(&self, n_sessions: usize, channel: &str) -> Result<LabeledDataset> {
        Self::channel(&self.world.sessions(n_sessions), channel).weak_dataset()
    }

    fn cell(&self, condition: &str, n_strong: usize, n_weak: usize, eer: f64) -> CellResult {
        CellResult {
            condition: condition.to_string(),
            n_strong,
            n_weak,
            seed: self.seed,
            eer,
        }
    }
}

type Job<'a> = Box<dyn Fn(&ExperimentSpec) -> Result<Vec<CellResult>> + Send + Sync + 'a>;

fn run_jobs(spec: &ExperimentSpec, jobs: Vec<Job<'_>>) -> Result<ExperimentResult> {
    let results: Vec<Result<Vec<CellResult>>> = jobs.par_iter().map(|job| job(spec)).collect();
    let mut cells = Vec::new();
    for r in results {
        cells.extend(r?);
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        cells,
    })
}

fn seed_data(spec: &ExperimentSpec) -> Result<Vec<SeedData>> {
    spec.validate()?;
    spec.seeds
        .par_iter()
        .map(|&s| SeedData::new(spec, s))
        .collect()
}

/// Cosine, strong, weak-customer, weak-service and a half-and-half weak mix.
/// Uses the largest strong and weak grid values.
pub fn run_table2(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let data = seed_data(spec)?;
    let n_strong = *spec.grid.strong.iter().max().expect("validated");
    let n_weak = *spec.grid.weak.iter().max().expect("validated");
    let mut jobs: Vec<Job> = Vec::new();
    for d in &data {
        let tc = spec.train_config(d.seed);
        jobs.push(Box::new(move |_| {
            Ok(vec![d.cell(COSINE, 0, 0, d.cosine_eer()?)])
        }));
        let tc2 = tc.clone();
        jobs.push(Box::new(move |s| {
            let m = train_backend(&d.strong(n_strong)?, s.whiten, &tc2)?;
            Ok(vec![d.cell(STRONG, n_strong, 0, d.eer_of(&m)?)])
        }));
        for (name, channel) in [(WEAK_CUSTOMER, CUSTOMER), (WEAK_SERVICE, SERVICE)] {
            let tc = tc.clone();
            jobs.push(Box::new(move |s| {
                let m = train_backend(&d.weak(n_weak, channel)?, s.whiten, &tc)?;
                Ok(vec![d.cell(name, 0, n_weak, d.eer_of(&m)?)])
            }));
        }
        jobs.push(Box::new(move |s| {
            let half = n_weak / 2;
            let mut mix = SeedData::channel(&d.world.session_range(0..half), CUSTOMER);
            let serv = SeedData::channel(&d.world.session_range(half..n_weak), SERVICE);
            mix.vectors.extend(serv.vectors);
            mix.records.extend(serv.records);
            let m = train_backend(&mix.weak_dataset()?, s.whiten, &tc)?;
            Ok(vec![d.cell(WEAK_MIX, 0, n_weak, d.eer_of(&m)?)])
        }));
    }
    run_jobs(spec, jobs)
}

/// Strong and weak training against the amount of data. The weak curves use
/// the strong axis values as session counts; cosine is the zero-data point.
pub fn run_fig2(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let data = seed_data(spec)?;
    let mut jobs: Vec<Job> = Vec::new();
    for d in &data {
        jobs.push(Box::new(move |_| {
            Ok(vec![d.cell(COSINE, 0, 0, d.cosine_eer()?)])
        }));
        for &n in &spec.grid.strong {
            jobs.push(Box::new(move |s| {
                let m = train_backend(&d.strong(n)?, s.whiten, &s.train_config(d.seed))?;
                Ok(vec![d.cell(STRONG, n, 0, d.eer_of(&m)?)])
            }));
        }
        for &n in &spec.grid.weak {
            for (name, channel) in [(WEAK_CUSTOMER, CUSTOMER), (WEAK_SERVICE, SERVICE)] {
                jobs.push(Box::new(move |s| {
                    let m = train_backend(&d.weak(n, channel)?, s.whiten, &s.train_config(d.seed))?;
                    Ok(vec![d.cell(name, 0, n, d.eer_of(&m)?)])
                }));
            }
        }
    }
    run_jobs(spec, jobs)
}

/// Pooled training over strong speakers × weak customer sessions. The
/// `n_weak = 0` column is strong-only training.
pub fn run_fig3(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let data = seed_data(spec)?;
    let mut jobs: Vec<Job> = Vec::new();
    for d in &data {
        for &ns in &spec.grid.strong {
            for &nw in &spec.grid.weak {
                jobs.push(Box::new(move |s| {
                    let strong = d.strong(ns)?;
                    let weak = d.weak(nw, CUSTOMER)?;
                    let pooled = pool_datasets(&strong, &weak)?;
                    let m = train_backend(&pooled, s.whiten, &s.train_config(d.seed))?;
                    Ok(vec![d.cell(POOLED, ns, nw, d.eer_of(&m)?)])
                }));
            }
        }
    }
    run_jobs(spec, jobs)
}

/// Strong-only, adapted and pooled training at each strong amount. Adapted
/// and pooled are run at every weak amount; [`ExperimentResult::fig4_rows`]
/// reports the best of each.
pub fn run_fig4(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.synth.condition_shift == 0.0 {
        log::warn!("fig4 with condition_shift = 0: adaptation has nothing to adapt to");
    }
    let data = seed_data(spec)?;
    let mut jobs: Vec<Job> = Vec::new();
    for d in &data {
        for &ns in &spec.grid.strong {
            jobs.push(Box::new(move |s| {
                let tc = s.train_config(d.seed);
                let strong = d.strong(ns)?;
                let base = train_backend(&strong, s.whiten, &tc)?;
                let mut cells = vec![d.cell(STRONG, ns, 0, d.eer_of(&base)?)];
                for &nw in &s.grid.weak {
                    let weak = d.weak(nw, CUSTOMER)?;
                    let adapted = TrainedBackend {
                        model: adapt(&base.model, weak.vectors())?,
                        log_likelihoods: Vec::new(),
                    };
                    cells.push(d.cell(ADAPTED, ns, nw, d.eer_of(&adapted)?));
                    let pooled = train_backend(&pool_datasets(&strong, &weak)?, s.whiten, &tc)?;
                    cells.push(d.cell(POOLED, ns, nw, d.eer_of(&pooled)?));
                }
                Ok(cells)
            }));
        }
    }
    run_jobs(spec, jobs)
}

pub fn run(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let result = match spec.name {
        ExperimentName::Table2 => run_table2(spec),
        ExperimentName::Fig2 => run_fig2(spec),
        ExperimentName::Fig3 => run_fig3(spec),
        ExperimentName::Fig4 => run_fig4(spec),
    }?;
    if let Some(dir) = &spec.output_dir {
        result.write(dir)?;
    }
    Ok(result)
}
