//! Equal error rate, DET points and experiment summaries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ScoreLine, TrialList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    pub is_target: bool,
}

/// Scored trials. All scores are finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    entries: Vec<ScoredTrial>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoredTrial>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite score for trial {} {}",
                e.enroll, e.test
            )));
        }
        Ok(Self { entries })
    }

    /// Builds a score set from `(score, is_target)` pairs with synthetic ids.
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let tagged = targets
            .iter()
            .map(|&s| (s, true))
            .chain(nontargets.iter().map(|&s| (s, false)));
        Self::new(
            tagged
                .enumerate()
                .map(|(i, (score, is_target))| ScoredTrial {
                    enroll: format!("e{i}"),
                    test: format!("t{i}"),
                    score,
                    is_target,
                })
                .collect(),
        )
    }

    /// Joins a scores file with trial flags. Scores lines that carry their
    /// own flag need no trial list.
    pub fn join(scores: &[ScoreLine], trials: Option<&TrialList>) -> Result<Self> {
        let flags: Option<HashMap<(&str, &str), bool>> = trials.map(|t| {
            t.trials()
                .iter()
                .map(|t| ((t.enroll.as_str(), t.test.as_str()), t.is_target))
                .collect()
        });
        let entries = scores
            .iter()
            .map(|s| {
                let from_trials = flags
                    .as_ref()
                    .and_then(|f| f.get(&(s.enroll.as_str(), s.test.as_str())).copied());
                let is_target = match (from_trials, s.is_target) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(Error::Precondition(format!(
                            "trial {} {} is flagged differently in scores and trials",
                            s.enroll, s.test
                        )))
                    }
                    (Some(a), _) => a,
                    (None, Some(b)) => b,
                    (None, None) => {
                        return Err(Error::MissingKey(format!(
                            "target flag for trial {} {}",
                            s.enroll, s.test
                        )))
                    }
                };
                Ok(ScoredTrial {
                    enroll: s.enroll.clone(),
                    test: s.test.clone(),
                    score: s.score,
                    is_target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &[ScoredTrial] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_lines(&self, with_flags: bool) -> Vec<ScoreLine> {
        self.entries
            .iter()
            .map(|e| ScoreLine {
                enroll: e.enroll.clone(),
                test: e.test.clone(),
                score: e.score,
                is_target: with_flags.then_some(e.is_target),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    /// Threshold; a trial is accepted when `score >= threshold`.
    pub threshold: f64,
    pub false_alarm_rate: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub det_points: Vec<DetPoint>,
}

/// EER at the crossing of the false-alarm and miss curves.
///
/// Operating points sit at every distinct score (accept `score >= t`) plus
/// the reject-all point above the highest score. Tied scores share one
/// threshold. Where the two rates cross between adjacent points the EER is
/// read off the straight segment joining them.
pub fn compute_eer(scores: &ScoreSet) -> Result<EvalReport> {
    let mut sorted: Vec<(f64, bool)> = scores
        .entries
        .iter()
        .map(|e| (e.score, e.is_target))
        .collect();
    let n_target = sorted.iter().filter(|(_, t)| *t).count();
    let n_nontarget = sorted.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Precondition(format!(
            "EER needs both classes; got {n_target} target and {n_nontarget} nontarget trials"
        )));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep thresholds upward: at each distinct score t, trials below t are
    // rejected.
    let (nt, nn) = (n_target as f64, n_nontarget as f64);
    let mut det = Vec::new();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        det.push(DetPoint {
            threshold: t,
            false_alarm_rate: (n_nontarget - non_below) as f64 / nn,
            miss_rate: tar_below as f64 / nt,
        });
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    let reject_all = DetPoint {
        threshold: f64::INFINITY,
        false_alarm_rate: 0.0,
        miss_rate: 1.0,
    };

    let gap = |p: &DetPoint| p.false_alarm_rate - p.miss_rate;
    let points = det.iter().chain(std::iter::once(&reject_all));
    let mut prev: Option<&DetPoint> = None;
    let mut eer = (0.5, sorted[sorted.len() - 1].0);
    for p in points {
        let g = gap(p);
        if g <= 0.0 {
            let threshold = if p.threshold.is_finite() {
                p.threshold
            } else {
                sorted[sorted.len() - 1].0
            };
            eer = match prev {
                Some(q) if g < 0.0 => {
                    let gq = gap(q);
                    let alpha = gq / (gq - g);
                    (
                        q.false_alarm_rate + alpha * (p.false_alarm_rate - q.false_alarm_rate),
                        threshold,
                    )
                }
                _ => (p.false_alarm_rate, threshold),
            };
            break;
        }
        prev = Some(p);
    }
    Ok(EvalReport {
        eer: eer.0,
        eer_threshold: eer.1,
        n_target,
        n_nontarget,
        det_points: det,
    })
}

/// One named result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub eer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    /// `name EER%` per row, two decimals.
    pub fn to_table(&self) -> String {
        let mut s = String::from("condition EER%\n");
        for r in &self.rows {
            s.push_str(&format!("{} {:.2}\n", r.name, r.eer * 100.0));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,eer,eer_percent\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:?},{:.2}\n", r.name, r.eer, r.eer * 100.0));
        }
        s
    }

    pub fn lines(&self) -> Vec<String> {
        self.to_table()
            .lines()
            .skip(1)
            .map(str::to_string)
            .collect()
    }
}

/// Rows in the order given.
pub fn summarize_experiment<'a>(
    reports: impl IntoIterator<Item = (&'a str, f64)>,
) -> Result<Summary> {
    let rows: Vec<SummaryRow> = reports
        .into_iter()
        .map(|(name, eer)| SummaryRow {
            name: name.to_string(),
            eer,
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Precondition("nothing to summarize".into()));
    }
    Ok(Summary { rows })
}

/// Mean and standard error of one condition across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: f64,
    /// Sample standard deviation over √n; zero for a single seed.
    pub se: f64,
    pub n: usize,
}

impl SeedStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }

    /// Noise band shared by two conditions: the larger of their standard
    /// errors.
    pub fn band(&self, other: &Self) -> f64 {
        self.se.max(other.se)
    }

    /// Lower EER than `other` by more than the noise band.
    pub fn beats(&self, other: &Self) -> bool {
        other.mean - self.mean > self.band(other)
    }

    /// Means within the noise band of each other.
    pub fn agrees_with(&self, other: &Self) -> bool {
        (self.mean - other.mean).abs() <= self.band(other)
    }
}
