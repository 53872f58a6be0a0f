//! Simplified PLDA: `w = u + V y + z`, with `y ~ N(0, I_K)` shared by all
//! utterances of a speaker and `z ~ N(0, Σ)` drawn per utterance.
//!
//! Training is EM over `(V, Σ)` with `u` held at the sample mean. The E-step
//! groups speakers by utterance count: the posterior precision of `y` depends
//! only on that count, so one Cholesky factorization serves the whole group.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ScoreSet, ScoredTrial};
use crate::io::{IVector, LabeledDataset, TrialList};
use crate::preprocess::MIN_NORM;

/// Σ eigenvalues are floored at this fraction of the largest one.
pub const SIGMA_FLOOR: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    u: DVector<f64>,
    v: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

impl PldaModel {
    /// Validates shapes, finiteness, and that `sigma` is symmetric positive
    /// definite.
    pub fn new(u: DVector<f64>, v: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = u.len();
        if d == 0 {
            return Err(Error::Precondition(
                "model dimension must be at least 1".into(),
            ));
        }
        if v.nrows() != d {
            return Err(Error::Dimension {
                expected: d,
                got: v.nrows(),
            });
        }
        if v.ncols() == 0 || v.ncols() > d {
            return Err(Error::Config(format!(
                "rank {} must be in 1..={d}",
                v.ncols()
            )));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: sigma.nrows(),
            });
        }
        if u.iter()
            .chain(v.iter())
            .chain(sigma.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::Precondition("model has non-finite entries".into()));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::Precondition("sigma is not symmetric".into()));
        }
        if Cholesky::new(sigma.clone()).is_none() {
            return Err(Error::Precondition("sigma is not positive definite".into()));
        }
        Ok(Self { u, v, sigma })
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    /// Global mean `u`.
    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    /// Speaker subspace `V`, D×K.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Residual covariance Σ.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Between-speaker covariance `V Vᵀ`.
    pub fn between(&self) -> DMatrix<f64> {
        &self.v * self.v.transpose()
    }

    /// Marginal covariance of one utterance, `V Vᵀ + Σ`.
    pub fn total(&self) -> DMatrix<f64> {
        self.between() + &self.sigma
    }

    /// Posterior over the speaker factor given all of one speaker's vectors.
    pub fn posterior<'a>(
        &self,
        vectors: impl IntoIterator<Item = &'a DVector<f64>>,
    ) -> Result<SpeakerPosterior> {
        let chol = self.sigma_cholesky(0)?;
        let a = chol.solve(&self.v).transpose();
        let mut sum = DVector::zeros(self.dim());
        let mut count = 0;
        for w in vectors {
            if w.len() != self.dim() {
                return Err(Error::Dimension {
                    expected: self.dim(),
                    got: w.len(),
                });
            }
            sum += w - &self.u;
            count += 1;
        }
        let precision = DMatrix::identity(self.rank(), self.rank()) + (&a * &self.v) * count as f64;
        let mean = Cholesky::new(precision.clone())
            .expect("I + nVᵀΣ⁻¹V is positive definite")
            .solve(&(&a * sum));
        Ok(SpeakerPosterior {
            mean,
            precision,
            count,
        })
    }

    /// Marginal log-likelihood of a labeled dataset under this model.
    pub fn log_likelihood(&self, data: &LabeledDataset) -> Result<f64> {
        if data.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        let stats = Stats::from_dataset(data, &self.u);
        Ok(estep(&stats, &self.v, &self.sigma, 0)?.log_likelihood)
    }

    /// Precomputes the diagonalized form used for scoring.
    pub fn scorer(&self) -> Result<Scorer> {
        Scorer::new(self)
    }

    /// Log-likelihood ratio of same-speaker versus different-speaker.
    pub fn score_llr(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
        self.scorer()?.score(enroll, test)
    }

    fn sigma_cholesky(&self, iteration: usize) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.sigma.clone()).ok_or_else(|| Error::Numeric {
            iteration,
            msg: "sigma is not positive definite".into(),
        })
    }
}

/// Gaussian posterior of one speaker's factor `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPosterior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub count: usize,
}

impl SpeakerPosterior {
    /// `E[y yᵀ] = precision⁻¹ + mean meanᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let cov = Cholesky::new(self.precision.clone())
            .expect("posterior precision is positive definite")
            .inverse();
        cov + &self.mean * self.mean.transpose()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    #[default]
    Full,
    Diagonal,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "diagonal" => Ok(Self::Diagonal),
            _ => Err(Error::Config(format!("unknown sigma mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Diagonal => "diagonal",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Top eigenvectors of the total covariance; no randomness.
    #[default]
    Eigen,
    /// Gaussian `V` drawn from `seed`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rank: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Speakers with fewer utterances are dropped before training.
    pub min_utts_per_speaker: usize,
    pub sigma_mode: SigmaMode,
    pub init: InitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 25,
            iterations: 20,
            seed: 0,
            min_utts_per_speaker: 1,
            sigma_mode: SigmaMode::Full,
            init: InitMode::Eigen,
        }
    }
}

impl TrainConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: PldaModel,
    /// Marginal log-likelihood after each iteration.
    pub log_likelihoods: Vec<f64>,
}

/// Sufficient statistics of a labeled dataset about a fixed mean.
struct Stats {
    dim: usize,
    n: usize,
    /// Σ (w - u)(w - u)ᵀ over all utterances.
    scatter: DMatrix<f64>,
    /// Per-speaker sums of (w - u), grouped by utterance count.
    groups: Vec<(usize, DMatrix<f64>)>,
}

impl Stats {
    fn from_dataset(data: &LabeledDataset, u: &DVector<f64>) -> Self {
        let dim = data.dim();
        let n = data.len();
        let mut x = DMatrix::zeros(dim, n);
        for (j, v) in data.vectors().iter().enumerate() {
            x.set_column(j, &(&v.values - u));
        }
        let scatter = &x * x.transpose();
        let mut by_count: BTreeMap<usize, Vec<DVector<f64>>> = BTreeMap::new();
        for idx in data.groups().values() {
            let mut s = DVector::zeros(dim);
            for &i in idx {
                s += x.column(i);
            }
            by_count.entry(idx.len()).or_default().push(s);
        }
        let groups = by_count
            .into_iter()
            .map(|(count, sums)| (count, DMatrix::from_columns(&sums)))
            .collect();
        Self {
            dim,
            n,
            scatter,
            groups,
        }
    }
}

struct EStep {
    /// Σ_i n_i E[y_i y_iᵀ]
    r: DMatrix<f64>,
    /// Σ_i s_i E[y_i]ᵀ
    t: DMatrix<f64>,
    log_likelihood: f64,
}

fn estep(stats: &Stats, v: &DMatrix<f64>, sigma: &DMatrix<f64>, iteration: usize) -> Result<EStep> {
    let k = v.ncols();
    let chol = Cholesky::new(sigma.clone()).ok_or_else(|| Error::Numeric {
        iteration,
        msg: "sigma is not positive definite".into(),
    })?;
    let logdet_sigma = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let sigma_inv_v = chol.solve(v);
    let a = sigma_inv_v.transpose(); // Vᵀ Σ⁻¹
    let g = &a * v;
    let trace_term = chol.solve(&stats.scatter).trace();

    // Count groups are independent; partial sums are combined in a fixed order.
    let partials: Vec<Result<EStep>> = stats
        .groups
        .par_iter()
        .map(|(count, sums)| {
            let n = *count as f64;
            let m = sums.ncols() as f64;
            let precision = DMatrix::identity(k, k) + &g * n;
            let pc = Cholesky::new(precision).ok_or_else(|| Error::Numeric {
                iteration,
                msg: "posterior precision is not positive definite".into(),
            })?;
            let logdet_l = 2.0 * pc.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let cov = pc.inverse();
            let b = &a * sums; // K×m
            let ey = &cov * &b; // K×m
            let r = &cov * (m * n) + (&ey * ey.transpose()) * n;
            let t = sums * ey.transpose();
            let ll = 0.5 * b.dot(&ey) - 0.5 * m * logdet_l;
            Ok(EStep {
                r,
                t,
                log_likelihood: ll,
            })
        })
        .collect();

    let n = stats.n as f64;
    let mut out = EStep {
        r: DMatrix::zeros(k, k),
        t: DMatrix::zeros(stats.dim, k),
        log_likelihood: -0.5 * n * stats.dim as f64 * (2.0 * PI).ln()
            - 0.5 * n * logdet_sigma
            - 0.5 * trace_term,
    };
    for p in partials {
        let p = p?;
        out.r += p.r;
        out.t += p.t;
        out.log_likelihood += p.log_likelihood;
    }
    Ok(out)
}

fn floor_sigma(sigma: DMatrix<f64>, mode: SigmaMode) -> DMatrix<f64> {
    let mut sigma = (&sigma + sigma.transpose()) * 0.5;
    if mode == SigmaMode::Diagonal {
        let diag = sigma.diagonal();
        sigma = DMatrix::from_diagonal(&diag);
    }
    let eig = SymmetricEigen::new(sigma.clone());
    let max = eig.eigenvalues.max();
    let floor = SIGMA_FLOOR * max.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.min() >= floor {
        return sigma;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    (&s + s.transpose()) * 0.5
}

fn initialize(stats: &Stats, config: &TrainConfig) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = stats.dim;
    let k = config.rank;
    let cov = &stats.scatter / stats.n as f64;
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let v = match config.init {
        InitMode::Eigen => {
            let mut v = DMatrix::zeros(d, k);
            for (c, &i) in order.iter().take(k).enumerate() {
                let scale = (eig.eigenvalues[i].max(0.0) / 2.0).sqrt();
                v.set_column(c, &(eig.eigenvectors.column(i) * scale));
            }
            v
        }
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let scale = (cov.trace() / (2.0 * d as f64 * k as f64)).sqrt();
            DMatrix::from_fn(d, k, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
        }
    };
    let sigma = floor_sigma(cov / 2.0, config.sigma_mode);
    (v, sigma)
}

/// Fits a PLDA model by EM. `u` is the sample mean and stays fixed.
pub fn train_em(data: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutput> {
    let d = data.dim();
    if config.rank == 0 || config.rank > d {
        return Err(Error::Config(format!(
            "rank {} must be in 1..={d}",
            config.rank
        )));
    }
    if config.iterations == 0 {
        return Err(Error::Config("iterations must be positive".into()));
    }
    let min = config.min_utts_per_speaker.max(1);
    let filtered;
    let data = if min > 1 {
        let counts = data.groups();
        filtered = data.filter_labels(|l| counts[l].len() >= min);
        &filtered
    } else {
        data
    };
    if data.n_speakers() < 2 {
        return Err(Error::Precondition(format!(
            "PLDA training needs at least 2 speakers, got {}",
            data.n_speakers()
        )));
    }
    let u = crate::preprocess::fit_mean(data.vectors())?;
    let stats = Stats::from_dataset(data, &u);
    let (mut v, mut sigma) = initialize(&stats, config);

    let mut e = estep(&stats, &v, &sigma, 0)?;
    let mut lls = Vec::with_capacity(config.iterations);
    for it in 1..=config.iterations {
        let r = Cholesky::new(e.r.clone()).ok_or_else(|| Error::Numeric {
            iteration: it,
            msg: "speaker second-moment matrix is singular".into(),
        })?;
        v = r.solve(&e.t.transpose()).transpose();
        let s = (&stats.scatter - &v * e.t.transpose()) / stats.n as f64;
        sigma = floor_sigma(s, config.sigma_mode);
        if v.iter().chain(sigma.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                iteration: it,
                msg: "non-finite parameters".into(),
            });
        }
        e = estep(&stats, &v, &sigma, it)?;
        log::debug!("em iteration {it}: log-likelihood {}", e.log_likelihood);
        lls.push(e.log_likelihood);
    }
    let model = PldaModel::new(u, v, sigma)?;
    Ok(TrainOutput {
        model,
        log_likelihoods: lls,
    })
}

/// PLDA scoring in the basis that whitens Σ and diagonalizes `V Vᵀ`.
///
/// In that basis each kept coordinate is an independent 1-D two-covariance
/// model with within-variance 1 and between-variance `psi`, so the LLR is a
/// sum of per-coordinate quadratic terms. Coordinates with zero between
/// variance contribute nothing and are dropped.
#[derive(Debug, Clone)]
pub struct Scorer {
    u: DVector<f64>,
    proj: DMatrix<f64>,
    psi: DVector<f64>,
    quad: DVector<f64>,
    cross: DVector<f64>,
    constant: f64,
}

impl Scorer {
    pub fn new(model: &PldaModel) -> Result<Self> {
        let chol = model.sigma_cholesky(0)?;
        let l = chol.l();
        let m = l
            .solve_lower_triangular(model.v())
            .expect("Cholesky factor is invertible");
        let eig = SymmetricEigen::new(m.transpose() * &m);
        let max = eig.eigenvalues.max();
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| max > 0.0 && eig.eigenvalues[i] > 1e-12 * max)
            .collect();
        let d = model.dim();
        let r = keep.len();
        let mut basis = DMatrix::zeros(d, r);
        let mut psi = DVector::zeros(r);
        for (c, &i) in keep.iter().enumerate() {
            let lambda = eig.eigenvalues[i];
            psi[c] = lambda;
            basis.set_column(c, &(&m * eig.eigenvectors.column(i) / lambda.sqrt()));
        }
        // proj = basisᵀ L⁻¹ = (L⁻ᵀ basis)ᵀ
        let proj = l
            .transpose()
            .solve_upper_triangular(&basis)
            .expect("Cholesky factor is invertible")
            .transpose();
        let t = psi.map(|p| 1.0 + p);
        let det = psi.map(|p| 1.0 + 2.0 * p);
        let quad = DVector::from_fn(r, |i, _| 0.5 / t[i] - 0.5 * t[i] / det[i]);
        let cross = DVector::from_fn(r, |i, _| psi[i] / det[i]);
        let constant = (0..r).map(|i| t[i].ln() - 0.5 * det[i].ln()).sum();
        Ok(Self {
            u: model.u().clone(),
            proj,
            psi,
            quad,
            cross,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// Between-speaker variances in the scoring basis.
    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    /// Coordinates of a vector in the scoring basis.
    pub fn project(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: w.len(),
            });
        }
        Ok(&self.proj * (w - &self.u))
    }

    /// LLR from two projected vectors.
    pub fn score_projected(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let mut s = self.constant;
        for i in 0..a.len() {
            s += self.quad[i] * (a[i] * a[i] + b[i] * b[i]) + self.cross[i] * (a[i] * b[i]);
        }
        s
    }

    pub fn score(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
        Ok(self.score_projected(&self.project(enroll)?, &self.project(test)?))
    }

    /// Scores every trial. Each vector is projected once.
    pub fn score_trials(&self, trials: &TrialList, vectors: &[IVector]) -> Result<ScoreSet> {
        let projected = project_referenced(trials, vectors, self.dim(), |x| {
            let mut centered = x.clone();
            for mut c in centered.column_iter_mut() {
                c -= &self.u;
            }
            Ok(&self.proj * centered)
        })?;
        let entries = trials
            .trials()
            .par_iter()
            .map(|t| {
                let a = &projected[t.enroll.as_str()];
                let b = &projected[t.test.as_str()];
                ScoredTrial {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                    score: self.score_projected(a, b),
                    is_target: t.is_target,
                }
            })
            .collect();
        ScoreSet::new(entries)
    }
}

/// Stacks the vectors referenced by `trials`, maps them column-wise with
/// `f`, and returns the result keyed by utterance id.
pub(crate) fn project_referenced<'a>(
    trials: &'a TrialList,
    vectors: &[IVector],
    dim: usize,
    f: impl Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
) -> Result<std::collections::HashMap<&'a str, DVector<f64>>> {
    let index = crate::io::index_vectors(vectors);
    let mut ids: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in trials.trials() {
        for id in [t.enroll.as_str(), t.test.as_str()] {
            if seen.insert(id) {
                ids.push(id);
            }
        }
    }
    let mut x = DMatrix::zeros(dim, ids.len());
    for (j, id) in ids.iter().enumerate() {
        let v = index
            .get(id)
            .ok_or_else(|| Error::MissingKey(format!("vector for trial utterance {id}")))?;
        if v.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: v.dim(),
            });
        }
        x.set_column(j, &v.values);
    }
    let y = f(&x)?;
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(j, id)| (id, y.column(j).into_owned()))
        .collect())
}

/// Scores every trial with `score_llr`, reusing one precomputed scorer.
pub fn score_llr_batch(
    model: &PldaModel,
    trials: &TrialList,
    vectors: &[IVector],
) -> Result<ScoreSet> {
    model.scorer()?.score_trials(trials, vectors)
}

/// Cosine similarity in [-1, 1].
pub fn score_cosine(enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
    if enroll.len() != test.len() {
        return Err(Error::Dimension {
            expected: enroll.len(),
            got: test.len(),
        });
    }
    let (na, nb) = (enroll.norm(), test.norm());
    for n in [na, nb] {
        if n.is_nan() || n < MIN_NORM {
            return Err(Error::DegenerateVector(n));
        }
    }
    Ok((enroll.dot(test) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine scores for every trial.
pub fn score_cosine_batch(trials: &TrialList, vectors: &[IVector]) -> Result<ScoreSet> {
    let dim = vectors.first().map_or(0, IVector::dim);
    let unit = project_referenced(trials, vectors, dim, |x| {
        let mut y = x.clone();
        for mut c in y.column_iter_mut() {
            let n = c.norm();
            if n.is_nan() || n < MIN_NORM {
                return Err(Error::DegenerateVector(n));
            }
            c /= n;
        }
        Ok(y)
    })?;
    let entries = trials
        .trials()
        .par_iter()
        .map(|t| ScoredTrial {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            score: unit[t.enroll.as_str()]
                .dot(&unit[t.test.as_str()])
                .clamp(-1.0, 1.0),
            is_target: t.is_target,
        })
        .collect();
    ScoreSet::new(entries)
}
