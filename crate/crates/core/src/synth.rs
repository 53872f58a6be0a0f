//! Synthetic i-vector corpora drawn from a known PLDA model.
//!
//! Each seed fixes a [`World`]: the truth model, a low-rank channel basis and
//! an optional condition shift. Sessions, strong speakers and evaluation
//! speakers are then drawn from independent random streams keyed by their
//! index, so the first `n` sessions of a large corpus are exactly the corpus
//! of `n` sessions.
//!
//! An utterance of speaker `y` recorded on channel offset `c` is
//! `u + V y + c + Σ^½ ε`. The offset is shared by all utterances of one
//! speaker within one session and is `session_scale·ε' + U x` with `U` an
//! orthonormal `D×channel_rank` basis scaled by `channel_scale`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{IVector, LabeledDataset, Trial, TrialList, UtteranceRecord};
use crate::plda::PldaModel;

pub const CUSTOMER: &str = "cust";
pub const SERVICE: &str = "serv";

const STREAM_TRUTH: u64 = 1;
const STREAM_SESSION: u64 = 2;
const STREAM_CUSTOMER: u64 = 3;
const STREAM_SERVICE: u64 = 4;
const STREAM_STRONG: u64 = 5;
const STREAM_EVAL: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub rank: usize,
    pub n_sessions: usize,
    /// Customer pool size.
    pub pool_size: u64,
    pub service_pool_size: u64,
    /// Poisson mean of utterances per speaker per session, floored at 1.
    pub utts_per_channel: f64,
    pub speaker_scale: f64,
    pub noise_scale: f64,
    pub session_scale: f64,
    pub channel_rank: usize,
    pub channel_scale: f64,
    /// Norm of the offset added to weak and evaluation data but not to the
    /// strong set.
    pub condition_shift: f64,
    /// Draw a random SPD Σ instead of a scaled identity.
    pub random_sigma: bool,
    /// Poisson mean of utterances per strong speaker, floored at 1.
    pub strong_utts_per_speaker: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            rank: 25,
            n_sessions: 2000,
            pool_size: 1_000_000_000,
            service_pool_size: 200,
            utts_per_channel: 5.0,
            speaker_scale: 2.0,
            noise_scale: 1.0,
            session_scale: 1.0,
            channel_rank: 10,
            channel_scale: 1.6,
            condition_shift: 0.0,
            random_sigma: false,
            strong_utts_per_speaker: 3.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.rank == 0 || self.rank > self.dim {
            return bad(format!("rank {} must be in 1..={}", self.rank, self.dim));
        }
        if self.n_sessions == 0 {
            return bad("n_sessions must be at least 1".into());
        }
        if self.pool_size == 0 || self.service_pool_size == 0 {
            return bad("pool sizes must be at least 1".into());
        }
        if self.channel_rank > self.dim {
            return bad(format!(
                "channel_rank {} exceeds dim {}",
                self.channel_rank, self.dim
            ));
        }
        for (name, x) in [
            ("utts_per_channel", self.utts_per_channel),
            ("strong_utts_per_speaker", self.strong_utts_per_speaker),
        ] {
            if !(x.is_finite() && x > 0.0) {
                return bad(format!("{name} must be positive, got {x}"));
            }
        }
        for (name, x) in [
            ("speaker_scale", self.speaker_scale),
            ("session_scale", self.session_scale),
            ("channel_scale", self.channel_scale),
            ("condition_shift", self.condition_shift),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return bad(format!("{name} must be non-negative, got {x}"));
            }
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return bad(format!(
                "noise_scale must be positive, got {}",
                self.noise_scale
            ));
        }
        Ok(())
    }
}

/// Independent generator for `(seed, stream, index)`.
fn keyed_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// `D×K` matrix with orthonormal columns, uniformly distributed.
fn orthonormal(rng: &mut impl Rng, d: usize, k: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, k, |_, _| normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn poisson_at_least_one(rng: &mut impl Rng, mean: f64) -> usize {
    let p = Poisson::new(mean).expect("validated mean");
    (p.sample(rng) as usize).max(1)
}

/// Truth model with `u = 0`, `V` of orthonormal columns times
/// `speaker_scale`, and `Σ = noise_scale²·I`.
pub fn sample_truth_model(
    dim: usize,
    rank: usize,
    speaker_scale: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<PldaModel> {
    if rank == 0 || rank > dim {
        return Err(Error::Config(format!("rank {rank} must be in 1..={dim}")));
    }
    let mut rng = keyed_rng(seed, STREAM_TRUTH, 0);
    let v = orthonormal(&mut rng, dim, rank) * speaker_scale;
    let sigma = DMatrix::identity(dim, dim) * (noise_scale * noise_scale);
    PldaModel::new(DVector::zeros(dim), v, sigma)
}

/// Everything fixed by one seed.
#[derive(Debug, Clone)]
pub struct World {
    config: SynthConfig,
    truth: PldaModel,
    sigma_sqrt: DMatrix<f64>,
    channel: DMatrix<f64>,
    shift: DVector<f64>,
}

impl World {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let (d, seed) = (config.dim, config.seed);
        let mut truth = sample_truth_model(
            d,
            config.rank,
            config.speaker_scale,
            config.noise_scale,
            seed,
        )?;
        let mut rng = keyed_rng(seed, STREAM_TRUTH, 1);
        if config.random_sigma {
            let q = orthonormal(&mut rng, d, d);
            let eig =
                DVector::from_fn(d, |_, _| (rng.random_range(0.1f64.ln()..3.0f64.ln())).exp());
            let sigma = &q
                * DMatrix::from_diagonal(&eig)
                * q.transpose()
                * (config.noise_scale * config.noise_scale);
            let sigma = (&sigma + sigma.transpose()) * 0.5;
            truth = PldaModel::new(truth.u().clone(), truth.v().clone(), sigma)?;
        }
        let sigma_sqrt = truth
            .sigma()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Precondition("truth sigma is not positive definite".into()))?
            .l();
        let channel = if config.channel_rank > 0 {
            orthonormal(&mut rng, d, config.channel_rank) * config.channel_scale
        } else {
            DMatrix::zeros(d, 0)
        };
        // The shift lies inside the channel subspace when there is one.
        let direction = if config.channel_rank > 0 {
            &channel * normal_vector(&mut rng, config.channel_rank)
        } else {
            normal_vector(&mut rng, d)
        };
        let norm = direction.norm();
        let shift = if norm > 0.0 {
            direction * (config.condition_shift / norm)
        } else {
            DVector::zeros(d)
        };
        Ok(Self {
            config: config.clone(),
            truth,
            sigma_sqrt,
            channel,
            shift,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn truth(&self) -> &PldaModel {
        &self.truth
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    fn speaker_factor(&self, stream: u64, member: u64) -> DVector<f64> {
        let mut rng = keyed_rng(self.config.seed, stream, member);
        normal_vector(&mut rng, self.config.rank)
    }

    fn channel_offset(&self, rng: &mut impl Rng) -> DVector<f64> {
        let d = self.config.dim;
        let mut c = normal_vector(rng, d) * self.config.session_scale;
        if self.channel.ncols() > 0 {
            c += &self.channel * normal_vector(rng, self.channel.ncols());
        }
        c
    }

    fn utterance(
        &self,
        rng: &mut impl Rng,
        y: &DVector<f64>,
        offset: &DVector<f64>,
        shifted: bool,
    ) -> DVector<f64> {
        let mut w = self.truth.u() + self.truth.v() * y + offset;
        w += &self.sigma_sqrt * normal_vector(rng, self.config.dim);
        if shifted {
            w += &self.shift;
        }
        w
    }

    /// One double-channel session: a customer and a service speaker.
    fn session(&self, index: usize, out: &mut SynthSet) {
        let c = &self.config;
        let mut rng = keyed_rng(c.seed, STREAM_SESSION, index as u64);
        let session_id = format!("s{index:06}");
        let members = [
            (CUSTOMER, STREAM_CUSTOMER, rng.random_range(0..c.pool_size)),
            (
                SERVICE,
                STREAM_SERVICE,
                rng.random_range(0..c.service_pool_size),
            ),
        ];
        for (channel, stream, member) in members {
            let y = self.speaker_factor(stream, member);
            let offset = self.channel_offset(&mut rng);
            let n = poisson_at_least_one(&mut rng, c.utts_per_channel);
            for j in 0..n {
                let utt = format!("{session_id}-{channel}-{j:02}");
                out.vectors.push(IVector::new(
                    utt.clone(),
                    self.utterance(&mut rng, &y, &offset, true),
                ));
                out.records.push(UtteranceRecord::new(
                    utt,
                    session_id.clone(),
                    channel,
                    Some(format!("{channel}{member}")),
                ));
            }
        }
    }

    /// The first `n_sessions` weakly labelable sessions.
    pub fn sessions(&self, n_sessions: usize) -> SynthSet {
        self.session_range(0..n_sessions)
    }

    pub fn session_range(&self, range: std::ops::Range<usize>) -> SynthSet {
        let mut set = SynthSet::default();
        for i in range {
            self.session(i, &mut set);
        }
        set
    }

    /// Strongly labeled speakers, each utterance from its own session. These
    /// never carry the condition shift.
    pub fn strong_set(&self, n_speakers: usize) -> SynthSet {
        let c = &self.config;
        let mut set = SynthSet::default();
        for i in 0..n_speakers {
            let mut rng = keyed_rng(c.seed, STREAM_STRONG, i as u64);
            let y = normal_vector(&mut rng, c.rank);
            let n = poisson_at_least_one(&mut rng, c.strong_utts_per_speaker);
            let speaker = format!("strong{i}");
            for j in 0..n {
                let offset = self.channel_offset(&mut rng);
                let utt = format!("{speaker}-{j:02}");
                set.vectors.push(IVector::new(
                    utt.clone(),
                    self.utterance(&mut rng, &y, &offset, false),
                ));
                set.records.push(UtteranceRecord::new(
                    utt.clone(),
                    utt,
                    "spk",
                    Some(speaker.clone()),
                ));
            }
        }
        set
    }

    /// Held-out evaluation speakers and all enrollment/test cross pairs.
    pub fn eval_split(
        &self,
        n_speakers: usize,
        enroll_per_spk: usize,
        test_per_spk: usize,
    ) -> Result<EvalSplit> {
        if n_speakers < 2 {
            return Err(Error::Precondition(format!(
                "evaluation needs at least 2 speakers, got {n_speakers}"
            )));
        }
        if enroll_per_spk == 0 || test_per_spk == 0 {
            return Err(Error::Precondition(
                "evaluation needs at least one enrollment and one test utterance per speaker"
                    .into(),
            ));
        }
        let c = &self.config;
        let mut vectors = Vec::new();
        let mut enroll = Vec::new();
        let mut test = Vec::new();
        for i in 0..n_speakers {
            let mut rng = keyed_rng(c.seed, STREAM_EVAL, i as u64);
            let y = normal_vector(&mut rng, c.rank);
            for (role, count, ids) in [
                ("e", enroll_per_spk, &mut enroll),
                ("t", test_per_spk, &mut test),
            ] {
                for j in 0..count {
                    let offset = self.channel_offset(&mut rng);
                    let utt = format!("eval{i:04}-{role}{j:02}");
                    vectors.push(IVector::new(
                        utt.clone(),
                        self.utterance(&mut rng, &y, &offset, true),
                    ));
                    ids.push((utt, i));
                }
            }
        }
        let mut trials = Vec::with_capacity(enroll.len() * test.len());
        for (e, se) in &enroll {
            for (t, st) in &test {
                trials.push(Trial {
                    enroll: e.clone(),
                    test: t.clone(),
                    is_target: se == st,
                });
            }
        }
        let trials = TrialList::new(trials)?;
        Ok(EvalSplit {
            n_target: trials.n_target(),
            n_nontarget: trials.n_nontarget(),
            trials,
            vectors,
        })
    }
}

/// Vectors with their metadata, in generation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthSet {
    pub vectors: Vec<IVector>,
    pub records: Vec<UtteranceRecord>,
}

impl SynthSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Keeps the utterances whose record satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&UtteranceRecord) -> bool) -> SynthSet {
        let (vectors, records) = self
            .vectors
            .iter()
            .zip(&self.records)
            .filter(|(_, r)| keep(r))
            .map(|(v, r)| (v.clone(), r.clone()))
            .unzip();
        SynthSet { vectors, records }
    }

    /// Dataset labeled with the true speakers.
    pub fn true_dataset(&self) -> Result<LabeledDataset> {
        let labels = crate::labeling::true_labels(&self.records)?;
        LabeledDataset::new(self.vectors.clone(), &labels)
    }

    /// Dataset labeled by session and local speaker.
    pub fn weak_dataset(&self) -> Result<LabeledDataset> {
        let weak = crate::labeling::derive_weak_labels(&self.records);
        LabeledDataset::new(self.vectors.clone(), &weak.labels)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub vectors: Vec<IVector>,
    pub records: Vec<UtteranceRecord>,
    pub truth_model: PldaModel,
    pub world: World,
}

impl SynthCorpus {
    pub fn set(&self) -> SynthSet {
        SynthSet {
            vectors: self.vectors.clone(),
            records: self.records.clone(),
        }
    }
}

pub fn generate_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    let world = World::new(config)?;
    let SynthSet { vectors, records } = world.sessions(config.n_sessions);
    Ok(SynthCorpus {
        vectors,
        records,
        truth_model: world.truth().clone(),
        world,
    })
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub trials: TrialList,
    pub vectors: Vec<IVector>,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn make_eval_split(
    corpus: &SynthCorpus,
    n_eval_speakers: usize,
    enroll_per_spk: usize,
    test_per_spk: usize,
) -> Result<EvalSplit> {
    corpus
        .world
        .eval_split(n_eval_speakers, enroll_per_spk, test_per_spk)
}

/// Expected number of distinct members after `draws` uniform draws from a
/// pool of `pool`.
pub fn expected_distinct(pool: u64, draws: usize) -> f64 {
    let p = pool as f64;
    p * (1.0 - (1.0 - 1.0 / p).powf(draws as f64))
}
