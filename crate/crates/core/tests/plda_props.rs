use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wplda_core::io::{self, IVector, LabeledDataset, ModelFile, Trial, TrialList};
use wplda_core::plda::{score_llr_batch, train_em, PldaModel, TrainConfig};
use wplda_core::synth::sample_truth_model;

fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| gauss(rng))
}

fn random_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(rng))
}

fn random_model(rng: &mut impl Rng, d: usize, k: usize) -> PldaModel {
    let a = random_matrix(rng, d, d);
    let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    PldaModel::new(random_vector(rng, d), random_matrix(rng, d, k), sigma).unwrap()
}

fn log_density(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is SPD");
    let half_logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let z = chol.l().solve_lower_triangular(x).unwrap();
    -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln() - half_logdet - 0.5 * z.norm_squared()
}

/// Same-speaker joint density over the two marginals.
fn oracle_llr(m: &PldaModel, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = m.dim();
    let (tot, btw) = (m.total(), m.between());
    let mut joint = DMatrix::zeros(2 * d, 2 * d);
    joint.view_mut((0, 0), (d, d)).copy_from(&tot);
    joint.view_mut((d, d), (d, d)).copy_from(&tot);
    joint.view_mut((0, d), (d, d)).copy_from(&btw);
    joint.view_mut((d, 0), (d, d)).copy_from(&btw);
    let x = DVector::from_iterator(2 * d, (a - m.u()).iter().chain((b - m.u()).iter()).copied());
    log_density(&x, &joint) - log_density(&(a - m.u()), &tot) - log_density(&(b - m.u()), &tot)
}

#[test]
fn matches_joint_gaussian_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let d = rng.random_range(1..=5);
        let k = rng.random_range(1..=d.min(3));
        let m = random_model(&mut rng, d, k);
        let a = m.u() + random_vector(&mut rng, d) * 2.0;
        let b = m.u() + random_vector(&mut rng, d) * 2.0;
        let s = m.score_llr(&a, &b).unwrap();
        let o = oracle_llr(&m, &a, &b);
        assert!((s - o).abs() < 1e-6, "d={d} k={k}: {s} vs {o}");
        assert!((s - m.score_llr(&b, &a).unwrap()).abs() < 1e-8);
    }
}

#[test]
fn zero_subspace_scores_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = random_model(&mut rng, 4, 2);
    m = PldaModel::new(m.u().clone(), DMatrix::zeros(4, 2), m.sigma().clone()).unwrap();
    for _ in 0..20 {
        let s = m
            .score_llr(&random_vector(&mut rng, 4), &random_vector(&mut rng, 4))
            .unwrap();
        assert!(s.abs() < 1e-10, "{s}");
    }
}

#[test]
fn sign_along_speaker_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = random_model(&mut rng, 5, 2);
    let dir = m.v().column(0).into_owned() * 10.0;
    let same = m.u() + &dir;
    assert!(m.score_llr(&same, &same).unwrap() > 0.0);
    assert!(oracle_llr(&m, &same, &same) > 0.0);
    let opposite = m.u() - &dir;
    assert!(m.score_llr(&same, &opposite).unwrap() < 0.0);
    assert!(oracle_llr(&m, &same, &opposite) < 0.0);
}

#[test]
fn translation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let m = random_model(&mut rng, 5, 3);
        let c = random_vector(&mut rng, 5) * 3.0;
        let moved = PldaModel::new(m.u() + &c, m.v().clone(), m.sigma().clone()).unwrap();
        let a = random_vector(&mut rng, 5);
        let b = random_vector(&mut rng, 5);
        let s0 = m.score_llr(&a, &b).unwrap();
        let s1 = moved.score_llr(&(&a + &c), &(&b + &c)).unwrap();
        assert!((s0 - s1).abs() < 1e-8, "{s0} vs {s1}");
    }
}

#[test]
fn rotation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let d = 5;
        let m = random_model(&mut rng, d, 3);
        let q = random_matrix(&mut rng, d, d).qr().q();
        let sigma = &q * m.sigma() * q.transpose();
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let rotated = PldaModel::new(&q * m.u(), &q * m.v(), sigma).unwrap();
        let a = random_vector(&mut rng, d);
        let b = random_vector(&mut rng, d);
        let s0 = m.score_llr(&a, &b).unwrap();
        let s1 = rotated.score_llr(&(&q * &a), &(&q * &b)).unwrap();
        assert!((s0 - s1).abs() < 1e-6, "{s0} vs {s1}");
    }
}

/// Draws `utts` vectors for each of `speakers` speakers from `m`.
fn sample_dataset(
    m: &PldaModel,
    speakers: usize,
    utts: usize,
    rng: &mut impl Rng,
) -> LabeledDataset {
    let chol = m.sigma().clone().cholesky().unwrap();
    let mut pairs = Vec::new();
    for s in 0..speakers {
        let y = random_vector(rng, m.rank());
        let centre = m.u() + m.v() * y;
        for j in 0..utts {
            let w = &centre + chol.l() * random_vector(rng, m.dim());
            pairs.push((IVector::new(format!("s{s}-{j}"), w), format!("s{s}")));
        }
    }
    LabeledDataset::from_pairs(pairs).unwrap()
}

#[test]
fn em_log_likelihood_is_non_decreasing() {
    let truth = sample_truth_model(20, 10, 2.0, 1.0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = sample_dataset(&truth, 200, 5, &mut rng);
    let out = train_em(&data, &TrainConfig::with_rank(10)).unwrap();
    assert_eq!(out.log_likelihoods.len(), 20);
    for w in out.log_likelihoods.windows(2) {
        assert!(w[1] >= w[0] - w[0].abs() * 1e-6, "{} then {}", w[0], w[1]);
    }
    let final_ll = *out.log_likelihoods.last().unwrap();
    assert!((out.model.log_likelihood(&data).unwrap() - final_ll).abs() < 1e-6 * final_ll.abs());
}

#[test]
fn em_one_dimensional_two_speakers() {
    let values = [(-3.0, "a"), (-1.0, "a"), (1.5, "b"), (3.5, "b")];
    let data = LabeledDataset::from_pairs(
        values
            .iter()
            .enumerate()
            .map(|(i, (x, l))| (IVector::from_slice(format!("u{i}"), &[*x]), l.to_string())),
    )
    .unwrap();
    let config = TrainConfig {
        iterations: 500,
        ..TrainConfig::with_rank(1)
    };
    let m = train_em(&data, &config).unwrap().model;

    // Balanced ML with the mean fixed at the sample mean:
    // within = SSW / (S (n - 1)), between = mean-spread / S - within / n.
    let mean = values.iter().map(|v| v.0).sum::<f64>() / 4.0;
    let means = [-2.0, 2.5];
    let ssw: f64 = values
        .iter()
        .map(|(x, l)| (x - means[(*l == "b") as usize]).powi(2))
        .sum();
    let within = ssw / 2.0;
    let between = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 2.0 - within / 2.0;
    let total = values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / 4.0;

    let b = m.between()[(0, 0)];
    let w = m.sigma()[(0, 0)];
    assert!((b + w - total).abs() < 1e-3, "{} vs {total}", b + w);
    assert!((b - between).abs() < 1e-3, "{b} vs {between}");
    assert!((w - within).abs() < 1e-3, "{w} vs {within}");
}

#[test]
fn em_single_utterance_per_speaker() {
    let truth = sample_truth_model(10, 4, 2.0, 1.0, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = sample_dataset(&truth, 3000, 1, &mut rng);
    let m = train_em(&data, &TrainConfig::with_rank(4)).unwrap().model;
    let sample = wplda_core::preprocess::covariance(data.vectors()).unwrap();
    let rel = (m.total() - &sample).norm() / sample.norm();
    assert!(rel < 0.05, "relative error {rel}");
}

#[test]
fn em_is_independent_of_input_order() {
    let truth = sample_truth_model(8, 3, 2.0, 1.0, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = sample_dataset(&truth, 60, 4, &mut rng);
    let mut pairs: Vec<_> = data
        .iter()
        .map(|(v, l)| (v.clone(), l.to_string()))
        .collect();
    pairs.shuffle(&mut rng);
    let shuffled = LabeledDataset::from_pairs(pairs).unwrap();
    let config = TrainConfig::with_rank(3);
    let a = train_em(&data, &config).unwrap();
    let b = train_em(&shuffled, &config).unwrap();
    assert!((a.model.v() - b.model.v()).amax() < 1e-8);
    assert!((a.model.sigma() - b.model.sigma()).amax() < 1e-8);
    for (x, y) in a.log_likelihoods.iter().zip(&b.log_likelihoods) {
        assert!((x - y).abs() < 1e-8 * x.abs());
    }
}

fn large_model(rng: &mut impl Rng, k: usize) -> PldaModel {
    let d = 400;
    let a = random_matrix(rng, d, d) / (d as f64).sqrt();
    let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
    PldaModel::new(random_vector(rng, d), random_matrix(rng, d, k), sigma).unwrap()
}

#[test]
fn batch_scoring_at_dimension_400() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = large_model(&mut rng, 200);
    let vectors: Vec<IVector> = (0..2000)
        .map(|i| IVector::new(format!("v{i}"), random_vector(&mut rng, 400)))
        .collect();
    let trials = TrialList::new(
        (0..10_000)
            .map(|i| Trial {
                enroll: format!("v{}", i / 5),
                test: format!("v{}", (i / 5 + 1 + (i % 5) * 37) % 2000),
                is_target: i % 100 == 0,
            })
            .collect(),
    )
    .unwrap();

    let start = Instant::now();
    let scores = score_llr_batch(&m, &trials, &vectors).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(scores.len(), 10_000);
    assert!(elapsed < 5.0, "took {elapsed:.2} s");

    let index = io::index_vectors(&vectors);
    for (e, t) in scores.entries().iter().zip(trials.trials()).take(20) {
        let single = m
            .score_llr(
                &index[t.enroll.as_str()].values,
                &index[t.test.as_str()].values,
            )
            .unwrap();
        assert!((e.score - single).abs() < 1e-10 * single.abs().max(1.0));
    }
}

#[test]
fn permuted_trials_give_permuted_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let m = random_model(&mut rng, 5, 2);
    let vectors: Vec<IVector> = (0..10)
        .map(|i| IVector::new(format!("v{i}"), random_vector(&mut rng, 5)))
        .collect();
    let mut list: Vec<Trial> = (0..10)
        .flat_map(|i| (0..10).map(move |j| (i, j)))
        .map(|(i, j)| Trial {
            enroll: format!("v{i}"),
            test: format!("v{j}"),
            is_target: i == j,
        })
        .collect();
    let forward = score_llr_batch(&m, &TrialList::new(list.clone()).unwrap(), &vectors).unwrap();
    let by_pair: BTreeMap<(String, String), f64> = forward
        .entries()
        .iter()
        .map(|e| ((e.enroll.clone(), e.test.clone()), e.score))
        .collect();
    list.shuffle(&mut rng);
    let permuted = score_llr_batch(&m, &TrialList::new(list).unwrap(), &vectors).unwrap();
    for e in permuted.entries() {
        assert_eq!(by_pair[&(e.enroll.clone(), e.test.clone())], e.score);
    }
}

#[test]
fn rank_400_model_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let m = large_model(&mut rng, 400);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    io::save_model(&path, &ModelFile::from(m.clone())).unwrap();
    let back = io::load_model(&path).unwrap();
    assert!(back.preprocess.is_none());
    assert_eq!(back.plda.u(), m.u());
    assert_eq!(back.plda.v(), m.v());
    assert_eq!(back.plda.sigma(), m.sigma());
}
