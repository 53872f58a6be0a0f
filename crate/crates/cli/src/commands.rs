use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use wplda_core::backend::{adapt, cosine_scores, train_backend, Backend};
use wplda_core::eval::{compute_eer, ScoreSet};
use wplda_core::experiment::{self, ExperimentName, ExperimentSpec};
use wplda_core::io::{self, write_atomic, IVector, LabeledDataset, ModelFile};
use wplda_core::labeling::{derive_weak_labels, labeled_subset, pool_datasets, quality_report};
use wplda_core::plda::TrainConfig;
use wplda_core::synth::{SynthConfig, World};

use crate::args::{EvalArgs, ExperimentArgs, ScoreArgs, SynthArgs, TrainArgs, WeaklabelArgs};

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))?;
    Ok(())
}

fn json_line<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let config = SynthConfig {
        dim: args.dim,
        rank: args.rank,
        n_sessions: args.sessions,
        pool_size: args.pool_size,
        service_pool_size: args.service_pool_size,
        utts_per_channel: args.utts_per_channel,
        speaker_scale: args.speaker_scale,
        noise_scale: args.noise_scale,
        session_scale: args.session_scale,
        channel_rank: args.channel_rank,
        channel_scale: args.channel_scale,
        condition_shift: args.condition_shift,
        random_sigma: args.random_sigma,
        strong_utts_per_speaker: args.strong_utts_per_speaker,
        seed,
    };
    let world = World::new(&config)?;
    let corpus = world.sessions(config.n_sessions);
    let strong = world.strong_set(args.strong_speakers);
    let eval = world.eval_split(
        args.eval_speakers,
        args.enroll_per_speaker,
        args.test_per_speaker,
    )?;

    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    io::save_ivectors(dir.join("corpus.ivec"), &corpus.vectors)?;
    io::save_metadata(dir.join("corpus.csv"), &corpus.records)?;
    io::save_ivectors(dir.join("strong.ivec"), &strong.vectors)?;
    io::save_metadata(dir.join("strong.csv"), &strong.records)?;
    let strong_labels = wplda_core::labeling::true_labels(&strong.records)?;
    io::save_labels(dir.join("strong.labels"), &strong_labels)?;
    io::save_ivectors(dir.join("eval.ivec"), &eval.vectors)?;
    io::save_trials(dir.join("eval.trials"), &eval.trials)?;
    io::save_model(
        dir.join("truth.json"),
        &ModelFile::from(world.truth().clone()),
    )?;
    write_text(&dir.join("synth.json"), &json_line(&config)?)?;
    info!(
        "wrote {} corpus, {} strong and {} eval utterances; {} target and {} nontarget trials",
        corpus.len(),
        strong.len(),
        eval.vectors.len(),
        eval.n_target,
        eval.n_nontarget
    );
    Ok(())
}

pub fn weaklabel(args: &WeaklabelArgs) -> Result<()> {
    let records = io::load_metadata(&args.metadata)?;
    let selected: Vec<_> = records
        .into_iter()
        .filter(|r| {
            args.channel
                .as_ref()
                .is_none_or(|c| &r.local_speaker_id == c)
        })
        .collect();
    if selected.is_empty() {
        bail!(
            "no utterances in {} match the selection",
            args.metadata.display()
        );
    }
    let weak = derive_weak_labels(&selected);
    io::save_labels(&args.out, &weak.labels)?;
    info!(
        "{} utterances, {} weak speakers",
        weak.labels.len(),
        weak.n_speakers()
    );
    if let Some(path) = &args.report {
        let report = quality_report(&weak, &selected)?;
        info!(
            "split rate {:.4}, purity {:.4}",
            report.split_rate, report.purity
        );
        write_text(path, &json_line(&report)?)?;
    }
    Ok(())
}

fn load_labeled(vectors: &Path, labels: &Path) -> Result<LabeledDataset> {
    let vs = io::load_ivectors(vectors)?;
    let ls = io::load_labels(labels)?;
    let index = io::index_vectors(&vs);
    if let Some(missing) = ls.keys().find(|k| !index.contains_key(k.as_str())) {
        bail!(
            "{}: labeled utterance {missing} has no vector in {}",
            labels.display(),
            vectors.display()
        );
    }
    let data = labeled_subset(&vs, &ls)?;
    if data.len() < vs.len() {
        info!(
            "{}: skipping {} unlabeled vectors",
            vectors.display(),
            vs.len() - data.len()
        );
    }
    Ok(data)
}

pub fn train(args: &TrainArgs, seed: u64) -> Result<()> {
    let mut data = load_labeled(&args.ivectors, &args.labels)?;
    if let (Some(v), Some(l)) = (&args.weak_ivectors, &args.weak_labels) {
        data = pool_datasets(&data, &load_labeled(v, l)?)?;
    }
    info!(
        "training on {} utterances of {} speakers",
        data.len(),
        data.n_speakers()
    );
    let config = TrainConfig {
        rank: args.rank,
        iterations: args.iters,
        seed,
        min_utts_per_speaker: args.min_utts,
        sigma_mode: args.sigma,
        ..TrainConfig::default()
    };
    let trained = train_backend(&data, args.whiten, &config)?;
    io::save_model(&args.out, &trained.model)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for ll in &trained.log_likelihoods {
        writeln!(out, "{ll:?}")?;
    }
    Ok(())
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    let trials = io::load_trials(&args.trials)?;
    let vectors = io::load_ivectors(&args.ivectors)?;
    let scores = match &args.model {
        None => cosine_scores(&trials, &vectors)?,
        Some(path) => {
            let mut model = io::load_model(path)?;
            if let Some(adapt_path) = &args.adapt {
                let in_domain: Vec<IVector> = io::load_ivectors(adapt_path)?;
                model = adapt(&model, &in_domain)?;
                info!("adapted preprocessing on {} vectors", in_domain.len());
            }
            Backend::new(&model)?.score_trials(&trials, &vectors)?
        }
    };
    io::save_scores(&args.out, &scores.to_lines(args.flags))?;
    info!("scored {} trials", scores.len());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let lines = io::load_scores(&args.scores)?;
    let trials = args.trials.as_ref().map(io::load_trials).transpose()?;
    let set = ScoreSet::join(&lines, trials.as_ref())?;
    let report = compute_eer(&set)?;
    let text = json_line(&report)?;
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    if let Some(path) = &args.det {
        let mut csv = String::from("threshold,false_alarm_rate,miss_rate\n");
        for p in &report.det_points {
            csv.push_str(&format!(
                "{:?},{:?},{:?}\n",
                p.threshold, p.false_alarm_rate, p.miss_rate
            ));
        }
        write_text(path, &csv)?;
    }
    info!("EER {:.4}%", report.eer * 100.0);
    Ok(())
}

pub fn experiment(args: &ExperimentArgs) -> Result<()> {
    let mut spec = ExperimentSpec::new(args.name);
    spec.seeds = args.seeds.clone();
    if let Some(s) = &args.strong {
        spec.grid.strong = s.clone();
    }
    if let Some(w) = &args.weak {
        spec.grid.weak = w.clone();
    }
    spec.rank = args.rank;
    spec.iterations = args.iters;
    spec.whiten = args.whiten;
    if let Some(d) = args.dim {
        spec.synth.dim = d;
    }
    if let Some(r) = args.synth_rank {
        spec.synth.rank = r;
    }
    if let Some(c) = args.condition_shift {
        spec.synth.condition_shift = c;
    }
    spec.eval.speakers = args.eval_speakers;
    spec.eval.test_per_speaker = args.test_per_speaker;
    spec.output_dir = args.out.clone();

    let result = experiment::run(&spec)?;
    let mut text = String::new();
    if spec.name == ExperimentName::Table2 {
        text.push_str(&result.table()?.to_table());
    } else {
        text.push_str("condition n_strong n_weak mean_eer% se%\n");
        for s in result.summaries() {
            text.push_str(&format!(
                "{} {} {} {:.2} {:.2}\n",
                s.condition,
                s.n_strong,
                s.n_weak,
                s.mean * 100.0,
                s.se * 100.0
            ));
        }
    }
    if spec.name == ExperimentName::Fig4 {
        text.push_str("\nn_strong strong-only% pooled% (n_weak) adapted% (n_weak)\n");
        for r in result.fig4_rows() {
            text.push_str(&format!(
                "{} {:.2} {:.2} ({}) {:.2} ({})\n",
                r.n_strong,
                r.strong_only.mean * 100.0,
                r.pooled.1.mean * 100.0,
                r.pooled.0,
                r.adapted.1.mean * 100.0,
                r.adapted.0
            ));
        }
    }
    std::io::stdout().lock().write_all(text.as_bytes())?;
    Ok(())
}
