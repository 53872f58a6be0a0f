//! Weak speaker labels from session structure.
//!
//! A weak label is `session_id/local_speaker_id`: speakers are assumed to be
//! separable inside a session and distinct across sessions. The second
//! assumption fails whenever one person appears in several sessions, which
//! shows up here as a split true speaker.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{IVector, LabeledDataset, UtteranceRecord};

pub const STRONG_PREFIX: &str = "strong/";
pub const WEAK_PREFIX: &str = "weak/";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WeakLabeling {
    pub labels: BTreeMap<String, String>,
}

impl WeakLabeling {
    pub fn n_speakers(&self) -> usize {
        self.labels.values().collect::<BTreeSet<_>>().len()
    }
}

pub fn weak_label(record: &UtteranceRecord) -> String {
    format!("{}/{}", record.session_id, record.local_speaker_id)
}

pub fn derive_weak_labels<'a>(
    records: impl IntoIterator<Item = &'a UtteranceRecord>,
) -> WeakLabeling {
    WeakLabeling {
        labels: records
            .into_iter()
            .map(|r| (r.utt_id.clone(), weak_label(r)))
            .collect(),
    }
}

/// Ground-truth labels; every record must carry a true speaker.
pub fn true_labels<'a>(
    records: impl IntoIterator<Item = &'a UtteranceRecord>,
) -> Result<BTreeMap<String, String>> {
    let mut missing = Vec::new();
    let mut out = BTreeMap::new();
    for r in records {
        match &r.true_speaker_id {
            Some(s) => {
                out.insert(r.utt_id.clone(), s.clone());
            }
            None => missing.push(r.utt_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingKey(format!(
            "true speaker for {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQualityReport {
    pub n_weak_speakers: usize,
    pub n_true_speakers: usize,
    /// Fraction of true speakers whose utterances got two or more weak labels.
    pub split_rate: f64,
    /// Fraction of weak labels whose utterances share one true speaker.
    pub purity: f64,
}

/// Compares a weak labeling with the true speakers in `records`.
pub fn quality_report(
    weak: &WeakLabeling,
    records: &[UtteranceRecord],
) -> Result<LabelQualityReport> {
    let truth: HashMap<&str, Option<&str>> = records
        .iter()
        .map(|r| (r.utt_id.as_str(), r.true_speaker_id.as_deref()))
        .collect();
    let missing: Vec<&str> = weak
        .labels
        .keys()
        .filter(|u| !matches!(truth.get(u.as_str()), Some(Some(_))))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKey(format!(
            "true speaker for {}",
            missing.join(", ")
        )));
    }

    let mut weak_to_true: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut true_to_weak: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (utt, w) in &weak.labels {
        let t = truth[utt.as_str()].expect("checked above");
        weak_to_true.entry(w).or_default().insert(t);
        true_to_weak.entry(t).or_default().insert(w);
    }
    let n_weak = weak_to_true.len();
    let n_true = true_to_weak.len();
    let pure = weak_to_true.values().filter(|s| s.len() == 1).count();
    let split = true_to_weak.values().filter(|s| s.len() >= 2).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(LabelQualityReport {
        n_weak_speakers: n_weak,
        n_true_speakers: n_true,
        split_rate: ratio(split, n_true),
        purity: if n_weak == 0 {
            1.0
        } else {
            ratio(pure, n_weak)
        },
    })
}

/// Joins vectors with a label map, keeping only labeled vectors.
pub fn labeled_subset(
    vectors: &[IVector],
    labels: &BTreeMap<String, String>,
) -> Result<LabeledDataset> {
    LabeledDataset::from_pairs(
        vectors
            .iter()
            .filter_map(|v| labels.get(&v.utt_id).map(|l| (v.clone(), l.clone()))),
    )
}

/// Disjoint union of a strongly and a weakly labeled set. Labels are
/// prefixed with `strong/` and `weak/` so the two never merge.
pub fn pool_datasets(strong: &LabeledDataset, weak: &LabeledDataset) -> Result<LabeledDataset> {
    if !strong.is_empty() && !weak.is_empty() && strong.dim() != weak.dim() {
        return Err(Error::Dimension {
            expected: strong.dim(),
            got: weak.dim(),
        });
    }
    let pairs = strong
        .iter()
        .map(|(v, l)| (v.clone(), format!("{STRONG_PREFIX}{l}")))
        .chain(
            weak.iter()
                .map(|(v, l)| (v.clone(), format!("{WEAK_PREFIX}{l}"))),
        );
    let pooled = LabeledDataset::from_pairs(pairs).map_err(|e| match e {
        Error::DuplicateKey { key, .. } => Error::Precondition(format!(
            "utterance {key} appears in both the strong and the weak set"
        )),
        e => e,
    })?;
    if pooled.is_empty() {
        return Ok(LabeledDataset::empty(strong.dim().max(weak.dim())));
    }
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(u: &str, s: &str, l: &str, t: Option<&str>) -> UtteranceRecord {
        UtteranceRecord::new(u, s, l, t.map(str::to_string))
    }

    #[test]
    fn one_session_two_channels() {
        let mut rs = Vec::new();
        for ch in ["cust", "serv"] {
            for i in 0..3 {
                rs.push(rec(&format!("{ch}{i}"), "s1", ch, None));
            }
        }
        let w = derive_weak_labels(&rs);
        assert_eq!(w.labels.len(), 6);
        assert_eq!(w.n_speakers(), 2);
        assert_eq!(w.labels["cust0"], "s1/cust");
    }

    #[test]
    fn same_speaker_in_two_sessions_is_split() {
        let rs = [
            rec("a", "s1", "cust", Some("A")),
            rec("b", "s2", "cust", Some("A")),
        ];
        let w = derive_weak_labels(&rs);
        assert_ne!(w.labels["a"], w.labels["b"]);
        let q = quality_report(&w, &rs).unwrap();
        assert_eq!((q.split_rate, q.purity), (1.0, 1.0));
    }

    #[test]
    fn many_sessions_one_channel() {
        let rs: Vec<_> = (0..2000)
            .map(|i| rec(&format!("u{i}"), &format!("s{i}"), "cust", None))
            .collect();
        assert_eq!(derive_weak_labels(&rs).n_speakers(), 2000);
    }

    #[test]
    fn quality_counts() {
        // every true speaker in exactly one session
        let rs: Vec<_> = (0..10)
            .map(|i| {
                rec(
                    &format!("u{i}"),
                    &format!("s{}", i / 2),
                    "c",
                    Some(&format!("T{}", i / 2)),
                )
            })
            .collect();
        let q = quality_report(&derive_weak_labels(&rs), &rs).unwrap();
        assert_eq!(
            (q.purity, q.split_rate, q.n_true_speakers, q.n_weak_speakers),
            (1.0, 0.0, 5, 5)
        );

        // one speaker revisits a second session
        let mut rs2 = rs.clone();
        rs2.push(rec("extra", "s99", "c", Some("T0")));
        let q = quality_report(&derive_weak_labels(&rs2), &rs2).unwrap();
        assert_eq!(q.split_rate, 1.0 / 5.0);
    }

    #[test]
    fn impure_label() {
        let rs = [
            rec("a", "s1", "c", Some("A")),
            rec("b", "s1", "c", Some("B")),
        ];
        let q = quality_report(&derive_weak_labels(&rs), &rs).unwrap();
        assert_eq!(q.purity, 0.0);
    }

    #[test]
    fn missing_truth_lists_utterances() {
        let rs = [rec("a", "s1", "c", Some("A")), rec("b", "s1", "d", None)];
        let err = quality_report(&derive_weak_labels(&rs), &rs).unwrap_err();
        assert!(err.to_string().contains('b'), "{err}");
    }

    fn dataset(prefix: &str, speakers: usize, per: usize) -> LabeledDataset {
        LabeledDataset::from_pairs((0..speakers * per).map(|i| {
            (
                IVector::from_slice(format!("{prefix}{i}"), &[i as f64, 1.0]),
                format!("spk{}", i / per),
            )
        }))
        .unwrap()
    }

    #[test]
    fn pooling() {
        let strong = dataset("s", 100, 2);
        let weak = dataset("w", 1000, 1);
        let p = pool_datasets(&strong, &weak).unwrap();
        assert_eq!(p.n_speakers(), 1100);
        assert_eq!(p.len(), 1200);

        let p = pool_datasets(&strong, &LabeledDataset::empty(2)).unwrap();
        assert_eq!(p.len(), strong.len());
        for ((a, la), (b, lb)) in p.iter().zip(strong.iter()) {
            assert_eq!(a, b);
            assert_eq!(la, format!("strong/{lb}"));
        }

        let clash = dataset("s", 3, 1);
        assert!(matches!(
            pool_datasets(&strong, &clash),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pooling_table_one_shapes() {
        // 2,000 strong speakers over 15,718 utterances plus 2,000 weak
        // customer sessions over 21,463 utterances
        let strong = LabeledDataset::from_pairs((0..15_718).map(|i| {
            (
                IVector::from_slice(format!("s{i}"), &[1.0]),
                format!("S{}", i % 2000),
            )
        }))
        .unwrap();
        let weak = LabeledDataset::from_pairs((0..21_463).map(|i| {
            (
                IVector::from_slice(format!("w{i}"), &[1.0]),
                format!("W{}", i % 2000),
            )
        }))
        .unwrap();
        let p = pool_datasets(&strong, &weak).unwrap();
        assert_eq!((p.n_speakers(), p.len()), (4000, 37_181));
    }

    fn records() -> impl Strategy<Value = Vec<UtteranceRecord>> {
        proptest::collection::vec((0u8..6, 0u8..2, 0u8..8), 1..40).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (s, l, t))| {
                    rec(
                        &format!("u{i}"),
                        &format!("s{s}"),
                        &format!("c{l}"),
                        Some(&format!("T{t}")),
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn weak_labels_are_order_independent(rs in records(), k in 0usize..40) {
            let a = derive_weak_labels(&rs);
            let mut shuffled = rs.clone();
            let k = k % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(&a, &derive_weak_labels(&shuffled));
            // share a label iff same session and local speaker
            for x in &rs {
                for y in &rs {
                    let same = x.session_id == y.session_id && x.local_speaker_id == y.local_speaker_id;
                    prop_assert_eq!(a.labels[&x.utt_id] == a.labels[&y.utt_id], same);
                }
            }
        }

        #[test]
        fn labels_never_span_sessions(rs in records()) {
            let w = derive_weak_labels(&rs);
            let mut sessions: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
            let mut labels: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
            for r in &rs {
                let t = r.true_speaker_id.as_deref().unwrap();
                sessions.entry(t).or_default().insert(&r.session_id);
                labels.entry(t).or_default().insert(&w.labels[&r.utt_id]);
            }
            for (t, s) in &sessions {
                prop_assert!(labels[t].len() >= s.len());
            }
        }
    }
}
