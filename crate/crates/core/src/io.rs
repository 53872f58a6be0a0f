//! Core record types and the plain-text / JSON file formats.
//!
//! Every writer goes through [`write_atomic`], so a reader never observes a
//! half-written file. Reals in text files are written with Rust's shortest
//! round-trip representation; reals in model files use 17 significant digits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plda::PldaModel;
use crate::preprocess::Preprocessor;

/// One utterance embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub utt_id: String,
    pub values: DVector<f64>,
}

impl IVector {
    pub fn new(utt_id: impl Into<String>, values: impl Into<DVector<f64>>) -> Self {
        Self {
            utt_id: utt_id.into(),
            values: values.into(),
        }
    }

    pub fn from_slice(utt_id: impl Into<String>, values: &[f64]) -> Self {
        Self::new(utt_id, DVector::from_column_slice(values))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Session metadata for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub session_id: String,
    /// Only unique within `session_id`.
    pub local_speaker_id: String,
    pub true_speaker_id: Option<String>,
}

impl UtteranceRecord {
    pub fn new(
        utt_id: impl Into<String>,
        session_id: impl Into<String>,
        local_speaker_id: impl Into<String>,
        true_speaker_id: Option<String>,
    ) -> Self {
        Self {
            utt_id: utt_id.into(),
            session_id: session_id.into(),
            local_speaker_id: local_speaker_id.into(),
            true_speaker_id,
        }
    }
}

/// Vectors paired one-to-one with speaker labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    vectors: Vec<IVector>,
    labels: Vec<String>,
}

impl LabeledDataset {
    /// Joins vectors with a label map. Every vector must be labeled and every
    /// label must refer to a vector.
    pub fn new(vectors: Vec<IVector>, labels: &BTreeMap<String, String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(vectors.len());
        let mut out = Vec::with_capacity(vectors.len());
        for v in &vectors {
            if !seen.insert(v.utt_id.as_str()) {
                return Err(Error::DuplicateKey {
                    key: v.utt_id.clone(),
                    path: None,
                    line: 0,
                });
            }
            let label = labels
                .get(&v.utt_id)
                .ok_or_else(|| Error::MissingKey(format!("label for utterance {}", v.utt_id)))?;
            out.push(label.clone());
        }
        if let Some(extra) = labels.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(Error::MissingKey(format!(
                "vector for labeled utterance {extra}"
            )));
        }
        Self::from_pairs(vectors.into_iter().zip(out))
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (IVector, String)>) -> Result<Self> {
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        let mut seen = HashSet::new();
        for (v, l) in pairs {
            if !seen.insert(v.utt_id.clone()) {
                return Err(Error::DuplicateKey {
                    key: v.utt_id,
                    path: None,
                    line: 0,
                });
            }
            vectors.push(v);
            labels.push(l);
        }
        let dim = check_dims(&vectors)?;
        Ok(Self {
            dim,
            vectors,
            labels,
        })
    }

    /// An empty dataset of the given dimension.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[IVector] {
        &self.vectors
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&IVector, &str)> {
        self.vectors
            .iter()
            .zip(self.labels.iter().map(String::as_str))
    }

    pub fn n_speakers(&self) -> usize {
        self.labels.iter().collect::<HashSet<_>>().len()
    }

    /// Utterance indices per label, in label order.
    pub fn groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut g: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            g.entry(l.as_str()).or_default().push(i);
        }
        g
    }

    /// Same vectors with every value replaced by `f(value)`; labels untouched.
    pub fn map_vectors(
        &self,
        mut f: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<Self> {
        let vectors = self
            .vectors
            .iter()
            .map(|v| Ok(IVector::new(v.utt_id.clone(), f(&v.values)?)))
            .collect::<Result<Vec<_>>>()?;
        let dim = vectors.first().map_or(self.dim, IVector::dim);
        Ok(Self {
            dim,
            vectors,
            labels: self.labels.clone(),
        })
    }

    /// Keeps the utterances whose label satisfies `keep`.
    pub fn filter_labels(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        let (vectors, labels) = self
            .iter()
            .filter(|(_, l)| keep(l))
            .map(|(v, l)| (v.clone(), l.to_string()))
            .unzip();
        Self {
            dim: self.dim,
            vectors,
            labels,
        }
    }

    pub fn label_map(&self) -> BTreeMap<String, String> {
        self.iter()
            .map(|(v, l)| (v.utt_id.clone(), l.to_string()))
            .collect()
    }
}

/// Checks that all vectors share one dimension (at least 1) and are finite.
pub fn check_dims(vectors: &[IVector]) -> Result<usize> {
    let Some(first) = vectors.first() else {
        return Ok(0);
    };
    let dim = first.dim();
    if dim == 0 {
        return Err(Error::Precondition(format!(
            "utterance {} has an empty vector",
            first.utt_id
        )));
    }
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: v.dim(),
            });
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition(format!(
                "utterance {} has a non-finite value",
                v.utt_id
            )));
        }
    }
    Ok(dim)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub is_target: bool,
}

/// Enrollment/test pairs. No pair appears twice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(trials.len());
        for t in &trials {
            if !seen.insert((t.enroll.as_str(), t.test.as_str())) {
                return Err(Error::DuplicateKey {
                    key: format!("{} {}", t.enroll, t.test),
                    path: None,
                    line: 0,
                });
            }
        }
        Ok(Self { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.len() - self.n_target()
    }
}

/// One line of a scores file. `is_target` is present only when the file
/// carries an embedded fourth column.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    pub is_target: Option<bool>,
}

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn write_atomic(
    path: &Path,
    f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let tmp = builder.tempfile_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        f(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

// ---------------------------------------------------------------- i-vectors

/// Reads `utt_id v1 v2 ... vD` lines. Order is preserved.
pub fn load_ivectors(path: impl AsRef<Path>) -> Result<Vec<IVector>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out: Vec<IVector> = Vec::new();
    let mut seen = HashSet::new();
    let mut dim = None;
    for (lineno, line) in content_lines(&text) {
        let mut fields = line.split_whitespace();
        let utt = fields.next().expect("non-empty line has a field");
        let values = fields
            .map(|f| {
                let x: f64 = f.parse().map_err(|_| {
                    Error::format(path, lineno, format!("`{f}` is not a real number"))
                })?;
                if !x.is_finite() {
                    return Err(Error::format(
                        path,
                        lineno,
                        format!("non-finite value `{f}`"),
                    ));
                }
                Ok(x)
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::format(
                path,
                lineno,
                format!("utterance {utt} has no values"),
            ));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("dimension mismatch: expected {d}, got {}", values.len()),
                ))
            }
            _ => {}
        }
        if !seen.insert(utt.to_string()) {
            return Err(Error::DuplicateKey {
                key: utt.to_string(),
                path: Some(path.to_path_buf()),
                line: lineno,
            });
        }
        out.push(IVector::new(utt, DVector::from_vec(values)));
    }
    Ok(out)
}

pub fn save_ivectors<'a>(
    path: impl AsRef<Path>,
    vectors: impl IntoIterator<Item = &'a IVector>,
) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        for v in vectors {
            write!(w, "{}", v.utt_id)?;
            for x in v.values.iter() {
                write!(w, " {x:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

/// Lookup table from utterance id to vector.
pub fn index_vectors(vectors: &[IVector]) -> HashMap<&str, &IVector> {
    vectors.iter().map(|v| (v.utt_id.as_str(), v)).collect()
}

// ----------------------------------------------------------------- metadata

const META_COLUMNS: [&str; 4] = [
    "utt_id",
    "session_id",
    "local_speaker_id",
    "true_speaker_id",
];

/// Reads the metadata CSV. `true_speaker_id` may be empty or absent.
pub fn load_metadata(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let mut idx = [0usize; 3];
    for (slot, name) in idx.iter_mut().zip(&META_COLUMNS[..3]) {
        *slot = col(name)
            .ok_or_else(|| Error::format(path, 1, format!("missing required column `{name}`")))?;
    }
    let truth = col(META_COLUMNS[3]);

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (row, rec) in rdr.records().enumerate() {
        let lineno = row + 2;
        let rec = rec.map_err(|e| Error::format(path, lineno, e.to_string()))?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| {
                Error::format(path, lineno, format!("missing column `{}`", &header[i]))
            })
        };
        let utt = field(idx[0])?;
        let session = field(idx[1])?;
        let local = field(idx[2])?;
        if utt.is_empty() || session.is_empty() || local.is_empty() {
            return Err(Error::format(path, lineno, "empty required field"));
        }
        for (name, v) in [("session_id", session), ("local_speaker_id", local)] {
            if v.contains('/') {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("{name} `{v}` contains `/`"),
                ));
            }
        }
        let true_spk = truth
            .and_then(|i| rec.get(i))
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        if !seen.insert(utt.to_string()) {
            return Err(Error::DuplicateKey {
                key: utt.to_string(),
                path: Some(path.to_path_buf()),
                line: lineno,
            });
        }
        out.push(UtteranceRecord::new(utt, session, local, true_spk));
    }
    Ok(out)
}

pub fn save_metadata<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a UtteranceRecord>,
) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(META_COLUMNS)?;
        for r in records {
            csv.write_record([
                r.utt_id.as_str(),
                &r.session_id,
                &r.local_speaker_id,
                r.true_speaker_id.as_deref().unwrap_or(""),
            ])?;
        }
        csv.flush()
    })
}

// ------------------------------------------------------------------- labels

/// Reads `utt_id<TAB>label` lines.
pub fn load_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (lineno, line) in content_lines(&text) {
        let (utt, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, lineno, "expected `utt_id<TAB>label`"))?;
        let (utt, label) = (utt.trim(), label.trim());
        if utt.is_empty() || label.is_empty() {
            return Err(Error::format(path, lineno, "empty utterance id or label"));
        }
        if out.insert(utt.to_string(), label.to_string()).is_some() {
            return Err(Error::DuplicateKey {
                key: utt.to_string(),
                path: Some(path.to_path_buf()),
                line: lineno,
            });
        }
    }
    Ok(out)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &BTreeMap<String, String>) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        for (utt, label) in labels {
            writeln!(w, "{utt}\t{label}")?;
        }
        Ok(())
    })
}

// ------------------------------------------------------------------- trials

pub fn load_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut trials = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in content_lines(&text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [enroll, test, flag] = f[..] else {
            return Err(Error::format(
                path,
                lineno,
                "expected `enroll test target|nontarget`",
            ));
        };
        let is_target = parse_flag(flag).ok_or_else(|| {
            Error::format(
                path,
                lineno,
                format!("`{flag}` is neither target nor nontarget"),
            )
        })?;
        if !seen.insert((enroll.to_string(), test.to_string())) {
            return Err(Error::DuplicateKey {
                key: format!("{enroll} {test}"),
                path: Some(path.to_path_buf()),
                line: lineno,
            });
        }
        trials.push(Trial {
            enroll: enroll.to_string(),
            test: test.to_string(),
            is_target,
        });
    }
    Ok(TrialList { trials })
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "target" => Some(true),
        "nontarget" => Some(false),
        _ => None,
    }
}

fn flag_str(t: bool) -> &'static str {
    if t {
        "target"
    } else {
        "nontarget"
    }
}

pub fn save_trials(path: impl AsRef<Path>, trials: &TrialList) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        for t in trials.trials() {
            writeln!(w, "{} {} {}", t.enroll, t.test, flag_str(t.is_target))?;
        }
        Ok(())
    })
}

// ------------------------------------------------------------------- scores

/// Reads `enroll test score` lines, optionally followed by a
/// `target|nontarget` column.
pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in content_lines(&text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let (enroll, test, score, flag) = match f[..] {
            [e, t, s] => (e, t, s, None),
            [e, t, s, fl] => (e, t, s, Some(fl)),
            _ => {
                return Err(Error::format(
                    path,
                    lineno,
                    "expected `enroll test score [target|nontarget]`",
                ))
            }
        };
        let score: f64 = score
            .parse()
            .map_err(|_| Error::format(path, lineno, format!("`{score}` is not a real number")))?;
        if !score.is_finite() {
            return Err(Error::format(path, lineno, "non-finite score"));
        }
        let is_target = match flag {
            None => None,
            Some(fl) => Some(parse_flag(fl).ok_or_else(|| {
                Error::format(
                    path,
                    lineno,
                    format!("`{fl}` is neither target nor nontarget"),
                )
            })?),
        };
        if !seen.insert((enroll.to_string(), test.to_string())) {
            return Err(Error::DuplicateKey {
                key: format!("{enroll} {test}"),
                path: Some(path.to_path_buf()),
                line: lineno,
            });
        }
        out.push(ScoreLine {
            enroll: enroll.to_string(),
            test: test.to_string(),
            score,
            is_target,
        });
    }
    Ok(out)
}

pub fn save_scores(path: impl AsRef<Path>, scores: &[ScoreLine]) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        for s in scores {
            write!(w, "{} {} {:?}", s.enroll, s.test, s.score)?;
            if let Some(t) = s.is_target {
                write!(w, " {}", flag_str(t))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

// -------------------------------------------------------------------- model

/// A trained backend: the PLDA model plus the preprocessing it was trained
/// behind.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub plda: PldaModel,
    pub preprocess: Option<Preprocessor>,
}

impl From<PldaModel> for ModelFile {
    fn from(plda: PldaModel) -> Self {
        Self {
            plda,
            preprocess: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawPreprocess {
    mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    whitener: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    dim: usize,
    rank: usize,
    u: Vec<f64>,
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preprocess: Option<RawPreprocess>,
}

/// Writes every float with 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    what: &str,
    path: &Path,
) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("`{what}` must be {nrows}x{ncols}"),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Serializes a model to the JSON text stored on disk.
pub fn model_to_json(model: &ModelFile) -> Result<String> {
    let m = &model.plda;
    let finite = m
        .u()
        .iter()
        .chain(m.v().iter())
        .chain(m.sigma().iter())
        .all(|x| x.is_finite());
    if !finite {
        return Err(Error::Precondition("model has non-finite entries".into()));
    }
    let raw = RawModel {
        dim: m.dim(),
        rank: m.rank(),
        u: m.u().iter().copied().collect(),
        v: rows(m.v()),
        sigma: rows(m.sigma()),
        preprocess: model.preprocess.as_ref().map(|p| RawPreprocess {
            mean: p.mean().iter().copied().collect(),
            whitener: p.whitener().map(rows),
        }),
    };
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    raw.serialize(&mut ser).expect("in-memory serialization");
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

pub fn model_from_json(text: &str, path: &Path) -> Result<ModelFile> {
    let raw: RawModel = serde_json::from_str(text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let bad = |msg: String| Error::Malformed {
        path: path.to_path_buf(),
        msg,
    };
    if raw.u.len() != raw.dim {
        return Err(bad(format!(
            "`u` has length {} but dim is {}",
            raw.u.len(),
            raw.dim
        )));
    }
    let v = from_rows(&raw.v, raw.dim, raw.rank, "V", path)?;
    let sigma = from_rows(&raw.sigma, raw.dim, raw.dim, "sigma", path)?;
    let plda =
        PldaModel::new(DVector::from_vec(raw.u), v, sigma).map_err(|e| bad(e.to_string()))?;
    let preprocess = match raw.preprocess {
        None => None,
        Some(p) => {
            if p.mean.len() != raw.dim {
                return Err(bad(format!(
                    "preprocess mean has length {}, expected {}",
                    p.mean.len(),
                    raw.dim
                )));
            }
            let w = p
                .whitener
                .map(|w| from_rows(&w, raw.dim, raw.dim, "preprocess.whitener", path))
                .transpose()?;
            Some(Preprocessor::new(DVector::from_vec(p.mean), w).map_err(|e| bad(e.to_string()))?)
        }
    };
    Ok(ModelFile { plda, preprocess })
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<()> {
    let text = model_to_json(model)?;
    write_atomic(path.as_ref(), |w| w.write_all(text.as_bytes()))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    model_from_json(&read_text(path)?, path)
}
