//! Annotated prosodic corpora: the domain types, the line-delimited file
//! format, validation and deterministic train/validation/test splitting.
//!
//! A corpus file is plain UTF-8 text, one record per line:
//!
//! ```text
//! WSFC-CORPUS 1
//! {"registry":["DC","DI","XX"],"attitudes":["DC","DI"],"reference_hz":120.0,"mean_ru_duration_ms":180.0}
//! {"id":"u0","attitude":"DC","units":[[0.1,0.4,0.2,-0.05,true],...],"instances":[["DC",5,6,0],["XX",2,1,1]]}
//! ```
//!
//! Each unit is `[pitch_start, pitch_mid, pitch_end, duration_coeff, has_nucleus]`
//! with pitch in semitones relative to `reference_hz`, and each instance is
//! `[function, landmark, left_span, right_span]`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &str = "WSFC-CORPUS 1";

/// Largest pitch excursion accepted, in semitones from the reference.
pub const PITCH_LIMIT: f64 = 48.0;

/// Function tags shipped with the default registry.
pub const BUILTIN_FUNCTIONS: [&str; 17] = [
    "DC", "QS", "EX", "DI", "SC", "EV", "DD", "DG", "XX", "EM", "ID", "IT", "WB", "C1", "C2", "C3", "C4",
];

/// Symbolic tag of a communicative function (`DC`, `XX`, `C4`, ...).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionType(String);

impl FunctionType {
    pub fn new(tag: impl Into<String>) -> Self {
        FunctionType(tag.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FunctionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FunctionType {
    fn from(s: &str) -> Self {
        FunctionType::new(s)
    }
}

/// Prosody of one rhythmic unit: three pitch samples over the vocalic
/// nucleus (start, mid, end; semitones) and a log duration coefficient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProsodyFrame {
    pub pitch: [f64; 3],
    pub duration: f64,
}

impl ProsodyFrame {
    pub const ZERO: ProsodyFrame = ProsodyFrame {
        pitch: [0.0; 3],
        duration: 0.0,
    };

    pub fn new(pitch: [f64; 3], duration: f64) -> Self {
        ProsodyFrame { pitch, duration }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        ProsodyFrame {
            pitch: [v[0], v[1], v[2]],
            duration: v[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.pitch[0], self.pitch[1], self.pitch[2], self.duration]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    fn violation(&self) -> Option<String> {
        if !self.is_finite() {
            return Some("non-finite prosody value".to_string());
        }
        if self.pitch.iter().any(|p| p.abs() > PITCH_LIMIT) {
            return Some(format!("pitch outside ±{PITCH_LIMIT} semitones"));
        }
        None
    }
}

impl std::ops::Add for ProsodyFrame {
    type Output = ProsodyFrame;

    fn add(self, other: ProsodyFrame) -> ProsodyFrame {
        let (a, b) = (self.to_array(), other.to_array());
        ProsodyFrame::from_array([a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]])
    }
}

impl std::ops::Sub for ProsodyFrame {
    type Output = ProsodyFrame;

    fn sub(self, other: ProsodyFrame) -> ProsodyFrame {
        let (a, b) = (self.to_array(), other.to_array());
        ProsodyFrame::from_array([a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhythmicUnit {
    pub index: usize,
    pub observed: ProsodyFrame,
    pub has_vocalic_nucleus: bool,
}

/// One occurrence of a function over a scope of rhythmic units.
///
/// The scope is `[landmark + 1 - left_span, landmark + right_span]`, so
/// `left_span` counts the landmark itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionInstance {
    pub function: FunctionType,
    pub landmark: usize,
    pub left_span: usize,
    pub right_span: usize,
}

impl FunctionInstance {
    pub fn new(function: impl Into<FunctionType>, landmark: usize, left_span: usize, right_span: usize) -> Self {
        FunctionInstance {
            function: function.into(),
            landmark,
            left_span,
            right_span,
        }
    }

    /// Inclusive scope bounds, or `None` when the scope starts before RU 0
    /// or `left_span` is zero.
    pub fn scope(&self) -> Option<(usize, usize)> {
        if self.left_span == 0 {
            return None;
        }
        let start = (self.landmark + 1).checked_sub(self.left_span)?;
        Some((start, self.landmark + self.right_span))
    }

    pub fn len(&self) -> usize {
        self.left_span + self.right_span
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<F: Into<FunctionType>> From<(F, usize, usize, usize)> for FunctionInstance {
    fn from((f, l, ls, rs): (F, usize, usize, usize)) -> Self {
        FunctionInstance::new(f, l, ls, rs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub attitude: FunctionType,
    pub units: Vec<RhythmicUnit>,
    pub instances: Vec<FunctionInstance>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn observed(&self) -> impl Iterator<Item = ProsodyFrame> + '_ {
        self.units.iter().map(|u| u.observed)
    }

    fn violations(&self, registry: &Registry, out: &mut Vec<String>) {
        let n = self.units.len();
        let tag = |msg: String| format!("utterance `{}`: {msg}", self.id);
        if n == 0 {
            out.push(tag("no rhythmic units".into()));
        }
        for (i, unit) in self.units.iter().enumerate() {
            if unit.index != i {
                out.push(tag(format!("unit {i} carries index {}", unit.index)));
            }
            if let Some(v) = unit.observed.violation() {
                out.push(tag(format!("unit {i}: {v}")));
            }
        }
        if !registry.is_attitude(&self.attitude) {
            out.push(tag(format!("attitude `{}` is not in the attitude set", self.attitude)));
        }
        let mut attitude_scopes = 0;
        for (k, inst) in self.instances.iter().enumerate() {
            let name = format!(
                "instance {k} ({} @{} -{} +{})",
                inst.function, inst.landmark, inst.left_span, inst.right_span
            );
            if !registry.contains(&inst.function) {
                out.push(tag(format!("{name}: function not in registry")));
            }
            match inst.scope() {
                Some((s, e)) if e < n => {
                    if inst.function == self.attitude && s == 0 && e + 1 == n {
                        attitude_scopes += 1;
                    }
                }
                _ => out.push(tag(format!("{name}: scope exceeds utterance of {n} units"))),
            }
        }
        if attitude_scopes != 1 {
            out.push(tag(format!(
                "expected exactly one `{}` instance covering all units, found {attitude_scopes}",
                self.attitude
            )));
        }
    }
}

/// Ordered set of function tags plus the subset acting as attitudes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub functions: Vec<FunctionType>,
    pub attitudes: Vec<FunctionType>,
}

impl Registry {
    pub fn new<F: Into<FunctionType>>(
        functions: impl IntoIterator<Item = F>,
        attitudes: impl IntoIterator<Item = F>,
    ) -> Self {
        Registry {
            functions: functions.into_iter().map(Into::into).collect(),
            attitudes: attitudes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, f: &FunctionType) -> bool {
        self.functions.contains(f)
    }

    pub fn is_attitude(&self, f: &FunctionType) -> bool {
        self.attitudes.contains(f)
    }

    pub fn position(&self, f: &FunctionType) -> Option<usize> {
        self.functions.iter().position(|g| g == f)
    }

    pub fn attitude_position(&self, f: &FunctionType) -> Option<usize> {
        self.attitudes.iter().position(|g| g == f)
    }

    /// Registered functions that are not attitudes, in registry order.
    pub fn non_attitudes(&self) -> impl Iterator<Item = &FunctionType> {
        self.functions.iter().filter(move |f| !self.is_attitude(f))
    }

    fn violations(&self, out: &mut Vec<String>) {
        let mut seen = HashSet::new();
        for f in &self.functions {
            if !seen.insert(f) {
                out.push(format!("registry: duplicate function `{f}`"));
            }
        }
        let mut seen = HashSet::new();
        for a in &self.attitudes {
            if !self.contains(a) {
                out.push(format!("registry: attitude `{a}` is not a registered function"));
            }
            if !seen.insert(a) {
                out.push(format!("registry: duplicate attitude `{a}`"));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub registry: Registry,
    /// Semitone reference frequency in Hz.
    pub reference_hz: f64,
    /// Mean RU duration in ms; duration coefficients are `ln(d / mean)`.
    pub mean_ru_duration_ms: f64,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn empty(registry: Registry, reference_hz: f64, mean_ru_duration_ms: f64) -> Self {
        Corpus {
            registry,
            reference_hz,
            mean_ru_duration_ms,
            utterances: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn unit_count(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }

    /// Same header, only the utterances accepted by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Utterance) -> bool) -> Corpus {
        Corpus {
            utterances: self.utterances.iter().filter(|u| keep(u)).cloned().collect(),
            ..self.header_only()
        }
    }

    fn header_only(&self) -> Corpus {
        Corpus::empty(self.registry.clone(), self.reference_hz, self.mean_ru_duration_ms)
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut out = Vec::new();
        self.registry.violations(&mut out);
        if !(self.reference_hz.is_finite() && self.reference_hz > 0.0) {
            out.push(format!(
                "header: reference_hz must be positive, got {}",
                self.reference_hz
            ));
        }
        if !(self.mean_ru_duration_ms.is_finite() && self.mean_ru_duration_ms > 0.0) {
            out.push(format!(
                "header: mean_ru_duration_ms must be positive, got {}",
                self.mean_ru_duration_ms
            ));
        }
        let mut ids = HashSet::new();
        for u in &self.utterances {
            if !ids.insert(u.id.as_str()) {
                out.push(format!("duplicate utterance id `{}`", u.id));
            }
            u.violations(&self.registry, &mut out);
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(out))
        }
    }
}

/// `12 * log2(f0 / reference)`.
pub fn hz_to_semitones(f0: f64, reference: f64) -> Result<f64> {
    if !(f0 > 0.0 && reference > 0.0) || !f0.is_finite() || !reference.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "frequencies must be positive, got f0={f0} ref={reference}"
        )));
    }
    Ok(12.0 * (f0 / reference).log2())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    registry: Vec<FunctionType>,
    attitudes: Vec<FunctionType>,
    reference_hz: f64,
    mean_ru_duration_ms: f64,
}

type UnitTuple = (f64, f64, f64, f64, bool);
type InstanceTuple = (FunctionType, usize, usize, usize);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    attitude: FunctionType,
    units: Vec<UnitTuple>,
    instances: Vec<InstanceTuple>,
}

impl From<&Utterance> for UtteranceRecord {
    fn from(u: &Utterance) -> Self {
        UtteranceRecord {
            id: u.id.clone(),
            attitude: u.attitude.clone(),
            units: u
                .units
                .iter()
                .map(|r| {
                    let p = r.observed.pitch;
                    (p[0], p[1], p[2], r.observed.duration, r.has_vocalic_nucleus)
                })
                .collect(),
            instances: u
                .instances
                .iter()
                .map(|i| (i.function.clone(), i.landmark, i.left_span, i.right_span))
                .collect(),
        }
    }
}

impl From<UtteranceRecord> for Utterance {
    fn from(r: UtteranceRecord) -> Self {
        Utterance {
            id: r.id,
            attitude: r.attitude,
            units: r
                .units
                .into_iter()
                .enumerate()
                .map(|(index, (a, b, c, d, nucleus))| RhythmicUnit {
                    index,
                    observed: ProsodyFrame::new([a, b, c], d),
                    has_vocalic_nucleus: nucleus,
                })
                .collect(),
            instances: r
                .instances
                .into_iter()
                .map(|(f, l, ls, rs)| FunctionInstance::new(f, l, ls, rs))
                .collect(),
        }
    }
}

/// Reads and validates a corpus file. Malformed records abort the load.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header: Option<HeaderRecord> = None;
    let mut utterances = Vec::new();
    let mut saw_magic = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if !saw_magic {
            if text != CORPUS_MAGIC {
                return Err(parse_err(lineno, format!("expected `{CORPUS_MAGIC}`, found `{text}`")));
            }
            saw_magic = true;
        } else if header.is_none() {
            header = Some(serde_json::from_str(text).map_err(|e| parse_err(lineno, format!("header: {e}")))?);
        } else {
            let rec: UtteranceRecord =
                serde_json::from_str(text).map_err(|e| parse_err(lineno, format!("utterance record: {e}")))?;
            utterances.push(Utterance::from(rec));
        }
    }
    let header = header.ok_or_else(|| parse_err(0, "missing magic line or header record".into()))?;
    let corpus = Corpus {
        registry: Registry {
            functions: header.registry,
            attitudes: header.attitudes,
        },
        reference_hz: header.reference_hz,
        mean_ru_duration_ms: header.mean_ru_duration_ms,
        utterances,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Writes a corpus in the line-delimited format read by [`load_corpus`].
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus(corpus, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_corpus(corpus: &Corpus, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{CORPUS_MAGIC}")?;
    let header = HeaderRecord {
        registry: corpus.registry.functions.clone(),
        attitudes: corpus.registry.attitudes.clone(),
        reference_hz: corpus.reference_hz,
        mean_ru_duration_ms: corpus.mean_ru_duration_ms,
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    for u in &corpus.utterances {
        serde_json::to_writer(&mut *w, &UtteranceRecord::from(u))?;
        writeln!(w)?;
    }
    Ok(())
}

/// Shuffles utterances with `seed` and cuts them into train/val/test.
///
/// Validation and test sizes are `floor(n * ratio)`; the remainder goes to
/// training. Each part keeps the corpus order of its utterances.
pub fn split_corpus(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} utterance(s) into 3 partitions"
        )));
    }
    let n_val = (n as f64 * rv + 1e-9).floor() as usize;
    let n_test = (n as f64 * rs + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut part = vec![0u8; n];
    for (rank, &idx) in order.iter().enumerate() {
        part[idx] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }
    let pick = |p: u8| {
        let mut idx = 0;
        corpus.filter(|_| {
            let keep = part[idx] == p;
            idx += 1;
            keep
        })
    };
    Ok((pick(0), pick(1), pick(2)))
}
