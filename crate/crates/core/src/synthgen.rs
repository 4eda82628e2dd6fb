//! Synthetic corpora with planted contours and context-dependent weights.
//!
//! Prototype shapes are chosen so that each one is computed exactly by a
//! small network, which lets [`exact_model`] build a model that reproduces a
//! noise-free corpus to rounding error.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FunctionInstance, FunctionType, ProsodyFrame, Registry, RhythmicUnit, Utterance};
use crate::error::{Error, Result};
use crate::eval::{mean_std, CellGrouping, CellKey};
use crate::net::{DenseNet, Layer, OutputActivation};
use crate::wcg::{
    build_ramps, context_dim, ContextMode, EmphasisCategory, ModelConfig, ModelSet, RampVector, WeightTarget,
    WeightedContourGenerator, RAMP_DIM,
};

fn default_sharpness() -> f64 {
    0.1
}

/// Parametric contour family, evaluated on the ramps of one unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Constant {
        pitch: [f64; 3],
        #[serde(default)]
        duration: f64,
    },
    /// Straight line in relative position from `start` to `end`.
    Linear {
        start: [f64; 3],
        end: [f64; 3],
        #[serde(default)]
        duration_start: f64,
        #[serde(default)]
        duration_end: f64,
    },
    /// Smooth window `amplitude * (tanh((x-c+w/2)/s) - tanh((x-c-w/2)/s)) / 2`;
    /// the three pitch samples sit at `x = rel - spread, rel, rel + spread`.
    Bump {
        amplitude: f64,
        center: f64,
        width: f64,
        #[serde(default = "default_sharpness")]
        sharpness: f64,
        #[serde(default)]
        spread: f64,
        #[serde(default)]
        duration_amplitude: f64,
    },
    /// Per-unit pitch template decaying linearly by `carry` across the scope.
    Tone {
        template: [f64; 3],
        #[serde(default)]
        carry: f64,
        #[serde(default)]
        duration: f64,
    },
}

impl Shape {
    fn window(x: f64, center: f64, width: f64, s: f64) -> f64 {
        0.5 * (((x - center + 0.5 * width) / s).tanh() - ((x - center - 0.5 * width) / s).tanh())
    }

    pub fn eval(&self, ramp: &RampVector) -> [f64; 4] {
        let x = ramp.relative;
        match *self {
            Shape::Constant { pitch, duration } => [pitch[0], pitch[1], pitch[2], duration],
            Shape::Linear {
                start,
                end,
                duration_start,
                duration_end,
            } => {
                let lerp = |a: f64, b: f64| a + (b - a) * x;
                [
                    lerp(start[0], end[0]),
                    lerp(start[1], end[1]),
                    lerp(start[2], end[2]),
                    lerp(duration_start, duration_end),
                ]
            }
            Shape::Bump {
                amplitude,
                center,
                width,
                sharpness,
                spread,
                duration_amplitude,
            } => {
                let at = |off: f64| Self::window(x + off, center, width, sharpness);
                [
                    amplitude * at(-spread),
                    amplitude * at(0.0),
                    amplitude * at(spread),
                    duration_amplitude * at(0.0),
                ]
            }
            Shape::Tone {
                template,
                carry,
                duration,
            } => {
                let decay = |t: f64| t + (-carry * t) * x;
                [
                    decay(template[0]),
                    decay(template[1]),
                    decay(template[2]),
                    decay(duration),
                ]
            }
        }
    }

    /// Contour network computing [`Shape::eval`] exactly (up to rounding).
    pub fn exact_net(&self) -> Result<DenseNet> {
        let linear = |bias: [f64; 4], slope: [f64; 4]| {
            let mut l = Layer::zeros(RAMP_DIM, 4);
            l.biases = bias.to_vec();
            for (o, s) in slope.iter().enumerate() {
                l.weights[o * RAMP_DIM + 3] = *s;
            }
            DenseNet::from_layers(vec![l], OutputActivation::Linear)
        };
        match *self {
            Shape::Constant { pitch, duration } => linear([pitch[0], pitch[1], pitch[2], duration], [0.0; 4]),
            Shape::Linear {
                start,
                end,
                duration_start,
                duration_end,
            } => linear(
                [start[0], start[1], start[2], duration_start],
                [
                    end[0] - start[0],
                    end[1] - start[1],
                    end[2] - start[2],
                    duration_end - duration_start,
                ],
            ),
            Shape::Tone {
                template,
                carry,
                duration,
            } => {
                let t = [template[0], template[1], template[2], duration];
                linear(t, t.map(|v| -carry * v))
            }
            Shape::Bump {
                amplitude,
                center,
                width,
                sharpness,
                spread,
                duration_amplitude,
            } => {
                let mut hidden = Layer::zeros(RAMP_DIM, 6);
                for (j, off) in [-spread, 0.0, spread].into_iter().enumerate() {
                    for (k, edge) in [0.5 * width, -0.5 * width].into_iter().enumerate() {
                        let unit = 2 * j + k;
                        hidden.weights[unit * RAMP_DIM + 3] = 1.0 / sharpness;
                        hidden.biases[unit] = (off - center + edge) / sharpness;
                    }
                }
                let mut out = Layer::zeros(6, 4);
                for j in 0..3 {
                    out.weights[j * 6 + 2 * j] = 0.5 * amplitude;
                    out.weights[j * 6 + 2 * j + 1] = -0.5 * amplitude;
                }
                out.weights[3 * 6 + 2] = 0.5 * duration_amplitude;
                out.weights[3 * 6 + 3] = -0.5 * duration_amplitude;
                DenseNet::from_layers(vec![hidden, out], OutputActivation::Linear)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeSpec {
    pub function: FunctionType,
    #[serde(default)]
    pub scope_extension_right: usize,
    pub shape: Shape,
}

fn one() -> f64 {
    1.0
}

/// How instances of a function are laid over an utterance skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// `count` instances with random spans and landmark, placed with `probability`.
    Random {
        function: FunctionType,
        count: [usize; 2],
        left_span: [usize; 2],
        right_span: [usize; 2],
        #[serde(default = "one")]
        probability: f64,
    },
    /// One single-unit instance on every unit, function drawn from `functions`.
    EachUnit {
        functions: Vec<FunctionType>,
        #[serde(default)]
        same_per_utterance: bool,
    },
    /// Tiles the utterance into words with one instance each, landmark on the last unit.
    Words { function: FunctionType, length: [usize; 2] },
}

/// Planted weight for instances of `function`; unset keys match anything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantEntry {
    pub function: FunctionType,
    #[serde(default)]
    pub attitude: Option<FunctionType>,
    #[serde(default)]
    pub emphasis: Option<EmphasisCategory>,
    pub weight: f64,
}

impl PlantEntry {
    fn matches(&self, f: &FunctionType, cell: &CellKey) -> bool {
        &self.function == f
            && self.attitude.as_ref().is_none_or(|a| *a == cell.attitude)
            && self.emphasis.is_none_or(|e| e == cell.emphasis)
    }

    pub fn label(&self) -> String {
        let a = self
            .attitude
            .as_ref()
            .map(|a| a.to_string())
            .unwrap_or_else(|| "*".into());
        let e = self.emphasis.map(|e| e.label()).unwrap_or("*");
        format!("{a}/{e}")
    }
}

fn default_reference_hz() -> f64 {
    120.0
}

fn default_mean_duration() -> f64 {
    180.0
}

pub const GENERATOR_SPEC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub version: u32,
    pub seed: u64,
    pub n_utterances: usize,
    /// Inclusive utterance length range in units.
    pub length: [usize; 2],
    /// Gaussian noise on pitch samples (semitones).
    pub noise_sigma: f64,
    #[serde(default)]
    pub duration_noise_sigma: f64,
    #[serde(default = "one")]
    pub nucleus_probability: f64,
    #[serde(default = "default_reference_hz")]
    pub reference_hz: f64,
    #[serde(default = "default_mean_duration")]
    pub mean_ru_duration_ms: f64,
    #[serde(default)]
    pub weight_target: WeightTarget,
    pub registry: Vec<FunctionType>,
    pub attitudes: Vec<FunctionType>,
    pub prototypes: Vec<PrototypeSpec>,
    #[serde(default)]
    pub placements: Vec<Placement>,
    #[serde(default)]
    pub plants: Vec<PlantEntry>,
}

impl GeneratorSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: GeneratorSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn registry(&self) -> Registry {
        Registry {
            functions: self.registry.clone(),
            attitudes: self.attitudes.clone(),
        }
    }

    /// Model configuration whose scope extensions match the prototypes.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            scope_extension: self
                .prototypes
                .iter()
                .map(|p| (p.function.clone(), p.scope_extension_right))
                .collect(),
            weight_target: self.weight_target,
            ..ModelConfig::default()
        }
    }

    pub fn prototype(&self, f: &FunctionType) -> Option<&PrototypeSpec> {
        self.prototypes.iter().find(|p| &p.function == f)
    }

    /// Planted weight and the index of the matching plant entry.
    pub fn planted_weight(&self, f: &FunctionType, cell: &CellKey) -> (f64, Option<usize>) {
        match self.plants.iter().position(|p| p.matches(f, cell)) {
            Some(k) => (self.plants[k].weight, Some(k)),
            None => (1.0, None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.version != GENERATOR_SPEC_VERSION {
            bad.push(format!("unsupported generator spec version {}", self.version));
        }
        if self.length[0] == 0 || self.length[0] > self.length[1] {
            bad.push(format!("invalid length range {:?}", self.length));
        }
        if !(self.noise_sigma >= 0.0 && self.duration_noise_sigma >= 0.0) {
            bad.push("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.nucleus_probability) {
            bad.push("nucleus_probability must lie in [0, 1]".into());
        }
        if self.attitudes.is_empty() {
            bad.push("at least one attitude is required".into());
        }
        let reg = self.registry();
        let check_fn = |f: &FunctionType, what: &str, bad: &mut Vec<String>| {
            if !reg.contains(f) {
                bad.push(format!("{what}: `{f}` is not in the registry"));
            } else if self.prototype(f).is_none() {
                bad.push(format!("{what}: `{f}` has no prototype"));
            }
        };
        for a in &self.attitudes {
            check_fn(a, "attitude", &mut bad);
        }
        for p in &self.placements {
            match p {
                Placement::Random {
                    function,
                    count,
                    left_span,
                    right_span,
                    probability,
                } => {
                    check_fn(function, "placement", &mut bad);
                    if count[0] > count[1]
                        || left_span[0] == 0
                        || left_span[0] > left_span[1]
                        || right_span[0] > right_span[1]
                    {
                        bad.push(format!("placement `{function}`: invalid ranges"));
                    }
                    if !(0.0..=1.0).contains(probability) {
                        bad.push(format!("placement `{function}`: probability outside [0, 1]"));
                    }
                }
                Placement::EachUnit { functions, .. } => {
                    if functions.is_empty() {
                        bad.push("each_unit placement needs at least one function".into());
                    }
                    for f in functions {
                        check_fn(f, "placement", &mut bad);
                    }
                }
                Placement::Words { function, length } => {
                    check_fn(function, "placement", &mut bad);
                    if length[0] == 0 || length[0] > length[1] {
                        bad.push(format!("placement `{function}`: invalid word length range"));
                    }
                }
            }
        }
        let mut per_fn: BTreeMap<&FunctionType, Vec<f64>> = BTreeMap::new();
        for p in &self.plants {
            if !(p.weight > 0.0 && p.weight < 2.0) {
                bad.push(format!(
                    "plant {} {}: weight {} outside (0, 2)",
                    p.function,
                    p.label(),
                    p.weight
                ));
            }
            per_fn.entry(&p.function).or_default().push(p.weight);
        }
        for (f, w) in per_fn {
            let (m, _) = mean_std(&w);
            if !(0.8..=1.2).contains(&m) {
                bad.push(format!("plant `{f}`: mean weight {m:.3} outside [0.8, 1.2]"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedInstance {
    pub function: FunctionType,
    pub cell: CellKey,
    pub weight: f64,
    /// Index into the spec's plant list, if one matched.
    pub plant: Option<usize>,
    pub start: usize,
    /// Weighted noise-free frames from `start` on.
    pub frames: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedUtterance {
    pub id: String,
    pub len: usize,
    pub instances: Vec<PlantedInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub noise_sigma: f64,
    pub seed: u64,
    pub plants: Vec<PlantEntry>,
    pub utterances: Vec<PlantedUtterance>,
}

pub const GROUND_TRUTH_MAGIC: &str = "WSFC-GROUNDTRUTH 1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtHeader {
    noise_sigma: f64,
    seed: u64,
    plants: Vec<PlantEntry>,
}

impl GroundTruth {
    pub fn utterance(&self, id: &str) -> Option<&PlantedUtterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: std::io::Error| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "{GROUND_TRUTH_MAGIC}").map_err(io)?;
        let header = GtHeader {
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            plants: self.plants.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| io(e.into()))?;
        writeln!(w).map_err(io)?;
        for u in &self.utterances {
            serde_json::to_writer(&mut w, u).map_err(|e| io(e.into()))?;
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let mut next = || -> Result<Option<(usize, String)>> {
            for (i, l) in lines.by_ref() {
                let l = l.map_err(|e| Error::io(path, e))?;
                if !l.trim().is_empty() {
                    return Ok(Some((i + 1, l)));
                }
            }
            Ok(None)
        };
        match next()? {
            Some((_, m)) if m.trim() == GROUND_TRUTH_MAGIC => {}
            Some((n, m)) => return Err(perr(n, format!("expected `{GROUND_TRUTH_MAGIC}`, found `{m}`"))),
            None => return Err(perr(0, "empty ground-truth file".into())),
        }
        let (n, h) = next()?.ok_or_else(|| perr(0, "missing header".into()))?;
        let header: GtHeader = serde_json::from_str(&h).map_err(|e| perr(n, e.to_string()))?;
        let mut utterances = Vec::new();
        while let Some((n, l)) = next()? {
            utterances.push(serde_json::from_str(&l).map_err(|e| perr(n, e.to_string()))?);
        }
        Ok(GroundTruth {
            noise_sigma: header.noise_sigma,
            seed: header.seed,
            plants: header.plants,
            utterances,
        })
    }
}

fn place_random<R: Rng>(
    rng: &mut R,
    len: usize,
    function: &FunctionType,
    left: [usize; 2],
    right: [usize; 2],
) -> Result<FunctionInstance> {
    let ls = rng.gen_range(left[0]..=left[1]);
    let rs = rng.gen_range(right[0]..=right[1]);
    if ls + rs > len {
        return Err(Error::InvalidArgument(format!(
            "cannot place `{function}` with spans {ls}+{rs} in an utterance of {len} units"
        )));
    }
    let landmark = rng.gen_range(ls - 1..=len - 1 - rs);
    Ok(FunctionInstance::new(function.clone(), landmark, ls, rs))
}

fn skeleton<R: Rng>(spec: &GeneratorSpec, rng: &mut R, id: String) -> Result<Utterance> {
    let len = rng.gen_range(spec.length[0]..=spec.length[1]);
    let attitude = spec.attitudes[rng.gen_range(0..spec.attitudes.len())].clone();
    let mut instances = vec![FunctionInstance::new(attitude.clone(), len - 1, len, 0)];
    for p in &spec.placements {
        match p {
            Placement::Random {
                function,
                count,
                left_span,
                right_span,
                probability,
            } => {
                if rng.gen::<f64>() < *probability {
                    for _ in 0..rng.gen_range(count[0]..=count[1]) {
                        instances.push(place_random(rng, len, function, *left_span, *right_span)?);
                    }
                }
            }
            Placement::EachUnit {
                functions,
                same_per_utterance,
            } => {
                let fixed = functions[rng.gen_range(0..functions.len())].clone();
                for i in 0..len {
                    let f = if *same_per_utterance {
                        fixed.clone()
                    } else {
                        functions[rng.gen_range(0..functions.len())].clone()
                    };
                    instances.push(FunctionInstance::new(f, i, 1, 0));
                }
            }
            Placement::Words { function, length } => {
                let mut start = 0;
                while start < len {
                    let w = rng.gen_range(length[0]..=length[1]).min(len - start);
                    instances.push(FunctionInstance::new(function.clone(), start + w - 1, w, 0));
                    start += w;
                }
            }
        }
    }
    let units = (0..len)
        .map(|index| RhythmicUnit {
            index,
            observed: ProsodyFrame::ZERO,
            has_vocalic_nucleus: rng.gen::<f64>() < spec.nucleus_probability,
        })
        .collect();
    Ok(Utterance {
        id,
        attitude,
        units,
        instances,
    })
}

fn generate_one(spec: &GeneratorSpec, index: usize) -> Result<(Utterance, PlantedUtterance)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let mut utt = skeleton(spec, &mut rng, format!("syn{index:05}"))?;
    let len = utt.len();
    let mut clean = vec![[0.0; 4]; len];
    let mut planted = Vec::with_capacity(utt.instances.len());
    for inst in &utt.instances {
        let proto = spec
            .prototype(&inst.function)
            .ok_or_else(|| Error::UnknownFunction(inst.function.to_string()))?;
        let cell = CellKey::of(&utt, inst);
        let (weight, plant) = spec.planted_weight(&inst.function, &cell);
        let start = inst.scope().map(|(s, _)| s).unwrap_or(0);
        let frames: Vec<[f64; 4]> = build_ramps(inst, proto.scope_extension_right, len)
            .iter()
            .map(|r| {
                let mut v = proto.shape.eval(r);
                for (c, x) in v.iter_mut().enumerate() {
                    if spec.weight_target.scales(c) {
                        *x *= weight;
                    }
                }
                v
            })
            .collect();
        for (k, f) in frames.iter().enumerate() {
            for c in 0..4 {
                clean[start + k][c] += f[c];
            }
        }
        planted.push(PlantedInstance {
            function: inst.function.clone(),
            cell,
            weight,
            plant,
            start,
            frames,
        });
    }
    let pitch_noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let dur_noise = Normal::new(0.0, spec.duration_noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for (unit, c) in utt.units.iter_mut().zip(&clean) {
        let mut v = *c;
        for x in v.iter_mut().take(3) {
            *x += pitch_noise.sample(&mut rng);
        }
        v[3] += dur_noise.sample(&mut rng);
        unit.observed = ProsodyFrame::from_array(v);
    }
    let gt = PlantedUtterance {
        id: utt.id.clone(),
        len,
        instances: planted,
    };
    Ok((utt, gt))
}

/// Draws `spec.n_utterances` utterances; utterance `i` uses stream `i` of
/// the seeded generator, so output is independent of thread count.
pub fn generate_corpus(spec: &GeneratorSpec) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let pairs: Vec<(Utterance, PlantedUtterance)> = (0..spec.n_utterances)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect::<Result<_>>()?;
    let (utterances, planted): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let corpus = Corpus {
        registry: spec.registry(),
        reference_hz: spec.reference_hz,
        mean_ru_duration_ms: spec.mean_ru_duration_ms,
        utterances,
    };
    corpus.validate()?;
    Ok((
        corpus,
        GroundTruth {
            noise_sigma: spec.noise_sigma,
            seed: spec.seed,
            plants: spec.plants.clone(),
            utterances: planted,
        },
    ))
}

/// Noise-free planted sum for one utterance.
pub fn oracle_reconstruction(gt: &GroundTruth, id: &str) -> Result<Vec<ProsodyFrame>> {
    let u = gt
        .utterance(id)
        .ok_or_else(|| Error::UnknownUtterance(id.to_string()))?;
    let mut out = vec![ProsodyFrame::ZERO; u.len];
    for inst in &u.instances {
        for (k, f) in inst.frames.iter().enumerate() {
            out[inst.start + k] = out[inst.start + k] + ProsodyFrame::from_array(*f);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryRow {
    pub function: FunctionType,
    pub cell: String,
    pub count: usize,
    pub planted: f64,
    pub recovered: f64,
    pub abs_error: f64,
}

impl RecoveryRow {
    pub const HEADER: [&'static str; 6] = ["function", "cell", "count", "planted", "recovered", "abs_error"];

    pub fn record(&self) -> [String; 6] {
        [
            self.function.to_string(),
            self.cell.clone(),
            self.count.to_string(),
            self.planted.to_string(),
            self.recovered.to_string(),
            self.abs_error.to_string(),
        ]
    }
}

/// Planted vs recovered mean weight per (function, cell). Plant entries
/// that matched no instance are reported with `count = 0` and NaN means.
pub fn score_recovery(
    model: &ModelSet,
    gt: &GroundTruth,
    corpus: &Corpus,
    grouping: CellGrouping,
) -> Result<Vec<RecoveryRow>> {
    let by_id: HashMap<&str, &PlantedUtterance> = gt.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut cells: BTreeMap<(usize, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut used = vec![false; gt.plants.len()];
    for u in &corpus.utterances {
        let planted = by_id
            .get(u.id.as_str())
            .ok_or_else(|| Error::UnknownUtterance(u.id.clone()))?;
        if planted.instances.len() != u.instances.len() {
            return Err(Error::InvalidArgument(format!(
                "ground truth for `{}` does not match the corpus",
                u.id
            )));
        }
        for (k, (inst, p)) in u.instances.iter().zip(&planted.instances).enumerate() {
            let pos = model
                .registry
                .position(&inst.function)
                .ok_or_else(|| Error::UnknownFunction(inst.function.to_string()))?;
            if let Some(e) = p.plant {
                used[e] = true;
            }
            let entry = cells.entry((pos, p.cell.label(grouping))).or_default();
            entry.0.push(p.weight);
            entry.1.push(model.instance_weight(u, k)?);
        }
    }
    let mut rows: Vec<RecoveryRow> = cells
        .into_iter()
        .map(|((pos, cell), (planted, recovered))| {
            let (p, _) = mean_std(&planted);
            let (r, _) = mean_std(&recovered);
            RecoveryRow {
                function: model.registry.functions[pos].clone(),
                cell,
                count: planted.len(),
                planted: p,
                recovered: r,
                abs_error: (p - r).abs(),
            }
        })
        .collect();
    for (entry, used) in gt.plants.iter().zip(used) {
        if !used {
            rows.push(RecoveryRow {
                function: entry.function.clone(),
                cell: entry.label(),
                count: 0,
                planted: entry.weight,
                recovered: f64::NAN,
                abs_error: f64::NAN,
            });
        }
    }
    Ok(rows)
}

/// Logit of `w / 2`, the weight-module pre-activation producing `w`.
fn weight_logit(w: f64) -> f64 {
    (w / (2.0 - w)).ln()
}

/// Gain of the cell-detector units; `tanh(±GAIN/2)` rounds to ±1.
const CELL_GAIN: f64 = 50.0;

/// Builds a model that reproduces the planted generator exactly: contour
/// networks from [`Shape::exact_net`] and weight modules with one hidden
/// unit per context cell.
///
/// Attitude-keyed plants need any context mode; emphasis-keyed plants need
/// [`ContextMode::Emphasis`].
pub fn exact_model(spec: &GeneratorSpec, mode: ContextMode) -> Result<ModelSet> {
    spec.validate()?;
    if mode != ContextMode::Emphasis && spec.plants.iter().any(|p| p.emphasis.is_some()) {
        return Err(Error::InvalidArgument(
            "emphasis-keyed plants need the emphasis context mode".into(),
        ));
    }
    let reg = spec.registry();
    let dim = context_dim(mode, &reg);
    let base = reg.attitudes.len();
    // (attitude index, emphasis category) for every cell the detector distinguishes
    let cells: Vec<(usize, Option<EmphasisCategory>)> = match mode {
        ContextMode::Emphasis => (0..base)
            .flat_map(|a| EmphasisCategory::ALL.into_iter().map(move |e| (a, Some(e))))
            .collect(),
        _ => (0..base).map(|a| (a, None)).collect(),
    };
    let generators = reg
        .functions
        .iter()
        .map(|f| {
            let (cg, ext) = match spec.prototype(f) {
                Some(p) => (p.shape.exact_net()?, p.scope_extension_right),
                None => (DenseNet::zeros(&[RAMP_DIM, 1, 4], OutputActivation::Linear)?, 0),
            };
            let mut hidden = Layer::zeros(dim, cells.len());
            let mut out = Layer::zeros(cells.len(), 1);
            let mut total = 0.0;
            for (u, &(a, e)) in cells.iter().enumerate() {
                hidden.weights[u * dim + a] = CELL_GAIN;
                let bits = match e {
                    Some(e) => {
                        hidden.weights[u * dim + base + 1 + e.index()] = CELL_GAIN;
                        2.0
                    }
                    None => 1.0,
                };
                hidden.biases[u] = -(bits - 0.5) * CELL_GAIN;
                let key = CellKey {
                    attitude: reg.attitudes[a].clone(),
                    emphasis: e.unwrap_or(EmphasisCategory::None),
                };
                let v = 0.5 * weight_logit(spec.planted_weight(f, &key).0);
                out.weights[u] = v;
                total += v;
            }
            out.biases[0] = total;
            let wm = DenseNet::from_layers(vec![hidden, out], OutputActivation::Sigmoid)?;
            WeightedContourGenerator::new(f.clone(), cg, wm, ext)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelSet::from_generators(&reg, mode, spec.weight_target, generators)
}
