//! Weighted contour generators.
//!
//! A [`WeightedContourGenerator`] pairs a contour network, which maps the
//! position ramps of one rhythmic unit to a prosody frame, with a weight
//! network, which maps a context vector to one scalar in `(0, 2)` applied to
//! every frame of the instance. A [`ModelSet`] holds one generator per
//! registered function.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::corpus::{FunctionInstance, FunctionType, ProsodyFrame, Registry, Utterance};
use crate::error::{Error, Result};
use crate::net::{DenseNet, OutputActivation};

pub const RAMP_DIM: usize = 4;
pub const FRAME_DIM: usize = 4;
/// Tag of the ramp feature layout, stored in checkpoints.
pub const RAMP_ENCODING: &str = "ramps-v1";
/// Count features are multiplied by this before entering the network.
pub const COUNT_SCALE: f64 = 0.1;

/// Position features of one rhythmic unit inside a (possibly extended) scope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampVector {
    /// Signed distance from the landmark, scaled.
    pub offset: f64,
    /// Distance to the first unit of the scope, scaled.
    pub to_start: f64,
    /// Distance to the last unit of the scope, scaled.
    pub to_end: f64,
    /// `(i - start) / (end - start)`, 0 for a one-unit scope.
    pub relative: f64,
}

impl RampVector {
    pub fn to_array(self) -> [f64; RAMP_DIM] {
        [self.offset, self.to_start, self.to_end, self.relative]
    }
}

/// Inclusive bounds of the scope extended right by `extension` units and
/// clipped to an utterance of `len` units.
pub fn extended_scope(instance: &FunctionInstance, extension: usize, len: usize) -> Option<(usize, usize)> {
    let (start, end) = instance.scope()?;
    if end >= len {
        return None;
    }
    Some((start, (end + extension).min(len.saturating_sub(1))))
}

/// One ramp per unit of the extended scope, first unit first.
///
/// Units past the end of the utterance are dropped silently, so the result
/// may be shorter than `instance.len() + extension`.
pub fn build_ramps(instance: &FunctionInstance, extension: usize, len: usize) -> Vec<RampVector> {
    let Some((start, end)) = extended_scope(instance, extension, len) else {
        return Vec::new();
    };
    let span = (end - start) as f64;
    (start..=end)
        .map(|i| RampVector {
            offset: (i as f64 - instance.landmark as f64) * COUNT_SCALE,
            to_start: (i - start) as f64 * COUNT_SCALE,
            to_end: (end - i) as f64 * COUNT_SCALE,
            relative: if end == start { 0.0 } else { (i - start) as f64 / span },
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// One-hot over the attitude set.
    Attitude,
    /// Attitude one-hot plus one flag per non-attitude function overlapping the scope.
    Overlap,
    /// Attitude one-hot, word-boundary overlap flag and emphasis position one-hot.
    Emphasis,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attitude" => Ok(ContextMode::Attitude),
            "overlap" => Ok(ContextMode::Overlap),
            "emphasis" => Ok(ContextMode::Emphasis),
            other => Err(Error::InvalidArgument(format!("unknown context mode `{other}`"))),
        }
    }
}

/// Position of a landmark relative to the final unit of the nearest
/// emphasis scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmphasisCategory {
    #[serde(rename = "None")]
    None,
    #[serde(rename = "EMp")]
    Before,
    #[serde(rename = "EM")]
    Final,
    #[serde(rename = "EMc")]
    After,
}

impl EmphasisCategory {
    pub const ALL: [EmphasisCategory; 4] = [
        EmphasisCategory::None,
        EmphasisCategory::Before,
        EmphasisCategory::Final,
        EmphasisCategory::After,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EmphasisCategory::None => "None",
            EmphasisCategory::Before => "EMp",
            EmphasisCategory::Final => "EM",
            EmphasisCategory::After => "EMc",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const EMPHASIS_TAG: &str = "EM";
pub const WORD_BOUNDARY_TAG: &str = "WB";

/// Emphasis category of `instance` within `utterance`. Ties between equally
/// near emphasis scopes go to the earlier one.
pub fn emphasis_category(utterance: &Utterance, instance: &FunctionInstance) -> EmphasisCategory {
    let finals = utterance
        .instances
        .iter()
        .filter(|i| i.function.as_str() == EMPHASIS_TAG)
        .filter_map(|i| i.scope().map(|(_, e)| e));
    let landmark = instance.landmark;
    let nearest = finals.min_by_key(|&e| (e.abs_diff(landmark), e));
    match nearest {
        None => EmphasisCategory::None,
        Some(f) if landmark < f => EmphasisCategory::Before,
        Some(f) if landmark == f => EmphasisCategory::Final,
        Some(_) => EmphasisCategory::After,
    }
}

pub fn context_dim(mode: ContextMode, registry: &Registry) -> usize {
    let a = registry.attitudes.len();
    match mode {
        ContextMode::Attitude => a,
        ContextMode::Overlap => a + registry.non_attitudes().count(),
        ContextMode::Emphasis => a + 1 + EmphasisCategory::ALL.len(),
    }
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Binary context vector of instance `index` of `utterance`.
pub fn encode_context(mode: ContextMode, utterance: &Utterance, index: usize, registry: &Registry) -> Result<Vec<f64>> {
    let instance = utterance
        .instances
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("instance {index} not in `{}`", utterance.id)))?;
    if !registry.contains(&instance.function) {
        return Err(Error::UnknownFunction(instance.function.to_string()));
    }
    let attitude = registry
        .attitude_position(&utterance.attitude)
        .ok_or_else(|| Error::UnknownFunction(utterance.attitude.to_string()))?;
    let mut v = vec![0.0; context_dim(mode, registry)];
    v[attitude] = 1.0;
    let base = registry.attitudes.len();
    let scope = instance
        .scope()
        .ok_or_else(|| Error::InvalidArgument(format!("instance {index} has an invalid scope")))?;
    let others = || {
        utterance
            .instances
            .iter()
            .enumerate()
            .filter(move |(k, _)| *k != index)
            .filter_map(|(_, o)| o.scope().map(|s| (o, s)))
            .filter(move |(_, s)| overlaps(scope, *s))
            .map(|(o, _)| o)
    };
    match mode {
        ContextMode::Attitude => {}
        ContextMode::Overlap => {
            for o in others() {
                if let Some(k) = registry.non_attitudes().position(|f| *f == o.function) {
                    v[base + k] = 1.0;
                }
            }
        }
        ContextMode::Emphasis => {
            if others().any(|o| o.function.as_str() == WORD_BOUNDARY_TAG) {
                v[base] = 1.0;
            }
            v[base + 1 + emphasis_category(utterance, instance).index()] = 1.0;
        }
    }
    Ok(v)
}

/// Which frame components the instance weight scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightTarget {
    #[default]
    All,
    PitchOnly,
}

impl WeightTarget {
    pub fn scales(self, component: usize) -> bool {
        match self {
            WeightTarget::All => true,
            WeightTarget::PitchOnly => component < 3,
        }
    }

    pub fn apply(self, weight: f64, frame: ProsodyFrame) -> ProsodyFrame {
        let mut a = frame.to_array();
        for (c, v) in a.iter_mut().enumerate() {
            if self.scales(c) {
                *v *= weight;
            }
        }
        ProsodyFrame::from_array(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedContourGenerator {
    pub function: FunctionType,
    /// Ramps (4) -> frame (4), linear output.
    pub cg: DenseNet,
    /// Context -> 1, sigmoid output; the weight is twice its output.
    pub wm: DenseNet,
    pub scope_extension_right: usize,
    /// When set the weight is exactly 1 and `wm` is ignored.
    #[serde(default)]
    pub identity_weight: bool,
    /// Set once the generator has been fitted on at least one sample.
    #[serde(default)]
    pub trained: bool,
}

/// Largest weight value; `2 * sigmoid(z)` rounds to 2 for large `z`.
pub const WEIGHT_SUP: f64 = 2.0 - f64::EPSILON;

/// `2 * s` clamped into the open interval `(0, 2)`.
pub fn weight_from_sigmoid(s: f64) -> f64 {
    (2.0 * s).clamp(f64::MIN_POSITIVE, WEIGHT_SUP)
}

impl WeightedContourGenerator {
    pub fn new(function: FunctionType, cg: DenseNet, wm: DenseNet, scope_extension_right: usize) -> Result<Self> {
        if cg.input_dim() != RAMP_DIM || cg.output_dim() != FRAME_DIM {
            return Err(Error::Dimension {
                what: "contour generator shape",
                expected: RAMP_DIM * 10 + FRAME_DIM,
                got: cg.input_dim() * 10 + cg.output_dim(),
            });
        }
        if wm.output_dim() != 1 || wm.output_activation() != OutputActivation::Sigmoid {
            return Err(Error::InvalidArgument(format!(
                "weight module for `{function}` must have one sigmoid output"
            )));
        }
        if cg.output_activation() != OutputActivation::Linear {
            return Err(Error::InvalidArgument(format!(
                "contour generator for `{function}` must have a linear output"
            )));
        }
        Ok(WeightedContourGenerator {
            function,
            cg,
            wm,
            scope_extension_right,
            identity_weight: false,
            trained: false,
        })
    }

    /// Prominence weight in `(0, 2)` for `context`.
    pub fn weight(&self, context: &[f64]) -> Result<f64> {
        if context.len() != self.wm.input_dim() {
            return Err(Error::Dimension {
                what: "context vector",
                expected: self.wm.input_dim(),
                got: context.len(),
            });
        }
        if self.identity_weight {
            return Ok(1.0);
        }
        Ok(weight_from_sigmoid(self.wm.forward(context)?[0]))
    }

    /// Unweighted frame for every ramp.
    pub fn contour(&self, ramps: &[RampVector]) -> Result<Vec<ProsodyFrame>> {
        ramps
            .iter()
            .map(|r| {
                let out = self.cg.forward(&r.to_array())?;
                Ok(ProsodyFrame::from_array([out[0], out[1], out[2], out[3]]))
            })
            .collect()
    }
}

/// Weighted output of one instance, placed at `start` in the utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub start: usize,
    pub weight: f64,
    pub unweighted: Vec<ProsodyFrame>,
    pub frames: Vec<ProsodyFrame>,
}

impl Contribution {
    pub fn covers(&self, unit: usize) -> bool {
        unit >= self.start && unit < self.start + self.frames.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub cg_hidden: usize,
    pub wm_hidden: usize,
    /// Right-scope extension per function, in units.
    pub scope_extension: BTreeMap<FunctionType, usize>,
    pub weight_target: WeightTarget,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cg_hidden: 17,
            wm_hidden: 8,
            scope_extension: BTreeMap::new(),
            weight_target: WeightTarget::All,
        }
    }
}

/// One generator per registered function, in registry order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub registry: Registry,
    pub context_mode: ContextMode,
    pub weight_target: WeightTarget,
    pub generators: Vec<WeightedContourGenerator>,
}

impl ModelSet {
    /// Randomly initialised generators for every function of `registry`.
    pub fn new(registry: &Registry, context_mode: ContextMode, config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = context_dim(context_mode, registry);
        let generators = registry
            .functions
            .iter()
            .map(|f| {
                let cg = DenseNet::random(
                    &[RAMP_DIM, config.cg_hidden, FRAME_DIM],
                    OutputActivation::Linear,
                    &mut rng,
                )?;
                let wm = DenseNet::random(&[ctx, config.wm_hidden, 1], OutputActivation::Sigmoid, &mut rng)?;
                let ext = config.scope_extension.get(f).copied().unwrap_or(0);
                WeightedContourGenerator::new(f.clone(), cg, wm, ext)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSet {
            registry: registry.clone(),
            context_mode,
            weight_target: config.weight_target,
            generators,
        })
    }

    /// Assembles a model from prebuilt generators, one per registry entry.
    pub fn from_generators(
        registry: &Registry,
        context_mode: ContextMode,
        weight_target: WeightTarget,
        mut generators: Vec<WeightedContourGenerator>,
    ) -> Result<Self> {
        let mut ordered = Vec::with_capacity(registry.functions.len());
        for f in &registry.functions {
            let k = generators
                .iter()
                .position(|g| &g.function == f)
                .ok_or_else(|| Error::UnknownFunction(f.to_string()))?;
            ordered.push(generators.swap_remove(k));
        }
        if let Some(extra) = generators.first() {
            return Err(Error::UnknownFunction(extra.function.to_string()));
        }
        let model = ModelSet {
            registry: registry.clone(),
            context_mode,
            weight_target,
            generators: ordered,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let ctx = context_dim(self.context_mode, &self.registry);
        if self.generators.len() != self.registry.functions.len() {
            return Err(Error::Dimension {
                what: "generators per registry",
                expected: self.registry.functions.len(),
                got: self.generators.len(),
            });
        }
        for (g, f) in self.generators.iter().zip(&self.registry.functions) {
            if &g.function != f {
                return Err(Error::UnknownFunction(g.function.to_string()));
            }
            g.cg.check_shapes()?;
            g.wm.check_shapes()?;
            if g.wm.input_dim() != ctx {
                return Err(Error::Dimension {
                    what: "weight module input",
                    expected: ctx,
                    got: g.wm.input_dim(),
                });
            }
            WeightedContourGenerator::new(g.function.clone(), g.cg.clone(), g.wm.clone(), 0)?;
        }
        Ok(())
    }

    pub fn generator(&self, f: &FunctionType) -> Result<&WeightedContourGenerator> {
        self.registry
            .position(f)
            .map(|k| &self.generators[k])
            .ok_or_else(|| Error::UnknownFunction(f.to_string()))
    }

    pub fn generator_mut(&mut self, f: &FunctionType) -> Result<&mut WeightedContourGenerator> {
        match self.registry.position(f) {
            Some(k) => Ok(&mut self.generators[k]),
            None => Err(Error::UnknownFunction(f.to_string())),
        }
    }

    /// Switches every generator to the identity weight, reproducing plain SFC.
    pub fn set_identity_weights(mut self) -> Self {
        for g in &mut self.generators {
            g.identity_weight = true;
        }
        self
    }

    pub fn is_identity_weighted(&self) -> bool {
        self.generators.iter().all(|g| g.identity_weight)
    }

    pub fn context(&self, utterance: &Utterance, index: usize) -> Result<Vec<f64>> {
        encode_context(self.context_mode, utterance, index, &self.registry)
    }

    /// Weight of instance `index` in `utterance`.
    pub fn instance_weight(&self, utterance: &Utterance, index: usize) -> Result<f64> {
        let inst = &utterance.instances[index];
        self.generator(&inst.function)?.weight(&self.context(utterance, index)?)
    }

    /// Weighted frames of instance `index`; one scalar scales the whole scope.
    pub fn contribution(&self, utterance: &Utterance, index: usize) -> Result<Contribution> {
        let inst = utterance
            .instances
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("instance {index} not in `{}`", utterance.id)))?;
        let g = self.generator(&inst.function)?;
        let (start, _) = extended_scope(inst, g.scope_extension_right, utterance.len())
            .ok_or_else(|| Error::InvalidArgument(format!("instance {index} of `{}` out of range", utterance.id)))?;
        let ramps = build_ramps(inst, g.scope_extension_right, utterance.len());
        let weight = g.weight(&self.context(utterance, index)?)?;
        let unweighted = g.contour(&ramps)?;
        let frames = unweighted
            .iter()
            .map(|&f| self.weight_target.apply(weight, f))
            .collect();
        Ok(Contribution {
            start,
            weight,
            unweighted,
            frames,
        })
    }
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format: &'static str,
    version: u32,
    ramp_encoding: &'static str,
    model: &'a ModelSet,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format: String,
    version: u32,
    ramp_encoding: String,
    model: ModelSet,
}

pub const CHECKPOINT_FORMAT: &str = "wsfc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes the model as JSON. Floats round-trip bit-exactly.
pub fn save_checkpoint(model: &ModelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let out = CheckpointOut {
        format: CHECKPOINT_FORMAT,
        version: CHECKPOINT_VERSION,
        ramp_encoding: RAMP_ENCODING,
        model,
    };
    serde_json::to_writer_pretty(&mut w, &out).map_err(|e| Error::io(path, e.into()))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let ck: CheckpointIn = serde_json::from_reader(BufReader::new(file)).map_err(|e| parse(e.line(), e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(parse(
            0,
            format!("unsupported checkpoint {} v{}", ck.format, ck.version),
        ));
    }
    if ck.ramp_encoding != RAMP_ENCODING {
        return Err(parse(
            0,
            format!("checkpoint uses ramp encoding `{}`", ck.ramp_encoding),
        ));
    }
    ck.model.check()?;
    Ok(ck.model)
}
