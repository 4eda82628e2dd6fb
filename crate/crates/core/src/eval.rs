//! Evaluation: pitch RMSE over vocalic nuclei, the paired t-test, weight
//! distribution tables and decomposition export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FunctionInstance, FunctionType, Utterance};
use crate::error::{Error, Result};
use crate::trainer::{decompose, overlap_add, synthesize};
use crate::wcg::{emphasis_category, EmphasisCategory, ModelSet};

#[derive(Clone, Debug, PartialEq)]
pub struct RmseReport {
    /// Mean of the per-utterance RMSE values (semitones).
    pub mean: f64,
    /// Population standard deviation of the per-utterance values.
    pub std: f64,
    pub per_utterance: Vec<(String, usize, f64)>,
    /// Utterances without any vocalic nucleus.
    pub excluded: Vec<String>,
}

impl RmseReport {
    pub fn values(&self) -> Vec<f64> {
        self.per_utterance.iter().map(|(_, _, v)| *v).collect()
    }

    /// `utterance_id,nucleus_samples,rmse`; excluded utterances have an empty rmse.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        w.write_record(["utterance_id", "nucleus_samples", "rmse"])?;
        for (id, n, v) in &self.per_utterance {
            w.write_record([id.as_str(), &n.to_string(), &v.to_string()])?;
        }
        for id in &self.excluded {
            w.write_record([id.as_str(), "0", ""])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

/// Squared pitch errors of one utterance over its vocalic nuclei.
fn nucleus_errors(model: &ModelSet, u: &Utterance) -> Result<(f64, usize)> {
    let synth = synthesize(model, u)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (unit, s) in u.units.iter().zip(&synth) {
        if unit.has_vocalic_nucleus {
            for (o, p) in unit.observed.pitch.iter().zip(&s.pitch) {
                sum += (o - p).powi(2);
                n += 1;
            }
        }
    }
    Ok((sum, n))
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per-utterance pitch RMSE over vocalic nuclei, then mean and std across
/// utterances. Duration is not scored.
pub fn rmse_vocalic(model: &ModelSet, corpus: &Corpus) -> Result<RmseReport> {
    let errs: Vec<(f64, usize)> = corpus
        .utterances
        .par_iter()
        .map(|u| nucleus_errors(model, u))
        .collect::<Result<_>>()?;
    let mut per_utterance = Vec::new();
    let mut excluded = Vec::new();
    for (u, (sum, n)) in corpus.utterances.iter().zip(errs) {
        if n == 0 {
            excluded.push(u.id.clone());
        } else {
            per_utterance.push((u.id.clone(), n, (sum / n as f64).sqrt()));
        }
    }
    let values: Vec<f64> = per_utterance.iter().map(|(_, _, v)| *v).collect();
    let (mean, std) = mean_std(&values);
    Ok(RmseReport {
        mean,
        std,
        per_utterance,
        excluded,
    })
}

/// RMSE pooled over every nucleus sample of the corpus.
pub fn rmse_vocalic_pooled(model: &ModelSet, corpus: &Corpus) -> Result<f64> {
    let errs: Vec<(f64, usize)> = corpus
        .utterances
        .par_iter()
        .map(|u| nucleus_errors(model, u))
        .collect::<Result<_>>()?;
    let (sum, n) = errs.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    Ok(if n == 0 { f64::NAN } else { (sum / n as f64).sqrt() })
}

/// Lanczos approximation (g = 7, n = 9) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_difference: f64,
}

/// Paired t-test on `a - b`, two-sided.
///
/// All-zero differences give `t = 0, p = 1`; constant non-zero differences
/// have no defined statistic and return [`Error::ZeroVariance`].
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "paired samples",
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = n - 1;
    if var == 0.0 {
        if d.iter().all(|&x| x == 0.0) {
            return Ok(PairedTTest {
                t: 0.0,
                p: 1.0,
                df,
                mean_difference: 0.0,
            });
        }
        return Err(Error::ZeroVariance);
    }
    let t = mean / (var / nf).sqrt();
    Ok(PairedTTest {
        t,
        p: student_t_two_sided(t, df as f64),
        df,
        mean_difference: mean,
    })
}

/// How instances are binned into context cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellGrouping {
    #[default]
    Attitude,
    Emphasis,
    AttitudeEmphasis,
}

impl std::str::FromStr for CellGrouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attitude" => Ok(CellGrouping::Attitude),
            "emphasis" => Ok(CellGrouping::Emphasis),
            "attitude_emphasis" | "attitude-emphasis" => Ok(CellGrouping::AttitudeEmphasis),
            other => Err(Error::InvalidArgument(format!("unknown cell grouping `{other}`"))),
        }
    }
}

/// Context cell of an instance: utterance attitude and emphasis position.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub attitude: FunctionType,
    pub emphasis: EmphasisCategory,
}

impl CellKey {
    pub fn of(utterance: &Utterance, instance: &FunctionInstance) -> Self {
        CellKey {
            attitude: utterance.attitude.clone(),
            emphasis: emphasis_category(utterance, instance),
        }
    }

    pub fn label(&self, grouping: CellGrouping) -> String {
        match grouping {
            CellGrouping::Attitude => self.attitude.to_string(),
            CellGrouping::Emphasis => self.emphasis.label().to_string(),
            CellGrouping::AttitudeEmphasis => format!("{}/{}", self.attitude, self.emphasis.label()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRow {
    pub function: FunctionType,
    pub cell: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightTable {
    pub rows: Vec<WeightRow>,
}

impl WeightTable {
    pub fn row(&self, function: &str, cell: &str) -> Option<&WeightRow> {
        self.rows
            .iter()
            .find(|r| r.function.as_str() == function && r.cell == cell)
    }

    pub const HEADER: [&'static str; 7] = ["function", "cell", "count", "mean", "std", "min", "max"];

    pub fn record(r: &WeightRow) -> [String; 7] {
        [
            r.function.to_string(),
            r.cell.clone(),
            r.count.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.min.to_string(),
            r.max.to_string(),
        ]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record(Self::record(r))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Weight of every instance in the corpus with its function and cell.
pub fn instance_weights(model: &ModelSet, corpus: &Corpus) -> Result<Vec<(FunctionType, CellKey, f64)>> {
    let per: Vec<Vec<(FunctionType, CellKey, f64)>> = corpus
        .utterances
        .par_iter()
        .map(|u| {
            u.instances
                .iter()
                .enumerate()
                .map(|(k, inst)| {
                    Ok((
                        inst.function.clone(),
                        CellKey::of(u, inst),
                        model.instance_weight(u, k)?,
                    ))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Weight statistics per (function, cell), functions in registry order.
pub fn weight_table(model: &ModelSet, corpus: &Corpus, grouping: CellGrouping) -> Result<WeightTable> {
    let mut cells: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for (f, key, w) in instance_weights(model, corpus)? {
        let pos = model
            .registry
            .position(&f)
            .ok_or_else(|| Error::UnknownFunction(f.to_string()))?;
        cells.entry((pos, key.label(grouping))).or_default().push(w);
    }
    let rows = cells
        .into_iter()
        .map(|((pos, cell), w)| {
            let (mean, std) = mean_std(&w);
            WeightRow {
                function: model.registry.functions[pos].clone(),
                cell,
                count: w.len(),
                mean,
                std,
                min: w.iter().copied().fold(f64::INFINITY, f64::min),
                max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(WeightTable { rows })
}

pub const COMPONENT_NAMES: [&str; 4] = ["pitch_start", "pitch_mid", "pitch_end", "duration"];

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionRow {
    pub unit: usize,
    pub component: usize,
    /// Instance index, `None` for units no contour covers.
    pub instance: Option<usize>,
    pub function: Option<FunctionType>,
    pub unweighted: f64,
    pub weight: f64,
    pub contribution: f64,
    /// Running sum of contributions at this (unit, component), in instance order.
    pub partial_sum: f64,
    pub observed: f64,
    pub reconstruction: f64,
    pub residual: f64,
}

/// Long-format decomposition: one row per (unit, component, covering instance).
pub fn decomposition_rows(model: &ModelSet, utterance: &Utterance) -> Result<Vec<DecompositionRow>> {
    let parts = decompose(model, utterance)?;
    let recon = overlap_add(&parts, utterance.len());
    let mut rows = Vec::new();
    for (i, unit) in utterance.units.iter().enumerate() {
        let obs = unit.observed.to_array();
        let rec = recon[i].to_array();
        for c in 0..4 {
            let mut partial = 0.0;
            let mut any = false;
            for (k, part) in parts.iter().enumerate().filter(|(_, p)| p.covers(i)) {
                let j = i - part.start;
                let contribution = part.frames[j].to_array()[c];
                partial += contribution;
                any = true;
                rows.push(DecompositionRow {
                    unit: i,
                    component: c,
                    instance: Some(k),
                    function: Some(utterance.instances[k].function.clone()),
                    unweighted: part.unweighted[j].to_array()[c],
                    weight: part.weight,
                    contribution,
                    partial_sum: partial,
                    observed: obs[c],
                    reconstruction: rec[c],
                    residual: obs[c] - rec[c],
                });
            }
            if !any {
                rows.push(DecompositionRow {
                    unit: i,
                    component: c,
                    instance: None,
                    function: None,
                    unweighted: 0.0,
                    weight: 0.0,
                    contribution: 0.0,
                    partial_sum: 0.0,
                    observed: obs[c],
                    reconstruction: rec[c],
                    residual: obs[c] - rec[c],
                });
            }
        }
    }
    Ok(rows)
}

pub const DECOMPOSITION_HEADER: [&str; 11] = [
    "unit",
    "component",
    "instance",
    "function",
    "unweighted",
    "weight",
    "contribution",
    "partial_sum",
    "observed",
    "reconstruction",
    "residual",
];

/// Writes [`decomposition_rows`] as CSV with [`DECOMPOSITION_HEADER`].
pub fn export_decomposition(model: &ModelSet, utterance: &Utterance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rows = decomposition_rows(model, utterance)?;
    let mut w = csv_writer(path)?;
    w.write_record(DECOMPOSITION_HEADER)?;
    for r in rows {
        w.write_record([
            r.unit.to_string(),
            COMPONENT_NAMES[r.component].to_string(),
            r.instance.map(|k| k.to_string()).unwrap_or_default(),
            r.function.map(|f| f.to_string()).unwrap_or_default(),
            r.unweighted.to_string(),
            r.weight.to_string(),
            r.contribution.to_string(),
            r.partial_sum.to_string(),
            r.observed.to_string(),
            r.reconstruction.to_string(),
            r.residual.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::corpus::{ProsodyFrame, Registry, RhythmicUnit};
    use crate::wcg::{ContextMode, ModelConfig};

    /// Simpson's rule on the t density over [0, |t|]; independent of the
    /// incomplete beta route.
    fn t_two_sided_by_quadrature(t: f64, df: f64) -> f64 {
        let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
        let pdf = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
        let n = 20_000;
        let h = t.abs() / n as f64;
        let mut s = pdf(0.0) + pdf(t.abs());
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn incomplete_beta_identities() {
        // I_x(1, 1) = x and I_x(a, b) = 1 - I_{1-x}(b, a)
        for &x in &[0.1, 0.37, 0.5, 0.93] {
            assert!((regularized_incomplete_beta(1.0, 1.0, x) - x).abs() < 1e-12);
            let l = regularized_incomplete_beta(2.5, 4.0, x);
            let r = 1.0 - regularized_incomplete_beta(4.0, 2.5, 1.0 - x);
            assert!((l - r).abs() < 1e-12);
        }
        // I_x(a, 1) = x^a
        assert!((regularized_incomplete_beta(3.0, 1.0, 0.6) - 0.216).abs() < 1e-12);
    }

    #[test]
    fn t_distribution_matches_quadrature() {
        for &(t, df) in &[(0.5, 3.0), (1.7, 9.0), (2.3, 4.0), (-3.1, 20.0), (0.05, 1.0)] {
            let a = student_t_two_sided(t, df);
            let b = t_two_sided_by_quadrature(t, df);
            assert!((a - b).abs() < 1e-8, "t={t} df={df}: {a} vs {b}");
        }
    }

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 3.5, 0.2];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
    }

    #[test]
    fn constant_difference_is_an_error() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = a.map(|x| x - 0.5);
        assert!(matches!(paired_t_test(&a, &b), Err(Error::ZeroVariance)));
        assert!(paired_t_test(&a, &b[..4]).is_err());
        assert!(paired_t_test(&a[..1], &b[..1]).is_err());
    }

    #[test]
    fn antisymmetric() {
        let a = [1.2, 0.8, 1.9, 1.4, 1.1, 0.7];
        let b = [1.0, 0.9, 1.5, 1.2, 1.0, 0.9];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
    }

    fn corpus() -> Corpus {
        let reg = Registry::new(["DC", "DI", "XX"], ["DC", "DI"]);
        let mut c = Corpus::empty(reg, 100.0, 200.0);
        for (id, att, n) in [("a", "DC", 4), ("b", "DI", 3), ("c", "DC", 2)] {
            c.utterances.push(Utterance {
                id: id.into(),
                attitude: att.into(),
                units: (0..n)
                    .map(|index| RhythmicUnit {
                        index,
                        observed: ProsodyFrame::new([0.1 * index as f64, 0.5, -0.3], 0.05),
                        has_vocalic_nucleus: true,
                    })
                    .collect(),
                instances: vec![
                    FunctionInstance::new(att, n - 1, n, 0),
                    FunctionInstance::new("XX", 0, 1, 1),
                ],
            });
        }
        c
    }

    /// Model whose output is the observation exactly cannot be built from
    /// nets; instead synthesize and then overwrite the corpus observations.
    fn self_consistent() -> (ModelSet, Corpus) {
        let mut c = corpus();
        let m = ModelSet::new(&c.registry, ContextMode::Attitude, &ModelConfig::default(), 1).unwrap();
        for u in &mut c.utterances {
            let s = synthesize(&m, u).unwrap();
            for (unit, f) in u.units.iter_mut().zip(s) {
                unit.observed = f;
            }
        }
        (m, c)
    }

    #[test]
    fn perfect_model_has_zero_rmse() {
        let (m, c) = self_consistent();
        let r = rmse_vocalic(&m, &c).unwrap();
        assert_eq!((r.mean, r.std), (0.0, 0.0));
        assert_eq!(r.per_utterance.len(), 3);
    }

    #[test]
    fn constant_offset_gives_offset_rmse() {
        let (m, mut c) = self_consistent();
        for u in &mut c.utterances {
            for unit in &mut u.units {
                unit.observed.pitch.iter_mut().for_each(|p| *p += 0.75);
                unit.observed.duration += 3.0;
            }
        }
        let r = rmse_vocalic(&m, &c).unwrap();
        for v in r.values() {
            assert!((v - 0.75).abs() < 1e-12);
        }
        assert!(r.std < 1e-12);
        assert!((rmse_vocalic_pooled(&m, &c).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rmse_excludes_utterances_without_nuclei() {
        let (m, mut c) = self_consistent();
        for unit in &mut c.utterances[1].units {
            unit.has_vocalic_nucleus = false;
        }
        let r = rmse_vocalic(&m, &c).unwrap();
        assert_eq!(r.excluded, vec!["b".to_string()]);
        assert_eq!(r.per_utterance.len(), 2);
    }

    #[test]
    fn rmse_permutation_invariant() {
        let (m, mut c) = self_consistent();
        c.utterances[0].units[1].observed.pitch[0] += 1.0;
        let a = rmse_vocalic(&m, &c).unwrap();
        c.utterances.reverse();
        let b = rmse_vocalic(&m, &c).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15);
        assert!((a.std - b.std).abs() < 1e-15);
    }

    #[test]
    fn identity_weight_table() {
        let c = corpus();
        let m = ModelSet::new(&c.registry, ContextMode::Attitude, &ModelConfig::default(), 2)
            .unwrap()
            .set_identity_weights();
        let t = weight_table(&m, &c, CellGrouping::Attitude).unwrap();
        for r in &t.rows {
            assert_eq!((r.mean, r.std), (1.0, 0.0));
        }
        let xx: usize = t
            .rows
            .iter()
            .filter(|r| r.function.as_str() == "XX")
            .map(|r| r.count)
            .sum();
        assert_eq!(xx, 3);
        assert_eq!(t.row("XX", "DC").unwrap().count, 2);
        assert_eq!(t.row("DI", "DI").unwrap().count, 1);
    }

    #[test]
    fn decomposition_telescopes() {
        let c = corpus();
        let m = ModelSet::new(&c.registry, ContextMode::Attitude, &ModelConfig::default(), 3).unwrap();
        let u = &c.utterances[0];
        let rows = decomposition_rows(&m, u).unwrap();
        let synth = synthesize(&m, u).unwrap();
        for i in 0..u.len() {
            for comp in 0..4 {
                let last = rows.iter().rfind(|r| r.unit == i && r.component == comp).unwrap();
                assert_eq!(last.partial_sum, last.reconstruction);
                assert_eq!(last.reconstruction, synth[i].to_array()[comp]);
            }
        }
    }

    #[test]
    fn decomposition_without_instances() {
        let mut c = corpus();
        let m = ModelSet::new(&c.registry, ContextMode::Attitude, &ModelConfig::default(), 3).unwrap();
        let u = &mut c.utterances[2];
        u.instances.clear();
        let rows = decomposition_rows(&m, u).unwrap();
        assert_eq!(rows.len(), 2 * 4);
        for r in rows {
            assert_eq!((r.contribution, r.reconstruction), (0.0, 0.0));
            assert_eq!(r.residual, r.observed);
        }
        let dir = tempfile::tempdir().unwrap();
        export_decomposition(&m, &c.utterances[0], dir.path().join("d.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
        assert!(text.starts_with("unit,component,instance,function,unweighted"));
    }
}
