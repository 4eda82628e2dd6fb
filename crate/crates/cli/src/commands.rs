use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use wsfc_core::eval::{export_decomposition, WeightTable};
use wsfc_core::synthgen::{generate_corpus, score_recovery, GeneratorSpec, GroundTruth, RecoveryRow};
use wsfc_core::{
    analysis_by_synthesis, load_checkpoint, load_corpus, paired_t_test, pretrain_freeze, retrain_weights_only,
    rmse_vocalic, save_checkpoint, save_corpus, split_corpus, weight_table, CellGrouping, Corpus, Error, ModelSet,
    TrainHistory, TrainingConfig,
};

use crate::config::{ExperimentConfig, Mode, Strategy};

pub const CORPUS_FILE: &str = "corpus.wsfc";
pub const TRUTH_FILE: &str = "truth.wsfc-gt";
pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const TEST_FILE: &str = "test.wsfc";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const RECOVERY_FILE: &str = "recovery.csv";

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn generate(spec: &Path, out: &Path, corpus: Option<PathBuf>, truth: Option<PathBuf>) -> anyhow::Result<()> {
    let spec = GeneratorSpec::load(spec)?;
    let (c, gt) = generate_corpus(&spec)?;
    ensure_dir(out)?;
    let corpus_path = corpus.unwrap_or_else(|| out.join(CORPUS_FILE));
    let truth_path = truth.unwrap_or_else(|| out.join(TRUTH_FILE));
    save_corpus(&c, &corpus_path)?;
    gt.save(&truth_path)?;
    let instances: usize = c.utterances.iter().map(|u| u.instances.len()).sum();
    println!(
        "{} utterances, {} units, {} instances, sigma={}, seed={}",
        c.len(),
        c.unit_count(),
        instances,
        spec.noise_sigma,
        spec.seed
    );
    println!("corpus: {}", corpus_path.display());
    println!("ground truth: {}", truth_path.display());
    Ok(())
}

fn check_registry(model: &ModelSet, corpus: &Corpus) -> anyhow::Result<()> {
    if model.registry != corpus.registry {
        bail!(
            "registry mismatch: checkpoint has {:?}, corpus has {:?}",
            model.registry.functions,
            corpus.registry.functions
        );
    }
    Ok(())
}

struct Splits {
    train: Corpus,
    val: Corpus,
    test: Corpus,
}

fn load_splits(cfg: &ExperimentConfig) -> anyhow::Result<Splits> {
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let [a, b, c] = cfg.split.ratios;
    let (train, val, test) = split_corpus(&corpus, (a, b, c), cfg.split.seed)?;
    Ok(Splits { train, val, test })
}

fn train_model(
    cfg: &ExperimentConfig,
    training: &TrainingConfig,
    splits: &Splits,
) -> anyhow::Result<(ModelSet, TrainHistory)> {
    let registry = &splits.train.registry;
    let model = match cfg.strategy {
        Strategy::RetrainWeights => {
            let path = cfg.paths.checkpoint.as_ref().expect("validated");
            let m = load_checkpoint(path)?;
            check_registry(&m, &splits.train)?;
            m
        }
        _ => ModelSet::new(registry, training.context_mode, &cfg.model, cfg.model_seed)?,
    };
    let model = match cfg.mode {
        Mode::Sfc => model.set_identity_weights(),
        Mode::Wsfc => model,
    };
    let out = match cfg.strategy {
        Strategy::Full => analysis_by_synthesis(model, &splits.train, &splits.val, training)?,
        Strategy::RetrainWeights => retrain_weights_only(model, &splits.train, &splits.val, training)?,
        Strategy::PretrainFreeze => {
            let pre = match &cfg.paths.pretrain_corpus {
                Some(p) => {
                    let c = load_corpus(p)?;
                    if c.registry != *registry {
                        bail!("pretraining corpus {} has a different registry", p.display());
                    }
                    c
                }
                None => {
                    let keep: BTreeSet<_> = cfg.pretrain_attitudes.iter().collect();
                    splits.train.filter(|u| keep.contains(&u.attitude))
                }
            };
            pretrain_freeze(model, &pre, &splits.train, &splits.val, training)?
        }
    };
    Ok(out)
}

fn output_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.paths.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn train(config: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out = output_dir(&cfg, out);
    let splits = load_splits(&cfg)?;
    let (model, history) = train_model(&cfg, &cfg.training, &splits)?;
    ensure_dir(&out)?;
    save_checkpoint(&model, out.join(MODEL_FILE))?;
    history.write_csv(out.join(HISTORY_FILE))?;
    save_corpus(&splits.test, out.join(TEST_FILE))?;
    weight_table(&model, &splits.train, cfg.grouping()?)?.write_csv(out.join(WEIGHTS_FILE))?;
    if let Some(path) = &cfg.paths.ground_truth {
        let truth = GroundTruth::load(path)?;
        let rows = score_recovery(&model, &truth, &splits.train, cfg.grouping()?)?;
        let mut w = csv::Writer::from_path(out.join(RECOVERY_FILE))?;
        w.write_record(RecoveryRow::HEADER)?;
        for r in &rows {
            w.write_record(r.record())?;
            if r.count > 0 {
                println!(
                    "{} {}: planted {:.3}, recovered {:.3}",
                    r.function, r.cell, r.planted, r.recovered
                );
            }
        }
        w.flush()?;
    }
    let best = history.best_record().context("training produced no history")?;
    println!(
        "{} iterations, best at {} ({}): train RMSE {:.4}, val RMSE {:.4}",
        history.len(),
        best.iteration,
        best.phase,
        best.train_rmse,
        best.val_rmse
    );
    println!("outputs written to {}", out.display());
    Ok(())
}

pub fn sweep(config: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    cfg.validate_sweep()?;
    let out = output_dir(&cfg, out);
    let splits = load_splits(&cfg)?;
    let grouping = cfg.grouping()?;
    ensure_dir(&out)?;
    let mut w = csv::Writer::from_path(out.join(SWEEP_FILE))?;
    let mut header = vec!["batch_size", "reg_coeff"];
    header.extend(WeightTable::HEADER);
    w.write_record(&header)?;
    let mut failed = 0;
    for &batch_size in &cfg.sweep.batch_sizes {
        for &reg_coeff in &cfg.sweep.reg_coeffs {
            let training = TrainingConfig {
                batch_size,
                reg_coeff,
                ..cfg.training.clone()
            };
            let result = training
                .validate()
                .map_err(anyhow::Error::from)
                .and_then(|_| train_model(&cfg, &training, &splits))
                .and_then(|(m, _)| Ok(weight_table(&m, &splits.train, grouping)?));
            match result {
                Ok(table) => {
                    for r in &table.rows {
                        let mut rec = vec![batch_size.to_string(), reg_coeff.to_string()];
                        rec.extend(WeightTable::record(r));
                        w.write_record(&rec)?;
                    }
                    println!(
                        "batch_size={batch_size} reg_coeff={reg_coeff}: {} rows",
                        table.rows.len()
                    );
                }
                Err(e) => {
                    failed += 1;
                    eprintln!("batch_size={batch_size} reg_coeff={reg_coeff}: failed: {e:#}");
                }
            }
        }
    }
    w.flush()?;
    println!("sweep table written to {}", out.join(SWEEP_FILE).display());
    if failed > 0 {
        bail!("{failed} sweep cell(s) failed");
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, corpus: &Path, compare: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus)?;
    check_registry(&model, &corpus)?;
    let report = rmse_vocalic(&model, &corpus)?;
    println!(
        "RMSE {:.4} +- {:.4} semitones over {} utterances ({} excluded)",
        report.mean,
        report.std,
        report.per_utterance.len(),
        report.excluded.len()
    );
    if let Some(path) = out {
        report.write_csv(path)?;
    }
    if let Some(other) = compare {
        let second = load_checkpoint(other)?;
        check_registry(&second, &corpus)?;
        let r2 = rmse_vocalic(&second, &corpus)?;
        println!("comparison RMSE {:.4} +- {:.4}", r2.mean, r2.std);
        match paired_t_test(&report.values(), &r2.values()) {
            Ok(t) if t.t == 0.0 && t.mean_difference == 0.0 => {
                println!("t={}, p={} (identical per-utterance RMSE)", t.t, t.p)
            }
            Ok(t) => println!("t={:.4}, p={:.4e}", t.t, t.p),
            Err(Error::ZeroVariance) => {
                bail!("paired t-test undefined: per-utterance differences have zero variance")
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn find_utterance<'a>(corpus: &'a Corpus, id: &str) -> anyhow::Result<&'a wsfc_core::Utterance> {
    corpus
        .utterance(id)
        .ok_or_else(|| Error::UnknownUtterance(id.to_string()).into())
}

pub fn decompose(checkpoint: &Path, corpus: &Path, id: &str, out: &Path) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus)?;
    check_registry(&model, &corpus)?;
    let u = find_utterance(&corpus, id)?;
    export_decomposition(&model, u, out)?;
    println!("decomposition of `{id}` written to {}", out.display());
    Ok(())
}

pub fn export_weights(checkpoint: &Path, corpus: &Path, grouping: &str, out: &Path) -> anyhow::Result<()> {
    let grouping: CellGrouping = grouping.parse()?;
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus)?;
    check_registry(&model, &corpus)?;
    let table = weight_table(&model, &corpus, grouping)?;
    table.write_csv(out)?;
    println!("{} weight rows written to {}", table.rows.len(), out.display());
    Ok(())
}
