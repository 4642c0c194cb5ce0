//! Command implementations behind the `ivg` binary: data generation, vocab
//! building, training, evaluation, and the ablation / sensitivity sweeps.
//! Every command is deterministic given its inputs and seed, and every
//! emitted artifact carries the hash of the configuration that produced it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, vocab_hash, Checkpoint};
use crate::datamodel::{load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::synthgen::{bias_report, generate_dataset, BiasSpec};
use crate::trainer::{evaluate_checkpoint, train, ModelConfig, TrainConfig, TrainRun};
use crate::vocab::{build_vocab, ConfounderVocab};

/// Optional configuration file: `{"model": {...}, "train": {...}}` with both
/// sections optional.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct TrainOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub eval_every: Option<usize>,
    pub no_ivg: bool,
    pub no_qv_cl: bool,
    pub no_vv_cl: bool,
}

/// Resolve (defaults <- config file <- flags) into concrete configs. The
/// shipped default widths are the desk-scale ones.
pub fn resolve_configs(
    config_file: Option<&Path>,
    ov: &TrainOverrides,
) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::desk();
    let mut cfg = TrainConfig::default();
    if let Some(path) = config_file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if let Some(m) = file.model {
            model = m;
        }
        if let Some(t) = file.train {
            cfg = t;
        }
    }
    if let Some(v) = ov.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = ov.beta {
        cfg.beta = v;
    }
    if let Some(v) = ov.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = ov.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = ov.eval_every {
        cfg.eval_every = v;
    }
    if ov.no_ivg {
        cfg.use_ivg = false;
    }
    if ov.no_qv_cl {
        cfg.use_qv_cl = false;
    }
    if ov.no_vv_cl {
        cfg.use_vv_cl = false;
    }
    cfg.validate()?;
    Ok((model, cfg))
}

/// Generate the biased train/test splits (shipped spec when `spec_file` is
/// absent), write them under `out_dir`, and print the co-occurrence tables.
pub fn cmd_generate_data(spec_file: Option<&Path>, out_dir: &Path) -> Result<()> {
    let spec = match spec_file {
        Some(path) => BiasSpec::load(path)?,
        None => BiasSpec::default_biased(),
    };
    let hash = config_hash(&spec);
    let (mut train, mut test) = generate_dataset(&spec)?;
    train.config_hash = Some(hash.clone());
    test.config_hash = Some(hash.clone());

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    spec.save(&out_dir.join("bias_spec.json"))?;
    let train_path = save_dataset(&train, out_dir)?;
    let test_path = save_dataset(&test, out_dir)?;

    println!("wrote {}", train_path.display());
    println!("wrote {}", test_path.display());
    println!("spec hash: {hash}");
    println!("\ntrain split co-occurrence:");
    println!("{}", bias_report(&train));
    println!("\ntest split co-occurrence:");
    println!("{}", bias_report(&test));
    Ok(())
}

/// Build the confounder vocabulary from a split's queries.
pub fn cmd_build_vocab(manifest_path: &Path, out_file: &Path) -> Result<()> {
    let manifest = load_dataset(manifest_path)?;
    if manifest.records.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} has no records to build a vocabulary from",
            manifest_path.display()
        )));
    }
    let mut vocab = build_vocab(&manifest.queries())?;
    vocab.source_hash = manifest.config_hash.clone();
    if let Some(dir) = out_file.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    vocab.save(out_file)?;
    println!(
        "wrote {} ({} roles, {} actions, {} objects)",
        out_file.display(),
        vocab.roles.len(),
        vocab.actions.len(),
        vocab.objects.len()
    );
    Ok(())
}

fn load_vocab_if_needed(
    vocab_path: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<Option<ConfounderVocab>> {
    match (vocab_path, cfg.use_ivg) {
        (Some(path), _) => Ok(Some(ConfounderVocab::load(path)?)),
        (None, false) => Ok(None),
        (None, true) => Err(Error::Config(
            "training with the intervention enabled requires --vocab".into(),
        )),
    }
}

/// Train on a split, writing the checkpoint (updated every epoch), the JSONL
/// training log, and a final eval report when eval data is given.
pub fn cmd_train(
    data: &Path,
    vocab_path: Option<&Path>,
    eval_data: Option<&Path>,
    out_dir: &Path,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let manifest = load_dataset(data)?;
    let eval_manifest = eval_data.map(load_dataset).transpose()?;
    let conf_vocab = load_vocab_if_needed(vocab_path, cfg)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let hash = config_hash(&(model, cfg));
    writeln!(log_file, "{}", serde_json::json!({ "config_hash": hash }))
        .map_err(|e| Error::io(&log_path, e))?;

    let stem = out_dir.join("checkpoint");
    let run = train(
        &manifest,
        conf_vocab.as_ref(),
        model,
        cfg,
        eval_manifest.as_ref(),
        |entry, ckpt| {
            ckpt.save(&stem)?;
            let line = serde_json::to_string(entry).map_err(|e| Error::json("epoch log", e))?;
            writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
            println!(
                "epoch {:>3}  total {:>9.4}  l_s {:>8.4}  l_e {:>8.4}  l_vq {:>8.4}  l_vv {:>8.4}{}",
                entry.epoch,
                entry.losses.total,
                entry.losses.l_s,
                entry.losses.l_e,
                entry.losses.l_vq,
                entry.losses.l_vv,
                entry
                    .eval
                    .as_ref()
                    .map(|r| format!("  test mIoU {:.2}", r.mean_iou))
                    .unwrap_or_default()
            );
            Ok(())
        },
    )?;
    run.checkpoint.save(&stem)?;

    if let Some(report) = run.log.last().and_then(|l| l.eval.as_ref()) {
        let report_path = out_dir.join("eval_report.json");
        write_report(&report_path, report, &hash)?;
        println!("final eval: mIoU {:.2}, R1@0.5 {:.2}", report.mean_iou, report.r1(0.5));
    }

    if let Some(detail) = &run.diverged {
        // the last good checkpoint is on disk; surface the abort
        return Err(Error::Diverged { epoch: run.checkpoint.meta.epoch, batch: 0, detail: detail.clone() });
    }
    println!("wrote {}", stem.with_extension("ivgp").display());
    Ok(run)
}

fn write_report(path: &Path, report: &EvalReport, hash: &str) -> Result<()> {
    let wrapped = serde_json::json!({ "config_hash": hash, "report": report });
    let text =
        serde_json::to_string_pretty(&wrapped).map_err(|e| Error::json("eval report", e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluate a checkpoint on a manifest. When `--vocab` is given, its hash is
/// checked against the one recorded at training time.
pub fn cmd_eval(
    checkpoint_stem: &Path,
    manifest_path: &Path,
    vocab_path: Option<&Path>,
    out_file: Option<&Path>,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint_stem)?;
    let manifest = load_dataset(manifest_path)?;
    if let Some(path) = vocab_path {
        let vocab = ConfounderVocab::load(path)?;
        let got = vocab_hash(&vocab);
        match &ckpt.meta.vocab_hash {
            Some(expected) if *expected == got => {}
            Some(expected) => {
                return Err(Error::HashMismatch { expected: expected.clone(), got });
            }
            None => {
                return Err(Error::Config(
                    "checkpoint was trained without a confounder vocabulary".into(),
                ));
            }
        }
    }
    let report = evaluate_checkpoint(&ckpt, &manifest)?;
    println!("{}", EvalReport::csv_header());
    println!("{}", report.csv_row("checkpoint"));
    if let Some(path) = out_file {
        write_report(path, &report, &ckpt.meta.config_hash)?;
        println!("wrote {}", path.display());
    }
    Ok(report)
}

/// One named configuration of a comparison run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub train_loss: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub config_hash: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&EvalReport::csv_header());
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.report.csv_row(&row.name));
            out.push('\n');
        }
        out
    }
}

/// The six ablation configurations, in table order.
pub fn ablation_rows(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mk = |name: &str, ivg: bool, qv: bool, vv: bool| {
        (
            name.to_string(),
            TrainConfig { use_ivg: ivg, use_qv_cl: qv, use_vv_cl: vv, ..base.clone() },
        )
    };
    vec![
        mk("full", true, true, true),
        mk("w/o IVG", false, true, true),
        mk("w/o QV-CL", true, false, true),
        mk("w/o VV-CL", true, true, false),
        mk("w/o DCL", true, false, false),
        mk("w/o IVG+DCL", false, false, false),
    ]
}

/// The five (alpha, beta) sensitivity settings, in table order.
pub fn sensitivity_rows(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [(0.1, 0.01), (1.0, 1.0), (0.5, 0.1), (0.1, 0.5), (1.5, 1.0)]
        .iter()
        .map(|&(alpha, beta)| {
            (
                format!("alpha={alpha}, beta={beta}"),
                TrainConfig { alpha, beta, ..base.clone() },
            )
        })
        .collect()
}

/// Train every configuration of the ablation table (or, with
/// `sweep_alpha_beta`, the loss-weight grid) and emit one comparison table
/// as JSON and CSV.
pub fn cmd_ablate(
    data: &Path,
    vocab_path: &Path,
    eval_data: &Path,
    out_dir: &Path,
    model: &ModelConfig,
    base: &TrainConfig,
    sweep_alpha_beta: bool,
) -> Result<ComparisonTable> {
    let manifest = load_dataset(data)?;
    let eval_manifest = load_dataset(eval_data)?;
    let conf_vocab = ConfounderVocab::load(vocab_path)?;

    let configs = if sweep_alpha_beta {
        sensitivity_rows(base)
    } else {
        ablation_rows(base)
    };

    let mut rows = Vec::new();
    for (name, cfg) in &configs {
        println!("training configuration: {name}");
        let run = train(
            &manifest,
            Some(&conf_vocab),
            model,
            cfg,
            Some(&eval_manifest),
            |_, _| Ok(()),
        )?;
        if let Some(detail) = &run.diverged {
            return Err(Error::Diverged {
                epoch: run.checkpoint.meta.epoch,
                batch: 0,
                detail: format!("{name}: {detail}"),
            });
        }
        let last = run.log.last().expect("at least one epoch");
        let report = last.eval.clone().expect("eval data is always present here");
        println!("  -> mIoU {:.2}", report.mean_iou);
        rows.push(ComparisonRow { name: name.clone(), train_loss: last.losses.total, report });
    }

    let table = ComparisonTable { config_hash: config_hash(&(model, base)), rows };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let kind = if sweep_alpha_beta { "sensitivity" } else { "ablation" };
    let json_path = out_dir.join(format!("{kind}.json"));
    let text =
        serde_json::to_string_pretty(&table).map_err(|e| Error::json("comparison table", e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = out_dir.join(format!("{kind}.csv"));
    fs::write(&csv_path, table.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    println!("wrote {}", json_path.display());
    println!("wrote {}", csv_path.display());
    println!("\n{}", table.to_csv());
    Ok(table)
}

/// Paths produced by `cmd_generate_data` for a given output directory.
pub fn split_manifest_path(out_dir: &Path, split: &str) -> PathBuf {
    out_dir.join(format!("{split}.manifest.json"))
}
