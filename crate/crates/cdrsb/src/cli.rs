//! Command-line entry point: one binary with sub-commands covering the whole
//! workflow — corpus preparation and synthesis, training, evaluation,
//! ablation sweeps, and CSV exports for plotting. Every sub-command writes
//! its artifacts under one output directory with fixed file names.

use crate::config::{RunConfig, Task, Variant};
use crate::dataset::{self, DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_ranking, evaluate_rating, EvalResult, RankDetail};
use crate::model::Model;
use crate::regulate;
use crate::synth;
use crate::train::train;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cdrsb",
    version,
    about = "Social recommender with disentangled interest/influence embeddings and a per-pair regulation gate"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every sub-command. Precedence: defaults, then --config,
/// then each --set in order, then the dedicated shortcut flags.
#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(long, value_name = "PATH")]
    config: Option<String>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $CDRSB_OUT, else ./out)
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Root random seed
    #[arg(long)]
    seed: Option<u64>,
    /// rating | ranking
    #[arg(long)]
    task: Option<String>,
    /// full | no_wt | no_sl | no_mi
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Ratings TSV (user, item, rating); omit to use a generated corpus
    #[arg(long, value_name = "PATH")]
    ratings: Option<String>,
    /// Trust TSV (truster, trustee); omit to use a generated corpus
    #[arg(long, value_name = "PATH")]
    trust: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load and split a ratings/trust corpus and report its statistics
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Ratings TSV (user, item, rating)
        #[arg(long, value_name = "PATH")]
        ratings: String,
        /// Trust TSV (truster, trustee)
        #[arg(long, value_name = "PATH")]
        trust: String,
    },
    /// Generate a synthetic corpus with ground-truth cause labels
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a model and save the best-validation checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`
        #[arg(long, value_name = "PATH")]
        checkpoint: String,
        /// train | validation | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every variant across a seed sweep and tabulate test metrics
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Number of seeds (root seed, root+1, ...)
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Dump encoder and disentangled embeddings as CSV
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`
        #[arg(long, value_name = "PATH")]
        checkpoint: String,
    },
    /// Per-pair regulation decisions and keep/drop counts
    AlphaReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`
        #[arg(long, value_name = "PATH")]
        checkpoint: String,
        /// train | validation | test
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn resolve_config(base: RunConfig, common: &Common) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got {kv:?}"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(task) = &common.task {
        cfg.set("task", task)?;
    }
    if let Some(variant) = &common.variant {
        cfg.set("variant", variant)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("CDRSB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serializing {name}: {e}")))?;
    write_text(dir, name, &(text + "\n"))
}

/// Read and prepare a corpus from disk, or fall back to generating the
/// synthetic corpus described by the config when no paths are given.
fn load_bundle(cfg: &RunConfig, ratings: &Option<String>, trust: &Option<String>) -> Result<DatasetBundle> {
    match (ratings, trust) {
        (Some(rp), Some(tp)) => {
            let ratings = dataset::load_ratings(rp)?;
            let trust = dataset::load_trust(tp)?;
            dataset::prepare(
                ratings,
                trust,
                cfg.min_interactions,
                cfg.subsample_users,
                (cfg.split_train, cfg.split_val, cfg.split_test),
                cfg.seed,
                cfg.task == Task::Ranking,
            )
        }
        (None, None) => {
            println!("no --ratings/--trust given; generating the synthetic corpus");
            Ok(synth::generate(cfg)?.0)
        }
        _ => Err(Error::Config(
            "--ratings and --trust must be given together".into(),
        )),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!(
            "invalid split {s:?} (expected train|validation|test)"
        ))),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn history_csv(report: &crate::train::TrainReport) -> String {
    let mut csv = String::from("epoch,train_loss,task_loss,mi,lld,val_score\n");
    for h in &report.history {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch,
            h.train_loss,
            h.task_loss,
            fmt_opt(h.mi),
            fmt_opt(h.lld),
            h.val_score
        ));
    }
    csv
}

fn rank_detail_csv(bundle: &DatasetBundle, details: &[RankDetail]) -> String {
    let mut csv = String::from("user_id,positive_item,rank\n");
    for d in details {
        csv.push_str(&format!(
            "{},{},{}\n",
            bundle.user_orig[d.user as usize], bundle.item_orig[d.positive_item as usize], d.rank
        ));
    }
    csv
}

fn headline(result: &EvalResult) -> String {
    match (result.rmse, result.hr_at_k) {
        (Some(rmse), _) => format!(
            "rmse {:.4}  mae {:.4}  ({} records)",
            rmse,
            result.mae.unwrap_or(f64::NAN),
            result.num_evaluated
        ),
        (None, Some(hr)) => format!(
            "hr@{} {:.4}  ndcg@{} {:.4}  ({} lists, {} skipped)",
            result.k.unwrap_or(0),
            hr,
            result.k.unwrap_or(0),
            result.ndcg_at_k.unwrap_or(f64::NAN),
            result.num_evaluated,
            result.skipped
        ),
        _ => String::from("no metrics"),
    }
}

fn cmd_prepare(common: &Common, ratings: &str, trust: &str) -> Result<()> {
    let cfg = resolve_config(RunConfig::default(), common)?;
    let dir = out_dir(common);
    ensure_dir(&dir)?;
    let bundle = load_bundle(&cfg, &Some(ratings.to_string()), &Some(trust.to_string()))?;
    let summary = bundle.summary();
    write_json(&dir, "bundle_summary.json", &summary)?;
    println!(
        "{} users, {} items, {} ratings, {} trust edges",
        summary.num_users, summary.num_items, summary.num_ratings, summary.num_trust_edges
    );
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = resolve_config(RunConfig::default(), common)?;
    let dir = out_dir(common);
    let (bundle, gt) = synth::generate(&cfg)?;
    synth::write_corpus(&dir, &bundle, &gt, &cfg)?;
    for name in ["ratings.tsv", "trust.tsv", "ground_truth.csv", "synth_config.json"] {
        println!("wrote {}", dir.join(name).display());
    }
    write_json(&dir, "bundle_summary.json", &bundle.summary())?;
    println!(
        "{} users, {} items, {} interactions",
        bundle.n_users,
        bundle.n_items,
        bundle.records.len()
    );
    Ok(())
}

fn cmd_train(common: &Common, data: &DataArgs) -> Result<()> {
    let cfg = resolve_config(RunConfig::default(), common)?;
    let dir = out_dir(common);
    ensure_dir(&dir)?;
    let bundle = load_bundle(&cfg, &data.ratings, &data.trust)?;
    let mut model = Model::new(&cfg, bundle.n_users, bundle.n_items)?;
    let report = train(&mut model, &bundle)?;
    for h in &report.history {
        println!(
            "epoch {:>3}  loss {:.5}  task {:.5}  val {:.5}",
            h.epoch, h.train_loss, h.task_loss, h.val_score
        );
    }
    println!(
        "best epoch {} of {} ({})",
        report.best_epoch,
        report.epochs_run,
        if report.stopped_early {
            "stopped early"
        } else {
            "ran to max_epochs"
        }
    );
    println!("validation: {}", headline(&report.validation));
    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt.display().to_string())?;
    println!("wrote {}", ckpt.display());
    write_json(&dir, "train_report.json", &report)?;
    write_text(&dir, "train_history.csv", &history_csv(&report))?;
    write_text(&dir, "config.json", &(cfg.to_json() + "\n"))?;
    Ok(())
}

fn cmd_eval(common: &Common, data: &DataArgs, checkpoint: &str, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let mut model = Model::load(checkpoint)?;
    model.cfg = resolve_config(model.cfg.clone(), common)?;
    let dir = out_dir(common);
    ensure_dir(&dir)?;
    let bundle = load_bundle(&model.cfg, &data.ratings, &data.trust)?;
    let split_name = match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    };
    let result = match model.cfg.task {
        Task::Rating => evaluate_rating(&model, &bundle, split)?,
        Task::Ranking => {
            let (result, details) = evaluate_ranking(
                &model,
                &bundle,
                split,
                model.cfg.eval_negatives,
                model.cfg.eval_k,
                model.cfg.seed,
            )?;
            write_text(
                &dir,
                &format!("rank_detail_{split_name}.csv"),
                &rank_detail_csv(&bundle, &details),
            )?;
            result
        }
    };
    write_json(&dir, &format!("eval_{split_name}.json"), &result)?;
    println!("{split_name}: {}", headline(&result));
    Ok(())
}

#[derive(Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: Vec<EvalResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_hr_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_ndcg_at_k: Option<f64>,
}

#[derive(Serialize)]
pub struct AblationTable {
    pub task: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn median_of<F: Fn(&EvalResult) -> Option<f64>>(runs: &[EvalResult], pick: F) -> Option<f64> {
    let mut vals: Vec<f64> = runs.iter().filter_map(&pick).collect();
    median(&mut vals)
}

/// Train every variant under each seed (seed also drives the corpus split, so
/// each seed is one fully independent replication) and evaluate on test.
pub fn run_ablation(
    base: &RunConfig,
    seeds: &[u64],
    load: impl Fn(&RunConfig) -> Result<DatasetBundle>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for variant in Variant::all() {
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.variant = variant;
            let bundle = load(&cfg)?;
            let mut model = Model::new(&cfg, bundle.n_users, bundle.n_items)?;
            train(&mut model, &bundle)?;
            let result = crate::metrics::evaluate(&model, &bundle, Split::Test)?;
            println!("{} seed {}: {}", variant.name(), seed, headline(&result));
            runs.push(result);
        }
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            median_rmse: median_of(&runs, |r| r.rmse),
            median_mae: median_of(&runs, |r| r.mae),
            median_hr_at_k: median_of(&runs, |r| r.hr_at_k),
            median_ndcg_at_k: median_of(&runs, |r| r.ndcg_at_k),
            runs,
        });
    }
    Ok(AblationTable {
        task: base.task.name().to_string(),
        seeds: seeds.to_vec(),
        rows,
    })
}

fn ablation_csv(table: &AblationTable) -> String {
    let ranking = table.task == "ranking";
    let mut csv = if ranking {
        String::from("variant,runs,median_hr_at_k,median_ndcg_at_k\n")
    } else {
        String::from("variant,runs,median_rmse,median_mae\n")
    };
    for row in &table.rows {
        let (a, b) = if ranking {
            (row.median_hr_at_k, row.median_ndcg_at_k)
        } else {
            (row.median_rmse, row.median_mae)
        };
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.variant,
            row.runs.len(),
            fmt_opt(a),
            fmt_opt(b)
        ));
    }
    csv
}

fn cmd_ablate(common: &Common, data: &DataArgs, num_seeds: usize) -> Result<()> {
    if num_seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let cfg = resolve_config(RunConfig::default(), common)?;
    let dir = out_dir(common);
    ensure_dir(&dir)?;
    let seeds: Vec<u64> = (0..num_seeds as u64).map(|i| cfg.seed + i).collect();
    let table = run_ablation(&cfg, &seeds, |c| load_bundle(c, &data.ratings, &data.trust))?;
    write_json(&dir, "ablation.json", &table)?;
    write_text(&dir, "ablation.csv", &ablation_csv(&table))?;
    Ok(())
}

fn embedding_csv(header_dims: usize, rows: &[(&str, &str, i64, &[f64])]) -> String {
    let mut csv = String::from("entity,kind,id");
    for k in 0..header_dims {
        csv.push_str(&format!(",dim{k}"));
    }
    csv.push('\n');
    for (entity, kind, id, values) in rows {
        csv.push_str(&format!("{entity},{kind},{id}"));
        for v in *values {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    csv
}

fn cmd_export_embeddings(common: &Common, data: &DataArgs, checkpoint: &str) -> Result<()> {
    let mut model = Model::load(checkpoint)?;
    model.cfg = resolve_config(model.cfg.clone(), common)?;
    let dir = out_dir(common);
    ensure_dir(&dir)?;
    let bundle = load_bundle(&model.cfg, &data.ratings, &data.trust)?;
    let users: Vec<u32> = (0..bundle.n_users as u32).collect();
    let items: Vec<u32> = (0..bundle.n_items as u32).collect();

    let xs_u = model.user_encodings(&bundle, &users);
    let xs_v = model.item_encodings(&bundle, &items);
    let mut enc_rows: Vec<(&str, &str, i64, &[f64])> = Vec::new();
    for (k, x) in xs_u.iter().enumerate() {
        enc_rows.push(("user", "user_x", bundle.user_orig[k], x));
    }
    for (k, x) in xs_v.iter().enumerate() {
        enc_rows.push(("item", "item_x", bundle.item_orig[k], x));
    }
    write_text(
        &dir,
        "embeddings_encoder.csv",
        &embedding_csv(model.cfg.d, &enc_rows),
    )?;

    let user_splits = model.user_split_values(&bundle, &users);
    let item_splits = model.item_split_values(&bundle, &items);
    let mut dis_rows: Vec<(&str, &str, i64, &[f64])> = Vec::new();
    for (k, (z, c)) in user_splits.iter().enumerate() {
        dis_rows.push(("user", "user_interest", bundle.user_orig[k], z));
        dis_rows.push(("user", "user_social", bundle.user_orig[k], c));
    }
    for (k, (z, c)) in item_splits.iter().enumerate() {
        dis_rows.push(("item", "item_interest", bundle.item_orig[k], z));
        dis_rows.push(("item", "item_social", bundle.item_orig[k], c));
    }
    write_text(
        &dir,
        "embeddings_disentangled.csv",
        &embedding_csv(model.cfg.d_prime, &dis_rows),
    )?;
    Ok(())
}

fn cmd_alpha_report(common: &Common, data: &DataArgs, checkpoint: &str, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let mut model = Model::load(checkpoint)?;
    model.cfg = resolve_config(model.cfg.clone(), common)?;
    let dir = out_dir(common);
    ensure_dir(&dir)?;
    let bundle = load_bundle(&model.cfg, &data.ratings, &data.trust)?;
    let pairs: Vec<(u32, u32)> = bundle
        .split_records(split)
        .map(|r| (r.user, r.item))
        .collect();
    let table = model.item_interest_table(&bundle);
    let (decisions, summary) =
        regulate::alpha_report(&bundle, &table, &pairs, model.cfg.similarity_threshold);
    let mut csv = String::from("user_id,item_id,friend_recommended,similarity,alpha\n");
    for d in &decisions {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            bundle.user_orig[d.user as usize],
            bundle.item_orig[d.item as usize],
            d.friend_recommended as u8,
            fmt_opt(d.similarity),
            d.alpha
        ));
    }
    write_text(&dir, "alpha_report.csv", &csv)?;
    write_json(&dir, "alpha_summary.json", &summary)?;
    println!(
        "{} pairs, {} friend-recommended, {} kept, {} dropped",
        summary.num_pairs,
        summary.num_friend_recommended,
        summary.num_positive,
        summary.num_negative
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Prepare {
            common,
            ratings,
            trust,
        } => cmd_prepare(common, ratings, trust),
        Cmd::Synth { common } => cmd_synth(common),
        Cmd::Train { common, data } => cmd_train(common, data),
        Cmd::Eval {
            common,
            data,
            checkpoint,
            split,
        } => cmd_eval(common, data, checkpoint, split),
        Cmd::Ablate {
            common,
            data,
            seeds,
        } => cmd_ablate(common, data, *seeds),
        Cmd::ExportEmbeddings {
            common,
            data,
            checkpoint,
        } => cmd_export_embeddings(common, data, checkpoint),
        Cmd::AlphaReport {
            common,
            data,
            checkpoint,
            split,
        } => cmd_alpha_report(common, data, checkpoint, split),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_even_and_empty() {
        assert_eq!(median(&mut vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut Vec::new()), None);
    }

    #[test]
    fn set_flag_needs_an_equals_sign() {
        let common = Common {
            config: None,
            set: vec!["lambda0.5".into()],
            out: None,
            seed: None,
            task: None,
            variant: None,
        };
        let err = resolve_config(RunConfig::default(), &common).unwrap_err();
        assert!(err.to_string().contains("KEY=VALUE"));
    }

    #[test]
    fn shortcut_flags_override_set_pairs() {
        let common = Common {
            config: None,
            set: vec!["seed=1".into(), "variant=no_wt".into()],
            out: None,
            seed: Some(9),
            task: Some("ranking".into()),
            variant: None,
        };
        let cfg = resolve_config(RunConfig::default(), &common).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.task, Task::Ranking);
        assert_eq!(cfg.variant, Variant::NoWt);
    }

    #[test]
    fn split_names_parse() {
        assert_eq!(parse_split("val").unwrap(), Split::Validation);
        assert!(parse_split("holdout").is_err());
    }
}
