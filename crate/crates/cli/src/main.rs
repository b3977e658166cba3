use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fsodlab::datasets::{
    load_annotations, merge_datasets, sample_k_shot, save_annotations, synth_generate, EpisodeSpec,
    SyntheticSceneConfig,
};
use fsodlab::eval::EvalReport;
use fsodlab::pipeline::{
    ablation_rows, evaluate, fine_tune, load_checkpoint, pr_curve_svg, prepare_target, run_ablation, sample_support,
    save_checkpoint, starting_model, train_base, ExperimentConfig, StageResult,
};
use fsodlab::{Error, Result};

#[derive(Parser)]
#[command(name = "fsodlab", version, about = "Few-shot detection experiments on synthetic traffic signs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config and FSODLAB_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (config: SyntheticSceneConfig).
    Synth {
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Merge annotation files, matching categories by name.
    Merge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Category name to drop (repeatable, case-insensitive).
        #[arg(long)]
        exclude: Vec<String>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Split a dataset into a k-shot support set and the remainder.
    SampleShots {
        input: PathBuf,
        /// Shots per class; defaults to the config's episode.k.
        #[arg(short)]
        k: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train on the base domain and write a checkpoint.
    TrainBase {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Sample shots, fine-tune, and evaluate on the query split.
    Finetune {
        /// Start from this checkpoint instead of the toggles' choice.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an annotation file (default: the query split).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the five-row ablation grid.
    Ablate {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Draw precision-recall curves from a report.json as SVG.
    PlotPr {
        report: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Parser)]
struct Root {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MergeConfig {
    exclude: Vec<String>,
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

fn experiment(common: &Common) -> Result<(ExperimentConfig, u64)> {
    let cfg: ExperimentConfig = read_json(common.config.as_deref())?;
    cfg.validate()?;
    let seed = cfg.resolve_seed(common.seed)?;
    Ok((ExperimentConfig { seed: Some(seed), ..cfg }, seed))
}

fn write_stage(dir: &Path, res: &StageResult) -> Result<()> {
    write_json(&dir.join(format!("{}.json", res.stage)), res)?;
    let mut csv = String::from("iteration,rpn_objectness,rpn_box,cls,box_reg,total\n");
    for (i, l) in res.history.iter().enumerate() {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            i + 1,
            l.rpn_objectness,
            l.rpn_box,
            l.cls,
            l.box_reg,
            l.total
        ));
    }
    let p = dir.join(format!("{}_losses.csv", res.stage));
    fs::write(&p, csv).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

fn run(root: Root) -> Result<()> {
    let common = &root.common;
    match root.command {
        Command::Synth { output } => {
            let cfg: SyntheticSceneConfig = read_json(common.config.as_deref())?;
            let seed = match common.seed {
                Some(s) => s,
                None => ExperimentConfig::default().resolve_seed(None)?,
            };
            let set = synth_generate(&cfg, seed)?;
            save_annotations(&set, &output)?;
            println!(
                "wrote {} images, {} annotations to {}",
                set.images.len(),
                set.annotations.len(),
                output.display()
            );
        }
        Command::Merge { inputs, exclude, output } => {
            let cfg: MergeConfig = read_json(common.config.as_deref())?;
            let sets = inputs.iter().map(load_annotations).collect::<Result<Vec<_>>>()?;
            let excluded: Vec<String> = cfg.exclude.into_iter().chain(exclude).collect();
            let merged = merge_datasets(&sets, &excluded);
            save_annotations(&merged, &output)?;
            println!(
                "merged {} files: {} categories, {} images, {} annotations",
                inputs.len(),
                merged.categories.len(),
                merged.images.len(),
                merged.annotations.len()
            );
        }
        Command::SampleShots { input, k, out } => {
            let (cfg, seed) = experiment(common)?;
            let set = load_annotations(&input)?;
            let spec = EpisodeSpec {
                k: k.unwrap_or(cfg.episode.k),
                seed,
                classes: cfg.episode.classes.clone(),
            };
            let (support, rest) = sample_k_shot(&set, &spec)?;
            save_annotations(&support, &out.join("support").join("annotations.json"))?;
            save_annotations(&rest, &out.join("remainder").join("annotations.json"))?;
            println!(
                "support: {} images, {} annotations; remainder: {} images",
                support.images.len(),
                support.annotations.len(),
                rest.images.len()
            );
        }
        Command::TrainBase { out } => {
            let (cfg, seed) = experiment(common)?;
            ensure_dir(&out)?;
            cfg.save(&out.join("config.json"))?;
            let (det, res) = train_base(&cfg, seed)?;
            save_checkpoint(&det, &out.join("base"))?;
            write_stage(&out, &res)?;
            println!(
                "base training: {} iterations, final loss {:.4}, checksum {}",
                res.iterations, res.final_losses.total, res.checksum
            );
        }
        Command::Finetune { base, out } => {
            let (cfg, seed) = experiment(common)?;
            ensure_dir(&out)?;
            cfg.save(&out.join("config.json"))?;
            let split = prepare_target(&cfg, seed)?;
            let support = sample_support(&cfg, &split, cfg.episode.k, seed)?;
            let start = match &base {
                Some(p) => load_checkpoint(p)?,
                None => {
                    let (det, res) = starting_model(&cfg, seed, support.categories.len())?;
                    if let Some(res) = res {
                        save_checkpoint(&det, &out.join("base"))?;
                        write_stage(&out, &res)?;
                    }
                    det
                }
            };
            let (det, mut res) = fine_tune(start, &cfg, &support, seed)?;
            let report = evaluate(&det, &split.query, &support.categories, cfg.eval_max_detections)?;
            res.report = Some(report.clone());
            save_checkpoint(&det, &out.join("model"))?;
            write_stage(&out, &res)?;
            save_annotations(&support, &out.join("support").join("annotations.json"))?;
            save_annotations(&split.query, &out.join("query").join("annotations.json"))?;
            report.save_json(&out.join("report.json"))?;
            let csv = out.join("report.csv");
            fs::write(&csv, report.to_csv()).map_err(|e| Error::Data(format!("{}: {e}", csv.display())))?;
            println!("fine-tuned on {} support images; query mAP {:.4}", support.images.len(), report.map_coco);
        }
        Command::Eval { checkpoint, data, out } => {
            let (cfg, seed) = experiment(common)?;
            ensure_dir(&out)?;
            cfg.save(&out.join("config.json"))?;
            let det = load_checkpoint(&checkpoint)?;
            let query = match &data {
                Some(p) => load_annotations(p)?,
                None => prepare_target(&cfg, seed)?.query,
            };
            if query.categories.len() != det.config().num_classes {
                return Err(Error::Data(format!(
                    "model has {} classes but the data has {}",
                    det.config().num_classes,
                    query.categories.len()
                )));
            }
            let report = evaluate(&det, &query, &query.categories, cfg.eval_max_detections)?;
            report.save_json(&out.join("report.json"))?;
            let csv = out.join("report.csv");
            fs::write(&csv, report.to_csv()).map_err(|e| Error::Data(format!("{}: {e}", csv.display())))?;
            println!("mAP {:.4} over {} images", report.map_coco, query.images.len());
        }
        Command::Ablate { out } => {
            let (cfg, seed) = experiment(common)?;
            ensure_dir(&out)?;
            cfg.save(&out.join("config.json"))?;
            let progress = |c: &fsodlab::pipeline::CellResult| match &c.outcome {
                Ok(m) => eprintln!("row {} {}-shot seed {}: mAP {:.4}", c.row, c.shots, c.seed, m.map_coco),
                Err(e) => eprintln!("row {} {}-shot seed {}: failed: {e}", c.row, c.shots, c.seed),
            };
            let outcome = run_ablation(&cfg, seed, &ablation_rows(), &progress)?;
            outcome.write(&out)?;
            print!("{}", outcome.summary_markdown());
        }
        Command::PlotPr { report, output } => {
            let r = EvalReport::load_json(&report)?;
            fs::write(&output, pr_curve_svg(&r)).map_err(|e| Error::Data(format!("{}: {e}", output.display())))?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let root = match Root::try_parse() {
        Ok(r) => r,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                ref e if e.is_data_error() => 3,
                _ => 1,
            })
        }
    }
}
