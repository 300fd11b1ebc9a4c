use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vrd_core::datagen::{synthetic_vocabulary, Dataset, SceneConfig};
use vrd_core::infer::{retrieve_by_image, InferConfig};
use vrd_core::language::SynonymMap;
use vrd_core::metrics::{EvalConfig, PredictionRecord};
use vrd_core::pipeline::{
    end_to_end_train, predict_records, relation_prompt, score_predictions, split_for, train_decoder, train_detector,
    Checkpoint, EvalSpace, PromptCache, Stage, TrainConfig, TrainIo,
};

/// The command-line tool trains and evaluates in single precision.
type Real = f32;

#[derive(Parser)]
#[command(name = "vrd", about = "Visual relationship detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration. Commands that only run a
    /// trained model are deterministic and ignore it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic dataset files.
    GenData(Common),
    /// Stage one: train the detector.
    TrainDetector(Common),
    /// Stage two: train the relation decoder on a detector checkpoint.
    TrainDecoder {
        #[command(flatten)]
        common: Common,
        /// Detector checkpoint; overrides `init_checkpoint` in the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train detector and decoder jointly from scratch.
    TrainE2e(Common),
    /// Score a checkpoint or a predictions file; writes metrics.json.
    Eval(Common),
    /// Detect triplets on every scene of a dataset; writes predictions.json.
    Infer(Common),
    /// Rank corpus relations against a query scene; writes retrieval.json.
    Retrieve(Common),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenSpec {
    id: String,
    vocabulary: String,
    scenes: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    datasets: Vec<GenSpec>,
    #[serde(default)]
    scene: SceneConfig,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvalRunConfig {
    dataset: PathBuf,
    /// Model to run; mutually exclusive with `predictions`.
    checkpoint: Option<PathBuf>,
    /// Precomputed predictions, one record per scene.
    predictions: Option<PathBuf>,
    /// Image side used to load the dataset when no checkpoint is given.
    image_size: Option<usize>,
    /// Built-in vocabulary whose full triplet set is queried.
    vocabulary: Option<String>,
    space: Option<EvalSpace>,
    /// Datasets whose triplet counts define the Rare split.
    training_datasets: Vec<PathBuf>,
    /// Canonicalize query words through the bundled synonym map.
    synonyms: Option<bool>,
    eval: EvalConfig,
    infer: InferConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveConfig {
    checkpoint: PathBuf,
    query_dataset: PathBuf,
    query_index: usize,
    corpus: PathBuf,
    #[serde(default)]
    vocabulary: Option<String>,
    #[serde(default)]
    infer: InferConfig,
}

fn read_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("bad config {}", path.display()))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_datasets(paths: &[PathBuf], image_size: usize) -> Result<Vec<Dataset>> {
    if paths.is_empty() {
        bail!("config lists no datasets");
    }
    paths
        .iter()
        .map(|p| Dataset::load(p, image_size).with_context(|| format!("loading dataset {}", p.display())))
        .collect()
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg: GenConfig = read_config(&c.config)?;
    let seed = c.seed.unwrap_or(cfg.seed);
    prepare_out(&c.out)?;
    for (i, spec) in cfg.datasets.iter().enumerate() {
        let d = Dataset::generate(&spec.id, &spec.vocabulary, spec.scenes, seed.wrapping_add(i as u64), &cfg.scene)?;
        d.save(&c.out.join(format!("{}.json", spec.id)))?;
    }
    Ok(())
}

fn train_config(c: &Common, stage: Stage) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if cfg.stage != stage {
        bail!("config stage is `{}` but this command trains `{}`", cfg.stage.name(), stage.name());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_training(c: &Common, stage: Stage, detector_ckpt: Option<PathBuf>) -> Result<()> {
    let cfg = train_config(c, stage)?;
    let init = match stage {
        Stage::Decoder => {
            let path = detector_ckpt
                .or_else(|| cfg.init_checkpoint.clone())
                .ok_or_else(|| vrd_core::Error::MissingCheckpoint("no detector checkpoint configured".into()))?;
            Some(Checkpoint::<Real>::load(&path)?.model)
        }
        _ => None,
    };
    let image_size = init.as_ref().map_or(cfg.model.detector.image_size, |m| m.config.detector.image_size);
    let datasets = load_datasets(&cfg.datasets, image_size)?;
    prepare_out(&c.out)?;
    let mut log = BufWriter::new(File::create(c.out.join("train_log.ndjson"))?);
    let io = TrainIo {
        log: Some(&mut log),
        dump_dir: Some(c.out.clone()),
    };
    let model = match stage {
        Stage::Detector => train_detector::<Real>(&cfg, &datasets, io)?,
        Stage::Decoder => train_decoder(&cfg, init.as_ref(), &datasets, io)?,
        Stage::EndToEnd => end_to_end_train::<Real>(&cfg, &datasets, io)?,
    };
    drop(log);
    Checkpoint::new(stage.name(), cfg.steps, model).save(&c.out.join("checkpoint.bin"))?;
    Ok(())
}

fn eval_space(vocabulary: &Option<String>, space: &Option<EvalSpace>, dataset: &Dataset) -> Result<EvalSpace> {
    Ok(match (space, vocabulary) {
        (Some(s), _) => s.clone(),
        (None, Some(v)) => {
            let v = synthetic_vocabulary(v)?;
            EvalSpace {
                objects: v.objects.iter().map(|s| s.to_string()).collect(),
                triplets: v.triplet_keys(),
            }
        }
        (None, None) => EvalSpace::from_datasets(std::slice::from_ref(dataset)),
    })
}

fn synonyms(enabled: Option<bool>) -> SynonymMap {
    if enabled.unwrap_or(true) {
        SynonymMap::bundled().clone()
    } else {
        SynonymMap::empty()
    }
}

fn eval(c: &Common) -> Result<()> {
    let cfg: EvalRunConfig = read_config(&c.config)?;
    cfg.eval.validate()?;
    let model = cfg.checkpoint.as_deref().map(Checkpoint::<Real>::load).transpose()?.map(|c| c.model);
    let image_size = model
        .as_ref()
        .map(|m| m.config.detector.image_size)
        .or(cfg.image_size)
        .unwrap_or(SceneConfig::default().image_size);
    let dataset = Dataset::load(&cfg.dataset, image_size)?;
    let space = eval_space(&cfg.vocabulary, &cfg.space, &dataset)?;
    let predictions: Vec<PredictionRecord> = match (&cfg.predictions, &model) {
        (Some(p), None) => read_config(p)?,
        (None, Some(m)) => predict_records(m, &dataset.records, &space, synonyms(cfg.synonyms), &cfg.infer)?,
        _ => bail!("eval needs exactly one of `checkpoint` and `predictions`"),
    };
    let training = cfg
        .training_datasets
        .iter()
        .map(|p| Dataset::load(p, image_size))
        .collect::<vrd_core::Result<Vec<_>>>()?;
    let split = if training.is_empty() {
        None
    } else {
        Some(split_for(&space, &training, cfg.eval.rare_cutoff)?)
    };
    let report = score_predictions(&predictions, &dataset.records, &cfg.eval, split.as_ref())?;
    prepare_out(&c.out)?;
    write_json(&c.out.join("metrics.json"), &report)
}

fn infer(c: &Common) -> Result<()> {
    let cfg: EvalRunConfig = read_config(&c.config)?;
    let path = cfg.checkpoint.as_deref().context("infer needs a `checkpoint`")?;
    let model = Checkpoint::<Real>::load(path)?.model;
    let dataset = Dataset::load(&cfg.dataset, model.config.detector.image_size)?;
    let space = eval_space(&cfg.vocabulary, &cfg.space, &dataset)?;
    let predictions = predict_records(&model, &dataset.records, &space, synonyms(cfg.synonyms), &cfg.infer)?;
    prepare_out(&c.out)?;
    write_json(&c.out.join("predictions.json"), &predictions)
}

fn retrieve(c: &Common) -> Result<()> {
    let cfg: RetrieveConfig = read_config(&c.config)?;
    let model = Checkpoint::<Real>::load(&cfg.checkpoint)?.model;
    let size = model.config.detector.image_size;
    let queries = Dataset::load(&cfg.query_dataset, size)?;
    let query = queries
        .records
        .get(cfg.query_index)
        .with_context(|| format!("query_index {} out of range", cfg.query_index))?;
    let corpus = Dataset::load(&cfg.corpus, size)?;
    let space = eval_space(&cfg.vocabulary, &None, &queries)?;
    let mut prompts = PromptCache::new(model.config.text_encoder(SynonymMap::bundled().clone()));
    let rel_prompts = space.triplets.iter().map(|k| relation_prompt(k)).collect::<vrd_core::Result<Vec<_>>>()?;
    let text = prompts.matrix::<Real>(&rel_prompts);
    let images: Vec<_> = corpus.records.iter().map(|r| r.image.clone()).collect();
    let hits = retrieve_by_image(&model, &query.image, &images, &text, &cfg.infer)?;
    prepare_out(&c.out)?;
    write_json(&c.out.join("retrieval.json"), &hits)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::TrainDetector(c) => run_training(&c, Stage::Detector, None),
        Command::TrainDecoder { common, checkpoint } => run_training(&common, Stage::Decoder, checkpoint),
        Command::TrainE2e(c) => run_training(&c, Stage::EndToEnd, None),
        Command::Eval(c) => eval(&c),
        Command::Infer(c) => infer(&c),
        Command::Retrieve(c) => retrieve(&c),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
