use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::augment::{sample_mosaic, Budget, SwapTable};
use crate::autodiff::{Bound, Tape, Var};
use crate::datagen::{mix_stream, Dataset, MixSpec, SceneRecord};
use crate::detector;
use crate::error::{Error, Result};
use crate::language::{
    normalize_label, prompt_object, prompt_relation, sample_negative_labels, templates, unify_label_spaces,
    LabelSpace, PromptTriplet, SynonymMap, TextEncoder, Triplet,
};
use crate::matchloss::{
    detector_loss_node, detector_terms, relation_targets, vrd_loss_node, Breakdown, GtRelation, InstanceTarget,
};
use crate::model::{text_matrix, text_tower, Model, ModelConfig};
use crate::params::group_of;
use crate::reldecoder;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::config::{Stage, TrainConfig};
use super::optim::{clip_global_norm, global_norm, learning_rate, Adam};

/// Encodes prompts once and remembers them.
pub struct PromptCache {
    encoder: TextEncoder,
    cache: BTreeMap<String, Vec<f64>>,
}

impl PromptCache {
    pub fn new(encoder: TextEncoder) -> Self {
        Self {
            encoder,
            cache: BTreeMap::new(),
        }
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn get(&mut self, prompt: &str) -> &[f64] {
        if !self.cache.contains_key(prompt) {
            let e = self.encoder.encode(prompt);
            self.cache.insert(prompt.to_string(), e);
        }
        &self.cache[prompt]
    }

    /// Raw text matrix for a list of prompts.
    pub fn matrix<T: Scalar>(&mut self, prompts: &[String]) -> Matrix<T> {
        let rows: Vec<Vec<f64>> = prompts.iter().map(|p| self.get(p).to_vec()).collect();
        text_matrix(&rows, self.encoder.dim)
    }
}

pub fn parse_triplet_key(key: &str) -> Triplet {
    let mut it = key.splitn(3, '|');
    let s = it.next().unwrap_or_default();
    let p = it.next().unwrap_or_default();
    let o = it.next().unwrap_or_default();
    Triplet::new(s, p, o)
}

pub fn relation_prompt(key: &str) -> Result<String> {
    let t = parse_triplet_key(key);
    prompt_relation(PromptTriplet::new(&t.subject, &t.predicate, &t.object))
}

/// Unified label spaces and label frequencies of the training data.
#[derive(Clone, Debug)]
pub struct TrainingLabels {
    pub space: LabelSpace,
    pub triplet_keys: Vec<String>,
    pub object_frequency: BTreeMap<String, u64>,
    pub triplet_frequency: BTreeMap<String, u64>,
    /// Datasets that carry relationship annotations.
    pub relational: BTreeSet<String>,
}

impl TrainingLabels {
    pub fn new(datasets: &[Dataset]) -> Result<Self> {
        let vocabs: Vec<_> = datasets.iter().map(Dataset::label_vocabulary).collect();
        let space = unify_label_spaces(&vocabs)?;
        let mut object_frequency = BTreeMap::new();
        let mut triplet_frequency = BTreeMap::new();
        for d in datasets {
            for (k, v) in d.object_frequency() {
                *object_frequency.entry(normalize_label(&k)).or_insert(0) += v;
            }
            for (k, v) in d.triplet_frequency() {
                *triplet_frequency.entry(parse_triplet_key(&k).normalized().key()).or_insert(0) += v;
            }
        }
        Ok(Self {
            triplet_keys: space.triplets.iter().map(Triplet::key).collect(),
            space,
            object_frequency,
            triplet_frequency,
            relational: vocabs
                .iter()
                .filter(|v| !v.triplets.is_empty())
                .map(|v| v.id.clone())
                .collect(),
        })
    }
}

/// One training sample with its text queries and targets.
pub struct Example<T: Scalar> {
    pub record: SceneRecord,
    pub object_text: Matrix<T>,
    pub instances: Vec<InstanceTarget>,
    /// Present when the sample carries relationship supervision.
    pub relation_text: Option<Matrix<T>>,
    pub relations: Vec<GtRelation>,
}

/// Builds the per-image label sets (positives plus sampled negatives),
/// renders and encodes the prompts, and indexes the targets.
pub fn prepare_example<T: Scalar, R: Rng + ?Sized>(
    record: SceneRecord,
    labels: &TrainingLabels,
    cfg: &TrainConfig,
    with_relations: bool,
    prompts: &mut PromptCache,
    rng: &mut R,
) -> Result<Example<T>> {
    let mut positives: Vec<String> = Vec::new();
    for inst in &record.instances {
        for l in &inst.labels {
            let l = normalize_label(l);
            if !positives.contains(&l) {
                positives.push(l);
            }
        }
    }
    let object_labels = sample_negative_labels(
        &positives,
        &labels.space.objects,
        &labels.object_frequency,
        cfg.negatives,
        rng,
    );
    let index: BTreeMap<&str, usize> = object_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let n_templates = templates().len();
    let object_prompts = object_labels
        .iter()
        .map(|l| {
            let t = if cfg.sample_templates { rng.random_range(0..n_templates) } else { 0 };
            prompt_object(l, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let instances = record
        .instances
        .iter()
        .map(|inst| {
            let mut ls: Vec<usize> = inst.labels.iter().map(|l| index[normalize_label(l).as_str()]).collect();
            ls.sort_unstable();
            ls.dedup();
            InstanceTarget { bbox: inst.bbox, labels: ls }
        })
        .collect();
    let supervised = with_relations && record.dataset.split('+').all(|d| labels.relational.contains(d));
    let (relation_text, relations) = if supervised {
        let triplets: Vec<(usize, usize, String)> = record
            .triplets()
            .into_iter()
            .map(|(s, o, t)| (s, o, t.normalized().key()))
            .collect();
        let mut pos: Vec<String> = Vec::new();
        for (_, _, k) in &triplets {
            if !pos.contains(k) {
                pos.push(k.clone());
            }
        }
        let classes = sample_negative_labels(&pos, &labels.triplet_keys, &labels.triplet_frequency, cfg.negatives, rng);
        let cindex: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
        let rels = triplets
            .iter()
            .map(|(s, o, k)| GtRelation {
                subject: *s,
                object: *o,
                class: cindex[k.as_str()],
            })
            .collect();
        let rel_prompts = classes.iter().map(|k| relation_prompt(k)).collect::<Result<Vec<_>>>()?;
        (Some(prompts.matrix(&rel_prompts)), rels)
    } else {
        (None, Vec::new())
    };
    Ok(Example {
        object_text: prompts.matrix(&object_prompts),
        record,
        instances,
        relation_text,
        relations,
    })
}

/// Loss of one example on a fresh tape, with gradients of the trainable
/// parameters.
pub struct ExampleLoss<T: Scalar> {
    pub loss: f64,
    pub breakdown: Breakdown,
    pub grads: BTreeMap<String, Matrix<T>>,
}

/// Builds the example's loss on `tape`. The detector term is included when
/// `with_detector_loss`; the relationship term whenever the stage includes
/// the decoder and the example is supervised.
fn objective<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    model: &Model<T>,
    cfg: &TrainConfig,
    ex: &Example<T>,
    with_detector_loss: bool,
    drop_rng: Option<&mut dyn RngCore>,
) -> Result<(Option<Var>, Breakdown)> {
    let mcfg = &model.config;
    let obj_raw = tape.constant(ex.object_text.clone());
    let obj_text = text_tower(tape, b, obj_raw);
    let det = detector::forward(tape, b, &mcfg.detector, &ex.record.image, Some(obj_text), drop_rng)?;
    let logits = det.class_logits.expect("object text supplied");
    let mut parts = Vec::new();
    let mut breakdown = Breakdown::new();
    let assignment = if with_detector_loss {
        let (l, s) = detector_loss_node(tape, logits, det.boxes, &ex.instances, &cfg.loss)?;
        parts.push(l);
        breakdown.extend(s.breakdown);
        s.assignment
    } else {
        let s = detector_terms(tape.value(logits), tape.value(det.boxes), &ex.instances, &cfg.loss)?;
        breakdown.extend(s.breakdown);
        s.assignment
    };
    if cfg.stage != Stage::Detector {
        if let Some(rel_text) = &ex.relation_text {
            let raw = tape.constant(rel_text.clone());
            let t = text_tower(tape, b, raw);
            let rel = reldecoder::forward(tape, b, &mcfg.decoder, det.instances, Some(t));
            let targets = relation_targets(&ex.relations, &assignment)?;
            let (l, s) = vrd_loss_node(
                tape,
                rel.class_logits.expect("relation text supplied"),
                rel.subject_logits,
                rel.object_logits,
                &targets,
                &cfg.loss,
            )?;
            parts.push(l);
            breakdown.extend(s.breakdown);
        }
    }
    let total = (!parts.is_empty()).then(|| tape.add_scalars(&parts));
    Ok((total, breakdown))
}

/// Forward and backward pass for one example. The detector term enters the
/// loss whenever detector parameters are trainable.
pub fn example_loss<T: Scalar>(
    model: &Model<T>,
    cfg: &TrainConfig,
    ex: &Example<T>,
    trainable: &dyn Fn(&str) -> bool,
    drop_rng: Option<&mut dyn RngCore>,
) -> Result<ExampleLoss<T>> {
    let mut tape = Tape::new();
    let b = tape.bind(&model.params, trainable);
    let (total, breakdown) = objective(&mut tape, &b, model, cfg, ex, trainable("detector.tau"), drop_rng)?;
    let Some(total) = total else {
        return Ok(ExampleLoss {
            loss: 0.0,
            breakdown,
            grads: BTreeMap::new(),
        });
    };
    let loss = tape.value(total).item().f64();
    let grads = tape.backward(total);
    let grads = tape
        .param_grads(&grads)
        .into_iter()
        .filter(|(n, _)| trainable(n))
        .collect();
    Ok(ExampleLoss { loss, breakdown, grads })
}

/// Loss value only, without droplayer or gradients.
pub fn example_objective<T: Scalar>(
    model: &Model<T>,
    cfg: &TrainConfig,
    ex: &Example<T>,
    with_detector_loss: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = tape.bind(&model.params, |_| false);
    let (total, _) = objective(&mut tape, &b, model, cfg, ex, with_detector_loss, None)?;
    Ok(total.map_or(0.0, |t| tape.value(t).item().f64()))
}

/// Parameters whose value is clamped into the temperature range after
/// every update.
const TEMPERATURES: [&str; 3] = ["detector.tau", "decoder.tau_rel", "decoder.tau_ind"];

/// Where training writes its side outputs.
#[derive(Default)]
pub struct TrainIo<'a> {
    /// Newline-delimited JSON step log.
    pub log: Option<&'a mut dyn Write>,
    /// Directory for diagnostic dumps; the system temp dir when unset.
    pub dump_dir: Option<PathBuf>,
}

fn dump_batch(dir: &Path, step: usize, batch: &[SceneRecord], losses: &[f64]) -> Result<String> {
    let records: Vec<_> = batch
        .iter()
        .zip(losses)
        .map(|(r, l)| {
            json!({
                "dataset": r.dataset,
                "source": r.source,
                "instances": r.instances,
                "relations": r.relations,
                "loss": if l.is_finite() { json!(l) } else { json!(l.to_string()) },
            })
        })
        .collect();
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("nonfinite_step{step}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&json!({ "step": step, "batch": records }))?)?;
    Ok(path.display().to_string())
}

/// The shared optimization loop behind every stage.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    io: TrainIo<'_>,
) -> Result<Model<T>> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::NoDatasets);
    }
    let labels = TrainingLabels::new(datasets)?;
    let mix = if cfg.mix.0.is_empty() {
        MixSpec::uniform(datasets.iter().map(|d| d.id.as_str()))
    } else {
        cfg.mix.clone()
    };
    let mut stream = mix_stream(datasets, &mix, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut prompts = PromptCache::new(model.config.text_encoder(SynonymMap::bundled().clone()));
    let swaps = SwapTable::default();
    let budget = Budget {
        instances: model.config.detector.num_tokens(),
        relation_pairs: model.config.decoder.num_queries,
    };
    let group_lr: BTreeMap<String, f64> = model
        .params
        .names()
        .filter_map(|n| cfg.group_lr(group_of(n)).map(|lr| (n.to_string(), lr)))
        .collect();
    let trainable = |n: &str| group_lr.contains_key(n);
    let frozen_before: Option<Vec<(String, Matrix<T>)>> = cfg.debug_checks.then(|| {
        model
            .params
            .iter()
            .filter(|(n, _)| !trainable(n))
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect()
    });
    let use_droplayer = cfg.droplayer_rate > 0.0 && trainable("detector.tau");
    let mut model_cfg = model.config.clone();
    model_cfg.detector.droplayer_rate = cfg.droplayer_rate;
    let with_relations = cfg.stage != Stage::Detector;
    let mut adam = Adam::default();
    let mut io = io;

    for step in 0..cfg.steps {
        let scale = learning_rate(step, 1.0, cfg.warmup_steps, cfg.steps);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let rec = if cfg.augment.mosaic {
                sample_mosaic(&mut (&mut stream).cloned(), &mut rng, &cfg.augment.mosaic_spec, Some(budget))?
            } else {
                stream.next().ok_or(Error::StreamExhausted)?.clone()
            };
            let rec = cfg.augment.apply_single(&rec, &swaps, &mut rng)?;
            batch.push(prepare_example::<T, _>(rec, &labels, cfg, with_relations, &mut prompts, &mut rng)?);
        }
        let mut sum: BTreeMap<String, Matrix<T>> = BTreeMap::new();
        let mut losses = Vec::with_capacity(batch.len());
        let mut terms: Breakdown = Breakdown::new();
        let mut norm_sum = 0.0;
        let forward_model = Model {
            config: model_cfg.clone(),
            params: std::mem::take(&mut model.params),
        };
        for ex in &batch {
            let drop: Option<&mut dyn RngCore> = if use_droplayer { Some(&mut drop_rng) } else { None };
            let mut out = match example_loss(&forward_model, cfg, ex, &trainable, drop) {
                Ok(out) => out,
                Err(Error::NonFiniteCost { .. }) => {
                    losses.push(f64::NAN);
                    break;
                }
                Err(e) => return Err(e),
            };
            losses.push(out.loss);
            if !out.loss.is_finite() {
                break;
            }
            norm_sum += clip_global_norm(&mut out.grads, cfg.clip_norm);
            if cfg.debug_checks {
                let n = global_norm(&out.grads);
                assert!(n <= cfg.clip_norm + 1e-9, "clipped gradient norm {n} above {}", cfg.clip_norm);
            }
            for (k, v) in out.breakdown {
                *terms.entry(k).or_insert(0.0) += v;
            }
            for (name, g) in out.grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }
        model.params = forward_model.params;
        if losses.iter().any(|l| !l.is_finite()) {
            let dir = io.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
            let records: Vec<SceneRecord> = batch.into_iter().map(|e| e.record).collect();
            let dump = dump_batch(&dir, step, &records[..losses.len()], &losses)?;
            return Err(Error::NonFiniteLoss { step, dump });
        }
        let inv = T::c(1.0 / batch.len() as f64);
        for g in sum.values_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        adam.step(&mut model.params, &sum, |n| group_lr[n] * scale);
        let (lo, hi) = detector::TEMPERATURE_RANGE;
        for name in TEMPERATURES {
            if let Some(t) = model.params.get_mut(name) {
                for v in t.data_mut() {
                    *v = T::c(v.f64().clamp(lo, hi));
                }
            }
        }
        if let Some(before) = &frozen_before {
            for (n, m) in before {
                assert_eq!(model.params.get(n), Some(m), "frozen parameter {n} changed");
            }
        }
        if let Some(log) = io.log.as_deref_mut() {
            let nb = batch.len() as f64;
            let mut line = serde_json::Map::new();
            line.insert("step".into(), json!(step));
            line.insert("lr".into(), json!(cfg.lr * scale));
            line.insert("loss".into(), json!(losses.iter().sum::<f64>() / nb));
            line.insert("grad_norm".into(), json!(norm_sum / nb));
            for (k, v) in &terms {
                line.insert(k.clone(), json!(v / nb));
            }
            writeln!(log, "{}", serde_json::Value::Object(line))?;
        }
    }
    Ok(model)
}

/// Stage one: detector on box annotations, text tower frozen unless the
/// config says otherwise.
pub fn train_detector<T: Scalar>(cfg: &TrainConfig, datasets: &[Dataset], io: TrainIo<'_>) -> Result<Model<T>> {
    if cfg.stage != Stage::Detector {
        return Err(Error::Config(format!("stage is {}, expected detector", cfg.stage.name())));
    }
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    train(model, cfg, datasets, io)
}

/// Stage two: relation decoder on top of a trained detector.
pub fn train_decoder<T: Scalar>(
    cfg: &TrainConfig,
    detector_model: Option<&Model<T>>,
    datasets: &[Dataset],
    io: TrainIo<'_>,
) -> Result<Model<T>> {
    if cfg.stage != Stage::Decoder {
        return Err(Error::Config(format!("stage is {}, expected decoder", cfg.stage.name())));
    }
    let init = detector_model.ok_or_else(|| Error::MissingCheckpoint("no detector checkpoint given".into()))?;
    // Decoder weights restart from the configured seed; everything else comes
    // from the stage-one model.
    let config = ModelConfig {
        decoder: cfg.model.decoder.clone(),
        ..init.config.clone()
    };
    let mut model = Model::init(config, cfg.seed)?;
    for (name, value) in init.params.iter() {
        if group_of(name) != "decoder" {
            model.params.insert(name, value.clone());
        }
    }
    train(model, cfg, datasets, io)
}

/// Both modules from scratch against the summed losses.
pub fn end_to_end_train<T: Scalar>(cfg: &TrainConfig, datasets: &[Dataset], io: TrainIo<'_>) -> Result<Model<T>> {
    if cfg.stage != Stage::EndToEnd {
        return Err(Error::Config(format!("stage is {}, expected end_to_end", cfg.stage.name())));
    }
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    train(model, cfg, datasets, io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentConfig;
    use crate::datagen::SceneConfig;
    use crate::detector::DetectorConfig;
    use crate::pipeline::Checkpoint;
    use crate::reldecoder::DecoderConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            text_dim: 16,
            text_seed: 1,
            detector: DetectorConfig {
                image_size: 32,
                patch_size: 8,
                depth: 1,
                width: 8,
                heads: 2,
                ..Default::default()
            },
            decoder: DecoderConfig {
                num_queries: 16,
                layers: 1,
                heads: 2,
                width: 8,
                ..Default::default()
            },
        }
    }

    fn data() -> Vec<Dataset> {
        let scene = SceneConfig {
            image_size: 32,
            ..Default::default()
        };
        vec![Dataset::generate("A", "A", 4, 3, &scene).unwrap()]
    }

    fn cfg(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            steps: 6,
            batch_size: 2,
            lr: 1e-3,
            warmup_steps: 2,
            model: tiny_model(),
            debug_checks: true,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_groups_stay_byte_identical() {
        let d = data();
        let c = cfg(Stage::Detector);
        let init: Model<f32> = Model::init(c.model.clone(), c.seed).unwrap();
        let det = train_detector::<f32>(&c, &d, TrainIo::default()).unwrap();
        assert_eq!(det.params.get("text.proj"), init.params.get("text.proj"));
        assert_ne!(det.params.get("detector.patch.w"), init.params.get("detector.patch.w"));

        let dc = cfg(Stage::Decoder);
        let full = train_decoder(&dc, Some(&det), &d, TrainIo::default()).unwrap();
        for (name, value) in det.params.iter() {
            if group_of(name) != "decoder" {
                assert_eq!(full.params.get(name), Some(value), "{name} changed");
            }
        }
        let unfrozen = TrainConfig { freeze_detector: false, ..dc };
        let tuned = train_decoder(&unfrozen, Some(&det), &d, TrainIo::default()).unwrap();
        assert_ne!(tuned.params.get("detector.patch.w"), det.params.get("detector.patch.w"));
    }

    #[test]
    fn decoder_stage_needs_a_detector() {
        let r = train_decoder::<f32>(&cfg(Stage::Decoder), None, &data(), TrainIo::default());
        assert!(matches!(r, Err(Error::MissingCheckpoint(_))));
        assert!(train_detector::<f32>(&cfg(Stage::Decoder), &data(), TrainIo::default()).is_err());
    }

    #[test]
    fn same_seed_same_bytes_and_log() {
        let d = data();
        let c = TrainConfig {
            augment: AugmentConfig::default(),
            droplayer_rate: 0.2,
            ..cfg(Stage::EndToEnd)
        };
        let run = || {
            let mut log = Vec::new();
            let m = end_to_end_train::<f32>(&c, &d, TrainIo { log: Some(&mut log), dump_dir: None }).unwrap();
            (Checkpoint::new("end_to_end", c.steps, m).to_bytes().unwrap(), log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let text = String::from_utf8(la).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), c.steps);
        assert_eq!(lines[0]["lr"], 0.0);
        assert!(lines[0]["od_total"].is_number() && lines[0]["vrd_total"].is_number());
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let d = data();
        let c = cfg(Stage::Detector);
        let mut model: Model<f32> = Model::init(c.model.clone(), 0).unwrap();
        model.params.get_mut("detector.cls_head.b").unwrap().data_mut()[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let io = TrainIo {
            log: None,
            dump_dir: Some(dir.path().to_path_buf()),
        };
        match train(model, &c, &d, io) {
            Err(Error::NonFiniteLoss { step, dump }) => {
                assert_eq!(step, 0);
                let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dump).unwrap()).unwrap();
                assert_eq!(v["step"], 0);
                assert!(!v["batch"].as_array().unwrap().is_empty());
            }
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn clipped_example_gradients_respect_the_bound() {
        let d = data();
        let c = cfg(Stage::EndToEnd);
        let labels = TrainingLabels::new(&d).unwrap();
        let model: Model<f64> = Model::init(c.model.clone(), 0).unwrap();
        let mut prompts = PromptCache::new(model.config.text_encoder(SynonymMap::bundled().clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in &d[0].records {
            let ex = prepare_example::<f64, _>(r.clone(), &labels, &c, true, &mut prompts, &mut rng).unwrap();
            let mut out = example_loss(&model, &c, &ex, &|_| true, None).unwrap();
            let value = example_objective(&model, &c, &ex, true).unwrap();
            assert!((value - out.loss).abs() < 1e-12);
            clip_global_norm(&mut out.grads, 0.5);
            assert!(global_norm(&out.grads) <= 0.5 + 1e-9);
        }
    }
}
