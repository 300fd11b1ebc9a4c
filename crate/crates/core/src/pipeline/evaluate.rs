use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SceneRecord};
use crate::error::Result;
use crate::infer::{detect_triplets, detections, predict, to_predictions, InferConfig};
use crate::language::{normalize_label, prompt_object, SynonymMap};
use crate::metrics::{evaluate, ClassSplit, EvalConfig, GtObject, MetricsReport, PredictionRecord, TripletGt};
use crate::model::Model;
use crate::scalar::Scalar;

use super::train::{parse_triplet_key, relation_prompt, PromptCache};

/// Object labels and triplet classes queried at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpace {
    pub objects: Vec<String>,
    /// Triplet keys `subject|predicate|object`.
    pub triplets: Vec<String>,
}

impl EvalSpace {
    /// Labels and triplets annotated anywhere in `datasets`.
    pub fn from_datasets(datasets: &[Dataset]) -> Self {
        let mut objects = Vec::new();
        let mut triplets = Vec::new();
        for d in datasets {
            let v = d.label_vocabulary();
            objects.extend(v.objects.iter().map(|o| normalize_label(o)));
            triplets.extend(v.triplets.iter().map(|t| t.normalized().key()));
        }
        objects.sort();
        objects.dedup();
        triplets.sort();
        triplets.dedup();
        Self { objects, triplets }
    }
}

/// Ground truth of one record in evaluation form.
pub fn ground_truth(record: &SceneRecord) -> (Vec<TripletGt>, Vec<GtObject>) {
    let triplets = record
        .triplets()
        .into_iter()
        .map(|(s, o, t)| TripletGt {
            sub_box: record.instances[s].bbox,
            obj_box: record.instances[o].bbox,
            class_string: t.normalized().key(),
        })
        .collect();
    let objects = record
        .instances
        .iter()
        .flat_map(|i| {
            i.labels.iter().map(|l| GtObject {
                bbox: i.bbox,
                label: normalize_label(l),
            })
        })
        .collect();
    (triplets, objects)
}

/// Runs inference on every record with the queries of `space`. Relation
/// prompts go through [`relation_prompt`]; object prompts use the first
/// template.
pub fn predict_records<T: Scalar>(
    model: &Model<T>,
    records: &[SceneRecord],
    space: &EvalSpace,
    synonyms: SynonymMap,
    cfg: &InferConfig,
) -> Result<Vec<PredictionRecord>> {
    cfg.validate()?;
    let mut prompts = PromptCache::new(model.config.text_encoder(synonyms));
    let object_prompts = space
        .objects
        .iter()
        .map(|o| prompt_object(o, 0))
        .collect::<Result<Vec<_>>>()?;
    let relation_prompts = space.triplets.iter().map(|k| relation_prompt(k)).collect::<Result<Vec<_>>>()?;
    let obj_raw = prompts.matrix::<T>(&object_prompts);
    let rel_raw = prompts.matrix::<T>(&relation_prompts);
    let rel_text = model.project_text(&rel_raw);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let p = predict(model, &r.image, Some(&obj_raw), None)?;
        let triplets = detect_triplets(&p.detector, &p.decoder, &rel_text, cfg);
        out.push(PredictionRecord {
            triplets: to_predictions(&triplets, &space.triplets),
            detections: Some(detections(&p.detector, &space.objects, cfg.top_k)),
        });
    }
    Ok(out)
}

/// Scores prediction records against the records they were made for.
pub fn score_predictions(
    predictions: &[PredictionRecord],
    records: &[SceneRecord],
    cfg: &EvalConfig,
    split: Option<&ClassSplit>,
) -> Result<MetricsReport> {
    if predictions.len() != records.len() {
        return Err(crate::Error::Config(format!(
            "{} prediction records for {} scenes",
            predictions.len(),
            records.len()
        )));
    }
    let (gt_t, gt_o): (Vec<_>, Vec<_>) = records.iter().map(ground_truth).unzip();
    let preds: Vec<_> = predictions.iter().map(|p| p.triplets.clone()).collect();
    let dets: Option<Vec<_>> = predictions.iter().map(|p| p.detections.clone()).collect();
    evaluate(&preds, &gt_t, dets.as_deref().map(|d| (d, gt_o.as_slice())), cfg, split)
}

/// Rare / Non-Rare split of `space` from training triplet counts, ignoring
/// counted triplets outside the space.
pub fn split_for(space: &EvalSpace, training: &[Dataset], cutoff: u64) -> Result<ClassSplit> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for d in training {
        for (k, v) in d.triplet_frequency() {
            let k = parse_triplet_key(&k).normalized().key();
            if space.triplets.contains(&k) {
                *counts.entry(k).or_insert(0) += v;
            }
        }
    }
    ClassSplit::from_counts(&space.triplets, &counts, cutoff)
}

/// Inference plus scoring in one call.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    records: &[SceneRecord],
    space: &EvalSpace,
    synonyms: SynonymMap,
    infer_cfg: &InferConfig,
    eval_cfg: &EvalConfig,
    split: Option<&ClassSplit>,
) -> Result<MetricsReport> {
    let preds = predict_records(model, records, space, synonyms, infer_cfg)?;
    score_predictions(&preds, records, eval_cfg, split)
}
