//! Turning model outputs into scored relationship triplets: assembly, pair-wise
//! NMS, and one-shot retrieval with a relation embedding as the query.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::detector::DetectorOutput;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::image::Image;
use crate::metrics::{Detection, TripletPrediction};
use crate::model::{self, Model};
use crate::reldecoder::{select_indices, RelationOutput};
use crate::scalar::Scalar;
use crate::tensor::{cosine, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub top_k: usize,
    pub pnms_threshold: f64,
    pub per_class: bool,
    /// Retrieval needs a top-1 triplet scoring strictly above this.
    pub score_floor: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            pnms_threshold: 0.7,
            per_class: true,
            score_floor: 0.0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.pnms_threshold > 0.0 && self.pnms_threshold <= 1.0) {
            return Err(Error::Config(format!("pnms_threshold {} outside (0, 1]", self.pnms_threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub subject_index: usize,
    pub object_index: usize,
    /// Relation query that produced the triplet.
    pub query: usize,
    /// Index into the relationship text queries.
    pub class: usize,
    pub score: f64,
    /// Relation embedding in the text space.
    pub embedding: Vec<f64>,
}

/// Descending score, then lower query index, then lower class index.
pub fn rank_order(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Scores every (query, class) pair by cosine similarity and keeps the global
/// top `k`. `text` rows are the relationship queries after the text tower.
pub fn assemble<T: Scalar>(
    det: &DetectorOutput<T>,
    rel: &RelationOutput<T>,
    text: &Matrix<T>,
    k: usize,
) -> Vec<ScoredTriplet> {
    let m = rel.num_queries();
    assert_eq!(det.instance_embeddings.rows(), det.boxes.len(), "inconsistent detector output");
    assert_eq!(rel.class_embeddings.cols(), text.cols(), "text width mismatch");
    let mut scores: Vec<(f64, usize, usize)> = Vec::with_capacity(m * text.rows());
    for j in 0..m {
        let r = rel.class_embeddings.row(j);
        for c in 0..text.rows() {
            scores.push((cosine(r, text.row(c)).f64(), j, c));
        }
    }
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scores.len() {
        scores.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        scores.truncate(k);
    }
    scores.sort_by(|a, b| rank_order(*a, *b));
    let (subs, objs) = select_indices(&rel.subject_embeddings, &rel.object_embeddings, &det.instance_embeddings);
    scores
        .into_iter()
        .map(|(score, j, c)| ScoredTriplet {
            sub_box: det.boxes[subs[j]],
            obj_box: det.boxes[objs[j]],
            subject_index: subs[j],
            object_index: objs[j],
            query: j,
            class: c,
            score,
            embedding: rel.class_embeddings.row(j).iter().map(|v| v.f64()).collect(),
        })
        .collect()
}

/// min(subject IoU, object IoU).
pub fn pair_overlap(a: &ScoredTriplet, b: &ScoredTriplet) -> f64 {
    iou(&a.sub_box, &b.sub_box).min(iou(&a.obj_box, &b.obj_box))
}

/// Greedy pair-wise NMS over triplets already in rank order. With `per_class`
/// only triplets of the same class suppress each other.
pub fn pnms(triplets: &[ScoredTriplet], cfg: &InferConfig) -> Vec<ScoredTriplet> {
    debug_assert!(triplets.windows(2).all(|w| w[0].score >= w[1].score), "pnms input must be sorted");
    let mut kept: Vec<&ScoredTriplet> = Vec::new();
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for t in triplets {
        let key = if cfg.per_class { t.class } else { 0 };
        let bucket = by_class.entry(key).or_default();
        if bucket.iter().any(|&i| pair_overlap(kept[i], t) > cfg.pnms_threshold) {
            continue;
        }
        bucket.push(kept.len());
        kept.push(t);
    }
    kept.into_iter().cloned().collect()
}

/// Assembly followed by PNMS.
pub fn detect_triplets<T: Scalar>(
    det: &DetectorOutput<T>,
    rel: &RelationOutput<T>,
    text: &Matrix<T>,
    cfg: &InferConfig,
) -> Vec<ScoredTriplet> {
    pnms(&assemble(det, rel, text, cfg.top_k), cfg)
}

/// Materialized outputs of one inference pass.
pub struct Prediction<T: Scalar> {
    pub detector: DetectorOutput<T>,
    pub decoder: RelationOutput<T>,
}

/// Runs the model on one image without gradients. Text matrices are raw
/// embeddings; the text tower is applied inside.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    image: &Image,
    object_text: Option<&Matrix<T>>,
    relation_text: Option<&Matrix<T>>,
) -> Result<Prediction<T>> {
    let mut tape = Tape::new();
    let b = tape.bind(&model.params, |_| false);
    let v = model::forward(&mut tape, &b, &model.config, image, object_text, relation_text, None)?;
    Ok(Prediction {
        detector: DetectorOutput::from_vars(&tape, &v.detector),
        decoder: RelationOutput::from_vars(&tape, &v.decoder),
    })
}

/// Every (instance, label) pair scored by its sigmoid probability, best `k`
/// kept.
pub fn detections<T: Scalar>(det: &DetectorOutput<T>, labels: &[String], k: usize) -> Vec<Detection> {
    let l = &det.class_logits;
    assert_eq!(l.cols(), labels.len(), "one logit column per label");
    let mut out: Vec<(f64, usize, usize)> = Vec::with_capacity(l.rows() * l.cols());
    for i in 0..l.rows() {
        for c in 0..l.cols() {
            out.push((crate::autodiff::sigmoid(l[(i, c)].f64()), i, c));
        }
    }
    out.sort_by(|a, b| rank_order(*a, *b));
    out.truncate(k);
    out.into_iter()
        .map(|(score, i, c)| Detection {
            bbox: det.boxes[i],
            label: labels[c].clone(),
            score,
        })
        .collect()
}

/// Converts triplets to the evaluation format; `classes` are the triplet
/// keys indexed by [`ScoredTriplet::class`].
pub fn to_predictions(triplets: &[ScoredTriplet], classes: &[String]) -> Vec<TripletPrediction> {
    triplets
        .iter()
        .map(|t| TripletPrediction {
            sub_box: t.sub_box,
            obj_box: t.obj_box,
            class_string: classes[t.class].clone(),
            score: t.score,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    /// Index into the corpus.
    pub scene: usize,
    pub query: usize,
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub score: f64,
}

/// One-shot retrieval: the query image's best text-scored triplet supplies the
/// embedding that every corpus relation is ranked against.
pub fn retrieve_by_image<T: Scalar>(
    model: &Model<T>,
    query: &Image,
    corpus: &[Image],
    relation_text: &Matrix<T>,
    cfg: &InferConfig,
) -> Result<Vec<RetrievalHit>> {
    let p = predict(model, query, None, None)?;
    let text = model.project_text(relation_text);
    let best = assemble(&p.detector, &p.decoder, &text, 1)
        .into_iter()
        .next()
        .filter(|t| t.score > cfg.score_floor)
        .ok_or(Error::NoQueryEmbedding { floor: cfg.score_floor })?;
    let anchor = &best.embedding;
    let mut hits = Vec::new();
    for (scene, image) in corpus.iter().enumerate() {
        let c = predict(model, image, None, None)?;
        let rel = &c.decoder;
        let (subs, objs) = select_indices(&rel.subject_embeddings, &rel.object_embeddings, &c.detector.instance_embeddings);
        for j in 0..rel.num_queries() {
            let e: Vec<f64> = rel.class_embeddings.row(j).iter().map(|v| v.f64()).collect();
            hits.push(RetrievalHit {
                scene,
                query: j,
                sub_box: c.detector.boxes[subs[j]],
                obj_box: c.detector.boxes[objs[j]],
                score: cosine(&e, anchor),
            });
        }
    }
    hits.sort_by(|a, b| rank_order((a.score, a.scene, a.query), (b.score, b.scene, b.query)));
    Ok(hits)
}
