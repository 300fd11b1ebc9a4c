//! Detection mAP, relationship mAP over Full/Rare/Non-Rare class splits, and
//! mean Recall@K.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub recall_k: Vec<usize>,
    /// Classes with fewer training instances than this are rare.
    pub rare_cutoff: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            recall_k: vec![50, 100],
            rare_cutoff: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("iou_threshold {} outside (0, 1]", self.iou_threshold)));
        }
        if self.recall_k.iter().any(|&k| k == 0) {
            return Err(Error::Config("recall K values must be >= 1".into()));
        }
        Ok(())
    }
}

/// A scored relationship prediction. `class_string` is the triplet key
/// `subject|predicate|object`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub class_string: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletGt {
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub class_string: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
}

/// Predictions for one image as stored in a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub triplets: Vec<TripletPrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
}

/// Predicate part of a triplet key.
pub fn predicate_of(class: &str) -> &str {
    class.split('|').nth(1).unwrap_or(class)
}

fn cmp_box(a: &BBox, b: &BBox) -> Ordering {
    a.as_array()
        .iter()
        .zip(b.as_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Descending score; ties broken by content so storage order never matters.
fn cmp_triplet(a: &TripletPrediction, b: &TripletPrediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.class_string.cmp(&b.class_string))
        .then_with(|| cmp_box(&a.sub_box, &b.sub_box))
        .then_with(|| cmp_box(&a.obj_box, &b.obj_box))
}

fn cmp_detection(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.label.cmp(&b.label))
        .then_with(|| cmp_box(&a.bbox, &b.bbox))
}

/// All-point interpolated average precision from true-positive flags in
/// descending score order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Greedy matching within one image: predictions in the given order take the
/// unmatched same-class ground truth with the highest overlap at or above
/// `thr` (lowest index on ties).
fn greedy_match<P, G>(
    preds: &[&P],
    gts: &[G],
    thr: f64,
    same_class: impl Fn(&P, &G) -> bool,
    overlap: impl Fn(&P, &G) -> f64,
) -> (Vec<bool>, Vec<bool>) {
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || !same_class(p, gt) {
                continue;
            }
            let o = overlap(p, gt);
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    (tp, used)
}

fn pair_overlap(p: &TripletPrediction, g: &TripletGt) -> f64 {
    iou(&p.sub_box, &g.sub_box).min(iou(&p.obj_box, &g.obj_box))
}

/// Per-class AP for every class with at least one ground-truth triplet.
pub fn relationship_ap_per_class(
    preds: &[Vec<TripletPrediction>],
    gts: &[Vec<TripletGt>],
    cfg: &EvalConfig,
) -> BTreeMap<String, f64> {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    // (score-ordered entries across images): (prediction, image, rank in image)
    let mut per_class: BTreeMap<&str, Vec<(&TripletPrediction, usize, usize, bool)>> = BTreeMap::new();
    let mut num_gt: BTreeMap<&str, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *num_gt.entry(g.class_string.as_str()).or_insert(0) += 1;
    }
    for (img, (ps, gs)) in preds.iter().zip(gts).enumerate() {
        let mut sorted: Vec<&TripletPrediction> = ps
            .iter()
            .filter(|p| num_gt.contains_key(p.class_string.as_str()))
            .collect();
        sorted.sort_by(|a, b| cmp_triplet(a, b));
        let (tp, _) = greedy_match(
            &sorted,
            gs,
            cfg.iou_threshold,
            |p, g| p.class_string == g.class_string,
            pair_overlap,
        );
        for (rank, (p, t)) in sorted.iter().zip(tp).enumerate() {
            per_class.entry(p.class_string.as_str()).or_default().push((p, img, rank, t));
        }
    }
    num_gt
        .iter()
        .map(|(&class, &n)| {
            let mut entries = per_class.remove(class).unwrap_or_default();
            entries.sort_by(|a, b| b.0.score.total_cmp(&a.0.score).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = entries.iter().map(|e| e.3).collect();
            (class.to_string(), average_precision(&flags, n))
        })
        .collect()
}

/// Relationship mAP per class split; `None` when a split has no evaluated
/// class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub full: f64,
    pub rare: Option<f64>,
    pub nonrare: Option<f64>,
}

/// Rare / Non-Rare partition of the evaluation classes by training count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassSplit {
    pub rare: BTreeSet<String>,
    pub nonrare: BTreeSet<String>,
}

impl ClassSplit {
    /// Splits `classes` by `training_counts` (missing counts are zero). Count
    /// keys that are not among `classes` are rejected.
    pub fn from_counts(classes: &[String], training_counts: &BTreeMap<String, u64>, cutoff: u64) -> Result<Self> {
        let known: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
        if let Some(k) = training_counts.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::UnknownClass(k.clone()));
        }
        let mut s = ClassSplit::default();
        for c in classes {
            if training_counts.get(c).copied().unwrap_or(0) < cutoff {
                s.rare.insert(c.clone());
            } else {
                s.nonrare.insert(c.clone());
            }
        }
        Ok(s)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn relationship_map(
    preds: &[Vec<TripletPrediction>],
    gts: &[Vec<TripletGt>],
    cfg: &EvalConfig,
    split: Option<&ClassSplit>,
) -> Result<MapResult> {
    if let Some(s) = split {
        for g in gts.iter().flatten() {
            if !s.rare.contains(&g.class_string) && !s.nonrare.contains(&g.class_string) {
                return Err(Error::UnknownClass(g.class_string.clone()));
            }
        }
    }
    let ap = relationship_ap_per_class(preds, gts, cfg);
    let full = mean(ap.values().copied()).unwrap_or(0.0);
    let (rare, nonrare) = match split {
        Some(s) => (
            mean(ap.iter().filter(|(c, _)| s.rare.contains(*c)).map(|(_, v)| *v)),
            mean(ap.iter().filter(|(c, _)| s.nonrare.contains(*c)).map(|(_, v)| *v)),
        ),
        None => (None, None),
    };
    Ok(MapResult { full, rare, nonrare })
}

/// Mean over predicate classes of recall among each image's top-K
/// predictions.
pub fn mean_recall_at_k(
    preds: &[Vec<TripletPrediction>],
    gts: &[Vec<TripletGt>],
    k: usize,
    cfg: &EvalConfig,
) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let mut hit: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (ps, gs) in preds.iter().zip(gts) {
        let mut sorted: Vec<&TripletPrediction> = ps.iter().collect();
        sorted.sort_by(|a, b| cmp_triplet(a, b));
        sorted.truncate(k);
        let (_, used) = greedy_match(
            &sorted,
            gs,
            cfg.iou_threshold,
            |p, g| p.class_string == g.class_string,
            pair_overlap,
        );
        for (g, u) in gs.iter().zip(used) {
            let e = hit.entry(predicate_of(&g.class_string)).or_insert((0, 0));
            e.1 += 1;
            if u {
                e.0 += 1;
            }
        }
    }
    mean(hit.values().map(|(m, n)| *m as f64 / *n as f64)).unwrap_or(0.0)
}

/// Mean per-label AP of box detections.
pub fn detection_map(preds: &[Vec<Detection>], gts: &[Vec<GtObject>], cfg: &EvalConfig) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let mut num_gt: BTreeMap<&str, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *num_gt.entry(g.label.as_str()).or_insert(0) += 1;
    }
    let mut per_class: BTreeMap<&str, Vec<(f64, usize, usize, bool)>> = BTreeMap::new();
    for (img, (ps, gs)) in preds.iter().zip(gts).enumerate() {
        let mut sorted: Vec<&Detection> = ps.iter().filter(|p| num_gt.contains_key(p.label.as_str())).collect();
        sorted.sort_by(|a, b| cmp_detection(a, b));
        let (tp, _) = greedy_match(
            &sorted,
            gs,
            cfg.iou_threshold,
            |p, g| p.label == g.label,
            |p, g| iou(&p.bbox, &g.bbox),
        );
        for (rank, (p, t)) in sorted.iter().zip(tp).enumerate() {
            per_class.entry(p.label.as_str()).or_default().push((p.score, img, rank, t));
        }
    }
    mean(num_gt.iter().map(|(&label, &n)| {
        let mut e = per_class.remove(label).unwrap_or_default();
        e.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = e.iter().map(|x| x.3).collect();
        average_precision(&flags, n)
    }))
    .unwrap_or(0.0)
}

/// The metrics file written by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_full: f64,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub mr_at: BTreeMap<String, f64>,
    pub detection_map: Option<f64>,
}

/// Computes every metric for one evaluation run.
pub fn evaluate(
    preds: &[Vec<TripletPrediction>],
    gts: &[Vec<TripletGt>],
    detections: Option<(&[Vec<Detection>], &[Vec<GtObject>])>,
    cfg: &EvalConfig,
    split: Option<&ClassSplit>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let m = relationship_map(preds, gts, cfg, split)?;
    let mr_at = cfg
        .recall_k
        .iter()
        .map(|&k| (k.to_string(), mean_recall_at_k(preds, gts, k, cfg)))
        .collect();
    Ok(MetricsReport {
        map_full: m.full,
        map_rare: m.rare,
        map_nonrare: m.nonrare,
        mr_at,
        detection_map: detections.map(|(p, g)| detection_map(p, g, cfg)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(cx: f64, cy: f64) -> BBox {
        BBox::new(cx, cy, 0.2, 0.2)
    }

    fn pred(s: BBox, o: BBox, c: &str, score: f64) -> TripletPrediction {
        TripletPrediction {
            sub_box: s,
            obj_box: o,
            class_string: c.into(),
            score,
        }
    }

    fn gt(s: BBox, o: BBox, c: &str) -> TripletGt {
        TripletGt {
            sub_box: s,
            obj_box: o,
            class_string: c.into(),
        }
    }

    const C: &str = "circle|above|square";

    #[test]
    fn single_exact_prediction() {
        let g = vec![vec![gt(b(0.2, 0.2), b(0.6, 0.6), C)]];
        let p = vec![vec![pred(b(0.2, 0.2), b(0.6, 0.6), C, 0.3)]];
        let m = relationship_map(&p, &g, &EvalConfig::default(), None).unwrap();
        assert_eq!(m.full, 1.0);
        assert_eq!(m.rare, None);
    }

    #[test]
    fn duplicate_is_a_false_positive_after_the_only_recall_point() {
        let g = vec![vec![gt(b(0.2, 0.2), b(0.6, 0.6), C)]];
        let p = vec![vec![
            pred(b(0.2, 0.2), b(0.6, 0.6), C, 0.8),
            pred(b(0.2, 0.2), b(0.6, 0.6), C, 0.9),
        ]];
        let ap = relationship_ap_per_class(&p, &g, &EvalConfig::default());
        assert_eq!(ap[C], 1.0);
    }

    #[test]
    fn low_overlap_scores_zero() {
        // Inner box covers 0.4 of the outer one.
        let outer = BBox::new(0.5, 0.5, 0.5, 0.2);
        let inner = BBox::new(0.4, 0.5, 0.2, 0.2);
        assert!((iou(&outer, &inner) - 0.4).abs() < 1e-12);
        let g = vec![vec![gt(outer, outer, C)]];
        let p = vec![vec![pred(inner, outer, C, 0.9)]];
        assert_eq!(relationship_map(&p, &g, &EvalConfig::default(), None).unwrap().full, 0.0);
    }

    #[test]
    fn three_prediction_hand_computed_ap() {
        // TP (0.9), FP (0.8), TP (0.7) against 2 gts:
        // precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 → AP = 0.5·1 + 0.5·2/3.
        let flags = [true, false, true];
        assert!((average_precision(&flags, 2) - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        let gts = vec![vec![
            GtObject { bbox: b(0.2, 0.2), label: "circle".into() },
            GtObject { bbox: b(0.7, 0.7), label: "circle".into() },
        ]];
        let preds = vec![vec![
            Detection { bbox: b(0.2, 0.2), label: "circle".into(), score: 0.9 },
            Detection { bbox: b(0.45, 0.45), label: "circle".into(), score: 0.8 },
            Detection { bbox: b(0.7, 0.7), label: "circle".into(), score: 0.7 },
        ]];
        let m = detection_map(&preds, &gts, &EvalConfig::default());
        assert!((m - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(detection_map(&[vec![]], &gts, &EvalConfig::default()), 0.0);
        let perfect: Vec<Vec<Detection>> = vec![gts[0]
            .iter()
            .map(|g| Detection { bbox: g.bbox, label: g.label.clone(), score: 1.0 })
            .collect()];
        assert_eq!(detection_map(&perfect, &gts, &EvalConfig::default()), 1.0);
    }

    #[test]
    fn mean_recall_hand_count() {
        let a = "circle|above|square";
        let bcls = "circle|left of|square";
        let g = vec![vec![
            gt(b(0.2, 0.2), b(0.6, 0.6), a),
            gt(b(0.7, 0.2), b(0.3, 0.6), a),
            gt(b(0.2, 0.8), b(0.8, 0.8), bcls),
        ]];
        let p = vec![vec![
            pred(b(0.2, 0.2), b(0.6, 0.6), a, 0.9),
            pred(b(0.2, 0.8), b(0.8, 0.8), bcls, 0.8),
        ]];
        let cfg = EvalConfig::default();
        assert!((mean_recall_at_k(&p, &g, 100, &cfg) - 0.75).abs() < 1e-15);
        // K below the rank of the only correct class-B prediction.
        assert!((mean_recall_at_k(&p, &g, 1, &cfg) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn split_reporting() {
        let classes = vec![C.to_string(), "circle|below|square".to_string()];
        let counts: BTreeMap<String, u64> = [(C.to_string(), 20)].into();
        let s = ClassSplit::from_counts(&classes, &counts, 10).unwrap();
        assert!(s.nonrare.contains(C) && s.rare.contains("circle|below|square"));
        let bad: BTreeMap<String, u64> = [("x|y|z".to_string(), 1)].into();
        assert!(matches!(ClassSplit::from_counts(&classes, &bad, 10), Err(Error::UnknownClass(_))));
        let g = vec![vec![gt(b(0.2, 0.2), b(0.6, 0.6), C)]];
        let p = vec![vec![pred(b(0.2, 0.2), b(0.6, 0.6), C, 0.3)]];
        let m = relationship_map(&p, &g, &EvalConfig::default(), Some(&s)).unwrap();
        assert_eq!((m.full, m.rare, m.nonrare), (1.0, None, Some(1.0)));
        let g2 = vec![vec![gt(b(0.2, 0.2), b(0.6, 0.6), "ring|touch|ring")]];
        assert!(relationship_map(&p, &g2, &EvalConfig::default(), Some(&s)).is_err());
    }

    fn random_case(seed: u64) -> (Vec<Vec<TripletPrediction>>, Vec<Vec<TripletGt>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = ["a|p|b", "a|q|b", "b|p|a"];
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..rng.random_range(1..4) {
            let g: Vec<TripletGt> = (0..rng.random_range(0..4))
                .map(|_| {
                    gt(
                        b(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                        b(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                        classes[rng.random_range(0..3)],
                    )
                })
                .collect();
            let mut p = Vec::new();
            for x in &g {
                if rng.random::<f64>() < 0.7 {
                    let j = rng.random_range(-0.03..0.03);
                    p.push(pred(
                        BBox::new(x.sub_box.cx + j, x.sub_box.cy, 0.2, 0.2),
                        x.obj_box,
                        &x.class_string,
                        (rng.random_range(0..10) as f64) / 10.0,
                    ));
                }
            }
            for _ in 0..rng.random_range(0..5) {
                p.push(pred(
                    b(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                    b(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                    classes[rng.random_range(0..3)],
                    (rng.random_range(0..10) as f64) / 10.0,
                ));
            }
            preds.push(p);
            gts.push(g);
        }
        (preds, gts)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn metric_properties(seed in any::<u64>()) {
            let cfg = EvalConfig::default();
            let (preds, gts) = random_case(seed);
            let m = relationship_map(&preds, &gts, &cfg, None).unwrap().full;
            prop_assert!((0.0..=1.0).contains(&m));
            let mut k_prev = 0.0;
            for k in [1, 2, 5, 50, 100] {
                let r = mean_recall_at_k(&preds, &gts, k, &cfg);
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!(r >= k_prev);
                k_prev = r;
            }

            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let shuffled: Vec<Vec<TripletPrediction>> = preds
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    for i in (1..q.len()).rev() {
                        q.swap(i, rng.random_range(0..=i));
                    }
                    q
                })
                .collect();
            prop_assert_eq!(relationship_ap_per_class(&preds, &gts, &cfg), relationship_ap_per_class(&shuffled, &gts, &cfg));
            prop_assert_eq!(mean_recall_at_k(&preds, &gts, 3, &cfg), mean_recall_at_k(&shuffled, &gts, 3, &cfg));

            let before = relationship_ap_per_class(&preds, &gts, &cfg);
            let mut extra = preds.clone();
            extra[0].push(pred(b(0.9, 0.1), b(0.1, 0.9), "a|p|b", -1.0));
            let after = relationship_ap_per_class(&extra, &gts, &cfg);
            for (c, v) in &after {
                prop_assert!(*v <= before[c] + 1e-15);
            }
        }
    }
}
