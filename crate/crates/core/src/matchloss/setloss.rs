//! Hungarian set losses for the detector and the relationship decoder.

use std::collections::BTreeMap;

use crate::autodiff::{sigmoid, softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::hungarian::{hungarian, Assignment};
use super::losses::{box_loss_with_grad, focal_sigmoid_term, focal_softmax_with_grad, LossWeights};

/// Flat per-step loss metrics.
pub type Breakdown = BTreeMap<String, f64>;

/// One ground-truth instance: its box and the indices of its positive
/// object classes.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTarget {
    pub bbox: BBox,
    pub labels: Vec<usize>,
}

/// Ground-truth relationship between two annotated instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtRelation {
    pub subject: usize,
    pub object: usize,
    pub class: usize,
}

/// Decoder target: multi-hot relationship classes plus the prediction
/// indices of the subject and object instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationTarget {
    pub classes: Vec<usize>,
    pub subject: usize,
    pub object: usize,
}

/// Loss value, gradients with respect to the inputs, and the matching.
#[derive(Clone, Debug)]
pub struct SetLoss<T: Scalar> {
    pub loss: T,
    pub grads: Vec<Matrix<T>>,
    pub assignment: Assignment,
    pub breakdown: Breakdown,
}

fn mean_prob_gap<T: Scalar>(row: &[T], labels: &[usize]) -> f64 {
    let s: f64 = labels.iter().map(|&l| 1.0 - sigmoid(row[l]).f64()).sum();
    s / labels.len() as f64
}

fn check_labels(labels: &[usize], k: usize, arg: &'static str) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument {
            arg,
            reason: "target has no positive class".into(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument {
            arg,
            reason: format!("class index {l} out of range for {k} classes"),
        });
    }
    Ok(())
}

/// Adds the focal sigmoid loss of every row (mean over classes) to `grad`
/// and returns the summed loss. `positives[i]` lists row `i`'s positive
/// classes; unmatched rows have none.
fn classification_terms<T: Scalar>(
    logits: &Matrix<T>,
    positives: &[&[usize]],
    w: &LossWeights,
    grad: &mut Matrix<T>,
) -> T {
    let (a, g) = (T::c(w.alpha), T::c(w.gamma));
    let k = logits.cols();
    if k == 0 {
        return T::zero();
    }
    let inv = T::one() / T::from_usize(k).expect("k");
    let mut total = T::zero();
    for i in 0..logits.rows() {
        let mut row = T::zero();
        for c in 0..k {
            let (l, d) = focal_sigmoid_term(logits[(i, c)], positives[i].contains(&c), a, g);
            row += l;
            grad[(i, c)] = d * inv;
        }
        total += row * inv;
    }
    total
}

/// Detector Hungarian loss. `logits` is N×K, `boxes` is N×4 (cx, cy, w, h).
/// Returns the loss normalized by N with gradients for `[logits, boxes]`.
pub fn detector_terms<T: Scalar>(
    logits: &Matrix<T>,
    boxes: &Matrix<T>,
    targets: &[InstanceTarget],
    w: &LossWeights,
) -> Result<SetLoss<T>> {
    let n = boxes.rows();
    assert_eq!(boxes.cols(), 4, "boxes must be N×4");
    assert_eq!(logits.rows(), n, "one logit row per prediction");
    if targets.len() > n {
        return Err(Error::TokenBudgetExceeded {
            gts: targets.len(),
            tokens: n,
        });
    }
    let k = logits.cols();
    for t in targets {
        check_labels(&t.labels, k, "targets")?;
        if !(t.bbox.w > 0.0 && t.bbox.h > 0.0) {
            return Err(Error::DegenerateBox { w: t.bbox.w, h: t.bbox.h });
        }
    }
    let pred = |i: usize| {
        let r = boxes.row(i);
        [r[0], r[1], r[2], r[3]]
    };

    let mut cost = Matrix::zeros(n, targets.len());
    for i in 0..n {
        for (g, t) in targets.iter().enumerate() {
            let (bl, _) = box_loss_with_grad(pred(i), &t.bbox, w)?;
            cost[(i, g)] = w.cls * mean_prob_gap(logits.row(i), &t.labels) + bl.f64();
        }
    }
    let assignment = hungarian(&cost)?;

    let mut positives: Vec<&[usize]> = vec![&[]; n];
    for &(i, g) in &assignment.pairs {
        positives[i] = &targets[g].labels;
    }
    let mut g_logits = Matrix::zeros(n, k);
    let cls = classification_terms(logits, &positives, w, &mut g_logits);

    let mut g_boxes = Matrix::zeros(n, 4);
    let mut box_total = T::zero();
    for &(i, g) in &assignment.pairs {
        let (l, d) = box_loss_with_grad(pred(i), &targets[g].bbox, w)?;
        box_total += l;
        g_boxes.row_mut(i).copy_from_slice(&d);
    }

    let norm = if n == 0 {
        T::zero()
    } else {
        T::one() / T::from_usize(n).expect("n")
    };
    let loss = (cls + box_total) * norm;
    let mut breakdown = Breakdown::new();
    breakdown.insert("od_cls".into(), (cls * norm).f64());
    breakdown.insert("od_box".into(), (box_total * norm).f64());
    breakdown.insert("od_total".into(), loss.f64());
    breakdown.insert("od_matched".into(), assignment.len() as f64);
    Ok(SetLoss {
        loss,
        grads: vec![g_logits.scale(norm), g_boxes.scale(norm)],
        assignment,
        breakdown,
    })
}

/// Prediction indices assigned to a relation's subject and object instances.
pub fn ground_truth_indices(assignment: &Assignment, subject: usize, object: usize) -> Result<(usize, usize)> {
    let s = assignment
        .row_for_col(subject)
        .ok_or(Error::UnmatchedInstance(subject))?;
    let o = assignment
        .row_for_col(object)
        .ok_or(Error::UnmatchedInstance(object))?;
    Ok((s, o))
}

/// Builds decoder targets from annotated relations, merging relations that
/// share a (subject, object) instance pair into one multi-hot target.
/// Targets come out ordered by instance pair.
pub fn relation_targets(relations: &[GtRelation], assignment: &Assignment) -> Result<Vec<RelationTarget>> {
    let mut merged: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for r in relations {
        let classes = merged.entry((r.subject, r.object)).or_default();
        if !classes.contains(&r.class) {
            classes.push(r.class);
        }
    }
    merged
        .into_iter()
        .map(|((s, o), mut classes)| {
            classes.sort_unstable();
            let (subject, object) = ground_truth_indices(assignment, s, o)?;
            Ok(RelationTarget {
                classes,
                subject,
                object,
            })
        })
        .collect()
}

/// Relationship-decoder Hungarian loss. `class_logits` is M×K, the index
/// logits are M×N. Gradients are returned for
/// `[class_logits, subject_logits, object_logits]`.
pub fn vrd_terms<T: Scalar>(
    class_logits: &Matrix<T>,
    subject_logits: &Matrix<T>,
    object_logits: &Matrix<T>,
    targets: &[RelationTarget],
    w: &LossWeights,
) -> Result<SetLoss<T>> {
    let m = class_logits.rows();
    let n = subject_logits.cols();
    assert_eq!(subject_logits.shape(), object_logits.shape(), "index logit shapes differ");
    assert_eq!(subject_logits.rows(), m, "one index row per query");
    if targets.len() > m {
        return Err(Error::QueryBudgetExceeded {
            targets: targets.len(),
            queries: m,
        });
    }
    let k = class_logits.cols();
    for t in targets {
        check_labels(&t.classes, k, "relation targets")?;
        if t.subject >= n || t.object >= n {
            return Err(Error::InvalidArgument {
                arg: "relation targets",
                reason: format!("instance index out of range for {n} instances"),
            });
        }
    }

    let (ps, po) = if n > 0 {
        (softmax_rows(subject_logits), softmax_rows(object_logits))
    } else {
        (Matrix::zeros(m, 0), Matrix::zeros(m, 0))
    };
    let mut cost = Matrix::zeros(m, targets.len());
    for j in 0..m {
        for (t, target) in targets.iter().enumerate() {
            let idx = 2.0 - ps[(j, target.subject)].f64() - po[(j, target.object)].f64();
            cost[(j, t)] = w.cls * mean_prob_gap(class_logits.row(j), &target.classes) + idx;
        }
    }
    let assignment = hungarian(&cost)?;

    let mut positives: Vec<&[usize]> = vec![&[]; m];
    for &(j, t) in &assignment.pairs {
        positives[j] = &targets[t].classes;
    }
    let mut g_cls = Matrix::zeros(m, k);
    let cls = classification_terms(class_logits, &positives, w, &mut g_cls);

    let (a, g) = (T::c(w.alpha), T::c(w.gamma));
    let mut g_sub = Matrix::zeros(m, n);
    let mut g_obj = Matrix::zeros(m, n);
    let mut ind = T::zero();
    for &(j, t) in &assignment.pairs {
        let (ls, ds) = focal_softmax_with_grad(subject_logits.row(j), targets[t].subject, a, g);
        let (lo, dobj) = focal_softmax_with_grad(object_logits.row(j), targets[t].object, a, g);
        ind += ls + lo;
        g_sub.row_mut(j).copy_from_slice(&ds);
        g_obj.row_mut(j).copy_from_slice(&dobj);
    }

    let norm = if m == 0 {
        T::zero()
    } else {
        T::one() / T::from_usize(m).expect("m")
    };
    let loss = (cls + ind) * norm;
    let mut breakdown = Breakdown::new();
    breakdown.insert("vrd_cls".into(), (cls * norm).f64());
    breakdown.insert("vrd_ind".into(), (ind * norm).f64());
    breakdown.insert("vrd_total".into(), loss.f64());
    breakdown.insert("vrd_matched".into(), assignment.len() as f64);
    Ok(SetLoss {
        loss,
        grads: vec![g_cls.scale(norm), g_sub.scale(norm), g_obj.scale(norm)],
        assignment,
        breakdown,
    })
}

fn push_node<T: Scalar>(tape: &mut Tape<T>, inputs: &[Var], terms: &SetLoss<T>) -> Var {
    let grads = terms.grads.clone();
    tape.custom(inputs, Matrix::scalar(terms.loss), move |gout, _| {
        let s = gout.item();
        grads.iter().map(|g| Some(g.scale(s))).collect()
    })
}

/// Detector loss recorded on the tape as a single node.
pub fn detector_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    boxes: Var,
    targets: &[InstanceTarget],
    w: &LossWeights,
) -> Result<(Var, SetLoss<T>)> {
    let terms = detector_terms(tape.value(logits), tape.value(boxes), targets, w)?;
    let v = push_node(tape, &[logits, boxes], &terms);
    Ok((v, terms))
}

/// Decoder loss recorded on the tape as a single node.
pub fn vrd_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    class_logits: Var,
    subject_logits: Var,
    object_logits: Var,
    targets: &[RelationTarget],
    w: &LossWeights,
) -> Result<(Var, SetLoss<T>)> {
    let terms = vrd_terms(
        tape.value(class_logits),
        tape.value(subject_logits),
        tape.value(object_logits),
        targets,
        w,
    )?;
    let v = push_node(tape, &[class_logits, subject_logits, object_logits], &terms);
    Ok((v, terms))
}

/// Detector loss of a materialized prediction set.
pub fn detector_loss<T: Scalar>(
    logits: &Matrix<T>,
    boxes: &[BBox],
    targets: &[InstanceTarget],
    w: &LossWeights,
) -> Result<(f64, Breakdown)> {
    let bm = Matrix::from_vec(
        boxes.len(),
        4,
        boxes.iter().flat_map(|b| b.as_array().map(T::c)).collect(),
    );
    let r = detector_terms(logits, &bm, targets, w)?;
    Ok((r.loss.f64(), r.breakdown))
}

/// Decoder loss of a materialized relation prediction set.
pub fn vrd_loss<T: Scalar>(
    output: &crate::reldecoder::RelationOutput<T>,
    targets: &[RelationTarget],
    w: &LossWeights,
) -> Result<(f64, Breakdown)> {
    let r = vrd_terms(
        &output.class_logits,
        &output.subject_logits,
        &output.object_logits,
        targets,
        w,
    )?;
    Ok((r.loss.f64(), r.breakdown))
}
