use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase and collapse runs of whitespace.
pub fn normalize_label(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A ⟨subject, predicate, object⟩ class in string form.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: impl Into<String>, predicate: impl Into<String>, object: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }

    pub fn normalized(&self) -> Self {
        Self::new(
            normalize_label(&self.subject),
            normalize_label(&self.predicate),
            normalize_label(&self.object),
        )
    }

    /// `subject|predicate|object`, used as a map key in JSON output.
    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.subject, self.predicate, self.object)
    }
}

impl std::fmt::Display for Triplet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "<{}, {}, {}>", self.subject, self.predicate, self.object)
    }
}

/// Label vocabulary of one dataset. `triplets` is empty for detection-only data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetVocabulary {
    pub id: String,
    pub objects: Vec<String>,
    pub triplets: Vec<Triplet>,
}

/// Unified object and relationship label spaces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub objects: Vec<String>,
    pub triplets: Vec<Triplet>,
    pub object_provenance: BTreeMap<String, BTreeSet<String>>,
    pub triplet_provenance: BTreeMap<Triplet, BTreeSet<String>>,
}

impl LabelSpace {
    pub fn object_index(&self, label: &str) -> Option<usize> {
        self.objects.binary_search_by(|o| o.as_str().cmp(label)).ok()
    }

    pub fn triplet_index(&self, t: &Triplet) -> Option<usize> {
        self.triplets.binary_search(t).ok()
    }
}

pub fn unify_label_spaces(vocabularies: &[DatasetVocabulary]) -> Result<LabelSpace> {
    if vocabularies.is_empty() {
        return Err(Error::NoDatasets);
    }
    let mut object_provenance: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut triplet_provenance: BTreeMap<Triplet, BTreeSet<String>> = BTreeMap::new();
    for v in vocabularies {
        if v.objects.is_empty() {
            return Err(Error::InvalidArgument {
                arg: "vocabulary",
                reason: format!("dataset `{}` has no object labels", v.id),
            });
        }
        let own: BTreeSet<String> = v.objects.iter().map(|o| normalize_label(o)).collect();
        for o in &own {
            object_provenance.entry(o.clone()).or_default().insert(v.id.clone());
        }
        for t in &v.triplets {
            let t = t.normalized();
            for side in [&t.subject, &t.object] {
                if !own.contains(side) {
                    return Err(Error::UnknownLabel(format!(
                        "{side} (triplet {t} in dataset `{}`)",
                        v.id
                    )));
                }
            }
            triplet_provenance.entry(t).or_default().insert(v.id.clone());
        }
    }
    Ok(LabelSpace {
        objects: object_provenance.keys().cloned().collect(),
        triplets: triplet_provenance.keys().cloned().collect(),
        object_provenance,
        triplet_provenance,
    })
}

/// Lower bound on sampled negative labels per image.
pub const MIN_NEGATIVES: usize = 50;

/// Per-image label set: the positives followed by negatives drawn without
/// replacement in proportion to `frequency`, in draw order. The number of
/// negatives is `max(MIN_NEGATIVES, count)` capped by the labels available.
pub fn sample_negative_labels<R: Rng + ?Sized>(
    positives: &[String],
    space: &[String],
    frequency: &BTreeMap<String, u64>,
    count: usize,
    rng: &mut R,
) -> Vec<String> {
    let pos: BTreeSet<&str> = positives.iter().map(String::as_str).collect();
    let mut pool: Vec<&String> = space.iter().filter(|l| !pos.contains(l.as_str())).collect();
    let mut weights: Vec<f64> = pool
        .iter()
        .map(|l| frequency.get(*l).copied().unwrap_or(1).max(1) as f64)
        .collect();
    let want = count.max(MIN_NEGATIVES).min(pool.len());
    let mut out: Vec<String> = Vec::with_capacity(positives.len() + want);
    let mut seen = BTreeSet::new();
    for p in positives {
        if seen.insert(p.as_str()) {
            out.push(p.clone());
        }
    }
    for _ in 0..want {
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        let k = dist.sample(rng);
        out.push(pool[k].clone());
        pool.swap_remove(k);
        weights.swap_remove(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(id: &str, objects: &[&str], triplets: &[(&str, &str, &str)]) -> DatasetVocabulary {
        DatasetVocabulary {
            id: id.into(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
            triplets: triplets.iter().map(|(s, p, o)| Triplet::new(*s, *p, *o)).collect(),
        }
    }

    #[test]
    fn union_of_objects() {
        let ls = unify_label_spaces(&[
            vocab("a", &["person", "horse"], &[]),
            vocab("b", &["Person ", "television"], &[]),
        ])
        .unwrap();
        assert_eq!(ls.objects, ["horse", "person", "television"]);
        assert_eq!(ls.object_provenance["person"].len(), 2);
        assert!(ls.triplets.is_empty());
    }

    #[test]
    fn near_synonymous_triplets_stay_distinct() {
        let ls = unify_label_spaces(&[
            vocab("hico", &["person", "horse"], &[("person", "ride", "horse")]),
            vocab("vg", &["man", "horse"], &[("man", "riding", "horse")]),
        ])
        .unwrap();
        assert_eq!(ls.triplets.len(), 2);
    }

    #[test]
    fn detection_only_vocabulary_adds_no_triplets() {
        let rel = vocab("hico", &["person", "horse"], &[("person", "ride", "horse")]);
        let det = vocab("coco", &["cup"], &[]);
        let a = unify_label_spaces(&[rel.clone()]).unwrap();
        let b = unify_label_spaces(&[rel, det]).unwrap();
        assert_eq!(a.triplets, b.triplets);
    }

    #[test]
    fn idempotent_and_order_insensitive() {
        let x = vocab("x", &["b", "a"], &[("a", "on", "b")]);
        let y = vocab("y", &["c", "a"], &[("c", "near", "a")]);
        let xy = unify_label_spaces(&[x.clone(), y.clone()]).unwrap();
        let yx = unify_label_spaces(&[y, x]).unwrap();
        assert_eq!(xy, yx);
        let again = unify_label_spaces(&[
            DatasetVocabulary {
                id: "x".into(),
                objects: xy.objects.clone(),
                triplets: xy.triplets.clone(),
            },
        ])
        .unwrap();
        assert_eq!(again.objects, xy.objects);
        assert_eq!(again.triplets, xy.triplets);
    }

    #[test]
    fn errors() {
        assert!(matches!(unify_label_spaces(&[]), Err(Error::NoDatasets)));
        assert!(unify_label_spaces(&[vocab("x", &["a"], &[("a", "on", "zzz")])]).is_err());
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i:03}")).collect()
    }

    #[test]
    fn negative_count_is_capped_by_space() {
        let space = labels(60);
        let pos = vec![space[0].clone(), space[1].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_negative_labels(&pos, &space, &BTreeMap::new(), MIN_NEGATIVES, &mut rng);
        assert_eq!(out.len(), 52);
        let space = labels(40);
        let out = sample_negative_labels(&pos, &space, &BTreeMap::new(), MIN_NEGATIVES, &mut rng);
        assert_eq!(out.len(), 40);
        let uniq: BTreeSet<_> = out.iter().collect();
        assert_eq!(uniq.len(), 40);
    }

    #[test]
    fn default_draws_fifty_negatives() {
        let space = labels(200);
        let pos = vec![space[5].clone(), space[9].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = sample_negative_labels(&pos, &space, &BTreeMap::new(), MIN_NEGATIVES, &mut rng);
        assert_eq!(out.len(), 52);
        assert_eq!(&out[..2], &pos[..]);
    }

    #[test]
    fn first_negative_follows_frequency() {
        // P(first = a) = 1000/1001 ~ 0.999.
        let space = vec!["a".to_string(), "b".to_string()];
        let freq = BTreeMap::from([("a".to_string(), 1000), ("b".to_string(), 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..10_000)
            .filter(|_| sample_negative_labels(&[], &space, &freq, MIN_NEGATIVES, &mut rng)[0] == "a")
            .count();
        assert!(hits >= 9_900, "{hits}");
    }
}
