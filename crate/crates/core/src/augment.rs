//! Mosaic tiling, random crops and horizontal flips with exact annotation
//! remapping.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Instance, Relation, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Corners};
use crate::image::Image;

/// Probabilities of 1×1, 2×2 and 3×3 mosaics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosaicSpec {
    pub probabilities: [f64; 3],
}

impl Default for MosaicSpec {
    fn default() -> Self {
        Self {
            probabilities: [0.4, 0.3, 0.3],
        }
    }
}

impl MosaicSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.probabilities;
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mosaic probabilities {p:?} must be >= 0 and sum to 1")));
        }
        Ok(())
    }

    /// Draws the grid side g ∈ {1, 2, 3}.
    pub fn sample_grid<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i + 1;
            }
        }
        // Rounding left u past the cumulative sum; take the last non-empty cell.
        self.probabilities.iter().rposition(|p| *p > 0.0).unwrap_or(0) + 1
    }
}

/// Maps a box of a tile into the mosaic cell `(row, col)` of a g×g grid.
pub fn remap_box(b: &BBox, g: usize, row: usize, col: usize) -> BBox {
    let gf = g as f64;
    BBox::new(
        (col as f64 + b.cx) / gf,
        (row as f64 + b.cy) / gf,
        b.w / gf,
        b.h / gf,
    )
}

/// Inverse of [`remap_box`].
pub fn unmap_box(b: &BBox, g: usize, row: usize, col: usize) -> BBox {
    let gf = g as f64;
    BBox::new(b.cx * gf - col as f64, b.cy * gf - row as f64, b.w * gf, b.h * gf)
}

fn cell_bounds(i: usize, g: usize, size: usize) -> (usize, usize) {
    (i * size / g, (i + 1) * size / g)
}

/// Tiles `g²` records into one, row-major. Instances are concatenated in tile
/// order and relation indices shifted accordingly.
pub fn tile(records: &[SceneRecord], g: usize) -> SceneRecord {
    assert_eq!(records.len(), g * g, "need g² records");
    if g == 1 {
        return records[0].clone();
    }
    let size = records[0].image.size();
    let mut image = Image::filled(size, [0.0; 3]);
    let mut instances = Vec::new();
    let mut relations = Vec::new();
    for (t, rec) in records.iter().enumerate() {
        let (row, col) = (t / g, t % g);
        let (y0, y1) = cell_bounds(row, g, size);
        let (x0, x1) = cell_bounds(col, g, size);
        image.paste_resized(&rec.image, y0, x0, y1 - y0, x1 - x0);
        let offset = instances.len();
        for inst in &rec.instances {
            instances.push(Instance {
                bbox: remap_box(&inst.bbox, g, row, col),
                labels: inst.labels.clone(),
            });
        }
        for r in &rec.relations {
            relations.push(Relation {
                sub: r.sub + offset,
                obj: r.obj + offset,
                predicates: r.predicates.clone(),
            });
        }
    }
    let mut datasets: Vec<&str> = records.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    SceneRecord {
        image,
        source: records[0].source.clone(),
        instances,
        relations,
        dataset: datasets.join("+"),
    }
}

/// Annotation limits a training sample must respect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub instances: usize,
    pub relation_pairs: usize,
}

fn relation_pairs(r: &SceneRecord) -> usize {
    let mut pairs: Vec<(usize, usize)> = r.relations.iter().map(|x| (x.sub, x.obj)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs.len()
}

/// Draws a grid size, pulls g² records from `stream` and tiles them. When a
/// `budget` is given and the mosaic would exceed it, the first tile is used
/// on its own.
pub fn sample_mosaic<I, R>(stream: &mut I, rng: &mut R, spec: &MosaicSpec, budget: Option<Budget>) -> Result<SceneRecord>
where
    I: Iterator<Item = SceneRecord> + ?Sized,
    R: Rng + ?Sized,
{
    let g = spec.sample_grid(rng);
    let mut tiles = Vec::with_capacity(g * g);
    for _ in 0..g * g {
        tiles.push(stream.next().ok_or(Error::StreamExhausted)?);
    }
    let out = tile(&tiles, g);
    if let Some(b) = budget {
        if out.instances.len() > b.instances || relation_pairs(&out) > b.relation_pairs {
            return Ok(tiles.swap_remove(0));
        }
    }
    Ok(out)
}

/// Predicates that change meaning under a horizontal mirror, with partners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapTable {
    pub pairs: BTreeMap<String, String>,
    pub sensitive: Vec<String>,
}

impl Default for SwapTable {
    fn default() -> Self {
        let mut t = Self {
            pairs: BTreeMap::new(),
            sensitive: Vec::new(),
        };
        for (a, b) in [("left of", "right of"), ("leftward of", "rightward of")] {
            t.add(a, b);
        }
        t
    }
}

impl SwapTable {
    pub fn add(&mut self, a: &str, b: &str) {
        self.pairs.insert(a.into(), b.into());
        self.pairs.insert(b.into(), a.into());
        for s in [a, b] {
            if !self.sensitive.iter().any(|x| x == s) {
                self.sensitive.push(s.into());
            }
        }
    }

    fn swap(&self, p: &str) -> Result<String> {
        if let Some(q) = self.pairs.get(p) {
            return Ok(q.clone());
        }
        if self.sensitive.iter().any(|s| s == p) {
            return Err(Error::MissingSwapPartner(p.to_string()));
        }
        Ok(p.to_string())
    }
}

/// Mirrors the image left-right, reflects boxes and swaps
/// orientation-sensitive predicates.
pub fn hflip(record: &SceneRecord, table: &SwapTable) -> Result<SceneRecord> {
    let mut out = record.clone();
    out.image = record.image.hflip();
    for inst in &mut out.instances {
        inst.bbox.cx = 1.0 - inst.bbox.cx;
    }
    for r in &mut out.relations {
        r.predicates = r.predicates.iter().map(|p| table.swap(p)).collect::<Result<_>>()?;
    }
    Ok(out)
}

/// Minimum fraction of an instance's area that must survive a crop.
pub const CROP_SURVIVAL: f64 = 0.25;
const CROP_TRIES: usize = 10;

/// Crops the annotations to the normalized square window with corner
/// `(x0, y0)` and side `side`, rescaled to the full frame. Returns `None`
/// when nothing survives in a record that had instances.
pub fn crop_window(record: &SceneRecord, x0: f64, y0: f64, side: f64) -> Option<SceneRecord> {
    let win = Corners {
        x0,
        y0,
        x1: x0 + side,
        y1: y0 + side,
    };
    let mut keep = Vec::with_capacity(record.instances.len());
    let mut instances = Vec::new();
    for inst in &record.instances {
        let c = inst.bbox.corners();
        let clipped = c.intersect(&win);
        if clipped.area() < CROP_SURVIVAL * c.area() || clipped.area() <= 0.0 {
            keep.push(None);
            continue;
        }
        let b = Corners {
            x0: ((clipped.x0 - x0) / side).clamp(0.0, 1.0),
            y0: ((clipped.y0 - y0) / side).clamp(0.0, 1.0),
            x1: ((clipped.x1 - x0) / side).clamp(0.0, 1.0),
            y1: ((clipped.y1 - y0) / side).clamp(0.0, 1.0),
        }
        .to_box();
        if !b.is_valid() {
            keep.push(None);
            continue;
        }
        keep.push(Some(instances.len()));
        instances.push(Instance {
            bbox: b,
            labels: inst.labels.clone(),
        });
    }
    if instances.is_empty() && !record.instances.is_empty() {
        return None;
    }
    let relations = record
        .relations
        .iter()
        .filter_map(|r| {
            Some(Relation {
                sub: keep[r.sub]?,
                obj: keep[r.obj]?,
                predicates: r.predicates.clone(),
            })
        })
        .collect();
    let size = record.image.size();
    Some(SceneRecord {
        image: record.image.resample(x0, y0, side, size),
        source: record.source.clone(),
        instances,
        relations,
        dataset: record.dataset.clone(),
    })
}

/// Random square crop covering at least `min_scale` of the image area.
/// Crops that drop every instance are redrawn; after ten failures the record
/// is returned unchanged.
pub fn random_crop<R: Rng + ?Sized>(record: &SceneRecord, rng: &mut R, min_scale: f64) -> SceneRecord {
    assert!(min_scale > 0.0 && min_scale <= 1.0, "min_scale must lie in (0, 1]");
    if min_scale >= 1.0 {
        return record.clone();
    }
    for _ in 0..CROP_TRIES {
        let side = rng.random_range(min_scale.sqrt()..=1.0);
        let x0 = rng.random_range(0.0..=1.0 - side);
        let y0 = rng.random_range(0.0..=1.0 - side);
        if let Some(r) = crop_window(record, x0, y0, side) {
            return r;
        }
    }
    record.clone()
}

/// Per-record augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_prob: f64,
    pub min_crop_scale: f64,
    pub mosaic: bool,
    pub mosaic_spec: MosaicSpec,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_prob: 0.5,
            min_crop_scale: 0.5,
            mosaic: true,
            mosaic_spec: MosaicSpec::default(),
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            crop_prob: 0.0,
            min_crop_scale: 1.0,
            mosaic: false,
            mosaic_spec: MosaicSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("flip_prob", self.flip_prob), ("crop_prob", self.crop_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augment.{k} = {v} outside [0, 1]")));
            }
        }
        if !(self.min_crop_scale > 0.0 && self.min_crop_scale <= 1.0) {
            return Err(Error::Config("augment.min_crop_scale must lie in (0, 1]".into()));
        }
        self.mosaic_spec.validate()
    }

    /// Flip then crop, each with its own probability.
    pub fn apply_single<R: Rng + ?Sized>(&self, record: &SceneRecord, table: &SwapTable, rng: &mut R) -> Result<SceneRecord> {
        let mut r = if rng.random::<f64>() < self.flip_prob {
            hflip(record, table)?
        } else {
            record.clone()
        };
        if rng.random::<f64>() < self.crop_prob {
            r = random_crop(&r, rng, self.min_crop_scale);
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene_with, Predicate, SceneConfig, VOCABULARY_A};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64) -> SceneRecord {
        let cfg = SceneConfig {
            image_size: 24,
            ..Default::default()
        };
        generate_scene_with(&mut ChaCha8Rng::seed_from_u64(seed), "A", &cfg).unwrap()
    }

    fn assert_integrity(r: &SceneRecord) {
        r.check_integrity().unwrap();
    }

    #[test]
    fn remap_examples() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(remap_box(&b, 2, 0, 0), BBox::new(0.25, 0.25, 0.1, 0.1));
        assert_eq!(remap_box(&b, 1, 0, 0), b);
        let m = remap_box(&b, 3, 2, 1);
        assert!((m.area() - b.area() / 9.0).abs() < 1e-15);
    }

    #[test]
    fn grid_frequencies() {
        let spec = MosaicSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = [0usize; 3];
        for _ in 0..10_000 {
            c[spec.sample_grid(&mut rng) - 1] += 1;
        }
        for (n, p) in c.iter().zip([0.4, 0.3, 0.3]) {
            assert!((*n as f64 / 10_000.0 - p).abs() < 0.02, "{c:?}");
        }
    }

    #[test]
    fn mosaic_of_one_is_identity_and_detection_tiles_add_no_relations() {
        let a = scene(1);
        assert_eq!(tile(std::slice::from_ref(&a), 1), a);
        let mut det = scene(2);
        det.relations.clear();
        let m = tile(&[a.clone(), det.clone(), a.clone(), det.clone()], 2);
        assert_eq!(m.instances.len(), 2 * (a.instances.len() + det.instances.len()));
        assert_eq!(m.relations.len(), 2 * a.relations.len());
        assert_integrity(&m);
    }

    #[test]
    fn exhausted_stream_is_an_error() {
        let spec = MosaicSpec {
            probabilities: [0.0, 1.0, 0.0],
        };
        let mut it = vec![scene(0)].into_iter();
        let err = sample_mosaic(&mut it, &mut ChaCha8Rng::seed_from_u64(0), &spec, None);
        assert!(matches!(err, Err(Error::StreamExhausted)));
    }

    #[test]
    fn over_budget_mosaic_falls_back_to_one_tile() {
        let spec = MosaicSpec {
            probabilities: [0.0, 0.0, 1.0],
        };
        let recs: Vec<_> = (0..9).map(scene).collect();
        let first = recs[0].clone();
        let mut it = recs.into_iter();
        let budget = Budget {
            instances: 6,
            relation_pairs: 100,
        };
        let out = sample_mosaic(&mut it, &mut ChaCha8Rng::seed_from_u64(0), &spec, Some(budget)).unwrap();
        assert_eq!(out, first);
    }

    #[test]
    fn flip_swaps_left_and_right() {
        let table = SwapTable::default();
        let mut found = false;
        for seed in 0..50 {
            let r = scene(seed);
            let f = hflip(&r, &table).unwrap();
            let back = hflip(&f, &table).unwrap();
            assert_eq!(back.image, r.image);
            assert_eq!(back.relations, r.relations);
            for (x, y) in back.instances.iter().zip(&r.instances) {
                assert!((x.bbox.cx - y.bbox.cx).abs() < 1e-12);
                assert_eq!((x.bbox.cy, x.bbox.w, x.bbox.h), (y.bbox.cy, y.bbox.w, y.bbox.h));
            }
            for (rel, frel) in r.relations.iter().zip(&f.relations) {
                let (s, o) = (&f.instances[frel.sub].bbox, &f.instances[frel.obj].bbox);
                for p in &frel.predicates {
                    let k = VOCABULARY_A.predicates.iter().position(|q| q == p).unwrap();
                    assert!(Predicate::ALL[k].holds(s, o), "{p} after flip");
                }
                if rel.predicates.iter().any(|p| p == "left of") {
                    assert!(frel.predicates.iter().any(|p| p == "right of"));
                    found = true;
                }
            }
        }
        assert!(found);
        let mut bad = SwapTable::default();
        bad.sensitive.push("above".into());
        let r = (0..50).map(scene).find(|r| r.relations.iter().any(|x| x.predicates.contains(&"above".to_string()))).unwrap();
        assert!(matches!(hflip(&r, &bad), Err(Error::MissingSwapPartner(_))));
    }

    #[test]
    fn crop_drops_outside_instances_and_their_relations() {
        let r = scene(3);
        assert_eq!(random_crop(&r, &mut ChaCha8Rng::seed_from_u64(0), 1.0), r);
        let mut rec = r.clone();
        rec.instances = vec![
            Instance {
                bbox: BBox::new(0.2, 0.2, 0.2, 0.2),
                labels: vec!["circle".into()],
            },
            Instance {
                bbox: BBox::new(0.8, 0.8, 0.2, 0.2),
                labels: vec!["square".into()],
            },
        ];
        rec.relations = vec![Relation {
            sub: 0,
            obj: 1,
            predicates: vec!["above".into()],
        }];
        let out = crop_window(&rec, 0.0, 0.0, 0.5).unwrap();
        assert_eq!(out.instances.len(), 1);
        assert!(out.relations.is_empty());
        assert!((out.instances[0].bbox.w - 0.4).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn crops_keep_boxes_in_frame(seed in any::<u64>()) {
            let r = scene(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            for _ in 0..30 {
                let c = random_crop(&r, &mut rng, 0.3);
                for i in &c.instances {
                    let k = i.bbox.corners();
                    prop_assert!(k.x0 >= -1e-12 && k.y0 >= -1e-12 && k.x1 <= 1.0 + 1e-12 && k.y1 <= 1.0 + 1e-12);
                    prop_assert!(i.bbox.is_valid());
                }
                assert_integrity(&c);
            }
        }

        #[test]
        fn remap_round_trips(cx in 0.0f64..1.0, cy in 0.0f64..1.0, w in 0.01f64..1.0, h in 0.01f64..1.0, g in 1usize..4, cell in 0usize..9) {
            let (row, col) = ((cell / 3) % g, (cell % 3) % g);
            let b = BBox::new(cx, cy, w, h);
            let back = unmap_box(&remap_box(&b, g, row, col), g, row, col);
            for (x, y) in back.as_array().iter().zip(b.as_array()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
