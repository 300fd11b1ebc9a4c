//! Synthetic relationship scenes, the dataset file format, and multi-dataset
//! record mixing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::image::Image;
use crate::language::{DatasetVocabulary, SynonymMap, Triplet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
        Shape::Ring,
    ];

    pub fn color(self) -> [f32; 3] {
        match self {
            Shape::Circle => [0.9, 0.2, 0.2],
            Shape::Square => [0.2, 0.8, 0.3],
            Shape::Triangle => [0.25, 0.35, 0.95],
            Shape::Diamond => [0.95, 0.85, 0.2],
            Shape::Cross => [0.85, 0.3, 0.85],
            Shape::Ring => [0.2, 0.85, 0.9],
        }
    }

    /// Whether the local box coordinate `(lx, ly)` ∈ [0,1]² is covered.
    fn covers(self, lx: f64, ly: f64) -> bool {
        let (dx, dy) = (lx - 0.5, ly - 0.5);
        match self {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= 0.25,
            Shape::Ring => (0.09..=0.25).contains(&(dx * dx + dy * dy)),
            Shape::Triangle => dx.abs() <= 0.5 * ly,
            Shape::Diamond => dx.abs() + dy.abs() <= 0.5,
            Shape::Cross => dx.abs() <= 1.0 / 6.0 || dy.abs() <= 1.0 / 6.0,
        }
    }
}

/// Canonical spatial predicates, in vocabulary order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Predicate {
    Above,
    Below,
    LeftOf,
    RightOf,
    Touch,
    Inside,
}

/// Centre-ordering margin for the directional predicates.
pub const MARGIN: f64 = 0.05;

impl Predicate {
    pub const ALL: [Predicate; 6] = [
        Predicate::Above,
        Predicate::Below,
        Predicate::LeftOf,
        Predicate::RightOf,
        Predicate::Touch,
        Predicate::Inside,
    ];

    /// Geometric truth of `subject <predicate> object` on stored boxes.
    /// Image y grows downwards.
    pub fn holds(self, s: &BBox, o: &BBox) -> bool {
        match self {
            Predicate::Above => s.cy + MARGIN < o.cy,
            Predicate::Below => s.cy > o.cy + MARGIN,
            Predicate::LeftOf => s.cx + MARGIN < o.cx,
            Predicate::RightOf => s.cx > o.cx + MARGIN,
            Predicate::Touch => {
                s.corners().intersect(&o.corners()).area() > 0.0 && !s.inside(o) && !o.inside(s)
            }
            Predicate::Inside => s.inside(o),
        }
    }
}

/// A built-in synthetic vocabulary: label strings for every shape and
/// predicate.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticVocabulary {
    pub id: &'static str,
    pub objects: [&'static str; 6],
    pub predicates: [&'static str; 6],
}

pub const VOCABULARY_A: SyntheticVocabulary = SyntheticVocabulary {
    id: "A",
    objects: ["circle", "square", "triangle", "diamond", "cross", "ring"],
    predicates: ["above", "below", "left of", "right of", "touch", "inside"],
};

/// Synonyms of vocabulary A, related to it through the bundled synonym map.
pub const VOCABULARY_B: SyntheticVocabulary = SyntheticVocabulary {
    id: "B",
    objects: ["disk", "box", "wedge", "rhombus", "plus", "hoop"],
    predicates: ["over", "under", "leftward of", "rightward of", "contact", "within"],
};

pub fn synthetic_vocabulary(id: &str) -> Result<SyntheticVocabulary> {
    match id {
        "A" => Ok(VOCABULARY_A),
        "B" => Ok(VOCABULARY_B),
        other => Err(Error::UnknownVocabulary(other.to_string())),
    }
}

impl SyntheticVocabulary {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            objects: self.objects.iter().map(|s| s.to_string()).collect(),
            predicates: self.predicates.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Keys of every triplet the generator can emit: subject shape before
    /// object shape, any predicate.
    pub fn triplet_keys(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, s) in self.objects.iter().enumerate() {
            for o in &self.objects[i + 1..] {
                for p in &self.predicates {
                    out.push(Triplet::new(*s, *p, *o).key());
                }
            }
        }
        out.sort();
        out
    }
}

/// Shape drawn for an object label of either built-in vocabulary.
pub fn shape_of(label: &str) -> Option<Shape> {
    let canon = SynonymMap::bundled().canonical(label);
    VOCABULARY_A
        .objects
        .iter()
        .position(|o| *o == canon)
        .map(|i| Shape::ALL[i])
}

/// Object and predicate strings of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub objects: Vec<String>,
    pub predicates: Vec<String>,
}

/// Where a record's pixels come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Synthetic { synthetic_seed: u64 },
    Pixels { pixels_path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub sub: usize,
    pub obj: usize,
    pub predicates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub image: Image,
    pub source: ImageSource,
    pub instances: Vec<Instance>,
    pub relations: Vec<Relation>,
    pub dataset: String,
}

impl SceneRecord {
    /// Relation triplets using each instance's first label.
    pub fn triplets(&self) -> Vec<(usize, usize, Triplet)> {
        let mut out = Vec::new();
        for r in &self.relations {
            for p in &r.predicates {
                out.push((
                    r.sub,
                    r.obj,
                    Triplet::new(&self.instances[r.sub].labels[0], p, &self.instances[r.obj].labels[0]),
                ));
            }
        }
        out
    }

    /// Checks referential integrity and box validity.
    pub fn check_integrity(&self) -> Result<()> {
        let n = self.instances.len();
        for (i, inst) in self.instances.iter().enumerate() {
            if !inst.bbox.is_valid() {
                return Err(Error::Schema {
                    record: 0,
                    field: format!("instances[{i}].box"),
                    reason: format!("invalid box {:?}", inst.bbox.as_array()),
                });
            }
        }
        for (j, r) in self.relations.iter().enumerate() {
            for idx in [r.sub, r.obj] {
                if idx >= n {
                    return Err(Error::DanglingRelation {
                        record: 0,
                        relation: j,
                        instance: idx,
                        count: n,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Scene layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_extent: f64,
    pub max_extent: f64,
    /// Placements overlapping an earlier object by more than this IoU are
    /// rejected.
    pub max_iou: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 2,
            max_objects: 6,
            min_extent: 0.18,
            max_extent: 0.36,
            max_iou: 0.4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.image_size == 0 {
            return bad("image_size must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > Shape::ALL.len() {
            return bad("need 1 <= min_objects <= max_objects <= 6");
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 1.0) {
            return bad("need 0 < min_extent <= max_extent <= 1");
        }
        Ok(())
    }
}

const BACKGROUND_NOISE: f32 = 0.03;

/// Rasterizes labelled boxes over a seeded background. Larger objects are
/// drawn first so contained objects stay visible.
pub fn render(instances: &[Instance], seed: u64, size: usize) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level: f32 = rng.random_range(0.05..0.25);
    let mut img = Image::filled(size, [level; 3]);
    for y in 0..size {
        for x in 0..size {
            let mut p = img.pixel(y, x);
            for c in &mut p {
                *c = (*c + rng.random_range(-BACKGROUND_NOISE..BACKGROUND_NOISE)).clamp(0.0, 1.0);
            }
            img.set_pixel(y, x, p);
        }
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .bbox
            .area()
            .total_cmp(&instances[a].bbox.area())
            .then(a.cmp(&b))
    });
    let s = size as f64;
    for i in order {
        let inst = &instances[i];
        let label = inst.labels.first().map(String::as_str).unwrap_or("");
        let shape = shape_of(label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        let c = inst.bbox.corners();
        let color = shape.color();
        let y0 = ((c.y0 * s).floor().max(0.0)) as usize;
        let y1 = ((c.y1 * s).ceil().min(s)) as usize;
        let x0 = ((c.x0 * s).floor().max(0.0)) as usize;
        let x1 = ((c.x1 * s).ceil().min(s)) as usize;
        for y in y0..y1 {
            let v = (y as f64 + 0.5) / s;
            let ly = (v - c.y0) / inst.bbox.h;
            if !(0.0..=1.0).contains(&ly) {
                continue;
            }
            for x in x0..x1 {
                let u = (x as f64 + 0.5) / s;
                let lx = (u - c.x0) / inst.bbox.w;
                if (0.0..=1.0).contains(&lx) && shape.covers(lx, ly) {
                    img.set_pixel(y, x, color);
                }
            }
        }
    }
    Ok(img)
}

/// Relations among `boxes` for shapes `shapes`, one per ordered pair whose
/// subject shape precedes the object shape in vocabulary order.
fn scene_relations(shapes: &[Shape], boxes: &[BBox], vocab: &SyntheticVocabulary) -> Vec<Relation> {
    let mut out = Vec::new();
    for i in 0..boxes.len() {
        for j in 0..boxes.len() {
            if i == j || shapes[i] >= shapes[j] {
                continue;
            }
            let preds: Vec<String> = Predicate::ALL
                .iter()
                .enumerate()
                .filter(|(_, p)| p.holds(&boxes[i], &boxes[j]))
                .map(|(k, _)| vocab.predicates[k].to_string())
                .collect();
            if !preds.is_empty() {
                out.push(Relation {
                    sub: i,
                    obj: j,
                    predicates: preds,
                });
            }
        }
    }
    out
}

/// Samples one scene: distinct shapes at non-overlapping random boxes, with
/// every geometric relation between them annotated.
pub fn generate_scene_with<R: Rng + ?Sized>(
    rng: &mut R,
    vocabulary: &str,
    cfg: &SceneConfig,
) -> Result<SceneRecord> {
    let vocab = synthetic_vocabulary(vocabulary)?;
    cfg.validate()?;
    let k = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut pool: Vec<usize> = (0..Shape::ALL.len()).collect();
    let mut shapes = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.random_range(0..pool.len());
        shapes.push(Shape::ALL[pool.remove(i)]);
    }
    let mut boxes: Vec<BBox> = Vec::with_capacity(k);
    let mut placed = Vec::with_capacity(k);
    for &shape in &shapes {
        for _ in 0..100 {
            let w = rng.random_range(cfg.min_extent..=cfg.max_extent);
            let h = rng.random_range(cfg.min_extent..=cfg.max_extent);
            let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
            let b = BBox::new(cx, cy, w, h);
            if boxes.iter().all(|o| iou(o, &b) <= cfg.max_iou) {
                boxes.push(b);
                placed.push(shape);
                break;
            }
        }
    }
    let seed = rng.random::<u64>();
    let relations = scene_relations(&placed, &boxes, &vocab);
    let instances: Vec<Instance> = placed
        .iter()
        .zip(&boxes)
        .map(|(s, b)| Instance {
            bbox: *b,
            labels: vec![vocab.objects[*s as usize].to_string()],
        })
        .collect();
    let image = render(&instances, seed, cfg.image_size)?;
    Ok(SceneRecord {
        image,
        source: ImageSource::Synthetic { synthetic_seed: seed },
        instances,
        relations,
        dataset: vocab.id.to_string(),
    })
}

pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, vocabulary: &str) -> Result<SceneRecord> {
    generate_scene_with(rng, vocabulary, &SceneConfig::default())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub vocabulary: Vocabulary,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    /// `n` scenes from one seeded stream. Datasets generated with the same
    /// seed in vocabularies A and B are label-isomorphic.
    pub fn generate(id: &str, vocabulary: &str, n: usize, seed: u64, cfg: &SceneConfig) -> Result<Self> {
        let vocab = synthetic_vocabulary(vocabulary)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|_| {
                let mut r = generate_scene_with(&mut rng, vocabulary, cfg)?;
                r.dataset = id.to_string();
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: id.to_string(),
            vocabulary: vocab.vocabulary(),
            records,
        })
    }

    /// Label vocabulary with the triplets that occur in the records.
    pub fn label_vocabulary(&self) -> DatasetVocabulary {
        let mut triplets = BTreeSet::new();
        for r in &self.records {
            for (_, _, t) in r.triplets() {
                triplets.insert(t);
            }
        }
        DatasetVocabulary {
            id: self.id.clone(),
            objects: self.vocabulary.objects.clone(),
            triplets: triplets.into_iter().collect(),
        }
    }

    /// Per-instance object label counts.
    pub fn object_frequency(&self) -> BTreeMap<String, u64> {
        let mut f = BTreeMap::new();
        for r in &self.records {
            for i in &r.instances {
                for l in &i.labels {
                    *f.entry(l.clone()).or_insert(0) += 1;
                }
            }
        }
        f
    }

    /// Relation triplet counts keyed by `subject|predicate|object`.
    pub fn triplet_frequency(&self) -> BTreeMap<String, u64> {
        let mut f = BTreeMap::new();
        for r in &self.records {
            for (_, _, t) in r.triplets() {
                *f.entry(t.key()).or_insert(0) += 1;
            }
        }
        f
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct FileRecord<'a> {
            image: &'a ImageSource,
            instances: &'a [Instance],
            relations: &'a [Relation],
        }
        #[derive(Serialize)]
        struct File<'a> {
            vocabulary: &'a Vocabulary,
            records: Vec<FileRecord<'a>>,
        }
        let file = File {
            vocabulary: &self.vocabulary,
            records: self
                .records
                .iter()
                .map(|r| FileRecord {
                    image: &r.source,
                    instances: &r.instances,
                    relations: &r.relations,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Parses and validates a dataset file. Synthetic images are rendered at
    /// `image_size`; pixel files are resolved relative to `base_dir` and
    /// resampled to `image_size` when needed.
    pub fn from_json(id: &str, text: &str, image_size: usize, base_dir: &Path) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        parse_dataset(id, &root, image_size, base_dir)
    }

    pub fn load(path: &Path, image_size: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
        Self::from_json(&id, &text, image_size, &base)
    }
}

fn schema(record: usize, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Schema {
        record,
        field: field.into(),
        reason: reason.into(),
    }
}

fn string_list(v: Option<&Value>, record: usize, field: &str) -> Result<Vec<String>> {
    let arr = v
        .and_then(Value::as_array)
        .ok_or_else(|| schema(record, field, "expected an array of strings"))?;
    arr.iter()
        .enumerate()
        .map(|(i, s)| {
            s.as_str()
                .map(str::to_string)
                .ok_or_else(|| schema(record, format!("{field}[{i}]"), "expected a string"))
        })
        .collect()
}

fn object_with<'a>(v: &'a Value, keys: &[&str], record: usize, field: &str) -> Result<&'a serde_json::Map<String, Value>> {
    let obj = v
        .as_object()
        .ok_or_else(|| schema(record, field, "expected an object"))?;
    for k in obj.keys() {
        if !keys.contains(&k.as_str()) {
            return Err(schema(record, format!("{field}.{k}"), "unknown field"));
        }
    }
    Ok(obj)
}

fn parse_dataset(id: &str, root: &Value, image_size: usize, base_dir: &Path) -> Result<Dataset> {
    // Record index reported for top-level problems.
    const TOP: usize = usize::MAX;
    let top = object_with(root, &["vocabulary", "records"], TOP, "$")?;
    let voc = top
        .get("vocabulary")
        .ok_or_else(|| schema(TOP, "vocabulary", "missing"))?;
    let voc = object_with(voc, &["objects", "predicates"], TOP, "vocabulary")?;
    let vocabulary = Vocabulary {
        objects: string_list(voc.get("objects"), TOP, "vocabulary.objects")?,
        predicates: string_list(voc.get("predicates"), TOP, "vocabulary.predicates")?,
    };
    if vocabulary.objects.is_empty() {
        return Err(schema(TOP, "vocabulary.objects", "must not be empty"));
    }
    let objects: BTreeSet<&str> = vocabulary.objects.iter().map(String::as_str).collect();
    let predicates: BTreeSet<&str> = vocabulary.predicates.iter().map(String::as_str).collect();
    let recs = top
        .get("records")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(TOP, "records", "expected an array"))?;

    let mut records = Vec::with_capacity(recs.len());
    for (ri, rv) in recs.iter().enumerate() {
        let r = object_with(rv, &["image", "instances", "relations"], ri, "record")?;
        let image_v = r.get("image").ok_or_else(|| schema(ri, "image", "missing"))?;
        let image_o = object_with(image_v, &["synthetic_seed", "pixels_path"], ri, "image")?;
        let source = match (image_o.get("synthetic_seed"), image_o.get("pixels_path")) {
            (Some(s), None) => ImageSource::Synthetic {
                synthetic_seed: s
                    .as_u64()
                    .ok_or_else(|| schema(ri, "image.synthetic_seed", "expected a non-negative integer"))?,
            },
            (None, Some(p)) => ImageSource::Pixels {
                pixels_path: p
                    .as_str()
                    .ok_or_else(|| schema(ri, "image.pixels_path", "expected a string"))?
                    .to_string(),
            },
            _ => {
                return Err(schema(
                    ri,
                    "image",
                    "expected exactly one of `synthetic_seed` or `pixels_path`",
                ))
            }
        };

        let inst_v = r
            .get("instances")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(ri, "instances", "expected an array"))?;
        let mut instances = Vec::with_capacity(inst_v.len());
        for (ii, iv) in inst_v.iter().enumerate() {
            let field = format!("instances[{ii}]");
            let io = object_with(iv, &["box", "labels"], ri, &field)?;
            let coords = io
                .get("box")
                .and_then(Value::as_array)
                .filter(|a| a.len() == 4)
                .ok_or_else(|| schema(ri, format!("{field}.box"), "expected [cx, cy, w, h]"))?;
            let mut b = [0.0; 4];
            for (k, c) in coords.iter().enumerate() {
                b[k] = c
                    .as_f64()
                    .ok_or_else(|| schema(ri, format!("{field}.box[{k}]"), "expected a number"))?;
            }
            let bbox = BBox::from(b);
            if !bbox.is_valid() {
                return Err(schema(ri, format!("{field}.box"), format!("invalid box {b:?}")));
            }
            let labels = string_list(io.get("labels"), ri, &format!("{field}.labels"))?;
            if labels.is_empty() {
                return Err(schema(ri, format!("{field}.labels"), "must not be empty"));
            }
            if let Some(l) = labels.iter().find(|l| !objects.contains(l.as_str())) {
                return Err(schema(ri, format!("{field}.labels"), format!("`{l}` is not in the vocabulary")));
            }
            instances.push(Instance { bbox, labels });
        }

        let rel_v = r
            .get("relations")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(ri, "relations", "expected an array"))?;
        let mut relations = Vec::with_capacity(rel_v.len());
        for (j, jv) in rel_v.iter().enumerate() {
            let field = format!("relations[{j}]");
            let jo = object_with(jv, &["sub", "obj", "predicates"], ri, &field)?;
            let index = |k: &str| -> Result<usize> {
                let v = jo
                    .get(k)
                    .and_then(Value::as_u64)
                    .ok_or_else(|| schema(ri, format!("{field}.{k}"), "expected a non-negative integer"))?;
                let v = v as usize;
                if v >= instances.len() {
                    return Err(Error::DanglingRelation {
                        record: ri,
                        relation: j,
                        instance: v,
                        count: instances.len(),
                    });
                }
                Ok(v)
            };
            let (sub, obj) = (index("sub")?, index("obj")?);
            let preds = string_list(jo.get("predicates"), ri, &format!("{field}.predicates"))?;
            if preds.is_empty() {
                return Err(schema(ri, format!("{field}.predicates"), "must not be empty"));
            }
            if let Some(p) = preds.iter().find(|p| !predicates.contains(p.as_str())) {
                return Err(schema(ri, format!("{field}.predicates"), format!("`{p}` is not in the vocabulary")));
            }
            relations.push(Relation {
                sub,
                obj,
                predicates: preds,
            });
        }

        let image = match &source {
            ImageSource::Synthetic { synthetic_seed } => render(&instances, *synthetic_seed, image_size)
                .map_err(|e| schema(ri, "instances", e.to_string()))?,
            ImageSource::Pixels { pixels_path } => {
                let bytes = std::fs::read(base_dir.join(pixels_path))?;
                let img = Image::from_raw_bytes(&bytes).map_err(|e| schema(ri, "image.pixels_path", e))?;
                if img.size() == image_size {
                    img
                } else {
                    img.resample(0.0, 0.0, 1.0, image_size)
                }
            }
        };
        records.push(SceneRecord {
            image,
            source,
            instances,
            relations,
            dataset: id.to_string(),
        });
    }
    Ok(Dataset {
        id: id.to_string(),
        vocabulary,
        records,
    })
}

/// Sampling probability per dataset id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixSpec(pub BTreeMap<String, f64>);

impl MixSpec {
    pub fn uniform<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let ids: Vec<&str> = ids.into_iter().collect();
        let p = 1.0 / ids.len() as f64;
        Self(ids.into_iter().map(|i| (i.to_string(), p)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("mix spec is empty".into()));
        }
        if let Some((k, v)) = self.0.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Config(format!("mix probability for `{k}` is {v}")));
        }
        let s: f64 = self.0.values().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix probabilities sum to {s}, expected 1")));
        }
        Ok(())
    }
}

/// Endless record stream: a dataset is drawn i.i.d. from the mix for every
/// record, and each dataset is walked in reshuffled epochs.
pub struct MixStream<'a> {
    datasets: Vec<&'a Dataset>,
    dist: WeightedIndex<f64>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

pub fn mix_stream<'a>(datasets: &'a [Dataset], spec: &MixSpec, seed: u64) -> Result<MixStream<'a>> {
    spec.validate()?;
    let ids: BTreeSet<&str> = datasets.iter().map(|d| d.id.as_str()).collect();
    let keys: BTreeSet<&str> = spec.0.keys().map(String::as_str).collect();
    if ids != keys || ids.len() != datasets.len() {
        return Err(Error::Config(format!(
            "mix spec covers {keys:?} but the datasets are {:?}",
            datasets.iter().map(|d| d.id.as_str()).collect::<Vec<_>>()
        )));
    }
    let mut weights = Vec::with_capacity(datasets.len());
    for d in datasets {
        let p = spec.0[&d.id];
        if p > 0.0 && d.records.is_empty() {
            return Err(Error::Config(format!("dataset `{}` is empty", d.id)));
        }
        weights.push(p);
    }
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("mix spec: {e}")))?;
    Ok(MixStream {
        datasets: datasets.iter().collect(),
        dist,
        orders: vec![Vec::new(); datasets.len()],
        cursors: vec![0; datasets.len()],
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl<'a> MixStream<'a> {
    /// Index of the dataset and record drawn next.
    pub fn next_index(&mut self) -> (usize, usize) {
        let d = self.dist.sample(&mut self.rng);
        if self.cursors[d] >= self.orders[d].len() {
            let n = self.datasets[d].records.len();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, self.rng.random_range(0..=i));
            }
            self.orders[d] = order;
            self.cursors[d] = 0;
        }
        let r = self.orders[d][self.cursors[d]];
        self.cursors[d] += 1;
        (d, r)
    }
}

impl<'a> Iterator for MixStream<'a> {
    type Item = &'a SceneRecord;

    fn next(&mut self) -> Option<Self::Item> {
        let (d, r) = self.next_index();
        Some(&self.datasets[d].records[r])
    }
}
