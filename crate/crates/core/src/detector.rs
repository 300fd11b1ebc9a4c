//! ViT-style image encoder with per-token detection heads.
//!
//! Every output token is one candidate instance: a linear head projects it to
//! a classification embedding compared against text queries by cosine
//! similarity, and a two-layer FFN predicts a box whose default position is
//! the centre of the token's patch.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::nn::{self, Activation};
use crate::params::{normal, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub droplayer_rate: f64,
    pub temperature_init: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            droplayer_rate: 0.0,
            temperature_init: 0.07,
        }
    }
}

/// Clamp range for learnable temperatures.
pub const TEMPERATURE_RANGE: (f64, f64) = (5e-3, 1.0);

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Config(format!("detector: {reason}")));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if !(0.0..1.0).contains(&self.droplayer_rate) {
            return bad(format!("droplayer_rate {} outside [0, 1)", self.droplayer_rate));
        }
        if !(self.temperature_init > 0.0) {
            return bad("temperature_init must be positive".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count N.
    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    cfg: &DetectorConfig,
    text_dim: usize,
    rng: &mut R,
    params: &mut ParamSet<T>,
) {
    let d = cfg.width;
    let n = cfg.num_tokens();
    nn::init_linear(params, rng, "detector.patch", cfg.patch_dim(), d);
    params.insert("detector.pos", normal(rng, n, d, 0.02));
    params.insert("detector.cls", normal(rng, 1, d, 0.02));
    params.insert("detector.cls_pos", normal(rng, 1, d, 0.02));
    for l in 0..cfg.depth {
        let p = format!("detector.block{l}");
        nn::init_layer_norm(params, &format!("{p}.ln1"), d);
        nn::init_linear(params, rng, &format!("{p}.attn.qkv"), d, 3 * d);
        nn::init_linear(params, rng, &format!("{p}.attn.out"), d, d);
        nn::init_layer_norm(params, &format!("{p}.ln2"), d);
        nn::init_linear(params, rng, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d);
        nn::init_linear(params, rng, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d);
    }
    nn::init_layer_norm(params, "detector.ln_out", d);
    nn::init_linear(params, rng, "detector.cls_head", d, text_dim);
    nn::init_linear(params, rng, "detector.box.fc1", d, d);
    nn::init_linear(params, rng, "detector.box.fc2", d, 4);
    params.insert("detector.tau", Matrix::scalar(T::c(cfg.temperature_init)));
}

/// Flattens an image into one row per patch (row-major patch order, each
/// patch row-major over pixels with interleaved RGB).
pub fn patchify<T: Scalar>(image: &Image, cfg: &DetectorConfig) -> Result<Matrix<T>> {
    if image.size() != cfg.image_size {
        return Err(Error::ImageSize {
            got: image.size(),
            expected: cfg.image_size,
        });
    }
    let g = cfg.grid_side();
    let p = cfg.patch_size;
    let mut out = Matrix::zeros(g * g, cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    let px = image.pixel(gy * p + y, gx * p + x);
                    for c in px {
                        row[k] = T::c(c as f64);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Normalized centre of patch `token` on a `grid × grid` layout.
pub fn patch_center(token: usize, grid: usize) -> (f64, f64) {
    let (row, col) = (token / grid, token % grid);
    ((col as f64 + 0.5) / grid as f64, (row as f64 + 0.5) / grid as f64)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Pre-activation offsets that centre each token's box on its patch with a
/// one-patch extent.
pub fn box_bias<T: Scalar>(cfg: &DetectorConfig) -> Matrix<T> {
    let g = cfg.grid_side();
    let size = logit(1.0 / g as f64);
    let mut m = Matrix::zeros(g * g, 4);
    for i in 0..g * g {
        let (px, py) = patch_center(i, g);
        m[(i, 0)] = T::c(logit(px));
        m[(i, 1)] = T::c(logit(py));
        m[(i, 2)] = T::c(size);
        m[(i, 3)] = T::c(size);
    }
    m
}

/// Tape handles for one detector forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    /// N×D instance embeddings.
    pub instances: Var,
    /// N×4 boxes (cx, cy, w, h).
    pub boxes: Var,
    /// N×D_t classification embeddings.
    pub class_embeddings: Var,
    /// N×K logits; present when text queries were supplied.
    pub class_logits: Option<Var>,
    pub tau: Var,
}

/// Patch embedding, transformer stack, class-token merge and output norm.
/// `drop_rng` enables droplayer (training only).
pub fn encode_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &DetectorConfig,
    patches: Matrix<T>,
    mut drop_rng: Option<&mut dyn RngCore>,
) -> Var {
    let x = tape.constant(patches);
    let x = nn::linear(tape, b, "detector.patch", x);
    let pos = b.get("detector.pos");
    let x = tape.add(x, pos);
    let cls = {
        let c = b.get("detector.cls");
        let cp = b.get("detector.cls_pos");
        tape.add(c, cp)
    };
    let mut h = tape.concat_rows(&[cls, x]);
    let rate = cfg.droplayer_rate;
    for l in 0..cfg.depth {
        let keep_scale = match drop_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                if rng.random::<f64>() < rate {
                    continue;
                }
                T::c(1.0 / (1.0 - rate))
            }
            _ => T::one(),
        };
        let p = format!("detector.block{l}");
        let a = nn::layer_norm(tape, b, &format!("{p}.ln1"), h);
        let qkv = nn::linear(tape, b, &format!("{p}.attn.qkv"), a);
        let d = cfg.width;
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let att = nn::multi_head_attention(tape, q, k, v, cfg.heads);
        let mut att = nn::linear(tape, b, &format!("{p}.attn.out"), att);
        if keep_scale != T::one() {
            att = tape.scale(att, keep_scale);
        }
        h = tape.add(h, att);
        let m = nn::layer_norm(tape, b, &format!("{p}.ln2"), h);
        let mut m = nn::mlp(tape, b, &format!("{p}.mlp"), m, Activation::Gelu);
        if keep_scale != T::one() {
            m = tape.scale(m, keep_scale);
        }
        h = tape.add(h, m);
    }
    let n = cfg.num_tokens();
    let cls_out = tape.slice_rows(h, 0, 1);
    let tokens = tape.slice_rows(h, 1, n);
    let merged = tape.mul_row(tokens, cls_out);
    nn::layer_norm(tape, b, "detector.ln_out", merged)
}

/// Box head: FFN offsets plus the patch-centred bias, squashed by a sigmoid.
pub fn box_head<T: Scalar>(tape: &mut Tape<T>, b: &Bound, cfg: &DetectorConfig, z: Var) -> Var {
    let raw = nn::mlp(tape, b, "detector.box", z, Activation::Gelu);
    let bias = tape.constant(box_bias(cfg));
    let pre = tape.add(raw, bias);
    tape.sigmoid(pre)
}

/// Full detector forward. `text` holds unit-norm K×D_t query rows (already
/// passed through the text tower) or `None` to skip classification.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &DetectorConfig,
    image: &Image,
    text: Option<Var>,
    drop_rng: Option<&mut dyn RngCore>,
) -> Result<DetectorVars> {
    let patches = patchify(image, cfg)?;
    let z = encode_tokens(tape, b, cfg, patches, drop_rng);
    let boxes = box_head(tape, b, cfg, z);
    let class_embeddings = nn::linear(tape, b, "detector.cls_head", z);
    let tau = b.get("detector.tau");
    let class_logits = text.map(|t| nn::cosine_logits(tape, class_embeddings, t, tau));
    Ok(DetectorVars {
        instances: z,
        boxes,
        class_embeddings,
        class_logits,
        tau,
    })
}

/// Converts predicted box rows to [`BBox`], nudging saturated extents so the
/// result is always a valid box.
pub fn boxes_from_matrix<T: Scalar>(m: &Matrix<T>) -> Vec<BBox> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            BBox::new(
                r[0].f64().clamp(0.0, 1.0),
                r[1].f64().clamp(0.0, 1.0),
                r[2].f64().clamp(1e-6, 1.0),
                r[3].f64().clamp(1e-6, 1.0),
            )
        })
        .collect()
}

/// Materialized detector result.
#[derive(Clone, Debug)]
pub struct DetectorOutput<T: Scalar> {
    pub instance_embeddings: Matrix<T>,
    pub boxes: Vec<BBox>,
    pub class_embeddings: Matrix<T>,
    pub class_logits: Matrix<T>,
    pub temperature: T,
}

impl<T: Scalar> DetectorOutput<T> {
    pub fn from_vars(tape: &Tape<T>, v: &DetectorVars) -> Self {
        Self {
            instance_embeddings: tape.value(v.instances).clone(),
            boxes: boxes_from_matrix(tape.value(v.boxes)),
            class_embeddings: tape.value(v.class_embeddings).clone(),
            class_logits: v
                .class_logits
                .map(|l| tape.value(l).clone())
                .unwrap_or_else(|| Matrix::zeros(0, 0)),
            temperature: tape.value(v.tau).item(),
        }
    }
}

/// Linear classification projection of a single instance embedding.
pub fn class_embedding<T: Scalar>(params: &ParamSet<T>, z: &[T]) -> Vec<T> {
    let w = params.get("detector.cls_head.w").expect("cls_head.w");
    let bias = params.get("detector.cls_head.b").expect("cls_head.b");
    let zm = Matrix::from_vec(1, z.len(), z.to_vec());
    let mut out = zm.matmul(w);
    out.add_assign(bias);
    out.into_vec()
}

/// Box predicted from a single instance embedding sitting at `token`.
pub fn predict_box<T: Scalar>(params: &ParamSet<T>, cfg: &DetectorConfig, z: &[T], token: usize) -> BBox {
    let lin = |x: &Matrix<T>, name: &str| {
        let mut y = x.matmul(params.get(&format!("{name}.w")).expect("weight"));
        y.add_assign(params.get(&format!("{name}.b")).expect("bias"));
        y
    };
    let zm = Matrix::from_vec(1, z.len(), z.to_vec());
    let h = lin(&zm, "detector.box.fc1");
    let h = {
        let mut t: Tape<T> = Tape::new();
        let v = t.constant(h);
        let g = t.gelu(v);
        t.value(g).clone()
    };
    let raw = lin(&h, "detector.box.fc2");
    let bias = box_bias::<T>(cfg);
    let vals: Vec<T> = (0..4).map(|k| sigmoid(raw[(0, k)] + bias[(token, k)])).collect();
    boxes_from_matrix(&Matrix::from_vec(1, 4, vals))[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DetectorConfig {
        DetectorConfig {
            image_size: 32,
            patch_size: 8,
            depth: 2,
            width: 16,
            heads: 2,
            ..Default::default()
        }
    }

    fn params(cfg: &DetectorConfig, seed: u64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        init_params(cfg, cfg.width, &mut ChaCha8Rng::seed_from_u64(seed), &mut p);
        p
    }

    fn tokens(cfg: &DetectorConfig, p: &ParamSet<f64>, img: &Image, rng: Option<&mut dyn RngCore>) -> Matrix<f64> {
        let mut t = Tape::new();
        let b = t.bind(p, |_| false);
        let z = encode_tokens(&mut t, &b, cfg, patchify(img, cfg).unwrap(), rng);
        t.value(z).clone()
    }

    #[test]
    fn token_count() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.num_tokens(), 16);
        let p = params(&cfg, 0);
        let z = tokens(&cfg, &p, &Image::filled(64, [0.5; 3]), None);
        assert_eq!(z.shape(), (16, 64));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let cfg = small();
        assert!(matches!(
            patchify::<f64>(&Image::filled(30, [0.0; 3]), &cfg),
            Err(Error::ImageSize { .. })
        ));
    }

    #[test]
    fn zero_droplayer_is_deterministic_in_training_mode() {
        let cfg = small();
        let p = params(&cfg, 1);
        let img = Image::filled(32, [0.2, 0.4, 0.6]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = tokens(&cfg, &p, &img, Some(&mut rng));
        let b = tokens(&cfg, &p, &img, None);
        assert_eq!(a, b);
    }

    #[test]
    fn droplayer_changes_training_output() {
        let mut cfg = small();
        cfg.droplayer_rate = 0.5;
        let p = params(&cfg, 1);
        let img = Image::filled(32, [0.2, 0.4, 0.6]);
        let eval = tokens(&cfg, &p, &img, None);
        let differs = (0..10).any(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            tokens(&cfg, &p, &img, Some(&mut rng)) != eval
        });
        assert!(differs);
    }

    #[test]
    fn zero_and_one_images_differ() {
        let cfg = small();
        let p = params(&cfg, 2);
        let a = tokens(&cfg, &p, &Image::filled(32, [0.0; 3]), None);
        let b = tokens(&cfg, &p, &Image::filled(32, [1.0; 3]), None);
        assert_ne!(a, b);
    }

    #[test]
    fn zero_head_boxes_sit_on_patch_centres() {
        let cfg = DetectorConfig::default();
        let mut p = params(&cfg, 3);
        for name in ["detector.box.fc2.w", "detector.box.fc2.b"] {
            let m = p.get_mut(name).unwrap();
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let z = vec![0.3; cfg.width];
        let b0 = predict_box(&p, &cfg, &z, 0);
        for (got, want) in b0.as_array().iter().zip([0.125, 0.125, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-12);
        }
        let b10 = predict_box(&p, &cfg, &z, 2 * 4 + 2);
        for (got, want) in b10.as_array().iter().zip([0.625, 0.625, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-12);
        }
        for token in 0..cfg.num_tokens() {
            let (px, py) = patch_center(token, 4);
            let b = predict_box(&p, &cfg, &z, token);
            assert!((b.cx - px).abs() < 1e-12 && (b.cy - py).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_offsets_stay_in_range() {
        let cfg = DetectorConfig::default();
        let mut p = params(&cfg, 4);
        let mut bias = Matrix::zeros(1, 4);
        bias[(0, 0)] = 1e6;
        bias[(0, 2)] = -1e6;
        *p.get_mut("detector.box.fc2.b").unwrap() = bias;
        let b = predict_box(&p, &cfg, &vec![0.0; cfg.width], 5);
        assert!((b.cx - 1.0).abs() < 1e-12);
        assert!(b.is_valid());
    }

    #[test]
    fn class_embedding_is_affine() {
        let cfg = DetectorConfig {
            width: 4,
            heads: 1,
            ..DetectorConfig::default()
        };
        let mut p = params(&cfg, 5);
        *p.get_mut("detector.cls_head.w").unwrap() = Matrix::zeros(4, 4);
        *p.get_mut("detector.cls_head.b").unwrap() = Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(class_embedding(&p, &[9.0, -1.0, 0.5, 2.0]), vec![1.0, 2.0, 3.0, 4.0]);
        *p.get_mut("detector.cls_head.w").unwrap() = Matrix::identity(4);
        *p.get_mut("detector.cls_head.b").unwrap() = Matrix::zeros(1, 4);
        assert_eq!(class_embedding(&p, &[9.0, -1.0, 0.5, 2.0]), vec![9.0, -1.0, 0.5, 2.0]);
    }
}
