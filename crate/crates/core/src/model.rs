//! The full model: text tower, detector and relation decoder sharing one
//! parameter set.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Tape, Var};
use crate::detector::{self, DetectorConfig, DetectorVars};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::language::{SynonymMap, TextEncoder};
use crate::params::ParamSet;
use crate::reldecoder::{self, DecoderConfig, RelationVars};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Text embedding width D_t.
    pub text_dim: usize,
    /// Seed of the frozen hash text encoder.
    pub text_seed: u64,
    pub detector: DetectorConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text_dim: 128,
            text_seed: 0,
            detector: DetectorConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 {
            return Err(Error::Config("text_dim must be positive".into()));
        }
        self.detector.validate()?;
        self.decoder.validate()
    }

    pub fn text_encoder(&self, synonyms: SynonymMap) -> TextEncoder {
        TextEncoder::new(self.text_seed, self.text_dim, synonyms)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.insert("text.proj", Matrix::identity(config.text_dim));
        detector::init_params(&config.detector, config.text_dim, &mut rng, &mut params);
        reldecoder::init_params(
            &config.decoder,
            config.detector.width,
            config.text_dim,
            &mut rng,
            &mut params,
        );
        Ok(Self { config, params })
    }

    /// Projects raw text embeddings (one per row) through the text tower.
    pub fn project_text(&self, raw: &Matrix<T>) -> Matrix<T> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, |_| false);
        let x = tape.constant(raw.clone());
        let v = text_tower(&mut tape, &b, x);
        tape.value(v).clone()
    }
}

/// Learnable linear map on the frozen text embeddings, renormalized.
pub fn text_tower<T: Scalar>(tape: &mut Tape<T>, b: &Bound, raw: Var) -> Var {
    let p = b.get("text.proj");
    let y = tape.matmul(raw, p);
    tape.l2_normalize_rows(y)
}

/// Stacks text embeddings into a K×D_t matrix.
pub fn text_matrix<T: Scalar>(rows: &[Vec<f64>], dim: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(rows.len(), dim);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), dim, "text embedding width mismatch");
        for (j, &v) in r.iter().enumerate() {
            m[(i, j)] = T::c(v);
        }
    }
    m
}

/// Tape handles of a joint forward pass.
pub struct ForwardVars {
    pub detector: DetectorVars,
    pub decoder: RelationVars,
}

/// Detector followed by the relation decoder on the same tape. Text
/// matrices are raw (pre-tower) embeddings.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    image: &Image,
    object_text: Option<&Matrix<T>>,
    relation_text: Option<&Matrix<T>>,
    drop_rng: Option<&mut dyn RngCore>,
) -> Result<ForwardVars> {
    let obj = object_text.map(|m| {
        let x = tape.constant(m.clone());
        text_tower(tape, b, x)
    });
    let det = detector::forward(tape, b, &cfg.detector, image, obj, drop_rng)?;
    let rel = relation_text.map(|m| {
        let x = tape.constant(m.clone());
        text_tower(tape, b, x)
    });
    let dec = reldecoder::forward(tape, b, &cfg.decoder, det.instances, rel);
    Ok(ForwardVars {
        detector: det,
        decoder: dec,
    })
}
