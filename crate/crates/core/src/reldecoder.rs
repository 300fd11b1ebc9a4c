//! Relation decoder: learned latent queries attend over the detector's
//! instance embeddings (with the latents' own keys and values appended) and
//! become relation embeddings. Each relation embedding is classified against
//! relationship text queries and points at its subject and object instances
//! by cosine similarity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::{normal, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{cosine, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_ratio: usize,
    pub temperature_init: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            layers: 3,
            heads: 8,
            width: 64,
            ffn_ratio: 4,
            temperature_init: 0.07,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("decoder: num_queries must be at least 1".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder: width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(self.temperature_init > 0.0) {
            return Err(Error::Config("decoder: temperature_init must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    cfg: &DecoderConfig,
    instance_width: usize,
    text_dim: usize,
    rng: &mut R,
    params: &mut ParamSet<T>,
) {
    let d = cfg.width;
    if instance_width != d {
        nn::init_linear(params, rng, "decoder.in_proj", instance_width, d);
    }
    params.insert("decoder.latents", normal(rng, cfg.num_queries, d, 0.02));
    for l in 0..cfg.layers {
        let p = format!("decoder.layer{l}");
        for proj in ["q", "k", "v", "out"] {
            nn::init_linear(params, rng, &format!("{p}.attn.{proj}"), d, d);
        }
        nn::init_layer_norm(params, &format!("{p}.ln1"), d);
        nn::init_linear(params, rng, &format!("{p}.ffn.fc1"), d, cfg.ffn_ratio * d);
        nn::init_linear(params, rng, &format!("{p}.ffn.fc2"), cfg.ffn_ratio * d, d);
        nn::init_layer_norm(params, &format!("{p}.ln2"), d);
    }
    nn::init_linear(params, rng, "decoder.rel_head", d, text_dim);
    for role in ["sub", "obj"] {
        nn::init_linear(params, rng, &format!("decoder.{role}.fc1"), d, d);
        nn::init_linear(params, rng, &format!("decoder.{role}.fc2"), d, instance_width);
    }
    params.insert("decoder.tau_rel", Matrix::scalar(T::c(cfg.temperature_init)));
    params.insert("decoder.tau_ind", Matrix::scalar(T::c(cfg.temperature_init)));
}

/// Post-norm latent-query transformer stack. `z` is N×D (N may be zero).
pub fn decode<T: Scalar>(tape: &mut Tape<T>, b: &Bound, cfg: &DecoderConfig, z: Var) -> Var {
    let zp = match b.try_get("decoder.in_proj.w") {
        Some(_) => nn::linear(tape, b, "decoder.in_proj", z),
        None => z,
    };
    let has_instances = tape.value(zp).rows() > 0;
    let mut x = b.get("decoder.latents");
    for l in 0..cfg.layers {
        let p = format!("decoder.layer{l}");
        let kv = if has_instances {
            tape.concat_rows(&[zp, x])
        } else {
            x
        };
        let q = nn::linear(tape, b, &format!("{p}.attn.q"), x);
        let k = nn::linear(tape, b, &format!("{p}.attn.k"), kv);
        let v = nn::linear(tape, b, &format!("{p}.attn.v"), kv);
        let a = nn::multi_head_attention(tape, q, k, v, cfg.heads);
        let a = nn::linear(tape, b, &format!("{p}.attn.out"), a);
        let h = tape.add(x, a);
        let h = nn::layer_norm(tape, b, &format!("{p}.ln1"), h);
        let f = nn::mlp(tape, b, &format!("{p}.ffn"), h, Activation::Relu);
        let h2 = tape.add(h, f);
        x = nn::layer_norm(tape, b, &format!("{p}.ln2"), h2);
    }
    x
}

/// Tape handles for one decoder forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RelationVars {
    /// M×D_r relation embeddings.
    pub relations: Var,
    /// M×D_t classification embeddings.
    pub class_embeddings: Var,
    /// M×D subject / object embeddings.
    pub subjects: Var,
    pub objects: Var,
    /// M×N index logits.
    pub subject_logits: Var,
    pub object_logits: Var,
    /// M×K relationship logits; present when text queries were supplied.
    pub class_logits: Option<Var>,
    pub tau_rel: Var,
    pub tau_ind: Var,
}

pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &DecoderConfig,
    z: Var,
    text: Option<Var>,
) -> RelationVars {
    let r = decode(tape, b, cfg, z);
    let class_embeddings = nn::linear(tape, b, "decoder.rel_head", r);
    let subjects = nn::mlp(tape, b, "decoder.sub", r, Activation::Relu);
    let objects = nn::mlp(tape, b, "decoder.obj", r, Activation::Relu);
    let tau_rel = b.get("decoder.tau_rel");
    let tau_ind = b.get("decoder.tau_ind");
    let subject_logits = nn::cosine_logits(tape, subjects, z, tau_ind);
    let object_logits = nn::cosine_logits(tape, objects, z, tau_ind);
    let class_logits = text.map(|t| nn::cosine_logits(tape, class_embeddings, t, tau_rel));
    RelationVars {
        relations: r,
        class_embeddings,
        subjects,
        objects,
        subject_logits,
        object_logits,
        class_logits,
        tau_rel,
        tau_ind,
    }
}

/// Materialized decoder result.
#[derive(Clone, Debug)]
pub struct RelationOutput<T: Scalar> {
    pub relation_embeddings: Matrix<T>,
    pub class_embeddings: Matrix<T>,
    pub subject_embeddings: Matrix<T>,
    pub object_embeddings: Matrix<T>,
    pub subject_logits: Matrix<T>,
    pub object_logits: Matrix<T>,
    pub class_logits: Matrix<T>,
    pub tau_rel: T,
    pub tau_ind: T,
}

impl<T: Scalar> RelationOutput<T> {
    pub fn from_vars(tape: &Tape<T>, v: &RelationVars) -> Self {
        Self {
            relation_embeddings: tape.value(v.relations).clone(),
            class_embeddings: tape.value(v.class_embeddings).clone(),
            subject_embeddings: tape.value(v.subjects).clone(),
            object_embeddings: tape.value(v.objects).clone(),
            subject_logits: tape.value(v.subject_logits).clone(),
            object_logits: tape.value(v.object_logits).clone(),
            class_logits: v
                .class_logits
                .map(|l| tape.value(l).clone())
                .unwrap_or_else(|| Matrix::zeros(0, 0)),
            tau_rel: tape.value(v.tau_rel).item(),
            tau_ind: tape.value(v.tau_ind).item(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.relation_embeddings.rows()
    }
}

/// Subject and object embeddings of one relation embedding.
pub fn project_roles<T: Scalar>(params: &ParamSet<T>, r: &[T]) -> (Vec<T>, Vec<T>) {
    let mut tape = Tape::new();
    let b = tape.bind(params, |_| false);
    let x = tape.constant(Matrix::from_vec(1, r.len(), r.to_vec()));
    let s = nn::mlp(&mut tape, &b, "decoder.sub", x, Activation::Relu);
    let o = nn::mlp(&mut tape, &b, "decoder.obj", x, Activation::Relu);
    (tape.value(s).data().to_vec(), tape.value(o).data().to_vec())
}

/// Index of the most cosine-similar row of `z`; ties go to the lowest index.
pub fn argmax_cosine<T: Scalar>(query: &[T], z: &Matrix<T>) -> usize {
    let mut best = 0;
    let mut best_sim = T::neg_infinity();
    for i in 0..z.rows() {
        let s = cosine(query, z.row(i));
        if s > best_sim {
            best_sim = s;
            best = i;
        }
    }
    best
}

/// Subject and object instance index for every relation query: the row of
/// `z` most cosine-similar to the query's subject (object) embedding.
pub fn select_indices<T: Scalar>(subjects: &Matrix<T>, objects: &Matrix<T>, z: &Matrix<T>) -> (Vec<usize>, Vec<usize>) {
    assert!(z.rows() >= 1, "select_indices needs at least one instance");
    let s = (0..subjects.rows()).map(|j| argmax_cosine(subjects.row(j), z)).collect();
    let o = (0..objects.rows()).map(|j| argmax_cosine(objects.row(j), z)).collect();
    (s, o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            num_queries: 4,
            layers: 2,
            heads: 2,
            width: 8,
            ..Default::default()
        }
    }

    fn params(c: &DecoderConfig, inst: usize, seed: u64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        init_params(c, inst, 6, &mut ChaCha8Rng::seed_from_u64(seed), &mut p);
        p
    }

    fn run(c: &DecoderConfig, p: &ParamSet<f64>, z: Matrix<f64>) -> Matrix<f64> {
        let mut t = Tape::new();
        let b = t.bind(p, |_| false);
        let zv = t.constant(z);
        let r = decode(&mut t, &b, c, zv);
        t.value(r).clone()
    }

    #[test]
    fn empty_instances_give_finite_output() {
        let c = cfg();
        let p = params(&c, 8, 0);
        let r = run(&c, &p, Matrix::zeros(0, 8));
        assert_eq!(r.shape(), (4, 8));
        assert!(r.is_finite());
    }

    #[test]
    fn row_permutation_of_instances_leaves_output_unchanged() {
        let c = cfg();
        let p = params(&c, 10, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Matrix<f64> = normal(&mut rng, 6, 10, 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let zp = Matrix::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
        let a = run(&c, &p, z);
        let b = run(&c, &p, zp);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_blocks_reduce_to_normalized_latents() {
        let c = cfg();
        let mut p = params(&c, 8, 3);
        let names: Vec<String> = p
            .names()
            .filter(|n| n.contains(".attn.") || n.contains(".ffn."))
            .map(str::to_string)
            .collect();
        for n in names {
            let m = p.get_mut(&n).unwrap();
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = run(&c, &p, normal(&mut rng, 5, 8, 1.0));
        let latents = p.get("decoder.latents").unwrap();
        let ln = |row: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect()
        };
        // Each layer applies two unit-gain norms to the untouched residual.
        for j in 0..latents.rows() {
            let mut expected = latents.row(j).to_vec();
            for _ in 0..2 * c.layers {
                expected = ln(&expected);
            }
            for (k, e) in expected.iter().enumerate() {
                assert!((r[(j, k)] - e).abs() < 1e-9, "{} vs {}", r[(j, k)], e);
            }
        }
    }

    #[test]
    fn role_heads_are_independent() {
        let c = cfg();
        let mut p = params(&c, 8, 5);
        let r = vec![0.1, -0.4, 0.3, 0.9, -0.2, 0.0, 0.5, 0.7];
        let (s1, o1) = project_roles(&p, &r);
        p.get_mut("decoder.obj.fc1.w").unwrap().data_mut()[0] += 1.0;
        let (s2, o2) = project_roles(&p, &r);
        assert_eq!(s1, s2);
        assert_ne!(o1, o2);
        for n in ["decoder.sub.fc1.w", "decoder.sub.fc2.w", "decoder.obj.fc1.w", "decoder.obj.fc2.w"] {
            let m = p.get_mut(n).unwrap();
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let bias = Matrix::from_vec(1, 8, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        *p.get_mut("decoder.sub.fc2.b").unwrap() = bias.clone();
        *p.get_mut("decoder.obj.fc2.b").unwrap() = bias.clone();
        let (s, o) = project_roles(&p, &r);
        assert_eq!(s, bias.data());
        assert_eq!(o, bias.data());
    }

    #[test]
    fn selects_exact_match_and_breaks_ties_low() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let subs = Matrix::from_rows(&[vec![0.0, 2.0, 0.0]]);
        let objs = Matrix::from_rows(&[vec![1.0, 1.0, 0.0]]);
        let (s, o) = select_indices(&subs, &objs, &z);
        assert_eq!(s, vec![1]);
        assert_eq!(o, vec![0]);
        let scaled = z.scale(3.7);
        assert_eq!(select_indices(&subs, &objs, &scaled), (s, o));
    }
}
