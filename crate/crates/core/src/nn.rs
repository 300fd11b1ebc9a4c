//! Layer building blocks over the autodiff tape.

use rand::Rng;

use crate::autodiff::{Bound, Tape, Var};
use crate::params::{xavier, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub fn init_linear<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    params.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
    params.insert(format!("{prefix}.b"), Matrix::zeros(1, fan_out));
}

pub fn init_layer_norm<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.g"), Matrix::filled(1, width, T::one()));
    params.insert(format!("{prefix}.b"), Matrix::zeros(1, width));
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var) -> Var {
    let w = b.get(&format!("{prefix}.w"));
    let bias = b.get(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, bias)
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var) -> Var {
    let g = b.get(&format!("{prefix}.g"));
    let bias = b.get(&format!("{prefix}.b"));
    tape.layer_norm(x, g, bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// `fc2(act(fc1(x)))`
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var, act: Activation) -> Var {
    let h = linear(tape, b, &format!("{prefix}.fc1"), x);
    let h = match act {
        Activation::Gelu => tape.gelu(h),
        Activation::Relu => tape.relu(h),
    };
    linear(tape, b, &format!("{prefix}.fc2"), h)
}

/// Scaled dot-product attention split across `heads` column blocks.
pub fn multi_head_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let width = tape.value(q).cols();
    assert_eq!(width % heads, 0, "width {width} not divisible by {heads} heads");
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let s = tape.matmul_t(qh, kh);
        let s = tape.scale(s, scale);
        let p = tape.softmax_rows(s);
        outs.push(tape.matmul(p, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

/// Row-wise cosine similarity between `a` and `b`, divided by the 1×1 `tau`.
pub fn cosine_logits<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, tau: Var) -> Var {
    let an = tape.l2_normalize_rows(a);
    let bn = tape.l2_normalize_rows(b);
    let sim = tape.matmul_t(an, bn);
    tape.div_scalar(sim, tau)
}
