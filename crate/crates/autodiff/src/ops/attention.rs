use crate::error::{Result, TensorError};
use crate::graph::Var;

/// Multi-head scaled dot-product attention over already projected inputs.
///
/// `q`: `[B,Tq,E]`, `k`/`v`: `[B,Tk,E]`; `E` is split into `heads` equal
/// parts, each attends independently and the results are concatenated back
/// to `[B,Tq,E]`.
pub fn attention_block(q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
    let (qs, ks, vs) = (q.shape().to_vec(), k.shape().to_vec(), v.shape().to_vec());
    let ([b, tq, e], [kb, tk, ke], [vb, vt, ve]) = (&qs[..], &ks[..], &vs[..]) else {
        return Err(TensorError::shape(
            "attention_block",
            format!("expected rank-3 q/k/v, got {qs:?}, {ks:?}, {vs:?}"),
        ));
    };
    if kb != b || vb != b || ke != e || ve != e || vt != tk {
        return Err(TensorError::shape(
            "attention_block",
            format!("q {qs:?}, k {ks:?}, v {vs:?} disagree"),
        ));
    }
    if heads == 0 || e % heads != 0 {
        return Err(TensorError::invalid(
            "attention_block",
            format!("embedding {e} not divisible into {heads} heads"),
        ));
    }
    let (b, tq, tk, e) = (*b, *tq, *tk, *e);
    let dh = e / heads;
    let split = |x: &Var, t: usize| -> Result<Var> {
        x.reshape(&[b, t, heads, dh])?
            .transpose(&[0, 2, 1, 3])?
            .reshape(&[b * heads, t, dh])
    };
    let qh = split(q, tq)?;
    let kt = k
        .reshape(&[b, tk, heads, dh])?
        .transpose(&[0, 2, 3, 1])?
        .reshape(&[b * heads, dh, tk])?;
    let vh = split(v, tk)?;
    let weights = qh
        .matmul(&kt)?
        .mul_scalar(1.0 / (dh as f64).sqrt())?
        .softmax(2)?;
    weights
        .matmul(&vh)?
        .reshape(&[b, heads, tq, dh])?
        .transpose(&[0, 2, 1, 3])?
        .reshape(&[b, tq, e])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn single_key_returns_value() {
        let g = Graph::new();
        let q = g.param(Tensor::from_fn(&[1, 3, 4], |i| (i as f64).cos()));
        let k = g.param(Tensor::from_fn(&[1, 1, 4], |i| i as f64));
        let v = g.param(Tensor::new(&[1, 1, 4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
        let out = attention_block(&q, &k, &v, 2).unwrap();
        for t in 0..3 {
            for c in 0..4 {
                assert!((out.value().get(&[0, t, c]) - v.value().get(&[0, 0, c])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 2, 6]));
        assert!(attention_block(&x, &x, &x, 4).is_err());
    }
}
