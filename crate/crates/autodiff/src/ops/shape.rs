use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::tensor::{strides_of, Tensor};

/// `(outer, axis extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let old = self.shape().to_vec();
        let value = self.value().clone().reshape(shape)?;
        self.record(value, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&old).expect("same numel"))]
        })
    }

    pub fn concat(vars: &[Var], axis: usize) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "nothing to concatenate"))?;
        let rank = first.shape().len();
        check_axis("concat", first.shape(), axis)?;
        for v in vars {
            let s = v.shape();
            if s.len() != rank
                || s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), s),
                ));
            }
        }
        let extents: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in vars.iter().zip(&extents) {
                let d = v.value().data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        let parents: Vec<&Var> = vars.iter().collect();
        let in_shapes: Vec<Vec<usize>> = vars.iter().map(|v| v.shape().to_vec()).collect();
        first.record(value, &parents, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            extents
                .iter()
                .zip(&in_shapes)
                .zip(need)
                .map(|((&e, s), &n)| {
                    let start = offset;
                    offset += e;
                    n.then(|| {
                        let mut d = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&gd[base..base + e * inner]);
                        }
                        Tensor::new(s, d).expect("part shape")
                    })
                })
                .collect()
        })
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        check_axis("slice", &shape, axis)?;
        if start >= end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} invalid for extent {}", shape[axis]),
            ));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let e = end - start;
        let d = self.value().data();
        let mut out = Vec::with_capacity(outer * e * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + e * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = e;
        let value = Tensor::new(&out_shape, out)?;
        self.record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut full = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                full[base..base + e * inner].copy_from_slice(&gd[o * e * inner..(o + 1) * e * inner]);
            }
            vec![Some(Tensor::new(&shape, full).expect("input shape"))]
        })
    }

    /// Permute axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Var> {
        let shape = self.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "transpose",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let value = permute(self.value(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.record(value, &[self], move |g, _| vec![Some(permute(g, &inverse))])
    }
}

fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if n == 0 {
        return Tensor::new(&out_shape, out).expect("empty");
    }
    let d = t.data();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(d[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}
