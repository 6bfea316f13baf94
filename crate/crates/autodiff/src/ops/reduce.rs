use crate::error::Result;
use crate::graph::Var;
use crate::ops::shape::{check_axis, split_at_axis};
use crate::tensor::Tensor;

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Var {
    pub fn sum_all(&self) -> Var {
        let shape = self.shape().to_vec();
        let value = Tensor::scalar(self.value().sum());
        self.record(value, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
        .expect("same graph")
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n).expect("scalar broadcast")
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape().to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let d = self.value().data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::new(&reduced_shape(&shape, axis, keepdim), out)?;
        self.record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut full = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    full.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(&shape, full).expect("input shape"))]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self.shape().get(axis).unwrap_or(&1) as f64;
        self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / n)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape().to_vec();
        check_axis("max_axis", &shape, axis)?;
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let d = self.value().data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = d[(o * n + k) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = k;
                    }
                }
            }
        }
        let value = Tensor::new(&reduced_shape(&shape, axis, keepdim), out)?;
        self.record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut full = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..inner {
                    full[(o * n + arg[o * inner + i]) * inner + i] = gd[o * inner + i];
                }
            }
            vec![Some(Tensor::new(&shape, full).expect("input shape"))]
        })
    }
}
