use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::ops::shape::{check_axis, split_at_axis};
use crate::tensor::Tensor;

impl Var {
    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let d = self.value().data();
        let mut y = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (d[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(&shape, y)?;
        let y = value.clone();
        self.record(value, &[self], move |g, _| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..n {
                        dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(&shape, dx).expect("input shape"))]
        })
    }

    /// Normalise over the last axis to zero mean and unit variance. Affine
    /// scale and shift are left to broadcasting `mul`/`add`.
    pub fn layer_norm(&self, eps: f64) -> Result<Var> {
        let shape = self.shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| TensorError::shape("layer_norm", "rank 0 input"))?;
        let rows = self.value().numel() / c.max(1);
        let d = self.value().data();
        let mut y = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &d[r * c..(r + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for (o, v) in y[r * c..(r + 1) * c].iter_mut().zip(x) {
                *o = (v - mean) * s;
            }
        }
        let value = Tensor::new(&shape, y)?;
        let xhat = value.clone();
        self.record(value, &[self], move |g, _| {
            let (gd, xh) = (g.data(), xhat.data());
            let mut dx = vec![0.0; gd.len()];
            let cf = c as f64;
            for r in 0..rows {
                let gr = &gd[r * c..(r + 1) * c];
                let xr = &xh[r * c..(r + 1) * c];
                let mean_g = gr.iter().sum::<f64>() / cf;
                let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cf;
                for k in 0..c {
                    dx[r * c + k] = inv_std[r] * (gr[k] - mean_g - xr[k] * mean_gx);
                }
            }
            vec![Some(Tensor::new(&shape, dx).expect("input shape"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.0));
        let y = x.softmax(1).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn saturated_pair() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![30.0, -30.0]).unwrap());
        let y = x.softmax(0).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
        assert!(y.value().data()[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.7).sin() * 4.0 + 1.0));
        let y = x.layer_norm(0.0).unwrap();
        for r in 0..3 {
            let row = &y.value().data()[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
