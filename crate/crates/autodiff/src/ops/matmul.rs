use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::tensor::Tensor;

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op` is an
/// optional transpose. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Var {
    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => {
                return Err(TensorError::shape(
                    "matmul",
                    format!("{sa:?} x {sb:?}"),
                ))
            }
        };
        let (a, b) = (self.shared_value(), other.shared_value());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out_shape: Vec<usize> = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let value = Tensor::new(&out_shape, out)?;
        self.record(value, &[self, other], move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut d = vec![0.0; batch * m * k];
                for i in 0..batch {
                    // dA = dC * B^T
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        true,
                        0.0,
                        &mut d[i * m * k..(i + 1) * m * k],
                    );
                }
                Tensor::new(a.shape(), d).expect("a shape")
            });
            let gb = need[1].then(|| {
                let mut d = vec![0.0; batch * k * n];
                for i in 0..batch {
                    // dB = A^T * dC
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        0.0,
                        &mut d[i * k * n..(i + 1) * k * n],
                    );
                }
                Tensor::new(b.shape(), d).expect("b shape")
            });
            vec![ga, gb]
        })
    }
}
