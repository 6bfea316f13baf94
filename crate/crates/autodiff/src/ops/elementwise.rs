//! Broadcasting binary ops and pointwise nonlinearities.

use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::tensor::{strides_of, Tensor};

/// Output shape plus per-operand strides (zero on broadcast axes).
struct Broadcast {
    shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let (ta, tb) = (strides_of(&pa), strides_of(&pb));
        let mut shape = Vec::with_capacity(rank);
        let mut sa = Vec::with_capacity(rank);
        let mut sb = Vec::with_capacity(rank);
        for d in 0..rank {
            let n = match (pa[d], pb[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::shape(
                        op,
                        format!("cannot broadcast {a:?} with {b:?}"),
                    ))
                }
            };
            shape.push(n);
            sa.push(if pa[d] == 1 { 0 } else { ta[d] });
            sb.push(if pb[d] == 1 { 0 } else { tb[d] });
        }
        Ok(Self { shape, sa, sb })
    }
}

/// Visit every output element in row-major order with its operand offsets.
fn odometer(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    if shape.iter().any(|&n| n == 0) {
        return;
    }
    let last = rank - 1;
    let (inner, ia, ib) = (shape[last], sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut base_a, mut base_b, mut o) = (0usize, 0usize, 0usize);
    loop {
        for k in 0..inner {
            f(o, base_a + k * ia, base_b + k * ib);
            o += 1;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            base_a -= sa[d] * shape[d];
            base_b -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn zip_broadcast(plan: &Broadcast, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data).expect("same shape");
    }
    let n: usize = plan.shape.iter().product();
    let mut out = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    odometer(&plan.shape, &plan.sa, &plan.sb, |o, i, j| out[o] = f(ad[i], bd[j]));
    Tensor::new(&plan.shape, out).expect("broadcast shape")
}

/// Sum `grad` (in broadcast shape) back down to an operand's shape.
fn reduce_to(grad: &Tensor, plan: &Broadcast, strides: &[usize], target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let mut out = vec![0.0; target.iter().product()];
    let gd = grad.data();
    odometer(&plan.shape, strides, strides, |o, i, _| out[i] += gd[o]);
    Tensor::new(target, out).expect("target shape")
}

/// Product of `grad` with the other operand broadcast, reduced to `target`.
fn reduce_product(
    grad: &Tensor,
    other: &Tensor,
    plan: &Broadcast,
    s_self: &[usize],
    s_other: &[usize],
    target: &[usize],
) -> Tensor {
    if grad.shape() == target && other.shape() == target {
        return grad.zip_map(other, |g, o| g * o).expect("same shape");
    }
    let mut out = vec![0.0; target.iter().product()];
    let (gd, od) = (grad.data(), other.data());
    odometer(&plan.shape, s_self, s_other, |o, i, j| out[i] += gd[o] * od[j]);
    Tensor::new(target, out).expect("target shape")
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Mul)
    }

    fn binary(&self, other: &Var, kind: Binary) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let plan = Broadcast::new(name, self.shape(), other.shape())?;
        let (a, b) = (self.shared_value(), other.shared_value());
        let value = match kind {
            Binary::Add => zip_broadcast(&plan, &a, &b, |x, y| x + y),
            Binary::Sub => zip_broadcast(&plan, &a, &b, |x, y| x - y),
            Binary::Mul => zip_broadcast(&plan, &a, &b, |x, y| x * y),
        };
        self.record(value, &[self, other], move |g, need| {
            let (sa, sb) = (a.shape(), b.shape());
            match kind {
                Binary::Add => vec![
                    need[0].then(|| reduce_to(g, &plan, &plan.sa, sa)),
                    need[1].then(|| reduce_to(g, &plan, &plan.sb, sb)),
                ],
                Binary::Sub => vec![
                    need[0].then(|| reduce_to(g, &plan, &plan.sa, sa)),
                    need[1].then(|| reduce_to(g, &plan, &plan.sb, sb).map(|x| -x)),
                ],
                Binary::Mul => vec![
                    need[0].then(|| reduce_product(g, &b, &plan, &plan.sa, &plan.sb, sa)),
                    need[1].then(|| reduce_product(g, &a, &plan, &plan.sb, &plan.sa, sb)),
                ],
            }
        })
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var> {
        self.mul(&self.constant_like(Tensor::scalar(c)))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.add(&self.constant_like(Tensor::scalar(c)))
    }

    pub fn neg(&self) -> Result<Var> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        // local derivative from (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let x = self.shared_value();
        let y = std::rc::Rc::new(x.map(f));
        let y_saved = y.clone();
        self.record((*y).clone(), &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y_saved.data()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
        })
    }

    pub fn abs(&self) -> Result<Var> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Var> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
