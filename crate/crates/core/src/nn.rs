//! Parameter declarations, seeded initialisation and the small layer
//! helpers the networks are built from.

use hgs_autodiff::{ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter declarations. Order fixes the random stream,
/// so initialisation is reproducible from the seed alone.
#[derive(Clone, Debug, Default)]
pub struct ParamSpecs(pub Vec<ParamSpec>);

impl ParamSpecs {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// `k x k` convolution with He-normal weights and a zero bias.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.conv_gain(name, k, cin, cout, 2f64.sqrt());
    }

    pub fn conv_gain(&mut self, name: &str, k: usize, cin: usize, cout: usize, gain: f64) {
        self.push(
            format!("{name}.w"),
            &[k, k, cin, cout],
            Init::Scaled {
                fan_in: k * k * cin,
                gain,
            },
        );
        self.push(format!("{name}.b"), &[cout], Init::Zeros);
    }

    pub fn conv_no_bias(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.push(
            format!("{name}.w"),
            &[k, k, cin, cout],
            Init::Scaled {
                fan_in: k * k * cin,
                gain: 1.0,
            },
        );
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize, gain: f64) {
        self.push(
            format!("{name}.w"),
            &[cin, cout],
            Init::Scaled { fan_in: cin, gain },
        );
        self.push(format!("{name}.b"), &[cout], Init::Zeros);
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.push(format!("{name}.g"), &[dim], Init::Ones);
        self.push(format!("{name}.b"), &[dim], Init::Zeros);
    }

    pub fn set_init(&mut self, name: &str, init: Init) {
        if let Some(p) = self.0.iter_mut().find(|p| p.name == name) {
            p.init = init;
        }
    }

    pub fn initialise(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in &self.0 {
            let n: usize = spec.shape.iter().product();
            let data = match &spec.init {
                Init::Scaled { fan_in, gain } => {
                    let normal = Normal::new(0.0, gain / (*fan_in as f64).sqrt())
                        .expect("finite positive standard deviation");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Values(v) => v.clone(),
            };
            store.insert(
                spec.name.clone(),
                Tensor::new(&spec.shape, data).expect("spec shapes match init data"),
            );
        }
        store
    }
}

pub fn conv(s: &Session, name: &str, x: &Var, stride: usize) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let pad = w.shape()[0] / 2;
    let y = x.conv2d(&w, stride, pad)?;
    Ok(y.add(&s.param(&format!("{name}.b"))?)?)
}

pub fn conv_no_bias(s: &Session, name: &str, x: &Var) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let pad = w.shape()[0] / 2;
    Ok(x.conv2d(&w, 1, pad)?)
}

pub fn conv_relu(s: &Session, name: &str, x: &Var, stride: usize) -> Result<Var> {
    Ok(conv(s, name, x, stride)?.relu()?)
}

/// Affine map over the last axis of a tensor of any rank.
pub fn linear(s: &Session, name: &str, x: &Var) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let shape = x.shape().to_vec();
    let cin = *shape.last().expect("rank >= 1");
    let rows = x.value().numel() / cin;
    let y = x.reshape(&[rows, cin])?.matmul(&w)?;
    let y = y.add(&s.param(&format!("{name}.b"))?)?;
    let mut out = shape;
    *out.last_mut().expect("rank >= 1") = w.shape()[1];
    Ok(y.reshape(&out)?)
}

pub fn layer_norm(s: &Session, name: &str, x: &Var) -> Result<Var> {
    let y = x.layer_norm(1e-5)?;
    let y = y.mul(&s.param(&format!("{name}.g"))?)?;
    Ok(y.add(&s.param(&format!("{name}.b"))?)?)
}

/// Mean over non-overlapping `f x f` blocks of an NHWC tensor.
pub fn area_downsample(x: &Var, h: usize, w: usize) -> Result<Var> {
    let [n, hh, ww, c] = x.shape()[..] else {
        return Err(crate::CoreError::Input(format!(
            "area downsample expects NHWC, got {:?}",
            x.shape()
        )));
    };
    if (hh, ww) == (h, w) {
        return Ok(x.clone());
    }
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 || hh / h != ww / w {
        return Err(crate::CoreError::Input(format!(
            "cannot area-downsample {hh}x{ww} to {h}x{w}"
        )));
    }
    let f = hh / h;
    let y = x.reshape(&[n, h, f, w, f, c])?;
    Ok(y.mean_axis(4, false)?.mean_axis(2, false)?)
}

/// Same as [`area_downsample`] on a plain tensor.
pub fn area_downsample_tensor(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let g = hgs_autodiff::Graph::new();
    Ok(area_downsample(&g.constant(x.clone()), h, w)?.value().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hgs_autodiff::Graph;

    #[test]
    fn initialisation_is_seeded() {
        let mut specs = ParamSpecs::default();
        specs.conv("a", 3, 2, 4);
        specs.linear("b", 4, 2, 1.0);
        let x = specs.initialise(3);
        let y = specs.initialise(3);
        let z = specs.initialise(4);
        assert_eq!(x, y);
        assert_ne!(x, z);
        assert!(x.get("a.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn area_downsample_of_constant_is_constant() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 8, 8, 3], 0.5));
        let y = area_downsample(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2, 3]);
        assert!(y.value().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64));
        let y = area_downsample(&x, 1, 1).unwrap();
        assert_eq!(y.value().data(), &[1.5]);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let mut specs = ParamSpecs::default();
        specs.linear("l", 4, 3, 1.0);
        let store = specs.initialise(0);
        let s = Session::new(&store, false);
        let x = s.constant(Tensor::ones(&[2, 5, 4]));
        assert_eq!(linear(&s, "l", &x).unwrap().shape(), &[2, 5, 3]);
    }
}
