//! Central finite differences against the reverse sweep.
//!
//! The function under test is reduced to a scalar with a fixed pseudo-random
//! projection of its output, so every output element participates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Probe at most this many entries per input (evenly strided).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_entries: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Deterministic weights in `[-1, 1)` from splitmix64.
fn projection(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], trainable: bool| -> Result<(Graph, Vec<Var>, Var, Vec<f64>)> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        let out = f(&g, &vars)?;
        let w = projection(out.value().numel(), opts.seed);
        Ok((g, vars, out, w))
    };
    let scalar = |out: &Var, w: &[f64]| -> f64 {
        out.value().data().iter().zip(w).map(|(a, b)| a * b).sum()
    };

    let (g, vars, out, w) = eval(inputs, true)?;
    let seed = Tensor::new(out.shape(), w.clone())?;
    let grads = g.backward(&out, Some(seed))?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop((g, vars, out));

    let mut report = GradCheckReport {
        per_input: vec![0.0; inputs.len()],
        ..Default::default()
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let x0 = input.data()[idx];
            probe[i].data_mut()[idx] = x0 + opts.step;
            let (_, _, up, _) = eval(&probe, false)?;
            let f_up = scalar(&up, &w);
            probe[i].data_mut()[idx] = x0 - opts.step;
            let (_, _, down, _) = eval(&probe, false)?;
            let f_down = scalar(&down, &w);
            probe[i].data_mut()[idx] = x0;

            let numeric = (f_up - f_down) / (2.0 * opts.step);
            let a = analytic[i].data()[idx];
            let rel = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            report.per_input[i] = report.per_input[i].max(rel);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if report.worst.as_ref().map_or(true, |m| rel >= m.rel_err) {
                    report.worst = Some(Mismatch {
                        input: i,
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_err: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}
