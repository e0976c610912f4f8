//! Layers shared by the encoder and decoder.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Result;

/// `y = x·W + b` applied row-wise; `W` is `[in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[input, output], input, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[output]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = self.weight.var(tape, store);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = b.var(tape, store);
                let rows = tape.value(y).rows();
                let bb = tape.repeat_rows(b, rows)?;
                tape.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

/// Gated recurrent unit with gate order `[reset | update | candidate]`:
///
/// ```text
/// r = σ(x_r + h_r)   z = σ(x_z + h_z)
/// n = tanh(x_n + r ⊗ h_n)
/// h' = (1 − z) ⊗ n + z ⊗ h
/// ```
/// where `x_* = x·W_x + b_x` and `h_* = h·W_h + b_h`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.input"), input, 3 * hidden, true),
            recurrent: Linear::new(store, rng, &format!("{name}.recurrent"), hidden, 3 * hidden, true),
            hidden,
        }
    }

    /// Input projections for a whole sequence `[n×in] -> [n×3h]`.
    pub fn project_inputs(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<Var> {
        self.input.forward(tape, store, xs)
    }

    /// One recurrence from a pre-projected input row `[1×3h]`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x_proj: Var, h: Var) -> Result<Var> {
        let hh = self.hidden;
        let h_proj = self.recurrent.forward(tape, store, h)?;
        let x_rz = tape.slice(x_proj, 1, 0..2 * hh)?;
        let h_rz = tape.slice(h_proj, 1, 0..2 * hh)?;
        let pre = tape.add(x_rz, h_rz)?;
        let rz = tape.sigmoid(pre)?;
        let r = tape.slice(rz, 1, 0..hh)?;
        let z = tape.slice(rz, 1, hh..2 * hh)?;
        let x_n = tape.slice(x_proj, 1, 2 * hh..3 * hh)?;
        let h_n = tape.slice(h_proj, 1, 2 * hh..3 * hh)?;
        let gated = tape.mul(r, h_n)?;
        let pre_n = tape.add(x_n, gated)?;
        let n = tape.tanh(pre_n)?;
        let diff = tape.sub(h, n)?;
        let keep = tape.mul(z, diff)?;
        tape.add(n, keep)
    }

    /// Runs over all rows of `xs` from a zero state. States are returned in
    /// position order; with `reverse` the recurrence starts at the last row.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: Var, reverse: bool) -> Result<Vec<Var>> {
        let n = tape.value(xs).rows();
        let proj = self.project_inputs(tape, store, xs)?;
        let mut h = tape.constant(crate::tensor::Tensor::zeros(&[1, self.hidden]));
        let mut states = vec![h; n];
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
        for t in order {
            let row = tape.slice(proj, 0, t..t + 1)?;
            h = self.step(tape, store, row, h)?;
            states[t] = h;
        }
        Ok(states)
    }
}
