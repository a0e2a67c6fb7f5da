//! Layers expressed as parameter handles plus tape-level forward functions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::params::{orthogonal_init, uniform_init, ParamId, ParamStore};

/// `x W (+ b)` for row-major inputs `[n × in]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Mat::zeros((1, fan_out))));
        Self { weight, bias }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let y = t.matmul(x, t.param(store, self.weight));
        match self.bias {
            Some(b) => t.add_row(y, t.param(store, b)),
            None => y,
        }
    }
}

/// Two linear maps with `tanh` between them.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), dims[0], dims[1], true),
            second: Linear::new(store, rng, &format!("{name}.1"), dims[1], dims[2], true),
        }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let h = t.tanh(self.first.forward(t, store, x));
        self.second.forward(t, store, h)
    }
}

/// One direction of a GRU (reset, update and candidate gates).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GruCell {
    input: [ParamId; 3],
    hidden: [ParamId; 3],
    bias: [ParamId; 3],
    hidden_bias: ParamId,
    hidden_dim: usize,
}

impl GruCell {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let gates = ["r", "z", "n"];
        let input = gates.map(|g| store.insert(format!("{name}.w_i{g}"), uniform_init(rng, input_dim, hidden_dim)));
        let hidden = gates.map(|g| store.insert(format!("{name}.w_h{g}"), orthogonal_init(rng, hidden_dim)));
        let bias = gates.map(|g| store.insert(format!("{name}.b_i{g}"), Mat::zeros((1, hidden_dim))));
        let hidden_bias = store.insert(format!("{name}.b_hn"), Mat::zeros((1, hidden_dim)));
        Self { input, hidden, bias, hidden_bias, hidden_dim }
    }

    /// Hidden states `[n × h]` aligned with input positions.
    fn run(&self, t: &Tape, store: &ParamStore, xs: Var, reverse: bool) -> Var {
        let n = t.shape(xs).0;
        let proj: Vec<Var> = (0..3)
            .map(|g| t.add_row(t.matmul(xs, t.param(store, self.input[g])), t.param(store, self.bias[g])))
            .collect();
        let [u_r, u_z, u_n] = self.hidden.map(|id| t.param(store, id));
        let b_hn = t.param(store, self.hidden_bias);
        let mut h = t.zeros(1, self.hidden_dim);
        let mut states = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for i in order {
            let r = t.sigmoid(t.add(t.row_of(proj[0], i), t.matmul(h, u_r)));
            let z = t.sigmoid(t.add(t.row_of(proj[1], i), t.matmul(h, u_z)));
            let gated = t.mul(r, t.add(t.matmul(h, u_n), b_hn));
            let cand = t.tanh(t.add(t.row_of(proj[2], i), gated));
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            h = t.add(cand, t.mul(z, t.sub(h, cand)));
            states[i] = h;
        }
        t.concat_rows(&states)
    }
}

/// Bidirectional GRU; output width is twice the per-direction hidden size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BiGru {
    forward: GruCell,
    backward: GruCell,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input_dim: usize, output_dim: usize) -> Self {
        assert!(output_dim.is_multiple_of(2) && output_dim > 0, "BiGru output width must be even");
        let h = output_dim / 2;
        Self {
            forward: GruCell::new(store, rng, &format!("{name}.fwd"), input_dim, h),
            backward: GruCell::new(store, rng, &format!("{name}.bwd"), input_dim, h),
        }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, xs: Var) -> Var {
        let f = self.forward.run(t, store, xs, false);
        let b = self.backward.run(t, store, xs, true);
        t.concat_cols(&[f, b])
    }
}
