use rand::Rng;

use crate::attention::xavier;
use crate::autodiff::{Graph, ParamId, Params, Tensor, Var};
use crate::error::{Error, Result};

/// One LSTM layer. Gate blocks are stacked in the order input, forget,
/// output, candidate along the rows of `w_x`, `w_h` and `bias`.
#[derive(Clone, Debug)]
pub struct LstmLayerParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// `[4h x input_dim]`.
    pub w_x: ParamId,
    /// `[4h x h]`.
    pub w_h: ParamId,
    /// `[4h]`.
    pub bias: ParamId,
}

/// The four stacked `[hidden x cols]` gate blocks, each Xavier-uniform over
/// its own fan-in and fan-out.
fn per_gate_xavier(rng: &mut impl Rng, hidden: usize, cols: usize) -> Vec<f64> {
    (0..4).flat_map(|_| xavier(rng, hidden, cols)).collect()
}

impl LstmLayerParams {
    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        4 * hidden * (input_dim + hidden) + 4 * hidden
    }

    /// Xavier-uniform weights; the forget-gate bias block is `forget_bias`,
    /// the other biases zero.
    pub fn init(
        params: &mut Params,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_x = params.add(
            format!("{prefix}.w_x"),
            Tensor::matrix(4 * hidden, input_dim, per_gate_xavier(rng, hidden, input_dim))?,
        )?;
        let w_h = params.add(
            format!("{prefix}.w_h"),
            Tensor::matrix(4 * hidden, hidden, per_gate_xavier(rng, hidden, hidden))?,
        )?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = forget_bias);
        let bias = params.add(format!("{prefix}.bias"), Tensor::vector(b))?;
        Ok(LstmLayerParams {
            input_dim,
            hidden,
            w_x,
            w_h,
            bias,
        })
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_x, self.w_h, self.bias]
    }

    pub fn bind(&self, g: &mut Graph, params: &Params) -> Result<BoundLstm> {
        Ok(BoundLstm {
            input_dim: self.input_dim,
            hidden: self.hidden,
            w_x: g.param(params, self.w_x)?,
            w_h: g.param(params, self.w_h)?,
            bias: g.param(params, self.bias)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub hidden: Var,
    pub cell: Var,
}

impl LayerState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Result<Self> {
        Ok(LayerState {
            hidden: g.constant(Tensor::zeros(&[hidden]))?,
            cell: g.constant(Tensor::zeros(&[hidden]))?,
        })
    }
}

/// One LSTM cell update; the returned state's `hidden` is the layer output.
pub fn lstm_step(g: &mut Graph, x: Var, state: &LayerState, layer: &BoundLstm) -> Result<LayerState> {
    let h = layer.hidden;
    if g.value(x).shape() != [layer.input_dim] {
        return Err(Error::dim(
            "lstm_step",
            format!("input {:?}, layer expects [{}]", g.value(x).shape(), layer.input_dim),
        ));
    }
    if g.value(state.hidden).shape() != [h] || g.value(state.cell).shape() != [h] {
        return Err(Error::dim("lstm_step", format!("state is not of size {h}")));
    }
    let zx = g.matvec(layer.w_x, x)?;
    let zh = g.matvec(layer.w_h, state.hidden)?;
    let z = g.add_n(&[zx, zh, layer.bias])?;
    let i = g.slice(z, 0, h)?;
    let f = g.slice(z, h, h)?;
    let o = g.slice(z, 2 * h, h)?;
    let c = g.slice(z, 3 * h, h)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let o = g.sigmoid(o)?;
    let c = g.tanh(c)?;
    let keep = g.mul(f, state.cell)?;
    let write = g.mul(i, c)?;
    let cell = g.add(keep, write)?;
    let squashed = g.tanh(cell)?;
    let hidden = g.mul(o, squashed)?;
    Ok(LayerState { hidden, cell })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::sigmoid;

    fn layer(seed: u64, input: usize, hidden: usize) -> (Params, LstmLayerParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let l = LstmLayerParams::init(&mut params, "l0", input, hidden, 1.0, &mut rng).unwrap();
        (params, l)
    }

    #[test]
    fn zero_weights_zero_state_give_zero_hidden() {
        let (mut params, l) = layer(0, 3, 4);
        for id in l.ids() {
            params.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let b = l.bind(&mut g, &params).unwrap();
        let x = g.constant(Tensor::vector(vec![0.3, -0.2, 0.9])).unwrap();
        let s = LayerState::zeros(&mut g, 4).unwrap();
        let out = lstm_step(&mut g, x, &s, &b).unwrap();
        assert!(g.value(out.hidden).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let (mut params, l) = layer(1, 3, 2);
        for id in [l.w_x, l.w_h] {
            params.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        // Forget gate fully open, input gate fully closed.
        let b = params.value_mut(l.bias).data_mut();
        b.iter_mut().for_each(|x| *x = 0.0);
        b[0..2].iter_mut().for_each(|x| *x = -800.0);
        b[2..4].iter_mut().for_each(|x| *x = 800.0);
        let mut g = Graph::new();
        let bl = l.bind(&mut g, &params).unwrap();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let s = LayerState {
            hidden: g.constant(Tensor::vector(vec![0.1, 0.2])).unwrap(),
            cell: g.constant(Tensor::vector(vec![0.7, -1.3])).unwrap(),
        };
        let out = lstm_step(&mut g, x, &s, &bl).unwrap();
        assert_eq!(g.value(out.cell).data(), &[0.7, -1.3]);
    }

    #[test]
    fn matches_hand_rolled_cell() {
        let (params, l) = layer(2, 3, 4);
        let x = [0.5, -0.1, 0.8];
        let h0 = [0.2, -0.4, 0.1, 0.3];
        let c0 = [-0.5, 0.6, 0.0, 0.9];
        let wx = params.value(l.w_x).data();
        let wh = params.value(l.w_h).data();
        let bias = params.value(l.bias).data();
        let pre = |r: usize| -> f64 {
            bias[r]
                + (0..3).map(|j| wx[r * 3 + j] * x[j]).sum::<f64>()
                + (0..4).map(|j| wh[r * 4 + j] * h0[j]).sum::<f64>()
        };
        let mut want_h = [0.0; 4];
        let mut want_c = [0.0; 4];
        for k in 0..4 {
            let i = sigmoid(pre(k));
            let f = sigmoid(pre(4 + k));
            let o = sigmoid(pre(8 + k));
            let gg = pre(12 + k).tanh();
            want_c[k] = f * c0[k] + i * gg;
            want_h[k] = o * want_c[k].tanh();
        }

        let mut g = Graph::new();
        let b = l.bind(&mut g, &params).unwrap();
        let xv = g.constant(Tensor::vector(x.to_vec())).unwrap();
        let s = LayerState {
            hidden: g.constant(Tensor::vector(h0.to_vec())).unwrap(),
            cell: g.constant(Tensor::vector(c0.to_vec())).unwrap(),
        };
        let out = lstm_step(&mut g, xv, &s, &b).unwrap();
        for k in 0..4 {
            assert!((g.value(out.hidden).data()[k] - want_h[k]).abs() < 1e-12);
            assert!((g.value(out.cell).data()[k] - want_c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn forget_bias_initialised_to_one() {
        let (params, l) = layer(3, 2, 3);
        let b = params.value(l.bias).data();
        assert_eq!(&b[3..6], &[1.0, 1.0, 1.0]);
        assert!(b[..3].iter().chain(&b[6..]).all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let (params, l) = layer(4, 3, 2);
        let mut g = Graph::new();
        let b = l.bind(&mut g, &params).unwrap();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let s = LayerState::zeros(&mut g, 2).unwrap();
        assert!(matches!(lstm_step(&mut g, x, &s, &b), Err(Error::Dimension { .. })));
    }
}
