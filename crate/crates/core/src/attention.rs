//! Soft attention over annotation vectors, conditioned on the previous
//! decoder state and on the embedding of the previously emitted word.
//!
//! For annotation `h_j` the score is
//!
//! ```text
//! e_j = w_e . act(W_kh h_j + W_kv v_prev + b_1) + w_s . s_prev + b_2
//! ```
//!
//! with `act = tanh` by default (or the identity for the literal linear
//! form). Weights are `alpha = softmax(e)` and the context is
//! `c = sum_j alpha_j h_j`. The `w_s . s_prev + b_2` term shifts every score
//! equally, so it never changes `alpha`; it is kept so the parameter set
//! matches the published scoring function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Params, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    /// `D`, dimension of each annotation vector.
    pub annot_dim: usize,
    /// `d`, word-embedding dimension.
    pub embed_dim: usize,
    /// `|s|`, decoder state dimension.
    pub state_dim: usize,
    /// `k`, hidden width of the scoring MLP.
    pub width: usize,
}

impl AttentionDims {
    pub fn param_count(&self) -> usize {
        let k = self.width;
        k * self.annot_dim + k * self.embed_dim + k + k + self.state_dim + 1
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub dims: AttentionDims,
    pub activation: HiddenActivation,
    pub w_kh: ParamId,
    pub w_kv: ParamId,
    pub b1: ParamId,
    pub w_score: ParamId,
    pub w_state: ParamId,
    pub b2: ParamId,
}

pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl AttentionParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(
        params: &mut Params,
        prefix: &str,
        dims: AttentionDims,
        activation: HiddenActivation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let AttentionDims {
            annot_dim,
            embed_dim,
            state_dim,
            width,
        } = dims;
        let mut add = |name: &str, shape: Vec<usize>, data: Vec<f64>| {
            params.add(format!("{prefix}.{name}"), Tensor::new(shape, data)?)
        };
        let w_kh = add("w_kh", vec![width, annot_dim], xavier(rng, width, annot_dim))?;
        let w_kv = add("w_kv", vec![width, embed_dim], xavier(rng, width, embed_dim))?;
        let b1 = add("b1", vec![width], vec![0.0; width])?;
        let w_score = add("w_score", vec![width], xavier(rng, 1, width))?;
        let w_state = add("w_state", vec![state_dim], xavier(rng, 1, state_dim))?;
        let b2 = add("b2", vec![1], vec![0.0])?;
        Ok(AttentionParams {
            dims,
            activation,
            w_kh,
            w_kv,
            b1,
            w_score,
            w_state,
            b2,
        })
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.w_kh, self.w_kv, self.b1, self.w_score, self.w_state, self.b2]
    }

    pub fn bind(&self, g: &mut Graph, params: &Params) -> Result<BoundAttention> {
        Ok(BoundAttention {
            dims: self.dims,
            activation: self.activation,
            w_kh: g.param(params, self.w_kh)?,
            w_kv: g.param(params, self.w_kv)?,
            b1: g.param(params, self.b1)?,
            w_score: g.param(params, self.w_score)?,
            w_state: g.param(params, self.w_state)?,
            b2: g.param(params, self.b2)?,
        })
    }
}

/// Attention parameters bound onto one graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub dims: AttentionDims,
    pub activation: HiddenActivation,
    pub w_kh: Var,
    pub w_kv: Var,
    pub b1: Var,
    pub w_score: Var,
    pub w_state: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `c_t`, shape `[D]`.
    pub context: Var,
    /// `alpha_t`, shape `[L]`.
    pub weights: Var,
    /// Raw scores `e_t`, shape `[L]`.
    pub scores: Var,
}

/// Annotation-side terms that do not change across decode steps.
#[derive(Clone, Copy, Debug)]
pub struct PreparedAnnotations {
    /// `[L x D]`.
    pub annotations: Var,
    /// `[D x L]`.
    pub annotations_t: Var,
    /// `H W_kh^T`, `[L x k]`.
    projected: Var,
}

fn expect_vec(g: &Graph, v: Var, n: usize, what: &str) -> Result<()> {
    if g.value(v).shape() != [n] {
        return Err(Error::dim(
            "attention",
            format!("{what} has shape {:?}, expected [{n}]", g.value(v).shape()),
        ));
    }
    Ok(())
}

impl BoundAttention {
    fn activate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.activation {
            HiddenActivation::Tanh => g.tanh(x),
            HiddenActivation::Identity => Ok(x),
        }
    }

    fn shift(&self, g: &mut Graph, s_prev: Var) -> Result<Var> {
        let s = g.dot(self.w_state, s_prev)?;
        let s = g.reshape(s, vec![1])?;
        g.add(s, self.b2)
    }

    /// `e_tj` for a single annotation vector.
    pub fn score(&self, g: &mut Graph, s_prev: Var, h_j: Var, v_prev: Var) -> Result<Var> {
        expect_vec(g, s_prev, self.dims.state_dim, "decoder state")?;
        expect_vec(g, h_j, self.dims.annot_dim, "annotation vector")?;
        expect_vec(g, v_prev, self.dims.embed_dim, "word embedding")?;
        let a = g.matvec(self.w_kh, h_j)?;
        let b = g.matvec(self.w_kv, v_prev)?;
        let pre = g.add_n(&[a, b, self.b1])?;
        let hidden = self.activate(g, pre)?;
        let e = g.dot(self.w_score, hidden)?;
        let shift = self.shift(g, s_prev)?;
        let shift = g.reshape(shift, vec![])?;
        g.add(e, shift)
    }

    pub fn prepare(&self, g: &mut Graph, annotations: Var) -> Result<PreparedAnnotations> {
        match g.value(annotations).shape() {
            [l, d] if *l > 0 && *d == self.dims.annot_dim => {}
            s => {
                return Err(Error::dim(
                    "attention",
                    format!("annotations have shape {s:?}, expected [L x {}]", self.dims.annot_dim),
                ))
            }
        }
        let w_t = g.transpose(self.w_kh)?;
        let projected = g.matmul(annotations, w_t)?;
        let annotations_t = g.transpose(annotations)?;
        Ok(PreparedAnnotations {
            annotations,
            annotations_t,
            projected,
        })
    }

    pub fn attend_prepared(
        &self,
        g: &mut Graph,
        prepared: &PreparedAnnotations,
        s_prev: Var,
        v_prev: Var,
    ) -> Result<AttentionOutput> {
        expect_vec(g, s_prev, self.dims.state_dim, "decoder state")?;
        expect_vec(g, v_prev, self.dims.embed_dim, "word embedding")?;
        let u = g.matvec(self.w_kv, v_prev)?;
        let u = g.add(u, self.b1)?;
        let pre = g.add_row(prepared.projected, u)?;
        let hidden = self.activate(g, pre)?;
        let e = g.matvec(hidden, self.w_score)?;
        let shift = self.shift(g, s_prev)?;
        let scores = g.add_scalar(e, shift)?;
        let weights = g.softmax(scores)?;
        let context = g.matvec(prepared.annotations_t, weights)?;
        Ok(AttentionOutput {
            context,
            weights,
            scores,
        })
    }

    /// Context vector and weights for `annotations` (`[L x D]`).
    pub fn attend(&self, g: &mut Graph, annotations: Var, s_prev: Var, v_prev: Var) -> Result<AttentionOutput> {
        let prepared = self.prepare(g, annotations)?;
        self.attend_prepared(g, &prepared, s_prev, v_prev)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::check_params;

    const DIMS: AttentionDims = AttentionDims {
        annot_dim: 5,
        embed_dim: 3,
        state_dim: 4,
        width: 6,
    };

    fn setup(seed: u64) -> (Params, AttentionParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let att = AttentionParams::init(&mut params, "att", DIMS, HiddenActivation::Tanh, &mut rng).unwrap();
        for id in att.ids() {
            let t = params.value_mut(id);
            for x in t.data_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        (params, att, rng)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn zero_all(params: &mut Params, att: &AttentionParams) {
        for id in att.ids() {
            params.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn zero_params_score_zero() {
        let (mut params, att, mut rng) = setup(1);
        zero_all(&mut params, &att);
        let mut g = Graph::new();
        let b = att.bind(&mut g, &params).unwrap();
        let s = g.constant(rand_vec(&mut rng, 4)).unwrap();
        let h = g.constant(rand_vec(&mut rng, 5)).unwrap();
        let v = g.constant(rand_vec(&mut rng, 3)).unwrap();
        let e = b.score(&mut g, s, h, v).unwrap();
        assert_eq!(g.value(e).item(), 0.0);
    }

    #[test]
    fn bias_passes_through() {
        let (mut params, att, mut rng) = setup(2);
        zero_all(&mut params, &att);
        params.value_mut(att.b2).data_mut()[0] = 1.0;
        let mut g = Graph::new();
        let b = att.bind(&mut g, &params).unwrap();
        let s = g.constant(rand_vec(&mut rng, 4)).unwrap();
        let h = g.constant(rand_vec(&mut rng, 5)).unwrap();
        let v = g.constant(rand_vec(&mut rng, 3)).unwrap();
        let e = b.score(&mut g, s, h, v).unwrap();
        assert_eq!(g.value(e).item(), 1.0);
    }

    /// Plain-loop evaluation of the scoring MLP.
    fn score_by_hand(params: &Params, att: &AttentionParams, s: &[f64], h: &[f64], v: &[f64]) -> f64 {
        let k = DIMS.width;
        let w_kh = params.value(att.w_kh).data();
        let w_kv = params.value(att.w_kv).data();
        let b1 = params.value(att.b1).data();
        let w_e = params.value(att.w_score).data();
        let w_s = params.value(att.w_state).data();
        let b2 = params.value(att.b2).data()[0];
        let mut e = b2;
        for i in 0..k {
            let mut z = b1[i];
            for j in 0..h.len() {
                z += w_kh[i * h.len() + j] * h[j];
            }
            for j in 0..v.len() {
                z += w_kv[i * v.len() + j] * v[j];
            }
            e += w_e[i] * z.tanh();
        }
        for j in 0..s.len() {
            e += w_s[j] * s[j];
        }
        e
    }

    #[test]
    fn score_matches_hand_evaluation() {
        let (params, att, mut rng) = setup(3);
        let (s, h, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 5), rand_vec(&mut rng, 3));
        let mut g = Graph::new();
        let b = att.bind(&mut g, &params).unwrap();
        let (sv, hv, vv) = (
            g.constant(s.clone()).unwrap(),
            g.constant(h.clone()).unwrap(),
            g.constant(v.clone()).unwrap(),
        );
        let e = b.score(&mut g, sv, hv, vv).unwrap();
        let expected = score_by_hand(&params, &att, s.data(), h.data(), v.data());
        assert!((g.value(e).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_annotation_gets_all_weight() {
        let (params, att, mut rng) = setup(4);
        let mut g = Graph::new();
        let b = att.bind(&mut g, &params).unwrap();
        let h = rand_vec(&mut rng, 5);
        let hm = g.constant(h.clone().reshaped(vec![1, 5]).unwrap()).unwrap();
        let s = g.constant(rand_vec(&mut rng, 4)).unwrap();
        let v = g.constant(rand_vec(&mut rng, 3)).unwrap();
        let out = b.attend(&mut g, hm, s, v).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0]);
        for (c, x) in g.value(out.context).data().iter().zip(h.data()) {
            assert!((c - x).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_scores_average_annotations() {
        let (mut params, att, mut rng) = setup(5);
        params.value_mut(att.w_score).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut g = Graph::new();
        let b = att.bind(&mut g, &params).unwrap();
        let hdata: Vec<f64> = (0..3 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hm = g.constant(Tensor::matrix(3, 5, hdata.clone()).unwrap()).unwrap();
        let s = g.constant(rand_vec(&mut rng, 4)).unwrap();
        let v = g.constant(rand_vec(&mut rng, 3)).unwrap();
        let out = b.attend(&mut g, hm, s, v).unwrap();
        for &a in g.value(out.weights).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        for k in 0..5 {
            let mean = (hdata[k] + hdata[5 + k] + hdata[10 + k]) / 3.0;
            assert!((g.value(out.context).data()[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_matches_brute_force() {
        let (params, att, mut rng) = setup(6);
        let l = 5;
        let hdata: Vec<f64> = (0..l * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (s, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 3));
        let scores: Vec<f64> = (0..l)
            .map(|j| score_by_hand(&params, &att, s.data(), &hdata[j * 5..(j + 1) * 5], v.data()))
            .collect();
        let z: f64 = scores.iter().map(|e| e.exp()).sum();
        let alpha: Vec<f64> = scores.iter().map(|e| e.exp() / z).collect();
        let mut g = Graph::new();
        let b = att.bind(&mut g, &params).unwrap();
        let hm = g.constant(Tensor::matrix(l, 5, hdata.clone()).unwrap()).unwrap();
        let sv = g.constant(s).unwrap();
        let vv = g.constant(v).unwrap();
        let out = b.attend(&mut g, hm, sv, vv).unwrap();
        for k in 0..5 {
            let c: f64 = (0..l).map(|j| alpha[j] * hdata[j * 5 + k]).sum();
            assert!((g.value(out.context).data()[k] - c).abs() < 1e-12);
        }
        let total: f64 = g.value(out.weights).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_annotations_rejected() {
        let (params, att, _) = setup(7);
        let mut g = Graph::new();
        let b = att.bind(&mut g, &params).unwrap();
        let wrong = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        assert!(b.prepare(&mut g, wrong).is_err());
    }

    #[test]
    fn context_gradients_match_finite_differences() {
        let (mut params, att, mut rng) = setup(8);
        let hdata = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (s, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 3));
        // Small probe keeps |f| and with it the finite-difference roundoff
        // well under the 1e-8 floor; w_state and b2 shift every score equally
        // so their true gradient is exactly zero.
        let probe = Tensor::vector((0..5).map(|_| rng.gen_range(-0.01..0.01)).collect());
        let report = check_params(
            &mut params,
            |g, p| {
                let b = att.bind(g, p)?;
                let hm = g.constant(hdata.clone())?;
                let sv = g.constant(s.clone())?;
                let vv = g.constant(v.clone())?;
                let out = b.attend(g, hm, sv, vv)?;
                let w = g.constant(probe.clone())?;
                g.dot(out.context, w)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
