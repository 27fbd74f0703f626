//! Finite-difference sweeps over every differentiable op and over the full
//! teacher-forced loss of a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::HiddenActivation;
use crate::autodiff::{check_inputs, check_params, GradCheckReport, Graph, Tensor, Var};
use crate::decoder::{teacher_forced_loss, CaptionModel, Dropout, HeadKind, ModelConfig};
use crate::embedding::{EmbeddingTable, Vocabulary, END_ID, START_ID};
use crate::encoder::AnnotationSet;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub seed: u64,
    pub max_relative_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero so `relu` is differentiable at every input.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for x in t.data_mut() {
        if rng.gen::<bool>() {
            *x = -*x;
        }
    }
    t
}

type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Reduces a tensor-valued op to a scalar with a fixed random probe.
fn probed(probe: Tensor, op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Body {
    Box::new(move |g, xs| {
        let y = op(g, xs)?;
        let flat = g.reshape(y, vec![probe.len()])?;
        let r = g.constant(probe.clone())?;
        g.dot(flat, r)
    })
}

/// One random instance per op.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&str, Vec<Tensor>, Body)> = Vec::new();
    let p = |rng: &mut ChaCha8Rng, n: usize| uniform(rng, &[n], -1.0, 1.0);

    let probe = p(&mut rng, 6);
    cases.push((
        "matmul",
        vec![uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 2], -1.0, 1.0)],
        probed(probe, |g, x| g.matmul(x[0], x[1])),
    ));
    let probe = p(&mut rng, 3);
    cases.push((
        "matvec",
        vec![uniform(&mut rng, &[3, 5], -1.0, 1.0), uniform(&mut rng, &[5], -1.0, 1.0)],
        probed(probe, |g, x| g.matvec(x[0], x[1])),
    ));
    let probe = p(&mut rng, 6);
    cases.push(("transpose", vec![uniform(&mut rng, &[2, 3], -1.0, 1.0)], probed(probe, |g, x| g.transpose(x[0]))));
    let probe = p(&mut rng, 6);
    cases.push((
        "reshape",
        vec![uniform(&mut rng, &[6], -1.0, 1.0)],
        probed(probe, |g, x| g.reshape(x[0], vec![3, 2])),
    ));
    for (name, op) in [
        ("add", Graph::add as fn(&mut Graph, Var, Var) -> Result<Var>),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
    ] {
        let probe = p(&mut rng, 5);
        cases.push((
            name,
            vec![uniform(&mut rng, &[5], -1.0, 1.0), uniform(&mut rng, &[5], -1.0, 1.0)],
            probed(probe, move |g, x| op(g, x[0], x[1])),
        ));
    }
    let probe = p(&mut rng, 4);
    cases.push(("scale", vec![p(&mut rng, 4)], probed(probe, |g, x| g.scale(x[0], -1.7))));
    let probe = p(&mut rng, 4);
    let mask: Vec<f64> = (0..4).map(|i| if i % 2 == 0 { 2.0 } else { 0.0 }).collect();
    cases.push((
        "mul_const",
        vec![p(&mut rng, 4)],
        probed(probe, move |g, x| g.mul_const(x[0], mask.clone())),
    ));
    let probe = p(&mut rng, 6);
    cases.push((
        "add_row",
        vec![uniform(&mut rng, &[2, 3], -1.0, 1.0), p(&mut rng, 3)],
        probed(probe, |g, x| g.add_row(x[0], x[1])),
    ));
    let probe = p(&mut rng, 4);
    cases.push((
        "add_scalar",
        vec![p(&mut rng, 4), Tensor::scalar(rng.gen_range(-1.0..1.0))],
        probed(probe, |g, x| g.add_scalar(x[0], x[1])),
    ));
    for (name, op) in [
        ("sigmoid", Graph::sigmoid as fn(&mut Graph, Var) -> Result<Var>),
        ("tanh", Graph::tanh),
        ("relu", Graph::relu),
        ("softmax", Graph::softmax),
    ] {
        let probe = p(&mut rng, 6);
        let x = if name == "relu" { off_kink(&mut rng, &[6]) } else { uniform(&mut rng, &[6], -2.0, 2.0) };
        cases.push((name, vec![x], probed(probe, move |g, x| op(g, x[0]))));
    }
    let probe = p(&mut rng, 5);
    cases.push((
        "concat",
        vec![p(&mut rng, 2), p(&mut rng, 3)],
        probed(probe, |g, x| g.concat(&[x[0], x[1]])),
    ));
    let probe = p(&mut rng, 3);
    cases.push(("slice", vec![p(&mut rng, 7)], probed(probe, |g, x| g.slice(x[0], 2, 3))));
    let probe = p(&mut rng, 2 * 2 * 3);
    cases.push((
        "mean_pool_2x2",
        vec![uniform(&mut rng, &[4, 4, 3], -1.0, 1.0)],
        probed(probe, |g, x| g.mean_pool_2x2(x[0])),
    ));
    cases.push(("sum", vec![p(&mut rng, 5)], Box::new(|g: &mut Graph, x: &[Var]| g.sum(x[0]))));
    cases.push((
        "dot",
        vec![p(&mut rng, 5), p(&mut rng, 5)],
        Box::new(|g: &mut Graph, x: &[Var]| g.dot(x[0], x[1])),
    ));
    let probe = p(&mut rng, 4);
    cases.push((
        "add_n",
        vec![p(&mut rng, 4), p(&mut rng, 4), p(&mut rng, 4)],
        probed(probe, |g, x| g.add_n(&[x[0], x[1], x[2]])),
    ));
    let target = rng.gen_range(0..10);
    cases.push((
        "cross_entropy",
        vec![uniform(&mut rng, &[10], -2.0, 2.0)],
        Box::new(move |g: &mut Graph, x: &[Var]| g.cross_entropy(x[0], target)),
    ));
    cases.push((
        "mse",
        vec![p(&mut rng, 16), p(&mut rng, 16)],
        Box::new(|g: &mut Graph, x: &[Var]| g.mse(x[0], x[1])),
    ));

    cases
        .into_iter()
        .map(|(name, inputs, body)| {
            let report = check_inputs(body, &inputs, FD_STEP)?;
            Ok(OpCheck {
                op: name.to_string(),
                seed,
                max_relative_error: report.max_relative_error,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckDims {
    pub depth: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Annotation count; laid out as a `1 x L` grid.
    pub annot_len: usize,
    pub annot_dim: usize,
    pub attn_width: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    pub head: HeadKind,
}

impl Default for ModelCheckDims {
    fn default() -> Self {
        ModelCheckDims {
            depth: 2,
            hidden: 16,
            embed_dim: 8,
            annot_len: 4,
            annot_dim: 8,
            attn_width: 8,
            vocab_size: 12,
            caption_len: 5,
            head: HeadKind::Regression,
        }
    }
}

/// Gradient check of the mean teacher-forced loss w.r.t. every parameter of
/// a randomly initialised model on random inputs.
pub fn model_check(dims: ModelCheckDims, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        depth: dims.depth,
        hidden: dims.hidden,
        embed_dim: dims.embed_dim,
        annot_dim: dims.annot_dim,
        attn_width: dims.attn_width,
        vocab_size: dims.vocab_size,
        head: dims.head,
        attention_activation: HiddenActivation::Tanh,
        init_from_annotations: false,
        forget_bias: 1.0,
    };
    let model = CaptionModel::new(cfg.clone(), rng.gen())?;
    let tokens = (3..dims.vocab_size).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(tokens, 1)?;
    // Targets near the scale of the initial head outputs keep |loss| small;
    // the central-difference quotient then loses less to the rounding of the
    // loss itself, which matters for components below the 1e-8 floor.
    let table = EmbeddingTable::new(
        vocab,
        dims.embed_dim,
        (0..dims.vocab_size * dims.embed_dim).map(|_| rng.gen_range(-0.1f32..0.1)).collect(),
    )?;
    let annotations = AnnotationSet::new(
        "check",
        1,
        dims.annot_len,
        dims.annot_dim,
        (0..dims.annot_len * dims.annot_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?;
    let mut caption = vec![START_ID];
    caption.extend((0..dims.caption_len).map(|_| rng.gen_range(3..dims.vocab_size)));
    caption.push(END_ID);
    let mut params = model.params().clone();
    check_params(
        &mut params,
        |g, p| {
            let bound = CaptionModel::from_params(cfg.clone(), p)?.bind(g)?;
            Ok(teacher_forced_loss(g, &bound, &table, &annotations, &caption, &mut Dropout::eval())?.loss)
        },
        FD_STEP,
    )
}
