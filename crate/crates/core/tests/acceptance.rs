//! One test per acceptance criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use embcap::autodiff::{softmax, Graph, Tensor};
use embcap::decoder::{greedy_decode, param_count, stacked_step, CaptionModel, Dropout, HeadKind};
use embcap::embedding::{EmbeddingTable, START_ID};
use embcap::harness::{
    depth_study, evaluate_items, grad_experiment, mean_loss, model_check, op_suite, train, GradExperimentConfig,
    ModelCheckDims, TrainConfig, TrainData, TrainOutcome, REFERENCE_DEPTHS,
};
use embcap::metrics::{bleu, cider, rouge_l, score, ROUGE_BETA};

use common::{bleu_oracle, cider_oracle, overfit_config, rouge_oracle, Corpus};

fn report(n: usize, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let mut worst_op = (String::new(), 0.0f64);
    let mut worst_model = 0.0f64;
    for seed in 0..20 {
        for c in op_suite(seed).unwrap() {
            if c.max_relative_error > worst_op.1 {
                worst_op = (c.op, c.max_relative_error);
            }
        }
        let r = model_check(ModelCheckDims::default(), seed).unwrap();
        worst_model = worst_model.max(r.max_relative_error);
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst_op.1 < 1e-4 && worst_model < 1e-4 && secs < 120.0;
    report(
        1,
        ok,
        format!(
            "20 seeds, h=1e-5: worst op {} {:.2e}, worst model {:.2e}, {secs:.1}s",
            worst_op.0, worst_op.1, worst_model
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_2_gradient_magnitudes() {
    let r = grad_experiment(&GradExperimentConfig::default()).unwrap();
    assert_eq!(r.config.vocab_size, 20000);
    let uniform_ok = (r.softmax_uniform_nontarget - 5.0e-5).abs() < 1e-12;
    let random_ok = (1e-5..=1e-4).contains(&r.softmax_random_mean);
    let regression_ok = r.regression_unit_residual == 0.03125;
    let ratio = r.regression_unit_residual / r.softmax_uniform_nontarget;
    let ok = uniform_ok && random_ok && regression_ok && ratio >= 1e2;
    report(
        2,
        ok,
        format!(
            "softmax uniform {:.6e}, softmax random mean {:.3e}, regression {} (ratio {ratio:.0})",
            r.softmax_uniform_nontarget, r.softmax_random_mean, r.regression_unit_residual
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_3_depth_8_trainability() {
    let toy = common::toy(20, 1, 64);
    // With 2 minibatches per epoch, plateau decay fires while the model is
    // still learning the template words and freezes it before the images
    // start to matter. Smaller batches and a constant rate get past that.
    let cfg = TrainConfig {
        batch_size: 2,
        decay: 1.0,
        ..overfit_config(8)
    };
    assert_eq!((cfg.hidden, cfg.embed_dim, cfg.epochs), (128, 64, 500));
    assert!(toy.table.vocab().len() <= 200);
    let data = common::data(&toy, &cfg);
    let started = Instant::now();
    let out = train(&cfg, &data, &toy.table, None, |_| {}).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let last = mean_loss(&out.model, &toy.table, &data.train, cfg.precision).unwrap();
    let min_layer0 = out.log.iter().map(|e| e.min_grad_norms[0]).fold(f64::INFINITY, f64::min);
    let ratio = last / out.initial_loss;
    let ok = ratio < 0.1 && min_layer0 > 1e-8 && secs < 900.0;
    report(
        3,
        ok,
        format!(
            "loss {:.4e} -> {last:.4e} ({:.2}% of initial), min layer-0 grad norm {min_layer0:.3e}, {secs:.0}s",
            out.initial_loss,
            100.0 * ratio
        ),
    );
    assert!(ok);
}

struct Overfit {
    table: EmbeddingTable,
    data: TrainData,
    cfg: TrainConfig,
    outcome: TrainOutcome,
}

fn overfit_depth_2() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let toy = common::toy(20, 1, 64);
        let cfg = overfit_config(2);
        let data = common::data(&toy, &cfg);
        let outcome = train(&cfg, &data, &toy.table, None, |_| {}).unwrap();
        Overfit {
            table: toy.table,
            data,
            cfg,
            outcome,
        }
    })
}

#[test]
fn criterion_4_overfit_fidelity() {
    let run = overfit_depth_2();
    let (scores, decoded) =
        evaluate_items(&run.outcome.best, &run.table, &run.data.train, run.cfg.max_len, run.cfg.metric).unwrap();
    let exact = decoded
        .iter()
        .zip(&run.data.train)
        .filter(|(d, item)| item.references.contains(&d.words))
        .count();
    let ok = scores.bleu4 >= 90.0;
    report(
        4,
        ok,
        format!(
            "BLEU-4 {:.2} over {} training images ({exact} decoded exactly)",
            scores.bleu4,
            decoded.len()
        ),
    );
    assert!(ok);
}

fn row(table: &EmbeddingTable, g: &mut Graph, word: usize) -> embcap::autodiff::Var {
    g.constant(Tensor::new(vec![table.dim()], table.row_f64(word)).unwrap()).unwrap()
}

#[test]
fn criterion_5_attention_properties() {
    let run = overfit_depth_2();
    let model = &run.outcome.best;
    let table = &run.table;
    let steps_per_image = 50;
    let (mut steps, mut worst_sum, mut min_alpha, mut worst_shift) = (0usize, 0.0f64, f64::INFINITY, 0.0f64);
    let mut max_vprev_change = 0.0f64;
    for item in &run.data.train {
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let h = g.constant(item.annotations.to_tensor()).unwrap();
        let prepared = bound.attention.prepare(&mut g, h).unwrap();
        let mut state = bound.initial_state(&mut g, &prepared).unwrap();
        let mut prev = START_ID;
        for t in 0..steps_per_image {
            let v_prev = row(table, &mut g, prev);
            let att = bound.attention.attend_prepared(&mut g, &prepared, state.top(), v_prev).unwrap();
            let alpha = g.value(att.weights).data().to_vec();
            let scores = g.value(att.scores).data().to_vec();
            steps += 1;
            min_alpha = min_alpha.min(alpha.iter().cloned().fold(f64::INFINITY, f64::min));
            worst_sum = worst_sum.max((alpha.iter().sum::<f64>() - 1.0).abs());
            for c in [-7.5, 0.3, 42.0] {
                let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
                for (a, b) in softmax(&shifted).iter().zip(&alpha) {
                    worst_shift = worst_shift.max((a - b).abs());
                }
            }
            if t == 0 {
                for w in 0..table.len() {
                    let v = row(table, &mut g, w);
                    let other = bound.attention.attend_prepared(&mut g, &prepared, state.top(), v).unwrap();
                    for (a, b) in g.value(other.weights).data().iter().zip(&alpha) {
                        max_vprev_change = max_vprev_change.max((a - b).abs());
                    }
                }
            }
            let (out, next) =
                stacked_step(&mut g, &bound, v_prev, att.context, &state, &mut Dropout::eval()).unwrap();
            state = next;
            // Free-running past <end> so every image contributes the same
            // number of steps; <start> is never fed back.
            prev = table
                .nearest_excluding(g.value(out).data(), run.cfg.metric, &[START_ID])
                .unwrap();
        }
    }

    // Moving the state-dependent score offset leaves every decode's weights unchanged.
    let mut shifted_model: CaptionModel = model.clone();
    let b2 = shifted_model.attention().b2;
    shifted_model.params_mut().value_mut(b2).data_mut()[0] += 3.0;
    let mut worst_param_shift = 0.0f64;
    for item in &run.data.train {
        let a = greedy_decode(model, table, &item.annotations, run.cfg.max_len, run.cfg.metric).unwrap();
        let b = greedy_decode(&shifted_model, table, &item.annotations, run.cfg.max_len, run.cfg.metric).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for (x, y) in a.weights.iter().flatten().zip(b.weights.iter().flatten()) {
            worst_param_shift = worst_param_shift.max((x - y).abs());
        }
    }

    let ok = steps >= 1000
        && min_alpha >= 0.0
        && worst_sum < 1e-6
        && worst_shift < 1e-9
        && worst_param_shift < 1e-9
        && max_vprev_change > 1e-3;
    report(
        5,
        ok,
        format!(
            "{steps} steps: min alpha {min_alpha:.3e}, max |sum-1| {worst_sum:.1e}, shift {worst_shift:.1e} \
             (offset param {worst_param_shift:.1e}), max alpha change over previous word {max_vprev_change:.3e}"
        ),
    );
    assert!(ok);
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn criterion_6_metric_oracles() {
    let mut rng = common::rng(2024);
    let (mut worst_text, mut worst_cider) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let corpus: Corpus = common::random_corpus(&mut rng);
        let eval = common::to_eval(&corpus);
        for n in 1..=4 {
            worst_text = worst_text.max((bleu(&eval, n).unwrap() - bleu_oracle(&corpus, n)).abs());
        }
        worst_text = worst_text.max((rouge_l(&eval, ROUGE_BETA).unwrap() - rouge_oracle(&corpus)).abs());
        worst_cider = worst_cider.max((cider(&eval).unwrap() - cider_oracle(&corpus)).abs());
    }

    let perfect: Corpus = vec![
        (words("a red circle on the left"), vec![words("a red circle on the left")]),
        (words("a blue square at the top"), vec![words("a blue square at the top")]),
    ];
    let disjoint: Corpus = vec![
        (words("one two three four"), vec![words("a b c d")]),
        (words("five six seven eight"), vec![words("e f g h")]),
    ];
    let p = score(&common::to_eval(&perfect)).unwrap();
    let d = score(&common::to_eval(&disjoint)).unwrap();
    let trivial_ok = [p.bleu1, p.bleu2, p.bleu3, p.bleu4, p.rouge_l] == [100.0; 5]
        && [d.bleu1, d.bleu2, d.bleu3, d.bleu4, d.rouge_l, d.cider.unwrap()] == [0.0; 6];

    let ok = worst_text < 1e-9 && worst_cider < 1e-6 && trivial_ok;
    report(
        6,
        ok,
        format!("50 corpora: BLEU/ROUGE max diff {worst_text:.1e}, CIDEr max diff {worst_cider:.1e}, trivial cases exact: {trivial_ok}"),
    );
    assert!(ok);
}

#[test]
fn criterion_7_parameter_count_direction() {
    let mut checked = 0;
    let mut ok = true;
    for cfg in [TrainConfig::desk(), TrainConfig::full()] {
        for &depth in &REFERENCE_DEPTHS {
            for vocab in [cfg.vocab_size, cfg.embed_dim + 1, 20000] {
                let count = |head| {
                    param_count(depth, cfg.hidden, cfg.embed_dim, vocab, cfg.annot_dim, cfg.attn_width, head)
                };
                let (r, s) = (count(HeadKind::Regression), count(HeadKind::Softmax));
                let gap = (cfg.hidden + 1) * (vocab - cfg.embed_dim);
                ok &= vocab > cfg.embed_dim && r < s && s - r == gap;
                checked += 1;
            }
        }
    }
    let full = TrainConfig::full();
    let r8 = param_count(8, full.hidden, full.embed_dim, full.vocab_size, full.annot_dim, full.attn_width, HeadKind::Regression);
    report(
        7,
        ok,
        format!("{checked} (depth, dims, |V|) combinations; full-size depth 8 regression decoder {:.1}M", r8 as f64 / 1e6),
    );
    assert!(ok);
}

#[test]
fn criterion_8_non_reproducibility_statement() {
    println!(
        "criterion 8: PASS statement: the MS-COCO scores (CIDEr 125.0, BLEU-4 50.5, ROUGE-L 64.9, METEOR 34.7) \
         need full-scale MS-COCO training with a pretrained Inception encoder and are not reproduced here; \
         criteria 1-7 are the acceptance basis"
    );
    let toy = common::toy(20, 1, 64);
    let base = TrainConfig {
        epochs: 150,
        ..overfit_config(8)
    };
    let data = common::data(&toy, &base);
    let rows = depth_study(&base, &[5, 8, 10], &data, &toy.table, |_| {}).unwrap();
    let shape: Vec<String> = rows
        .iter()
        .map(|r| format!("depth {} BLEU-4 {:.1} loss {:.2e}", r.depth, r.train_bleu4, r.final_loss))
        .collect();
    let b = |d: usize| rows.iter().find(|r| r.depth == d).map(|r| r.train_bleu4).unwrap();
    let holds = b(8) > b(5) && b(8) > b(10);
    println!(
        "criterion 8: soft check (not a gate): depth 8 ahead of 5 and 10: {holds}; {}",
        shape.join(", ")
    );
}
