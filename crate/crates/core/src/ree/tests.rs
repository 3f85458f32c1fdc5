use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{msa_forward, BackboneConfig};
use crate::model::Model;
use crate::numerics::grad_check;

fn config(depth: usize, schedule: ExitSchedule, heads: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            depth,
            hidden_dim: 8,
            heads,
            channels: 1,
            image_size: 8,
            patch_size: 4,
            num_classes: 3,
        },
        ree: ReeConfig {
            heads: 2,
            bottleneck: 4,
            mlp_ratio: 1.35,
        },
        schedule,
    }
}

/// Random model with weights scaled up from the 0.02 init so that every path
/// carries a visible signal.
fn model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::init(cfg, &mut rng).unwrap();
    m.visit_mut(&mut |_, name, t| {
        if !name.contains("gamma") && !name.contains("beta") {
            *t = t.map(|v| v * 20.0);
        }
    });
    m
}

fn images(n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

fn run(m: &Model<f64>, imgs: &[Tensor<f64>], flags: ForwardFlags) -> (Graph<f64>, BoundModel, ForwardTrace) {
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true).unwrap();
    let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
    let trace = forward_with_exits(&mut g, &bound, &m.config, &refs, flags).unwrap();
    (g, bound, trace)
}

fn logits(g: &Graph<f64>, trace: &ForwardTrace) -> Vec<Tensor<f64>> {
    trace.exit_logits.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn schedule_validation() {
    assert!(ExitSchedule::new(vec![], 4, true).is_err());
    assert!(ExitSchedule::new(vec![2, 2, 4], 4, true).is_err());
    assert!(ExitSchedule::new(vec![1, 3], 4, true).is_err());
    assert!(ExitSchedule::new(vec![0, 4], 4, true).is_err());
    let s = ExitSchedule::every(3, 12, true).unwrap();
    assert_eq!(s.exit_blocks(), &[3, 6, 9, 12]);
    assert_eq!(s.exits_within(7), 2);
    assert_eq!(s.exit_at(9), Some(2));
    assert!(ExitSchedule::every(5, 12, true).is_err());
}

#[test]
fn positional_rows_follow_ree_placement() {
    let everywhere = ExitSchedule::every(3, 12, true).unwrap();
    let exits_only = ExitSchedule::every(3, 12, false).unwrap();
    assert_eq!(everywhere.ree_pos_rows(), 13);
    assert_eq!(exits_only.ree_pos_rows(), 5);
}

#[test]
fn default_ree_sizing() {
    let cfg = ReeConfig::default();
    assert_eq!(cfg.heads, 8);
    assert_eq!(cfg.bottleneck, 16);
    assert_eq!(cfg.mlp_hidden(32), 43);
    assert_eq!(cfg.mlp_hidden(16), 22);
    assert!(cfg.validate().is_ok());
    assert!(ReeConfig { heads: 3, ..cfg }.validate().is_err());
}

#[test]
fn ree_forward_shapes_and_residual_passthrough() {
    let cfg = config(2, ExitSchedule::every(1, 2, true).unwrap(), 2);
    let mut m = model(cfg.clone(), 1);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = g.constant(trunc_normal(&[3, 8], 1.0, &mut rng)).unwrap();
    let b = g.constant(trunc_normal(&[3, 8], 1.0, &mut rng)).unwrap();
    let out = ree_forward(&mut g, &[a, b], &bound.ree, &cfg.ree).unwrap();
    assert_eq!(out.tokens.len(), 2);
    assert_eq!(g.value(out.tokens[1]).shape(), &[3, 8]);
    assert!(matches!(
        ree_forward(&mut g, &[a, b, a, b], &bound.ree, &cfg.ree),
        Err(Error::Schedule(_))
    ));

    m.ree.block.wo = Tensor::zeros(m.ree.block.wo.shape());
    m.ree.block.w2 = Tensor::zeros(m.ree.block.w2.shape());
    let bound = m.bind(&mut g, true).unwrap();
    let out = ree_forward(&mut g, &[a, b], &bound.ree, &cfg.ree).unwrap();
    for (s, src) in [a, b].iter().enumerate() {
        let got = g.value(out.tokens[s]);
        for r in 0..3 {
            for j in 0..8 {
                let want = g.value(*src).row(r)[j] + m.ree.pos.row(s)[j];
                assert_eq!(got.row(r)[j], want);
            }
        }
    }
}

#[test]
fn recurrent_application_accumulates_shared_gradients() {
    let cfg = config(2, ExitSchedule::every(1, 2, true).unwrap(), 2);
    let m = model(cfg.clone(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t1: Tensor<f64> = trunc_normal(&[2, 8], 1.0, &mut rng);
    let t2: Tensor<f64> = trunc_normal(&[2, 8], 1.0, &mut rng);
    let mut params = Vec::new();
    m.ree.visit(&mut |_, t| params.push(t.clone()));
    let report = grad_check(
        |g, v| {
            let mut i = 0;
            let ree = m.ree.try_map(&mut |_| {
                i += 1;
                Ok(v[i - 1])
            })?;
            let meta = g.gather_rows(ree.meta, &[0, 0])?;
            let a = g.constant(t1.clone())?;
            let first = ree_forward(g, &[meta, a], &ree, &cfg.ree)?;
            let c = g.constant(t2.clone())?;
            let b = g.add(first.tokens[1], c)?;
            let second = ree_forward(g, &[meta, a, b], &ree, &cfg.ree)?;
            let s = g.concat_rows(&second.tokens)?;
            let s = g.gelu(s)?;
            g.sum(s)
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn classifier_cancellation_and_additivity() {
    let cfg = config(2, ExitSchedule::every(1, 2, true).unwrap(), 2);
    let m = model(cfg, 5);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z: Tensor<f64> = trunc_normal(&[2, 8], 1.0, &mut rng);
    let zv = g.constant(z.clone()).unwrap();
    let neg = g.constant(z.map(|v| -v)).unwrap();
    let logits = classify_exit(&mut g, neg, zv, &bound.classifier).unwrap();
    for r in 0..2 {
        assert_eq!(g.value(logits).row(r), m.classifier.bias.data());
    }

    let a: Tensor<f64> = trunc_normal(&[2, 8], 1.0, &mut rng);
    let b: Tensor<f64> = trunc_normal(&[2, 8], 1.0, &mut rng);
    let sum = Tensor::new(vec![2, 8], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
    let zero = g.constant(Tensor::zeros(&[2, 8])).unwrap();
    let (av, bv, sv) = (g.constant(a).unwrap(), g.constant(b).unwrap(), g.constant(sum).unwrap());
    let l1 = classify_exit(&mut g, av, bv, &bound.classifier).unwrap();
    let l2 = classify_exit(&mut g, sv, zero, &bound.classifier).unwrap();
    assert_eq!(g.value(l1), g.value(l2));
}

#[test]
fn classifier_gradient_reaches_both_inputs() {
    let cfg = config(2, ExitSchedule::every(1, 2, true).unwrap(), 2);
    let m = model(cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = [
        trunc_normal::<f64>(&[2, 8], 1.0, &mut rng),
        trunc_normal::<f64>(&[2, 8], 1.0, &mut rng),
    ];
    let report = grad_check(
        |g, v| {
            let cls = m.classifier.try_map(&mut |t| g.constant(t.clone()))?;
            let logits = classify_exit(g, v[0], v[1], &cls)?;
            g.cross_entropy(logits, &[0, 2])
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn modulate_touches_only_class_rows() {
    let cfg = config(2, ExitSchedule::every(1, 2, true).unwrap(), 2);
    let seq = cfg.backbone.seq_len();
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens = g.constant(trunc_normal(&[2 * seq, 8], 1.0, &mut rng)).unwrap();
    let m_last = g.constant(trunc_normal(&[2, 8], 1.0, &mut rng)).unwrap();
    let out = modulate(&mut g, tokens, m_last, seq).unwrap();
    for r in 0..2 * seq {
        if r % seq == 0 {
            assert_eq!(g.value(out).row(r), g.value(m_last).row(r / seq));
        } else {
            assert_eq!(g.value(out).row(r), g.value(tokens).row(r));
        }
    }
    assert!(modulate(&mut g, tokens, m_last, seq + 1).is_err());
}

#[test]
fn modulation_with_class_token_itself_is_a_fixed_point() {
    let cfg = config(2, ExitSchedule::every(1, 2, true).unwrap(), 2);
    let m = model(cfg.clone(), 10);
    let imgs = images(2, 11);
    let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false).unwrap();
    let seq = cfg.backbone.seq_len();
    let rows = class_rows(2, seq);
    let same = prefix_forward(&mut g, &bound.backbone, &cfg.backbone, &refs, 2, |g, _, z| {
        let zcls = g.gather_rows(z, &rows)?;
        modulate(g, z, zcls, seq)
    })
    .unwrap();
    let plain = prefix_forward(&mut g, &bound.backbone, &cfg.backbone, &refs, 2, |_, _, z| Ok(z)).unwrap();
    assert_eq!(g.value(same.last), g.value(plain.last));
}

#[test]
fn disabling_modulation_changes_later_blocks() {
    let cfg = config(3, ExitSchedule::every(1, 3, true).unwrap(), 2);
    let m = model(cfg, 12);
    let imgs = images(2, 13);
    let (g1, _, t1) = run(&m, &imgs, ForwardFlags { modulation: true });
    let (g2, _, t2) = run(&m, &imgs, ForwardFlags { modulation: false });
    let out1 = g1.value(t1.blocks[0].activation.output);
    let out2 = g2.value(t2.blocks[0].activation.output);
    assert_eq!(out1, out2);
    let l1 = logits(&g1, &t1);
    let l2 = logits(&g2, &t2);
    assert_eq!(l1[0], l2[0]);
    assert_ne!(
        g1.value(t1.blocks[1].activation.output),
        g2.value(t2.blocks[1].activation.output)
    );
    assert_ne!(l1[1], l2[1]);
}

#[test]
fn twelve_exit_schedule_with_three_block_budget() {
    let cfg = config(12, ExitSchedule::every(1, 12, true).unwrap(), 2);
    let m = model(cfg, 14).slice(3).unwrap();
    let imgs = images(2, 15);
    let (_, _, trace) = run(&m, &imgs, ForwardFlags::default());
    assert_eq!(trace.exit_logits.len(), 3);
    assert_eq!(trace.queue.len(), 4);
    assert_eq!(trace.ree_calls, 3);
}

#[test]
fn exit_only_mode_runs_ree_at_exits() {
    let cfg = config(12, ExitSchedule::every(3, 12, false).unwrap(), 2);
    let m = model(cfg, 16);
    assert_eq!(m.ree.pos.shape(), &[5, 8]);
    let imgs = images(2, 17);
    let (_, _, trace) = run(&m, &imgs, ForwardFlags::default());
    assert_eq!(trace.ree_calls, 4);
    assert_eq!(trace.queue.len(), 5);
    assert_eq!(trace.exit_logits.len(), 4);
    let ran: Vec<usize> = trace
        .blocks
        .iter()
        .filter(|b| b.ree.is_some())
        .map(|b| b.activation.block)
        .collect();
    assert_eq!(ran, vec![3, 6, 9, 12]);
}

#[test]
fn exit_only_with_every_block_equals_everywhere() {
    let every = config(4, ExitSchedule::every(1, 4, true).unwrap(), 2);
    let only = config(4, ExitSchedule::every(1, 4, false).unwrap(), 2);
    let m1 = model(every, 18);
    let mut m2 = m1.clone();
    m2.config = only;
    let imgs = images(3, 19);
    let (g1, _, t1) = run(&m1, &imgs, ForwardFlags::default());
    let (g2, _, t2) = run(&m2, &imgs, ForwardFlags::default());
    assert_eq!(logits(&g1, &t1), logits(&g2, &t2));
}

#[test]
fn budget_must_reach_first_exit() {
    let cfg = config(4, ExitSchedule::every(2, 4, true).unwrap(), 2);
    let m = model(cfg, 20).slice(1).unwrap();
    let imgs = images(1, 21);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true).unwrap();
    let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
    assert!(matches!(
        forward_with_exits(&mut g, &bound, &m.config, &refs, ForwardFlags::default()),
        Err(Error::Budget(_))
    ));
    assert!(matches!(
        forward_with_exits(&mut g, &bound, &m.config, &[], ForwardFlags::default()),
        Err(Error::Input(_))
    ));
}

#[test]
fn exit_logits_depend_only_on_their_prefix() {
    for modulation in [false, true] {
        let cfg = config(4, ExitSchedule::every(2, 4, true).unwrap(), 2);
        let m = model(cfg, 22);
        let mut perturbed = m.clone();
        for b in &mut perturbed.backbone.blocks[2..] {
            b.w1 = b.w1.map(|v| v * -3.0 + 0.1);
        }
        let imgs = images(2, 23);
        let flags = ForwardFlags { modulation };
        let (g1, _, t1) = run(&m, &imgs, flags);
        let (g2, _, t2) = run(&perturbed, &imgs, flags);
        let (l1, l2) = (logits(&g1, &t1), logits(&g2, &t2));
        assert_eq!(l1[0], l2[0]);
        assert_ne!(l1[1], l2[1]);
    }
}

#[test]
fn classification_uses_unmodulated_class_token() {
    let cfg = config(2, ExitSchedule::every(1, 2, true).unwrap(), 2);
    let m = model(cfg, 24);
    let imgs = images(2, 25);
    let (mut g, bound, trace) = run(&m, &imgs, ForwardFlags::default());
    let bt = &trace.blocks[0];
    let step = bt.ree.clone().unwrap();
    // class token recorded equals row 0 of the raw block output
    let raw = g.value(bt.activation.output).clone();
    for b in 0..2 {
        assert_eq!(g.value(bt.class_token).row(b), raw.row(b * trace.seq));
        assert_eq!(g.value(bt.next_input).row(b * trace.seq), g.value(step.m_last).row(b));
    }
    let expect = classify_exit(&mut g, step.m0, bt.class_token, &bound.classifier).unwrap();
    assert_eq!(g.value(expect), g.value(trace.exit_logits[0]));
    let wrong = classify_exit(&mut g, step.m0, step.m_last, &bound.classifier).unwrap();
    assert_ne!(g.value(wrong), g.value(trace.exit_logits[0]));
}

#[test]
fn attention_maps_match_direct_recomputation() {
    let cfg = config(3, ExitSchedule::every(1, 3, true).unwrap(), 2);
    let m = model(cfg.clone(), 26);
    let imgs = images(2, 27);
    let (mut g, bound, trace) = run(&m, &imgs, ForwardFlags::default());
    let n = cfg.backbone.num_tokens();
    for l in 1..=3 {
        let maps = attention_maps(&mut g, &bound, &cfg, &trace, l).unwrap();
        assert_eq!(maps.len(), 3);
        for map in &maps {
            for row in &map.weights {
                assert_eq!(row.len(), n);
                assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
                assert!(row.iter().sum::<f64>() <= 1.0 + 1e-12);
            }
        }
        // oracle: build [z_cls^{l-1}, z_{1:n}^{l-1}] per sample and run LN₁ + MSA
        let prev = if l == 1 {
            trace.initial_class_token
        } else {
            trace.blocks[l - 2].class_token
        };
        let input = g.value(trace.blocks[l - 1].activation.input).clone();
        let blk = &bound.backbone.blocks[l - 1];
        for b in 0..2 {
            let mut rows = g.value(prev).row(b).to_vec();
            for r in 1..trace.seq {
                rows.extend_from_slice(input.row(b * trace.seq + r));
            }
            let z = g.constant(Tensor::new(vec![trace.seq, 8], rows).unwrap()).unwrap();
            let h = g.layer_norm(z, blk.ln1_gamma, blk.ln1_beta, LN_EPS).unwrap();
            let (_, attn) = msa_forward(&mut g, h, blk, trace.seq, 2).unwrap();
            let probs = g.attention_probs(attn).unwrap();
            for j in 0..n {
                let mean = (probs.data()[1 + j] + probs.data()[trace.seq * trace.seq + 1 + j]) / 2.0;
                assert!((maps[0].weights[b][j] - mean).abs() < 1e-12);
            }
        }
    }
    assert!(matches!(
        attention_maps(&mut g, &bound, &cfg, &trace, 4),
        Err(Error::Range(_))
    ));
    assert!(attention_maps(&mut g, &bound, &cfg, &trace, 0).is_err());
}

#[test]
fn single_head_attention_map_is_the_head() {
    let cfg = config(2, ExitSchedule::every(1, 2, true).unwrap(), 1);
    let m = model(cfg.clone(), 28);
    let imgs = images(1, 29);
    let (mut g, bound, trace) = run(&m, &imgs, ForwardFlags::default());
    let maps = attention_maps(&mut g, &bound, &cfg, &trace, 2).unwrap();
    let input = g.value(trace.blocks[1].activation.input).clone();
    let blk = &bound.backbone.blocks[1];
    let mut rows = g.value(trace.blocks[0].class_token).row(0).to_vec();
    rows.extend_from_slice(&input.data()[8..]);
    let z = g.constant(Tensor::new(vec![trace.seq, 8], rows).unwrap()).unwrap();
    let h = g.layer_norm(z, blk.ln1_gamma, blk.ln1_beta, LN_EPS).unwrap();
    let (_, attn) = msa_forward(&mut g, h, blk, trace.seq, 1).unwrap();
    let probs = g.attention_probs(attn).unwrap();
    assert_eq!(&maps[0].weights[0][..], &probs.data()[1..trace.seq]);
}

#[test]
fn exit_only_mode_has_no_ree_maps_between_exits() {
    let cfg = config(4, ExitSchedule::every(2, 4, false).unwrap(), 2);
    let m = model(cfg.clone(), 30);
    let imgs = images(1, 31);
    let (mut g, bound, trace) = run(&m, &imgs, ForwardFlags::default());
    assert_eq!(attention_maps(&mut g, &bound, &cfg, &trace, 1).unwrap().len(), 1);
    assert_eq!(attention_maps(&mut g, &bound, &cfg, &trace, 2).unwrap().len(), 3);
}
