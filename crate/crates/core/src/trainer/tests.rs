use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::Sample;
use crate::heads::visual_logits;
use crate::prompts::EncoderConfig;
use crate::sopool::TokenMatrix;

/// Class `c` has its class token near `3 * e_c`; tokens are noise.
fn separable(classes: usize, per_class: usize, d_cls: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for i in 0..classes * per_class {
        let label = i % classes;
        let cls = (0..d_cls)
            .map(|j| if j == label { 3.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
            .collect();
        let tokens = Mat::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        samples.push(Sample {
            label,
            cls,
            tokens: TokenMatrix::new(tokens).unwrap(),
        });
    }
    Dataset::new(classes, samples).unwrap()
}

fn quick_cfg(mode: HeadMode, iters: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 0.01,
        warmup_iters: 5,
        total_iters: iters,
        head_mode: mode,
        sopool: SoPoolConfig {
            reduced_dim: 3,
            ..SoPoolConfig::default()
        },
        loss_log_every: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn uniform_logits_cost_ln_c() {
    let l = compute_loss(&[vec![0.0; 4]], &[2], &[vec![0.0; 4]], &[1], 1.0).unwrap();
    assert!((l.image_loss - 4f64.ln()).abs() < 1e-12);
    assert!((l.text_loss - 4f64.ln()).abs() < 1e-12);
    assert!((l.loss - 2.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_text_weight_is_image_only() {
    let img = vec![vec![1.0, -2.0, 0.5]];
    let txt = vec![vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let both = compute_loss(&img, &[1], &txt, &[0, 1], 0.0).unwrap();
    let alone = compute_loss(&img, &[1], &[], &[], 1.0).unwrap();
    assert_eq!(both.loss, alone.loss);
    assert!(both.grad_text.iter().flatten().all(|g| *g == 0.0));
}

#[test]
fn label_out_of_range() {
    assert!(matches!(compute_loss(&[vec![0.0; 3]], &[3], &[], &[], 1.0), Err(Error::Validation(_))));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let txt: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let (il, tl) = ([3, 0], [0, 1, 2, 3]);
    let w = 0.7;
    let out = compute_loss(&img, &il, &txt, &tl, w).unwrap();
    let h = 1e-5;
    for (side, b, j) in [(0, 0, 1), (0, 1, 3), (1, 2, 0), (1, 3, 3)] {
        let bump = |s: f64| {
            let (mut i2, mut t2) = (img.clone(), txt.clone());
            if side == 0 {
                i2[b][j] += s;
            } else {
                t2[b][j] += s;
            }
            compute_loss(&i2, &il, &t2, &tl, w).unwrap().loss
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        let analytic = if side == 0 { out.grad_image[b][j] } else { out.grad_text[b][j] };
        assert!((numeric - analytic).abs() / analytic.abs().max(1e-6) < 1e-4);
    }
}

#[test]
fn full_training_gradient_matches_finite_differences() {
    let data = separable(3, 4, 6, 2);
    let text: Vec<TextFeature> = (0..3)
        .map(|label| TextFeature {
            label,
            feature: (0..6).map(|j| ((label * 7 + j) as f64).sin()).collect(),
        })
        .collect();
    let cfg = quick_cfg(HeadMode::ClsPlusSo, 10);
    let trainer = Trainer::new(&data, TextSource::Fixed(&text), &cfg).unwrap();
    let batch = [0, 4, 8];
    let (_, grads, _) = trainer.gradients(&batch).unwrap();
    let mut probe = Trainer::new(&data, TextSource::Fixed(&text), &cfg).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for t in 0..6 {
        let len = grads.tensors()[t].len();
        for j in (0..len).step_by(2) {
            let orig = probe.params().tensors()[t][j];
            probe.params_mut().tensors_mut()[t][j] = orig + h;
            let up = probe.gradients(&batch).unwrap().0.loss;
            probe.params_mut().tensors_mut()[t][j] = orig - h;
            let down = probe.gradients(&batch).unwrap().0.loss;
            probe.params_mut().tensors_mut()[t][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors()[t][j];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "{} [{j}]: {analytic} vs {numeric}", PARAM_NAMES[t]);
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn separable_set_is_fit_perfectly() {
    let data = separable(4, 20, 8, 5);
    let ep = sample_few_shot(&data.labels(), 4, 16, 0).unwrap();
    for mode in HeadMode::ALL {
        let out = train_episode(&data, TextSource::None, &ep, &quick_cfg(mode, 150)).unwrap();
        assert_eq!(out.train_accuracy, 1.0, "{mode}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let data = separable(3, 6, 5, 1);
    let ep = sample_few_shot(&data.labels(), 3, 4, 3).unwrap();
    let cfg = quick_cfg(HeadMode::ClsPlusSo, 40);
    let a = train_episode(&data, TextSource::None, &ep, &cfg).unwrap();
    let b = train_episode(&data, TextSource::None, &ep, &cfg).unwrap();
    let bits = |h: &[(usize, f64)]| h.iter().map(|(i, l)| (*i, l.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_history.last().unwrap().0, 39);
}

#[test]
fn zero_iterations_returns_init() {
    let data = separable(4, 5, 6, 8);
    let ep = sample_few_shot(&data.labels(), 4, 2, 0).unwrap();
    let cfg = TrainConfig {
        total_iters: 0,
        ..quick_cfg(HeadMode::ClsPlusAvg, 1)
    };
    let out = train_episode(&data, TextSource::None, &ep, &cfg).unwrap();
    let dims = HeadDims {
        classes: 4,
        d_cls: 6,
        d_tok: 4,
        reduced_dim: 3,
    };
    assert_eq!(out.params, HeadParams::init(dims, HeadMode::ClsPlusAvg, 0));
    assert!(out.loss_history.is_empty());
}

#[test]
fn config_invariants() {
    let base = TrainConfig::default();
    assert!(base.validate().is_ok());
    for bad in [
        TrainConfig { warmup_iters: 12800, ..base.clone() },
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig { base_lr: 0.0, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn evaluation_examples() {
    // class tokens are one-hot, classifier is the identity
    let samples: Vec<Sample> = (0..6)
        .map(|i| Sample {
            label: i % 3,
            cls: (0..3).map(|j| if j == i % 3 { 1.0 } else { 0.0 }).collect(),
            tokens: TokenMatrix::new(Mat::zeros(2, 2)).unwrap(),
        })
        .collect();
    let data = Dataset::new(3, samples).unwrap();
    let dims = HeadDims {
        classes: 3,
        d_cls: 3,
        d_tok: 2,
        reduced_dim: 2,
    };
    let mut p = HeadParams::init(dims, HeadMode::ClsOnly, 0);
    p.shared_w = Mat::identity(3);
    let sp = SoPoolConfig::default();
    assert_eq!(evaluate_top1(&p, &data, HeadMode::ClsOnly, &sp).unwrap(), 1.0);

    // all-zero classifier ties every class; class 0 wins each time
    p.shared_w = Mat::zeros(3, 3);
    assert_eq!(predict(&p, &data, HeadMode::ClsOnly, &sp).unwrap(), vec![0; 6]);
    assert!((evaluate_top1(&p, &data, HeadMode::ClsOnly, &sp).unwrap() - 1.0 / 3.0).abs() < 1e-12);

    let empty = Dataset::new(3, Vec::new()).unwrap();
    assert!(matches!(evaluate_top1(&p, &empty, HeadMode::ClsOnly, &sp), Err(Error::Validation(_))));
}

#[test]
fn random_params_score_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let c = 4;
    let samples: Vec<Sample> = (0..2000)
        .map(|_| Sample {
            label: crate::rng::below(&mut rng, c),
            cls: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            tokens: TokenMatrix::new(Mat::zeros(2, 2)).unwrap(),
        })
        .collect();
    let data = Dataset::new(c, samples).unwrap();
    let dims = HeadDims {
        classes: c,
        d_cls: 8,
        d_tok: 2,
        reduced_dim: 2,
    };
    let p = HeadParams::init(dims, HeadMode::ClsOnly, 3);
    let acc = evaluate_top1(&p, &data, HeadMode::ClsOnly, &SoPoolConfig::default()).unwrap();
    // binomial sd at n = 2000, p = 0.25 is about 0.0097
    assert!((acc - 0.25).abs() < 0.04, "{acc}");
}

#[test]
fn text_only_step_moves_image_logits() {
    let data = separable(3, 4, 6, 4);
    let text: Vec<TextFeature> = (0..3)
        .map(|label| TextFeature {
            label,
            feature: (0..6).map(|j| if j == label { 1.0 } else { 0.1 }).collect(),
        })
        .collect();
    let cfg = quick_cfg(HeadMode::ClsPlusSo, 10);
    let mut trainer = Trainer::new(&data, TextSource::Fixed(&text), &cfg).unwrap();
    let s = &data.samples()[0];
    let before = visual_logits(&s.cls, &s.tokens, trainer.params(), cfg.head_mode, &cfg.sopool).unwrap();
    let so_before = trainer.params().so_w.clone();
    trainer.step(0.01, &[]).unwrap();
    let after = visual_logits(&s.cls, &s.tokens, trainer.params(), cfg.head_mode, &cfg.sopool).unwrap();
    assert_ne!(before, after);
    assert_eq!(trainer.params().so_w, so_before);
    assert!(std::ptr::eq(trainer.params().image_classifier(), trainer.params().text_classifier()));
}

#[test]
fn coop_training_updates_context_only_on_the_text_side() {
    let data = separable(2, 6, 8, 9);
    let encoder = ToyTextEncoder::new(EncoderConfig {
        embed_dim: 16,
        d_cls: 8,
        ..EncoderConfig::default()
    })
    .unwrap();
    let before = encoder.weights_checksum();
    let names = vec!["cat".to_string(), "dog".to_string()];
    let text = TextSource::Coop {
        encoder: &encoder,
        classnames: &names,
        context_len: 4,
    };
    let ep = sample_few_shot(&data.labels(), 2, 4, 0).unwrap();
    let cfg = quick_cfg(HeadMode::ClsOnly, 20);
    let init = CoopContext::init(4, 16, cfg.seed).unwrap();
    let out = train_episode(&data, text, &ep, &cfg).unwrap();
    let ctx = out.context.unwrap();
    assert_eq!(ctx.len(), 4);
    assert_ne!(ctx, init);
    assert_eq!(encoder.weights_checksum(), before);
}

#[test]
fn init_from_text_uses_normalised_class_means() {
    let data = separable(2, 3, 2, 0);
    let text = vec![
        TextFeature { label: 0, feature: vec![2.0, 0.0] },
        TextFeature { label: 0, feature: vec![0.0, 5.0] },
        TextFeature { label: 1, feature: vec![-3.0, 0.0] },
    ];
    let cfg = TrainConfig {
        init_head_from_text: true,
        ..quick_cfg(HeadMode::ClsOnly, 10)
    };
    let t = Trainer::new(&data, TextSource::Fixed(&text), &cfg).unwrap();
    assert_eq!(t.params().shared_w, Mat::from_rows(&[[0.5, 0.5], [-1.0, 0.0]]).unwrap());
}

#[test]
fn sweep_runs_whole_grid_and_breaks_ties_low() {
    let data = separable(3, 8, 6, 6);
    let ep = sample_few_shot(&data.labels(), 3, 2, 0).unwrap();
    let cfg = quick_cfg(HeadMode::ClsOnly, 20);
    let out = sweep_grid(&DEFAULT_LR_GRID, &DEFAULT_WD_GRID, &data, &data, TextSource::None, &ep, &cfg).unwrap();
    assert_eq!(out.grid.len(), 6);
    let lrs: Vec<f64> = out.grid.iter().map(|g| g.lr).collect();
    assert_eq!(lrs, vec![0.0001, 0.0001, 0.0001, 0.001, 0.001, 0.001]);
    let best = out.grid.iter().map(|g| g.accuracy).fold(f64::MIN, f64::max);
    let first = out.grid.iter().find(|g| g.accuracy == best).unwrap();
    assert_eq!((out.best_lr, out.best_wd), (first.lr, first.weight_decay));

    let single = sweep_grid(&[0.003], &[0.02], &data, &data, TextSource::None, &ep, &cfg).unwrap();
    assert_eq!((single.best_lr, single.best_wd), (0.003, 0.02));

    // with no training every grid point is the same init, so all tie
    let frozen = TrainConfig { total_iters: 0, ..cfg };
    let tie = sweep_grid(&[0.01, 0.001], &[0.1, 0.0], &data, &data, TextSource::None, &ep, &frozen).unwrap();
    assert_eq!((tie.best_lr, tie.best_wd), (0.001, 0.0));
    assert!(sweep_grid(&[], &[0.0], &data, &data, TextSource::None, &ep, &cfg).is_err());
}

fn small_protocol(threads: usize) -> ProtocolReport {
    let train = separable(3, 20, 6, 21);
    let val = separable(3, 10, 6, 22);
    let text: Vec<TextFeature> = (0..3)
        .map(|label| TextFeature {
            label,
            feature: (0..6).map(|j| if j == label { 1.0 } else { 0.0 }).collect(),
        })
        .collect();
    let rows = vec![
        RowSpec {
            prompt: "none".into(),
            text: TextSource::None,
            head_mode: HeadMode::ClsOnly,
        },
        RowSpec {
            prompt: "fixed".into(),
            text: TextSource::Fixed(&text),
            head_mode: HeadMode::ClsPlusSo,
        },
    ];
    let pcfg = ProtocolConfig {
        threads,
        ..ProtocolConfig::default()
    };
    let data = ProtocolData {
        train: &train,
        val: &val,
        test: None,
    };
    run_protocol(data, &rows, &pcfg, &quick_cfg(HeadMode::ClsOnly, 12)).unwrap()
}

#[test]
fn protocol_shape_and_aggregation() {
    let report = small_protocol(1);
    assert_eq!(report.episodes.len(), 2 * 15);
    assert_eq!(report.table.shots, vec![1, 2, 4, 8, 16]);
    assert_eq!(report.table.rows.len(), 2);
    assert_eq!(report.table.rows[0].modal, "uni modal");
    assert_eq!(report.table.rows[1].method, "cls+visual_so");
    for (r, row) in report.table.rows.iter().enumerate() {
        for (k, &s) in report.table.shots.iter().enumerate() {
            let accs: Vec<f64> = report.episodes[r * 15..(r + 1) * 15]
                .iter()
                .filter(|e| e.shots == s)
                .map(|e| e.accuracy)
                .collect();
            assert_eq!(accs.len(), 3);
            let mean = accs.iter().sum::<f64>() / 3.0;
            assert!((mean - row.means[k]).abs() < 1e-9);
        }
    }
    let csv = report.table.to_csv();
    assert!(csv.starts_with("modal,text_prompt,method,1-shot,2-shot,4-shot,8-shot,16-shot\n"));
}

#[test]
fn protocol_is_deterministic_across_thread_counts() {
    let a = small_protocol(1);
    let b = small_protocol(1);
    let c = small_protocol(3);
    let json = |r: &ProtocolReport| serde_json::to_string(&r.episodes).unwrap();
    assert_eq!(json(&a), json(&b));
    assert_eq!(json(&a), json(&c));
    assert_eq!(a.table.to_csv(), c.table.to_csv());
    for (x, y) in a.episodes.iter().zip(&c.episodes) {
        assert_eq!((x.shots, x.seed, &x.loss_history), (y.shots, y.seed, &y.loss_history));
    }
}
