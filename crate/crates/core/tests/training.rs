mod common;

use std::collections::BTreeMap;

use rand::Rng;
use rsp_core::data::SegmentationSample;
use rsp_core::model::{Architecture, BackboneConfig, HeadConfig, SegModel};
use rsp_core::params::ParamSet;
use rsp_core::rse::RseConfig;
use rsp_core::train::{collate, lr_at_step, sgd_momentum_step, train_steps, OptState, TrainConfig};
use rsp_core::{Tape, Tensor};

use common::rng;

fn quiet(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        base_lr: lr,
        warmup_start_lr: lr,
        warmup_steps: 0,
        schedule: vec![(steps, lr)],
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 4,
        total_steps: steps,
        seed: 3,
        flip: false,
        log_interval: 0,
        eval_interval: 0,
    }
}

/// 8x8 images whose label is 1 where the red channel is bright.
fn separable(n: usize, seed: u64) -> Vec<SegmentationSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let labels: Vec<u8> = (0..64).map(|_| r.random_range(0..2)).collect();
            let mut img = vec![0.0; 3 * 64];
            for (p, &l) in labels.iter().enumerate() {
                img[p] = if l == 1 { 0.9 } else { 0.1 };
                img[64 + p] = r.random_range(0.0..1.0);
                img[128 + p] = r.random_range(0.0..1.0);
            }
            SegmentationSample::new(Tensor::new(vec![3, 8, 8], img).unwrap(), labels).unwrap()
        })
        .collect()
}

#[test]
fn linear_problem_is_fit() {
    let data = separable(32, 1);
    let mut model = SegModel::new(Architecture::Pixel { num_classes: 2 }, 0).unwrap();
    let h = train_steps(&mut model, &data, None, &quiet(500, 0.5), &mut |_| {}).unwrap();
    let last = *h.losses().last().unwrap();
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let data = separable(4, 2);
    let mut model = SegModel::new(Architecture::Pixel { num_classes: 2 }, 4).unwrap();
    let before = model.params.clone();
    let h = train_steps(&mut model, &data, None, &quiet(0, 0.1), &mut |_| {}).unwrap();
    assert!(h.steps.is_empty());
    assert_eq!(model.params, before);
}

fn random_params(seed: u64) -> (ParamSet, BTreeMap<String, Tensor>) {
    let mut r = rng(seed);
    let mut p = ParamSet::new();
    let mut g = BTreeMap::new();
    for (name, shape) in [("a", vec![3, 2]), ("b", vec![5])] {
        p.insert(name, Tensor::randn(&shape, 1.0, &mut r)).unwrap();
        g.insert(name.to_string(), Tensor::randn(&shape, 1.0, &mut r));
    }
    (p, g)
}

#[test]
fn weight_decay_equals_quadratic_penalty() {
    let wd = 0.01;
    for momentum in [0.0, 0.9] {
        let (mut a, grads) = random_params(5);
        let mut b = a.clone();
        let (mut oa, mut ob) = (OptState::default(), OptState::default());
        for _ in 0..3 {
            sgd_momentum_step(&mut a, &grads, &mut oa, 0.1, momentum, wd).unwrap();
            // gradient of loss + (wd / 2) |p|^2
            let penalised: BTreeMap<String, Tensor> = grads
                .iter()
                .map(|(n, g)| {
                    let p = b.get(n).unwrap();
                    let t = Tensor::new(g.shape().to_vec(), g.data().iter().zip(p.data()).map(|(g, p)| g + wd * p).collect());
                    (n.clone(), t.unwrap())
                })
                .collect();
            sgd_momentum_step(&mut b, &penalised, &mut ob, 0.1, momentum, 0.0).unwrap();
        }
        for (n, t) in a.iter() {
            assert!(t.max_abs_diff(b.get(n).unwrap()) < 1e-14, "{n} momentum {momentum}");
        }
    }
}

#[test]
fn momentum_accumulates_velocity() {
    let (mut p, grads) = random_params(6);
    let start = p.clone();
    let mut opt = OptState::default();
    for _ in 0..2 {
        sgd_momentum_step(&mut p, &grads, &mut opt, 0.5, 0.9, 0.0).unwrap();
    }
    // two steps with a constant gradient move by lr * (1 + (1 + m)) * g
    for (n, t) in p.iter() {
        let g = &grads[n];
        for ((a, b), g) in t.data().iter().zip(start.get(n).unwrap().data()).zip(g.data()) {
            assert!((b - a - 0.5 * 2.9 * g).abs() < 1e-12);
        }
    }
    assert_eq!(opt.step, 2);
}

#[test]
fn schedule_warms_up_then_steps_down() {
    let cfg = TrainConfig {
        base_lr: 0.01,
        warmup_start_lr: 0.001,
        warmup_steps: 10,
        schedule: vec![(20, 0.01), (10, 0.001)],
        total_steps: 30,
        ..quiet(30, 0.01)
    };
    assert!((lr_at_step(0, &cfg) - 0.001).abs() < 1e-15);
    assert!(lr_at_step(5, &cfg) > 0.001 && lr_at_step(5, &cfg) < 0.01);
    assert_eq!(lr_at_step(15, &cfg), 0.01);
    assert_eq!(lr_at_step(25, &cfg), 0.001);
}

fn tiny_model() -> SegModel {
    let head = HeadConfig::rsp2(8, 3, RseConfig::new(8).with_window(3, 1));
    SegModel::new(Architecture::Pyramid { backbone: BackboneConfig { widths: [4, 6, 8, 8] }, head }, 1).unwrap()
}

fn loss_and_grads(model: &SegModel, image: &Tensor, labels: &[usize]) -> (f64, BTreeMap<String, Tensor>) {
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape, true);
    let x = tape.leaf(image.clone(), false);
    let out = model.forward(&mut tape, &vars, x).unwrap();
    let loss = tape.cross_entropy(out.logits, labels, 255).unwrap();
    tape.backward(loss).unwrap();
    (tape.value(loss).item(), vars.grads(&tape))
}

#[test]
fn small_step_decreases_loss() {
    let mut r = rng(11);
    let image = Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
    let labels: Vec<usize> = (0..2 * 32 * 32).map(|_| r.random_range(0..3)).collect();
    let mut model = tiny_model();
    let (before, grads) = loss_and_grads(&model, &image, &labels);
    sgd_momentum_step(&mut model.params, &grads, &mut OptState::default(), 1e-3, 0.0, 0.0).unwrap();
    let (after, _) = loss_and_grads(&model, &image, &labels);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn gradient_reaches_every_parameter() {
    let mut r = rng(12);
    let image = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let labels: Vec<usize> = (0..32 * 32).map(|_| r.random_range(0..3)).collect();
    let (_, grads) = loss_and_grads(&tiny_model(), &image, &labels);
    for (name, g) in &grads {
        // positional bias is softmax-invariant
        if name.ends_with(".bp") {
            continue;
        }
        assert!(g.data().iter().any(|v| *v != 0.0), "{name} has no gradient");
    }
}

#[test]
fn ignored_pixels_do_not_matter() {
    let mut r = rng(13);
    let (b, k, h, w) = (2, 4, 3, 5);
    let logits = Tensor::randn(&[b, k, h, w], 1.0, &mut r);
    let labels: Vec<usize> = (0..b * h * w).map(|i| if i % 2 == 0 { 255 } else { r.random_range(0..k) }).collect();

    let run = |logits: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone(), true);
        let loss = tape.cross_entropy(v, &labels, 255).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss).item(), tape.grad(v).unwrap().clone())
    };
    let (loss, grad) = run(&logits);

    // masked recomputation
    let hw = h * w;
    let mut total = 0.0;
    let mut kept = 0;
    for n in 0..b {
        for p in 0..hw {
            let l = labels[n * hw + p];
            if l == 255 {
                continue;
            }
            let z: Vec<f64> = (0..k).map(|c| logits.data()[(n * k + c) * hw + p]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[l];
            kept += 1;
        }
    }
    assert!((loss - total / kept as f64).abs() < 1e-12);

    // scrambling logits at ignored pixels changes nothing
    let mut scrambled = logits.clone();
    for n in 0..b {
        for c in 0..k {
            for p in (0..hw).filter(|p| labels[n * hw + p] == 255) {
                scrambled.data_mut()[(n * k + c) * hw + p] = r.random_range(-50.0..50.0);
            }
        }
    }
    let (loss2, grad2) = run(&scrambled);
    assert_eq!(loss, loss2);
    assert_eq!(grad, grad2);
    for n in 0..b {
        for c in 0..k {
            for p in (0..hw).filter(|p| labels[n * hw + p] == 255) {
                assert_eq!(grad.data()[(n * k + c) * hw + p], 0.0);
            }
        }
    }
}

#[test]
fn collate_stacks_images_and_labels() {
    let data = separable(3, 4);
    let refs: Vec<&SegmentationSample> = data.iter().collect();
    let (x, y) = collate(&refs).unwrap();
    assert_eq!(x.shape(), &[3, 3, 8, 8]);
    assert_eq!(y.len(), 3 * 64);
    assert_eq!(&x.data()[192..384], data[1].image.data());
    assert_eq!(y[64], data[1].labels[0] as usize);
}
