//! Central finite-difference checks of the tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::{Architecture, BackboneConfig, HeadConfig, SegModel};
use crate::rse::{self, Normalization, RseConfig, RseParams};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Max over coordinates of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_at(f, x, eps, None)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, eps: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).expect("leaf requires grad").clone();

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t, false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if err > TOLERANCE {
            log::debug!("coord {i}: analytic {a:.6e} numeric {numeric:.6e} rel err {err:.3e}");
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `sum(r * v)` for a fixed pseudo-random `r`, giving every output element a
/// distinct weight in the scalar being differentiated.
pub fn random_projection(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = Tensor::rand_uniform(tape.shape(v), -1.0, 1.0, &mut rng);
    let rv = tape.leaf(r, false);
    let prod = tape.mul(v, rv)?;
    Ok(tape.sum(prod))
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn sample_coords(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

/// Runs the gradient suite for each seed: every differentiable primitive,
/// the relation operator w.r.t. all of its inputs, and a small two-site head.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut push = |name: &str, err: f64| out.push(GradCheck { name: name.to_string(), seed, max_rel_err: err });

        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2)] {
            let apply = |t: &mut Tape, x: Var, y: Var| match kind {
                0 => t.add(x, y),
                1 => t.sub(x, y),
                _ => t.mul(x, y),
            };
            let e = finite_diff_check(
                |t, x| {
                    let y = t.leaf(b.clone(), false);
                    let o = apply(t, x, y)?;
                    random_projection(t, o, seed)
                },
                &a,
                EPS,
            )?;
            push(&format!("elementwise.{name}.lhs"), e);
            let e = finite_diff_check(
                |t, y| {
                    let x = t.leaf(a.clone(), false);
                    let o = apply(t, x, y)?;
                    random_projection(t, o, seed)
                },
                &b,
                EPS,
            )?;
            push(&format!("elementwise.{name}.rhs"), e);
        }

        let vals = Tensor::randn(&[2, 5, 3, 3], 1.0, &mut rng);
        let wmap = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng);
        let e = finite_diff_check(
            |t, w| {
                let v = t.leaf(vals.clone(), false);
                let o = t.mul(v, w)?;
                random_projection(t, o, seed)
            },
            &wmap,
            EPS,
        )?;
        push("elementwise.mul.channel_broadcast", e);

        let ma = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mb = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let e = finite_diff_check(
            |t, x| {
                let y = t.leaf(mb.clone(), false);
                let o = t.matmul(x, y)?;
                random_projection(t, o, seed)
            },
            &ma,
            EPS,
        )?;
        push("matmul.lhs", e);
        let e = finite_diff_check(
            |t, y| {
                let x = t.leaf(ma.clone(), false);
                let o = t.matmul(x, y)?;
                random_projection(t, o, seed)
            },
            &mb,
            EPS,
        )?;
        push("matmul.rhs", e);

        let cx = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let cw = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng);
        let cb = Tensor::randn(&[4], 0.5, &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
            let conv = |t: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
                let o = t.conv2d(x, w, Some(b), stride, pad)?;
                random_projection(t, o, seed)
            };
            let e = finite_diff_check(
                |t, x| {
                    let (w, b) = (t.leaf(cw.clone(), false), t.leaf(cb.clone(), false));
                    conv(t, x, w, b)
                },
                &cx,
                EPS,
            )?;
            push(&format!("conv2d.s{stride}p{pad}.input"), e);
            let e = finite_diff_check(
                |t, w| {
                    let (x, b) = (t.leaf(cx.clone(), false), t.leaf(cb.clone(), false));
                    conv(t, x, w, b)
                },
                &cw,
                EPS,
            )?;
            push(&format!("conv2d.s{stride}p{pad}.weight"), e);
            let e = finite_diff_check(
                |t, b| {
                    let (x, w) = (t.leaf(cx.clone(), false), t.leaf(cw.clone(), false));
                    conv(t, x, w, b)
                },
                &cb,
                EPS,
            )?;
            push(&format!("conv2d.s{stride}p{pad}.bias"), e);
        }

        let ux = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut rng);
        for factor in [2, 4] {
            let e = finite_diff_check(
                |t, x| {
                    let o = t.upsample(x, factor)?;
                    random_projection(t, o, seed)
                },
                &ux,
                EPS,
            )?;
            push(&format!("bilinear_upsample.x{factor}"), e);
        }

        let sx = Tensor::randn(&[3, 9], 1.5, &mut rng);
        let e = finite_diff_check(
            |t, x| {
                let o = t.softmax_last(x);
                random_projection(t, o, seed)
            },
            &sx,
            EPS,
        )?;
        push("softmax_last", e);

        // conv -> softmax over the last axis -> weighted sum
        let e = finite_diff_check(
            |t, x| {
                let w = t.leaf(cw.clone(), false);
                let c = t.conv2d(x, w, None, 1, 1)?;
                let s = t.softmax_last(c);
                random_projection(t, s, seed)
            },
            &cx,
            EPS,
        )?;
        push("composite.conv_softmax_sum", e);

        // away from the kink so the central difference never straddles it
        let mut rx = Tensor::rand_uniform(&[4, 5], 0.1, 1.0, &mut rng);
        rx.data_mut().iter_mut().enumerate().for_each(|(i, v)| if i % 2 == 0 { *v = -*v });
        let e = finite_diff_check(
            |t, x| {
                let o = t.relu(x);
                random_projection(t, o, seed)
            },
            &rx,
            EPS,
        )?;
        push("relu", e);

        let logits = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let labels: Vec<usize> = (0..18).map(|i| if i % 5 == 0 { 255 } else { rng.random_range(0..4) }).collect();
        let e = finite_diff_check(|t, x| t.cross_entropy(x, &labels, 255), &logits, EPS)?;
        push("cross_entropy", e);

        for (tag, normalization, scale) in [
            ("softmax", Normalization::Softmax, false),
            ("raw", Normalization::Raw, false),
            ("scaled", Normalization::Softmax, true),
        ] {
            let cfg = RseConfig {
                normalization,
                scale_logits: scale,
                ..RseConfig::new(4).with_window(3, 2).with_reduction(2)
            };
            for (name, err) in rse_checks(cfg, seed, &mut rng)? {
                push(&format!("rse_forward.{tag}.{name}"), err);
            }
        }

        for (name, err) in head_checks(seed, &mut rng)? {
            push(&format!("head_forward.{name}"), err);
        }
    }
    Ok(out)
}

fn rse_checks(cfg: RseConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Vec<(String, f64)>> {
    let params = RseParams::random(cfg.clone(), 0.5, rng)?;
    let x = Tensor::randn(&[2, cfg.channels, 5, 4], 1.0, rng);
    let z = Tensor::randn(&[2, cfg.channels, 5, 4], 1.0, rng);
    let mut out = Vec::new();
    // index 0 = x, 1 = z, 2.. = transforms
    for which in 0..10 {
        if which == 9 && cfg.normalization == Normalization::Softmax {
            // under softmax the positional bias shifts every logit equally, so
            // its true gradient is exactly zero and only round-off remains
            continue;
        }
        let target = match which {
            0 => x.clone(),
            1 => z.clone(),
            i => params.tensors()[i - 2].clone(),
        };
        let err = finite_diff_check(
            |t, v| {
                let xv = if which == 0 { v } else { t.leaf(x.clone(), false) };
                let zv = if which == 1 { v } else { t.leaf(z.clone(), false) };
                let mut rv = params.register(t, false);
                if which >= 2 {
                    rv.params[which - 2] = v;
                }
                let o = rse::rse_forward(t, xv, zv, &rv)?;
                random_projection(t, o, seed)
            },
            &target,
            EPS,
        )?;
        let name = match which {
            0 => "x".to_string(),
            1 => "z".to_string(),
            i => rse::PARAM_NAMES[i - 2].to_string(),
        };
        out.push((name, err));
    }
    Ok(out)
}

/// Small two-site relation head; gradients of a random projection of the
/// logits w.r.t. the image and a sample of coordinates of every parameter tensor.
fn head_checks(seed: u64, rng: &mut ChaCha8Rng) -> Result<Vec<(String, f64)>> {
    let head = HeadConfig::rsp2(4, 3, RseConfig::new(4).with_window(3, 1));
    let arch = Architecture::Pyramid { backbone: BackboneConfig { widths: [4, 4, 6, 6] }, head };
    let mut model = SegModel::new(arch, seed)?;
    // non-zero biases so no unit sits exactly on a rectifier kink, and
    // relation transforms large enough to matter at the output
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("head.fuse") {
            *t = Tensor::randn(t.shape(), 0.5, rng);
        } else if t.rank() == 1 {
            *t = Tensor::randn(t.shape(), 0.1, rng);
        }
    }
    let image = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, rng);
    let names: Vec<String> = model.params.names().cloned().collect();

    let loss_with = |t: &mut Tape, target: Option<&str>, v: Var| -> Result<Var> {
        let vars = model.params.register(t, false);
        let (vars, img) = match target {
            None => (vars, v),
            Some(name) => (vars.with_override(name, v), t.leaf(image.clone(), false)),
        };
        let out = model.forward(t, &vars, img)?;
        random_projection(t, out.logits, seed)
    };

    let mut out = Vec::new();
    let coords = sample_coords(image.len(), 48, rng);
    out.push(("image".to_string(), finite_diff_check_at(|t, v| loss_with(t, None, v), &image, EPS, Some(&coords))?));
    // positional bias shifts every logit of a window equally; softmax cancels it
    for name in names.into_iter().filter(|n| !n.ends_with(".bp")) {
        let target = model.params.get(&name)?.clone();
        let coords = sample_coords(target.len(), 6, rng);
        let err = finite_diff_check_at(|t, v| loss_with(t, Some(&name), v), &target, EPS, Some(&coords))?;
        out.push((name, err));
    }
    Ok(out)
}
