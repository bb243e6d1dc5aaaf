#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsp_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct six-loop cross-correlation with zero padding.
pub fn conv2d_loops(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y * stride + i) as isize - pad as isize;
                                let sx = (xx * stride + j) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * cin + c) * kh + i) * kw + j]
                                    * x.at4(n, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    out[((n * cout + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out).unwrap()
}

/// Half-pixel bilinear sampling straight from the coordinate formula.
pub fn bilinear_loops(x: &Tensor, factor: usize) -> Tensor {
    let (b, c, h, w) = x.dims4().unwrap();
    let (oh, ow) = (h * factor, w * factor);
    let src = |d: usize, len: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..oh {
                let (y0, y1, fy) = src(y, h);
                for xx in 0..ow {
                    let (x0, x1, fx) = src(xx, w);
                    let top = x.at4(n, ch, y0, x0) * (1.0 - fx) + x.at4(n, ch, y0, x1) * fx;
                    let bot = x.at4(n, ch, y1, x0) * (1.0 - fx) + x.at4(n, ch, y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).unwrap()
}

pub fn matmul_loops(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Per-class IoU from explicit pixel sets; `None` for classes absent from both.
pub fn iou_by_sets(pred: &[usize], truth: &[usize], num_classes: usize, ignore: usize) -> Vec<Option<(usize, usize)>> {
    (0..num_classes)
        .map(|c| {
            let p: HashSet<usize> = (0..pred.len()).filter(|&i| truth[i] != ignore && pred[i] == c).collect();
            let t: HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
            let inter = p.intersection(&t).count();
            let union = p.union(&t).count();
            (union > 0).then_some((inter, union))
        })
        .collect()
}

pub fn random_labels(len: usize, num_classes: usize, ignore_every: usize, r: &mut impl Rng) -> Vec<usize> {
    (0..len)
        .map(|i| if ignore_every > 0 && i % ignore_every == 0 { 255 } else { r.random_range(0..num_classes) })
        .collect()
}
