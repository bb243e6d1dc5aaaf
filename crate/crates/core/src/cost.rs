//! Closed-form parameter and multiply-add accounting.
//!
//! Counting convention: a convolution costs `outH * outW * Cout * Cin * kh * kw`
//! multiply-adds (bias adds are free), bilinear upsampling costs 4 per output
//! element, and a relation operator at an `H x W` level costs
//!
//! ```text
//! HW*C*Cq*2 + HW*C*Cv + HW*k²*Cq + HW*k²*C + HW*k²*Cv + 3*HW*k²
//! ```
//!
//! for the query/key and value projections, logits, positional transform,
//! aggregation and softmax. Elementwise additions and rectifiers are not
//! counted.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{Architecture, FusionMode, HeadConfig, STAGE_LEVELS};
use crate::rse::RseConfig;
use crate::tensor::conv_out_extent;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub module: String,
    /// Whether the module belongs to the head (everything after the backbone).
    pub head: bool,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    fn push(&mut self, module: impl Into<String>, head: bool, params: u64, flops: u64) {
        self.rows.push(CostRow { module: module.into(), head, params, flops });
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn head_params(&self) -> u64 {
        self.rows.iter().filter(|r| r.head).map(|r| r.params).sum()
    }

    pub fn head_flops(&self) -> u64 {
        self.rows.iter().filter(|r| r.head).map(|r| r.flops).sum()
    }

    pub fn row(&self, module: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.module == module)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>5} {:>12} {:>16}", "module", "scope", "params", "mult-adds")?;
        for r in &self.rows {
            let scope = if r.head { "head" } else { "body" };
            writeln!(f, "{:<20} {:>5} {:>12} {:>16}", r.module, scope, r.params, r.flops)?;
        }
        writeln!(f, "{:<20} {:>5} {:>12} {:>16}", "total", "head", self.head_params(), self.head_flops())?;
        write!(f, "{:<20} {:>5} {:>12} {:>16}", "total", "all", self.total_params(), self.total_flops())
    }
}

pub fn conv_params(cin: usize, cout: usize, k: usize) -> u64 {
    (cout * cin * k * k + cout) as u64
}

pub fn conv_flops(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    (out_h * out_w * cout * cin * k * k) as u64
}

pub fn rse_params(cfg: &RseConfig) -> u64 {
    let (c, cq, cv) = (cfg.channels, cfg.qk_channels(), cfg.value_channels);
    (2 * (c * cq + cq) + (c * cv + cv) + (c + 1)) as u64
}

pub fn rse_flops(cfg: &RseConfig, h: usize, w: usize) -> u64 {
    let (c, cq, cv) = (cfg.channels, cfg.qk_channels(), cfg.value_channels);
    let hw = h * w;
    let k2 = cfg.kernel * cfg.kernel;
    (hw * c * cq * 2 + hw * c * cv + hw * k2 * cq + hw * k2 * c + hw * k2 * cv + 3 * hw * k2) as u64
}

pub fn upsample_flops(channels: usize, out_h: usize, out_w: usize) -> u64 {
    (4 * channels * out_h * out_w) as u64
}

fn half(n: usize) -> usize {
    conv_out_extent(n, 3, 2, 1).expect("positive extent")
}

/// Spatial extents of levels 2..=7 for an `h x w` input.
fn level_extents(h: usize, w: usize) -> [(usize, usize); 8] {
    let mut e = [(0, 0); 8];
    e[1] = (half(h), half(w));
    for l in 2..8 {
        e[l] = (half(e[l - 1].0), half(e[l - 1].1));
    }
    e
}

/// Parameter counts per module; FLOPs are left at zero.
pub fn count_params(arch: &Architecture) -> CostReport {
    let mut r = CostReport::default();
    match arch {
        Architecture::Pixel { num_classes } => r.push("classifier", true, conv_params(3, *num_classes, 1), 0),
        Architecture::Pyramid { backbone, head } => {
            let [w2, w3, w4, w5] = backbone.widths;
            let body = conv_params(3, w2, 3)
                + conv_params(w2, w2, 3)
                + conv_params(w2, w3, 3)
                + conv_params(w3, w4, 3)
                + conv_params(w4, w5, 3);
            r.push("backbone", false, body, 0);
            head_rows(&mut r, head, &backbone.widths, None);
        }
    }
    r
}

/// Parameter and multiply-add counts per module for an `h x w` input.
pub fn count_flops(arch: &Architecture, h: usize, w: usize) -> Result<CostReport> {
    let mut r = CostReport::default();
    match arch {
        Architecture::Pixel { num_classes } => {
            r.push("classifier", true, conv_params(3, *num_classes, 1), conv_flops(3, *num_classes, 1, h, w));
        }
        Architecture::Pyramid { backbone, head } => {
            if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
                return Err(Error::InvalidArgument(format!("input {h}x{w} must have extents divisible by 32")));
            }
            let e = level_extents(h, w);
            let [w2, w3, w4, w5] = backbone.widths;
            let params = count_params(arch).rows[0].params;
            let flops = conv_flops(3, w2, 3, e[1].0, e[1].1)
                + conv_flops(w2, w2, 3, e[2].0, e[2].1)
                + conv_flops(w2, w3, 3, e[3].0, e[3].1)
                + conv_flops(w3, w4, 3, e[4].0, e[4].1)
                + conv_flops(w4, w5, 3, e[5].0, e[5].1);
            r.push("backbone", false, params, flops);
            head_rows(&mut r, head, &backbone.widths, Some((h, w, e)));
        }
    }
    Ok(r)
}

fn head_rows(r: &mut CostReport, head: &HeadConfig, widths: &[usize; 4], dims: Option<(usize, usize, [(usize, usize); 8])>) {
    let (p, c) = (head.fpn_channels, head.channels);
    let at = |l: usize| dims.map_or((0, 0), |(_, _, e)| e[l]);
    let fl = |cin: usize, cout: usize, k: usize, l: usize| {
        let (h, w) = at(l);
        conv_flops(cin, cout, k, h, w)
    };

    let mut params = 0;
    let mut flops = 0;
    for (&level, &cin) in STAGE_LEVELS.iter().zip(widths) {
        params += conv_params(cin, p, 1);
        flops += fl(cin, p, 1, level);
    }
    r.push("lateral", true, params, flops);

    if head.top_level == 7 {
        r.push("p6_p7", true, 2 * conv_params(p, p, 3), fl(p, p, 3, 6) + fl(p, p, 3, 7));
    }

    let mut params = 0;
    let mut flops = 0;
    for level in head.levels() {
        for block in 0..head.q_blocks {
            let cin = if block == 0 { p } else { c };
            params += conv_params(cin, c, 3);
            flops += fl(cin, c, 3, level);
        }
    }
    r.push("q_transform", true, params, flops);

    for site in &head.sites {
        let (hh, hw) = at(site.high);
        let (lh, lw) = at(site.low);
        let mut flops = upsample_flops(c, 2 * hh, 2 * hw);
        let mut params = 0;
        if site.mode == FusionMode::Rsp {
            params += rse_params(&site.rse);
            flops += rse_flops(&site.rse, lh, lw);
        }
        let mode = if site.mode == FusionMode::Rsp { "rsp" } else { "sum" };
        r.push(format!("fuse{}_{mode}", site.label()), true, params, flops);
    }

    let (h2, w2) = at(2);
    let final_up = dims.map_or(0, |(h, w, _)| upsample_flops(head.num_classes, h, w));
    r.push("classifier", true, conv_params(c, head.num_classes, 1), conv_flops(c, head.num_classes, 1, h2, w2) + final_up);
}
