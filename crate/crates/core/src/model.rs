//! Backbone, feature pyramid and the top-down fusion heads.
//!
//! Levels follow the usual FPN numbering: level `l` has stride `2^l`. A small
//! strided CNN produces stage features at levels 2..=5, lateral 1x1 convs map
//! them to pyramid maps `P_l`, optional `P_6`/`P_7` come from strided 3x3 convs,
//! and each `P_l` is transformed into a `C`-channel `Q_l`. The head walks the
//! fusion sites from the top level down to level 2 and finishes with a 1x1
//! classifier and a 4x bilinear upsample.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamVars};
use crate::rse::{self, RseConfig, RseParams, RseVars};
use crate::tensor::Tensor;

pub const BASE_LEVEL: usize = 2;
pub const STAGE_LEVELS: [usize; 4] = [2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Rsp,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSite {
    pub high: usize,
    pub low: usize,
    pub mode: FusionMode,
    /// Relation operator settings; ignored for `Sum` sites.
    pub rse: RseConfig,
}

impl FusionSite {
    /// Two-digit name, e.g. `"54"` for the fusion of `Q_5` into `Q_4`.
    pub fn label(&self) -> String {
        format!("{}{}", self.high, self.low)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Output channels at strides 4, 8, 16, 32.
    pub widths: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 96, 128] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Highest pyramid level, 5 or 7.
    pub top_level: usize,
    /// Trunk width `C` of every `Q_l`.
    pub channels: usize,
    /// Width of the `P_l` maps.
    pub fpn_channels: usize,
    /// Number of 3x3 conv + rectifier blocks turning `P_l` into `Q_l`.
    pub q_blocks: usize,
    /// Top-down, from `(top, top-1)` to `(3, 2)`.
    pub sites: Vec<FusionSite>,
    pub num_classes: usize,
}

impl HeadConfig {
    /// Head over levels `2..=top_level` with relation fusion at the listed
    /// sites (given as `(high, low)`) and summation everywhere else.
    pub fn with_rsp_sites(
        top_level: usize,
        channels: usize,
        num_classes: usize,
        rsp_sites: &[(usize, usize)],
        rse: RseConfig,
    ) -> Self {
        let sites = (BASE_LEVEL + 1..=top_level)
            .rev()
            .map(|high| {
                let low = high - 1;
                let mode = if rsp_sites.contains(&(high, low)) { FusionMode::Rsp } else { FusionMode::Sum };
                FusionSite { high, low, mode, rse: RseConfig { channels, value_channels: channels, ..rse.clone() } }
            })
            .collect();
        Self { top_level, channels, fpn_channels: channels, q_blocks: 1, sites, num_classes }
    }

    /// Summation at (54, 43, 32).
    pub fn baseline(channels: usize, num_classes: usize) -> Self {
        Self::with_rsp_sites(5, channels, num_classes, &[], RseConfig::new(channels))
    }

    /// Summation at (76, 65, 54, 43, 32).
    pub fn baseline_p67(channels: usize, num_classes: usize) -> Self {
        Self::with_rsp_sites(7, channels, num_classes, &[], RseConfig::new(channels))
    }

    /// Relation fusion at (54, 43), summation at 32.
    pub fn rsp2(channels: usize, num_classes: usize, rse: RseConfig) -> Self {
        Self::with_rsp_sites(5, channels, num_classes, &[(5, 4), (4, 3)], rse)
    }

    /// Relation fusion at (76, 65, 54, 43), summation at 32.
    pub fn rsp4(channels: usize, num_classes: usize, rse: RseConfig) -> Self {
        Self::with_rsp_sites(7, channels, num_classes, &[(7, 6), (6, 5), (5, 4), (4, 3)], rse)
    }

    pub fn with_fpn_channels(mut self, fpn_channels: usize) -> Self {
        self.fpn_channels = fpn_channels;
        self
    }

    pub fn levels(&self) -> std::ops::RangeInclusive<usize> {
        BASE_LEVEL..=self.top_level
    }

    pub fn rsp_sites(&self) -> impl Iterator<Item = &FusionSite> {
        self.sites.iter().filter(|s| s.mode == FusionMode::Rsp)
    }

    pub fn site(&self, label: &str) -> Option<&FusionSite> {
        self.sites.iter().find(|s| s.label() == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_level != 5 && self.top_level != 7 {
            return Err(Error::Config(format!("top pyramid level must be 5 or 7, got {}", self.top_level)));
        }
        if self.channels == 0 || self.fpn_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channel and class counts must be >= 1".into()));
        }
        if self.q_blocks > 3 {
            return Err(Error::Config(format!("q_blocks must be in 0..=3, got {}", self.q_blocks)));
        }
        if self.q_blocks == 0 && self.fpn_channels != self.channels {
            return Err(Error::Config("without Q transform blocks the pyramid width must equal the trunk width".into()));
        }
        let expected: Vec<(usize, usize)> = (BASE_LEVEL + 1..=self.top_level).rev().map(|h| (h, h - 1)).collect();
        let got: Vec<(usize, usize)> = self.sites.iter().map(|s| (s.high, s.low)).collect();
        if got != expected {
            return Err(Error::Config(format!("fusion sites {got:?} must form the top-down chain {expected:?}")));
        }
        for site in &self.sites {
            if site.low == BASE_LEVEL && site.mode == FusionMode::Rsp {
                return Err(Error::Config("fusion between levels 3 and 2 is always a summation".into()));
            }
            if site.mode == FusionMode::Rsp {
                site.rse.validate().map_err(|e| Error::Config(format!("site {}: {e}", site.label())))?;
                if site.rse.channels != self.channels || site.rse.value_channels != self.channels {
                    return Err(Error::Config(format!(
                        "site {}: relation operator must read and write the trunk width {}",
                        site.label(),
                        self.channels
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    /// A single 1x1 conv on raw pixels.
    Pixel { num_classes: usize },
    Pyramid { backbone: BackboneConfig, head: HeadConfig },
}

impl Architecture {
    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Pixel { num_classes } => *num_classes,
            Architecture::Pyramid { head, .. } => head.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Pixel { num_classes } if *num_classes == 0 => Err(Error::Config("num_classes must be >= 1".into())),
            Architecture::Pixel { .. } => Ok(()),
            Architecture::Pyramid { backbone, head } => {
                if backbone.widths.contains(&0) {
                    return Err(Error::Config("backbone widths must be >= 1".into()));
                }
                head.validate()
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with std `sqrt(gain / fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Zero,
    Rse,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_slots(slots: &mut Vec<Slot>, name: &str, cout: usize, cin: usize, k: usize, gain: f64) {
    slots.push(Slot {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k],
        init: Init::Fan { fan_in: cin * k * k, gain },
    });
    slots.push(Slot { name: format!("{name}.bias"), shape: vec![cout], init: Init::Zero });
}

fn layout(arch: &Architecture) -> Vec<Slot> {
    let mut slots = Vec::new();
    match arch {
        Architecture::Pixel { num_classes } => conv_slots(&mut slots, "pixel.classifier", *num_classes, 3, 1, 1.0),
        Architecture::Pyramid { backbone, head } => {
            let [w2, w3, w4, w5] = backbone.widths;
            conv_slots(&mut slots, "backbone.stem1", w2, 3, 3, 2.0);
            conv_slots(&mut slots, "backbone.stem2", w2, w2, 3, 2.0);
            conv_slots(&mut slots, "backbone.stage3", w3, w2, 3, 2.0);
            conv_slots(&mut slots, "backbone.stage4", w4, w3, 3, 2.0);
            conv_slots(&mut slots, "backbone.stage5", w5, w4, 3, 2.0);
            let p = head.fpn_channels;
            for (level, w) in STAGE_LEVELS.iter().zip(backbone.widths) {
                conv_slots(&mut slots, &format!("pyramid.lateral{level}"), p, w, 1, 1.0);
            }
            if head.top_level == 7 {
                conv_slots(&mut slots, "pyramid.p6", p, p, 3, 1.0);
                conv_slots(&mut slots, "pyramid.p7", p, p, 3, 2.0);
            }
            for level in head.levels() {
                for block in 0..head.q_blocks {
                    let cin = if block == 0 { p } else { head.channels };
                    conv_slots(&mut slots, &format!("pyramid.q{level}.{block}"), head.channels, cin, 3, 2.0);
                }
            }
            for site in head.rsp_sites() {
                let c = &site.rse;
                let (cq, cv) = (c.qk_channels(), c.value_channels);
                let shapes: [Vec<usize>; 8] = [
                    vec![c.channels, cq],
                    vec![cq],
                    vec![c.channels, cq],
                    vec![cq],
                    vec![c.channels, cv],
                    vec![cv],
                    vec![c.channels, 1],
                    vec![1],
                ];
                for (suffix, shape) in rse::PARAM_NAMES.iter().zip(shapes) {
                    slots.push(Slot { name: format!("head.fuse{}.{suffix}", site.label()), shape, init: Init::Rse });
                }
            }
            conv_slots(&mut slots, "head.classifier", head.num_classes, head.channels, 1, 1.0);
        }
    }
    slots
}

fn rse_param_names(label: &str) -> [String; 8] {
    rse::PARAM_NAMES.map(|s| format!("head.fuse{label}.{s}"))
}

/// Inputs seen by one fusion site during a forward pass.
#[derive(Debug, Clone)]
pub struct SiteInputs {
    pub label: String,
    pub mode: FusionMode,
    pub low: Var,
    pub upsampled_high: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, num_classes, H, W]` class scores before softmax.
    pub logits: Var,
    pub pyramid: Option<FeaturePyramid>,
    pub sites: Vec<SiteInputs>,
}

/// `Q_l` maps keyed by level.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<usize, Var>,
}

impl FeaturePyramid {
    pub fn stride(level: usize) -> usize {
        1 << level
    }
}

pub enum FusionOp<'a> {
    Sum,
    Rsp(&'a RseVars),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub arch: Architecture,
    pub params: ParamSet,
}

impl SegModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut rse_slots: BTreeMap<String, RseParams> = BTreeMap::new();
        if let Architecture::Pyramid { head, .. } = &arch {
            for site in head.rsp_sites() {
                rse_slots.insert(site.label(), RseParams::init(site.rse.clone(), &mut rng)?);
            }
        }
        for slot in layout(&arch) {
            let t = match slot.init {
                Init::Fan { fan_in, gain } => Tensor::randn(&slot.shape, (gain / fan_in as f64).sqrt(), &mut rng),
                Init::Zero => Tensor::zeros(&slot.shape),
                Init::Rse => {
                    let (site, suffix) = slot.name["head.fuse".len()..].split_once('.').expect("rse slot name");
                    let idx = rse::PARAM_NAMES.iter().position(|s| *s == suffix).expect("rse suffix");
                    rse_slots[site].tensors()[idx].clone()
                }
            };
            params.insert(slot.name, t)?;
        }
        Ok(Self { arch, params })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn head(&self) -> Option<&HeadConfig> {
        match &self.arch {
            Architecture::Pyramid { head, .. } => Some(head),
            Architecture::Pixel { .. } => None,
        }
    }

    /// The relation operator parameters of an RSP site.
    pub fn site_params(&self, label: &str) -> Result<RseParams> {
        let head = self.head().ok_or_else(|| Error::InvalidArgument("model has no fusion sites".into()))?;
        let site = head.site(label).ok_or_else(|| Error::InvalidArgument(format!("no fusion site {label}")))?;
        if site.mode != FusionMode::Rsp {
            return Err(Error::InvalidArgument(format!("site {label} is a summation; it has no attention")));
        }
        let mut p = RseParams::zeros(site.rse.clone())?;
        for (t, name) in p.tensors_mut().into_iter().zip(rse_param_names(label)) {
            *t = self.params.get(&name)?.clone();
        }
        Ok(p)
    }

    pub fn set_site_params(&mut self, label: &str, p: &RseParams) -> Result<()> {
        for (t, name) in p.tensors().into_iter().zip(rse_param_names(label)) {
            let slot = self.params.get_mut(&name)?;
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch { left: slot.shape().to_vec(), right: t.shape().to_vec() });
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Registers parameters and runs the network on `image` (`[B, 3, H, W]`).
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, image: Var) -> Result<ForwardOutput> {
        match &self.arch {
            Architecture::Pixel { .. } => {
                let w = vars.get("pixel.classifier.weight")?;
                let b = vars.get("pixel.classifier.bias")?;
                let logits = tape.conv2d(image, w, Some(b), 1, 0)?;
                Ok(ForwardOutput { logits, pyramid: None, sites: Vec::new() })
            }
            Architecture::Pyramid { backbone, head } => {
                let stages = backbone_forward(tape, vars, backbone, image)?;
                let pyramid = build_pyramid(tape, vars, head, &stages)?;
                head_forward(tape, vars, head, pyramid)
            }
        }
    }

    /// Forward pass without gradient tracking; returns the logits tensor.
    pub fn infer(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let x = tape.leaf(image.clone(), false);
        let out = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(out.logits).clone())
    }
}

fn conv(tape: &mut Tape, vars: &ParamVars, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = vars.get(&format!("{name}.weight"))?;
    let b = vars.get(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

/// Stage features at strides 4, 8, 16, 32.
pub fn backbone_forward(tape: &mut Tape, vars: &ParamVars, _cfg: &BackboneConfig, image: Var) -> Result<[Var; 4]> {
    let (_, c, h, w) = tape.value(image).dims4()?;
    if c != 3 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::InvalidShape {
            shape: tape.shape(image).to_vec(),
            reason: "image must be [B, 3, H, W] with H and W divisible by 32".into(),
        });
    }
    let mut x = image;
    let mut stages = Vec::with_capacity(4);
    for name in ["backbone.stem1", "backbone.stem2", "backbone.stage3", "backbone.stage4", "backbone.stage5"] {
        let y = conv(tape, vars, name, x, 2, 1)?;
        x = tape.relu(y);
        if name != "backbone.stem1" {
            stages.push(x);
        }
    }
    Ok([stages[0], stages[1], stages[2], stages[3]])
}

pub fn build_pyramid(tape: &mut Tape, vars: &ParamVars, head: &HeadConfig, stages: &[Var]) -> Result<FeaturePyramid> {
    if stages.len() != 4 {
        return Err(Error::InvalidArgument(format!("expected 4 stage features, got {}", stages.len())));
    }
    let mut p = BTreeMap::new();
    for (level, &stage) in STAGE_LEVELS.iter().zip(stages) {
        p.insert(*level, conv(tape, vars, &format!("pyramid.lateral{level}"), stage, 1, 0)?);
    }
    if head.top_level == 7 {
        let p6 = conv(tape, vars, "pyramid.p6", p[&5], 2, 1)?;
        let r6 = tape.relu(p6);
        let p7 = conv(tape, vars, "pyramid.p7", r6, 2, 1)?;
        p.insert(6, p6);
        p.insert(7, p7);
    }
    let mut levels = BTreeMap::new();
    for level in head.levels() {
        let mut q = p[&level];
        for block in 0..head.q_blocks {
            let y = conv(tape, vars, &format!("pyramid.q{level}.{block}"), q, 1, 1)?;
            q = tape.relu(y);
        }
        levels.insert(level, q);
    }
    Ok(FeaturePyramid { levels })
}

/// Upsamples `high` by two (trimming the odd extra row/column the stride-2
/// size formula can leave) and merges it into `low`.
pub fn fuse(tape: &mut Tape, high: Var, low: Var, op: FusionOp<'_>) -> Result<(Var, Var)> {
    let up = upsample_to(tape, high, low)?;
    let merged = match op {
        FusionOp::Sum => tape.add(low, up)?,
        FusionOp::Rsp(params) => {
            let context = rse::rse_forward(tape, low, up, params)?;
            tape.add(low, context)?
        }
    };
    Ok((merged, up))
}

fn upsample_to(tape: &mut Tape, high: Var, low: Var) -> Result<Var> {
    let up = tape.upsample(high, 2)?;
    let (_, _, uh, uw) = tape.value(up).dims4()?;
    let (_, _, lh, lw) = tape.value(low).dims4()?;
    match (uh.checked_sub(lh), uw.checked_sub(lw)) {
        (Some(0), Some(0)) => Ok(up),
        (Some(dh), Some(dw)) if dh <= 1 && dw <= 1 => tape.crop(up, lh, lw),
        _ => Err(Error::ShapeMismatch { left: tape.shape(up).to_vec(), right: tape.shape(low).to_vec() }),
    }
}

fn site_vars(vars: &ParamVars, site: &FusionSite) -> Result<RseVars> {
    let names = rse_param_names(&site.label());
    let mut params = [vars.get(&names[0])?; 8];
    for (slot, name) in params.iter_mut().zip(&names) {
        *slot = vars.get(name)?;
    }
    Ok(RseVars { config: site.rse.clone(), params })
}

/// Top-down fusion chain, classifier and 4x upsample.
pub fn head_forward(tape: &mut Tape, vars: &ParamVars, head: &HeadConfig, pyramid: FeaturePyramid) -> Result<ForwardOutput> {
    let mut current = pyramid.levels[&head.top_level];
    let mut sites = Vec::with_capacity(head.sites.len());
    for site in &head.sites {
        let low = pyramid.levels[&site.low];
        let rv;
        let op = match site.mode {
            FusionMode::Sum => FusionOp::Sum,
            FusionMode::Rsp => {
                rv = site_vars(vars, site)?;
                FusionOp::Rsp(&rv)
            }
        };
        let (merged, up) = fuse(tape, current, low, op)?;
        sites.push(SiteInputs { label: site.label(), mode: site.mode, low, upsampled_high: up });
        current = merged;
    }
    let scores = conv(tape, vars, "head.classifier", current, 1, 0)?;
    let logits = tape.upsample(scores, 4)?;
    Ok(ForwardOutput { logits, pyramid: Some(pyramid), sites })
}

/// Per-pixel argmax over the class axis of `[B, K, H, W]` scores, ties to the
/// lowest class index. Returns a row-major `[B, H, W]` label map.
pub fn predict(scores: &Tensor) -> Result<Vec<usize>> {
    let (b, k, h, w) = scores.dims4()?;
    let hw = h * w;
    let d = scores.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * hw + p] > d[(bi * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}
