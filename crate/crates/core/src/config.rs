//! Flat `key = value` run configuration.
//!
//! Files hold one `key = value` pair per line; `#` starts a comment. Command
//! line overrides (`--key value` or `--key=value`) win over the file, and
//! defaults fill the rest. Per-site relation settings use keys such as
//! `rse.54.k` and fall back to the shared `rse.*` values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::MarkerDatasetSpec;
use crate::error::{Error, Result};
use crate::model::{Architecture, BackboneConfig, HeadConfig, BASE_LEVEL};
use crate::rse::{Normalization, RseConfig};
use crate::train::TrainConfig;

const DEFAULTS: &[(&str, &str)] = &[
    ("model", "pyramid"),
    ("head", "rsp2"),
    ("head.top_level", "5"),
    ("head.rsp_sites", ""),
    ("head.channels", "128"),
    ("head.fpn_channels", "0"),
    ("head.q_blocks", "1"),
    ("backbone.widths", "32,64,96,128"),
    ("rse.k", "7"),
    ("rse.dilation", "1"),
    ("rse.d", "2"),
    ("rse.cv", "0"),
    ("rse.softmax", "true"),
    ("rse.scale", "false"),
    ("train.base_lr", "0.01"),
    ("train.warmup_start_lr", "0.001"),
    ("train.warmup_steps", "100"),
    ("train.schedule", "1230:0.01,460:0.0001,310:0.0001"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0.0001"),
    ("train.batch_size", "8"),
    ("train.steps", "2000"),
    ("train.seed", "0"),
    ("train.flip", "true"),
    ("train.log_interval", "100"),
    ("train.eval_interval", "500"),
    ("data.size", "64"),
    ("data.colors", "3"),
    ("data.patches", "4"),
    ("data.patch_size", "6"),
    ("data.marker_size", "8"),
    ("data.noise", "0.05"),
    ("data.seed", "1000"),
    ("data.count", "400"),
    ("data.eval_seed", "2000"),
    ("data.eval_count", "100"),
    ("data.train_dir", ""),
    ("data.eval_dir", ""),
    ("out.dir", "out"),
    ("checkpoint", ""),
    ("image", ""),
    ("attn.site", "43"),
    ("attn.row", "0"),
    ("attn.col", "0"),
    ("attn.channels", "0,1"),
    ("count.height", "512"),
    ("count.width", "1024"),
    ("gradcheck.seeds", "11,12,13"),
];

const RSE_SITE_FIELDS: [&str; 4] = ["k", "dilation", "d", "cv"];

/// Short command-line spellings.
const ALIASES: &[(&str, &str)] = &[("steps", "train.steps"), ("seed", "train.seed"), ("lr", "train.base_lr")];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

fn is_known(key: &str) -> bool {
    if DEFAULTS.iter().any(|(k, _)| *k == key) {
        return true;
    }
    // rse.<high><low>.<field>
    match key.strip_prefix("rse.").and_then(|r| r.split_once('.')) {
        Some((site, field)) => {
            let b = site.as_bytes();
            b.len() == 2
                && b.iter().all(u8::is_ascii_digit)
                && b[0] == b[1] + 1
                && (BASE_LEVEL + 1..=7).contains(&((b[0] - b'0') as usize))
                && RSE_SITE_FIELDS.contains(&field)
        }
        None => false,
    }
}

impl RunConfig {
    /// Parses config file text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, k)| k);
        if !is_known(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `--key value` / `--key=value` pairs.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(tok) = it.next() {
            let flag = tok
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got {tok:?}")))?;
            match flag.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it.next().ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                    self.set(flag, v)?;
                }
            }
        }
        Ok(())
    }

    /// Optional file followed by command-line overrides.
    pub fn load<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| Error::Config(format!("cannot parse {key} = {raw:?}")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("cannot parse {key} = {raw:?}"))))
            .collect()
    }

    /// `None` when the key is set to the empty string.
    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let raw = self.raw(key)?;
        Ok((!raw.is_empty()).then(|| PathBuf::from(raw)))
    }

    fn rse_for(&self, site: &str, channels: usize) -> Result<RseConfig> {
        let field = |name: &str| -> Result<usize> {
            let key = format!("rse.{site}.{name}");
            if self.values.contains_key(&key) {
                self.get(&key)
            } else {
                self.get(&format!("rse.{name}"))
            }
        };
        let cv = field("cv")?;
        let cfg = RseConfig {
            channels,
            reduction: field("d")?,
            kernel: field("k")?,
            dilation: field("dilation")?,
            value_channels: if cv == 0 { channels } else { cv },
            normalization: if self.get("rse.softmax")? { Normalization::Softmax } else { Normalization::Raw },
            scale_logits: self.get("rse.scale")?,
        };
        Ok(cfg)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.get::<usize>("data.colors")? + 1)
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        let c: usize = self.get("head.channels")?;
        let k = self.num_classes()?;
        let name = self.raw("head")?;
        let custom_sites = self.get_list::<String>("head.rsp_sites")?;
        let top_override = self.raw("head.top_level")? != "5";
        let (top, sites): (usize, Vec<(usize, usize)>) = match name {
            "custom" => {
                let sites = custom_sites
                    .iter()
                    .map(|s| parse_site(s))
                    .collect::<Result<Vec<_>>>()?;
                (self.get("head.top_level")?, sites)
            }
            _ if !custom_sites.is_empty() || top_override => {
                return Err(Error::Config(format!(
                    "head = {name} fixes its sites; set head = custom to use head.rsp_sites / head.top_level"
                )))
            }
            "baseline" => (5, vec![]),
            "baseline67" => (7, vec![]),
            "rsp2" => (5, vec![(5, 4), (4, 3)]),
            "rsp4" => (7, vec![(7, 6), (6, 5), (5, 4), (4, 3)]),
            other => {
                return Err(Error::Config(format!(
                    "unknown head {other:?}; expected baseline, baseline67, rsp2, rsp4 or custom"
                )))
            }
        };
        let mut head = HeadConfig::with_rsp_sites(top, c, k, &sites, RseConfig::new(c));
        for site in head.sites.iter_mut() {
            site.rse = self.rse_for(&site.label(), c)?;
        }
        let fpn: usize = self.get("head.fpn_channels")?;
        head.fpn_channels = if fpn == 0 { c } else { fpn };
        head.q_blocks = self.get("head.q_blocks")?;
        head.validate()?;
        Ok(head)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let arch = match self.raw("model")? {
            "pixel" => Architecture::Pixel { num_classes: self.num_classes()? },
            "pyramid" => {
                let w: Vec<usize> = self.get_list("backbone.widths")?;
                let widths: [usize; 4] = w
                    .try_into()
                    .map_err(|_| Error::Config("backbone.widths needs exactly four values".into()))?;
                Architecture::Pyramid { backbone: BackboneConfig { widths }, head: self.head_config()? }
            }
            other => return Err(Error::Config(format!("unknown model {other:?}; expected pyramid or pixel"))),
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule = self
            .get_list::<String>("train.schedule")?
            .iter()
            .map(|p| {
                let (n, lr) = p.split_once(':').ok_or_else(|| Error::Config(format!("bad schedule phase {p:?}")))?;
                let n = n.trim().parse().map_err(|_| Error::Config(format!("bad schedule phase {p:?}")))?;
                let lr = lr.trim().parse().map_err(|_| Error::Config(format!("bad schedule phase {p:?}")))?;
                Ok((n, lr))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = TrainConfig {
            base_lr: self.get("train.base_lr")?,
            warmup_start_lr: self.get("train.warmup_start_lr")?,
            warmup_steps: self.get("train.warmup_steps")?,
            schedule,
            momentum: self.get("train.momentum")?,
            weight_decay: self.get("train.weight_decay")?,
            batch_size: self.get("train.batch_size")?,
            total_steps: self.get("train.steps")?,
            seed: self.get("train.seed")?,
            flip: self.get("train.flip")?,
            log_interval: self.get("train.log_interval")?,
            eval_interval: self.get("train.eval_interval")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training split (`eval = false`) or held-out split of the marker data.
    pub fn dataset_spec(&self, eval: bool) -> Result<MarkerDatasetSpec> {
        let (seed_key, count_key) = if eval { ("data.eval_seed", "data.eval_count") } else { ("data.seed", "data.count") };
        let spec = MarkerDatasetSpec {
            size: self.get("data.size")?,
            num_marker_colors: self.get("data.colors")?,
            patches_per_image: self.get("data.patches")?,
            patch_size: self.get("data.patch_size")?,
            marker_size: self.get("data.marker_size")?,
            noise_std: self.get("data.noise")?,
            seed: self.get(seed_key)?,
            count: self.get(count_key)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_site(s: &str) -> Result<(usize, usize)> {
    let b = s.as_bytes();
    if b.len() == 2 && b.iter().all(u8::is_ascii_digit) {
        return Ok(((b[0] - b'0') as usize, (b[1] - b'0') as usize));
    }
    Err(Error::Config(format!("bad fusion site {s:?}; expected two digits such as 54")))
}

/// The effective configuration as re-loadable `key = value` lines.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionMode;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_text("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn override_precedence() {
        let mut cfg = RunConfig::from_text("rse.k = 7").unwrap();
        cfg.apply_overrides(&["--rse.k", "3"]).unwrap();
        assert_eq!(cfg.get::<usize>("rse.k").unwrap(), 3);
        cfg.apply_overrides(&["--steps=5", "--head", "baseline"]).unwrap();
        assert_eq!(cfg.get::<usize>("train.steps").unwrap(), 5);
        assert_eq!(cfg.raw("head").unwrap(), "baseline");
    }

    #[test]
    fn rsp4_expands() {
        let cfg = RunConfig::from_text("head = rsp4\nhead.channels = 16").unwrap();
        let head = cfg.head_config().unwrap();
        let labels: Vec<(String, FusionMode)> = head.sites.iter().map(|s| (s.label(), s.mode)).collect();
        let expect = [("76", true), ("65", true), ("54", true), ("43", true), ("32", false)];
        for ((l, m), (el, rsp)) in labels.iter().zip(expect) {
            assert_eq!(l, el);
            assert_eq!(*m == FusionMode::Rsp, rsp);
        }
        assert_eq!(labels.len(), 5);
    }

    #[test]
    fn errors() {
        assert!(RunConfig::from_text("nonsense = 1").unwrap_err().to_string().contains("unknown key"));
        assert!(RunConfig::from_text("no equals sign").is_err());
        let cfg = RunConfig::from_text("rse.k = seven").unwrap();
        assert!(cfg.get::<usize>("rse.k").is_err());
        let cfg = RunConfig::from_text("head = rsp2\nhead.rsp_sites = 76").unwrap();
        assert!(cfg.head_config().is_err());
        let cfg = RunConfig::from_text("head = custom\nhead.rsp_sites = 32").unwrap();
        assert!(cfg.head_config().is_err());
        assert!(RunConfig::from_text("rse.33.k = 3").is_err());
        assert!(RunConfig::default().apply_overrides(&["--rse.k"]).is_err());
    }

    #[test]
    fn per_site_rse() {
        let cfg = RunConfig::from_text("head.channels = 16\nrse.54.k = 3\nrse.54.dilation = 3").unwrap();
        let head = cfg.head_config().unwrap();
        let s54 = head.site("54").unwrap();
        let s43 = head.site("43").unwrap();
        assert_eq!((s54.rse.kernel, s54.rse.dilation), (3, 3));
        assert_eq!((s43.rse.kernel, s43.rse.dilation), (7, 1));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["--head", "custom", "--head.rsp_sites", "54,43", "--rse.54.k", "3"]).unwrap();
        let again = RunConfig::from_text(&cfg.to_string()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.head_config().unwrap(), again.head_config().unwrap());
    }
}
