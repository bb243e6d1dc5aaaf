//! Dumps of the learnt relation weights and query/key maps at one fusion site.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::Tape;
use crate::data::encode_pgm;
use crate::error::{Error, Result};
use crate::model::{FusionMode, SegModel};
use crate::rse::{query_key_maps, rse_weights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub kernel: usize,
    /// Row-major `k x k` aggregation weights of the chosen pixel.
    pub weights: Vec<f64>,
    pub files: Vec<PathBuf>,
}

/// Scales `values` so the minimum maps to 0 and the maximum to 255; a constant
/// input maps to all zeros.
pub fn min_max_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

pub fn weights_csv(weights: &[f64], kernel: usize) -> String {
    let mut s = String::new();
    for (j, w) in weights.iter().enumerate() {
        s.push_str(&format!("{},{},{w}\n", j / kernel, j % kernel));
    }
    s
}

/// Runs `model` on `image` (`[1, 3, H, W]`) and writes, into `out_dir`:
/// the weight window of pixel `(row, col)` at `site` as PGM and CSV, and
/// query/key maps of the listed channels as PGMs.
pub fn dump_attention(
    model: &SegModel,
    image: &Tensor,
    site: &str,
    (row, col): (usize, usize),
    channels: &[usize],
    out_dir: &Path,
) -> Result<AttentionDump> {
    let params = model.site_params(site)?;
    let head = model.head().expect("site params imply a head");
    if head.site(site).map(|s| s.mode) != Some(FusionMode::Rsp) {
        return Err(Error::InvalidArgument(format!("site {site} has no attention")));
    }
    let (b, _, _, _) = image.dims4()?;
    if b != 1 {
        return Err(Error::InvalidArgument(format!("expected a single image, got a batch of {b}")));
    }

    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape, false);
    let x = tape.leaf(image.clone(), false);
    let out = model.forward(&mut tape, &vars, x)?;
    let inputs = out.sites.iter().find(|s| s.label == site).expect("every site is recorded");
    let low = tape.value(inputs.low);
    let up = tape.value(inputs.upsampled_high);
    let (_, _, h, w) = low.dims4()?;
    if row >= h || col >= w {
        return Err(Error::IndexOutOfRange { index: vec![row, col], extent: vec![h, w] });
    }

    let k = params.config.kernel;
    let k2 = k * k;
    let all = rse_weights(low, up, &params)?;
    let at = (row * w + col) * k2;
    let weights = all[at..at + k2].to_vec();

    fs::create_dir_all(out_dir)?;
    let stem = format!("attn_{site}_r{row}_c{col}");
    let mut files = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    write(format!("{stem}.pgm"), encode_pgm(&min_max_bytes(&weights), k, k)?)?;
    write(format!("{stem}.csv"), weights_csv(&weights, k).into_bytes())?;

    let (q, key) = query_key_maps(low, up, &params)?;
    let cq = params.config.qk_channels();
    for &ch in channels {
        if ch >= cq {
            return Err(Error::IndexOutOfRange { index: vec![ch], extent: vec![cq] });
        }
        for (tag, map) in [("query", &q), ("key", &key)] {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            write(format!("{tag}_{site}_c{ch}.pgm"), encode_pgm(&min_max_bytes(plane), h, w)?)?;
        }
    }
    Ok(AttentionDump { kernel: k, weights, files })
}
