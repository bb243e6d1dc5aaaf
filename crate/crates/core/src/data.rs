//! Synthetic marker dataset and the PPM/PGM image formats.
//!
//! Every marker image has a gray noisy background, one colored marker block in
//! a corner (labelled background) and several identical white patches whose
//! label is the marker color. A patch can only be classified by looking at the
//! marker, which is usually far away.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IGNORE_INDEX: u8 = 255;

const BACKGROUND_GRAY: f64 = 0.5;
const PLACEMENT_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H * W` class indices, `IGNORE_INDEX` for unlabelled pixels.
    pub labels: Vec<u8>,
}

impl SegmentationSample {
    pub fn new(image: Tensor, labels: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InvalidShape { shape: s.to_vec(), reason: "image must be [3, H, W]".into() });
        }
        if labels.len() != s[1] * s[2] {
            return Err(Error::InvalidArgument(format!(
                "label map has {} entries, image is {}x{}",
                labels.len(),
                s[1],
                s[2]
            )));
        }
        Ok(Self { image, labels })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Checks every label is below `num_classes` or ignored.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= num_classes) {
            Some(l) => Err(Error::InvalidArgument(format!("label {l} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Mirror image across the vertical axis.
    pub fn flipped(&self) -> Self {
        let w = self.width();
        let labels = self.labels.chunks(w).flat_map(|row| row.iter().rev().copied()).collect();
        Self { image: self.image.flip_last(), labels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerDatasetSpec {
    pub size: usize,
    pub num_marker_colors: usize,
    pub patches_per_image: usize,
    pub patch_size: usize,
    pub marker_size: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for MarkerDatasetSpec {
    fn default() -> Self {
        Self {
            size: 64,
            num_marker_colors: 3,
            patches_per_image: 4,
            patch_size: 6,
            marker_size: 8,
            noise_std: 0.05,
            seed: 0,
            count: 100,
        }
    }
}

/// An axis-aligned square, `(row, col)` of its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Square {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Square {
    pub fn overlaps(&self, other: &Square) -> bool {
        self.row < other.row + other.size
            && other.row < self.row + self.size
            && self.col < other.col + other.size
            && other.col < self.col + self.size
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.size).flat_map(move |r| (self.col..self.col + self.size).map(move |c| (r, c)))
    }
}

/// Geometry of one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerLayout {
    pub color: usize,
    pub marker: Square,
    pub patches: Vec<Square>,
}

impl MarkerDatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.num_marker_colors + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.size == 0 {
            return bad("image size must be positive");
        }
        if self.num_marker_colors == 0 || self.num_marker_colors >= IGNORE_INDEX as usize {
            return bad("num_marker_colors must be in 1..255");
        }
        if self.patch_size == 0 || 4 * self.patch_size >= self.size {
            return bad("patch_size must be positive and below size/4");
        }
        if self.marker_size == 0 || self.marker_size > self.size {
            return bad("marker_size must be in 1..=size");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a non-negative number");
        }
        Ok(())
    }

    /// Image and geometry of sample `index`; each sample draws from its own stream.
    pub fn sample(&self, index: usize) -> Result<(SegmentationSample, MarkerLayout)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let n = self.size;

        let color = rng.random_range(1..=self.num_marker_colors);
        let far = n - self.marker_size;
        let (row, col) = [(0, 0), (0, far), (far, 0), (far, far)][rng.random_range(0..4)];
        let marker = Square { row, col, size: self.marker_size };

        let mut patches: Vec<Square> = Vec::with_capacity(self.patches_per_image);
        for _ in 0..self.patches_per_image {
            let mut placed = None;
            for _ in 0..PLACEMENT_RETRIES {
                let cand = Square {
                    row: rng.random_range(0..=n - self.patch_size),
                    col: rng.random_range(0..=n - self.patch_size),
                    size: self.patch_size,
                };
                if !cand.overlaps(&marker) && patches.iter().all(|p| !cand.overlaps(p)) {
                    placed = Some(cand);
                    break;
                }
            }
            match placed {
                Some(p) => patches.push(p),
                None => {
                    return Err(Error::Config(format!(
                        "could not place patch {} of sample {index} after {PLACEMENT_RETRIES} tries; layout too dense",
                        patches.len()
                    )))
                }
            }
        }

        let mut image = vec![BACKGROUND_GRAY; 3 * n * n];
        let mut labels = vec![0u8; n * n];
        let rgb = marker_rgb(color, self.num_marker_colors);
        for (r, c) in marker.cells() {
            for ch in 0..3 {
                image[ch * n * n + r * n + c] = rgb[ch];
            }
        }
        for p in &patches {
            for (r, c) in p.cells() {
                for ch in 0..3 {
                    image[ch * n * n + r * n + c] = 1.0;
                }
                labels[r * n + c] = color as u8;
            }
        }
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
            for v in image.iter_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let sample = SegmentationSample::new(Tensor::new(vec![3, n, n], image)?, labels)?;
        Ok((sample, MarkerLayout { color, marker, patches }))
    }
}

/// Saturated, evenly spaced hues; color 1 is red.
pub fn marker_rgb(color: usize, num_colors: usize) -> [f64; 3] {
    let h = 6.0 * (color - 1) as f64 / num_colors as f64;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

pub fn generate_marker_dataset(spec: &MarkerDatasetSpec) -> Result<Vec<SegmentationSample>> {
    (0..spec.count).map(|i| spec.sample(i).map(|(s, _)| s)).collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 encoding of a `[3, H, W]` image with values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape { shape: s.to_vec(), reason: "PPM needs a [3, H, W] image".into() });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, maxval, payload) = parse_header(bytes, b"P6")?;
    let need = 3 * w * h;
    if payload.len() < need {
        return Err(Error::Format(format!("truncated PPM payload: {} of {need} bytes", payload.len())));
    }
    let mut data = vec![0.0; need];
    for i in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + i] = payload[3 * i + ch] as f64 / maxval as f64;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Binary P5 encoding of a label map.
pub fn encode_pgm(labels: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width || labels.is_empty() {
        return Err(Error::InvalidArgument(format!("label map of {} entries is not {height}x{width}", labels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

/// Returns `(labels, height, width)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let (w, h, _, payload) = parse_header(bytes, b"P5")?;
    if payload.len() < w * h {
        return Err(Error::Format(format!("truncated PGM payload: {} of {} bytes", payload.len(), w * h)));
    }
    Ok((payload[..w * h].to_vec(), h, w))
}

/// Parses `magic width height maxval` plus the single whitespace byte after it.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, usize, &'a [u8])> {
    if !bytes.starts_with(magic) {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format(format!(
            "bad magic {got:?}, expected {:?}",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed header: expected a number".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| Error::Format(format!("malformed header value {text}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed header: missing separator before payload".into()));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("malformed header: zero extent {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, maxval, &bytes[pos + 1..]))
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(labels: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(labels, height, width)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    decode_pgm(&fs::read(path)?)
}

/// Writes `00000.ppm`/`00000.pgm`, ... into `dir`, creating it if needed.
pub fn save_dataset(samples: &[SegmentationSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&s.image, &dir.join(format!("{i:05}.ppm")))?;
        write_pgm(&s.labels, s.height(), s.width(), &dir.join(format!("{i:05}.pgm")))?;
    }
    Ok(())
}

/// Loads every `<stem>.ppm` with a matching `<stem>.pgm`, sorted by stem.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegmentationSample>> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for ppm in stems {
        let pgm = ppm.with_extension("pgm");
        if !pgm.exists() {
            return Err(Error::Format(format!("{} has no label file {}", ppm.display(), pgm.display())));
        }
        let image = read_ppm(&ppm)?;
        let (labels, h, w) = read_pgm(&pgm)?;
        if image.shape()[1..] != [h, w] {
            return Err(Error::Format(format!("{}: image and labels differ in size", ppm.display())));
        }
        out.push(SegmentationSample::new(image, labels)?);
    }
    if out.is_empty() {
        return Err(Error::Format(format!("no .ppm/.pgm pairs in {}", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_empty() {
        let spec = MarkerDatasetSpec { count: 0, ..Default::default() };
        assert!(generate_marker_dataset(&spec).unwrap().is_empty());
    }

    #[test]
    fn label_histogram() {
        let spec = MarkerDatasetSpec { count: 20, seed: 3, ..Default::default() };
        for i in 0..spec.count {
            let (s, layout) = spec.sample(i).unwrap();
            let c = layout.color as u8;
            let patch = s.labels.iter().filter(|&&l| l == c).count();
            let bg = s.labels.iter().filter(|&&l| l == 0).count();
            assert_eq!(patch, spec.patches_per_image * spec.patch_size * spec.patch_size);
            assert_eq!(patch + bg, 64 * 64);
        }
    }

    #[test]
    fn nothing_overlaps() {
        let spec = MarkerDatasetSpec { count: 50, seed: 9, ..Default::default() };
        for i in 0..spec.count {
            let (_, l) = spec.sample(i).unwrap();
            for (a, p) in l.patches.iter().enumerate() {
                assert!(!p.overlaps(&l.marker));
                for q in &l.patches[a + 1..] {
                    assert!(!p.overlaps(q));
                }
            }
        }
    }

    #[test]
    fn marker_sits_in_a_corner() {
        let spec = MarkerDatasetSpec { count: 30, seed: 1, ..Default::default() };
        for i in 0..spec.count {
            let (_, l) = spec.sample(i).unwrap();
            assert!([0, 56].contains(&l.marker.row) && [0, 56].contains(&l.marker.col));
        }
    }

    #[test]
    fn too_dense_fails() {
        let spec = MarkerDatasetSpec { size: 32, patch_size: 7, patches_per_image: 40, count: 1, ..Default::default() };
        assert!(spec.sample(0).is_err());
        let spec = MarkerDatasetSpec { patch_size: 16, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn white_ppm_bytes() {
        let img = Tensor::ones(&[3, 1, 1]);
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xFF\xFF\xFF");
    }

    #[test]
    fn header_comments_and_errors() {
        let (l, h, w) = decode_pgm(b"P5 # comment\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!((l, h, w), (vec![1, 2], 1, 2));
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x01").is_err());
        assert!(decode_pgm(b"P5\nx 2\n255\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn flip_mirrors_labels() {
        let img = Tensor::new(vec![3, 1, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = SegmentationSample::new(img, vec![1, 2]).unwrap().flipped();
        assert_eq!(s.labels, vec![2, 1]);
        assert_eq!(s.image.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }
}
