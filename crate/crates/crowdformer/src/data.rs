//! Synthetic crowd scenes, ground-truth binning, augmentation, and the
//! on-disk dataset format (manifest + P6 pixmaps + dot sidecars).

use crate::losses::GroundTruthGrid;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse { path: String, offset: usize, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Person {
    pub x: usize,
    pub y: usize,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub persons: Vec<Person>,
    pub image_h: usize,
    pub image_w: usize,
    pub background_seed: u64,
}

/// Linear person-size falloff with image row: size(y) = base - per_row * y,
/// clamped below at `min`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SizeGradient {
    pub base: f64,
    pub per_row: f64,
    pub min: f64,
}

impl Default for SizeGradient {
    fn default() -> Self {
        SizeGradient { base: 7.0, per_row: 0.04, min: 2.5 }
    }
}

impl SizeGradient {
    pub fn size_at(&self, y: usize) -> f64 {
        (self.base - self.per_row * y as f64).max(self.min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrowdSample {
    /// RGB image [3, h, w], values in [0, 1] quantized to 8-bit levels.
    pub image: Tensor,
    /// Head dots (x, y) in pixels.
    pub dots: Vec<(usize, usize)>,
    pub gt: GroundTruthGrid,
}

impl CrowdSample {
    pub fn new(image: Tensor, dots: Vec<(usize, usize)>, stride: usize) -> CrowdSample {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let gt = bin_dots(&dots, h, w, stride);
        CrowdSample { image, dots, gt }
    }

    pub fn stride(&self) -> usize {
        let h = self.image.shape()[1];
        let hd = self.gt.grid.shape()[0];
        (h + hd - 1) / hd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { crop_h: 64, crop_w: 64, hflip_prob: 0.5 }
    }
}

/// Deterministic scene with a uniform person count in `count_range`
/// (inclusive) and perspective-style sizes from `gradient`.
pub fn generate_scene(
    seed: u64,
    count_range: (usize, usize),
    gradient: SizeGradient,
    image_h: usize,
    image_w: usize,
) -> Scene {
    assert!(count_range.0 <= count_range.1, "empty count range");
    assert!(image_h >= 1 && image_w >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(count_range.0..=count_range.1);
    let mut persons = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.gen_range(0..image_w);
        let y = rng.gen_range(0..image_h);
        persons.push(Person { x, y, size: gradient.size_at(y) });
    }
    Scene { persons, image_h, image_w, background_seed: rng.gen() }
}

fn hash2(seed: u64, x: usize, y: usize) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (y as u64).wrapping_mul(0xc2b2ae3d27d4eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    (h & 0xffff) as f64 / 65535.0
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Textured background plus, per person, a Gaussian intensity blob centered
/// on the dot and a two-tone head/body glyph. 8-bit quantized in [0, 1].
pub fn render(scene: &Scene) -> Tensor {
    let (h, w) = (scene.image_h, scene.image_w);
    let mut img = Tensor::zeros(&[3, h, w]);
    let phase = (scene.background_seed % 628) as f64 / 100.0;
    for y in 0..h {
        for x in 0..w {
            let wave = 0.06 * ((0.23 * x as f64 + 0.17 * y as f64) + phase).sin();
            let noise = 0.08 * hash2(scene.background_seed, x, y);
            let base = 0.30 + wave + noise;
            for c in 0..3 {
                let tint = 0.015 * c as f64;
                img.data_mut()[c * h * w + y * w + x] = base + tint;
            }
        }
    }
    for p in &scene.persons {
        let (px, py, s) = (p.x as f64, p.y as f64, p.size);
        let sigma = (s / 2.0).max(0.5);
        let head_r = (s / 3.0).max(0.8);
        let reach = (3.0 * sigma).ceil() as isize;
        let y_lo = (p.y as isize - reach).max(0) as usize;
        let y_hi = ((p.y as isize + reach) as usize + s.ceil() as usize).min(h - 1);
        let x_lo = (p.x as isize - reach).max(0) as usize;
        let x_hi = ((p.x as isize + reach) as usize).min(w - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (dx, dy) = (x as f64 - px, y as f64 - py);
                let d2 = dx * dx + dy * dy;
                let blob = 0.35 * (-d2 / (2.0 * sigma * sigma)).exp();
                let idx = y * w + x;
                // head: bright disk centered on the dot
                let head = d2.sqrt() <= head_r;
                // body: darker oval hanging below the head
                let by = dy - s * 0.6;
                let body = !head && (dx / (0.45 * s)).powi(2) + (by / (0.65 * s)).powi(2) <= 1.0;
                for c in 0..3 {
                    let v = &mut img.data_mut()[c * h * w + idx];
                    if head {
                        *v = 0.70 + 0.6 * blob;
                    } else if body {
                        *v = if c == 0 { 0.55 } else { 0.42 };
                    } else {
                        *v += blob;
                    }
                }
            }
        }
    }
    for v in img.data_mut() {
        *v = quantize(*v);
    }
    img
}

/// Integer dots-per-cell grid at the given stride; total count preserved.
pub fn bin_dots(dots: &[(usize, usize)], h: usize, w: usize, stride: usize) -> GroundTruthGrid {
    assert!(stride >= 1);
    let hd = (h + stride - 1) / stride;
    let wd = (w + stride - 1) / stride;
    let mut grid = Tensor::zeros(&[hd, wd]);
    for &(x, y) in dots {
        assert!(x < w && y < h, "dot ({x}, {y}) out of bounds for {w}x{h}");
        grid.data_mut()[(y / stride) * wd + x / stride] += 1.0;
    }
    GroundTruthGrid::new(grid)
}

fn crop_image(image: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(&[3, ch, cw]);
    for c in 0..3 {
        for y in 0..ch {
            for x in 0..cw {
                out.data_mut()[c * ch * cw + y * cw + x] =
                    image.data()[c * h * w + (y0 + y) * w + x0 + x];
            }
        }
    }
    out
}

fn hflip_image(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[c * h * w + y * w + x] = image.data()[c * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Random crop + horizontal flip; dots outside the crop are dropped and the
/// ground truth is re-binned at the sample's stride.
pub fn augment(sample: &CrowdSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> CrowdSample {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    assert!(cfg.crop_h <= h && cfg.crop_w <= w, "crop larger than image");
    assert!((0.0..=1.0).contains(&cfg.hflip_prob));
    let y0 = rng.gen_range(0..=h - cfg.crop_h);
    let x0 = rng.gen_range(0..=w - cfg.crop_w);
    let flip = rng.gen_bool(cfg.hflip_prob);
    let mut image = crop_image(&sample.image, y0, x0, cfg.crop_h, cfg.crop_w);
    let mut dots: Vec<(usize, usize)> = sample
        .dots
        .iter()
        .filter(|&&(x, y)| x >= x0 && x < x0 + cfg.crop_w && y >= y0 && y < y0 + cfg.crop_h)
        .map(|&(x, y)| (x - x0, y - y0))
        .collect();
    if flip {
        image = hflip_image(&image);
        for d in &mut dots {
            d.0 = cfg.crop_w - 1 - d.0;
        }
    }
    CrowdSample::new(image, dots, sample.stride())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[c * h * w + y * w + x];
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn parse_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor, DataError> {
    let err = |offset: usize, msg: &str| DataError::Parse {
        path: path.display().to_string(),
        offset,
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let token = |bytes: &[u8], pos: &mut usize| -> Result<(usize, String), DataError> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, "unexpected end of header"));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (off, magic) = token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(err(off, "not a P6 pixmap"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let (off, t) = token(bytes, &mut pos)?;
        *d = t.parse().map_err(|_| err(off, "invalid header integer"))?;
    }
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(err(pos, "maxval must be 255"));
    }
    if h == 0 || w == 0 {
        return Err(err(pos, "zero image dimension"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * h * w;
    if bytes.len() < pos + need {
        return Err(err(bytes.len(), "truncated pixel data"));
    }
    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                image.data_mut()[c * h * w + y * w + x] =
                    bytes[pos + (y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(image)
}

pub fn read_ppm(path: &Path) -> Result<Tensor, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    parse_ppm(path, &bytes)
}

fn write_dots(path: &Path, dots: &[(usize, usize)]) -> Result<(), DataError> {
    let mut out = String::new();
    for &(x, y) in dots {
        writeln!(out, "{x} {y}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn read_dots(path: &Path) -> Result<Vec<(usize, usize)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut dots = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let mut it = trimmed.split_whitespace();
            let parse = |s: Option<&str>| -> Option<usize> { s.and_then(|s| s.parse().ok()) };
            match (parse(it.next()), parse(it.next()), it.next()) {
                (Some(x), Some(y), None) => dots.push((x, y)),
                _ => {
                    return Err(DataError::Parse {
                        path: path.display().to_string(),
                        offset,
                        msg: format!("expected \"x y\", got {trimmed:?}"),
                    })
                }
            }
        }
        offset += line.len();
    }
    Ok(dots)
}

/// Writes manifest.txt, images/NNNN.ppm, and dots/NNNN.txt under `dir`.
pub fn write_dataset(dir: &Path, samples: &[CrowdSample], stride: usize) -> Result<(), DataError> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| io_err(dir, e))?;
    std::fs::create_dir_all(dir.join("dots")).map_err(|e| io_err(dir, e))?;
    let mut manifest = format!("stride {stride}\n");
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:04}");
        write_ppm(&dir.join("images").join(format!("{id}.ppm")), &s.image)?;
        write_dots(&dir.join("dots").join(format!("{id}.txt")), &s.dots)?;
        writeln!(manifest, "{id}").unwrap();
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<CrowdSample>, DataError> {
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let parse_err = |offset: usize, msg: String| DataError::Parse {
        path: mpath.display().to_string(),
        offset,
        msg,
    };
    let mut lines = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            lines.push((offset, line.trim().to_string()));
        }
        offset += line.len();
    }
    let Some((hoff, header)) = lines.first() else {
        return Err(parse_err(0, "empty manifest".into()));
    };
    let stride: usize = header
        .strip_prefix("stride ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(*hoff, format!("expected \"stride N\", got {header:?}")))?;
    let mut samples = Vec::new();
    for (off, id) in &lines[1..] {
        if id.len() != 4 || !id.bytes().all(|b| b.is_ascii_digit()) {
            return Err(parse_err(*off, format!("expected 4-digit sample id, got {id:?}")));
        }
        let image = read_ppm(&dir.join("images").join(format!("{id}.ppm")))?;
        let dots = read_dots(&dir.join("dots").join(format!("{id}.txt")))?;
        samples.push(CrowdSample::new(image, dots, stride));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_one(x: usize, y: usize, size: f64) -> Scene {
        Scene {
            persons: vec![Person { x, y, size }],
            image_h: 64,
            image_w: 64,
            background_seed: 9,
        }
    }

    #[test]
    fn generate_scene_deterministic() {
        let g = SizeGradient::default();
        let a = generate_scene(42, (5, 20), g, 64, 64);
        let b = generate_scene(42, (5, 20), g, 64, 64);
        assert_eq!(a, b);
        let c = generate_scene(43, (5, 20), g, 64, 64);
        assert_ne!(a, c);
    }

    #[test]
    fn generate_scene_count_bounds() {
        let g = SizeGradient::default();
        assert!(generate_scene(1, (0, 0), g, 32, 32).persons.is_empty());
        assert_eq!(generate_scene(2, (50, 50), g, 64, 64).persons.len(), 50);
        for seed in 0..20 {
            let s = generate_scene(seed, (3, 9), g, 48, 40);
            assert!((3..=9).contains(&s.persons.len()));
            for p in &s.persons {
                assert!(p.x < 40 && p.y < 48);
                assert!(p.size > 0.0);
            }
        }
    }

    #[test]
    fn size_decreases_with_row() {
        let g = SizeGradient { base: 8.0, per_row: 0.1, min: 2.0 };
        assert!(g.size_at(0) > g.size_at(30));
        assert_eq!(g.size_at(1000), 2.0);
    }

    #[test]
    fn render_background_only_and_range() {
        let s = Scene { persons: vec![], image_h: 32, image_w: 40, background_seed: 7 };
        let img = render(&s);
        assert_eq!(img.shape(), &[3, 32, 40]);
        for &v in img.data() {
            assert!((0.0..=1.0).contains(&v));
            assert!(v < 0.6, "background pixel too bright: {v}");
            let steps = v * 255.0;
            assert!((steps - steps.round()).abs() < 1e-9, "not 8-bit quantized: {v}");
        }
        assert_eq!(render(&s), img);
    }

    #[test]
    fn render_peak_near_dot() {
        let img = render(&scene_one(32, 30, 6.0));
        let (h, w) = (64, 64);
        let green = &img.data()[h * w..2 * h * w];
        let (mut best, mut best_idx) = (f64::NEG_INFINITY, 0);
        for (i, &v) in green.iter().enumerate() {
            if v > best {
                best = v;
                best_idx = i;
            }
        }
        let (by, bx) = (best_idx / w, best_idx % w);
        assert!(
            (by as isize - 30).abs() <= 1 && (bx as isize - 32).abs() <= 1,
            "peak at ({bx}, {by})"
        );
    }

    #[test]
    fn bin_dots_examples() {
        let g = bin_dots(&[(1, 1), (2, 2), (3, 3)], 16, 16, 4);
        assert_eq!(g.grid.data()[0], 3.0);
        assert_eq!(g.total(), 3.0);
        let g0 = bin_dots(&[(0, 0)], 8, 8, 4);
        assert_eq!(g0.grid.data()[0], 1.0);
        assert_eq!(g0.grid.shape(), &[2, 2]);
    }

    #[test]
    fn bin_dots_preserves_count_at_any_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dots: Vec<(usize, usize)> =
            (0..100).map(|_| (rng.gen_range(0..60), rng.gen_range(0..60))).collect();
        for stride in [1, 2, 3, 4, 5, 8, 16] {
            assert_eq!(bin_dots(&dots, 60, 60, stride).total(), 100.0, "stride {stride}");
        }
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn bin_dots_rejects_out_of_bounds() {
        bin_dots(&[(64, 3)], 64, 64, 4);
    }

    fn sample_from_seed(seed: u64) -> CrowdSample {
        let scene = generate_scene(seed, (8, 16), SizeGradient::default(), 80, 96);
        let dots = scene.persons.iter().map(|p| (p.x, p.y)).collect();
        CrowdSample::new(render(&scene), dots, 4)
    }

    #[test]
    fn augment_full_crop_no_flip_is_identity() {
        let s = sample_from_seed(3);
        let cfg = AugmentConfig { crop_h: 80, crop_w: 96, hflip_prob: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &cfg, &mut rng), s);
    }

    #[test]
    fn double_flip_is_identity_on_dots() {
        let s = sample_from_seed(4);
        let cfg = AugmentConfig { crop_h: 80, crop_w: 96, hflip_prob: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&s, &cfg, &mut rng);
        let twice = augment(&once, &cfg, &mut rng);
        assert_eq!(twice, s);
        assert_ne!(once.dots, s.dots);
    }

    #[test]
    fn augment_recount_matches_surviving_dots() {
        let s = sample_from_seed(5);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let a = augment(&s, &cfg, &mut rng);
            assert_eq!(a.image.shape(), &[3, 64, 64]);
            assert_eq!(a.gt.total(), a.dots.len() as f64);
            assert_eq!(a.stride(), 4);
            for &(x, y) in &a.dots {
                assert!(x < 64 && y < 64);
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<CrowdSample> = (0..3).map(sample_from_seed).collect();
        write_dataset(dir.path(), &samples, 4).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn empty_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[], 4).unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn truncated_image_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample_from_seed(6)];
        write_dataset(dir.path(), &samples, 4).unwrap();
        let img = dir.path().join("images/0000.ppm");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::Parse { offset, msg, .. }) => {
                assert!(msg.contains("truncated"), "{msg}");
                assert!(offset > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_dots_report_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[sample_from_seed(7)], 4).unwrap();
        std::fs::write(dir.path().join("dots/0000.txt"), "3 4\nbogus line\n").unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_manifest_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[], 4).unwrap();
        std::fs::write(dir.path().join("manifest.txt"), "strideless\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DataError::Parse { .. })));
    }
}
