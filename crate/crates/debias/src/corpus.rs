//! Grayscale digit corpora: a self-contained synthetic glyph generator and a
//! loader for IDX-format files.
//!
//! The synthetic corpus renders ten distinct stroke glyphs with randomized
//! affine jitter, stroke width, brightness, and pixel noise. It exists so the
//! full pipeline (colorization, training, attacks) runs at desk scale without
//! bundling an external dataset; any IDX corpus can be substituted through
//! the config.

use crate::util::seed_stream;
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use std::io::Read;
use std::path::Path;

pub const SIDE: usize = 28;

/// One grayscale example, pixels in [0,1].
#[derive(Debug, Clone)]
pub struct GrayExample {
    pub pixels: Array2<f32>,
    pub label: u8,
}

/// Train/test grayscale corpus with integer digit labels.
#[derive(Debug, Clone)]
pub struct GrayCorpus {
    pub train: Vec<GrayExample>,
    pub test: Vec<GrayExample>,
}

impl GrayCorpus {
    pub fn synthetic(train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        let train = render_split(train_per_class, seed, "train");
        let test = render_split(test_per_class, seed, "test");
        Self { train, test }
    }

    /// Loads `train-images-idx3-ubyte` / `train-labels-idx1-ubyte` /
    /// `t10k-images-idx3-ubyte` / `t10k-labels-idx1-ubyte` from a directory.
    pub fn from_idx_dir(dir: &Path) -> Result<Self> {
        let train = load_idx_pair(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )?;
        let test = load_idx_pair(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?;
        Ok(Self { train, test })
    }
}

fn render_split(per_class: usize, seed: u64, split: &str) -> Vec<GrayExample> {
    let total = per_class * 10;
    (0..total)
        .into_par_iter()
        .map(|i| {
            let label = (i % 10) as u8;
            // Per-image stream: rendering is order- and thread-independent.
            let mut rng = seed_stream(seed, &format!("glyph-{split}-{i}"));
            GrayExample {
                pixels: render_glyph(label, &mut rng),
                label,
            }
        })
        .collect()
}

/// Polyline skeletons per digit class in unit coordinates (y down).
fn skeleton(digit: u8) -> Vec<Vec<(f32, f32)>> {
    fn arc(cx: f32, cy: f32, rx: f32, ry: f32, a0: f32, a1: f32, n: usize) -> Vec<(f32, f32)> {
        (0..=n)
            .map(|i| {
                let a = a0 + (a1 - a0) * i as f32 / n as f32;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    }
    use std::f32::consts::PI;
    match digit {
        0 => vec![arc(0.5, 0.5, 0.21, 0.3, 0.0, 2.0 * PI, 14)],
        1 => vec![
            vec![(0.38, 0.32), (0.54, 0.18), (0.54, 0.8)],
            vec![(0.4, 0.8), (0.68, 0.8)],
        ],
        2 => vec![
            arc(0.5, 0.34, 0.2, 0.16, PI, 2.0 * PI, 8),
            vec![(0.7, 0.34), (0.32, 0.8), (0.72, 0.8)],
        ],
        3 => vec![
            arc(0.48, 0.33, 0.18, 0.14, 0.75 * PI, 2.25 * PI, 8),
            arc(0.48, 0.64, 0.2, 0.17, 1.75 * PI, 3.3 * PI, 8),
        ],
        4 => vec![
            vec![(0.62, 0.8), (0.62, 0.18), (0.3, 0.6), (0.76, 0.6)],
        ],
        5 => vec![
            vec![(0.68, 0.2), (0.36, 0.2), (0.34, 0.46)],
            arc(0.5, 0.62, 0.19, 0.18, 1.55 * PI, 2.9 * PI, 8),
        ],
        6 => vec![
            vec![(0.62, 0.18), (0.42, 0.42), (0.36, 0.6)],
            arc(0.5, 0.64, 0.15, 0.15, 0.0, 2.0 * PI, 10),
        ],
        7 => vec![vec![(0.3, 0.2), (0.7, 0.2), (0.44, 0.8)]],
        8 => vec![
            arc(0.5, 0.35, 0.14, 0.14, 0.0, 2.0 * PI, 10),
            arc(0.5, 0.65, 0.18, 0.17, 0.0, 2.0 * PI, 10),
        ],
        9 => vec![
            arc(0.5, 0.36, 0.16, 0.16, 0.0, 2.0 * PI, 10),
            vec![(0.66, 0.4), (0.6, 0.8)],
        ],
        _ => panic!("digit out of range"),
    }
}

fn render_glyph<R: Rng>(digit: u8, rng: &mut R) -> Array2<f32> {
    let theta = rng.gen_range(-0.22f32..0.22);
    let sx = rng.gen_range(0.78f32..1.08);
    let sy = rng.gen_range(0.78f32..1.08);
    let shear = rng.gen_range(-0.18f32..0.18);
    let tx = rng.gen_range(-0.06f32..0.06);
    let ty = rng.gen_range(-0.06f32..0.06);
    let sigma = rng.gen_range(0.65f32..1.25);
    let brightness = rng.gen_range(0.82f32..1.0);
    let noise_sd = 0.035f32;

    let (sin, cos) = theta.sin_cos();
    let transform = |(x, y): (f32, f32)| -> (f32, f32) {
        let (mut px, mut py) = (x - 0.5, y - 0.5);
        px += shear * py;
        px *= sx;
        py *= sy;
        let rx = cos * px - sin * py;
        let ry = sin * px + cos * py;
        ((rx + 0.5 + tx) * SIDE as f32, (ry + 0.5 + ty) * SIDE as f32)
    };

    let segments: Vec<((f32, f32), (f32, f32))> = skeleton(digit)
        .iter()
        .flat_map(|line| {
            line.windows(2)
                .map(|w| (transform(w[0]), transform(w[1])))
                .collect::<Vec<_>>()
        })
        .collect();

    let two_sigma2 = 2.0 * sigma * sigma;
    let mut img = Array2::zeros((SIDE, SIDE));
    for r in 0..SIDE {
        for c in 0..SIDE {
            let p = (c as f32 + 0.5, r as f32 + 0.5);
            let mut best = f32::MAX;
            for &(a, b) in &segments {
                let d2 = dist2_to_segment(p, a, b);
                if d2 < best {
                    best = d2;
                }
            }
            img[(r, c)] = brightness * (-best / two_sigma2).exp();
        }
    }
    // Additive noise after stroke rendering.
    for v in img.iter_mut() {
        let n: f32 = {
            use rand_distr::{Distribution, StandardNormal};
            let s: f64 = StandardNormal.sample(rng);
            s as f32
        };
        *v = (*v + n * noise_sd).clamp(0.0, 1.0);
    }
    img
}

fn dist2_to_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let len2 = bx * bx + by * by;
    let t = if len2 > 0.0 {
        ((px * bx + py * by) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = px - t * bx;
    let dy = py - t * by;
    dx * dx + dy * dy
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

fn load_idx_pair(images: &Path, labels: &Path) -> Result<Vec<GrayExample>> {
    let img_bytes = std::fs::read(images)?;
    let lab_bytes = std::fs::read(labels)?;
    let (n, h, w, pixels) = parse_idx_images(&img_bytes)?;
    let labs = parse_idx_labels(&lab_bytes)?;
    if labs.len() != n {
        return Err(Error::Dataset(format!(
            "IDX image/label count mismatch: {n} vs {}",
            labs.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * h * w;
        let img = Array2::from_shape_fn((h, w), |(r, c)| {
            pixels[start + r * w + c] as f32 / 255.0
        });
        out.push(GrayExample {
            pixels: img,
            label: labs[i],
        });
    }
    Ok(out)
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut cur = std::io::Cursor::new(bytes);
    let magic = read_u32(&mut cur)?;
    if magic != 2051 {
        return Err(Error::Dataset(format!("bad IDX image magic {magic}")));
    }
    let n = read_u32(&mut cur)? as usize;
    let h = read_u32(&mut cur)? as usize;
    let w = read_u32(&mut cur)? as usize;
    let data = &bytes[16..];
    if data.len() != n * h * w {
        return Err(Error::Dataset("IDX image payload truncated".into()));
    }
    Ok((n, h, w, data))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = std::io::Cursor::new(bytes);
    let magic = read_u32(&mut cur)?;
    if magic != 2049 {
        return Err(Error::Dataset(format!("bad IDX label magic {magic}")));
    }
    let n = read_u32(&mut cur)? as usize;
    let data = &bytes[8..];
    if data.len() != n {
        return Err(Error::Dataset("IDX label payload truncated".into()));
    }
    Ok(data.to_vec())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_is_deterministic_and_balanced() {
        let a = GrayCorpus::synthetic(6, 3, 42);
        let b = GrayCorpus::synthetic(6, 3, 42);
        assert_eq!(a.train.len(), 60);
        assert_eq!(a.test.len(), 30);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.pixels, y.pixels);
        }
        let mut counts = [0usize; 10];
        for e in &a.train {
            counts[e.label as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 6));
        let c = GrayCorpus::synthetic(6, 3, 43);
        assert_ne!(a.train[0].pixels, c.train[0].pixels);
    }

    #[test]
    fn glyph_pixels_in_range_and_classes_differ() {
        let corpus = GrayCorpus::synthetic(2, 1, 7);
        for e in &corpus.train {
            assert!(e.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Mean absolute difference between class prototypes should be visible.
        let img0 = &corpus.train.iter().find(|e| e.label == 0).unwrap().pixels;
        let img7 = &corpus.train.iter().find(|e| e.label == 7).unwrap().pixels;
        let diff: f32 = (img0 - img7).iter().map(|v| v.abs()).sum::<f32>() / (SIDE * SIDE) as f32;
        assert!(diff > 0.02, "glyphs 0 and 7 nearly identical: {diff}");
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let n = 5usize;
        let (h, w) = (4usize, 3usize);
        let mut img = vec![0u8; 16];
        img[0..4].copy_from_slice(&2051u32.to_be_bytes());
        img[4..8].copy_from_slice(&(n as u32).to_be_bytes());
        img[8..12].copy_from_slice(&(h as u32).to_be_bytes());
        img[12..16].copy_from_slice(&(w as u32).to_be_bytes());
        for i in 0..n * h * w {
            img.push((i % 256) as u8);
        }
        let mut lab = vec![0u8; 8];
        lab[0..4].copy_from_slice(&2049u32.to_be_bytes());
        lab[4..8].copy_from_slice(&(n as u32).to_be_bytes());
        lab.extend((0..n).map(|i| i as u8));
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), &lab).unwrap();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), &lab).unwrap();
        let corpus = GrayCorpus::from_idx_dir(dir.path()).unwrap();
        assert_eq!(corpus.train.len(), n);
        assert_eq!(corpus.train[2].label, 2);
        let expect = 14.0f32 / 255.0; // example 1, pixel (0,2) = byte 14
        assert!((corpus.train[1].pixels[(0, 2)] - expect).abs() < 1e-6);
    }
}
