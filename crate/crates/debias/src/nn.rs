//! Compact CNN building blocks with exact forward/backward passes.
//!
//! The layers are generic over `f32`/`f64`: production paths run at `f32`,
//! while gradient-check oracles instantiate the identical code at `f64` so
//! finite differences are not drowned by single-precision noise.
//!
//! Convolutions use im2col + GEMM. Batches are processed in fixed-size image
//! chunks (parallelized with rayon); the chunk size is a constant, not a
//! function of thread count, so results are bit-identical regardless of the
//! number of worker threads.

use ndarray::{Array1, Array2, Array4, Axis, Dimension, NdFloat, Zip};
use rand::Rng;
use rayon::prelude::*;

/// Floating-point scalar usable by the network.
pub trait Scalar: NdFloat + Send + Sync {
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Images per im2col chunk. Fixed so chunking (and thus float op order)
/// does not depend on available parallelism.
const CONV_CHUNK: usize = 32;

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution, stride 1, square kernel. Weights are stored flat as
/// `(out_ch, in_ch * k * k)`.
///
/// Implemented as direct shift-and-accumulate over contiguous image rows:
/// at the small channel counts used here this beats im2col + GEMM and keeps
/// per-image work independent, so batches parallelize without changing
/// float-op order.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    /// He-normal initialization.
    pub fn init<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_ch, fan_in), |_| {
            F::from_f64(sample_normal(rng) * std)
        });
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad - self.kernel + 1, w + 2 * self.pad - self.kernel + 1)
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        let x_slice = x.as_slice().expect("contiguous conv input");
        let in_img = c * h * w;
        let out_img = self.out_ch * oh * ow;
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(out_img)
            .enumerate()
            .for_each(|(ni, out_img_slice)| {
                let img = &x_slice[ni * in_img..(ni + 1) * in_img];
                self.forward_one(img, out_img_slice, h, w, oh, ow);
            });
        out
    }

    fn forward_one(&self, img: &[F], out: &mut [F], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.kernel;
        let pad = self.pad as isize;
        for oc in 0..self.out_ch {
            let out_plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            let b = self.bias[oc];
            for v in out_plane.iter_mut() {
                *v = b;
            }
            let wrow = self.weight.row(oc);
            let wrow = wrow.as_slice().expect("contiguous weight row");
            for ic in 0..self.in_ch {
                let in_plane = &img[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wrow[(ic * k + ky) * k + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        // out[y, x] += wv * in[y+dy, x+dx] over valid range
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src = &in_plane[iy * w + ((x0 as isize + dx) as usize)..];
                            let dst = &mut out_plane[y * ow + x0..y * ow + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wv * *s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Backward pass given the layer input. `need_dx` / `need_dw` select
    /// which gradients to build, so attacks skip parameter gradients and the
    /// bottom layer skips dx during training.
    pub fn backward(
        &self,
        x: &Array4<F>,
        dout: &Array4<F>,
        need_dx: bool,
        need_dw: bool,
    ) -> (Option<Array4<F>>, Option<(Array2<F>, Array1<F>)>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let x_slice = x.as_slice().expect("contiguous conv input");
        let dout_slice = dout.as_slice().expect("contiguous dout");
        let in_img = c * h * w;
        let out_img = self.out_ch * oh * ow;
        let k = self.kernel;

        // dx: per-image disjoint writes, parallel.
        let dx = if need_dx {
            let mut dx = Array4::zeros((n, c, h, w));
            dx.as_slice_mut()
                .unwrap()
                .par_chunks_mut(in_img)
                .enumerate()
                .for_each(|(ni, dx_img)| {
                    let dimg = &dout_slice[ni * out_img..(ni + 1) * out_img];
                    self.backward_input_one(dimg, dx_img, h, w, oh, ow);
                });
            Some(dx)
        } else {
            None
        };

        let grads = if need_dw {
            let ranges = chunk_ranges(n, CONV_CHUNK);
            let partials: Vec<(Array2<F>, Array1<F>)> = ranges
                .par_iter()
                .map(|&(n0, n1)| {
                    let mut dw = Array2::zeros((self.out_ch, c * k * k));
                    let mut db = Array1::zeros(self.out_ch);
                    for ni in n0..n1 {
                        let img = &x_slice[ni * in_img..(ni + 1) * in_img];
                        let dimg = &dout_slice[ni * out_img..(ni + 1) * out_img];
                        self.accumulate_dw_one(img, dimg, &mut dw, &mut db, h, w, oh, ow);
                    }
                    (dw, db)
                })
                .collect();
            let mut dw = Array2::zeros((self.out_ch, c * k * k));
            let mut db = Array1::zeros(self.out_ch);
            for (pw, pb) in partials {
                dw = dw + &pw;
                db = db + &pb;
            }
            Some((dw, db))
        } else {
            None
        };

        (dx, grads)
    }

    fn backward_input_one(&self, dout: &[F], dx: &mut [F], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.kernel;
        let pad = self.pad as isize;
        for oc in 0..self.out_ch {
            let dplane = &dout[oc * oh * ow..(oc + 1) * oh * ow];
            let wrow = self.weight.row(oc);
            let wrow = wrow.as_slice().expect("contiguous weight row");
            for ic in 0..self.in_ch {
                let dx_plane = &mut dx[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wrow[(ic * k + ky) * k + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx_off = kx as isize - pad;
                        // dx[y+dy, x+dx] += wv * dout[y, x]: same valid range
                        // as forward, roles of src/dst swapped.
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x0 = (-dx_off).max(0) as usize;
                        let x1 = ((w as isize - dx_off).min(ow as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src = &dplane[y * ow + x0..y * ow + x1];
                            let dst_base = iy * w + (x0 as isize + dx_off) as usize;
                            let dst = &mut dx_plane[dst_base..dst_base + (x1 - x0)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wv * *s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn accumulate_dw_one(
        &self,
        img: &[F],
        dout: &[F],
        dw: &mut Array2<F>,
        db: &mut Array1<F>,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let k = self.kernel;
        let pad = self.pad as isize;
        for oc in 0..self.out_ch {
            let dplane = &dout[oc * oh * ow..(oc + 1) * oh * ow];
            let mut bacc = F::zero();
            for &v in dplane.iter() {
                bacc = bacc + v;
            }
            db[oc] = db[oc] + bacc;
            let mut dw_row = dw.row_mut(oc);
            let dw_row = dw_row.as_slice_mut().expect("contiguous dw row");
            for ic in 0..self.in_ch {
                let in_plane = &img[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = F::zero();
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src_base = iy * w + (x0 as isize + dx) as usize;
                            let src = &in_plane[src_base..src_base + (x1 - x0)];
                            let dst = &dplane[y * ow + x0..y * ow + x1];
                            acc = acc + dot8(dst, src);
                        }
                        dw_row[(ic * k + ky) * k + kx] = dw_row[(ic * k + ky) * k + kx] + acc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer; weight is `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let weight =
            Array2::from_shape_fn((out_dim, in_dim), |_| F::from_f64(sample_normal(rng) * std));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(
        &self,
        x: &Array2<F>,
        dout: &Array2<F>,
        need_dx: bool,
    ) -> (Option<Array2<F>>, Array2<F>, Array1<F>) {
        let dw = dout.t().dot(x);
        let db = dout.sum_axis(Axis(0));
        let dx = if need_dx { Some(dout.dot(&self.weight)) } else { None };
        (dx, dw, db)
    }
}

// ---------------------------------------------------------------------------
// ReLU / max-pool
// ---------------------------------------------------------------------------

pub fn relu4<F: Scalar>(x: &mut Array4<F>) {
    x.par_mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

pub fn relu2<F: Scalar>(x: &mut Array2<F>) {
    x.par_mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// dX = dOut where the forward output was positive. `out` is the post-ReLU
/// activation.
pub fn relu_backward4<F: Scalar>(out: &Array4<F>, dout: &mut Array4<F>) {
    Zip::from(dout).and(out).par_for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
}

pub fn relu_backward2<F: Scalar>(out: &Array2<F>, dout: &mut Array2<F>) {
    Zip::from(dout).and(out).par_for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
}

/// 2x2 max pool with stride 2. Returns output and the within-window argmax
/// (0..4) needed by the backward pass. Trailing odd rows/cols are dropped.
pub fn maxpool2<F: Scalar>(x: &Array4<F>) -> (Array4<F>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut idx = Array4::zeros((n, c, oh, ow));
    let x_slice = x.as_slice().expect("contiguous pool input");
    let plane_in = h * w;
    let plane_out = oh * ow;
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(plane_out)
        .zip(idx.as_slice_mut().unwrap().par_chunks_mut(plane_out))
        .enumerate()
        .for_each(|(p, (out_plane, idx_plane))| {
            let src = &x_slice[p * plane_in..(p + 1) * plane_in];
            for r in 0..oh {
                let top = &src[2 * r * w..];
                let bot = &src[(2 * r + 1) * w..];
                let dst = &mut out_plane[r * ow..(r + 1) * ow];
                let di = &mut idx_plane[r * ow..(r + 1) * ow];
                for col in 0..ow {
                    let vals = [top[2 * col], top[2 * col + 1], bot[2 * col], bot[2 * col + 1]];
                    let mut best = vals[0];
                    let mut best_k = 0u8;
                    for (k, &v) in vals.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            best_k = k as u8;
                        }
                    }
                    dst[col] = best;
                    di[col] = best_k;
                }
            }
        });
    (out, idx)
}

pub fn maxpool2_backward<F: Scalar>(
    idx: &Array4<u8>,
    dout: &Array4<F>,
    in_hw: (usize, usize),
) -> Array4<F> {
    let (n, c, oh, ow) = dout.dim();
    let (h, w) = in_hw;
    let mut dx = Array4::zeros((n, c, h, w));
    let dout_slice = dout.as_slice().expect("contiguous dout");
    let idx_slice = idx.as_slice().expect("contiguous idx");
    let plane_in = h * w;
    let plane_out = oh * ow;
    let _ = n * c;
    dx.as_slice_mut()
        .unwrap()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(p, dst)| {
            let src = &dout_slice[p * plane_out..(p + 1) * plane_out];
            let ki = &idx_slice[p * plane_out..(p + 1) * plane_out];
            for r in 0..oh {
                for col in 0..ow {
                    let k = ki[r * ow + col];
                    let (dr, dc) = ((k / 2) as usize, (k % 2) as usize);
                    dst[(2 * r + dr) * w + 2 * col + dc] = src[r * ow + col];
                }
            }
        });
    dx
}

// ---------------------------------------------------------------------------
// ConvNet feature extractor
// ---------------------------------------------------------------------------

/// Feature extractor: conv blocks (each conv followed by ReLU, each block by
/// a 2x2 max pool), then a fully connected projection to the feature vector
/// (also ReLU-activated).
#[derive(Debug, Clone)]
pub struct ConvNet<F> {
    pub blocks: Vec<Vec<Conv2d<F>>>,
    pub fc: Linear<F>,
    pub input: (usize, usize, usize),
    pub feat_dim: usize,
}

pub struct NetCache<F> {
    /// Post-ReLU output of every conv layer, in layer order.
    conv_outs: Vec<Array4<F>>,
    /// Pooled output of every block.
    pooled: Vec<Array4<F>>,
    pool_idx: Vec<Array4<u8>>,
    pool_in_hw: Vec<(usize, usize)>,
    flat: Array2<F>,
    feat: Array2<F>,
}

/// Parameter gradients for a [`ConvNet`], in layer order.
pub struct ConvNetGrads<F> {
    pub convs: Vec<(Array2<F>, Array1<F>)>,
    pub fc: (Array2<F>, Array1<F>),
}

impl<F: Scalar> ConvNet<F> {
    /// Builds the extractor. `blocks` lists output channels per conv within
    /// each block. Fails if pooling exhausts the spatial dims.
    pub fn init<R: Rng>(
        input: (usize, usize, usize),
        blocks: &[Vec<usize>],
        feat_dim: usize,
        rng: &mut R,
    ) -> crate::Result<Self> {
        let (mut ch, mut h, mut w) = input;
        for _ in blocks {
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(crate::Error::Config(format!(
                    "conv blocks exhaust spatial dims for input {}x{}",
                    input.1, input.2
                )));
            }
        }
        let mut conv_blocks = Vec::new();
        for spec in blocks {
            let mut layer_block = Vec::new();
            for &out_ch in spec {
                layer_block.push(Conv2d::init(ch, out_ch, 3, 1, rng));
                ch = out_ch;
            }
            conv_blocks.push(layer_block);
        }
        let (_, mut h, mut w) = input;
        for _ in blocks {
            h /= 2;
            w /= 2;
        }
        let flat_dim = ch * h * w;
        let fc = Linear::init(flat_dim, feat_dim, rng);
        Ok(Self {
            blocks: conv_blocks,
            fc,
            input,
            feat_dim,
        })
    }

    pub fn forward_features(&self, x: &Array4<F>) -> (Array2<F>, NetCache<F>) {
        let n = x.dim().0;
        let mut conv_outs: Vec<Array4<F>> = Vec::new();
        let mut pooled: Vec<Array4<F>> = Vec::new();
        let mut pool_idx = Vec::new();
        let mut pool_in_hw = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (ci, conv) in block.iter().enumerate() {
                let input: &Array4<F> = if ci > 0 {
                    conv_outs.last().unwrap()
                } else if bi > 0 {
                    pooled.last().unwrap()
                } else {
                    x
                };
                let mut out = conv.forward(input);
                relu4(&mut out);
                conv_outs.push(out);
            }
            let cur = conv_outs.last().unwrap();
            let (_, _, h, w) = cur.dim();
            pool_in_hw.push((h, w));
            let (p, idx) = maxpool2(cur);
            pool_idx.push(idx);
            pooled.push(p);
        }
        let last = pooled.last().unwrap();
        let flat_dim = last.len() / n;
        let flat = last
            .clone()
            .into_shape_with_order((n, flat_dim))
            .expect("flatten pooled activations");
        let mut feat = self.fc.forward(&flat);
        relu2(&mut feat);
        let cache = NetCache {
            conv_outs,
            pooled,
            pool_idx,
            pool_in_hw,
            flat,
            feat: feat.clone(),
        };
        (feat, cache)
    }

    /// Backpropagates a feature gradient. `x` must be the batch the cache
    /// was built from. Returns the input gradient when `need_dx` and
    /// parameter gradients when `need_grads`.
    pub fn backward_features(
        &self,
        x: &Array4<F>,
        cache: &NetCache<F>,
        dfeat: &Array2<F>,
        need_dx: bool,
        need_grads: bool,
    ) -> (Option<Array4<F>>, Option<ConvNetGrads<F>>) {
        let mut dfeat = dfeat.clone();
        relu_backward2(&cache.feat, &mut dfeat);
        let (dflat, dw_fc, db_fc) = self.fc.backward(&cache.flat, &dfeat, true);
        let dflat = dflat.unwrap();

        let n_conv: usize = self.blocks.iter().map(|b| b.len()).sum();
        let mut conv_grads: Vec<Option<(Array2<F>, Array1<F>)>> = (0..n_conv).map(|_| None).collect();

        // Shape dflat back to the last pooled activation.
        let (n, c, ph, pw) = cache.pooled.last().unwrap().dim();
        let mut dcur = dflat
            .into_shape_with_order((n, c, ph, pw))
            .expect("unflatten gradient");

        let mut li = n_conv;
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            dcur = maxpool2_backward(&cache.pool_idx[bi], &dcur, cache.pool_in_hw[bi]);
            for (ci, conv) in block.iter().enumerate().rev() {
                li -= 1;
                relu_backward4(&cache.conv_outs[li], &mut dcur);
                let is_bottom = bi == 0 && ci == 0;
                let want_dx = !is_bottom || need_dx;
                let input: &Array4<F> = if ci > 0 {
                    &cache.conv_outs[li - 1]
                } else if bi > 0 {
                    &cache.pooled[bi - 1]
                } else {
                    x
                };
                let (dx, grads) = conv.backward(input, &dcur, want_dx, need_grads);
                if need_grads {
                    conv_grads[li] = grads;
                }
                if let Some(dx) = dx {
                    dcur = dx;
                } else {
                    // Bottom layer without input gradient: done.
                    debug_assert!(is_bottom);
                }
            }
        }

        let dx = if need_dx { Some(dcur) } else { None };
        let grads = if need_grads {
            Some(ConvNetGrads {
                convs: conv_grads.into_iter().map(|g| g.unwrap()).collect(),
                fc: (dw_fc, db_fc),
            })
        } else {
            None
        };
        (dx, grads)
    }

    pub fn zero_grads(&self) -> ConvNetGrads<F> {
        ConvNetGrads {
            convs: self
                .blocks
                .iter()
                .flatten()
                .map(|c| (Array2::zeros(c.weight.dim()), Array1::zeros(c.bias.dim())))
                .collect(),
            fc: (
                Array2::zeros(self.fc.weight.dim()),
                Array1::zeros(self.fc.bias.dim()),
            ),
        }
    }

    pub fn apply_sgd(&mut self, grads: &ConvNetGrads<F>, vel: &mut ConvNetGrads<F>, lr: F, momentum: F) {
        let mut li = 0;
        for block in self.blocks.iter_mut() {
            for conv in block.iter_mut() {
                let (gw, gb) = &grads.convs[li];
                let (vw, vb) = &mut vel.convs[li];
                sgd_update(&mut conv.weight, gw, vw, lr, momentum);
                sgd_update(&mut conv.bias, gb, vb, lr, momentum);
                li += 1;
            }
        }
        sgd_update(&mut self.fc.weight, &grads.fc.0, &mut vel.fc.0, lr, momentum);
        sgd_update(&mut self.fc.bias, &grads.fc.1, &mut vel.fc.1, lr, momentum);
    }

    pub fn param_count(&self) -> usize {
        let conv: usize = self
            .blocks
            .iter()
            .flatten()
            .map(|c| c.weight.len() + c.bias.len())
            .sum();
        conv + self.fc.weight.len() + self.fc.bias.len()
    }
}

/// SGD with classic momentum: v <- mu v + g; p <- p - lr v.
pub fn sgd_update<F: Scalar, D: Dimension>(
    p: &mut ndarray::Array<F, D>,
    g: &ndarray::Array<F, D>,
    v: &mut ndarray::Array<F, D>,
    lr: F,
    momentum: F,
) {
    Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    });
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy with optional per-example weights.
/// Returns the loss and dLoss/dLogits.
pub fn softmax_ce<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
    weights: Option<&[F]>,
) -> (F, Array2<F>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len(), "label count mismatch");
    let mut dlogits = softmax_probs(logits);
    let inv_n = F::one() / F::from_f64(n as f64);
    let mut loss = F::zero();
    for i in 0..n {
        let label = labels[i];
        assert!(label < k, "label out of range");
        let w = weights.map_or(F::one(), |ws| ws[i]);
        let p = dlogits[(i, label)];
        let p_safe = if p < F::from_f64(1e-12) { F::from_f64(1e-12) } else { p };
        loss = loss + w * (-p_safe.ln());
        let mut row = dlogits.row_mut(i);
        for j in 0..k {
            let y = if j == label { F::one() } else { F::zero() };
            row[j] = (row[j] - y) * w * inv_n;
        }
    }
    (loss * inv_n, dlogits)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_probs<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let mut max = row[0];
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    probs
}

/// Row-wise argmax with smallest-index tie breaking.
pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Dot product with eight fixed accumulator lanes so the reduction
/// vectorizes; the association order is fixed, keeping results bit-stable.
fn dot8<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] = lanes[i] + xa[i] * xb[i];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

fn chunk_ranges(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        ranges.push((start, end));
        start = end;
    }
    ranges
}

fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let v: f64 = StandardNormal.sample(rng);
    v
}
