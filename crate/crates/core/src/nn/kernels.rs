//! CPU kernels behind the differentiable ops. All kernels are deterministic:
//! work is split into fixed-size pieces that do not depend on the thread
//! count, and every reduction runs in a fixed order.

use rayon::prelude::*;

/// Output columns handled by one conv work item.
const COL_CHUNK: usize = 1024;

#[derive(Clone, Copy)]
struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const f32,
    rsa: usize,
    csa: usize,
    b: *const f32,
    rsb: usize,
    csb: usize,
    beta: f32,
    c: *mut f32,
    rsc: usize,
    csc: usize,
) {
    // SAFETY: callers pass pointers into live buffers whose extents cover the
    // strided m×k, k×n and m×n views.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a,
            rsa as isize,
            csa as isize,
            b,
            rsb as isize,
            csb as isize,
            beta,
            c,
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a stride-1 "same" convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn ckk(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

fn im2col_chunk(x: &[f32], g: &ConvGeom, p0: usize, p1: usize, col: &mut [f32]) {
    let k = g.kernel;
    let pad = (k / 2) as isize;
    let len = p1 - p0;
    let (h, w) = (g.height as isize, g.width as isize);
    for ci in 0..g.cin {
        let plane = &x[ci * g.hw()..(ci + 1) * g.hw()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * len..(row + 1) * len];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for (j, p) in (p0..p1).enumerate() {
                    let y = (p / g.width) as isize + dy;
                    let xx = (p % g.width) as isize + dx;
                    dst[j] = if y >= 0 && y < h && xx >= 0 && xx < w {
                        plane[(y * w + xx) as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// `y = conv(x, w) + b` with stride 1 and zero padding `kernel / 2`.
pub fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let hw = g.hw();
    let ckk = g.ckk();
    let mut out = vec![0.0f32; g.batch * g.cout * hw];
    if let Some(b) = bias {
        for n in 0..g.batch {
            for (co, &bv) in b.iter().enumerate().take(g.cout) {
                let base = (n * g.cout + co) * hw;
                out[base..base + hw].fill(bv);
            }
        }
    }
    let chunks = hw.div_ceil(COL_CHUNK);
    let out_ptr = SendPtr(out.as_mut_ptr());
    (0..g.batch * chunks).into_par_iter().for_each(|item| {
        // Capture the Send wrapper, not its raw-pointer field.
        #[allow(clippy::redundant_locals)]
        let out_ptr = out_ptr;
        let n = item / chunks;
        let p0 = (item % chunks) * COL_CHUNK;
        let p1 = (p0 + COL_CHUNK).min(hw);
        let len = p1 - p0;
        let xs = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        let c = unsafe { out_ptr.0.add(n * g.cout * hw + p0) };
        if g.kernel == 1 {
            gemm(
                g.cout,
                g.cin,
                len,
                w.as_ptr(),
                g.cin,
                1,
                xs[p0..].as_ptr(),
                hw,
                1,
                1.0,
                c,
                hw,
                1,
            );
        } else {
            let mut col = vec![0.0f32; ckk * len];
            im2col_chunk(xs, g, p0, p1, &mut col);
            gemm(
                g.cout,
                ckk,
                len,
                w.as_ptr(),
                ckk,
                1,
                col.as_ptr(),
                len,
                1,
                1.0,
                c,
                hw,
                1,
            );
        }
    });
    out
}

/// Gradients of a stride-1 "same" convolution.
/// Returns `(grad_x, grad_w, grad_b)`; `grad_x` is skipped when not needed.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_x: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let hw = g.hw();
    let ckk = g.ckk();
    let k = g.kernel;

    let mut grad_b = vec![0.0f32; g.cout];
    for (co, gb) in grad_b.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for n in 0..g.batch {
            let base = (n * g.cout + co) * hw;
            acc += dy[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        *gb = acc as f32;
    }

    let per_sample: Vec<Vec<f32>> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let mut gw = vec![0.0f32; g.cout * ckk];
            let xs = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
            let dys = &dy[n * g.cout * hw..(n + 1) * g.cout * hw];
            let mut col = if k == 1 {
                Vec::new()
            } else {
                vec![0.0f32; ckk * COL_CHUNK]
            };
            let mut p0 = 0;
            while p0 < hw {
                let p1 = (p0 + COL_CHUNK).min(hw);
                let len = p1 - p0;
                let (bptr, rsb) = if k == 1 {
                    (xs[p0..].as_ptr(), hw)
                } else {
                    im2col_chunk(xs, g, p0, p1, &mut col[..ckk * len]);
                    (col.as_ptr(), len)
                };
                // dW (cout×ckk) += dY[:, p0..p1] (cout×len) · colᵀ (len×ckk)
                gemm(
                    g.cout,
                    len,
                    ckk,
                    dys[p0..].as_ptr(),
                    hw,
                    1,
                    bptr,
                    1,
                    rsb,
                    1.0,
                    gw.as_mut_ptr(),
                    ckk,
                    1,
                );
                p0 = p1;
            }
            gw
        })
        .collect();
    let mut grad_w = vec![0.0f32; g.cout * ckk];
    for gw in &per_sample {
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += *b;
        }
    }

    let grad_x = need_x.then(|| {
        // The input gradient of a "same" convolution is the "same" convolution
        // of dy with the spatially flipped, channel-transposed kernel.
        let mut wt = vec![0.0f32; g.cin * g.cout * k * k];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        wt[((ci * g.cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            w[((co * g.cin + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        let gt = ConvGeom {
            cin: g.cout,
            cout: g.cin,
            ..*g
        };
        conv2d_forward(dy, &wt, None, &gt)
    });
    (grad_x, grad_w, grad_b)
}

/// 2×2 stride-2 max pooling. Returns pooled values and, per output element,
/// the flat index of the winning element inside its input plane.
pub fn maxpool2_forward(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut idx = vec![0u32; n * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(idx.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (o, ix))| {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = 2 * y * w + 2 * xx;
                    let mut best_v = src[best];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let p = (2 * y + dy) * w + 2 * xx + dx;
                        if src[p] > best_v {
                            best_v = src[p];
                            best = p;
                        }
                    }
                    o[y * ow + xx] = best_v;
                    ix[y * ow + xx] = best as u32;
                }
            }
        });
    (out, idx)
}

/// Scatters pooled gradients back to the argmax locations.
pub fn maxpool2_backward(dy: &[f32], idx: &[u32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let out_plane = dy.len() / planes;
    let mut dx = vec![0.0f32; planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        for j in 0..out_plane {
            d[idx[p * out_plane + j] as usize] += dy[p * out_plane + j];
        }
    });
    dx
}

/// Index unpooling: each value lands at its stored argmax location inside a
/// plane of `h × w`, zeros elsewhere.
pub fn unpool_forward(x: &[f32], idx: &[u32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    maxpool2_backward(x, idx, planes, h, w)
}

pub fn unpool_backward(dy: &[f32], idx: &[u32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let in_plane = idx.len() / planes;
    let mut dx = vec![0.0f32; idx.len()];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(p, d)| {
        for (j, v) in d.iter_mut().enumerate() {
            *v = dy[p * h * w + idx[p * in_plane + j] as usize];
        }
    });
    dx
}

/// Nearest-neighbour 2× upsampling of `planes` planes of `h × w`.
pub fn upsample2_forward(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, o)| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                o[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    });
    out
}

pub fn upsample2_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let ow = 2 * w;
    let mut dx = vec![0.0f32; planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let a = src[(2 * y) * ow + 2 * xx];
                let b = src[(2 * y) * ow + 2 * xx + 1];
                let c = src[(2 * y + 1) * ow + 2 * xx];
                let e = src[(2 * y + 1) * ow + 2 * xx + 1];
                d[y * w + xx] = (a + b) + (c + e);
            }
        }
    });
    dx
}

pub const BN_EPS: f32 = 1e-5;

/// Training-mode batch norm output plus what the backward pass needs.
pub struct BnForward {
    pub y: Vec<f32>,
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub batch_mean: Vec<f32>,
    /// Unbiased variance, used for the running estimate.
    pub batch_var_unbiased: Vec<f32>,
}

fn channel_slices(
    n: usize,
    c: usize,
    hw: usize,
    ch: usize,
) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw)
}

pub fn batchnorm_train(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    n: usize,
    c: usize,
    hw: usize,
) -> BnForward {
    let m = (n * hw) as f64;
    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0f64;
            for r in channel_slices(n, c, hw, ch) {
                sum += x[r].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for r in channel_slices(n, c, hw, ch) {
                sq += x[r].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
            }
            (mean, sq)
        })
        .collect();
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; c];
    let mut batch_mean = vec![0.0f32; c];
    let mut batch_var_unbiased = vec![0.0f32; c];
    for (ch, &(mean, sq)) in stats.iter().enumerate() {
        let var = sq / m;
        let is = 1.0 / (var + BN_EPS as f64).sqrt();
        inv_std[ch] = is as f32;
        batch_mean[ch] = mean as f32;
        batch_var_unbiased[ch] = if m > 1.0 {
            (sq / (m - 1.0)) as f32
        } else {
            0.0
        };
        for r in channel_slices(n, c, hw, ch) {
            for i in r {
                let xh = ((x[i] as f64 - mean) * is) as f32;
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnForward {
        y,
        xhat,
        inv_std,
        batch_mean,
        batch_var_unbiased,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for ch in 0..c {
        let is = 1.0 / (running_var[ch] + BN_EPS).sqrt();
        for r in channel_slices(n, c, hw, ch) {
            for i in r {
                y[i] = (x[i] - running_mean[ch]) * is * gamma[ch] + beta[ch];
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)` for training-mode batch norm.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = (n * hw) as f64;
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut s, mut sx) = (0.0f64, 0.0f64);
            for r in channel_slices(n, c, hw, ch) {
                for i in r {
                    s += dy[i] as f64;
                    sx += dy[i] as f64 * xhat[i] as f64;
                }
            }
            (s, sx)
        })
        .collect();
    let mut dx = vec![0.0f32; dy.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for (ch, &(s, sx)) in sums.iter().enumerate() {
        dbeta[ch] = s as f32;
        dgamma[ch] = sx as f32;
        let g = gamma[ch] as f64;
        let is = inv_std[ch] as f64;
        // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
        for r in channel_slices(n, c, hw, ch) {
            for i in r {
                let v = g * is / m * (m * dy[i] as f64 - s - xhat[i] as f64 * sx);
                dx[i] = v as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}
