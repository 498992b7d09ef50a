//! Layer primitives with hand-written reverse-mode passes.

use super::grid::FeatureGrid;
use crate::error::{Error, Result};

/// Normalized voxel coordinates for a volume of `dims = [nx, ny, nz]`.
///
/// Returns shape `(1, 3, nz, ny, nx)`; channel 0 varies along x, 1 along y
/// and 2 along z, each running linearly from -1 to +1.
pub fn coordinate_channels(dims: [usize; 3]) -> Result<FeatureGrid> {
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::invalid(format!(
            "coordinate channels need at least 2 voxels per axis, got {dims:?}"
        )));
    }
    let [nx, ny, nz] = dims;
    let axis = |n: usize| -> Vec<f64> {
        // Integer numerator keeps c[n-1-i] == -c[i] exactly.
        let m = (n - 1) as f64;
        (0..n).map(|i| (2.0 * i as f64 - m) / m).collect()
    };
    let (cx, cy, cz) = (axis(nx), axis(ny), axis(nz));
    let mut g = FeatureGrid::zeros([1, 3, nz, ny, nx]);
    let v = nx * ny * nz;
    let data = g.data_mut();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                data[i] = cx[x];
                data[v + i] = cy[y];
                data[2 * v + i] = cz[z];
            }
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Convolution with replicate padding
// ---------------------------------------------------------------------------

/// Geometry of a stride-1 convolution evaluated on a padded grid.
///
/// Each output voxel `(z, y, x)` maps to column `q = z*hp*wp + y*wp + x` of a
/// `cout x span` matrix; the kernel tap `(a, b, c)` reads padded input column
/// `q + a*hp*wp + b*wp + c`. Every tap is then a plain strided GEMM.
struct PaddedGeometry {
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    hp: usize,
    wp: usize,
    padded: usize,
    span: usize,
}

impl PaddedGeometry {
    fn new(spatial: [usize; 3], k: usize) -> Self {
        let [d, h, w] = spatial;
        let r = k / 2;
        let (dp, hp, wp) = (d + 2 * r, h + 2 * r, w + 2 * r);
        PaddedGeometry {
            d,
            h,
            w,
            k,
            hp,
            wp,
            padded: dp * hp * wp,
            span: (d - 1) * hp * wp + (h - 1) * wp + w,
        }
    }

    fn tap_offset(&self, tap: usize) -> usize {
        let k = self.k;
        let (a, b, c) = (tap / (k * k), (tap / k) % k, tap % k);
        a * self.hp * self.wp + b * self.wp + c
    }

    #[inline]
    fn column(&self, z: usize, y: usize, x: usize) -> usize {
        z * self.hp * self.wp + y * self.wp + x
    }

    /// Edge-replicated copy of one channel.
    fn pad_into(&self, src: &[f64], dst: &mut [f64]) {
        let r = self.k / 2;
        let dp = self.d + 2 * r;
        let mut i = 0;
        for zp in 0..dp {
            let z = zp.saturating_sub(r).min(self.d - 1);
            for yp in 0..self.hp {
                let y = yp.saturating_sub(r).min(self.h - 1);
                let row = &src[(z * self.h + y) * self.w..(z * self.h + y + 1) * self.w];
                for xp in 0..self.wp {
                    dst[i] = row[xp.saturating_sub(r).min(self.w - 1)];
                    i += 1;
                }
            }
        }
    }

    /// Adjoint of [`PaddedGeometry::pad_into`]: accumulate padded gradients onto their source voxels.
    fn fold_into(&self, src: &[f64], dst: &mut [f64]) {
        let r = self.k / 2;
        let dp = self.d + 2 * r;
        let mut i = 0;
        for zp in 0..dp {
            let z = zp.saturating_sub(r).min(self.d - 1);
            for yp in 0..self.hp {
                let y = yp.saturating_sub(r).min(self.h - 1);
                let base = (z * self.h + y) * self.w;
                for xp in 0..self.wp {
                    dst[base + xp.saturating_sub(r).min(self.w - 1)] += src[i];
                    i += 1;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // Bounds of the strided views; keeps the raw-pointer call in range.
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn check_conv(input: &FeatureGrid, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Result<usize> {
    if k % 2 == 0 {
        return Err(Error::Shape(format!("kernel size {k} must be odd")));
    }
    let cin = input.channels();
    if weight.len() != cout * cin * k * k * k {
        return Err(Error::Shape(format!(
            "weight has {} values, expected {cout}x{cin}x{k}^3",
            weight.len()
        )));
    }
    if bias.len() != cout {
        return Err(Error::Shape(format!("bias has {} values, expected {cout}", bias.len())));
    }
    Ok(cin)
}

/// Stride-1 3-D convolution, spatial size preserved, borders padded by
/// replicating the edge voxels. `weight` is `[cout][cin][k][k][k]`.
pub fn conv3d_replicate(
    input: &FeatureGrid,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Result<FeatureGrid> {
    let cin = check_conv(input, weight, bias, cout, k)?;
    let g = PaddedGeometry::new(input.spatial(), k);
    let k3 = k * k * k;
    let [n, _, d, h, w] = input.shape();
    let mut out = FeatureGrid::zeros([n, cout, d, h, w]);
    let mut xp = vec![0.0; cin * g.padded];
    let mut cols = vec![0.0; cout * g.span];
    for b in 0..n {
        for ci in 0..cin {
            g.pad_into(input.channel(b, ci), &mut xp[ci * g.padded..(ci + 1) * g.padded]);
        }
        cols.fill(0.0);
        for tap in 0..k3 {
            let off = g.tap_offset(tap);
            gemm_acc(
                cout,
                cin,
                g.span,
                &weight[tap..],
                cin * k3,
                k3,
                &xp[off..],
                g.padded,
                1,
                &mut cols,
                g.span,
                1,
            );
        }
        for co in 0..cout {
            let col = &cols[co * g.span..(co + 1) * g.span];
            let dst = out.channel_mut(b, co);
            let bv = bias[co];
            for z in 0..d {
                for y in 0..h {
                    let q = g.column(z, y, 0);
                    let o = (z * h + y) * w;
                    for x in 0..w {
                        dst[o + x] = col[q + x] + bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_replicate`] for input, weight and bias.
pub fn conv3d_replicate_backward(
    input: &FeatureGrid,
    weight: &[f64],
    cout: usize,
    k: usize,
    grad_out: &FeatureGrid,
) -> Result<(FeatureGrid, Vec<f64>, Vec<f64>)> {
    let cin = input.channels();
    let [n, _, d, h, w] = input.shape();
    if grad_out.shape() != [n, cout, d, h, w] {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match output [{n}, {cout}, {d}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let g = PaddedGeometry::new(input.spatial(), k);
    let k3 = k * k * k;
    let mut grad_in = FeatureGrid::zeros(input.shape());
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_b = vec![0.0; cout];
    let mut xp = vec![0.0; cin * g.padded];
    let mut gxp = vec![0.0; cin * g.padded];
    let mut cols = vec![0.0; cout * g.span];
    for b in 0..n {
        for ci in 0..cin {
            g.pad_into(input.channel(b, ci), &mut xp[ci * g.padded..(ci + 1) * g.padded]);
        }
        cols.fill(0.0);
        for co in 0..cout {
            let src = grad_out.channel(b, co);
            grad_b[co] += src.iter().sum::<f64>();
            let col = &mut cols[co * g.span..(co + 1) * g.span];
            for z in 0..d {
                for y in 0..h {
                    let q = g.column(z, y, 0);
                    let o = (z * h + y) * w;
                    col[q..q + w].copy_from_slice(&src[o..o + w]);
                }
            }
        }
        gxp.fill(0.0);
        for tap in 0..k3 {
            let off = g.tap_offset(tap);
            // dW[:, :, tap] += G * Xtap^T
            gemm_acc(
                cout,
                g.span,
                cin,
                &cols,
                g.span,
                1,
                &xp[off..],
                1,
                g.padded,
                &mut grad_w[tap..],
                cin * k3,
                k3,
            );
            // dXtap += W[:, :, tap]^T * G
            gemm_acc(
                cin,
                cout,
                g.span,
                &weight[tap..],
                k3,
                cin * k3,
                &cols,
                g.span,
                1,
                &mut gxp[off..],
                g.padded,
                1,
            );
        }
        for ci in 0..cin {
            g.fold_into(&gxp[ci * g.padded..(ci + 1) * g.padded], grad_in.channel_mut(b, ci));
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct NormCache {
    /// Normalized values before the affine step.
    pub xhat: FeatureGrid,
    /// `1 / sqrt(var + eps)` per (batch, channel).
    pub inv_std: Vec<f64>,
}

/// Per-instance, per-channel normalization followed by a learnable affine map.
pub fn instance_norm(
    input: &FeatureGrid,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(FeatureGrid, NormCache)> {
    let [n, c, ..] = input.shape();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("norm parameters must have {c} entries")));
    }
    let v = input.voxels();
    if v < 2 {
        return Err(Error::Shape("instance norm needs at least 2 voxels per channel".into()));
    }
    let mut xhat = FeatureGrid::zeros(input.shape());
    let mut out = FeatureGrid::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let x = input.channel(b, ch);
            let mean = x.iter().sum::<f64>() / v as f64;
            let var = x.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / v as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.channel_mut(b, ch);
            for (o, &a) in xh.iter_mut().zip(x) {
                *o = (a - mean) * is;
            }
            let (g, be) = (gamma[ch], beta[ch]);
            for (o, &a) in out.channel_mut(b, ch).iter_mut().zip(xhat.channel(b, ch)) {
                *o = g * a + be;
            }
        }
    }
    Ok((out, NormCache { xhat, inv_std }))
}

pub fn instance_norm_backward(
    grad_out: &FeatureGrid,
    cache: &NormCache,
    gamma: &[f64],
) -> (FeatureGrid, Vec<f64>, Vec<f64>) {
    let [n, c, ..] = grad_out.shape();
    let v = grad_out.voxels() as f64;
    let mut grad_in = FeatureGrid::zeros(grad_out.shape());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let gy = grad_out.channel(b, ch);
            let xh = cache.xhat.channel(b, ch);
            let sum_g: f64 = gy.iter().sum();
            let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
            gg[ch] += sum_gx;
            gb[ch] += sum_g;
            let scale = gamma[ch] * cache.inv_std[b * c + ch] / v;
            for ((o, &g), &x) in grad_in.channel_mut(b, ch).iter_mut().zip(gy).zip(xh) {
                *o = scale * (v * g - sum_g - x * sum_gx);
            }
        }
    }
    (grad_in, gg, gb)
}

// ---------------------------------------------------------------------------
// Activation, pooling, upsampling, softmax
// ---------------------------------------------------------------------------

pub fn leaky_relu(input: &FeatureGrid, slope: f64) -> FeatureGrid {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Derivative taken as 1 at exactly zero.
pub fn leaky_relu_backward(input: &FeatureGrid, grad_out: &FeatureGrid, slope: f64) -> FeatureGrid {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x < 0.0 {
            *gv *= slope;
        }
    }
    g
}

/// 2x2x2 max pooling. Also returns, per output value, the flat in-channel
/// index of the selected input voxel (first in raster order on ties).
pub fn maxpool2(input: &FeatureGrid) -> Result<(FeatureGrid, Vec<u32>)> {
    let [n, c, d, h, w] = input.shape();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even dims, got {:?}", input.spatial())));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = FeatureGrid::zeros([n, c, od, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * od * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let x = input.channel(b, ch);
            let y = out.channel_mut(b, ch);
            let mut o = 0;
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = usize::MAX;
                        let mut bv = f64::NEG_INFINITY;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((2 * z + dz) * h + 2 * yy + dy) * w + 2 * xx + dx;
                                    if best == usize::MAX || x[i] > bv {
                                        best = i;
                                        bv = x[i];
                                    }
                                }
                            }
                        }
                        y[o] = bv;
                        arg.push(best as u32);
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(input_shape: [usize; 5], argmax: &[u32], grad_out: &FeatureGrid) -> FeatureGrid {
    let mut g = FeatureGrid::zeros(input_shape);
    let per = grad_out.voxels();
    for b in 0..input_shape[0] {
        for ch in 0..input_shape[1] {
            let go = grad_out.channel(b, ch);
            let base = (b * input_shape[1] + ch) * per;
            let dst = g.channel_mut(b, ch);
            for (j, &gv) in go.iter().enumerate() {
                dst[argmax[base + j] as usize] += gv;
            }
        }
    }
    g
}

/// Source indices and weights of 2x linear upsampling along an axis of
/// length `len` (half-pixel centers, edges clamped).
#[inline]
fn up_taps(o: usize, len: usize) -> [(usize, f64); 2] {
    let i = o / 2;
    if o % 2 == 0 {
        [(i.saturating_sub(1), 0.25), (i, 0.75)]
    } else {
        [(i, 0.75), ((i + 1).min(len - 1), 0.25)]
    }
}

/// Upsample `data`, viewed as `[outer][len][inner]`, by 2 along the middle axis.
fn up_axis(data: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * 2 * len * inner];
    for o in 0..outer {
        let src = &data[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for j in 0..2 * len {
            let [(i0, w0), (i1, w1)] = up_taps(j, len);
            let row = &mut dst[j * inner..(j + 1) * inner];
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for t in 0..inner {
                row[t] = w0 * a[t] + w1 * b[t];
            }
        }
    }
    out
}

/// Adjoint of [`up_axis`].
fn up_axis_adjoint(grad: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &grad[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let dst = &mut out[o * len * inner..(o + 1) * len * inner];
        for j in 0..2 * len {
            let g = &src[j * inner..(j + 1) * inner];
            for (i, wt) in up_taps(j, len) {
                let row = &mut dst[i * inner..(i + 1) * inner];
                for t in 0..inner {
                    row[t] += wt * g[t];
                }
            }
        }
    }
    out
}

/// Trilinear 2x upsampling with half-pixel (align-corners false) sampling.
pub fn trilinear_up2(input: &FeatureGrid) -> FeatureGrid {
    let [n, c, d, h, w] = input.shape();
    let nc = n * c;
    let a = up_axis(input.data(), nc * d * h, w, 1);
    let a = up_axis(&a, nc * d, h, 2 * w);
    let a = up_axis(&a, nc, d, 4 * h * w);
    FeatureGrid::from_vec([n, c, 2 * d, 2 * h, 2 * w], a).expect("consistent shape")
}

pub fn trilinear_up2_backward(grad_out: &FeatureGrid) -> FeatureGrid {
    let [n, c, d2, h2, w2] = grad_out.shape();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let nc = n * c;
    let a = up_axis_adjoint(grad_out.data(), nc, d, 4 * h * w);
    let a = up_axis_adjoint(&a, nc * d, h, 2 * w);
    let a = up_axis_adjoint(&a, nc * d * h, w, 1);
    FeatureGrid::from_vec([n, c, d, h, w], a).expect("consistent shape")
}

/// Softmax across channels at every voxel.
pub fn softmax_channels(input: &FeatureGrid) -> FeatureGrid {
    let [n, c, ..] = input.shape();
    let v = input.voxels();
    let mut out = input.clone();
    let data = out.data_mut();
    for b in 0..n {
        let base = b * c * v;
        for i in 0..v {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(data[base + ch * v + i]);
            }
            let mut s = 0.0;
            for ch in 0..c {
                let e = (data[base + ch * v + i] - m).exp();
                data[base + ch * v + i] = e;
                s += e;
            }
            for ch in 0..c {
                data[base + ch * v + i] /= s;
            }
        }
    }
    out
}

/// Gradient wrt logits given the softmax output and the gradient wrt it.
pub fn softmax_channels_backward(probs: &FeatureGrid, grad_probs: &FeatureGrid) -> FeatureGrid {
    let [n, c, ..] = probs.shape();
    let v = probs.voxels();
    let p = probs.data();
    let gp = grad_probs.data();
    let mut out = FeatureGrid::zeros(probs.shape());
    let g = out.data_mut();
    for b in 0..n {
        let base = b * c * v;
        for i in 0..v {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += p[base + ch * v + i] * gp[base + ch * v + i];
            }
            for ch in 0..c {
                let j = base + ch * v + i;
                g[j] = p[j] * (gp[j] - dot);
            }
        }
    }
    out
}
