//! Strided 3D cross-correlation kernels.
//!
//! Three routines cover every convolution in the crate: `forward`,
//! `input_grad` and `weight_grad`. `forward` and `input_grad` are mutual
//! adjoints, so the transposed convolution runs `input_grad` as its forward
//! pass and `forward` as its backward pass.
//!
//! Weights are laid out `[out_c, in_c, kd, kh, kw]`. All loops run in a fixed
//! order and parallel tasks own disjoint output planes, so results do not
//! depend on the thread count.

use crate::parallel;

/// Geometry of one cross-correlation: `in_spatial` maps to `out_spatial`
/// under `kernel`/`stride`/`pad` (zero padding on both sides).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub in_spatial: [usize; 3],
    pub out_spatial: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvDims {
    pub fn new(
        batch: usize,
        in_c: usize,
        out_c: usize,
        in_spatial: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let out_spatial = std::array::from_fn(|a| {
            (in_spatial[a] + 2 * pad[a]).saturating_sub(kernel[a]) / stride[a] + 1
        });
        Self { batch, in_c, out_c, in_spatial, out_spatial, kernel, stride, pad }
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.in_c * self.in_spatial.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_c * self.out_spatial.iter().product::<usize>()
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel.iter().product::<usize>()
    }
}

/// Output indices o in [lo, hi) for which 0 <= o*stride + offset < n.
fn valid_range(out_n: usize, stride: usize, offset: isize, n: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let room = n as isize - offset;
    if room <= 0 {
        return (0, 0);
    }
    let hi = (room as usize).div_ceil(stride);
    (lo.min(out_n), hi.min(out_n))
}

/// out[b,oc,z] = bias[oc] + sum over ic,k of w[oc,ic,k] * x[b,ic,z*s+k-p]
pub fn forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, dims: &ConvDims) -> Vec<f64> {
    assert_eq!(x.len(), dims.in_len());
    assert_eq!(w.len(), dims.weight_len());
    let [di, hi_n, wi] = dims.in_spatial;
    let [do_n, ho_n, wo_n] = dims.out_spatial;
    let [kd, kh, kw] = dims.kernel;
    let [sd, sh, sw] = dims.stride;
    let [pd, ph, pw] = dims.pad;
    let out_plane = do_n * ho_n * wo_n;
    let mut out = vec![0.0; dims.out_len()];

    parallel::for_each_chunk_mut(&mut out, out_plane, |plane, chunk| {
        let b = plane / dims.out_c;
        let oc = plane % dims.out_c;
        if let Some(bias) = bias {
            chunk.fill(bias[oc]);
        }
        for ic in 0..dims.in_c {
            let x_base = (b * dims.in_c + ic) * di * hi_n * wi;
            for zd in 0..kd {
                let d_off = zd as isize - pd as isize;
                let (od_lo, od_hi) = valid_range(do_n, sd, d_off, di);
                for zh in 0..kh {
                    let h_off = zh as isize - ph as isize;
                    let (oh_lo, oh_hi) = valid_range(ho_n, sh, h_off, hi_n);
                    for zw in 0..kw {
                        let w_off = zw as isize - pw as isize;
                        let (ow_lo, ow_hi) = valid_range(wo_n, sw, w_off, wi);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = w[(((oc * dims.in_c + ic) * kd + zd) * kh + zh) * kw + zw];
                        for od in od_lo..od_hi {
                            let id = (od * sd) as isize + d_off;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * sh) as isize + h_off;
                                let xrow = x_base + (id as usize * hi_n + ih as usize) * wi;
                                let orow = (od * ho_n + oh) * wo_n;
                                if sw == 1 {
                                    let shift = (ow_lo as isize + w_off) as usize;
                                    let xs = &x[xrow + shift..xrow + shift + (ow_hi - ow_lo)];
                                    let os = &mut chunk[orow + ow_lo..orow + ow_hi];
                                    for (o, &xv) in os.iter_mut().zip(xs) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ((ow * sw) as isize + w_off) as usize;
                                        chunk[orow + ow] += wv * x[xrow + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of `forward` with respect to the input:
/// dx[b,ic,z*s+k-p] += w[oc,ic,k] * gy[b,oc,z].
pub fn input_grad(gy: &[f64], w: &[f64], dims: &ConvDims) -> Vec<f64> {
    assert_eq!(gy.len(), dims.out_len());
    assert_eq!(w.len(), dims.weight_len());
    let [di, hi_n, wi] = dims.in_spatial;
    let [do_n, ho_n, wo_n] = dims.out_spatial;
    let [kd, kh, kw] = dims.kernel;
    let [sd, sh, sw] = dims.stride;
    let [pd, ph, pw] = dims.pad;
    let in_plane = di * hi_n * wi;
    let mut dx = vec![0.0; dims.in_len()];

    parallel::for_each_chunk_mut(&mut dx, in_plane, |plane, chunk| {
        let b = plane / dims.in_c;
        let ic = plane % dims.in_c;
        for oc in 0..dims.out_c {
            let g_base = (b * dims.out_c + oc) * do_n * ho_n * wo_n;
            for zd in 0..kd {
                let d_off = zd as isize - pd as isize;
                let (od_lo, od_hi) = valid_range(do_n, sd, d_off, di);
                for zh in 0..kh {
                    let h_off = zh as isize - ph as isize;
                    let (oh_lo, oh_hi) = valid_range(ho_n, sh, h_off, hi_n);
                    for zw in 0..kw {
                        let w_off = zw as isize - pw as isize;
                        let (ow_lo, ow_hi) = valid_range(wo_n, sw, w_off, wi);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = w[(((oc * dims.in_c + ic) * kd + zd) * kh + zh) * kw + zw];
                        for od in od_lo..od_hi {
                            let id = ((od * sd) as isize + d_off) as usize;
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * sh) as isize + h_off) as usize;
                                let grow = g_base + (od * ho_n + oh) * wo_n;
                                let drow = (id * hi_n + ih) * wi;
                                if sw == 1 {
                                    let shift = (ow_lo as isize + w_off) as usize;
                                    let gs = &gy[grow + ow_lo..grow + ow_hi];
                                    let ds = &mut chunk[drow + shift..drow + shift + (ow_hi - ow_lo)];
                                    for (d, &gv) in ds.iter_mut().zip(gs) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ((ow * sw) as isize + w_off) as usize;
                                        chunk[drow + iw] += wv * gy[grow + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// dW[oc,ic,k] = sum over b,z of gy[b,oc,z] * x[b,ic,z*s+k-p].
pub fn weight_grad(x: &[f64], gy: &[f64], dims: &ConvDims) -> Vec<f64> {
    assert_eq!(x.len(), dims.in_len());
    assert_eq!(gy.len(), dims.out_len());
    let [di, hi_n, wi] = dims.in_spatial;
    let [do_n, ho_n, wo_n] = dims.out_spatial;
    let [kd, kh, kw] = dims.kernel;
    let [sd, sh, sw] = dims.stride;
    let [pd, ph, pw] = dims.pad;
    let kernel_len = kd * kh * kw;
    let mut dw = vec![0.0; dims.weight_len()];

    parallel::for_each_chunk_mut(&mut dw, kernel_len, |pair, chunk| {
        let oc = pair / dims.in_c;
        let ic = pair % dims.in_c;
        for zd in 0..kd {
            let d_off = zd as isize - pd as isize;
            let (od_lo, od_hi) = valid_range(do_n, sd, d_off, di);
            for zh in 0..kh {
                let h_off = zh as isize - ph as isize;
                let (oh_lo, oh_hi) = valid_range(ho_n, sh, h_off, hi_n);
                for zw in 0..kw {
                    let w_off = zw as isize - pw as isize;
                    let (ow_lo, ow_hi) = valid_range(wo_n, sw, w_off, wi);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for b in 0..dims.batch {
                        let x_base = (b * dims.in_c + ic) * di * hi_n * wi;
                        let g_base = (b * dims.out_c + oc) * do_n * ho_n * wo_n;
                        for od in od_lo..od_hi {
                            let id = ((od * sd) as isize + d_off) as usize;
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * sh) as isize + h_off) as usize;
                                let xrow = x_base + (id * hi_n + ih) * wi;
                                let grow = g_base + (od * ho_n + oh) * wo_n;
                                if sw == 1 {
                                    let shift = (ow_lo as isize + w_off) as usize;
                                    let xs = &x[xrow + shift..xrow + shift + (ow_hi - ow_lo)];
                                    let gs = &gy[grow + ow_lo..grow + ow_hi];
                                    for (&gv, &xv) in gs.iter().zip(xs) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ((ow * sw) as isize + w_off) as usize;
                                        acc += gy[grow + ow] * x[xrow + iw];
                                    }
                                }
                            }
                        }
                    }
                    chunk[(zd * kh + zh) * kw + zw] = acc;
                }
            }
        }
    });
    dw
}

/// dBias[oc] = sum of gy over batch and spatial positions.
pub fn bias_grad(gy: &[f64], dims: &ConvDims) -> Vec<f64> {
    let plane = dims.out_spatial.iter().product::<usize>();
    let mut db = vec![0.0; dims.out_c];
    for b in 0..dims.batch {
        for oc in 0..dims.out_c {
            let base = (b * dims.out_c + oc) * plane;
            let mut acc = 0.0;
            for v in &gy[base..base + plane] {
                acc += v;
            }
            db[oc] += acc;
        }
    }
    db
}
