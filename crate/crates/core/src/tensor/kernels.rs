//! Raw slice kernels used by the tape ops. No autodiff here, just math.

use crate::error::TensorError;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// C-order strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Broadcast two shapes under trailing-dimension alignment.
/// Ranks are aligned on the right; extents must match or be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut p = vec![1usize; rank];
    p[rank - shape.len()..].copy_from_slice(shape);
    p
}

/// Expand `data` of `shape` to `out_shape` (broadcast copy).
pub fn broadcast_expand(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let rank = out_shape.len();
    let padded = pad_shape(shape, rank);
    let src_strides = strides_for(&padded);
    let n = numel(out_shape);
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0usize;
        for d in 0..rank {
            if padded[d] != 1 {
                src += coords[d] * src_strides[d];
            }
        }
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum a full-shape adjoint back down to a broadcast operand's shape.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let padded = pad_shape(target_shape, rank);
    let tgt_strides = strides_for(&padded);
    let mut out = vec![0.0; numel(target_shape)];
    let mut coords = vec![0usize; rank];
    for &g in grad.iter() {
        let mut dst = 0usize;
        for d in 0..rank {
            if padded[d] != 1 {
                dst += coords[d] * tgt_strides[d];
            }
        }
        out[dst] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

// ── matmul ──────────────────────────────────────────────────────────

/// out[m,n] += alpha * a[m,k] · b[k,n]
pub fn matmul_nn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, alpha: f64, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let s = alpha * aip;
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += s * bv;
            }
        }
    }
}

/// out[m,k] += alpha * g[m,n] · b[k,n]^T
pub fn matmul_nt_into(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, alpha: f64, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow.iter()) {
                acc += gv * bv;
            }
            orow[p] += alpha * acc;
        }
    }
}

/// out[k,n] += alpha * a[m,k]^T · g[m,n]
pub fn matmul_tn_into(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, alpha: f64, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let s = alpha * aip;
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += s * gv;
            }
        }
    }
}

/// Batched matmul metadata: leading dims broadcast, trailing two contract.
pub struct BatchedMatmul {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (a_offset, b_offset) per output batch element, in units of one matrix.
    pub pairs: Vec<(usize, usize)>,
}

pub fn batched_matmul_plan(ashape: &[usize], bshape: &[usize]) -> Result<BatchedMatmul, TensorError> {
    if ashape.len() < 2 || bshape.len() < 2 {
        return Err(TensorError::InnerDimMismatch {
            lhs: ashape.to_vec(),
            rhs: bshape.to_vec(),
        });
    }
    let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    let (k2, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
    if k != k2 {
        return Err(TensorError::InnerDimMismatch {
            lhs: ashape.to_vec(),
            rhs: bshape.to_vec(),
        });
    }
    let abatch = &ashape[..ashape.len() - 2];
    let bbatch = &bshape[..bshape.len() - 2];
    let batch = broadcast_shape(abatch, bbatch).ok_or(TensorError::ShapeMismatch {
        op: "matmul",
        lhs: ashape.to_vec(),
        rhs: bshape.to_vec(),
    })?;
    let rank = batch.len();
    let apad = pad_shape(abatch, rank);
    let bpad = pad_shape(bbatch, rank);
    let astr = strides_for(&apad);
    let bstr = strides_for(&bpad);
    let count = numel(&batch);
    let mut pairs = Vec::with_capacity(count);
    let mut coords = vec![0usize; rank];
    for _ in 0..count {
        let mut ao = 0;
        let mut bo = 0;
        for d in 0..rank {
            if apad[d] != 1 {
                ao += coords[d] * astr[d];
            }
            if bpad[d] != 1 {
                bo += coords[d] * bstr[d];
            }
        }
        pairs.push((ao, bo));
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < batch[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(BatchedMatmul { out_shape, m, k, n, pairs })
}

// ── softmax over an axis ────────────────────────────────────────────

/// Visit (outer, inner) lanes of `shape` along `axis`, calling `f(lane_start, stride)`.
/// Element `t` of the lane lives at `lane_start + t * stride`.
pub fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * axis_len * inner + i, inner);
        }
    }
}

// ── conv3d ──────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct Conv3dGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    pub fn resolve(
        xshape: &[usize],
        wshape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self, TensorError> {
        if xshape.len() != 4 || wshape.len() != 5 {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: format!("expected x rank 4 and w rank 5, got {xshape:?} / {wshape:?}"),
            });
        }
        if xshape[0] != wshape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: xshape.to_vec(),
                rhs: wshape.to_vec(),
            });
        }
        let kernel = [wshape[2], wshape[3], wshape[4]];
        let input = [xshape[1], xshape[2], xshape[3]];
        let mut output = [0usize; 3];
        for a in 0..3 {
            if kernel[a] % 2 == 0 {
                return Err(TensorError::Invalid {
                    op: "conv3d",
                    msg: format!("kernel extents must be odd, got {kernel:?}"),
                });
            }
            if stride[a] == 0 {
                return Err(TensorError::Invalid {
                    op: "conv3d",
                    msg: "stride must be >= 1".into(),
                });
            }
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(TensorError::KernelTooLarge {
                    kernel: kernel.to_vec(),
                    padded: vec![
                        input[0] + 2 * pad[0],
                        input[1] + 2 * pad[1],
                        input[2] + 2 * pad[2],
                    ],
                });
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Conv3dGeom {
            cin: xshape[0],
            cout: wshape[0],
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.cout, self.output[0], self.output[1], self.output[2]]
    }
}

pub fn conv3d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &Conv3dGeom) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let mut out = vec![0.0; g.cout * od * oh * ow];
    let in_plane = ih * iw;
    let in_vol = id * in_plane;
    let k_vol = kd * kh * kw;
    for co in 0..g.cout {
        let wbase = co * g.cin * k_vol;
        let obase = co * od * oh * ow;
        let bias = b.map_or(0.0, |bb| bb[co]);
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ci in 0..g.cin {
                        let xbase = ci * in_vol;
                        let wcbase = wbase + ci * k_vol;
                        for kz in 0..kd {
                            let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                            if iz < 0 || iz >= id as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let xrow = xbase + iz as usize * in_plane + iy as usize * iw;
                                let wrow = wcbase + kz * kh * kw + ky * kw;
                                for kx in 0..kw {
                                    let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    acc += x[xrow + ix as usize] * w[wrow + kx];
                                }
                            }
                        }
                    }
                    out[obase + oz * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Accumulates dx, dw, db from the output adjoint in one pass.
pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: &Conv3dGeom,
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let in_plane = ih * iw;
    let in_vol = id * in_plane;
    let k_vol = kd * kh * kw;
    let mut dbl = vec![0.0; g.cout];
    for co in 0..g.cout {
        let wbase = co * g.cin * k_vol;
        let obase = co * od * oh * ow;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = grad_out[obase + oz * oh * ow + oy * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    dbl[co] += gv;
                    for ci in 0..g.cin {
                        let xbase = ci * in_vol;
                        let wcbase = wbase + ci * k_vol;
                        for kz in 0..kd {
                            let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                            if iz < 0 || iz >= id as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let xrow = xbase + iz as usize * in_plane + iy as usize * iw;
                                let wrow = wcbase + kz * kh * kw + ky * kw;
                                for kx in 0..kw {
                                    let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    dx[xrow + ix as usize] += gv * w[wrow + kx];
                                    dw[wrow + kx] += gv * x[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for (d, s) in db.iter_mut().zip(dbl.iter()) {
            *d += s;
        }
    }
}

// ── trilinear sampling ──────────────────────────────────────────────

/// One sample point resolved to corner indices and fractions.
/// Coordinates are normalized to [0,1] per axis and mapped so that 0 is the
/// first voxel center and 1 the last (align-corners); out-of-range values
/// clamp to the border.
pub struct TriPoint {
    pub i0: [usize; 3],
    pub i1: [usize; 3],
    pub frac: [f64; 3],
    /// d(continuous coordinate)/d(normalized input); zero where clamped.
    pub dcoord: [f64; 3],
}

pub fn resolve_tripoint(coord: &[f64], dims: [usize; 3]) -> TriPoint {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    let mut dcoord = [0.0f64; 3];
    for a in 0..3 {
        let extent = dims[a].max(1) as f64 - 1.0;
        let c = coord[a];
        let clamped = c.clamp(0.0, 1.0);
        let x = clamped * extent;
        let f0 = x.floor();
        let lo = f0 as usize;
        let hi = (lo + 1).min(dims[a].saturating_sub(1)).max(lo);
        i0[a] = lo.min(dims[a].saturating_sub(1));
        i1[a] = hi;
        frac[a] = x - f0;
        dcoord[a] = if (0.0..=1.0).contains(&c) { extent } else { 0.0 };
    }
    TriPoint { i0, i1, frac, dcoord }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing_alignment() {
        assert_eq!(broadcast_shape(&[3, 4], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn reduce_sums_broadcast_dims() {
        // grad over [2,3] reduced to [3]
        let g = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
    }

    #[test]
    fn conv_geometry_formula() {
        // stride 2 on extent 8, k=3, pad=1 -> extent 4
        let g = Conv3dGeom::resolve(&[1, 8, 8, 8], &[1, 1, 3, 3, 3], [2, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
    }
}
