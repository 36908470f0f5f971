//! Elementwise, pooling, padding and fully-connected ops.

use crate::elem::{matmul, Elem};
use crate::tensor::{dims4, finite_guard, Tape, Tensor};
use crate::Result;

pub fn relu<T: Elem>(tape: &Tape, x: &Tensor<T>) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(x.shape().to_vec(), data, track);
    finite_guard("relu", &y)?;
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let xd = x.data();
            let dx: Vec<T> = xd
                .iter()
                .zip(&dy)
                .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
                .collect();
            drop(xd);
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

/// Elementwise sum of two tensors of identical shape.
pub fn add<T: Elem>(tape: &Tape, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(crate::shape_err!(
            "add: shapes differ {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let track = tape.is_recording() && (a.requires_grad() || b.requires_grad());
    let out = Tensor::from_op(a.shape().to_vec(), data, track);
    finite_guard("add", &out)?;
    if track {
        let a = a.clone();
        let b = b.clone();
        let out_h = out.clone();
        tape.push(Box::new(move || {
            let Some(dy) = out_h.grad() else { return };
            if a.requires_grad() {
                a.accumulate_grad(&dy);
            }
            if b.requires_grad() {
                b.accumulate_grad(&dy);
            }
        }));
    }
    Ok(out)
}

/// Multiply every element by a constant.
pub fn scale<T: Elem>(tape: &Tape, x: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| v * factor).collect();
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(x.shape().to_vec(), data, track);
    finite_guard("scale", &y)?;
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let dx: Vec<T> = dy.iter().map(|&g| g * factor).collect();
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum<T: Elem>(tape: &Tape, x: &Tensor<T>) -> Result<Tensor<T>> {
    let total: T = x.data().iter().copied().sum();
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(vec![1], vec![total], track);
    finite_guard("sum", &y)?;
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let dx = vec![dy[0]; x.numel()];
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

/// Fully connected layer: `y = x · wᵀ + b` with `x: [N,F]`, `w: [K,F]`.
pub fn linear<T: Elem>(
    tape: &Tape,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let &[n, f] = x.shape() else {
        return Err(crate::shape_err!("linear: x must be 2-D, got {:?}", x.shape()));
    };
    let &[k, fw] = w.shape() else {
        return Err(crate::shape_err!("linear: w must be 2-D, got {:?}", w.shape()));
    };
    if f != fw {
        return Err(crate::shape_err!("linear: x features {f} != w features {fw}"));
    }
    if let Some(bias) = b {
        if bias.shape() != [k] {
            return Err(crate::shape_err!(
                "linear: bias shape {:?}, expected [{k}]",
                bias.shape()
            ));
        }
    }

    let mut out = vec![T::zero(); n * k];
    {
        let xd = x.data();
        let wd = w.data();
        // y = x (n×f) · wᵀ (f×k)
        T::gemm_strided(
            n, f, k,
            T::one(),
            &xd, f as isize, 1,
            &wd, 1, f as isize,
            T::zero(),
            &mut out, k as isize, 1,
        );
    }
    if let Some(bias) = b {
        let bd = bias.data();
        for row in out.chunks_exact_mut(k) {
            for (o, &bi) in row.iter_mut().zip(bd.iter()) {
                *o += bi;
            }
        }
    }

    let track = tape.is_recording()
        && (x.requires_grad() || w.requires_grad() || b.map_or(false, |t| t.requires_grad()));
    let y = Tensor::from_op(vec![n, k], out, track);
    finite_guard("linear", &y)?;
    if track {
        let x = x.clone();
        let w = w.clone();
        let b = b.cloned();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            if x.requires_grad() {
                let wd = w.data();
                let mut dx = vec![T::zero(); n * f];
                // dx = dy (n×k) · w (k×f)
                matmul(n, k, f, &dy, &wd, T::zero(), &mut dx);
                drop(wd);
                x.accumulate_grad(&dx);
            }
            if w.requires_grad() {
                let xd = x.data();
                let mut dw = vec![T::zero(); k * f];
                // dw = dyᵀ (k×n) · x (n×f)
                T::gemm_strided(
                    k, n, f,
                    T::one(),
                    &dy, 1, k as isize,
                    &xd, f as isize, 1,
                    T::zero(),
                    &mut dw, f as isize, 1,
                );
                drop(xd);
                w.accumulate_grad(&dw);
            }
            if let Some(bias) = &b {
                if bias.requires_grad() {
                    let mut db = vec![T::zero(); k];
                    for row in dy.chunks_exact(k) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    bias.accumulate_grad(&db);
                }
            }
        }));
    }
    Ok(y)
}

/// Max pooling over non-overlapping-or-strided windows, no padding.
pub fn max_pool2d<T: Elem>(
    tape: &Tape,
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "max_pool2d")?;
    if kernel == 0 || stride == 0 {
        return Err(crate::domain_err!("max_pool2d: kernel and stride must be positive"));
    }
    if kernel > h || kernel > w {
        return Err(crate::shape_err!(
            "max_pool2d: kernel {kernel} larger than input {h}x{w}"
        ));
    }
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = vec![0usize; out.len()];
    {
        let xd = x.data();
        let mut oi = 0;
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx = plane + (oy * stride + ky) * w + ox * stride + kx;
                                let v = xd[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
    }
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(vec![n, c, ho, wo], out, track);
    finite_guard("max_pool2d", &y)?;
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let mut dx = vec![T::zero(); x.numel()];
            for (g, &src) in dy.iter().zip(&argmax) {
                dx[src] += *g;
            }
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

/// Spatial mean over H×W: `[N,C,H,W] -> [N,C,1,1]`, defined for any H,W ≥ 1.
pub fn global_avg_pool<T: Elem>(tape: &Tape, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "global_avg_pool")?;
    let area = h * w;
    let inv = T::one() / T::from_f64(area as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c];
    for (o, plane) in out.iter_mut().zip(xd.chunks_exact(area)) {
        let s: T = plane.iter().copied().sum();
        *o = s * inv;
    }
    drop(xd);
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(vec![n, c, 1, 1], out, track);
    finite_guard("global_avg_pool", &y)?;
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let mut dx = vec![T::zero(); x.numel()];
            for (plane, &g) in dx.chunks_exact_mut(area).zip(&dy) {
                let gi = g * inv;
                for d in plane {
                    *d = gi;
                }
            }
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

/// Collapse `[N,C,H,W]` to `[N, C·H·W]` (same data order).
pub fn flatten_spatial<T: Elem>(tape: &Tape, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "flatten_spatial")?;
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(vec![n, c * h * w], x.to_vec(), track);
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            x.accumulate_grad(&dy);
        }));
    }
    Ok(y)
}

/// Zero-pad the two spatial axes by `pad` on every side.
pub fn pad2d<T: Elem>(tape: &Tape, x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "pad2d")?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); n * c * hp * wp];
    {
        let xd = x.data();
        for plane in 0..n * c {
            let src = plane * h * w;
            let dst = plane * hp * wp;
            for row in 0..h {
                let s = src + row * w;
                let d = dst + (row + pad) * wp + pad;
                out[d..d + w].copy_from_slice(&xd[s..s + w]);
            }
        }
    }
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(vec![n, c, hp, wp], out, track);
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let mut dx = vec![T::zero(); x.numel()];
            for plane in 0..n * c {
                let src = plane * hp * wp;
                let dst = plane * h * w;
                for row in 0..h {
                    let s = src + (row + pad) * wp + pad;
                    let d = dst + row * w;
                    dx[d..d + w].copy_from_slice(&dy[s..s + w]);
                }
            }
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

/// Extract the window starting at `(y0, x0)` of size `ch × cw`.
pub fn crop2d<T: Elem>(
    tape: &Tape,
    x: &Tensor<T>,
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "crop2d")?;
    if y0 + ch > h || x0 + cw > w || ch == 0 || cw == 0 {
        return Err(crate::domain_err!(
            "crop2d: window {ch}x{cw}@({y0},{x0}) outside input {h}x{w}"
        ));
    }
    let mut out = vec![T::zero(); n * c * ch * cw];
    {
        let xd = x.data();
        for plane in 0..n * c {
            let src = plane * h * w;
            let dst = plane * ch * cw;
            for row in 0..ch {
                let s = src + (row + y0) * w + x0;
                let d = dst + row * cw;
                out[d..d + cw].copy_from_slice(&xd[s..s + cw]);
            }
        }
    }
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(vec![n, c, ch, cw], out, track);
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let mut dx = vec![T::zero(); x.numel()];
            for plane in 0..n * c {
                let src = plane * ch * cw;
                let dst = plane * h * w;
                for row in 0..ch {
                    let s = src + row * cw;
                    let d = dst + (row + y0) * w + x0;
                    dx[d..d + cw].copy_from_slice(&dy[s..s + cw]);
                }
            }
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

/// Mirror the W axis.
pub fn hflip<T: Elem>(tape: &Tape, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "hflip")?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for row_idx in 0..n * c * h {
        let base = row_idx * w;
        for col in 0..w {
            out[base + col] = xd[base + w - 1 - col];
        }
    }
    drop(xd);
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(vec![n, c, h, w], out, track);
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let mut dx = vec![T::zero(); dy.len()];
            for row_idx in 0..n * c * h {
                let base = row_idx * w;
                for col in 0..w {
                    dx[base + col] = dy[base + w - 1 - col];
                }
            }
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_abs_identity() {
        // relu(-x) + relu(x) == |x| elementwise
        let tape = Tape::inactive();
        let x = t(&[5], vec![-2.0, -0.5, 0.0, 1.5, 3.0]);
        let neg = scale(&tape, &x, -1.0).unwrap();
        let r1 = relu(&tape, &neg).unwrap();
        let r2 = relu(&tape, &x).unwrap();
        let s = add(&tape, &r1, &r2).unwrap();
        let expect: Vec<f64> = x.to_vec().iter().map(|v| v.abs()).collect();
        assert_eq!(s.to_vec(), expect);
    }

    #[test]
    fn gap_constant_is_identity() {
        for hw in [1usize, 2, 3, 5] {
            let tape = Tape::inactive();
            let x = Tensor::full(&[2, 3, hw, hw], 0.7f64);
            let y = global_avg_pool(&tape, &x).unwrap();
            assert_eq!(y.shape(), &[2, 3, 1, 1]);
            for v in y.to_vec() {
                assert!((v - 0.7).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pad_then_crop_roundtrip() {
        let tape = Tape::inactive();
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = pad2d(&tape, &x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 6, 6]);
        let back = crop2d(&tape, &p, 2, 2, 2, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        // corner of the padded tensor is zero
        assert_eq!(p.to_vec()[0], 0.0);
    }

    #[test]
    fn crop_out_of_bounds_rejected() {
        let tape = Tape::inactive();
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(crop2d(&tape, &x, 2, 2, 3, 3).is_err());
    }

    #[test]
    fn hflip_involution() {
        let tape = Tape::inactive();
        let x = t(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = hflip(&tape, &x).unwrap();
        assert_eq!(f.to_vec(), vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        let ff = hflip(&tape, &f).unwrap();
        assert_eq!(ff.to_vec(), x.to_vec());
    }

    #[test]
    fn max_pool_forward() {
        let tape = Tape::inactive();
        let x = t(
            &[1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 4.0, //
                3.0, 0.0, 1.0, 2.0, //
                7.0, 1.0, 0.0, 1.0, //
                2.0, 6.0, 3.0, 9.0,
            ],
        );
        let y = max_pool2d(&tape, &x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn linear_bias_forward() {
        let tape = Tape::inactive();
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], vec![0.5, -0.5]);
        let y = linear(&tape, &x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![1.5, 1.5]);
    }
}
