//! 2-D convolution, lowered to GEMM through im2col.

use crate::elem::Elem;
use crate::tensor::{dims4, finite_guard, Tape, Tensor};
use crate::Result;

/// Output side length for one spatial axis.
pub(crate) fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one sample's `[C,H,W]` plane into a `[C·K·K, Ho·Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Elem>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c * k * k * ho * wo);
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        col[dst..dst + wo].fill(T::zero());
                        continue;
                    }
                    let src_row = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        col[dst + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            plane[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto the input plane (adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Elem>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[src_row + ix as usize] += col[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Convolve `x: [N,Cin,H,W]` with `w: [Cout,Cin,K,K]`.
///
/// Backward recomputes the im2col buffer per sample instead of keeping the
/// forward buffers alive, trading a little compute for far less memory.
pub fn conv2d<T: Elem>(
    tape: &Tape,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, wi) = dims4(x, "conv2d input")?;
    let (cout, cin_w, k, k2) = dims4(w, "conv2d weight")?;
    if k != k2 {
        return Err(crate::shape_err!("conv2d: non-square kernel {k}x{k2}"));
    }
    if cin != cin_w {
        return Err(crate::shape_err!(
            "conv2d: input channels {cin} != weight channels {cin_w}"
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(crate::shape_err!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                b.shape()
            ));
        }
    }
    let (Some(ho), Some(wo)) = (
        conv_out_len(h, k, stride, pad),
        conv_out_len(wi, k, stride, pad),
    ) else {
        return Err(crate::shape_err!(
            "conv2d: kernel {k} stride {stride} pad {pad} does not fit input {h}x{wi}"
        ));
    };

    let ckk = cin * k * k;
    let cols = ho * wo;
    let mut out = vec![T::zero(); n * cout * cols];
    {
        let xd = x.data();
        let wd = w.data();
        let mut col = vec![T::zero(); ckk * cols];
        for ni in 0..n {
            im2col(
                &xd[ni * cin * h * wi..(ni + 1) * cin * h * wi],
                cin, h, wi, k, stride, pad, ho, wo,
                &mut col,
            );
            // y_n = w (cout×ckk) · col (ckk×cols)
            crate::elem::matmul(
                cout, ckk, cols,
                &wd,
                &col,
                T::zero(),
                &mut out[ni * cout * cols..(ni + 1) * cout * cols],
            );
        }
    }
    if let Some(b) = bias {
        let bd = b.data();
        for sample in out.chunks_exact_mut(cout * cols) {
            for (co, chan) in sample.chunks_exact_mut(cols).enumerate() {
                let bv = bd[co];
                for v in chan {
                    *v += bv;
                }
            }
        }
    }

    let track = tape.is_recording()
        && (x.requires_grad() || w.requires_grad() || bias.map_or(false, |b| b.requires_grad()));
    let y = Tensor::from_op(vec![n, cout, ho, wo], out, track);
    finite_guard("conv2d", &y)?;
    if track {
        let x = x.clone();
        let w = w.clone();
        let bias = bias.cloned();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let xd = x.data();
            let wd = w.data();
            let mut col = vec![T::zero(); ckk * cols];
            let mut dw = if w.requires_grad() {
                Some(vec![T::zero(); wd.len()])
            } else {
                None
            };
            let mut dx = if x.requires_grad() {
                Some(vec![T::zero(); xd.len()])
            } else {
                None
            };
            let mut dcol = vec![T::zero(); ckk * cols];
            for ni in 0..n {
                let dy_n = &dy[ni * cout * cols..(ni + 1) * cout * cols];
                if let Some(dw) = dw.as_deref_mut() {
                    im2col(
                        &xd[ni * cin * h * wi..(ni + 1) * cin * h * wi],
                        cin, h, wi, k, stride, pad, ho, wo,
                        &mut col,
                    );
                    // dw += dy_n (cout×cols) · colᵀ (cols×ckk)
                    T::gemm_strided(
                        cout, cols, ckk,
                        T::one(),
                        dy_n, cols as isize, 1,
                        &col, 1, cols as isize,
                        T::one(),
                        dw, ckk as isize, 1,
                    );
                }
                if let Some(dx) = dx.as_deref_mut() {
                    // dcol = wᵀ (ckk×cout) · dy_n (cout×cols)
                    T::gemm_strided(
                        ckk, cout, cols,
                        T::one(),
                        &wd, 1, ckk as isize,
                        dy_n, cols as isize, 1,
                        T::zero(),
                        &mut dcol, cols as isize, 1,
                    );
                    col2im(
                        &dcol,
                        cin, h, wi, k, stride, pad, ho, wo,
                        &mut dx[ni * cin * h * wi..(ni + 1) * cin * h * wi],
                    );
                }
            }
            drop(xd);
            drop(wd);
            if let Some(dw) = dw {
                w.accumulate_grad(&dw);
            }
            if let Some(dx) = dx {
                x.accumulate_grad(&dx);
            }
            if let Some(b) = &bias {
                if b.requires_grad() {
                    let mut db = vec![T::zero(); cout];
                    for sample in dy.chunks_exact(cout * cols) {
                        for (co, chan) in sample.chunks_exact(cols).enumerate() {
                            let s: T = chan.iter().copied().sum();
                            db[co] += s;
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }
        }));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference for the GEMM path.
    #[allow(clippy::too_many_arguments)]
    fn conv_reference(
        x: &[f64],
        w: &[f64],
        n: usize,
        cin: usize,
        h: usize,
        wi: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = conv_out_len(h, k, stride, pad).unwrap();
        let wo = conv_out_len(wi, k, stride, pad).unwrap();
        let mut y = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= wi as isize {
                                        continue;
                                    }
                                    let xv = x[((ni * cin + ci) * h + iy as usize) * wi
                                        + ix as usize];
                                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_direct_convolution() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(n, cin, h, wi, cout, k, stride, pad) in &[
            (2usize, 3usize, 5usize, 5usize, 4usize, 3usize, 1usize, 1usize),
            (1, 2, 7, 6, 3, 3, 2, 1),
            (2, 4, 4, 4, 2, 1, 1, 0),
            (1, 1, 8, 8, 1, 3, 2, 0),
        ] {
            let xv: Vec<f64> = (0..n * cin * h * wi).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect = conv_reference(&xv, &wv, n, cin, h, wi, cout, k, stride, pad);

            let tape = Tape::inactive();
            let x = Tensor::new(&[n, cin, h, wi], xv).unwrap();
            let w = Tensor::new(&[cout, cin, k, k], wv).unwrap();
            let y = conv2d(&tape, &x, &w, None, stride, pad).unwrap();
            for (a, b) in y.to_vec().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "gemm {a} vs direct {b}");
            }
        }
    }

    #[test]
    fn identity_kernel_passthrough() {
        let tape = Tape::inactive();
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let tape = Tape::inactive();
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        assert!(conv2d(&tape, &x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn kernel_too_large_rejected() {
        let tape = Tape::inactive();
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&tape, &x, &w, None, 1, 0).is_err());
    }
}
