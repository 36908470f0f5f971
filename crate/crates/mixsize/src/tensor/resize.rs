//! Bilinear resampling with the pixel-center convention.
//!
//! Output pixel `i` samples source coordinate `(i+0.5)·(in/out)−0.5`, clamped
//! to `[0, in−1]`. When the sizes match this maps `i` to exactly `i`, so a
//! same-size resize reproduces its input bit for bit.

use crate::elem::Elem;
use crate::tensor::{dims4, Tape, Tensor};
use crate::Result;

/// For each output index: the two source indices and the blend fraction.
fn axis_map(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resample one `h_in × w_in` plane into `dst` (`h_out × w_out`).
pub fn resize_plane<T: Elem>(
    src: &[T],
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    dst: &mut [T],
) {
    assert_eq!(src.len(), h_in * w_in);
    assert_eq!(dst.len(), h_out * w_out);
    let ys = axis_map(h_in, h_out);
    let xs = axis_map(w_in, w_out);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
        let r0 = y0 * w_in;
        let r1 = y1 * w_in;
        let out_row = oy * w_out;
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
            let top = src[r0 + x0] * wx0 + src[r0 + x1] * wx1;
            let bot = src[r1 + x0] * wx0 + src[r1 + x1] * wx1;
            dst[out_row + ox] = top * wy0 + bot * wy1;
        }
    }
}

/// Adjoint of [`resize_plane`]: scatter-add `dy` (`h_out × w_out`) into `dx`.
pub fn resize_plane_backward<T: Elem>(
    dy: &[T],
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut [T],
) {
    assert_eq!(dy.len(), h_out * w_out);
    assert_eq!(dx.len(), h_in * w_in);
    let ys = axis_map(h_in, h_out);
    let xs = axis_map(w_in, w_out);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
        let r0 = y0 * w_in;
        let r1 = y1 * w_in;
        let out_row = oy * w_out;
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let g = dy[out_row + ox];
            let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
            dx[r0 + x0] += g * wy0 * wx0;
            dx[r0 + x1] += g * wy0 * wx1;
            dx[r1 + x0] += g * wy1 * wx0;
            dx[r1 + x1] += g * wy1 * wx1;
        }
    }
}

/// Resize `[N,C,H,W]` to `[N,C,out_h,out_w]`.
pub fn bilinear_resize_hw<T: Elem>(
    tape: &Tape,
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(crate::domain_err!("bilinear_resize: zero output size"));
    }
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    {
        let xd = x.data();
        for (src, dst) in xd.chunks_exact(h * w).zip(out.chunks_exact_mut(out_h * out_w)) {
            resize_plane(src, h, w, out_h, out_w, dst);
        }
    }
    let track = tape.is_recording() && x.requires_grad();
    let y = Tensor::from_op(vec![n, c, out_h, out_w], out, track);
    if track {
        let x = x.clone();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let mut dx = vec![T::zero(); x.numel()];
            for (g, d) in dy.chunks_exact(out_h * out_w).zip(dx.chunks_exact_mut(h * w)) {
                resize_plane_backward(g, h, w, out_h, out_w, d);
            }
            x.accumulate_grad(&dx);
        }));
    }
    Ok(y)
}

/// Resize `[N,C,H,W]` to the square `[N,C,s,s]`.
pub fn bilinear_resize<T: Elem>(tape: &Tape, x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    bilinear_resize_hw(tape, x, s, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn same_size_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let src: Vec<f32> = (0..6 * 9).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
        let mut dst = vec![0.0f32; src.len()];
        resize_plane(&src, 6, 9, 6, 9, &mut dst);
        assert_eq!(src, dst);
    }

    #[test]
    fn known_axis_values() {
        // upscale [0,1] to 4: clamped ends, quarter blends inside
        let mut up = vec![0.0f64; 4];
        resize_plane(&[0.0, 1.0], 1, 2, 1, 4, &mut up);
        for (got, want) in up.iter().zip(&[0.0, 0.25, 0.75, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        // downscale [0,1,2,3] to 2: pair midpoints
        let mut down = vec![0.0f64; 2];
        resize_plane(&[0.0, 1.0, 2.0, 3.0], 1, 4, 1, 2, &mut down);
        for (got, want) in down.iter().zip(&[0.5, 2.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_plane_stays_constant() {
        let src = vec![0.37f64; 5 * 7];
        for &(oh, ow) in &[(1usize, 1usize), (3, 3), (9, 4), (16, 16)] {
            let mut dst = vec![0.0f64; oh * ow];
            resize_plane(&src, 5, 7, oh, ow, &mut dst);
            for v in &dst {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // ⟨R x, y⟩ must equal ⟨x, Rᵀ y⟩ for random x, y
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for &(hi, wi, ho, wo) in &[(4usize, 4usize, 7usize, 7usize), (8, 6, 3, 5), (1, 3, 2, 9)] {
            let x: Vec<f64> = (0..hi * wi).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..ho * wo).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut rx = vec![0.0; ho * wo];
            resize_plane(&x, hi, wi, ho, wo, &mut rx);
            let mut rty = vec![0.0; hi * wi];
            resize_plane_backward(&y, hi, wi, ho, wo, &mut rty);
            let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&rty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch {lhs} vs {rhs}");
        }
    }

    #[test]
    fn tensor_resize_same_size_identity() {
        let tape = Tape::inactive();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let data: Vec<f32> = (0..2 * 3 * 8 * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x = Tensor::new(&[2, 3, 8, 8], data.clone()).unwrap();
        let y = bilinear_resize(&tape, &x, 8).unwrap();
        assert_eq!(y.to_vec(), data);
    }
}
