//! Same-padding stride-1 convolution kernels, lowered to im2col plus a
//! matrix product so the inner loop runs through the gemm in `ndarray::dot`.

use crate::tensor::{FeatureMap, Real};
use ndarray::{s, Array2, Array4, ArrayView3};

/// Lowers one (c, h, w) item to a (c*kh*kw, h*w) patch matrix. Out-of-range
/// taps stay zero, matching zero-filled same padding.
fn im2col<T: Real>(x: &ArrayView3<T>, kh: usize, kw: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut col = Array2::zeros((c * kh * kw, h * w));
    for ch in 0..c {
        for dy in 0..kh {
            // Output rows whose tap (dy, dx) lands inside the image.
            let y0 = ph.saturating_sub(dy);
            let y1 = (h + ph).saturating_sub(dy).min(h);
            for dx in 0..kw {
                let row = (ch * kh + dy) * kw + dx;
                let x0 = pw.saturating_sub(dx);
                let x1 = (w + pw).saturating_sub(dx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let iy = y + dy - ph;
                    let src = x.slice(s![ch, iy, x0 + dx - pw..x1 + dx - pw]);
                    col.slice_mut(s![row, y * w + x0..y * w + x1]).assign(&src);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch-matrix columns back to (c, h, w).
fn col2im<T: Real>(col: &Array2<T>, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> ndarray::Array3<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut x = ndarray::Array3::zeros((c, h, w));
    for ch in 0..c {
        for dy in 0..kh {
            let y0 = ph.saturating_sub(dy);
            let y1 = (h + ph).saturating_sub(dy).min(h);
            for dx in 0..kw {
                let row = (ch * kh + dy) * kw + dx;
                let x0 = pw.saturating_sub(dx);
                let x1 = (w + pw).saturating_sub(dx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let iy = y + dy - ph;
                    let src = col.slice(s![row, y * w + x0..y * w + x1]);
                    let mut dst = x.slice_mut(s![ch, iy, x0 + dx - pw..x1 + dx - pw]);
                    dst += &src;
                }
            }
        }
    }
    x
}

/// Forward convolution; shapes are validated by the graph wrapper.
pub fn conv2d_forward<T: Real>(
    x: &FeatureMap<T>,
    w: &FeatureMap<T>,
    b: &FeatureMap<T>,
) -> FeatureMap<T> {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let w_mat = w.view().into_shape_with_order((cout, cin * kh * kw)).expect("weights contiguous");
    let mut out = Array4::zeros((n, cout, h, wd));
    for bn in 0..n {
        let col = im2col(&x.slice(s![bn, .., .., ..]), kh, kw);
        let o = w_mat.dot(&col);
        let mut dst = out.slice_mut(s![bn, .., .., ..]);
        dst.assign(&o.into_shape_with_order((cout, h, wd)).expect("gemm output contiguous"));
    }
    for ch in 0..cout {
        let bias = b[[0, ch, 0, 0]];
        out.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| v + bias);
    }
    out
}

/// Backward convolution. Returns (dx, dw, db); dx is skipped when the input
/// does not require a gradient (first layer).
pub fn conv2d_backward<T: Real>(
    gout: &FeatureMap<T>,
    x: &FeatureMap<T>,
    w: &FeatureMap<T>,
    need_dx: bool,
) -> (Option<FeatureMap<T>>, FeatureMap<T>, FeatureMap<T>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let k = cin * kh * kw;
    let w_mat = w.view().into_shape_with_order((cout, k)).expect("weights contiguous");
    let mut dw = Array2::<T>::zeros((cout, k));
    let mut dx = need_dx.then(|| Array4::zeros((n, cin, h, wd)));
    let mut db = Array4::zeros((1, cout, 1, 1));
    for bn in 0..n {
        let g_mat = gout
            .slice(s![bn, .., .., ..])
            .into_shape_with_order((cout, h * wd))
            .expect("grad contiguous");
        // dW accumulates g * col(x)^T; the patch matrix is recomputed rather
        // than cached so graph memory stays proportional to activations.
        let col = im2col(&x.slice(s![bn, .., .., ..]), kh, kw);
        dw = dw + g_mat.dot(&col.t());
        if let Some(dx) = dx.as_mut() {
            let dcol = w_mat.t().dot(&g_mat);
            let dxi = col2im(&dcol, cin, h, wd, kh, kw);
            let mut dst = dx.slice_mut(s![bn, .., .., ..]);
            dst += &dxi;
        }
    }
    for ch in 0..cout {
        db[[0, ch, 0, 0]] = gout.slice(s![.., ch, .., ..]).iter().fold(T::zero(), |a, &v| a + v);
    }
    let dw4 = dw.into_shape_with_order((cout, cin, kh, kw)).expect("dw contiguous");
    (dx, dw4, db)
}
