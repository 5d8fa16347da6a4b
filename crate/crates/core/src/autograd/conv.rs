use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, Axis, Ix4, IxDyn};

use super::{Graph, Real, Var};

/// im2col buffer for one sample `[C, T, F]`: rows `C*k*k`, columns `T*F`.
fn im2col<T: Real>(x: &[T], (c, t, f): (usize, usize, usize), k: usize, out: &mut [T]) {
    let p = k / 2;
    let tf = t * f;
    out.fill(T::zero());
    for ci in 0..c {
        let plane = &x[ci * tf..(ci + 1) * tf];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * tf..(row + 1) * tf];
                let lo = p.saturating_sub(kj);
                let hi = (f + p).saturating_sub(kj).min(f);
                for ti in 0..t {
                    let st = ti + ki;
                    if st < p || st - p >= t {
                        continue;
                    }
                    let src = &plane[(st - p) * f..(st - p + 1) * f];
                    dst[ti * f + lo..ti * f + hi].copy_from_slice(&src[lo + kj - p..hi + kj - p]);
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], (c, t, f): (usize, usize, usize), k: usize, dx: &mut [T]) {
    let p = k / 2;
    let tf = t * f;
    for ci in 0..c {
        let plane = &mut dx[ci * tf..(ci + 1) * tf];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * tf..(row + 1) * tf];
                let lo = p.saturating_sub(kj);
                let hi = (f + p).saturating_sub(kj).min(f);
                for ti in 0..t {
                    let st = ti + ki;
                    if st < p || st - p >= t {
                        continue;
                    }
                    let dst = &mut plane[(st - p) * f..(st - p + 1) * f];
                    for (d, &v) in dst[lo + kj - p..hi + kj - p].iter_mut().zip(&src[ti * f + lo..ti * f + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Stride-1 "same" 2-D convolution of `[B, C, T, F]` with a `[O, C, k, k]`
    /// kernel (odd `k`) plus per-channel bias.
    pub fn conv2d(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv2d: input rank");
        let (bn, c, t, f) = x4.dim();
        let ws = vw.shape();
        let (o, wc, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(wc, c, "conv2d: kernel expects {wc} channels, input has {c}");
        assert_eq!(ws[3], k, "conv2d: square kernels only");
        assert_eq!(k % 2, 1, "conv2d: odd kernel size required");
        let kk = c * k * k;
        let tf = t * f;
        let w2 = vw
            .view()
            .into_shape_with_order((o, kk))
            .unwrap()
            .to_owned();
        let bias = vb.view().into_shape_with_order(o).unwrap().to_owned();

        let xs = x4.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let ctf = c * tf;
        let mut cols = Vec::with_capacity(bn);
        let mut out = Array4::<T>::zeros((bn, o, t, f));
        for bi in 0..bn {
            let mut col = Array2::<T>::zeros((kk, tf));
            im2col(&xs[bi * ctf..(bi + 1) * ctf], (c, t, f), k, col.as_slice_mut().unwrap());
            let mut ob = out
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((o, tf))
                .unwrap();
            general_mat_mul(T::one(), &w2, &col, T::zero(), &mut ob);
            for (oi, mut row) in ob.outer_iter_mut().enumerate() {
                row += bias[oi];
            }
            cols.push(col);
        }
        let cols = Rc::new(cols);
        self.push_op(out.into_dyn(), &[x, w, b], move |g, needs| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dw = needs[1].then(|| Array2::<T>::zeros((o, kk)));
            let mut db = needs[2].then(|| ndarray::Array1::<T>::zeros(o));
            let mut dx = needs[0].then(|| Array4::<T>::zeros((bn, c, t, f)));
            let mut dcol = Array2::<T>::zeros((kk, tf));
            for bi in 0..bn {
                let gb = g4
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((o, tf))
                    .unwrap();
                if let Some(dw) = dw.as_mut() {
                    general_mat_mul(T::one(), &gb, &cols[bi].t(), T::one(), dw);
                }
                if let Some(db) = db.as_mut() {
                    *db += &gb.sum_axis(Axis(1));
                }
                if let Some(dx) = dx.as_mut() {
                    general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut dcol);
                    let dxs = dx.as_slice_mut().unwrap();
                    col2im(dcol.as_slice().unwrap(), (c, t, f), k, &mut dxs[bi * ctf..(bi + 1) * ctf]);
                }
            }
            vec![
                dx.map(|d| d.into_dyn()),
                dw.map(|d| d.into_shape_with_order(vec![o, c, k, k]).unwrap()),
                db.map(|d| d.into_dyn()),
            ]
        })
    }

    /// Non-overlapping average pooling of `[B, C, T, F]` with window
    /// `(kt, kf)`. Trailing rows/columns that do not fill a window are dropped.
    pub fn avg_pool2d(&self, x: Var, kt: usize, kf: usize) -> Var {
        if kt == 1 && kf == 1 {
            return x;
        }
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("avg_pool2d: rank");
        let (bn, c, t, f) = x4.dim();
        let (to, fo) = (t / kt, f / kf);
        assert!(to > 0 && fo > 0, "avg_pool2d: window larger than input");
        let inv = T::cst(1.0 / (kt * kf) as f64);
        let xs = x4.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut out = vec![T::zero(); bn * c * to * fo];
        for (src, dst) in xs.chunks_exact(t * f).zip(out.chunks_exact_mut(to * fo)) {
            for ti in 0..to * kt {
                let row = &src[ti * f..ti * f + fo * kf];
                let drow = &mut dst[(ti / kt) * fo..(ti / kt + 1) * fo];
                for (d, w) in drow.iter_mut().zip(row.chunks_exact(kf)) {
                    *d += w.iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[bn, c, to, fo]), out).unwrap();
        self.push_op(out, &[x], move |g, _| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![T::zero(); bn * c * t * f];
            for (src, dst) in gs.chunks_exact(to * fo).zip(dx.chunks_exact_mut(t * f)) {
                for ti in 0..to * kt {
                    let srow = &src[(ti / kt) * fo..(ti / kt + 1) * fo];
                    let drow = &mut dst[ti * f..ti * f + fo * kf];
                    for (w, &v) in drow.chunks_exact_mut(kf).zip(srow) {
                        w.iter_mut().for_each(|d| *d = v * inv);
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[bn, c, t, f]), dx).unwrap())]
        })
    }

    /// Gated linear unit over the channel axis of `[B, 2C, ...]`:
    /// first half times sigmoid of second half.
    pub fn glu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let c2 = shape[1];
        assert_eq!(c2 % 2, 0, "glu: odd channel count {c2}");
        let inner: usize = shape[2..].iter().product();
        let half = c2 / 2 * inner;
        let xs = vx.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut gate = Vec::with_capacity(xs.len() / 2);
        let mut a = Vec::with_capacity(xs.len() / 2);
        for sample in xs.chunks_exact(2 * half) {
            a.extend_from_slice(&sample[..half]);
            gate.extend(sample[half..].iter().map(|&v| T::one() / (T::one() + (-v).exp())));
        }
        let out: Vec<T> = a.iter().zip(&gate).map(|(&a, &s)| a * s).collect();
        let mut out_shape = shape.clone();
        out_shape[1] = c2 / 2;
        let out = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        self.push_op(out, &[x], move |g, _| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut dx = Vec::with_capacity(2 * gs.len());
            for ((gc, ac), sc) in gs.chunks_exact(half).zip(a.chunks_exact(half)).zip(gate.chunks_exact(half)) {
                dx.extend(gc.iter().zip(sc).map(|(&g, &s)| g * s));
                dx.extend(
                    gc.iter()
                        .zip(ac)
                        .zip(sc)
                        .map(|((&g, &a), &s)| g * a * s * (T::one() - s)),
                );
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap())]
        })
    }
}

/// Reference convolution used by tests.
#[cfg(test)]
pub(crate) fn conv2d_naive(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let w = w.view().into_dimensionality::<Ix4>().unwrap();
    let (bn, c, t, f) = x.dim();
    let (o, _, k, _) = w.dim();
    let p = (k / 2) as isize;
    let mut out = Array4::<f64>::zeros((bn, o, t, f));
    for bi in 0..bn {
        for oi in 0..o {
            for ti in 0..t {
                for fi in 0..f {
                    let mut acc = b[[oi]];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let st = ti as isize + ki as isize - p;
                                let sf = fi as isize + kj as isize - p;
                                if st >= 0 && st < t as isize && sf >= 0 && sf < f as isize {
                                    acc += w[[oi, ci, ki, kj]] * x[[bi, ci, st as usize, sf as usize]];
                                }
                            }
                        }
                    }
                    out[[bi, oi, ti, fi]] = acc;
                }
            }
        }
    }
    out.into_dyn()
}
