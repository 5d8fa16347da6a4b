use ndarray::{Array2, Array3, Axis, Ix2, Ix3};

use super::{Graph, Real, Var};

#[inline]
fn sig<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    /// Single-direction GRU over `[B, T, D]` with zero initial state.
    ///
    /// Weights follow the `[reset | update | new]` gate layout: `w_ih` is
    /// `[3H, D]`, `w_hh` is `[3H, H]`, biases are `[3H]`. When `reverse` is set
    /// the sequence is consumed from the last frame to the first and outputs
    /// are written back at their original positions.
    pub fn gru(&self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool) -> Var {
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("gru: input rank");
        let (bn, tn, d) = x3.dim();
        let wih = self.value(w_ih).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let whh = self.value(w_hh).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let h3 = wih.shape()[0];
        assert_eq!(h3 % 3, 0, "gru: w_ih rows must be 3H");
        let h = h3 / 3;
        assert_eq!(wih.shape()[1], d, "gru: w_ih width vs input");
        assert_eq!(whh.shape(), &[h3, h], "gru: w_hh shape");
        let bih = self.value(b_ih).iter().copied().collect::<Vec<T>>();
        let bhh = self.value(b_hh).iter().copied().collect::<Vec<T>>();

        let x2 = x3
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((bn * tn, d))
            .unwrap();
        // input projections for every frame at once
        let mut xi = x2.dot(&wih.t());
        for mut row in xi.outer_iter_mut() {
            for (v, &b) in row.iter_mut().zip(&bih) {
                *v += b;
            }
        }
        let xi = xi.into_shape_with_order((bn, tn, h3)).unwrap();

        let mut out = Array3::<T>::zeros((bn, tn, h));
        // per-step caches, indexed by processing order
        let mut r_c = Array3::<T>::zeros((tn, bn, h));
        let mut z_c = Array3::<T>::zeros((tn, bn, h));
        let mut n_c = Array3::<T>::zeros((tn, bn, h));
        let mut hn_c = Array3::<T>::zeros((tn, bn, h));
        let mut hprev_c = Array3::<T>::zeros((tn, bn, h));
        let mut state = Array2::<T>::zeros((bn, h));
        let order: Vec<usize> = if reverse {
            (0..tn).rev().collect()
        } else {
            (0..tn).collect()
        };
        for (step, &ti) in order.iter().enumerate() {
            let mut hh = state.dot(&whh.t());
            for mut row in hh.outer_iter_mut() {
                for (v, &b) in row.iter_mut().zip(&bhh) {
                    *v += b;
                }
            }
            hprev_c.index_axis_mut(Axis(0), step).assign(&state);
            for bi in 0..bn {
                for j in 0..h {
                    let r = sig(xi[[bi, ti, j]] + hh[[bi, j]]);
                    let z = sig(xi[[bi, ti, h + j]] + hh[[bi, h + j]]);
                    let hn = hh[[bi, 2 * h + j]];
                    let n = (xi[[bi, ti, 2 * h + j]] + r * hn).tanh();
                    let hp = state[[bi, j]];
                    let hnew = (T::one() - z) * n + z * hp;
                    r_c[[step, bi, j]] = r;
                    z_c[[step, bi, j]] = z;
                    n_c[[step, bi, j]] = n;
                    hn_c[[step, bi, j]] = hn;
                    state[[bi, j]] = hnew;
                    out[[bi, ti, j]] = hnew;
                }
            }
        }

        self.push_op(out.into_dyn(), &[x, w_ih, w_hh, b_ih, b_hh], move |g, needs| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dxi = Array3::<T>::zeros((bn, tn, h3));
            let mut dwhh = Array2::<T>::zeros((h3, h));
            let mut dbhh = ndarray::Array1::<T>::zeros(h3);
            let mut dh_next = Array2::<T>::zeros((bn, h));
            let mut dhh = Array2::<T>::zeros((bn, h3));
            for (step, &ti) in order.iter().enumerate().rev() {
                for bi in 0..bn {
                    for j in 0..h {
                        let dh = g3[[bi, ti, j]] + dh_next[[bi, j]];
                        let r = r_c[[step, bi, j]];
                        let z = z_c[[step, bi, j]];
                        let n = n_c[[step, bi, j]];
                        let hn = hn_c[[step, bi, j]];
                        let hp = hprev_c[[step, bi, j]];
                        let dn = dh * (T::one() - z);
                        let dz = dh * (hp - n);
                        let dan = dn * (T::one() - n * n);
                        let dr = dan * hn;
                        let dar = dr * r * (T::one() - r);
                        let daz = dz * z * (T::one() - z);
                        dxi[[bi, ti, j]] = dar;
                        dxi[[bi, ti, h + j]] = daz;
                        dxi[[bi, ti, 2 * h + j]] = dan;
                        dhh[[bi, j]] = dar;
                        dhh[[bi, h + j]] = daz;
                        dhh[[bi, 2 * h + j]] = dan * r;
                        dh_next[[bi, j]] = dh * z;
                    }
                }
                let hp = hprev_c.index_axis(Axis(0), step);
                dwhh += &dhh.t().dot(&hp);
                dbhh += &dhh.sum_axis(Axis(0));
                dh_next += &dhh.dot(&whh);
            }
            let dxi2 = dxi.into_shape_with_order((bn * tn, h3)).unwrap();
            let dx = needs[0].then(|| {
                dxi2.dot(&wih)
                    .into_shape_with_order((bn, tn, d))
                    .unwrap()
                    .into_dyn()
            });
            let dwih = needs[1].then(|| dxi2.t().dot(&x2).into_dyn());
            let dbih = needs[3].then(|| dxi2.sum_axis(Axis(0)).into_dyn());
            vec![dx, dwih, Some(dwhh.into_dyn()), dbih, Some(dbhh.into_dyn())]
        })
    }

    /// Bidirectional GRU: forward and backward outputs concatenated on the
    /// feature axis (`[B, T, 2H]`).
    pub fn bigru(&self, x: Var, fwd: [Var; 4], bwd: [Var; 4]) -> Var {
        let f = self.gru(x, fwd[0], fwd[1], fwd[2], fwd[3], false);
        let b = self.gru(x, bwd[0], bwd[1], bwd[2], bwd[3], true);
        self.concat_last(f, b)
    }
}

/// Slice helper used by tests to read one frame.
#[cfg(test)]
fn frame<T: Real>(a: &ndarray::ArrayD<T>, b: usize, t: usize) -> ndarray::Array1<T> {
    a.view().into_dimensionality::<Ix3>().unwrap().slice(ndarray::s![b, t, ..]).to_owned()
}
