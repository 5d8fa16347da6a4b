use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayD, Axis, Ix2, Zip};

use super::{zeros_like, Graph, Real, Tensor, Var};

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push_op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push_op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.mapv(|v| -v))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push_op(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g * &*vb),
                needs[1].then(|| g * &*va),
            ]
        })
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = T::cst(c);
        let out = self.value(a).mapv(|x| x * c);
        self.push_op(out, &[a], move |g, _| vec![Some(g.mapv(|x| x * c))])
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.raw_dim();
        let out = ArrayD::from_elem(ndarray::IxDyn(&[]), va.sum());
        self.push_op(out, &[a], move |g, _| {
            let gv = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(shape.clone(), gv))]
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let term = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term),
            });
        }
        acc.unwrap()
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let y = Rc::new(out.clone());
        self.push_op(out, &[a], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*y).for_each(|d, &y| *d *= y * (T::one() - y));
            vec![Some(d)]
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(out, &[a], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(&*va)
                .for_each(|d, &x| if x <= T::zero() { *d = T::zero() });
            vec![Some(d)]
        })
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda` backward.
    pub fn grl(&self, a: Var, lambda: f64) -> Var {
        assert!(lambda >= 0.0, "grl: lambda must be non-negative");
        let out = (*self.value(a)).clone();
        let k = T::cst(-lambda);
        self.push_op(out, &[a], move |g, _| vec![Some(g.mapv(|x| x * k))])
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let shape = vx.shape().to_vec();
        let d_in = *shape.last().expect("linear: rank-0 input");
        let (d_out, w_in) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(d_in, w_in, "linear: input width {d_in} vs weight {w_in}");
        let rows = vx.len() / d_in;
        let x2 = as_matrix(&vx, rows, d_in);
        let w2 = vw.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut y2 = x2.dot(&w2.t());
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.len(), d_out, "linear: bias length");
            let bv = vb.view().into_shape_with_order(d_out).unwrap();
            y2 += &bv;
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let out = y2.into_shape_with_order(out_shape).unwrap().into_dyn();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.push_op(out, &parents, move |g, needs| {
            let g2 = g.view().into_shape_with_order((rows, d_out)).unwrap();
            let dx = needs[0].then(|| {
                g2.dot(&w2)
                    .into_shape_with_order(shape.clone())
                    .unwrap()
                    .into_dyn()
            });
            let dw = needs[1].then(|| g2.t().dot(&x2).into_dyn());
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
            }
            grads
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Var {
        let va = self.value(a);
        let mut out = (*va).clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.fold(T::neg_infinity(), |m, &x| m.max(x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s: T = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        let y = Rc::new(out.clone());
        self.push_op(out, &[a], move |g, _| {
            let mut d = zeros_like(g);
            Zip::from(d.lanes_mut(Axis(axis)))
                .and(g.lanes(Axis(axis)))
                .and(y.lanes(Axis(axis)))
                .for_each(|mut d, g, y| {
                    let dot: T = g.iter().zip(y.iter()).map(|(&g, &y)| g * y).sum();
                    Zip::from(&mut d)
                        .and(&g)
                        .and(&y)
                        .for_each(|d, &g, &y| *d = y * (g - dot));
                });
            vec![Some(d)]
        })
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let va = self.value(a);
        let in_shape = va.raw_dim();
        let out = va.sum_axis(Axis(axis));
        self.push_op(out, &[a], move |g, _| {
            let expanded = g.clone().insert_axis(Axis(axis));
            vec![Some(expanded.broadcast(in_shape.clone()).unwrap().to_owned())]
        })
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis].max(1);
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[B, C, T, F] -> [B, T, C*F]`.
    pub fn to_sequence(&self, a: Var) -> Var {
        let va = self.value(a);
        let sh = va.shape().to_vec();
        assert_eq!(sh.len(), 4, "to_sequence expects [B, C, T, F]");
        let (b, c, t, f) = (sh[0], sh[1], sh[2], sh[3]);
        let out = va
            .view()
            .permuted_axes(vec![0, 2, 1, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(vec![b, t, c * f])
            .unwrap();
        self.push_op(out, &[a], move |g, _| {
            let d = g
                .view()
                .into_shape_with_order(vec![b, t, c, f])
                .unwrap()
                .permuted_axes(vec![0, 2, 1, 3])
                .as_standard_layout()
                .into_owned();
            vec![Some(d)]
        })
    }

    /// Nearest-neighbour upsampling of `[B, T, D]` along time.
    pub fn upsample_time(&self, a: Var, factor: usize) -> Var {
        if factor == 1 {
            return a;
        }
        let va = self.value(a);
        let sh = va.shape().to_vec();
        assert_eq!(sh.len(), 3, "upsample_time expects [B, T, D]");
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        let mut out = ArrayD::zeros(vec![b, t * factor, d]);
        for bi in 0..b {
            for ti in 0..t * factor {
                out.slice_mut(s![bi, ti, ..])
                    .assign(&va.slice(s![bi, ti / factor, ..]));
            }
        }
        self.push_op(out, &[a], move |g, _| {
            let mut dx = ArrayD::zeros(vec![b, t, d]);
            for bi in 0..b {
                for ti in 0..t * factor {
                    let mut row = dx.slice_mut(s![bi, ti / factor, ..]);
                    row += &g.slice(s![bi, ti, ..]);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Non-overlapping average pooling of `[B, T, D]` along time.
    pub fn avg_pool_time(&self, a: Var, k: usize) -> Var {
        if k == 1 {
            return a;
        }
        let va = self.value(a);
        let sh = va.shape().to_vec();
        assert_eq!(sh.len(), 3, "avg_pool_time expects [B, T, D]");
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        assert_eq!(t % k, 0, "avg_pool_time: length {t} not divisible by {k}");
        let to = t / k;
        let inv = T::cst(1.0 / k as f64);
        let mut out = ArrayD::zeros(vec![b, to, d]);
        for bi in 0..b {
            for ti in 0..t {
                let mut row = out.slice_mut(s![bi, ti / k, ..]);
                row.scaled_add(inv, &va.slice(s![bi, ti, ..]));
            }
        }
        self.push_op(out, &[a], move |g, _| {
            let mut dx = ArrayD::zeros(vec![b, t, d]);
            for bi in 0..b {
                for ti in 0..t {
                    dx.slice_mut(s![bi, ti, ..])
                        .assign(&g.slice(s![bi, ti / k, ..]).mapv(|x| x * inv));
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let in_shape = va.shape().to_vec();
        let out = va
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(shape.to_vec())
            .expect("reshape: element count mismatch");
        self.push_op(out, &[a], move |g, _| {
            vec![Some(g.clone().into_shape_with_order(in_shape.clone()).unwrap())]
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let axis = va.ndim() - 1;
        let split = va.shape()[axis];
        let out = concatenate(Axis(axis), &[va.view(), vb.view()]).expect("concat_last: shapes");
        self.push_op(out, &[a, b], move |g, _| {
            let (ga, gb) = g.view().split_at(Axis(axis), split);
            vec![Some(ga.to_owned()), Some(gb.to_owned())]
        })
    }
}

fn as_matrix<T: Real>(t: &Tensor<T>, rows: usize, cols: usize) -> Array2<T> {
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .unwrap()
}
