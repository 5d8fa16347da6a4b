use ndarray::{ArrayD, IxDyn, Zip};

use super::{Graph, Real, Tensor, Var};

impl<T: Real> Graph<T> {
    /// Weighted mean binary cross-entropy of probabilities `p` against
    /// constant `target`, with probabilities clamped to `[eps, 1 - eps]`.
    ///
    /// `weight` has the shape of `p`; the loss is `Σ w·bce / Σ w`, or zero
    /// when every weight is zero.
    pub fn bce(&self, p: Var, target: &Tensor<T>, weight: &Tensor<T>, eps: f64) -> Var {
        let vp = self.value(p);
        assert_eq!(vp.shape(), target.shape(), "bce: target shape");
        assert_eq!(vp.shape(), weight.shape(), "bce: weight shape");
        let lo = T::cst(eps);
        let hi = T::one() - lo;
        let wsum: T = weight.sum();
        let norm = if wsum > T::zero() { T::one() / wsum } else { T::zero() };
        let mut total = T::zero();
        Zip::from(&*vp).and(target).and(weight).for_each(|&p, &y, &w| {
            if w != T::zero() {
                let pc = p.max(lo).min(hi);
                total -= w * (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
            }
        });
        let out = ArrayD::from_elem(IxDyn(&[]), total * norm);
        let target = target.clone();
        let weight = weight.clone();
        self.push_op(out, &[p], move |g, _| {
            let gv = *g.iter().next().unwrap() * norm;
            let mut d = ArrayD::zeros(vp.raw_dim());
            Zip::from(&mut d)
                .and(&*vp)
                .and(&target)
                .and(&weight)
                .for_each(|d, &p, &y, &w| {
                    if w != T::zero() {
                        let pc = p.max(lo).min(hi);
                        *d = gv * w * (-(y / pc) + (T::one() - y) / (T::one() - pc));
                    }
                });
            vec![Some(d)]
        })
    }

    /// Weighted mean squared error between `a` and a constant `target`.
    pub fn mse(&self, a: Var, target: &Tensor<T>, weight: &Tensor<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), target.shape(), "mse: target shape");
        assert_eq!(va.shape(), weight.shape(), "mse: weight shape");
        let wsum: T = weight.sum();
        let norm = if wsum > T::zero() { T::one() / wsum } else { T::zero() };
        let mut total = T::zero();
        Zip::from(&*va).and(target).and(weight).for_each(|&a, &y, &w| {
            total += w * (a - y) * (a - y);
        });
        let out = ArrayD::from_elem(IxDyn(&[]), total * norm);
        let target = target.clone();
        let weight = weight.clone();
        self.push_op(out, &[a], move |g, _| {
            let gv = *g.iter().next().unwrap() * norm * T::cst(2.0);
            let mut d = ArrayD::zeros(va.raw_dim());
            Zip::from(&mut d)
                .and(&*va)
                .and(&target)
                .and(&weight)
                .for_each(|d, &a, &y, &w| *d = gv * w * (a - y));
            vec![Some(d)]
        })
    }
}
