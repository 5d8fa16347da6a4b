use ndarray::{Array1, ArrayD, IxDyn};

use super::{Graph, Real, Var};

/// Per-channel statistics measured on a training batch.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Array1<T>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Array1<T>,
}

/// Contiguous `[B, C, T, F]` data viewed as `B*C` lanes of `T*F` values.
fn lanes<T: Real>(x: &ndarray::ArrayD<T>) -> (Vec<T>, usize, usize, usize) {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "batch_norm: rank");
    let data = x.as_standard_layout().as_slice().unwrap().to_vec();
    (data, sh[0], sh[1], sh[2] * sh[3])
}

impl<T: Real> Graph<T> {
    /// Batch normalisation of `[B, C, T, F]` using the statistics of the batch.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<T>) {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let (data, bn, c, tf) = lanes(&vx);
        let n = bn * tf;
        let nt = T::cst(n as f64);
        let gamma_v: Vec<T> = self.value(gamma).iter().copied().collect();
        let beta_v: Vec<T> = self.value(beta).iter().copied().collect();
        assert_eq!(gamma_v.len(), c, "batch_norm: gamma length");

        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for (i, lane) in data.chunks_exact(tf).enumerate() {
            mean[i % c] += lane.iter().fold(T::zero(), |a, &v| a + v);
        }
        mean.mapv_inplace(|m| m / nt);
        for (i, lane) in data.chunks_exact(tf).enumerate() {
            let m = mean[i % c];
            var[i % c] += lane.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m));
        }
        var.mapv_inplace(|v| v / nt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::cst(eps)).sqrt()).collect();
        let mut xhat = data;
        let mut out = vec![T::zero(); xhat.len()];
        for (i, (h, o)) in xhat.chunks_exact_mut(tf).zip(out.chunks_exact_mut(tf)).enumerate() {
            let ci = i % c;
            let (m, s, ga, be) = (mean[ci], inv_std[ci], gamma_v[ci], beta_v[ci]);
            for (h, o) in h.iter_mut().zip(o.iter_mut()) {
                *h = (*h - m) * s;
                *o = ga * *h + be;
            }
        }
        let unbiased = if n > 1 {
            var.mapv(|v| v * nt / T::cst((n - 1) as f64))
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean,
            var_unbiased: unbiased,
        };
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let var = self.push_op(out, &[x, gamma, beta], move |g, needs| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut dgamma = Array1::<T>::zeros(c);
            let mut dbeta = Array1::<T>::zeros(c);
            for (i, (gl, hl)) in gs.chunks_exact(tf).zip(xhat.chunks_exact(tf)).enumerate() {
                let ci = i % c;
                let (mut sg, mut sgh) = (T::zero(), T::zero());
                for (&gv, &h) in gl.iter().zip(hl) {
                    sg += gv;
                    sgh += gv * h;
                }
                dbeta[ci] += sg;
                dgamma[ci] += sgh;
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); gs.len()];
                for (i, ((d, gl), hl)) in dx
                    .chunks_exact_mut(tf)
                    .zip(gs.chunks_exact(tf))
                    .zip(xhat.chunks_exact(tf))
                    .enumerate()
                {
                    let ci = i % c;
                    // sums of dL/dxhat and dL/dxhat·xhat over the channel
                    let sum_dh = dbeta[ci] * gamma_v[ci];
                    let sum_dhh = dgamma[ci] * gamma_v[ci];
                    let k = inv_std[ci] / nt;
                    for ((d, &gv), &h) in d.iter_mut().zip(gl).zip(hl) {
                        *d = k * (nt * gv * gamma_v[ci] - sum_dh - h * sum_dhh);
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap()
            });
            vec![dx, Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
        });
        (var, stats)
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<T>,
        var: &Array1<T>,
        eps: f64,
    ) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let (mut xhat, _, c, tf) = lanes(&vx);
        let gamma_v: Vec<T> = self.value(gamma).iter().copied().collect();
        let beta_v: Vec<T> = self.value(beta).iter().copied().collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::cst(eps)).sqrt()).collect();
        let mut out = vec![T::zero(); xhat.len()];
        for (i, (h, o)) in xhat.chunks_exact_mut(tf).zip(out.chunks_exact_mut(tf)).enumerate() {
            let ci = i % c;
            let (m, s, ga, be) = (mean[ci], inv_std[ci], gamma_v[ci], beta_v[ci]);
            for (h, o) in h.iter_mut().zip(o.iter_mut()) {
                *h = (*h - m) * s;
                *o = ga * *h + be;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push_op(out, &[x, gamma, beta], move |g, _| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut dgamma = Array1::<T>::zeros(c);
            let mut dbeta = Array1::<T>::zeros(c);
            let mut dx = vec![T::zero(); gs.len()];
            for (i, ((d, gl), hl)) in dx
                .chunks_exact_mut(tf)
                .zip(gs.chunks_exact(tf))
                .zip(xhat.chunks_exact(tf))
                .enumerate()
            {
                let ci = i % c;
                let k = gamma_v[ci] * inv_std[ci];
                for ((d, &gv), &h) in d.iter_mut().zip(gl).zip(hl) {
                    dgamma[ci] += gv * h;
                    dbeta[ci] += gv;
                    *d = gv * k;
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap()),
                Some(dgamma.into_dyn()),
                Some(dbeta.into_dyn()),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn train_mode_normalises_each_channel() {
        let g = Graph::<f64>::inference();
        let x = g.constant(rand_tensor(&[3, 2, 4, 5], 1).mapv(|v| 3.0 * v + 2.0));
        let gamma = g.constant(ArrayD::ones(IxDyn(&[2])));
        let beta = g.constant(ArrayD::zeros(IxDyn(&[2])));
        let (y, _) = g.batch_norm_train(x, gamma, beta, 0.0);
        let y = g.value(y);
        for ci in 0..2 {
            let lane = y.index_axis(ndarray::Axis(1), ci);
            let m = lane.mean().unwrap();
            let v = lane.mapv(|x| (x - m) * (x - m)).mean().unwrap();
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn train_mode_gradients() {
        let k = rand_tensor(&[3, 2, 2, 2], 2);
        let gamma = rand_tensor(&[2], 3);
        let beta = rand_tensor(&[2], 4);
        check(
            rand_tensor(&[3, 2, 2, 2], 5),
            |g, x| {
                let (y, _) = g.batch_norm_train(
                    x,
                    g.constant(gamma.clone()),
                    g.constant(beta.clone()),
                    1e-5,
                );
                let y = g.mul(y, g.constant(k.clone()));
                let y = g.sigmoid(y);
                g.sum_all(y)
            },
            1e-6,
        );
        let x = rand_tensor(&[3, 2, 2, 2], 6);
        check(
            rand_tensor(&[2], 7),
            |g, gm| {
                let (y, _) = g.batch_norm_train(g.constant(x.clone()), gm, g.constant(beta.clone()), 1e-5);
                let y = g.mul(y, g.constant(k.clone()));
                let y = g.sigmoid(y);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn eval_mode_gradients() {
        let k = rand_tensor(&[2, 2, 3, 2], 8);
        let mean = Array1::from(vec![0.1, -0.3]);
        let var = Array1::from(vec![0.5, 2.0]);
        check(
            rand_tensor(&[2, 2, 3, 2], 9),
            |g, x| {
                let gamma = g.constant(ArrayD::from_elem(IxDyn(&[2]), 1.5));
                let beta = g.constant(ArrayD::from_elem(IxDyn(&[2]), 0.2));
                let y = g.batch_norm_eval(x, gamma, beta, &mean, &var, 1e-5);
                let y = g.mul(y, g.constant(k.clone()));
                let y = g.sigmoid(y);
                g.sum_all(y)
            },
            1e-6,
        );
    }
}
