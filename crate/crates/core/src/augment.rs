//! Spectrogram transforms used by the consistency objectives: circular time
//! shift, frequency shift, mixing and additive Gaussian noise.

use ndarray::{concatenate, s, Array, Array2, ArrayView, Axis, Dimension, RemoveAxis, Slice};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::frame_hop_seconds;
use crate::error::{Error, Result};

/// Signed time shift `tau` in input frames and frequency shift `nu` in mel bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub tau: i32,
    pub nu: i32,
}

/// Ranges of the shift distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftRange {
    /// Largest time shift in seconds; the normal has `2σ` at this bound.
    pub time_bound_s: f64,
    /// Largest frequency shift in mel bins.
    pub freq_bound_bins: f64,
    /// Time shifts are rounded to a multiple of this many frames.
    pub time_quantum: usize,
}

impl Default for ShiftRange {
    fn default() -> Self {
        Self {
            time_bound_s: 2.0,
            freq_bound_bins: 4.0,
            time_quantum: 1,
        }
    }
}

/// Normal with `2σ = bound`, redrawn until it falls inside `[-bound, bound]`.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound <= 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, bound / 2.0).expect("positive std");
    loop {
        let v: f64 = n.sample(rng);
        if v.abs() <= bound {
            return v;
        }
    }
}

/// Rounds `x / q` to the nearest integer without leaving `[-max, max]`.
fn quantise(x: f64, q: usize, max: f64) -> i32 {
    let q = q.max(1) as f64;
    let limit = (max / q).floor();
    ((x / q).round().clamp(-limit, limit) * q) as i32
}

/// Draws a time and frequency shift.
pub fn sample_shift<R: Rng + ?Sized>(rng: &mut R, range: &ShiftRange) -> ShiftSpec {
    let hop = frame_hop_seconds();
    let t = truncated_normal(rng, range.time_bound_s) / hop;
    let f = truncated_normal(rng, range.freq_bound_bins);
    ShiftSpec {
        tau: quantise(t, range.time_quantum, range.time_bound_s / hop),
        nu: quantise(f, 1, range.freq_bound_bins),
    }
}

/// Circular shift along `axis`: element `i` moves to `(i + shift) mod n`.
pub fn roll<A: Clone, D: RemoveAxis>(x: ArrayView<A, D>, axis: Axis, shift: isize) -> Array<A, D> {
    let n = x.len_of(axis);
    if n == 0 {
        return x.to_owned();
    }
    let k = shift.rem_euclid(n as isize) as usize;
    if k == 0 {
        return x.to_owned();
    }
    let tail = x.slice_axis(axis, Slice::from(n - k..));
    let head = x.slice_axis(axis, Slice::from(..n - k));
    concatenate(axis, &[tail, head]).expect("same shapes")
}

/// Shift along `axis` with vacated positions set to `fill`.
pub fn shift_fill<A: Clone, D: Dimension>(
    x: ArrayView<A, D>,
    axis: Axis,
    shift: isize,
    fill: A,
) -> Array<A, D> {
    let n = x.len_of(axis) as isize;
    let mut out = Array::from_elem(x.raw_dim(), fill);
    if shift.abs() >= n {
        return out;
    }
    let (src, dst) = if shift >= 0 {
        (0..n - shift, shift..n)
    } else {
        (-shift..n, 0..n + shift)
    };
    out.slice_axis_mut(axis, Slice::from(dst))
        .assign(&x.slice_axis(axis, Slice::from(src)));
    out
}

/// Circular time shift of a `[frames × mels]` spectrogram.
pub fn time_shift(spec: &Array2<f32>, tau: i32) -> Array2<f32> {
    roll(spec.view(), Axis(0), tau as isize)
}

/// Output frames corresponding to `tau` input frames, rounded to nearest.
pub fn output_shift(tau: i32, stride: usize) -> isize {
    (tau as f64 / stride.max(1) as f64).round() as isize
}

/// Circular shift of a `[out_frames × classes]` label matrix by `tau` input
/// frames, converted to the output frame rate.
pub fn shift_labels(labels: &Array2<f32>, tau: i32, stride: usize) -> Array2<f32> {
    roll(labels.view(), Axis(0), output_shift(tau, stride))
}

/// Shift of a `[frames × mels]` spectrogram along the mel axis; vacated bins
/// take `fill` (the log floor for raw log-mel input).
pub fn freq_shift(spec: &Array2<f32>, nu: i32, fill: f32) -> Array2<f32> {
    shift_fill(spec.view(), Axis(1), nu as isize, fill)
}

/// `λa + (1 − λ)b` element-wise.
pub fn mix<D: Dimension>(
    a: &Array<f32, D>,
    b: &Array<f32, D>,
    lambda: f32,
) -> Result<Array<f32, D>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "mix operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixing weight {lambda} outside [0, 1]")));
    }
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x = lambda * *x + (1.0 - lambda) * y);
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma²)` noise in place.
pub fn add_noise<R: Rng + ?Sized, D: Dimension>(x: &mut Array<f32, D>, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    x.iter_mut().for_each(|v| *v += n.sample(rng) as f32);
}

/// Mixing weight drawn from `Beta(a, b)`.
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> Result<f32> {
    let d = Beta::new(a, b).map_err(|e| Error::Config(format!("beta({a}, {b}): {e}")))?;
    Ok(d.sample(rng) as f32)
}

/// Batched `[B, T, F]` variants used by the training loop.
pub mod batch {
    use super::*;
    use ndarray::Array3;

    pub fn time_shift(x: &Array3<f32>, tau: i32) -> Array3<f32> {
        roll(x.view(), Axis(1), tau as isize)
    }

    pub fn freq_shift(x: &Array3<f32>, nu: i32, fill: f32) -> Array3<f32> {
        shift_fill(x.view(), Axis(2), nu as isize, fill)
    }

    /// Shifts `[B, T_out, C]` targets by `tau` input frames.
    pub fn shift_labels(y: &Array3<f32>, tau: i32, stride: usize) -> Array3<f32> {
        roll(y.view(), Axis(1), output_shift(tau, stride))
    }

    /// Rows of `x` reordered by `perm`.
    pub fn permute(x: &Array3<f32>, perm: &[usize]) -> Array3<f32> {
        let mut out = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.slice_mut(s![dst, .., ..]).assign(&x.slice(s![src, .., ..]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((648, 128), |_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn shifts_stay_in_range_and_centre() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let range = ShiftRange::default();
        let draws: Vec<ShiftSpec> = (0..10_000).map(|_| sample_shift(&mut rng, &range)).collect();
        assert!(draws.iter().all(|s| s.tau.abs() <= 130 && s.nu.abs() <= 4));
        let mean = draws.iter().map(|s| s.tau as f64).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() <= 3.0, "{mean}");
        assert!(draws.iter().any(|s| s.tau.abs() > 100));
        assert!(draws.iter().any(|s| s.nu.abs() == 4));
    }

    #[test]
    fn quantised_shifts_are_multiples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let range = ShiftRange {
            time_quantum: 8,
            ..Default::default()
        };
        for _ in 0..2000 {
            let s = sample_shift(&mut rng, &range);
            assert_eq!(s.tau % 8, 0);
            assert!(s.tau.abs() <= 125);
        }
    }

    #[test]
    fn same_seed_same_shifts() {
        let r = ShiftRange::default();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(sample_shift(&mut a, &r), sample_shift(&mut b, &r));
        }
    }

    #[test]
    fn time_shift_identities() {
        let x = spec(1);
        assert_eq!(time_shift(&x, 0), x);
        assert_eq!(time_shift(&x, 648), x);
        assert_eq!(time_shift(&time_shift(&x, 37), -37), x);
        assert_eq!(time_shift(&x, 1).row(0), x.row(647));
    }

    #[test]
    fn label_shift_moves_single_frame() {
        let mut y = Array2::<f32>::zeros((81, 10));
        y[[78, 3]] = 1.0;
        let z = shift_labels(&y, 40, 8); // 5 output frames
        assert_eq!(z[[2, 3]], 1.0);
        assert_eq!(z.sum(), 1.0);
        assert_eq!(shift_labels(&y, 0, 8), y);
        assert_eq!(shift_labels(&z, -40, 8), y);
        // 12 input frames is 1.5 output frames and rounds to 2
        assert_eq!(output_shift(12, 8), 2);
    }

    #[test]
    fn freq_shift_fills_vacated_bins() {
        let floor = -23.0;
        let mut x = Array2::from_elem((648, 128), floor);
        x.column_mut(60).fill(5.0);
        let y = freq_shift(&x, 3, floor);
        assert!(y.column(63).iter().all(|&v| v == 5.0));
        assert_eq!(y.iter().filter(|&&v| v == 5.0).count(), 648);
        assert_eq!(freq_shift(&x, 0, floor), x);

        // differences after the inverse shift are confined to the 2·|nu| edge bins
        let r = spec(2);
        let back = freq_shift(&freq_shift(&r, -4, floor), 4, floor);
        for j in 0..128 {
            let edge = j < 4 || j >= 124;
            if !edge {
                assert_eq!(back.column(j), r.column(j));
            }
        }
        assert!(back.column(0).iter().all(|&v| v == floor));
    }

    #[test]
    fn mix_cases() {
        let a = spec(3);
        let b = spec(4);
        assert_eq!(mix(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix(&a, &b, 0.0).unwrap(), b);
        let m = mix(&a, &a, 0.3).unwrap();
        for (x, y) in m.iter().zip(&a) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
        assert!(mix(&a, &Array2::zeros((2, 2)), 0.5).is_err());
        assert!(mix(&a, &b, 1.5).is_err());
    }

    #[test]
    fn noise_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::<f32>::zeros((1000, 100));
        let mut y = x.clone();
        add_noise(&mut y, 0.5, &mut rng);
        let n = y.len() as f64;
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.5).abs() < 0.01, "{}", var.sqrt());

        let mut z = x.clone();
        add_noise(&mut z, 0.0, &mut rng);
        assert_eq!(z, x);
        let mut a = x.clone();
        let mut b = x.clone();
        add_noise(&mut a, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        add_noise(&mut b, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn beta_lambda_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let l = sample_lambda(&mut rng, 0.5, 0.5).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
        assert!(sample_lambda(&mut rng, 0.0, 1.0).is_err());
    }

    #[test]
    fn batched_variants_match_single() {
        let a = spec(8);
        let b = spec(9);
        let x = ndarray::stack(Axis(0), &[a.view(), b.view()]).unwrap();
        let t = batch::time_shift(&x, -17);
        assert_eq!(t.index_axis(Axis(0), 1), time_shift(&b, -17));
        let f = batch::freq_shift(&x, 2, -1.0);
        assert_eq!(f.index_axis(Axis(0), 0), freq_shift(&a, 2, -1.0));
        let p = batch::permute(&x, &[1, 0]);
        assert_eq!(p.index_axis(Axis(0), 0), b);
        let _: Array3<f32> = p;
    }

    /// Per-output-frame pooling of input columns: a shift-equivariant map
    /// from spectrogram frames to label frames.
    fn pool_model(x: &Array2<f32>, stride: usize) -> Array2<f32> {
        let t = x.nrows() / stride;
        Array2::from_shape_fn((t, x.ncols()), |(i, j)| {
            (0..stride).map(|k| x[[i * stride + k, j]]).sum::<f32>()
        })
    }

    proptest! {
        #[test]
        fn time_shift_is_a_group_action(a in -700i32..700, b in -700i32..700, seed in 0u64..50) {
            let x = spec(seed);
            prop_assert_eq!(time_shift(&time_shift(&x, a), b), time_shift(&x, a + b));
        }

        #[test]
        fn mix_is_affine(l in 0.0f32..=1.0, seed in 0u64..50) {
            let a = spec(seed);
            let b = spec(seed + 100);
            let s = &mix(&a, &b, l).unwrap() + &mix(&b, &a, l).unwrap();
            let t = &a + &b;
            for (x, y) in s.iter().zip(&t) {
                prop_assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
            }
        }

        #[test]
        fn label_shift_commutes_with_equivariant_map(k in -16i32..16, seed in 0u64..20) {
            let x = spec(seed);
            let tau = 8 * k;
            let lhs = pool_model(&time_shift(&x, tau), 8);
            let rhs = shift_labels(&pool_model(&x, 8), tau, 8);
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn shift_fill_round_trip_keeps_interior(nu in -4i32..=4, seed in 0u64..20) {
            let x = spec(seed);
            let back = freq_shift(&freq_shift(&x, nu, -9.0), -nu, -9.0);
            let n = nu.unsigned_abs() as usize;
            for j in n..128 - n {
                prop_assert_eq!(back.column(j), x.column(j));
            }
        }
    }
}
