use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub score: f64,
    pub per_point: Vec<f64>,
}

/// Euclidean distance matrix of the rows of `x`.
pub fn pairwise_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Silhouette coefficients of `points` grouped by `labels`.
///
/// `a_i` is the mean distance to the other members of the point's own
/// cluster and `b_i` the smallest mean distance to another cluster;
/// `s_i = (b_i − a_i) / max(a_i, b_i)`, with `s_i = 0` for singleton
/// clusters and when both distances vanish.
pub fn silhouette(points: &Array2<f64>, labels: &[usize]) -> Result<Silhouette> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} points", labels.len())));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("silhouette input".into()));
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let k = ids.len();
    let cluster: Vec<usize> = labels.iter().map(|l| ids.binary_search(l).unwrap()).collect();
    let mut sizes = vec![0usize; k];
    for &c in &cluster {
        sizes[c] += 1;
    }
    let d = pairwise_distances(points);
    let mut per_point = Vec::with_capacity(n);
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[cluster[j]] += d[[i, j]];
        }
        let own = cluster[i];
        if sizes[own] < 2 {
            per_point.push(0.0);
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        per_point.push(if m > 0.0 { (b - a) / m } else { 0.0 });
    }
    let score = per_point.iter().sum::<f64>() / n as f64;
    Ok(Silhouette { score, per_point })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn separated_duplicates_score_one() {
        let x = array![[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]];
        let s = silhouette(&x, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.score, 1.0);
    }

    #[test]
    fn identical_points_score_zero() {
        let x = Array2::from_elem((6, 3), 1.5);
        assert_eq!(silhouette(&x, &[0, 1, 0, 1, 0, 1]).unwrap().score, 0.0);
    }

    #[test]
    fn single_cluster_is_rejected() {
        let x = array![[0.0], [1.0]];
        assert!(silhouette(&x, &[3, 3]).is_err());
    }

    #[test]
    fn singleton_cluster_gets_zero() {
        let x = array![[0.0], [0.1], [5.0]];
        let s = silhouette(&x, &[0, 0, 1]).unwrap();
        assert_eq!(s.per_point[2], 0.0);
    }

    fn cloud() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<usize>)> {
        (4usize..30).prop_flat_map(|n| {
            (
                proptest::collection::vec(proptest::array::uniform3(-5.0f64..5.0), n),
                proptest::collection::vec(0usize..3, n),
            )
        })
    }

    fn to_array(p: &[[f64; 3]]) -> Array2<f64> {
        Array2::from_shape_fn((p.len(), 3), |(i, j)| p[i][j])
    }

    proptest! {
        #[test]
        fn coefficients_are_bounded_and_invariant((p, mut l) in cloud(), angle in 0.0f64..6.3, shift in -3.0f64..3.0) {
            l[0] = 0;
            l[1] = 1;
            let x = to_array(&p);
            let s = silhouette(&x, &l).unwrap();
            prop_assert!(s.per_point.iter().all(|v| (-1.0..=1.0).contains(v)));

            // rotation about the z axis plus translation
            let (c, si) = (angle.cos(), angle.sin());
            let y = Array2::from_shape_fn(x.dim(), |(i, j)| match j {
                0 => c * x[[i, 0]] - si * x[[i, 1]] + shift,
                1 => si * x[[i, 0]] + c * x[[i, 1]] - shift,
                _ => x[[i, 2]] + 2.0 * shift,
            });
            let r = silhouette(&y, &l).unwrap();
            prop_assert!((r.score - s.score).abs() < 1e-9);

            // reversed order
            let rev: Vec<usize> = (0..l.len()).rev().collect();
            let xr = Array2::from_shape_fn(x.dim(), |(i, j)| x[[rev[i], j]]);
            let lr: Vec<usize> = rev.iter().map(|&i| l[i]).collect();
            prop_assert!((silhouette(&xr, &lr).unwrap().score - s.score).abs() < 1e-9);

            // relabelling clusters
            let swapped: Vec<usize> = l.iter().map(|&v| 2 - v).collect();
            prop_assert!((silhouette(&x, &swapped).unwrap().score - s.score).abs() < 1e-12);
        }
    }
}
