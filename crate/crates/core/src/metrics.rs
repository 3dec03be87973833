//! Point-set distances, detection matching scores and regression scores.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pcio::{Point3, PointCloud};
use crate::spatial::{Index2, Index3};

fn nn_distances(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    let idx = Index3::new(to);
    from.par_iter().map(|p| idx.nearest(p).1).collect()
}

fn check(p: &PointCloud, q: &PointCloud) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::InvalidArgument("distance between empty clouds is undefined".into()));
    }
    Ok(())
}

/// `(mean p->Q + mean q->P) / 2`, unsquared Euclidean.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    check(p, q)?;
    let a = nn_distances(&p.points, &q.points);
    let b = nn_distances(&q.points, &p.points);
    Ok(0.5 * (a.iter().sum::<f64>() / a.len() as f64 + b.iter().sum::<f64>() / b.len() as f64))
}

pub fn hausdorff(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    check(p, q)?;
    let a = nn_distances(&p.points, &q.points);
    let b = nn_distances(&q.points, &p.points);
    Ok(a.into_iter().chain(b).fold(0.0, f64::max))
}

/// Both distances with a single pair of nearest-neighbor sweeps.
pub fn chamfer_hausdorff(p: &PointCloud, q: &PointCloud) -> Result<(f64, f64)> {
    check(p, q)?;
    let a = nn_distances(&p.points, &q.points);
    let b = nn_distances(&q.points, &p.points);
    let cd = 0.5 * (a.iter().sum::<f64>() / a.len() as f64 + b.iter().sum::<f64>() / b.len() as f64);
    let hd = a.into_iter().chain(b).fold(0.0, f64::max);
    Ok((cd, hd))
}

fn brute_nn(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| p.dist(q)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Quadratic reference implementation of [`chamfer`].
pub fn chamfer_brute(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    check(p, q)?;
    let a = brute_nn(&p.points, &q.points);
    let b = brute_nn(&q.points, &p.points);
    Ok(0.5 * (a.iter().sum::<f64>() / a.len() as f64 + b.iter().sum::<f64>() / b.len() as f64))
}

pub fn hausdorff_brute(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    check(p, q)?;
    let a = brute_nn(&p.points, &q.points);
    let b = brute_nn(&q.points, &p.points);
    Ok(a.into_iter().chain(b).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScores {
    pub tp: usize,
    pub fp: usize,
    pub false_negatives: usize,
    pub completeness: f64,
    pub omission: f64,
    pub commission: f64,
    pub f1: f64,
}

impl DetectionScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let completeness = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * precision * completeness / (precision + completeness)
        };
        DetectionScores {
            tp,
            fp,
            false_negatives: fn_,
            completeness,
            omission: 1.0 - completeness,
            commission: ratio(fp, tp + fp),
            f1,
        }
    }
}

/// Greedy one-to-one matching: candidate pairs within `radius` are accepted
/// in ascending distance order when both ends are still free. Returns
/// `(detected index, reference index)` pairs sorted by detected index.
pub fn match_detections(
    detected: &[[f64; 2]],
    reference: &[[f64; 2]],
    radius: f64,
) -> Result<(Vec<(usize, usize)>, DetectionScores)> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("matching radius must be > 0, got {radius}")));
    }
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    if !detected.is_empty() && !reference.is_empty() {
        let idx = Index2::new(reference);
        for (i, d) in detected.iter().enumerate() {
            for j in idx.within(*d, radius) {
                let r = reference[j];
                let dist = ((d[0] - r[0]).powi(2) + (d[1] - r[1]).powi(2)).sqrt();
                if dist <= radius {
                    cands.push((dist, i, j));
                }
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_d = vec![false; detected.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_d[i] && !used_r[j] {
            used_d[i] = true;
            used_r[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    let tp = pairs.len();
    let scores = DetectionScores::from_counts(tp, detected.len() - tp, reference.len() - tp);
    Ok((pairs, scores))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionScores {
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

/// `(bias, MAE, RMSE)` of `pred - reference`; defined even when R² is not.
pub fn error_stats(pred: &[f64], reference: &[f64]) -> Result<(f64, f64, f64)> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need equal non-empty lengths, got {} and {}",
            pred.len(),
            reference.len()
        )));
    }
    let n = pred.len() as f64;
    let (mut bias, mut mae, mut sse) = (0.0, 0.0, 0.0);
    for (p, r) in pred.iter().zip(reference) {
        let e = p - r;
        bias += e;
        mae += e.abs();
        sse += e * e;
    }
    Ok((bias / n, mae / n, (sse / n).sqrt()))
}

pub fn regression_scores(pred: &[f64], reference: &[f64]) -> Result<RegressionScores> {
    let (bias, mae, rmse) = error_stats(pred, reference)?;
    let n = pred.len() as f64;
    let mean_ref = reference.iter().sum::<f64>() / n;
    let ss_tot: f64 = reference.iter().map(|r| (r - mean_ref).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidArgument("R² is undefined for a constant reference".into()));
    }
    Ok(RegressionScores {
        bias,
        mae,
        rmse,
        r2: 1.0 - rmse * rmse * n / ss_tot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(v: &[[f64; 3]]) -> PointCloud {
        v.iter().map(|&a| Point3::from(a)).collect()
    }

    #[test]
    fn distance_examples() {
        let p = cloud(&[[0., 0., 0.], [1., 2., 3.]]);
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert_eq!(hausdorff(&p, &p).unwrap(), 0.0);
        let a = cloud(&[[0., 0., 0.]]);
        let b = cloud(&[[1., 0., 0.]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        let mut q = p.clone();
        q.points.push(Point3::new(8., 2., 3.));
        assert_eq!(hausdorff(&p, &q).unwrap(), 7.0);
        assert!(chamfer(&p, &PointCloud::default()).is_err());
    }

    #[test]
    fn accelerated_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let mut gen = |n: usize| -> PointCloud {
                (0..n)
                    .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)))
                    .collect()
            };
            let n1 = 1 + (gen(1).points[0].x.abs() * 20.0) as usize;
            let (p, q) = (gen(n1), gen(150));
            assert!((chamfer(&p, &q).unwrap() - chamfer_brute(&p, &q).unwrap()).abs() < 1e-9);
            assert!((hausdorff(&p, &q).unwrap() - hausdorff_brute(&p, &q).unwrap()).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn scores_identities(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let s = DetectionScores::from_counts(tp, fp, fn_);
            prop_assert!((s.completeness + s.omission - 1.0).abs() < 1e-12);
            if tp > 0 {
                let p = tp as f64 / (tp + fp) as f64;
                let r = s.completeness;
                prop_assert!((s.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
            } else {
                prop_assert_eq!(s.f1, 0.0);
            }
        }

        #[test]
        fn chamfer_is_symmetric(a in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64), 1..20),
                                b in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64), 1..20)) {
            let p: PointCloud = a.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            let q: PointCloud = b.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            prop_assert!((chamfer(&p, &q).unwrap() - chamfer(&q, &p).unwrap()).abs() < 1e-12);
            prop_assert_eq!(hausdorff(&p, &q).unwrap(), hausdorff(&q, &p).unwrap());
        }
    }

    #[test]
    fn matching_examples() {
        let r = vec![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let (pairs, s) = match_detections(&r, &r, 2.0).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!((s.fp, s.false_negatives, s.f1), (0, 0, 1.0));
        let (_, s) = match_detections(&[], &r, 2.0).unwrap();
        assert_eq!((s.tp, s.false_negatives, s.f1), (0, 3, 0.0));
        assert!(match_detections(&r, &r, 0.0).is_err());
    }

    fn best_assignment(d: &[[f64; 2]], r: &[[f64; 2]], radius: f64) -> usize {
        // exhaustive maximum-cardinality matching
        fn go(i: usize, d: &[[f64; 2]], r: &[[f64; 2]], used: &mut Vec<bool>, radius: f64) -> usize {
            if i == d.len() {
                return 0;
            }
            let mut best = go(i + 1, d, r, used, radius);
            for j in 0..r.len() {
                let dist = ((d[i][0] - r[j][0]).powi(2) + (d[i][1] - r[j][1]).powi(2)).sqrt();
                if !used[j] && dist <= radius {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, d, r, used, radius));
                    used[j] = false;
                }
            }
            best
        }
        go(0, d, r, &mut vec![false; r.len()], radius)
    }

    #[test]
    fn greedy_matching_against_exhaustive() {
        // a chain where the globally closest pair blocks a second match
        let d = vec![[0.0, 0.0], [1.9, 0.0]];
        let r = vec![[1.0, 0.0], [-1.5, 0.0]];
        let (pairs, _) = match_detections(&d, &r, 2.0).unwrap();
        assert_eq!(pairs.len(), best_assignment(&d, &r, 2.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut diverged = 0;
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let mut pts = |k: usize| (0..k).map(|_| [rng.random_range(0.0..6.0), rng.random_range(0.0..6.0)]).collect::<Vec<_>>();
            let d = pts(n);
            let r = pts(n);
            let (pairs, _) = match_detections(&d, &r, 2.0).unwrap();
            let opt = best_assignment(&d, &r, 2.0);
            assert!(pairs.len() <= opt);
            // greedy is a maximal matching, so it reaches at least half the optimum
            assert!(2 * pairs.len() >= opt);
            diverged += (pairs.len() < opt) as usize;
        }
        assert!(diverged < 200);
    }

    #[test]
    fn regression_examples() {
        let r = vec![10.0, 20.0, 35.0];
        assert_eq!(regression_scores(&r, &r).unwrap(), RegressionScores { bias: 0.0, mae: 0.0, rmse: 0.0, r2: 1.0 });
        let p: Vec<f64> = r.iter().map(|v| v + 2.0).collect();
        let s = regression_scores(&p, &r).unwrap();
        assert!((s.bias - 2.0).abs() < 1e-12 && (s.mae - 2.0).abs() < 1e-12 && (s.rmse - 2.0).abs() < 1e-12);
        assert!(regression_scores(&[1.0, 2.0], &[3.0, 3.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r: Vec<f64> = (0..50).map(|_| rng.random_range(20.0..60.0)).collect();
        let p: Vec<f64> = r.iter().map(|v| v + rng.random_range(-5.0..6.0)).collect();
        let s = regression_scores(&p, &r).unwrap();
        let n = 50.0;
        let e: Vec<f64> = p.iter().zip(&r).map(|(a, b)| a - b).collect();
        let mean_r = r.iter().sum::<f64>() / n;
        assert!((s.bias - e.iter().sum::<f64>() / n).abs() < 1e-12);
        assert!((s.rmse - (e.iter().map(|x| x * x).sum::<f64>() / n).sqrt()).abs() < 1e-12);
        let r2 = 1.0 - e.iter().map(|x| x * x).sum::<f64>() / r.iter().map(|x| (x - mean_r).powi(2)).sum::<f64>();
        assert!((s.r2 - r2).abs() < 1e-12);
        assert!(s.rmse >= s.mae && s.mae >= s.bias.abs());
    }
}
