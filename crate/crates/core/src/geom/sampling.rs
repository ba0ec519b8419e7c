use super::Point3;
use crate::error::{Error, Result};

/// Indices of the `min(k, len)` nearest points, ascending by distance with
/// ties broken by the smaller index.
pub fn knn(points: &[Point3], query: &Point3, k: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::validation("knn over an empty point set"));
    }
    if k == 0 {
        return Err(Error::validation("knn requires k >= 1"));
    }
    let mut keyed: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (query.dist2(p), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(points.len());
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Greedy farthest point sampling seeded at index 0.
///
/// Each step picks the point maximizing the distance to the already selected
/// set, ties to the smaller index. When fewer than `k` points exist, every
/// index is returned in sampling order and the result is padded to length
/// `k` with repeats of index 0.
pub fn fps(points: &[Point3], k: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::validation("fps over an empty point set"));
    }
    if k == 0 {
        return Err(Error::validation("fps requires K >= 1"));
    }
    let n = points.len();
    let take = k.min(n);
    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = 0usize;
    selected.push(current);
    min_d2[current] = f64::NEG_INFINITY;
    while selected.len() < take {
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_d2[i] == f64::NEG_INFINITY {
                continue;
            }
            let d2 = anchor.dist2(p);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
        min_d2[current] = f64::NEG_INFINITY;
        selected.push(current);
    }
    selected.resize(k, 0);
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                )
            })
            .collect()
    }

    #[test]
    fn knn_orders_by_distance() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(5.0, 0.0, 0.0),
        ];
        assert_eq!(knn(&pts, &Point3::new(0.1, 0.0, 0.0), 2).unwrap(), vec![0, 1]);
        assert_eq!(knn(&pts, &Point3::new(4.0, 0.0, 0.0), 10).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(&mut rng, 200);
        for _ in 0..20 {
            let q = random_points(&mut rng, 1)[0];
            let mut all: Vec<usize> = (0..pts.len()).collect();
            all.sort_by(|&a, &b| q.dist2(&pts[a]).total_cmp(&q.dist2(&pts[b])).then(a.cmp(&b)));
            assert_eq!(knn(&pts, &q, 10).unwrap(), all[..10].to_vec());
        }
    }

    #[test]
    fn knn_rejects_empty() {
        assert!(knn(&[], &Point3::ORIGIN, 1).is_err());
    }

    #[test]
    fn fps_seed_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 20);
        assert_eq!(fps(&pts, 1).unwrap(), vec![0]);
    }

    #[test]
    fn fps_collinear_fixture() {
        let pts: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(fps(&pts, 3).unwrap(), vec![0, 9, 4]);
    }

    #[test]
    fn fps_pads_small_sets_with_seed() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(3.0, 0.0, 0.0),
        ];
        assert_eq!(fps(&pts, 6).unwrap(), vec![0, 2, 1, 0, 0, 0]);
    }

    #[test]
    fn fps_rejects_empty() {
        assert!(fps(&[], 4).is_err());
    }

    fn min_pairwise(points: &[Point3], idx: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                best = best.min(points[i].dist(&points[j]));
            }
        }
        best
    }

    #[test]
    fn fps_spreads_better_than_random_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut wins = 0;
        for _ in 0..100 {
            let pts = random_points(&mut rng, 150);
            let chosen = fps(&pts, 12).unwrap();
            let random: Vec<usize> = sample(&mut rng, pts.len(), 12).into_vec();
            if min_pairwise(&pts, &chosen) >= min_pairwise(&pts, &random) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "fps won only {wins}/100 trials");
    }
}
