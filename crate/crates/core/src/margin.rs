//! Per-surfel depth margins.
//!
//! A surfel's own margin scales with its size; the operative margin is the median of its
//! neighbours' raw margins, which keeps one oversized surfel from opening a large culling
//! window that lets hidden Gaussians leak through.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::scene::{Scene, Surfel};

pub const MARGIN_NEIGHBORS: usize = 16;
pub const MARGIN_FACTOR: f64 = 2.5;

pub fn initial_margin(surfel: &Surfel) -> f64 {
    MARGIN_FACTOR * (surfel.scale.x + surfel.scale.y)
}

/// Indices of the `k` points nearest to `query`, excluding `skip`. Ties break by index.
pub fn nearest(points: &[Vector3<f64>], query: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(j, p)| ((p - query).norm_squared(), j))
        .collect();
    let k = k.min(d.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    d.select_nth_unstable_by(k - 1, cmp);
    d.truncate(k);
    d.sort_by(cmp);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Median; an even count takes the mean of the two middle values.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Operative margin for every surfel: the median raw margin of its 16 nearest neighbours.
pub fn compute_margins(surfels: &[Surfel]) -> Vec<f64> {
    let raw: Vec<f64> = surfels.iter().map(initial_margin).collect();
    if surfels.len() == 1 {
        return raw;
    }
    let centers: Vec<Vector3<f64>> = surfels.iter().map(|s| s.position).collect();
    (0..surfels.len())
        .into_par_iter()
        .map(|i| {
            let mut vals: Vec<f64> = nearest(&centers, &centers[i], MARGIN_NEIGHBORS, Some(i))
                .into_iter()
                .map(|j| raw[j])
                .collect();
            median(&mut vals)
        })
        .collect()
}

/// Writes margins into the scene: the neighbourhood median, or each surfel's own raw
/// margin when `raw` is set.
pub fn apply_margins(scene: &mut Scene, raw: bool) {
    if raw {
        for s in &mut scene.surfels {
            s.eps = initial_margin(s);
        }
        return;
    }
    let eps = compute_margins(&scene.surfels);
    for (s, e) in scene.surfels.iter_mut().zip(eps) {
        s.eps = e;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;
    use nalgebra::Vector2;
    use proptest::prelude::*;

    fn surfel(p: [f64; 3], s: [f64; 2]) -> Surfel {
        Surfel::new(Vector3::from(p), Quat::new(1.0, 0.0, 0.0, 0.0), Vector2::from(s), vec![[0.0; 3]]).unwrap()
    }

    #[test]
    fn single_surfel_keeps_initial_margin() {
        let e = compute_margins(&[surfel([0.0; 3], [0.1, 0.3])]);
        assert!((e[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_neighbours_keep_their_margin() {
        let s: Vec<_> = (0..17).map(|i| surfel([i as f64, 0.0, 0.0], [0.2, 0.2])).collect();
        for e in compute_margins(&s) {
            assert_eq!(e, 1.0);
        }
    }

    #[test]
    fn outlier_takes_the_neighbourhood_median() {
        let mut s: Vec<_> = (0..16).map(|i| surfel([0.1 * i as f64, 1.0, 0.0], [0.02, 0.02])).collect();
        s.push(surfel([0.0; 3], [3.0, 3.0]));
        let e = compute_margins(&s);
        assert_eq!(e[16], 2.5 * 0.04);
    }

    #[test]
    fn even_count_median_is_the_midpoint() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut [5.0]), 5.0);
    }

    #[test]
    fn nearest_breaks_ties_by_index() {
        let pts = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), Vector3::zeros()];
        assert_eq!(nearest(&pts, &Vector3::zeros(), 1, Some(2)), vec![0]);
    }

    proptest! {
        #[test]
        fn margins_lie_within_neighbour_range_and_permute(
            pts in prop::collection::vec(((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), (0.01..0.5f64, 0.01..0.5f64)), 2..30),
            rot in 0usize..30,
        ) {
            let s: Vec<_> = pts.iter().map(|((x, y, z), (a, b))| surfel([*x, *y, *z], [*a, *b])).collect();
            let e = compute_margins(&s);
            let raw: Vec<f64> = s.iter().map(initial_margin).collect();
            for (i, ei) in e.iter().enumerate() {
                let others = raw.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v);
                let lo = others.clone().fold(f64::MAX, f64::min);
                let hi = others.fold(f64::MIN, f64::max);
                prop_assert!(*ei >= lo && *ei <= hi);
            }
            // a cyclic shift of the input shifts the output identically
            let r = rot % s.len();
            let mut shifted = s.clone();
            shifted.rotate_left(r);
            let mut expect = e.clone();
            expect.rotate_left(r);
            prop_assert_eq!(compute_margins(&shifted), expect);
        }
    }
}
