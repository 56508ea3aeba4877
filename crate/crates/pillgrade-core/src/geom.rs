//! Farthest point sampling, brute-force k-nearest-neighbor search and
//! Morton (z-order) encoding. All tie-breaks go to the smallest original
//! index so results are reproducible across runs and implementations.

use crate::cloud::{dist2, Point3};
use crate::error::{Error, Result};

pub const DEFAULT_MORTON_BITS: u32 = 21;

/// Farthest point sampling: starts at `start_index`, then repeatedly picks
/// the point maximizing the minimum distance to everything selected so far.
pub fn fps(points: &[Point3], n: usize, start_index: usize) -> Result<Vec<usize>> {
    if n > points.len() || n == 0 {
        return Err(Error::InvalidCount {
            requested: n,
            available: points.len(),
        });
    }
    if start_index >= points.len() {
        return Err(Error::InvalidCount {
            requested: start_index,
            available: points.len(),
        });
    }
    let mut selected = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut last = start_index;
    selected.push(start_index);
    while selected.len() < n {
        let anchor = points[last];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, anchor);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            // strict > keeps the earliest index on ties
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        selected.push(best);
        last = best;
    }
    Ok(selected)
}

/// Brute-force k-nearest neighbors, ascending by distance, ties broken by
/// smaller index.
pub fn knn(points: &[Point3], query: Point3, k: usize) -> Result<Vec<usize>> {
    if k > points.len() || k == 0 {
        return Err(Error::InvalidCount {
            requested: k,
            available: points.len(),
        });
    }
    let mut keyed: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| (dist2(p, query), i))
        .collect();
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        keyed.truncate(k);
    }
    keyed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Quantizes a coordinate in [0,1] (clamped) to `bits` bits, round to
/// nearest.
#[inline]
fn quantize(c: f64, bits: u32) -> u64 {
    let max = ((1u64 << bits) - 1) as f64;
    let clamped = c.clamp(0.0, 1.0);
    (clamped * max + 0.5).floor() as u64
}

/// Maps a unit-sphere-normalized coordinate ([-1,1] per axis) onto the
/// unit cube expected by [`morton_encode`].
#[inline]
pub fn normalized_to_unit_cube(p: Point3) -> Point3 {
    [(p[0] + 1.0) / 2.0, (p[1] + 1.0) / 2.0, (p[2] + 1.0) / 2.0]
}

/// Morton (z-order) code: bit j of x lands at code bit 3j, y at 3j+1 and z
/// at 3j+2. With 21 bits per axis the code fits in 63 bits.
pub fn morton_encode(point: Point3, bits_per_axis: u32) -> u64 {
    debug_assert!((1..=21).contains(&bits_per_axis));
    let qx = quantize(point[0], bits_per_axis);
    let qy = quantize(point[1], bits_per_axis);
    let qz = quantize(point[2], bits_per_axis);
    let mut code = 0u64;
    for j in 0..bits_per_axis {
        code |= ((qx >> j) & 1) << (3 * j);
        code |= ((qy >> j) & 1) << (3 * j + 1);
        code |= ((qz >> j) & 1) << (3 * j + 2);
    }
    code
}

/// Returns `indices` reordered by ascending Morton code; equal codes keep
/// ascending original-index order. Points are expected in the unit cube.
pub fn morton_sort(points: &[Point3], indices: &[usize], bits_per_axis: u32) -> Vec<usize> {
    let mut order: Vec<usize> = indices.to_vec();
    order.sort_by(|&a, &b| {
        morton_encode(points[a], bits_per_axis)
            .cmp(&morton_encode(points[b], bits_per_axis))
            .then(a.cmp(&b))
    });
    order
}

/// [`morton_sort`] for unit-sphere-normalized points: remaps each axis from
/// [-1,1] onto [0,1] before encoding.
pub fn morton_sort_normalized(
    points: &[Point3],
    indices: &[usize],
    bits_per_axis: u32,
) -> Vec<usize> {
    let mut order: Vec<usize> = indices.to_vec();
    order.sort_by(|&a, &b| {
        morton_encode(normalized_to_unit_cube(points[a]), bits_per_axis)
            .cmp(&morton_encode(
                normalized_to_unit_cube(points[b]),
                bits_per_axis,
            ))
            .then(a.cmp(&b))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(lo..hi),
                    rng.random_range(lo..hi),
                    rng.random_range(lo..hi),
                ]
            })
            .collect()
    }

    /// O(n*N) oracle: recompute the max-min selection from scratch at every
    /// step.
    fn fps_oracle(points: &[Point3], n: usize, start: usize) -> Vec<usize> {
        let mut selected = vec![start];
        while selected.len() < n {
            let mut best = usize::MAX;
            let mut best_d2 = f64::NEG_INFINITY;
            for i in 0..points.len() {
                let d = selected
                    .iter()
                    .map(|&s| dist2(points[i], points[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d2 {
                    best_d2 = d;
                    best = i;
                }
            }
            selected.push(best);
        }
        selected
    }

    /// Exhaustive-scan oracle keeping (distance, index) pairs.
    fn knn_oracle(points: &[Point3], query: Point3, k: usize) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (dist2(p, query).sqrt(), i))
            .collect();
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pairs[..k].iter().map(|&(_, i)| i).collect()
    }

    /// Bit-string comparator oracle: build the interleaved bit string
    /// most-significant-first and compare lexicographically.
    fn morton_bits_msb_first(p: Point3, bits: u32) -> Vec<u8> {
        let q = [
            quantize(p[0], bits),
            quantize(p[1], bits),
            quantize(p[2], bits),
        ];
        let mut s = Vec::with_capacity(3 * bits as usize);
        for j in (0..bits).rev() {
            // code bit 3j+2 is z, 3j+1 is y, 3j is x; msb-first emits z,y,x
            s.push(((q[2] >> j) & 1) as u8);
            s.push(((q[1] >> j) & 1) as u8);
            s.push(((q[0] >> j) & 1) as u8);
        }
        s
    }

    #[test]
    fn fps_exhaustion_returns_all_indices() {
        let pts = random_points(12, 1, -1.0, 1.0);
        let got = fps(&pts, 12, 0).unwrap();
        let mut sorted = got.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        assert_eq!(got[0], 0);
    }

    #[test]
    fn fps_three_point_hand_case() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_matches_bruteforce_oracle() {
        for trial in 0..20 {
            let pts = random_points(64, 100 + trial, -2.0, 2.0);
            assert_eq!(fps(&pts, 8, 0).unwrap(), fps_oracle(&pts, 8, 0));
        }
    }

    #[test]
    fn fps_rejects_oversized_n() {
        let pts = random_points(4, 2, 0.0, 1.0);
        assert!(matches!(fps(&pts, 5, 0), Err(Error::InvalidCount { .. })));
    }

    #[test]
    fn knn_exhaustion_sorts_all_by_distance() {
        let pts = random_points(10, 3, -1.0, 1.0);
        let got = knn(&pts, [0.0, 0.0, 0.0], 10).unwrap();
        assert_eq!(got, knn_oracle(&pts, [0.0, 0.0, 0.0], 10));
    }

    #[test]
    fn knn_query_at_cloud_point() {
        let pts = vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [5.0, 5.0, 5.0]];
        assert_eq!(knn(&pts, [0.0, 0.0, 0.0], 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_matches_scan_oracle() {
        for trial in 0..20 {
            let pts = random_points(128, 200 + trial, -3.0, 3.0);
            let q = [0.1, -0.2, 0.3];
            assert_eq!(knn(&pts, q, 16).unwrap(), knn_oracle(&pts, q, 16));
        }
    }

    #[test]
    fn knn_tie_break_prefers_smaller_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        // points 0 and 1 are equidistant from the origin
        assert_eq!(knn(&pts, [0.0, 0.0, 0.0], 3).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn morton_zero_and_ones() {
        assert_eq!(morton_encode([0.0, 0.0, 0.0], 21), 0);
        assert_eq!(morton_encode([1.0, 1.0, 1.0], 2), 63);
    }

    #[test]
    fn morton_sort_matches_bitstring_comparator() {
        let pts = random_points(256, 42, 0.0, 1.0);
        let idx: Vec<usize> = (0..pts.len()).collect();
        let got = morton_sort(&pts, &idx, 10);

        let mut expect = idx;
        expect.sort_by(|&a, &b| {
            morton_bits_msb_first(pts[a], 10)
                .cmp(&morton_bits_msb_first(pts[b], 10))
                .then(a.cmp(&b))
        });
        assert_eq!(got, expect);
    }

    #[test]
    fn morton_sort_is_idempotent() {
        let pts = random_points(64, 5, 0.0, 1.0);
        let idx: Vec<usize> = (0..pts.len()).collect();
        let once = morton_sort(&pts, &idx, 21);
        let twice = morton_sort(&pts, &once, 21);
        assert_eq!(once, twice);
    }

    #[test]
    fn morton_clamps_out_of_range() {
        assert_eq!(
            morton_encode([-3.0, 2.0, 0.0], 4),
            morton_encode([0.0, 1.0, 0.0], 4)
        );
    }
}
