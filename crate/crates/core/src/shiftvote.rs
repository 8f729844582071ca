//! Dominant-shift estimation and overlap masks via similarity voting.
//!
//! Token-level cosine similarities (temperature scaled) vote for discrete
//! displacement hypotheses; the winning displacement gates a mutual
//! nearest neighbor filter that yields binary overlap masks for both
//! images. Everything here is plain array code: masks are constants to
//! the learning graph.

use crate::error::{Error, Result};
use crate::scenegen::Rect;
use crate::tape::Elem;
use ndarray::Array2;
use std::collections::BTreeMap;

/// Temperature initialization shared with the contrastive losses.
pub const DEFAULT_TAU: f64 = 0.07;
/// Direction-window radius for geometric consistency filtering.
pub const DEFAULT_RADIUS: i64 = 2;
/// Pre-temperature cosine threshold for keeping a correspondence.
pub const DEFAULT_THETA: f64 = 0.2;
/// Radius value that disables the direction window entirely.
pub const NO_WINDOW: i64 = i64::MAX;

/// Temperature-scaled pairwise similarities between two token lists.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    /// values[i][j] = cos(bef_i, aft_j) / tau.
    pub values: Array2<f64>,
    pub tau: f64,
}

/// Everything the voting stage produces for one image pair.
#[derive(Debug, Clone)]
pub struct VoteResult {
    /// Score accumulated per displacement hypothesis.
    pub vote_map: BTreeMap<(i64, i64), f64>,
    pub dominant_shift: (i64, i64),
    /// 1 where the before-image patch belongs to a kept correspondence.
    pub mask_bef: Vec<u8>,
    pub mask_aft: Vec<u8>,
    /// Kept (i, j, s_ij) correspondences.
    pub kept_pairs: Vec<(usize, usize, f64)>,
}

fn normalized_rows<F: Elem>(x: &Array2<F>) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let mut norm = 0.0;
        for j in 0..d {
            let v = x[[i, j]].as_f64();
            norm += v * v;
        }
        let norm = norm.sqrt();
        if norm < 1e-12 {
            return Err(Error::Normalization { row: i });
        }
        for j in 0..d {
            out[[i, j]] = x[[i, j]].as_f64() / norm;
        }
    }
    Ok(out)
}

/// l2-normalize both token lists and compute scaled similarities.
pub fn pairwise_similarity<F: Elem>(
    bef: &Array2<F>,
    aft: &Array2<F>,
    tau: f64,
) -> Result<SimilarityMatrix> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if bef.dim() != aft.dim() {
        return Err(Error::Dimension(format!(
            "feature grids differ: {:?} vs {:?}",
            bef.dim(),
            aft.dim()
        )));
    }
    let nb = normalized_rows(bef)?;
    let na = normalized_rows(aft)?;
    let values = nb.dot(&na.t()).mapv(|x| x / tau);
    Ok(SimilarityMatrix { values, tau })
}

fn grid_pos(index: usize, cols: usize) -> (i64, i64) {
    ((index / cols) as i64, (index % cols) as i64)
}

/// Row-wise argmax, ties resolved toward the smallest column index.
fn argmax_rows(values: &Array2<f64>) -> Vec<usize> {
    values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_grid(sim: &SimilarityMatrix, grid_shape: (usize, usize)) -> Result<()> {
    let n = sim.values.nrows();
    if n == 0 {
        return Err(Error::Dimension("empty similarity matrix".into()));
    }
    if n != grid_shape.0 * grid_shape.1 {
        return Err(Error::Dimension(format!(
            "{n} tokens do not fill a {}x{} grid",
            grid_shape.0, grid_shape.1
        )));
    }
    Ok(())
}

/// Accumulate displacement votes (each token contributes only through its
/// best counterpart, clamped at zero) and pick the dominant shift.
///
/// Ties break toward the smallest l1 norm, then row-major order.
pub fn vote(
    sim: &SimilarityMatrix,
    grid_shape: (usize, usize),
) -> Result<(BTreeMap<(i64, i64), f64>, (i64, i64))> {
    check_grid(sim, grid_shape)?;
    let cols = grid_shape.1;
    let mut map: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    map.insert((0, 0), 0.0);
    for (i, &j) in argmax_rows(&sim.values).iter().enumerate() {
        let s = sim.values[[i, j]].max(0.0);
        let (pi, ci) = grid_pos(i, cols);
        let (pj, cj) = grid_pos(j, cols);
        *map.entry((pj - pi, cj - ci)).or_insert(0.0) += s;
    }
    let mut best = (0i64, 0i64);
    let mut best_score = f64::NEG_INFINITY;
    // BTreeMap iterates in row-major order, so on full ties the first
    // candidate at the smallest l1 norm wins.
    for (&delta, &score) in &map {
        let better = score > best_score
            || (score == best_score
                && delta.0.abs() + delta.1.abs() < best.0.abs() + best.1.abs());
        if better {
            best = delta;
            best_score = score;
        }
    }
    Ok((map, best))
}

/// Filter correspondences to mutual nearest neighbors above the cosine
/// threshold and inside the direction window around `dominant_shift`,
/// then project them to binary masks.
pub fn build_masks(
    sim: &SimilarityMatrix,
    dominant_shift: (i64, i64),
    radius: i64,
    theta: f64,
    grid_shape: (usize, usize),
) -> Result<VoteResult> {
    if radius < 0 {
        return Err(Error::Config(format!("radius must be nonnegative, got {radius}")));
    }
    if !(-1.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("theta {theta} outside [-1, 1]")));
    }
    check_grid(sim, grid_shape)?;
    let (vote_map, _) = vote(sim, grid_shape)?;
    let cols = grid_shape.1;
    let n = sim.values.nrows();

    let fwd = argmax_rows(&sim.values);
    let rev = argmax_rows(&sim.values.t().to_owned());

    let mut mask_bef = vec![0u8; n];
    let mut mask_aft = vec![0u8; n];
    let mut kept_pairs = Vec::new();
    for (i, &j) in fwd.iter().enumerate() {
        if rev[j] != i {
            continue;
        }
        let cosine = sim.values[[i, j]] * sim.tau;
        if cosine < theta {
            continue;
        }
        let (pi, ci) = grid_pos(i, cols);
        let (pj, cj) = grid_pos(j, cols);
        let dy = pj - pi - dominant_shift.0;
        let dx = cj - ci - dominant_shift.1;
        if dy.abs().max(dx.abs()) > radius {
            continue;
        }
        mask_bef[i] = 1;
        mask_aft[j] = 1;
        kept_pairs.push((i, j, sim.values[[i, j]]));
    }

    Ok(VoteResult {
        vote_map,
        dominant_shift,
        mask_bef,
        mask_aft,
        kept_pairs,
    })
}

/// Full voting pipeline: similarities, dominant shift, masks.
pub fn estimate<F: Elem>(
    bef: &Array2<F>,
    aft: &Array2<F>,
    tau: f64,
    radius: i64,
    theta: f64,
    grid_shape: (usize, usize),
) -> Result<VoteResult> {
    let sim = pairwise_similarity(bef, aft, tau)?;
    let (_, dominant) = vote(&sim, grid_shape)?;
    build_masks(&sim, dominant, radius, theta, grid_shape)
}

/// Intersection-over-union between a flat binary mask and a rectangle on
/// the same grid.
pub fn mask_iou(mask: &[u8], rect: &Rect, cols: usize) -> f64 {
    let mut inter = 0usize;
    let mut mask_count = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        if m == 1 {
            mask_count += 1;
            if rect.contains(r, c) {
                inter += 1;
            }
        }
    }
    let union = mask_count + rect.area() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{self, GenConfig};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn distinct_grid(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            let mut norm = 0.0;
            for j in 0..d {
                let v = f64::std_normal(rng);
                x[[i, j]] = v;
                norm += v * v;
            }
            let norm = norm.sqrt();
            for j in 0..d {
                x[[i, j]] /= norm;
            }
        }
        x
    }

    /// Shift grid content down/right by (dy, dx), filling exposed cells
    /// with fresh random rows.
    fn shift_grid(
        rng: &mut ChaCha8Rng,
        x: &Array2<f64>,
        rows: usize,
        cols: usize,
        shift: (i64, i64),
    ) -> Array2<f64> {
        let d = x.ncols();
        let mut out = Array2::zeros((rows * cols, d));
        for r in 0..rows {
            for c in 0..cols {
                let br = r as i64 - shift.0;
                let bc = c as i64 - shift.1;
                if br >= 0 && (br as usize) < rows && bc >= 0 && (bc as usize) < cols {
                    let src = br as usize * cols + bc as usize;
                    out.row_mut(r * cols + c).assign(&x.row(src));
                } else {
                    let fresh = distinct_grid(rng, 1, d);
                    out.row_mut(r * cols + c).assign(&fresh.row(0));
                }
            }
        }
        out
    }

    #[test]
    fn identical_unit_grids_have_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = distinct_grid(&mut rng, 9, 16);
        let sim = pairwise_similarity(&x, &x, 1.0).unwrap();
        for i in 0..9 {
            assert!((sim.values[[i, i]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_matches_hand_computation() {
        let bef = array![[3.0, 4.0], [0.0, 2.0]];
        let aft = array![[1.0, 0.0], [1.0, 1.0]];
        let sim = pairwise_similarity(&bef, &aft, 0.5).unwrap();
        let expect = [
            [0.6 / 0.5, (1.4 / 2.0_f64.sqrt()) / 0.5],
            [0.0, (1.0 / 2.0_f64.sqrt()) / 0.5],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (sim.values[[i, j]] - expect[i][j]).abs() < 1e-12,
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn similarity_bounded_by_inverse_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = distinct_grid(&mut rng, 12, 8);
        let b = distinct_grid(&mut rng, 12, 8);
        let sim = pairwise_similarity(&a, &b, DEFAULT_TAU).unwrap();
        for &v in sim.values.iter() {
            assert!(v.abs() <= 1.0 / DEFAULT_TAU + 1e-9);
        }
    }

    #[test]
    fn zero_norm_row_is_rejected_with_its_index() {
        let mut bef = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let aft = bef.clone();
        match pairwise_similarity(&bef, &aft, 1.0) {
            Err(Error::Normalization { row: 1 }) => {}
            other => panic!("expected normalization error, got {other:?}"),
        }
        bef[[1, 0]] = 1.0;
        assert!(pairwise_similarity(&bef, &aft, 0.0).is_err());
    }

    #[test]
    fn identity_alignment_votes_n_over_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = distinct_grid(&mut rng, 16, 32);
        let sim = pairwise_similarity(&x, &x, 1.0).unwrap();
        let (map, dominant) = vote(&sim, (4, 4)).unwrap();
        assert_eq!(dominant, (0, 0));
        assert!((map[&(0, 0)] - 16.0).abs() < 1e-9);
        for (&delta, &score) in &map {
            if delta != (0, 0) {
                assert!(score < map[&(0, 0)]);
            }
        }
    }

    #[test]
    fn planted_shift_wins_and_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bef = distinct_grid(&mut rng, 16, 32);
        let aft = shift_grid(&mut rng, &bef, 4, 4, (1, 0));
        let sim = pairwise_similarity(&bef, &aft, DEFAULT_TAU).unwrap();
        let (map, dominant) = vote(&sim, (4, 4)).unwrap();
        assert_eq!(dominant, (1, 0));

        // Independent enumeration over all displacements in [-3, 3]^2.
        let fwd: Vec<usize> = (0..16)
            .map(|i| {
                (0..16)
                    .max_by(|&a, &b| {
                        sim.values[[i, a]]
                            .partial_cmp(&sim.values[[i, b]])
                            .unwrap()
                            // prefer the smaller index on exact ties
                            .then(b.cmp(&a))
                    })
                    .unwrap()
            })
            .collect();
        let mut best = ((0i64, 0i64), f64::NEG_INFINITY);
        for dy in -3..=3i64 {
            for dx in -3..=3i64 {
                let mut s = 0.0;
                for (i, &j) in fwd.iter().enumerate() {
                    let (pi, ci) = ((i / 4) as i64, (i % 4) as i64);
                    let (pj, cj) = ((j / 4) as i64, (j % 4) as i64);
                    if (pj - pi, cj - ci) == (dy, dx) {
                        s += sim.values[[i, j]].max(0.0);
                    }
                }
                if s > best.1 {
                    best = ((dy, dx), s);
                }
                if s > 0.0 {
                    assert!(
                        (map.get(&(dy, dx)).copied().unwrap_or(0.0) - s).abs() < 1e-9,
                        "S({dy},{dx}) mismatch"
                    );
                }
            }
        }
        assert_eq!(best.0, dominant);
    }

    #[test]
    fn all_negative_similarities_fall_back_to_zero_shift() {
        // Opposite vectors: every cosine is -1.
        let bef = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let aft = array![[-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]];
        let sim = pairwise_similarity(&bef, &aft, 1.0).unwrap();
        let (map, dominant) = vote(&sim, (2, 2)).unwrap();
        assert_eq!(dominant, (0, 0));
        for &score in map.values() {
            assert_eq!(score, 0.0);
        }
    }

    #[test]
    fn vote_argmax_is_invariant_to_tau_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bef = distinct_grid(&mut rng, 16, 16);
        let aft = shift_grid(&mut rng, &bef, 4, 4, (0, -1));
        for tau in [0.05, 0.07, 0.5, 1.0, 3.0] {
            let sim = pairwise_similarity(&bef, &aft, tau).unwrap();
            let (_, dominant) = vote(&sim, (4, 4)).unwrap();
            assert_eq!(dominant, (0, -1), "tau {tau}");
        }
    }

    #[test]
    fn swapping_images_negates_the_dominant_shift() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bef = distinct_grid(&mut rng, 36, 24);
            let dy = (seed % 3) as i64 - 1;
            let dx = (seed % 5) as i64 - 2;
            let aft = shift_grid(&mut rng, &bef, 6, 6, (dy, dx));
            let s1 = pairwise_similarity(&bef, &aft, DEFAULT_TAU).unwrap();
            let s2 = pairwise_similarity(&aft, &bef, DEFAULT_TAU).unwrap();
            let (_, d1) = vote(&s1, (6, 6)).unwrap();
            let (_, d2) = vote(&s2, (6, 6)).unwrap();
            assert_eq!(d1, (dy, dx), "seed {seed}");
            assert_eq!(d2, (-dy, -dx), "seed {seed}");
        }
    }

    #[test]
    fn identical_grids_keep_every_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = distinct_grid(&mut rng, 16, 32);
        let result = estimate(&x, &x, DEFAULT_TAU, DEFAULT_RADIUS, 0.2, (4, 4)).unwrap();
        assert_eq!(result.dominant_shift, (0, 0));
        assert!(result.mask_bef.iter().all(|&m| m == 1));
        assert!(result.mask_aft.iter().all(|&m| m == 1));
    }

    #[test]
    fn mask_popcounts_match_kept_pairs() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bef = distinct_grid(&mut rng, 36, 16);
            let aft = shift_grid(&mut rng, &bef, 6, 6, (1, 1));
            let res = estimate(&bef, &aft, DEFAULT_TAU, DEFAULT_RADIUS, 0.2, (6, 6)).unwrap();
            let pb: usize = res.mask_bef.iter().map(|&m| m as usize).sum();
            let pa: usize = res.mask_aft.iter().map(|&m| m as usize).sum();
            assert_eq!(pb, res.kept_pairs.len());
            assert_eq!(pa, res.kept_pairs.len());
        }
    }

    #[test]
    fn kept_pairs_respect_the_direction_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bef = distinct_grid(&mut rng, 64, 16);
        let aft = shift_grid(&mut rng, &bef, 8, 8, (2, -1));
        let res = estimate(&bef, &aft, DEFAULT_TAU, DEFAULT_RADIUS, 0.2, (8, 8)).unwrap();
        for &(i, j, _) in &res.kept_pairs {
            let (pi, ci) = ((i / 8) as i64, (i % 8) as i64);
            let (pj, cj) = ((j / 8) as i64, (j % 8) as i64);
            let dy = pj - pi - res.dominant_shift.0;
            let dx = cj - ci - res.dominant_shift.1;
            assert!(dy.abs().max(dx.abs()) <= DEFAULT_RADIUS);
        }
    }

    #[test]
    fn planted_pair_masks_match_ground_truth_rectangle() {
        let config = GenConfig {
            max_shift: 2,
            num_changes: 2,
            forced_shift: Some((2, 1)),
            ..GenConfig::default()
        };
        let pair = scenegen::generate_pair(123, &config).unwrap();
        let (bef, aft) = scenegen::render_distinct::<f64>(&pair, 48, 0.1, 7).unwrap();
        let res = estimate(&bef, &aft, DEFAULT_TAU, DEFAULT_RADIUS, DEFAULT_THETA, (8, 8)).unwrap();
        assert_eq!(res.dominant_shift, pair.shift);
        let iou = mask_iou(&res.mask_bef, &pair.overlap_rect, 8);
        assert!(iou >= 0.9, "before-mask IoU {iou}");
        let aft_rect = scenegen::overlap_rect_after(8, 8, pair.shift);
        let iou_aft = mask_iou(&res.mask_aft, &aft_rect, 8);
        assert!(iou_aft >= 0.9, "after-mask IoU {iou_aft}");
    }

    #[test]
    fn configuration_errors_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = distinct_grid(&mut rng, 4, 8);
        let sim = pairwise_similarity(&x, &x, 1.0).unwrap();
        assert!(matches!(
            build_masks(&sim, (0, 0), -1, 0.2, (2, 2)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_masks(&sim, (0, 0), 2, 1.5, (2, 2)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            vote(&sim, (3, 2)),
            Err(Error::Dimension(_))
        ));
    }
}
