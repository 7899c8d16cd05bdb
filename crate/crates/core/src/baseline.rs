//! Classical matcher pipeline: mutual nearest-neighbor descriptor matching,
//! normalized 8-point essential-matrix estimation, RANSAC with Sampson
//! scoring, cheirality-voted pose decomposition, and Orthogonal Procrustes
//! for depth-assisted alignment.
//!
//! Conventions follow [`crate::geometry`]: `E = [t]x R` with
//! `x2^T E x1 = 0` on calibrated correspondences, and the recovered pose
//! maps view-1 coordinates into view 2.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, EssentialMatrix, Point3Set, Pose};
use crate::keypoints::KeypointSet;
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("need at least 8 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("degenerate configuration: the essential-matrix nullspace is not unique")]
    DegenerateConfiguration,
    #[error("cheirality vote tied between candidate decompositions")]
    CheiralityAmbiguous,
    #[error("no RANSAC consensus: best inlier set below 8")]
    NoConsensus,
    #[error("degenerate geometry: need >= 3 non-collinear points")]
    DegenerateGeometry,
}

/// Index pairs into two keypoint sets with a per-match score (cosine
/// similarity).
#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    pub max_iters: usize,
    /// Sampson distance threshold in calibrated units.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iters: 1000,
            inlier_threshold: 1e-3,
            confidence: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RansacStats {
    pub iterations: usize,
    pub inliers: usize,
    pub elapsed: Duration,
}

/// Mutual nearest neighbors by cosine distance with Lowe's ratio test
/// (`best < ratio * second_best`, strict). Masked rows never match.
pub fn match_mutual_nn(kps1: &KeypointSet, kps2: &KeypointSet, ratio: f64) -> MatchSet {
    assert_eq!(
        kps1.descriptor_dim(),
        kps2.descriptor_dim(),
        "descriptor widths must agree"
    );
    let valid1: Vec<usize> = (0..kps1.len()).filter(|&i| kps1.valid_mask[i]).collect();
    let valid2: Vec<usize> = (0..kps2.len()).filter(|&j| kps2.valid_mask[j]).collect();
    if valid1.is_empty() || valid2.is_empty() {
        return MatchSet::default();
    }

    // Cosine distance = 1 - cos; descriptors are unit norm so cos is a dot.
    // Clamped at zero: identical descriptors can overshoot dot = 1 by an ulp.
    let dist = |i: usize, j: usize| -> f64 {
        let dot: f64 = kps1
            .descriptors
            .row(i)
            .iter()
            .zip(kps2.descriptors.row(j))
            .map(|(a, b)| a * b)
            .sum();
        (1.0 - dot).max(0.0)
    };

    // Best and second-best over image 2 for each keypoint of image 1.
    let mut fwd: Vec<(usize, f64, f64)> = Vec::with_capacity(valid1.len());
    for &i in &valid1 {
        let mut best = usize::MAX;
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        for &j in &valid2 {
            let d = dist(i, j);
            if d < d1 {
                d2 = d1;
                d1 = d;
                best = j;
            } else if d < d2 {
                d2 = d;
            }
        }
        fwd.push((best, d1, d2));
    }
    // Best over image 1 for each keypoint of image 2.
    let mut rev = vec![(usize::MAX, f64::INFINITY); kps2.len()];
    for &j in &valid2 {
        for &i in &valid1 {
            let d = dist(i, j);
            if d < rev[j].1 {
                rev[j] = (i, d);
            }
        }
    }

    let mut out = MatchSet::default();
    for (idx, &i) in valid1.iter().enumerate() {
        let (j, d1, d2) = fwd[idx];
        if j == usize::MAX || rev[j].0 != i {
            continue;
        }
        if d1 < ratio * d2 {
            out.pairs.push((i, j));
            out.scores.push(1.0 - d1);
        }
    }
    out
}

/// Calibrated homogeneous coordinates for the matched pairs.
fn calibrated_pairs(
    matches: &MatchSet,
    kps1: &KeypointSet,
    kps2: &KeypointSet,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
    let mut x1 = Vec::with_capacity(matches.len());
    let mut x2 = Vec::with_capacity(matches.len());
    for &(i, j) in &matches.pairs {
        let c1 = k1.calibrate_point(kps1.coords[i]);
        let c2 = k2.calibrate_point(kps2.coords[j]);
        x1.push(Vector2::new(c1[0], c1[1]));
        x2.push(Vector2::new(c2[0], c2[1]));
    }
    (x1, x2)
}

/// Hartley normalization: translate the centroid to the origin and scale the
/// mean distance to sqrt(2). Returns the transform `T` so `x_hat = T x`.
fn hartley_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for p in pts {
        cx += p.x;
        cy += p.y;
    }
    cx /= n;
    cy /= n;
    let mut mean_dist = 0.0;
    for p in pts {
        mean_dist += ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt();
    }
    mean_dist /= n;
    let s = if mean_dist > 1e-12 {
        2.0_f64.sqrt() / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn eight_point_calibrated(
    x1: &[Vector2<f64>],
    x2: &[Vector2<f64>],
) -> Result<EssentialMatrix, BaselineError> {
    let n = x1.len();
    if n < 8 {
        return Err(BaselineError::InsufficientMatches(n));
    }
    let t1 = hartley_transform(x1);
    let t2 = hartley_transform(x2);
    let norm = |t: &Matrix3<f64>, p: &Vector2<f64>| {
        let v = t * Vector3::new(p.x, p.y, 1.0);
        Vector3::new(v.x, v.y, 1.0)
    };

    // Rows encode x2_hat^T E_hat x1_hat = 0 with E flattened row-major.
    let mut a = DMatrix::<f64>::zeros(n, 9);
    for r in 0..n {
        let p1 = norm(&t1, &x1[r]);
        let p2 = norm(&t2, &x2[r]);
        for (ri, &u2) in [p2.x, p2.y, p2.z].iter().enumerate() {
            for (ci, &u1) in [p1.x, p1.y, p1.z].iter().enumerate() {
                a[(r, 3 * ri + ci)] = u2 * u1;
            }
        }
    }

    // Nullspace of A via the eigenvector of A^T A with smallest eigenvalue.
    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let min_idx = order[0];
    // A second near-zero eigenvalue means the solution is not unique
    // (degenerate point configuration).
    let lam_max = eig.eigenvalues[order[8]].max(1e-300);
    if eig.eigenvalues[order[1]] / lam_max < 1e-16 {
        return Err(BaselineError::DegenerateConfiguration);
    }
    let e_vec = eig.eigenvectors.column(min_idx);
    let e_hat = Matrix3::new(
        e_vec[0], e_vec[1], e_vec[2], e_vec[3], e_vec[4], e_vec[5], e_vec[6], e_vec[7], e_vec[8],
    );

    // Denormalize: x2^T (T2^T E_hat T1) x1 = 0.
    let e = t2.transpose() * e_hat * t1;

    // Project to the essential manifold: singular values (s, s, 0).
    let svd = e.svd(true, true);
    let u = svd.u.ok_or(BaselineError::DegenerateConfiguration)?;
    let vt = svd.v_t.ok_or(BaselineError::DegenerateConfiguration)?;
    let s = (svd.singular_values[0] + svd.singular_values[1]) / 2.0;
    let e = u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * vt;
    Ok(EssentialMatrix(e))
}

/// Normalized 8-point algorithm on calibrated coordinates, projected onto
/// the essential manifold.
pub fn eight_point(
    matches: &MatchSet,
    kps1: &KeypointSet,
    kps2: &KeypointSet,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<EssentialMatrix, BaselineError> {
    let (x1, x2) = calibrated_pairs(matches, kps1, kps2, k1, k2);
    eight_point_calibrated(&x1, &x2)
}

/// Depths of a calibrated correspondence under candidate `(R, t)` by linear
/// two-ray triangulation of `z1 R x1 - z2 x2 = -t`.
fn triangulate_depths(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
) -> (f64, f64) {
    let d1 = r * Vector3::new(x1.x, x1.y, 1.0);
    let d2 = Vector3::new(x2.x, x2.y, 1.0);
    // Least squares for [z1, -z2] in columns [d1, d2].
    let a00 = d1.dot(&d1);
    let a01 = -d1.dot(&d2);
    let a11 = d2.dot(&d2);
    let b0 = -t.dot(&d1);
    let b1 = t.dot(&d2);
    let det = a00 * a11 - a01 * a01;
    if det.abs() < 1e-18 {
        return (0.0, 0.0);
    }
    let z1 = (b0 * a11 - a01 * b1) / det;
    let z2 = (a00 * b1 - a01 * b0) / det;
    (z1, z2)
}

fn decompose_calibrated(
    e: &EssentialMatrix,
    x1: &[Vector2<f64>],
    x2: &[Vector2<f64>],
) -> Result<Pose, BaselineError> {
    assert!(!x1.is_empty(), "cheirality vote needs at least one match");
    let svd = e.0.svd(true, true);
    let mut u = svd.u.ok_or(BaselineError::DegenerateConfiguration)?;
    let mut vt = svd.v_t.ok_or(BaselineError::DegenerateConfiguration)?;
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if vt.determinant() < 0.0 {
        vt.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    // The translation direction is the left null vector of E (t^T E = 0).
    // A cross product of E's columns recovers it with ~1e-15 relative
    // precision, an order or two better than the SVD's u3; fall back to u3
    // when the columns are too parallel to cross.
    let tu: Vector3<f64> = {
        let svd_dir: Vector3<f64> = u.column(2).into();
        let cols = [e.0.column(0), e.0.column(1), e.0.column(2)];
        let mut best = Vector3::zeros();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let c = cols[a].cross(&cols[b]);
            if c.norm() > best.norm() {
                best = c;
            }
        }
        if best.norm() < 1e-12 * e.0.norm().powi(2) {
            svd_dir
        } else {
            let dir = best / best.norm();
            if dir.dot(&svd_dir) < 0.0 {
                -dir
            } else {
                dir
            }
        }
    };

    let mut candidates: Vec<(usize, Pose)> = Vec::with_capacity(4);
    for r in [r1, r2] {
        for sign in [1.0, -1.0] {
            let t = tu * sign;
            let mut votes = 0;
            for (p1, p2) in x1.iter().zip(x2.iter()) {
                let (z1, z2) = triangulate_depths(&r, &t, p1, p2);
                if z1 > 0.0 && z2 > 0.0 {
                    votes += 1;
                }
            }
            candidates.push((votes, Pose { r, t: t / t.norm() }));
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0));
    if candidates[0].0 == 0 || candidates[0].0 == candidates[1].0 {
        return Err(BaselineError::CheiralityAmbiguous);
    }
    Ok(candidates[0].1)
}

/// Pick the `(R, t)` candidate with the most points at positive depth in
/// both views; the translation is returned unit-norm.
pub fn decompose_essential(
    e: &EssentialMatrix,
    matches: &MatchSet,
    kps1: &KeypointSet,
    kps2: &KeypointSet,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<Pose, BaselineError> {
    if matches.is_empty() {
        return Err(BaselineError::InsufficientMatches(0));
    }
    let (x1, x2) = calibrated_pairs(matches, kps1, kps2, k1, k2);
    decompose_calibrated(e, &x1, &x2)
}

/// First-order geometric (Sampson) distance of a calibrated correspondence.
fn sampson_distance(e: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> f64 {
    let p1 = Vector3::new(x1.x, x1.y, 1.0);
    let p2 = Vector3::new(x2.x, x2.y, 1.0);
    let ex1 = e * p1;
    let etx2 = e.transpose() * p2;
    let num = p2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

/// Robust essential-matrix estimation: 8-point hypotheses on random
/// samples, Sampson-distance inlier counting, adaptive termination at the
/// configured confidence, final refit on the best inlier set, then
/// cheirality decomposition. Deterministic given the seed.
pub fn ransac_essential(
    matches: &MatchSet,
    kps1: &KeypointSet,
    kps2: &KeypointSet,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<(Pose, Vec<bool>, RansacStats), BaselineError> {
    let n = matches.len();
    if n < 8 {
        return Err(BaselineError::InsufficientMatches(n));
    }
    let start = Instant::now();
    let (x1, x2) = calibrated_pairs(matches, kps1, kps2, k1, k2);
    let mut rng = Rng::from_seed(cfg.seed);

    // Best hypothesis by (inlier count, lowest mean residual, lowest
    // iteration index) - a deterministic total order.
    let mut best_count = 0usize;
    let mut best_mean = f64::INFINITY;
    let mut best_mask: Vec<bool> = Vec::new();
    let mut needed = cfg.max_iters;
    let mut iterations = 0usize;

    for iter in 0..cfg.max_iters {
        if iter >= needed {
            break;
        }
        iterations = iter + 1;
        let idx = rng.sample_distinct(n, 8);
        let s1: Vec<Vector2<f64>> = idx.iter().map(|&i| x1[i]).collect();
        let s2: Vec<Vector2<f64>> = idx.iter().map(|&i| x2[i]).collect();
        let Ok(e) = eight_point_calibrated(&s1, &s2) else {
            continue;
        };
        let mut count = 0usize;
        let mut mean = 0.0;
        let mut mask = vec![false; n];
        for i in 0..n {
            let d = sampson_distance(&e.0, &x1[i], &x2[i]);
            if d < cfg.inlier_threshold {
                count += 1;
                mean += d;
                mask[i] = true;
            }
        }
        if count == 0 {
            continue;
        }
        mean /= count as f64;
        if count > best_count || (count == best_count && mean < best_mean) {
            best_count = count;
            best_mean = mean;
            best_mask = mask;
            // Adaptive termination: iterations needed to hit an all-inlier
            // sample with the configured confidence.
            let w = count as f64 / n as f64;
            let p_all = w.powi(8);
            if p_all >= 1.0 - 1e-12 {
                needed = iterations;
            } else if p_all > 1e-12 {
                let est = (1.0 - cfg.confidence).ln() / (1.0 - p_all).ln();
                needed = est.ceil().min(cfg.max_iters as f64) as usize;
            }
        }
    }

    if best_count < 8 {
        return Err(BaselineError::NoConsensus);
    }

    // Refit on the inlier set, recount for the returned mask, decompose.
    let in1: Vec<Vector2<f64>> = (0..n).filter(|&i| best_mask[i]).map(|i| x1[i]).collect();
    let in2: Vec<Vector2<f64>> = (0..n).filter(|&i| best_mask[i]).map(|i| x2[i]).collect();
    let e = eight_point_calibrated(&in1, &in2)?;
    let mut final_mask = vec![false; n];
    for i in 0..n {
        final_mask[i] = sampson_distance(&e.0, &x1[i], &x2[i]) < cfg.inlier_threshold;
    }
    let f1: Vec<Vector2<f64>> = (0..n).filter(|&i| final_mask[i]).map(|i| x1[i]).collect();
    let f2: Vec<Vector2<f64>> = (0..n).filter(|&i| final_mask[i]).map(|i| x2[i]).collect();
    if f1.len() < 8 {
        return Err(BaselineError::NoConsensus);
    }
    let pose = decompose_calibrated(&e, &f1, &f2)?;
    let inliers = final_mask.iter().filter(|&&v| v).count();
    Ok((
        pose,
        final_mask,
        RansacStats {
            iterations,
            inliers,
            elapsed: start.elapsed(),
        },
    ))
}

/// Least-squares rigid transform `(R, t)` minimizing `sum ||R p1 + t - p2||^2`
/// (Kabsch with reflection correction).
pub fn procrustes_pose(p1: &Point3Set, p2: &Point3Set) -> Result<Pose, BaselineError> {
    let n = p1.len();
    if n < 3 || n != p2.len() {
        return Err(BaselineError::DegenerateGeometry);
    }
    let mut c1 = Vector3::zeros();
    let mut c2 = Vector3::zeros();
    for (a, b) in p1.points.iter().zip(p2.points.iter()) {
        c1 += a;
        c2 += b;
    }
    c1 /= n as f64;
    c2 /= n as f64;

    let mut h = Matrix3::zeros();
    let mut spread = 0.0;
    for (a, b) in p1.points.iter().zip(p2.points.iter()) {
        let da = a - c1;
        let db = b - c2;
        h += db * da.transpose();
        spread += da.norm_squared();
    }
    if spread < 1e-20 {
        return Err(BaselineError::DegenerateGeometry);
    }
    let svd = h.svd(true, true);
    // Collinear sources leave the rotation about the line unconstrained.
    if svd.singular_values[1] < 1e-9 * svd.singular_values[0].max(1e-300) {
        return Err(BaselineError::DegenerateGeometry);
    }
    let u = svd.u.ok_or(BaselineError::DegenerateGeometry)?;
    let vt = svd.v_t.ok_or(BaselineError::DegenerateGeometry)?;
    let d = (u * vt).determinant();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * vt;
    let t = c2 - r * c1;
    Ok(Pose { r, t })
}
