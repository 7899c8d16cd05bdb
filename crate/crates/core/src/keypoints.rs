//! Per-image keypoints and descriptors: a synthetic detector over 3D scenes,
//! prompt masking, padding, and the `KPTS v1` file format for externally
//! extracted keypoints.
//!
//! Prompts and padding operate by masking rather than deletion so batch
//! shapes stay fixed and padding invariance is exactly testable; sentinel
//! rows are finite (never NaN) and are excluded from attention and pooling by
//! the model.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Point3Set, Pose};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Identifiers at or above this value mark clutter detections.
pub const CLUTTER_ID_BASE: u64 = 1 << 63;

/// Which relative pose a pair encodes: camera motion through a static scene,
/// or object motion under a static camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    CameraToWorld,
    ObjectToCamera,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::CameraToWorld => write!(f, "camera_to_world"),
            Scenario::ObjectToCamera => write!(f, "object_to_camera"),
        }
    }
}

/// One training/evaluation record: keypoints and intrinsics for both views,
/// an optional object prompt on view 1, and the ground-truth relative pose
/// mapping view-1 coordinates into view 2.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub kps1: KeypointSet,
    pub kps2: KeypointSet,
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    pub prompt: Option<ObjectPrompt>,
    pub gt: Pose,
    pub scenario: Scenario,
}

/// Sentinel pixel coordinate for padded rows (finite so downstream math
/// stays NaN-free; masked out of every computation).
pub const PAD_COORD: [f64; 2] = [-1.0, -1.0];

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("no scene points visible in this view")]
    EmptyView,
    #[error("prompt excludes every keypoint")]
    NoKeypointsInPrompt,
    #[error("cannot pad {valid} valid keypoints into {requested} rows")]
    TooManyKeypoints { valid: usize, requested: usize },
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("descriptor width mismatch at line {line}: expected {expected}, got {got}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Detected keypoints for one image: pixel coordinates, unit-norm
/// descriptors, and a validity mask for prompt/padding bookkeeping.
///
/// `ids` carries synthetic scene-point provenance when available (clutter
/// rows get ids above [`CLUTTER_ID_BASE`]); it is test/oracle equipment and
/// is never serialized.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub coords: Vec<[f64; 2]>,
    pub descriptors: Tensor,
    pub valid_mask: Vec<bool>,
    pub ids: Option<Vec<u64>>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>, descriptors: Tensor, valid_mask: Vec<bool>) -> Self {
        assert_eq!(coords.len(), descriptors.rows());
        assert_eq!(coords.len(), valid_mask.len());
        KeypointSet {
            coords,
            descriptors,
            valid_mask,
            ids: None,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Drop masked rows entirely (used to cross-check masking against
    /// physical deletion).
    pub fn compact(&self) -> KeypointSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.valid_mask[i]).collect();
        let coords = keep.iter().map(|&i| self.coords[i]).collect();
        let mut desc = Tensor::zeros(keep.len(), self.descriptor_dim());
        for (row, &i) in keep.iter().enumerate() {
            desc.row_mut(row).copy_from_slice(self.descriptors.row(i));
        }
        KeypointSet {
            coords,
            descriptors: desc,
            valid_mask: vec![true; keep.len()],
            ids: self
                .ids
                .as_ref()
                .map(|ids| keep.iter().map(|&i| ids[i]).collect()),
        }
    }
}

/// Axis-aligned bounding box prompt identifying the target object in the
/// reference view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPrompt {
    pub top_left: [f64; 2],
    pub bottom_right: [f64; 2],
}

impl ObjectPrompt {
    pub fn new(top_left: [f64; 2], bottom_right: [f64; 2]) -> Self {
        assert!(
            top_left[0] < bottom_right[0] && top_left[1] < bottom_right[1],
            "prompt corners must be ordered"
        );
        ObjectPrompt {
            top_left,
            bottom_right,
        }
    }

    /// Closed-box containment: boundary keypoints are kept.
    #[inline]
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.top_left[0]
            && p[0] <= self.bottom_right[0]
            && p[1] >= self.top_left[1]
            && p[1] <= self.bottom_right[1]
    }
}

/// A 3D point cloud with one unit-norm base descriptor per point and named
/// point subsets (e.g. an object vs clutter).
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub points: Point3Set,
    /// Base descriptor per point, row i for point i; unit norm.
    pub descriptor_table: Tensor,
    pub object_subsets: Vec<(String, Vec<u64>)>,
}

impl SyntheticScene {
    /// Random cloud with `n` points and `dim`-wide descriptors; points are
    /// sampled in the frustum of a view at the origin (pixel box `size`,
    /// depth range `depth`).
    pub fn random_frustum(
        rng: &mut Rng,
        n: usize,
        dim: usize,
        k: &CameraIntrinsics,
        size: [usize; 2],
        depth: [f64; 2],
        margin: f64,
    ) -> Self {
        let mut points = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let u = rng.uniform(margin, size[0] as f64 - margin);
            let v = rng.uniform(margin, size[1] as f64 - margin);
            let z = rng.uniform(depth[0], depth[1]);
            let c = k.calibrate_point([u, v]);
            points.push(Vector3::new(c[0] * z, c[1] * z, z));
            ids.push(i as u64);
        }
        let mut table = Tensor::zeros(n, dim);
        for i in 0..n {
            table.row_mut(i).copy_from_slice(&rng.unit_vector(dim));
        }
        SyntheticScene {
            points: Point3Set::with_ids(points, ids),
            descriptor_table: table,
            object_subsets: Vec::new(),
        }
    }
}

/// Noise model for the synthetic detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorNoise {
    /// Std-dev of per-axis pixel jitter.
    pub sigma_px: f64,
    /// Std-dev of per-component descriptor perturbation (renormalized after).
    pub sigma_desc: f64,
    /// Clutter keypoints added, as a fraction of real detections.
    pub clutter_fraction: f64,
}

impl DetectorNoise {
    pub fn none() -> Self {
        DetectorNoise {
            sigma_px: 0.0,
            sigma_desc: 0.0,
            clutter_fraction: 0.0,
        }
    }
}

/// Project the scene through `pose`/`k`, keep points that land inside the
/// image at positive depth, apply pixel and descriptor noise, then append
/// clutter detections.
pub fn synthetic_detect(
    scene: &SyntheticScene,
    pose: &Pose,
    k: &CameraIntrinsics,
    image_size: [usize; 2],
    noise: &DetectorNoise,
    rng: &mut Rng,
) -> Result<KeypointSet, KeypointError> {
    assert!(image_size[0] > 0 && image_size[1] > 0);
    let (w, h) = (image_size[0] as f64, image_size[1] as f64);
    let dim = scene.descriptor_table.cols();

    let mut coords = Vec::new();
    let mut descs: Vec<f64> = Vec::new();
    let mut ids = Vec::new();
    for (i, p) in scene.points.points.iter().enumerate() {
        let x = pose.transform(p);
        if x.z < 1e-9 {
            continue;
        }
        let mut u = k.fx * (x.x / x.z) + k.cx;
        let mut v = k.fy * (x.y / x.z) + k.cy;
        if !(0.0..=w).contains(&u) || !(0.0..=h).contains(&v) {
            continue;
        }
        if noise.sigma_px > 0.0 {
            u = (u + rng.normal() * noise.sigma_px).clamp(0.0, w);
            v = (v + rng.normal() * noise.sigma_px).clamp(0.0, h);
        }
        coords.push([u, v]);
        let base = scene.descriptor_table.row(i);
        if noise.sigma_desc > 0.0 {
            let mut d: Vec<f64> = base
                .iter()
                .map(|&b| b + rng.normal() * noise.sigma_desc)
                .collect();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut d {
                *x /= norm;
            }
            descs.extend_from_slice(&d);
        } else {
            descs.extend_from_slice(base);
        }
        ids.push(scene.points.ids.as_ref().map_or(i as u64, |v| v[i]));
    }
    if coords.is_empty() {
        return Err(KeypointError::EmptyView);
    }

    let clutter = (noise.clutter_fraction * coords.len() as f64).round() as usize;
    for c in 0..clutter {
        coords.push([rng.uniform(0.0, w), rng.uniform(0.0, h)]);
        descs.extend_from_slice(&rng.unit_vector(dim));
        ids.push(CLUTTER_ID_BASE + c as u64);
    }

    let n = coords.len();
    let mut set = KeypointSet::new(coords, Tensor::from_vec(n, dim, descs), vec![true; n]);
    set.ids = Some(ids);
    Ok(set)
}

/// Mask keypoints outside the prompt box. Coordinates and descriptors are
/// untouched; only `valid_mask` changes.
pub fn apply_prompt(
    kps: &KeypointSet,
    prompt: &ObjectPrompt,
) -> Result<KeypointSet, KeypointError> {
    let mut out = kps.clone();
    for i in 0..out.len() {
        if out.valid_mask[i] && !prompt.contains(out.coords[i]) {
            out.valid_mask[i] = false;
        }
    }
    if out.valid_count() == 0 {
        return Err(KeypointError::NoKeypointsInPrompt);
    }
    Ok(out)
}

/// Compact the valid rows and pad with masked sentinel rows to exactly `n`.
pub fn pad_to(kps: &KeypointSet, n: usize) -> Result<KeypointSet, KeypointError> {
    let compacted = kps.compact();
    if compacted.len() > n {
        return Err(KeypointError::TooManyKeypoints {
            valid: compacted.len(),
            requested: n,
        });
    }
    let dim = compacted.descriptor_dim();
    let mut coords = compacted.coords;
    let mut desc = Tensor::zeros(n, dim);
    for (i, _) in coords.iter().enumerate() {
        desc.row_mut(i)
            .copy_from_slice(compacted.descriptors.row(i));
    }
    let valid = coords.len();
    coords.resize(n, PAD_COORD);
    let mut mask = vec![true; valid];
    mask.resize(n, false);
    let ids = compacted.ids.map(|mut v| {
        v.resize(n, u64::MAX);
        v
    });
    let mut out = KeypointSet::new(coords, desc, mask);
    out.ids = ids;
    Ok(out)
}

/// Write the valid rows of a keypoint set in `KPTS v1` format.
pub fn save_keypoint_file(kps: &KeypointSet, path: &Path) -> Result<(), KeypointError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "KPTS v1 n={} d={}",
        kps.valid_count(),
        kps.descriptor_dim()
    )?;
    for i in 0..kps.len() {
        if !kps.valid_mask[i] {
            continue;
        }
        write!(f, "{} {}", kps.coords[i][0], kps.coords[i][1])?;
        for v in kps.descriptors.row(i) {
            write!(f, " {v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

fn parse_header_kv(tok: &str, key: &str, line: usize) -> Result<usize, KeypointError> {
    tok.strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| KeypointError::ParseError {
            line,
            msg: format!("bad header field {tok:?}, expected {key}=<int>"),
        })
}

/// Load a `KPTS v1` file. Descriptors are renormalized to unit length; when
/// the header carries `orig_w/orig_h/det_w/det_h`, coordinates are rescaled
/// from the detection resolution back to the original resolution.
pub fn load_keypoint_file(
    path: &Path,
    expected_d: Option<usize>,
) -> Result<KeypointSet, KeypointError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(KeypointError::ParseError {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() < 4 || toks[0] != "KPTS" || toks[1] != "v1" {
        return Err(KeypointError::ParseError {
            line: 1,
            msg: format!("bad header {header:?}"),
        });
    }
    let n = parse_header_kv(toks[2], "n", 1)?;
    let d = parse_header_kv(toks[3], "d", 1)?;
    if let Some(exp) = expected_d {
        if d != exp {
            return Err(KeypointError::DimensionMismatch {
                line: 1,
                expected: exp,
                got: d,
            });
        }
    }
    // Optional resolution metadata for the rescale-to-original step.
    let mut scale = [1.0, 1.0];
    if toks.len() > 4 {
        if toks.len() != 8 {
            return Err(KeypointError::ParseError {
                line: 1,
                msg: "expected orig_w= orig_h= det_w= det_h= after n/d".into(),
            });
        }
        let ow = parse_header_kv(toks[4], "orig_w", 1)?;
        let oh = parse_header_kv(toks[5], "orig_h", 1)?;
        let dw = parse_header_kv(toks[6], "det_w", 1)?;
        let dh = parse_header_kv(toks[7], "det_h", 1)?;
        if dw == 0 || dh == 0 {
            return Err(KeypointError::ParseError {
                line: 1,
                msg: "detection resolution must be positive".into(),
            });
        }
        scale = [ow as f64 / dw as f64, oh as f64 / dh as f64];
    }

    let mut coords = Vec::with_capacity(n);
    let mut descs = Vec::with_capacity(n * d);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| KeypointError::ParseError {
            line: line_no,
            msg: format!("bad float: {e}"),
        })?;
        if vals.len() != 2 + d {
            return Err(KeypointError::DimensionMismatch {
                line: line_no,
                expected: d,
                got: vals.len().saturating_sub(2),
            });
        }
        coords.push([vals[0] * scale[0], vals[1] * scale[1]]);
        let row = &vals[2..];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(KeypointError::ParseError {
                line: line_no,
                msg: "zero-norm descriptor".into(),
            });
        }
        descs.extend(row.iter().map(|x| x / norm));
    }
    if coords.len() != n {
        return Err(KeypointError::ParseError {
            line: coords.len() + 1,
            msg: format!("header claims n={n} but file has {} rows", coords.len()),
        });
    }
    let rows = coords.len();
    Ok(KeypointSet::new(
        coords,
        Tensor::from_vec(rows, d, descs),
        vec![true; rows],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use nalgebra::Matrix3;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0)
    }

    fn test_scene(rng: &mut Rng, n: usize) -> SyntheticScene {
        SyntheticScene::random_frustum(rng, n, 16, &test_k(), [640, 480], [4.0, 8.0], 40.0)
    }

    #[test]
    fn noiseless_detection_matches_projection() {
        let mut rng = Rng::from_seed(301);
        let scene = test_scene(&mut rng, 30);
        let kps = synthetic_detect(
            &scene,
            &Pose::identity(),
            &test_k(),
            [640, 480],
            &DetectorNoise::none(),
            &mut rng,
        )
        .unwrap();
        let exact = project(&scene.points, &Pose::identity(), &test_k()).unwrap();
        assert_eq!(kps.len(), 30);
        for (got, want) in kps.coords.iter().zip(exact.iter()) {
            assert_eq!(got, want);
        }
    }

    #[test]
    fn same_point_two_views_identical_descriptor() {
        let mut rng = Rng::from_seed(303);
        let scene = test_scene(&mut rng, 20);
        let pose2 = Pose::new(
            Matrix3::identity(),
            nalgebra::Vector3::new(0.2, 0.0, 0.0),
        )
        .unwrap();
        let a = synthetic_detect(
            &scene,
            &Pose::identity(),
            &test_k(),
            [640, 480],
            &DetectorNoise::none(),
            &mut rng,
        )
        .unwrap();
        let b = synthetic_detect(
            &scene,
            &pose2,
            &test_k(),
            [640, 480],
            &DetectorNoise::none(),
            &mut rng,
        )
        .unwrap();
        let ids_a = a.ids.as_ref().unwrap();
        let ids_b = b.ids.as_ref().unwrap();
        for (i, ida) in ids_a.iter().enumerate() {
            if let Some(j) = ids_b.iter().position(|idb| idb == ida) {
                let cos: f64 = a
                    .descriptors
                    .row(i)
                    .iter()
                    .zip(b.descriptors.row(j))
                    .map(|(x, y)| x * y)
                    .sum();
                assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixel_jitter_mean_offset_is_rayleigh() {
        // Mean Euclidean offset of 2D isotropic Gaussian jitter is
        // sigma * sqrt(pi/2).
        let mut rng = Rng::from_seed(307);
        let sigma = 1.0;
        let noise = DetectorNoise {
            sigma_px: sigma,
            sigma_desc: 0.0,
            clutter_fraction: 0.0,
        };
        let mut offsets = Vec::new();
        while offsets.len() < 10_000 {
            let scene = test_scene(&mut rng, 40);
            let exact = project(&scene.points, &Pose::identity(), &test_k()).unwrap();
            let kps = synthetic_detect(
                &scene,
                &Pose::identity(),
                &test_k(),
                [640, 480],
                &noise,
                &mut rng,
            )
            .unwrap();
            for (got, want) in kps.coords.iter().zip(exact.iter()) {
                let dx = got[0] - want[0];
                let dy = got[1] - want[1];
                offsets.push((dx * dx + dy * dy).sqrt());
            }
        }
        let mean: f64 = offsets.iter().sum::<f64>() / offsets.len() as f64;
        let expect = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!(
            (mean - expect).abs() < 0.05 * expect,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn empty_view_detected() {
        let mut rng = Rng::from_seed(311);
        let scene = test_scene(&mut rng, 10);
        // Camera turned fully away from the cloud.
        let pose = Pose::new(
            crate::geometry::rotation_about_axis(
                &nalgebra::Vector3::new(0.0, 1.0, 0.0),
                std::f64::consts::PI,
            ),
            nalgebra::Vector3::zeros(),
        )
        .unwrap();
        assert!(matches!(
            synthetic_detect(
                &scene,
                &pose,
                &test_k(),
                [640, 480],
                &DetectorNoise::none(),
                &mut rng
            ),
            Err(KeypointError::EmptyView)
        ));
    }

    #[test]
    fn clutter_has_reserved_ids() {
        let mut rng = Rng::from_seed(313);
        let scene = test_scene(&mut rng, 20);
        let noise = DetectorNoise {
            sigma_px: 0.0,
            sigma_desc: 0.0,
            clutter_fraction: 0.5,
        };
        let kps = synthetic_detect(
            &scene,
            &Pose::identity(),
            &test_k(),
            [640, 480],
            &noise,
            &mut rng,
        )
        .unwrap();
        assert_eq!(kps.len(), 30);
        let ids = kps.ids.as_ref().unwrap();
        assert_eq!(ids.iter().filter(|&&i| i >= CLUTTER_ID_BASE).count(), 10);
    }

    #[test]
    fn prompt_whole_image_is_identity() {
        let mut rng = Rng::from_seed(317);
        let scene = test_scene(&mut rng, 20);
        let kps = synthetic_detect(
            &scene,
            &Pose::identity(),
            &test_k(),
            [640, 480],
            &DetectorNoise::none(),
            &mut rng,
        )
        .unwrap();
        let all = ObjectPrompt::new([0.0, 0.0], [640.0, 480.0]);
        let out = apply_prompt(&kps, &all).unwrap();
        assert_eq!(out.valid_mask, kps.valid_mask);
        assert_eq!(out.coords, kps.coords);
        assert_eq!(out.descriptors, kps.descriptors);
    }

    #[test]
    fn prompt_excluding_everything_errors() {
        let mut rng = Rng::from_seed(319);
        let scene = test_scene(&mut rng, 20);
        let kps = synthetic_detect(
            &scene,
            &Pose::identity(),
            &test_k(),
            [640, 480],
            &DetectorNoise::none(),
            &mut rng,
        )
        .unwrap();
        let empty_corner = ObjectPrompt::new([0.0, 0.0], [1.0, 1.0]);
        assert!(matches!(
            apply_prompt(&kps, &empty_corner),
            Err(KeypointError::NoKeypointsInPrompt)
        ));
    }

    #[test]
    fn prompt_only_touches_mask() {
        let mut rng = Rng::from_seed(323);
        let scene = test_scene(&mut rng, 40);
        let kps = synthetic_detect(
            &scene,
            &Pose::identity(),
            &test_k(),
            [640, 480],
            &DetectorNoise::none(),
            &mut rng,
        )
        .unwrap();
        let prompt = ObjectPrompt::new([150.0, 100.0], [450.0, 350.0]);
        let out = apply_prompt(&kps, &prompt).unwrap();
        assert_eq!(out.coords, kps.coords);
        assert_eq!(out.descriptors, kps.descriptors);
        for i in 0..out.len() {
            assert_eq!(out.valid_mask[i], prompt.contains(out.coords[i]));
        }
    }

    #[test]
    fn pad_appends_masked_rows() {
        let mut rng = Rng::from_seed(329);
        let scene = test_scene(&mut rng, 5);
        let kps = synthetic_detect(
            &scene,
            &Pose::identity(),
            &test_k(),
            [640, 480],
            &DetectorNoise::none(),
            &mut rng,
        )
        .unwrap();
        let same = pad_to(&kps, kps.len()).unwrap();
        assert_eq!(same.coords, kps.coords);
        assert_eq!(same.valid_mask, kps.valid_mask);

        let padded = pad_to(&kps, 8).unwrap();
        assert_eq!(padded.len(), 8);
        assert_eq!(padded.valid_count(), 5);
        for i in 5..8 {
            assert!(!padded.valid_mask[i]);
            assert_eq!(padded.coords[i], PAD_COORD);
            assert!(padded.descriptors.row(i).iter().all(|&v| v == 0.0));
        }
        assert!(matches!(
            pad_to(&kps, 3),
            Err(KeypointError::TooManyKeypoints { valid: 5, requested: 3 })
        ));
    }

    #[test]
    fn kpts_file_roundtrip() {
        let mut rng = Rng::from_seed(331);
        let scene = test_scene(&mut rng, 25);
        let noise = DetectorNoise {
            sigma_px: 0.5,
            sigma_desc: 0.05,
            clutter_fraction: 0.2,
        };
        let kps = synthetic_detect(
            &scene,
            &Pose::identity(),
            &test_k(),
            [640, 480],
            &noise,
            &mut rng,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("srpose_kpts_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("view.kpts");
        save_keypoint_file(&kps, &path).unwrap();
        let back = load_keypoint_file(&path, Some(16)).unwrap();
        assert_eq!(back.len(), kps.len());
        for i in 0..back.len() {
            assert_eq!(back.coords[i], kps.coords[i], "coords must be bit-exact");
            for (a, b) in back.descriptors.row(i).iter().zip(kps.descriptors.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kpts_rejects_ragged_and_empty() {
        let dir = std::env::temp_dir().join("srpose_kpts_bad");
        std::fs::create_dir_all(&dir).unwrap();

        let ragged = dir.join("ragged.kpts");
        std::fs::write(&ragged, "KPTS v1 n=1 d=3\n1.0 2.0 0.5 0.5\n").unwrap();
        assert!(matches!(
            load_keypoint_file(&ragged, None),
            Err(KeypointError::DimensionMismatch { line: 2, expected: 3, got: 2 })
        ));

        let empty = dir.join("empty.kpts");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(
            load_keypoint_file(&empty, None),
            Err(KeypointError::ParseError { line: 1, .. })
        ));

        let wrong_d = dir.join("wrong_d.kpts");
        std::fs::write(&wrong_d, "KPTS v1 n=0 d=7\n").unwrap();
        assert!(matches!(
            load_keypoint_file(&wrong_d, Some(16)),
            Err(KeypointError::DimensionMismatch { line: 1, expected: 16, got: 7 })
        ));
    }

    #[test]
    fn kpts_rescales_detection_resolution() {
        let dir = std::env::temp_dir().join("srpose_kpts_rescale");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scaled.kpts");
        std::fs::write(
            &path,
            "KPTS v1 n=1 d=2 orig_w=1280 orig_h=960 det_w=640 det_h=480\n10 20 1 0\n",
        )
        .unwrap();
        let kps = load_keypoint_file(&path, None).unwrap();
        assert_eq!(kps.coords[0], [20.0, 40.0]);
    }
}
