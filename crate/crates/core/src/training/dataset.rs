//! Synthetic two-view datasets: camera-through-scene pairs and
//! object-under-static-camera pairs, fully reproducible from a seed, plus
//! the on-disk layout (`manifest`, per-pair `KPTS v1` files and a `meta`
//! record with intrinsics, optional prompt, and the pose line).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{rotation_about_axis, CameraIntrinsics, Point3Set, Pose};
use crate::keypoints::{
    load_keypoint_file, save_keypoint_file, synthetic_detect, DetectorNoise, KeypointSet,
    ObjectPrompt, PairSample, Scenario, SyntheticScene,
};
use crate::rng::Rng;

use super::TrainError;

/// Everything needed to regenerate a dataset byte-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub scenario: Scenario,
    pub pairs: usize,
    pub seed: u64,
    /// Keypoint budget per view (detections are truncated to this count).
    pub keypoints_per_view: usize,
    pub descriptor_dim: usize,
    pub image_size: [usize; 2],
    pub noise_px: f64,
    pub noise_desc: f64,
    pub clutter_fraction: f64,
    pub max_rot_deg: f64,
    /// Camera baseline range in meters (camera-to-world).
    pub baseline_range: [f64; 2],
    pub depth_range: [f64; 2],
    /// Per-sample focal length range; a width-zero range fixes fx = fy.
    pub fx_range: [f64; 2],
    /// Object displacement range in meters (object-to-camera).
    pub object_translation: [f64; 2],
    pub split: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenario: Scenario::CameraToWorld,
            pairs: 100,
            seed: 0,
            keypoints_per_view: 64,
            descriptor_dim: 32,
            image_size: [640, 480],
            noise_px: 0.5,
            noise_desc: 0.05,
            clutter_fraction: 0.2,
            max_rot_deg: 45.0,
            baseline_range: [0.4, 1.4],
            depth_range: [2.0, 6.5],
            fx_range: [500.0, 500.0],
            object_translation: [0.05, 0.25],
            split: "train".into(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.pairs == 0 {
            return Err(TrainError::Config("pairs must be positive".into()));
        }
        if self.keypoints_per_view < 16 {
            return Err(TrainError::Config(
                "keypoints_per_view must be at least 16".into(),
            ));
        }
        if self.max_rot_deg <= 0.0 || self.max_rot_deg > 180.0 {
            return Err(TrainError::Config("max_rot_deg out of (0, 180]".into()));
        }
        if self.fx_range[0] <= 0.0 || self.fx_range[1] < self.fx_range[0] {
            return Err(TrainError::Config("bad fx_range".into()));
        }
        if self.baseline_range[0] <= 0.0 || self.baseline_range[1] < self.baseline_range[0] {
            return Err(TrainError::Config("bad baseline_range".into()));
        }
        Ok(())
    }

    fn manifest_lines(&self) -> Vec<String> {
        vec![
            "format dataset-v1".into(),
            format!("scenario {}", self.scenario),
            format!("pairs {}", self.pairs),
            format!("seed {}", self.seed),
            format!("keypoints_per_view {}", self.keypoints_per_view),
            format!("descriptor_dim {}", self.descriptor_dim),
            format!("image_w {}", self.image_size[0]),
            format!("image_h {}", self.image_size[1]),
            format!("noise_px {}", self.noise_px),
            format!("noise_desc {}", self.noise_desc),
            format!("clutter_fraction {}", self.clutter_fraction),
            format!("max_rot_deg {}", self.max_rot_deg),
            format!(
                "baseline_range {} {}",
                self.baseline_range[0], self.baseline_range[1]
            ),
            format!("depth_range {} {}", self.depth_range[0], self.depth_range[1]),
            format!("fx_range {} {}", self.fx_range[0], self.fx_range[1]),
            format!(
                "object_translation {} {}",
                self.object_translation[0], self.object_translation[1]
            ),
            format!("split {}", self.split),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GenConfig,
    pub samples: Vec<PairSample>,
}

/// Keep at most `n` valid keypoints; excess rows are dropped from the end,
/// which sheds clutter first (clutter is appended after scene detections).
fn truncate_to(kps: &KeypointSet, n: usize) -> KeypointSet {
    let compacted = kps.compact();
    if compacted.len() <= n {
        return compacted;
    }
    let coords = compacted.coords[..n].to_vec();
    let mut desc = crate::tensor::Tensor::zeros(n, compacted.descriptor_dim());
    for i in 0..n {
        desc.row_mut(i).copy_from_slice(compacted.descriptors.row(i));
    }
    let mut out = KeypointSet::new(coords, desc, vec![true; n]);
    out.ids = compacted.ids.map(|ids| ids[..n].to_vec());
    out
}

fn look_at(center: Vector3<f64>, target: &Vector3<f64>, roll: f64) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    // Rows map world directions into camera axes.
    let base = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    rotation_about_axis(&Vector3::z(), roll) * base
}

fn camera_to_world_sample(cfg: &GenConfig, rng: &mut Rng) -> Result<PairSample, TrainError> {
    let fx = rng.uniform(cfg.fx_range[0], cfg.fx_range[1].max(cfg.fx_range[0]));
    let k = CameraIntrinsics::new(
        fx,
        fx,
        cfg.image_size[0] as f64 / 2.0,
        cfg.image_size[1] as f64 / 2.0,
    );
    let real_target =
        ((cfg.keypoints_per_view as f64) / (1.0 + cfg.clutter_fraction)).round() as usize;
    let scene = SyntheticScene::random_frustum(
        rng,
        real_target.max(16),
        cfg.descriptor_dim,
        &k,
        cfg.image_size,
        cfg.depth_range,
        30.0,
    );
    let centroid = scene
        .points
        .points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p)
        / scene.points.len() as f64;

    let max_rot = cfg.max_rot_deg.to_radians();
    let noise = DetectorNoise {
        sigma_px: cfg.noise_px,
        sigma_desc: cfg.noise_desc,
        clutter_fraction: cfg.clutter_fraction,
    };

    // Camera motion follows dominant modes (lateral pans, a forward dolly,
    // a crane-down) with per-sample cone noise, mirroring the structured
    // trajectories of handheld and robot capture. Directions stay diverse
    // across modes while each mode remains learnable at desk scale.
    let motion_modes: [Vector3<f64>; 4] = [
        Vector3::new(-1.0, 0.0, 0.0),
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, -0.6, 0.8),
    ];
    let mode = motion_modes[rng.below(motion_modes.len())];
    // Forward motion eats into the scene; keep those baselines shorter.
    let mode_scale = if mode.z.abs() > 0.5 { 0.55 } else { 1.0 };
    let mut angle_budget = rng.uniform(0.05, 1.0) * max_rot;
    let mut baseline_scale = mode_scale;
    for attempt in 0..60 {
        if attempt > 0 && attempt % 10 == 0 {
            baseline_scale *= 0.8;
        }
        let baseline = rng.uniform(cfg.baseline_range[0], cfg.baseline_range[1]) * baseline_scale;
        let dir = (mode
            + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.15)
            .normalize();
        let center = dir * baseline;
        // Aim near, not exactly at, the cloud centroid: a camera that
        // re-fixates perfectly cancels the mean-flow component of the
        // translation, which real rigs never do. The jitter is kept small so
        // aim noise does not drown the parallax signal.
        let fixation = centroid
            + Vector3::new(
                rng.uniform(-0.35, 0.35),
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.5, 0.5),
            );
        let roll = angle_budget * if rng.uniform01() < 0.5 { -1.0 } else { 1.0 };
        let r2 = look_at(center, &fixation, roll);
        let pose = Pose {
            r: r2,
            t: -(r2 * center),
        };
        if pose.rotation_angle_deg() > cfg.max_rot_deg {
            angle_budget *= 0.85;
            continue;
        }
        // Both views must see most of the cloud.
        let visible = |p: &Pose| -> usize {
            scene
                .points
                .points
                .iter()
                .filter(|x| {
                    let c = p.transform(x);
                    if c.z < 1e-9 {
                        return false;
                    }
                    let u = k.fx * (c.x / c.z) + k.cx;
                    let v = k.fy * (c.y / c.z) + k.cy;
                    (0.0..=cfg.image_size[0] as f64).contains(&u)
                        && (0.0..=cfg.image_size[1] as f64).contains(&v)
                })
                .count()
        };
        let need = (scene.points.len() * 7) / 10;
        if visible(&pose) < need {
            continue;
        }
        let kps1 = synthetic_detect(
            &scene,
            &Pose::identity(),
            &k,
            cfg.image_size,
            &noise,
            rng,
        )?;
        let kps2 = synthetic_detect(&scene, &pose, &k, cfg.image_size, &noise, rng)?;
        return Ok(PairSample {
            kps1: truncate_to(&kps1, cfg.keypoints_per_view),
            kps2: truncate_to(&kps2, cfg.keypoints_per_view),
            k1: k,
            k2: k,
            prompt: None,
            gt: pose,
            scenario: Scenario::CameraToWorld,
        });
    }
    Err(TrainError::Config(
        "could not find a visible camera pair; loosen rotation/baseline ranges".into(),
    ))
}

fn object_to_camera_sample(cfg: &GenConfig, rng: &mut Rng) -> Result<PairSample, TrainError> {
    let fx = rng.uniform(cfg.fx_range[0], cfg.fx_range[1].max(cfg.fx_range[0]));
    let k = CameraIntrinsics::new(
        fx,
        fx,
        cfg.image_size[0] as f64 / 2.0,
        cfg.image_size[1] as f64 / 2.0,
    );
    let real_target =
        ((cfg.keypoints_per_view as f64) / (1.0 + cfg.clutter_fraction)).round() as usize;
    let n_object = (real_target as f64 * 0.45).round() as usize;
    let n_background = real_target.saturating_sub(n_object).max(8);

    let noise = DetectorNoise {
        sigma_px: cfg.noise_px,
        sigma_desc: cfg.noise_desc,
        clutter_fraction: cfg.clutter_fraction,
    };
    let max_rot = cfg.max_rot_deg.to_radians();

    for _attempt in 0..60 {
        // Object cluster around a point in the central image region.
        let cu = rng.uniform(0.35, 0.65) * cfg.image_size[0] as f64;
        let cv = rng.uniform(0.35, 0.65) * cfg.image_size[1] as f64;
        let cz = rng.uniform(1.2, 2.2);
        let cc = k.calibrate_point([cu, cv]);
        let center = Vector3::new(cc[0] * cz, cc[1] * cz, cz);
        let radius = 0.16;

        let mut points = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n_object {
            let v = rng.unit_vector(3);
            let r = radius * rng.uniform01().cbrt();
            points.push(center + Vector3::new(v[0], v[1], v[2]) * r);
            ids.push(i as u64);
        }
        // Static background spread through the frustum behind the object.
        for i in 0..n_background {
            let u = rng.uniform(20.0, cfg.image_size[0] as f64 - 20.0);
            let v = rng.uniform(20.0, cfg.image_size[1] as f64 - 20.0);
            let z = rng.uniform(2.8, 6.0);
            let c = k.calibrate_point([u, v]);
            points.push(Vector3::new(c[0] * z, c[1] * z, z));
            ids.push((n_object + i) as u64);
        }
        let mut table = crate::tensor::Tensor::zeros(points.len(), cfg.descriptor_dim);
        for i in 0..points.len() {
            table
                .row_mut(i)
                .copy_from_slice(&rng.unit_vector(cfg.descriptor_dim));
        }
        let object_ids: Vec<u64> = (0..n_object as u64).collect();
        let scene1 = SyntheticScene {
            points: Point3Set::with_ids(points.clone(), ids.clone()),
            descriptor_table: table.clone(),
            object_subsets: vec![("object".into(), object_ids.clone())],
        };

        // Ground-truth object motion: rotation about the object centroid
        // plus a small displacement.
        let axis = {
            let v = rng.unit_vector(3);
            Vector3::new(v[0], v[1], v[2])
        };
        let theta = rng.uniform(0.05, 1.0) * max_rot;
        let r_o = rotation_about_axis(&axis, theta);
        let delta = {
            let v = rng.unit_vector(3);
            Vector3::new(v[0], v[1], v[2])
                * rng.uniform(cfg.object_translation[0], cfg.object_translation[1])
        };
        let t_o = center - r_o * center + delta;
        let gt = Pose { r: r_o, t: t_o };

        let mut points2 = points.clone();
        for i in 0..n_object {
            points2[i] = gt.transform(&points[i]);
        }
        // The moved object must stay inside the image at positive depth.
        let all_visible = points2[..n_object].iter().all(|p| {
            if p.z < 0.3 {
                return false;
            }
            let u = k.fx * (p.x / p.z) + k.cx;
            let v = k.fy * (p.y / p.z) + k.cy;
            (10.0..=cfg.image_size[0] as f64 - 10.0).contains(&u)
                && (10.0..=cfg.image_size[1] as f64 - 10.0).contains(&v)
        });
        if !all_visible {
            continue;
        }
        let scene2 = SyntheticScene {
            points: Point3Set::with_ids(points2, ids.clone()),
            descriptor_table: table,
            object_subsets: vec![("object".into(), object_ids.clone())],
        };

        let kps1 = synthetic_detect(&scene1, &Pose::identity(), &k, cfg.image_size, &noise, rng)?;
        let kps2 = synthetic_detect(&scene2, &Pose::identity(), &k, cfg.image_size, &noise, rng)?;
        let kps1 = truncate_to(&kps1, cfg.keypoints_per_view);
        let kps2 = truncate_to(&kps2, cfg.keypoints_per_view);

        // Prompt: bounding box of the projected object keypoints in view 1.
        let obj_rows: Vec<usize> = kps1
            .ids
            .as_ref()
            .map(|ids| {
                (0..kps1.len())
                    .filter(|&i| ids[i] < n_object as u64)
                    .collect()
            })
            .unwrap_or_default();
        if obj_rows.len() < 8 {
            continue;
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for &i in &obj_rows {
            for a in 0..2 {
                lo[a] = lo[a].min(kps1.coords[i][a]);
                hi[a] = hi[a].max(kps1.coords[i][a]);
            }
        }
        let prompt = ObjectPrompt::new(lo, [hi[0].max(lo[0] + 1.0), hi[1].max(lo[1] + 1.0)]);

        return Ok(PairSample {
            kps1,
            kps2,
            k1: k,
            k2: k,
            prompt: Some(prompt),
            gt,
            scenario: Scenario::ObjectToCamera,
        });
    }
    Err(TrainError::Config(
        "could not keep the object visible; loosen rotation/translation ranges".into(),
    ))
}

/// Generate a dataset; every sample derives from its own seeded substream,
/// so generation is reproducible and order-independent.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset, TrainError> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let mut rng = Rng::fork(cfg.seed, i as u64);
        let sample = match cfg.scenario {
            Scenario::CameraToWorld => camera_to_world_sample(cfg, &mut rng)?,
            Scenario::ObjectToCamera => object_to_camera_sample(cfg, &mut rng)?,
        };
        samples.push(sample);
    }
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

fn pose_line(p: &Pose) -> String {
    let r = &p.r;
    format!(
        "R {} {} {} {} {} {} {} {} {} t {} {} {}",
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        p.t.x,
        p.t.y,
        p.t.z
    )
}

fn parse_pose_line(line: &str) -> Option<Pose> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 14 || toks[0] != "R" || toks[10] != "t" {
        return None;
    }
    let nums: Result<Vec<f64>, _> = toks[1..10]
        .iter()
        .chain(toks[11..14].iter())
        .map(|s| s.parse::<f64>())
        .collect();
    let v = nums.ok()?;
    Some(Pose {
        r: Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
        t: Vector3::new(v[9], v[10], v[11]),
    })
}

/// Write a dataset directory: `manifest` plus `pairs/NNNNNN/{kps1.kpts,
/// kps2.kpts, meta}`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest"))?);
    for line in ds.config.manifest_lines() {
        writeln!(manifest, "{line}")?;
    }
    drop(manifest);
    for (i, s) in ds.samples.iter().enumerate() {
        let pair_dir = dir.join("pairs").join(format!("{i:06}"));
        std::fs::create_dir_all(&pair_dir)?;
        save_keypoint_file(&s.kps1, &pair_dir.join("kps1.kpts"))?;
        save_keypoint_file(&s.kps2, &pair_dir.join("kps2.kpts"))?;
        let mut meta = std::io::BufWriter::new(std::fs::File::create(pair_dir.join("meta"))?);
        writeln!(meta, "PAIR v1")?;
        writeln!(meta, "scenario {}", s.scenario)?;
        writeln!(meta, "K1 {} {} {} {}", s.k1.fx, s.k1.fy, s.k1.cx, s.k1.cy)?;
        writeln!(meta, "K2 {} {} {} {}", s.k2.fx, s.k2.fy, s.k2.cx, s.k2.cy)?;
        if let Some(p) = &s.prompt {
            writeln!(
                meta,
                "prompt {} {} {} {}",
                p.top_left[0], p.top_left[1], p.bottom_right[0], p.bottom_right[1]
            )?;
        }
        writeln!(meta, "{}", pose_line(&s.gt))?;
    }
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> TrainError {
    TrainError::DatasetParse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, TrainError> {
    let manifest_path = dir.join("manifest");
    let f = BufReader::new(std::fs::File::open(&manifest_path)?);
    let mut cfg = GenConfig::default();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let want = |n: usize| -> Result<(), TrainError> {
            if toks.len() != n + 1 {
                Err(parse_err(&manifest_path, idx + 1, "wrong field count"))
            } else {
                Ok(())
            }
        };
        let f1 = |s: &str| -> Result<f64, TrainError> {
            s.parse()
                .map_err(|_| parse_err(&manifest_path, idx + 1, format!("bad number {s:?}")))
        };
        match toks[0] {
            "format" => {
                want(1)?;
                if toks[1] != "dataset-v1" {
                    return Err(parse_err(&manifest_path, idx + 1, "unknown format"));
                }
            }
            "scenario" => {
                want(1)?;
                cfg.scenario = match toks[1] {
                    "camera_to_world" => Scenario::CameraToWorld,
                    "object_to_camera" => Scenario::ObjectToCamera,
                    other => {
                        return Err(parse_err(
                            &manifest_path,
                            idx + 1,
                            format!("unknown scenario {other:?}"),
                        ))
                    }
                };
            }
            "pairs" => {
                want(1)?;
                cfg.pairs = f1(toks[1])? as usize;
            }
            "seed" => {
                want(1)?;
                cfg.seed = f1(toks[1])? as u64;
            }
            "keypoints_per_view" => {
                want(1)?;
                cfg.keypoints_per_view = f1(toks[1])? as usize;
            }
            "descriptor_dim" => {
                want(1)?;
                cfg.descriptor_dim = f1(toks[1])? as usize;
            }
            "image_w" => {
                want(1)?;
                cfg.image_size[0] = f1(toks[1])? as usize;
            }
            "image_h" => {
                want(1)?;
                cfg.image_size[1] = f1(toks[1])? as usize;
            }
            "noise_px" => {
                want(1)?;
                cfg.noise_px = f1(toks[1])?;
            }
            "noise_desc" => {
                want(1)?;
                cfg.noise_desc = f1(toks[1])?;
            }
            "clutter_fraction" => {
                want(1)?;
                cfg.clutter_fraction = f1(toks[1])?;
            }
            "max_rot_deg" => {
                want(1)?;
                cfg.max_rot_deg = f1(toks[1])?;
            }
            "baseline_range" => {
                want(2)?;
                cfg.baseline_range = [f1(toks[1])?, f1(toks[2])?];
            }
            "depth_range" => {
                want(2)?;
                cfg.depth_range = [f1(toks[1])?, f1(toks[2])?];
            }
            "fx_range" => {
                want(2)?;
                cfg.fx_range = [f1(toks[1])?, f1(toks[2])?];
            }
            "object_translation" => {
                want(2)?;
                cfg.object_translation = [f1(toks[1])?, f1(toks[2])?];
            }
            "split" => {
                want(1)?;
                cfg.split = toks[1].to_string();
            }
            other => {
                return Err(parse_err(
                    &manifest_path,
                    idx + 1,
                    format!("unknown manifest key {other:?}"),
                ))
            }
        }
    }

    let mut samples = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let pair_dir = dir.join("pairs").join(format!("{i:06}"));
        let meta_path = pair_dir.join("meta");
        let kps1 = load_keypoint_file(&pair_dir.join("kps1.kpts"), Some(cfg.descriptor_dim))?;
        let kps2 = load_keypoint_file(&pair_dir.join("kps2.kpts"), Some(cfg.descriptor_dim))?;
        let f = BufReader::new(std::fs::File::open(&meta_path)?);
        let mut scenario = cfg.scenario;
        let mut k1 = None;
        let mut k2 = None;
        let mut prompt = None;
        let mut gt = None;
        for (idx, line) in f.lines().enumerate() {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            let f1 = |s: &str| -> Result<f64, TrainError> {
                s.parse()
                    .map_err(|_| parse_err(&meta_path, idx + 1, format!("bad number {s:?}")))
            };
            match toks[0] {
                "PAIR" => {}
                "scenario" => {
                    scenario = match toks.get(1) {
                        Some(&"camera_to_world") => Scenario::CameraToWorld,
                        Some(&"object_to_camera") => Scenario::ObjectToCamera,
                        _ => return Err(parse_err(&meta_path, idx + 1, "bad scenario")),
                    };
                }
                "K1" | "K2" => {
                    if toks.len() != 5 {
                        return Err(parse_err(&meta_path, idx + 1, "K needs 4 numbers"));
                    }
                    let k = CameraIntrinsics::new(
                        f1(toks[1])?,
                        f1(toks[2])?,
                        f1(toks[3])?,
                        f1(toks[4])?,
                    );
                    if toks[0] == "K1" {
                        k1 = Some(k);
                    } else {
                        k2 = Some(k);
                    }
                }
                "prompt" => {
                    if toks.len() != 5 {
                        return Err(parse_err(&meta_path, idx + 1, "prompt needs 4 numbers"));
                    }
                    prompt = Some(ObjectPrompt::new(
                        [f1(toks[1])?, f1(toks[2])?],
                        [f1(toks[3])?, f1(toks[4])?],
                    ));
                }
                "R" => {
                    gt = Some(parse_pose_line(&line).ok_or_else(|| {
                        parse_err(&meta_path, idx + 1, "bad pose line")
                    })?);
                }
                other => {
                    return Err(parse_err(
                        &meta_path,
                        idx + 1,
                        format!("unknown meta key {other:?}"),
                    ))
                }
            }
        }
        let (Some(k1), Some(k2), Some(gt)) = (k1, k2, gt) else {
            return Err(parse_err(&meta_path, 0, "missing K1/K2/pose"));
        };
        samples.push(PairSample {
            kps1,
            kps2,
            k1,
            k2,
            prompt,
            gt,
            scenario,
        });
    }
    Ok(Dataset {
        config: cfg,
        samples,
    })
}
