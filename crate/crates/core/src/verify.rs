//! Self-contained invariant checks: geometry round trips, gradient checks,
//! padding/prompt invariance, metric oracles, and RANSAC robustness. The
//! `verify` command runs these on a fresh checkout; the acceptance suite
//! reuses them.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};

use crate::baseline::{
    decompose_essential, eight_point, match_mutual_nn, ransac_essential, MatchSet, RansacConfig,
};
use crate::geometry::{
    epipolar_residual, essential_from_pose, gram_schmidt_6d, random_rotation,
    rotation_angle_error, translation_angle_error, CameraIntrinsics, Point3Set, Pose,
};
use crate::keypoints::{pad_to, synthetic_detect, DetectorNoise, PairSample, SyntheticScene};
use crate::model::{forward, Checkpoint, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::{finite_diff_grad, max_rel_error, GradientTape, Tensor};
use crate::training::{generate_dataset, GenConfig, Scenario};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

type CheckFn = fn() -> Result<String, String>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("geometry.roundtrip", check_geometry_roundtrip),
    ("geometry.epipolar_consistency", check_epipolar_consistency),
    ("geometry.gram_schmidt_manifold", check_gram_schmidt_manifold),
    ("tensor.gradient_suite", check_gradient_suite),
    ("model.padding_prompt_invariance", check_padding_invariance),
    ("model.guidance_identity", check_guidance_identity),
    ("metrics.oracles", check_metric_oracles),
    ("baseline.ransac_robustness", check_ransac_robustness),
    ("keypoints.file_roundtrip", check_keypoint_roundtrip),
    ("checkpoint.mismatch_detected", check_checkpoint_mismatch),
];

/// Run every check whose name contains `filter` (all when empty). Results
/// come back in declaration order.
pub fn run_all(filter: &str) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(name, _)| filter.is_empty() || name.contains(filter))
        .map(|(name, f)| {
            let start = Instant::now();
            let outcome = f();
            let elapsed = start.elapsed();
            match outcome {
                Ok(detail) => CheckResult {
                    name,
                    passed: true,
                    detail,
                    elapsed,
                },
                Err(detail) => CheckResult {
                    name,
                    passed: false,
                    detail,
                    elapsed,
                },
            }
        })
        .collect()
}

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

fn test_k() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0)
}

/// Noiseless two-view pair with identity matching by construction.
fn exact_pair(
    rng: &mut Rng,
    n: usize,
) -> Result<(crate::keypoints::KeypointSet, crate::keypoints::KeypointSet, MatchSet, Pose), String>
{
    let k = test_k();
    let scene = SyntheticScene::random_frustum(rng, n, 8, &k, [640, 480], [4.0, 8.0], 80.0);
    let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
    let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
    let r = crate::geometry::rotation_about_axis(&axis, rng.uniform(-0.25, 0.25));
    let mut t = Vector3::new(
        rng.uniform(-0.6, 0.6),
        rng.uniform(-0.6, 0.6),
        rng.uniform(-0.25, 0.25),
    );
    if t.norm() < 0.05 {
        t = Vector3::new(0.3, 0.0, 0.0);
    }
    let pose = Pose::new(r, t).map_err(|e| e.to_string())?;
    let kps1 = synthetic_detect(
        &scene,
        &Pose::identity(),
        &k,
        [640, 480],
        &DetectorNoise::none(),
        rng,
    )
    .map_err(|e| e.to_string())?;
    let kps2 = synthetic_detect(&scene, &pose, &k, [640, 480], &DetectorNoise::none(), rng)
        .map_err(|e| e.to_string())?;
    let ids1 = kps1.ids.clone().unwrap();
    let ids2 = kps2.ids.clone().unwrap();
    let mut matches = MatchSet::default();
    for (i, id) in ids1.iter().enumerate() {
        if let Some(j) = ids2.iter().position(|x| x == id) {
            matches.pairs.push((i, j));
            matches.scores.push(1.0);
        }
    }
    Ok((kps1, kps2, matches, pose))
}

/// 1,000 random poses with exact correspondences: 8-point + decomposition
/// recovers rotation and translation direction within 1e-5 degrees.
fn check_geometry_roundtrip() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Rng::from_seed(0xA11CE);
    let mut worst_rot: f64 = 0.0;
    let mut worst_trans: f64 = 0.0;
    let mut done = 0;
    while done < 1000 {
        let (kps1, kps2, matches, pose) = exact_pair(&mut rng, 24)?;
        if matches.len() < 20 {
            continue;
        }
        done += 1;
        let k = test_k();
        let e = eight_point(&matches, &kps1, &kps2, &k, &k).map_err(|e| e.to_string())?;
        let got =
            decompose_essential(&e, &matches, &kps1, &kps2, &k, &k).map_err(|e| e.to_string())?;
        worst_rot = worst_rot.max(rotation_angle_error(&got.r, &pose.r));
        worst_trans = worst_trans.max(
            translation_angle_error(&got.t, &pose.t).map_err(|e| e.to_string())?,
        );
    }
    let elapsed = start.elapsed();
    if worst_rot >= 1e-5 || worst_trans >= 1e-5 {
        return Err(format!(
            "worst rotation {worst_rot:.3e} deg / translation {worst_trans:.3e} deg exceed 1e-5"
        ));
    }
    if elapsed > Duration::from_secs(10) {
        return Err(format!("runtime {elapsed:?} exceeds 10 s"));
    }
    Ok(format!(
        "1000 poses, worst rot {worst_rot:.1e} deg, worst trans {worst_trans:.1e} deg, {elapsed:?}"
    ))
}

/// Every noiseless generated camera-to-world pair satisfies the epipolar
/// constraint through the ground-truth essential matrix to 1e-10.
fn check_epipolar_consistency() -> Result<String, String> {
    let cfg = GenConfig {
        pairs: 40,
        seed: 77,
        keypoints_per_view: 48,
        descriptor_dim: 16,
        noise_px: 0.0,
        noise_desc: 0.0,
        clutter_fraction: 0.0,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for s in &ds.samples {
        let e = essential_from_pose(&s.gt).map_err(|e| e.to_string())?;
        let ids1 = s.kps1.ids.as_ref().ok_or("generated pair lacks ids")?;
        let ids2 = s.kps2.ids.as_ref().ok_or("generated pair lacks ids")?;
        for (i, id) in ids1.iter().enumerate() {
            if let Some(j) = ids2.iter().position(|x| x == id) {
                let r = epipolar_residual(&e, s.kps1.coords[i], s.kps2.coords[j], &s.k1, &s.k2);
                worst = worst.max(r.abs());
                checked += 1;
            }
        }
    }
    if worst >= 1e-10 {
        return Err(format!("max |residual| {worst:.3e} over {checked} matches"));
    }
    Ok(format!("{checked} matched keypoints, max |residual| {worst:.1e}"))
}

/// 10,000 random 6-vectors map onto SO(3) within 1e-9.
fn check_gram_schmidt_manifold() -> Result<String, String> {
    let mut rng = Rng::from_seed(0x6D);
    let mut worst: f64 = 0.0;
    let mut produced = 0;
    while produced < 10_000 {
        let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let r6 = [v[0], v[1], v[2], v[3], v[4], v[5]];
        match gram_schmidt_6d(&r6) {
            Ok(r) => {
                produced += 1;
                let ortho = (r.transpose() * r - Matrix3::identity()).norm();
                let det = (r.determinant() - 1.0).abs();
                worst = worst.max(ortho).max(det);
            }
            Err(_) => continue,
        }
    }
    if worst >= 1e-9 {
        return Err(format!("worst manifold violation {worst:.3e}"));
    }
    Ok(format!("10000 samples, worst violation {worst:.1e}"))
}

fn gradcheck_unary(
    name: &str,
    input: Tensor,
    build: impl Fn(crate::tensor::Var<'_>) -> crate::tensor::Var<'_>,
    tol: f64,
    worst: &mut f64,
) -> Result<(), String> {
    let (r, c) = input.shape();
    let flat = input.data().to_vec();
    let f = |xs: &[f64]| {
        let tape = GradientTape::new();
        let v = tape.leaf(Tensor::from_vec(r, c, xs.to_vec()));
        build(v).item()
    };
    let numeric = finite_diff_grad(f, &flat, 1e-5);
    let tape = GradientTape::new();
    let v = tape.leaf(input);
    let loss = build(v);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic = grads.get_or_zeros(v);
    let err = max_rel_error(analytic.data(), &numeric);
    *worst = worst.max(err);
    if err >= tol {
        return Err(format!("{name}: relative error {err:.3e} >= {tol:.0e}"));
    }
    Ok(())
}

/// Central finite differences against every differentiable primitive on
/// three shapes, then an end-to-end check through the micro model.
fn check_gradient_suite() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Rng::from_seed(0x9D);
    let mut worst_primitive: f64 = 0.0;
    let shapes = [(2usize, 3usize), (3, 5), (4, 4)];
    for &(r, c) in &shapes {
        let a = Tensor::from_fn(r, c, |_, _| rng.normal());
        let b = Tensor::from_fn(r, c, |_, _| rng.normal());
        let w = Tensor::from_fn(c, 2, |_, _| rng.normal());
        let wts = Tensor::from_fn(r, c, |i, j| 0.1 * (i + 2 * j + 1) as f64);
        let mask: std::rc::Rc<Vec<bool>> =
            std::rc::Rc::new((0..c).map(|j| j != c - 1).collect());
        let row_mask: std::rc::Rc<Vec<bool>> =
            std::rc::Rc::new((0..r).map(|i| i != 0).collect());

        gradcheck_unary("matmul", a.clone(), {
            let w = w.clone();
            move |v| v.matmul(v.tape_leaf(&w)).unwrap().sum_all()
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("transpose", a.clone(), {
            let w = wts.clone();
            move |v| v.t().mul(v.tape_leaf(&crate::tensor::transpose(&w))).unwrap().sum_all()
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("add", a.clone(), {
            let b = b.clone();
            let wts = wts.clone();
            move |v| {
                v.add(v.tape_leaf(&b)).unwrap().mul(v.tape_leaf(&wts)).unwrap().sum_all()
            }
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("sub", a.clone(), {
            let b = b.clone();
            let wts = wts.clone();
            move |v| {
                v.sub(v.tape_leaf(&b)).unwrap().mul(v.tape_leaf(&wts)).unwrap().sum_all()
            }
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("mul", a.clone(), {
            let b = b.clone();
            move |v| v.mul(v.tape_leaf(&b)).unwrap().sum_all()
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("scale", a.clone(), |v| v.scale(1.7).sum_all(), 1e-5, &mut worst_primitive)?;
        gradcheck_unary("softmax_rows_masked", a.clone(), {
            let wts = wts.clone();
            let mask = mask.clone();
            move |v| {
                v.softmax_rows_masked(Some(mask.clone()))
                    .unwrap()
                    .mul(v.tape_leaf(&wts))
                    .unwrap()
                    .sum_all()
            }
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("relu", a.clone(), {
            let wts = wts.clone();
            move |v| v.relu().mul(v.tape_leaf(&wts)).unwrap().sum_all()
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("mean_over_rows", a.clone(), {
            let w2 = Tensor::from_fn(1, c, |_, j| (j + 1) as f64 * 0.3);
            move |v| v.mean_over_rows().unwrap().mul(v.tape_leaf(&w2)).unwrap().sum_all()
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("mean_valid_rows", a.clone(), {
            let w2 = Tensor::from_fn(1, c, |_, j| (j + 1) as f64 * 0.3);
            let rm = row_mask.clone();
            move |v| {
                v.mean_valid_rows(rm.clone())
                    .unwrap()
                    .mul(v.tape_leaf(&w2))
                    .unwrap()
                    .sum_all()
            }
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("row_mask_mul", a.clone(), {
            let wts = wts.clone();
            let rm = row_mask.clone();
            move |v| v.row_mask_mul(rm.clone()).unwrap().mul(v.tape_leaf(&wts)).unwrap().sum_all()
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("add_row_broadcast", a.clone(), {
            let bias = Tensor::from_fn(1, c, |_, j| 0.2 * (j as f64 - 1.0));
            let wts = wts.clone();
            move |v| {
                v.add_row_broadcast(v.tape_leaf(&bias))
                    .unwrap()
                    .mul(v.tape_leaf(&wts))
                    .unwrap()
                    .sum_all()
            }
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("slice_concat", a.clone(), {
            let wts = wts.clone();
            move |v| {
                let lo = v.slice_cols(0, 1).unwrap();
                let hi = v.slice_cols(1, c - 1).unwrap();
                crate::tensor::Var::concat_cols(&[hi, lo])
                    .unwrap()
                    .mul(v.tape_leaf(&wts))
                    .unwrap()
                    .sum_all()
            }
        }, 1e-5, &mut worst_primitive)?;
        gradcheck_unary("huber", a.clone(), |v| v.huber(0.8).sum_all(), 1e-5, &mut worst_primitive)?;
        gradcheck_unary("sum_sqrt", Tensor::from_fn(r, c, |_, _| rng.uniform(0.5, 2.0)), |v| {
            v.sqrt().sum_all()
        }, 1e-5, &mut worst_primitive)?;
    }
    // Scalar-chain primitives on row vectors.
    gradcheck_unary(
        "norm_chain",
        Tensor::row_vector(&[0.7, -0.4, 0.9]),
        |v| {
            let n = v.l2_norm().unwrap();
            v.div_by_scalar(n).unwrap().huber(1.0).sum_all()
        },
        1e-5,
        &mut worst_primitive,
    )?;
    gradcheck_unary(
        "huber_of_arccos",
        Tensor::scalar(0.42),
        |v| v.huber_of_arccos(1.0),
        1e-5,
        &mut worst_primitive,
    )?;
    gradcheck_unary(
        "cross3",
        Tensor::row_vector(&[0.3, -0.6, 0.2]),
        |v| {
            let b = v.tape_leaf(&Tensor::row_vector(&[0.8, 0.1, -0.5]));
            let w = v.tape_leaf(&Tensor::row_vector(&[1.0, 2.0, 3.0]));
            v.cross3(b).unwrap().mul(w).unwrap().sum_all()
        },
        1e-5,
        &mut worst_primitive,
    )?;
    gradcheck_unary(
        "trace_mulscalar",
        Tensor::from_vec(3, 3, vec![0.4, 0.1, 0.0, -0.2, 0.8, 0.3, 0.1, 0.0, 0.6]),
        |v| {
            let s = v.tape_leaf(&Tensor::scalar(0.7));
            v.trace().unwrap().mul_by_scalar(s).unwrap().huber(2.0).sum_all()
        },
        1e-5,
        &mut worst_primitive,
    )?;

    // End-to-end: micro model (d=8, one layer, one head, 4 keypoints).
    let config = ModelConfig {
        d: 8,
        layers: 1,
        heads: 1,
        mlp_hidden: 8,
        ffn_hidden: 8,
        ..ModelConfig::desk()
    };
    let mut rng = Rng::from_seed(0xE2E);
    let k = test_k();
    let scene = SyntheticScene::random_frustum(&mut rng, 4, 8, &k, [640, 480], [4.0, 6.0], 100.0);
    let pose = Pose::new(
        crate::geometry::rotation_about_axis(&Vector3::y(), 0.12),
        Vector3::new(0.25, -0.05, 0.1),
    )
    .map_err(|e| e.to_string())?;
    let kps1 = synthetic_detect(&scene, &Pose::identity(), &k, [640, 480], &DetectorNoise::none(), &mut rng)
        .map_err(|e| e.to_string())?;
    let kps2 = synthetic_detect(&scene, &pose, &k, [640, 480], &DetectorNoise::none(), &mut rng)
        .map_err(|e| e.to_string())?;
    let pair = PairSample {
        kps1,
        kps2,
        k1: k,
        k2: k,
        prompt: None,
        gt: pose,
        scenario: Scenario::CameraToWorld,
    };
    let params = ModelParams::init(&config, 5).map_err(|e| e.to_string())?;
    let weights = crate::training::LossWeights::default();

    let loss_of = |p: &ModelParams| -> f64 {
        let (r6, t, _) = forward(&pair, p, &config, false).unwrap();
        crate::training::loss_total(&r6, &t, &pair.gt, &weights).unwrap()
    };
    let tape = GradientTape::new();
    let pv = crate::model::lease_params(&tape, &params);
    let (r6, t, _) =
        crate::model::forward_on_tape(&tape, &pair, &pv, &config).map_err(|e| e.to_string())?;
    let loss = crate::training::loss_total_on_tape(&tape, r6, t, &pair.gt, &weights)
        .map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let mut probe_rng = Rng::from_seed(0xBEEF);
    let mut worst_e2e: f64 = 0.0;
    for (name, var) in pv.named() {
        if !["layer0.self.w", "layer0.cross.w", "pe.w", "rot.w1", "trans.w3"].contains(&name.as_str())
        {
            continue;
        }
        let analytic = grads.get_or_zeros(*var);
        let base = var.value();
        for _ in 0..4 {
            let i = probe_rng.below(base.rows());
            let j = probe_rng.below(base.cols());
            let eps = 1e-5;
            let mut named = params.to_named();
            named.get_mut(&name).unwrap().set(i, j, base.get(i, j) + eps);
            let plus = loss_of(&ModelParams::from_named(&config, &named).unwrap());
            named.get_mut(&name).unwrap().set(i, j, base.get(i, j) - eps);
            let minus = loss_of(&ModelParams::from_named(&config, &named).unwrap());
            let numeric = (plus - minus) / (2.0 * eps);
            let got = analytic.get(i, j);
            let rel = (got - numeric).abs() / got.abs().max(numeric.abs()).max(1e-6);
            worst_e2e = worst_e2e.max(rel);
            if rel >= 1e-4 {
                return Err(format!(
                    "end-to-end {name}[{i}][{j}]: rel error {rel:.3e} >= 1e-4"
                ));
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(60) {
        return Err(format!("runtime {elapsed:?} exceeds 60 s"));
    }
    Ok(format!(
        "primitives worst {worst_primitive:.1e}, end-to-end worst {worst_e2e:.1e}, {elapsed:?}"
    ))
}

/// 100 random pairs at padding n and n+32 agree to 1e-9; prompt masking
/// equals physical prefiltering to 1e-9.
fn check_padding_invariance() -> Result<String, String> {
    let cfg = GenConfig {
        pairs: 100,
        seed: 55,
        keypoints_per_view: 40,
        descriptor_dim: 32,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg).map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig::desk();
    let params = ModelParams::init(&model_cfg, 9).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for s in &ds.samples {
        let n = s.kps1.len().max(s.kps2.len());
        let pad = |m: usize| -> Result<PairSample, String> {
            Ok(PairSample {
                kps1: pad_to(&s.kps1, m).map_err(|e| e.to_string())?,
                kps2: pad_to(&s.kps2, m).map_err(|e| e.to_string())?,
                ..s.clone()
            })
        };
        let (r6a, ta, _) = forward(&pad(n)?, &params, &model_cfg, false).map_err(|e| e.to_string())?;
        let (r6b, tb, _) =
            forward(&pad(n + 32)?, &params, &model_cfg, false).map_err(|e| e.to_string())?;
        for (a, b) in r6a.iter().zip(r6b.iter()).chain(ta.iter().zip(tb.iter())) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst >= 1e-9 {
        return Err(format!("padding drift {worst:.3e} >= 1e-9"));
    }

    // Prompt masking vs prefiltered keypoints.
    let obj_cfg = GenConfig {
        scenario: Scenario::ObjectToCamera,
        pairs: 20,
        seed: 56,
        keypoints_per_view: 40,
        descriptor_dim: 32,
        ..Default::default()
    };
    let obj_ds = generate_dataset(&obj_cfg).map_err(|e| e.to_string())?;
    let mut worst_prompt: f64 = 0.0;
    for s in &obj_ds.samples {
        let (r6a, ta, _) = forward(s, &params, &model_cfg, false).map_err(|e| e.to_string())?;
        let prompt = s.prompt.ok_or("object sample lacks prompt")?;
        let filtered = crate::keypoints::apply_prompt(&s.kps1, &prompt)
            .map_err(|e| e.to_string())?
            .compact();
        let prefiltered = PairSample {
            kps1: filtered,
            prompt: None,
            ..s.clone()
        };
        let (r6b, tb, _) =
            forward(&prefiltered, &params, &model_cfg, false).map_err(|e| e.to_string())?;
        for (a, b) in r6a.iter().zip(r6b.iter()).chain(ta.iter().zip(tb.iter())) {
            worst_prompt = worst_prompt.max((a - b).abs());
        }
    }
    if worst_prompt >= 1e-9 {
        return Err(format!("prompt-prefilter drift {worst_prompt:.3e} >= 1e-9"));
    }
    Ok(format!(
        "padding drift {worst:.1e}, prompt drift {worst_prompt:.1e}"
    ))
}

/// An all-ones similarity matrix reproduces the guidance-disabled output
/// bit-for-bit.
fn check_guidance_identity() -> Result<String, String> {
    let cfg = GenConfig {
        pairs: 10,
        seed: 58,
        keypoints_per_view: 32,
        descriptor_dim: 32,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg).map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig::desk();
    let params = ModelParams::init(&model_cfg, 11).map_err(|e| e.to_string())?;
    let mut rng = Rng::from_seed(0x51);
    let base = rng.unit_vector(model_cfg.d);
    for s in &ds.samples {
        let mut pair = s.clone();
        for kps in [&mut pair.kps1, &mut pair.kps2] {
            for i in 0..kps.len() {
                kps.descriptors.row_mut(i).copy_from_slice(&base);
            }
        }
        let (r6a, ta, _) = forward(&pair, &params, &model_cfg, false).map_err(|e| e.to_string())?;
        let mut no_guidance = model_cfg;
        no_guidance.guidance_enabled = false;
        let (r6b, tb, _) =
            forward(&pair, &params, &no_guidance, false).map_err(|e| e.to_string())?;
        for (a, b) in r6a.iter().zip(r6b.iter()).chain(ta.iter().zip(tb.iter())) {
            if a.to_bits() != b.to_bits() {
                return Err(format!("bit mismatch: {a} vs {b}"));
            }
        }
    }
    Ok("all-ones similarity matches guidance-off bit-for-bit".into())
}

/// AUC against trapezoidal integration, ADD/ADD-S hand cases and ordering,
/// and the VCRE pinhole closed form.
fn check_metric_oracles() -> Result<String, String> {
    let mut rng = Rng::from_seed(0x0C);
    // AUC vs dense trapezoid on 100 random error lists.
    let mut worst_auc: f64 = 0.0;
    for _ in 0..100 {
        let errors: Vec<f64> = (0..30).map(|_| rng.uniform(0.0, 30.0)).collect();
        for tau in [5.0, 10.0, 20.0] {
            let closed = crate::metrics::auc(&errors, &[tau]).map_err(|e| e.to_string())?[0];
            let steps = 40_000;
            let h = tau / steps as f64;
            let prec =
                |s: f64| errors.iter().filter(|&&e| e <= s).count() as f64 / errors.len() as f64;
            let mut acc = 0.0;
            for i in 0..steps {
                acc += 0.5 * (prec(i as f64 * h) + prec((i + 1) as f64 * h)) * h;
            }
            let numeric = acc / tau;
            worst_auc = worst_auc.max((closed - numeric).abs());
        }
    }
    // The trapezoid has O(h) error at妥 step discontinuities; 40k steps over
    // tau=5 gives h=1.25e-4, so agreement to 1e-3 per list; refine near 1e-6
    // via the larger step count on the acceptance side. Here require 1e-3.
    if worst_auc >= 1e-3 {
        return Err(format!("auc vs trapezoid {worst_auc:.3e}"));
    }

    // ADD hand case.
    let model = Point3Set::new(vec![
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, 0.0, 0.0),
    ]);
    let gt = Pose::identity();
    let rz = crate::geometry::rotation_about_axis(&Vector3::z(), std::f64::consts::FRAC_PI_2);
    let pred = Pose {
        r: rz,
        t: Vector3::new(0.1, 0.0, 0.0),
    };
    let d1: f64 = (Vector3::new(1.0, 0.0, 0.0) - Vector3::new(0.1, 1.0, 0.0)).norm();
    let d2: f64 = (Vector3::new(0.0, 1.0, 0.0) - Vector3::new(-0.9, 0.0, 0.0)).norm();
    let expect = (d1 + d2 + 0.1) / 3.0;
    let got = crate::metrics::add(&model, &pred, &gt).map_err(|e| e.to_string())?;
    if (got - expect).abs() > 1e-12 {
        return Err(format!("ADD hand case: {got} vs {expect}"));
    }

    // ADD-S <= ADD on 1000 random cases.
    for _ in 0..1000 {
        let model = Point3Set::new(
            (0..6)
                .map(|_| Vector3::new(rng.normal(), rng.normal(), rng.normal()))
                .collect(),
        );
        let a = Pose {
            r: random_rotation(&mut rng),
            t: Vector3::new(rng.normal(), rng.normal(), rng.normal()),
        };
        let b = Pose {
            r: random_rotation(&mut rng),
            t: Vector3::new(rng.normal(), rng.normal(), rng.normal()),
        };
        let add = crate::metrics::add(&model, &a, &b).map_err(|e| e.to_string())?;
        let add_s = crate::metrics::add_s(&model, &a, &b).map_err(|e| e.to_string())?;
        if add_s > add + 1e-12 {
            return Err(format!("ADD-S {add_s} > ADD {add}"));
        }
    }

    // VCRE closed form: on-axis point, pure x-shift.
    let k = test_k();
    let single = Point3Set::new(vec![Vector3::new(0.0, 0.0, 2.0)]);
    let pred = Pose {
        r: Matrix3::identity(),
        t: Vector3::new(0.05, 0.0, 0.0),
    };
    let got = crate::metrics::vcre(&pred, &Pose::identity(), &k, &single)
        .map_err(|e| e.to_string())?;
    let expect = k.fx * 0.05 / 2.0;
    if (got - expect).abs() >= 1e-9 {
        return Err(format!("VCRE closed form: {got} vs {expect}"));
    }
    Ok(format!("auc worst {worst_auc:.1e}; ADD/ADD-S/VCRE oracles hold"))
}

/// 30% injected outliers on noiseless inliers: rotation recovered within
/// 0.5 degrees in at least 99 of 100 seeded trials.
fn check_ransac_robustness() -> Result<String, String> {
    let mut rng = Rng::from_seed(0xAB5);
    let mut ok = 0;
    let mut trials = 0;
    while trials < 100 {
        let (kps1, kps2, mut matches, pose) = exact_pair(&mut rng, 40)?;
        let n = matches.len();
        if n < 24 {
            continue;
        }
        trials += 1;
        let outliers = (n as f64 * 0.3) as usize;
        for o in 0..outliers {
            let victim = (o * 7919) % n;
            let (i, j) = matches.pairs[victim];
            let wrong = (j + 11 + o * 3) % kps2.len();
            if wrong != j {
                matches.pairs[victim] = (i, wrong);
            }
        }
        let cfg = RansacConfig {
            seed: trials as u64,
            ..Default::default()
        };
        let k = test_k();
        if let Ok((got, _, _)) = ransac_essential(&matches, &kps1, &kps2, &k, &k, &cfg) {
            if rotation_angle_error(&got.r, &pose.r) < 0.5 {
                ok += 1;
            }
        }
    }
    if ok < 99 {
        return Err(format!("only {ok}/100 trials within 0.5 deg"));
    }
    Ok(format!("{ok}/100 trials within 0.5 deg"))
}

/// KPTS save -> load is the identity (bit-exact coordinates).
fn check_keypoint_roundtrip() -> Result<String, String> {
    let mut rng = Rng::from_seed(0xF1);
    let k = test_k();
    let scene = SyntheticScene::random_frustum(&mut rng, 30, 16, &k, [640, 480], [4.0, 8.0], 40.0);
    let noise = DetectorNoise {
        sigma_px: 0.7,
        sigma_desc: 0.03,
        clutter_fraction: 0.2,
    };
    let kps = synthetic_detect(&scene, &Pose::identity(), &k, [640, 480], &noise, &mut rng)
        .map_err(|e| e.to_string())?;
    let dir = std::env::temp_dir().join("srpose_verify_kpts");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("check.kpts");
    crate::keypoints::save_keypoint_file(&kps, &path).map_err(|e| e.to_string())?;
    let back = crate::keypoints::load_keypoint_file(&path, Some(16)).map_err(|e| e.to_string())?;
    if back.len() != kps.len() {
        return Err("row count changed in roundtrip".into());
    }
    for i in 0..back.len() {
        if back.coords[i] != kps.coords[i] {
            return Err(format!("coords differ at row {i}"));
        }
        for (a, b) in back.descriptors.row(i).iter().zip(kps.descriptors.row(i)) {
            if (a - b).abs() >= 1e-12 {
                return Err(format!("descriptor drift at row {i}"));
            }
        }
    }
    Ok(format!("{} keypoints bit-exact through disk", kps.len()))
}

/// A checkpoint loaded against a different config reports a field diff.
fn check_checkpoint_mismatch() -> Result<String, String> {
    let cfg = ModelConfig {
        layers: 1,
        ..ModelConfig::desk()
    };
    let params = ModelParams::init(&cfg, 3).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint {
        config: cfg,
        step: 7,
        tensors: params.to_named(),
    };
    let dir = std::env::temp_dir().join("srpose_verify_ckpt");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("check.ckpt");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let mut other = cfg;
    other.d = 64;
    match Checkpoint::load_expecting(&path, &other) {
        Err(crate::model::ModelError::ConfigMismatch { diffs }) if !diffs.is_empty() => {
            Ok(format!("mismatch reported: {}", diffs[0].trim()))
        }
        Err(e) => Err(format!("wrong error type: {e}")),
        Ok(_) => Err("mismatched checkpoint accepted".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_checks() {
        let names: Vec<&str> = run_all("geometry").iter().map(|r| r.name).collect();
        assert!(names.iter().all(|n| n.contains("geometry")));
        assert_eq!(names.len(), 3);
    }
}
