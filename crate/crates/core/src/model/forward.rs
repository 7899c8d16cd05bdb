//! Forward pass: position encoding, similarity-guided attention layers,
//! pooling, and the regression heads.

use std::rc::Rc;

use crate::geometry::{gram_schmidt_6d, CameraIntrinsics, Pose};
use crate::keypoints::{apply_prompt, KeypointSet, PairSample};
use crate::tensor::{GradientTape, Tensor, Var};
use nalgebra::Vector3;

use super::exec::{Exec, InferExec, TapeExec};
use super::{ModelConfig, ModelError, ModelParams, SimilarityNormalization};

/// Cross-view descriptor similarities in [0, 1]; rows/columns of masked
/// keypoints are zero.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix(pub Tensor);

/// Per-layer cross-attention scores (guided logits, averaged over heads,
/// direction view1 -> view2) for visualization dumps.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub cross_scores: Vec<Tensor>,
}

/// Model parameters leased onto an execution backend.
pub struct ParamsOn<V> {
    pub pe_w: V,
    pub pe_b: V,
    pub layers: Vec<LayerOn<V>>,
    pub rot: MlpOn<V>,
    pub trans: MlpOn<V>,
}

pub struct LayerOn<V> {
    pub self_w: V,
    pub self_b: V,
    pub cross_w: V,
    pub cross_b: V,
    pub ffn: Option<FfnOn<V>>,
}

pub struct FfnOn<V> {
    pub w1: V,
    pub b1: V,
    pub w2: V,
    pub b2: V,
}

pub struct MlpOn<V> {
    pub w1: V,
    pub b1: V,
    pub w2: V,
    pub b2: V,
    pub w3: V,
    pub b3: V,
}

impl<V> ParamsOn<V> {
    /// Named views in the same order as [`ModelParams::to_named`].
    pub fn named(&self) -> Vec<(String, &V)> {
        let mut out: Vec<(String, &V)> = vec![
            ("pe.w".into(), &self.pe_w),
            ("pe.b".into(), &self.pe_b),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.self.w"), &layer.self_w));
            out.push((format!("layer{i}.self.b"), &layer.self_b));
            out.push((format!("layer{i}.cross.w"), &layer.cross_w));
            out.push((format!("layer{i}.cross.b"), &layer.cross_b));
            if let Some(ffn) = &layer.ffn {
                out.push((format!("layer{i}.ffn.w1"), &ffn.w1));
                out.push((format!("layer{i}.ffn.b1"), &ffn.b1));
                out.push((format!("layer{i}.ffn.w2"), &ffn.w2));
                out.push((format!("layer{i}.ffn.b2"), &ffn.b2));
            }
        }
        for (head, name) in [(&self.rot, "rot"), (&self.trans, "trans")] {
            out.push((format!("{name}.w1"), &head.w1));
            out.push((format!("{name}.b1"), &head.b1));
            out.push((format!("{name}.w2"), &head.w2));
            out.push((format!("{name}.b2"), &head.b2));
            out.push((format!("{name}.w3"), &head.w3));
            out.push((format!("{name}.b3"), &head.b3));
        }
        out
    }
}

fn lease<E: Exec>(ex: &E, params: &ModelParams) -> ParamsOn<E::V> {
    let mlp = |m: &super::MlpParams| MlpOn {
        w1: ex.leaf(m.w1.clone()),
        b1: ex.leaf(m.b1.clone()),
        w2: ex.leaf(m.w2.clone()),
        b2: ex.leaf(m.b2.clone()),
        w3: ex.leaf(m.w3.clone()),
        b3: ex.leaf(m.b3.clone()),
    };
    ParamsOn {
        pe_w: ex.leaf(params.pe_w.clone()),
        pe_b: ex.leaf(params.pe_b.clone()),
        layers: params
            .layers
            .iter()
            .map(|l| LayerOn {
                self_w: ex.leaf(l.self_w.clone()),
                self_b: ex.leaf(l.self_b.clone()),
                cross_w: ex.leaf(l.cross_w.clone()),
                cross_b: ex.leaf(l.cross_b.clone()),
                ffn: l.ffn.as_ref().map(|f| FfnOn {
                    w1: ex.leaf(f.w1.clone()),
                    b1: ex.leaf(f.b1.clone()),
                    w2: ex.leaf(f.w2.clone()),
                    b2: ex.leaf(f.b2.clone()),
                }),
            })
            .collect(),
        rot: mlp(&params.rot_head),
        trans: mlp(&params.trans_head),
    }
}

/// Lease parameters onto a gradient tape; the returned handles are the keys
/// for gradient lookup after `backward`.
pub fn lease_params<'t>(tape: &'t GradientTape, params: &ModelParams) -> ParamsOn<Var<'t>> {
    lease(&TapeExec { tape }, params)
}

/// Descriptor cosine similarities mapped through `(cos + 1) / 2`, normalized
/// per the config, with masked rows/columns forced to zero.
pub fn similarity_matrix(
    kps1: &KeypointSet,
    kps2: &KeypointSet,
    normalization: SimilarityNormalization,
) -> Result<SimilarityMatrix, ModelError> {
    for (kps, _side) in [(kps1, 1), (kps2, 2)] {
        for i in 0..kps.len() {
            if kps.valid_mask[i] {
                let n: f64 = kps.descriptors.row(i).iter().map(|v| v * v).sum();
                if n.sqrt() < 1e-12 {
                    return Err(ModelError::ZeroDescriptor { row: i });
                }
            }
        }
    }
    let (n1, n2) = (kps1.len(), kps2.len());
    let mut s = Tensor::zeros(n1, n2);
    for i in 0..n1 {
        if !kps1.valid_mask[i] {
            continue;
        }
        let di = kps1.descriptors.row(i);
        let ni = di.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..n2 {
            if !kps2.valid_mask[j] {
                continue;
            }
            let dj = kps2.descriptors.row(j);
            let nj = dj.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = di.iter().zip(dj).map(|(a, b)| a * b).sum();
            s.set(i, j, (dot / (ni * nj) + 1.0) / 2.0);
        }
    }
    match normalization {
        SimilarityNormalization::Clamp => {
            for v in s.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        SimilarityNormalization::MinMax => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..n1 {
                for j in 0..n2 {
                    if kps1.valid_mask[i] && kps2.valid_mask[j] {
                        let v = s.get(i, j);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let range = hi - lo;
            for i in 0..n1 {
                for j in 0..n2 {
                    if kps1.valid_mask[i] && kps2.valid_mask[j] {
                        let v = if range < 1e-12 {
                            0.5
                        } else {
                            (s.get(i, j) - lo) / range
                        };
                        s.set(i, j, v);
                    }
                }
            }
        }
    }
    Ok(SimilarityMatrix(s))
}

/// Keypoint coordinates as an N x 2 tensor: calibrated through `K^-1` when
/// intrinsic calibration is enabled, raw pixels otherwise.
fn coordinate_matrix(kps: &KeypointSet, k: &CameraIntrinsics, config: &ModelConfig) -> Tensor {
    Tensor::from_fn(kps.len(), 2, |i, j| {
        let p = if config.intrinsic_calibration_enabled {
            k.calibrate_point(kps.coords[i])
        } else {
            kps.coords[i]
        };
        p[j]
    })
}

fn positions_on<E: Exec>(
    ex: &E,
    kps: &KeypointSet,
    k: &CameraIntrinsics,
    p: &ParamsOn<E::V>,
    config: &ModelConfig,
    mask: &Rc<Vec<bool>>,
) -> Result<E::V, ModelError> {
    if !config.position_encoding_enabled {
        return Ok(ex.leaf(Tensor::zeros(kps.len(), config.d)));
    }
    let coords = ex.leaf(coordinate_matrix(kps, k, config));
    let lin = ex.matmul(&coords, &p.pe_w)?;
    let biased = ex.add_row_broadcast(&lin, &p.pe_b)?;
    Ok(ex.row_mask_mul(&biased, mask.clone())?)
}

/// Single linear position encoder over (optionally calibrated) coordinates;
/// masked rows are zeroed. Returns zeros when position encoding is ablated.
pub fn encode_positions(
    kps: &KeypointSet,
    k: &CameraIntrinsics,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    let ex = InferExec;
    let p = lease(&ex, params);
    let mask = Rc::new(kps.valid_mask.clone());
    let v = positions_on(&ex, kps, k, &p, config, &mask)?;
    Ok(ex.tensor(&v))
}

fn self_block_on<E: Exec>(
    ex: &E,
    x: &E::V,
    mask: &Rc<Vec<bool>>,
    w: &E::V,
    b: &E::V,
    config: &ModelConfig,
) -> Result<E::V, ModelError> {
    let d = config.d;
    let dh = config.head_dim();
    let qkv = ex.add_row_broadcast(&ex.matmul(x, w)?, b)?;
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q = ex.slice_cols(&qkv, h * dh, dh)?;
        let key = ex.slice_cols(&qkv, d + h * dh, dh)?;
        let val = ex.slice_cols(&qkv, 2 * d + h * dh, dh)?;
        let logits = ex.scale(&ex.matmul(&q, &ex.transpose(&key))?, 1.0 / (dh as f64).sqrt());
        let probs = ex.softmax_rows_masked(&logits, Some(mask.clone()))?;
        heads.push(ex.matmul(&probs, &val)?);
    }
    let cat = ex.concat_cols(&heads)?;
    let masked = ex.row_mask_mul(&cat, mask.clone())?;
    Ok(ex.add(x, &masked)?)
}

#[allow(clippy::too_many_arguments)]
fn cross_block_on<E: Exec>(
    ex: &E,
    x1: &E::V,
    x2: &E::V,
    mask1: &Rc<Vec<bool>>,
    mask2: &Rc<Vec<bool>>,
    sim: Option<&E::V>,
    w: &E::V,
    b: &E::V,
    config: &ModelConfig,
    diag: Option<&mut Vec<Tensor>>,
) -> Result<(E::V, E::V), ModelError> {
    let d = config.d;
    let dh = config.head_dim();
    let kv1 = ex.add_row_broadcast(&ex.matmul(x1, w)?, b)?;
    let kv2 = ex.add_row_broadcast(&ex.matmul(x2, w)?, b)?;
    let mut heads1 = Vec::with_capacity(config.heads);
    let mut heads2 = Vec::with_capacity(config.heads);
    let mut score_sum: Option<Tensor> = None;
    for h in 0..config.heads {
        let k1 = ex.slice_cols(&kv1, h * dh, dh)?;
        let v1 = ex.slice_cols(&kv1, d + h * dh, dh)?;
        let k2 = ex.slice_cols(&kv2, h * dh, dh)?;
        let v2 = ex.slice_cols(&kv2, d + h * dh, dh)?;
        // Shared bidirectional logits: the 2->1 matrix is exactly the
        // transpose of the 1->2 matrix.
        let a12 = ex.scale(&ex.matmul(&k1, &ex.transpose(&k2))?, 1.0 / (dh as f64).sqrt());
        let guided = match sim {
            Some(s) => ex.mul(&a12, s)?,
            None => a12,
        };
        if diag.is_some() {
            let t = ex.tensor(&guided);
            score_sum = Some(match score_sum.take() {
                Some(acc) => crate::tensor::add(&acc, &t)?,
                None => t,
            });
        }
        let p12 = ex.softmax_rows_masked(&guided, Some(mask2.clone()))?;
        heads1.push(ex.matmul(&p12, &v2)?);
        let a21 = ex.transpose(&guided);
        let p21 = ex.softmax_rows_masked(&a21, Some(mask1.clone()))?;
        heads2.push(ex.matmul(&p21, &v1)?);
    }
    if let (Some(out), Some(sum)) = (diag, score_sum) {
        out.push(crate::tensor::scale(&sum, 1.0 / config.heads as f64));
    }
    let o1 = ex.row_mask_mul(&ex.concat_cols(&heads1)?, mask1.clone())?;
    let o2 = ex.row_mask_mul(&ex.concat_cols(&heads2)?, mask2.clone())?;
    Ok((ex.add(x1, &o1)?, ex.add(x2, &o2)?))
}

fn mlp_on<E: Exec>(ex: &E, f: &E::V, m: &MlpOn<E::V>) -> Result<E::V, ModelError> {
    let h1 = ex.relu(&ex.add_row_broadcast(&ex.matmul(f, &m.w1)?, &m.b1)?);
    let h2 = ex.relu(&ex.add_row_broadcast(&ex.matmul(&h1, &m.w2)?, &m.b2)?);
    Ok(ex.add_row_broadcast(&ex.matmul(&h2, &m.w3)?, &m.b3)?)
}

/// Residual per-token feed-forward sublayer; padded rows stay zero.
fn ffn_on<E: Exec>(
    ex: &E,
    x: &E::V,
    mask: &Rc<Vec<bool>>,
    f: &FfnOn<E::V>,
) -> Result<E::V, ModelError> {
    let h = ex.relu(&ex.add_row_broadcast(&ex.matmul(x, &f.w1)?, &f.b1)?);
    let out = ex.add_row_broadcast(&ex.matmul(&h, &f.w2)?, &f.b2)?;
    let masked = ex.row_mask_mul(&out, mask.clone())?;
    Ok(ex.add(x, &masked)?)
}

fn check_widths(pair: &PairSample, config: &ModelConfig) -> Result<(), ModelError> {
    for kps in [&pair.kps1, &pair.kps2] {
        if kps.descriptor_dim() != config.d {
            return Err(ModelError::DescriptorWidth {
                expected: config.d,
                got: kps.descriptor_dim(),
            });
        }
    }
    Ok(())
}

fn forward_core<E: Exec>(
    ex: &E,
    p: &ParamsOn<E::V>,
    pair: &PairSample,
    config: &ModelConfig,
    collect_diagnostics: bool,
) -> Result<(E::V, E::V, Diagnostics), ModelError> {
    config.validate()?;
    check_widths(pair, config)?;

    // Prompt masking on the reference view.
    let kps1 = match &pair.prompt {
        Some(prompt) => apply_prompt(&pair.kps1, prompt)?,
        None => pair.kps1.clone(),
    };
    let kps2 = &pair.kps2;

    let mask1 = Rc::new(kps1.valid_mask.clone());
    let mask2 = Rc::new(kps2.valid_mask.clone());

    let pe1 = positions_on(ex, &kps1, &pair.k1, p, config, &mask1)?;
    let pe2 = positions_on(ex, kps2, &pair.k2, p, config, &mask2)?;

    let mut x1 = ex.leaf(kps1.descriptors.clone());
    let mut x2 = ex.leaf(kps2.descriptors.clone());

    let sim = if config.cross_attention_enabled && config.guidance_enabled {
        Some(ex.leaf(similarity_matrix(&kps1, kps2, config.similarity_normalization)?.0))
    } else {
        None
    };

    let mut diagnostics = Diagnostics::default();
    for layer in &p.layers {
        // Position embeddings join the token stream at each layer boundary,
        // so every downstream projection (self qkv, cross keys/values, FFN)
        // sees calibrated positions.
        x1 = ex.add(&x1, &pe1)?;
        x2 = ex.add(&x2, &pe2)?;
        x1 = self_block_on(ex, &x1, &mask1, &layer.self_w, &layer.self_b, config)?;
        x2 = self_block_on(ex, &x2, &mask2, &layer.self_w, &layer.self_b, config)?;
        if config.cross_attention_enabled {
            let diag = collect_diagnostics.then_some(&mut diagnostics.cross_scores);
            let (n1, n2) = cross_block_on(
                ex,
                &x1,
                &x2,
                &mask1,
                &mask2,
                sim.as_ref(),
                &layer.cross_w,
                &layer.cross_b,
                config,
                diag,
            )?;
            x1 = n1;
            x2 = n2;
        } else {
            // Ablation: the cross slot acts as a second self-attention block.
            x1 = self_block_on(ex, &x1, &mask1, &layer.cross_w, &layer.cross_b, config)?;
            x2 = self_block_on(ex, &x2, &mask2, &layer.cross_w, &layer.cross_b, config)?;
        }
        if let Some(ffn) = &layer.ffn {
            x1 = ffn_on(ex, &x1, &mask1, ffn)?;
            x2 = ffn_on(ex, &x2, &mask2, ffn)?;
        }
    }

    let pooled1 = ex.mean_valid_rows(&x1, mask1)?;
    let pooled2 = ex.mean_valid_rows(&x2, mask2)?;
    let joint = ex.concat_cols(&[pooled1, pooled2])?;

    let r6 = mlp_on(ex, &joint, &p.rot)?;
    let t = mlp_on(ex, &joint, &p.trans)?;
    Ok((r6, t, diagnostics))
}

/// Inference forward pass: `(r6, t, diagnostics)`. Pure and deterministic.
pub fn forward(
    pair: &PairSample,
    params: &ModelParams,
    config: &ModelConfig,
    collect_diagnostics: bool,
) -> Result<([f64; 6], [f64; 3], Diagnostics), ModelError> {
    let ex = InferExec;
    let p = lease(&ex, params);
    let (r6, t, diag) = forward_core(&ex, &p, pair, config, collect_diagnostics)?;
    let r6 = ex.tensor(&r6);
    let t = ex.tensor(&t);
    Ok((
        [
            r6.get(0, 0),
            r6.get(0, 1),
            r6.get(0, 2),
            r6.get(0, 3),
            r6.get(0, 4),
            r6.get(0, 5),
        ],
        [t.get(0, 0), t.get(0, 1), t.get(0, 2)],
        diag,
    ))
}

/// Training forward pass on a tape; gradients flow to the leased parameters.
pub fn forward_on_tape<'t>(
    tape: &'t GradientTape,
    pair: &PairSample,
    params: &ParamsOn<Var<'t>>,
    config: &ModelConfig,
) -> Result<(Var<'t>, Var<'t>, Diagnostics), ModelError> {
    let ex = TapeExec { tape };
    forward_core(&ex, params, pair, config, false)
}

/// Run the network and orthonormalize the rotation head output into a pose.
pub fn predict_pose(
    pair: &PairSample,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Pose, ModelError> {
    let (r6, t, _) = forward(pair, params, config, false)?;
    let r = gram_schmidt_6d(&r6)?;
    Ok(Pose {
        r,
        t: Vector3::new(t[0], t[1], t[2]),
    })
}

/// Value-level self-attention block (one image), exposed for testing. The
/// position embeddings are incorporated into the token stream first, so the
/// residual carries `x + pe`.
pub fn self_attention_block(
    x: &Tensor,
    pe: &Tensor,
    mask: &[bool],
    w: &Tensor,
    b: &Tensor,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    let ex = InferExec;
    let xin = ex.add(&ex.leaf(x.clone()), &ex.leaf(pe.clone()))?;
    let out = self_block_on(
        &ex,
        &xin,
        &Rc::new(mask.to_vec()),
        &ex.leaf(w.clone()),
        &ex.leaf(b.clone()),
        config,
    )?;
    Ok(ex.tensor(&out))
}

/// Value-level guided cross-attention block, exposed for testing.
#[allow(clippy::too_many_arguments)]
pub fn guided_cross_attention_block(
    x1: &Tensor,
    x2: &Tensor,
    mask1: &[bool],
    mask2: &[bool],
    sim: Option<&SimilarityMatrix>,
    w: &Tensor,
    b: &Tensor,
    config: &ModelConfig,
) -> Result<(Tensor, Tensor), ModelError> {
    let ex = InferExec;
    let s = sim.map(|s| ex.leaf(s.0.clone()));
    let (o1, o2) = cross_block_on(
        &ex,
        &ex.leaf(x1.clone()),
        &ex.leaf(x2.clone()),
        &Rc::new(mask1.to_vec()),
        &Rc::new(mask2.to_vec()),
        s.as_ref(),
        &ex.leaf(w.clone()),
        &ex.leaf(b.clone()),
        config,
        None,
    )?;
    Ok((ex.tensor(&o1), ex.tensor(&o2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_about_axis;
    use crate::keypoints::{synthetic_detect, DetectorNoise, Scenario, SyntheticScene};
    use crate::rng::Rng;
    use nalgebra::Matrix3;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
            ..ModelConfig::desk()
        }
    }

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0)
    }

    fn toy_pair(rng: &mut Rng, config: &ModelConfig) -> PairSample {
        let k = test_k();
        let scene = SyntheticScene::random_frustum(
            rng,
            24,
            config.d,
            &k,
            [640, 480],
            [4.0, 8.0],
            60.0,
        );
        let pose2 = Pose::new(
            rotation_about_axis(&nalgebra::Vector3::new(0.1, 1.0, 0.05), 0.15),
            nalgebra::Vector3::new(0.3, -0.1, 0.05),
        )
        .unwrap();
        let noise = DetectorNoise {
            sigma_px: 0.3,
            sigma_desc: 0.02,
            clutter_fraction: 0.2,
        };
        let kps1 = synthetic_detect(&scene, &Pose::identity(), &k, [640, 480], &noise, rng).unwrap();
        let kps2 = synthetic_detect(&scene, &pose2, &k, [640, 480], &noise, rng).unwrap();
        PairSample {
            kps1,
            kps2,
            k1: k,
            k2: k,
            prompt: None,
            gt: pose2,
            scenario: Scenario::CameraToWorld,
        }
    }

    #[test]
    fn similarity_matrix_closed_forms() {
        let d = 4;
        let mut desc = Tensor::zeros(3, d);
        desc.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        desc.row_mut(1).copy_from_slice(&[-1.0, 0.0, 0.0, 0.0]);
        desc.row_mut(2).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        let coords = vec![[0.0, 0.0]; 3];
        let kps = KeypointSet::new(coords, desc, vec![true; 3]);
        let s = similarity_matrix(&kps, &kps, SimilarityNormalization::Clamp)
            .unwrap()
            .0;
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12, "identical -> 1");
        assert!(s.get(0, 1).abs() < 1e-12, "antipodal -> 0");
        assert!((s.get(0, 2) - 0.5).abs() < 1e-12, "orthogonal -> 0.5");
    }

    #[test]
    fn similarity_rejects_zero_descriptor() {
        let desc = Tensor::zeros(1, 4);
        let kps = KeypointSet::new(vec![[0.0, 0.0]], desc, vec![true]);
        assert!(matches!(
            similarity_matrix(&kps, &kps, SimilarityNormalization::Clamp),
            Err(ModelError::ZeroDescriptor { row: 0 })
        ));
    }

    #[test]
    fn position_encoding_ablation_returns_zeros() {
        let mut rng = Rng::from_seed(401);
        let mut config = toy_config();
        let params = ModelParams::init(&config, 1).unwrap();
        let pair = toy_pair(&mut rng, &config);
        config.position_encoding_enabled = false;
        let pe = encode_positions(&pair.kps1, &pair.k1, &params, &config).unwrap();
        assert!(pe.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn principal_point_embedding_equals_bias() {
        let config = toy_config();
        let mut params = ModelParams::init(&config, 2).unwrap();
        params.pe_b = Tensor::from_fn(1, config.d, |_, j| j as f64 * 0.1);
        let k = test_k();
        let desc = Tensor::from_fn(1, config.d, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let kps = KeypointSet::new(vec![[k.cx, k.cy]], desc, vec![true]);
        let pe = encode_positions(&kps, &k, &params, &config).unwrap();
        for j in 0..config.d {
            assert!((pe.get(0, j) - params.pe_b.get(0, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn calibration_makes_embeddings_camera_invariant() {
        // Two cameras viewing the same ray produce the same calibrated
        // coordinates, hence identical embeddings when IC is enabled.
        let config = toy_config();
        let params = ModelParams::init(&config, 3).unwrap();
        let ka = CameraIntrinsics::new(400.0, 420.0, 320.0, 240.0);
        let kb = CameraIntrinsics::new(800.0, 760.0, 330.0, 260.0);
        let ray = [0.21, -0.13];
        let pa = ka.uncalibrate_point(ray);
        let pb = kb.uncalibrate_point(ray);
        let desc = Tensor::from_fn(1, config.d, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let kps_a = KeypointSet::new(vec![pa], desc.clone(), vec![true]);
        let kps_b = KeypointSet::new(vec![pb], desc, vec![true]);
        let ea = encode_positions(&kps_a, &ka, &params, &config).unwrap();
        let eb = encode_positions(&kps_b, &kb, &params, &config).unwrap();
        assert!(ea.max_abs_diff(&eb) < 1e-12);

        let mut no_ic = config;
        no_ic.intrinsic_calibration_enabled = false;
        let kps_a = KeypointSet::new(
            vec![pa],
            Tensor::from_fn(1, config.d, |_, j| if j == 0 { 1.0 } else { 0.0 }),
            vec![true],
        );
        let kps_b = KeypointSet::new(
            vec![pb],
            Tensor::from_fn(1, config.d, |_, j| if j == 0 { 1.0 } else { 0.0 }),
            vec![true],
        );
        let ea = encode_positions(&kps_a, &ka, &params, &no_ic).unwrap();
        let eb = encode_positions(&kps_b, &kb, &params, &no_ic).unwrap();
        assert!(ea.max_abs_diff(&eb) > 1e-6, "raw pixels should differ");
    }

    #[test]
    fn single_keypoint_self_attention_degenerate_softmax() {
        // One valid token: softmax over itself is 1, so the output is
        // x + value-projection of (x + pe).
        let config = ModelConfig {
            d: 4,
            layers: 1,
            heads: 1,
            mlp_hidden: 4,
            ..ModelConfig::desk()
        };
        let mut rng = Rng::from_seed(405);
        let x = Tensor::from_fn(1, 4, |_, _| rng.normal());
        let pe = Tensor::from_fn(1, 4, |_, _| rng.normal());
        let w = Tensor::from_fn(4, 12, |_, _| rng.normal());
        let b = Tensor::zeros(1, 12);
        let out = self_attention_block(&x, &pe, &[true], &w, &b, &config).unwrap();
        let xin = crate::tensor::add(&x, &pe).unwrap();
        let qkv = crate::tensor::matmul_nn(&xin, &w).unwrap();
        let v = crate::tensor::slice_cols(&qkv, 8, 4).unwrap();
        let expect = crate::tensor::add(&xin, &v).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attention_logit_scaling_matches_hand_computation() {
        // Single head, two tokens: logits must equal q k^T / sqrt(d/heads).
        let config = ModelConfig {
            d: 2,
            layers: 1,
            heads: 1,
            mlp_hidden: 2,
            ..ModelConfig::desk()
        };
        let x = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let pe = Tensor::zeros(2, 2);
        // W maps x to [q|k|v]; pick it so q and k are easy to read off.
        let mut w = Tensor::zeros(2, 6);
        w.set(0, 0, 1.0); // q = x
        w.set(1, 1, 1.0);
        w.set(0, 2, 2.0); // k = 2x
        w.set(1, 3, 2.0);
        w.set(0, 4, 1.0); // v = x
        w.set(1, 5, 1.0);
        let b = Tensor::zeros(1, 6);
        let out = self_attention_block(&x, &pe, &[true, true], &w, &b, &config).unwrap();
        // logits = q k^T / sqrt(2): diag 2/sqrt(2), off-diag 0.
        let l = 2.0 / 2.0_f64.sqrt();
        let p_same = l.exp() / (l.exp() + 1.0);
        let p_other = 1.0 / (l.exp() + 1.0);
        // Token 0 output = x0 + p_same * v0 + p_other * v1.
        let expect00 = 1.0 + p_same * 1.0 + p_other * 0.0;
        assert!((out.get(0, 0) - expect00).abs() < 1e-12);
        let expect01 = 0.0 + p_same * 0.0 + p_other * 1.0;
        assert!((out.get(0, 1) - expect01).abs() < 1e-12);
    }

    #[test]
    fn cross_block_zero_similarity_row_uniform_attention() {
        // S row of zeros scales all logits to 0 -> uniform over valid cols.
        let config = ModelConfig {
            d: 2,
            layers: 1,
            heads: 1,
            mlp_hidden: 2,
            ..ModelConfig::desk()
        };
        let mut rng = Rng::from_seed(407);
        let x1 = Tensor::from_fn(1, 2, |_, _| rng.normal());
        let x2 = Tensor::from_fn(2, 2, |_, _| rng.normal());
        let w = Tensor::from_fn(2, 4, |_, _| rng.normal());
        let b = Tensor::zeros(1, 4);
        let s = SimilarityMatrix(Tensor::zeros(1, 2));
        let (o1, _) = guided_cross_attention_block(
            &x1,
            &x2,
            &[true],
            &[true, true],
            Some(&s),
            &w,
            &b,
            &config,
        )
        .unwrap();
        // Uniform attention over both tokens of image 2 on the value
        // projection.
        let kv2 = crate::tensor::add_row_broadcast(
            &crate::tensor::matmul_nn(&x2, &w).unwrap(),
            &b,
        )
        .unwrap();
        let v2 = crate::tensor::slice_cols(&kv2, 2, 2).unwrap();
        let avg = crate::tensor::mean_over_rows(&v2).unwrap();
        let expect = crate::tensor::add(&x1, &avg).unwrap();
        assert!(o1.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_and_valid() {
        let mut rng = Rng::from_seed(409);
        let config = toy_config();
        let params = ModelParams::init(&config, 5).unwrap();
        let pair = toy_pair(&mut rng, &config);
        let (r6a, ta, _) = forward(&pair, &params, &config, false).unwrap();
        let (r6b, tb, _) = forward(&pair, &params, &config, false).unwrap();
        for (a, b) in r6a.iter().zip(r6b.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ta.iter().zip(tb.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(r6a.iter().chain(ta.iter()).all(|v| v.is_finite()));
        let r = gram_schmidt_6d(&r6a).unwrap();
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn forward_is_directional() {
        let mut rng = Rng::from_seed(411);
        let config = toy_config();
        let params = ModelParams::init(&config, 6).unwrap();
        let pair = toy_pair(&mut rng, &config);
        let swapped = PairSample {
            kps1: pair.kps2.clone(),
            kps2: pair.kps1.clone(),
            k1: pair.k2,
            k2: pair.k1,
            prompt: None,
            gt: pair.gt.inverse(),
            scenario: pair.scenario,
        };
        let (a, _, _) = forward(&pair, &params, &config, false).unwrap();
        let (b, _, _) = forward(&swapped, &params, &config, false).unwrap();
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "swapping views should change the output");
    }

    #[test]
    fn tape_and_infer_paths_agree_bitwise() {
        let mut rng = Rng::from_seed(413);
        let config = toy_config();
        let params = ModelParams::init(&config, 7).unwrap();
        let pair = toy_pair(&mut rng, &config);
        let (r6_i, t_i, _) = forward(&pair, &params, &config, false).unwrap();
        let tape = GradientTape::new();
        let pv = lease_params(&tape, &params);
        let (r6_t, t_t, _) = forward_on_tape(&tape, &pair, &pv, &config).unwrap();
        let r6_t = r6_t.value();
        let t_t = t_t.value();
        for (j, v) in r6_i.iter().enumerate() {
            assert_eq!(v.to_bits(), r6_t.get(0, j).to_bits());
        }
        for (j, v) in t_i.iter().enumerate() {
            assert_eq!(v.to_bits(), t_t.get(0, j).to_bits());
        }
    }

    #[test]
    fn padding_invariance() {
        let mut rng = Rng::from_seed(415);
        let config = toy_config();
        let params = ModelParams::init(&config, 8).unwrap();
        let pair = toy_pair(&mut rng, &config);
        let n = pair.kps1.len().max(pair.kps2.len());
        let pad_a = PairSample {
            kps1: crate::keypoints::pad_to(&pair.kps1, n).unwrap(),
            kps2: crate::keypoints::pad_to(&pair.kps2, n).unwrap(),
            ..pair.clone()
        };
        let pad_b = PairSample {
            kps1: crate::keypoints::pad_to(&pair.kps1, n + 16).unwrap(),
            kps2: crate::keypoints::pad_to(&pair.kps2, n + 16).unwrap(),
            ..pair.clone()
        };
        let (r6a, ta, _) = forward(&pad_a, &params, &config, false).unwrap();
        let (r6b, tb, _) = forward(&pad_b, &params, &config, false).unwrap();
        for (a, b) in r6a.iter().zip(r6b.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for (a, b) in ta.iter().zip(tb.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn guidance_identity_with_all_ones_similarity() {
        // Identical descriptors everywhere make S all-ones on valid entries;
        // the guided model must then match the guidance-disabled model
        // bit-for-bit.
        let mut rng = Rng::from_seed(417);
        let config = toy_config();
        let params = ModelParams::init(&config, 9).unwrap();
        let mut pair = toy_pair(&mut rng, &config);
        let base = rng.unit_vector(config.d);
        for kps in [&mut pair.kps1, &mut pair.kps2] {
            for i in 0..kps.len() {
                kps.descriptors.row_mut(i).copy_from_slice(&base);
            }
        }
        let (r6a, ta, _) = forward(&pair, &params, &config, false).unwrap();
        let mut no_guidance = config;
        no_guidance.guidance_enabled = false;
        let (r6b, tb, _) = forward(&pair, &params, &no_guidance, false).unwrap();
        for (a, b) in r6a.iter().zip(r6b.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ta.iter().zip(tb.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn prompt_masking_equals_prefiltering() {
        let mut rng = Rng::from_seed(419);
        let config = toy_config();
        let params = ModelParams::init(&config, 10).unwrap();
        let mut pair = toy_pair(&mut rng, &config);
        pair.scenario = Scenario::ObjectToCamera;
        let prompt = crate::keypoints::ObjectPrompt::new([100.0, 80.0], [540.0, 400.0]);
        pair.prompt = Some(prompt);
        let (r6a, ta, _) = forward(&pair, &params, &config, false).unwrap();

        let filtered = apply_prompt(&pair.kps1, &prompt).unwrap().compact();
        let prefiltered = PairSample {
            kps1: filtered,
            prompt: None,
            ..pair.clone()
        };
        let (r6b, tb, _) = forward(&prefiltered, &params, &config, false).unwrap();
        for (a, b) in r6a.iter().zip(r6b.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in ta.iter().zip(tb.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn untrained_errors_are_at_chance_level() {
        // Median rotation error of an untrained model vs the median error of
        // random rotations: same ballpark (within 20%).
        let mut rng = Rng::from_seed(421);
        let config = toy_config();
        let params = ModelParams::init(&config, 11).unwrap();
        let mut model_errs = Vec::new();
        let mut chance_errs = Vec::new();
        for _ in 0..40 {
            let pair = toy_pair(&mut rng, &config);
            let pred = predict_pose(&pair, &params, &config).unwrap();
            model_errs.push(crate::geometry::rotation_angle_error(&pred.r, &pair.gt.r));
            let random = crate::geometry::random_rotation(&mut rng);
            chance_errs.push(crate::geometry::rotation_angle_error(&random, &pair.gt.r));
        }
        model_errs.sort_by(f64::total_cmp);
        chance_errs.sort_by(f64::total_cmp);
        let med_model = model_errs[model_errs.len() / 2];
        let med_chance = chance_errs[chance_errs.len() / 2];
        // Untrained output is a near-constant rotation; against gts that
        // cluster near a mild pose, both medians sit in the tens of degrees.
        assert!(
            med_model > 0.5 * med_chance,
            "untrained model median {med_model} suspiciously below chance {med_chance}"
        );
    }

    #[test]
    fn descriptor_width_checked() {
        let mut rng = Rng::from_seed(423);
        let config = toy_config();
        let params = ModelParams::init(&config, 12).unwrap();
        let mut pair = toy_pair(&mut rng, &config);
        pair.kps1.descriptors = Tensor::zeros(pair.kps1.len(), config.d + 1);
        assert!(matches!(
            forward(&pair, &params, &config, false),
            Err(ModelError::DescriptorWidth { .. })
        ));
    }

    #[test]
    fn diagnostics_shape() {
        let mut rng = Rng::from_seed(425);
        let config = toy_config();
        let params = ModelParams::init(&config, 13).unwrap();
        let pair = toy_pair(&mut rng, &config);
        let (_, _, diag) = forward(&pair, &params, &config, true).unwrap();
        assert_eq!(diag.cross_scores.len(), config.layers);
        assert_eq!(
            diag.cross_scores[0].shape(),
            (pair.kps1.len(), pair.kps2.len())
        );
    }

    #[test]
    fn all_rows_masked_error() {
        let mut rng = Rng::from_seed(427);
        let config = toy_config();
        let params = ModelParams::init(&config, 14).unwrap();
        let mut pair = toy_pair(&mut rng, &config);
        for v in &mut pair.kps2.valid_mask {
            *v = false;
        }
        match forward(&pair, &params, &config, false) {
            Err(ModelError::Tensor(crate::tensor::TensorError::AllRowsMasked))
            | Err(ModelError::Tensor(crate::tensor::TensorError::EmptyInput(_))) => {}
            other => panic!("expected masked-rows failure, got {other:?}"),
        }
    }

    #[test]
    fn micro_model_end_to_end_gradient_check() {
        // d=8, one layer, one head, 4 keypoints: perturb one weight matrix
        // and compare analytic gradients with finite differences through a
        // scalar readout of (r6, t).
        let config = ModelConfig {
            d: 8,
            layers: 1,
            heads: 1,
            mlp_hidden: 8,
            ..ModelConfig::desk()
        };
        let mut rng = Rng::from_seed(429);
        let k = test_k();
        let scene =
            SyntheticScene::random_frustum(&mut rng, 4, 8, &k, [640, 480], [4.0, 6.0], 100.0);
        let pose2 = Pose::new(
            rotation_about_axis(&nalgebra::Vector3::new(0.0, 1.0, 0.0), 0.1),
            nalgebra::Vector3::new(0.2, 0.0, 0.0),
        )
        .unwrap();
        let kps1 = synthetic_detect(
            &scene,
            &Pose::identity(),
            &k,
            [640, 480],
            &DetectorNoise::none(),
            &mut rng,
        )
        .unwrap();
        let kps2 =
            synthetic_detect(&scene, &pose2, &k, [640, 480], &DetectorNoise::none(), &mut rng)
                .unwrap();
        let pair = PairSample {
            kps1,
            kps2,
            k1: k,
            k2: k,
            prompt: None,
            gt: pose2,
            scenario: Scenario::CameraToWorld,
        };
        let params = ModelParams::init(&config, 15).unwrap();

        // Scalar readout: weighted sum of r6 and t entries.
        let readout = |params: &ModelParams| -> f64 {
            let (r6, t, _) = forward(&pair, params, &config, false).unwrap();
            r6.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum::<f64>()
                + t.iter().enumerate().map(|(i, v)| (10 - i) as f64 * 0.5 * v).sum::<f64>()
        };

        // Analytic gradients.
        let tape = GradientTape::new();
        let pv = lease_params(&tape, &params);
        let (r6, t, _) = forward_on_tape(&tape, &pair, &pv, &config).unwrap();
        let wr = tape.leaf(Tensor::row_vector(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let wt = tape.leaf(Tensor::row_vector(&[5.0, 4.5, 4.0]));
        let loss = r6
            .mul(wr)
            .unwrap()
            .sum_all()
            .add(t.mul(wt).unwrap().sum_all())
            .unwrap();
        let grads = tape.backward(loss).unwrap();

        // Check gradient of one attention weight matrix and one MLP matrix.
        for (name, var) in pv.named() {
            if name != "layer0.self.w" && name != "rot.w1" && name != "pe.w" {
                continue;
            }
            let analytic = grads.get_or_zeros(*var);
            let base = var.value();
            let (rows, cols) = base.shape();
            // Probe a handful of entries with central differences.
            let mut rng_probe = Rng::from_seed(431);
            for _ in 0..6 {
                let i = rng_probe.below(rows);
                let j = rng_probe.below(cols);
                let eps = 1e-5;
                let mut plus = params.clone();
                let mut minus = params.clone();
                let set = |p: &mut ModelParams, v: f64| {
                    let mut named = p.to_named();
                    let t = named.get_mut(&name).unwrap();
                    t.set(i, j, v);
                    *p = ModelParams::from_named(&config, &named).unwrap();
                };
                set(&mut plus, base.get(i, j) + eps);
                set(&mut minus, base.get(i, j) - eps);
                let numeric = (readout(&plus) - readout(&minus)) / (2.0 * eps);
                let got = analytic.get(i, j);
                let rel = (got - numeric).abs() / got.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{name}[{i}][{j}]: analytic {got} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }
}
