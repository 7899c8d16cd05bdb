use nalgebra::Vector3;
use srpose_kit_core::baseline::*;
use srpose_kit_core::geometry::*;
use srpose_kit_core::model::*;
use srpose_kit_core::training::*;

#[test]
#[ignore]
fn exp_translation_diagnosis() {
    let gen = GenConfig {
        pairs: 300,
        seed: 42,
        keypoints_per_view: 48,
        descriptor_dim: 32,
        ..Default::default()
    };
    let ds = generate_dataset(&gen).unwrap();

    // 1. What does classical geometry achieve on this noisy data?
    let mut ransac_angles = Vec::new();
    for s in ds.samples.iter().take(60) {
        let m = match_mutual_nn(&s.kps1, &s.kps2, 0.85);
        if m.len() < 12 { continue; }
        if let Ok((pose, _, _)) = ransac_essential(&m, &s.kps1, &s.kps2, &s.k1, &s.k2, &RansacConfig::default()) {
            if let Ok(a) = translation_angle_error(&pose.t, &s.gt.t) {
                ransac_angles.push(a);
            }
        }
    }
    ransac_angles.sort_by(f64::total_cmp);
    println!("RANSAC trans angle median: {:.2} deg over {} samples", ransac_angles[ransac_angles.len()/2], ransac_angles.len());

    // 2. Rotation-shortcut predictor: t_hat = -R_gt * c_prior + r_hat * e_z
    let c_prior = Vector3::new(0.0, 0.0, 6.0);
    let mut shortcut = Vec::new();
    for s in &ds.samples {
        let t_hat = -(s.gt.r * c_prior) + Vector3::new(0.0, 0.0, 6.0);
        if let Ok(a) = translation_angle_error(&t_hat, &s.gt.t) { shortcut.push(a); }
    }
    shortcut.sort_by(f64::total_cmp);
    println!("rotation-shortcut trans angle median: {:.2} deg", shortcut[shortcut.len()/2]);

    // 3. gt translation norm stats
    let mut norms: Vec<f64> = ds.samples.iter().map(|s| s.gt.t.norm()).collect();
    norms.sort_by(f64::total_cmp);
    println!("gt |t| median {:.3}", norms[norms.len()/2]);
}

#[test]
#[ignore]
fn exp_predicted_norm() {
    // Train briefly, then inspect predicted translation norms/angles.
    let gen = GenConfig { pairs: 800, seed: 42, keypoints_per_view: 48, descriptor_dim: 32, ..Default::default() };
    let tr = generate_dataset(&gen).unwrap();
    let va = generate_dataset(&GenConfig { pairs: 100, seed: 999, split: "val".into(), ..gen.clone() }).unwrap();
    let cfg = ModelConfig::desk();
    let tc = TrainConfig { epochs: 15, batch_size: 16, seed: 1, max_lr: 1e-3, ..Default::default() };
    let out = train(&tr.samples, &va.samples, &cfg, &tc, &LossWeights::default(), None).unwrap();
    let mut norms = Vec::new();
    let mut angles = Vec::new();
    let mut l_t_vals = Vec::new();
    for s in &va.samples {
        let pred = predict_pose(s, &out.params, &cfg).unwrap();
        norms.push(pred.t.norm());
        if let Ok(a) = translation_angle_error(&pred.t, &s.gt.t) { angles.push(a); }
        l_t_vals.push((pred.t - s.gt.t).norm());
    }
    norms.sort_by(f64::total_cmp);
    angles.sort_by(f64::total_cmp);
    l_t_vals.sort_by(f64::total_cmp);
    println!("pred |t| median {:.3}  trans angle median {:.1}  |t-tgt| median {:.3}",
        norms[norms.len()/2], angles[angles.len()/2], l_t_vals[l_t_vals.len()/2]);
}

#[test]
#[ignore]
fn exp_lt_only() {
    let gen = GenConfig { pairs: 800, seed: 42, keypoints_per_view: 48, descriptor_dim: 32, ..Default::default() };
    let tr = generate_dataset(&gen).unwrap();
    let va = generate_dataset(&GenConfig { pairs: 100, seed: 999, split: "val".into(), ..gen.clone() }).unwrap();
    let cfg = ModelConfig::desk();
    let tc = TrainConfig { epochs: 15, batch_size: 16, seed: 1, max_lr: 1e-3, ..Default::default() };
    let w = LossWeights { lambda_tn: 0.0, lambda_ta: 0.0, ..Default::default() };
    let out = train(&tr.samples, &va.samples, &cfg, &tc, &w, None).unwrap();
    let mut norms = Vec::new();
    let mut angles = Vec::new();
    for s in &va.samples {
        let pred = predict_pose(s, &out.params, &cfg).unwrap();
        norms.push(pred.t.norm());
        if let Ok(a) = translation_angle_error(&pred.t, &s.gt.t) { angles.push(a); }
    }
    norms.sort_by(f64::total_cmp);
    angles.sort_by(f64::total_cmp);
    println!("L_t-only: pred |t| median {:.3}  trans angle median {:.1}", norms[norms.len()/2], angles[angles.len()/2]);
}

#[test]
#[ignore]
fn exp_attention_match_mass() {
    let gen = GenConfig { pairs: 400, seed: 42, keypoints_per_view: 48, descriptor_dim: 32, ..Default::default() };
    let tr = generate_dataset(&gen).unwrap();
    let va = generate_dataset(&GenConfig { pairs: 40, seed: 999, split: "val".into(), ..gen.clone() }).unwrap();
    let cfg = ModelConfig::desk();

    let report = |params: &ModelParams, tag: &str| {
        let mut mass_on_match = vec![0.0; cfg.layers];
        let mut count = 0usize;
        for s in &va.samples {
            let (_, _, diag) = forward(s, params, &cfg, true).unwrap();
            let ids1 = s.kps1.ids.as_ref().unwrap();
            let ids2 = s.kps2.ids.as_ref().unwrap();
            for (l, scores) in diag.cross_scores.iter().enumerate() {
                // scores = guided logits (mean over heads), rows image1.
                for i in 0..s.kps1.len() {
                    let Some(j) = ids2.iter().position(|x| *x == ids1[i]) else { continue; };
                    // softmax over row
                    let row: Vec<f64> = (0..s.kps2.len()).map(|c| scores.get(i, c)).collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    mass_on_match[l] += exps[j] / sum;
                    if l == 0 { count += 1; }
                }
            }
        }
        for l in 0..cfg.layers {
            println!("{tag} layer {l}: mean attention mass on true match {:.4} (uniform would be {:.4})",
                mass_on_match[l] / count as f64, 1.0 / 48.0);
        }
    };

    let init_params = ModelParams::init(&cfg, 1).unwrap();
    report(&init_params, "init");
    let tc = TrainConfig { epochs: 10, batch_size: 16, seed: 1, max_lr: 1e-3, ..Default::default() };
    let out = train(&tr.samples, &va.samples, &cfg, &tc, &LossWeights::default(), None).unwrap();
    report(&out.params, "trained");
}

#[test]
#[ignore]
fn exp_linear_probe() {
    use srpose_kit_core::tensor::Tensor;
    let gen = GenConfig { pairs: 800, seed: 42, keypoints_per_view: 48, descriptor_dim: 32, ..Default::default() };
    let tr = generate_dataset(&gen).unwrap();
    let va = generate_dataset(&GenConfig { pairs: 120, seed: 999, split: "val".into(), ..gen.clone() }).unwrap();
    let cfg = ModelConfig::desk();
    let tc = TrainConfig { epochs: 10, batch_size: 16, seed: 1, max_lr: 1e-3, ..Default::default() };
    let out = train(&tr.samples, &va.samples, &cfg, &tc, &LossWeights::default(), None).unwrap();

    // Pooled features: rerun forward and capture the joint embedding by
    // recomputing pooling from diagnostics-free forward... simplest: use
    // predict on a model whose heads we bypass by reading r6/t? Instead:
    // probe = ridge regression from [r6_pred, t_pred, 1] is trivial; we want
    // the 64-d joint. Approximate: use隐 r6 outputs? No - build features via
    // forward() on a modified params with identity-ish heads is intrusive.
    // Instead probe from per-sample handcrafted statistic: mean calibrated
    // coords of both views + predicted r6. This bounds what the HEAD could do
    // with rotation features alone.
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<[f64; 3]> = Vec::new();
    for s in tr.samples.iter().take(600) {
        let (r6, _t, _) = forward(s, &out.params, &cfg, false).unwrap();
        let r = gram_schmidt_6d(&r6).unwrap();
        // quadratic features of R-hat entries (R entries + products with e_z etc.)
        let mut f: Vec<f64> = r.iter().cloned().collect();
        f.push(1.0);
        xs.push(f);
        ys.push([s.gt.t.x, s.gt.t.y, s.gt.t.z]);
    }
    // ridge solve (10 features)
    let k = xs[0].len();
    let mut ata = vec![0.0; k * k];
    let mut atb = vec![[0.0; 3]; k];
    for (x, y) in xs.iter().zip(ys.iter()) {
        for a in 0..k {
            for b in 0..k {
                ata[a * k + b] += x[a] * x[b];
            }
            for c in 0..3 {
                atb[a][c] += x[a] * y[c];
            }
        }
    }
    for a in 0..k { ata[a * k + a] += 1e-3; }
    // solve via nalgebra
    let ata_m = nalgebra::DMatrix::from_row_slice(k, k, &ata);
    let chol = ata_m.cholesky().unwrap();
    let mut w = vec![[0.0; 3]; k];
    for c in 0..3 {
        let b = nalgebra::DVector::from_iterator(k, atb.iter().map(|r| r[c]));
        let sol = chol.solve(&b);
        for a in 0..k { w[a][c] = sol[a]; }
    }
    // eval on val
    let mut angles = Vec::new();
    for s in &va.samples {
        let (r6, _t, _) = forward(s, &out.params, &cfg, false).unwrap();
        let r = gram_schmidt_6d(&r6).unwrap();
        let mut f: Vec<f64> = r.iter().cloned().collect();
        f.push(1.0);
        let mut t_hat = Vector3::zeros();
        for a in 0..k {
            t_hat.x += f[a] * w[a][0];
            t_hat.y += f[a] * w[a][1];
            t_hat.z += f[a] * w[a][2];
        }
        if let Ok(ang) = translation_angle_error(&t_hat, &s.gt.t) { angles.push(ang); }
    }
    angles.sort_by(f64::total_cmp);
    println!("linear probe from predicted-R features: median trans angle {:.1} deg", angles[angles.len()/2]);
    let _ = Tensor::zeros(1,1);
}

#[test]
#[ignore]
fn exp_probe_gt_rotation() {
    let gen = GenConfig { pairs: 800, seed: 42, keypoints_per_view: 48, descriptor_dim: 32, ..Default::default() };
    let tr = generate_dataset(&gen).unwrap();
    let va = generate_dataset(&GenConfig { pairs: 120, seed: 999, split: "val".into(), ..gen.clone() }).unwrap();

    let feats = |s: &PairSample| -> Vec<f64> {
        let mut f: Vec<f64> = s.gt.r.iter().cloned().collect();
        f.push(1.0);
        f
    };
    let k = 10;
    let mut ata = vec![0.0; k * k];
    let mut atb = vec![[0.0; 3]; k];
    for s in &tr.samples {
        let x = feats(s);
        let y = [s.gt.t.x, s.gt.t.y, s.gt.t.z];
        for a in 0..k {
            for b in 0..k { ata[a * k + b] += x[a] * x[b]; }
            for c in 0..3 { atb[a][c] += x[a] * y[c]; }
        }
    }
    for a in 0..k { ata[a * k + a] += 1e-6; }
    let ata_m = nalgebra::DMatrix::from_row_slice(k, k, &ata);
    let chol = ata_m.cholesky().unwrap();
    let mut w = vec![[0.0; 3]; k];
    for c in 0..3 {
        let b = nalgebra::DVector::from_iterator(k, atb.iter().map(|r| r[c]));
        let sol = chol.solve(&b);
        for a in 0..k { w[a][c] = sol[a]; }
    }
    let mut angles = Vec::new();
    for s in &va.samples {
        let x = feats(s);
        let mut t_hat = Vector3::zeros();
        for a in 0..k {
            t_hat.x += x[a] * w[a][0];
            t_hat.y += x[a] * w[a][1];
            t_hat.z += x[a] * w[a][2];
        }
        if let Ok(ang) = translation_angle_error(&t_hat, &s.gt.t) { angles.push(ang); }
    }
    angles.sort_by(f64::total_cmp);
    println!("linear probe from GT-R: median trans angle {:.1} deg", angles[angles.len()/2]);

    // Also re-verify the closed-form shortcut on THIS val set.
    let mut sc = Vec::new();
    for s in &va.samples {
        let t_hat = -(s.gt.r * Vector3::new(0.0, 0.0, 6.0)) + Vector3::new(0.0, 0.0, 6.0);
        if let Ok(a) = translation_angle_error(&t_hat, &s.gt.t) { sc.push(a); }
    }
    sc.sort_by(f64::total_cmp);
    println!("closed-form shortcut on val: median {:.1} deg", sc[sc.len()/2]);
}

#[test]
#[ignore]
fn exp_pure_translation() {
    let gen = GenConfig { pairs: 800, seed: 42, keypoints_per_view: 48, descriptor_dim: 32,
        max_rot_deg: 14.0, ..Default::default() };
    let tr = generate_dataset(&gen).unwrap();
    let va = generate_dataset(&GenConfig { pairs: 100, seed: 999, split: "val".into(), ..gen.clone() }).unwrap();
    let cfg = ModelConfig::desk();
    let tc = TrainConfig { epochs: 20, batch_size: 16, seed: 1, max_lr: 1e-3, ..Default::default() };
    let out = train(&tr.samples, &va.samples, &cfg, &tc, &LossWeights::default(), None).unwrap();
    for e in out.log.epochs.iter().skip(15) {
        println!("epoch {:2} loss {:.4} rot {:5.1} trans {:5.1}", e.epoch, e.mean_loss, e.val_rot_med_deg, e.val_trans_med);
    }
    let mut norms: Vec<f64> = va.samples.iter().map(|s| {
        predict_pose(s, &out.params, &cfg).unwrap().t.norm()
    }).collect();
    norms.sort_by(f64::total_cmp);
    println!("pred |t| median {:.3}", norms[norms.len()/2]);
}

#[test]
#[ignore]
fn exp_depth_sweep() {
    for layers in [3usize, 4] {
        let gen = GenConfig { pairs: 800, seed: 42, keypoints_per_view: 48, descriptor_dim: 32, ..Default::default() };
        let tr = generate_dataset(&gen).unwrap();
        let va = generate_dataset(&GenConfig { pairs: 100, seed: 999, split: "val".into(), ..gen.clone() }).unwrap();
        let cfg = ModelConfig { layers, ..ModelConfig::desk() };
        let tc = TrainConfig { epochs: 20, batch_size: 16, seed: 1, max_lr: 1e-3, ..Default::default() };
        let t0 = std::time::Instant::now();
        let out = train(&tr.samples, &va.samples, &cfg, &tc, &LossWeights::default(), None).unwrap();
        let last = out.log.epochs.last().unwrap();
        let mut norms: Vec<f64> = va.samples.iter().map(|s| predict_pose(s, &out.params, &cfg).unwrap().t.norm()).collect();
        norms.sort_by(f64::total_cmp);
        println!("M={layers}: rot {:.1} trans {:.1} |t| {:.2} ({:?})", last.val_rot_med_deg, last.val_trans_med, norms[norms.len()/2], t0.elapsed());
    }
}

#[test]
#[ignore]
fn exp_long_training() {
    let gen = GenConfig { pairs: 2000, seed: 42, keypoints_per_view: 48, descriptor_dim: 32, ..Default::default() };
    let tr = generate_dataset(&gen).unwrap();
    let va = generate_dataset(&GenConfig { pairs: 100, seed: 999, split: "val".into(), ..gen.clone() }).unwrap();
    let cfg = ModelConfig { mlp_hidden: 64, ..ModelConfig::desk() };
    let tc = TrainConfig { epochs: 100, batch_size: 16, seed: 1, max_lr: 1e-3, ..Default::default() };
    let t0 = std::time::Instant::now();
    let out = train(&tr.samples, &va.samples, &cfg, &tc, &LossWeights::default(), None).unwrap();
    for e in out.log.epochs.iter().step_by(10) {
        println!("epoch {:3} loss {:.4} rot {:5.1} trans {:5.1}", e.epoch, e.mean_loss, e.val_rot_med_deg, e.val_trans_med);
    }
    let last = out.log.epochs.last().unwrap();
    println!("final: rot {:.1} trans {:.1} in {:?}", last.val_rot_med_deg, last.val_trans_med, t0.elapsed());
}
