use srpose_kit_core::baseline::*;
use srpose_kit_core::geometry::*;
use srpose_kit_core::keypoints::*;
use srpose_kit_core::rng::Rng;
use nalgebra::Vector3;

fn main() {
    let mut rng = Rng::from_seed(0xA11CE);
    let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0);
    let mut done = 0;
    while done < 1000 {
        let scene = SyntheticScene::random_frustum(&mut rng, 24, 8, &k, [640, 480], [4.0, 8.0], 80.0);
        let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
        let r = rotation_about_axis(&axis, rng.uniform(-0.25, 0.25));
        let mut t = Vector3::new(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.25, 0.25));
        if t.norm() < 0.05 { t = Vector3::new(0.3, 0.0, 0.0); }
        let pose = Pose::new(r, t).unwrap();
        let kps1 = synthetic_detect(&scene, &Pose::identity(), &k, [640, 480], &DetectorNoise::none(), &mut rng).unwrap();
        let kps2 = match synthetic_detect(&scene, &pose, &k, [640, 480], &DetectorNoise::none(), &mut rng) {
            Ok(v) => v, Err(_) => continue,
        };
        let ids1 = kps1.ids.clone().unwrap();
        let ids2 = kps2.ids.clone().unwrap();
        let mut matches = MatchSet::default();
        for (i, id) in ids1.iter().enumerate() {
            if let Some(j) = ids2.iter().position(|x| x == id) {
                matches.pairs.push((i, j));
                matches.scores.push(1.0);
            }
        }
        if matches.len() < 20 { continue; }
        done += 1;
        let e = eight_point(&matches, &kps1, &kps2, &k, &k).unwrap();
        let got = decompose_essential(&e, &matches, &kps1, &kps2, &k, &k).unwrap();
        let re = rotation_angle_error(&got.r, &pose.r);
        let te = translation_angle_error(&got.t, &pose.t).unwrap();
        if re > 1e-5 || te > 1e-5 {
            println!("case {done}: rot_err {re:.3e} trans_err {te:.3e} |t| {:.4} angle {:.2} deg matches {}",
                pose.t.norm(), pose.rotation_angle_deg(), matches.len());
            // essential recovered vs gt
            let egt = essential_from_pose(&pose).unwrap();
            let en = e.0 / e.0.norm();
            let gn = egt.0 / egt.0.norm();
            let ediff = (en - gn).norm().min((en + gn).norm());
            println!("  essential diff {ediff:.3e}");
        }
    }
    println!("done");
}
