use skd_autodiff::{NodeId, Tape, Tensor};
use skd_core::geometry::{project_box3d_to_box2d, Box2D, Box3D, CameraIntrinsics};
use skd_core::losses::{
    depth_loss, distillation_core_loss, prior_loss, projection_loss, uncertainty_distillation_loss,
    ALPHA,
};
use skd_core::model::{metric_vector, Architecture, ModelConfig};
use skd_core::scenes::SceneConfig;
use skd_core::CoreError;

fn l_ud(l_d: f64, u_dsn: f64, u_mdn: f64) -> (f64, [f64; 3]) {
    let mut tape = Tape::new();
    let ld = tape.param(Tensor::scalar(l_d));
    let a = tape.param(Tensor::vector(vec![u_dsn]));
    let b = tape.param(Tensor::vector(vec![u_mdn]));
    let loss = uncertainty_distillation_loss(&mut tape, ld, a, b, ALPHA, false).unwrap();
    let g = tape.backward(loss).unwrap();
    let at = |id: NodeId| g.get(id).unwrap().data()[0];
    (tape.item(loss), [at(ld), at(a), at(b)])
}

#[test]
fn capped_uncertainty_reference_value() {
    assert!((l_ud(1.0, 0.2, 0.2).0 - 10.01).abs() < 1e-9);
}

#[test]
fn zero_distillation_leaves_the_regularizer() {
    assert!((l_ud(0.0, 0.05, 0.05).0 - 0.0025).abs() < 1e-9);
}

#[test]
fn uncapped_uncertainty_reference_value() {
    let want = 1.0 / 0.06 + 0.06 * 0.06;
    assert!((l_ud(1.0, 0.06, 0.06).0 - want).abs() < 1e-9);
    assert!((want - 16.670_266_666_666_667).abs() < 1e-9);
}

#[test]
fn uncertainty_gradient_vanishes_under_the_cap() {
    for (a, b) in [(0.2, 0.2), (0.05, 0.3), (1.0, 4.0), (0.11, 0.1)] {
        let (_, g) = l_ud(0.7, a, b);
        assert_eq!(g[1], 0.0, "U_dsn={a} U_mdn={b}");
        assert_eq!(g[2], 0.0, "U_dsn={a} U_mdn={b}");
        assert_eq!(g[0], 1.0 / ALPHA);
    }
}

#[test]
fn below_the_cap_uncertainty_trades_weight_for_regularizer() {
    let (l_d, u) = (0.01, 0.05);
    let (_, g) = l_ud(l_d, u, u);
    // d/dU_dsn of L_d/m + m^2 with m = (U_dsn + U_mdn)/2
    let want = 0.5 * (-l_d / (u * u) + 2.0 * u);
    assert!((g[1] - want).abs() < 1e-12);
    assert_eq!(g[1], g[2]);
    assert!((g[0] - 1.0 / u).abs() < 1e-12);
}

#[test]
fn distillation_weight_never_drops_below_ten() {
    for u in [1e-3, 0.03, 0.0999, 0.1, 0.5, 50.0] {
        let (_, g) = l_ud(0.3, u, u);
        assert!(g[0] >= 10.0 - 1e-12, "U={u}: weight {}", g[0]);
    }
}

#[test]
fn detached_denominator_trains_uncertainty_by_the_regularizer_only() {
    let mut tape = Tape::new();
    let ld = tape.param(Tensor::scalar(0.01));
    let a = tape.param(Tensor::vector(vec![0.05]));
    let b = tape.param(Tensor::vector(vec![0.05]));
    let loss = uncertainty_distillation_loss(&mut tape, ld, a, b, ALPHA, true).unwrap();
    assert!((tape.item(loss) - (0.01 / 0.05 + 0.0025)).abs() < 1e-12);
    let g = tape.backward(loss).unwrap();
    assert!((g.get(a).unwrap().data()[0] - 0.05).abs() < 1e-12);
}

#[test]
fn nonpositive_uncertainty_is_a_contract_violation() {
    for bad in [0.0, -0.1, f64::NAN] {
        let mut tape = Tape::new();
        let ld = tape.scalar(1.0);
        let a = tape.constant(Tensor::vector(vec![bad]));
        let b = tape.constant(Tensor::vector(vec![0.1]));
        let r = uncertainty_distillation_loss(&mut tape, ld, a, b, ALPHA, false);
        assert!(matches!(r, Err(CoreError::Contract(_))), "U={bad}");
    }
}

fn core_loss(a: [f64; 8], b: [f64; 8]) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(a.to_vec()));
    let y = tape.constant(Tensor::vector(b.to_vec()));
    let l = distillation_core_loss(&mut tape, x, y).unwrap();
    tape.item(l)
}

#[test]
fn distillation_core_loss_reference_values() {
    let a = [1.0, 2.0, 30.0, 1.5, 1.75, 4.0, 0.0, 1.0];
    assert_eq!(core_loss(a, a), 0.0);
    assert_eq!(core_loss(a, a.map(|v| v + 0.5)), 0.125);
    let mut b = a;
    b[2] += 2.0;
    assert_eq!(core_loss(a, b), 0.1875);
}

#[test]
fn distillation_core_loss_is_symmetric() {
    let a = [0.3, -1.2, 17.0, 1.4, 1.7, 4.2, 0.8, -0.6];
    let b = [-0.9, 0.4, 21.5, 1.6, 1.5, 3.1, -0.2, 0.98];
    assert_eq!(core_loss(a, b), core_loss(b, a));
}

fn config() -> ModelConfig {
    ModelConfig::new(Architecture::default(), &SceneConfig::default()).unwrap()
}

fn focal_depth(logits: Vec<f64>, depths: Vec<f64>, valid: Vec<bool>) -> f64 {
    let cfg = config();
    let k = cfg.arch.depth_bins;
    let t = depths.len();
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![t, k], logits).unwrap());
    let l = depth_loss(&mut tape, &cfg, x, &depths, &valid).unwrap();
    tape.item(l)
}

#[test]
fn uniform_depth_prediction_value() {
    let k = config().arch.depth_bins;
    let got = focal_depth(vec![0.0; 3 * k], vec![6.0, 20.0, 39.0], vec![true; 3]);
    let p = 1.0 / k as f64;
    assert!((got - (1.0 - p).powi(2) * (k as f64).ln()).abs() < 1e-12);
    assert!((got - 4.0295).abs() < 1e-3);
}

#[test]
fn confident_correct_depth_approaches_zero() {
    let cfg = config();
    let k = cfg.arch.depth_bins;
    let mut logits = vec![0.0; k];
    logits[cfg.bin_of(12.3)] = 40.0;
    assert!(focal_depth(logits, vec![12.3], vec![true]) < 1e-12);
}

#[test]
fn depth_loss_falls_as_true_bin_probability_rises() {
    let cfg = config();
    let k = cfg.arch.depth_bins;
    let bin = cfg.bin_of(25.0);
    let mut last = f64::INFINITY;
    for boost in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let mut logits = vec![0.0; k];
        logits[bin] = boost;
        let v = focal_depth(logits, vec![25.0], vec![true]);
        assert!(v < last, "boost {boost}: {v} !< {last}");
        last = v;
    }
}

#[test]
fn depth_loss_ignores_invalid_tokens() {
    let cfg = config();
    let k = cfg.arch.depth_bins;
    let mut logits = vec![0.0; 2 * k];
    logits[k + 3] = 100.0;
    let with = focal_depth(logits.clone(), vec![10.0, 0.0], vec![true, false]);
    let alone = focal_depth(vec![0.0; k], vec![10.0], vec![true]);
    assert_eq!(with, alone);
}

#[test]
fn no_valid_tokens_gives_zero() {
    let k = config().arch.depth_bins;
    assert_eq!(
        focal_depth(vec![0.3; 2 * k], vec![0.0, 0.0], vec![false, false]),
        0.0
    );
}

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::default()
}

fn proj_loss(b: &Box3D, ann: &Box2D) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(metric_vector(b).to_vec()));
    let l = projection_loss(&mut tape, v, &cam(), ann, [64, 64]).unwrap();
    tape.item(l)
}

fn sample_box() -> Box3D {
    Box3D {
        x: 1.2,
        y: 1.1,
        z: 18.0,
        h: 1.5,
        w: 1.7,
        l: 4.1,
        theta: 1.3,
    }
}

#[test]
fn matching_projection_has_zero_loss() {
    let b = sample_box();
    let ann = project_box3d_to_box2d(&b, &cam()).unwrap();
    assert!(proj_loss(&b, &ann) < 1e-24);
}

#[test]
fn half_image_shift_costs_one_eighth() {
    let b = sample_box();
    let p = project_box3d_to_box2d(&b, &cam()).unwrap();
    let ann = Box2D::from_array(p.to_array().map(|v| v + 32.0));
    assert!((proj_loss(&b, &ann) - 0.125).abs() < 1e-12);
}

#[test]
fn projection_loss_is_scale_invariant() {
    let b = sample_box();
    let ann = Box2D::from_array([20.0, 30.0, 31.0, 37.0]);
    let base = proj_loss(&b, &ann);
    for s in [0.5, 2.0, 3.7] {
        let scaled = Box3D {
            x: b.x * s,
            y: b.y * s,
            z: b.z * s,
            h: b.h * s,
            w: b.w * s,
            l: b.l * s,
            ..b
        };
        assert!((proj_loss(&scaled, &ann) - base).abs() < 1e-12);
    }
}

#[test]
fn corners_behind_the_camera_add_their_clamp_distance() {
    // Length axis along z: corners at z = 1 +- 2, so four sit at -1.
    let b = Box3D {
        x: 0.0,
        y: 0.0,
        z: 1.0,
        h: 1.0,
        w: 1.0,
        l: 4.0,
        theta: std::f64::consts::FRAC_PI_2,
    };
    let ann = Box2D::from_array([0.0, 0.0, 64.0, 64.0]);
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(metric_vector(&b).to_vec()));
    let l = projection_loss(&mut tape, v, &cam(), &ann, [64, 64]).unwrap();
    assert!(tape.item(l).is_finite());
    let g = tape.backward(l).unwrap();
    // the clamp penalty pushes z forward
    assert!(g.get(v).unwrap().data()[2] < 0.0);
    let penalty_only = 4.0 * (1.0 + 0.1);
    assert!(tape.item(l) >= penalty_only - 1e-9);
}

#[test]
fn prior_loss_zero_at_priors() {
    let mut tape = Tape::new();
    let d = tape.param(Tensor::vector(vec![0.0; 3]));
    let l = prior_loss(&mut tape, d).unwrap();
    assert_eq!(tape.item(l), 0.0);
    let d = tape.param(Tensor::vector(vec![0.5, 0.0, 0.0]));
    let l = prior_loss(&mut tape, d).unwrap();
    assert!((tape.item(l) - 0.125 / 3.0).abs() < 1e-15);
}
