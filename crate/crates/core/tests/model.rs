use skd_autodiff::{softplus, Tape, Tensor};
use skd_core::diagnostics::{generic_point, model_gradient_check, ModelCheckOptions};
use skd_core::geometry::{project_box3d_to_box2d, Box2D, Box3D, CameraIntrinsics};
use skd_core::losses::depth_loss;
use skd_core::model::{
    col, decode_box, inverse_softplus, roi_pool, Architecture, Checkpoint, Model, ModelConfig,
    ModelParams, ParamGroup, RawTargets,
};
use skd_core::scenes::{generate_scene, Scene, SceneConfig};
use skd_core::trainer::PreparedScene;
use skd_core::CoreError;

fn setup() -> (Model, ModelParams, Scene) {
    let scene_cfg = SceneConfig::default();
    let cfg = ModelConfig::new(Architecture::default(), &scene_cfg).unwrap();
    let params = generic_point(&ModelParams::init(&cfg, 5).unwrap(), 5);
    (
        Model::new(cfg).unwrap(),
        params,
        generate_scene(&scene_cfg, 2).unwrap(),
    )
}

#[test]
fn forward_shapes() {
    let (model, params, scene) = setup();
    let cfg = model.config();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &params).unwrap();
    let patches = model.patchify(&scene.features).unwrap();
    assert_eq!(patches.shape(), [256, 48]);
    let fg = model.encode(&mut tape, &b, &patches).unwrap();
    assert_eq!(tape.shape(fg), [64, 16]);
    assert_eq!(cfg.grid(), 8);
    let twod = model.twod_forward(&mut tape, &b, fg).unwrap();
    assert_eq!(tape.shape(twod), [64, 5]);
    let dsn = model
        .dsn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
        .unwrap();
    assert_eq!(tape.shape(dsn.depth_logits), [64, 64]);
    assert_eq!(tape.shape(dsn.tokens), [64, 16]);
    assert_eq!(dsn.preds.len(), scene.ann_boxes2d.len());
    let mdn = model
        .mdn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
        .unwrap();
    assert_eq!(mdn.len(), scene.ann_boxes2d.len());
    let nodes = mdn.nodes.unwrap();
    assert_eq!(tape.shape(nodes.boxes), [scene.ann_boxes2d.len(), 8]);
    assert_eq!(tape.shape(nodes.uncertainty), [scene.ann_boxes2d.len(), 1]);
}

#[test]
fn wrong_feature_shape_is_rejected() {
    let (model, _, _) = setup();
    let bad = Tensor::zeros(&[3, 32, 64]);
    assert!(matches!(model.patchify(&bad), Err(CoreError::Contract(_))));
}

#[test]
fn zero_input_and_zero_biases_give_zero_tokens() {
    let (model, _, _) = setup();
    let params = ModelParams::init(model.config(), 1).unwrap();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &params).unwrap();
    let patches = model.patchify(&Tensor::zeros(&[3, 64, 64])).unwrap();
    let fg = model.encode(&mut tape, &b, &patches).unwrap();
    assert!(tape.value(fg).data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let (model, params, scene) = setup();
    let run = || {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, &params).unwrap();
        let fg = model
            .encode(&mut tape, &b, &model.patchify(&scene.features).unwrap())
            .unwrap();
        let out = model
            .dsn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
            .unwrap();
        (tape.value(fg).clone(), out.preds.predictions)
    };
    assert_eq!(run(), run());
}

#[test]
fn attention_rows_sum_to_one() {
    let (model, params, scene) = setup();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &params).unwrap();
    let fg = model
        .encode(&mut tape, &b, &model.patchify(&scene.features).unwrap())
        .unwrap();
    let out = model
        .dsn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
        .unwrap();
    for attn in [out.sa_attention, out.ca_attention] {
        for row in tape.value(attn).data().chunks(64) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn uncertainty_is_positive_for_random_parameters() {
    let (model, _, scene) = setup();
    for seed in 0..5 {
        let mut params = ModelParams::init(model.config(), seed).unwrap();
        for t in params.tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += ((i as f64 + seed as f64) * 0.731).sin() * 3.0;
            }
        }
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, &params).unwrap();
        let fg = model
            .encode(&mut tape, &b, &model.patchify(&scene.features).unwrap())
            .unwrap();
        let dsn = model
            .dsn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
            .unwrap();
        let mdn = model
            .mdn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
            .unwrap();
        for p in dsn.preds.predictions.iter().chain(&mdn.predictions) {
            assert!(p.uncertainty > 0.0);
            assert!(p.decoded.z >= model.config().depth_range[0]);
        }
    }
}

#[test]
fn predictions_do_not_depend_on_other_rois() {
    let (model, params, _) = setup();
    let scene = (0..50)
        .map(|i| generate_scene(&SceneConfig::default(), i).unwrap())
        .find(|s| s.ann_boxes2d.len() >= 3)
        .unwrap();
    let predict = |rois: &[Box2D]| {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, &params).unwrap();
        let fg = model
            .encode(&mut tape, &b, &model.patchify(&scene.features).unwrap())
            .unwrap();
        let d = model
            .dsn_forward(&mut tape, &b, fg, rois)
            .unwrap()
            .preds
            .predictions;
        let m = model
            .mdn_forward(&mut tape, &b, fg, rois)
            .unwrap()
            .predictions;
        (d, m)
    };
    let all = predict(&scene.ann_boxes2d);
    let mut reversed = scene.ann_boxes2d.clone();
    reversed.reverse();
    let rev = predict(&reversed);
    let n = scene.ann_boxes2d.len();
    for i in 0..n {
        let alone = predict(&scene.ann_boxes2d[i..=i]);
        for (a, b) in [
            (&all.0[i], &alone.0[0]),
            (&all.1[i], &alone.1[0]),
            (&all.0[i], &rev.0[n - 1 - i]),
        ] {
            for (x, y) in a.raw_targets.iter().zip(&b.raw_targets) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((a.uncertainty - b.uncertainty).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_roi_list_gives_no_predictions() {
    let (model, params, scene) = setup();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &params).unwrap();
    let fg = model
        .encode(&mut tape, &b, &model.patchify(&scene.features).unwrap())
        .unwrap();
    assert!(model
        .dsn_forward(&mut tape, &b, fg, &[])
        .unwrap()
        .preds
        .is_empty());
    assert!(model
        .mdn_forward(&mut tape, &b, fg, &[])
        .unwrap()
        .is_empty());
}

#[test]
fn depth_loss_reaches_only_encoder_and_depth_head() {
    let (model, params, scene) = setup();
    let prepared = PreparedScene::new(&model, 0, &scene).unwrap();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &params).unwrap();
    let fg = model.encode(&mut tape, &b, &prepared.patches).unwrap();
    let out = model
        .dsn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
        .unwrap();
    model
        .mdn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
        .unwrap();
    let l = depth_loss(
        &mut tape,
        model.config(),
        out.depth_logits,
        &prepared.token_depth,
        &prepared.token_valid,
    )
    .unwrap();
    let g = tape.backward(l).unwrap();
    for (name, id) in params.names().iter().zip(b.ids()) {
        let grad = g.get(*id).unwrap();
        let nonzero = grad.data().iter().any(|&v| v != 0.0);
        match ModelParams::group_of(name) {
            ParamGroup::Encoder | ParamGroup::DepthHead => {
                if name.ends_with(".w") {
                    assert!(nonzero, "{name} receives no depth gradient");
                }
            }
            _ => assert!(!nonzero, "{name} receives depth gradient"),
        }
    }
}

#[test]
fn dsn_boxes_depend_on_the_encoder() {
    let (model, params, scene) = setup();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &params).unwrap();
    let fg = model
        .encode(&mut tape, &b, &model.patchify(&scene.features).unwrap())
        .unwrap();
    let out = model
        .dsn_forward(&mut tape, &b, fg, &scene.ann_boxes2d)
        .unwrap();
    let s = tape.sum(out.preds.nodes.unwrap().boxes);
    let g = tape.backward(s).unwrap();
    let enc = params.index_of("enc.patch.w").unwrap();
    assert!(g
        .get(b.ids()[enc])
        .unwrap()
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn every_parameter_tensor_passes_the_gradient_check() {
    let (model, params, scene) = setup();
    let prepared = PreparedScene::new(&model, 0, &scene).unwrap();
    let start = std::time::Instant::now();
    let checks =
        model_gradient_check(&model, &params, &prepared, &ModelCheckOptions::default()).unwrap();
    assert_eq!(checks.len(), params.len());
    for c in &checks {
        assert!(c.checked > 0);
        assert!(c.max_rel_error < 1e-3, "{}: {}", c.name, c.max_rel_error);
    }
    assert!(start.elapsed().as_secs() < 60);
}

fn token_grid(f: impl Fn(usize, usize) -> f64) -> Tensor {
    let mut data = Vec::new();
    for r in 0..8 {
        for c in 0..8 {
            data.extend([f(r, c), 2.0 * f(r, c) + 1.0]);
        }
    }
    Tensor::new(vec![64, 2], data).unwrap()
}

fn pool(grid: &Tensor, b: &Box2D) -> Tensor {
    let mut tape = Tape::new();
    let t = tape.constant(grid.clone());
    let p = roi_pool(&mut tape, t, b, 8, 8.0, 4).unwrap();
    tape.value(p).clone()
}

#[test]
fn roi_pool_inside_one_token_repeats_it() {
    let grid = token_grid(|r, c| (r * 8 + c) as f64);
    // token (2, 3) centred at pixel (28, 20); a small box around the centre
    let out = pool(&grid, &Box2D::from_array([27.9, 19.9, 28.1, 20.1]));
    for row in out.data().chunks(2) {
        assert!((row[0] - 19.0).abs() < 0.1 && (row[1] - 39.0).abs() < 0.2);
    }
    let exact = pool(
        &grid,
        &Box2D::from_array([28.0 - 1e-9, 20.0 - 1e-9, 28.0 + 1e-9, 20.0 + 1e-9]),
    );
    for row in exact.data().chunks(2) {
        assert!((row[0] - 19.0).abs() < 1e-9);
    }
}

#[test]
fn roi_pool_of_constant_grid_is_constant() {
    let grid = token_grid(|_, _| 0.75);
    for b in [
        [1.0, 2.0, 60.0, 50.0],
        [30.0, 30.0, 34.0, 31.0],
        [0.0, 0.0, 64.0, 64.0],
    ] {
        for row in pool(&grid, &Box2D::from_array(b)).data().chunks(2) {
            assert!((row[0] - 0.75).abs() < 1e-12 && (row[1] - 2.5).abs() < 1e-12);
        }
    }
}

#[test]
fn roi_pool_reproduces_a_linear_ramp() {
    // value = 0.3 * u + 0.1 * v at token centres
    let grid = token_grid(|r, c| 0.3 * ((c as f64 + 0.5) * 8.0) + 0.1 * ((r as f64 + 0.5) * 8.0));
    let b = Box2D::from_array([10.0, 12.0, 50.0, 44.0]);
    let out = pool(&grid, &b);
    for (k, row) in out.data().chunks(2).enumerate() {
        let (i, j) = (k / 4, k % 4);
        let u = b.u_min + (j as f64 + 0.5) / 4.0 * b.width();
        let v = b.v_min + (i as f64 + 0.5) / 4.0 * b.height();
        assert!((row[0] - (0.3 * u + 0.1 * v)).abs() < 1e-9);
    }
}

#[test]
fn degenerate_roi_is_rejected() {
    let grid = token_grid(|_, _| 1.0);
    let mut tape = Tape::new();
    let t = tape.constant(grid);
    assert!(roi_pool(
        &mut tape,
        t,
        &Box2D::from_array([5.0, 5.0, 5.0, 9.0]),
        8,
        8.0,
        4
    )
    .is_err());
}

const PRIORS: [f64; 3] = [1.5, 1.6, 3.9];

/// Raw targets that decode to `b` on `roi`; used only as a test oracle.
fn encode(b: &Box3D, roi: &Box2D, cam: &CameraIntrinsics, d_min: f64) -> RawTargets {
    let (u, v) = cam.project_point(b.x, b.y, b.z);
    let (cu, cv) = roi.center();
    let mut raw = [0.0; 8];
    raw[col::DU] = (u - cu) / roi.width();
    raw[col::DV] = (v - cv) / roi.height();
    raw[col::Z] = inverse_softplus(b.z - d_min);
    raw[col::LOG_H] = (b.h / PRIORS[0]).ln();
    raw[col::LOG_W] = (b.w / PRIORS[1]).ln();
    raw[col::LOG_L] = (b.l / PRIORS[2]).ln();
    raw[col::SIN] = 3.0 * b.theta.sin();
    raw[col::COS] = 3.0 * b.theta.cos();
    raw
}

#[test]
fn identity_decode() {
    let cam = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap();
    let roi = Box2D::from_array([22.0, 22.0, 42.0, 42.0]);
    let raw = [0.0, 0.0, inverse_softplus(5.0), 0.0, 0.0, 0.0, 0.0, 1.0];
    let b = decode_box(&raw, &roi, &cam, PRIORS, 5.0);
    assert!(b.x.abs() < 1e-12 && b.y.abs() < 1e-12 && (b.z - 10.0).abs() < 1e-12);
    assert_eq!([b.h, b.w, b.l], PRIORS);
    assert_eq!(b.theta, 0.0);
}

#[test]
fn doubling_focal_length_halves_x() {
    let roi = Box2D::from_array([40.0, 20.0, 50.0, 30.0]);
    let raw = [0.1, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let a = decode_box(
        &raw,
        &roi,
        &CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap(),
        PRIORS,
        5.0,
    );
    let b = decode_box(
        &raw,
        &roi,
        &CameraIntrinsics::new(200.0, 100.0, 32.0, 32.0).unwrap(),
        PRIORS,
        5.0,
    );
    assert!((b.x - a.x / 2.0).abs() < 1e-12);
    assert_eq!(a.z, b.z);
}

#[test]
fn decode_inverts_encode() {
    let cam = CameraIntrinsics::default();
    for i in 0..200 {
        let s = generate_scene(&SceneConfig::default(), i).unwrap();
        for (b, roi) in s.gt_boxes3d.iter().zip(&s.ann_boxes2d) {
            let got = decode_box(&encode(b, roi, &cam, 5.0), roi, &cam, PRIORS, 5.0);
            for (x, y) in [
                (got.x, b.x),
                (got.y, b.y),
                (got.z, b.z),
                (got.h, b.h),
                (got.w, b.w),
                (got.l, b.l),
                (got.theta, b.theta),
            ] {
                assert!((x - y).abs() < 1e-6, "scene {i}: {got:?} vs {b:?}");
            }
            let p = project_box3d_to_box2d(&got, &cam).unwrap();
            assert!((p.u_min - roi.u_min).abs() < 1e-6);
        }
    }
}

#[test]
fn inverse_softplus_roundtrip() {
    for y in [1e-6, 0.05, 1.0, 7.5, 35.0] {
        assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-9 * y.max(1.0));
    }
}

#[test]
fn initialization_depends_only_on_seed() {
    let (model, _, _) = setup();
    let cfg = model.config();
    assert_eq!(
        ModelParams::init(cfg, 9).unwrap(),
        ModelParams::init(cfg, 9).unwrap()
    );
    assert_ne!(
        ModelParams::init(cfg, 9).unwrap(),
        ModelParams::init(cfg, 10).unwrap()
    );
}

#[test]
fn checkpoint_roundtrip_and_config_guard() {
    let (model, params, _) = setup();
    let cfg = model.config();
    let ckpt = Checkpoint {
        config_checksum: cfg.checksum(),
        step: 17,
        epoch: 2,
        params,
        state: vec![("adam.step".into(), Tensor::scalar(17.0))],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path, cfg).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());

    let other = ModelConfig::new(
        Architecture {
            head_hidden: 8,
            ..Architecture::default()
        },
        &SceneConfig::default(),
    )
    .unwrap();
    assert!(matches!(
        Checkpoint::load(&path, &other),
        Err(CoreError::Checksum { .. })
    ));
    let bytes = ckpt.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], cfg).is_err());
    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing.ckpt"), cfg),
        Err(CoreError::Io { .. })
    ));
}
