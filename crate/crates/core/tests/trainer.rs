use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skd_autodiff::Tensor;
use skd_core::diagnostics::generic_point;
use skd_core::model::{Architecture, Model, ModelConfig, ModelParams, ParamGroup};
use skd_core::scenes::{generate_scene, write_split, SceneConfig};
use skd_core::strategy::{
    distillation_losses, transfer_modulations, DistillationLoss, StrategyOptions,
};
use skd_core::trainer::{
    compute_step, epoch_order, read_metrics, run_training, tms_factors, Networks, PreparedScene,
    RunOptions, SceneGraph, TermMask, TrainConfig, FINAL_CHECKPOINT, METRICS_FILE,
};
use skd_core::CoreError;

#[test]
fn lr_schedule_warms_up_then_steps_down() {
    let cfg = TrainConfig::default();
    let spe = 10;
    assert_eq!(cfg.lr_at(0, spe), 1e-5);
    assert!((cfg.lr_at(25, spe) - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-15);
    assert_eq!(cfg.lr_at(50, spe), 1e-3);
    assert_eq!(cfg.lr_at(359, spe), 1e-3);
    assert!((cfg.lr_at(360, spe) - 1e-4).abs() < 1e-18);
    assert!((cfg.lr_at(479, spe) - 1e-4).abs() < 1e-18);
    assert!((cfg.lr_at(480, spe) - 1e-5).abs() < 1e-18);
    assert!((cfg.lr_at(599, spe) - 1e-5).abs() < 1e-18);
}

#[test]
fn training_config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig {
            epochs: 0,
            ..ok.clone()
        },
        TrainConfig {
            warmup_epochs: 60.0,
            ..ok.clone()
        },
        TrainConfig {
            decay_at: vec![0.8, 0.6],
            ..ok.clone()
        },
        TrainConfig {
            alpha: 0.0,
            ..ok.clone()
        },
        TrainConfig {
            tms_ema: Some(1.0),
            ..ok.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(CoreError::Contract(_))));
    }
}

#[test]
fn flags_select_registered_strategies() {
    let d = distillation_losses();
    let m = transfer_modulations();
    for ud in [false, true] {
        for detach in [false, true] {
            for ema in [None, Some(0.9)] {
                for tms in [false, true] {
                    let c = TrainConfig {
                        ud_enabled: ud,
                        detach_ud_denominator: detach,
                        tms_enabled: tms,
                        tms_ema: ema,
                        ..TrainConfig::default()
                    };
                    assert!(d.contains(c.distillation_name()));
                    assert!(m.contains(c.modulation_name()));
                }
            }
        }
    }
    assert_eq!(
        TrainConfig::default().modulation_name(),
        "gradient-targeted"
    );
    assert_eq!(
        TrainConfig::default().distillation_name(),
        "uncertainty-aware"
    );
}

#[test]
fn tms_factors_reference_and_random_pairs() {
    assert_eq!(tms_factors(3.0, 1.0).unwrap(), (1.5, 0.5));
    assert_eq!(tms_factors(1.0, 1.0).unwrap(), (1.0, 1.0));
    assert_eq!(tms_factors(0.0, 0.0).unwrap(), (1.0, 1.0));
    assert_eq!(tms_factors(0.0, 2.0).unwrap(), (0.0, 2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let a: f64 = rng.random_range(0.0..10.0);
        let b: f64 = rng.random_range(0.0..10.0);
        let (fa, fb) = tms_factors(a, b).unwrap();
        assert_eq!(fa + fb, 2.0);
        assert!(fa >= 0.0 && fb >= 0.0);
        assert_eq!(fa > fb, a > b);
    }
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(4, 2, 50);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(4, 2, 50));
    assert_ne!(a, epoch_order(4, 3, 50));
    assert_ne!(a, epoch_order(5, 2, 50));
}

fn small_arch() -> Architecture {
    Architecture {
        encoder_hidden: 16,
        depth_hidden: 32,
        ..Architecture::default()
    }
}

struct Fixture {
    model: Model,
    params: ModelParams,
    scenes: Vec<PreparedScene>,
}

fn fixture() -> Fixture {
    let scene_cfg = SceneConfig::default();
    let model = Model::new(ModelConfig::new(small_arch(), &scene_cfg).unwrap()).unwrap();
    let params = generic_point(&ModelParams::init(model.config(), 2).unwrap(), 2);
    let scenes = (0..3)
        .map(|i| {
            PreparedScene::new(&model, i, &generate_scene(&scene_cfg, i as u64).unwrap()).unwrap()
        })
        .collect();
    Fixture {
        model,
        params,
        scenes,
    }
}

fn distillation_gradients(fx: &Fixture, f: (f64, f64), loss: &dyn DistillationLoss) -> Vec<Tensor> {
    let scene = &fx.scenes[0];
    let mut g = SceneGraph::forward(&fx.model, &fx.params, scene, Networks::Both).unwrap();
    g.distill(loss, f.0, f.1).unwrap();
    let n = g.rois;
    let l = g.objective(TermMask::DISTILLATION, 1, n).unwrap();
    g.parameter_gradients(l).unwrap()
}

fn ud() -> Box<dyn DistillationLoss> {
    distillation_losses()
        .create("uncertainty-aware", &StrategyOptions::default())
        .unwrap()
}

#[test]
fn unit_gates_match_the_ungated_graph_bitwise() {
    let fx = fixture();
    let loss = ud();
    let gated = distillation_gradients(&fx, (1.0, 1.0), loss.as_ref());

    let mut g = SceneGraph::forward(&fx.model, &fx.params, &fx.scenes[0], Networks::Both).unwrap();
    let (dsn, mdn) = (g.dsn.unwrap(), g.mdn.unwrap());
    for i in 0..g.rois {
        let idx: Vec<usize> = (i * 8..i * 8 + 8).collect();
        let t = &mut g.tape;
        let db = t.gather(dsn.boxes, &idx, &[8]).unwrap();
        let du = t.gather(dsn.uncertainty, &[i], &[1]).unwrap();
        let mb = t.gather(mdn.boxes, &idx, &[8]).unwrap();
        let mu = t.gather(mdn.uncertainty, &[i], &[1]).unwrap();
        let l = loss.roi_loss(t, db, du, mb, mu).unwrap();
        g.l_ud.push(l);
    }
    let n = g.rois;
    let l = g.objective(TermMask::DISTILLATION, 1, n).unwrap();
    let plain = g.parameter_gradients(l).unwrap();
    assert_eq!(gated, plain);
}

#[test]
fn gates_scale_each_network_separately() {
    let fx = fixture();
    let loss = ud();
    let unit = distillation_gradients(&fx, (1.0, 1.0), loss.as_ref());
    let scaled = distillation_gradients(&fx, (1.5, 0.5), loss.as_ref());
    let dsn_only = distillation_gradients(&fx, (1.0, 0.0), loss.as_ref());
    let mdn_only = distillation_gradients(&fx, (0.0, 1.0), loss.as_ref());
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300);
    let mut seen = [false; 3];
    for (t, name) in fx.params.names().iter().enumerate() {
        let want: Vec<f64> = match ModelParams::group_of(name) {
            ParamGroup::Fusion | ParamGroup::DsnHead => {
                seen[0] |= unit[t].data().iter().any(|&v| v != 0.0);
                unit[t].data().iter().map(|v| 1.5 * v).collect()
            }
            ParamGroup::MdnHead => {
                seen[1] |= unit[t].data().iter().any(|&v| v != 0.0);
                unit[t].data().iter().map(|v| 0.5 * v).collect()
            }
            ParamGroup::Encoder => {
                seen[2] |= unit[t].data().iter().any(|&v| v != 0.0);
                dsn_only[t]
                    .data()
                    .iter()
                    .zip(mdn_only[t].data())
                    .map(|(a, b)| 1.5 * a + 0.5 * b)
                    .collect()
            }
            ParamGroup::DepthHead | ParamGroup::TwoDHead => {
                assert!(unit[t].data().iter().all(|&v| v == 0.0), "{name}");
                continue;
            }
        };
        for (got, w) in scaled[t].data().iter().zip(&want) {
            assert!(
                close(*got, *w) || (got - w).abs() < 1e-15,
                "{name}: {got} vs {w}"
            );
        }
    }
    assert_eq!(seen, [true; 3]);
}

#[test]
fn gates_leave_other_terms_untouched() {
    let fx = fixture();
    let loss = ud();
    let base = |f: (f64, f64)| {
        let mut g =
            SceneGraph::forward(&fx.model, &fx.params, &fx.scenes[0], Networks::Both).unwrap();
        g.distill(loss.as_ref(), f.0, f.1).unwrap();
        let n = g.rois;
        let mask = TermMask {
            distillation: false,
            depth: true,
            base: true,
        };
        let l = g.objective(mask, 1, n).unwrap();
        (g.tape.item(l), g.parameter_gradients(l).unwrap())
    };
    assert_eq!(base((1.0, 1.0)), base((1.7, 0.3)));
}

#[test]
fn negative_gate_is_rejected() {
    let fx = fixture();
    let mut g = SceneGraph::forward(&fx.model, &fx.params, &fx.scenes[0], Networks::Both).unwrap();
    assert!(g.distill(ud().as_ref(), -0.5, 2.5).is_err());
}

#[test]
fn step_reports_factors_from_the_projection_losses() {
    let fx = fixture();
    let batch: Vec<&PreparedScene> = fx.scenes.iter().collect();
    let loss = ud();
    let opts = StrategyOptions::default();
    let mut tms = transfer_modulations()
        .create("gradient-targeted", &opts)
        .unwrap();
    let out = compute_step(
        0,
        &fx.model,
        &fx.params,
        &batch,
        Networks::Both,
        loss.as_ref(),
        tms.as_mut(),
    )
    .unwrap();
    let b = &out.breakdown;
    assert_eq!(
        (b.f_dsn, b.f_mdn),
        tms_factors(b.l_proj_dsn, b.l_proj_mdn).unwrap()
    );
    assert!((b.total - (b.l_ud + b.l_dep + b.l_base)).abs() < 1e-12);

    let mut none = transfer_modulations().create("none", &opts).unwrap();
    let plain = compute_step(
        0,
        &fx.model,
        &fx.params,
        &batch,
        Networks::Both,
        loss.as_ref(),
        none.as_mut(),
    )
    .unwrap();
    assert_eq!((plain.breakdown.f_dsn, plain.breakdown.f_mdn), (1.0, 1.0));
    assert_eq!(plain.breakdown.l_ud, b.l_ud);
    if (b.f_dsn, b.f_mdn) != (1.0, 1.0) {
        assert_ne!(plain.gradients, out.gradients);
    }

    let mdn = compute_step(
        0,
        &fx.model,
        &fx.params,
        &batch,
        Networks::MdnOnly,
        loss.as_ref(),
        tms.as_mut(),
    )
    .unwrap();
    assert_eq!(
        (mdn.breakdown.f_dsn, mdn.breakdown.f_mdn, mdn.breakdown.l_ud),
        (1.0, 1.0, 0.0)
    );
    assert_eq!(mdn.breakdown.l_dep, 0.0);
}

fn tiny_data(dir: &Path) {
    let cfg = SceneConfig::default();
    write_split(dir, &cfg, "train", 16).unwrap();
    write_split(dir, &cfg, "val", 8).unwrap();
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        warmup_epochs: 1.0,
        checkpoint_every: 1,
        arch: small_arch(),
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data);
    let cfg = tiny_config();
    let run = |name: &str, opts: &RunOptions| {
        run_training(&cfg, &data, &tmp.path().join(name), opts).unwrap()
    };

    let a = run("a", &RunOptions::default());
    assert_eq!((a.steps, a.epochs_completed), (6, 3));
    let report = a.report.unwrap();
    assert_eq!(report.num_scenes, 8);
    assert!(report.dsn.is_some());
    let b = run("b", &RunOptions::default());
    let bytes = |name: &str| fs::read(tmp.path().join(name).join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(bytes("a"), bytes("b"));
    assert_eq!(b.report.unwrap(), report);

    let stopped = run(
        "c",
        &RunOptions {
            stop_after: Some(1),
            ..RunOptions::default()
        },
    );
    assert_eq!(
        (stopped.epochs_completed, stopped.final_checkpoint),
        (1, None)
    );
    let resumed = run(
        "c",
        &RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    );
    assert_eq!(resumed.steps, 6);
    assert_eq!(bytes("a"), bytes("c"));
    let rows = |name: &str| read_metrics(&tmp.path().join(name).join(METRICS_FILE)).unwrap();
    assert_eq!(rows("a"), rows("c"));
    assert_eq!(rows("a").len(), 6);

    let other = TrainConfig {
        seed: 1,
        ..cfg.clone()
    };
    let refused = run_training(
        &other,
        &data,
        &tmp.path().join("c"),
        &RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    );
    assert!(matches!(refused, Err(CoreError::Contract(_))));
}

#[test]
fn single_network_runs_train() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data);
    for networks in [Networks::MdnOnly, Networks::DsnOnly] {
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0.0,
            networks,
            ..tiny_config()
        };
        let out = run_training(
            &cfg,
            &data,
            &tmp.path().join(format!("{networks:?}")),
            &RunOptions::default(),
        )
        .unwrap();
        let report = out.report.unwrap();
        assert!(report.dsn.is_none());
        let rows =
            read_metrics(&tmp.path().join(format!("{networks:?}")).join(METRICS_FILE)).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.l_ud == 0.0 && r.f_dsn == 1.0 && r.f_mdn == 1.0));
    }
}

#[test]
fn missing_training_split_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run_training(
        &tiny_config(),
        tmp.path(),
        &tmp.path().join("run"),
        &RunOptions::default(),
    );
    assert!(matches!(r, Err(CoreError::Io { .. })));
}
