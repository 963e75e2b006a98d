mod evaluate;
mod metrics;

pub use evaluate::{
    average_precisions, evaluate_dataset, evaluate_scenes, predict_scene, write_detections,
    write_report, ApSet, EvalOptions, EvalReport, Network,
};
pub use metrics::{ap_r40, match_detections, score_order, Detection, PRCurve, RECALL_POINTS};
