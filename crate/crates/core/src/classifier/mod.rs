//! App and action classifiers, open-set calibration and label assembly.

pub mod adam;
pub mod bundle;
pub mod openmax;
pub mod tcn;

pub use bundle::{
    assemble_from_decisions, assemble_operation_sequence, decide_frame_apps, decode_bundle, encode_bundle, infer_trace, load_bundle, save_bundle, Classifier,
    ClassifierBundle, DecisionMode, TraceInference,
};
pub use openmax::{calibrate_with, openmax_calibrate, openmax_decide, openmax_fit, OpenMaxModel, Weibull};
pub use tcn::{gradient_check, tcn_forward, tcn_train, GradCheck, SampleSet, TcnConfig, TcnModel, TcnShape, TrainReport};
