//! Neural network quines: small MLPs that predict their own weights from a
//! coordinate, optionally while classifying MNIST digits.
//!
//! ```
//! use nnquine::{full_loss, regenerate, NetworkSpec, ParamVector, build_projections};
//!
//! let spec = NetworkSpec::vanilla_with(8, 8);
//! let proj = build_projections(&spec, 0);
//! let zero = ParamVector::zeros(&spec);
//! assert_eq!(full_loss(&zero, &proj, &spec).unwrap(), 0.0);
//! assert_eq!(regenerate(&zero, &proj, &spec).unwrap(), zero);
//! ```

pub mod config;
pub mod error;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod net;
pub mod numeric;
pub mod optim;
pub mod train;

pub use config::RunConfig;
pub use error::{QuineError, Result};
pub use grad::{cross_entropy_temp, grad_aux, grad_sr, loss_aux, loss_sr, LossBreakdown, Objective, TargetSnapshot};
pub use io::{
    append_metrics_csv, export_heatmap, load_checkpoint, load_mnist, load_mnist_dir, save_checkpoint, Checkpoint,
    MnistSet, Split,
};
pub use metrics::{accuracy, full_loss, full_loss_with, margin, srq, AuxInput, MetricsRecord, ProjectedImages};
pub use net::{
    build_projections, embed_coordinate, flatten, forward_aux, forward_vanilla, init_params, locate, param_count,
    Coordinate, Encoding, FixedProjections, Init, Layer, NetworkSpec, ParamVector, Variant,
};
pub use numeric::{he_sample, matvec, selu, selu_derivative, DenseMatrix, Rng, Stream};
pub use optim::{Algorithm, Hyperparams, OptimizerState};
pub use train::{
    evaluate, regenerate, regenerate_sequential, run_epochs, run_regeneration, train_epoch_aux, train_epoch_gradient,
    train_epoch_hillclimb, AuxData, EpochReport, Regime, RunSummary, TrainConfig,
};
