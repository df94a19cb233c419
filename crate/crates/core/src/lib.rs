//! Personalized federated adapter tuning with a server-side sequential learner.
//!
//! Clients fine-tune a low-rank adapter on top of a frozen backbone and send
//! adapter updates to the server. The server averages the updated adapters
//! into a global adapter and feeds the stacked history of updates through a
//! two-block selective state-space model, whose output calibrates the global
//! adapter separately for each client. The learner is trained on the server
//! using each client's next update as a proxy gradient.
//!
//! Module map:
//!
//! - [`numerics`]: tensors, reverse-mode tape, SGD/Adam, finite-difference checks
//! - [`synthdata`]: Gaussian-blob data, Dirichlet label skew, rotations, splits
//! - [`clientsim`]: frozen backbone, adapter, head, local training, messages
//! - [`seqlearner`]: selective SSM blocks, scans, MLP learner, checkpoints
//! - [`fedserver`]: aggregation, update buffer, learner updates, rounds
//! - [`harness`]: configs, method dispatch, metrics CSV, sweeps, gradcheck suites

pub mod clientsim;
pub mod error;
pub mod fedserver;
pub mod harness;
pub mod numerics;
pub mod rng;
pub mod seqlearner;
pub mod synthdata;

pub use error::{Error, Result};
