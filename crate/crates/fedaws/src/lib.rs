//! Federated training of embedding-based classifiers when every client holds
//! positive examples of exactly one class.
//!
//! Training with positives only collapses: nothing stops all class and
//! instance embeddings from meeting at a single point. This crate implements
//! the server-side fix — a spreadout step that pushes class embeddings apart
//! after each aggregation round — together with the baselines it is measured
//! against and numerical certification of the bounds that justify it.
//!
//! Module map:
//!
//! * [`math`] — vectors, matrices, cosine distance, seeded determinism.
//! * [`model`] — the instance embedder, the scorer, exact gradients, and the
//!   finite-difference oracle used to test them.
//! * [`losses`] — squared hinge, cosine contrastive, spreadout-composite and
//!   softmax losses, each with value and gradient.
//! * [`spreadout`] — the pairwise regularizer, its top-k mined variant, and
//!   the nearest-class index.
//! * [`federation`] — the round protocol: client updates, aggregation, the
//!   server spreadout step, and the full training loop with its baselines.
//! * [`data`] — synthetic benchmark generation, sparse text ingestion,
//!   sharding by label.
//! * [`metrics`] — precision@k, the (epsilon, rho) geometry summary, and the
//!   checkers that certify the error bound, the surrogate inequality, the
//!   objective identity, and the approximation bound.

pub mod data;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod spreadout;

pub mod federation;

pub use data::{gen_synthetic, shard_by_label, ClientShard, LabeledDataset, SyntheticSpec};
pub use federation::{run_training, ServerState, TrainingConfig, TrainingMode};
pub use losses::Margin;
pub use math::{Matrix, RngState};
pub use metrics::MetricsRecord;
pub use model::{ClassEmbeddingMatrix, EmbedderParams, SparseInstance};
