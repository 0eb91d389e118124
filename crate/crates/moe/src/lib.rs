//! Mixture-of-experts sequence classifier whose router is informed by
//! per-lag redundancy, uniqueness and synergy between modalities.
//!
//! Each modality is encoded separately; the token states then pass
//! through alternating transformer and MoE layers. The router attends
//! over pairwise (redundancy, synergy) values, runs a GRU over the
//! uniqueness sequence, and dispatches every token to its top-k experts.
//! The last `n_syn` experts cross-attend to the other modalities.
//! Auxiliary losses pull redundant pairs onto the same experts, push
//! unique pairs apart and move synergistic pairs onto the synergy experts.

mod config;
mod data;
mod error;
mod layers;
mod model;
mod moe;
mod router;
mod routing;
mod rus;
mod train;

pub use config::{Ablation, ModelConfig};
pub use data::{chronological_split, WindowDataset};
pub use error::{Error, Result};
pub use layers::{position_encoding, FfnExpert, ModalityEncoder, SynergyExpert, TransformerLayer};
pub use model::{Evaluation, ForwardOutput, LossBreakdown, TimeMoe};
pub use moe::{LayerRouting, MoeLayer};
pub use router::{Router, RusContext};
pub use routing::{
    auxiliary_losses, jsd_bits, p_syn, route, softmax, top_k_indices, triggered_pairs, AuxLosses, RouteDecision,
    RoutingDumpRow, RoutingEntry, RoutingRecord, Triggered, JSD_EPS,
};
pub use rus::{quantile, PairRus, RusContextInput, Thresholds};
pub use train::{read_metrics_jsonl, train, write_metrics_jsonl, EpochMetrics, TrainOutcome};
