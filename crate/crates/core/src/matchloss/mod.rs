//! Bipartite matching and training losses.

mod hungarian;
mod losses;
mod setloss;

pub use hungarian::{hungarian, Assignment};
pub use losses::{
    box_loss, box_loss_parts, box_loss_with_grad, focal_sigmoid_ce, focal_sigmoid_term, focal_softmax_ce,
    focal_softmax_with_grad, LossWeights,
};
pub use setloss::{
    detector_loss, detector_loss_node, detector_terms, ground_truth_indices, relation_targets, vrd_loss,
    vrd_loss_node, vrd_terms, Breakdown, GtRelation, InstanceTarget, RelationTarget, SetLoss,
};
