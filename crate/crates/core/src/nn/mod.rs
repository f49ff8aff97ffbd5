//! Trainable models: the in-context transformer and the two-layer feature network.

pub mod featurenet;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod transformer;

pub use featurenet::{
    featurenet_loss_grad, featurenet_loss_grad_against, forward_featurenet, true_featurenet, FeatureGrads,
    FeatureMode, FeatureNetConfig, FeatureNetParams, Teacher, TeacherLaw,
};
pub use gradcheck::{grad_check, grad_check_featurenet, GradCheckReport};
pub use linalg::Real;
pub use loss::{loss_logistic, loss_mse, LossKind, TaskHead};
pub use transformer::{
    backward, embed_prompt, forward_transformer, predict_batch, sequence_loss, LossReport, ModelParams, Profile,
    TokenStream, TransformerConfig,
};
