//! Dataset-free output head: a union label space over domains, a gating
//! softmax, per-domain feature prototypes, and routing-driven channel masks.

mod head;
mod prototypes;
mod registry;

pub use head::{
    argmax, cross_entropy_on, gate, gate_logits_on, infer_routing, mask_logits, mask_logits_by_domain, route,
    GateParams, HeadConfig, MaskMode, RoutingRule, MASKED_LOGIT,
};
pub use prototypes::{similarity, PrototypeBank, DEFAULT_MOMENTUM};
pub use registry::{masked_loss_channels, DomainDescriptor, DomainRegistry, BACKGROUND};
