// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod urlkit;
pub mod frontier;
pub mod parsekit;
pub mod governor;
pub mod revisit;
pub mod irmetrics;
pub mod store;
pub mod fetchnet;
pub mod simweb;
pub mod crawlctl;
