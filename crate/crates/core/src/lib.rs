// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod elliptic;
pub mod expr;
pub mod lab;
pub mod manifold;
pub mod parabolic;
pub mod polya;
pub mod quad;
pub mod radial;
