#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod graph;
pub mod jet;
pub mod linalg;
pub mod heat;
pub mod resolvent;
pub mod mc;
pub mod thermo;
pub mod measures;
pub mod asymptotics;
