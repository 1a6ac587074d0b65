pub mod corpus;
pub mod decode;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod model;
pub mod seed;
pub mod train;
