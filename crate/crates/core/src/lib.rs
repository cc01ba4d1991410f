pub mod data;
pub mod decode;
pub mod eval;
pub mod history;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tape;
pub mod text;
pub mod train;
