pub mod cli;
pub mod embed_pool;
pub mod map_io;
pub mod map_sim;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod structure_io;
pub mod volume_prep;
