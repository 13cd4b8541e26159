pub mod augment;
pub mod autodiff;
pub mod contrastive;
pub mod eval;
pub mod model;
pub mod raster;
pub mod rng;
pub mod train;
