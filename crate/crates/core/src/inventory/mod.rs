//! Forest inventory measurements on (super-resolved) plot clouds: ground
//! model, breast-height slicing, stem detection, DBH, tree and crown size,
//! allometry and sector-median stem reconstruction.

mod allometry;
mod circle;
mod detect;
mod ground;
mod smp;

pub use allometry::{allometric_dbh, fit_allometry, AllometryConfig};
pub use circle::{circle_through, fit_circle, ransac_circle, CircleFit, RansacConfig, RansacFit};
pub use detect::{
    cluster_slice, crown_diameter, crown_diameters, detect_stems_circle, detect_stems_density, estimate_dbh,
    detect_stems_circle_hn, detect_stems_density_hn, slice, tree_height, CircleDetectConfig, DensityDetectConfig, StemDetection,
};
pub use ground::{ground_model, height_normalize, GroundModel};
pub use smp::{reconstruct_stem_smp, reconstruct_stems, stem_surface_points, stem_volume, Ring, SmpConfig, StemModel};
