//! Synthesis of labeled pseudo community images for plankton instance
//! segmentation, tiled-inference stitching, and COCO-style scoring.

pub mod raster;
pub mod dataset_io;
pub mod taxonomy;
pub mod evaluator;
pub mod tiler;
pub mod pcigen;
pub mod encgeom;
pub mod render;
