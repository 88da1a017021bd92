//! Image planes, colour conversion, bicubic degradation, training patches
//! and PNG plumbing.

pub mod color;
pub mod io;
pub mod patches;
pub mod plane;
pub mod resize;
pub mod synthetic;

pub use color::{extract_y, rgb_to_ycbcr, Swing};
pub use io::{list_pngs, load_image, read_manifest, save_image, write_manifest};
pub use patches::{augment, crop_patches, Augment, PatchSet, Provenance};
pub use plane::{batch_tensor, ColorSpace, ImagePlane, Range};
pub use resize::{bicubic_resize, contributions, cubic, degrade, Scale, Taps};
pub use synthetic::{smooth_image, smooth_patch_set};
