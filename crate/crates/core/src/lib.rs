//! Small-object detection in large images.
//!
//! Images are broken into fixed-size overlapping patches across an image
//! pyramid; a detector with a single, finely strided feature map finds small
//! objects inside each patch, and patch-level detections are projected back
//! onto the original image and merged with non-maximum suppression. Large
//! objects are found on the down-sampled pyramid levels where they become
//! small.
//!
//! Module map:
//! - [`raster`]: images, PPM I/O, pyramids and tiling
//! - [`geometry`]: boxes, IoU, NMS, projection
//! - [`anchors`]: default boxes, offset coding, matching
//! - [`synth`]: synthetic scenes, training patches, augmentation, annotations
//! - [`net`]: tensor ops and the detector network
//! - [`train`]: multibox loss, hard negative mining, SGD
//! - [`detect`]: end-to-end inference
//! - [`eval`]: precision/recall by object size

pub mod anchors;
pub mod detect;
pub mod eval;
pub mod geometry;
pub mod net;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod train;
