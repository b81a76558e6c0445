//! Non-learned spatial machinery: point clouds, sampling, neighbor graphs and
//! oriented boxes.

mod boxes;
mod cloud;
mod iou;
mod knn;

pub use boxes::{apply_motion, inverse_motion, normalize_angle, Box7};
pub use cloud::{crop_search_area, points_in_box, random_resample, resample_indices, Features, PointCloud};
pub use iou::{bev_intersection, clip_convex, iou3d, polygon_area};
pub use knn::{knn_coords, knn_features, NeighborGraph};
