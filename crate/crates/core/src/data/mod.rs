//! Tasks and task generators: GP-prior samples, the cubic-gap set, IDX image
//! files, masked image tasks and the interpolation baseline.

mod gp;
mod idx;
mod image;
mod task;

pub use gp::{cubic_gap_task, cubic_gap_task_with, gp_sample_at, gp_sample_task, kernel_eval, CubicGap, KernelKind, KernelSpec};
pub use idx::{load_idx, load_idx_labels, parse_idx, parse_idx_labels, write_idx_images, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use image::{linear_interp_baseline, make_image_task, pixel_coordinate, ImageTask};
pub use task::{MetaDataset, Task};
