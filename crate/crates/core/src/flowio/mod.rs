//! Flow files, weight files, images, metrics and visualization.

mod flo;
mod image;
mod metrics;
mod weightfile;

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use image::{colorize, decode_image, flow_hue, read_image, write_png};
pub use metrics::{aee, fl_all};
pub use weightfile::{
    decode_weights, encode_weights, load_weights, read_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};
