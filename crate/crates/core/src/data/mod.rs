//! Series ingestion, windowing, normalisation and synthetic data.

mod graph_file;
mod normalize;
mod series;
mod synthetic;
mod window;

pub use graph_file::{load_predefined_graph, PredefinedGraph};
pub use normalize::Normalizer;
pub use series::{load_meta, load_series, sidecar_path, write_series, SeriesMeta, TrafficSeries};
pub use synthetic::{make_synthetic, SyntheticParams};
pub use window::{split_and_window, Batch, Splits, TrafficWindow, WindowSet};
