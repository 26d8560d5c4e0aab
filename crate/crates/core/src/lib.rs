//! Parallel construction and querying of an iSAX index over disk-resident
//! data series collections.

pub mod baseline;
pub mod build;
pub mod datagen;
pub mod distance;
pub mod error;
pub mod index;
pub mod query;
pub mod raw;
pub mod sax;
pub mod series;
pub mod verify;

pub use build::{build_paris, build_parisplus, BuildProgress, BuildStats, Builder, Variant};
pub use error::{Error, Result};
pub use index::{load_index, persist_index, Index, IndexConfig, SaxArray};
pub use query::{QueryAnswer, QueryMetrics, SearchOptions, Searcher};
pub use sax::SaxWord;
pub use series::{compute_paa, znormalize, Paa};
