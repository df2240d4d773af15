//! Attention maps, query ablation and meta-query PCA.

pub mod ablation;
mod colormap;
pub mod heatmap;
pub mod pca;

pub use ablation::{ablate_all_queries, query_ablation_study, AblationResult};
pub use colormap::Colormap;
pub use heatmap::{attention_heatmap, Heatmap, HeatmapSpec, Reduction};
pub use pca::{
    decoder_attention_projection, pca_meta_queries, pca_meta_queries_joint, render_projection, MetaQueries, Pca,
};
