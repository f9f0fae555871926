//! Language-derived concept subspaces for embedding-space anomaly detection.
//!
//! Text features of prompts that vary one concept (a color, a digit, a
//! background) are differenced pairwise and reduced to their principal axes.
//! Image features are then *guided* onto that concept subspace, keeping only
//! the attribute that should define normality, or made to *ignore* it by
//! projecting onto its orthogonal complement. Anomalies are scored by exact
//! cosine kNN against normal reference features and evaluated with AUROC,
//! AUPRC and FPR at 95% TPR.
//!
//! ```
//! use textguide::prelude::*;
//!
//! let normal = EmbeddingMatrix::from_rows(&[[1.0, 0.1, 0.0], [0.9, -0.1, 0.2]]).unwrap();
//! let test = EmbeddingMatrix::from_rows(&[[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]]).unwrap();
//! let concept = ConceptSubspace::from_orthonormal_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
//! let spec = TransformSpec::single(Mode::Guide, concept);
//! let report = score_pipeline(&normal, &test, &spec, &ScoringConfig { k: 1 }).unwrap();
//! assert!(report.scores[0] < report.scores[1]);
//! ```

pub mod cli;
pub mod error;
pub mod knn;
pub mod metrics;
pub mod prompt;
pub mod report;
pub mod subspace;
pub mod synth;
pub mod tensor_io;
pub mod transform;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::knn::{score, score_pipeline, ScoreReport, ScoringConfig};
    pub use crate::metrics::{auprc, auroc, evaluate, fpr_at_tpr, EvalReport};
    pub use crate::prompt::{render_prompts, PromptSet};
    pub use crate::subspace::{
        build_subspace, extract_axes, pairwise_differences, ConceptSubspace, SubspaceOptions,
    };
    pub use crate::tensor_io::{load_matrix, save_matrix, EmbeddingMatrix, LabeledSet};
    pub use crate::transform::{apply_transform, guide, ignore, Mode, TransformSpec};
}
