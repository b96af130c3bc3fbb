pub mod cca;
pub mod error;
pub mod infer;
pub mod linalg;
pub mod permute;
pub mod residualize;
pub mod simulate;

pub use cca::{cca, CcaFit, ProblemDims};
pub use error::{Error, Result};
pub use infer::{permcca, Dataset, InferenceOptions, InferenceResult, NuisanceMethod, StatisticKind};
pub use linalg::Mat;
pub use permute::{BlockMode, BlockStructure};
pub use residualize::SelectionPlan;
pub use simulate::{run_scenario, ErrorRateReport, ScenarioSpec, Strategy};
