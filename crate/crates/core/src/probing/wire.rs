//! JSON bodies of the black-box HTTP endpoint.

use serde::{Deserialize, Serialize};

pub const QUERY_PATH: &str = "/v1/query";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    /// Flattened `[H, W, channels]` images.
    pub queries: Vec<Vec<f32>>,
    pub shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub probs: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
