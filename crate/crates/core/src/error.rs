use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate distribution: every entry is -inf along axis {axis}")]
    DegenerateDistribution { axis: usize },
    #[error("input error: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sampler exhausted: no feasible operation left")]
    ExhaustedSampler,
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFinite { step: u64, diagnostic: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
