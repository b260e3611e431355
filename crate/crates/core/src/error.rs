use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate tangent frame (|t_u x t_v| = {0:e})")]
    DegenerateFrame(f64),
    #[error("direction is not unit length (|d| = {0})")]
    InvalidDirection(f64),
    #[error("normal is not unit length (|n| = {0})")]
    InvalidNormal(f64),
    #[error("splat direction is zero: Gaussian center coincides with the camera center")]
    ZeroDirection,
    #[error("cutoff ellipse is empty: opacity {opacity} <= min alpha {min_alpha}")]
    EmptyEllipse { opacity: f64, min_alpha: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache does not match the scene being differentiated")]
    StaleCache,
    #[error("at least one view is required")]
    NoViews,
    #[error("refusing to prune: {0}")]
    RefusePrune(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("scene file format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, machine-parsable category used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DegenerateFrame(_)
            | Error::InvalidDirection(_)
            | Error::InvalidNormal(_)
            | Error::ZeroDirection
            | Error::EmptyEllipse { .. } => "geometry",
            Error::Shape(_) => "shape",
            Error::StaleCache => "stale-cache",
            Error::NoViews => "no-views",
            Error::RefusePrune(_) => "refuse-prune",
            Error::InvalidScene(_) | Error::InvalidCamera(_) | Error::InvalidArgument(_) => {
                "invalid-input"
            }
            Error::Format(_) | Error::Json(_) | Error::Csv(_) | Error::Image(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
