use alacarte_core::Error;

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const POOL: u8 = 4;

/// Failure to read or write a pool or checkpoint directory.
#[derive(Debug)]
pub struct Storage(pub String);

impl std::fmt::Display for Storage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Storage {}

pub fn code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Storage>().is_some() {
        return POOL;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Mask(_) | Error::Partition(_) | Error::Json(_)) => CONFIG,
        Some(Error::Data(_) | Error::Label { .. } | Error::Csv(_)) => DATA,
        Some(
            Error::StalePrompt { .. }
            | Error::Lookup(_)
            | Error::EmptySelection
            | Error::Composition(_)
            | Error::Format { .. },
        ) => POOL,
        _ => 1,
    }
}
