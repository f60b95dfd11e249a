//! Pipeline commands behind the `splatedit` binary.

pub mod bundle;
pub mod commands;
pub mod config;

/// Process exit code for an error chain: 2 for degenerate data or a diverged
/// optimization, 3 when the external prior fails, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<splatedit::Error>() {
            return match e {
                splatedit::Error::Degenerate(_) | splatedit::Error::Diverged { .. } => 2,
                splatedit::Error::GuidanceUnavailable(_) => 3,
                _ => 1,
            };
        }
    }
    1
}
