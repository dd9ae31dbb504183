//! Process exit codes.

use imgep_core::Error;

pub const SUCCESS: u8 = 0;
pub const CONFIG: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const IO: u8 = 4;
pub const OTHER: u8 = 1;

/// Exit code of a failed command, from the first recognised cause.
pub fn code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Argument(_) | Error::State(_) => CONFIG,
                Error::Numeric(_) => NUMERIC,
                Error::Format(_) | Error::Io(_) | Error::Csv(_) => IO,
            };
        }
        if cause.is::<toml::de::Error>() || cause.is::<toml::ser::Error>() {
            return CONFIG;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return IO;
        }
    }
    OTHER
}
