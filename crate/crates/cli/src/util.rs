//! Small shared helpers.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use wcps_core::io::read_timetags;
use wcps_core::timetag::EventStream;

use crate::output::CliError;

pub fn read_stream(path: &Path) -> Result<EventStream, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::new("io", format!("open {path:?}: {e}")))?;
    read_timetags(BufReader::new(file))
        .map_err(|e| CliError::new("parse", format!("{path:?}: {e}")))
}
