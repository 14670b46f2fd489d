use std::path::{Path, PathBuf};

use startstop_core::formats::{self, StreamSidecar, SIDECAR_KIND};
use startstop_core::pipeline::SessionWindows;
use startstop_core::synth::Recording;
use startstop_core::StreamConfig;

use crate::{CliResult, Failure};

/// `x.eegs` -> `x.truth.json`.
pub fn sidecar_path(stream: &Path) -> PathBuf {
    stream.with_extension("truth.json")
}

pub fn load_stream(path: &Path) -> CliResult<(Recording, StreamSidecar)> {
    let rec = formats::read_stream(path)?;
    let sidecar: StreamSidecar = formats::read_json(&sidecar_path(path), SIDECAR_KIND)?;
    if sidecar.n_frames != rec.n_frames() || sidecar.fs != rec.fs {
        return Err(Failure::new(
            "format",
            format!(
                "{} holds {} frames at {} Hz but its sidecar describes {} at {} Hz",
                path.display(),
                rec.n_frames(),
                rec.fs,
                sidecar.n_frames,
                sidecar.fs
            ),
        ));
    }
    Ok((rec, sidecar))
}

pub fn load_session(path: &Path, stream: &StreamConfig) -> CliResult<SessionWindows> {
    let (rec, sidecar) = load_stream(path)?;
    Ok(SessionWindows::from_recording(&rec, &sidecar.ground_truth, stream)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}
