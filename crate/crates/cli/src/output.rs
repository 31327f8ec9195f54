use std::fs;
use std::io;
use std::path::Path;

use irlgan_core::gcl::MetricRow;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git blob hash of `text`, but with SHA-256: `sha256("blob <len>\0" + text)`.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    // serialize() only emits the header with the first record
    if rows.is_empty() {
        w.write_record(["iteration", "disc_loss", "gen_loss", "log_z", "exact_kl", "grad_norm"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_layout() {
        // printf 'blob 0\0' | sha256sum
        assert_eq!(
            content_hash(""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn empty_metrics_still_have_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &[]).unwrap();
        assert_eq!(
            fs::read_to_string(p).unwrap(),
            "iteration,disc_loss,gen_loss,log_z,exact_kl,grad_norm\n"
        );
    }
}
