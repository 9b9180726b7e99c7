//! Lossless parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..6   magic  b"FDCKPT"
//! bytes 6..8   format version (u16, currently 1)
//! bytes 8..16  JSON header length in bytes (u64)
//! ...          JSON header: network config, epoch, payload element counts,
//!              standardization presence flag
//! ...          payload, raw little-endian f64 in order:
//!                time-embedding frequencies   (rff_dim)
//!                trainable parameters         (layout.total)
//!                standardization mean, std    (2·m, only if flagged)
//! ...          standardization floored-feature indices (u64 each, count in
//!              header; only if flagged)
//! ```
//!
//! Floats round-trip bit-exactly (no decimal formatting anywhere).

use crate::scorenet::{ParamLayout, ScoreNetConfig, ScoreNetError, ScoreNetParams};
use crate::train::StandardizationStats;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 6] = b"FDCKPT";
const VERSION: u16 = 1;

/// Errors from checkpoint I/O.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    UnsupportedVersion(u16),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {reason}")]
    Corrupt { reason: String },
    #[error(transparent)]
    Net(#[from] ScoreNetError),
}

/// Everything a resumed or sampling run needs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ScoreNetParams,
    /// Present when the checkpoint was trained on standardized data.
    pub stats: Option<StandardizationStats>,
    /// Last completed training epoch (0 for a fresh initialization).
    pub epoch: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: ScoreNetConfig,
    epoch: usize,
    rff_dim: usize,
    n_params: usize,
    has_standardization: bool,
    n_floored: usize,
}

/// Write a checkpoint. The file is complete and self-describing; see the
/// module docs for the exact layout.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let params = &ckpt.params;
    let header = Header {
        config: params.cfg.clone(),
        epoch: ckpt.epoch,
        rff_dim: params.rff_freqs.len(),
        n_params: params.data.len(),
        has_standardization: ckpt.stats.is_some(),
        n_floored: ckpt.stats.as_ref().map_or(0, |s| s.floored.len()),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let write_f64s = |vals: &[f64], w: &mut BufWriter<File>| -> std::io::Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    write_f64s(&params.rff_freqs, &mut w)?;
    write_f64s(&params.data, &mut w)?;
    if let Some(stats) = &ckpt.stats {
        write_f64s(&stats.mean, &mut w)?;
        write_f64s(&stats.std, &mut w)?;
        for &idx in &stats.floored {
            w.write_all(&(idx as u64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut two = [0u8; 2];
    read_exact_or(&mut r, &mut two, "version")?;
    let version = u16::from_le_bytes(two);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut eight = [0u8; 8];
    read_exact_or(&mut r, &mut eight, "header length")?;
    let header_len = u64::from_le_bytes(eight) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    header.config.validate()?;

    let layout = ParamLayout::new(&header.config);
    if layout.total != header.n_params {
        return Err(CheckpointError::Corrupt {
            reason: format!(
                "header claims {} parameters but the config implies {}",
                header.n_params, layout.total
            ),
        });
    }
    if header.rff_dim != header.config.rff_dim {
        return Err(CheckpointError::Corrupt {
            reason: "time-embedding frequency count disagrees with the config".to_string(),
        });
    }

    let rff_freqs = read_f64s(&mut r, header.rff_dim, "time-embedding frequencies")?;
    let data = read_f64s(&mut r, header.n_params, "parameters")?;
    let stats = if header.has_standardization {
        let m = header.config.m;
        let mean = read_f64s(&mut r, m, "standardization means")?;
        let std = read_f64s(&mut r, m, "standardization stds")?;
        let mut floored = Vec::with_capacity(header.n_floored);
        for _ in 0..header.n_floored {
            read_exact_or(&mut r, &mut eight, "floored index")?;
            floored.push(u64::from_le_bytes(eight) as usize);
        }
        Some(StandardizationStats { mean, std, floored })
    } else {
        None
    };

    let params = ScoreNetParams { cfg: header.config, layout, data, rff_freqs };
    Ok(Checkpoint { params, stats, epoch: header.epoch })
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Corrupt { reason: format!("truncated while reading {what}") }
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_f64s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = vec![0u8; count * 8];
    read_exact_or(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn roundtrip_dir() -> tempfile::TempDir {
        tempfile::tempdir().expect("create temp dir")
    }

    fn sample_checkpoint(with_stats: bool) -> Checkpoint {
        let cfg = ScoreNetConfig { n: 10, m: 2, n_layers: 2, d_model: 8, n_heads: 2, rff_dim: 4, q_for_all: true };
        let mut rng = stream_rng(21, Stream::Init);
        let mut params = ScoreNetParams::init(cfg, &mut rng).unwrap();
        params.randomize_output_projection(0.5, &mut rng);
        // Exercise awkward float values.
        params.data[0] = f64::MIN_POSITIVE;
        params.data[1] = -0.0;
        params.data[2] = 1e300;
        let stats = with_stats.then(|| StandardizationStats {
            mean: vec![0.25, -3.5e-7],
            std: vec![1.75, 1e-8],
            floored: vec![1],
        });
        Checkpoint { params, stats, epoch: 17 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = roundtrip_dir();
        let path = dir.path().join("net.ckpt");
        for with_stats in [false, true] {
            let ckpt = sample_checkpoint(with_stats);
            save(&path, &ckpt).unwrap();
            let loaded = load(&path).unwrap();
            assert_eq!(loaded.epoch, 17);
            assert_eq!(loaded.params.cfg, ckpt.params.cfg);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&loaded.params.data), bits(&ckpt.params.data));
            assert_eq!(bits(&loaded.params.rff_freqs), bits(&ckpt.params.rff_freqs));
            match (loaded.stats, ckpt.stats) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(bits(&a.mean), bits(&b.mean));
                    assert_eq!(bits(&a.std), bits(&b.std));
                    assert_eq!(a.floored, b.floored);
                }
                _ => panic!("standardization presence not preserved"),
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = roundtrip_dir();
        let path = dir.path().join("net.ckpt");
        let ckpt = sample_checkpoint(true);
        save(&path, &ckpt).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ckpt");

        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&bad, &corrupted).unwrap();
        assert!(matches!(load(&bad), Err(CheckpointError::BadMagic)));

        std::fs::write(&bad, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&bad), Err(CheckpointError::Corrupt { .. })));

        let mut wrong_version = bytes;
        wrong_version[6] = 99;
        std::fs::write(&bad, &wrong_version).unwrap();
        assert!(matches!(load(&bad), Err(CheckpointError::UnsupportedVersion(_))));
    }
}
