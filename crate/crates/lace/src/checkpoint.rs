//! Versioned binary model checkpoints.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! bytes 0..8    magic "LACECKPT"
//! bytes 8..12   format version, u32 little-endian (currently 1)
//! bytes 12..16  header length in bytes, u32 little-endian
//! header        JSON: network config, noise-schedule content hash,
//!               and the expected parameter shapes
//! payload       every parameter tensor in slot order, row-major,
//!               each scalar as a little-endian f64
//! last 4 bytes  CRC-32 of everything before it, u32 little-endian
//! ```
//!
//! Parameters are always stored at f64 width, so a single-precision model
//! round-trips bit-exactly (every f32 is exactly representable as f64).

use crate::denoiser::{Denoiser, DenoiserConfig, ParamIndex};
use crate::error::{Error, Result};
use crate::layout::LayoutSchema;
use crate::tape::Real;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LACECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: DenoiserConfig,
    schedule_hash: u64,
    param_shapes: Vec<(usize, usize)>,
}

/// Writes `bytes` to `path` atomically: a temp file in the same directory is
/// flushed, then renamed over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other("path has no file name")))?;
    let mut tmp = std::path::PathBuf::from(dir.unwrap_or_else(|| Path::new(".")));
    tmp.push(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes a model plus the hash of the schedule it was trained against.
pub fn checkpoint_bytes<T: Real>(model: &Denoiser<T>, schedule_hash: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config,
        schedule_hash,
        param_shapes: model.index.shapes.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let payload_len: usize = model.index.total_scalars() * 8;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload_len + 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for p in &model.params {
        for v in p.iter() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<T: Real>(model: &Denoiser<T>, schedule_hash: u64, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, schedule_hash)?;
    write_atomic(path, &bytes)
}

/// Parses checkpoint bytes back into a model and the stored schedule hash.
pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<(Denoiser<T>, u64)> {
    if bytes.len() < 20 {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    if bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let body_len = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let actual_crc = crc32(&bytes[..body_len]);
    if stored_crc != actual_crc {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {:08x}, computed {:08x}",
            stored_crc, actual_crc
        )));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body_len)
        .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Checkpoint(format!("header parse failed: {}", e)))?;
    header.config.validate()?;
    let index = ParamIndex::new(&header.config);
    if header.param_shapes != index.shapes {
        return Err(Error::Checkpoint(
            "parameter shapes in header do not match the stored config".into(),
        ));
    }
    let expected_payload = index.total_scalars() * 8;
    if body_len - header_end != expected_payload {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, expected {}",
            body_len - header_end,
            expected_payload
        )));
    }
    let mut params = Vec::with_capacity(index.n_slots());
    let mut off = header_end;
    for &(rows, cols) in &index.shapes {
        let mut m = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                m[[r, c]] = T::of_f64(v);
                off += 8;
            }
        }
        params.push(m);
    }
    let model = Denoiser { config: header.config, index, params };
    model.check_finite()?;
    Ok((model, header.schedule_hash))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Denoiser<T>, u64)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it if the stored network was built for a
/// different layout schema than the caller is working with.
pub fn load_checkpoint_for_schema<T: Real>(
    path: &Path,
    schema: &LayoutSchema,
) -> Result<(Denoiser<T>, u64)> {
    let (model, hash) = load_checkpoint(path)?;
    if model.config.n_classes != schema.n_classes || model.config.max_elements != schema.max_elements
    {
        return Err(Error::Config(format!(
            "checkpoint was trained for {} classes x {} elements, but the requested schema has {} x {}",
            model.config.n_classes,
            model.config.max_elements,
            schema.n_classes,
            schema.max_elements
        )));
    }
    Ok((model, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, rng_from_seed};

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            n_classes: 2,
            max_elements: 3,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn crc32_matches_reference_vectors() {
        assert_eq!(crc32(b""), 0);
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
        assert_eq!(crc32(b"The quick brown fox jumps over the lazy dog"), 0x414FA339);
    }

    #[test]
    fn round_trip_is_bit_exact_in_double_precision() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, 0xDEADBEEF, &path).unwrap();
        let (loaded, hash) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(hash, 0xDEADBEEF);
        assert_eq!(loaded.config, model.config);
        for (a, b) in loaded.params.iter().zip(model.params.iter()) {
            assert_eq!(a, b);
        }
        let mut rng = rng_from_seed(1);
        let x = normal_matrix(&mut rng, 3, 7);
        let before = model.predict_batch(x.clone(), &[77]).unwrap();
        let after = loaded.predict_batch(x, &[77]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn round_trip_is_bit_exact_in_single_precision() {
        let model: Denoiser<f32> = Denoiser::init(tiny_config(), 43).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model32.ckpt");
        save_checkpoint(&model, 7, &path).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
        for (a, b) in loaded.params.iter().zip(model.params.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flipped_payload_byte_is_caught_by_checksum() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 44).unwrap();
        let mut bytes = checkpoint_bytes(&model, 1).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = checkpoint_from_bytes::<f64>(&bytes).unwrap_err();
        assert!(format!("{}", err).contains("checksum"), "{}", err);
    }

    #[test]
    fn wrong_magic_and_truncation_are_rejected() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 45).unwrap();
        let bytes = checkpoint_bytes(&model, 1).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes::<f64>(&bad).is_err());
        let truncated = &bytes[..bytes.len() - 9];
        assert!(checkpoint_from_bytes::<f64>(truncated).is_err());
        assert!(checkpoint_from_bytes::<f64>(&bytes[..10]).is_err());
    }

    #[test]
    fn future_version_is_rejected_even_with_valid_checksum() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 46).unwrap();
        let mut bytes = checkpoint_bytes(&model, 1).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let body = bytes.len() - 4;
        let crc = crc32(&bytes[..body]);
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&crc.to_le_bytes());
        let err = checkpoint_from_bytes::<f64>(&bytes).unwrap_err();
        assert!(format!("{}", err).contains("version"), "{}", err);
    }

    #[test]
    fn schema_mismatch_is_a_config_error() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 47).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, 1, &path).unwrap();
        let other = LayoutSchema { n_classes: 9, max_elements: 3 };
        let err = load_checkpoint_for_schema::<f64>(&path, &other).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{}", err);
        let ok = LayoutSchema { n_classes: 2, max_elements: 3 };
        assert!(load_checkpoint_for_schema::<f64>(&path, &ok).is_ok());
    }

    #[test]
    fn single_precision_weights_survive_double_width_storage() {
        // f32 -> f64 -> f32 must be the identity for every finite value.
        let vals = [1.0f32, -0.333_333_34, 1.0e-30, 3.402_823_5e38, f32::MIN_POSITIVE];
        for v in vals {
            assert_eq!((v as f64) as f32, v);
        }
    }

    #[test]
    fn atomic_write_replaces_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty(), "temp files left behind");
    }
}
