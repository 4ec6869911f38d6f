//! Parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header
//! `{dims, seed, step}`, then every parameter as a little-endian `f64` in
//! tensor order (`TENSOR_NAMES`, each row-major).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: EncoderDims,
    pub seed: u64,
    pub step: u64,
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt_{step}.bin"))
}

pub fn encode(header: &CheckpointHeader, params: &EncoderParams) -> Result<Vec<u8>> {
    if params.dims != header.dims {
        return Err(Error::Usage("checkpoint header dims differ from the parameters".into()));
    }
    let json = serde_json::to_vec(header)?;
    let flat = params.flatten();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * flat.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in flat {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, EncoderParams)> {
    let short = || Error::Load("checkpoint truncated".into());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(short)?.try_into().map_err(|_| short())?;
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| short())?;
    let body_start = 8usize.checked_add(len).ok_or_else(short)?;
    let header: CheckpointHeader = serde_json::from_slice(bytes.get(8..body_start).ok_or_else(short)?)
        .map_err(|e| Error::Load(format!("bad checkpoint header: {e}")))?;
    header.dims.validate().map_err(|e| Error::Load(format!("bad checkpoint dims: {e}")))?;
    let body = &bytes[body_start..];
    let expected = header.dims.n_params();
    if body.len() != 8 * expected {
        return Err(Error::Load(format!(
            "checkpoint holds {} bytes of parameters, dims need {}",
            body.len(),
            8 * expected
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let params = EncoderParams::from_flat(header.dims, &flat).map_err(|e| Error::Load(e.to_string()))?;
    Ok((header, params))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &EncoderParams) -> Result<()> {
    fs::write(path, encode(header, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, EncoderParams)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks it against the dims a caller expects.
pub fn load_expecting(path: &Path, dims: EncoderDims) -> Result<(CheckpointHeader, EncoderParams)> {
    let (header, params) = load(path)?;
    if header.dims != dims {
        return Err(Error::Load(format!(
            "checkpoint {} has dims {:?}, configuration needs {:?}",
            path.display(),
            header.dims,
            dims
        )));
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn dims() -> EncoderDims {
        EncoderDims {
            frame_dim: 3,
            vocab_size: 5,
            hidden_dim: 4,
            scorer_dim: 2,
            token_dim: 3,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = EncoderParams::init(dims(), &mut rng::stream(5, &[1])).unwrap();
        let h = CheckpointHeader { dims: dims(), seed: 5, step: 17 };
        let (h2, p2) = decode(&encode(&h, &p).unwrap()).unwrap();
        assert_eq!(h, h2);
        assert_eq!(
            p.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            p2.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn body_is_little_endian_in_tensor_order() {
        let mut p = EncoderParams::zeros(dims());
        p.w_v[0] = 1.5;
        p.b_2[0] = -2.0;
        let bytes = encode(&CheckpointHeader { dims: dims(), seed: 0, step: 0 }, &p).unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8 + len..];
        assert_eq!(&body[..8], &1.5f64.to_le_bytes());
        assert_eq!(&body[body.len() - 8..], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn truncated_or_mismatched_files_fail_to_load() {
        let p = EncoderParams::zeros(dims());
        let bytes = encode(&CheckpointHeader { dims: dims(), seed: 0, step: 0 }, &p).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Load(_))));
        assert!(matches!(decode(&bytes[..4]), Err(Error::Load(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = checkpoint_path(dir.path(), 0);
        save(&path, &CheckpointHeader { dims: dims(), seed: 0, step: 0 }, &p).unwrap();
        let other = EncoderDims { hidden_dim: 8, ..dims() };
        assert!(matches!(load_expecting(&path, other), Err(Error::Load(_))));
        assert!(load_expecting(&path, dims()).is_ok());
    }
}
