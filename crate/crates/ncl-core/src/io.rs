//! File formats: headerless CSV matrices (17 significant digits) and the
//! versioned binary checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoders::{AnyEncoder, Encoder, MlpEncoder, TabularEncoder};
use crate::error::{NclError, Result};
use crate::reparam::NonNegTransform;

/// Row-major, headerless, 17 significant digits per entry.
pub fn write_matrix_csv(mut w: impl Write, a: &Array2<f64>) -> Result<()> {
    for row in a.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn write_vector_csv(mut w: impl Write, v: &Array1<f64>) -> Result<()> {
    for x in v {
        writeln!(w, "{x:.16e}")?;
    }
    Ok(())
}

pub fn read_matrix_csv(mut r: impl Read) -> Result<Array2<f64>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut rows = Vec::new();
    let mut width = None;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| NclError::ConfigInvalid(format!("bad CSV number: {e}")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(NclError::ConfigInvalid("ragged CSV".into()))
            }
            _ => {}
        }
        rows.push(row);
    }
    let w = width.unwrap_or(0);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let h = if w == 0 { 0 } else { flat.len() / w };
    Array2::from_shape_vec((h, w), flat)
        .map_err(|e| NclError::ConfigInvalid(format!("bad CSV shape: {e}")))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"NCLCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    kind: String,
    /// [d_in, hidden..., k] for MLPs, [n, k] for tabular encoders.
    layer_sizes: Vec<usize>,
    transform: Option<NonNegTransform>,
    seed: u64,
    param_count: usize,
    /// MLP only: the fixed coordinate embedding, stored ahead of the params.
    embedding_rows: usize,
    embedding_cols: usize,
}

/// Binary container: magic, little-endian u32 header length, JSON header,
/// then little-endian f64 blocks (embedding when present, then parameters).
pub fn save_checkpoint(path: &Path, enc: &AnyEncoder, seed: u64) -> Result<()> {
    let (header, embedding) = match enc {
        AnyEncoder::Tabular(t) => (
            CheckpointHeader {
                version: 1,
                kind: "tabular".into(),
                layer_sizes: vec![t.n_samples(), t.feature_dim()],
                transform: t.transform(),
                seed,
                param_count: t.param_count(),
                embedding_rows: 0,
                embedding_cols: 0,
            },
            None,
        ),
        AnyEncoder::Mlp(m) => (
            CheckpointHeader {
                version: 1,
                kind: "mlp".into(),
                layer_sizes: m.layer_sizes(),
                transform: m.transform(),
                seed,
                param_count: m.param_count(),
                embedding_rows: m.embedding().nrows(),
                embedding_cols: m.embedding().ncols(),
            },
            Some(m.embedding().clone()),
        ),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| NclError::ConfigInvalid(format!("header serialization: {e}")))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    if let Some(emb) = embedding {
        for v in emb.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    for v in enc.as_dyn().params() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Load a checkpoint back into a runnable encoder. Returns the encoder and
/// the seed recorded at save time.
pub fn load_checkpoint(path: &Path) -> Result<(AnyEncoder, u64)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NclError::MalformedCheckpoint("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(NclError::MalformedCheckpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| NclError::MalformedCheckpoint(format!("header: {e}")))?;

    let mut floats = Vec::new();
    let mut offset = header_end;
    while offset + 8 <= bytes.len() {
        floats.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
        offset += 8;
    }
    if offset != bytes.len() {
        return Err(NclError::MalformedCheckpoint("trailing bytes".into()));
    }

    let emb_len = header.embedding_rows * header.embedding_cols;
    if floats.len() != emb_len + header.param_count {
        return Err(NclError::MalformedCheckpoint(format!(
            "expected {} floats, found {}",
            emb_len + header.param_count,
            floats.len()
        )));
    }

    let enc = match header.kind.as_str() {
        "tabular" => {
            let [n, k] = header.layer_sizes[..] else {
                return Err(NclError::MalformedCheckpoint(
                    "tabular checkpoints carry [n, k]".into(),
                ));
            };
            let weights = Array2::from_shape_vec((n, k), floats)
                .map_err(|e| NclError::MalformedCheckpoint(e.to_string()))?;
            AnyEncoder::Tabular(TabularEncoder::from_weights(weights, header.transform))
        }
        "mlp" => {
            if header.layer_sizes.len() < 2 {
                return Err(NclError::MalformedCheckpoint("missing layer sizes".into()));
            }
            let embedding = Array2::from_shape_vec(
                (header.embedding_rows, header.embedding_cols),
                floats[..emb_len].to_vec(),
            )
            .map_err(|e| NclError::MalformedCheckpoint(e.to_string()))?;
            let hidden = &header.layer_sizes[1..header.layer_sizes.len() - 1];
            let k = *header.layer_sizes.last().unwrap();
            let mut mlp = MlpEncoder::new(embedding, hidden, k, header.transform, header.seed)?;
            mlp.set_params(&floats[emb_len..])?;
            AnyEncoder::Mlp(mlp)
        }
        other => {
            return Err(NclError::MalformedCheckpoint(format!(
                "unknown encoder kind `{other}`"
            )))
        }
    };
    Ok((enc, header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderInit;

    #[test]
    fn matrix_csv_roundtrip_is_exact() {
        let a = Array2::from_shape_fn((3, 4), |(i, j)| {
            (i as f64 + 1.0) / (j as f64 + 3.0) * 1e-7
        });
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &a).unwrap();
        let b = read_matrix_csv(buf.as_slice()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tabular_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let enc = AnyEncoder::Tabular(TabularEncoder::new(
            6,
            3,
            Some(NonNegTransform::Relu),
            EncoderInit::Auto,
            42,
        ));
        save_checkpoint(&path, &enc, 42).unwrap();
        let (loaded, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(loaded.as_dyn().params(), enc.as_dyn().params());
        assert_eq!(loaded.as_dyn().transform(), enc.as_dyn().transform());
    }

    #[test]
    fn mlp_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mlp.ckpt");
        let enc = AnyEncoder::Mlp(
            MlpEncoder::with_one_hot_input(5, &[4], 3, None, 7).unwrap(),
        );
        save_checkpoint(&path, &enc, 7).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.as_dyn().params(), enc.as_dyn().params());
        let a = crate::encoders::encode_all(loaded.as_dyn(), 5).unwrap();
        let b = crate::encoders::encode_all(enc.as_dyn(), 5).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NclError::MalformedCheckpoint(_))
        ));
    }
}
