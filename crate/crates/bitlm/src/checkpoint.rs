//! Checkpoint file: a structured-text header (model config, input kind,
//! recoder, run provenance) followed by named parameter arrays as
//! little-endian 32-bit floats with shape prefixes. Round-trips bit-exactly
//! and carries enough to reconstruct the input interface for evaluation.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codes::Recoder;
use crate::gf2::{BitMatrix, BitVector};
use crate::model::{
    rebuild_parameters, InputInterface, InputKind, ModelConfig, Parameters,
};
use crate::nn::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad checkpoint: {0}")]
    Malformed(String),
    #[error("non-finite parameter values in {0}; refusing to write")]
    NonFinite(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Code(#[from] crate::codes::CodeError),
    #[error(transparent)]
    Gf2(#[from] crate::gf2::Gf2Error),
}

const MAGIC: &str = "bitlm-checkpoint-v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub recoder: Option<Recoder>,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    /// The input interface this checkpoint was trained with.
    pub fn interface(&self) -> Result<InputInterface, CheckpointError> {
        Ok(InputInterface::for_config(&self.config, self.recoder.clone())?)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    for p in ckpt.params.entries() {
        if !p.value.all_finite() {
            return Err(CheckpointError::NonFinite(p.name.clone()));
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let m = &ckpt.config;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("model.vocab_size = {}\n", m.vocab_size));
    header.push_str(&format!("model.d_model = {}\n", m.d_model));
    header.push_str(&format!("model.n_layers = {}\n", m.n_layers));
    header.push_str(&format!("model.n_heads = {}\n", m.n_heads));
    header.push_str(&format!("model.context_len = {}\n", m.context_len));
    header.push_str(&format!("model.mlp_ratio = {}\n", m.mlp_ratio));
    header.push_str(&format!("model.rope_base = {}\n", m.rope_base));
    header.push_str(&format!("model.norm_eps = {}\n", m.norm_eps));
    header.push_str(&format!("model.input_kind = {}\n", m.input_kind.as_str()));
    header.push_str(&format!("seed = {}\n", ckpt.seed));
    header.push_str(&format!("step = {}\n", ckpt.step));
    if let Some(recoder) = &ckpt.recoder {
        let rows: Vec<String> =
            (0..recoder.matrix.side()).map(|i| recoder.matrix.row(i).to_string()).collect();
        header.push_str(&format!("recoder.matrix = {}\n", rows.join(",")));
        header.push_str(&format!("recoder.shift = {}\n", recoder.shift));
    }
    header.push_str("---\n");
    w.write_all(header.as_bytes()).map_err(io_err)?;

    let entries = ckpt.params.entries();
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io_err)?;
    for p in entries {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes()).map_err(io_err)?;
        for &dim in p.value.shape() {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &x in p.value.data() {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut r = BufReader::new(std::fs::File::open(path).map_err(io_err)?);

    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte).map_err(io_err)?;
        header.push(byte[0]);
        if header.ends_with(b"---\n") {
            break;
        }
        if header.len() > 1 << 20 {
            return Err(CheckpointError::Malformed("unterminated header".into()));
        }
    }
    let header = String::from_utf8(header)
        .map_err(|_| CheckpointError::Malformed("non-utf8 header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(CheckpointError::Malformed("missing magic line".into()));
    }
    let mut fields: HashMap<String, String> = HashMap::new();
    for line in lines {
        if line == "---" {
            break;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CheckpointError::Malformed(format!("bad header line {line:?}")));
        };
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String, CheckpointError> {
        fields.get(key).ok_or_else(|| CheckpointError::Malformed(format!("missing {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize, CheckpointError> {
        get(key)?
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad integer for {key}")))
    };
    let parse_f64 = |key: &str| -> Result<f64, CheckpointError> {
        get(key)?
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad float for {key}")))
    };
    let input_kind = InputKind::parse(get("model.input_kind")?)
        .ok_or_else(|| CheckpointError::Malformed("bad model.input_kind".into()))?;
    let config = ModelConfig {
        vocab_size: parse_usize("model.vocab_size")?,
        d_model: parse_usize("model.d_model")?,
        n_layers: parse_usize("model.n_layers")?,
        n_heads: parse_usize("model.n_heads")?,
        context_len: parse_usize("model.context_len")?,
        mlp_ratio: parse_usize("model.mlp_ratio")?,
        rope_base: parse_f64("model.rope_base")?,
        norm_eps: parse_f64("model.norm_eps")?,
        input_kind,
    };
    let seed = parse_usize("seed")? as u64;
    let step = parse_usize("step")? as u64;
    let recoder = match fields.get("recoder.matrix") {
        None => None,
        Some(rows) => {
            let k = config.code_width();
            let words = rows
                .split(',')
                .map(|row| BitVector::parse(row.trim()).map(|v| v.word()))
                .collect::<Result<Vec<u64>, _>>()?;
            if words.len() != k {
                return Err(CheckpointError::Malformed(format!(
                    "recoder has {} rows, code width is {k}",
                    words.len()
                )));
            }
            let matrix = BitMatrix::from_rows(k, &words);
            let shift = BitVector::parse(get("recoder.shift")?)?;
            Some(Recoder::new(matrix, shift)?)
        }
    };

    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<u32, CheckpointError> {
        r.read_exact(&mut u32_buf).map_err(io_err)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let count = read_u32(&mut r)? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("non-utf8 array name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        let mut buf = [0u8; 4];
        for slot in &mut data {
            r.read_exact(&mut buf).map_err(io_err)?;
            *slot = f32::from_le_bytes(buf);
        }
        named.push((name, Tensor::from_vec(&shape, data)));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes after arrays".into()));
    }
    let params = rebuild_parameters(&config, named)?;
    Ok(Checkpoint { config, params, recoder, seed, step })
}
