//! Checkpoint container: magic, format version, the configuration as
//! canonical key=value text, then named tensor blocks (name, dtype tag,
//! shape, raw little-endian values). Loading restores forward outputs
//! bit-exactly; partial restore covers the pretrain-then-finetune flow.

use std::io::{Read, Write};
use std::path::Path;

use super::{GptConfig, GptModel};
use crate::autograd::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PILLGPT1";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 2;

pub fn save_checkpoint(model: &GptModel, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config_text = model.config.to_kv();
    w.write_all(&(config_text.len() as u64).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_params(r: &mut impl Read) -> Result<(GptConfig, ParamSet)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_exact_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_len = read_exact_u64(r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)
        .map_err(|_| Error::Format("truncated checkpoint config".into()))?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let config = GptConfig::from_kv(&config_text)?;

    let count = read_exact_u32(r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_exact_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)
            .map_err(|_| Error::Format("truncated dtype tag".into()))?;
        if dtype[0] != DTYPE_F64 {
            return Err(Error::Format(format!(
                "unsupported dtype tag {} for {name}",
                dtype[0]
            )));
        }
        let rank = read_exact_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_exact_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated tensor data for {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<GptModel> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?,
    );
    let (config, params) = read_params(&mut r)?;
    Ok(GptModel { config, params })
}

/// Copies the checkpoint tensors whose names start with one of `prefixes`
/// into `model`, shape-checked. Returns the number of restored tensors.
/// With `["embed.", "ext"]` this restores exactly the pretrained extractor
/// and embedding while heads and generator stay fresh.
pub fn load_partial_into(model: &mut GptModel, path: &Path, prefixes: &[&str]) -> Result<usize> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?,
    );
    let (_, loaded) = read_params(&mut r)?;
    let mut restored = 0usize;
    for (name, tensor) in loaded.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        match model.params.get(name) {
            Some(existing) if existing.shape() == tensor.shape() => {
                model.params.insert(name.clone(), tensor.clone());
                restored += 1;
            }
            Some(existing) => {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    existing.shape()
                )));
            }
            None => {}
        }
    }
    Ok(restored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::gpt::FusionMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn tiny_model(seed: u64) -> GptModel {
        let cfg = GptConfig {
            n_tokens: 4,
            group_size: 4,
            d_model: 12,
            n_heads: 2,
            extractor_depth: 1,
            generator_depth: 1,
            ffn_dim: 16,
            embed_hidden: 8,
            head_hidden: 12,
            num_classes: 3,
            extra_mask_ratio: 0.0,
            gamma: 0.0,
            lambda: 1.0,
            fusion_mode: FusionMode::None,
            ..GptConfig::default()
        };
        GptModel::init(cfg, seed).unwrap()
    }

    fn random_cloud(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..48)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn roundtrip_reproduces_logits_bit_exactly() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(1);
        let cloud = random_cloud(2);
        let (logits_before, grade_before) = model.classify(&cloud, None).unwrap();

        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        let (logits_after, grade_after) = loaded.classify(&cloud, None).unwrap();
        assert_eq!(logits_before, logits_after);
        assert_eq!(grade_before, grade_after);
    }

    #[test]
    fn partial_restore_covers_embedding_and_extractor_only() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("pretrained.ckpt");
        let source = tiny_model(3);
        save_checkpoint(&source, &path).unwrap();

        let mut target = tiny_model(4);
        let head_before = target.params.get("head.cls.w").unwrap().clone();
        let gen_before = target.params.get("gen0.attn.wq").unwrap().clone();
        let restored = load_partial_into(&mut target, &path, &["embed.", "ext"]).unwrap();
        assert!(restored > 0);

        assert_eq!(
            target.params.get("embed.w1").unwrap(),
            source.params.get("embed.w1").unwrap()
        );
        assert_eq!(
            target.params.get("ext0.attn.wq").unwrap(),
            source.params.get("ext0.attn.wq").unwrap()
        );
        // untouched parts keep their fresh values
        assert_eq!(target.params.get("head.cls.w").unwrap(), &head_before);
        assert_eq!(target.params.get("gen0.attn.wq").unwrap(), &gen_before);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTAMODEL").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
