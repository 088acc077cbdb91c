//! Binary checkpoint format.
//!
//! Self-describing and diffable:
//!
//! ```text
//! magic   b"LGCKPT"
//! version u32 (= 1)
//! input   h u32, w u32, c u32
//! conv    5 x u32 channel counts
//! fc      4 x u32 head widths
//! lrn     n u32, k f64, alpha f64, beta f64
//! count   u32 tensor count
//! tensor  name_len u32, name bytes, rank u32, dims rank x u32,
//!         payload (prod dims) x f32, little-endian
//! ```
//!
//! Tensors are written in canonical order: conv1..conv5 (.w then .b),
//! f1..f3 heads (fc6..fc9, .w then .b), then `stats.mean` / `stats.std`.
//! Files are written atomically (temp file + rename).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::model::{ImageSpec, NetworkConfig, NetworkParams};
use crate::nn::LrnParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"LGCKPT";
const VERSION: u32 = 1;

/// Trained parameters plus the normalization statistics their inputs need.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    pub stats: DatasetStats,
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams<f32>, stats: &DatasetStats) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &params.config;
    for v in [cfg.input.height, cfg.input.width, cfg.input.channels] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in cfg.conv_channels {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in cfg.fc_widths {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.lrn.n as u32).to_le_bytes());
    buf.extend_from_slice(&cfg.lrn.k.to_le_bytes());
    buf.extend_from_slice(&cfg.lrn.alpha.to_le_bytes());
    buf.extend_from_slice(&cfg.lrn.beta.to_le_bytes());

    let named = params.named_tensors();
    let mean = Tensor::from_vec(&[stats.mean.len()], stats.mean.clone())?;
    let std = Tensor::from_vec(&[stats.std.len()], stats.std.clone())?;
    let mut all: Vec<(String, &Tensor<f32>)> = named;
    all.push(("stats.mean".into(), &mean));
    all.push(("stats.std".into(), &std));

    buf.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for (name, tensor) in &all {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                reading: what.into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.display().to_string(),
                produced_by: "a training command".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };

    let magic = r.take(6, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let input = ImageSpec {
        height: r.u32("input height")? as usize,
        width: r.u32("input width")? as usize,
        channels: r.u32("input channels")? as usize,
    };
    let mut conv_channels = [0usize; 5];
    for c in conv_channels.iter_mut() {
        *c = r.u32("conv channels")? as usize;
    }
    let mut fc_widths = [0usize; 4];
    for wdt in fc_widths.iter_mut() {
        *wdt = r.u32("fc widths")? as usize;
    }
    let lrn = LrnParams {
        n: r.u32("lrn n")? as usize,
        k: r.f64("lrn k")?,
        alpha: r.f64("lrn alpha")?,
        beta: r.f64("lrn beta")?,
    };
    let config = NetworkConfig {
        input,
        conv_channels,
        fc_widths,
        lrn,
    };

    let count = r.u32("tensor count")? as usize;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "tensor name")?).into_owned();
        let rank = r.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")? as usize);
        }
        let n_values: usize = dims.iter().product();
        let need = n_values * 4;
        if r.remaining() < need {
            // Last tensor with a whole number of floats but too few of
            // them: the header and payload disagree. Ragged remainder or
            // a non-final tensor: the file was cut off.
            if i + 1 == count && r.remaining() % 4 == 0 {
                return Err(Error::ShapePayloadMismatch {
                    name,
                    expected: n_values,
                    got: r.remaining() / 4,
                });
            }
            return Err(Error::Truncated {
                reading: format!("payload of tensor '{name}'"),
            });
        }
        let raw = r.take(need, "tensor payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::CountMismatch {
            declared: count as u64,
            found: count as u64 + 1,
        });
    }

    // Rebuild the network in canonical order and validate shapes.
    let find = |name: &str| -> Result<Tensor<f32>> {
        tensors
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| tensors[i].1.clone())
            .ok_or_else(|| Error::Truncated {
                reading: format!("tensor '{name}'"),
            })
    };

    let reference = NetworkParams::<f32>::init(config, 0)?;
    let mut params = reference;
    for (i, spec) in params.config.conv_specs().iter().enumerate() {
        let w = find(&format!("conv{}.w", i + 1))?;
        let b = find(&format!("conv{}.b", i + 1))?;
        let want_w = [spec.out_channels, spec.kernel.0, spec.kernel.1, spec.in_channels];
        if w.shape() != want_w {
            return Err(Error::ShapeMismatch {
                context: format!("checkpoint conv{}.w", i + 1),
                expected: format!("{want_w:?}"),
                got: format!("{:?}", w.shape()),
            });
        }
        params.conv[i] = crate::model::ConvLayerParams { weight: w, bias: b };
    }
    let flat = params.config.flat_dim()?;
    for h in 0..3 {
        let mut in_dim = flat;
        for (j, &out_dim) in params.config.fc_widths.iter().enumerate() {
            let w = find(&format!("f{}.fc{}.w", h + 1, j + 6))?;
            let b = find(&format!("f{}.fc{}.b", h + 1, j + 6))?;
            if w.shape() != [out_dim, in_dim] {
                return Err(Error::ShapeMismatch {
                    context: format!("checkpoint f{}.fc{}.w", h + 1, j + 6),
                    expected: format!("[{out_dim}, {in_dim}]"),
                    got: format!("{:?}", w.shape()),
                });
            }
            params.heads[h].layers[j] = crate::model::FcLayerParams { weight: w, bias: b };
            in_dim = out_dim;
        }
    }
    let mean = find("stats.mean")?;
    let std = find("stats.std")?;
    let stats = DatasetStats {
        mean: mean.into_data(),
        std: std.into_data(),
    };
    if stats.mean.len() != params.config.input.channels {
        return Err(Error::ShapeMismatch {
            context: "checkpoint stats".into(),
            expected: format!("{} channels", params.config.input.channels),
            got: format!("{}", stats.mean.len()),
        });
    }
    if !params.all_finite() {
        return Err(Error::InvalidParameter(
            "checkpoint contains non-finite parameters".into(),
        ));
    }
    Ok(Checkpoint { params, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkConfig;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lanekeep-ckpt-{tag}-{}", std::process::id()));
        let _ = fs::create_dir_all(&dir);
        dir
    }

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let params = NetworkParams::<f32>::init(NetworkConfig::verification(), seed).unwrap();
        let stats = DatasetStats {
            mean: vec![0.41, 0.41, 0.40],
            std: vec![0.2, 0.21, 0.19],
        };
        Checkpoint { params, stats }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tmpdir("roundtrip");
        let path = dir.join("net.ckpt");
        let ck = sample_checkpoint(42);
        save_checkpoint(&path, &ck.params, &ck.stats).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, ck.params);
        assert_eq!(loaded.stats, ck.stats);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tmpdir("magic");
        let path = dir.join("net.ckpt");
        let ck = sample_checkpoint(1);
        save_checkpoint(&path, &ck.params, &ck.stats).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::BadMagic { .. } => {}
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tmpdir("version");
        let path = dir.join("net.ckpt");
        let ck = sample_checkpoint(2);
        save_checkpoint(&path, &ck.params, &ck.stats).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[6] = 9; // version field
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::VersionMismatch { found: 9, .. } => {}
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tmpdir("trunc");
        let path = dir.join("net.ckpt");
        let ck = sample_checkpoint(3);
        save_checkpoint(&path, &ck.params, &ck.stats).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Truncated { .. } => {}
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn shape_payload_mismatch_is_distinct() {
        // Header says the final tensor has 3 values; give it 2.
        let dir = tmpdir("payload");
        let path = dir.join("net.ckpt");
        let ck = sample_checkpoint(4);
        save_checkpoint(&path, &ck.params, &ck.stats).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::ShapePayloadMismatch { name, expected, got } => {
                assert_eq!(name, "stats.std");
                assert_eq!(expected, 3);
                assert_eq!(got, 2);
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn forward_outputs_survive_round_trip_exactly() {
        use crate::model::forward_all;
        let dir = tmpdir("fwd");
        let path = dir.join("net.ckpt");
        let ck = sample_checkpoint(5);
        let img = {
            use rand_chacha::rand_core::Rng;
            let mut rng = crate::util::rng_from(6);
            let spec = ck.params.config.input;
            let data: Vec<f32> = (0..spec.pixel_count())
                .map(|_| ((rng.next_u64() >> 40) as f32 / (1u64 << 24) as f32) - 0.5)
                .collect();
            Tensor::from_vec(&spec.shape(), data).unwrap()
        };
        let before = forward_all(&ck.params, &img).unwrap();
        save_checkpoint(&path, &ck.params, &ck.stats).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let after = forward_all(&loaded.params, &img).unwrap();
        assert_eq!(before.y_source, after.y_source);
        assert_eq!(before.ldl_source, after.ldl_source);
        assert_eq!(before.y_target, after.y_target);
    }
}
