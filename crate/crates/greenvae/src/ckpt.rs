//! The "GVA1" checkpoint container: magic, format version, a config echo,
//! named RNG stream states, and a named tensor table with 32-bit
//! little-endian payloads. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GVA1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    /// Verbatim copy of the run configuration.
    pub config_echo: String,
    /// Named random-stream snapshots (training resume).
    pub rng: Vec<(String, RngState)>,
    /// Named tensors: parameters, optimizer moments, batch-norm stats,
    /// mixture models, second-stage weights.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config_echo: &str) -> Self {
        Checkpoint {
            config_echo: config_echo.to_string(),
            rng: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add_tensor(&mut self, name: &str, tensor: Tensor<f32>) {
        assert!(
            !self.tensors.iter().any(|(n, _)| n == name),
            "duplicate checkpoint tensor '{name}'"
        );
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> {
        self.tensors
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn rng_state(&self, name: &str) -> Option<&RngState> {
        self.rng.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let echo = self.config_echo.as_bytes();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo);

        out.extend_from_slice(&(self.rng.len() as u32).to_le_bytes());
        for (name, state) in &self.rng {
            write_string(&mut out, name);
            out.extend_from_slice(&state.seed);
            out.extend_from_slice(&state.word_pos.to_le_bytes());
        }

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            write_string(&mut out, name);
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }

        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        let mut pos = 0usize;

        let magic = take(&bytes, &mut pos, 4, "magic")?;
        if magic != MAGIC {
            return Err(Error::checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let version = read_u32(&bytes, &mut pos, "version")?;
        if version != VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }

        let echo_len = read_u32(&bytes, &mut pos, "config length")? as usize;
        let echo = take(&bytes, &mut pos, echo_len, "config echo")?;
        let config_echo = String::from_utf8(echo.to_vec())
            .map_err(|_| Error::checkpoint("config echo is not UTF-8"))?;

        let rng_count = read_u32(&bytes, &mut pos, "rng count")? as usize;
        let mut rng = Vec::with_capacity(rng_count);
        for _ in 0..rng_count {
            let name = read_string(&bytes, &mut pos)?;
            let seed_bytes = take(&bytes, &mut pos, 32, "rng seed")?;
            let mut seed = [0u8; 32];
            seed.copy_from_slice(seed_bytes);
            let wp = take(&bytes, &mut pos, 16, "rng position")?;
            let word_pos = u128::from_le_bytes(wp.try_into().unwrap());
            rng.push((name, RngState { seed, word_pos }));
        }

        let tensor_count = read_u32(&bytes, &mut pos, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = read_string(&bytes, &mut pos)?;
            let rank = read_u32(&bytes, &mut pos, "tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&bytes, &mut pos, "tensor dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&bytes, &mut pos, numel * 4, "tensor payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().unwrap())))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)));
        }

        Ok(Checkpoint {
            config_echo,
            rng,
            tensors,
        })
    }
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    if *pos + len > bytes.len() {
        return Err(Error::checkpoint(format!(
            "truncated checkpoint while reading {what}"
        )));
    }
    let out = &bytes[*pos..*pos + len];
    *pos += len;
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let b = take(bytes, pos, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_string(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let len = read_u32(bytes, pos, "string length")? as usize;
    let b = take(bytes, pos, len, "string")?;
    String::from_utf8(b.to_vec()).map_err(|_| Error::checkpoint("string is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{save_state, stream};

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut ck = Checkpoint::new("[model]\nname = vanilla\n");
        let mut rng = stream(3, "ck");
        let data: Vec<f32> = (0..60)
            .map(|i| ((i as f32 * 0.37).sin() * 1e3).fract())
            .collect();
        ck.add_tensor("enc.w", Tensor::new(&[3, 4, 5], data));
        ck.add_tensor("weird", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]));
        use rand::Rng;
        let _: f64 = rng.gen();
        ck.rng.push(("noise".into(), save_state(&rng)));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gva");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.config_echo, ck.config_echo);
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.tensors.len(), 2);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.gva");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(Checkpoint::load(&p).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncation_rejected() {
        let mut ck = Checkpoint::new("x");
        ck.add_tensor("t", Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.gva");
        ck.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(Checkpoint::load(&p)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }
}
