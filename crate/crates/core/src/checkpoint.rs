//! Binary model files.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! "2SVAE001"  kappa  d
//! for each of encoder_mu, encoder_logvar, decoder_mu:
//!     n_dims  dims[n_dims]  activation_code
//! every parameter tensor as f64 LE in declaration order, log_gamma last
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpParams};
use crate::tensor::Tensor;
use crate::vae::VaeModel;

pub const MAGIC: &[u8; 8] = b"2SVAE001";
const MAX_DIMS: u64 = 64;
const MAX_WIDTH: u64 = 1 << 24;

pub fn to_bytes(model: &VaeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(model.kappa() as u64).to_le_bytes());
    out.extend_from_slice(&(model.ambient_dim() as u64).to_le_bytes());
    for net in [model.encoder_mu(), model.encoder_logvar(), model.decoder_mu()] {
        out.extend_from_slice(&(net.layer_dims().len() as u64).to_le_bytes());
        for &d in net.layer_dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&net.activation().code().to_le_bytes());
    }
    for t in model.parameters() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint { offset: self.pos, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} more bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self) -> Result<(Vec<usize>, Activation)> {
        let n = self.u64()?;
        if !(2..=MAX_DIMS).contains(&n) {
            return Err(self.err(format!("implausible layer count {n}")));
        }
        let mut dims = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let d = self.u64()?;
            if d == 0 || d > MAX_WIDTH {
                return Err(self.err(format!("implausible layer width {d}")));
            }
            dims.push(d as usize);
        }
        let code = self.u64()?;
        let act = Activation::from_code(code).ok_or_else(|| self.err(format!("unknown activation code {code}")))?;
        Ok((dims, act))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<VaeModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint { offset: 0, message: "bad magic".into() });
    }
    let kappa = r.u64()? as usize;
    let d = r.u64()? as usize;
    let headers = [r.header()?, r.header()?, r.header()?];
    let mut nets = Vec::with_capacity(3);
    for (dims, act) in headers {
        let mut tensors = Vec::new();
        for w in dims.windows(2) {
            let mut wt = Vec::with_capacity(w[0] * w[1]);
            for _ in 0..w[0] * w[1] {
                wt.push(r.f64()?);
            }
            tensors.push(Tensor::matrix(w[1], w[0], wt)?);
            let mut b = Vec::with_capacity(w[1]);
            for _ in 0..w[1] {
                b.push(r.f64()?);
            }
            tensors.push(Tensor::new(vec![w[1]], b)?);
        }
        nets.push(MlpParams::from_tensors(dims, act, tensors)?);
    }
    let offset = r.pos;
    let log_gamma = r.f64()?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let dec = nets.pop().expect("three nets");
    let lv = nets.pop().expect("three nets");
    let mu = nets.pop().expect("three nets");
    let model = VaeModel::from_parts(mu, lv, dec, log_gamma)
        .map_err(|e| Error::Checkpoint { offset, message: e.to_string() })?;
    if model.kappa() != kappa || model.ambient_dim() != d {
        return Err(Error::Checkpoint {
            offset: 8,
            message: format!(
                "header says kappa={kappa}, d={d} but networks give kappa={}, d={}",
                model.kappa(),
                model.ambient_dim()
            ),
        });
    }
    Ok(model)
}

pub fn save(model: &VaeModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<VaeModel> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::sample_ancestral;

    fn model() -> VaeModel {
        let mut m = VaeModel::new(5, 3, &[7, 4], 8).unwrap();
        m.set_log_gamma(-3.25);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&m, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(sample_ancestral(&back, 20, 4, false).unwrap(), sample_ancestral(&m, 20, 4, false).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = to_bytes(&model());
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let b = to_bytes(&model());
        let cut = b.len() - 3;
        match from_bytes(&b[..cut]) {
            Err(Error::Checkpoint { offset, message }) => {
                assert_eq!(offset, b.len() - 8);
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = to_bytes(&model());
        b.push(0);
        assert!(from_bytes(&b).is_err());
    }
}
