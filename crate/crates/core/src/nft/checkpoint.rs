//! Binary policy checkpoints.
//!
//! ```text
//! magic  b"PNFT"
//! u32    format version (1)
//! u32    n_conditions
//! u32    hidden width
//! u64    parameter count P
//! f64×P  θ
//! f64×P  θ_old
//! ```
//!
//! All integers and floats are little-endian.

use super::mlp::MlpLayout;
use super::train::FlowPolicy;

pub const MAGIC: &[u8; 4] = b"PNFT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;
/// Refuse layouts beyond this size when decoding untrusted input.
const MAX_WIDTH: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("trailing bytes after checkpoint payload")]
    TrailingBytes,
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layout: MlpLayout,
    pub theta: Vec<f64>,
    pub theta_old: Vec<f64>,
}

impl Checkpoint {
    pub fn from_policy(p: &FlowPolicy) -> Self {
        Checkpoint {
            layout: p.layout,
            theta: p.theta.clone(),
            theta_old: p.theta_old.clone(),
        }
    }

    pub fn into_policy(self) -> FlowPolicy {
        FlowPolicy {
            layout: self.layout,
            theta: self.theta,
            theta_old: self.theta_old,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.theta.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 16 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layout.n_conditions as u32).to_le_bytes());
        out.extend_from_slice(&(self.layout.hidden as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for v in self.theta.iter().chain(&self.theta_old) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER_LEN {
            if !MAGIC.starts_with(&bytes[..bytes.len().min(4)]) {
                return Err(CheckpointError::BadMagic);
            }
            return Err(CheckpointError::Truncated {
                need: HEADER_LEN,
                have: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let (n_conditions, hidden) = (u32_at(8), u32_at(12));
        if n_conditions == 0 || hidden == 0 || n_conditions > MAX_WIDTH || hidden > MAX_WIDTH {
            return Err(CheckpointError::Layout(format!("n_conditions={n_conditions}, hidden={hidden}")));
        }
        let layout = MlpLayout {
            n_conditions: n_conditions as usize,
            hidden: hidden as usize,
        };
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if count != layout.param_count() as u64 {
            return Err(CheckpointError::Layout(format!(
                "header says {count} parameters, layout needs {}",
                layout.param_count()
            )));
        }
        let n = count as usize;
        let need = HEADER_LEN + 16 * n;
        if bytes.len() < need {
            return Err(CheckpointError::Truncated { need, have: bytes.len() });
        }
        if bytes.len() > need {
            return Err(CheckpointError::TrailingBytes);
        }
        let mut values = Vec::with_capacity(2 * n);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite(i));
            }
            values.push(v);
        }
        let theta_old = values.split_off(n);
        Ok(Checkpoint {
            layout,
            theta: values,
            theta_old,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let layout = MlpLayout {
            n_conditions: 2,
            hidden: 3,
        };
        let p = FlowPolicy::new(layout, &mut ChaCha8Rng::seed_from_u64(5));
        let mut c = Checkpoint::from_policy(&p);
        c.theta_old[0] += 1.0;
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..4], b"PNFT");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode();
        assert_eq!(Checkpoint::decode(b"PN"), Err(CheckpointError::Truncated { need: 24, have: 2 }));
        assert_eq!(Checkpoint::decode(b"XXXX"), Err(CheckpointError::BadMagic));
        let mut v = bytes.clone();
        v[4] = 2;
        assert_eq!(Checkpoint::decode(&v), Err(CheckpointError::UnsupportedVersion(2)));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut v = bytes.clone();
        v.push(0);
        assert_eq!(Checkpoint::decode(&v), Err(CheckpointError::TrailingBytes));
        let mut v = bytes.clone();
        v[16] ^= 1;
        assert!(matches!(Checkpoint::decode(&v), Err(CheckpointError::Layout(_))));
        let mut v = bytes;
        v[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(Checkpoint::decode(&v), Err(CheckpointError::NonFinite(0)));
    }
}
