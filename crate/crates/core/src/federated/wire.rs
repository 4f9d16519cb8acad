//! Client-to-server message encoding. Little-endian throughout.
//!
//! ```text
//! magic        4 bytes "PFLU"
//! version      u32
//! client_id    u32
//! sample_count u64
//! count        u32
//! per tensor, sorted by name: name_len u32, name bytes, rows u32, cols u32, f64 values
//! ```
//!
//! Only federated tensors can be encoded; there is no tag byte because a
//! message never carries anything else.

use crate::error::{Error, Result};
use crate::model::SpeakerId;
use crate::tensor::checkpoint::{put_bytes, put_matrix, put_u32, put_u64, Reader};
use crate::tensor::{ParamSet, ParamTag};

const MAGIC: &[u8; 4] = b"PFLU";
pub const UPDATE_FORMAT_VERSION: u32 = 1;

/// A client's federated delta `v_after − w_round_start` and its sample count.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    client_id: SpeakerId,
    sample_count: u64,
    delta: ParamSet,
}

impl ClientUpdate {
    /// Rejects any non-federated tensor in `delta`.
    pub fn new(client_id: SpeakerId, sample_count: u64, delta: ParamSet) -> Result<Self> {
        if let Some(t) = delta.iter().find(|t| t.tag != ParamTag::Federated) {
            return Err(Error::Schema(format!("update may not carry private tensor {:?}", t.name)));
        }
        Ok(ClientUpdate {
            client_id,
            sample_count,
            delta,
        })
    }

    pub fn client_id(&self) -> SpeakerId {
        self.client_id
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn delta(&self) -> &ParamSet {
        &self.delta
    }

    pub fn delta_norm(&self) -> f64 {
        self.delta.value_norm()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.delta.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, UPDATE_FORMAT_VERSION);
        put_u32(&mut out, self.client_id.0);
        put_u64(&mut out, self.sample_count);
        put_u32(&mut out, self.delta.len() as u32);
        for t in self.delta.iter() {
            put_bytes(&mut out, t.name.as_bytes());
            put_matrix(&mut out, &t.value);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a client update (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != UPDATE_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported update version {version}")));
        }
        let client_id = SpeakerId(r.u32()?);
        let sample_count = r.u64()?;
        let count = r.u32()?;
        let mut delta = ParamSet::new();
        for _ in 0..count {
            let name = r.string()?;
            delta.insert(name, r.matrix()?, ParamTag::Federated)?;
        }
        r.finish()?;
        Ok(ClientUpdate {
            client_id,
            sample_count,
            delta,
        })
    }
}

/// True if any of `names` occurs verbatim anywhere in `bytes`.
pub fn contains_any_name(bytes: &[u8], names: &[String]) -> bool {
    names
        .iter()
        .any(|n| !n.is_empty() && bytes.windows(n.len()).any(|w| w == n.as_bytes()))
}
