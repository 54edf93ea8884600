//! `HWT1` weight container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "HWT1"
//! k, n, c, enc_levels, res_blocks : u32
//! theta                           : f64
//! entry count                     : u32
//! per entry: name length u32, UTF-8 name, rank u32, dims u32 * rank,
//!            values f64 * prod(dims)
//! ```
//!
//! Entries are written in parameter order. Names that are not network
//! parameters (e.g. `mask.latent`) are carried through as extras.
//! Whether the cross-phase interaction module is present is recovered from
//! the entry names.

use super::{RecoveryConfig, RecoveryNet, InitScheme};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HWT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RecoveryConfig,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_net(net: &RecoveryNet, extras: &[(&str, &Tensor)]) -> Self {
        let mut entries: Vec<(String, Tensor)> =
            net.params.entries().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        entries.extend(extras.iter().map(|(n, t)| (n.to_string(), (*t).clone())));
        Checkpoint { config: net.config.clone(), entries }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let c = &self.config;
        for v in [c.k, c.n, c.c, c.enc_levels, c.res_blocks] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.theta.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("magic", "expected HWT1"));
        }
        let k = r.u32("k")? as usize;
        let n = r.u32("n")? as usize;
        let c = r.u32("c")? as usize;
        let enc_levels = r.u32("enc_levels")? as usize;
        let res_blocks = r.u32("res_blocks")? as usize;
        let theta = r.f64("theta")?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format("name", format!("entry {i} is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::format("dims", "overflow"))?, "values")?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format("dims", format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        let hfim = entries.iter().any(|(n, _)| n == "init.conv.weight");
        let config = RecoveryConfig { k, n, c, enc_levels, res_blocks, theta, hfim };
        config.validate()?;
        Ok(Checkpoint { config, entries })
    }

    /// Rebuilds the network; returns it with any non-parameter entries.
    pub fn into_net(self) -> Result<(RecoveryNet, Vec<(String, Tensor)>)> {
        let mut net = RecoveryNet::with_init(self.config, 0, InitScheme::Standard)?;
        let mut seen = vec![false; net.params.len()];
        let mut extras = Vec::new();
        for (name, t) in self.entries {
            match net.params.find(&name) {
                Some(id) => {
                    let slot = net.params.get_mut(id);
                    if slot.shape() != t.shape() {
                        return Err(Error::Geometry(format!(
                            "checkpoint entry {name} has shape {:?}, network expects {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                    seen[id.0] = true;
                }
                None => extras.push((name, t)),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::format("entries", format!("missing parameter {}", net.params.entries()[i].name)));
        }
        Ok((net, extras))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(field, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}
