//! Binary checkpoints.
//!
//! Layout (little-endian): `BEFD`, record type u32 = 2, version u32 = 1,
//! header length u32 + `key=value` lines, entry count u32, then per tensor
//! name length u16 + name, ndim u8, dims u32 each, dtype u8, payload.
//! A CRC-32 of every preceding byte closes the file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::data::ClaheParams;
use crate::data::raster::{MAGIC, RECORD_CHECKPOINT};
use crate::edge::AttentionParams;
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};
use crate::train::adam::AdamState;
use crate::unet::{Network, NetworkVariant, UNetConfig};

pub const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Everything needed to rebuild a network and resume or run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub unet: UNetConfig,
    pub variant: NetworkVariant,
    pub attention: AttentionParams,
    pub clahe: ClaheParams,
    pub seed: u64,
    pub iteration: u64,
    /// Parameters then batch-norm running statistics.
    pub state: Vec<(String, Tensor<T>)>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Element> Checkpoint<T> {
    pub fn from_network(
        net: &Network<T>,
        attention: AttentionParams,
        clahe: ClaheParams,
        seed: u64,
        iteration: u64,
        adam: Option<&AdamState<T>>,
    ) -> Self {
        Checkpoint {
            unet: net.config().clone(),
            variant: net.variant(),
            attention,
            clahe,
            seed,
            iteration,
            state: net.state_entries().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            adam: adam.cloned(),
        }
    }

    /// Builds the stored architecture and loads its state.
    pub fn to_network(&self) -> Result<Network<T>> {
        let mut net = Network::build(&self.unet, self.variant, self.seed)?;
        let map: HashMap<String, Tensor<T>> = self.state.iter().cloned().collect();
        net.load_state(&map)?;
        Ok(net)
    }

    /// Errors unless the stored architecture equals the requested one.
    pub fn check_compatible(&self, unet: &UNetConfig, variant: NetworkVariant) -> Result<()> {
        if self.variant != variant {
            return Err(Error::Config(format!("checkpoint holds a {} network, {variant} was requested", self.variant)));
        }
        if &self.unet != unet {
            return Err(Error::Config(format!(
                "checkpoint architecture {} does not match requested {}",
                describe(&self.unet),
                describe(unet)
            )));
        }
        Ok(())
    }

    fn header(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv: Vec<(&str, String)> = vec![
            ("variant", self.variant.to_string()),
            ("unet.depth", self.unet.depth.to_string()),
            ("unet.base_channels", self.unet.base_channels.to_string()),
            ("unet.in_channels", self.unet.in_channels.to_string()),
            ("unet.out_channels", self.unet.out_channels.to_string()),
            ("unet.be_levels", join(&self.unet.be_levels)),
            ("unet.fd_skips", join(&self.unet.fd_skips)),
            ("attention.lambda_min", self.attention.lambda_min.to_string()),
            ("attention.lambda_max", self.attention.lambda_max.to_string()),
            ("attention.alpha", self.attention.alpha.to_string()),
            ("attention.beta", self.attention.beta.to_string()),
            ("clahe.tiles_x", self.clahe.tiles.0.to_string()),
            ("clahe.tiles_y", self.clahe.tiles.1.to_string()),
            ("clahe.clip_limit", self.clahe.clip_limit.to_string()),
            ("seed", self.seed.to_string()),
            ("iteration", self.iteration.to_string()),
        ];
        if let Some(a) = &self.adam {
            kv.push(("adam.t", a.t.to_string()));
        }
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&RECORD_CHECKPOINT.to_le_bytes());
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = self.header();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let mut entries: Vec<(String, &Tensor<T>)> = self.state.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(a) = &self.adam {
            for (i, n) in a.names.iter().enumerate() {
                entries.push((format!("{ADAM_M}{n}"), &a.m[i]));
                entries.push((format!("{ADAM_V}{n}"), &a.v[i]));
            }
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(T::DTYPE as u8);
            for &v in t.data() {
                v.to_le_bytes_into(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err_at(0, "bad magic"));
        }
        let record = r.u32()?;
        if record != RECORD_CHECKPOINT {
            return Err(r.err_at(4, format!("record type {record} is not a checkpoint")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err_at(8, format!("unsupported format version {version}")));
        }
        if bytes.len() < 4 {
            return Err(r.err_at(bytes.len(), "truncated"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(r.err_at(body_end, "checksum mismatch"));
        }
        let r = &mut Reader { bytes: &bytes[..body_end], pos: r.pos };

        let hlen = r.u32()? as usize;
        let header_at = r.pos;
        let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| r.err_at(header_at, "header is not UTF-8"))?;
        let header = parse_header(text).map_err(|msg| r.err_at(header_at, msg))?;

        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut state = Vec::new();
        let mut moments: BTreeMap<String, (Option<Tensor<T>>, Option<Tensor<T>>)> = BTreeMap::new();
        let mut adam_order = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| r.err_at(at, "entry name is not UTF-8"))?.to_string();
            if !seen.insert(name.clone()) {
                return Err(r.err_at(at, format!("duplicate entry `{name}`")));
            }
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let dtype_at = r.pos;
            let dtype = r.u8()?;
            if dtype != T::DTYPE as u8 {
                let want = if T::DTYPE == DType::F32 { "f32" } else { "f64" };
                return Err(r.err_at(dtype_at, format!("entry `{name}` has dtype code {dtype}, expected {want}")));
            }
            let n: usize = dims.iter().product();
            let width = std::mem::size_of::<T>();
            let payload = r.take(n * width)?;
            let data = payload.chunks_exact(width).map(T::from_le_slice).collect();
            let t = Tensor::from_vec(dims, data).map_err(|e| r.err_at(at, e.to_string()))?;
            if let Some(p) = name.strip_prefix(ADAM_M) {
                if !moments.contains_key(p) {
                    adam_order.push(p.to_string());
                }
                moments.entry(p.to_string()).or_default().0 = Some(t);
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                if !moments.contains_key(p) {
                    adam_order.push(p.to_string());
                }
                moments.entry(p.to_string()).or_default().1 = Some(t);
            } else {
                state.push((name, t));
            }
        }
        if r.pos != r.bytes.len() {
            return Err(r.err_at(r.pos, "trailing bytes after the last entry"));
        }

        let adam = match header.get("adam.t") {
            None if moments.is_empty() => None,
            None => return Err(r.err_at(header_at, "optimizer moments without adam.t")),
            Some(t) => {
                let t = parse_num("adam.t", t).map_err(|m| r.err_at(header_at, m))?;
                let mut a = AdamState { names: Vec::new(), m: Vec::new(), v: Vec::new(), t };
                for n in adam_order {
                    match moments.remove(&n) {
                        Some((Some(m), Some(v))) => {
                            a.names.push(n);
                            a.m.push(m);
                            a.v.push(v);
                        }
                        _ => return Err(r.err_at(header_at, format!("optimizer moments for `{n}` are incomplete"))),
                    }
                }
                Some(a)
            }
        };
        let h = |k: &str| header.get(k).ok_or_else(|| r.err_at(header_at, format!("header lacks `{k}`")));
        let num = |k: &str| -> Result<u64> { parse_num(k, h(k)?).map_err(|m| r.err_at(header_at, m)) };
        let float = |k: &str| -> Result<f64> { h(k)?.parse().map_err(|_| r.err_at(header_at, format!("`{k}` is not a number"))) };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = h(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| x.parse().map_err(|_| r.err_at(header_at, format!("`{k}` is not a list of integers")))).collect()
        };
        Ok(Checkpoint {
            unet: UNetConfig {
                depth: num("unet.depth")? as usize,
                base_channels: num("unet.base_channels")? as usize,
                in_channels: num("unet.in_channels")? as usize,
                out_channels: num("unet.out_channels")? as usize,
                be_levels: list("unet.be_levels")?,
                fd_skips: list("unet.fd_skips")?,
            },
            variant: h("variant")?.parse()?,
            attention: AttentionParams {
                lambda_min: float("attention.lambda_min")?,
                lambda_max: float("attention.lambda_max")?,
                alpha: float("attention.alpha")?,
                beta: float("attention.beta")?,
            },
            clahe: ClaheParams {
                tiles: (num("clahe.tiles_x")? as usize, num("clahe.tiles_y")? as usize),
                clip_limit: float("clahe.clip_limit")?,
            },
            seed: num("seed")?,
            iteration: num("iteration")?,
            state,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn describe(c: &UNetConfig) -> String {
    format!(
        "(depth {}, base {}, in {}, out {}, BE {:?}, FD {:?})",
        c.depth, c.base_channels, c.in_channels, c.out_channels, c.be_levels, c.fd_skips
    )
}

fn parse_header(text: &str) -> std::result::Result<HashMap<String, String>, String> {
    let mut map = HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("header line `{line}` lacks `=`"))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("header key `{k}` repeated"));
        }
    }
    Ok(map)
}

fn parse_num(key: &str, v: &str) -> std::result::Result<u64, String> {
    v.parse().map_err(|_| format!("`{key}` is not an unsigned integer"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Checkpoint { offset, msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err_at(self.pos, format!("truncated: need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> UNetConfig {
        UNetConfig { depth: 2, base_channels: 2, be_levels: vec![2], fd_skips: vec![1], ..Default::default() }
    }

    fn ckpt() -> Checkpoint<f32> {
        let net = Network::<f32>::build(&micro(), NetworkVariant::BefdUnet, 5).unwrap();
        let adam = AdamState::new(net.params().iter().map(|(n, t)| (n.as_str(), t)));
        Checkpoint::from_network(&net, AttentionParams::default(), ClaheParams::default(), 5, 7, Some(&adam))
    }

    #[test]
    fn round_trip_is_exact() {
        let c = ckpt();
        let back = Checkpoint::<f32>::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), c.encode());
    }

    #[test]
    fn corrupt_payload_fails_checksum() {
        let mut bytes = ckpt().encode();
        let i = bytes.len() - 10;
        bytes[i] ^= 0x40;
        let err = Checkpoint::<f32>::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = ckpt().encode();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::decode(&b), Err(Error::Checkpoint { offset: 0, .. })));
        let mut b = bytes.clone();
        b[8] = 9;
        assert!(matches!(Checkpoint::<f32>::decode(&b), Err(Error::Checkpoint { offset: 8, .. })));
        assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() / 2]).is_err());
        assert!(Checkpoint::<f64>::decode(&bytes).is_err());
    }

    #[test]
    fn duplicate_entry_rejected_with_offset() {
        let mut c = ckpt();
        c.adam = None;
        let first = c.state[0].clone();
        c.state.push(first);
        let err = Checkpoint::<f32>::decode(&c.encode()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { offset, .. } if offset > 16), "{err}");
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn compatibility_gate() {
        let c = ckpt();
        assert!(c.check_compatible(&micro(), NetworkVariant::BefdUnet).is_ok());
        assert!(c.check_compatible(&micro(), NetworkVariant::Unet).is_err());
        let other = UNetConfig { base_channels: 3, ..micro() };
        assert!(c.check_compatible(&other, NetworkVariant::BefdUnet).is_err());
    }

    #[test]
    fn network_round_trip() {
        let c = ckpt();
        let net = c.to_network().unwrap();
        let again = Checkpoint::from_network(&net, c.attention, c.clahe, c.seed, c.iteration, c.adam.as_ref());
        assert_eq!(again, c);
    }
}
