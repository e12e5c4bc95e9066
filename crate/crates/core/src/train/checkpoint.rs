//! Single-file checkpoint container.
//!
//! ```text
//! "IMLCKPT1"                 8-byte magic
//! u64 little-endian          header length in bytes
//! header (UTF-8 text):
//!   step <n>
//!   adam_t <n>               present when optimizer moments are stored
//!   config <key>=<value>     one line per resolved configuration key
//!   tensor <name> <dtype> <d0,d1,...> <offset> <nbytes>
//! tensor bytes               little-endian, offsets relative to this section
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::train::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"IMLCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S = f32> {
    pub step: u64,
    pub config: Vec<(String, String)>,
    pub params: ParamSet<S>,
    pub optimizer: Option<AdamState<S>>,
}

fn shape_field(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(format!("malformed checkpoint: {}", msg.into()))
}

/// Element type of the tensors in a stored checkpoint, read from its header.
pub fn stored_dtype(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(format!("{}: missing magic", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16usize.saturating_add(hlen))
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad(format!("{}: header", path.display())))?;
    header
        .lines()
        .find_map(|l| l.strip_prefix("tensor ").and_then(|r| r.split(' ').nth(1)))
        .map(str::to_string)
        .ok_or_else(|| bad(format!("{}: no tensors", path.display())))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("step {}\n", self.step);
        if let Some(opt) = &self.optimizer {
            header.push_str(&format!("adam_t {}\n", opt.t));
        }
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Config(format!(
                    "config entry `{k}` cannot be stored"
                )));
            }
            header.push_str(&format!("config {k}={v}\n"));
        }
        let mut named: Vec<(String, &Tensor<S>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(Error::Shape(
                    "optimizer moments do not match parameters".into(),
                ));
            }
            for ((name, _), m) in self.params.iter().zip(&opt.m) {
                named.push((format!("adam.m.{name}"), m));
            }
            for ((name, _), v) in self.params.iter().zip(&opt.v) {
                named.push((format!("adam.v.{name}"), v));
            }
        }
        let mut body = Vec::new();
        for (name, t) in &named {
            if name.contains(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "tensor name `{name}` contains whitespace"
                )));
            }
            let offset = body.len();
            for &x in t.data() {
                x.write_le(&mut body);
            }
            header.push_str(&format!(
                "tensor {name} {} {} {offset} {}\n",
                S::DTYPE,
                shape_field(t.shape()),
                body.len() - offset
            ));
        }
        let mut out = Vec::with_capacity(16 + header.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length"))?;
        let header =
            std::str::from_utf8(&bytes[16..body_start]).map_err(|_| bad("header is not UTF-8"))?;
        let body = &bytes[body_start..];

        let mut step = None;
        let mut adam_t = None;
        let mut config = Vec::new();
        let mut params = ParamSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for line in header.lines() {
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("line `{line}`")))?;
            match tag {
                "step" => step = Some(rest.parse::<u64>().map_err(|_| bad("step"))?),
                "adam_t" => adam_t = Some(rest.parse::<u64>().map_err(|_| bad("adam_t"))?),
                "config" => {
                    let (k, val) = rest
                        .split_once('=')
                        .ok_or_else(|| bad(format!("config `{rest}`")))?;
                    config.push((k.to_string(), val.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, shape, offset, nbytes] = f[..] else {
                        return Err(bad(format!("tensor line `{rest}`")));
                    };
                    if dtype != S::DTYPE {
                        return Err(Error::Data(format!(
                            "checkpoint tensor {name} is {dtype}, expected {}",
                            S::DTYPE
                        )));
                    }
                    let shape: Vec<usize> = if shape == "-" {
                        Vec::new()
                    } else {
                        shape
                            .split(',')
                            .map(|d| d.parse().map_err(|_| bad(format!("shape of {name}"))))
                            .collect::<Result<_>>()?
                    };
                    let offset: usize = offset.parse().map_err(|_| bad("offset"))?;
                    let nbytes: usize = nbytes.parse().map_err(|_| bad("nbytes"))?;
                    let count: usize = shape.iter().product();
                    if count * S::BYTES != nbytes || offset + nbytes > body.len() {
                        return Err(bad(format!("extent of {name}")));
                    }
                    let data = body[offset..offset + nbytes]
                        .chunks_exact(S::BYTES)
                        .map(S::read_le)
                        .collect();
                    let t = Tensor::new(shape, data)?;
                    if let Some(p) = name.strip_prefix("adam.m.") {
                        m.push((p.to_string(), t));
                    } else if let Some(p) = name.strip_prefix("adam.v.") {
                        v.push((p.to_string(), t));
                    } else {
                        if params.find(name).is_some() {
                            return Err(bad(format!("tensor {name} appears twice")));
                        }
                        params.add(name, t);
                    }
                }
                other => return Err(bad(format!("unknown record `{other}`"))),
            }
        }
        let optimizer = match adam_t {
            None => None,
            Some(t) => {
                let order = |mut xs: Vec<(String, Tensor<S>)>| -> Result<Vec<Tensor<S>>> {
                    if xs.len() != params.len() {
                        return Err(bad("optimizer moments do not cover every parameter"));
                    }
                    let mut out = Vec::with_capacity(xs.len());
                    for (name, _) in params.iter() {
                        let pos = xs
                            .iter()
                            .position(|(n, _)| n == name)
                            .ok_or_else(|| bad(format!("no moments for {name}")))?;
                        out.push(xs.swap_remove(pos).1);
                    }
                    Ok(out)
                };
                Some(AdamState {
                    t,
                    m: order(m)?,
                    v: order(v)?,
                })
            }
        };
        Ok(Self {
            step: step.ok_or_else(|| bad("no step record"))?,
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Copies stored tensors into `target` by name; every parameter of
    /// `target` must be present with the same shape.
    pub fn restore_into(&self, target: &mut ParamSet<S>) -> Result<()> {
        let ids: Vec<_> = target.ids().collect();
        for id in ids {
            let name = target.name(id).to_string();
            let src = self
                .params
                .find(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint has no tensor {name}")))?;
            target.set(id, self.params.get(src).clone())?;
        }
        if self.params.len() != target.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                target.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamSet::new();
        params.add(
            "a.weight",
            Tensor::from_fn([2, 3], |i| i as f32 * 0.1 - 0.2),
        );
        params.add(
            "a.bias",
            Tensor::new([3], vec![f32::MIN_POSITIVE, -0.0, 1e30]).unwrap(),
        );
        params.add("empty", Tensor::zeros([0]));
        let m = params.iter().map(|(_, t)| t.map(|x| x * 0.5)).collect();
        let v = params.iter().map(|(_, t)| t.map(|x| x * x)).collect();
        Checkpoint {
            step: 17,
            config: vec![("train.lr".into(), "0.001".into())],
            params,
            optimizer: Some(AdamState { t: 17, m, v }),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((_, a), (_, b)) in c.params.iter().zip(back.params.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.step, 17);
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = sample().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        assert!(
            header.contains("tensor a.weight f32 2,3 0 24\n"),
            "{header}"
        );
    }

    #[test]
    fn wrong_dtype_and_corruption_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"NOTACKPT00000000").is_err());
    }
}
