//! Binary checkpoints.
//!
//! ```text
//! "UIRL"  u32 version  u32 T  T x (u32 len, label bytes)
//! u32 |L|  |L| x (u32 len, layer name)  |L| x u32 rank
//! u32 n_merge  n_merge x f32          (the s used to merge, if any)
//! tensors until EOF: u32 len, name, u32 ndim, ndim x u32 dims, f32 payload
//! ```
//!
//! Integers and floats are little-endian; payloads are row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{config_err, format_err, Result};
use crate::lora::{AdaptedLayer, LayerKind, LoraAdapter};
use crate::numerics::Tensor;
use crate::restorer::{RestorerModel, LAYER_NAMES};
use crate::router::{RouterState, ENCODER_TENSORS};

pub const MAGIC: &[u8; 4] = b"UIRL";
pub const VERSION: u32 = 1;

const SLOPE_TENSOR: &str = "base.leaky_slope";
const PATCH_TENSOR: &str = "router.patch";
const BANK_TENSOR: &str = "router.bank";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub labels: Vec<String>,
    pub model: Option<RestorerModel>,
    pub router: Option<RouterState>,
    /// Composition weights baked into a merged model; empty otherwise.
    pub merge_s: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: RestorerModel) -> Self {
        Checkpoint {
            labels: model.labels().to_vec(),
            model: Some(model),
            router: None,
            merge_s: Vec::new(),
        }
    }

    pub fn from_router(router: RouterState) -> Self {
        Checkpoint {
            labels: router.labels().to_vec(),
            model: None,
            router: Some(router),
            merge_s: Vec::new(),
        }
    }

    pub fn with_router(mut self, router: RouterState) -> Result<Self> {
        check_labels(&self.labels, router.labels())?;
        self.router = Some(router);
        Ok(self)
    }

    pub fn model(&self) -> Result<&RestorerModel> {
        self.model
            .as_ref()
            .ok_or_else(|| config_err!("checkpoint holds no restorer"))
    }

    pub fn router(&self) -> Result<&RouterState> {
        self.router
            .as_ref()
            .ok_or_else(|| config_err!("checkpoint holds no router"))
    }

    /// Tensors in the order they are written.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(m) = &self.model {
            out.push((SLOPE_TENSOR.to_string(), Tensor::scalar(m.slope())));
            for (name, layer) in LAYER_NAMES.iter().zip(m.layers()) {
                out.push((format!("base.{name}.weight"), layer.weight().clone()));
                if let Some(b) = layer.bias() {
                    out.push((format!("base.{name}.bias"), b.clone()));
                }
            }
            for (k, label) in m.labels().iter().enumerate() {
                for (name, layer) in LAYER_NAMES.iter().zip(m.layers()) {
                    if let Some(ad) = layer.adapters().get(k) {
                        let p = format!("lora.{label}.{name}");
                        out.push((format!("{p}.a"), ad.a().clone()));
                        out.push((format!("{p}.b"), ad.b().clone()));
                        out.push((format!("{p}.scale"), Tensor::scalar(ad.scale())));
                    }
                }
            }
        }
        if let Some(r) = &self.router {
            let (ph, pw) = r.patch();
            out.push((PATCH_TENSOR.to_string(), Tensor::from_parts(vec![2], vec![ph as f32, pw as f32])));
            for (name, t) in ENCODER_TENSORS.iter().zip(r.encoder()) {
                out.push((format!("router.{name}"), t.clone()));
            }
            out.push((BANK_TENSOR.to_string(), r.bank().clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, self.labels.len() as u32);
        for l in &self.labels {
            put_str(&mut buf, l);
        }
        let (layers, ranks) = match &self.model {
            Some(m) => (m.adapted_layers(), m.ranks()),
            None => (Vec::new(), Vec::new()),
        };
        put_u32(&mut buf, layers.len() as u32);
        for l in &layers {
            put_str(&mut buf, l);
        }
        for r in &ranks {
            put_u32(&mut buf, *r as u32);
        }
        put_u32(&mut buf, self.merge_s.len() as u32);
        for v in &self.merge_s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (name, t) in self.named_tensors() {
            put_str(&mut buf, &name);
            put_u32(&mut buf, t.ndim() as u32);
            for d in t.dims() {
                put_u32(&mut buf, *d as u32);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err!("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err!("unsupported checkpoint version {version}"));
        }
        let t = r.u32()? as usize;
        let labels = (0..t).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let n_layers = r.u32()? as usize;
        let layers = (0..n_layers).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let ranks = (0..n_layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n_merge = r.u32()? as usize;
        let merge_s = (0..n_merge).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let mut tensors = BTreeMap::new();
        while !r.done() {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(&dims, data).map_err(|e| format_err!("tensor {name}: {e}"))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(format_err!("duplicate tensor {name}"));
            }
        }
        let model = if tensors.contains_key(SLOPE_TENSOR) {
            Some(read_model(&mut tensors, &labels, &layers, &ranks)?)
        } else {
            None
        };
        let router = if tensors.contains_key(PATCH_TENSOR) {
            Some(read_router(&mut tensors, &labels)?)
        } else {
            None
        };
        if let Some(name) = tensors.keys().next() {
            return Err(format_err!("unexpected tensor {name}"));
        }
        Ok(Checkpoint {
            labels,
            model,
            router,
            merge_s,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and insists on the given label order.
    pub fn load_expecting(path: &Path, labels: &[String]) -> Result<Self> {
        let ck = Self::load(path)?;
        check_labels(labels, &ck.labels)?;
        Ok(ck)
    }
}

/// Router banks and restorer adapters must agree on label order.
pub fn check_labels(expected: &[String], found: &[String]) -> Result<()> {
    if expected != found {
        return Err(config_err!(
            "label order mismatch: expected {expected:?}, found {found:?}"
        ));
    }
    Ok(())
}

fn take_tensor(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    tensors
        .remove(name)
        .ok_or_else(|| format_err!("checkpoint is missing tensor {name}"))
}

fn take_scalar(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<f32> {
    let t = take_tensor(tensors, name)?;
    if t.len() != 1 {
        return Err(format_err!("{name} must be a scalar"));
    }
    Ok(t.data()[0])
}

fn read_model(
    tensors: &mut BTreeMap<String, Tensor>,
    labels: &[String],
    adapted: &[String],
    ranks: &[usize],
) -> Result<RestorerModel> {
    let slope = take_scalar(tensors, SLOPE_TENSOR)?;
    let mut layers = Vec::with_capacity(LAYER_NAMES.len());
    for &name in LAYER_NAMES.iter() {
        let weight = take_tensor(tensors, &format!("base.{name}.weight"))?;
        let bias = tensors.remove(&format!("base.{name}.bias"));
        let stride = if name.starts_with("enc") { 2 } else { 1 };
        let mut adapters = Vec::new();
        if let Some(pos) = adapted.iter().position(|a| a == name) {
            for label in labels {
                let p = format!("lora.{label}.{name}");
                let a = take_tensor(tensors, &format!("{p}.a"))?;
                let b = take_tensor(tensors, &format!("{p}.b"))?;
                let scale = take_scalar(tensors, &format!("{p}.scale"))?;
                let ad = LoraAdapter::from_factors(b, a, scale)?;
                if ad.rank() != ranks[pos] {
                    return Err(format_err!("{p} has rank {}, header says {}", ad.rank(), ranks[pos]));
                }
                adapters.push(ad);
            }
        }
        layers.push(AdaptedLayer::new(LayerKind::Conv { stride }, weight, bias, adapters)?);
    }
    if let Some(extra) = adapted.iter().find(|a| !LAYER_NAMES.contains(&a.as_str())) {
        return Err(format_err!("unknown adapted layer {extra}"));
    }
    RestorerModel::from_layers(labels.to_vec(), layers, slope)
}

fn read_router(tensors: &mut BTreeMap<String, Tensor>, labels: &[String]) -> Result<RouterState> {
    let patch = take_tensor(tensors, PATCH_TENSOR)?;
    if patch.len() != 2 {
        return Err(format_err!("{PATCH_TENSOR} must hold two values"));
    }
    let (ph, pw) = (patch.data()[0] as usize, patch.data()[1] as usize);
    let encoder = ENCODER_TENSORS
        .iter()
        .map(|n| take_tensor(tensors, &format!("router.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let bank = take_tensor(tensors, BANK_TENSOR)?;
    RouterState::from_parts(encoder, bank, labels.to_vec(), (ph, pw))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err!("checkpoint truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err!("name is not UTF-8"))
    }
}
