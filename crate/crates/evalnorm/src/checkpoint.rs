//! Named-tensor checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! header : b"ENCK" | version u32 | entry count u32
//! entry  : name length u32 | name (UTF-8) | dtype u8 | rank u32 | dims u64 * rank | data
//! dtype  : 0 = f64, 1 = u8, 2 = u64
//! ```
//!
//! A run checkpoint stores `spec/*` (model structure), `model/<param>`,
//! `ema/<layer>/{mean,var,decay,count}`, `en/<layer>/{alpha_hat,beta_hat,velocity}`
//! for layers that have EvalNorm parameters, `config` (the run configuration
//! as UTF-8 text) and `step`.

use std::collections::BTreeMap;
use std::path::Path;

use evalnorm_core::estimator::EnParams;
use evalnorm_core::model::{Model, ModelKind, ModelSpec, Param};
use evalnorm_core::normalization::EmaState;
use evalnorm_core::Tensor;

use crate::config::RunConfig;
use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 4] = b"ENCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl EntryData {
    fn tag(&self) -> u8 {
        match self {
            EntryData::F64(_) => 0,
            EntryData::U8(_) => 1,
            EntryData::U64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: EntryData,
}

impl Entry {
    pub fn f64(name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Entry {
        Entry {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            data: EntryData::F64(data),
        }
    }

    pub fn u64s(name: impl Into<String>, data: Vec<u64>) -> Entry {
        Entry {
            name: name.into(),
            dims: vec![data.len() as u64],
            data: EntryData::U64(data),
        }
    }

    pub fn bytes(name: impl Into<String>, data: Vec<u8>) -> Entry {
        Entry {
            name: name.into(),
            dims: vec![data.len() as u64],
            data: EntryData::U8(data),
        }
    }
}

/// Serializes entries in the given order.
pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.tag());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.data {
            EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            EntryData::U8(v) => out.extend_from_slice(v),
            EntryData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", self.pos, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", 0, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", 4, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", name_at, "entry name is not UTF-8"))?
            .to_string();
        let tag_at = r.pos;
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let n = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::format("checkpoint", tag_at, "dimension product overflows"))?;
        let width = match tag {
            0 | 2 => 8,
            1 => 1,
            t => return Err(Error::format("checkpoint", tag_at, format!("unknown dtype {t}"))),
        };
        let raw = r.take(
            n.checked_mul(width)
                .ok_or_else(|| Error::format("checkpoint", tag_at, "entry too large"))?,
        )?;
        let data = match tag {
            0 => EntryData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => EntryData::U8(raw.to_vec()),
            _ => EntryData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        entries.push(Entry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", r.pos, "trailing bytes"));
    }
    Ok(entries)
}

/// Everything needed to resume evaluation of a trained run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
    pub ema: Vec<EmaState>,
    pub en: Vec<Option<EnParams>>,
    pub config: RunConfig,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig, step: u64) -> Checkpoint {
        Checkpoint {
            spec: model.spec().clone(),
            params: model.params().to_vec(),
            ema: model.norms().iter().map(|n| n.ema.clone()).collect(),
            en: model.norms().iter().map(|n| n.en.clone()).collect(),
            config: config.clone(),
            step,
        }
    }

    /// Rebuilds the model and restores weights, EMA and EvalNorm state.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(&self.spec, self.config.norm_settings())?;
        if model.params().len() != self.params.len() || model.norm_count() != self.ema.len() {
            return Err(Error::Config("checkpoint does not match its model structure".into()));
        }
        for p in &self.params {
            model.set_param(&p.name, p.value.clone())?;
        }
        for ((layer, ema), en) in model.norms_mut().iter_mut().zip(&self.ema).zip(&self.en) {
            if ema.channels() != layer.ema.channels() {
                return Err(Error::Config("EMA width does not match its layer".into()));
            }
            layer.ema = ema.clone();
            layer.en = en.clone();
        }
        Ok(model)
    }

    pub fn has_en_params(&self) -> bool {
        self.en.iter().all(Option::is_some)
    }

    pub fn entries(&self) -> Vec<Entry> {
        let s = &self.spec;
        let as_u64 = |v: &[usize]| v.iter().map(|&x| x as u64).collect::<Vec<_>>();
        let mut out = vec![
            Entry::bytes(
                "spec/kind",
                vec![match s.kind {
                    ModelKind::Mlp => 0,
                    ModelKind::SmallCnn => 1,
                }],
            ),
            Entry::u64s("spec/input_shape", as_u64(&s.input_shape)),
            Entry::u64s("spec/widths", as_u64(&s.widths)),
            Entry::bytes("spec/normalize", s.normalize.iter().map(|&b| b as u8).collect()),
            Entry::u64s("spec/num_classes", vec![s.num_classes as u64]),
            Entry::u64s("spec/seed", vec![s.seed]),
        ];
        for p in &self.params {
            out.push(Entry::f64(
                format!("model/{}", p.name),
                p.value.shape(),
                p.value.data().to_vec(),
            ));
        }
        for (i, e) in self.ema.iter().enumerate() {
            out.push(Entry::f64(format!("ema/{i}/mean"), &[e.mean.len()], e.mean.clone()));
            out.push(Entry::f64(format!("ema/{i}/var"), &[e.variance.len()], e.variance.clone()));
            out.push(Entry::f64(format!("ema/{i}/decay"), &[], vec![e.decay]));
            out.push(Entry::u64s(format!("ema/{i}/count"), vec![e.update_count]));
        }
        for (i, en) in self.en.iter().enumerate() {
            if let Some(p) = en {
                out.push(Entry::u64s(format!("en/{i}/layer_id"), vec![p.layer_id as u64]));
                out.push(Entry::f64(format!("en/{i}/alpha_hat"), &[], vec![p.alpha_hat]));
                out.push(Entry::f64(format!("en/{i}/beta_hat"), &[], vec![p.beta_hat]));
                out.push(Entry::f64(format!("en/{i}/velocity"), &[2], p.velocity.to_vec()));
            }
        }
        out.push(Entry::bytes("config", self.config.to_text().into_bytes()));
        out.push(Entry::u64s("step", vec![self.step]));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.entries())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut map: BTreeMap<String, Entry> = BTreeMap::new();
        let mut param_order = Vec::new();
        for e in decode(bytes)? {
            if let Some(p) = e.name.strip_prefix("model/") {
                param_order.push(p.to_string());
            }
            if map.contains_key(&e.name) {
                return Err(Error::Config(format!("duplicate checkpoint entry {}", e.name)));
            }
            map.insert(e.name.clone(), e);
        }
        let get = |name: &str| map.get(name).ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")));
        let f64s = |name: &str| match &get(name)?.data {
            EntryData::F64(v) => Ok(v.clone()),
            _ => Err(Error::Config(format!("{name} is not f64"))),
        };
        let u64s = |name: &str| match &get(name)?.data {
            EntryData::U64(v) => Ok(v.clone()),
            _ => Err(Error::Config(format!("{name} is not u64"))),
        };
        let bytes_of = |name: &str| match &get(name)?.data {
            EntryData::U8(v) => Ok(v.clone()),
            _ => Err(Error::Config(format!("{name} is not u8"))),
        };
        let scalar = |name: &str| {
            f64s(name)?
                .first()
                .copied()
                .ok_or_else(|| Error::Config(format!("{name} is empty")))
        };
        let one = |name: &str| {
            u64s(name)?
                .first()
                .copied()
                .ok_or_else(|| Error::Config(format!("{name} is empty")))
        };
        let usizes = |name: &str| Ok::<_, Error>(u64s(name)?.into_iter().map(|v| v as usize).collect::<Vec<_>>());

        let spec = ModelSpec {
            kind: match bytes_of("spec/kind")?.first() {
                Some(0) => ModelKind::Mlp,
                Some(1) => ModelKind::SmallCnn,
                k => return Err(Error::Config(format!("unknown model kind {k:?}"))),
            },
            input_shape: usizes("spec/input_shape")?,
            widths: usizes("spec/widths")?,
            normalize: bytes_of("spec/normalize")?.into_iter().map(|b| b != 0).collect(),
            num_classes: one("spec/num_classes")? as usize,
            seed: one("spec/seed")?,
        };
        let mut params = Vec::with_capacity(param_order.len());
        for name in param_order {
            let e = get(&format!("model/{name}"))?;
            let shape: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
            params.push(Param {
                value: Tensor::new(shape, f64s(&e.name)?)?,
                name,
            });
        }
        let mut ema = Vec::new();
        let mut en = Vec::new();
        for i in 0.. {
            if !map.contains_key(&format!("ema/{i}/mean")) {
                break;
            }
            ema.push(EmaState {
                mean: f64s(&format!("ema/{i}/mean"))?,
                variance: f64s(&format!("ema/{i}/var"))?,
                decay: scalar(&format!("ema/{i}/decay"))?,
                update_count: one(&format!("ema/{i}/count"))?,
            });
            en.push(if map.contains_key(&format!("en/{i}/alpha_hat")) {
                let v = f64s(&format!("en/{i}/velocity"))?;
                if v.len() != 2 {
                    return Err(Error::Config(format!("en/{i}/velocity needs 2 values")));
                }
                Some(EnParams {
                    layer_id: one(&format!("en/{i}/layer_id"))? as usize,
                    alpha_hat: scalar(&format!("en/{i}/alpha_hat"))?,
                    beta_hat: scalar(&format!("en/{i}/beta_hat"))?,
                    velocity: [v[0], v[1]],
                })
            } else {
                None
            });
        }
        let text = String::from_utf8(bytes_of("config")?)
            .map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?;
        Ok(Checkpoint {
            spec,
            params,
            ema,
            en,
            config: RunConfig::parse(&text)?,
            step: one("step")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_rejects_bad_headers() {
        let good = encode(&[Entry::u64s("x", vec![1, 2])]);
        assert_eq!(decode(&good).unwrap()[0].data, EntryData::U64(vec![1, 2]));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::Format { offset: 4, .. })));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::Format { offset: 0, .. })));
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut dtype = good.clone();
        dtype[17] = 9;
        assert!(decode(&dtype).is_err());
    }

    #[test]
    fn scalar_entries_have_rank_zero() {
        let e = Entry::f64("s", &[], vec![f64::from_bits(0x7ff8_0000_0000_0001)]);
        let back = decode(&encode(&[e])).unwrap();
        assert!(back[0].dims.is_empty());
        match &back[0].data {
            EntryData::F64(v) => assert_eq!(v[0].to_bits(), 0x7ff8_0000_0000_0001),
            _ => panic!(),
        }
    }
}
