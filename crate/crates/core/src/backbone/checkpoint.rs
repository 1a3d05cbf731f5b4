//! Named-tensor checkpoints.
//!
//! Layout, all little-endian: magic `STCK`, `u32` version, `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, `u32` rank,
//! `rank × u32` dims and the `f32` values. The architecture, variant and
//! attention settings travel as small tensors under `meta.`.

use std::io::Write;
use std::path::Path;

use super::arch::{ArchSpec, BlockSpec, Nonlinearity, Op};
use super::model::{build_model, Model, ModelConfig, Variant};
use crate::attention::{GaborConfig, StamConfig, StamResidual};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::kernels::Activation;
use crate::tensor::Tensor;

pub const STCK_MAGIC: [u8; 4] = *b"STCK";
pub const STCK_VERSION: u32 = 1;
pub const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors that are model parameters, i.e. not `meta.*`.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(META_PREFIX))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&STCK_MAGIC);
        out.extend_from_slice(&STCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != STCK_MAGIC {
            return Err(Error::BadMagic {
                expected: STCK_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != STCK_VERSION {
            return Err(Error::Version(version));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
            let name = String::from_utf8(r.take(len as usize, "name")?.to_vec())
                .map_err(|_| Error::InvalidArgument(format!("tensor {i}: name is not UTF-8")))?;
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Truncated(format!("data of tensor `{name}`")))?;
            let data = r
                .take(numel * 4, "data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes after last tensor",
                r.remaining()
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn row_code(b: &BlockSpec) -> [f32; 8] {
    let op = match b.op {
        Op::Conv => 0.0,
        Op::MbConv => 1.0,
        Op::Pool => 2.0,
    };
    let nl = match b.nl {
        None => 0.0,
        Some(Nonlinearity::Re) => 1.0,
        Some(Nonlinearity::Hs) => 2.0,
    };
    [
        op,
        b.kernel as f32,
        b.exp as f32,
        b.out as f32,
        b.se as u8 as f32,
        b.stam as u8 as f32,
        nl,
        b.stride as f32,
    ]
}

fn row_decode(v: &[f32]) -> Result<BlockSpec> {
    let bad = || Error::InvalidArgument("corrupt architecture metadata".into());
    let op = match v[0] as u32 {
        0 => Op::Conv,
        1 => Op::MbConv,
        2 => Op::Pool,
        _ => return Err(bad()),
    };
    let nl = match v[6] as u32 {
        0 => None,
        1 => Some(Nonlinearity::Re),
        2 => Some(Nonlinearity::Hs),
        _ => return Err(bad()),
    };
    Ok(BlockSpec {
        op,
        kernel: v[1] as usize,
        exp: v[2] as usize,
        out: v[3] as usize,
        se: v[4] != 0.0,
        stam: v[5] != 0.0,
        nl,
        stride: v[7] as usize,
    })
}

const ACTIVATIONS: [Activation; 4] = [
    Activation::Relu,
    Activation::Hardswish,
    Activation::Sigmoid,
    Activation::HardSigmoid,
];

fn meta_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let spec = &model.spec;
    let mut rows = row_code(&spec.stem).to_vec();
    for b in &spec.blocks {
        rows.extend(row_code(b));
    }
    let n_rows = spec.blocks.len() + 1;
    let head = vec![
        spec.input_hw as f32,
        spec.head_dims.0 as f32,
        spec.head_dims.1 as f32,
        model.classes() as f32,
    ];
    let st = &model.config.stam;
    let variant = Variant::ALL
        .iter()
        .position(|v| *v == model.variant)
        .expect("listed") as f32;
    let act = ACTIVATIONS
        .iter()
        .position(|a| *a == st.fusion_activation)
        .expect("listed") as f32;
    let residual = match st.residual {
        StamResidual::Gate => 0.0,
        StamResidual::Additive => 1.0,
    };
    let mut config = vec![
        variant,
        model.config.se_ratio as f32,
        st.r as f32,
        st.d as f32,
        act,
        residual,
        st.gabor.k as f32,
        st.gabor.wavelength,
        st.gabor.sigma,
        st.gabor.phase,
        st.gabor.gamma,
    ];
    config.extend(&st.gabor.orientations);
    let t = |dims: &[usize], v: Vec<f32>| Tensor::new(dims, v).expect("meta dims");
    vec![
        ("meta.arch".into(), t(&[n_rows, 8], rows)),
        ("meta.head".into(), t(&[4], head)),
        ("meta.config".into(), t(&[config.len()], config)),
    ]
}

fn decode_meta(ck: &Checkpoint) -> Result<(ArchSpec, Variant, ModelConfig)> {
    let get = |n: &str| ck.get(n).ok_or_else(|| Error::MissingTensor(n.to_string()));
    let arch = get("meta.arch")?;
    let head = get("meta.head")?.data();
    let config = get("meta.config")?.data();
    let bad = || Error::InvalidArgument("corrupt checkpoint metadata".into());
    if arch.rank() != 2
        || arch.dims()[1] != 8
        || arch.dims()[0] < 2
        || head.len() != 4
        || config.len() < 11
    {
        return Err(bad());
    }
    let rows = arch
        .data()
        .chunks_exact(8)
        .map(row_decode)
        .collect::<Result<Vec<_>>>()?;
    let spec = ArchSpec {
        input_hw: head[0] as usize,
        stem: rows[0].clone(),
        blocks: rows[1..].to_vec(),
        head_dims: (head[1] as usize, head[2] as usize),
        num_classes: Some(head[3] as usize),
    };
    let variant = *Variant::ALL.get(config[0] as usize).ok_or_else(bad)?;
    let cfg = ModelConfig {
        se_ratio: config[1] as usize,
        stam: StamConfig {
            r: config[2] as usize,
            d: config[3] as usize,
            fusion_activation: *ACTIVATIONS.get(config[4] as usize).ok_or_else(bad)?,
            residual: if config[5] == 0.0 {
                StamResidual::Gate
            } else {
                StamResidual::Additive
            },
            gabor: GaborConfig {
                k: config[6] as usize,
                wavelength: config[7],
                sigma: config[8],
                phase: config[9],
                gamma: config[10],
                orientations: config[11..].to_vec(),
            },
        },
    };
    Ok((spec, variant, cfg))
}

pub fn to_checkpoint(model: &Model) -> Checkpoint {
    let mut tensors = meta_tensors(model);
    model.visit("", &mut |name, t| {
        tensors.push((
            name,
            Tensor::new(t.dims(), t.data().to_vec()).expect("same dims"),
        ))
    });
    Checkpoint { tensors }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    to_checkpoint(model).save(path)
}

/// Rebuilds the architecture recorded in the file and fills its parameters.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    model_from_checkpoint(&ck)
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let (spec, variant, cfg) = decode_meta(ck)?;
    let mut model = build_model(&spec, variant, &cfg, 0)?;
    model.load_state(ck.params())?;
    Ok(model)
}

/// Fills an already built model; names and dims must match exactly.
pub fn load_into(model: &mut Model, path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    model.load_state(ck.params())
}
