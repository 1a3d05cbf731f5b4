use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, BlockSpec};
use crate::attention::{SeParams, StamConfig, StamMaps, StamParams};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Binder, ConvParams, Module, Scope};
use crate::tensor::kernels::Activation;
use crate::tensor::Tensor;

/// Which attention modules the arch flags switch on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Se,
    Stam,
    #[default]
    SeStam,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Se,
        Variant::Stam,
        Variant::SeStam,
    ];

    pub fn uses_se(self) -> bool {
        matches!(self, Variant::Se | Variant::SeStam)
    }

    pub fn uses_stam(self) -> bool {
        matches!(self, Variant::Stam | Variant::SeStam)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Se => "se",
            Variant::Stam => "stam",
            Variant::SeStam => "se_stam",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

/// Hyperparameters of the attention modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub se_ratio: usize,
    pub stam: StamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            se_ratio: 4,
            stam: StamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    /// 1×1 conv when widths differ at stride 1.
    Project(ConvParams),
    /// 2×2 average pool then 1×1 conv.
    PoolProject(ConvParams),
}

/// Inverted residual block: 1×1 expansion, depthwise conv, SE on
/// the expanded width, 1×1 projection, STAM on the output width, then the
/// shortcut sum.
#[derive(Clone, Debug, PartialEq)]
pub struct MbConv {
    pub spec: BlockSpec,
    pub expand: ConvParams,
    pub depthwise: ConvParams,
    pub se: Option<SeParams>,
    pub project: ConvParams,
    pub stam: Option<StamParams>,
    pub shortcut: Shortcut,
}

impl MbConv {
    pub fn new(
        cin: usize,
        spec: &BlockSpec,
        variant: Variant,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if spec.stam && spec.stride != 1 {
            return Err(Error::Arch("STAM requires a stride-1 block".into()));
        }
        let expand = ConvParams::new(cin, spec.exp, 1, 1, 1, true, rng)?;
        let depthwise = ConvParams::new(
            spec.exp,
            spec.exp,
            spec.kernel,
            spec.stride,
            spec.exp,
            true,
            rng,
        )?;
        let se = if spec.se && variant.uses_se() {
            Some(SeParams::new(spec.exp, cfg.se_ratio, rng)?)
        } else {
            None
        };
        let project = ConvParams::new(spec.exp, spec.out, 1, 1, 1, true, rng)?;
        let stam = if spec.stam && variant.uses_stam() {
            Some(StamParams::new(spec.out, cfg.stam.clone(), rng)?)
        } else {
            None
        };
        let shortcut = match (spec.stride, cin == spec.out) {
            (1, true) => Shortcut::Identity,
            (1, false) => Shortcut::Project(ConvParams::new(cin, spec.out, 1, 1, 1, true, rng)?),
            _ => Shortcut::PoolProject(ConvParams::new(cin, spec.out, 1, 1, 1, true, rng)?),
        };
        Ok(Self {
            spec: spec.clone(),
            expand,
            depthwise,
            se,
            project,
            stam,
            shortcut,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.expand.in_channels()
    }

    pub fn forward<S: Scope>(
        &self,
        s: &mut S,
        name: &str,
        x: Var,
    ) -> Result<(Var, Option<StamMaps>)> {
        let act = self.spec.nl.map_or(Activation::Relu, |n| n.activation());
        let mut h = self.expand.forward(s, &join(name, "expand"), x)?;
        h = s.tape().activation(act, h);
        h = self.depthwise.forward(s, &join(name, "dw"), h)?;
        h = s.tape().activation(act, h);
        if let Some(se) = &self.se {
            h = se.forward(s, &join(name, "se"), h)?;
        }
        h = self.project.forward(s, &join(name, "project"), h)?;
        let mut maps = None;
        if let Some(stam) = &self.stam {
            let (y, m) = stam.forward(s, &join(name, "stam"), h)?;
            h = y;
            maps = Some(m);
        }
        let skip = match &self.shortcut {
            Shortcut::Identity => x,
            Shortcut::Project(c) => c.forward(s, &join(name, "shortcut"), x)?,
            Shortcut::PoolProject(c) => {
                let pooled = s.tape().avg_pool(x, 2, 2)?;
                c.forward(s, &join(name, "shortcut"), pooled)?
            }
        };
        Ok((s.tape().add(h, skip)?, maps))
    }
}

impl Module for MbConv {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.depthwise.visit(&join(prefix, "dw"), f);
        if let Some(se) = &self.se {
            se.visit(&join(prefix, "se"), f);
        }
        self.project.visit(&join(prefix, "project"), f);
        if let Some(st) = &self.stam {
            st.visit(&join(prefix, "stam"), f);
        }
        if let Shortcut::Project(c) | Shortcut::PoolProject(c) = &self.shortcut {
            c.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.depthwise.visit_mut(&join(prefix, "dw"), f);
        if let Some(se) = &mut self.se {
            se.visit_mut(&join(prefix, "se"), f);
        }
        self.project.visit_mut(&join(prefix, "project"), f);
        if let Some(st) = &mut self.stam {
            st.visit_mut(&join(prefix, "stam"), f);
        }
        if let Shortcut::Project(c) | Shortcut::PoolProject(c) = &mut self.shortcut {
            c.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub variant: Variant,
    pub config: ModelConfig,
    pub stem: ConvParams,
    pub blocks: Vec<MbConv>,
    pub head_features: ConvParams,
    pub head_hidden: ConvParams,
    pub classifier: ConvParams,
}

/// Sigmoid attention maps of one STAM site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteMaps {
    pub block: usize,
    pub shape: Tensor,
    pub texture: Tensor,
    pub stam: Tensor,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[n, classes]`
    pub logits: Var,
    /// Raw maps of every active STAM, keyed by block index.
    pub stam_maps: Vec<(usize, StamMaps)>,
    /// Feature dims after the stem and after each block.
    pub features: Vec<Vec<usize>>,
}

/// Builds a network with deterministic seeded initialization.
pub fn build_model(
    spec: &ArchSpec,
    variant: Variant,
    config: &ModelConfig,
    seed: u64,
) -> Result<Model> {
    spec.validate()?;
    let classes = spec.classes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = ConvParams::new(
        3,
        spec.stem.out,
        spec.stem.kernel,
        spec.stem.stride,
        1,
        true,
        &mut rng,
    )?;
    // Without normalization layers each residual branch starts at
    // variance ~1/L of its input so depth does not inflate activations.
    let branch_scale = (2.0 * spec.blocks.len() as f32).sqrt().recip();
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (i, b) in spec.blocks.iter().enumerate() {
        let mut block = MbConv::new(spec.block_input(i), b, variant, config, &mut rng)
            .map_err(|e| Error::Arch(format!("block {i}: {e}")))?;
        scale(&mut block.project.weight, branch_scale);
        blocks.push(block);
    }
    let (feat, hidden) = spec.head_dims;
    let head_features = ConvParams::new(spec.last_width(), feat, 1, 1, 1, true, &mut rng)?;
    let head_hidden = ConvParams::new(feat, hidden, 1, 1, 1, true, &mut rng)?;
    let mut classifier = ConvParams::new(hidden, classes, 1, 1, 1, true, &mut rng)?;
    scale(&mut classifier.weight, std::f32::consts::FRAC_1_SQRT_2);
    Ok(Model {
        spec: spec.clone(),
        variant,
        config: config.clone(),
        stem,
        head_features,
        head_hidden,
        classifier,
        blocks,
    })
}

fn scale(t: &mut Tensor, f: f32) {
    t.data_mut().iter_mut().for_each(|v| *v *= f);
}

impl Model {
    pub fn classes(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn input_hw(&self) -> usize {
        self.spec.input_hw
    }

    /// Indices of blocks carrying an active STAM.
    pub fn stam_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.stam.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let s = self.input_hw();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s || dims[0] == 0 {
            return Err(Error::shape(
                "model input",
                format!("expected [n, 3, {s}, {s}], got {dims:?}"),
            ));
        }
        Ok(())
    }

    pub fn forward<S: Scope>(&self, s: &mut S, x: Var) -> Result<Forward> {
        let dims = s.tape().dims(x);
        self.check_input(&dims)?;
        let n = dims[0];
        let mut features = Vec::with_capacity(self.blocks.len() + 1);
        let stem_act = self
            .spec
            .stem
            .nl
            .map_or(Activation::Hardswish, |n| n.activation());
        let mut h = self.stem.forward(s, "stem", x)?;
        h = s.tape().activation(stem_act, h);
        features.push(s.tape().dims(h));
        let mut stam_maps = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, maps) = b.forward(s, &format!("blocks.{i}"), h)?;
            h = y;
            if let Some(m) = maps {
                stam_maps.push((i, m));
            }
            features.push(s.tape().dims(h));
        }
        h = self.head_features.forward(s, "head.features", h)?;
        h = s.tape().activation(Activation::Hardswish, h);
        h = s.tape().global_avg_pool(h)?;
        h = self.head_hidden.forward(s, "head.hidden", h)?;
        h = s.tape().activation(Activation::Hardswish, h);
        h = self.classifier.forward(s, "head.classifier", h)?;
        let logits = s.tape().reshape(h, &[n, self.classes()])?;
        Ok(Forward {
            logits,
            stam_maps,
            features,
        })
    }

    /// Logits `[n, classes]` without recording gradients.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let mut b = Binder::new(&tape);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut b, x)?;
        let logits = tape.value(out.logits).clone();
        Ok(logits)
    }

    /// Sigmoid attention maps of every active STAM for a batch, each
    /// `[n, 1, h, w]` at the site's native resolution.
    pub fn attention_maps(&self, batch: &Tensor) -> Result<Vec<SiteMaps>> {
        let tape = Tape::inference();
        let mut b = Binder::new(&tape);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut b, x)?;
        let sig = |v: Var| tape.value(tape.sigmoid(v)).clone();
        Ok(out
            .stam_maps
            .iter()
            .map(|(block, m)| SiteMaps {
                block: *block,
                shape: sig(m.shape),
                texture: sig(m.texture),
                stam: sig(m.stam),
            })
            .collect())
    }

    /// Copies every named tensor from `source`, which must carry exactly
    /// this model's names and dims.
    pub fn load_state<'a>(
        &mut self,
        source: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let source: std::collections::HashMap<&str, &Tensor> = source.into_iter().collect();
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        if let Some(missing) = names.iter().find(|n| !source.contains_key(n.as_str())) {
            return Err(Error::MissingTensor(missing.clone()));
        }
        if let Some(extra) = source
            .keys()
            .filter(|k| !names.iter().any(|n| n == *k))
            .min()
        {
            return Err(Error::UnknownTensor(extra.to_string()));
        }
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            let src = source[name.as_str()];
            if src.dims() != t.dims() {
                err.get_or_insert(Error::TensorDims {
                    name,
                    expected: t.dims().to_vec(),
                    found: src.dims().to_vec(),
                });
            } else if err.is_none() {
                t.data_mut().copy_from_slice(src.data());
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl Module for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head_features.visit(&join(prefix, "head.features"), f);
        self.head_hidden.visit(&join(prefix, "head.hidden"), f);
        self.classifier.visit(&join(prefix, "head.classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head_features
            .visit_mut(&join(prefix, "head.features"), f);
        self.head_hidden.visit_mut(&join(prefix, "head.hidden"), f);
        self.classifier
            .visit_mut(&join(prefix, "head.classifier"), f);
    }
}
