//! Parameter and operation counts.
//!
//! `macs` counts multiply-accumulates of convolutions and of bilinear
//! interpolation (four per sampled value). `elementwise` counts bias adds,
//! residual adds, gate multiplies and deformable modulation. Activations
//! and pooling are not counted. `flops()` is `macs + elementwise`.

use std::collections::BTreeMap;

use super::arch::ArchSpec;
use super::model::{Model, ModelConfig, Variant};
use crate::attention::DEFORM_K;
use crate::nn::Module;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        self.macs + self.elementwise
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_elementwise(&self) -> u64 {
        self.layers.iter().map(|l| l.elementwise).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.total_macs() + self.total_elementwise()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Sums layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> LayerCost {
        let mut t = LayerCost {
            name: prefix.to_string(),
            ..LayerCost::default()
        };
        for l in self.layers.iter().filter(|l| l.name.starts_with(prefix)) {
            t.params += l.params;
            t.macs += l.macs;
            t.elementwise += l.elementwise;
        }
        t
    }

    /// `layer,params,macs,elementwise,flops` rows with a total line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs,elementwise,flops\n");
        for l in &self.layers {
            s += &format!(
                "{},{},{},{},{}\n",
                l.name,
                l.params,
                l.macs,
                l.elementwise,
                l.flops()
            );
        }
        s += &format!(
            "total,{},{},{},{}\n",
            self.total_params(),
            self.total_macs(),
            self.total_elementwise(),
            self.total_flops()
        );
        s
    }
}

#[derive(Default)]
struct Acc {
    params: u64,
    macs: u64,
    elementwise: u64,
}

impl Acc {
    /// Same-padded conv on a `side×side` input; returns the output side.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        cin: u64,
        cout: u64,
        k: u64,
        stride: u64,
        groups: u64,
        bias: bool,
        side: u64,
    ) -> u64 {
        let out = side.div_ceil(stride);
        let w = cout * (cin / groups) * k * k;
        self.params += w + if bias { cout } else { 0 };
        self.macs += w * out * out;
        if bias {
            self.elementwise += cout * out * out;
        }
        out
    }

    fn finish(self, name: String) -> LayerCost {
        LayerCost {
            name,
            params: self.params,
            macs: self.macs,
            elementwise: self.elementwise,
        }
    }
}

fn stam_cost(c: u64, side: u64, cfg: &ModelConfig) -> Acc {
    let mut a = Acc::default();
    let st = &cfg.stam;
    let cr = c / st.r as u64;
    let hw = side * side;
    let points = (DEFORM_K * DEFORM_K) as u64;
    let bank = st.gabor.orientations.len() as u64;
    a.conv(c, cr, 1, 1, 1, true, side);
    a.conv(cr, 3 * points, DEFORM_K as u64, 1, 1, true, side);
    // deformable conv: gather (bilinear), modulate, then the dense product
    a.macs += 4 * cr * points * hw;
    a.elementwise += cr * points * hw;
    a.conv(cr * points, cr, 1, 1, 1, false, side);
    a.conv(cr, 1, 1, 1, 1, true, side);
    a.elementwise += cr * hw;
    a.conv(cr, bank, st.gabor.k as u64, 1, 1, false, side);
    a.conv(bank, 1, 1, 1, 1, true, side);
    a.conv(2, st.d as u64, 3, 1, 1, true, side);
    a.conv(st.d as u64, 1, 1, 1, 1, true, side);
    a.elementwise += c * hw;
    if st.residual == crate::attention::StamResidual::Additive {
        a.elementwise += c * hw;
    }
    a
}

/// Analytic per-layer costs of `spec` built as `variant`, for a square
/// input of side `input_hw`.
pub fn count_flops(
    spec: &ArchSpec,
    variant: Variant,
    cfg: &ModelConfig,
    input_hw: usize,
) -> CostReport {
    let mut layers = Vec::new();
    let mut push = |name: String, a: Acc| layers.push(a.finish(name));
    let classes = spec.num_classes.unwrap_or(1) as u64;

    let mut side = input_hw as u64;
    let mut a = Acc::default();
    side = a.conv(
        3,
        spec.stem.out as u64,
        spec.stem.kernel as u64,
        spec.stem.stride as u64,
        1,
        true,
        side,
    );
    push("stem".into(), a);

    for (i, b) in spec.blocks.iter().enumerate() {
        let cin = spec.block_input(i) as u64;
        let (exp, out, k, stride) = (b.exp as u64, b.out as u64, b.kernel as u64, b.stride as u64);
        let p = |part: &str| format!("blocks.{i}.{part}");
        let mut a = Acc::default();
        a.conv(cin, exp, 1, 1, 1, true, side);
        push(p("expand"), a);
        let mut a = Acc::default();
        let out_side = a.conv(exp, exp, k, stride, exp, true, side);
        push(p("dw"), a);
        if b.se && variant.uses_se() {
            let hidden = (exp / cfg.se_ratio as u64).max(1);
            let mut a = Acc::default();
            a.conv(exp, hidden, 1, 1, 1, true, 1);
            a.conv(hidden, exp, 1, 1, 1, true, 1);
            a.elementwise += exp * out_side * out_side;
            push(p("se"), a);
        }
        let mut a = Acc::default();
        a.conv(exp, out, 1, 1, 1, true, out_side);
        a.elementwise += out * out_side * out_side; // residual add
        push(p("project"), a);
        if b.stam && variant.uses_stam() {
            push(p("stam"), stam_cost(out, out_side, cfg));
        }
        if cin != out || stride != 1 {
            let mut a = Acc::default();
            a.conv(cin, out, 1, 1, 1, true, out_side);
            push(p("shortcut"), a);
        }
        side = out_side;
    }

    let (feat, hidden) = (spec.head_dims.0 as u64, spec.head_dims.1 as u64);
    let mut a = Acc::default();
    a.conv(spec.last_width() as u64, feat, 1, 1, 1, true, side);
    push("head.features".into(), a);
    let mut a = Acc::default();
    a.conv(feat, hidden, 1, 1, 1, true, 1);
    push("head.hidden".into(), a);
    let mut a = Acc::default();
    a.conv(hidden, classes, 1, 1, 1, true, 1);
    push("head.classifier".into(), a);
    CostReport { layers }
}

/// Layer key of a parameter name: `blocks.3.stam.desc.weight` → `blocks.3.stam`.
fn layer_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = match parts[0] {
        "blocks" => 3,
        "head" => 2,
        _ => 1,
    };
    parts[..depth.min(parts.len())].join(".")
}

/// Parameter totals by enumerating every tensor of a built model.
pub fn count_params(model: &Model) -> CostReport {
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, u64> = BTreeMap::new();
    model.visit("", &mut |name, t| {
        let key = layer_of(&name);
        if !sums.contains_key(&key) {
            order.push(key.clone());
        }
        *sums.entry(key).or_default() += t.numel() as u64;
    });
    CostReport {
        layers: order
            .into_iter()
            .map(|name| LayerCost {
                params: sums[&name],
                name,
                ..LayerCost::default()
            })
            .collect(),
    }
}
