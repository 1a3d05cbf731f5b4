//! Architecture descriptions and their line-oriented text form.
//!
//! One row per layer, columns `op,kernel,exp,out,se,stam,nl,stride`, `-`
//! for "not applicable" and `#` for comments. The row sequence is fixed:
//! a stem `conv`, one or more `mbconv` rows, then the head
//! `conv 1×1 → pool → conv 1×1 → conv 1×1 (classes)`. The classifier's
//! `out` may be `k`, leaving the class count to the caller.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Conv,
    MbConv,
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Nonlinearity {
    /// ReLU
    #[serde(rename = "RE")]
    Re,
    /// Hardswish
    #[serde(rename = "HS")]
    Hs,
}

impl Nonlinearity {
    pub fn activation(self) -> Activation {
        match self {
            Nonlinearity::Re => Activation::Relu,
            Nonlinearity::Hs => Activation::Hardswish,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockSpec {
    pub op: Op,
    pub kernel: usize,
    /// Expanded width in absolute channels (mbconv only).
    pub exp: usize,
    pub out: usize,
    pub se: bool,
    pub stam: bool,
    pub nl: Option<Nonlinearity>,
    pub stride: usize,
}

impl BlockSpec {
    pub fn mbconv(
        kernel: usize,
        exp: usize,
        out: usize,
        se: bool,
        stam: bool,
        nl: Nonlinearity,
        stride: usize,
    ) -> Self {
        Self {
            op: Op::MbConv,
            kernel,
            exp,
            out,
            se,
            stam,
            nl: Some(nl),
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArchSpec {
    pub input_hw: usize,
    pub stem: BlockSpec,
    pub blocks: Vec<BlockSpec>,
    /// Widths of the two head convolutions around the global pool.
    pub head_dims: (usize, usize),
    pub num_classes: Option<usize>,
}

/// The shipped default network, one row per line of the layer table.
pub const STANET_ARCH: &str = include_str!("../../stanet.arch");

impl ArchSpec {
    pub fn stanet() -> Self {
        Self::parse(STANET_ARCH).expect("shipped architecture parses")
    }

    pub fn with_classes(mut self, k: usize) -> Self {
        self.num_classes = Some(k);
        self
    }

    pub fn classes(&self) -> Result<usize> {
        self.num_classes
            .ok_or_else(|| Error::Arch("class count unspecified (classifier row has `k`)".into()))
    }

    pub fn total_stride(&self) -> usize {
        self.stem.stride * self.blocks.iter().map(|b| b.stride).product::<usize>()
    }

    /// Spatial side after the stem and after each block.
    pub fn feature_sides(&self) -> Vec<usize> {
        let mut side = self.input_hw.div_ceil(self.stem.stride);
        let mut v = vec![side];
        for b in &self.blocks {
            side = side.div_ceil(b.stride);
            v.push(side);
        }
        v
    }

    pub fn final_side(&self) -> usize {
        *self.feature_sides().last().expect("non-empty")
    }

    /// Input channels of block `i`.
    pub fn block_input(&self, i: usize) -> usize {
        if i == 0 {
            self.stem.out
        } else {
            self.blocks[i - 1].out
        }
    }

    pub fn last_width(&self) -> usize {
        self.blocks.last().map_or(self.stem.out, |b| b.out)
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1;
        if self.stem.op != Op::Conv || !odd(self.stem.kernel) || self.stem.out == 0 {
            return Err(Error::Arch(
                "stem must be an odd-kernel conv with outputs".into(),
            ));
        }
        if self.blocks.is_empty() {
            return Err(Error::Arch("no mbconv blocks".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let at = |m: &str| Error::Arch(format!("block {i}: {m}"));
            if b.op != Op::MbConv {
                return Err(at("only mbconv rows may sit between stem and head"));
            }
            if !odd(b.kernel) {
                return Err(at("kernel must be odd"));
            }
            if !matches!(b.stride, 1 | 2) {
                return Err(at("stride must be 1 or 2"));
            }
            if b.out == 0 || b.exp == 0 {
                return Err(at("widths must be positive"));
            }
            if b.exp < b.out {
                return Err(at("expansion width must be at least the output width"));
            }
            if b.stam && b.stride != 1 {
                return Err(at("STAM requires stride 1"));
            }
            if b.nl.is_none() {
                return Err(at("nonlinearity required"));
            }
        }
        if self.head_dims.0 == 0 || self.head_dims.1 == 0 || self.num_classes == Some(0) {
            return Err(Error::Arch("head widths must be positive".into()));
        }
        if self.input_hw == 0 || !self.input_hw.is_multiple_of(self.total_stride()) {
            return Err(Error::Arch(format!(
                "input side {} not divisible by total stride {}",
                self.input_hw,
                self.total_stride()
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            rows.push((idx + 1, parse_row(idx + 1, line)?));
        }
        let err = |line: usize, msg: &str| Error::ArchParse {
            line,
            msg: msg.to_string(),
        };
        let last_line = rows.last().map_or(0, |r| r.0);
        if rows.len() < 6 {
            return Err(err(
                last_line,
                "expected stem, mbconv rows and a four-row head",
            ));
        }
        let (stem_line, stem) = rows[0].clone();
        if stem.op != Op::Conv {
            return Err(err(stem_line, "first row must be the stem conv"));
        }
        let head = &rows[rows.len() - 4..];
        let body = &rows[1..rows.len() - 4];
        let mut blocks = Vec::with_capacity(body.len());
        for (line, r) in body {
            if r.op != Op::MbConv {
                return Err(err(*line, "expected an mbconv row"));
            }
            blocks.push(r.spec.clone());
        }
        let expect_conv1 = |(line, r): &(usize, Row), what: &str| -> Result<()> {
            if r.op != Op::Conv || r.spec.kernel != 1 {
                return Err(err(*line, &format!("expected 1x1 conv for {what}")));
            }
            Ok(())
        };
        expect_conv1(&head[0], "head features")?;
        let (pool_line, pool) = &head[1];
        if pool.op != Op::Pool {
            return Err(err(*pool_line, "expected pool row"));
        }
        expect_conv1(&head[2], "head hidden layer")?;
        expect_conv1(&head[3], "classifier")?;
        let out_of = |(line, r): &(usize, Row)| -> Result<usize> {
            r.out.ok_or_else(|| err(*line, "output width required"))
        };
        let spec = ArchSpec {
            input_hw: 0,
            stem: stem.spec,
            blocks,
            head_dims: (out_of(&head[0])?, out_of(&head[2])?),
            num_classes: head[3].1.out,
        };
        let input_hw = pool.spec.kernel * spec.total_stride();
        let spec = ArchSpec { input_hw, ..spec };
        spec.validate()
            .map_err(|e| err(*pool_line, &e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# op,kernel,exp,out,se,stam,nl,stride\n");
        let nl = |n: Option<Nonlinearity>| match n {
            Some(Nonlinearity::Re) => "RE",
            Some(Nonlinearity::Hs) => "HS",
            None => "-",
        };
        let flag = |b: bool| if b { "True" } else { "-" };
        let st = &self.stem;
        writeln!(
            s,
            "conv,{},-,{},-,-,{},{}",
            st.kernel,
            st.out,
            nl(st.nl),
            st.stride
        )
        .unwrap();
        for b in &self.blocks {
            writeln!(
                s,
                "mbconv,{},{},{},{},{},{},{}",
                b.kernel,
                b.exp,
                b.out,
                flag(b.se),
                flag(b.stam),
                nl(b.nl),
                b.stride
            )
            .unwrap();
        }
        writeln!(s, "conv,1,-,{},-,-,HS,1", self.head_dims.0).unwrap();
        writeln!(
            s,
            "pool,{},-,-,-,-,-,-",
            self.input_hw / self.total_stride()
        )
        .unwrap();
        writeln!(s, "conv,1,-,{},-,-,HS,1", self.head_dims.1).unwrap();
        match self.num_classes {
            Some(k) => writeln!(s, "conv,1,-,{k},-,-,-,1").unwrap(),
            None => writeln!(s, "conv,1,-,k,-,-,-,1").unwrap(),
        }
        s
    }
}

#[derive(Clone, Debug)]
struct Row {
    op: Op,
    out: Option<usize>,
    spec: BlockSpec,
}

fn parse_row(line: usize, text: &str) -> Result<Row> {
    let err = |msg: String| Error::ArchParse { line, msg };
    let cols: Vec<&str> = text.split(',').map(str::trim).collect();
    if cols.len() != 8 {
        return Err(err(format!("expected 8 columns, found {}", cols.len())));
    }
    let op = match cols[0].to_ascii_lowercase().as_str() {
        "conv" | "conv2d" => Op::Conv,
        "mbconv" => Op::MbConv,
        "pool" => Op::Pool,
        other => return Err(err(format!("unknown operator `{other}`"))),
    };
    let num = |i: usize, name: &str| -> Result<Option<usize>> {
        match cols[i] {
            "-" => Ok(None),
            v => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| err(format!("column {name}: `{v}` is not a count"))),
        }
    };
    let flag = |i: usize, name: &str| -> Result<bool> {
        match cols[i].to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(true),
            "-" | "false" | "no" | "0" => Ok(false),
            v => Err(err(format!("column {name}: `{v}` is not a flag"))),
        }
    };
    let nl = match cols[6].to_ascii_uppercase().as_str() {
        "RE" => Some(Nonlinearity::Re),
        "HS" => Some(Nonlinearity::Hs),
        "-" => None,
        v => return Err(err(format!("column nl: unknown nonlinearity `{v}`"))),
    };
    let kernel = num(1, "kernel")?.ok_or_else(|| err("kernel required".into()))?;
    let out = if op == Op::Conv && cols[3].eq_ignore_ascii_case("k") {
        None
    } else {
        num(3, "out")?
    };
    let exp = num(2, "exp")?;
    let stride = num(7, "stride")?;
    match op {
        Op::MbConv => {
            if exp.is_none() || out.is_none() || stride.is_none() || nl.is_none() {
                return Err(err("mbconv rows need exp, out, nl and stride".into()));
            }
        }
        Op::Conv => {
            if stride.is_none() {
                return Err(err("conv rows need a stride".into()));
            }
            if flag(4, "se")? || flag(5, "stam")? {
                return Err(err("attention flags are only valid on mbconv rows".into()));
            }
        }
        Op::Pool => {}
    }
    Ok(Row {
        op,
        out,
        spec: BlockSpec {
            op,
            kernel,
            exp: exp.unwrap_or(0),
            out: out.unwrap_or(0),
            se: flag(4, "se")?,
            stam: flag(5, "stam")?,
            nl,
            stride: stride.unwrap_or(1),
        },
    })
}
