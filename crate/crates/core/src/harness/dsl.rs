//! Text format for model definitions.
//!
//! ```text
//! model mlp {
//!   fusion basic;
//!   partition {
//!     input x[8];
//!     segment weighted 2;
//!   }
//!   map hidden {
//!     depth 4;
//!     fc 16;
//!     relu;
//!   }
//!   map out { depth 4; fc 3; }
//!   reduce { sum; }
//! }
//! ```
//!
//! Layers inside a `map` block are named `<block>.<kind><position>`, and the
//! block's tree settings apply to every Map lowered from them.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::AdvancedMode;
use crate::fuzzy::ClusterFitConfig;
use crate::lower::PartitionPolicy;
use crate::model::{output_dims, Head, LayerOp, ModelGraph, SequentialBuilder};
use crate::pipeline::{FlowStore, PacketFeature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionChoice {
    None,
    Basic,
    DropNonlinear,
    Nam,
}

impl FusionChoice {
    pub fn advanced(self) -> Option<AdvancedMode> {
        match self {
            FusionChoice::DropNonlinear => Some(AdvancedMode::DropNonlinear),
            FusionChoice::Nam => Some(AdvancedMode::Nam),
            _ => None,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            FusionChoice::None => "none",
            FusionChoice::Basic => "basic",
            FusionChoice::DropNonlinear => "drop_nonlinear",
            FusionChoice::Nam => "nam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGranularity {
    /// One tree over all of a packet's features.
    PerPacket,
    /// One tree per feature.
    PerFeature,
}

/// Windowed per-flow input: packet features over the last `window` packets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDecl {
    pub window: usize,
    pub features: Vec<PacketFeature>,
    pub store: FlowStore,
    /// Tokenizer tree depth for index storage.
    pub token_depth: usize,
    pub tokens: TokenGranularity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentClass {
    All,
    Weighted,
    Elementwise,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRule {
    pub class: SegmentClass,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDecl {
    Fc { out: usize },
    Conv1d { channels: usize, kernel: usize, stride: usize },
    BatchNorm,
    Bias,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    AvgPool { window: usize },
    MaxPool { window: usize },
    Embedding { dim: usize, lo: i64, hi: i64 },
}

impl LayerDecl {
    fn kind(&self) -> &'static str {
        match self {
            LayerDecl::Fc { .. } => "fc",
            LayerDecl::Conv1d { .. } => "conv1d",
            LayerDecl::BatchNorm => "batchnorm",
            LayerDecl::Bias => "bias",
            LayerDecl::Relu => "relu",
            LayerDecl::Tanh => "tanh",
            LayerDecl::Sigmoid => "sigmoid",
            LayerDecl::Softmax => "softmax",
            LayerDecl::AvgPool { .. } => "avgpool",
            LayerDecl::MaxPool { .. } => "maxpool",
            LayerDecl::Embedding { .. } => "embedding",
        }
    }

    /// Layer with neutral parameters of the right shapes.
    fn op(&self, dims: &[usize]) -> LayerOp {
        let n: usize = dims.iter().product();
        let channels: usize = if dims.len() >= 2 { dims[1..].iter().product() } else { 1 };
        match *self {
            LayerDecl::Fc { out } => LayerOp::Fc {
                weight: vec![vec![0.0; n]; out],
                bias: vec![0.0; out],
            },
            LayerDecl::Conv1d {
                channels: out,
                kernel,
                stride,
            } => LayerOp::Conv1d {
                kernels: vec![vec![vec![0.0; kernel]; channels]; out],
                bias: vec![0.0; out],
                stride,
            },
            LayerDecl::BatchNorm => LayerOp::BatchNorm {
                gamma: vec![1.0; n],
                beta: vec![0.0; n],
                mean: vec![0.0; n],
                sigma: vec![1.0; n],
            },
            LayerDecl::Bias => LayerOp::Bias { bias: vec![0.0; n] },
            LayerDecl::Relu => LayerOp::Relu,
            LayerDecl::Tanh => LayerOp::Tanh,
            LayerDecl::Sigmoid => LayerOp::Sigmoid,
            LayerDecl::Softmax => LayerOp::Softmax,
            LayerDecl::AvgPool { window } => LayerOp::AvgPool { window },
            LayerDecl::MaxPool { window } => LayerOp::MaxPool { window },
            LayerDecl::Embedding { dim, lo, hi } => LayerOp::Embedding {
                table: vec![vec![0.0; dim]; (hi - lo + 1).max(1) as usize],
                index_min: lo,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapBlock {
    pub name: String,
    pub depth: usize,
    pub min_leaf: usize,
    /// Segment size for every layer of the block.
    pub segment: Option<usize>,
    pub layers: Vec<LayerDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceDecl {
    /// The last map's output is the model output.
    Sum,
    /// Absolute reconstruction error against the input or against the
    /// output of the named map block: an autoencoder score.
    Mae { tensor: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub fusion: FusionChoice,
    pub input: String,
    pub dims: Vec<usize>,
    pub stream: Option<StreamDecl>,
    pub segments: Vec<SegmentRule>,
    pub maps: Vec<MapBlock>,
    pub reduce: ReduceDecl,
}

impl ModelSpec {
    pub fn head(&self) -> Head {
        match self.reduce {
            ReduceDecl::Sum => Head::Classifier,
            ReduceDecl::Mae { .. } => Head::Autoencoder,
        }
    }

    pub fn layer_name(block: &MapBlock, i: usize) -> String {
        format!("{}.{}{}", block.name, block.layers[i].kind(), i)
    }

    /// The model with neutral parameters, ready for training.
    pub fn skeleton(&self) -> Result<ModelGraph> {
        let mut b = SequentialBuilder::new(&self.input, self.dims.clone()).head(self.head());
        for block in &self.maps {
            for (i, decl) in block.layers.iter().enumerate() {
                let dims = b.current_dims();
                let op = decl.op(&dims);
                let name = Self::layer_name(block, i);
                let out = output_dims(&op, &dims).map_err(|e| Error::Lowering {
                    layer: name.clone(),
                    reason: e.to_string(),
                })?;
                b = b.push(&name, op, out);
            }
        }
        if let ReduceDecl::Mae { tensor } = &self.reduce {
            let target = match self.maps.iter().find(|m| &m.name == tensor) {
                Some(block) if !block.layers.is_empty() => {
                    format!("{}.out", Self::layer_name(block, block.layers.len() - 1))
                }
                _ => tensor.clone(),
            };
            b.push_with("reduce.mae", LayerOp::AbsDiffSum, &[&target], vec![1]);
        }
        Ok(b.build())
    }

    pub fn policy(&self) -> PartitionPolicy {
        let mut p = PartitionPolicy::default();
        for rule in &self.segments {
            match rule.class {
                SegmentClass::All => p = PartitionPolicy::uniform(rule.size),
                SegmentClass::Weighted => p.weighted = rule.size,
                SegmentClass::Elementwise => p.elementwise = rule.size,
                SegmentClass::Pairwise => p.pairwise = rule.size,
            }
        }
        for block in &self.maps {
            if let Some(s) = block.segment {
                for i in 0..block.layers.len() {
                    p.layers.insert(Self::layer_name(block, i), s);
                }
            }
        }
        p
    }

    /// Tree settings keyed by layer name.
    pub fn tree_configs(&self) -> BTreeMap<String, ClusterFitConfig> {
        let mut out = BTreeMap::new();
        for block in &self.maps {
            for i in 0..block.layers.len() {
                out.insert(
                    Self::layer_name(block, i),
                    ClusterFitConfig {
                        depth: block.depth,
                        min_leaf: block.min_leaf,
                    },
                );
            }
        }
        out
    }

    /// Sets every map block's tree depth.
    pub fn with_depth(mut self, depth: usize) -> ModelSpec {
        for b in &mut self.maps {
            b.depth = depth;
        }
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {} {{", self.name);
        let _ = writeln!(s, "  fusion {};", self.fusion.keyword());
        let _ = writeln!(s, "  partition {{");
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "    input {}[{}];", self.input, dims.join(", "));
        if let Some(st) = &self.stream {
            let _ = writeln!(s, "    window {};", st.window);
            let feats: Vec<String> = st
                .features
                .iter()
                .map(|f| match f {
                    PacketFeature::Len => "len".to_string(),
                    PacketFeature::Ipd => "ipd".to_string(),
                    PacketFeature::Byte(i) => format!("byte {i}"),
                })
                .collect();
            let _ = writeln!(s, "    features {};", feats.join(" "));
            match st.store {
                FlowStore::Raw => {
                    let _ = writeln!(s, "    store raw;");
                }
                FlowStore::Index => {
                    let _ = writeln!(s, "    store index {};", st.token_depth);
                }
            }
            let tokens = match st.tokens {
                TokenGranularity::PerPacket => "per_packet",
                TokenGranularity::PerFeature => "per_feature",
            };
            let _ = writeln!(s, "    tokens {tokens};");
        }
        for r in &self.segments {
            let class = match r.class {
                SegmentClass::All => "",
                SegmentClass::Weighted => "weighted ",
                SegmentClass::Elementwise => "elementwise ",
                SegmentClass::Pairwise => "pairwise ",
            };
            let _ = writeln!(s, "    segment {class}{};", r.size);
        }
        let _ = writeln!(s, "  }}");
        for b in &self.maps {
            let _ = writeln!(s, "  map {} {{", b.name);
            let _ = writeln!(s, "    depth {};", b.depth);
            let _ = writeln!(s, "    min_leaf {};", b.min_leaf);
            if let Some(seg) = b.segment {
                let _ = writeln!(s, "    segment {seg};");
            }
            for l in &b.layers {
                let line = match l {
                    LayerDecl::Fc { out } => format!("fc {out}"),
                    LayerDecl::Conv1d {
                        channels,
                        kernel,
                        stride,
                    } => format!("conv1d {channels} kernel {kernel} stride {stride}"),
                    LayerDecl::AvgPool { window } => format!("avgpool {window}"),
                    LayerDecl::MaxPool { window } => format!("maxpool {window}"),
                    LayerDecl::Embedding { dim, lo, hi } => format!("embedding {dim} range {lo} {hi}"),
                    other => other.kind().to_string(),
                };
                let _ = writeln!(s, "    {line};");
            }
            let _ = writeln!(s, "  }}");
        }
        match &self.reduce {
            ReduceDecl::Sum => {
                let _ = writeln!(s, "  reduce {{ sum; }}");
            }
            ReduceDecl::Mae { tensor } => {
                let _ = writeln!(s, "  reduce {{ mae {tensor}; }}");
            }
        }
        s.push_str("}\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Punct(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let start = (line, col);
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                s.push(chars[i]);
                i += 1;
                col += 1;
            }
            Tok::Ident(s)
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(char::is_ascii_digit)) {
            let mut s = String::from(c);
            i += 1;
            col += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                s.push(chars[i]);
                i += 1;
                col += 1;
            }
            Tok::Int(s.parse().map_err(|_| Error::Parse {
                line: start.0,
                column: start.1,
                message: format!("integer `{s}` out of range"),
            })?)
        } else if "{}[];,".contains(c) {
            i += 1;
            col += 1;
            Tok::Punct(c)
        } else {
            return Err(Error::Parse {
                line,
                column: col,
                message: format!("unexpected character `{c}`"),
            });
        };
        out.push(Token {
            tok,
            line: start.0,
            column: start.1,
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn err<T>(&self, at: &Token, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            line: at.line,
            column: at.column,
            message: message.into(),
        })
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn describe(t: &Tok) -> String {
        match t {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Punct(c) => format!("`{c}`"),
            Tok::Eof => "end of input".into(),
        }
    }

    fn punct(&mut self, c: char) -> Result<()> {
        let t = self.next();
        if t.tok == Tok::Punct(c) {
            Ok(())
        } else {
            self.err(&t, format!("expected `{c}`, found {}", Self::describe(&t.tok)))
        }
    }

    fn ident(&mut self) -> Result<(String, Token)> {
        let t = self.next();
        match &t.tok {
            Tok::Ident(s) => Ok((s.clone(), t.clone())),
            other => self.err(&t, format!("expected a name, found {}", Self::describe(other))),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        let (s, t) = self.ident()?;
        if s == kw {
            Ok(())
        } else {
            self.err(&t, format!("expected `{kw}`, found `{s}`"))
        }
    }

    fn int(&mut self) -> Result<i64> {
        let t = self.next();
        match t.tok {
            Tok::Int(v) => Ok(v),
            ref other => self.err(&t, format!("expected an integer, found {}", Self::describe(other))),
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let at = self.peek().clone();
        let v = self.int()?;
        if v < 1 {
            return self.err(&at, format!("{what} must be at least 1, got {v}"));
        }
        Ok(v as usize)
    }

    fn at_punct(&self, c: char) -> bool {
        self.peek().tok == Tok::Punct(c)
    }

    fn model(&mut self) -> Result<ModelSpec> {
        self.keyword("model")?;
        let (name, _) = self.ident()?;
        self.punct('{')?;
        let mut fusion = FusionChoice::Basic;
        let mut partition: Option<(String, Vec<usize>, Option<StreamDecl>, Vec<SegmentRule>)> = None;
        let mut maps: Vec<MapBlock> = Vec::new();
        let mut reduce: Option<ReduceDecl> = None;
        let mut seen = HashSet::new();
        while !self.at_punct('}') {
            let (kw, at) = self.ident()?;
            match kw.as_str() {
                "fusion" => {
                    let (mode, t) = self.ident()?;
                    fusion = match mode.as_str() {
                        "none" => FusionChoice::None,
                        "basic" => FusionChoice::Basic,
                        "drop_nonlinear" => FusionChoice::DropNonlinear,
                        "nam" => FusionChoice::Nam,
                        other => return self.err(&t, format!("unknown fusion mode `{other}`")),
                    };
                    self.punct(';')?;
                }
                "partition" => {
                    if partition.is_some() {
                        return self.err(&at, "duplicate partition block");
                    }
                    partition = Some(self.partition(&at)?);
                }
                "map" => {
                    let block = self.map_block()?;
                    if !seen.insert(block.name.clone()) {
                        return self.err(&at, format!("duplicate map block `{}`", block.name));
                    }
                    maps.push(block);
                }
                "reduce" => {
                    if reduce.is_some() {
                        return self.err(&at, "duplicate reduce block");
                    }
                    reduce = Some(self.reduce()?);
                }
                other => return self.err(&at, format!("unknown section `{other}`")),
            }
        }
        let close = self.next();
        if self.peek().tok != Tok::Eof {
            let t = self.peek().clone();
            return self.err(&t, "unexpected text after the model block");
        }
        let Some((input, dims, stream, segments)) = partition else {
            return self.err(&close, format!("model `{name}` has no partition block"));
        };
        if maps.is_empty() {
            return self.err(&close, format!("model `{name}` has no map block"));
        }
        Ok(ModelSpec {
            name,
            fusion,
            input,
            dims,
            stream,
            segments,
            maps,
            reduce: reduce.unwrap_or(ReduceDecl::Sum),
        })
    }

    #[allow(clippy::type_complexity)]
    fn partition(&mut self, at: &Token) -> Result<(String, Vec<usize>, Option<StreamDecl>, Vec<SegmentRule>)> {
        self.punct('{')?;
        let mut input = None;
        let mut window = None;
        let mut features = Vec::new();
        let mut store = None;
        let mut tokens = TokenGranularity::PerPacket;
        let mut segments = Vec::new();
        while !self.at_punct('}') {
            let (kw, t) = self.ident()?;
            match kw.as_str() {
                "input" => {
                    let (name, _) = self.ident()?;
                    self.punct('[')?;
                    let mut dims = vec![self.count("dimension")?];
                    while self.at_punct(',') {
                        self.next();
                        dims.push(self.count("dimension")?);
                    }
                    self.punct(']')?;
                    input = Some((name, dims));
                }
                "window" => window = Some(self.count("window")?),
                "features" => {
                    while !self.at_punct(';') {
                        let (f, ft) = self.ident()?;
                        match f.as_str() {
                            "len" => features.push(PacketFeature::Len),
                            "ipd" => features.push(PacketFeature::Ipd),
                            "byte" => {
                                let i = self.int()?;
                                features.push(PacketFeature::Byte(i.max(0) as usize));
                            }
                            "bytes" => {
                                let n = self.count("byte count")?;
                                features.extend((0..n).map(PacketFeature::Byte));
                            }
                            other => return self.err(&ft, format!("unknown packet feature `{other}`")),
                        }
                    }
                }
                "store" => {
                    let (kind, kt) = self.ident()?;
                    store = Some(match kind.as_str() {
                        "raw" => (FlowStore::Raw, 0),
                        "index" => (FlowStore::Index, self.count("tokenizer depth")?),
                        other => return self.err(&kt, format!("unknown store kind `{other}`")),
                    });
                }
                "tokens" => {
                    let (g, gt) = self.ident()?;
                    tokens = match g.as_str() {
                        "per_packet" => TokenGranularity::PerPacket,
                        "per_feature" => TokenGranularity::PerFeature,
                        other => return self.err(&gt, format!("unknown token granularity `{other}`")),
                    };
                }
                "segment" => {
                    let class = match &self.peek().tok {
                        Tok::Ident(c) => {
                            let class = match c.as_str() {
                                "weighted" => SegmentClass::Weighted,
                                "elementwise" => SegmentClass::Elementwise,
                                "pairwise" => SegmentClass::Pairwise,
                                other => {
                                    let pt = self.peek().clone();
                                    return self.err(&pt, format!("unknown segment class `{other}`"));
                                }
                            };
                            self.next();
                            class
                        }
                        _ => SegmentClass::All,
                    };
                    segments.push(SegmentRule {
                        class,
                        size: self.count("segment size")?,
                    });
                }
                other => return self.err(&t, format!("unknown partition setting `{other}`")),
            }
            self.punct(';')?;
        }
        self.next();
        let Some((name, dims)) = input else {
            return self.err(at, "partition block has no input declaration");
        };
        let stream = match window {
            None => None,
            Some(w) => {
                if dims.len() != 2 || dims[0] != w {
                    return self.err(at, format!("windowed input must be declared as [{w}, channels]"));
                }
                if features.is_empty() {
                    return self.err(at, "windowed input needs a `features` list");
                }
                let (store, depth) = store.unwrap_or((FlowStore::Raw, 0));
                Some(StreamDecl {
                    window: w,
                    features,
                    store,
                    token_depth: depth,
                    tokens,
                })
            }
        };
        Ok((name, dims, stream, segments))
    }

    fn map_block(&mut self) -> Result<MapBlock> {
        let (name, at) = self.ident()?;
        self.punct('{')?;
        let mut depth = None;
        let mut min_leaf = 1;
        let mut segment = None;
        let mut layers = Vec::new();
        while !self.at_punct('}') {
            let (kw, t) = self.ident()?;
            match kw.as_str() {
                "depth" => depth = Some(self.count("depth")?),
                "min_leaf" => min_leaf = self.count("min_leaf")?,
                "segment" => segment = Some(self.count("segment size")?),
                "fc" => layers.push(LayerDecl::Fc { out: self.count("fc width")? }),
                "conv1d" => {
                    let channels = self.count("channels")?;
                    self.keyword("kernel")?;
                    let kernel = self.count("kernel")?;
                    let mut stride = 1;
                    if let Tok::Ident(s) = &self.peek().tok {
                        if s == "stride" {
                            self.next();
                            stride = self.count("stride")?;
                        }
                    }
                    layers.push(LayerDecl::Conv1d {
                        channels,
                        kernel,
                        stride,
                    });
                }
                "batchnorm" => layers.push(LayerDecl::BatchNorm),
                "bias" => layers.push(LayerDecl::Bias),
                "relu" => layers.push(LayerDecl::Relu),
                "tanh" => layers.push(LayerDecl::Tanh),
                "sigmoid" => layers.push(LayerDecl::Sigmoid),
                "softmax" => layers.push(LayerDecl::Softmax),
                "avgpool" => layers.push(LayerDecl::AvgPool {
                    window: self.count("window")?,
                }),
                "maxpool" => layers.push(LayerDecl::MaxPool {
                    window: self.count("window")?,
                }),
                "embedding" => {
                    let dim = self.count("embedding dim")?;
                    self.keyword("range")?;
                    let lo = self.int()?;
                    let hi = self.int()?;
                    if hi < lo {
                        return self.err(&t, format!("embedding range {lo}..{hi} is empty"));
                    }
                    layers.push(LayerDecl::Embedding { dim, lo, hi });
                }
                other => return self.err(&t, format!("unknown layer kind `{other}`")),
            }
            self.punct(';')?;
        }
        self.next();
        let Some(depth) = depth else {
            return self.err(&at, format!("map block `{name}` is missing `depth`"));
        };
        if layers.is_empty() {
            return self.err(&at, format!("map block `{name}` has no layers"));
        }
        Ok(MapBlock {
            name,
            depth,
            min_leaf,
            segment,
            layers,
        })
    }

    fn reduce(&mut self) -> Result<ReduceDecl> {
        self.punct('{')?;
        let (kw, t) = self.ident()?;
        let r = match kw.as_str() {
            "sum" => ReduceDecl::Sum,
            "mae" => ReduceDecl::Mae { tensor: self.ident()?.0 },
            other => return self.err(&t, format!("unknown reduction `{other}`")),
        };
        self.punct(';')?;
        self.punct('}')?;
        Ok(r)
    }
}

pub fn parse_model_dsl(text: &str) -> Result<ModelSpec> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let spec = p.model()?;
    if let ReduceDecl::Mae { tensor } = &spec.reduce {
        if *tensor != spec.input && !spec.maps.iter().any(|m| &m.name == tensor) {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: format!("mae must compare against the input `{}` or a map block, not `{tensor}`", spec.input),
            });
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "model tiny {
  partition { input x[8]; segment 8; }
  map hidden { depth 3; fc 4; relu; }
  reduce { sum; }
}";

    #[test]
    fn minimal_model() {
        let spec = parse_model_dsl(MINIMAL).unwrap();
        let m = spec.skeleton().unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!(spec.segments.len(), 1);
        assert_eq!(spec.policy().weighted, 8);
        assert_eq!(spec.tree_configs()["hidden.fc0"].depth, 3);
        assert_eq!(m.output_len(), 4);
        assert!(crate::model::validate_model(&m).is_empty());
    }

    #[test]
    fn missing_depth_names_the_block() {
        let text = MINIMAL.replace("depth 3; ", "");
        match parse_model_dsl(&text) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("`hidden`"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_layer_has_location() {
        let text = MINIMAL.replace("relu;", "gelu;");
        match parse_model_dsl(&text) {
            Err(e @ Error::Parse { .. }) => {
                assert_eq!(e.to_string(), "parse error at 3:31: unknown layer kind `gelu`");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_dims_and_duplicates() {
        assert!(matches!(
            parse_model_dsl(&MINIMAL.replace("x[8]", "x[0]")),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_model_dsl(&MINIMAL.replace("x[8]", "x[8,]")),
            Err(Error::Parse { line: 2, .. })
        ));
        let dup = MINIMAL.replace("reduce", "map hidden { depth 1; fc 2; }\n  reduce");
        match parse_model_dsl(&dup) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("duplicate map block")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stream_model_roundtrip() {
        let text = "model flows {
  fusion nam;
  partition {
    input x[8, 3];
    window 8;
    features len ipd byte 0;
    store index 4;
    tokens per_packet;
    segment weighted 3;
  }
  map enc { depth 2; min_leaf 4; segment 3; conv1d 4 kernel 1 stride 1; relu; }
  map out { depth 2; fc 2; }
  reduce { sum; }
}";
        let spec = parse_model_dsl(text).unwrap();
        let st = spec.stream.as_ref().unwrap();
        assert_eq!(st.features, vec![PacketFeature::Len, PacketFeature::Ipd, PacketFeature::Byte(0)]);
        assert_eq!(st.store, FlowStore::Index);
        assert_eq!(parse_model_dsl(&spec.to_text()).unwrap(), spec);
        assert_eq!(spec.policy().layers["enc.conv1d0"], 3);
    }

    #[test]
    fn autoencoder_reduce() {
        let text = "model ae { partition { input x[4]; } map enc { depth 2; fc 2; relu; fc 4; } reduce { mae x; } }";
        let spec = parse_model_dsl(text).unwrap();
        assert_eq!(spec.head(), Head::Autoencoder);
        let m = spec.skeleton().unwrap();
        assert!(crate::model::validate_model(&m).is_empty());
        assert!(parse_model_dsl(&text.replace("mae x", "mae y")).is_err());
        let norm = "model ae { partition { input x[4]; } map norm { depth 2; batchnorm; } \
                    map enc { depth 2; fc 2; relu; fc 4; } reduce { mae norm; } }";
        let m = parse_model_dsl(norm).unwrap().skeleton().unwrap();
        assert_eq!(m.layers.last().unwrap().inputs[1], "norm.batchnorm0.out");
    }

    mod roundtrip {
        use super::*;
        use proptest::prelude::*;

        fn layer() -> impl Strategy<Value = LayerDecl> {
            prop_oneof![
                (1usize..9).prop_map(|out| LayerDecl::Fc { out }),
                Just(LayerDecl::BatchNorm),
                Just(LayerDecl::Bias),
                Just(LayerDecl::Relu),
                Just(LayerDecl::Tanh),
                Just(LayerDecl::Sigmoid),
                Just(LayerDecl::Softmax),
                (1usize..4).prop_map(|window| LayerDecl::AvgPool { window }),
                (1usize..4).prop_map(|window| LayerDecl::MaxPool { window }),
                (1usize..4, 1usize..3, 1usize..3).prop_map(|(channels, kernel, stride)| LayerDecl::Conv1d {
                    channels,
                    kernel,
                    stride
                }),
                (1usize..4, -3i64..3, 0i64..5).prop_map(|(dim, lo, span)| LayerDecl::Embedding { dim, lo, hi: lo + span }),
            ]
        }

        fn block() -> impl Strategy<Value = MapBlock> {
            (
                1usize..6,
                1usize..4,
                proptest::option::of(1usize..5),
                proptest::collection::vec(layer(), 1..4),
            )
                .prop_map(|(depth, min_leaf, segment, layers)| MapBlock {
                    name: String::new(),
                    depth,
                    min_leaf,
                    segment,
                    layers,
                })
        }

        fn spec() -> impl Strategy<Value = ModelSpec> {
            (
                proptest::collection::vec(block(), 1..4),
                proptest::collection::vec(1usize..5, 1..3),
                prop_oneof![
                    Just(FusionChoice::None),
                    Just(FusionChoice::Basic),
                    Just(FusionChoice::DropNonlinear),
                    Just(FusionChoice::Nam)
                ],
                proptest::collection::vec((0usize..4, 1usize..5), 0..3),
            )
                .prop_map(|(mut maps, dims, fusion, segs)| {
                    for (i, b) in maps.iter_mut().enumerate() {
                        b.name = format!("b{i}");
                    }
                    let classes = [
                        SegmentClass::All,
                        SegmentClass::Weighted,
                        SegmentClass::Elementwise,
                        SegmentClass::Pairwise,
                    ];
                    ModelSpec {
                        name: "gen".into(),
                        fusion,
                        input: "x".into(),
                        dims,
                        stream: None,
                        segments: segs
                            .into_iter()
                            .map(|(c, size)| SegmentRule { class: classes[c], size })
                            .collect(),
                        maps,
                        reduce: ReduceDecl::Sum,
                    }
                })
        }

        proptest! {
            #[test]
            fn parse_after_print_is_identity(s in spec()) {
                prop_assert_eq!(parse_model_dsl(&s.to_text()).unwrap(), s);
            }
        }
    }
}
