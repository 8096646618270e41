//! Shape-level operator IR and builders for transformer layers.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Int8,
    Bf16,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::Int8 => 1,
            Precision::Bf16 => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int8" => Some(Precision::Int8),
            "bf16" => Some(Precision::Bf16),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OpKind {
    /// `batch` independent `M x K` by `K x N` products. With `shared_weights`
    /// every instance multiplies the same weight matrix, so the batch folds
    /// into M.
    Gemm {
        batch: u64,
        m: u64,
        k: u64,
        n: u64,
        shared_weights: bool,
    },
    Softmax {
        rows: u64,
        cols: u64,
    },
    LayerNorm {
        rows: u64,
        cols: u64,
    },
    Gelu {
        elements: u64,
    },
    Elementwise {
        elements: u64,
        ops_per_element: u64,
    },
    KvCacheUpdate {
        bytes: u64,
    },
    AllReduce {
        bytes: u64,
        group_size: u64,
    },
    PointToPoint {
        bytes: u64,
    },
}

/// Reporting bucket of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Qkv,
    Attention,
    Projection,
    Ffn,
    NormElementwise,
    KvCache,
    Conditioning,
    Communication,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Qkv,
        Category::Attention,
        Category::Projection,
        Category::Ffn,
        Category::NormElementwise,
        Category::KvCache,
        Category::Conditioning,
        Category::Communication,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Qkv => "qkv",
            Category::Attention => "attention",
            Category::Projection => "projection",
            Category::Ffn => "ffn",
            Category::NormElementwise => "norm_elementwise",
            Category::KvCache => "kv_cache",
            Category::Conditioning => "conditioning",
            Category::Communication => "communication",
        }
    }

    /// Weight-GEMM categories (QKV, projection, FFN).
    pub fn is_weight_gemm(self) -> bool {
        matches!(self, Category::Qkv | Category::Projection | Category::Ffn)
    }
}

/// Bytes an operator reads and writes, split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpBytes {
    pub input: u64,
    pub weight: u64,
    pub output: u64,
}

impl OpBytes {
    pub fn total(&self) -> u64 {
        self.input + self.weight + self.output
    }
}

/// GEMM view after folding shared-weight batches into M.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GemmShape {
    /// Independent products, each with its own weight matrix.
    pub instances: u64,
    pub m: u64,
    pub k: u64,
    pub n: u64,
}

impl GemmShape {
    pub fn macs(&self) -> u64 {
        self.instances * self.m * self.k * self.n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operator {
    pub name: String,
    pub kind: OpKind,
    pub precision: Precision,
    pub deps: Vec<String>,
    pub category: Category,
}

impl Operator {
    pub fn new(name: &str, kind: OpKind, precision: Precision, category: Category) -> Self {
        Operator {
            name: name.to_string(),
            kind,
            precision,
            deps: Vec::new(),
            category,
        }
    }

    pub fn after(mut self, deps: &[&str]) -> Self {
        self.deps = deps.iter().map(|d| d.to_string()).collect();
        self
    }

    pub fn gemm_shape(&self) -> Option<GemmShape> {
        match self.kind {
            OpKind::Gemm {
                batch,
                m,
                k,
                n,
                shared_weights,
            } => Some(if shared_weights {
                GemmShape {
                    instances: 1,
                    m: batch * m,
                    k,
                    n,
                }
            } else {
                GemmShape {
                    instances: batch,
                    m,
                    k,
                    n,
                }
            }),
            _ => None,
        }
    }

    pub fn is_gemm(&self) -> bool {
        matches!(self.kind, OpKind::Gemm { .. })
    }

    pub fn is_vector(&self) -> bool {
        matches!(
            self.kind,
            OpKind::Softmax { .. }
                | OpKind::LayerNorm { .. }
                | OpKind::Gelu { .. }
                | OpKind::Elementwise { .. }
        )
    }

    pub fn macs(&self) -> u64 {
        self.gemm_shape().map_or(0, |g| g.macs())
    }

    pub fn flops(&self) -> u64 {
        flops_of(&self.kind)
    }

    pub fn bytes(&self) -> OpBytes {
        bytes_of(&self.kind, self.precision)
    }

    fn dims(&self) -> Vec<(&'static str, u64)> {
        match self.kind {
            OpKind::Gemm { batch, m, k, n, .. } => {
                vec![("batch", batch), ("m", m), ("k", k), ("n", n)]
            }
            OpKind::Softmax { rows, cols } | OpKind::LayerNorm { rows, cols } => {
                vec![("rows", rows), ("cols", cols)]
            }
            OpKind::Gelu { elements } => vec![("elements", elements)],
            OpKind::Elementwise {
                elements,
                ops_per_element,
            } => vec![("elements", elements), ("ops_per_element", ops_per_element)],
            OpKind::KvCacheUpdate { bytes } | OpKind::PointToPoint { bytes } => {
                vec![("bytes", bytes)]
            }
            OpKind::AllReduce { bytes, group_size } => {
                vec![("bytes", bytes), ("group_size", group_size)]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in self.dims() {
            if v == 0 {
                return Err(Error::Workload(format!(
                    "operator `{}`: {field} must be >= 1",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Arithmetic operations performed by an operator.
///
/// Vector operators count scalar ops of their reference algorithms: online
/// softmax spends a compare, a fused normalizer update and a divide per
/// element plus a two-op merge per row; LayerNorm a sum, a multiply-add for
/// the square sum and a subtract/multiply for normalization per element plus
/// five per-row scalar ops; tanh-GeLU eight ops per element.
pub fn flops_of(kind: &OpKind) -> u64 {
    match *kind {
        OpKind::Gemm { batch, m, k, n, .. } => 2 * batch * m * k * n,
        OpKind::Softmax { rows, cols } => rows * (3 * cols + 2),
        OpKind::LayerNorm { rows, cols } => rows * (5 * cols + 5),
        OpKind::Gelu { elements } => 8 * elements,
        OpKind::Elementwise {
            elements,
            ops_per_element,
        } => elements * ops_per_element,
        OpKind::KvCacheUpdate { .. } | OpKind::AllReduce { .. } | OpKind::PointToPoint { .. } => 0,
    }
}

pub fn bytes_of(kind: &OpKind, precision: Precision) -> OpBytes {
    let e = precision.bytes();
    match *kind {
        OpKind::Gemm {
            batch,
            m,
            k,
            n,
            shared_weights,
        } => OpBytes {
            input: batch * m * k * e,
            weight: if shared_weights {
                k * n * e
            } else {
                batch * k * n * e
            },
            output: batch * m * n * e,
        },
        OpKind::Softmax { rows, cols } => OpBytes {
            input: rows * cols * e,
            weight: 0,
            output: rows * cols * e,
        },
        OpKind::LayerNorm { rows, cols } => OpBytes {
            input: rows * cols * e,
            weight: 2 * cols * e,
            output: rows * cols * e,
        },
        OpKind::Gelu { elements } | OpKind::Elementwise { elements, .. } => OpBytes {
            input: elements * e,
            weight: 0,
            output: elements * e,
        },
        OpKind::KvCacheUpdate { bytes } => OpBytes {
            input: 0,
            weight: 0,
            output: bytes,
        },
        OpKind::AllReduce { bytes, .. } | OpKind::PointToPoint { bytes } => OpBytes {
            input: bytes,
            weight: 0,
            output: bytes,
        },
    }
}

/// Operators of one transformer layer or DiT block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub name: String,
    pub ops: Vec<Operator>,
}

impl LayerGraph {
    pub fn new(name: &str, ops: Vec<Operator>) -> Self {
        LayerGraph {
            name: name.to_string(),
            ops,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Operator> {
        self.ops.iter().find(|o| o.name == name)
    }

    /// Operator indices in dependency order. Among ready operators the one
    /// listed first goes first, so the order is deterministic.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let mut index = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if index.insert(op.name.as_str(), i).is_some() {
                return Err(Error::Workload(format!("duplicate operator `{}`", op.name)));
            }
        }
        let mut indegree = vec![0usize; self.ops.len()];
        let mut users = vec![Vec::new(); self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            for d in &op.deps {
                let &j = index.get(d.as_str()).ok_or_else(|| {
                    Error::Workload(format!("operator `{}` depends on unknown `{d}`", op.name))
                })?;
                indegree[i] += 1;
                users[j].push(i);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| Reverse(i))
            .collect();
        let mut order = Vec::with_capacity(self.ops.len());
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.push(Reverse(u));
                }
            }
        }
        if order.len() != self.ops.len() {
            let stuck = indegree.iter().position(|&d| d > 0).unwrap_or(0);
            return Err(Error::CyclicGraph(self.ops[stuck].name.clone()));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            op.validate()?;
        }
        self.topo_order().map(|_| ())
    }

    pub fn flops(&self) -> u64 {
        self.ops.iter().map(Operator::flops).sum()
    }

    pub fn macs(&self) -> u64 {
        self.ops.iter().map(Operator::macs).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Llm,
    Dit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub family: Family,
    #[serde(alias = "layers")]
    pub n_layers: u64,
    #[serde(alias = "heads")]
    pub n_heads: u64,
    pub d_model: u64,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: u64,
    #[serde(default = "default_patch")]
    pub patch_size: u64,
    #[serde(default = "default_downsample")]
    pub vae_downsample: u64,
}

fn default_ffn_ratio() -> u64 {
    4
}
fn default_patch() -> u64 {
    2
}
fn default_downsample() -> u64 {
    8
}

pub const MODEL_NAMES: &[&str] = &["gpt3-30b", "dit-xl-2"];

impl ModelConfig {
    pub fn llm(name: &str, n_layers: u64, n_heads: u64, d_model: u64) -> Self {
        ModelConfig {
            name: name.to_string(),
            family: Family::Llm,
            n_layers,
            n_heads,
            d_model,
            ffn_ratio: 4,
            patch_size: 2,
            vae_downsample: 8,
        }
    }

    pub fn dit(name: &str, n_layers: u64, n_heads: u64, d_model: u64) -> Self {
        ModelConfig {
            family: Family::Dit,
            ..ModelConfig::llm(name, n_layers, n_heads, d_model)
        }
    }

    pub fn gpt3_30b() -> Self {
        ModelConfig::llm("gpt3-30b", 48, 56, 7168)
    }

    pub fn dit_xl_2() -> Self {
        ModelConfig::dit("dit-xl-2", 28, 16, 1152)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "gpt3-30b" => Some(Self::gpt3_30b()),
            "dit-xl-2" => Some(Self::dit_xl_2()),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::Workload(format!("model document: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Built-in name or path to a JSON model document.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(m) = Self::builtin(spec) {
            return Ok(m);
        }
        let text = std::fs::read_to_string(spec)
            .map_err(|e| Error::Io(format!("cannot read model `{spec}`: {e}")))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, f) in [
            (self.n_layers, "n_layers"),
            (self.n_heads, "n_heads"),
            (self.d_model, "d_model"),
            (self.ffn_ratio, "ffn_ratio"),
            (self.patch_size, "patch_size"),
            (self.vae_downsample, "vae_downsample"),
        ] {
            if v == 0 {
                return Err(Error::Workload(format!("{f} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Workload(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.d_model / self.n_heads
    }

    pub fn ffn_hidden(&self) -> u64 {
        self.ffn_ratio * self.d_model
    }

    /// Latent tokens per image for a DiT model.
    pub fn dit_tokens(&self, resolution: u64) -> Result<u64> {
        let f = self.vae_downsample * self.patch_size;
        if resolution == 0 || !resolution.is_multiple_of(f) {
            return Err(Error::Workload(format!(
                "image resolution {resolution} is not a multiple of {f}"
            )));
        }
        let side = resolution / f;
        Ok(side * side)
    }

    /// KV cache bytes per layer for `tokens` cached tokens.
    pub fn kv_bytes_per_layer(&self, batch: u64, tokens: u64, precision: Precision) -> u64 {
        2 * batch * tokens * self.d_model * precision.bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub batch: u64,
    pub seq_in: u64,
    pub decode_pos: u64,
    pub out_len: u64,
    pub image_resolution: u64,
    pub precision: Precision,
}

impl Default for InferenceParams {
    fn default() -> Self {
        InferenceParams {
            batch: 8,
            seq_in: 1024,
            decode_pos: 256,
            out_len: 512,
            image_resolution: 512,
            precision: Precision::Int8,
        }
    }
}

fn require_family(m: &ModelConfig, family: Family) -> Result<()> {
    m.validate()?;
    if m.family != family {
        return Err(Error::Workload(format!(
            "model `{}` is {:?}, expected {:?}",
            m.name, m.family, family
        )));
    }
    Ok(())
}

struct AttentionShapes {
    tokens: u64,
    context: u64,
}

/// Shared skeleton: norm, QKV, per-head attention, projection, FFN and
/// residuals for `batch` sequences of `tokens` new tokens attending over
/// `context` positions.
fn transformer_ops(
    m: &ModelConfig,
    batch: u64,
    s: AttentionShapes,
    p: Precision,
    dit: bool,
) -> Vec<Operator> {
    use Category::*;
    let d = m.d_model;
    let h = m.n_heads;
    let dh = m.head_dim();
    let f = m.ffn_hidden();
    let rows = batch * s.tokens;
    let act = rows * d;
    let gemm = |b, mm, k, n, shared| OpKind::Gemm {
        batch: b,
        m: mm,
        k,
        n,
        shared_weights: shared,
    };
    let mut ops = Vec::new();
    let mut push = |op: Operator| ops.push(op);

    if dit {
        push(Operator::new(
            "cond",
            gemm(batch, 1, d, 6 * d, true),
            p,
            Conditioning,
        ));
    }
    push(Operator::new(
        "ln1",
        OpKind::LayerNorm { rows, cols: d },
        p,
        NormElementwise,
    ));
    let qkv_in = if dit {
        push(
            Operator::new(
                "mod1",
                OpKind::Elementwise {
                    elements: act,
                    ops_per_element: 2,
                },
                p,
                NormElementwise,
            )
            .after(&["ln1", "cond"]),
        );
        "mod1"
    } else {
        "ln1"
    };
    push(Operator::new("qkv", gemm(batch, s.tokens, d, 3 * d, true), p, Qkv).after(&[qkv_in]));
    if !dit {
        push(
            Operator::new(
                "kv_write",
                OpKind::KvCacheUpdate {
                    bytes: m.kv_bytes_per_layer(batch, s.tokens, p),
                },
                p,
                KvCache,
            )
            .after(&["qkv"]),
        );
    }
    push(
        Operator::new(
            "qk",
            gemm(batch * h, s.tokens, dh, s.context, false),
            p,
            Attention,
        )
        .after(&["qkv"]),
    );
    push(
        Operator::new(
            "softmax",
            OpKind::Softmax {
                rows: batch * h * s.tokens,
                cols: s.context,
            },
            p,
            Attention,
        )
        .after(&["qk"]),
    );
    push(
        Operator::new(
            "sv",
            gemm(batch * h, s.tokens, s.context, dh, false),
            p,
            Attention,
        )
        .after(&["softmax"]),
    );
    push(Operator::new("proj", gemm(batch, s.tokens, d, d, true), p, Projection).after(&["sv"]));
    let eltwise = |name: &str, ops_per_element, dep: &str| {
        Operator::new(
            name,
            OpKind::Elementwise {
                elements: act,
                ops_per_element,
            },
            p,
            NormElementwise,
        )
        .after(&[dep])
    };
    let res1_in = if dit {
        push(eltwise("gate1", 1, "proj"));
        "gate1"
    } else {
        "proj"
    };
    push(eltwise("residual1", 1, res1_in));
    push(
        Operator::new(
            "ln2",
            OpKind::LayerNorm { rows, cols: d },
            p,
            NormElementwise,
        )
        .after(&["residual1"]),
    );
    let up_in = if dit {
        push(eltwise("mod2", 2, "ln2"));
        "mod2"
    } else {
        "ln2"
    };
    push(Operator::new("ffn_up", gemm(batch, s.tokens, d, f, true), p, Ffn).after(&[up_in]));
    push(
        Operator::new(
            "gelu",
            OpKind::Gelu { elements: rows * f },
            p,
            NormElementwise,
        )
        .after(&["ffn_up"]),
    );
    push(Operator::new("ffn_down", gemm(batch, s.tokens, f, d, true), p, Ffn).after(&["gelu"]));
    let res2_in = if dit {
        push(eltwise("gate2", 1, "ffn_down"));
        "gate2"
    } else {
        "ffn_down"
    };
    push(eltwise("residual2", 1, res2_in));
    ops
}

/// One decoder layer processing the whole prompt.
pub fn build_llm_prefill_layer(m: &ModelConfig, p: &InferenceParams) -> Result<LayerGraph> {
    require_family(m, Family::Llm)?;
    if p.batch == 0 || p.seq_in == 0 {
        return Err(Error::Workload(
            "prefill needs batch >= 1 and seq_in >= 1".into(),
        ));
    }
    let ops = transformer_ops(
        m,
        p.batch,
        AttentionShapes {
            tokens: p.seq_in,
            context: p.seq_in,
        },
        p.precision,
        false,
    );
    Ok(LayerGraph::new(&format!("{}-prefill", m.name), ops))
}

/// One decoder layer generating output token number `decode_pos`.
pub fn build_llm_decode_layer(m: &ModelConfig, p: &InferenceParams) -> Result<LayerGraph> {
    require_family(m, Family::Llm)?;
    if p.batch == 0 {
        return Err(Error::Workload("decode needs batch >= 1".into()));
    }
    if p.decode_pos == 0 {
        return Err(Error::Workload("decode_pos must be >= 1".into()));
    }
    let ops = transformer_ops(
        m,
        p.batch,
        AttentionShapes {
            tokens: 1,
            context: p.seq_in + p.decode_pos,
        },
        p.precision,
        false,
    );
    Ok(LayerGraph::new(&format!("{}-decode", m.name), ops))
}

/// One DiT block with adaLN conditioning.
pub fn build_dit_block(m: &ModelConfig, p: &InferenceParams) -> Result<LayerGraph> {
    require_family(m, Family::Dit)?;
    if p.batch == 0 {
        return Err(Error::Workload("batch must be >= 1".into()));
    }
    let t = m.dit_tokens(p.image_resolution)?;
    let ops = transformer_ops(
        m,
        p.batch,
        AttentionShapes {
            tokens: t,
            context: t,
        },
        p.precision,
        true,
    );
    Ok(LayerGraph::new(&format!("{}-block", m.name), ops))
}
