use candle_core::{DType, Tensor, D};

use super::MeshTopology;
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Init, ParamBuilder};

/// Negative-side slope of both the attention-logit rectifier and the output
/// nonlinearity.
pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

/// Sparse message-passing index: one entry per directed edge `src -> dst`,
/// including a self-loop on every vertex. Entries are grouped by `dst`.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    vertex_count: usize,
    src: Vec<u32>,
    dst: Vec<u32>,
    src_t: Tensor,
    dst_t: Tensor,
}

impl GraphIndex {
    pub fn new(topology: &MeshTopology) -> Result<Self> {
        let n = topology.vertex_count();
        let mut adjacency: Vec<Vec<u32>> = (0..n as u32).map(|v| vec![v]).collect();
        for &(a, b) in topology.edges() {
            adjacency[a as usize].push(b);
            adjacency[b as usize].push(a);
        }
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (v, nbrs) in adjacency.iter().enumerate() {
            for &u in nbrs {
                src.push(u);
                dst.push(v as u32);
            }
        }
        let device = crate::params::device();
        let src_t = Tensor::new(src.as_slice(), &device)?;
        let dst_t = Tensor::new(dst.as_slice(), &device)?;
        Ok(Self {
            vertex_count: n,
            src,
            dst,
            src_t,
            dst_t,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    pub fn sources(&self) -> &[u32] {
        &self.src
    }

    pub fn targets(&self) -> &[u32] {
        &self.dst
    }
}

/// Single-head graph attention layer.
#[derive(Debug, Clone)]
pub struct GatLayer {
    weight: Tensor,
    att_src: Tensor,
    att_dst: Tensor,
}

impl GatLayer {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.tensor(
            "weight",
            (in_dim, out_dim),
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let att_bound = (6.0 / (out_dim + 1) as f64).sqrt();
        let att_src = pb.tensor("att_src", out_dim, Init::Uniform(att_bound))?;
        let att_dst = pb.tensor("att_dst", out_dim, Init::Uniform(att_bound))?;
        Ok(Self {
            weight,
            att_src,
            att_dst,
        })
    }

    /// Layer from explicit tensors: `weight` is `(D_in, D_out)`, the attention
    /// vectors have length `D_out`.
    pub fn from_tensors(weight: Tensor, att_src: Tensor, att_dst: Tensor) -> Result<Self> {
        let (_, out) = weight.dims2()?;
        if att_src.dims() != [out] || att_dst.dims() != [out] {
            return Err(Error::Config("attention vectors must match the layer output width".into()));
        }
        Ok(Self {
            weight,
            att_src,
            att_dst,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// `x` is `(F, N_v, D_in)`; returns `(F, N_v, D_out)`.
    pub fn forward(&self, x: &Tensor, graph: &GraphIndex) -> Result<Tensor> {
        Ok(self.forward_with_attention(x, graph)?.0)
    }

    /// Also returns the `(F, E)` attention weights, aligned with
    /// `graph.sources()` / `graph.targets()`.
    pub fn forward_with_attention(&self, x: &Tensor, graph: &GraphIndex) -> Result<(Tensor, Tensor)> {
        let (frames, n, d_in) = x.dims3()?;
        if n != graph.vertex_count() || d_in != self.in_dim() {
            return Err(Error::Config(format!(
                "graph attention input is ({frames}, {n}, {d_in}), expected (_, {}, {})",
                graph.vertex_count(),
                self.in_dim()
            )));
        }
        let wh = x.broadcast_matmul(&self.weight)?;
        let score_src = wh.broadcast_mul(&self.att_src)?.sum(D::Minus1)?;
        let score_dst = wh.broadcast_mul(&self.att_dst)?.sum(D::Minus1)?;
        let logits = (score_dst.index_select(&graph.dst_t, 1)? + score_src.index_select(&graph.src_t, 1)?)?;
        let logits = ops::leaky_relu(&logits, GAT_NEGATIVE_SLOPE)?;

        // Per-neighbourhood maximum for a stable softmax; constant w.r.t. gradients.
        let flat = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut max = vec![f64::NEG_INFINITY; frames * n];
        for (f, row) in flat.iter().enumerate() {
            for (e, &value) in row.iter().enumerate() {
                if !value.is_finite() {
                    return Err(Error::Numeric("graph attention logits are not finite".into()));
                }
                let slot = &mut max[f * n + graph.dst[e] as usize];
                if value > *slot {
                    *slot = value;
                }
            }
        }
        let max = ops::from_f64(max, (frames, n), x.dtype())?;
        let shifted = (logits - max.index_select(&graph.dst_t, 1)?)?.exp()?;
        let denom = Tensor::zeros((frames, n), x.dtype(), x.device())?.index_add(&graph.dst_t, &shifted, 1)?;
        let alpha = (shifted / denom.index_select(&graph.dst_t, 1)?)?;

        let messages = wh.index_select(&graph.src_t, 1)?.broadcast_mul(&alpha.unsqueeze(2)?)?;
        let aggregated = Tensor::zeros((frames, n, self.out_dim()), x.dtype(), x.device())?
            .index_add(&graph.dst_t, &messages, 1)?;
        Ok((ops::leaky_relu(&aggregated, GAT_NEGATIVE_SLOPE)?, alpha))
    }
}

/// Stack of graph attention layers applied to every frame independently.
#[derive(Debug, Clone)]
pub struct GraphEncoder {
    layers: Vec<GatLayer>,
}

impl GraphEncoder {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, width: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("graph encoder needs at least one layer".into()));
        }
        let layers = (0..layers)
            .map(|i| GatLayer::new(&mut pb.pp(&format!("layer{i}")), if i == 0 { in_dim } else { width }, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<GatLayer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[GatLayer] {
        &self.layers
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    /// `vertices` is `(T, N_v, 3)` per-frame vertex features; returns
    /// `(T, N_v, D_g)`.
    pub fn encode(&self, vertices: &Tensor, graph: &GraphIndex) -> Result<Tensor> {
        let mut h = vertices.clone();
        for layer in &self.layers {
            h = layer.forward(&h, graph)?;
        }
        Ok(h)
    }
}
