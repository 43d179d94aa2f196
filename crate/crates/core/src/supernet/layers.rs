use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::{Activation, CsrMatrix, Graph, Result, Var};

/// Propagation steps of the personalised-PageRank layer.
pub const APPNP_STEPS: usize = 10;
/// Teleport probability of the personalised-PageRank layer.
pub const APPNP_ALPHA: f64 = 0.1;
/// Negative slope of the attention LeakyReLU.
pub const GAT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// `Â H W + b`
    Gcn,
    /// `[mean_{N(v)} H ∥ H] W + b`
    Sage,
    /// `Â² H W + b`
    Sgc,
    /// personalised PageRank propagation of `H W + b`
    Appnp,
    /// `MLP((1+ε) H + Σ_{N(v)} H)` with a one-hidden-layer MLP
    Gin,
    /// single-head additive attention over `N(v) ∪ {v}`
    Gat,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Gcn,
        LayerKind::Sage,
        LayerKind::Sgc,
        LayerKind::Appnp,
        LayerKind::Gin,
        LayerKind::Gat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Gcn => "gcn",
            LayerKind::Sage => "sage",
            LayerKind::Sgc => "sgc",
            LayerKind::Appnp => "appnp",
            LayerKind::Gin => "gin",
            LayerKind::Gat => "gat",
        }
    }

    pub fn from_name(name: &str) -> Option<LayerKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Parameter blocks at hidden width `h`, in flattening order.
    pub fn param_shapes(self, h: usize) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerKind::Gcn | LayerKind::Sgc | LayerKind::Appnp => {
                vec![("weight", vec![h, h]), ("bias", vec![h])]
            }
            LayerKind::Sage => vec![("weight", vec![2 * h, h]), ("bias", vec![h])],
            LayerKind::Gin => vec![
                ("weight1", vec![h, h]),
                ("bias1", vec![h]),
                ("weight2", vec![h, h]),
                ("bias2", vec![h]),
                ("eps", vec![1]),
            ],
            LayerKind::Gat => vec![
                ("weight", vec![h, h]),
                ("att_src", vec![h, 1]),
                ("att_dst", vec![h, 1]),
                ("bias", vec![h]),
            ],
        }
    }
}

/// Ordered set of layer types; codes index into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRegistry {
    kinds: Vec<LayerKind>,
}

impl Default for LayerRegistry {
    fn default() -> Self {
        Self {
            kinds: LayerKind::ALL.to_vec(),
        }
    }
}

impl LayerRegistry {
    /// Registry from unique layer-type names.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> std::result::Result<Self, String> {
        let mut kinds = Vec::with_capacity(names.len());
        for n in names {
            let kind = LayerKind::from_name(n.as_ref()).ok_or_else(|| format!("unknown layer type {:?}", n.as_ref()))?;
            if kinds.contains(&kind) {
                return Err(format!("duplicate layer type {:?}", n.as_ref()));
            }
            kinds.push(kind);
        }
        if kinds.is_empty() {
            return Err("empty layer registry".into());
        }
        Ok(Self { kinds })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn get(&self, index: usize) -> LayerKind {
        self.kinds[index]
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.kinds.iter().map(|k| k.name()).collect()
    }

    pub fn position(&self, kind: LayerKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }
}

/// Graph operators of one shard, built once and shared by every forward.
#[derive(Debug, Clone)]
pub struct Propagation {
    /// `D^{-1/2}(A+I)D^{-1/2}`
    pub sym_norm: Arc<CsrMatrix>,
    /// `D^{-1}A`
    pub mean: Arc<CsrMatrix>,
    /// `A`
    pub adjacency: Arc<CsrMatrix>,
    /// sparsity pattern of `A + I`
    pub attention: Arc<CsrMatrix>,
}

/// Applies one layer to `h`; `p` holds the layer's parameter leaves in
/// [`LayerKind::param_shapes`] order. The output goes through a ReLU.
pub fn apply_layer(kind: LayerKind, g: &mut Graph, prop: &Propagation, h: Var, p: &[Var]) -> Result<Var> {
    let out = match kind {
        LayerKind::Gcn => {
            let z = g.matmul(h, p[0])?;
            let z = g.spmm(&prop.sym_norm, z)?;
            g.add_bias(z, p[1])?
        }
        LayerKind::Sage => {
            let agg = g.spmm(&prop.mean, h)?;
            let cat = g.concat_cols(agg, h)?;
            let z = g.matmul(cat, p[0])?;
            g.add_bias(z, p[1])?
        }
        LayerKind::Sgc => {
            let z = g.matmul(h, p[0])?;
            let z = g.spmm(&prop.sym_norm, z)?;
            let z = g.spmm(&prop.sym_norm, z)?;
            g.add_bias(z, p[1])?
        }
        LayerKind::Appnp => {
            let z0 = g.matmul(h, p[0])?;
            let z0 = g.add_bias(z0, p[1])?;
            let teleport = g.scale(z0, APPNP_ALPHA)?;
            let mut z = z0;
            for _ in 0..APPNP_STEPS {
                let spread = g.spmm(&prop.sym_norm, z)?;
                let spread = g.scale(spread, 1.0 - APPNP_ALPHA)?;
                z = g.add(spread, teleport)?;
            }
            z
        }
        LayerKind::Gin => {
            let own = g.scale_by(h, p[4])?;
            let own = g.add(own, h)?;
            let nbr = g.spmm(&prop.adjacency, h)?;
            let x = g.add(own, nbr)?;
            let x = g.matmul(x, p[0])?;
            let x = g.add_bias(x, p[1])?;
            let x = g.activation(x, Activation::Relu)?;
            let x = g.matmul(x, p[2])?;
            g.add_bias(x, p[3])?
        }
        LayerKind::Gat => {
            let z = g.matmul(h, p[0])?;
            let src = g.matmul(z, p[1])?;
            let dst = g.matmul(z, p[2])?;
            let att = g.edge_attention(&prop.attention, dst, src, z, GAT_SLOPE)?;
            g.add_bias(att, p[3])?
        }
    };
    g.activation(out, Activation::Relu)
}
