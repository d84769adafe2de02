use rand::Rng;

use super::{INIT_STD, LN_EPS};
use crate::tensor::{AttentionShape, Graph, Init, ParamId, ParamStore, Result, Scalar, Var};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add_init(
                format!("{name}.weight"),
                &[input, output],
                Init::TruncNormal(INIT_STD),
                true,
                rng,
            )?,
            bias: store.add_init(format!("{name}.bias"), &[output], Init::Zeros, false, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Norm {
            gamma: store.add_init(format!("{name}.gamma"), &[dim], Init::Ones, false, rng)?,
            beta: store.add_init(format!("{name}.beta"), &[dim], Init::Zeros, false, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        memory: Var,
        batch: usize,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let shape = AttentionShape {
            batch,
            q_len: g.rows(queries) / batch,
            kv_len: g.rows(memory) / batch,
            heads: self.heads,
        };
        let a = g.attention(q, k, v, shape)?;
        self.out.forward(g, store, a)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    mlp: Mlp,
    dim: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim, rng)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dim, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng)?,
            dim,
        })
    }

    /// Output projections of the attention and MLP branches; zeroing them
    /// reduces the block to the identity.
    pub fn branch_outputs(&self) -> [ParamId; 4] {
        [
            self.attn.out.weight,
            self.attn.out.bias,
            self.mlp.fc2.weight,
            self.mlp.fc2.bias,
        ]
    }

    /// `x` holds `batch` sequences of equal length stacked as rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, batch: usize) -> Result<Var> {
        if g.cols(x) != self.dim {
            return Err(crate::tensor::TensorError::Shape {
                op: "transformer_block",
                detail: format!("token width {} for block width {}", g.cols(x), self.dim),
            });
        }
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, batch)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// Decoder block that also attends from the query sequence into a memory
/// sequence: self-attention, cross-attention, then MLP, each pre-norm with a
/// residual connection.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    mlp: Mlp,
}

impl CrossBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CrossBlock {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim, rng)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dim, rng)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm3: Norm::new(store, &format!("{name}.norm3"), dim, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        batch: usize,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, batch)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, h, memory, batch)?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}
