//! Transformer building blocks over stacked request segments.
//!
//! Batches are laid out as one tall matrix: request `r` owns rows
//! `r*len .. (r+1)*len`. Row-wise layers act on the whole stack; attention
//! mixes rows only within each request's segment.

use rand::Rng;

use crate::autodiff::{normal, xavier_uniform, Bound, Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier_uniform(fan_in, fan_out, rng)),
            b: store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, b[self.w])?;
        g.add_row(y, b[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, d, T::one())),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, d)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b[self.gamma], b[self.beta])
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    out: Linear,
    head_dim: usize,
}

impl Attention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let hd = d / heads;
        let mut proj = |kind: &str, rng: &mut _| -> Vec<ParamId> {
            (0..heads)
                .map(|h| store.add(format!("{name}.{kind}{h}"), xavier_uniform(d, hd, rng)))
                .collect()
        };
        let q = proj("q", rng);
        let k = proj("k", rng);
        let v = proj("v", rng);
        let out = Linear::new(store, &format!("{name}.o"), d, d, rng);
        Self {
            q,
            k,
            v,
            out,
            head_dim: hd,
        }
    }

    /// Scaled dot-product attention. `queries` holds `batch` segments of
    /// `q_len` rows, `memory` the matching segments of `kv_len` rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        queries: Var,
        memory: Var,
        batch: usize,
        q_len: usize,
        kv_len: usize,
    ) -> Result<Var> {
        let scale = T::of(1.0 / (self.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.q.len());
        for h in 0..self.q.len() {
            let q = g.matmul(queries, b[self.q[h]])?;
            let k = g.matmul(memory, b[self.k[h]])?;
            let v = g.matmul(memory, b[self.v[h]])?;
            let mut parts = Vec::with_capacity(batch);
            for r in 0..batch {
                let (qr, kr, vr) = if batch == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_rows(q, r * q_len, q_len)?,
                        g.slice_rows(k, r * kv_len, kv_len)?,
                        g.slice_rows(v, r * kv_len, kv_len)?,
                    )
                };
                let s = g.matmul_nt(qr, kr)?;
                let s = g.scale(s, scale);
                let w = g.softmax_rows(s);
                parts.push(g.matmul(w, vr)?);
            }
            heads.push(if batch == 1 { parts[0] } else { g.concat_rows(&parts)? });
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.out.forward(g, b, cat)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, mult: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d * mult, rng),
            down: Linear::new(store, &format!("{name}.down"), d * mult, d, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, b, x)?;
        let h = g.relu(h);
        self.down.forward(g, b, h)
    }
}

/// Post-norm transformer block: self-attention, optional cross-attention,
/// feed-forward; each sublayer wrapped as `LN(x + f(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    self_attn: Attention,
    ln1: LayerNorm,
    cross: Option<(Attention, LayerNorm)>,
    ffn: FeedForward,
    ln2: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: BlockDims,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let BlockDims { d, heads, ffn_mult } = dims;
        let self_attn = Attention::new(store, &format!("{name}.self"), d, heads, rng);
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let cross = with_cross.then(|| {
            (
                Attention::new(store, &format!("{name}.cross"), d, heads, rng),
                LayerNorm::new(store, &format!("{name}.lnx"), d),
            )
        });
        let ffn = FeedForward::new(store, &format!("{name}.ffn"), d, ffn_mult, rng);
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
        Self {
            self_attn,
            ln1,
            cross,
            ffn,
            ln2,
        }
    }

    /// `memory` (with `mem_len` rows per request) is required iff the block
    /// was built with cross-attention.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        batch: usize,
        len: usize,
        memory: Option<(Var, usize)>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, b, x, x, batch, len, len)?;
        let h = g.add(x, a)?;
        let mut h = self.ln1.forward(g, b, h)?;
        if let (Some((attn, ln)), Some((mem, mem_len))) = (&self.cross, memory) {
            let c = attn.forward(g, b, h, mem, batch, len, mem_len)?;
            let s = g.add(h, c)?;
            h = ln.forward(g, b, s)?;
        }
        let f = self.ffn.forward(g, b, h)?;
        let s = g.add(h, f)?;
        self.ln2.forward(g, b, s)
    }
}

/// Learned table of `rows x d` embeddings, `N(0, std)` initialised.
pub fn embedding<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    d: usize,
    std: f64,
    rng: &mut impl Rng,
) -> ParamId {
    store.add(name, normal(rows, d, std, rng))
}

/// Repeat `x` vertically `times` times.
pub fn tile_rows<T: Real>(g: &mut Graph<T>, x: Var, times: usize) -> Result<Var> {
    if times == 1 {
        return Ok(x);
    }
    g.concat_rows(&vec![x; times])
}
