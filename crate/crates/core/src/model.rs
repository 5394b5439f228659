//! The generator: candidate encoder, vertex decoder, transition and emission heads.

use std::path::Path;
use std::rc::Rc;

use crate::autodiff::{checkpoint, xavier_uniform, Bound, Graph, ParamId, ParamStore, Var};
use crate::data::RerankRequest;
use crate::error::{Error, Result};
use crate::nn::{embedding, tile_rows, Block, BlockDims, Linear};
use crate::rng::{stream, Stream};
use crate::tensor::{Matrix, Real};

pub const CHECKPOINT_PREFIX: &str = "generator.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecoderKind {
    /// `lambda * m` vertices joined by a learned transition matrix.
    #[default]
    Graph,
    /// One vertex per slot, no transitions (`lambda` must be 1).
    Vanilla,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub lambda: usize,
    pub n: usize,
    pub m: usize,
    pub d_u: usize,
    pub d_x: usize,
    pub kind: DecoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            blocks: 2,
            heads: 2,
            ffn_mult: 4,
            lambda: 4,
            n: 20,
            m: 4,
            d_u: 8,
            d_x: 16,
            kind: DecoderKind::Graph,
        }
    }
}

impl ModelConfig {
    /// Vertex count.
    pub fn g(&self) -> usize {
        self.lambda * self.m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d ({}) must be a positive multiple of heads ({})",
                self.d, self.heads
            ));
        }
        if self.blocks == 0 || self.ffn_mult == 0 {
            return bad("blocks and ffn_mult must be >= 1".into());
        }
        if self.lambda == 0 {
            return bad("lambda must be >= 1".into());
        }
        if self.kind == DecoderKind::Vanilla && self.lambda != 1 {
            return bad(format!("vanilla decoder requires lambda = 1, got {}", self.lambda));
        }
        if self.m < 2 && self.kind == DecoderKind::Graph {
            return bad(format!("m must be >= 2 for the graph decoder, got {}", self.m));
        }
        if self.m == 0 || self.m > self.n {
            return bad(format!("m ({}) must be in 1..=n ({})", self.m, self.n));
        }
        if self.d_u == 0 || self.d_x == 0 {
            return bad("feature widths must be positive".into());
        }
        Ok(())
    }
}

/// Vertex-to-vertex transition probabilities, stored as logs (`g x g`).
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    log: Matrix<f64>,
}

impl TransitionMatrix {
    pub fn from_log(log: Matrix<f64>) -> Self {
        assert_eq!(log.rows(), log.cols(), "transition matrix must be square");
        Self { log }
    }

    /// Build from probabilities; zeros become `-inf`.
    pub fn from_probs(p: &Matrix<f64>) -> Self {
        Self::from_log(p.map(f64::ln))
    }

    /// Chain graph: vertex `i` always moves to `i + 1`.
    pub fn chain(g: usize) -> Self {
        Self::from_log(Matrix::from_fn(
            g,
            g,
            |i, j| if j == i + 1 { 0.0 } else { f64::NEG_INFINITY },
        ))
    }

    pub fn g(&self) -> usize {
        self.log.rows()
    }

    pub fn log(&self, from: usize, to: usize) -> f64 {
        self.log.get(from, to)
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.log.get(from, to).exp()
    }

    pub fn log_matrix(&self) -> &Matrix<f64> {
        &self.log
    }

    pub fn probs(&self) -> Matrix<f64> {
        self.log.map(f64::exp)
    }
}

/// Per-vertex candidate distributions. Stored transposed (`g x n`, log) so a
/// vertex's distribution is one contiguous row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionMatrix {
    log_t: Matrix<f64>,
}

impl EmissionMatrix {
    /// From `g x n` log-probabilities (row = vertex).
    pub fn from_log_t(log_t: Matrix<f64>) -> Self {
        Self { log_t }
    }

    /// From an `n x g` probability matrix (column = vertex).
    pub fn from_probs(p: &Matrix<f64>) -> Self {
        Self {
            log_t: p.transpose().map(f64::ln),
        }
    }

    pub fn n(&self) -> usize {
        self.log_t.cols()
    }

    pub fn g(&self) -> usize {
        self.log_t.rows()
    }

    pub fn log(&self, candidate: usize, vertex: usize) -> f64 {
        self.log_t.get(vertex, candidate)
    }

    pub fn prob(&self, candidate: usize, vertex: usize) -> f64 {
        self.log(candidate, vertex).exp()
    }

    /// Log-distribution over candidates at `vertex`.
    pub fn vertex_log(&self, vertex: usize) -> &[f64] {
        self.log_t.row(vertex)
    }

    pub fn log_t(&self) -> &Matrix<f64> {
        &self.log_t
    }

    /// `n x g` probabilities.
    pub fn probs(&self) -> Matrix<f64> {
        self.log_t.transpose().map(f64::exp)
    }
}

/// Graph handles produced for one request.
#[derive(Clone, Copy, Debug)]
pub struct GenOutput {
    /// `g x g` log-transitions; `None` for the vanilla decoder.
    pub log_e: Option<Var>,
    /// `g x n` log-emissions, row = vertex.
    pub log_p_t: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inferred {
    pub transition: Option<TransitionMatrix>,
    pub emission: EmissionMatrix,
}

impl Inferred {
    /// Transitions to decode with; the vanilla decoder walks a chain.
    pub fn transition_or_chain(&self) -> TransitionMatrix {
        self.transition
            .clone()
            .unwrap_or_else(|| TransitionMatrix::chain(self.emission.g()))
    }
}

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    encoder: Vec<Block>,
    vertices: ParamId,
    decoder: Vec<Block>,
    /// Query / key projections of the transition head.
    trans: Option<(ParamId, ParamId)>,
}

pub struct Generator<T: Real> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    layout: Layout,
}

/// Row `i` of the result is `[x_i, u]` for each candidate of each request.
pub fn stack_features<T: Real>(reqs: &[&RerankRequest]) -> Matrix<T> {
    let rows: Vec<Vec<T>> = reqs
        .iter()
        .flat_map(|r| {
            r.candidates
                .iter()
                .map(|c| c.x.iter().chain(&r.user).map(|&v| T::of(v)).collect::<Vec<T>>())
        })
        .collect();
    if rows.is_empty() {
        return Matrix::zeros(0, 0);
    }
    Matrix::from_rows(&rows)
}

/// `true` where a transition is disallowed (`to <= from`).
pub fn transition_mask(g: usize) -> Rc<[bool]> {
    (0..g * g).map(|k| k % g <= k / g).collect::<Vec<_>>().into()
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let dims = BlockDims {
            d: cfg.d,
            heads: cfg.heads,
            ffn_mult: cfg.ffn_mult,
        };
        let input = Linear::new(&mut store, "enc.in", cfg.d_x + cfg.d_u, cfg.d, &mut rng);
        let encoder = (0..cfg.blocks)
            .map(|l| Block::new(&mut store, &format!("enc.{l}"), dims, false, &mut rng))
            .collect();
        let vertices = embedding(&mut store, "dec.vertices", cfg.g(), cfg.d, 0.02, &mut rng);
        let decoder = (0..cfg.blocks)
            .map(|l| Block::new(&mut store, &format!("dec.{l}"), dims, true, &mut rng))
            .collect();
        let trans = (cfg.kind == DecoderKind::Graph).then(|| {
            let q = store.add("trans.q", xavier_uniform(cfg.d, cfg.d, &mut rng));
            let k = store.add("trans.k", xavier_uniform(cfg.d, cfg.d, &mut rng));
            (q, k)
        });
        Ok(Self {
            cfg,
            store,
            layout: Layout {
                input,
                encoder,
                vertices,
                decoder,
                trans,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn check_request(&self, r: &RerankRequest) -> Result<()> {
        r.validate(self.cfg.n, self.cfg.d_u, self.cfg.d_x)
    }

    /// Candidate states `H_c`, stacked `(batch*n) x d`.
    pub fn encode(&self, g: &mut Graph<T>, b: &Bound, features: Var, batch: usize) -> Result<Var> {
        let mut h = self.layout.input.forward(g, b, features)?;
        for block in &self.layout.encoder {
            h = block.forward(g, b, h, batch, self.cfg.n, None)?;
        }
        Ok(h)
    }

    /// Vertex states `H_v`, stacked `(batch*g) x d`.
    pub fn decode_vertices(&self, g: &mut Graph<T>, b: &Bound, h_c: Var, batch: usize) -> Result<Var> {
        let mut h = tile_rows(g, b[self.layout.vertices], batch)?;
        for block in &self.layout.decoder {
            h = block.forward(g, b, h, batch, self.cfg.g(), Some((h_c, self.cfg.n)))?;
        }
        Ok(h)
    }

    /// Per-request masked, row-normalised log transitions.
    pub fn transition_logs(&self, g: &mut Graph<T>, b: &Bound, h_v: Var, batch: usize) -> Result<Option<Vec<Var>>> {
        let Some((wq, wk)) = self.layout.trans else {
            return Ok(None);
        };
        let gv = self.cfg.g();
        let q = g.matmul(h_v, b[wq])?;
        let k = g.matmul(h_v, b[wk])?;
        let mask = transition_mask(gv);
        let scale = T::of(1.0 / (self.cfg.d as f64).sqrt());
        let mut out = Vec::with_capacity(batch);
        for r in 0..batch {
            let qr = g.slice_rows(q, r * gv, gv)?;
            let kr = g.slice_rows(k, r * gv, gv)?;
            let s = g.matmul_nt(qr, kr)?;
            let s = g.scale(s, scale);
            let s = g.masked_fill(s, mask.clone(), T::neg_infinity())?;
            out.push(g.log_softmax_rows(s));
        }
        Ok(Some(out))
    }

    /// Per-request `g x n` log-emissions (softmax over candidates per vertex).
    pub fn emission_logs(&self, g: &mut Graph<T>, h_c: Var, h_v: Var, batch: usize) -> Result<Vec<Var>> {
        let (n, gv) = (self.cfg.n, self.cfg.g());
        let mut out = Vec::with_capacity(batch);
        for r in 0..batch {
            let hv = g.slice_rows(h_v, r * gv, gv)?;
            let hc = g.slice_rows(h_c, r * n, n)?;
            let s = g.matmul_nt(hv, hc)?;
            out.push(g.log_softmax_rows(s));
        }
        Ok(out)
    }

    /// Full forward pass over a batch of requests.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, reqs: &[&RerankRequest]) -> Result<Vec<GenOutput>> {
        for r in reqs {
            self.check_request(r)?;
        }
        if reqs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = reqs.len();
        let x = g.constant(stack_features(reqs));
        let h_c = self.encode(g, b, x, batch)?;
        let h_v = self.decode_vertices(g, b, h_c, batch)?;
        let trans = self.transition_logs(g, b, h_v, batch)?;
        let emis = self.emission_logs(g, h_c, h_v, batch)?;
        Ok(emis
            .into_iter()
            .enumerate()
            .map(|(r, log_p_t)| GenOutput {
                log_e: trans.as_ref().map(|t| t[r]),
                log_p_t,
            })
            .collect())
    }

    /// Inference-only forward pass, results in 64-bit.
    pub fn infer(&self, reqs: &[&RerankRequest]) -> Result<Vec<Inferred>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let outs = self.forward(&mut g, &b, reqs)?;
        Ok(outs
            .into_iter()
            .map(|o| Inferred {
                transition: o.log_e.map(|v| TransitionMatrix::from_log(g.value(v).cast())),
                emission: EmissionMatrix::from_log_t(g.value(o.log_p_t).cast()),
            })
            .collect())
    }

    pub fn export(&self) -> Vec<(String, Matrix<f64>)> {
        self.store.export(CHECKPOINT_PREFIX)
    }

    pub fn import(&mut self, entries: &[(String, Matrix<f64>)]) -> Result<()> {
        self.store.import(CHECKPOINT_PREFIX, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.export())
    }

    pub fn load(cfg: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.import(&checkpoint::load(path)?)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Candidate, SynthConfig};

    fn tiny(kind: DecoderKind, lambda: usize, n: usize, m: usize) -> ModelConfig {
        ModelConfig {
            d: 8,
            blocks: 2,
            heads: 2,
            ffn_mult: 2,
            lambda,
            n,
            m,
            d_u: 2,
            d_x: 3,
            kind,
        }
    }

    fn requests(n: usize, m: usize, count: usize, seed: u64) -> Vec<RerankRequest> {
        let cfg = SynthConfig {
            num_requests: count,
            catalog_size: 40,
            n,
            m,
            d_u: 2,
            d_x: 3,
            seed,
            ..Default::default()
        };
        generate_synthetic(&cfg)
            .unwrap()
            .records
            .into_iter()
            .map(|r| r.request)
            .collect()
    }

    fn assert_invariants(inf: &Inferred) {
        let em = inf.emission.probs();
        for v in 0..em.cols() {
            let s: f64 = em.column(v).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "emission column {v} sums to {s}");
        }
        if let Some(t) = &inf.transition {
            let e = t.probs();
            let g = e.rows();
            for i in 0..g {
                for j in 0..=i {
                    assert_eq!(e.get(i, j), 0.0);
                }
                if i + 1 < g {
                    let s: f64 = e.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
                }
            }
            assert!(e.row(g - 1).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn forward_invariants_hold_in_both_precisions() {
        let reqs = requests(5, 3, 4, 1);
        let refs: Vec<&RerankRequest> = reqs.iter().collect();
        let m64 = Generator::<f64>::new(tiny(DecoderKind::Graph, 2, 5, 3), 3).unwrap();
        let m32 = Generator::<f32>::new(tiny(DecoderKind::Graph, 2, 5, 3), 3).unwrap();
        for inf in m64.infer(&refs).unwrap().iter().chain(&m32.infer(&refs).unwrap()) {
            assert_eq!(inf.emission.g(), 6);
            assert_eq!(inf.emission.n(), 5);
            assert_invariants(inf);
        }
        let van = Generator::<f64>::new(tiny(DecoderKind::Vanilla, 1, 5, 3), 3).unwrap();
        let inf = van.infer(&refs).unwrap();
        assert!(inf[0].transition.is_none());
        assert_invariants(&inf[0]);
    }

    #[test]
    fn batched_forward_matches_single_requests() {
        let reqs = requests(4, 2, 3, 2);
        let model = Generator::<f64>::new(tiny(DecoderKind::Graph, 3, 4, 2), 5).unwrap();
        let all = model.infer(&reqs.iter().collect::<Vec<_>>()).unwrap();
        for (r, inf) in reqs.iter().zip(&all) {
            let one = &model.infer(&[r]).unwrap()[0];
            let a = inf.emission.log_t();
            let b = one.emission.log_t();
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let req = requests(5, 2, 1, 3).remove(0);
        let cfg = tiny(DecoderKind::Graph, 2, 5, 2);
        let model = Generator::<f64>::new(cfg.clone(), 9).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let mut shuffled = req.clone();
        shuffled.candidates = perm.iter().map(|&i| req.candidates[i].clone()).collect();
        let enc = |r: &RerankRequest| {
            let mut g = Graph::new();
            let b = model.params().bind(&mut g, false);
            let x = g.constant(stack_features(&[r]));
            let h = model.encode(&mut g, &b, x, 1).unwrap();
            g.value(h).clone()
        };
        let (h, hp) = (enc(&req), enc(&shuffled));
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..cfg.d {
                assert!((hp.get(row, c) - h.get(src, c)).abs() < 1e-5);
            }
        }
        let (a, b) = (
            &model.infer(&[&req]).unwrap()[0],
            &model.infer(&[&shuffled]).unwrap()[0],
        );
        for (row, &src) in perm.iter().enumerate() {
            for v in 0..4 {
                assert!((b.emission.log(row, v) - a.emission.log(src, v)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_candidates_get_identical_rows() {
        let mut req = requests(3, 2, 1, 4).remove(0);
        req.candidates[1] = Candidate {
            id: 999,
            x: req.candidates[0].x.clone(),
        };
        let model = Generator::<f64>::new(tiny(DecoderKind::Graph, 2, 3, 2), 1).unwrap();
        let inf = &model.infer(&[&req]).unwrap()[0];
        for v in 0..4 {
            assert!((inf.emission.log(0, v) - inf.emission.log(1, v)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_candidate_attention_passes_values_through() {
        let req = requests(1, 1, 1, 5).remove(0);
        let cfg = ModelConfig {
            heads: 1,
            blocks: 1,
            ..tiny(DecoderKind::Vanilla, 1, 1, 1)
        };
        let model = Generator::<f64>::new(cfg.clone(), 2).unwrap();
        let s = model.params();
        let p = |name: &str| s.get(s.find(name).unwrap()).value.clone();
        let x = stack_features::<f64>(&[&req]);
        let add =
            |a: &Matrix<f64>, b: &Matrix<f64>| Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b.get(i, j));
        let ln = |a: &Matrix<f64>| {
            let mu = a.sum() / a.len() as f64;
            let var = a.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / a.len() as f64;
            a.map(|v| (v - mu) / (var + 1e-5).sqrt())
        };
        let lin = |a: &Matrix<f64>, w: &str| add(&a.matmul(&p(&format!("{w}.w"))).unwrap(), &p(&format!("{w}.b")));
        let h0 = lin(&x, "enc.in");
        // A lone token attends to itself with weight 1: the sublayer is V·Wo + bo.
        let attn = lin(&h0.matmul(&p("enc.0.self.v0")).unwrap(), "enc.0.self.o");
        let h1 = ln(&add(&h0, &attn));
        let up = lin(&h1, "enc.0.ffn.up").map(|v| v.max(0.0));
        let h2 = ln(&add(&h1, &lin(&up, "enc.0.ffn.down")));

        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let xv = g.constant(x);
        let out = model.encode(&mut g, &b, xv, 1).unwrap();
        assert!(g
            .value(out)
            .data()
            .iter()
            .zip(h2.data())
            .all(|(a, e)| (a - e).abs() < 1e-12));
        let inf = &model.infer(&[&req]).unwrap()[0];
        assert_eq!(inf.emission.prob(0, 0), 1.0);
    }

    #[test]
    fn forward_size_does_not_depend_on_slate_length() {
        let count = |m: usize| {
            let cfg = tiny(DecoderKind::Graph, 2, 6, m);
            let model = Generator::<f64>::new(cfg, 0).unwrap();
            let reqs = requests(6, m, 2, 1);
            let mut g = Graph::new();
            let b = model.params().bind(&mut g, false);
            model.forward(&mut g, &b, &reqs.iter().collect::<Vec<_>>()).unwrap();
            g.len()
        };
        assert_eq!(count(2), count(5));
    }

    #[test]
    fn two_vertex_graph_forces_its_only_transition() {
        let req = requests(3, 2, 1, 8).remove(0);
        let model = Generator::<f64>::new(tiny(DecoderKind::Graph, 1, 3, 2), 4).unwrap();
        let t = model.infer(&[&req]).unwrap()[0].transition.clone().unwrap();
        assert_eq!(t.prob(0, 1), 1.0);
        assert_eq!(t.prob(1, 0), 0.0);
    }

    #[test]
    fn equal_logits_split_evenly() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Matrix::zeros(3, 3));
        let s = g.masked_fill(s, transition_mask(3), f64::NEG_INFINITY).unwrap();
        let e = g.softmax_rows(s);
        assert_eq!(g.value(e).row(0), &[0.0, 0.5, 0.5]);
        assert_eq!(g.value(e).row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_memory_cross_attention_yields_mean_value_row() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(1, Stream::Init);
        let attn = crate::nn::Attention::new(&mut store, "x", 4, 1, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.starts_with("x.o") {
                continue;
            }
            store.value_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let q = g.constant(Matrix::from_fn(3, 4, |i, j| (i + j) as f64));
        let mem = g.constant(Matrix::zeros(5, 4));
        let out = attn.forward(&mut g, &b, q, mem, 1, 3, 5).unwrap();
        let bias = store.get(store.find("x.o.b").unwrap()).value.clone();
        for r in 0..3 {
            assert_eq!(g.value(out).row(r), bias.row(0));
        }
    }

    #[test]
    fn rejects_wrong_candidate_count_and_bad_config() {
        let req = requests(4, 2, 1, 1).remove(0);
        let model = Generator::<f64>::new(tiny(DecoderKind::Graph, 2, 5, 2), 0).unwrap();
        assert!(matches!(model.infer(&[&req]), Err(Error::Request { .. })));
        assert!(Generator::<f64>::new(tiny(DecoderKind::Vanilla, 2, 5, 2), 0).is_err());
        assert!(Generator::<f64>::new(
            ModelConfig {
                d: 9,
                ..tiny(DecoderKind::Graph, 2, 5, 2)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_shape_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let cfg = tiny(DecoderKind::Graph, 2, 4, 2);
        let model = Generator::<f32>::new(cfg.clone(), 7).unwrap();
        model.save(&path).unwrap();
        let back = Generator::<f32>::load(cfg.clone(), &path).unwrap();
        assert_eq!(back.export(), model.export());
        let err = Generator::<f32>::load(ModelConfig { d: 4, ..cfg }, &path)
            .err()
            .unwrap();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }
}
