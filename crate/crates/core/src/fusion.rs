//! Image and text encoders and spatial attention fusion.

use crate::bayes::{dropout, BayesLstm, ConvStack, DropoutSchedule};
use crate::data::vocab::{PAD, UNK};
use crate::error::{Error, Result};
use crate::tensor::nn::{glorot, Linear};
use crate::tensor::{Along, Binary, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

/// Word-embedding table shared by every text consumer.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let t = rng.normal_tensor(&[vocab, dim]).map(|v| 0.3 * v);
        Embedding {
            table: store.add(format!("{name}.table"), t),
            vocab,
            dim,
        }
    }

    /// `[ids.len(), dim]`; ids outside the vocabulary read the UNK row.
    pub fn lookup(&self, t: &mut Tape, ids: &[usize]) -> Result<Var> {
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| if i < self.vocab { i } else { UNK })
            .collect();
        let table = t.p(self.table);
        t.embedding(table, &ids)
    }

    /// Mean word vector of each sequence, `[seqs.len(), dim]`. PAD tokens
    /// are skipped; an all-PAD sequence gives a zero row.
    pub fn bag_of_words(&self, t: &mut Tape, seqs: &[Vec<usize>]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::Usage("no sequences to embed".into()));
        }
        let mut weights = vec![0.0; seqs.len() * self.vocab];
        for (r, s) in seqs.iter().enumerate() {
            let toks: Vec<usize> = s
                .iter()
                .filter(|&&i| i != PAD)
                .map(|&i| if i < self.vocab { i } else { UNK })
                .collect();
            for &i in &toks {
                weights[r * self.vocab + i] += 1.0 / toks.len() as f64;
            }
        }
        let w = t.constant(Tensor::new(vec![seqs.len(), self.vocab], weights)?);
        let table = t.p(self.table);
        t.matmul(w, table)
    }
}

/// Bayesian LSTM over word embeddings; the encoding is the last hidden state.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    pub lstm: BayesLstm,
    pub p_output: f64,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        emb: &Embedding,
        hidden: usize,
        schedule: &DropoutSchedule,
        rng: &mut RngStream,
    ) -> Self {
        TextEncoder {
            lstm: BayesLstm::new(store, name, emb.dim, hidden, schedule, rng),
            p_output: schedule.lstm_output,
        }
    }

    pub fn dim(&self) -> usize {
        self.lstm.params.hidden
    }
}

/// `[c, u, v]` region features of one stochastic pass through `cnn`.
pub fn encode_image(t: &mut Tape, cnn: &ConvStack, image: &Tensor) -> Result<Var> {
    let x = t.constant(image.clone());
    cnn.forward(t, x)
}

/// `[1, d]` encoding of `tokens`.
pub fn encode_text(
    t: &mut Tape,
    emb: &Embedding,
    enc: &TextEncoder,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::shape("text encoder needs at least one token"));
    }
    let rows = emb.lookup(t, tokens)?;
    let xs: Vec<Var> = (0..tokens.len())
        .map(|i| t.slice(rows, 0, i, 1))
        .collect::<Result<_>>()?;
    let run = enc.lstm.run(t, &xs, None)?;
    Ok(dropout(t, run.last(), enc.p_output)?.0)
}

/// Gated history recursion
/// `h' = prev + sigmoid(W_g [q‖a‖prev] + b_g) ⊙ tanh(W_p [q‖a] + b_p)`.
///
/// With zero projection weights and bias the candidate is `tanh(0) = 0`,
/// so the history is carried over unchanged.
#[derive(Debug, Clone, Copy)]
pub struct HistoryUpdate {
    pub proj: Linear,
    pub gate: Linear,
    pub dim: usize,
}

impl HistoryUpdate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RngStream) -> Self {
        HistoryUpdate {
            proj: Linear::new(store, &format!("{name}.proj"), 2 * dim, dim, rng),
            gate: Linear::new(store, &format!("{name}.gate"), 3 * dim, dim, rng),
            dim,
        }
    }
}

pub fn update_history(t: &mut Tape, upd: &HistoryUpdate, prev: Var, q: Var, a: Var) -> Result<Var> {
    for v in [prev, q, a] {
        if t.shape(v) != [1, upd.dim] {
            return Err(Error::shape(format!(
                "history update expects [1, {}], got {:?}",
                upd.dim,
                t.shape(v)
            )));
        }
    }
    let qa = t.concat(&[q, a], 1)?;
    let cand = upd.proj.forward(t, qa)?;
    let cand = t.tanh(cand);
    let qap = t.concat(&[q, a, prev], 1)?;
    let gate = upd.gate.forward(t, qap)?;
    let gate = t.sigmoid(gate);
    let step = t.mul(gate, cand)?;
    t.add(prev, step)
}

/// Attention weights `W_c: [c, k]`, `W_q: [2d, k]`, `b_c: [k]`,
/// `W_a: [k, 1]`, `b_a: [1]`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub w_c: ParamId,
    pub w_q: ParamId,
    pub b_c: ParamId,
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub channels: usize,
    pub text_dim: usize,
    pub hidden: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        text_dim: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Self {
        Attention {
            w_c: store.add(
                format!("{name}.w_c"),
                glorot(rng, &[channels, hidden], channels, hidden),
            ),
            w_q: store.add(
                format!("{name}.w_q"),
                glorot(rng, &[2 * text_dim, hidden], 2 * text_dim, hidden),
            ),
            b_c: store.add(format!("{name}.b_c"), Tensor::zeros(&[hidden])),
            w_a: store.add(format!("{name}.w_a"), glorot(rng, &[hidden, 1], hidden, 1)),
            b_a: store.add(format!("{name}.b_a"), Tensor::zeros(&[1])),
            channels,
            text_dim,
            hidden,
        }
    }
}

/// Output of [`attend_fuse`].
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    /// attended feature `[1, c]`
    pub f: Var,
    /// attention over the `u·v` cells, `[u·v]`
    pub alpha: Var,
    /// region features flattened to `[c, u·v]`
    pub grid: Var,
    pub u: usize,
    pub v: usize,
}

/// `Σ_cells grid[:, cell] · weights[cell]` as `[1, c]`.
pub fn pool_cells(t: &mut Tape, grid: Var, weights: Var) -> Result<Var> {
    let n = t.value(weights).numel();
    let col = t.reshape(weights, &[n, 1])?;
    let f = t.matmul(grid, col)?;
    let c = t.shape(f)[0];
    t.reshape(f, &[1, c])
}

/// Scores each cell with `tanh(g W_c + (q‖h) W_q + b_c) W_a + b_a`, takes a
/// softmax over cells, and pools the region features with it.
pub fn attend_fuse(t: &mut Tape, att: &Attention, grid: Var, q: Var, h: Var) -> Result<Fused> {
    let s = t.shape(grid).to_vec();
    if s.len() != 3 || s[0] != att.channels {
        return Err(Error::shape(format!(
            "attention expects a [{}, u, v] grid, got {s:?}",
            att.channels
        )));
    }
    let (c, u, v) = (s[0], s[1], s[2]);
    let flat = t.reshape(grid, &[c, u * v])?;
    let cells = t.transpose(flat)?;
    let w_c = t.p(att.w_c);
    let gw = t.matmul(cells, w_c)?;
    let qh = t.concat(&[q, h], 1)?;
    let w_q = t.p(att.w_q);
    let qw = t.matmul(qh, w_q)?;
    let qw = t.reshape(qw, &[att.hidden])?;
    let pre = t.broadcast(Binary::Add, gw, qw, Along::Rows)?;
    let b_c = t.p(att.b_c);
    let pre = t.broadcast(Binary::Add, pre, b_c, Along::Rows)?;
    let g_a = t.tanh(pre);
    let w_a = t.p(att.w_a);
    let scores = t.matmul(g_a, w_a)?;
    let b_a = t.p(att.b_a);
    let scores = t.add(scores, b_a)?;
    let scores = t.reshape(scores, &[u * v])?;
    let alpha = t.softmax(scores, 0)?;
    let f = pool_cells(t, flat, alpha)?;
    Ok(Fused {
        f,
        alpha,
        grid: flat,
        u,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_param_gradients;

    fn store_att(c: usize, d: usize, k: usize, seed: u64) -> (ParamStore, Attention) {
        let mut s = ParamStore::new();
        let mut rng = RngStream::new(seed);
        let a = Attention::new(&mut s, "att", c, d, k, &mut rng);
        (s, a)
    }

    #[test]
    fn constant_scores_give_uniform_alpha() {
        let (mut s, a) = store_att(3, 2, 4, 1);
        *s.get_mut(a.w_c) = Tensor::zeros(&[3, 4]);
        let mut rng = RngStream::new(2);
        let mut t = Tape::new(&s, RngStream::new(0), false);
        let g = t.constant(rng.normal_tensor(&[3, 2, 3]));
        let q = t.constant(rng.normal_tensor(&[1, 2]));
        let h = t.constant(rng.normal_tensor(&[1, 2]));
        let out = attend_fuse(&mut t, &a, g, q, h).unwrap();
        for &p in t.value(out.alpha).data() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_cell_grid() {
        let (s, a) = store_att(3, 2, 4, 3);
        let mut t = Tape::new(&s, RngStream::new(0), false);
        let g = t.constant(Tensor::new(vec![3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let q = t.constant(Tensor::ones(&[1, 2]));
        let h = t.constant(Tensor::ones(&[1, 2]));
        let out = attend_fuse(&mut t, &a, g, q, h).unwrap();
        assert_eq!(t.value(out.alpha).data(), &[1.0]);
        assert_eq!(t.value(out.f).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn two_cell_hand_formula() {
        let (mut s, a) = store_att(2, 1, 1, 4);
        *s.get_mut(a.w_c) = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        *s.get_mut(a.w_q) = Tensor::new(vec![2, 1], vec![0.5, 0.25]).unwrap();
        *s.get_mut(a.b_c) = Tensor::vector(vec![0.1]);
        *s.get_mut(a.w_a) = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        *s.get_mut(a.b_a) = Tensor::vector(vec![-0.3]);
        // cells g1 = (1, 2), g2 = (3, -1)
        let grid = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 2.0, -1.0]).unwrap();
        let (q, h) = (0.4, -0.8);
        let mut t = Tape::new(&s, RngStream::new(0), false);
        let gv = t.constant(grid);
        let qv = t.constant(Tensor::new(vec![1, 1], vec![q]).unwrap());
        let hv = t.constant(Tensor::new(vec![1, 1], vec![h]).unwrap());
        let out = attend_fuse(&mut t, &a, gv, qv, hv).unwrap();

        let score = |g: [f64; 2]| 2.0 * (g[0] - g[1] + 0.5 * q + 0.25 * h + 0.1).tanh() - 0.3;
        let (s1, s2) = (score([1.0, 2.0]), score([3.0, -1.0]));
        let z = s1.exp() + s2.exp();
        let (a1, a2) = (s1.exp() / z, s2.exp() / z);
        let f = [a1 * 1.0 + a2 * 3.0, a1 * 2.0 + a2 * -1.0];
        let got = t.value(out.f).data();
        assert!((got[0] - f[0]).abs() < 1e-12 && (got[1] - f[1]).abs() < 1e-12);
        let al = t.value(out.alpha).data();
        assert!((al[0] - a1).abs() < 1e-12 && (al[1] - a2).abs() < 1e-12);
    }

    #[test]
    fn attention_gradient() {
        let (s, a) = store_att(3, 2, 4, 5);
        let mut rng = RngStream::new(6);
        let grid = rng.normal_tensor(&[3, 2, 2]);
        let q = rng.normal_tensor(&[1, 2]);
        let h = rng.normal_tensor(&[1, 2]);
        let err = check_param_gradients(&s, 0, |t| {
            let g = t.constant(grid.clone());
            let qv = t.constant(q.clone());
            let hv = t.constant(h.clone());
            let out = attend_fuse(t, &a, g, qv, hv)?;
            let sq = t.square(out.f);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_projection_keeps_history() {
        let mut s = ParamStore::new();
        let mut rng = RngStream::new(7);
        let upd = HistoryUpdate::new(&mut s, "hist", 3, &mut rng);
        *s.get_mut(upd.proj.w) = Tensor::zeros(&[6, 3]);
        let mut t = Tape::new(&s, RngStream::new(0), false);
        let prev = t.constant(rng.normal_tensor(&[1, 3]));
        let q = t.constant(rng.normal_tensor(&[1, 3]));
        let a = t.constant(rng.normal_tensor(&[1, 3]));
        let h = update_history(&mut t, &upd, prev, q, a).unwrap();
        assert_eq!(t.value(h), t.value(prev));
    }

    #[test]
    fn history_two_rounds_gradient() {
        let mut s = ParamStore::new();
        let mut rng = RngStream::new(8);
        let upd = HistoryUpdate::new(&mut s, "hist", 2, &mut rng);
        let xs: Vec<Tensor> = (0..5).map(|_| rng.normal_tensor(&[1, 2])).collect();
        let err = check_param_gradients(&s, 0, |t| {
            let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let h1 = update_history(t, &upd, v[0], v[1], v[2])?;
            let h2 = update_history(t, &upd, h1, v[3], v[4])?;
            let sq = t.square(h2);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn text_encoder_base_case_and_zero_weights() {
        let mut s = ParamStore::new();
        let mut rng = RngStream::new(9);
        let emb = Embedding::new(&mut s, "emb", 10, 3, &mut rng);
        let enc = TextEncoder::new(&mut s, "q", &emb, 4, &DropoutSchedule::none(), &mut rng);
        let mut t = Tape::new(&s, RngStream::new(0), true);
        let e = encode_text(&mut t, &emb, &enc, &[5]).unwrap();
        let x = emb.lookup(&mut t, &[5]).unwrap();
        let h0 = t.constant(Tensor::zeros(&[1, 4]));
        let c0 = t.constant(Tensor::zeros(&[1, 4]));
        let (w, b) = (t.p(enc.lstm.params.w), t.p(enc.lstm.params.b));
        let (h1, _) = crate::tensor::nn::lstm_cell(&mut t, x, h0, c0, w, b).unwrap();
        assert_eq!(t.value(e), t.value(h1));
        // out-of-vocabulary ids read the UNK row
        let oov = emb.lookup(&mut t, &[99]).unwrap();
        let unk = emb.lookup(&mut t, &[UNK]).unwrap();
        assert_eq!(t.value(oov), t.value(unk));

        *s.get_mut(enc.lstm.params.w) = Tensor::zeros(&[7, 16]);
        *s.get_mut(enc.lstm.params.b) = Tensor::zeros(&[16]);
        let mut t = Tape::new(&s, RngStream::new(0), true);
        let e = encode_text(&mut t, &emb, &enc, &[4, 6, 7]).unwrap();
        assert!(t.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_cells_leaves_f_unchanged() {
        let (s, a) = store_att(2, 2, 3, 10);
        let mut rng = RngStream::new(11);
        let grid = rng.normal_tensor(&[2, 2, 2]);
        let perm = [2usize, 0, 3, 1];
        let mut pd = vec![0.0; 8];
        for ch in 0..2 {
            for (j, &src) in perm.iter().enumerate() {
                pd[ch * 4 + j] = grid.data()[ch * 4 + src];
            }
        }
        let permuted = Tensor::new(vec![2, 2, 2], pd).unwrap();
        let q = rng.normal_tensor(&[1, 2]);
        let h = rng.normal_tensor(&[1, 2]);
        let run = |g: &Tensor| {
            let mut t = Tape::new(&s, RngStream::new(0), false);
            let gv = t.constant(g.clone());
            let qv = t.constant(q.clone());
            let hv = t.constant(h.clone());
            let out = attend_fuse(&mut t, &a, gv, qv, hv).unwrap();
            t.value(out.f).clone()
        };
        let (x, y) = (run(&grid), run(&permuted));
        for (p, r) in x.data().iter().zip(y.data()) {
            assert!((p - r).abs() < 1e-12);
        }
    }
}
