//! Small building blocks composed from graph ops.

use super::params::{ParamId, ParamStore, Tape};
use super::{Along, Binary, Graph, RngStream, Tensor, Var};
use crate::error::{Error, Result};

/// Glorot-uniform initialised tensor.
pub fn glorot(rng: &mut RngStream, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (2.0 * rng.uniform() - 1.0) * limit)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches")
}

/// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.broadcast(Binary::Add, y, b, Along::Rows)
}

/// Fully connected layer.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut RngStream,
    ) -> Self {
        Linear {
            w: store.add(
                format!("{name}.w"),
                glorot(rng, &[input, output], input, output),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[output])),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (t.p(self.w), t.p(self.b));
        affine(t, x, w, b)
    }
}

/// One LSTM step.
///
/// `x: [n, in]`, `h, c: [n, hid]`, `w: [in + hid, 4·hid]`, `b: [4·hid]`.
/// Gate columns are ordered input, forget, output, candidate.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let (xs, hs, cs, ws) = (
        g.shape(x).to_vec(),
        g.shape(h).to_vec(),
        g.shape(c).to_vec(),
        g.shape(w).to_vec(),
    );
    let ok = xs.len() == 2
        && hs.len() == 2
        && hs == cs
        && xs[0] == hs[0]
        && ws.len() == 2
        && ws[0] == xs[1] + hs[1]
        && ws[1] == 4 * hs[1]
        && g.value(b).numel() == ws[1];
    if !ok {
        return Err(Error::shape(format!(
            "lstm_cell: x {xs:?}, h {hs:?}, c {cs:?}, w {ws:?}, b {:?}",
            g.shape(b)
        )));
    }
    let hid = hs[1];
    let xh = g.concat(&[x, h], 1)?;
    let gates = affine(g, xh, w, b)?;
    let i = g.slice(gates, 1, 0, hid)?;
    let f = g.slice(gates, 1, hid, hid)?;
    let o = g.slice(gates, 1, 2 * hid, hid)?;
    let cand = g.slice(gates, 1, 3 * hid, hid)?;
    let (i, f, o, cand) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(cand));
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Runs [`lstm_cell`] over `xs` and returns every hidden state.
pub fn lstm_unroll(
    g: &mut Graph,
    xs: &[Var],
    h0: Var,
    c0: Var,
    w: Var,
    b: Var,
) -> Result<Vec<(Var, Var)>> {
    let (mut h, mut c) = (h0, c0);
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        (h, c) = lstm_cell(g, x, h, c, w, b)?;
        out.push((h, c));
    }
    Ok(out)
}

/// LSTM parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Self {
        let w = glorot(rng, &[input + hidden, 4 * hidden], input + hidden, hidden);
        let mut b = Tensor::zeros(&[4 * hidden]);
        // forget gate starts open
        b.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        LstmParams {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), b),
            input,
            hidden,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;

    #[test]
    fn zero_weights_give_zero_hidden() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.5, -2.0, 1.0]).unwrap());
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let c = g.constant(Tensor::zeros(&[1, 2]));
        let w = g.constant(Tensor::zeros(&[5, 8]));
        let b = g.constant(Tensor::zeros(&[8]));
        let (h1, _) = lstm_cell(&mut g, x, h, c, w, b).unwrap();
        assert_eq!(g.value(h1).data(), &[0.0, 0.0]);
    }

    #[test]
    fn unroll_of_one_equals_cell() {
        let mut rng = RngStream::new(9);
        let mut g = Graph::new();
        let x = g.constant(rng.normal_tensor(&[1, 3]));
        let h = g.constant(rng.normal_tensor(&[1, 2]));
        let c = g.constant(rng.normal_tensor(&[1, 2]));
        let w = g.constant(rng.normal_tensor(&[5, 8]));
        let b = g.constant(rng.normal_tensor(&[8]));
        let (h1, c1) = lstm_cell(&mut g, x, h, c, w, b).unwrap();
        let seq = lstm_unroll(&mut g, &[x], h, c, w, b).unwrap();
        assert_eq!(g.value(seq[0].0), g.value(h1));
        assert_eq!(g.value(seq[0].1), g.value(c1));
    }

    #[test]
    fn mismatched_hidden_is_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let c = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[5, 8]));
        let b = g.constant(Tensor::zeros(&[8]));
        assert!(matches!(
            lstm_cell(&mut g, x, h, c, w, b),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unroll_gradient_length_four() {
        let mut rng = RngStream::new(11);
        let inputs: Vec<Tensor> = vec![
            rng.normal_tensor(&[4, 3]),
            rng.normal_tensor(&[5, 8]).map(|v| 0.5 * v),
            rng.normal_tensor(&[8]),
        ];
        let err = check_gradients(
            |g, v| {
                let xs: Vec<Var> = (0..4)
                    .map(|t| g.slice(v[0], 0, t, 1))
                    .collect::<Result<_>>()?;
                let h0 = g.constant(Tensor::zeros(&[1, 2]));
                let c0 = g.constant(Tensor::zeros(&[1, 2]));
                let states = lstm_unroll(g, &xs, h0, c0, v[1], v[2])?;
                let last = states.last().unwrap().0;
                let sq = g.square(last);
                Ok(g.sum(sq))
            },
            &inputs,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
