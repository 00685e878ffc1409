//! Named parameter storage and the per-forward tape that binds it.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use super::{io as tio, Gradients, Graph, RngStream, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value.with_requires_grad(true));
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.values.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `grads` into each tensor's gradient slot.
    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        for (id, g) in &grads.0 {
            self.values[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Writes `param <name>` followed by the tensor in text form, per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            for (n, t) in self.names.iter().zip(&self.values) {
                writeln!(w, "param {n}")?;
                tio::write_text(t, &mut w)?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = BufReader::new(file).lines();
        let mut store = ParamStore::new();
        while let Some(line) = lines.next() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let name = line
                .strip_prefix("param ")
                .ok_or_else(|| parse(format!("expected `param <name>`, found {line:?}")))?
                .to_string();
            let header = lines
                .next()
                .ok_or_else(|| parse(format!("missing tensor for {name}")))?
                .map_err(|e| Error::io(path, e))?;
            let shape = tio::parse_header(&header).map_err(parse)?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = lines
                    .next()
                    .ok_or_else(|| parse(format!("truncated tensor {name}")))?
                    .map_err(|e| Error::io(path, e))?;
                data.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| parse(format!("{name}: {e}")))?,
                );
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

/// Gradients of one loss wrt the parameters bound on a tape.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads(Vec<(ParamId, Vec<f64>)>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.0.iter().map(|(i, g)| (*i, g.as_slice()))
    }

    pub fn into_map(self) -> HashMap<ParamId, Vec<f64>> {
        self.0.into_iter().collect()
    }
}

/// A [`Graph`] plus lazily bound parameters, a random stream, and the
/// dropout switch. Dereferences to the graph.
#[derive(Debug)]
pub struct Tape<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub rng: RngStream,
    /// Whether dropout layers sample masks (training, or MC evaluation).
    pub stochastic: bool,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore, rng: RngStream, stochastic: bool) -> Self {
        Tape {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            rng,
            stochastic,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Graph node for parameter `id`, recorded on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn collect(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads(
            self.bindings()
                .into_iter()
                .filter_map(|(id, v)| grads.get(v).map(|g| (id, g.to_vec())))
                .collect(),
        )
    }

    /// Backward from `loss` and gather parameter gradients.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.graph.backward(loss)?;
        Ok(self.collect(&grads))
    }
}

impl Deref for Tape<'_> {
    type Target = Graph;
    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Tape<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_lazy_and_shared() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = s.add("b", Tensor::scalar(3.0));
        let mut t = Tape::new(&s, RngStream::new(0), false);
        let x = t.p(a);
        assert_eq!(t.p(a), x);
        let y = t.mul(x, x).unwrap();
        let l = t.sum(y);
        let g = t.param_grads(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[2.0, 4.0]);
        assert!(g.get(b).is_none());
        s.accumulate(&g).unwrap();
        assert_eq!(s.get(a).grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn save_load_roundtrip() {
        let mut s = ParamStore::new();
        s.add(
            "enc.w",
            Tensor::new(vec![2, 2], vec![0.1, -0.2, 1e-17, 3.5]).unwrap(),
        );
        s.add("bias", Tensor::scalar(std::f64::consts::PI));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        s.save(&p).unwrap();
        let back = ParamStore::load(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.name(ParamId(0)), "enc.w");
        assert_eq!(back.get(ParamId(0)).data(), s.get(ParamId(0)).data());
        assert_eq!(back.get(ParamId(1)).item(), std::f64::consts::PI);
    }
}
