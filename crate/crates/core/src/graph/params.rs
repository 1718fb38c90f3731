use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::lipnorm::frobenius_tape;
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices, bound to a tape as leaves on every forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    /// Replaces a parameter by name; the shape must not change.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self.id(name).ok_or_else(|| contract(format!("no parameter named `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            let (r, c) = self.values[id.0].shape();
            return Err(contract(format!("parameter `{name}` is {r}x{c}")));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn bind(&self, t: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| t.leaf(v.clone())).collect()
    }
}

/// Hidden-layer widths of a multilayer perceptron; input and output widths come from context.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
}

impl MlpSpec {
    pub fn linear() -> Self {
        Self { hidden: Vec::new() }
    }

    pub fn with_hidden(hidden: &[usize]) -> Self {
        Self { hidden: hidden.to_vec() }
    }
}

/// Affine layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        spec: &MlpSpec,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let dims: Vec<usize> = std::iter::once(input).chain(spec.hidden.iter().copied()).chain([output]).collect();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add(format!("{prefix}.{i}.weight"), Matrix::glorot(w[0], w[1], rng));
                let bias = store.add(format!("{prefix}.{i}.bias"), Matrix::zeros(1, w[1]));
                (weight, bias)
            })
            .collect();
        Self { layers }
    }

    /// `x` has one row per sample.
    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = t.relu(h);
            }
            let y = t.matmul(h, p[w.0])?;
            h = t.add(y, p[b.0])?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.layers.iter().map(|&(w, _)| w).collect()
    }

    /// Product of weight Frobenius norms, an upper bound on the Lipschitz
    /// constant of the map (ReLU is 1-Lipschitz).
    pub fn lipschitz_upper_tape(&self, t: &mut Tape, p: &[Var]) -> Result<Var> {
        let mut acc = t.leaf(Matrix::scalar(1.0));
        for w in self.weight_ids() {
            let n = frobenius_tape(t, p[w.0]);
            acc = t.mul(acc, n)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::zeros(2, 3));
        assert!(s.set("w", Matrix::zeros(3, 2)).is_err());
        assert!(s.set("missing", Matrix::zeros(2, 3)).is_err());
        s.set("w", Matrix::filled(2, 3, 1.0)).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()).sum(), 6.0);
    }

    #[test]
    fn mlp_identity_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let mlp = Mlp::new(&mut s, "theta", 2, &MlpSpec::linear(), 2, &mut rng);
        s.set("theta.0.weight", Matrix::identity(2)).unwrap();
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let x = t.leaf(Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let y = mlp.forward(&mut t, &p, x).unwrap();
        assert_eq!(t.value(y).as_slice(), &[1.0, -2.0]);
        assert_eq!(mlp.param_ids().len(), 2);
    }
}
