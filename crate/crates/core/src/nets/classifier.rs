use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::Init;
use super::*;

/// Three fully connected layers with ReLU, dropout after the first two, and
/// a softmax output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    /// `N·K`.
    pub input_len: usize,
    pub hidden: [usize; 2],
    pub n_classes: usize,
    pub dropout: f64,
}

impl ClassifierArch {
    pub fn new(input_len: usize, n_classes: usize) -> Self {
        ClassifierArch {
            input_len,
            hidden: [64, 32],
            n_classes,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.hidden.contains(&0) || self.n_classes < 2 {
            return Err(Error::Config(format!("classifier layout {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut init = Init { rng, gain: 1.0 };
        let dims = [self.input_len, self.hidden[0], self.hidden[1], self.n_classes];
        for (i, w) in dims.windows(2).enumerate() {
            ps.insert(format!("fc{}.weight", i + 1), init.he(&[w[1], w[0]], w[0]));
            ps.insert(format!("fc{}.bias", i + 1), Tensor::zeros(&[w[1]]));
        }
        ps
    }

    /// Maps an `N·K` feature vector to class probabilities. Dropout is
    /// applied only when `dropout_rng` is given (training mode).
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        if g.shape(x) != [self.input_len] {
            return Err(Error::Shape(format!(
                "classifier expects a {}-vector, got {:?}",
                self.input_len,
                g.shape(x)
            )));
        }
        let mut h = x;
        for i in 1..=3 {
            h = g.linear(h, p.var(&format!("fc{i}.weight")), p.var(&format!("fc{i}.bias")))?;
            if i < 3 {
                h = g.relu(h);
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let keep = 1.0 - self.dropout;
                    let scale: T = crate::tensor::cast(1.0 / keep);
                    let mask = (0..g.shape(h)[0])
                        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                        .collect();
                    h = g.mask(h, mask);
                }
            }
        }
        Ok(g.softmax(h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub params: ParamSet,
}

impl Classifier {
    pub fn init<R: Rng>(arch: ClassifierArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = arch.init_params(rng);
        Ok(Classifier { arch, params })
    }

    /// Eval-mode class probabilities.
    pub fn predict(&self, features: &[f32]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::from_vec(&[features.len()], features.to_vec())?);
        let y = self.arch.forward::<f32, rand::rngs::SmallRng>(&mut g, &p, x, None)?;
        Ok(g.value(y).data().to_vec())
    }
}
